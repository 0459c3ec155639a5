#include <algorithm>
#include <cmath>
#include <numeric>

#include "coattn/attnmap.hpp"
#include "coattn/random.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace coattn;

namespace {

CoAttentionTrace random_trace(std::size_t layers, std::size_t heads, std::size_t n, std::size_t t, Rng& rng) {
  CoAttentionTrace tr;
  tr.layers = layers;
  tr.heads = heads;
  for (std::size_t i = 0; i < layers * heads; ++i) {
    Matrix p(n, t);
    for (auto& v : p.data()) v = uniform01(rng);
    tr.lang_to_region.push_back(p);
    tr.region_to_lang.push_back(Matrix(t, n, 1.0 / static_cast<double>(n)));
  }
  return tr;
}

RegionSet boxes_only(std::vector<Box> boxes, int w, int h) {
  RegionSet rs;
  rs.image_width = w;
  rs.image_height = h;
  for (const Box& b : boxes) rs.regions.push_back({b, {}, 0.0});
  return rs;
}

}  // namespace

TEST_CASE("head and word averaging") {
  Vocabulary v = Vocabulary::build({"red circle here"});
  Rng rng(4);

  TokenSequence one = v.encode("red");
  CoAttentionTrace t1 = random_trace(1, 1, one.size(), 3, rng);
  RegionAttention a1 = average_heads_and_words(t1, 1, one, boxes_only({{0, 0, 1, 1}, {0, 0, 2, 2}, {1, 1, 2, 2}}, 4, 4));
  for (std::size_t j = 0; j < 3; ++j) CHECK(a1.values[j] == t1.l2r(1, 0)(1, j));

  TokenSequence seq = v.encode("red circle here");
  RegionSet rs = boxes_only({{0, 0, 1, 1}, {0, 0, 2, 2}, {1, 1, 2, 2}, {2, 2, 4, 4}}, 4, 4);
  CoAttentionTrace same = random_trace(2, 1, seq.size(), 4, rng);
  CoAttentionTrace dup = same;
  dup.heads = 3;
  dup.lang_to_region = {same.lang_to_region[0], same.lang_to_region[0], same.lang_to_region[0],
                        same.lang_to_region[1], same.lang_to_region[1], same.lang_to_region[1]};
  CHECK(average_heads_and_words(dup, 2, seq, rs).values == average_heads_and_words(same, 2, seq, rs).values);

  CoAttentionTrace tr = random_trace(3, 4, seq.size(), 4, rng);
  for (std::size_t layer = 1; layer <= 3; ++layer) {
    RegionAttention a = average_heads_and_words(tr, layer, seq, rs);
    for (std::size_t j = 0; j < 4; ++j) {
      double s = 0.0;
      std::size_t count = 0;
      for (std::size_t h = 0; h < 4; ++h)
        for (std::size_t r = 1; r + 1 < seq.size(); ++r, ++count) s += tr.l2r(layer, h)(r, j);
      CHECK(std::abs(a.values[j] - s / static_cast<double>(count)) < 1e-15);
    }
    CHECK(a.boxes.size() == 4);
  }
}

TEST_CASE("rasterize hand cases") {
  RegionAttention full{1, {1.0}, {{0, 0, 5, 4}}};
  for (double p : rasterize(full, 5, 4).pixels) CHECK(p == 1.0);

  RegionAttention two{1, {0.6, 0.4}, {{0, 0, 4, 4}, {2, 2, 6, 6}}};
  AttentionMap m = rasterize(two, 8, 8);
  CHECK(m.at(3, 3) == 1.0);
  CHECK(m.at(0, 0) == 0.6);
  CHECK(m.at(5, 5) == 0.4);
  CHECK(m.at(7, 7) == 0.0);

  RegionAttention zero{1, {0.0, 0.0}, {{0, 0, 4, 4}, {2, 2, 6, 6}}};
  for (double p : rasterize(zero, 8, 8).pixels) CHECK(p == 0.0);
}

TEST_CASE("rasterize matches brute force on random region sets") {
  Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    RegionAttention att = oracle::random_attention(rng, 48, 40, 12);
    CHECK(rasterize(att, 48, 40).pixels == oracle::brute_rasterize(att, 48, 40).pixels);
  }
}

TEST_CASE("normalize map") {
  AttentionMap c(6, 5, 2.5);
  for (double p : normalize_map(c).pixels) CHECK(p == 1.0);

  AttentionMap m(3, 1);
  m.pixels = {4.0, 2.0, 1.0};
  AttentionMap n = normalize_map(m);
  CHECK(n.pixels == std::vector<double>{1.0, 0.5, 0.25});
  CHECK(n.norm == MapNorm::max1);
  CHECK_FALSE(n.degenerate);

  AttentionMap z(4, 4, 0.0);
  AttentionMap nz = normalize_map(z);
  CHECK(nz.degenerate);
  for (double p : nz.pixels) CHECK(p == 0.0);

  Rng rng(5);
  AttentionMap r(30, 20);
  for (auto& p : r.pixels) p = std::floor(uniform(rng, 0, 9));  // ties on purpose
  AttentionMap rn = normalize_map(r);
  auto order = [](const AttentionMap& mm) {
    std::vector<std::size_t> idx(mm.pixels.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return mm.pixels[a] < mm.pixels[b]; });
    return idx;
  };
  CHECK(order(rn) == order(r));
}

TEST_CASE("downscale to 14x14") {
  Grid14 g = downscale_14x14(AttentionMap(50, 37, 0.75));
  for (double v : g.cells) CHECK(std::abs(v - 0.75) < 1e-12);

  Rng rng(12);
  AttentionMap m28(28, 28);
  for (auto& p : m28.pixels) p = uniform01(rng);
  Grid14 d = downscale_14x14(m28);
  for (int r = 0; r < 14; ++r)
    for (int c = 0; c < 14; ++c) {
      double s = m28.at(2 * c, 2 * r) + m28.at(2 * c + 1, 2 * r) + m28.at(2 * c, 2 * r + 1) + m28.at(2 * c + 1, 2 * r + 1);
      CHECK(std::abs(d.at(c, r) - s / 4.0) < 1e-15);
    }

  AttentionMap m100(100, 100);
  for (auto& p : m100.pixels) p = uniform01(rng);
  Grid14 got = downscale_14x14(m100);
  Grid14 want = oracle::brute_downscale(m100);
  for (std::size_t i = 0; i < kGridCells; ++i) CHECK(std::abs(got.cells[i] - want.cells[i]) < 1e-9);

  CHECK_THROWS(downscale_14x14(AttentionMap(13, 20, 1.0)));
}
