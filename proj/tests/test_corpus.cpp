#include <cmath>
#include <fstream>

#include "coattn/corpus.hpp"
#include "coattn/harness.hpp"
#include "coattn/metrics.hpp"
#include "coattn/random.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace coattn;

namespace {

CorpusConfig small_config(std::size_t pairs) {
  CorpusConfig c;
  c.pairs = pairs;
  c.image_size = 112;
  c.min_object_size = 16;
  c.max_object_size = 36;
  c.blur_sigma = 4.0;
  return c;
}

}  // namespace

TEST_CASE("generation is deterministic and splits 80/20") {
  fs::path a = testutil::scratch_dir("gen_a"), b = testutil::scratch_dir("gen_b");
  CorpusManifest ma = generate_corpus(small_config(40), 5, a);
  generate_corpus(small_config(40), 5, b);
  CHECK(testutil::read_tree(a) == testutil::read_tree(b));
  CHECK(ma.pairs + ma.skipped == 40);
  CHECK(ma.train.size() == static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(ma.pairs))));
  CHECK(ma.train.size() + ma.val.size() == ma.pairs);
}

TEST_CASE("default-size corpus splits exactly 80/20") {
  GenerationResult g = generate_pairs(CorpusConfig{}, 1);
  REQUIRE(g.pairs.size() == 1000);
  std::size_t train = 0;
  for (const auto& p : g.pairs) train += p.qa.split == "train";
  CHECK(train == 800);
}

TEST_CASE("color answers match the rendered target") {
  GenerationResult g = generate_pairs(small_config(120), 9);
  std::size_t checked = 0;
  for (const auto& p : g.pairs) {
    if (p.qa.question.rfind("what color", 0) != 0) continue;
    REQUIRE(p.qa.targets.size() == 1);
    const SceneObject& obj = p.scene.objects[p.qa.targets[0]];
    const PaletteColor& pc = kPalette[static_cast<std::size_t>(obj.color)];
    CHECK(p.qa.answer == pc.name);
    bool visible = false;
    for (int y = obj.box.y0; y < obj.box.y1 && !visible; ++y)
      for (int x = obj.box.x0; x < obj.box.x1 && !visible; ++x) {
        const std::uint8_t* px = p.scene.image.pixel(x, y);
        visible = obj.covers(x + 0.5, y + 0.5) && px[0] == pc.r && px[1] == pc.g && px[2] == pc.b;
      }
    CHECK(visible);
    ++checked;
  }
  CHECK(checked > 20);
}

TEST_CASE("region proposals") {
  GenerationResult g = generate_pairs(small_config(10), 3);
  for (const auto& p : g.pairs) {
    const Scene& s = p.scene;
    ProposalOptions plain;
    plain.distractors = false;
    RegionSet exact = propose_regions(s, s.objects.size(), 1, plain);
    std::vector<Box> got, want;
    for (const auto& r : exact.regions) got.push_back(r.box);
    for (const auto& o : s.objects) want.push_back(o.box);
    auto less = [](const Box& a, const Box& b) { return std::tie(a.x0, a.y0, a.x1, a.y1) < std::tie(b.x0, b.y0, b.x1, b.y1); };
    std::sort(got.begin(), got.end(), less);
    std::sort(want.begin(), want.end(), less);
    CHECK(got == want);

    RegionSet k4 = propose_regions(s, 4, 11), k16 = propose_regions(s, 16, 11);
    for (std::size_t i = 0; i < k4.size(); ++i) {
      CHECK(k4.regions[i].box == k16.regions[i].box);
      CHECK(k4.regions[i].feature == k16.regions[i].feature);
    }
    for (std::size_t i = 1; i < k16.size(); ++i) CHECK(k16.regions[i - 1].objectness >= k16.regions[i].objectness);
    for (const auto& r : k16.regions) CHECK(r.feature.size() == kFeatureDim);
  }
}

TEST_CASE("objectness prefers a box on an object") {
  SceneObject o{Shape::square, 0, {20, 20, 50, 50}, 0};
  std::vector<SceneObject> objs{o};
  CHECK(objectness({20, 20, 50, 50}, objs, 112, 112) > objectness({60, 60, 90, 90}, objs, 112, 112));
  CHECK(objectness({60, 60, 90, 90}, objs, 112, 112) == 0.0);
}

TEST_CASE("full-image geometry channels") {
  Image img(40, 30);
  std::vector<double> f = region_feature(img, {0, 0, 40, 30});
  REQUIRE(f.size() == kFeatureDim);
  CHECK(f[23] == 0.0);
  CHECK(f[24] == 0.0);
  CHECK(f[25] == 1.0);
  CHECK(f[26] == 1.0);
  CHECK(f[27] == 1.0);
}

TEST_CASE("grounding map") {
  std::vector<SceneObject> objs{{Shape::square, 1, {10, 10, 40, 40}, 0}, {Shape::circle, 2, {70, 70, 100, 100}, 1}};
  AttentionMap m = grounding_map(objs, {0}, 112, 112, 4, 4.0);
  CHECK(m.width == 28);
  CHECK(m.height == 28);
  double peak = *std::max_element(m.pixels.begin(), m.pixels.end());
  CHECK(peak == 1.0);
  CHECK(m.at(6, 6) > 0.9);
  CHECK(m.at(21, 21) < 1e-6);
}

TEST_CASE("float map and grid files") {
  fs::path dir = testutil::scratch_dir("maps");
  Rng rng(4);
  AttentionMap m(17, 9);
  for (auto& p : m.pixels) p = static_cast<float>(uniform01(rng));
  write_map(dir / "a.map", m);
  AttentionMap back = read_map(dir / "a.map");
  CHECK(back.width == 17);
  CHECK(back.pixels == m.pixels);

  Grid14 g;
  for (auto& c : g.cells) c = static_cast<float>(uniform01(rng));
  write_grid(dir / "g.map", g);
  CHECK(read_grid(dir / "g.map") == g);

  std::string bytes = testutil::slurp(dir / "a.map");
  std::ofstream(dir / "short.map", std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 3));
  CHECK_THROWS_AS(read_map(dir / "short.map"), DataError);
  std::ofstream(dir / "junk.map", std::ios::binary) << "not a map";
  CHECK_THROWS_AS(read_map(dir / "junk.map"), DataError);
}

TEST_CASE("PGM files") {
  fs::path dir = testutil::scratch_dir("pgm");
  write_pgm(dir / "ones.pgm", AttentionMap(5, 4, 1.0));
  std::string bytes = testutil::slurp(dir / "ones.pgm");
  REQUIRE(bytes.size() >= 20);
  for (std::size_t i = bytes.size() - 20; i < bytes.size(); ++i) CHECK(static_cast<unsigned char>(bytes[i]) == 255);

  Rng rng(13);
  AttentionMap m(31, 23);
  for (auto& p : m.pixels) p = uniform01(rng);
  write_pgm(dir / "r.pgm", m);
  AttentionMap back = read_pgm(dir / "r.pgm");
  for (std::size_t i = 0; i < m.pixels.size(); ++i) CHECK(std::abs(back.pixels[i] - m.pixels[i]) <= 1.0 / 510.0 + 1e-15);
}

TEST_CASE("external loading") {
  fs::path empty = testutil::scratch_dir("empty");
  CorpusView none = load_external(empty);
  CHECK(none.pairs.empty());
  CHECK(none.skipped.empty());

  fs::path root = testutil::scratch_dir("ext");
  CorpusManifest man = generate_corpus(small_config(12), 2, root);
  CorpusView full = load_external(root);
  CHECK(full.pairs.size() == man.pairs);
  CHECK(full.split("train").size() == man.train.size());

  const std::string victim = full.pairs[3].pair_id;
  fs::path ref = root / "refmaps" / (victim + ".map");
  std::string bytes = testutil::slurp(ref);
  std::ofstream(ref, std::ios::binary | std::ios::trunc).write(bytes.data(), 10);
  CorpusView damaged = load_external(root);
  CHECK(damaged.pairs.size() == man.pairs - 1);
  REQUIRE(damaged.skipped.size() == 1);
  CHECK(damaged.skipped[0].pair_id == victim);
  for (const auto& p : damaged.pairs) {
    const CorpusPair* orig = full.find(p.pair_id);
    REQUIRE(orig);
    CHECK(p.reference.pixels == orig->reference.pixels);
    CHECK(p.question == orig->question);
  }
}

TEST_CASE("regions csv round trip") {
  fs::path dir = testutil::scratch_dir("regions");
  GenerationResult g = generate_pairs(small_config(3), 4);
  const RegionSet& rs = g.pairs[0].regions;
  write_regions_csv(dir / "r.csv", rs);
  RegionSet back = read_regions_csv(dir / "r.csv", rs.image_width, rs.image_height);
  REQUIRE(back.size() == rs.size());
  for (std::size_t i = 0; i < rs.size(); ++i) {
    CHECK(back.regions[i].box == rs.regions[i].box);
    CHECK(back.regions[i].feature == rs.regions[i].feature);
    CHECK(back.regions[i].objectness == rs.regions[i].objectness);
  }
}
