#include <cmath>
#include <sstream>

#include "coattn/model.hpp"
#include "coattn/random.hpp"
#include "doctest.h"

using namespace coattn;

namespace {

Vocabulary toy_vocab() { return Vocabulary::build({"what color is the big circle", "is the square left of it"}); }

ModelConfig tiny_config(bool positional) {
  ModelConfig c;
  c.embed_dim = 8;
  c.heads = 2;
  c.lang_blocks = 2;
  c.co_layers = 2;
  c.ffn_dim = 12;
  c.vocab_size = toy_vocab().size();
  c.answer_vocab_size = 3;
  c.max_len = 12;
  c.feature_dim = 6;
  c.use_positional_embeddings = positional;
  c.dropout_rate = 0.0;
  return c;
}

RegionSet random_regions(std::size_t t, std::size_t dim, Rng& rng) {
  RegionSet rs;
  rs.image_width = 64;
  rs.image_height = 64;
  for (std::size_t i = 0; i < t; ++i) {
    Region r;
    int x0 = uniform_int(rng, 0, 40), y0 = uniform_int(rng, 0, 40);
    r.box = {x0, y0, x0 + uniform_int(rng, 4, 23), y0 + uniform_int(rng, 4, 23)};
    for (std::size_t d = 0; d < dim; ++d) r.feature.push_back(uniform(rng, -1, 1));
    r.objectness = 1.0 - 0.01 * static_cast<double>(i);
    rs.regions.push_back(r);
  }
  return rs;
}

Model make_model(bool positional, std::uint64_t seed = 4) {
  return Model(tiny_config(positional), toy_vocab(), {"no", "red", "yes"}, seed);
}

}  // namespace

TEST_CASE("question embedding equivariance") {
  Vocabulary v = toy_vocab();
  TokenSequence seq = v.encode("what color is the circle");
  TokenSequence perm = seq;
  std::swap(perm.tokens[1], perm.tokens[4]);
  std::swap(perm.tokens[2], perm.tokens[3]);

  Model plain = make_model(false);
  Matrix a = plain.embed_question(seq), b = plain.embed_question(perm);
  CHECK(a == plain.embed_question(seq));
  std::vector<std::size_t> where{0, 4, 3, 2, 1, 5, 6};
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) CHECK(b(r, c) == a(where[r], c));

  Model pos = make_model(true);
  Matrix pa = pos.embed_question(seq), pb = pos.embed_question(perm);
  bool differs = false;
  for (std::size_t r = 0; r < pa.rows(); ++r)
    for (std::size_t c = 0; c < pa.cols(); ++c) differs |= pb(r, c) != pa(where[r], c);
  CHECK(differs);
}

TEST_CASE("region embedding") {
  Model m = make_model(true);
  Rng rng(2);
  RegionSet rs = random_regions(3, 6, rng);
  rs.regions[2] = rs.regions[0];
  Matrix e = m.embed_regions(rs);
  REQUIRE(e.rows() == 3);
  for (std::size_t c = 0; c < e.cols(); ++c) CHECK(e(0, c) == e(2, c));

  // projection oracle: [feature, x0/W, y0/H, x1/W, y1/H, area/(WH)] * W + b
  const Matrix& w = m.params().value(m.params().index_of("vis_proj.w"));
  const Matrix& b = m.params().value(m.params().index_of("vis_proj.b"));
  const Region& r = rs.regions[1];
  std::vector<double> in = r.feature;
  in.push_back(r.box.x0 / 64.0);
  in.push_back(r.box.y0 / 64.0);
  in.push_back(r.box.x1 / 64.0);
  in.push_back(r.box.y1 / 64.0);
  in.push_back(static_cast<double>(r.box.area()) / (64.0 * 64.0));
  REQUIRE(w.rows() == in.size());
  for (std::size_t c = 0; c < e.cols(); ++c) {
    double s = b(0, c);
    for (std::size_t k = 0; k < in.size(); ++k) s += in[k] * w(k, c);
    CHECK(std::abs(e(1, c) - s) < 1e-12);
  }
}

TEST_CASE("co-attention probabilities") {
  Model m = make_model(true);
  Rng rng(8);
  Vocabulary v = toy_vocab();
  TokenSequence seq = v.encode("is the square left of it");
  ForwardResult one = m.forward(seq, random_regions(1, 6, rng));
  for (const Matrix& p : one.trace.lang_to_region) {
    CHECK(p.cols() == 1);
    for (double x : p.data()) CHECK(x == 1.0);
  }

  RegionSet rs = random_regions(5, 6, rng);
  ForwardResult f = m.forward(seq, rs);
  CHECK(f.trace.lang_to_region.size() == 2 * 2);
  for (const Matrix& p : f.trace.lang_to_region) {
    CHECK(p.rows() == seq.size());
    CHECK(p.cols() == 5);
  }
  for (const auto* set : {&f.trace.lang_to_region, &f.trace.region_to_lang})
    for (const Matrix& p : *set)
      for (std::size_t r = 0; r < p.rows(); ++r) {
        double s = 0.0;
        for (double x : p.row(r)) s += x;
        CHECK(std::abs(s - 1.0) < 1e-9);
      }
  ForwardResult g = m.forward(seq, rs);
  CHECK(g.logits == f.logits);
  CHECK(g.trace.lang_to_region == f.trace.lang_to_region);

  // zero query and key projections give uniform attention
  Model z = make_model(true);
  for (std::size_t l = 1; l <= 2; ++l)
    for (bool side : {true, false}) {
      const auto& p = z.co_attention_params(l, side);
      for (std::size_t id : {p.q_w, p.q_b, p.k_w, p.k_b}) {
        Matrix& w = z.params().value(id);
        w = Matrix(w.rows(), w.cols(), 0.0);
      }
    }
  ForwardResult u = z.forward(seq, rs);
  for (const Matrix& p : u.trace.lang_to_region)
    for (double x : p.data()) CHECK(x == doctest::Approx(0.2).epsilon(1e-15));
  for (const Matrix& p : u.trace.region_to_lang)
    for (double x : p.data()) CHECK(x == doctest::Approx(1.0 / static_cast<double>(seq.size())).epsilon(1e-15));
}

TEST_CASE("shuffling leaves logits unchanged without positional embeddings") {
  Model m = make_model(false);
  Rng rng(1);
  RegionSet rs = random_regions(4, 6, rng);
  Vocabulary v = toy_vocab();
  ForwardResult a = m.forward(v.encode("what color is the big circle"), rs);
  ForwardResult b = m.forward(v.encode("circle the big is what color"), rs);
  for (std::size_t i = 0; i < a.logits.size(); ++i) CHECK(std::abs(a.logits.data()[i] - b.logits.data()[i]) < 1e-9);
}

TEST_CASE("grad check on a single co-attention layer model") {
  ModelConfig c = tiny_config(true);
  c.lang_blocks = 1;
  c.co_layers = 1;
  Model m(c, toy_vocab(), {"no", "red", "yes"}, 21);
  Rng rng(3);
  RegionSet rs = random_regions(3, 6, rng);
  TokenSequence seq = toy_vocab().encode("is it");  // N = 4 with the special tokens
  REQUIRE(seq.size() == 4);
  auto loss = [&](Tape& t) { return t.cross_entropy(m.forward_on_tape(t, seq, rs, nullptr).logits, 1); };
  GradCheckResult r = grad_check(m.params(), loss, 1e-4);
  CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("answer tie rule and confidence") {
  Model m = make_model(true);
  Matrix& hw = m.params().value(m.params().index_of("answer_head.w"));
  Matrix& hb = m.params().value(m.params().index_of("answer_head.b"));
  hw = Matrix(hw.rows(), hw.cols(), 0.0);
  hb = Matrix(hb.rows(), hb.cols(), 0.0);
  Rng rng(6);
  Prediction p = m.answer(toy_vocab().encode("what color is it"), random_regions(3, 6, rng));
  CHECK(p.answer_id == 0);
  CHECK(p.label == "no");
  CHECK(p.confidence == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("training reduces loss and is deterministic") {
  Vocabulary v = toy_vocab();
  Rng rng(17);
  std::vector<TrainExample> ex;
  for (int i = 0; i < 10; ++i)
    ex.push_back({v.encode(i % 2 ? "what color is the circle" : "is the square left of it"), random_regions(4, 6, rng),
                  static_cast<std::size_t>(i % 2)});
  TrainHyperParams hp;
  hp.epochs = 1;
  hp.batch_size = 2;
  hp.learning_rate = 1e-2;
  hp.region_counts = {4};
  hp.eval_region_count = 4;
  Model before(tiny_config(true), v, {"no", "red", "yes"}, 5);
  double initial = evaluate(before, ex, 4).loss;
  Model a = before, b = before;
  train_in_place(a, ex, {}, hp, 5);
  train_in_place(b, ex, {}, hp, 5);
  CHECK(evaluate(a, ex, 4).loss < initial);
  CHECK(a.params() == b.params());
}

TEST_CASE("model file round trip records config") {
  Model m = make_model(false);
  std::stringstream ss;
  m.save(ss);
  Model back = Model::load(ss);
  CHECK_FALSE(back.config().use_positional_embeddings);
  CHECK(back.config() == m.config());
  CHECK(back.params() == m.params());
  CHECK(back.vocab() == m.vocab());

  // the flag word sits in the fixed-size header, so the two files differ there
  std::stringstream with_pos;
  make_model(true).save(with_pos);
  std::string a = ss.str(), b = with_pos.str();
  std::size_t first = 0;
  while (first < a.size() && a[first] == b[first]) ++first;
  CHECK(first < 128);
}
