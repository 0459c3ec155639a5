#include <cmath>
#include <fstream>
#include <sstream>

#include "coattn/harness.hpp"
#include "coattn/random.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace coattn;

namespace {

struct Fixture {
  fs::path root;
  fs::path corpus;
  fs::path model_path;
  CorpusView view;
};

// Small corpus plus a briefly trained tiny model, built once for every case below.
const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture x;
    x.root = testutil::scratch_dir("harness");
    x.corpus = x.root / "corpus";
    CorpusConfig cc;
    cc.pairs = 30;
    cc.image_size = 112;
    cc.min_object_size = 16;
    cc.max_object_size = 36;
    cc.blur_sigma = 4.0;
    cc.max_regions = 8;
    generate_corpus(cc, 3, x.corpus);
    x.view = load_external(x.corpus);
    ModelConfig mc = default_model_config();
    mc.embed_dim = 8;
    mc.heads = 2;
    mc.lang_blocks = 2;
    mc.co_layers = 2;
    mc.ffn_dim = 16;
    TrainHyperParams hp = default_hyperparams();
    hp.epochs = 2;
    hp.region_counts = {8};
    hp.eval_region_count = 8;
    train_on_corpus(x.view, mc, hp, 1).save(x.root / "model.bin");
    x.model_path = x.root / "model.bin";
    return x;
  }();
  return f;
}

ProbeRun probe_run(const fs::path& out) {
  ProbeRun r;
  r.model_path = fixture().model_path;
  r.corpus_path = fixture().corpus;
  r.out = out;
  r.conditions = {Condition::parse("normal"), Condition::parse("shuffled")};
  r.region_counts = {4, 8};
  r.seed = 5;
  r.workers = 2;
  return r;
}

std::size_t count_files(const fs::path& dir, const std::string& ext) {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) n += e.path().extension() == ext;
  return n;
}

}  // namespace

TEST_CASE("probe writes one grid per pair, condition, region count and layer") {
  const Fixture& f = fixture();
  fs::path out = testutil::scratch_dir("probe_a");
  ProbeRun run = probe_run(out);
  ProbeResult res = run_probe(run);
  std::size_t pairs = f.view.split("val").size();
  CHECK(res.layers == std::vector<std::size_t>{1, 2});
  CHECK(res.records.size() == pairs * 2 * 2);
  CHECK(count_files(out / "maps", ".map") == pairs * 2 * 2 * 2);
  const std::string id = f.view.split("val").front()->pair_id;
  CHECK(fs::exists(grid_path(out, "normal", 8, id, 1)));
  CHECK(fs::exists(grid_path(out, "normal", 8, id, 2)));
  CHECK(grid_path(out, "normal", 8, id, 2).filename() == id + "_m2.map");
  CHECK_FALSE(fs::exists(grid_path(out, "normal", 8, id, 3)));

  fs::path again = testutil::scratch_dir("probe_b");
  run.out = again;
  run.workers = 1;
  run_probe(run);
  CHECK(testutil::read_tree(out) == testutil::read_tree(again));
}

TEST_CASE("eval of reference maps against themselves and of random maps") {
  const Fixture& f = fixture();
  fs::path out = testutil::scratch_dir("probe_self");
  ProbeRun run = probe_run(out);
  run.conditions = {Condition{}};
  run.region_counts = {8};
  ProbeResult res = run_probe(run);
  for (const auto& r : res.records)
    for (std::size_t l : res.layers) write_grid(grid_path(out, "normal", 8, r.pair_id, l), downscale_14x14(f.view.find(r.pair_id)->reference));
  EvalRun er{out, f.corpus, out / "eval", 1, 200};
  EvalReport self = evaluate_probe(er);
  for (std::size_t l : res.layers) CHECK(*self.by_region_count.at(8).find("normal", l)->mean == doctest::Approx(1.0).epsilon(1e-6));

  Rng rng(42);
  for (const auto& r : res.records)
    for (std::size_t l : res.layers) {
      Grid14 g;
      for (auto& c : g.cells) c = static_cast<float>(uniform01(rng));
      write_grid(grid_path(out, "normal", 8, r.pair_id, l), g);
    }
  EvalReport rnd = evaluate_probe(er);
  for (std::size_t l : res.layers) {
    const CellAggregate* c = rnd.by_region_count.at(8).find("normal", l);
    CHECK(std::abs(*c->mean) < 4.0 * *c->sem);
  }
  write_eval(rnd, er.out);
  std::string report = testutil::slurp(er.out / "report.csv");
  CHECK(report.find("published:Random,NA,NA,NA,0.000,0.001,NA,published\n") != std::string::npos);
  CHECK(report.find("published:ViLBERT,NA,NA,NA,0.434,0.006,NA,published\n") != std::string::npos);
  CHECK(report.find("published:Human,NA,NA,NA,0.618,0.006,NA,published\n") != std::string::npos);
  std::string acc = testutil::slurp(er.out / "accuracy.csv");
  for (const char* row : {"published:normal,36,NA,NA,0.7657", "published:normal,108,NA,NA,0.8083",
                          "published:shuffled,36,NA,NA,0.6020", "published:unrelated,36,NA,NA,0.1080",
                          "published:ViLBERT,NA,NA,NA,0.7092"})
    CHECK(acc.find(row) != std::string::npos);
  CHECK(report.find("random-baseline") != std::string::npos);
  CHECK(fs::exists(er.out / "report_k8.csv"));
  CHECK(fs::exists(er.out / "accuracy.csv"));
}

TEST_CASE("render panels") {
  const Fixture& f = fixture();
  // copy the corpus and blank one reference map
  fs::path corpus = testutil::scratch_dir("render_corpus");
  fs::copy(f.corpus, corpus, fs::copy_options::recursive);
  const std::string blank = f.view.pairs[0].pair_id, other = f.view.pairs[1].pair_id;
  const AttentionMap& ref = f.view.pairs[0].reference;
  write_map(corpus / "refmaps" / (blank + ".map"), AttentionMap(ref.width, ref.height, 0.0));

  RenderRun rr;
  rr.model_path = f.model_path;
  rr.corpus_path = corpus;
  rr.out = testutil::scratch_dir("render_out");
  rr.pair_ids = {blank, "nope", other};
  rr.conditions = {Condition::parse("normal"), Condition::parse("shuffled")};
  rr.region_count = 8;
  rr.seed = 2;
  RenderResult res = run_render(rr);
  CHECK(res.unknown_pairs == std::vector<std::string>{"nope"});
  REQUIRE(res.panels.size() == 2);
  const RenderedPanel& p0 = res.panels[0];
  CHECK(p0.panel_labels == std::vector<std::string>{"image", "reference", "normal", "shuffled"});
  CHECK(p0.degenerate == std::vector<bool>{false, true, false, false});

  AttentionMap strip = read_pgm(p0.path);
  const int w = p0.panel_width, h = p0.panel_height;
  REQUIRE(strip.width == 4 * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) CHECK(strip.at(w + x, y) == 0.0);

  // model panel equals 255 * normalized map of the last layer
  Model model = Model::load(f.model_path);
  const CorpusPair& pair = *f.view.find(blank);
  RegionSet regions = pair.regions.top(8);
  TokenSequence seq = model.vocab().encode(pair.question);
  LayerMaps maps = build_layer_maps(model.forward(seq, regions).trace, 2, seq, regions);
  std::string bytes = testutil::slurp(p0.path);
  const std::size_t offset = bytes.size() - static_cast<std::size_t>(4 * w * h);
  int worst = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int got = static_cast<unsigned char>(bytes[offset + static_cast<std::size_t>(y) * 4 * w + 2 * w + x]);
      int want = static_cast<int>(std::lround(255.0 * maps.normalized.at(x, y)));
      worst = std::max(worst, std::abs(got - want));
    }
  CHECK(worst == 0);
}

TEST_CASE("argument helpers") {
  CHECK(parse_count_list("4,8,16", "regions") == std::vector<std::size_t>{4, 8, 16});
  CHECK_THROWS_AS(parse_count_list("4,0", "regions"), UsageError);
  CHECK_THROWS_AS(parse_count_list("x", "regions"), UsageError);
  CHECK(parse_condition_list("pos-drop:all").size() == 7);
  CHECK(condition_dir("pos-drop:noun") == "pos-drop_noun");
}

TEST_CASE("perturbed questions") {
  const Fixture& f = fixture();
  Vocabulary v = question_vocabulary(f.view);
  const CorpusPair& a = f.view.pairs[0];
  const CorpusPair& b = f.view.pairs[1];
  PerturbedQuestion u = perturb_question(v, a, Condition::parse("unrelated"), 1, &b);
  CHECK(u.source_pair == b.pair_id);
  CHECK(u.sequence == v.encode(b.question));
  PerturbedQuestion s1 = perturb_question(v, a, Condition::parse("shuffled"), 1, nullptr);
  PerturbedQuestion s2 = perturb_question(v, a, Condition::parse("shuffled"), 1, nullptr);
  CHECK(s1.sequence == s2.sequence);
  CHECK(s1.seed == s2.seed);
}
