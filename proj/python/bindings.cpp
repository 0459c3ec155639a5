#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <fstream>

#include "coattn/harness.hpp"

namespace py = pybind11;
using namespace coattn;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<double> to_vector(const DoubleArray& a) { return {a.data(), a.data() + a.size()}; }

py::array_t<double> to_array(const std::vector<double>& v, int rows, int cols) {
  py::array_t<double> out({rows, cols});
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

AttentionMap from_array(const DoubleArray& a) {
  if (a.ndim() != 2) throw std::invalid_argument("expected a 2-d array");
  AttentionMap m(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
  m.pixels = to_vector(a);
  return m;
}

Grid14 grid_from_array(const DoubleArray& a) {
  if (a.size() != static_cast<py::ssize_t>(kGridCells)) throw std::invalid_argument("expected 196 values");
  Grid14 g;
  std::copy(a.data(), a.data() + kGridCells, g.cells.begin());
  return g;
}

py::array_t<double> grid_to_array(const Grid14& g) {
  return to_array(std::vector<double>(g.cells.begin(), g.cells.end()), kGridSide, kGridSide);
}

py::dict mean_sem_dict(const MeanSem& m) {
  py::dict d;
  d["mean"] = m.mean;
  d["sem"] = m.sem;
  d["n"] = m.n;
  d["skipped"] = m.skipped;
  return d;
}

const Vocabulary& question_vocab(std::string_view question) {
  thread_local Vocabulary v;
  v = Vocabulary::from_words(tokenize_words(question));
  return v;
}

std::vector<std::string> words_of(const TokenSequence& seq) {
  std::vector<std::string> out;
  for (const auto& t : seq.tokens)
    if (!t.is_special) out.push_back(t.text);
  return out;
}

std::vector<Condition> conditions_from(const std::vector<std::string>& labels) {
  std::vector<Condition> out;
  for (const auto& l : labels) {
    auto parsed = parse_condition_list(l);
    out.insert(out.end(), parsed.begin(), parsed.end());
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_coattn, m) {
  m.doc() = "Co-attention probing toolkit: metrics, attention maps, perturbations and the synth/train/probe/eval pipeline.";

  py::register_exception<DataError>(m, "DataError");
  py::register_exception<NumericError>(m, "NumericError");
  py::register_exception<UsageError>(m, "UsageError");

  // metrics
  m.def("fractional_ranks", [](const DoubleArray& v) { return fractional_ranks(to_vector(v)); });
  m.def(
      "spearman",
      [](const DoubleArray& a, const DoubleArray& b) { return spearman(to_vector(a), to_vector(b)); },
      "Rank correlation with average ranks for ties; None when either input is constant.");
  m.def("mean_sem", [](const DoubleArray& v) { return mean_sem_dict(mean_sem(to_vector(v))); });
  m.def(
      "random_baseline",
      [](std::size_t n, std::uint64_t seed) { return mean_sem_dict(random_baseline(kGridSide, kGridSide, n, seed)); },
      py::arg("n_samples"), py::arg("seed"));

  // attention maps
  m.def(
      "rasterize",
      [](const std::vector<std::array<int, 4>>& boxes, const std::vector<double>& values, int width, int height) {
        if (boxes.size() != values.size()) throw std::invalid_argument("boxes and values differ in length");
        RegionAttention att;
        att.values = values;
        for (const auto& b : boxes) att.boxes.push_back({b[0], b[1], b[2], b[3]});
        return to_array(rasterize(att, width, height).pixels, height, width);
      },
      py::arg("boxes"), py::arg("values"), py::arg("width"), py::arg("height"));
  m.def("normalize_map", [](const DoubleArray& a) {
    AttentionMap n = normalize_map(from_array(a));
    return py::make_tuple(to_array(n.pixels, n.height, n.width), n.degenerate);
  });
  m.def("downscale_14x14", [](const DoubleArray& a) { return grid_to_array(downscale_14x14(from_array(a))); });
  m.def("grid_spearman", [](const DoubleArray& a, const DoubleArray& b) {
    return spearman(grid_from_array(a), grid_from_array(b));
  });

  // perturbations
  m.def(
      "shuffle_question",
      [](const std::string& q, std::uint64_t seed) {
        return words_of(shuffle_words(question_vocab(q).encode(q), seed).sequence);
      },
      py::arg("question"), py::arg("seed"));
  m.def("make_unrelated_pairs", &make_unrelated_pairs, py::arg("count"), py::arg("seed"));
  m.def("pos_tag", [](const std::string& q) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& t : pos_tag(question_vocab(q).encode(q)).tokens)
      if (!t.is_special) out.emplace_back(t.text, t.pos_tag.value_or(""));
    return out;
  });
  m.def(
      "drop_pos",
      [](const std::string& q, const std::string& category) {
        auto cat = parse_pos_category(category);
        if (!cat) throw UsageError("unknown POS category '" + category + "'");
        DropResult r = drop_pos(question_vocab(q).encode(q), *cat);
        return py::make_tuple(words_of(r.sequence), r.included());
      },
      py::arg("question"), py::arg("category"));

  // pipeline
  m.def(
      "synth",
      [](const fs::path& out, std::size_t pairs, std::uint64_t seed, int image_size, std::size_t max_regions) {
        CorpusConfig c;
        c.pairs = pairs;
        c.image_size = image_size;
        c.max_regions = max_regions;
        CorpusManifest man = generate_corpus(c, seed, out);
        py::dict d;
        d["pairs"] = man.pairs;
        d["skipped"] = man.skipped;
        d["train"] = man.train;
        d["val"] = man.val;
        return d;
      },
      py::arg("out"), py::arg("pairs") = 1000, py::arg("seed") = 1, py::arg("image_size") = 224,
      py::arg("max_regions") = 16);
  m.def(
      "train",
      [](const fs::path& corpus, const fs::path& out, std::uint64_t seed, std::optional<std::size_t> epochs,
         std::optional<std::size_t> embed_dim, std::optional<std::size_t> lang_blocks,
         std::optional<std::size_t> co_layers, bool positional) {
        ModelConfig mc = default_model_config();
        TrainHyperParams hp = default_hyperparams();
        if (epochs) hp.epochs = *epochs;
        if (embed_dim) mc.embed_dim = *embed_dim, mc.ffn_dim = 2 * *embed_dim;
        if (lang_blocks) mc.lang_blocks = *lang_blocks;
        if (co_layers) mc.co_layers = *co_layers;
        mc.use_positional_embeddings = positional;
        std::ofstream log(fs::path(out).concat(".log.csv"));
        py::gil_scoped_release release;
        train_on_corpus(load_external(corpus), mc, hp, seed, &log).save(out);
      },
      py::arg("corpus"), py::arg("out"), py::arg("seed") = 1, py::arg("epochs") = py::none(),
      py::arg("embed_dim") = py::none(), py::arg("lang_blocks") = py::none(), py::arg("co_layers") = py::none(),
      py::arg("positional") = true);
  m.def(
      "probe",
      [](const fs::path& model, const fs::path& corpus, const fs::path& out, const std::vector<std::string>& conditions,
         const std::vector<std::size_t>& regions, std::uint64_t seed, const std::string& split, std::size_t workers) {
        ProbeRun r;
        r.model_path = model;
        r.corpus_path = corpus;
        r.out = out;
        r.conditions = conditions_from(conditions);
        r.region_counts = regions;
        r.seed = seed;
        r.split = split;
        r.workers = workers;
        py::gil_scoped_release release;
        return run_probe(r).records.size();
      },
      py::arg("model"), py::arg("corpus"), py::arg("out"), py::arg("conditions") = std::vector<std::string>{"normal"},
      py::arg("regions") = std::vector<std::size_t>{4, 8, 16}, py::arg("seed") = 0, py::arg("split") = "val",
      py::arg("workers") = 1);
  m.def(
      "evaluate",
      [](const fs::path& probe_dir, const fs::path& corpus, const fs::path& out, std::uint64_t seed,
         std::size_t baseline_samples) {
        EvalReport rep;
        {
          py::gil_scoped_release release;
          rep = evaluate_probe({probe_dir, corpus, out, seed, baseline_samples});
          write_eval(rep, out);
        }
        py::list cells;
        for (const auto& [k, report] : rep.by_region_count)
          for (const auto& c : report.cells) {
            py::dict d;
            d["condition"] = c.condition;
            d["region_count"] = k;
            d["layer"] = c.layer;
            d["n"] = c.n;
            d["mean_rho"] = c.mean;
            d["sem"] = c.sem;
            d["degenerate"] = c.degenerate;
            cells.append(d);
          }
        py::dict accuracy;
        for (const auto& a : rep.accuracy) accuracy[py::make_tuple(a.condition, a.region_count)] = a.accuracy();
        py::dict d;
        d["cells"] = cells;
        d["accuracy"] = accuracy;
        d["random"] = mean_sem_dict(rep.random);
        d["inter_reference"] = mean_sem_dict(rep.inter_reference);
        d["majority_rate"] = rep.majority_rate;
        return d;
      },
      py::arg("probe_dir"), py::arg("corpus"), py::arg("out"), py::arg("seed") = 0,
      py::arg("baseline_samples") = 10000);
  m.def(
      "answer",
      [](const fs::path& model_path, const fs::path& corpus, const std::string& pair_id,
         std::optional<std::string> question, std::size_t regions) {
        Model model = Model::load(model_path);
        CorpusView view = load_external(corpus);
        const CorpusPair* p = view.find(pair_id);
        if (p == nullptr) throw DataError("unknown pair " + pair_id);
        Prediction pr = model.answer(model.vocab().encode(question.value_or(p->question)), p->regions.top(regions));
        return py::make_tuple(pr.label, pr.confidence);
      },
      py::arg("model"), py::arg("corpus"), py::arg("pair_id"), py::arg("question") = py::none(),
      py::arg("regions") = 16);
}
