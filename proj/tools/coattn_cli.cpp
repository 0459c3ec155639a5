#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "coattn/harness.hpp"

namespace {

using namespace coattn;

/// Reads a flat key=value file into "--key value" arguments, skipping keys the
/// command line already sets so that flags override the file.
std::vector<std::string> config_arguments(const std::string& path, const std::vector<std::string>& argv) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot read config file " + path);
  auto given = [&](const std::string& key) {
    const std::string flag = "--" + key;
    for (const auto& a : argv)
      if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
    return false;
  };
  std::vector<std::string> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(path + ":" + std::to_string(line_no) + ": expected key=value");
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t\r") + 1);
      return s;
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || key == "config" || given(key)) continue;
    if (value == "true") {
      out.push_back("--" + key);
    } else if (value != "false") {
      out.push_back("--" + key);
      out.push_back(value);
    }
  }
  return out;
}

bool non_empty_dir(const fs::path& p) { return fs::is_directory(p) && !fs::is_empty(p); }

std::uint64_t parse_seed(const std::string& s) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw UsageError("--seed: expected a non-negative integer, got '" + s + "'");
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  for (std::size_t i = 0; i < args.size(); ++i) {
    std::string path;
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
    } else {
      continue;
    }
    auto extra = config_arguments(path, args);
    args.insert(args.end(), extra.begin(), extra.end());
    break;
  }

  CLI::App app{"Co-attention probing harness"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "Flat key=value file; command-line flags override it");

  std::string seed_text = "1";
  std::string out, corpus_dir, model_path;
  std::string regions_text, conditions_text = "normal", layers_text;
  bool force = false;
  std::size_t workers = 1;

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus");
  CorpusConfig corpus_cfg;
  long long pairs = static_cast<long long>(corpus_cfg.pairs);
  synth->add_option("--out", out, "Corpus directory")->required();
  synth->add_option("--seed", seed_text, "Generation seed");
  synth->add_option("--pairs", pairs, "Number of question/image pairs");
  synth->add_option("--image-size", corpus_cfg.image_size, "Square image side in pixels");
  synth->add_option("--max-regions", corpus_cfg.max_regions, "Proposals stored per image");
  synth->add_option("--blur-sigma", corpus_cfg.blur_sigma, "Reference map blur sigma in image pixels");
  synth->add_flag("--force", force, "Overwrite an existing corpus directory");
  synth->add_option("--config", config_path);

  // train
  auto* train_cmd = app.add_subcommand("train", "Train the toy model on a corpus");
  ModelConfig mcfg = default_model_config();
  TrainHyperParams hp = default_hyperparams();
  bool no_positional = false;
  std::string log_path;
  train_cmd->add_option("--corpus", corpus_dir, "Corpus directory")->required();
  train_cmd->add_option("--out", model_path, "Model file to write")->required();
  train_cmd->add_option("--log", log_path, "Training log CSV (default: <out>.log.csv)");
  train_cmd->add_option("--seed", seed_text, "Initialization and batch-order seed");
  train_cmd->add_option("--epochs", hp.epochs);
  train_cmd->add_option("--lr", hp.learning_rate);
  train_cmd->add_option("--batch", hp.batch_size);
  train_cmd->add_option("--dropout", hp.dropout_rate);
  train_cmd->add_option("--weight-decay", hp.weight_decay);
  train_cmd->add_option("--feature-noise", hp.feature_noise);
  train_cmd->add_option("--grad-clip", hp.grad_clip);
  train_cmd->add_option("--regions", regions_text, "Region counts sampled per step (comma list)");
  train_cmd->add_option("--embed-dim", mcfg.embed_dim);
  train_cmd->add_option("--ffn-dim", mcfg.ffn_dim);
  train_cmd->add_option("--heads", mcfg.heads);
  train_cmd->add_option("--lang-blocks", mcfg.lang_blocks);
  train_cmd->add_option("--co-layers", mcfg.co_layers);
  train_cmd->add_flag("--no-positional", no_positional, "Disable positional embeddings");
  train_cmd->add_flag("--visual-self-attention", mcfg.visual_self_attention);
  train_cmd->add_flag("--force", force, "Overwrite an existing model file");
  train_cmd->add_option("--config", config_path);

  // probe
  auto* probe_cmd = app.add_subcommand("probe", "Write attention maps under each condition");
  ProbeRun probe_run;
  bool full_maps = false;
  std::string split = "val";
  probe_cmd->add_option("--model", model_path)->required();
  probe_cmd->add_option("--corpus", corpus_dir)->required();
  probe_cmd->add_option("--out", out)->required();
  probe_cmd->add_option("--seed", seed_text);
  probe_cmd->add_option("--regions", regions_text, "Region counts (comma list)");
  probe_cmd->add_option("--conditions", conditions_text,
                        "normal, shuffled, unrelated, pos-drop:<category> or pos-drop:all (comma list)");
  probe_cmd->add_option("--layers", layers_text, "Co-attention layers (comma list, default all)");
  probe_cmd->add_option("--split", split, "train, val or all");
  probe_cmd->add_option("--workers", workers);
  probe_cmd->add_flag("--full-maps", full_maps, "Also write full-resolution normalized maps");
  probe_cmd->add_flag("--force", force, "Write into a non-empty output directory");
  probe_cmd->add_option("--config", config_path);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Score probe maps against reference maps");
  std::string probe_dir;
  std::size_t baseline_samples = 10000;
  eval_cmd->add_option("--probe", probe_dir, "Probe output directory")->required();
  eval_cmd->add_option("--corpus", corpus_dir, "Corpus providing reference maps")->required();
  eval_cmd->add_option("--out", out)->required();
  eval_cmd->add_option("--seed", seed_text);
  eval_cmd->add_option("--baseline-samples", baseline_samples);
  eval_cmd->add_flag("--force", force);
  eval_cmd->add_option("--config", config_path);

  // render
  auto* render_cmd = app.add_subcommand("render", "Write side-by-side heatmap panels");
  std::vector<std::string> pair_ids;
  render_cmd->add_option("--model", model_path)->required();
  render_cmd->add_option("--corpus", corpus_dir)->required();
  render_cmd->add_option("--out", out)->required();
  render_cmd->add_option("--pair-ids", pair_ids, "Pair ids to render")->required()->delimiter(',');
  render_cmd->add_option("--conditions", conditions_text);
  render_cmd->add_option("--regions", regions_text, "Single region count (default 16)");
  render_cmd->add_option("--layers", layers_text, "Single layer (default last)");
  render_cmd->add_option("--seed", seed_text);
  render_cmd->add_flag("--force", force);
  render_cmd->add_option("--config", config_path);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }
  const std::uint64_t seed = parse_seed(seed_text);

  if (*synth) {
    if (pairs < 1) throw UsageError("--pairs must be >= 1");
    corpus_cfg.pairs = static_cast<std::size_t>(pairs);
    try {
      corpus_cfg.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    if (non_empty_dir(out)) {
      if (!force) throw UsageError("output directory " + out + " is not empty (use --force)");
      for (const char* entry : {"images", "regions", "refmaps", "questions.jsonl", "manifest.json"})
        fs::remove_all(fs::path(out) / entry);
    }
    const CorpusManifest m = generate_corpus(corpus_cfg, seed, out);
    std::printf("corpus %s: pairs=%zu images=%zu train=%zu val=%zu skipped=%zu seed=%llu\n", out.c_str(), m.pairs,
                m.images, m.train.size(), m.val.size(), m.skipped, static_cast<unsigned long long>(seed));
    return kExitOk;
  }

  if (*train_cmd) {
    if (!regions_text.empty()) hp.region_counts = parse_count_list(regions_text, "--regions");
    hp.eval_region_count = *std::max_element(hp.region_counts.begin(), hp.region_counts.end());
    mcfg.use_positional_embeddings = !no_positional;
    mcfg.dropout_rate = hp.dropout_rate;
    if (fs::exists(model_path) && !force) throw UsageError("model file " + model_path + " exists (use --force)");
    try {
      // vocabulary sizes come from the corpus; check everything else before loading it
      ModelConfig check = mcfg;
      check.vocab_size = 3;
      check.answer_vocab_size = 1;
      check.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    const CorpusView corpus = load_external(corpus_dir);
    for (const auto& s : corpus.skipped) std::fprintf(stderr, "skipped %s: %s\n", s.pair_id.c_str(), s.reason.c_str());
    if (log_path.empty()) log_path = model_path + ".log.csv";
    if (fs::path(model_path).has_parent_path()) fs::create_directories(fs::path(model_path).parent_path());
    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw DataError("cannot write " + log_path);
    const Model model = train_on_corpus(corpus, mcfg, hp, seed, &log);
    model.save(fs::path(model_path));
    std::printf("model %s written; log %s\n", model_path.c_str(), log_path.c_str());
    return kExitOk;
  }

  if (*probe_cmd) {
    probe_run.model_path = model_path;
    probe_run.corpus_path = corpus_dir;
    probe_run.out = out;
    probe_run.conditions = parse_condition_list(conditions_text);
    if (!regions_text.empty()) probe_run.region_counts = parse_count_list(regions_text, "--regions");
    if (!layers_text.empty()) probe_run.layers = parse_count_list(layers_text, "--layers");
    probe_run.seed = seed;
    probe_run.split = split;
    probe_run.workers = workers;
    probe_run.full_maps = full_maps;
    probe_run.validate();
    if (non_empty_dir(out) && !force) throw UsageError("output directory " + out + " is not empty (use --force)");
    if (force) {
      for (const char* entry : {"maps", "full", "records.csv", "perturbed.jsonl", "probe.json"})
        fs::remove_all(fs::path(out) / entry);
    }
    const ProbeResult r = run_probe(probe_run);
    for (const auto& w : r.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
    std::printf("probe %s: %zu records, %zu layers\n", out.c_str(), r.records.size(), r.layers.size());
    return kExitOk;
  }

  if (*eval_cmd) {
    if (baseline_samples < 100) throw UsageError("--baseline-samples must be >= 100");
    if (non_empty_dir(out) && !force) throw UsageError("output directory " + out + " is not empty (use --force)");
    EvalRun er{probe_dir, corpus_dir, out, seed, baseline_samples};
    const EvalReport report = evaluate_probe(er);
    write_eval(report, out);
    if (report.missing_reference > 0) {
      std::fprintf(stderr, "warning: %zu pairs skipped for missing reference maps\n", report.missing_reference);
    }
    for (const auto& a : report.accuracy) {
      std::printf("accuracy %s k=%zu: %.4f (n=%zu)\n", a.condition.c_str(), a.region_count, a.accuracy(), a.n);
    }
    std::printf("random baseline %s, inter-reference %s\n", format_value(report.random.mean).c_str(),
                format_value(report.inter_reference.mean).c_str());
    return kExitOk;
  }

  if (*render_cmd) {
    RenderRun rr;
    rr.model_path = model_path;
    rr.corpus_path = corpus_dir;
    rr.out = out;
    rr.pair_ids = pair_ids;
    rr.conditions = parse_condition_list(conditions_text);
    if (!regions_text.empty()) {
      const auto ks = parse_count_list(regions_text, "--regions");
      if (ks.size() != 1) throw UsageError("render: --regions takes a single count");
      rr.region_count = ks[0];
    }
    if (!layers_text.empty()) {
      const auto ls = parse_count_list(layers_text, "--layers");
      if (ls.size() != 1) throw UsageError("render: --layers takes a single layer");
      rr.layer = ls[0];
    }
    rr.seed = seed;
    const RenderResult r = run_render(rr);
    for (const auto& id : r.unknown_pairs) std::fprintf(stderr, "unknown pair id %s, skipped\n", id.c_str());
    for (const auto& p : r.panels) {
      std::printf("%s:", p.path.c_str());
      for (std::size_t i = 0; i < p.panel_labels.size(); ++i)
        std::printf(" %s%s", p.panel_labels[i].c_str(), p.degenerate[i] ? "(degenerate)" : "");
      std::printf("\n");
    }
    return kExitOk;
  }
  return kExitUsage;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kExitUsage;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitData;
  }
}
