#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "coattn/attnmap.hpp"
#include "coattn/corpus.hpp"
#include "coattn/metrics.hpp"
#include "coattn/model.hpp"
#include "coattn/perturb.hpp"

namespace coattn {

enum ExitCode : int { kExitOk = 0, kExitUsage = 2, kExitData = 3, kExitNumeric = 4 };

/// Invalid command-line arguments or run configuration.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Corpus to model inputs

/// Sorted distinct answers over every pair of the corpus.
std::vector<std::string> answer_labels(const CorpusView& corpus);
/// Vocabulary over every question of the corpus.
Vocabulary question_vocabulary(const CorpusView& corpus);
/// Examples of one split ("train", "val" or "all"); answers unknown to the model are skipped.
std::vector<TrainExample> make_examples(const CorpusView& corpus, const Vocabulary& vocab,
                                        const std::vector<std::string>& answers, std::string_view split);

/// Defaults used by `train` when no flags override them.
ModelConfig default_model_config();
TrainHyperParams default_hyperparams();

/// Trains on the train split and scores the val split each epoch. Each log row is
/// written to `log_csv` (epoch,loss,train_acc,val_acc) as soon as the epoch ends.
Model train_on_corpus(const CorpusView& corpus, const ModelConfig& config, const TrainHyperParams& hp,
                      std::uint64_t seed, std::ostream* log_csv = nullptr);

// ---------------------------------------------------------------------------
// Probe

struct ProbeRun {
  fs::path model_path;
  fs::path corpus_path;
  fs::path out;
  std::vector<Condition> conditions = {Condition{}};
  std::vector<std::size_t> region_counts = {4, 8, 16};
  std::vector<std::size_t> layers;  // empty means every co-attention layer
  std::uint64_t seed = 0;
  std::string split = "val";
  std::size_t workers = 1;
  bool full_maps = false;

  void validate() const;
};

enum class ProbeStatus { ok, excluded, degenerate };
std::string_view to_string(ProbeStatus s);

/// One (pair, condition, region count) probe.
struct ProbeRecord {
  std::string pair_id;
  std::string condition;
  std::size_t region_count = 0;
  ProbeStatus status = ProbeStatus::ok;
  std::string question;       // the question actually fed to the model
  std::string source_pair;    // pair the question came from (differs under unrelated)
  std::optional<std::uint64_t> seed;
  std::string predicted;
  std::string answer;         // gold answer of the image's own pair
  double confidence = 0.0;
  std::vector<Grid14> grids;  // one per probed layer; empty when degenerate
  std::vector<AttentionMap> full;  // normalized full-resolution maps, kept only with full_maps
  bool correct() const { return predicted == answer; }
};

struct ProbeResult {
  std::vector<std::size_t> layers;
  std::vector<ProbeRecord> records;  // sorted by condition order, region count, pair id
  std::vector<std::string> warnings;
};

/// Runs every (pair, condition, region count) of `run` in memory.
ProbeResult probe(const Model& model, const CorpusView& corpus, const ProbeRun& run);
/// Writes maps, records.csv, perturbed.jsonl and probe.json under run.out.
void write_probe(const ProbeResult& result, const ProbeRun& run);
/// Loads model and corpus from the paths in `run`, probes and writes.
ProbeResult run_probe(const ProbeRun& run);

/// Directory name for a condition label ("pos-drop:noun" -> "pos-drop_noun").
std::string condition_dir(const std::string& label);
fs::path grid_path(const fs::path& out, const std::string& condition, std::size_t region_count,
                   const std::string& pair_id, std::size_t layer);

// ---------------------------------------------------------------------------
// Eval

struct EvalRun {
  fs::path probe_dir;
  fs::path corpus_path;  // supplies the reference maps
  fs::path out;
  std::uint64_t seed = 0;
  std::size_t baseline_samples = 10000;
};

struct AccuracyRow {
  std::string condition;
  std::size_t region_count = 0;
  std::size_t n = 0;
  std::size_t correct = 0;
  double accuracy() const { return n == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(n); }
};

/// Paired drop in final-layer rho from normal to pos-drop over the pairs included for a category.
struct PosDropEffect {
  std::string category;
  std::size_t region_count = 0;
  std::size_t layer = 0;
  std::size_t n = 0;
  std::optional<double> mean_drop;
  std::optional<double> sem;
};

struct EvalReport {
  std::vector<std::size_t> layers;
  std::map<std::size_t, RankCorrelationReport> by_region_count;
  std::vector<AccuracyRow> accuracy;
  std::vector<PosDropEffect> pos_drop;
  MeanSem random;
  MeanSem inter_reference;
  double majority_rate = 0.0;
  std::string majority_answer;
  std::size_t missing_reference = 0;
  std::size_t missing_maps = 0;

  const AccuracyRow* find_accuracy(const std::string& condition, std::size_t region_count) const;
};

/// Scores a probe directory against the corpus reference maps.
EvalReport evaluate_probe(const EvalRun& run);
/// report.csv, report_k<k>.csv, accuracy.csv, pos_drop.csv.
void write_eval(const EvalReport& report, const fs::path& out);

// ---------------------------------------------------------------------------
// Render

struct RenderRun {
  fs::path model_path;
  fs::path corpus_path;
  fs::path out;
  std::vector<std::string> pair_ids;
  std::vector<Condition> conditions = {Condition{}};
  std::size_t region_count = 16;
  std::optional<std::size_t> layer;  // default: last co-attention layer
  std::uint64_t seed = 0;
};

struct RenderedPanel {
  std::string pair_id;
  fs::path path;
  int panel_width = 0;
  int panel_height = 0;
  std::vector<std::string> panel_labels;
  std::vector<bool> degenerate;  // per panel
};

struct RenderResult {
  std::vector<RenderedPanel> panels;
  std::vector<std::string> unknown_pairs;
};

/// Side-by-side grayscale strip per pair: image luminance, reference map, then one
/// model map per condition. Every panel has the image's size.
RenderResult render(const Model& model, const CorpusView& corpus, const RenderRun& run);
RenderResult run_render(const RenderRun& run);

// ---------------------------------------------------------------------------
// Shared helpers

/// Question fed to the model for `pair` under `condition`. `unrelated_source` is the
/// pair whose question replaces this one under the unrelated condition.
struct PerturbedQuestion {
  TokenSequence sequence;
  std::string source_pair;
  std::optional<std::uint64_t> seed;
  ProbeStatus status = ProbeStatus::ok;
};
PerturbedQuestion perturb_question(const Vocabulary& vocab, const CorpusPair& pair, const Condition& condition,
                                   std::uint64_t base_seed, const CorpusPair* unrelated_source);

/// Parses "1,2,3" into positive integers.
std::vector<std::size_t> parse_count_list(const std::string& text, const std::string& what);
std::vector<Condition> parse_condition_list(const std::string& text);

}  // namespace coattn
