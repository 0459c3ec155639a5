#include "coattn/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "coattn/random.hpp"

namespace coattn {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Corpus to model inputs

std::vector<std::string> answer_labels(const CorpusView& corpus) {
  std::set<std::string> labels;
  for (const auto& p : corpus.pairs) labels.insert(p.answer);
  return {labels.begin(), labels.end()};
}

Vocabulary question_vocabulary(const CorpusView& corpus) {
  std::vector<std::string> questions;
  for (const auto& p : corpus.pairs) questions.push_back(p.question);
  return Vocabulary::build(questions);
}

std::vector<TrainExample> make_examples(const CorpusView& corpus, const Vocabulary& vocab,
                                        const std::vector<std::string>& answers, std::string_view split) {
  std::vector<TrainExample> out;
  for (const CorpusPair* p : corpus.split(split)) {
    auto it = std::find(answers.begin(), answers.end(), p->answer);
    if (it == answers.end()) continue;
    out.push_back({vocab.encode(p->question), p->regions, static_cast<std::size_t>(it - answers.begin())});
  }
  return out;
}

ModelConfig default_model_config() {
  ModelConfig c;
  c.feature_dim = kFeatureDim;
  c.dropout_rate = 0.0;
  return c;
}

TrainHyperParams default_hyperparams() {
  TrainHyperParams hp;
  hp.learning_rate = 5e-4;
  hp.epochs = 60;
  hp.dropout_rate = 0.0;
  hp.weight_decay = 0.01;
  hp.feature_noise = 0.05;
  hp.region_counts = {16};
  return hp;
}

Model train_on_corpus(const CorpusView& corpus, const ModelConfig& config, const TrainHyperParams& hp,
                      std::uint64_t seed, std::ostream* log_csv) {
  const auto answers = answer_labels(corpus);
  const Vocabulary vocab = question_vocabulary(corpus);
  const auto train_set = make_examples(corpus, vocab, answers, "train");
  const auto val_set = make_examples(corpus, vocab, answers, "val");
  if (train_set.empty()) throw DataError("corpus " + corpus.root.string() + " has no training pairs");
  ModelConfig c = config;
  c.vocab_size = vocab.size();
  c.answer_vocab_size = answers.size();
  std::size_t longest = 0;
  for (const auto& p : corpus.pairs) longest = std::max(longest, vocab.encode(p.question).size());
  c.max_len = std::max(c.max_len, longest);
  if (log_csv != nullptr) *log_csv << "epoch,loss,train_acc,val_acc\n" << std::flush;
  return train(c, vocab, answers, train_set, val_set, hp, seed, [&](const EpochLog& e) {
    if (log_csv == nullptr) return;
    char buf[128];
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f\n", e.epoch, e.loss, e.train_acc, e.val_acc);
    *log_csv << buf << std::flush;
  });
}

// ---------------------------------------------------------------------------
// Parsing helpers

std::vector<std::size_t> parse_count_list(const std::string& text, const std::string& what) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || v < 1) throw UsageError(what + ": expected positive integers, got '" + item + "'");
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw UsageError(what + ": empty list");
  return out;
}

std::vector<Condition> parse_condition_list(const std::string& text) {
  std::vector<Condition> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if (item == "pos-drop:all") {
      for (PosCategory c : kAllPosCategories) out.push_back({Condition::Kind::pos_drop, c});
      continue;
    }
    try {
      out.push_back(Condition::parse(item));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  if (out.empty()) throw UsageError("conditions: empty list");
  return out;
}

// ---------------------------------------------------------------------------
// Probe

void ProbeRun::validate() const {
  if (conditions.empty()) throw UsageError("probe: at least one condition is required");
  if (region_counts.empty()) throw UsageError("probe: at least one region count is required");
  for (auto k : region_counts)
    if (k == 0) throw UsageError("probe: region counts must be >= 1");
  for (auto l : layers)
    if (l == 0) throw UsageError("probe: layers are 1-based");
  if (workers == 0) throw UsageError("probe: workers must be >= 1");
  if (split != "train" && split != "val" && split != "all") throw UsageError("probe: split must be train, val or all");
}

std::string_view to_string(ProbeStatus s) {
  switch (s) {
    case ProbeStatus::ok: return "ok";
    case ProbeStatus::excluded: return "excluded";
    case ProbeStatus::degenerate: return "degenerate";
  }
  return "ok";
}

namespace {

ProbeStatus parse_status(const std::string& s) {
  if (s == "ok") return ProbeStatus::ok;
  if (s == "excluded") return ProbeStatus::excluded;
  if (s == "degenerate") return ProbeStatus::degenerate;
  throw DataError("unknown probe status '" + s + "'");
}

/// Derangement of the selected pairs, keyed by image pair id.
std::map<std::string, const CorpusPair*> unrelated_sources(const std::vector<const CorpusPair*>& selected,
                                                           std::uint64_t base_seed) {
  std::map<std::string, const CorpusPair*> out;
  if (selected.size() < 2) return out;
  const auto perm = make_unrelated_pairs(selected.size(), derive_seed(base_seed, "unrelated"));
  for (std::size_t i = 0; i < selected.size(); ++i) out[selected[i]->pair_id] = selected[perm[i]];
  return out;
}

}  // namespace

PerturbedQuestion perturb_question(const Vocabulary& vocab, const CorpusPair& pair, const Condition& condition,
                                   std::uint64_t base_seed, const CorpusPair* unrelated_source) {
  PerturbedQuestion out;
  out.sequence = vocab.encode(pair.question);
  out.source_pair = pair.pair_id;
  switch (condition.kind) {
    case Condition::Kind::normal:
      break;
    case Condition::Kind::shuffled: {
      out.seed = derive_seed(base_seed, "shuffle:" + pair.pair_id);
      out.sequence = shuffle_words(out.sequence, *out.seed).sequence;
      break;
    }
    case Condition::Kind::unrelated: {
      if (unrelated_source == nullptr) throw DataError("unrelated condition needs at least two pairs");
      out.seed = derive_seed(base_seed, "unrelated");
      out.sequence = vocab.encode(unrelated_source->question);
      out.source_pair = unrelated_source->pair_id;
      break;
    }
    case Condition::Kind::pos_drop: {
      const DropResult d = drop_pos(pos_tag(out.sequence), *condition.category);
      out.sequence = d.sequence;
      if (d.degenerate) {
        out.status = ProbeStatus::degenerate;
      } else if (!d.dropped_any) {
        out.status = ProbeStatus::excluded;
      }
      break;
    }
  }
  return out;
}

std::string condition_dir(const std::string& label) {
  std::string out = label;
  std::replace(out.begin(), out.end(), ':', '_');
  return out;
}

fs::path grid_path(const fs::path& out, const std::string& condition, std::size_t region_count,
                   const std::string& pair_id, std::size_t layer) {
  return out / "maps" / condition_dir(condition) / ("k" + std::to_string(region_count)) /
         (pair_id + "_m" + std::to_string(layer) + ".map");
}

namespace {

std::vector<std::size_t> resolve_layers(const std::vector<std::size_t>& requested, std::size_t available) {
  std::vector<std::size_t> layers = requested;
  if (layers.empty()) {
    for (std::size_t l = 1; l <= available; ++l) layers.push_back(l);
  }
  for (auto l : layers) {
    if (l == 0 || l > available) {
      throw UsageError("layer " + std::to_string(l) + " out of range 1.." + std::to_string(available));
    }
  }
  return layers;
}

std::string join_text(const TokenSequence& seq) {
  std::string out;
  for (const auto& t : seq.tokens) {
    if (t.is_special) continue;
    if (!out.empty()) out += ' ';
    out += t.text;
  }
  return out;
}

}  // namespace

ProbeResult probe(const Model& model, const CorpusView& corpus, const ProbeRun& run) {
  run.validate();
  ProbeResult result;
  result.layers = resolve_layers(run.layers, model.config().co_layers);
  const auto selected = corpus.split(run.split);
  const bool wants_unrelated = std::any_of(run.conditions.begin(), run.conditions.end(),
                                           [](const Condition& c) { return c.kind == Condition::Kind::unrelated; });
  if (wants_unrelated && selected.size() < 2) {
    throw DataError("unrelated condition needs at least two pairs in split '" + run.split + "'");
  }
  const auto sources = unrelated_sources(selected, run.seed);

  std::vector<std::vector<ProbeRecord>> per_pair(selected.size());
  std::vector<std::vector<std::string>> per_pair_warnings(selected.size());
  auto work = [&](std::size_t index) {
    const CorpusPair& pair = *selected[index];
    auto src = sources.find(pair.pair_id);
    for (const Condition& cond : run.conditions) {
      const PerturbedQuestion pq = perturb_question(model.vocab(), pair, cond, run.seed,
                                                    src == sources.end() ? nullptr : src->second);
      for (std::size_t k : run.region_counts) {
        ProbeRecord rec;
        rec.pair_id = pair.pair_id;
        rec.condition = cond.label();
        rec.region_count = k;
        rec.status = pq.status;
        rec.question = join_text(pq.sequence);
        rec.source_pair = pq.source_pair;
        rec.seed = pq.seed;
        rec.answer = pair.answer;
        if (k > pair.regions.size()) {
          per_pair_warnings[index].push_back(pair.pair_id + ": only " + std::to_string(pair.regions.size()) +
                                             " regions available for k=" + std::to_string(k));
        }
        if (pq.status != ProbeStatus::degenerate) {
          const RegionSet regions = pair.regions.top(k);
          const ForwardResult fwd = model.forward(pq.sequence, regions);
          std::size_t best = 0;
          for (std::size_t j = 1; j < fwd.logits.cols(); ++j)
            if (fwd.logits(0, j) > fwd.logits(0, best)) best = j;
          rec.predicted = model.answers().at(best);
          rec.confidence = softmax_rows(fwd.logits)(0, best);
          for (std::size_t layer : result.layers) {
            LayerMaps maps = build_layer_maps(fwd.trace, layer, pq.sequence, regions);
            if (maps.normalized.degenerate) {
              per_pair_warnings[index].push_back(pair.pair_id + " " + rec.condition + " k=" + std::to_string(k) +
                                                 " layer " + std::to_string(layer) + ": degenerate map");
            }
            // Grids go through the float32 file format; round here so memory and disk agree.
            for (double& v : maps.grid.cells) v = static_cast<double>(static_cast<float>(v));
            rec.grids.push_back(maps.grid);
            if (run.full_maps) rec.full.push_back(std::move(maps.normalized));
          }
        }
        per_pair[index].push_back(std::move(rec));
      }
    }
  };

  const std::size_t workers = std::min(run.workers, std::max<std::size_t>(1, selected.size()));
  if (workers <= 1) {
    for (std::size_t i = 0; i < selected.size(); ++i) work(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = next++; i < selected.size(); i = next++) work(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  // Order: condition (as requested), region count (as requested), pair id.
  for (std::size_t c = 0; c < run.conditions.size(); ++c) {
    for (std::size_t ki = 0; ki < run.region_counts.size(); ++ki) {
      for (std::size_t i = 0; i < selected.size(); ++i) {
        result.records.push_back(per_pair[i][c * run.region_counts.size() + ki]);
      }
    }
  }
  for (auto& w : per_pair_warnings) result.warnings.insert(result.warnings.end(), w.begin(), w.end());
  return result;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> parse_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::ofstream open_text(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  return os;
}

std::string fixed6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

void write_probe(const ProbeResult& result, const ProbeRun& run) {
  fs::create_directories(run.out);
  auto records = open_text(run.out / "records.csv");
  records << "pair_id,condition,region_count,status,source_pair,seed,predicted,answer,correct,confidence\n";
  std::set<std::pair<std::string, std::string>> seen_questions;
  auto perturbed = open_text(run.out / "perturbed.jsonl");
  for (const auto& rec : result.records) {
    records << csv_field(rec.pair_id) << ',' << rec.condition << ',' << rec.region_count << ','
            << to_string(rec.status) << ',' << csv_field(rec.source_pair) << ','
            << (rec.seed ? std::to_string(*rec.seed) : "") << ',' << csv_field(rec.predicted) << ','
            << csv_field(rec.answer) << ',' << (rec.status == ProbeStatus::degenerate ? "" : rec.correct() ? "1" : "0")
            << ',' << (rec.status == ProbeStatus::degenerate ? "" : fixed6(rec.confidence)) << '\n';
    if (seen_questions.insert({rec.pair_id, rec.condition}).second) {
      json line = {{"pair_id", rec.pair_id}, {"condition", rec.condition}, {"question", rec.question}};
      line["seed"] = rec.seed ? json(*rec.seed) : json(nullptr);
      perturbed << line.dump() << '\n';
    }
    for (std::size_t i = 0; i < rec.grids.size(); ++i) {
      write_grid(grid_path(run.out, rec.condition, rec.region_count, rec.pair_id, result.layers[i]), rec.grids[i]);
    }
    for (std::size_t i = 0; i < rec.full.size(); ++i) {
      write_map(run.out / "full" / condition_dir(rec.condition) / ("k" + std::to_string(rec.region_count)) /
                    (rec.pair_id + "_m" + std::to_string(result.layers[i]) + ".map"),
                rec.full[i]);
    }
  }
  std::vector<std::string> conditions;
  for (const auto& c : run.conditions) conditions.push_back(c.label());
  std::size_t degenerate = 0, excluded = 0;
  for (const auto& r : result.records) {
    degenerate += r.status == ProbeStatus::degenerate;
    excluded += r.status == ProbeStatus::excluded;
  }
  json meta = {
      {"version", 1},
      {"model", run.model_path.string()},
      {"corpus", run.corpus_path.string()},
      {"conditions", conditions},
      {"region_counts", run.region_counts},
      {"layers", result.layers},
      {"seed", run.seed},
      {"split", run.split},
      {"full_maps", run.full_maps},
      {"records", result.records.size()},
      {"degenerate_records", degenerate},
      {"excluded_records", excluded},
      {"warnings", result.warnings},
  };
  auto os = open_text(run.out / "probe.json");
  os << meta.dump(2) << '\n';
}

ProbeResult run_probe(const ProbeRun& run) {
  run.validate();
  if (!fs::exists(run.model_path)) throw DataError("model file not found: " + run.model_path.string());
  const Model model = Model::load(run.model_path);
  const CorpusView corpus = load_external(run.corpus_path);
  ProbeResult result = probe(model, corpus, run);
  for (const auto& s : corpus.skipped) result.warnings.push_back("skipped " + s.pair_id + ": " + s.reason);
  write_probe(result, run);
  return result;
}

// ---------------------------------------------------------------------------
// Eval

const AccuracyRow* EvalReport::find_accuracy(const std::string& condition, std::size_t region_count) const {
  for (const auto& a : accuracy)
    if (a.condition == condition && a.region_count == region_count) return &a;
  return nullptr;
}

namespace {

struct StoredRecord {
  std::string pair_id;
  std::string condition;
  std::size_t region_count = 0;
  ProbeStatus status = ProbeStatus::ok;
  std::string predicted;
  std::string answer;
};

std::vector<StoredRecord> read_records(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("missing probe records " + path.string());
  std::string line;
  std::getline(is, line);
  const auto header = parse_csv_line(line);
  if (header.size() != 10 || header[0] != "pair_id") throw DataError("bad header in " + path.string());
  std::vector<StoredRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = parse_csv_line(line);
    if (f.size() != 10) throw DataError("wrong field count in " + path.string());
    StoredRecord r;
    r.pair_id = f[0];
    r.condition = f[1];
    r.region_count = static_cast<std::size_t>(std::stoull(f[2]));
    r.status = parse_status(f[3]);
    r.predicted = f[6];
    r.answer = f[7];
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace

EvalReport evaluate_probe(const EvalRun& run) {
  const fs::path meta_path = run.probe_dir / "probe.json";
  std::ifstream meta_in(meta_path);
  if (!meta_in) throw DataError("missing " + meta_path.string());
  json meta;
  try {
    meta = json::parse(meta_in);
  } catch (const json::exception& e) {
    throw DataError("malformed " + meta_path.string() + ": " + e.what());
  }
  EvalReport report;
  report.layers = meta.at("layers").get<std::vector<std::size_t>>();
  const auto region_counts = meta.at("region_counts").get<std::vector<std::size_t>>();
  const auto conditions = meta.at("conditions").get<std::vector<std::string>>();
  const auto records = read_records(run.probe_dir / "records.csv");
  const CorpusView corpus = load_external(run.corpus_path);

  // Reference grids for every pair that appears in the probe.
  std::map<std::string, Grid14> reference;
  std::set<std::string> probed;
  for (const auto& r : records) probed.insert(r.pair_id);
  std::vector<std::vector<Grid14>> bound_sets;
  std::map<std::string, std::size_t> answer_counts;
  for (const auto& id : probed) {
    const CorpusPair* p = corpus.find(id);
    if (p == nullptr) continue;
    reference[id] = downscale_14x14(p->reference);
    std::vector<Grid14> refs;
    const bool extra_pair = p->extra_references.size() >= 2;
    if (!extra_pair) refs.push_back(reference[id]);
    for (const auto& m : p->extra_references) refs.push_back(downscale_14x14(m));
    bound_sets.push_back(std::move(refs));
    ++answer_counts[p->answer];
  }

  std::map<std::size_t, std::vector<PairRecord>> pair_records;
  // rho per (condition, k, layer, pair) for the pos-drop pairing.
  std::map<std::tuple<std::string, std::size_t, std::size_t, std::string>, double> rho_of;
  std::set<std::string> missing_ref_pairs;
  for (const auto& r : records) {
    if (r.status == ProbeStatus::excluded) continue;
    auto ref = reference.find(r.pair_id);
    if (ref == reference.end()) {
      missing_ref_pairs.insert(r.pair_id);
      continue;
    }
    for (std::size_t layer : report.layers) {
      PairRecord pr;
      pr.pair_id = r.pair_id;
      pr.condition = r.condition;
      pr.layer = layer;
      if (r.status == ProbeStatus::ok) {
        const fs::path gp = grid_path(run.probe_dir, r.condition, r.region_count, r.pair_id, layer);
        if (!fs::exists(gp)) {
          ++report.missing_maps;
          continue;
        }
        pr.rho = spearman(read_grid(gp), ref->second);
        if (pr.rho) rho_of[{r.condition, r.region_count, layer, r.pair_id}] = *pr.rho;
      }
      pair_records[r.region_count].push_back(std::move(pr));
    }
  }
  report.missing_reference = missing_ref_pairs.size();
  for (auto& [k, recs] : pair_records) {
    if (!recs.empty()) report.by_region_count[k] = aggregate(std::move(recs));
  }

  for (const auto& cond : conditions) {
    for (std::size_t k : region_counts) {
      AccuracyRow row{cond, k, 0, 0};
      for (const auto& r : records) {
        if (r.condition != cond || r.region_count != k || r.status != ProbeStatus::ok) continue;
        ++row.n;
        row.correct += r.predicted == r.answer;
      }
      report.accuracy.push_back(row);
    }
  }

  const bool has_normal = std::find(conditions.begin(), conditions.end(), "normal") != conditions.end();
  for (const auto& cond : conditions) {
    if (!has_normal || cond.rfind("pos-drop:", 0) != 0) continue;
    for (std::size_t k : region_counts) {
      for (std::size_t layer : report.layers) {
        std::vector<double> drops;
        for (const auto& [key, rho] : rho_of) {
          const auto& [c, kk, l, pair] = key;
          if (c != cond || kk != k || l != layer) continue;
          auto base = rho_of.find({"normal", k, layer, pair});
          if (base != rho_of.end()) drops.push_back(base->second - rho);
        }
        const MeanSem ms = mean_sem(drops);
        report.pos_drop.push_back({cond.substr(9), k, layer, ms.n, ms.mean, ms.sem});
      }
    }
  }

  report.random = random_baseline(kGridSide, kGridSide, run.baseline_samples, derive_seed(run.seed, "random-baseline"));
  report.inter_reference = inter_reference(bound_sets);
  std::size_t total = 0, best = 0;
  for (const auto& [answer, count] : answer_counts) {
    total += count;
    if (count > best) {
      best = count;
      report.majority_answer = answer;
    }
  }
  report.majority_rate = total == 0 ? 0.0 : static_cast<double>(best) / static_cast<double>(total);
  return report;
}

namespace {

struct PublishedRow {
  const char* method;
  double rho;
  double sem;
  const char* accuracy;  // fraction, from the published percentage
};

// Published rank-correlation constants, reported as context only.
constexpr PublishedRow kPublishedRows[] = {
    {"Random", 0.000, 0.001, "NA"},     {"SAN-2", 0.249, 0.004, "0.589"},
    {"HieCoAtt-W", 0.246, 0.004, "NA"}, {"HieCoAtt-P", 0.256, 0.004, "0.621"},
    {"HieCoAtt-Q", 0.264, 0.004, "NA"}, {"ViLBERT", 0.434, 0.006, "0.7092"},
    {"Human", 0.618, 0.006, "NA"},
};

struct PublishedAccuracy {
  const char* condition;
  int region_count;
  const char* accuracy;  // fraction, from the published percentage
};

constexpr PublishedAccuracy kPublishedAccuracy[] = {
    {"normal", 36, "0.7657"},   {"normal", 72, "0.7939"},    {"normal", 108, "0.8083"},
    {"shuffled", 36, "0.6020"}, {"unrelated", 36, "0.1080"},
};

}  // namespace

void write_eval(const EvalReport& report, const fs::path& out) {
  fs::create_directories(out);
  for (const auto& [k, rep] : report.by_region_count) {
    auto os = open_text(out / ("report_k" + std::to_string(k) + ".csv"));
    write_report_csv(os, rep);
  }
  auto os = open_text(out / "report.csv");
  os << "condition,region_count,layer,n,mean_rho,sem,degenerate_count,source\n";
  for (const auto& [k, rep] : report.by_region_count) {
    for (const auto& c : rep.cells) {
      os << c.condition << ',' << k << ',' << c.layer << ',' << c.n << ',' << format_value(c.mean) << ','
         << format_value(c.sem) << ',' << c.degenerate << ",computed\n";
    }
  }
  os << "random-baseline,NA,NA," << report.random.n << ',' << format_value(report.random.mean) << ','
     << format_value(report.random.sem) << ',' << report.random.skipped << ",computed\n";
  os << "inter-reference,NA,NA," << report.inter_reference.n << ',' << format_value(report.inter_reference.mean)
     << ',' << format_value(report.inter_reference.sem) << ',' << report.inter_reference.skipped << ",computed\n";
  for (const auto& row : kPublishedRows) {
    os << "published:" << row.method << ",NA,NA,NA," << fixed6(row.rho).substr(0, 5) << ','
       << fixed6(row.sem).substr(0, 5) << ",NA,published\n";
  }

  auto acc = open_text(out / "accuracy.csv");
  acc << "condition,region_count,n,correct,accuracy\n";
  for (const auto& a : report.accuracy) {
    acc << a.condition << ',' << a.region_count << ',' << a.n << ',' << a.correct << ','
        << (a.n == 0 ? std::string("NA") : fixed6(a.accuracy())) << '\n';
  }
  acc << "majority-class:" << csv_field(report.majority_answer) << ",NA,NA,NA," << fixed6(report.majority_rate)
      << '\n';
  for (const auto& row : kPublishedAccuracy) {
    acc << "published:" << row.condition << ',' << row.region_count << ",NA,NA," << row.accuracy << '\n';
  }
  for (const auto& row : kPublishedRows) {
    if (std::string_view(row.accuracy) != "NA") acc << "published:" << row.method << ",NA,NA,NA," << row.accuracy << '\n';
  }

  if (!report.pos_drop.empty()) {
    auto pd = open_text(out / "pos_drop.csv");
    pd << "category,region_count,layer,n,mean_drop,sem\n";
    for (const auto& e : report.pos_drop) {
      pd << e.category << ',' << e.region_count << ',' << e.layer << ',' << e.n << ',' << format_value(e.mean_drop)
         << ',' << format_value(e.sem) << '\n';
    }
  }
}

// ---------------------------------------------------------------------------
// Render

namespace {

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0))); }

}  // namespace

RenderResult render(const Model& model, const CorpusView& corpus, const RenderRun& run) {
  if (run.conditions.empty()) throw UsageError("render: at least one condition is required");
  if (run.region_count == 0) throw UsageError("render: region count must be >= 1");
  const std::size_t layer = run.layer.value_or(model.config().co_layers);
  if (layer == 0 || layer > model.config().co_layers) throw UsageError("render: layer out of range");
  // The unrelated partner is drawn over the whole corpus.
  const auto sources = unrelated_sources(corpus.split("all"), run.seed);
  RenderResult result;
  fs::create_directories(run.out);
  for (const auto& id : run.pair_ids) {
    const CorpusPair* pair = corpus.find(id);
    if (pair == nullptr) {
      result.unknown_pairs.push_back(id);
      continue;
    }
    const Image image = read_ppm(pair->image_path);
    const int w = image.width, h = image.height;
    RenderedPanel panel;
    panel.pair_id = id;
    panel.panel_width = w;
    panel.panel_height = h;
    std::vector<std::vector<std::uint8_t>> panels;

    std::vector<std::uint8_t> lum(static_cast<std::size_t>(w) * h);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::uint8_t* p = image.pixel(x, y);
        lum[static_cast<std::size_t>(y) * w + x] =
            static_cast<std::uint8_t>(std::lround(0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]));
      }
    panels.push_back(std::move(lum));
    panel.panel_labels.push_back("image");
    panel.degenerate.push_back(false);

    const AttentionMap& ref = pair->reference;
    std::vector<std::uint8_t> ref_px(static_cast<std::size_t>(w) * h);
    bool ref_zero = true;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int rx = std::min(ref.width - 1, static_cast<int>(static_cast<long long>(x) * ref.width / w));
        const int ry = std::min(ref.height - 1, static_cast<int>(static_cast<long long>(y) * ref.height / h));
        const double v = ref.at(rx, ry);
        ref_zero &= v == 0.0;
        ref_px[static_cast<std::size_t>(y) * w + x] = to_byte(v);
      }
    panels.push_back(std::move(ref_px));
    panel.panel_labels.push_back("reference");
    panel.degenerate.push_back(ref_zero);

    auto src = sources.find(id);
    for (const Condition& cond : run.conditions) {
      const PerturbedQuestion pq =
          perturb_question(model.vocab(), *pair, cond, run.seed, src == sources.end() ? nullptr : src->second);
      std::vector<std::uint8_t> px(static_cast<std::size_t>(w) * h, 0);
      bool degenerate = pq.status == ProbeStatus::degenerate;
      if (!degenerate) {
        const RegionSet regions = pair->regions.top(run.region_count);
        const ForwardResult fwd = model.forward(pq.sequence, regions);
        const LayerMaps maps = build_layer_maps(fwd.trace, layer, pq.sequence, regions);
        degenerate = maps.normalized.degenerate;
        for (int y = 0; y < h && y < maps.normalized.height; ++y)
          for (int x = 0; x < w && x < maps.normalized.width; ++x)
            px[static_cast<std::size_t>(y) * w + x] = to_byte(maps.normalized.at(x, y));
      }
      panels.push_back(std::move(px));
      panel.panel_labels.push_back(cond.label());
      panel.degenerate.push_back(degenerate);
    }

    const int strip_w = w * static_cast<int>(panels.size());
    std::vector<std::uint8_t> strip(static_cast<std::size_t>(strip_w) * h);
    for (std::size_t i = 0; i < panels.size(); ++i)
      for (int y = 0; y < h; ++y)
        std::copy_n(panels[i].begin() + static_cast<std::ptrdiff_t>(y) * w, w,
                    strip.begin() + static_cast<std::ptrdiff_t>(y) * strip_w + static_cast<std::ptrdiff_t>(i) * w);
    panel.path = run.out / (id + ".pgm");
    write_pgm_bytes(panel.path, strip_w, h, strip);
    result.panels.push_back(std::move(panel));
  }

  auto index = open_text(run.out / "render.csv");
  index << "pair_id,panel,label,degenerate\n";
  for (const auto& p : result.panels)
    for (std::size_t i = 0; i < p.panel_labels.size(); ++i)
      index << p.pair_id << ',' << i << ',' << p.panel_labels[i] << ',' << (p.degenerate[i] ? 1 : 0) << '\n';
  for (const auto& id : result.unknown_pairs) index << csv_field(id) << ",NA,unknown-pair,NA\n";
  return result;
}

RenderResult run_render(const RenderRun& run) {
  if (!fs::exists(run.model_path)) throw DataError("model file not found: " + run.model_path.string());
  const Model model = Model::load(run.model_path);
  const CorpusView corpus = load_external(run.corpus_path);
  return render(model, corpus, run);
}

}  // namespace coattn
