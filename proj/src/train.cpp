#include <algorithm>
#include <cmath>
#include <numeric>

#include "coattn/model.hpp"

namespace coattn {

TrainingDiverged::TrainingDiverged(std::size_t epoch, std::size_t step)
    : NumericError("training diverged: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                   std::to_string(step)),
      epoch_(epoch),
      step_(step) {}

namespace {

std::size_t argmax_row(const Matrix& logits) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < logits.cols(); ++j)
    if (logits(0, j) > logits(0, best)) best = j;
  return best;
}

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
constexpr std::size_t kWarmupSteps = 50;

}  // namespace

EvalSummary evaluate(const Model& model, const std::vector<TrainExample>& examples,
                     std::size_t region_count) {
  EvalSummary s;
  s.n = examples.size();
  if (examples.empty()) return s;
  std::size_t correct = 0;
  double total = 0.0;
  for (const auto& ex : examples) {
    Tape tape(model.params());
    auto f = model.forward_on_tape(tape, ex.question, ex.regions.top(region_count), nullptr);
    total += tape.value(tape.cross_entropy(f.logits, ex.answer))(0, 0);
    if (argmax_row(tape.value(f.logits)) == ex.answer) ++correct;
  }
  s.loss = total / static_cast<double>(examples.size());
  s.accuracy = static_cast<double>(correct) / static_cast<double>(examples.size());
  return s;
}

void train_in_place(Model& model, const std::vector<TrainExample>& train_set,
                    const std::vector<TrainExample>& val_set, const TrainHyperParams& hp,
                    std::uint64_t seed, const std::function<void(const EpochLog&)>& on_epoch) {
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  if (hp.batch_size == 0 || hp.region_counts.empty()) {
    throw std::invalid_argument("train: batch_size and region_counts must be non-empty");
  }
  ParameterStore& params = model.params();
  Rng order_rng(derive_seed(seed, "order"));
  Rng dropout_rng(derive_seed(seed, "dropout"));
  Rng region_rng(derive_seed(seed, "regions"));
  Rng noise_rng(derive_seed(seed, "noise"));
  const DropoutContext ctx{hp.dropout_rate, &dropout_rng};

  std::vector<Matrix> first(params.size()), second(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    first[i] = Matrix(params.value(i).rows(), params.value(i).cols());
    second[i] = first[i];
  }

  std::vector<bool> decays(params.size(), false);
  if (hp.weight_decay > 0.0) {
    for (std::size_t p = 0; p < params.size(); ++p) {
      const std::string& name = params.name(p);
      const bool is_weight = name.ends_with("_w") || name.ends_with(".w") || name.ends_with(".w1") ||
                             name.ends_with(".w2");
      decays[p] = is_weight;
    }
  }

  const std::size_t steps_per_epoch = (train_set.size() + hp.batch_size - 1) / hp.batch_size;
  const std::size_t total_steps = steps_per_epoch * hp.epochs;
  std::size_t step = 0;
  std::vector<std::size_t> order(train_set.size());

  for (std::size_t epoch = 1; epoch <= hp.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    shuffle_range(order.begin(), order.end(), order_rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;

    for (std::size_t start = 0; start < order.size(); start += hp.batch_size) {
      const std::size_t end = std::min(order.size(), start + hp.batch_size);
      params.zero_grad();
      for (std::size_t i = start; i < end; ++i) {
        const TrainExample& ex = train_set[order[i]];
        const std::size_t k = hp.region_counts[uniform_index(region_rng, hp.region_counts.size())];
        RegionSet regions = ex.regions.top(k);
        if (hp.feature_noise > 0.0) {
          for (auto& r : regions.regions)
            for (double& v : r.feature) v += hp.feature_noise * standard_normal(noise_rng);
        }
        Tape tape(params);
        auto f = model.forward_on_tape(tape, ex.question, regions, &ctx);
        Var loss = tape.cross_entropy(f.logits, ex.answer);
        const double value = tape.value(loss)(0, 0);
        if (!std::isfinite(value)) throw TrainingDiverged(epoch, step + 1);
        loss_sum += value;
        if (argmax_row(tape.value(f.logits)) == ex.answer) ++correct;
        tape.backward(loss);
      }
      ++step;

      const double inv_batch = 1.0 / static_cast<double>(end - start);
      double norm_sq = 0.0;
      for (std::size_t p = 0; p < params.size(); ++p) {
        for (double& g : params.grad(p).data()) {
          g *= inv_batch;
          norm_sq += g * g;
        }
      }
      if (!std::isfinite(norm_sq)) throw TrainingDiverged(epoch, step);
      const double norm = std::sqrt(norm_sq);
      const double clip = (hp.grad_clip > 0.0 && norm > hp.grad_clip) ? hp.grad_clip / norm : 1.0;

      const double progress = static_cast<double>(step - 1) / static_cast<double>(std::max<std::size_t>(total_steps, 1));
      const double warm = std::min(1.0, static_cast<double>(step) / static_cast<double>(kWarmupSteps));
      const double lr = hp.learning_rate * warm * (1.0 - 0.9 * progress);
      const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
      for (std::size_t p = 0; p < params.size(); ++p) {
        auto& w = params.value(p).data();
        if (decays[p])
          for (double& v : w) v -= lr * hp.weight_decay * v;
        const auto& g = params.grad(p).data();
        auto& m1 = first[p].data();
        auto& m2 = second[p].data();
        for (std::size_t j = 0; j < w.size(); ++j) {
          const double gj = g[j] * clip;
          m1[j] = kBeta1 * m1[j] + (1.0 - kBeta1) * gj;
          m2[j] = kBeta2 * m2[j] + (1.0 - kBeta2) * gj * gj;
          w[j] -= lr * (m1[j] / bc1) / (std::sqrt(m2[j] / bc2) + kAdamEps);
        }
      }
    }

    EpochLog log;
    log.epoch = epoch;
    log.loss = loss_sum / static_cast<double>(train_set.size());
    log.train_acc = static_cast<double>(correct) / static_cast<double>(train_set.size());
    log.val_acc = val_set.empty() ? 0.0 : evaluate(model, val_set, hp.eval_region_count).accuracy;
    if (on_epoch) on_epoch(log);
  }
  params.zero_grad();
}

Model train(const ModelConfig& config, const Vocabulary& vocab, const std::vector<std::string>& answers,
            const std::vector<TrainExample>& train_set, const std::vector<TrainExample>& val_set,
            const TrainHyperParams& hp, std::uint64_t seed,
            const std::function<void(const EpochLog&)>& on_epoch) {
  ModelConfig c = config;
  c.dropout_rate = hp.dropout_rate;
  Model model(c, vocab, answers, derive_seed(seed, "init"));
  train_in_place(model, train_set, val_set, hp, seed, on_epoch);
  return model;
}

}  // namespace coattn
