#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "coattn/inputs.hpp"
#include "coattn/numerics.hpp"
#include "coattn/random.hpp"

namespace coattn {

/// Width of the normalized box geometry appended to every region feature:
/// x0/W, y0/H, x1/W, y1/H, area fraction.
inline constexpr std::size_t kGeometryDim = 5;

struct ModelConfig {
  std::size_t embed_dim = 32;
  std::size_t heads = 4;
  std::size_t lang_blocks = 6;
  std::size_t co_layers = 6;
  std::size_t ffn_dim = 64;
  std::size_t vocab_size = 0;
  std::size_t answer_vocab_size = 0;
  std::size_t max_len = 24;
  std::size_t feature_dim = 32;
  bool use_positional_embeddings = true;
  bool visual_self_attention = false;
  double dropout_rate = 0.1;
  double layer_norm_eps = 1e-5;

  std::size_t key_dim() const { return embed_dim / heads; }
  /// Throws std::invalid_argument on inconsistent dimensions.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Per-layer, per-head attention probabilities recorded before dropout.
/// Layers are 1-based in the accessors to match the M^1..M^L naming.
struct CoAttentionTrace {
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::vector<Matrix> lang_to_region;  // N x T, index (layer-1)*heads + head
  std::vector<Matrix> region_to_lang;  // T x N

  const Matrix& l2r(std::size_t layer, std::size_t head) const {
    return lang_to_region.at((layer - 1) * heads + head);
  }
  const Matrix& r2l(std::size_t layer, std::size_t head) const {
    return region_to_lang.at((layer - 1) * heads + head);
  }
};

struct ForwardResult {
  Matrix logits;  // 1 x answer_vocab_size
  CoAttentionTrace trace;
};

struct Prediction {
  std::size_t answer_id = 0;
  std::string label;
  double confidence = 0.0;
};

struct CoAttentionOutput {
  Matrix lang;
  Matrix vis;
  std::vector<Matrix> lang_to_region;  // one per head
  std::vector<Matrix> region_to_lang;
};

/// Dropout during training; a null context means inference.
struct DropoutContext {
  double rate = 0.0;
  Rng* rng = nullptr;
};

/// Two-stream co-attention transformer. Immutable after construction except through
/// params(), which the trainer uses.
class Model {
 public:
  Model(ModelConfig config, Vocabulary vocab, std::vector<std::string> answers, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  const std::vector<std::string>& answers() const { return answers_; }
  std::size_t answer_id(const std::string& label) const;
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  Matrix embed_question(const TokenSequence& seq) const;
  Matrix embed_regions(const RegionSet& regions) const;
  /// One co-attention layer (1-based index) applied to given stream states.
  CoAttentionOutput co_attention_layer(const Matrix& lang, const Matrix& vis, std::size_t layer) const;

  ForwardResult forward(const TokenSequence& seq, const RegionSet& regions) const;
  Prediction answer(const TokenSequence& seq, const RegionSet& regions) const;

  struct TapeForward {
    Var logits;
    CoAttentionTrace trace;
  };
  /// Records the full forward on `tape` (which must be bound to params()).
  TapeForward forward_on_tape(Tape& tape, const TokenSequence& seq, const RegionSet& regions,
                              const DropoutContext* dropout) const;

  void save(std::ostream& os) const;
  void save(const std::filesystem::path& path) const;
  static Model load(std::istream& is);
  static Model load(const std::filesystem::path& path);

  /// Names the parameters of one attention sublayer (e.g. "co1.lang") exposes.
  struct AttentionParams {
    std::size_t q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b, ln_g, ln_b;
  };
  struct FeedForwardParams {
    std::size_t w1, b1, w2, b2, ln_g, ln_b;
  };
  const AttentionParams& co_attention_params(std::size_t layer, bool lang_side) const;

 private:
  struct Block {
    AttentionParams attn;
    FeedForwardParams ffn;
  };
  struct CoLayer {
    AttentionParams lang_attn;  // language queries over visual keys/values
    AttentionParams vis_attn;   // visual queries over language keys/values
    FeedForwardParams lang_ffn;
    FeedForwardParams vis_ffn;
  };

  void build_layout(std::uint64_t seed, bool initialize);
  Var embed_question_on_tape(Tape& tape, const TokenSequence& seq) const;
  Var embed_regions_on_tape(Tape& tape, const RegionSet& regions) const;
  Var attention(Tape& tape, const AttentionParams& p, Var queries, Var keys_values,
                std::vector<Matrix>* probs, const DropoutContext* dropout) const;
  Var feed_forward(Tape& tape, const FeedForwardParams& p, Var x, const DropoutContext* dropout) const;
  Var dropout(Tape& tape, Var x, const DropoutContext* dropout) const;

  ModelConfig config_;
  Vocabulary vocab_;
  std::vector<std::string> answers_;
  ParameterStore params_;

  std::size_t tok_emb_ = 0, pos_emb_ = 0, vis_w_ = 0, vis_b_ = 0, head_w_ = 0, head_b_ = 0;
  std::vector<Block> lang_blocks_;
  std::vector<Block> vis_blocks_;
  std::vector<CoLayer> co_layers_;
};

struct TrainExample {
  TokenSequence question;
  RegionSet regions;  // full proposal list; a prefix is sampled per step
  std::size_t answer = 0;
};

struct TrainHyperParams {
  double learning_rate = 2e-3;
  std::size_t epochs = 12;
  std::size_t batch_size = 16;
  double dropout_rate = 0.1;
  double grad_clip = 1.0;
  /// Decoupled weight decay applied to weight matrices (not biases, gains or embeddings).
  double weight_decay = 0.0;
  /// Std of Gaussian noise added to region features at each training step.
  double feature_noise = 0.0;
  /// Region counts sampled uniformly per training step.
  std::vector<std::size_t> region_counts = {4, 8, 16};
  /// Region count used when scoring the validation split.
  std::size_t eval_region_count = 16;
};

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
};

class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(std::size_t epoch, std::size_t step);
  std::size_t epoch() const { return epoch_; }
  std::size_t step() const { return step_; }

 private:
  std::size_t epoch_;
  std::size_t step_;
};

struct EvalSummary {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t n = 0;
};

EvalSummary evaluate(const Model& model, const std::vector<TrainExample>& examples,
                     std::size_t region_count);

/// Adam on answer cross-entropy. Parameters are initialized from `seed`; the batch
/// order and dropout masks come from streams derived from the same seed.
Model train(const ModelConfig& config, const Vocabulary& vocab, const std::vector<std::string>& answers,
            const std::vector<TrainExample>& train_set, const std::vector<TrainExample>& val_set,
            const TrainHyperParams& hp, std::uint64_t seed,
            const std::function<void(const EpochLog&)>& on_epoch = {});

/// Continues training an existing model in place.
void train_in_place(Model& model, const std::vector<TrainExample>& train_set,
                    const std::vector<TrainExample>& val_set, const TrainHyperParams& hp,
                    std::uint64_t seed, const std::function<void(const EpochLog&)>& on_epoch = {});

}  // namespace coattn
