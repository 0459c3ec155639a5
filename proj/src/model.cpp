#include "coattn/model.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace coattn {

void ModelConfig::validate() const {
  if (embed_dim == 0 || heads == 0 || ffn_dim == 0 || feature_dim == 0 || max_len < 2) {
    throw std::invalid_argument("ModelConfig: all dimensions must be >= 1 (max_len >= 2)");
  }
  if (embed_dim % heads != 0) {
    throw std::invalid_argument("ModelConfig: embed_dim " + std::to_string(embed_dim) +
                                " not divisible by heads " + std::to_string(heads));
  }
  if (co_layers == 0) throw std::invalid_argument("ModelConfig: need at least one co-attention layer");
  if (lang_blocks < co_layers) {
    throw std::invalid_argument("ModelConfig: lang_blocks must be >= co_layers");
  }
  if (vocab_size < 3 || answer_vocab_size == 0) {
    throw std::invalid_argument("ModelConfig: vocabulary sizes not set");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw std::invalid_argument("ModelConfig: dropout_rate must be in [0,1)");
  }
  if (!(layer_norm_eps > 0.0)) throw std::invalid_argument("ModelConfig: layer_norm_eps must be > 0");
}

// ---------------------------------------------------------------------------
// Parameter layout

Model::Model(ModelConfig config, Vocabulary vocab, std::vector<std::string> answers, std::uint64_t seed)
    : config_(config), vocab_(std::move(vocab)), answers_(std::move(answers)) {
  config_.vocab_size = vocab_.size();
  config_.answer_vocab_size = answers_.size();
  config_.validate();
  build_layout(seed, true);
}

void Model::build_layout(std::uint64_t seed, bool initialize) {
  Rng rng(seed);
  const std::size_t d = config_.embed_dim;
  const double std_dev = 1.0 / std::sqrt(static_cast<double>(d));
  auto weight = [&](const std::string& name, std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    if (initialize)
      for (double& v : m.data()) v = std_dev * standard_normal(rng);
    return params_.add(name, std::move(m));
  };
  auto zeros = [&](const std::string& name, std::size_t cols) { return params_.add(name, Matrix(1, cols)); };
  auto ones = [&](const std::string& name, std::size_t cols) {
    return params_.add(name, Matrix(1, cols, 1.0));
  };
  auto attention = [&](const std::string& prefix) {
    AttentionParams p{};
    p.q_w = weight(prefix + ".q_w", d, d);
    p.q_b = zeros(prefix + ".q_b", d);
    p.k_w = weight(prefix + ".k_w", d, d);
    p.k_b = zeros(prefix + ".k_b", d);
    p.v_w = weight(prefix + ".v_w", d, d);
    p.v_b = zeros(prefix + ".v_b", d);
    p.o_w = weight(prefix + ".o_w", d, d);
    p.o_b = zeros(prefix + ".o_b", d);
    p.ln_g = ones(prefix + ".ln_g", d);
    p.ln_b = zeros(prefix + ".ln_b", d);
    return p;
  };
  auto feed_forward = [&](const std::string& prefix) {
    FeedForwardParams p{};
    p.w1 = weight(prefix + ".w1", d, config_.ffn_dim);
    p.b1 = zeros(prefix + ".b1", config_.ffn_dim);
    p.w2 = weight(prefix + ".w2", config_.ffn_dim, d);
    p.b2 = zeros(prefix + ".b2", d);
    p.ln_g = ones(prefix + ".ln_g", d);
    p.ln_b = zeros(prefix + ".ln_b", d);
    return p;
  };

  tok_emb_ = weight("tok_emb", config_.vocab_size, d);
  pos_emb_ = weight("pos_emb", config_.max_len, d);
  vis_w_ = weight("vis_proj.w", config_.feature_dim + kGeometryDim, d);
  vis_b_ = zeros("vis_proj.b", d);
  for (std::size_t b = 0; b < config_.lang_blocks; ++b) {
    const std::string prefix = "lang" + std::to_string(b + 1);
    lang_blocks_.push_back({attention(prefix + ".attn"), feed_forward(prefix + ".ffn")});
  }
  if (config_.visual_self_attention) {
    for (std::size_t l = 0; l < config_.co_layers; ++l) {
      const std::string prefix = "vis" + std::to_string(l + 1);
      vis_blocks_.push_back({attention(prefix + ".attn"), feed_forward(prefix + ".ffn")});
    }
  }
  for (std::size_t l = 0; l < config_.co_layers; ++l) {
    const std::string prefix = "co" + std::to_string(l + 1);
    CoLayer c;
    c.lang_attn = attention(prefix + ".lang_attn");
    c.vis_attn = attention(prefix + ".vis_attn");
    c.lang_ffn = feed_forward(prefix + ".lang_ffn");
    c.vis_ffn = feed_forward(prefix + ".vis_ffn");
    co_layers_.push_back(c);
  }
  head_w_ = weight("answer_head.w", d, config_.answer_vocab_size);
  head_b_ = zeros("answer_head.b", config_.answer_vocab_size);
}

std::size_t Model::answer_id(const std::string& label) const {
  const auto it = std::find(answers_.begin(), answers_.end(), label);
  if (it == answers_.end()) throw std::out_of_range("unknown answer label '" + label + "'");
  return static_cast<std::size_t>(it - answers_.begin());
}

const Model::AttentionParams& Model::co_attention_params(std::size_t layer, bool lang_side) const {
  const CoLayer& c = co_layers_.at(layer - 1);
  return lang_side ? c.lang_attn : c.vis_attn;
}

// ---------------------------------------------------------------------------
// Forward

Var Model::embed_question_on_tape(Tape& tape, const TokenSequence& seq) const {
  if (seq.size() > config_.max_len) {
    throw std::out_of_range("embed_question: sequence length " + std::to_string(seq.size()) +
                            " exceeds max_len " + std::to_string(config_.max_len));
  }
  std::vector<std::size_t> ids;
  ids.reserve(seq.size());
  for (const auto& t : seq.tokens) {
    if (t.id >= config_.vocab_size) {
      throw std::out_of_range("embed_question: unknown token id " + std::to_string(t.id) + " ('" +
                              t.text + "')");
    }
    ids.push_back(t.id);
  }
  Var x = tape.gather_rows(tape.parameter(tok_emb_), ids);
  if (config_.use_positional_embeddings) {
    std::vector<std::size_t> positions(seq.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
    x = tape.add(x, tape.gather_rows(tape.parameter(pos_emb_), positions));
  }
  return x;
}

Var Model::embed_regions_on_tape(Tape& tape, const RegionSet& regions) const {
  const std::size_t width = config_.feature_dim + kGeometryDim;
  Matrix input(regions.size(), width);
  const double w = regions.image_width;
  const double h = regions.image_height;
  for (std::size_t i = 0; i < regions.size(); ++i) {
    const Region& r = regions.regions[i];
    if (r.feature.size() != config_.feature_dim) {
      throw ShapeError("embed_regions: feature length " + std::to_string(r.feature.size()) +
                       " does not match model feature_dim " + std::to_string(config_.feature_dim));
    }
    auto dst = input.row(i);
    std::copy(r.feature.begin(), r.feature.end(), dst.begin());
    const Box& b = r.box;
    dst[config_.feature_dim + 0] = b.x0 / w;
    dst[config_.feature_dim + 1] = b.y0 / h;
    dst[config_.feature_dim + 2] = b.x1 / w;
    dst[config_.feature_dim + 3] = b.y1 / h;
    dst[config_.feature_dim + 4] = static_cast<double>(b.area()) / (w * h);
  }
  Var x = tape.constant(std::move(input));
  return tape.add_row(tape.matmul(x, tape.parameter(vis_w_)), tape.parameter(vis_b_));
}

Var Model::dropout(Tape& tape, Var x, const DropoutContext* ctx) const {
  if (ctx == nullptr || ctx->rate <= 0.0) return x;
  const Matrix& v = tape.value(x);
  Matrix keep(v.rows(), v.cols());
  const double scale = 1.0 / (1.0 - ctx->rate);
  for (double& k : keep.data()) k = uniform01(*ctx->rng) < ctx->rate ? 0.0 : scale;
  return tape.mask(x, std::move(keep));
}

Var Model::attention(Tape& tape, const AttentionParams& p, Var queries, Var keys_values,
                     std::vector<Matrix>* probs, const DropoutContext* ctx) const {
  const std::size_t dk = config_.key_dim();
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  auto project = [&](Var x, std::size_t w, std::size_t b) {
    return tape.add_row(tape.matmul(x, tape.parameter(w)), tape.parameter(b));
  };
  Var q = project(queries, p.q_w, p.q_b);
  Var k = project(keys_values, p.k_w, p.k_b);
  Var v = project(keys_values, p.v_w, p.v_b);
  std::vector<Var> heads;
  heads.reserve(config_.heads);
  for (std::size_t h = 0; h < config_.heads; ++h) {
    const std::size_t lo = h * dk;
    const std::size_t hi = lo + dk;
    Var scores = tape.scale(tape.matmul_nt(tape.slice_cols(q, lo, hi), tape.slice_cols(k, lo, hi)),
                            inv_sqrt_dk);
    Var attn = tape.softmax_rows(scores);
    if (probs != nullptr) probs->push_back(tape.value(attn));
    heads.push_back(tape.matmul(dropout(tape, attn, ctx), tape.slice_cols(v, lo, hi)));
  }
  Var merged = project(tape.concat_cols(heads), p.o_w, p.o_b);
  Var residual = tape.add(queries, dropout(tape, merged, ctx));
  return tape.layer_norm(residual, tape.parameter(p.ln_g), tape.parameter(p.ln_b),
                         config_.layer_norm_eps);
}

Var Model::feed_forward(Tape& tape, const FeedForwardParams& p, Var x, const DropoutContext* ctx) const {
  Var hidden = tape.gelu(tape.add_row(tape.matmul(x, tape.parameter(p.w1)), tape.parameter(p.b1)));
  Var out = tape.add_row(tape.matmul(hidden, tape.parameter(p.w2)), tape.parameter(p.b2));
  Var residual = tape.add(x, dropout(tape, out, ctx));
  return tape.layer_norm(residual, tape.parameter(p.ln_g), tape.parameter(p.ln_b),
                         config_.layer_norm_eps);
}

Model::TapeForward Model::forward_on_tape(Tape& tape, const TokenSequence& seq, const RegionSet& regions,
                                          const DropoutContext* ctx) const {
  seq.validate();
  regions.validate();
  TapeForward out;
  out.trace.layers = config_.co_layers;
  out.trace.heads = config_.heads;

  Var lang = embed_question_on_tape(tape, seq);
  Var vis = embed_regions_on_tape(tape, regions);
  const std::size_t lead = config_.lang_blocks - config_.co_layers;
  auto run_block = [&](const Block& b, Var x) {
    return feed_forward(tape, b.ffn, attention(tape, b.attn, x, x, nullptr, ctx), ctx);
  };
  for (std::size_t b = 0; b < lead; ++b) lang = run_block(lang_blocks_[b], lang);
  for (std::size_t l = 0; l < config_.co_layers; ++l) {
    lang = run_block(lang_blocks_[lead + l], lang);
    if (config_.visual_self_attention) vis = run_block(vis_blocks_[l], vis);
    const CoLayer& c = co_layers_[l];
    Var lang_mixed = attention(tape, c.lang_attn, lang, vis, &out.trace.lang_to_region, ctx);
    Var vis_mixed = attention(tape, c.vis_attn, vis, lang, &out.trace.region_to_lang, ctx);
    lang = feed_forward(tape, c.lang_ffn, lang_mixed, ctx);
    vis = feed_forward(tape, c.vis_ffn, vis_mixed, ctx);
  }
  Var fused = tape.mul(tape.row(lang, 0), tape.mean_rows(vis));
  out.logits = tape.add_row(tape.matmul(fused, tape.parameter(head_w_)), tape.parameter(head_b_));
  require_finite(tape.value(out.logits), "forward: answer logits");
  return out;
}

Matrix Model::embed_question(const TokenSequence& seq) const {
  Tape tape(params_);
  return tape.value(embed_question_on_tape(tape, seq));
}

Matrix Model::embed_regions(const RegionSet& regions) const {
  Tape tape(params_);
  return tape.value(embed_regions_on_tape(tape, regions));
}

CoAttentionOutput Model::co_attention_layer(const Matrix& lang, const Matrix& vis, std::size_t layer) const {
  if (layer == 0 || layer > config_.co_layers) {
    throw std::out_of_range("co_attention_layer: layer " + std::to_string(layer) + " out of range");
  }
  if (lang.cols() != config_.embed_dim || vis.cols() != config_.embed_dim) {
    throw ShapeError("co_attention_layer: state width must be " + std::to_string(config_.embed_dim) +
                     ", got " + lang.shape_str() + " and " + vis.shape_str());
  }
  Tape tape(params_);
  const CoLayer& c = co_layers_[layer - 1];
  CoAttentionOutput out;
  Var l = tape.constant(lang);
  Var v = tape.constant(vis);
  Var lang_mixed = attention(tape, c.lang_attn, l, v, &out.lang_to_region, nullptr);
  Var vis_mixed = attention(tape, c.vis_attn, v, l, &out.region_to_lang, nullptr);
  out.lang = tape.value(feed_forward(tape, c.lang_ffn, lang_mixed, nullptr));
  out.vis = tape.value(feed_forward(tape, c.vis_ffn, vis_mixed, nullptr));
  return out;
}

ForwardResult Model::forward(const TokenSequence& seq, const RegionSet& regions) const {
  Tape tape(params_);
  TapeForward f = forward_on_tape(tape, seq, regions, nullptr);
  return {tape.value(f.logits), std::move(f.trace)};
}

Prediction Model::answer(const TokenSequence& seq, const RegionSet& regions) const {
  const Matrix logits = forward(seq, regions).logits;
  Prediction p;
  for (std::size_t j = 1; j < logits.cols(); ++j) {
    if (logits(0, j) > logits(0, p.answer_id)) p.answer_id = j;
  }
  p.confidence = softmax_rows(logits)(0, p.answer_id);
  p.label = answers_.at(p.answer_id);
  return p;
}

// ---------------------------------------------------------------------------
// Serialization: magic, version, config, vocabularies, then named tensors.
// Every multi-byte value is little-endian.

namespace {

constexpr std::array<char, 8> kModelMagic = {'C', 'O', 'A', 'T', 'T', 'N', 'M', 'D'};
constexpr std::uint32_t kModelVersion = 1;

void put_u64(std::ostream& os, std::uint64_t v) {
  std::array<char, 8> b;
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b.data(), 8);
}
void put_u32(std::ostream& os, std::uint32_t v) {
  std::array<char, 4> b;
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b.data(), 4);
}
void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }
void put_str(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint64_t get_u64(std::istream& is) {
  std::array<unsigned char, 8> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 8)) throw std::runtime_error("model file truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}
std::uint32_t get_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 4)) throw std::runtime_error("model file truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}
double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }
std::string get_str(std::istream& is) {
  const std::uint32_t n = get_u32(is);
  if (n > (1u << 20)) throw std::runtime_error("model file: implausible string length");
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw std::runtime_error("model file truncated");
  return s;
}

}  // namespace

void Model::save(std::ostream& os) const {
  os.write(kModelMagic.data(), kModelMagic.size());
  put_u32(os, kModelVersion);
  put_u64(os, config_.embed_dim);
  put_u64(os, config_.heads);
  put_u64(os, config_.lang_blocks);
  put_u64(os, config_.co_layers);
  put_u64(os, config_.ffn_dim);
  put_u64(os, config_.vocab_size);
  put_u64(os, config_.answer_vocab_size);
  put_u64(os, config_.max_len);
  put_u64(os, config_.feature_dim);
  put_u32(os, (config_.use_positional_embeddings ? 1u : 0u) | (config_.visual_self_attention ? 2u : 0u));
  put_f64(os, config_.dropout_rate);
  put_f64(os, config_.layer_norm_eps);

  put_u64(os, vocab_.size());
  for (const auto& w : vocab_.words()) put_str(os, w);
  put_u64(os, answers_.size());
  for (const auto& a : answers_) put_str(os, a);

  put_u64(os, params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Matrix& m = params_.value(i);
    put_str(os, params_.name(i));
    put_u64(os, m.rows());
    put_u64(os, m.cols());
    for (double v : m.data()) put_f64(os, v);
  }
  if (!os) throw std::runtime_error("failed writing model");
}

void Model::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  save(os);
}

Model Model::load(std::istream& is) {
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kModelMagic) {
    throw std::runtime_error("not a model file (bad magic)");
  }
  const std::uint32_t version = get_u32(is);
  if (version != kModelVersion) throw std::runtime_error("unsupported model version " + std::to_string(version));
  ModelConfig c;
  c.embed_dim = get_u64(is);
  c.heads = get_u64(is);
  c.lang_blocks = get_u64(is);
  c.co_layers = get_u64(is);
  c.ffn_dim = get_u64(is);
  c.vocab_size = get_u64(is);
  c.answer_vocab_size = get_u64(is);
  c.max_len = get_u64(is);
  c.feature_dim = get_u64(is);
  const std::uint32_t flags = get_u32(is);
  c.use_positional_embeddings = (flags & 1u) != 0;
  c.visual_self_attention = (flags & 2u) != 0;
  c.dropout_rate = get_f64(is);
  c.layer_norm_eps = get_f64(is);

  std::vector<std::string> words(get_u64(is));
  for (auto& w : words) w = get_str(is);
  std::vector<std::string> answers(get_u64(is));
  for (auto& a : answers) a = get_str(is);
  Vocabulary vocab = Vocabulary::from_words(words);
  if (vocab.words() != words || words.size() != c.vocab_size || answers.size() != c.answer_vocab_size) {
    throw std::runtime_error("model file: vocabulary block inconsistent with config");
  }

  Model m(c, std::move(vocab), std::move(answers), 0);
  const std::uint64_t count = get_u64(is);
  if (count != m.params_.size()) throw std::runtime_error("model file: parameter count mismatch");
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = get_str(is);
    const std::size_t idx = m.params_.index_of(name);
    Matrix& dst = m.params_.value(idx);
    const std::uint64_t rows = get_u64(is);
    const std::uint64_t cols = get_u64(is);
    if (rows != dst.rows() || cols != dst.cols()) {
      throw std::runtime_error("model file: shape mismatch for " + name);
    }
    for (double& v : dst.data()) v = get_f64(is);
  }
  return m;
}

Model Model::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open model " + path.string());
  return load(is);
}

}  // namespace coattn
