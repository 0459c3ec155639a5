#include "coattn/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <utility>

namespace coattn {

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  }
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_slope(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

void add_into(Matrix& dst, const Matrix& src) {
  auto& d = dst.data();
  const auto& s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("Matrix: data length " + std::to_string(data_.size()) + " does not match " +
                     shape_str());
  }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("Matrix::from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

std::string Matrix::shape_str() const {
  std::ostringstream os;
  os << "(" << rows_ << "x" << cols_ << ")";
  return os.str();
}

void require_finite(const Matrix& m, const std::string& what) {
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!std::isfinite(m.data()[i])) {
      throw NumericError(what + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: cannot multiply " + a.shape_str() + " by " + b.shape_str());
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      out(i, j) = acc;
    }
  }
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: cannot multiply " + a.shape_str() + " by transpose of " +
                     b.shape_str());
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto ar = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const auto br = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += ar[k] * br[k];
      out(i, j) = acc;
    }
  }
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: cannot multiply transpose of " + a.shape_str() + " by " +
                     b.shape_str());
  }
  Matrix out(a.cols(), b.cols());
  for (std::size_t i = 0; i < a.cols(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.rows(); ++k) acc += a(k, i) * b(k, j);
      out(i, j) = acc;
    }
  }
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Matrix softmax_rows(const Matrix& a) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto in = a.row(i);
    auto dst = out.row(i);
    double peak = in[0];
    for (double v : in) peak = std::max(peak, v);
    double total = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      dst[j] = std::exp(in[j] - peak);
      total += dst[j];
    }
    for (double& v : dst) v /= total;
  }
  return out;
}

Matrix layer_norm(const Matrix& a, std::span<const double> gain, std::span<const double> bias,
                  double eps) {
  if (gain.size() != a.cols() || bias.size() != a.cols()) {
    throw ShapeError("layer_norm: gain/bias length does not match " + a.shape_str());
  }
  if (!(eps > 0.0)) throw std::invalid_argument("layer_norm: eps must be positive");
  Matrix out(a.rows(), a.cols());
  const double n = static_cast<double>(a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto in = a.row(i);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < in.size(); ++j) out(i, j) = gain[j] * (in[j] - mean) * inv + bias[j];
  }
  return out;
}

// ---------------------------------------------------------------------------
// ParameterStore

std::size_t ParameterStore::add(std::string name, Matrix init) {
  names_.push_back(std::move(name));
  grads_.emplace_back(init.rows(), init.cols());
  values_.push_back(std::move(init));
  return values_.size() - 1;
}

std::size_t ParameterStore::index_of(const std::string& name) const {
  const auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return static_cast<std::size_t>(it - names_.begin());
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& g : grads_) std::fill(g.data().begin(), g.data().end(), 0.0);
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::push(Matrix value, Backward back) {
  Node node;
  node.owned = std::move(value);
  node.back = std::move(back);
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

const Matrix& Tape::value(Var v) const {
  const Node& n = nodes_[v.id];
  return n.ref ? *n.ref : n.owned;
}

Matrix& Tape::grad_slot(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) {
    const Matrix& v = n.ref ? *n.ref : n.owned;
    n.grad = Matrix(v.rows(), v.cols());
  }
  return n.grad;
}

Var Tape::constant(Matrix value) { return push(std::move(value), nullptr); }

Var Tape::parameter(std::size_t index) {
  if (read_ == nullptr) throw std::logic_error("Tape::parameter: tape has no parameter store");
  Node node;
  node.ref = &read_->value(index);
  node.param = index;
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

Var Tape::matmul(Var a, Var b) {
  return push(coattn::matmul(value(a), value(b)), [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    add_into(t.grad_slot(a.id), coattn::matmul_nt(g, t.value(b)));
    add_into(t.grad_slot(b.id), coattn::matmul_tn(t.value(a), g));
  });
}

Var Tape::matmul_nt(Var a, Var b) {
  return push(coattn::matmul_nt(value(a), value(b)), [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    add_into(t.grad_slot(a.id), coattn::matmul(g, t.value(b)));
    add_into(t.grad_slot(b.id), coattn::matmul_tn(g, t.value(a)));
  });
}

Var Tape::add(Var a, Var b) {
  require_same_shape(value(a), value(b), "add");
  Matrix out = value(a);
  add_into(out, value(b));
  return push(std::move(out), [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    add_into(t.grad_slot(a.id), g);
    add_into(t.grad_slot(b.id), g);
  });
}

Var Tape::add_row(Var a, Var row) {
  const Matrix& av = value(a);
  const Matrix& rv = value(row);
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw ShapeError("add_row: cannot broadcast " + rv.shape_str() + " over " + av.shape_str());
  }
  Matrix out = av;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += rv(0, j);
  return push(std::move(out), [a, row](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    add_into(t.grad_slot(a.id), g);
    Matrix& gr = t.grad_slot(row.id);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) gr(0, j) += g(i, j);
  });
}

Var Tape::mul(Var a, Var b) {
  require_same_shape(value(a), value(b), "mul");
  Matrix out = value(a);
  const auto& bv = value(b).data();
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= bv[i];
  return push(std::move(out), [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    const auto& av = t.value(a).data();
    const auto& bv = t.value(b).data();
    Matrix& ga = t.grad_slot(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i] * bv[i];
    Matrix& gb = t.grad_slot(b.id);
    for (std::size_t i = 0; i < g.size(); ++i) gb.data()[i] += g.data()[i] * av[i];
  });
}

Var Tape::scale(Var a, double s) {
  Matrix out = value(a);
  for (double& v : out.data()) v *= s;
  return push(std::move(out), [a, s](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    Matrix& ga = t.grad_slot(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i] * s;
  });
}

Var Tape::softmax_rows(Var a) {
  return push(coattn::softmax_rows(value(a)), [a](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& y = t.value(Var{self});
    Matrix& ga = t.grad_slot(a.id);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) ga(i, j) += y(i, j) * (g(i, j) - dot);
    }
  });
}

Var Tape::layer_norm(Var a, Var gain, Var bias, double eps) {
  const Matrix& x = value(a);
  const Matrix& gv = value(gain);
  const Matrix& bv = value(bias);
  if (gv.size() != x.cols() || bv.size() != x.cols()) {
    throw ShapeError("layer_norm: gain/bias " + gv.shape_str() + " do not match " + x.shape_str());
  }
  Matrix out = coattn::layer_norm(x, gv.data(), bv.data(), eps);
  return push(std::move(out), [a, gain, bias, eps](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& x = t.value(a);
    const Matrix& gv = t.value(gain);
    Matrix& gx = t.grad_slot(a.id);
    Matrix& gg = t.grad_slot(gain.id);
    Matrix& gb = t.grad_slot(bias.id);
    const std::size_t n = x.cols();
    const double dn = static_cast<double>(n);
    std::vector<double> xhat(n), dxhat(n);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      double mean = 0.0;
      for (std::size_t j = 0; j < n; ++j) mean += x(i, j);
      mean /= dn;
      double var = 0.0;
      for (std::size_t j = 0; j < n; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
      var /= dn;
      const double inv = 1.0 / std::sqrt(var + eps);
      double mean_dxhat = 0.0;
      double mean_dxhat_xhat = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        xhat[j] = (x(i, j) - mean) * inv;
        dxhat[j] = g(i, j) * gv.data()[j];
        gg.data()[j] += g(i, j) * xhat[j];
        gb.data()[j] += g(i, j);
        mean_dxhat += dxhat[j];
        mean_dxhat_xhat += dxhat[j] * xhat[j];
      }
      mean_dxhat /= dn;
      mean_dxhat_xhat /= dn;
      for (std::size_t j = 0; j < n; ++j) {
        gx(i, j) += inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
      }
    }
  });
}

Var Tape::gelu(Var a) {
  Matrix out = value(a);
  for (double& v : out.data()) v = gelu_value(v);
  return push(std::move(out), [a](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    const auto& x = t.value(a).data();
    Matrix& ga = t.grad_slot(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i] * gelu_slope(x[i]);
  });
}

Var Tape::slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Matrix& x = value(a);
  if (begin >= end || end > x.cols()) {
    throw ShapeError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of range for " + x.shape_str());
  }
  Matrix out(x.rows(), end - begin);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = begin; j < end; ++j) out(i, j - begin) = x(i, j);
  return push(std::move(out), [a, begin](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    Matrix& ga = t.grad_slot(a.id);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) ga(i, j + begin) += g(i, j);
  });
}

Var Tape::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = value(parts[0]).rows();
  std::size_t cols = 0;
  for (Var p : parts) {
    if (value(p).rows() != rows) throw ShapeError("concat_cols: row count mismatch");
    cols += value(p).cols();
  }
  Matrix out(rows, cols);
  std::size_t offset = 0;
  for (Var p : parts) {
    const Matrix& x = value(p);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) out(i, offset + j) = x(i, j);
    offset += x.cols();
  }
  std::vector<Var> ids(parts.begin(), parts.end());
  return push(std::move(out), [ids](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    std::size_t offset = 0;
    for (Var p : ids) {
      Matrix& gp = t.grad_slot(p.id);
      for (std::size_t i = 0; i < gp.rows(); ++i)
        for (std::size_t j = 0; j < gp.cols(); ++j) gp(i, j) += g(i, offset + j);
      offset += gp.cols();
    }
  });
}

Var Tape::concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t cols = value(parts[0]).cols();
  std::vector<double> data;
  std::size_t rows = 0;
  for (Var p : parts) {
    const Matrix& x = value(p);
    if (x.cols() != cols) throw ShapeError("concat_rows: column count mismatch");
    data.insert(data.end(), x.data().begin(), x.data().end());
    rows += x.rows();
  }
  std::vector<Var> ids(parts.begin(), parts.end());
  return push(Matrix(rows, cols, std::move(data)), [ids](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    std::size_t offset = 0;
    for (Var p : ids) {
      Matrix& gp = t.grad_slot(p.id);
      for (std::size_t k = 0; k < gp.size(); ++k) gp.data()[k] += g.data()[offset + k];
      offset += gp.size();
    }
  });
}

Var Tape::gather_rows(Var table, std::span<const std::size_t> indices) {
  const Matrix& tv = value(table);
  Matrix out(indices.size(), tv.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= tv.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(indices[i]) + " out of range for " +
                       tv.shape_str());
    }
    for (std::size_t j = 0; j < tv.cols(); ++j) out(i, j) = tv(indices[i], j);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return push(std::move(out), [table, idx](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    Matrix& gt = t.grad_slot(table.id);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) gt(idx[i], j) += g(i, j);
  });
}

Var Tape::row(Var a, std::size_t r) {
  const std::size_t idx[] = {r};
  return gather_rows(a, idx);
}

Var Tape::mean_rows(Var a) {
  const Matrix& x = value(a);
  if (x.rows() == 0) throw ShapeError("mean_rows: empty input");
  Matrix out(1, x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(0, j) += x(i, j);
  const double n = static_cast<double>(x.rows());
  for (double& v : out.data()) v /= n;
  return push(std::move(out), [a, n](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    Matrix& ga = t.grad_slot(a.id);
    for (std::size_t i = 0; i < ga.rows(); ++i)
      for (std::size_t j = 0; j < ga.cols(); ++j) ga(i, j) += g(0, j) / n;
  });
}

Var Tape::mask(Var a, Matrix keep) {
  require_same_shape(value(a), keep, "mask");
  Matrix out = value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= keep.data()[i];
  return push(std::move(out), [a, keep = std::move(keep)](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    Matrix& ga = t.grad_slot(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i] * keep.data()[i];
  });
}

Var Tape::cross_entropy(Var logits, std::size_t target) {
  const Matrix& z = value(logits);
  if (z.rows() != 1 || target >= z.cols()) {
    throw ShapeError("cross_entropy: target " + std::to_string(target) + " invalid for logits " +
                     z.shape_str());
  }
  Matrix probs = coattn::softmax_rows(z);
  double peak = z(0, 0);
  for (double v : z.data()) peak = std::max(peak, v);
  double total = 0.0;
  for (double v : z.data()) total += std::exp(v - peak);
  const double loss = peak + std::log(total) - z(0, target);
  return push(Matrix(1, 1, loss),
              [logits, target, probs = std::move(probs)](Tape& t, std::size_t self) {
                const double g = t.nodes_[self].grad(0, 0);
                Matrix& gz = t.grad_slot(logits.id);
                for (std::size_t j = 0; j < probs.cols(); ++j) {
                  gz(0, j) += g * (probs(0, j) - (j == target ? 1.0 : 0.0));
                }
              });
}

void Tape::backward(Var loss) {
  if (value(loss).size() != 1) throw ShapeError("backward: loss must be 1x1, got " + value(loss).shape_str());
  grad_slot(loss.id)(0, 0) = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty()) continue;
    if (n.back) n.back(*this, i);
    if (n.param && write_ != nullptr) add_into(write_->grad(*n.param), n.grad);
  }
}

// ---------------------------------------------------------------------------

GradCheckResult grad_check(ParameterStore& params, const LossBuilder& loss, double eps) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) throw std::invalid_argument("grad_check: eps must lie in [1e-6, 1e-3]");
  params.zero_grad();
  {
    Tape tape(params);
    tape.backward(loss(tape));
  }
  auto eval = [&]() {
    Tape tape(params);
    return tape.value(loss(tape))(0, 0);
  };

  GradCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Matrix& value = params.value(p);
    for (std::size_t k = 0; k < value.size(); ++k) {
      const double saved = value.data()[k];
      value.data()[k] = saved + eps;
      const double up = eval();
      value.data()[k] = saved - eps;
      const double down = eval();
      value.data()[k] = saved;
      ++result.checked;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        if (!result.non_finite_param) result.non_finite_param = p;
        continue;
      }
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = params.grad(p).data()[k];
      const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = p;
        result.worst_entry = k;
      }
    }
  }
  return result;
}

}  // namespace coattn
