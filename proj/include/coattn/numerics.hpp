#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace coattn {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a NaN or infinity shows up where only finite values are allowed.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  std::string shape_str() const;
  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Throws NumericError if any entry is NaN or infinite.
void require_finite(const Matrix& m, const std::string& what);

// Forward kernels. All accumulate strictly left to right.
Matrix matmul(const Matrix& a, const Matrix& b);
/// a * b^T without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// a^T * b
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
Matrix softmax_rows(const Matrix& a);
Matrix layer_norm(const Matrix& a, std::span<const double> gain, std::span<const double> bias,
                  double eps);

/// Named parameter tensors plus gradient buffers of the same shapes.
class ParameterStore {
 public:
  std::size_t add(std::string name, Matrix init);

  std::size_t size() const { return values_.size(); }
  std::size_t index_of(const std::string& name) const;
  const std::string& name(std::size_t i) const { return names_[i]; }
  Matrix& value(std::size_t i) { return values_[i]; }
  const Matrix& value(std::size_t i) const { return values_[i]; }
  Matrix& grad(std::size_t i) { return grads_[i]; }
  const Matrix& grad(std::size_t i) const { return grads_[i]; }
  std::size_t scalar_count() const;

  void zero_grad();

  bool operator==(const ParameterStore& other) const {
    return names_ == other.names_ && values_ == other.values_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
  std::vector<Matrix> grads_;
};

/// Handle to a node on a Tape.
struct Var {
  std::size_t id = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so walking the node
/// list backwards is a valid reverse topological order.
class Tape {
 public:
  Tape() = default;
  /// Parameter gradients are accumulated into `params` by backward().
  explicit Tape(ParameterStore& params) : read_(&params), write_(&params) {}
  /// Read-only binding for inference; backward() leaves parameters untouched.
  explicit Tape(const ParameterStore& params) : read_(&params) {}

  Var constant(Matrix value);
  /// Leaf bound to a parameter; backward() accumulates into the store's gradient.
  Var parameter(std::size_t index);

  const Matrix& value(Var v) const;
  /// Gradient w.r.t. the node after backward(); empty if the node had no influence.
  const Matrix& grad(Var v) const { return nodes_[v.id].grad; }
  std::size_t node_count() const { return nodes_.size(); }

  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);
  Var add(Var a, Var b);
  /// Adds a 1 x cols row to every row of a.
  Var add_row(Var a, Var row);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  Var softmax_rows(Var a);
  Var layer_norm(Var a, Var gain, Var bias, double eps);
  Var gelu(Var a);
  Var slice_cols(Var a, std::size_t begin, std::size_t end);
  Var concat_cols(std::span<const Var> parts);
  Var concat_rows(std::span<const Var> parts);
  Var gather_rows(Var table, std::span<const std::size_t> indices);
  Var row(Var a, std::size_t r);
  Var mean_rows(Var a);
  /// Elementwise multiply by a fixed mask (dropout with pre-scaled keep mask).
  Var mask(Var a, Matrix mask);
  /// Softmax cross-entropy of a 1 x K logit row against a class index; 1 x 1 result.
  Var cross_entropy(Var logits, std::size_t target);

  /// Seeds d(loss)/d(loss) = 1 and propagates to every node and parameter.
  void backward(Var loss);

 private:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  struct Node {
    Matrix owned;
    const Matrix* ref = nullptr;
    Matrix grad;
    Backward back;
    std::optional<std::size_t> param;
  };

  Var push(Matrix value, Backward back);
  Matrix& grad_slot(std::size_t id);

  const ParameterStore* read_ = nullptr;
  ParameterStore* write_ = nullptr;
  std::vector<Node> nodes_;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_entry = 0;
  std::size_t checked = 0;
  /// Set when the loss was non-finite at some perturbed point.
  std::optional<std::size_t> non_finite_param;
};

/// Builds the scalar loss on a fresh tape bound to the given store.
using LossBuilder = std::function<Var(Tape&)>;

/// Compares reverse-mode gradients against central differences for every scalar in
/// `params`. Relative error is |analytic - numeric| / max(1, |numeric|).
GradCheckResult grad_check(ParameterStore& params, const LossBuilder& loss, double eps);

}  // namespace coattn
