#include <cmath>

#include "coattn/numerics.hpp"
#include "coattn/random.hpp"
#include "doctest.h"

using namespace coattn;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (auto& v : m.data()) v = uniform(rng, -1.0, 1.0);
  return m;
}

}  // namespace

TEST_CASE("matmul identity and hand case") {
  Matrix a = Matrix::from_rows({{1, 2, 3}, {4, 5, 6}, {7, 8, 9.5}});
  CHECK(matmul(Matrix::identity(3), a) == a);
  Matrix b = matmul(Matrix::from_rows({{1, 2}, {3, 4}}), Matrix::from_rows({{0}, {1}}));
  CHECK(b == Matrix::from_rows({{2}, {4}}));
  CHECK_THROWS_AS(matmul(a, Matrix(2, 2)), ShapeError);
}

TEST_CASE("matmul matches triple loop") {
  Rng rng(11);
  Matrix a = random_matrix(5, 7, rng);
  Matrix b = random_matrix(7, 3, rng);
  Matrix c = matmul(a, b);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 7; ++k) s += a(i, k) * b(k, j);
      CHECK(c(i, j) == s);
    }
  CHECK(matmul_nt(a, transpose(b)) == c);
  CHECK(matmul_tn(transpose(a), b) == c);
}

TEST_CASE("softmax rows") {
  Matrix s = softmax_rows(Matrix::from_rows({{0, 0, 0}, {1000, 0, 0}, {1, 2, 3}}));
  for (int j = 0; j < 3; ++j) CHECK(s(0, j) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(s(1, 0) == 1.0);
  CHECK(s(1, 1) == 0.0);
  long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  for (int j = 0; j < 3; ++j)
    CHECK(std::abs(s(2, j) - static_cast<double>(std::exp(static_cast<long double>(j + 1)) / z)) < 1e-15);
}

TEST_CASE("layer norm") {
  std::vector<double> g2{1, 1}, b2{0, 0}, g3{1, 1, 1}, b3{0, 0, 0};
  Matrix c = layer_norm(Matrix::from_rows({{5, 5, 5}}), g3, b3, 1e-5);
  for (double v : c.data()) CHECK(v == 0.0);
  Matrix two = layer_norm(Matrix::from_rows({{1, 3}}), g2, b2, 1e-12);
  CHECK(two(0, 0) == doctest::Approx(-1.0).epsilon(1e-11));
  CHECK(two(0, 1) == doctest::Approx(1.0).epsilon(1e-11));

  Rng rng(3);
  Matrix x = random_matrix(1, 9, rng);
  std::vector<double> g(9), b(9);
  for (std::size_t i = 0; i < 9; ++i) {
    g[i] = uniform(rng, 0.5, 1.5);
    b[i] = uniform(rng, -0.5, 0.5);
  }
  Matrix y = layer_norm(x, g, b, 1e-5);
  long double mean = 0, var = 0;
  for (double v : x.data()) mean += v;
  mean /= 9;
  for (double v : x.data()) var += (v - mean) * (v - mean);
  var /= 9;
  for (std::size_t i = 0; i < 9; ++i) {
    double expect = static_cast<double>((x(0, i) - mean) / std::sqrt(var + 1e-5L)) * g[i] + b[i];
    CHECK(std::abs(y(0, i) - expect) < 1e-12);
  }
}

TEST_CASE("grad check on quadratic loss is near exact") {
  ParameterStore ps;
  Rng rng(5);
  std::size_t w = ps.add("w", random_matrix(3, 4, rng));
  ps.add("unused", random_matrix(2, 2, rng));
  Matrix x = random_matrix(4, 1, rng);
  auto loss = [&](Tape& t) {
    Var y = t.matmul(t.parameter(w), t.constant(x));
    Var sq = t.mul(y, y);
    Var s = t.matmul(t.constant(Matrix(1, 3, 1.0)), sq);
    return t.scale(s, 0.5);
  };
  GradCheckResult r = grad_check(ps, loss, 1e-4);
  CHECK(r.max_rel_error < 1e-10);
  CHECK_FALSE(r.non_finite_param.has_value());

  ps.zero_grad();
  Tape tape(ps);
  tape.backward(loss(tape));
  for (double g : ps.grad(1).data()) CHECK(g == 0.0);
  // analytic: dL/dW = (W x) x^T
  Matrix wx = matmul(ps.value(w), x);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(ps.grad(w)(i, j) == doctest::Approx(wx(i, 0) * x(j, 0)).epsilon(1e-14));
}

TEST_CASE("tape ops pass grad check") {
  ParameterStore ps;
  Rng rng(9);
  std::size_t a = ps.add("a", random_matrix(3, 4, rng));
  std::size_t g = ps.add("g", random_matrix(1, 4, rng));
  std::size_t b = ps.add("b", random_matrix(1, 4, rng));
  std::size_t e = ps.add("e", random_matrix(5, 4, rng));
  auto loss = [&](Tape& t) {
    Var x = t.layer_norm(t.parameter(a), t.parameter(g), t.parameter(b), 1e-5);
    Var h = t.gelu(x);
    std::vector<std::size_t> idx{4, 0, 2};
    Var emb = t.gather_rows(t.parameter(e), idx);
    Var s = t.softmax_rows(t.matmul_nt(h, emb));
    Var pooled = t.mean_rows(t.concat_cols(std::vector<Var>{s, t.slice_cols(h, 1, 3)}));
    return t.cross_entropy(pooled, 2);
  };
  CHECK(grad_check(ps, loss, 1e-5).max_rel_error < 1e-6);
}
