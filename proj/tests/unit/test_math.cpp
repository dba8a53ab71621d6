#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "fvlm/error.hpp"
#include "fvlm/math.hpp"
#include "gradcheck.hpp"

using namespace fvlm;

namespace {

Matrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Matrix m(rows, cols);
  for (auto& v : m.span()) v = u(rng);
  return m;
}

Vector random_vector(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Vector v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

}  // namespace

TEST_SUITE("math") {

TEST_CASE("affine examples") {
  CHECK(affine(Matrix::identity(2), Vector{3, 4}, Vector{0, 0}) == Vector{3, 4});
  CHECK(affine(Matrix(2, 2), Vector{7, -2}, Vector{1, 2}) == Vector{1, 2});
  CHECK(affine(Matrix{{1, 2}, {3, 4}}, Vector{1, 1}, Vector{1, 1}) == Vector{4, 8});
}

TEST_CASE("affine rejects mismatched operands") {
  CHECK_THROWS_AS(affine(Matrix(2, 3), Vector{1, 1}, Vector{0, 0}), ShapeError);
  CHECK_THROWS_AS(affine(Matrix(2, 2), Vector{1, 1}, Vector{0, 0, 0}), ShapeError);
}

TEST_CASE("affine is linear") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix w = random_matrix(rng, 7, 9);
    const Vector x = random_vector(rng, 9), y = random_vector(rng, 9), zero(7);
    const double alpha = 1.7, beta = -0.3;
    Vector mix(9);
    for (std::size_t k = 0; k < 9; ++k) mix[k] = alpha * x[k] + beta * y[k];
    const Vector lhs = affine(w, mix, zero);
    const Vector ax = affine(w, x, zero), ay = affine(w, y, zero);
    for (std::size_t r = 0; r < 7; ++r) {
      const double rhs = alpha * ax[r] + beta * ay[r];
      CHECK(std::abs(lhs[r] - rhs) <= 1e-10 * std::max(1.0, std::abs(rhs)));
    }
  }
}

TEST_CASE("zero-padded columns leave affine bit-identical") {
  std::mt19937_64 rng(5);
  for (std::size_t cols : {1u, 3u, 4u, 5u, 8u, 13u}) {
    const Matrix w = random_matrix(rng, 6, cols);
    const Vector x = random_vector(rng, cols), b = random_vector(rng, 6);
    Matrix wide(6, cols + 7);
    for (std::size_t r = 0; r < 6; ++r) {
      for (std::size_t c = 0; c < cols; ++c) wide(r, c) = w(r, c);
    }
    Vector xe(cols + 7);
    for (std::size_t c = 0; c < cols; ++c) xe[c] = x[c];
    for (std::size_t c = cols; c < cols + 7; ++c) xe[c] = 0.25 * static_cast<double>(c);
    CHECK(affine(w, x, b) == affine(wide, xe, b));
  }
}

TEST_CASE("batched affine matches the single-vector kernel exactly") {
  std::mt19937_64 rng(11);
  const Matrix w = random_matrix(rng, 37, 19);
  const Vector b = random_vector(rng, 37);
  std::vector<Vector> xs;
  for (int t = 0; t < 5; ++t) xs.push_back(random_vector(rng, 19));
  const auto all = affine_all(w, xs, b);
  REQUIRE(all.size() == xs.size());
  for (std::size_t t = 0; t < xs.size(); ++t) CHECK(all[t] == affine(w, xs[t], b));
}

TEST_CASE("batched affine backward matches per-step kernels") {
  std::mt19937_64 rng(13);
  const Matrix w = random_matrix(rng, 23, 11);
  std::vector<Vector> xs, ds;
  for (int t = 0; t < 4; ++t) {
    xs.push_back(random_vector(rng, 11));
    ds.push_back(random_vector(rng, 23));
  }
  Matrix g(23, 11), g_ref(23, 11);
  Vector gb(23), gb_ref(23);
  const auto dxs = affine_all_backward(w, xs, ds, g, gb);
  for (std::size_t t = 0; t < xs.size(); ++t) {
    outer_acc(g_ref, ds[t].span(), xs[t].span());
    axpy(1.0, ds[t].span(), gb_ref.span());
    Vector dx(11);
    gemv_t_acc(w, ds[t].span(), dx.span());
    for (std::size_t c = 0; c < 11; ++c) CHECK(dxs[t][c] == doctest::Approx(dx[c]).epsilon(1e-12));
  }
  for (std::size_t k = 0; k < g.size(); ++k) CHECK(g.data()[k] == doctest::Approx(g_ref.data()[k]).epsilon(1e-12));
  for (std::size_t r = 0; r < 23; ++r) CHECK(gb[r] == doctest::Approx(gb_ref[r]).epsilon(1e-12));
}

TEST_CASE("softmax examples") {
  CHECK(softmax(Vector{0, 0, 0, 0}) == Vector{0.25, 0.25, 0.25, 0.25});
  CHECK(softmax(Vector{1000, 1000}) == Vector{0.5, 0.5});
  const Vector p = softmax(Vector{1, 2, 3});
  CHECK(std::abs(p[0] - 0.09003) < 1e-5);
  CHECK(std::abs(p[1] - 0.24473) < 1e-5);
  CHECK(std::abs(p[2] - 0.66524) < 1e-5);
  CHECK_THROWS_AS(softmax(Vector{}), ShapeError);
}

TEST_CASE("softmax is a distribution and shift-invariant") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    Vector x = random_vector(rng, 1 + trial % 12, 20.0);
    const Vector p = softmax(x);
    double sum = 0.0;
    for (double v : p) {
      CHECK(v > 0.0);
      CHECK(v < 1.0 + 1e-15);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);
    // Shifts that are exactly representable keep x - max(x) bit-identical.
    Vector shifted = x;
    for (auto& v : shifted) v += 64.0;
    Vector back = shifted;
    for (auto& v : back) v -= 64.0;
    if (back == x) CHECK(softmax(shifted) == p);
  }
}

TEST_CASE("elementwise examples") {
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(fvlm::tanh(Vector{0.0}) == Vector{0.0});
  CHECK(hadamard(Vector{2, 3}, Vector{4, 5}) == Vector{8, 15});
  CHECK(add(Vector{2, 3}, Vector{4, 5}) == Vector{6, 8});
  CHECK(concat(Vector{1}, Vector{2, 3}) == Vector{1, 2, 3});
  CHECK_THROWS_AS(hadamard(Vector{1}, Vector{1, 2}), ShapeError);
  CHECK_THROWS_AS(add(Vector{1}, Vector{1, 2}), ShapeError);
}

TEST_CASE("activation ranges") {
  std::mt19937_64 rng(19);
  const Vector x = random_vector(rng, 200, 30.0);
  for (double v : sigmoid(x)) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  for (double v : fvlm::tanh(x)) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
  CHECK(sigmoid(-800.0) >= 0.0);
  CHECK(std::isfinite(sigmoid(-800.0)));
}

TEST_CASE("sgd_step examples") {
  SUBCASE("scalar step") {
    Vector p{1.0}, g{1.0};
    OptimizerState state{0.1, 10.0};
    sgd_step({view("p", p)}, {view("p", g)}, state);
    CHECK(p[0] == doctest::Approx(0.9));
  }
  SUBCASE("zero gradient is a fixed point") {
    Vector p{1.5, -2.0}, g{0.0, 0.0};
    OptimizerState state{0.7, 1.0};
    sgd_step({view("p", p)}, {view("p", g)}, state);
    CHECK(p == Vector{1.5, -2.0});
  }
  SUBCASE("global clipping across blocks") {
    Vector a{0.0}, b{0.0}, ga{3.0}, gb{4.0};
    OptimizerState state{1.0, 2.5};
    sgd_step({view("a", a), view("b", b)}, {view("a", ga), view("b", gb)}, state);
    CHECK(state.last_grad_norm == doctest::Approx(5.0));
    CHECK(a[0] == doctest::Approx(-1.5));
    CHECK(b[0] == doctest::Approx(-2.0));
  }
  SUBCASE("infinite clip and zero rate leave parameters untouched") {
    Vector p{0.3, 0.4}, g{100.0, -7.0};
    OptimizerState state{0.0, std::numeric_limits<double>::infinity()};
    sgd_step({view("p", p)}, {view("p", g)}, state);
    CHECK(p == Vector{0.3, 0.4});
  }
}

TEST_CASE("sgd_step names the block with a non-finite gradient") {
  Vector a{1.0}, b{1.0}, ga{0.5}, gb{std::nan("")};
  OptimizerState state{0.1, 5.0};
  try {
    sgd_step({view("a", a), view("layer1.w_xi", b)}, {view("a", ga), view("layer1.w_xi", gb)}, state);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("layer1.w_xi") != std::string::npos);
  }
  CHECK(a[0] == 1.0);
}

TEST_CASE("kernel Jacobians match finite differences") {
  std::mt19937_64 rng(23);
  Matrix w = random_matrix(rng, 5, 5);
  Vector x = random_vector(rng, 5), b = random_vector(rng, 5);
  const Vector probe = random_vector(rng, 5);
  // L = probe . tanh(sigmoid(W x + b) * softmax(x))
  auto loss = [&] {
    const Vector a = sigmoid(affine(w, x, b));
    const Vector s = softmax(x);
    return dot(probe.span(), fvlm::tanh(hadamard(a, s)).span());
  };
  // Analytic gradient by hand.
  const Vector z = affine(w, x, b);
  const Vector a = sigmoid(z);
  const Vector s = softmax(x);
  const Vector u = hadamard(a, s);
  const Vector t = fvlm::tanh(u);
  Vector du(5), da(5), ds(5), dz(5);
  for (std::size_t k = 0; k < 5; ++k) {
    du[k] = probe[k] * (1 - t[k] * t[k]);
    da[k] = du[k] * s[k];
    ds[k] = du[k] * a[k];
    dz[k] = da[k] * a[k] * (1 - a[k]);
  }
  Matrix gw(5, 5);
  Vector gb(5), gx(5);
  outer_acc(gw, dz.span(), x.span());
  axpy(1.0, dz.span(), gb.span());
  gemv_t_acc(w, dz.span(), gx.span());
  const double sds = dot(s.span(), ds.span());
  for (std::size_t k = 0; k < 5; ++k) gx[k] += s[k] * (ds[k] - sds);

  const auto result = testing::check_gradients({view("w", w), view("b", b), view("x", x)},
                                               {view("w", gw), view("b", gb), view("x", gx)}, loss,
                                               1e-5, 1e-4);
  CHECK(result.max_relative_error < 1e-6);
}

TEST_CASE("checksum sees every bit") {
  Vector v{1.0, 2.0};
  const auto before = checksum({view("v", v)});
  v[1] = std::nextafter(2.0, 3.0);
  CHECK(checksum({view("v", v)}) != before);
}

}  // TEST_SUITE
