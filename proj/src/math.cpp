#include "fvlm/math.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "fvlm/error.hpp"

namespace fvlm {

namespace {

[[noreturn]] void shape_error(const char* op, std::size_t lhs, std::size_t rhs,
                              const char* lhs_name, const char* rhs_name) {
  std::ostringstream msg;
  msg << op << ": dimension mismatch between " << lhs_name << " (" << lhs
      << ") and " << rhs_name << " (" << rhs << ")";
  throw ShapeError(msg.str());
}

// Two lanes per register: lo holds partials (s0, s1), hi holds (s2, s3).
// Each lane sees exactly the scalar sequence of multiplies and adds.
typedef double Lanes __attribute__((vector_size(16)));

inline Lanes load2(const double* p) {
  Lanes v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline double fold(Lanes lo, Lanes hi, const double* a, const double* b, std::size_t c,
                   std::size_t n) {
  if (c < n) lo[0] += a[c] * b[c];
  if (c + 1 < n) lo[1] += a[c + 1] * b[c + 1];
  if (c + 2 < n) hi[0] += a[c + 2] * b[c + 2];
  return (lo[0] + lo[1]) + (hi[0] + hi[1]);
}

inline double dot4(const double* a, const double* b, std::size_t n) {
  Lanes lo = {0.0, 0.0}, hi = {0.0, 0.0};
  std::size_t c = 0;
  for (; c + 4 <= n; c += 4) {
    lo += load2(a + c) * load2(b + c);
    hi += load2(a + c + 2) * load2(b + c + 2);
  }
  return fold(lo, hi, a, b, c, n);
}

// dot4(a, b0, n) and dot4(a, b1, n) sharing the loads of a.
inline void dot4_pair(const double* a, const double* b0, const double* b1, std::size_t n,
                      double& out0, double& out1) {
  Lanes lo0 = {0.0, 0.0}, hi0 = {0.0, 0.0}, lo1 = {0.0, 0.0}, hi1 = {0.0, 0.0};
  std::size_t c = 0;
  for (; c + 4 <= n; c += 4) {
    const Lanes a_lo = load2(a + c);
    const Lanes a_hi = load2(a + c + 2);
    lo0 += a_lo * load2(b0 + c);
    hi0 += a_hi * load2(b0 + c + 2);
    lo1 += a_lo * load2(b1 + c);
    hi1 += a_hi * load2(b1 + c + 2);
  }
  out0 = fold(lo0, hi0, a, b0, c, n);
  out1 = fold(lo1, hi1, a, b1, c, n);
}

}  // namespace

void Vector::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows)
    : rows_(rows.size()), cols_(rows.size() ? rows.begin()->size() : 0) {
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ShapeError("Matrix: ragged initializer list");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

void Matrix::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Vector affine(const Matrix& w, std::span<const double> x, const Vector& b) {
  if (w.cols() != x.size()) shape_error("affine", w.cols(), x.size(), "W.cols", "x");
  if (w.rows() != b.size()) shape_error("affine", w.rows(), b.size(), "W.rows", "b");
  Vector out(w.rows());
  for (std::size_t r = 0; r < w.rows(); ++r) {
    out[r] = dot4(w.data() + r * w.cols(), x.data(), x.size()) + b[r];
  }
  return out;
}

std::vector<Vector> affine_all(const Matrix& w, const std::vector<Vector>& xs, const Vector& b) {
  if (w.rows() != b.size()) shape_error("affine", w.rows(), b.size(), "W.rows", "b");
  for (const auto& x : xs) {
    if (w.cols() != x.size()) shape_error("affine", w.cols(), x.size(), "W.cols", "x");
  }
  std::vector<Vector> out(xs.size(), Vector(w.rows()));
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const double* row = w.data() + r * w.cols();
    std::size_t t = 0;
    for (; t + 2 <= xs.size(); t += 2) {
      double d0 = 0.0, d1 = 0.0;
      dot4_pair(row, xs[t].data(), xs[t + 1].data(), w.cols(), d0, d1);
      out[t][r] = d0 + b[r];
      out[t + 1][r] = d1 + b[r];
    }
    if (t < xs.size()) out[t][r] = dot4(row, xs[t].data(), w.cols()) + b[r];
  }
  return out;
}

std::vector<Vector> affine_all_backward(const Matrix& w, const std::vector<Vector>& xs,
                                        const std::vector<Vector>& ds, Matrix& g, Vector& gb) {
  if (xs.size() != ds.size()) shape_error("affine backward", xs.size(), ds.size(), "xs", "ds");
  if (g.rows() != w.rows() || g.cols() != w.cols()) {
    shape_error("affine backward", g.rows() * g.cols(), w.rows() * w.cols(), "G", "W");
  }
  if (gb.size() != w.rows()) shape_error("affine backward", gb.size(), w.rows(), "gb", "W.rows");
  const std::size_t cols = w.cols();
  for (std::size_t t = 0; t < xs.size(); ++t) {
    if (xs[t].size() != cols) shape_error("affine backward", xs[t].size(), cols, "x", "W.cols");
    if (ds[t].size() != w.rows()) shape_error("affine backward", ds[t].size(), w.rows(), "d", "W.rows");
  }
  std::vector<Vector> dxs(xs.size(), Vector(cols));
  // Columns are processed in blocks of eight with the gradient row held in
  // registers across positions. Every element still sees its updates in the
  // same order as the plain loops (positions ascending for G, rows ascending
  // for dx).
  const std::size_t blocked = cols - cols % 8;
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const double* row = w.data() + r * cols;
    double* grow = g.data() + r * cols;
    for (std::size_t c = 0; c < blocked; c += 8) {
      Lanes g0 = load2(grow + c), g1 = load2(grow + c + 2), g2 = load2(grow + c + 4),
            g3 = load2(grow + c + 6);
      const Lanes w0 = load2(row + c), w1 = load2(row + c + 2), w2 = load2(row + c + 4),
                  w3 = load2(row + c + 6);
      for (std::size_t t = 0; t < xs.size(); ++t) {
        const double d = ds[t][r];
        if (d == 0.0) continue;
        const Lanes dd = {d, d};
        const double* x = xs[t].data() + c;
        double* dx = dxs[t].data() + c;
        g0 += dd * load2(x);
        g1 += dd * load2(x + 2);
        g2 += dd * load2(x + 4);
        g3 += dd * load2(x + 6);
        const Lanes x0 = load2(dx) + dd * w0, x1 = load2(dx + 2) + dd * w1,
                    x2 = load2(dx + 4) + dd * w2, x3 = load2(dx + 6) + dd * w3;
        std::memcpy(dx, &x0, sizeof x0);
        std::memcpy(dx + 2, &x1, sizeof x1);
        std::memcpy(dx + 4, &x2, sizeof x2);
        std::memcpy(dx + 6, &x3, sizeof x3);
      }
      std::memcpy(grow + c, &g0, sizeof g0);
      std::memcpy(grow + c + 2, &g1, sizeof g1);
      std::memcpy(grow + c + 4, &g2, sizeof g2);
      std::memcpy(grow + c + 6, &g3, sizeof g3);
    }
    for (std::size_t t = 0; t < xs.size(); ++t) {
      const double d = ds[t][r];
      if (d == 0.0) continue;
      for (std::size_t c = blocked; c < cols; ++c) {
        grow[c] += d * xs[t][c];
        dxs[t][c] += d * row[c];
      }
      gb[r] += d;
    }
  }
  return dxs;
}

void gemv_acc(const Matrix& w, std::span<const double> x, std::span<double> y) {
  if (w.cols() != x.size()) shape_error("gemv", w.cols(), x.size(), "W.cols", "x");
  if (w.rows() != y.size()) shape_error("gemv", w.rows(), y.size(), "W.rows", "y");
  for (std::size_t r = 0; r < w.rows(); ++r) {
    y[r] += dot4(w.data() + r * w.cols(), x.data(), x.size());
  }
}

void gemv_t_acc(const Matrix& w, std::span<const double> d, std::span<double> y) {
  if (w.rows() != d.size()) shape_error("gemv_t", w.rows(), d.size(), "W.rows", "d");
  if (w.cols() != y.size()) shape_error("gemv_t", w.cols(), y.size(), "W.cols", "y");
  const std::size_t cols = w.cols();
  double* out = y.data();
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const double dr = d[r];
    if (dr == 0.0) continue;
    const double* row = w.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) out[c] += dr * row[c];
  }
}

void outer_acc(Matrix& g, std::span<const double> d, std::span<const double> x) {
  if (g.rows() != d.size()) shape_error("outer", g.rows(), d.size(), "G.rows", "d");
  if (g.cols() != x.size()) shape_error("outer", g.cols(), x.size(), "G.cols", "x");
  const std::size_t cols = g.cols();
  for (std::size_t r = 0; r < g.rows(); ++r) {
    const double dr = d[r];
    if (dr == 0.0) continue;
    double* row = g.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) row[c] += dr * x[c];
  }
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) shape_error("axpy", x.size(), y.size(), "x", "y");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) shape_error("dot", a.size(), b.size(), "a", "b");
  return dot4(a.data(), b.data(), a.size());
}

Vector softmax(std::span<const double> x) {
  if (x.empty()) throw ShapeError("softmax: empty input");
  const double peak = *std::max_element(x.begin(), x.end());
  Vector out(x.size());
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - peak);
    total += out[i];
  }
  const double inv = 1.0 / total;
  for (double& v : out) v *= inv;
  return out;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Vector sigmoid(const Vector& x) {
  Vector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = sigmoid(x[i]);
  return out;
}

Vector tanh(const Vector& x) {
  Vector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
  return out;
}

Vector hadamard(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) shape_error("hadamard", a.size(), b.size(), "a", "b");
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

Vector add(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) shape_error("add", a.size(), b.size(), "a", "b");
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

Vector concat(const Vector& a, const Vector& b) {
  Vector out(a.size() + b.size());
  std::copy(a.begin(), a.end(), out.begin());
  std::copy(b.begin(), b.end(), out.begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

double squared_norm(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return s;
}

bool all_finite(std::span<const double> x) {
  return std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); });
}

ParamView view(std::string name, Matrix& m) {
  return ParamView{std::move(name), m.rows(), m.cols(), m.span()};
}

ParamView view(std::string name, Vector& v) {
  return ParamView{std::move(name), v.size(), 1, v.span()};
}

void zero(const ParamSet& set) {
  for (const auto& p : set) std::fill(p.values.begin(), p.values.end(), 0.0);
}

void sgd_step(const ParamSet& params, const ParamSet& grads, OptimizerState& state) {
  if (params.size() != grads.size()) {
    throw ShapeError("sgd_step: " + std::to_string(params.size()) +
                     " parameter blocks but " + std::to_string(grads.size()) +
                     " gradient blocks");
  }
  if (!(state.clip_norm > 0.0)) throw ConfigError("sgd_step: clip_norm must be positive");

  double total = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& p = params[k];
    const auto& g = grads[k];
    if (p.values.size() != g.values.size()) {
      throw ShapeError("sgd_step: gradient for '" + p.name + "' has " +
                       std::to_string(g.values.size()) + " entries, parameter has " +
                       std::to_string(p.values.size()));
    }
    if (!all_finite(g.values)) {
      throw TrainingError("sgd_step: non-finite gradient in block '" + p.name + "'");
    }
    total += squared_norm(g.values);
  }
  const double norm = std::sqrt(total);
  state.last_grad_norm = norm;
  const double scale = norm > state.clip_norm ? state.clip_norm / norm : 1.0;
  const double step = state.learning_rate * scale;
  if (step == 0.0) return;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto pv = params[k].values;
    auto gv = grads[k].values;
    for (std::size_t i = 0; i < pv.size(); ++i) pv[i] -= step * gv[i];
  }
}

void init_uniform(const ParamSet& set, double scale, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  for (const auto& p : set) {
    for (double& v : p.values) v = dist(rng);
  }
}

std::uint64_t checksum(const ParamSet& set) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : set) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.values.data());
    for (std::size_t i = 0; i < p.values.size_bytes(); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

}  // namespace fvlm
