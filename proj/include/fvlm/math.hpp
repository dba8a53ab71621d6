#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace fvlm {

/// Dense vector of 64-bit floats.
class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t dim, double fill = 0.0) : data_(dim, fill) {}
  Vector(std::initializer_list<double> values) : data_(values) {}
  explicit Vector(std::span<const double> values)
      : data_(values.begin(), values.end()) {}

  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> span() { return data_; }
  std::span<const double> span() const { return data_; }

  auto begin() { return data_.begin(); }
  auto end() { return data_.end(); }
  auto begin() const { return data_.begin(); }
  auto end() const { return data_.end(); }

  void fill(double value);

  bool operator==(const Vector&) const = default;

 private:
  std::vector<double> data_;
};

/// Dense row-major matrix of 64-bit floats.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> span() { return data_; }
  std::span<const double> span() const { return data_; }

  void fill(double value);

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Kernels. Every dot product accumulates column c into partial sum c % 4 and
// folds the partials as (s0 + s1) + (s2 + s3). A row that is a prefix of a
// longer row with zero tail therefore produces the same bits.

/// W x + b.
Vector affine(const Matrix& w, std::span<const double> x, const Vector& b);
inline Vector affine(const Matrix& w, const Vector& x, const Vector& b) {
  return affine(w, x.span(), b);
}

/// affine(W, xs[t], b) for every t, reading W once. Results match the
/// single-vector call exactly.
std::vector<Vector> affine_all(const Matrix& w, const std::vector<Vector>& xs, const Vector& b);

/// Backward of affine_all in one pass over W: G += sum_t ds[t] xs[t]^T,
/// gb += sum_t ds[t], and dxs[t] = W^T ds[t].
std::vector<Vector> affine_all_backward(const Matrix& w, const std::vector<Vector>& xs,
                                        const std::vector<Vector>& ds, Matrix& g, Vector& gb);

/// y += W x
void gemv_acc(const Matrix& w, std::span<const double> x, std::span<double> y);
/// y += W^T d
void gemv_t_acc(const Matrix& w, std::span<const double> d, std::span<double> y);
/// G += d x^T
void outer_acc(Matrix& g, std::span<const double> d, std::span<const double> x);
/// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);

double dot(std::span<const double> a, std::span<const double> b);

/// Numerically stable softmax (max subtraction). x must be non-empty.
Vector softmax(std::span<const double> x);
inline Vector softmax(const Vector& x) { return softmax(x.span()); }

double sigmoid(double x);
Vector sigmoid(const Vector& x);
Vector tanh(const Vector& x);
Vector hadamard(const Vector& a, const Vector& b);
Vector add(const Vector& a, const Vector& b);

/// Concatenation (a, b).
Vector concat(const Vector& a, const Vector& b);

double squared_norm(std::span<const double> x);
bool all_finite(std::span<const double> x);

// ---------------------------------------------------------------------------
// Parameters and optimization.

/// Mutable view of one named parameter (or gradient) block.
struct ParamView {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::span<double> values;
};

using ParamSet = std::vector<ParamView>;

ParamView view(std::string name, Matrix& m);
ParamView view(std::string name, Vector& v);

/// Sets every block to zero.
void zero(const ParamSet& set);

struct OptimizerState {
  double learning_rate = 1.0;
  double clip_norm = 5.0;
  /// Global gradient norm before clipping, as seen by the last step.
  double last_grad_norm = 0.0;
};

/// Plain SGD with global-norm clipping. grads must mirror params block for
/// block. Throws TrainingError naming the block if a gradient is not finite.
void sgd_step(const ParamSet& params, const ParamSet& grads, OptimizerState& state);

/// Uniform init in [-scale, scale] from a seeded engine.
void init_uniform(const ParamSet& set, double scale, std::mt19937_64& rng);

/// FNV-1a over the raw bytes of every block; used to prove parameters did
/// not move.
std::uint64_t checksum(const ParamSet& set);

}  // namespace fvlm
