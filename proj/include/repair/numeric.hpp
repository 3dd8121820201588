#pragma once

// Dense row-major linear algebra in double precision, explicit backward
// rules for the few differentiable primitives the editor needs, and a
// central finite-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace repair {

/// Raised when operand shapes are incompatible.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a computation produces or receives NaN/Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(),
                     [](double v) { return std::isfinite(v); });
}

class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t dim, double fill = 0.0) : data_(dim, fill) {}
  explicit Vector(std::vector<double> data) : data_(std::move(data)) {}
  Vector(std::initializer_list<double> init) : data_(init) {}

  std::size_t dim() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  const std::vector<double>& raw() const { return data_; }

  auto begin() { return data_.begin(); }
  auto end() { return data_.end(); }
  auto begin() const { return data_.begin(); }
  auto end() const { return data_.end(); }

  Vector& operator+=(const Vector& other) {
    require_same_dim(other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }
  Vector& operator-=(const Vector& other) {
    require_same_dim(other, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
  }
  Vector& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  friend Vector operator+(Vector a, const Vector& b) { return a += b; }
  friend Vector operator-(Vector a, const Vector& b) { return a -= b; }
  friend Vector operator*(Vector a, double s) { return a *= s; }
  friend Vector operator*(double s, Vector a) { return a *= s; }
  friend bool operator==(const Vector&, const Vector&) = default;

 private:
  void require_same_dim(const Vector& other, const char* op) const {
    if (other.dim() != dim()) {
      std::ostringstream msg;
      msg << "vector " << op << ": dim " << dim() << " vs " << other.dim();
      throw ShapeError(msg.str());
    }
  }

  std::vector<double> data_;
};

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      std::ostringstream msg;
      msg << "matrix data length " << data_.size() << " does not match shape "
          << rows_ << "x" << cols_;
      throw ShapeError(msg.str());
    }
  }

  /// Builds a matrix from nested row literals; all rows must have equal length.
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("from_rows: ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  std::string shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  Matrix& operator+=(const Matrix& other) {
    require_same_shape(other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }
  Matrix& operator-=(const Matrix& other) {
    require_same_shape(other, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
  }
  Matrix& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }
  /// this += s * other, without a temporary.
  Matrix& add_scaled(const Matrix& other, double s) {
    require_same_shape(other, "add_scaled");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * other.data_[i];
    return *this;
  }

  friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
  friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
  friend Matrix operator*(Matrix a, double s) { return a *= s; }
  friend Matrix operator*(double s, Matrix a) { return a *= s; }
  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  void require_same_shape(const Matrix& other, const char* op) const {
    if (!same_shape(other)) {
      throw ShapeError(std::string("matrix ") + op + ": shape " + shape_string() +
                       " vs " + other.shape_string());
    }
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("dot: length " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double l2_norm(std::span<const double> v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}
inline double l2_norm(const Vector& v) { return l2_norm(v.values()); }
inline double frobenius_norm(const Matrix& m) { return l2_norm(m.values()); }

/// Returns v / ||v||; a zero vector cannot be normalized.
inline Vector normalized(const Vector& v) {
  const double n = l2_norm(v);
  if (!(n > 0.0)) throw NumericError("normalize: zero-norm vector");
  return v * (1.0 / n);
}

inline double cosine(const Vector& a, const Vector& b) {
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (!(na > 0.0) || !(nb > 0.0)) throw NumericError("cosine: zero-norm vector");
  return dot(a.values(), b.values()) / (na * nb);
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: cannot multiply " + a.shape_string() + " by " +
                     b.shape_string());
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
    }
  }
  return out;
}

/// Row vector times matrix: (1 x m.rows) * (m.rows x m.cols).
inline Vector vecmat(std::span<const double> v, const Matrix& m) {
  if (v.size() != m.rows()) {
    throw ShapeError("vecmat: vector of dim " + std::to_string(v.size()) +
                     " against matrix " + m.shape_string());
  }
  Vector out(m.cols());
  for (std::size_t k = 0; k < m.rows(); ++k) {
    const double vk = v[k];
    if (vk == 0.0) continue;
    auto row = m.row(k);
    for (std::size_t j = 0; j < m.cols(); ++j) out[j] += vk * row[j];
  }
  return out;
}
inline Vector vecmat(const Vector& v, const Matrix& m) { return vecmat(v.values(), m); }

/// Matrix times column vector.
inline Vector matvec(const Matrix& m, std::span<const double> v) {
  if (v.size() != m.cols()) {
    throw ShapeError("matvec: matrix " + m.shape_string() + " against vector of dim " +
                     std::to_string(v.size()));
  }
  Vector out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) out[i] = dot(m.row(i), v);
  return out;
}

/// out += s * (u ⊗ v), the rank-one update u^T v.
inline void add_outer(Matrix& out, std::span<const double> u, std::span<const double> v,
                      double s = 1.0) {
  if (out.rows() != u.size() || out.cols() != v.size()) {
    throw ShapeError("add_outer: target " + out.shape_string() + " vs outer " +
                     std::to_string(u.size()) + "x" + std::to_string(v.size()));
  }
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double ui = s * u[i];
    if (ui == 0.0) continue;
    auto row = out.row(i);
    for (std::size_t j = 0; j < v.size(); ++j) row[j] += ui * v[j];
  }
}

inline Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  return t;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("hadamard: shape " + a.shape_string() + " vs " + b.shape_string());
  }
  Matrix out(a.rows(), a.cols());
  auto av = a.values();
  auto bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  return out;
}

/// Gradients of a scalar loss with respect to both matmul operands.
struct MatmulGrads {
  Matrix grad_a;
  Matrix grad_b;
};

/// Backward rule for C = A B given dL/dC: dA = dC B^T, dB = A^T dC.
inline MatmulGrads matmul_backward(const Matrix& a, const Matrix& b, const Matrix& grad_out) {
  if (grad_out.rows() != a.rows() || grad_out.cols() != b.cols()) {
    throw ShapeError("matmul_backward: upstream gradient " + grad_out.shape_string() +
                     " does not match product of " + a.shape_string() + " and " +
                     b.shape_string());
  }
  return {matmul(grad_out, transpose(b)), matmul(transpose(a), grad_out)};
}

/// Scalar loss value together with its analytic gradient.
struct LossAndGrad {
  double value = 0.0;
  Matrix grad;
};

struct GradCheckResult {
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
};

inline constexpr double kFiniteDifferenceStep = 1e-4;

/// Compares the analytic gradient returned by `fn` at `params` against
/// central finite differences of its value, entry by entry.
template <typename LossFn>
GradCheckResult grad_check(LossFn&& fn, const Matrix& params,
                           double step = kFiniteDifferenceStep) {
  const LossAndGrad at = fn(params);
  if (!at.grad.same_shape(params)) {
    throw ShapeError("grad_check: gradient " + at.grad.shape_string() +
                     " does not match parameters " + params.shape_string());
  }
  GradCheckResult result;
  Matrix probe = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double original = probe.values()[i];
    probe.values()[i] = original + step;
    const double plus = fn(probe).value;
    probe.values()[i] = original - step;
    const double minus = fn(probe).value;
    probe.values()[i] = original;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      throw NumericError("grad_check: non-finite loss when perturbing index " +
                         std::to_string(i));
    }
    const double numeric = (plus - minus) / (2.0 * step);
    const double err = std::abs(numeric - at.grad.values()[i]);
    if (err > result.max_abs_error) {
      result.max_abs_error = err;
      result.worst_index = i;
    }
  }
  return result;
}

}  // namespace repair
