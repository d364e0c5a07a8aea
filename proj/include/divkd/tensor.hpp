#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace divkd {

/// Thrown when array shapes do not line up (matmul, elementwise ops, ...).
class ShapeError : public std::runtime_error {
public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Thrown when a computation produces non-finite values (diverged training,
/// NaN losses). Maps to the runtime-numerical-failure exit code in the CLI.
class NumericalError : public std::runtime_error {
public:
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Dense array shape. Rank 0 denotes a scalar (one element).
struct Shape {
  std::vector<std::size_t> dims;

  Shape() = default;
  Shape(std::initializer_list<std::size_t> d) : dims(d) {}
  explicit Shape(std::vector<std::size_t> d) : dims(std::move(d)) {}

  std::size_t rank() const { return dims.size(); }

  std::size_t count() const {
    std::size_t n = 1;
    for (std::size_t d : dims) n *= d;
    return n;
  }

  bool operator==(const Shape& o) const { return dims == o.dims; }
  bool operator!=(const Shape& o) const { return dims != o.dims; }

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims.size(); ++i) {
      if (i) os << 'x';
      os << dims[i];
    }
    os << ']';
    return os.str();
  }
};

/// Dense 64-bit real array, row-major. Rank 0 (scalar), 1 (vector) and
/// 2 (matrix) are what the rest of the library uses.
class Tensor {
public:
  Tensor() : shape_{}, data_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_.count(), fill) {}

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)), data_(std::move(values)) {
    if (data_.size() != shape_.count())
      throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
  }

  static Tensor scalar(double v) {
    Tensor t{Shape{}};
    t.data_[0] = v;
    return t;
  }

  static Tensor vector(std::vector<double> v) {
    Shape s{v.size()};
    return Tensor(s, std::move(v));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

  const Shape& shape() const { return shape_; }
  std::size_t count() const { return data_.size(); }
  bool is_scalar() const { return data_.size() == 1 && shape_.rank() == 0; }

  /// Rows/cols of a rank-1 or rank-2 tensor; a rank-1 tensor is one row.
  std::size_t rows() const {
    if (shape_.rank() == 2) return shape_.dims[0];
    if (shape_.rank() <= 1) return 1;
    throw ShapeError("rows() on tensor of shape " + shape_.str());
  }
  std::size_t cols() const {
    if (shape_.rank() == 2) return shape_.dims[1];
    if (shape_.rank() == 1) return shape_.dims[0];
    if (shape_.rank() == 0) return 1;
    throw ShapeError("cols() on tensor of shape " + shape_.str());
  }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  double value() const {
    if (data_.size() != 1)
      throw ShapeError("value() on non-scalar tensor " + shape_.str());
    return data_[0];
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  /// View row r of a rank-2 tensor as a rank-1 tensor (copies).
  Tensor row(std::size_t r) const {
    std::size_t c = cols();
    std::vector<double> v(data_.begin() + r * c, data_.begin() + (r + 1) * c);
    return Tensor::vector(std::move(v));
  }

  /// Same data reinterpreted as a 1xN matrix.
  Tensor as_row_matrix() const { return Tensor(Shape{1, count()}, data_); }

  bool operator==(const Tensor& o) const {
    return shape_ == o.shape_ && data_ == o.data_;
  }

private:
  Shape shape_;
  std::vector<double> data_;
};

// ---- value-level helpers (no gradient graph) ----

inline Tensor matmul_value(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions disagree, " + a.shape().str() +
                     " vs " + b.shape().str());
  std::size_t n = a.rows(), m = a.cols(), p = b.cols();
  Tensor out{Shape{n, p}};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < m; ++k) {
      double aik = a.at(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < p; ++j) out.at(i, j) += aik * b.at(k, j);
    }
  return out;
}

/// Row-wise softmax with max subtraction. temperature must be > 0.
inline Tensor softmax_rows_value(const Tensor& z, double temperature = 1.0) {
  if (!(temperature > 0.0))
    throw std::domain_error("softmax: temperature must be positive, got " +
                            std::to_string(temperature));
  std::size_t n = z.rows(), k = z.cols();
  Tensor out{Shape{n, k}};
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, z.at(i, j) / temperature);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      double e = std::exp(z.at(i, j) / temperature - mx);
      out.at(i, j) = e;
      sum += e;
    }
    for (std::size_t j = 0; j < k; ++j) out.at(i, j) /= sum;
  }
  return out;
}

/// Index of the row maximum; ties break to the lowest index.
inline std::size_t argmax_row(const Tensor& t, std::size_t r) {
  std::size_t best = 0;
  double bv = t.at(r, 0);
  for (std::size_t j = 1; j < t.cols(); ++j)
    if (t.at(r, j) > bv) {
      bv = t.at(r, j);
      best = j;
    }
  return best;
}

inline double l2_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double l2_distance(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("l2_distance: shape mismatch " + a.shape().str() + " vs " +
                     b.shape().str());
  double s = 0.0;
  for (std::size_t i = 0; i < a.count(); ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

/// Floor used before every logarithm in losses and metrics.
inline constexpr double kLogFloor = 1e-300;

inline double log_clamped(double x) { return std::log(std::max(x, kLogFloor)); }

}  // namespace divkd
