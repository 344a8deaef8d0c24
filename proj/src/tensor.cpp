#include "mode/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <sstream>

#include "mode/error.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace mode {
namespace {

#if defined(__GLIBC__)
// Activation buffers are a few MB and are freed and reallocated every step.
// Served by mmap they page-fault on every touch; keep them on the heap.
const bool kHeapTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  return true;
}();
#endif

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

ConstMap as_matrix(const Tensor& t) {
  return ConstMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

MutMap as_matrix(Tensor& t) {
  return MutMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " + shape_string(t.shape()));
  }
}

[[noreturn]] void mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                       shape_string(b.shape()));
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("Tensor: shape " + shape_string(shape_) + " does not hold " +
                         std::to_string(data_.size()) + " elements");
  }
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
  return Tensor({rows, cols}, std::vector<double>(values));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

std::size_t Tensor::rows() const noexcept {
  if (shape_.empty()) return 1;
  std::size_t r = 1;
  for (std::size_t i = 0; i + 1 < shape_.size(); ++i) r *= shape_[i];
  return r;
}

std::size_t Tensor::cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
  if (shape_numel(shape) != data_.size()) {
    throw DimensionError("reshape: cannot view " + shape_string(shape_) + " as " + shape_string(shape));
  }
  shape_ = std::move(shape);
  return std::move(*this);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) mismatch("matmul", a, b);
  Tensor c({a.rows(), b.cols()});
  if (a.cols() == 0) return c;
  as_matrix(c).noalias() = as_matrix(a) * as_matrix(b);
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) mismatch("matmul_tn", a, b);
  Tensor c({a.cols(), b.cols()});
  if (a.rows() == 0) return c;
  as_matrix(c).noalias() = as_matrix(a).transpose() * as_matrix(b);
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) mismatch("matmul_nt", a, b);
  Tensor c({a.rows(), b.rows()});
  if (a.cols() == 0) return c;
  as_matrix(c).noalias() = as_matrix(a) * as_matrix(b).transpose();
  return c;
}

void matmul_accumulate(const Tensor& a, const Tensor& b, Tensor& c) {
  if (a.cols() != b.rows() || c.rows() != a.rows() || c.cols() != b.cols()) mismatch("matmul_accumulate", a, b);
  if (a.cols() == 0) return;
  as_matrix(c).noalias() += as_matrix(a) * as_matrix(b);
}

void matmul_tn_accumulate(const Tensor& a, const Tensor& b, Tensor& c) {
  if (a.rows() != b.rows() || c.rows() != a.cols() || c.cols() != b.cols()) mismatch("matmul_tn_accumulate", a, b);
  if (a.rows() == 0) return;
  as_matrix(c).noalias() += as_matrix(a).transpose() * as_matrix(b);
}

void matmul_nt_accumulate(const Tensor& a, const Tensor& b, Tensor& c) {
  if (a.cols() != b.cols() || c.rows() != a.rows() || c.cols() != b.rows()) mismatch("matmul_nt_accumulate", a, b);
  if (a.cols() == 0) return;
  as_matrix(c).noalias() += as_matrix(a) * as_matrix(b).transpose();
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= std::max<std::size_t>(x.rank(), 1)) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_string(x.shape()));
  }
  for (double v : x.flat()) {
    if (std::isnan(v)) throw NumericError("softmax: NaN input");
  }
  // View the tensor as [outer, extent, inner] and normalize along the middle.
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  const std::size_t extent = s.empty() ? 1 : s[axis];
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Tensor y(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * extent * inner + in;
      double m = -INFINITY;
      for (std::size_t e = 0; e < extent; ++e) m = std::max(m, x[base + e * inner]);
      double z = 0.0;
      for (std::size_t e = 0; e < extent; ++e) {
        const double v = std::exp(x[base + e * inner] - m);
        y[base + e * inner] = v;
        z += v;
      }
      for (std::size_t e = 0; e < extent; ++e) y[base + e * inner] /= z;
    }
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = x.cols();
  if (d == 0) throw DimensionError("layer_norm: empty feature dimension");
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_string(gain.shape()) + "/" + shape_string(bias.shape()) +
                         " do not match features of " + shape_string(x.shape()));
  }
  Tensor y(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto out = y.row(r);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) out[c] = (in[c] - mean) * inv * gain[c] + bias[c];
  }
  return y;
}

double sigmoid(double x) noexcept {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor sigmoid(const Tensor& x) {
  Tensor y(x.shape());
  const auto n = static_cast<Eigen::Index>(x.size());
  Eigen::Map<const Eigen::ArrayXd> xs(x.data(), n);
  // exp(-x) overflows to inf for very negative x, giving exactly 0.
  Eigen::Map<Eigen::ArrayXd>(y.data(), n) = (1.0 + (-xs).exp()).inverse();
  return y;
}

Tensor silu(const Tensor& x) {
  Tensor y = sigmoid(x);
  const auto n = static_cast<Eigen::Index>(x.size());
  Eigen::Map<Eigen::ArrayXd>(y.data(), n) *= Eigen::Map<const Eigen::ArrayXd>(x.data(), n);
  return y;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  Tensor t({a.cols(), a.rows()});
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) t.at(c, r) = a.at(r, c);
  return t;
}

void axpy(double alpha, const Tensor& x, Tensor& y) {
  if (x.size() != y.size()) mismatch("axpy", x, y);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

bool all_finite(std::span<const double> v) noexcept {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace mode
