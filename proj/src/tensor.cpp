#include "nnspec/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "nnspec/error.hpp"

namespace nnspec {

namespace {

std::size_t checked_volume(const Tensor::Dims& dims) {
  if (dims.empty() || dims.size() > 4) {
    throw ShapeError("tensor rank must be between 1 and 4, got " +
                     std::to_string(dims.size()));
  }
  std::size_t volume = 1;
  for (std::size_t extent : dims) {
    if (extent == 0) {
      throw ShapeError("tensor extents must be positive: " + format_dims(dims));
    }
    volume *= extent;
  }
  return volume;
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(what) + ": expected a matrix, got dims " +
                     format_dims(t.dims()));
  }
}

}  // namespace

Tensor::Tensor(Dims dims) : dims_(std::move(dims)) {
  data_.assign(checked_volume(dims_), 0.0f);
}

Tensor::Tensor(Dims dims, std::vector<float> data)
    : dims_(std::move(dims)), data_(std::move(data)) {
  const std::size_t volume = checked_volume(dims_);
  if (volume != data_.size()) {
    throw ShapeError("tensor dims " + format_dims(dims_) + " need " +
                     std::to_string(volume) + " values, got " +
                     std::to_string(data_.size()));
  }
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::initializer_list<float> values) {
  return Tensor({rows, cols}, std::vector<float>(values));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0f;
  return t;
}

std::size_t Tensor::rows() const {
  require_matrix(*this, "rows");
  return dims_[0];
}

std::size_t Tensor::cols() const {
  require_matrix(*this, "cols");
  return dims_[1];
}

Tensor Tensor::reshaped(Dims dims) const {
  if (checked_volume(dims) != data_.size()) {
    throw ShapeError("cannot reshape " + format_dims(dims_) + " to " +
                     format_dims(dims));
  }
  return Tensor(std::move(dims), data_);
}

Tensor Tensor::slice0(std::size_t index) const {
  if (rank() < 2 || index >= dims_[0]) {
    throw ShapeError("slice0 index " + std::to_string(index) +
                     " invalid for dims " + format_dims(dims_));
  }
  Dims inner(dims_.begin() + 1, dims_.end());
  const std::size_t stride = data_.size() / dims_[0];
  auto first = data_.begin() + static_cast<std::ptrdiff_t>(index * stride);
  return Tensor(std::move(inner),
                std::vector<float>(first, first + static_cast<std::ptrdiff_t>(stride)));
}

std::string format_dims(const Tensor::Dims& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) os << ", ";
    os << dims[i];
  }
  os << ']';
  return os.str();
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul lhs");
  require_matrix(b, "matmul rhs");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul inner dimensions disagree: " +
                     format_dims(a.dims()) + " x " + format_dims(b.dims()));
  }
  // Accumulate rows of the result in double, streaming over b row-major.
  Tensor out({m, n});
  std::vector<double> acc(n);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const float* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += aip * brow[j];
    }
    for (std::size_t j = 0; j < n; ++j) out(i, j) = static_cast<float>(acc[j]);
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  Tensor out({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

double frobenius_norm(const Tensor& a) {
  double sum = 0.0;
  for (float v : a.data()) sum += static_cast<double>(v) * v;
  return std::sqrt(sum);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.dims() != b.dims()) {
    throw ShapeError("max_abs_diff: dims " + format_dims(a.dims()) + " vs " +
                     format_dims(b.dims()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(a.data()[i]) - b.data()[i]));
  }
  return worst;
}

Eigen::MatrixXd to_matrix(const Tensor& a) {
  require_matrix(a, "to_matrix");
  Eigen::MatrixXd m(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) m(i, j) = a(i, j);
  return m;
}

Tensor from_matrix(const Eigen::MatrixXd& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      t(i, j) = static_cast<float>(m(i, j));
  return t;
}

}  // namespace nnspec
