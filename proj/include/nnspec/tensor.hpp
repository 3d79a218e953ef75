#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace nnspec {

// Dense row-major float32 array of rank 1..4. A default-constructed Tensor is
// the empty placeholder (rank 0, no data); every other Tensor satisfies
// product(dims) == size() with all extents >= 1.
class Tensor {
 public:
  using Dims = std::vector<std::size_t>;

  Tensor() = default;
  explicit Tensor(Dims dims);
  Tensor(Dims dims, std::vector<float> data);

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<float> values);
  static Tensor identity(std::size_t n);

  const Dims& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  const std::vector<float>& values() const noexcept { return data_; }

  // Matrix accessors; require rank 2.
  std::size_t rows() const;
  std::size_t cols() const;
  float& operator()(std::size_t r, std::size_t c) { return data_[r * dims_[1] + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * dims_[1] + c]; }

  // Same payload, new extents; the element count must match.
  Tensor reshaped(Dims dims) const;

  // Sub-tensor along axis 0, e.g. sample `index` of a batch.
  Tensor slice0(std::size_t index) const;

  bool operator==(const Tensor& other) const = default;

 private:
  Dims dims_;
  std::vector<float> data_;
};

std::string format_dims(const Tensor::Dims& dims);

// Product of two rank-2 tensors with double-precision accumulation.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

double frobenius_norm(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);

// Conversions between float storage and double working precision.
Eigen::MatrixXd to_matrix(const Tensor& a);
Tensor from_matrix(const Eigen::MatrixXd& m);

}  // namespace nnspec
