#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "limeguard/errors.hpp"

namespace limeguard {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Per-sample input geometry (channels, height, width).
struct InputShape {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const { return channels * height * width; }
  std::size_t plane() const { return height * width; }
  bool operator==(const InputShape&) const = default;
  std::string str() const;
};

/// Dense NCHW tensor. Scalar is double or Dual.
template <class T>
class BasicTensor {
 public:
  BasicTensor() = default;
  BasicTensor(std::size_t n, InputShape shape) : n_(n), shape_(shape), data_(n * shape.size()) {}
  BasicTensor(std::size_t n, InputShape shape, std::vector<T> data)
      : n_(n), shape_(shape), data_(std::move(data)) {
    if (data_.size() != n_ * shape_.size()) throw ConfigError("tensor data size does not match shape");
  }

  std::size_t batch() const { return n_; }
  const InputShape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t sample_size() const { return shape_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  std::span<T> sample(std::size_t i) { return {data_.data() + i * shape_.size(), shape_.size()}; }
  std::span<const T> sample(std::size_t i) const {
    return {data_.data() + i * shape_.size(), shape_.size()};
  }

  T& at(std::size_t i, std::size_t c, std::size_t y, std::size_t x) {
    return data_[((i * shape_.channels + c) * shape_.height + y) * shape_.width + x];
  }
  const T& at(std::size_t i, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[((i * shape_.channels + c) * shape_.height + y) * shape_.width + x];
  }
  T& operator[](std::size_t k) { return data_[k]; }
  const T& operator[](std::size_t k) const { return data_[k]; }

  // Reinterpret the per-sample layout without touching data.
  void reshape(InputShape shape) {
    if (shape.size() != shape_.size()) throw ConfigError("reshape changes element count");
    shape_ = shape;
  }

 private:
  std::size_t n_ = 0;
  InputShape shape_{};
  std::vector<T> data_;
};

using Tensor = BasicTensor<double>;

/// Inputs in [0,1] with integer class labels.
struct LabeledBatch {
  Tensor inputs;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }

  // Throws ConfigError unless sizes agree, labels lie in [0, num_classes)
  // and every input value lies in [0,1].
  void validate(int num_classes) const;
  // Size agreement and label range only.
  void validate_labels(int num_classes) const;

  LabeledBatch subset(std::span<const std::size_t> indices) const;
  LabeledBatch slice(std::size_t begin, std::size_t end) const;
};

/// Single-sample tensor view copied out of a batch.
Tensor take_sample(const Tensor& batch, std::size_t i);

/// Concatenate along the batch dimension; shapes must agree.
LabeledBatch concat(const LabeledBatch& a, const LabeledBatch& b);

}  // namespace limeguard
