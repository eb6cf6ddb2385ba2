#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "poolnet/error.hpp"

namespace poolnet {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

// Dense row-major array with an optional gradient buffer.
//
// A tensor is a shared handle: copies alias the same storage, which is how
// parameters, the tape and the optimizer all see one set of values and one
// gradient. Use clone() for an independent copy.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : storage_(std::make_shared<Storage>()) {
    for (std::size_t d : shape) {
      if (d == 0) {
        throw ContractError("tensor dimensions must be positive, got " +
                            shape_to_string(shape));
      }
    }
    if (shape_numel(shape) != data.size()) {
      throw ContractError("tensor data length " + std::to_string(data.size()) +
                          " does not match shape " + shape_to_string(shape));
    }
    storage_->shape = std::move(shape);
    storage_->data = std::move(data);
    storage_->requires_grad = requires_grad;
  }

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return BasicTensor(std::move(shape), std::vector<T>(n, T(0)),
                       requires_grad);
  }

  static BasicTensor full(Shape shape, T value, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return BasicTensor(std::move(shape), std::vector<T>(n, value),
                       requires_grad);
  }

  static BasicTensor scalar(T value) { return BasicTensor({1}, {value}); }

  bool defined() const { return storage_ != nullptr; }

  const Shape& shape() const { return storage().shape; }
  std::size_t rank() const { return storage().shape.size(); }
  std::size_t dim(std::size_t axis) const { return storage().shape.at(axis); }
  std::size_t numel() const { return storage().data.size(); }

  std::span<const T> data() const { return storage().data; }
  // Direct write access, used by optimizers and initializers.
  std::span<T> mutable_data() { return storage().data; }
  const std::vector<T>& values() const { return storage().data; }

  T item() const {
    if (numel() != 1) {
      throw ContractError("item() on tensor of shape " +
                          shape_to_string(shape()));
    }
    return storage().data[0];
  }

  bool requires_grad() const { return storage().requires_grad; }
  void set_requires_grad(bool value) { storage().requires_grad = value; }

  bool has_grad() const { return !storage().grad.empty(); }
  std::span<const T> grad() const { return storage().grad; }

  // Gradient buffer, zero-allocated on first access. Const because the
  // handle, not the storage, is const: the tape accumulates through captured
  // copies of its inputs.
  std::span<T> mutable_grad() const {
    auto& s = storage();
    if (s.grad.empty()) {
      s.grad.assign(s.data.size(), T(0));
    }
    return s.grad;
  }

  void zero_grad() {
    auto& s = storage();
    if (!s.grad.empty()) {
      std::fill(s.grad.begin(), s.grad.end(), T(0));
    }
  }

  void clear_grad() { storage().grad.clear(); }

  bool same_storage(const BasicTensor& other) const {
    return storage_ == other.storage_;
  }

  const void* identity() const { return storage_.get(); }

  BasicTensor clone() const {
    return BasicTensor(shape(), storage().data, false);
  }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(storage().data.begin(), storage().data.end());
    return BasicTensor<U>(shape(), std::move(out), requires_grad());
  }

  bool all_finite() const {
    for (T v : storage().data) {
      if (!std::isfinite(v)) {
        return false;
      }
    }
    return true;
  }

 private:
  struct Storage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };

  Storage& storage() const {
    if (!storage_) {
      throw ContractError("use of undefined tensor");
    }
    return *storage_;
  }

  std::shared_ptr<Storage> storage_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

}  // namespace poolnet
