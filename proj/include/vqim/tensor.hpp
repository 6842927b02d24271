#pragma once

#include <memory>
#include <vector>

#include "vqim/common.hpp"
#include "vqim/rng.hpp"

namespace vqim {

enum class Dtype : uint8_t { f32 = 1, f64 = 2 };

template <typename T>
constexpr Dtype dtype_of() {
  if constexpr (std::is_same_v<T, float>) return Dtype::f32;
  return Dtype::f64;
}

// Contiguous row-major n-d array. Index (i, j) of an (R, C) tensor lives at
// i*C + j; there are no strided views, transposes materialize.
template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // same length as value when requires_grad
  bool requires_grad = false;
};

template <typename T>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    TensorT t;
    t.d_ = std::make_shared<TensorStorage<T>>();
    t.d_->shape = std::move(shape);
    for (int d : t.d_->shape)
      if (d <= 0) throw ShapeError("non-positive extent in shape " + shape_str(t.d_->shape));
    t.d_->value.assign(static_cast<size_t>(shape_numel(t.d_->shape)), T(0));
    t.set_requires_grad(requires_grad);
    return t;
  }

  static TensorT full(Shape shape, T v, bool requires_grad = false) {
    TensorT t = zeros(std::move(shape), requires_grad);
    for (auto& x : t.d_->value) x = v;
    return t;
  }

  static TensorT from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    TensorT t;
    t.d_ = std::make_shared<TensorStorage<T>>();
    t.d_->shape = std::move(shape);
    t.d_->value = std::move(data);
    t.set_requires_grad(requires_grad);
    return t;
  }

  static TensorT scalar(T v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  static TensorT randn(Shape shape, Rng& rng, T stddev = T(1), bool requires_grad = false) {
    TensorT t = zeros(std::move(shape), requires_grad);
    for (auto& x : t.d_->value) x = static_cast<T>(rng.normal(0.0, static_cast<double>(stddev)));
    return t;
  }

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  int dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(d_->value.size()); }

  T* data() { return d_->value.data(); }
  const T* data() const { return d_->value.data(); }
  std::vector<T>& values() { return d_->value; }
  const std::vector<T>& values() const { return d_->value; }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool rg) {
    d_->requires_grad = rg;
    if (rg && d_->grad.size() != d_->value.size()) d_->grad.assign(d_->value.size(), T(0));
  }

  T* grad() { return d_->grad.data(); }
  const T* grad() const { return d_->grad.data(); }
  std::vector<T>& grads() { return d_->grad; }
  const std::vector<T>& grads() const { return d_->grad; }

  void zero_grad() {
    for (auto& g : d_->grad) g = T(0);
  }

  T item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return d_->value[0];
  }

  // Leaf copy sharing no autodiff history; sg[.] in quantizer losses.
  TensorT detach() const {
    TensorT t;
    t.d_ = std::make_shared<TensorStorage<T>>();
    t.d_->shape = d_->shape;
    t.d_->value = d_->value;
    return t;
  }

  TensorT clone() const {
    TensorT t = detach();
    t.set_requires_grad(d_->requires_grad);
    return t;
  }

  bool same_storage(const TensorT& other) const { return d_ == other.d_; }

 private:
  std::shared_ptr<TensorStorage<T>> d_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

}  // namespace vqim
