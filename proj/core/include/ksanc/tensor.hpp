#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "ksanc/error.hpp"

namespace ksanc {

/// Element precision, chosen when a tensor is created. Double precision is
/// used by the oracle and gradient tests, single precision for training.
enum class DType { f32, f64 };

std::string_view to_string(DType dtype);
DType parse_dtype(std::string_view text);

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Calls `f.template operator()<T>()` with T = float or double.
template <typename F>
decltype(auto) visit_dtype(DType dtype, F&& f) {
  if (dtype == DType::f64) {
    return std::forward<F>(f).template operator()<double>();
  }
  return std::forward<F>(f).template operator()<float>();
}

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }

using Buffer = std::variant<std::vector<float>, std::vector<double>>;

namespace detail {

struct TensorImpl;

/// Reads the output gradient from `out` and accumulates into the inputs.
using BackwardFn = std::function<void(const TensorImpl& out)>;

struct GradNode {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
  std::string op;
};

struct TensorImpl {
  Shape shape;
  Buffer data;
  Buffer grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::shared_ptr<GradNode> node;
};

}  // namespace detail

/// Dense row-major tensor with optional reverse-mode gradient tracking.
///
/// Tensor is a shared handle: copies alias the same storage. Values are
/// immutable once produced by an operator; only gradient buffers, parameter
/// updates and normalization running statistics write in place.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, DType dtype = DType::f32);
  static Tensor full(Shape shape, double value, DType dtype = DType::f32);
  static Tensor from_values(Shape shape, std::span<const double> values,
                            DType dtype = DType::f32);
  static Tensor from_values(Shape shape, std::initializer_list<double> values,
                            DType dtype = DType::f32);
  static Tensor scalar(double value, DType dtype = DType::f32);
  template <typename T>
  static Tensor from_buffer(Shape shape, std::vector<T> values);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  DType dtype() const;

  template <typename T>
  std::span<T> data();
  template <typename T>
  std::span<const T> data() const;

  double item() const;
  double value(std::size_t flat_index) const;
  void set_value(std::size_t flat_index, double v);
  std::vector<double> to_vector() const;
  /// Overwrites this tensor's values with `other`'s (same shape, any dtype).
  void assign(const Tensor& other);

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const;
  bool is_leaf() const;

  /// Mutable gradient storage; allocated as zeros on first access. Tensor is
  /// a handle, so this is available through const references as well.
  template <typename T>
  std::span<T> grad_data() const;
  std::vector<double> grad_vector() const;
  void zero_grad();

  /// Populates d(this)/d(x) for every requires_grad tensor x reachable from
  /// this scalar. Leaf gradients accumulate across calls.
  void backward() const;

  /// Value copy with no gradient history.
  Tensor detach() const;
  Tensor to(DType dtype) const;

  const detail::TensorImpl* impl() const { return impl_.get(); }
  std::shared_ptr<detail::TensorImpl> impl_ptr() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  detail::TensorImpl& checked() const;

  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

namespace detail {

/// Builds an operator result. When gradients are enabled and some input
/// requires grad, the result records `backward` and its inputs.
Tensor make_result(Shape shape, Buffer data, std::vector<Tensor> inputs,
                   BackwardFn backward, std::string op);

template <typename T>
std::span<const T> grad_of(const TensorImpl& out) {
  return std::get<std::vector<T>>(out.grad);
}

template <typename T>
std::span<const T> data_of(const TensorImpl& out) {
  return std::get<std::vector<T>>(out.data);
}

}  // namespace detail

template <typename T>
Tensor Tensor::from_buffer(Shape shape, std::vector<T> values) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("from_buffer: shape " + shape_str(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  return Tensor(std::move(impl));
}

template <typename T>
std::span<T> Tensor::data() {
  auto* v = std::get_if<std::vector<T>>(&checked().data);
  if (v == nullptr) {
    throw Error("tensor dtype is " + std::string(to_string(dtype())) +
                ", requested " + std::string(to_string(dtype_of<T>())));
  }
  return *v;
}

template <typename T>
std::span<const T> Tensor::data() const {
  auto* v = std::get_if<std::vector<T>>(&checked().data);
  if (v == nullptr) {
    throw Error("tensor dtype is " + std::string(to_string(dtype())) +
                ", requested " + std::string(to_string(dtype_of<T>())));
  }
  return *v;
}

template <typename T>
std::span<T> Tensor::grad_data() const {
  auto& impl = checked();
  if (!impl.has_grad) {
    impl.grad = std::vector<T>(shape_numel(impl.shape), T(0));
    impl.has_grad = true;
  }
  return std::get<std::vector<T>>(impl.grad);
}

}  // namespace ksanc
