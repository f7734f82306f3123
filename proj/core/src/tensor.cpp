#include "ksanc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace ksanc {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::string_view to_string(DType dtype) {
  return dtype == DType::f64 ? "f64" : "f32";
}

DType parse_dtype(std::string_view text) {
  if (text == "f32" || text == "float") return DType::f32;
  if (text == "f64" || text == "double") return DType::f64;
  throw ConfigError("unknown precision '" + std::string(text) + "' (expected f32 or f64)");
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, DType dtype) { return full(std::move(shape), 0.0, dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  const auto n = shape_numel(shape);
  return visit_dtype(dtype, [&]<typename T>() {
    return from_buffer<T>(std::move(shape), std::vector<T>(n, static_cast<T>(value)));
  });
}

Tensor Tensor::from_values(Shape shape, std::span<const double> values, DType dtype) {
  return visit_dtype(dtype, [&]<typename T>() {
    return from_buffer<T>(std::move(shape), std::vector<T>(values.begin(), values.end()));
  });
}

Tensor Tensor::from_values(Shape shape, std::initializer_list<double> values, DType dtype) {
  return from_values(std::move(shape), std::span<const double>(values.begin(), values.size()),
                     dtype);
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

detail::TensorImpl& Tensor::checked() const {
  if (!impl_) throw Error("use of an undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return checked().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

DType Tensor::dtype() const {
  return std::holds_alternative<std::vector<double>>(checked().data) ? DType::f64 : DType::f32;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() needs a single-element tensor, shape is " + shape_str(shape()));
  }
  return value(0);
}

double Tensor::value(std::size_t i) const {
  return std::visit([&](const auto& v) { return static_cast<double>(v.at(i)); }, checked().data);
}

void Tensor::set_value(std::size_t i, double x) {
  std::visit([&](auto& v) { v.at(i) = static_cast<std::decay_t<decltype(v[0])>>(x); },
             checked().data);
}

std::vector<double> Tensor::to_vector() const {
  return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); },
                    checked().data);
}

void Tensor::assign(const Tensor& other) {
  if (other.shape() != shape()) {
    throw ShapeError("assign: shape " + shape_str(other.shape()) + " into " + shape_str(shape()));
  }
  std::visit(
      [&](auto& dst) {
        std::visit([&](const auto& src) { std::copy(src.begin(), src.end(), dst.begin()); },
                   other.checked().data);
      },
      checked().data);
}

bool Tensor::requires_grad() const { return checked().requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  checked().requires_grad = flag;
  return *this;
}

bool Tensor::has_grad() const { return checked().has_grad; }

bool Tensor::is_leaf() const { return checked().node == nullptr; }

std::vector<double> Tensor::grad_vector() const {
  const auto& impl = checked();
  if (!impl.has_grad) return std::vector<double>(numel(), 0.0);
  return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); },
                    impl.grad);
}

void Tensor::zero_grad() {
  auto& impl = checked();
  if (!impl.has_grad) return;
  std::visit([](auto& v) { std::fill(v.begin(), v.end(), 0); }, impl.grad);
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape();
  impl->data = checked().data;
  return Tensor(std::move(impl));
}

Tensor Tensor::to(DType target) const {
  if (target == dtype()) return detach();
  return visit_dtype(target, [&]<typename T>() {
    const auto values = to_vector();
    return from_buffer<T>(shape(), std::vector<T>(values.begin(), values.end()));
  });
}

void Tensor::backward() const {
  auto& root = checked();
  if (shape_numel(root.shape) != 1) {
    throw ShapeError("backward() needs a scalar loss, shape is " + shape_str(root.shape));
  }
  if (!root.requires_grad) {
    throw Error("backward() on a tensor that does not require grad");
  }

  // Post-order DFS gives a topological order with inputs before outputs.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> visited;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->node && next < node->node->inputs.size()) {
      auto* child = node->node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  auto reset = [](detail::TensorImpl& t) {
    std::visit(
        [&](const auto& d) {
          using V = std::decay_t<decltype(d)>;
          t.grad = V(d.size(), 0);
        },
        t.data);
    t.has_grad = true;
  };
  for (auto* t : order) {
    if (t->node || !t->has_grad) reset(*t);
  }
  std::visit([](auto& g) { g[0] += 1; }, root.grad);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->node) (*it)->node->backward(**it);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

namespace detail {

Tensor make_result(Shape shape, Buffer data, std::vector<Tensor> inputs, BackwardFn backward,
                   std::string op) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (g_grad_enabled && any) {
    impl->requires_grad = true;
    auto node = std::make_shared<GradNode>();
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.impl_ptr());
    node->backward = std::move(backward);
    node->op = std::move(op);
    impl->node = std::move(node);
  }
  return Tensor(std::move(impl));
}

}  // namespace detail
}  // namespace ksanc
