#include "ksanc/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace ksanc {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw Error(std::string(op) + ": dtype mismatch (" + std::string(to_string(a.dtype())) +
                " vs " + std::string(to_string(b.dtype())) + ")");
  }
}

void require_rank(const Tensor& x, std::size_t rank, const char* op, const char* what) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got shape " + shape_str(x.shape()));
  }
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(s));
  }
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <typename Fwd, typename Deriv>
Tensor unary_op(const Tensor& x, const char* name, Fwd fwd, Deriv deriv) {
  return visit_dtype(x.dtype(), [&]<typename T>() {
    auto xs = x.data<T>();
    std::vector<T> out(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) out[i] = fwd(xs[i]);
    return detail::make_result(
        x.shape(), std::move(out), {x},
        [x, deriv](const detail::TensorImpl& o) mutable {
          if (!x.requires_grad()) return;
          auto g = detail::grad_of<T>(o);
          auto y = detail::data_of<T>(o);
          auto xv = x.data<T>();
          auto gx = x.grad_data<T>();
          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * deriv(xv[i], y[i]);
        },
        name);
  });
}

// Flat index of each output element in the (possibly broadcast) operand.
std::vector<std::size_t> broadcast_index(const Shape& out, const Shape& in) {
  const std::size_t rank = out.size();
  std::vector<std::size_t> in_stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t d = rank; d-- > 0;) {
    in_stride[d] = in[d] == 1 ? 0 : s;
    s *= in[d];
  }
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> idx(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    idx[i] = off;
    for (std::size_t d = rank; d-- > 0;) {
      ++counter[d];
      off += in_stride[d];
      if (counter[d] < out[d]) break;
      off -= in_stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  return idx;
}

template <typename Fwd, typename DA, typename DB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, DA da, DB db) {
  require_same_dtype(a, b, name);
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const bool same = a.shape() == b.shape();
  std::vector<std::size_t> ia, ib;
  if (!same) {
    ia = broadcast_index(out_shape, a.shape());
    ib = broadcast_index(out_shape, b.shape());
  }
  return visit_dtype(a.dtype(), [&]<typename T>() {
    auto av = a.data<T>();
    auto bv = b.data<T>();
    const std::size_t n = shape_numel(out_shape);
    std::vector<T> out(n);
    if (same) {
      for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
    } else {
      for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[ia[i]], bv[ib[i]]);
    }
    return detail::make_result(
        out_shape, std::move(out), {a, b},
        [a, b, da, db, same, ia = std::move(ia), ib = std::move(ib)](
            const detail::TensorImpl& o) mutable {
          auto g = detail::grad_of<T>(o);
          auto av = a.data<T>();
          auto bv = b.data<T>();
          const std::size_t n = g.size();
          if (a.requires_grad()) {
            auto ga = a.grad_data<T>();
            for (std::size_t i = 0; i < n; ++i) {
              const std::size_t ai = same ? i : ia[i];
              const std::size_t bi = same ? i : ib[i];
              ga[ai] += g[i] * da(av[ai], bv[bi]);
            }
          }
          if (b.requires_grad()) {
            auto gb = b.grad_data<T>();
            for (std::size_t i = 0; i < n; ++i) {
              const std::size_t ai = same ? i : ia[i];
              const std::size_t bi = same ? i : ib[i];
              gb[bi] += g[i] * db(av[ai], bv[bi]);
            }
          }
        },
        name);
  });
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  if (a.size() != b.size()) {
    throw ShapeError("broadcast: rank mismatch between " + shape_str(a) + " and " + shape_str(b));
  }
  Shape out(a.size());
  for (std::size_t d = 0; d < a.size(); ++d) {
    if (a[d] == b[d] || b[d] == 1) {
      out[d] = a[d];
    } else if (a[d] == 1) {
      out[d] = b[d];
    } else {
      throw ShapeError("broadcast: dimension " + std::to_string(d) + " mismatch, " +
                       std::to_string(a[d]) + " vs " + std::to_string(b[d]) + " (shapes " +
                       shape_str(a) + " and " + shape_str(b) + ")");
    }
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](auto x, auto y) { return x + y; },
      [](auto, auto) { return 1; }, [](auto, auto) { return 1; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](auto x, auto y) { return x - y; },
      [](auto, auto) { return 1; }, [](auto, auto) { return -1; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](auto x, auto y) { return x * y; },
      [](auto, auto y) { return y; }, [](auto x, auto) { return x; });
}

Tensor scale(const Tensor& x, double factor) {
  return unary_op(
      x, "scale", [factor](auto v) { return static_cast<decltype(v)>(v * factor); },
      [factor](auto v, auto) { return static_cast<decltype(v)>(factor); });
}

Tensor add_scalar(const Tensor& x, double offset) {
  return unary_op(
      x, "add_scalar", [offset](auto v) { return static_cast<decltype(v)>(v + offset); },
      [](auto v, auto) { return static_cast<decltype(v)>(1); });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      x, "relu", [](auto v) { return v > 0 ? v : decltype(v)(0); },
      [](auto v, auto) { return v > 0 ? decltype(v)(1) : decltype(v)(0); });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x, "sigmoid",
      [](auto v) {
        using T = decltype(v);
        if (v >= 0) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](auto, auto y) { return y * (decltype(y)(1) - y); });
}

Tensor log(const Tensor& x) {
  return unary_op(
      x, "log", [](auto v) { return std::log(v); }, [](auto v, auto) { return decltype(v)(1) / v; });
}

Tensor abs(const Tensor& x) {
  return unary_op(
      x, "abs", [](auto v) { return std::abs(v); },
      [](auto v, auto) {
        using T = decltype(v);
        return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0));
      });
}

Tensor square(const Tensor& x) {
  return unary_op(
      x, "square", [](auto v) { return v * v; }, [](auto v, auto) { return v + v; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary_op(
      x, "clamp",
      [lo, hi](auto v) {
        using T = decltype(v);
        return std::clamp(v, static_cast<T>(lo), static_cast<T>(hi));
      },
      [lo, hi](auto v, auto) {
        using T = decltype(v);
        return (v > static_cast<T>(lo) && v < static_cast<T>(hi)) ? T(1) : T(0);
      });
}

Tensor sum(const Tensor& x) {
  return visit_dtype(x.dtype(), [&]<typename T>() {
    auto xv = x.data<T>();
    T acc = 0;
    for (auto v : xv) acc += v;
    return detail::make_result(
        {}, std::vector<T>{acc}, {x},
        [x](const detail::TensorImpl& o) mutable {
          if (!x.requires_grad()) return;
          const T g = detail::grad_of<T>(o)[0];
          for (auto& gx : x.grad_data<T>()) gx += g;
        },
        "sum");
  });
}

Tensor sum(const Tensor& x, std::size_t axis) {
  const auto split = split_at(x.shape(), axis, "sum");
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  return visit_dtype(x.dtype(), [&]<typename T>() {
    auto xv = x.data<T>();
    std::vector<T> out(split.outer * split.inner, T(0));
    for (std::size_t o = 0; o < split.outer; ++o)
      for (std::size_t l = 0; l < split.len; ++l)
        for (std::size_t i = 0; i < split.inner; ++i)
          out[o * split.inner + i] += xv[(o * split.len + l) * split.inner + i];
    return detail::make_result(
        out_shape, std::move(out), {x},
        [x, split](const detail::TensorImpl& o) mutable {
          if (!x.requires_grad()) return;
          auto g = detail::grad_of<T>(o);
          auto gx = x.grad_data<T>();
          for (std::size_t a = 0; a < split.outer; ++a)
            for (std::size_t l = 0; l < split.len; ++l)
              for (std::size_t i = 0; i < split.inner; ++i)
                gx[(a * split.len + l) * split.inner + i] += g[a * split.inner + i];
        },
        "sum_axis");
  });
}

Tensor mean(const Tensor& x) {
  const auto n = x.numel();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Tensor l2_norm_sq(const Tensor& x) { return sum(square(x)); }

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto s = split_at(x.shape(), axis, "softmax");
  return visit_dtype(x.dtype(), [&]<typename T>() {
    auto xv = x.data<T>();
    std::vector<T> out(xv.size());
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t l = 0; l < s.len; ++l) mx = std::max(mx, xv[base + l * s.inner]);
        T z = 0;
        for (std::size_t l = 0; l < s.len; ++l) {
          const T e = std::exp(xv[base + l * s.inner] - mx);
          out[base + l * s.inner] = e;
          z += e;
        }
        for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] /= z;
      }
    }
    return detail::make_result(
        x.shape(), std::move(out), {x},
        [x, s](const detail::TensorImpl& o) mutable {
          if (!x.requires_grad()) return;
          auto g = detail::grad_of<T>(o);
          auto y = detail::data_of<T>(o);
          auto gx = x.grad_data<T>();
          for (std::size_t a = 0; a < s.outer; ++a) {
            for (std::size_t i = 0; i < s.inner; ++i) {
              const std::size_t base = a * s.len * s.inner + i;
              T dot = 0;
              for (std::size_t l = 0; l < s.len; ++l)
                dot += g[base + l * s.inner] * y[base + l * s.inner];
              for (std::size_t l = 0; l < s.len; ++l) {
                const std::size_t k = base + l * s.inner;
                gx[k] += y[k] * (g[k] - dot);
              }
            }
          }
        },
        "softmax");
  });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const auto s = split_at(x.shape(), axis, "log_softmax");
  return visit_dtype(x.dtype(), [&]<typename T>() {
    auto xv = x.data<T>();
    std::vector<T> out(xv.size());
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t l = 0; l < s.len; ++l) mx = std::max(mx, xv[base + l * s.inner]);
        T z = 0;
        for (std::size_t l = 0; l < s.len; ++l) z += std::exp(xv[base + l * s.inner] - mx);
        const T lz = mx + std::log(z);
        for (std::size_t l = 0; l < s.len; ++l)
          out[base + l * s.inner] = xv[base + l * s.inner] - lz;
      }
    }
    return detail::make_result(
        x.shape(), std::move(out), {x},
        [x, s](const detail::TensorImpl& o) mutable {
          if (!x.requires_grad()) return;
          auto g = detail::grad_of<T>(o);
          auto y = detail::data_of<T>(o);
          auto gx = x.grad_data<T>();
          for (std::size_t a = 0; a < s.outer; ++a) {
            for (std::size_t i = 0; i < s.inner; ++i) {
              const std::size_t base = a * s.len * s.inner + i;
              T gs = 0;
              for (std::size_t l = 0; l < s.len; ++l) gs += g[base + l * s.inner];
              for (std::size_t l = 0; l < s.len; ++l) {
                const std::size_t k = base + l * s.inner;
                gx[k] += g[k] - std::exp(y[k]) * gs;
              }
            }
          }
        },
        "log_softmax");
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return visit_dtype(x.dtype(), [&]<typename T>() {
    auto xv = x.data<T>();
    return detail::make_result(
        std::move(shape), std::vector<T>(xv.begin(), xv.end()), {x},
        [x](const detail::TensorImpl& o) mutable {
          if (!x.requires_grad()) return;
          auto g = detail::grad_of<T>(o);
          auto gx = x.grad_data<T>();
          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
        },
        "reshape");
  });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) {
    throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(first));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    require_same_dtype(parts.front(), p, "concat");
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) {
      throw ShapeError("concat: shape " + shape_str(s) + " incompatible with " +
                       shape_str(first) + " along axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  for (const auto& p : parts) widths.push_back(p.shape()[axis] * inner);
  const std::size_t row = out_shape[axis] * inner;

  return visit_dtype(parts.front().dtype(), [&]<typename T>() {
    std::vector<T> out(shape_numel(out_shape));
    std::size_t col = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      auto pv = parts[k].template data<T>();
      for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * widths[k]), widths[k],
                    out.begin() + static_cast<std::ptrdiff_t>(o * row + col));
      col += widths[k];
    }
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    return detail::make_result(
        out_shape, std::move(out), inputs,
        [inputs, widths, outer, row](const detail::TensorImpl& o) mutable {
          auto g = detail::grad_of<T>(o);
          std::size_t col = 0;
          for (std::size_t k = 0; k < inputs.size(); ++k) {
            if (inputs[k].requires_grad()) {
              auto gp = inputs[k].template grad_data<T>();
              for (std::size_t a = 0; a < outer; ++a)
                for (std::size_t j = 0; j < widths[k]; ++j)
                  gp[a * widths[k] + j] += g[a * row + col + j];
            }
            col += widths[k];
          }
        },
        "concat");
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto s = split_at(x.shape(), axis, "slice");
  if (begin >= end || end > s.len) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for dimension " + std::to_string(axis) + " of size " +
                     std::to_string(s.len));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const std::size_t w = (end - begin) * s.inner;
  const std::size_t row = s.len * s.inner;
  const std::size_t start = begin * s.inner;
  return visit_dtype(x.dtype(), [&]<typename T>() {
    auto xv = x.data<T>();
    std::vector<T> out(s.outer * w);
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(o * row + start), w,
                  out.begin() + static_cast<std::ptrdiff_t>(o * w));
    return detail::make_result(
        out_shape, std::move(out), {x},
        [x, s, w, row, start](const detail::TensorImpl& o) mutable {
          if (!x.requires_grad()) return;
          auto g = detail::grad_of<T>(o);
          auto gx = x.grad_data<T>();
          for (std::size_t a = 0; a < s.outer; ++a)
            for (std::size_t j = 0; j < w; ++j) gx[a * row + start + j] += g[a * w + j];
        },
        "slice");
  });
}

Tensor pick(const Tensor& x, std::span<const int> labels) {
  require_rank(x, 2, "pick", "input");
  const std::size_t batch = x.dim(0);
  const std::size_t classes = x.dim(1);
  if (labels.size() != batch) {
    throw ShapeError("pick: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(batch));
  }
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes) {
      throw Error("label " + std::to_string(labels[b]) + " at batch index " + std::to_string(b) +
                  " outside [0," + std::to_string(classes) + ")");
    }
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return visit_dtype(x.dtype(), [&]<typename T>() {
    auto xv = x.data<T>();
    std::vector<T> out(batch);
    for (std::size_t b = 0; b < batch; ++b) out[b] = xv[b * classes + lab[b]];
    return detail::make_result(
        {batch}, std::move(out), {x},
        [x, lab, classes](const detail::TensorImpl& o) mutable {
          if (!x.requires_grad()) return;
          auto g = detail::grad_of<T>(o);
          auto gx = x.grad_data<T>();
          for (std::size_t b = 0; b < lab.size(); ++b) gx[b * classes + lab[b]] += g[b];
        },
        "pick");
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul", "lhs");
  require_rank(b, 2, "matmul", "rhs");
  require_same_dtype(a, b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ, lhs " + shape_str(a.shape()) + " has " +
                     std::to_string(k) + " columns, rhs " + shape_str(b.shape()) + " has " +
                     std::to_string(b.dim(0)) + " rows");
  }
  return visit_dtype(a.dtype(), [&]<typename T>() {
    std::vector<T> out(m * n);
    MatrixMap<T>(out.data(), m, n).noalias() =
        ConstMatrixMap<T>(a.data<T>().data(), m, k) * ConstMatrixMap<T>(b.data<T>().data(), k, n);
    return detail::make_result(
        {m, n}, std::move(out), {a, b},
        [a, b, m, k, n](const detail::TensorImpl& o) mutable {
          ConstMatrixMap<T> g(detail::grad_of<T>(o).data(), m, n);
          if (a.requires_grad()) {
            MatrixMap<T>(a.grad_data<T>().data(), m, k).noalias() +=
                g * ConstMatrixMap<T>(b.data<T>().data(), k, n).transpose();
          }
          if (b.requires_grad()) {
            MatrixMap<T>(b.grad_data<T>().data(), k, n).noalias() +=
                ConstMatrixMap<T>(a.data<T>().data(), m, k).transpose() * g;
          }
        },
        "matmul");
  });
}

Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(input, 2, "dense", "input");
  require_rank(weight, 2, "dense", "weight");
  require_rank(bias, 1, "dense", "bias");
  require_same_dtype(input, weight, "dense");
  require_same_dtype(input, bias, "dense");
  const std::size_t batch = input.dim(0), in = input.dim(1), out_dim = weight.dim(1);
  if (weight.dim(0) != in) {
    throw ShapeError("dense: input width " + std::to_string(in) + " does not match weight rows " +
                     std::to_string(weight.dim(0)) + " (weight shape " +
                     shape_str(weight.shape()) + ")");
  }
  if (bias.dim(0) != out_dim) {
    throw ShapeError("dense: bias length " + std::to_string(bias.dim(0)) +
                     " does not match output width " + std::to_string(out_dim));
  }
  return visit_dtype(input.dtype(), [&]<typename T>() {
    std::vector<T> out(batch * out_dim);
    MatrixMap<T> y(out.data(), batch, out_dim);
    y.noalias() = ConstMatrixMap<T>(input.data<T>().data(), batch, in) *
                  ConstMatrixMap<T>(weight.data<T>().data(), in, out_dim);
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias.data<T>().data(), out_dim);
    y.rowwise() += bv;
    return detail::make_result(
        {batch, out_dim}, std::move(out), {input, weight, bias},
        [input, weight, bias, batch, in, out_dim](const detail::TensorImpl& o) mutable {
          ConstMatrixMap<T> g(detail::grad_of<T>(o).data(), batch, out_dim);
          if (input.requires_grad()) {
            MatrixMap<T>(input.grad_data<T>().data(), batch, in).noalias() +=
                g * ConstMatrixMap<T>(weight.data<T>().data(), in, out_dim).transpose();
          }
          if (weight.requires_grad()) {
            MatrixMap<T>(weight.grad_data<T>().data(), in, out_dim).noalias() +=
                ConstMatrixMap<T>(input.data<T>().data(), batch, in).transpose() * g;
          }
          if (bias.requires_grad()) {
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.grad_data<T>().data(), out_dim) +=
                g.colwise().sum();
          }
        },
        "dense");
  });
}

std::size_t conv_output_size(std::size_t in, std::size_t k, std::size_t stride,
                             std::size_t padding) {
  return (in + 2 * padding - k) / stride + 1;
}

namespace {

struct ConvGeometry {
  std::size_t channels, height, width, kh, kw, stride, pad, out_h, out_w;
  std::size_t col_rows() const { return channels * kh * kw; }
  std::size_t col_cols() const { return out_h * out_w; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* dst = col + ((c * g.kh + ki) * g.kw + kj) * g.col_cols();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.height) &&
                                ix < static_cast<std::ptrdiff_t>(g.width);
            dst[oy * g.out_w + ox] =
                inside ? img[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                             static_cast<std::size_t>(ix)]
                       : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* img) {
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* src = col + ((c * g.kh + ki) * g.kw + kj) * g.col_cols();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            img[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                static_cast<std::size_t>(ix)] += src[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, Conv2dOptions options) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(kernel, 4, "conv2d", "kernel");
  require_same_dtype(input, kernel, "conv2d");
  if (options.stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  const std::size_t batch = input.dim(0);
  const std::size_t filters = kernel.dim(0);
  ConvGeometry g{input.dim(1), input.dim(2), input.dim(3), kernel.dim(2), kernel.dim(3),
                 options.stride, options.padding, 0, 0};
  if (kernel.dim(1) != g.channels) {
    throw ShapeError("conv2d: input has " + std::to_string(g.channels) +
                     " channels but kernel expects " + std::to_string(kernel.dim(1)) +
                     " (input " + shape_str(input.shape()) + ", kernel " +
                     shape_str(kernel.shape()) + ")");
  }
  if (g.kh > g.height + 2 * g.pad || g.kw > g.width + 2 * g.pad) {
    throw ShapeError("conv2d: kernel " + std::to_string(g.kh) + "x" + std::to_string(g.kw) +
                     " larger than padded input " + std::to_string(g.height + 2 * g.pad) + "x" +
                     std::to_string(g.width + 2 * g.pad));
  }
  g.out_h = conv_output_size(g.height, g.kh, g.stride, g.pad);
  g.out_w = conv_output_size(g.width, g.kw, g.stride, g.pad);
  const Shape out_shape{batch, filters, g.out_h, g.out_w};

  return visit_dtype(input.dtype(), [&]<typename T>() {
    auto x = input.data<T>();
    ConstMatrixMap<T> w(kernel.data<T>().data(), filters, g.col_rows());
    std::vector<T> out(shape_numel(out_shape));
    std::vector<T> col(g.pointwise() ? 0 : g.col_rows() * g.col_cols());
    const std::size_t in_stride = g.channels * g.height * g.width;
    const std::size_t out_stride = filters * g.col_cols();
    for (std::size_t b = 0; b < batch; ++b) {
      const T* src = x.data() + b * in_stride;
      if (!g.pointwise()) {
        im2col(src, g, col.data());
        src = col.data();
      }
      MatrixMap<T>(out.data() + b * out_stride, filters, g.col_cols()).noalias() =
          w * ConstMatrixMap<T>(src, g.col_rows(), g.col_cols());
    }
    return detail::make_result(
        out_shape, std::move(out), {input, kernel},
        [input, kernel, g, batch, filters, in_stride, out_stride](
            const detail::TensorImpl& o) mutable {
          auto grad = detail::grad_of<T>(o);
          auto x = input.data<T>();
          ConstMatrixMap<T> w(kernel.data<T>().data(), filters, g.col_rows());
          std::vector<T> col(g.pointwise() ? 0 : g.col_rows() * g.col_cols());
          std::vector<T> dcol(col.size());
          const bool need_dx = input.requires_grad();
          const bool need_dw = kernel.requires_grad();
          for (std::size_t b = 0; b < batch; ++b) {
            ConstMatrixMap<T> gb(grad.data() + b * out_stride, filters, g.col_cols());
            if (need_dw) {
              const T* src = x.data() + b * in_stride;
              if (!g.pointwise()) {
                im2col(src, g, col.data());
                src = col.data();
              }
              MatrixMap<T>(kernel.grad_data<T>().data(), filters, g.col_rows()).noalias() +=
                  gb * ConstMatrixMap<T>(src, g.col_rows(), g.col_cols()).transpose();
            }
            if (need_dx) {
              T* dx = input.grad_data<T>().data() + b * in_stride;
              if (g.pointwise()) {
                MatrixMap<T>(dx, g.col_rows(), g.col_cols()).noalias() += w.transpose() * gb;
              } else {
                MatrixMap<T>(dcol.data(), g.col_rows(), g.col_cols()).noalias() =
                    w.transpose() * gb;
                col2im_add(dcol.data(), g, dx);
              }
            }
          }
        },
        "conv2d");
  });
}

Tensor global_average_pool(const Tensor& x) {
  require_rank(x, 4, "global_average_pool", "input");
  const std::size_t rows = x.dim(0) * x.dim(1);
  const std::size_t area = x.dim(2) * x.dim(3);
  return visit_dtype(x.dtype(), [&]<typename T>() {
    auto xv = x.data<T>();
    std::vector<T> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      T acc = 0;
      for (std::size_t i = 0; i < area; ++i) acc += xv[r * area + i];
      out[r] = acc / static_cast<T>(area);
    }
    return detail::make_result(
        {x.dim(0), x.dim(1)}, std::move(out), {x},
        [x, rows, area](const detail::TensorImpl& o) mutable {
          if (!x.requires_grad()) return;
          auto g = detail::grad_of<T>(o);
          auto gx = x.grad_data<T>();
          const T inv = T(1) / static_cast<T>(area);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < area; ++i) gx[r * area + i] += g[r] * inv;
        },
        "global_average_pool");
  });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, BatchNormOptions options) {
  if (x.rank() != 4 && x.rank() != 2) {
    throw ShapeError("batch_norm: input must be [B,C,H,W] or [B,C], got " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0), channels = x.dim(1);
  const std::size_t area = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  for (const Tensor* p : std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var}) {
    if (p->shape() != Shape{channels}) {
      throw ShapeError("batch_norm: per-channel parameter has shape " + shape_str(p->shape()) +
                       ", expected [" + std::to_string(channels) + "]");
    }
    require_same_dtype(x, *p, "batch_norm");
  }
  const double count = static_cast<double>(batch * area);
  if (options.training && batch * area < 2) {
    throw ShapeError("batch_norm: training mode needs more than one value per channel");
  }

  return visit_dtype(x.dtype(), [&]<typename T>() {
    auto xv = x.data<T>();
    auto gv = gamma.data<T>();
    auto bv = beta.data<T>();
    std::vector<T> mean(channels), invstd(channels);
    if (options.training) {
      auto rm = running_mean.data<T>();
      auto rv = running_var.data<T>();
      for (std::size_t c = 0; c < channels; ++c) {
        double s = 0;
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t i = 0; i < area; ++i) s += xv[(b * channels + c) * area + i];
        const double m = s / count;
        double v = 0;
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t i = 0; i < area; ++i) {
            const double d = xv[(b * channels + c) * area + i] - m;
            v += d * d;
          }
        v /= count;
        mean[c] = static_cast<T>(m);
        invstd[c] = static_cast<T>(1.0 / std::sqrt(v + options.eps));
        rm[c] = static_cast<T>(options.momentum * rm[c] + (1 - options.momentum) * m);
        rv[c] = static_cast<T>(options.momentum * rv[c] + (1 - options.momentum) * v);
      }
    } else {
      auto rm = running_mean.data<T>();
      auto rv = running_var.data<T>();
      for (std::size_t c = 0; c < channels; ++c) {
        mean[c] = rm[c];
        invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[c]) + options.eps));
      }
    }
    std::vector<T> xhat(xv.size()), out(xv.size());
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t i = 0; i < area; ++i) {
          const std::size_t k = (b * channels + c) * area + i;
          xhat[k] = (xv[k] - mean[c]) * invstd[c];
          out[k] = gv[c] * xhat[k] + bv[c];
        }
    const bool training = options.training;
    return detail::make_result(
        x.shape(), std::move(out), {x, gamma, beta},
        [x, gamma, beta, xhat = std::move(xhat), invstd, batch, channels, area, count,
         training](const detail::TensorImpl& o) mutable {
          auto g = detail::grad_of<T>(o);
          auto gv = gamma.data<T>();
          std::vector<double> sum_dy(channels, 0.0), sum_dy_xhat(channels, 0.0);
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < channels; ++c)
              for (std::size_t i = 0; i < area; ++i) {
                const std::size_t k = (b * channels + c) * area + i;
                sum_dy[c] += g[k];
                sum_dy_xhat[c] += g[k] * xhat[k];
              }
          if (gamma.requires_grad()) {
            auto gg = gamma.grad_data<T>();
            for (std::size_t c = 0; c < channels; ++c) gg[c] += static_cast<T>(sum_dy_xhat[c]);
          }
          if (beta.requires_grad()) {
            auto gb = beta.grad_data<T>();
            for (std::size_t c = 0; c < channels; ++c) gb[c] += static_cast<T>(sum_dy[c]);
          }
          if (!x.requires_grad()) return;
          auto gx = x.grad_data<T>();
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < channels; ++c) {
              const T scale_c = gv[c] * invstd[c];
              const T mdy = static_cast<T>(sum_dy[c] / count);
              const T mdyx = static_cast<T>(sum_dy_xhat[c] / count);
              for (std::size_t i = 0; i < area; ++i) {
                const std::size_t k = (b * channels + c) * area + i;
                gx[k] += training ? scale_c * (g[k] - mdy - xhat[k] * mdyx) : scale_c * g[k];
              }
            }
        },
        "batch_norm");
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy", "logits");
  return scale(mean(pick(log_softmax(logits, 1), labels)), -1.0);
}

Tensor binary_cross_entropy(const Tensor& probs, double target, double eps) {
  const Tensor p = clamp(probs, eps, 1.0 - eps);
  if (target == 1.0) return scale(mean(log(p)), -1.0);
  if (target == 0.0) return scale(mean(log(add_scalar(scale(p, -1.0), 1.0))), -1.0);
  const Tensor pos = scale(log(p), target);
  const Tensor neg = scale(log(add_scalar(scale(p, -1.0), 1.0)), 1.0 - target);
  return scale(mean(add(pos, neg)), -1.0);
}

}  // namespace ksanc
