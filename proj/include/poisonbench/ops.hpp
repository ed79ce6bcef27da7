#pragma once

// Differentiable tensor operations. Every op records itself on the active
// tape when at least one input has requires_grad set; otherwise it is a pure
// forward computation. Layout is NCHW row-major throughout.

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "poisonbench/tensor.hpp"

namespace pb {

namespace detail {

inline std::string mismatch(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b);
}

// How many times `b` repeats to cover `a`: 1 for equal shapes, a.dim(0) when
// b matches a without its leading (batch) extent.
inline std::size_t broadcast_repeat(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return 1;
  if (a.size() >= 2) {
    Shape tail(a.begin() + 1, a.end());
    Shape tail1 = tail;
    tail1.insert(tail1.begin(), 1);
    if (b == tail || b == tail1) return a[0];
  }
  throw ShapeError(mismatch(op, a, b));
}

template <typename T>
void accumulate(Tensor<T>& dst, std::span<const T> src) {
  auto g = dst.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t rep = detail::broadcast_repeat("add", a.shape(), b.shape());
  const std::size_t inner = b.numel();
  Tensor<T> out(a.shape());
  for (std::size_t r = 0; r < rep; ++r)
    for (std::size_t i = 0; i < inner; ++i) out[r * inner + i] = a[r * inner + i] + b[i];
  if (auto* tape = detail::recording_tape<T>(a, b)) {
    out.set_requires_grad();
    tape->record("add", out, [a = a, b = b, out, rep = rep, inner = inner]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) detail::accumulate(a, g);
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t r = 0; r < rep; ++r)
          for (std::size_t i = 0; i < inner; ++i) gb[i] += g[r * inner + i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t rep = detail::broadcast_repeat("sub", a.shape(), b.shape());
  const std::size_t inner = b.numel();
  Tensor<T> out(a.shape());
  for (std::size_t r = 0; r < rep; ++r)
    for (std::size_t i = 0; i < inner; ++i) out[r * inner + i] = a[r * inner + i] - b[i];
  if (auto* tape = detail::recording_tape<T>(a, b)) {
    out.set_requires_grad();
    tape->record("sub", out, [a = a, b = b, out, rep = rep, inner = inner]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) detail::accumulate(a, g);
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t r = 0; r < rep; ++r)
          for (std::size_t i = 0; i < inner; ++i) gb[i] -= g[r * inner + i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t rep = detail::broadcast_repeat("mul", a.shape(), b.shape());
  const std::size_t inner = b.numel();
  Tensor<T> out(a.shape());
  for (std::size_t r = 0; r < rep; ++r)
    for (std::size_t i = 0; i < inner; ++i) out[r * inner + i] = a[r * inner + i] * b[i];
  if (auto* tape = detail::recording_tape<T>(a, b)) {
    out.set_requires_grad();
    tape->record("mul", out, [a = a, b = b, out, rep = rep, inner = inner]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t r = 0; r < rep; ++r)
          for (std::size_t i = 0; i < inner; ++i) ga[r * inner + i] += g[r * inner + i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t r = 0; r < rep; ++r)
          for (std::size_t i = 0; i < inner; ++i) gb[i] += g[r * inner + i] * a[r * inner + i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  out.vec() = a.vec() * s;
  if (auto* tape = detail::recording_tape<T>(a)) {
    out.set_requires_grad();
    tape->record("scale", out, [a = a, out, s = s]() mutable {
      auto g = out.grad();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * s;
    });
  }
  return out;
}

// [M,K] x [K,N] -> [M,N]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError(detail::mismatch("matmul", a.shape(), b.shape()));
  }
  Tensor<T> out({a.dim(0), b.dim(1)});
  out.matrix().noalias() = a.matrix() * b.matrix();
  if (auto* tape = detail::recording_tape<T>(a, b)) {
    out.set_requires_grad();
    tape->record("matmul", out, [a = a, b = b, out]() mutable {
      ConstMatrixMap<T> g(out.grad().data(), out.dim(0), out.dim(1));
      if (a.requires_grad()) {
        MatrixMap<T> ga(a.grad_buffer().data(), a.dim(0), a.dim(1));
        ga.noalias() += g * b.matrix().transpose();
      }
      if (b.requires_grad()) {
        MatrixMap<T> gb(b.grad_buffer().data(), b.dim(0), b.dim(1));
        gb.noalias() += a.matrix().transpose() * g;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(a.shape()));
  Tensor<T> out({a.dim(1), a.dim(0)});
  out.matrix() = a.matrix().transpose();
  if (auto* tape = detail::recording_tape<T>(a)) {
    out.set_requires_grad();
    tape->record("transpose", out, [a = a, out]() mutable {
      ConstMatrixMap<T> g(out.grad().data(), out.dim(0), out.dim(1));
      MatrixMap<T> ga(a.grad_buffer().data(), a.dim(0), a.dim(1));
      ga += g.transpose();
    });
  }
  return out;
}

// x [N,K], weight [O,K], bias [O] -> [N,O]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
    throw ShapeError(detail::mismatch("linear", x.shape(), weight.shape()));
  }
  if (bias.numel() != weight.dim(0)) {
    throw ShapeError(detail::mismatch("linear", weight.shape(), bias.shape()));
  }
  Tensor<T> out({x.dim(0), weight.dim(0)});
  out.matrix().noalias() = x.matrix() * weight.matrix().transpose();
  out.matrix().rowwise() += bias.vec().transpose();
  if (auto* tape = detail::recording_tape<T>(x, weight, bias)) {
    out.set_requires_grad();
    tape->record("linear", out, [x = x, weight = weight, bias = bias, out]() mutable {
      ConstMatrixMap<T> g(out.grad().data(), out.dim(0), out.dim(1));
      if (x.requires_grad()) {
        MatrixMap<T> gx(x.grad_buffer().data(), x.dim(0), x.dim(1));
        gx.noalias() += g * weight.matrix();
      }
      if (weight.requires_grad()) {
        MatrixMap<T> gw(weight.grad_buffer().data(), weight.dim(0), weight.dim(1));
        gw.noalias() += g.transpose() * x.matrix();
      }
      if (bias.requires_grad()) {
        VectorMap<T> gb(bias.grad_buffer().data(), static_cast<Eigen::Index>(bias.numel()));
        gb += g.colwise().sum().transpose();
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError(detail::mismatch("reshape", a.shape(), shape));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()));
  if (auto* tape = detail::recording_tape<T>(a)) {
    out.set_requires_grad();
    tape->record("reshape", out, [a = a, out]() mutable { detail::accumulate(a, out.grad()); });
  }
  return out;
}

// Flattens everything after the leading extent: [N,...] -> [N, prod(...)].
template <typename T>
Tensor<T> flatten(const Tensor<T>& a) {
  return reshape(a, Shape{a.dim(0), a.numel() / a.dim(0)});
}

// Concatenation along the leading extent.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t lead = 0;
  for (const auto& p : parts) {
    if (Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
      throw ShapeError(detail::mismatch("concat", parts[0].shape(), p.shape()));
    }
    lead += p.dim(0);
  }
  Shape s = parts[0].shape();
  s[0] = lead;
  std::vector<T> data;
  data.reserve(shape_numel(s));
  bool any_grad = false;
  for (const auto& p : parts) {
    data.insert(data.end(), p.data().begin(), p.data().end());
    any_grad = any_grad || p.requires_grad();
  }
  Tensor<T> out(std::move(s), std::move(data));
  Tape<T>* tape = any_grad ? Tape<T>::active() : nullptr;
  if (tape != nullptr) {
    out.set_requires_grad();
    tape->record("concat", out, [parts = parts, out]() mutable {
      auto g = out.grad();
      std::size_t offset = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) detail::accumulate(p, g.subspan(offset, p.numel()));
        offset += p.numel();
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::scalar(a.vec().sum());
  if (auto* tape = detail::recording_tape<T>(a)) {
    out.set_requires_grad();
    tape->record("sum", out, [a = a, out]() mutable {
      const T g = out.grad()[0];
      for (auto& v : a.grad_buffer()) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// Sum of squared entries, ||a||^2.
template <typename T>
Tensor<T> squared_norm(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::scalar(a.vec().squaredNorm());
  if (auto* tape = detail::recording_tape<T>(a)) {
    out.set_requires_grad();
    tape->record("squared_norm", out, [a = a, out]() mutable {
      const T g = out.grad()[0];
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += T(2) * g * a[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kernel_h, kernel_w, stride, padding;
  std::size_t out_h, out_w;
};

namespace detail {

template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki)
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        T* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.padding);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.padding);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.height) &&
                                ix < static_cast<std::ptrdiff_t>(g.width);
            row[oy * g.out_w + ox] =
                inside ? img[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                             static_cast<std::size_t>(ix)]
                       : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* img) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki)
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        const T* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            img[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                static_cast<std::size_t>(ix)] += row[oy * g.out_w + ox];
          }
        }
      }
}

}  // namespace detail

inline ConvGeometry conv_geometry(const Shape& input, const Shape& kernel, std::size_t stride,
                                  std::size_t padding) {
  if (input.size() != 4 || kernel.size() != 4 || input[1] != kernel[1]) {
    throw ShapeError(detail::mismatch("conv2d", input, kernel));
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const auto h = static_cast<std::ptrdiff_t>(input[2] + 2 * padding) -
                 static_cast<std::ptrdiff_t>(kernel[2]);
  const auto w = static_cast<std::ptrdiff_t>(input[3] + 2 * padding) -
                 static_cast<std::ptrdiff_t>(kernel[3]);
  if (h < 0 || w < 0) {
    throw ShapeError("conv2d: non-positive output extent for input " + shape_str(input) +
                     " and kernel " + shape_str(kernel));
  }
  return {input[1],
          input[2],
          input[3],
          kernel[2],
          kernel[3],
          stride,
          padding,
          static_cast<std::size_t>(h) / stride + 1,
          static_cast<std::size_t>(w) / stride + 1};
}

// Cross-correlation of input [N,C,H,W] with kernel [O,C,KH,KW].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride = 1,
                 std::size_t padding = 0) {
  const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), stride, padding);
  const std::size_t n = input.dim(0), o = kernel.dim(0);
  const std::size_t patch = g.channels * g.kernel_h * g.kernel_w;
  const std::size_t plane = g.out_h * g.out_w;
  const std::size_t in_stride = g.channels * g.height * g.width;
  Tensor<T> out({n, o, g.out_h, g.out_w});
  RowMatrix<T> col(patch, plane);
  ConstMatrixMap<T> k(kernel.ptr(), o, patch);
  for (std::size_t i = 0; i < n; ++i) {
    detail::im2col(input.ptr() + i * in_stride, g, col.data());
    MatrixMap<T> y(out.ptr() + i * o * plane, o, plane);
    y.noalias() = k * col;
  }
  if (auto* tape = detail::recording_tape<T>(input, kernel)) {
    out.set_requires_grad();
    tape->record("conv2d", out, [input = input, kernel = kernel, out, g = g, n = n, o = o, patch = patch, plane = plane, in_stride = in_stride]() mutable {
      RowMatrix<T> col(patch, plane);
      RowMatrix<T> gcol(patch, plane);
      ConstMatrixMap<T> k(kernel.ptr(), o, patch);
      T* gk_ptr = kernel.requires_grad() ? kernel.grad_buffer().data() : nullptr;
      T* gx_ptr = input.requires_grad() ? input.grad_buffer().data() : nullptr;
      for (std::size_t i = 0; i < n; ++i) {
        ConstMatrixMap<T> gy(out.grad().data() + i * o * plane, o, plane);
        if (gk_ptr != nullptr) {
          detail::im2col(input.ptr() + i * in_stride, g, col.data());
          MatrixMap<T> gk(gk_ptr, o, patch);
          gk.noalias() += gy * col.transpose();
        }
        if (gx_ptr != nullptr) {
          gcol.noalias() = k.transpose() * gy;
          detail::col2im_add(gcol.data(), g, gx_ptr + i * in_stride);
        }
      }
    });
  }
  return out;
}

// Adds bias [C] to every spatial position of x [N,C,H,W].
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() != 4 || bias.numel() != x.dim(1)) {
    throw ShapeError(detail::mismatch("add_channel_bias", x.shape(), bias.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (i * c + ch) * plane;
      for (std::size_t p = 0; p < plane; ++p) out[base + p] = x[base + p] + bias[ch];
    }
  if (auto* tape = detail::recording_tape<T>(x, bias)) {
    out.set_requires_grad();
    tape->record("add_channel_bias", out, [x = x, bias = bias, out, n = n, c = c, plane = plane]() mutable {
      auto g = out.grad();
      if (x.requires_grad()) detail::accumulate(x, g);
      if (bias.requires_grad()) {
        auto gb = bias.grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (i * c + ch) * plane;
            T acc = 0;
            for (std::size_t p = 0; p < plane; ++p) acc += g[base + p];
            gb[ch] += acc;
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Activations, pooling, normalization

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  if (auto* tape = detail::recording_tape<T>(x)) {
    out.set_requires_grad();
    tape->record("relu", out, [x = x, out]() mutable {
      auto g = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i)
        if (x[i] > T(0)) gx[i] += g[i];
    });
  }
  return out;
}

// Floor semantics: trailing rows/cols that do not fill a window are dropped.
// Gradient goes to the first maximum in window scan order (lowest flat index).
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t window, std::size_t stride) {
  if (x.rank() != 4) throw ShapeError("max_pool2d: expected NCHW, got " + shape_str(x.shape()));
  if (window == 0 || stride == 0 || x.dim(2) < window || x.dim(3) < window) {
    throw ShapeError("max_pool2d: window " + std::to_string(window) + " does not fit " +
                     shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
  Tensor<T> out({n, c, oh, ow});
  std::vector<std::size_t> argmax(out.numel());
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = x.ptr() + plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (oy * stride) * w + ox * stride;
        for (std::size_t ky = 0; ky < window; ++ky)
          for (std::size_t kx = 0; kx < window; ++kx) {
            const std::size_t idx = (oy * stride + ky) * w + ox * stride + kx;
            if (src[idx] > src[best]) best = idx;
          }
        const std::size_t o = (plane * oh + oy) * ow + ox;
        out[o] = src[best];
        argmax[o] = plane * h * w + best;
      }
  }
  if (auto* tape = detail::recording_tape<T>(x)) {
    out.set_requires_grad();
    tape->record("max_pool2d", out, [x = x, out, argmax = std::move(argmax)]() mutable {
      auto g = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t o = 0; o < g.size(); ++o) gx[argmax[o]] += g[o];
    });
  }
  return out;
}

// [N,C,H,W] -> [N,C]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool: expected NCHW, got " + shape_str(x.shape()));
  const std::size_t nc = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> out({x.dim(0), x.dim(1)});
  for (std::size_t i = 0; i < nc; ++i) {
    T acc = 0;
    for (std::size_t p = 0; p < plane; ++p) acc += x[i * plane + p];
    out[i] = acc / static_cast<T>(plane);
  }
  if (auto* tape = detail::recording_tape<T>(x)) {
    out.set_requires_grad();
    tape->record("global_avg_pool", out, [x = x, out, nc = nc, plane = plane]() mutable {
      auto g = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < nc; ++i)
        for (std::size_t p = 0; p < plane; ++p) gx[i * plane + p] += g[i] / static_cast<T>(plane);
    });
  }
  return out;
}

struct BatchNormOptions {
  bool training = false;
  double momentum = 0.1;
  double eps = 1e-5;
};

// Per-channel batch normalization of x [N,C,H,W]. In training mode the batch
// statistics normalize and the running buffers are updated in place
// (running_var uses the unbiased batch variance).
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var,
                     const BatchNormOptions& opt) {
  if (x.rank() != 4 || gamma.numel() != x.dim(1) || beta.numel() != x.dim(1) ||
      running_mean.numel() != x.dim(1) || running_var.numel() != x.dim(1)) {
    throw ShapeError(detail::mismatch("batch_norm", x.shape(), gamma.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  const std::size_t count = n * plane;
  std::vector<T> mu(c), inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (opt.training) {
      T acc = 0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < plane; ++p) acc += x[(i * c + ch) * plane + p];
      const T m = acc / static_cast<T>(count);
      T var = 0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < plane; ++p) {
          const T d = x[(i * c + ch) * plane + p] - m;
          var += d * d;
        }
      const T biased = var / static_cast<T>(count);
      const T unbiased = count > 1 ? var / static_cast<T>(count - 1) : biased;
      mu[ch] = m;
      inv_std[ch] = T(1) / std::sqrt(biased + static_cast<T>(opt.eps));
      const T mom = static_cast<T>(opt.momentum);
      running_mean[ch] = (T(1) - mom) * running_mean[ch] + mom * m;
      running_var[ch] = (T(1) - mom) * running_var[ch] + mom * unbiased;
    } else {
      mu[ch] = running_mean[ch];
      inv_std[ch] = T(1) / std::sqrt(running_var[ch] + static_cast<T>(opt.eps));
    }
  }
  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t k = (i * c + ch) * plane + p;
        xhat[k] = (x[k] - mu[ch]) * inv_std[ch];
        out[k] = gamma[ch] * xhat[k] + beta[ch];
      }
  if (auto* tape = detail::recording_tape<T>(x, gamma, beta)) {
    out.set_requires_grad();
    tape->record("batch_norm", out, [x = x, gamma = gamma, beta = beta, out, xhat = xhat, inv_std = std::move(inv_std), n = n, c = c, plane = plane, count = count, training = opt.training]() mutable {
                   auto g = out.grad();
                   std::vector<T> sum_g(c, T(0)), sum_gx(c, T(0));
                   for (std::size_t i = 0; i < n; ++i)
                     for (std::size_t ch = 0; ch < c; ++ch)
                       for (std::size_t p = 0; p < plane; ++p) {
                         const std::size_t k = (i * c + ch) * plane + p;
                         sum_g[ch] += g[k];
                         sum_gx[ch] += g[k] * xhat[k];
                       }
                   if (gamma.requires_grad()) {
                     auto gg = gamma.grad_buffer();
                     for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += sum_gx[ch];
                   }
                   if (beta.requires_grad()) {
                     auto gb = beta.grad_buffer();
                     for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += sum_g[ch];
                   }
                   if (!x.requires_grad()) return;
                   auto gx = x.grad_buffer();
                   const T m = static_cast<T>(count);
                   for (std::size_t i = 0; i < n; ++i)
                     for (std::size_t ch = 0; ch < c; ++ch) {
                       const T scale_c = gamma[ch] * inv_std[ch];
                       for (std::size_t p = 0; p < plane; ++p) {
                         const std::size_t k = (i * c + ch) * plane + p;
                         if (training) {
                           gx[k] += scale_c / m *
                                    (m * g[k] - sum_g[ch] - xhat[k] * sum_gx[ch]);
                         } else {
                           gx[k] += scale_c * g[k];
                         }
                       }
                     }
                 });
  }
  return out;
}

// (x - mean[c]) / stddev[c] with constant statistics; differentiable in x.
template <typename T>
Tensor<T> normalize_channels(const Tensor<T>& x, std::span<const T> channel_mean,
                             std::span<const T> channel_std) {
  if (x.rank() != 4 || channel_mean.size() != x.dim(1) || channel_std.size() != x.dim(1)) {
    throw ShapeError("normalize_channels: " + shape_str(x.shape()) + " vs " +
                     std::to_string(channel_mean.size()) + " channel statistics");
  }
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  std::vector<T> inv(c);
  for (std::size_t ch = 0; ch < c; ++ch) inv[ch] = T(1) / channel_std[ch];
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t k = (i * c + ch) * plane + p;
        out[k] = (x[k] - channel_mean[ch]) * inv[ch];
      }
  if (auto* tape = detail::recording_tape<T>(x)) {
    out.set_requires_grad();
    tape->record("normalize_channels", out, [x = x, out, inv = std::move(inv), n = n, c = c, plane = plane]() mutable {
      auto g = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t p = 0; p < plane; ++p) {
            const std::size_t k = (i * c + ch) * plane + p;
            gx[k] += g[k] * inv[ch];
          }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss

// Row-wise softmax of logits [N,C] (max-subtracted).
template <typename T>
RowMatrix<T> softmax_rows(const Tensor<T>& logits) {
  RowMatrix<T> p = logits.matrix();
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const T m = p.row(r).maxCoeff();
    p.row(r) = (p.row(r).array() - m).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || labels.size() != logits.dim(0)) {
    throw ShapeError("softmax_cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(y) + " outside [0," +
                       std::to_string(c) + ")");
    }
  }
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.ptr() + i * c;
    const T m = *std::max_element(row, row + c);
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - m);
    total += std::log(z) + m - row[labels[i]];
  }
  Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(n));
  if (auto* tape = detail::recording_tape<T>(logits)) {
    out.set_requires_grad();
    std::vector<int> ys(labels.begin(), labels.end());
    tape->record("softmax_cross_entropy", out, [logits = logits, out, ys = std::move(ys), n = n, c = c]() mutable {
      const T g = out.grad()[0] / static_cast<T>(n);
      RowMatrix<T> p = softmax_rows(logits);
      auto gl = logits.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          const T onehot = static_cast<std::size_t>(ys[i]) == j ? T(1) : T(0);
          gl[i * c + j] += g * (p(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - onehot);
        }
    });
  }
  return out;
}

// Row-wise argmax; ties resolve to the lowest index.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  const std::size_t n = logits.dim(0), c = logits.numel() / logits.dim(0);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.ptr() + i * c;
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (row[j] > row[best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

}  // namespace pb
