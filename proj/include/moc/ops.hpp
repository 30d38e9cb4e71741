#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "moc/autograd.hpp"
#include "moc/error.hpp"
#include "moc/tensor.hpp"

// Differentiable primitives over BasicVar. Feature maps are HWC, sequences
// are L x D. Convolution is cross-correlation; "same" padding pads zeros.

namespace moc {

enum class Padding { kSame, kValid };

namespace detail {

template <class T>
void require_same_shape(const BasicVar<T>& a, const BasicVar<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <class T>
void require_rank(const BasicVar<T>& a, int rank, const char* op) {
  if (a.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a.shape()));
  }
}

template <class T, class Fwd, class Deriv>
BasicVar<T> unary(const BasicVar<T>& x, const char* name, Fwd fwd, Deriv deriv) {
  const auto& xv = x.value();
  BasicTensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return make_result<T>(std::move(out), {x}, name, [deriv](Node<T>& self) {
    if (!wants_grad(self, 0)) return;
    const auto& xin = self.parents[0]->value;
    auto& g = parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(xin[i], self.value[i]);
  });
}

template <class T>
T sigmoid_scalar(T v) {
  return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

template <class T>
T softplus_scalar(T v) {
  // log1p(exp(v)) without overflow
  return v > T(20) ? v : std::log1p(std::exp(v));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
BasicVar<T> add(const BasicVar<T>& a, const BasicVar<T>& b) {
  detail::require_same_shape(a, b, "add");
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return detail::make_result<T>(std::move(out), {a, b}, "add", [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (detail::wants_grad(self, p)) self.parents[p]->accumulate(self.grad);
    }
  });
}

template <class T>
BasicVar<T> sub(const BasicVar<T>& a, const BasicVar<T>& b) {
  detail::require_same_shape(a, b, "sub");
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return detail::make_result<T>(std::move(out), {a, b}, "sub", [](Node<T>& self) {
    if (detail::wants_grad(self, 0)) self.parents[0]->accumulate(self.grad);
    if (detail::wants_grad(self, 1)) {
      auto& g = detail::parent_grad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <class T>
BasicVar<T> mul(const BasicVar<T>& a, const BasicVar<T>& b) {
  detail::require_same_shape(a, b, "mul");
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return detail::make_result<T>(std::move(out), {a, b}, "mul", [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (detail::wants_grad(self, 0)) {
      auto& g = detail::parent_grad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (detail::wants_grad(self, 1)) {
      auto& g = detail::parent_grad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

template <class T>
BasicVar<T> scale(const BasicVar<T>& x, T factor) {
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * factor;
  return detail::make_result<T>(std::move(out), {x}, "scale", [factor](Node<T>& self) {
    if (!detail::wants_grad(self, 0)) return;
    auto& g = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <class T>
BasicVar<T> exp(const BasicVar<T>& x) {
  return detail::unary(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
BasicVar<T> relu(const BasicVar<T>& x) {
  return detail::unary(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
BasicVar<T> sigmoid(const BasicVar<T>& x) {
  return detail::unary(
      x, "sigmoid", [](T v) { return detail::sigmoid_scalar(v); },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
BasicVar<T> silu(const BasicVar<T>& x) {
  return detail::unary(
      x, "silu", [](T v) { return v * detail::sigmoid_scalar(v); },
      [](T v, T) {
        const T s = detail::sigmoid_scalar(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

template <class T>
BasicVar<T> softplus(const BasicVar<T>& x) {
  return detail::unary(
      x, "softplus", [](T v) { return detail::softplus_scalar(v); },
      [](T v, T) { return detail::sigmoid_scalar(v); });
}

// ---------------------------------------------------------------- reductions

template <class T>
BasicVar<T> sum(const BasicVar<T>& x) {
  T acc = 0;
  for (T v : x.value().values()) acc += v;
  return detail::make_result<T>(BasicTensor<T>::scalar(acc), {x}, "sum", [](Node<T>& self) {
    if (!detail::wants_grad(self, 0)) return;
    auto& g = detail::parent_grad(self, 0);
    const T s = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s;
  });
}

template <class T>
BasicVar<T> mean(const BasicVar<T>& x) {
  if (x.size() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

/// Mean squared error over every element.
template <class T>
BasicVar<T> mse_loss(const BasicVar<T>& pred, const BasicVar<T>& target) {
  detail::require_same_shape(pred, target, "mse_loss");
  const std::size_t n = pred.size();
  if (n == 0) throw ShapeError("mse_loss of empty tensors");
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = pred.value()[i] - target.value()[i];
    acc += d * d;
  }
  acc /= static_cast<T>(n);
  return detail::make_result<T>(BasicTensor<T>::scalar(acc), {pred, target}, "mse_loss",
                                [n](Node<T>& self) {
                                  const auto& pv = self.parents[0]->value;
                                  const auto& tv = self.parents[1]->value;
                                  const T s = self.grad[0] * T(2) / static_cast<T>(n);
                                  if (detail::wants_grad(self, 0)) {
                                    auto& g = detail::parent_grad(self, 0);
                                    for (std::size_t i = 0; i < n; ++i) g[i] += s * (pv[i] - tv[i]);
                                  }
                                  if (detail::wants_grad(self, 1)) {
                                    auto& g = detail::parent_grad(self, 1);
                                    for (std::size_t i = 0; i < n; ++i) g[i] -= s * (pv[i] - tv[i]);
                                  }
                                });
}

// ---------------------------------------------------------------- shape ops

template <class T>
BasicVar<T> reshape(const BasicVar<T>& x, Shape shape) {
  auto out = x.value().reshaped(std::move(shape));
  return detail::make_result<T>(std::move(out), {x}, "reshape", [](Node<T>& self) {
    if (!detail::wants_grad(self, 0)) return;
    auto& g = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// Gathers rows of an L x D matrix: out[i] = x[perm[i]].
template <class T>
BasicVar<T> permute_rows(const BasicVar<T>& x, std::vector<int> perm) {
  detail::require_rank(x, 2, "permute_rows");
  const int rows = x.dim(0);
  const int cols = x.dim(1);
  if (static_cast<int>(perm.size()) != rows) {
    throw ShapeError("permute_rows: permutation length " + std::to_string(perm.size()) +
                     " != rows " + std::to_string(rows));
  }
  BasicTensor<T> out(x.shape());
  for (int i = 0; i < rows; ++i) {
    const int src = perm[static_cast<std::size_t>(i)];
    if (src < 0 || src >= rows) throw ArgumentError("permute_rows: index out of range");
    std::copy_n(x.value().data() + static_cast<std::size_t>(src) * cols, cols,
                out.data() + static_cast<std::size_t>(i) * cols);
  }
  return detail::make_result<T>(std::move(out), {x}, "permute_rows",
                                [perm = std::move(perm), rows, cols](Node<T>& self) {
                                  if (!detail::wants_grad(self, 0)) return;
                                  auto& g = detail::parent_grad(self, 0);
                                  for (int i = 0; i < rows; ++i) {
                                    const T* src = self.grad.data() + static_cast<std::size_t>(i) * cols;
                                    T* dst = g.data() + static_cast<std::size_t>(perm[static_cast<std::size_t>(i)]) * cols;
                                    for (int c = 0; c < cols; ++c) dst[c] += src[c];
                                  }
                                });
}

/// Concatenates along the last dimension; all leading extents must agree.
template <class T>
BasicVar<T> concat_channels(const std::vector<BasicVar<T>>& parts) {
  if (parts.empty()) throw ArgumentError("concat_channels: no inputs");
  Shape lead = parts[0].shape();
  if (lead.empty()) throw ShapeError("concat_channels: scalar input");
  lead.pop_back();
  const std::size_t outer = shape_numel(lead);
  std::vector<int> widths;
  int total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.empty()) throw ShapeError("concat_channels: scalar input");
    const int w = s.back();
    s.pop_back();
    if (s != lead) throw ShapeError("concat_channels: leading extents differ");
    widths.push_back(w);
    total += w;
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  BasicTensor<T> out(out_shape);
  int offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const int w = widths[k];
    const auto& v = parts[k].value();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.data() + o * w, w, out.data() + o * total + offset);
    }
    offset += w;
  }
  return detail::make_result<T>(std::move(out), parts, "concat_channels",
                                [widths, total, outer](Node<T>& self) {
                                  int off = 0;
                                  for (std::size_t k = 0; k < widths.size(); ++k) {
                                    const int w = widths[k];
                                    if (detail::wants_grad(self, k)) {
                                      auto& g = detail::parent_grad(self, k);
                                      for (std::size_t o = 0; o < outer; ++o) {
                                        const T* src = self.grad.data() + o * total + off;
                                        T* dst = g.data() + o * w;
                                        for (int c = 0; c < w; ++c) dst[c] += src[c];
                                      }
                                    }
                                    off += w;
                                  }
                                });
}

/// Takes channels [offset, offset + width) of the last dimension.
template <class T>
BasicVar<T> slice_channels(const BasicVar<T>& x, int offset, int width) {
  Shape shape = x.shape();
  if (shape.empty()) throw ShapeError("slice_channels: scalar input");
  const int total = shape.back();
  if (offset < 0 || width < 0 || offset + width > total) {
    throw ShapeError("slice_channels: range [" + std::to_string(offset) + ", " +
                     std::to_string(offset + width) + ") outside " + std::to_string(total) +
                     " channels");
  }
  const std::size_t outer = x.size() / static_cast<std::size_t>(std::max(total, 1));
  shape.back() = width;
  BasicTensor<T> out(shape);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.value().data() + o * total + offset, width, out.data() + o * width);
  }
  return detail::make_result<T>(std::move(out), {x}, "slice_channels",
                                [outer, total, offset, width](Node<T>& self) {
                                  if (!detail::wants_grad(self, 0)) return;
                                  auto& g = detail::parent_grad(self, 0);
                                  for (std::size_t o = 0; o < outer; ++o) {
                                    for (int c = 0; c < width; ++c) {
                                      g[o * total + offset + c] += self.grad[o * width + c];
                                    }
                                  }
                                });
}

// ---------------------------------------------------------------- dense layers

/// x: [..., in], weight: [in, out], bias: [out] or undefined.
template <class T>
BasicVar<T> linear(const BasicVar<T>& x, const BasicVar<T>& weight, const BasicVar<T>& bias = {}) {
  detail::require_rank(weight, 2, "linear");
  const int in = weight.dim(0);
  const int out_w = weight.dim(1);
  Shape shape = x.shape();
  if (shape.empty() || shape.back() != in) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.value().rank() != 1 || bias.dim(0) != out_w)) {
    throw ShapeError("linear: bias shape " + shape_str(bias.shape()));
  }
  const std::size_t rows = x.size() / static_cast<std::size_t>(in);
  shape.back() = out_w;
  BasicTensor<T> out(shape);
  const T* xv = x.value().data();
  const T* wv = weight.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T* o = out.data() + r * out_w;
    if (bias.defined()) std::copy_n(bias.value().data(), out_w, o);
    const T* xi = xv + r * in;
    for (int i = 0; i < in; ++i) {
      const T a = xi[i];
      const T* wr = wv + static_cast<std::size_t>(i) * out_w;
      for (int j = 0; j < out_w; ++j) o[j] += a * wr[j];
    }
  }
  return detail::make_result<T>(
      std::move(out), {x, weight, bias}, "linear", [rows, in, out_w](Node<T>& self) {
        const T* xv = self.parents[0]->value.data();
        const T* wv = self.parents[1]->value.data();
        const T* gy = self.grad.data();
        if (detail::wants_grad(self, 0)) {
          T* gx = detail::parent_grad(self, 0).data();
          for (std::size_t r = 0; r < rows; ++r) {
            const T* go = gy + r * out_w;
            T* gxi = gx + r * in;
            for (int i = 0; i < in; ++i) {
              const T* wr = wv + static_cast<std::size_t>(i) * out_w;
              T acc = 0;
              for (int j = 0; j < out_w; ++j) acc += go[j] * wr[j];
              gxi[i] += acc;
            }
          }
        }
        if (detail::wants_grad(self, 1)) {
          T* gw = detail::parent_grad(self, 1).data();
          for (std::size_t r = 0; r < rows; ++r) {
            const T* go = gy + r * out_w;
            const T* xi = xv + r * in;
            for (int i = 0; i < in; ++i) {
              const T a = xi[i];
              T* gwr = gw + static_cast<std::size_t>(i) * out_w;
              for (int j = 0; j < out_w; ++j) gwr[j] += a * go[j];
            }
          }
        }
        if (detail::wants_grad(self, 2)) {
          T* gb = detail::parent_grad(self, 2).data();
          for (std::size_t r = 0; r < rows; ++r) {
            for (int j = 0; j < out_w; ++j) gb[j] += gy[r * out_w + j];
          }
        }
      });
}

/// Layer normalization over the last dimension.
template <class T>
BasicVar<T> layer_norm(const BasicVar<T>& x, const BasicVar<T>& gamma, const BasicVar<T>& beta,
                       T eps = T(1e-5)) {
  const Shape& shape = x.shape();
  if (shape.empty()) throw ShapeError("layer_norm: scalar input");
  const int width = shape.back();
  if (gamma.size() != static_cast<std::size_t>(width) || beta.size() != static_cast<std::size_t>(width)) {
    throw ShapeError("layer_norm: affine parameters do not match width " + std::to_string(width));
  }
  const std::size_t rows = x.size() / static_cast<std::size_t>(width);
  BasicTensor<T> out(shape);
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(rows);
  const T* xv = x.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xi = xv + r * width;
    T mu = 0;
    for (int c = 0; c < width; ++c) mu += xi[c];
    mu /= static_cast<T>(width);
    T var = 0;
    for (int c = 0; c < width; ++c) var += (xi[c] - mu) * (xi[c] - mu);
    var /= static_cast<T>(width);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (int c = 0; c < width; ++c) {
      const T h = (xi[c] - mu) * is;
      xhat[r * width + c] = h;
      out[r * width + c] = h * gamma.value()[c] + beta.value()[c];
    }
  }
  return detail::make_result<T>(
      std::move(out), {x, gamma, beta}, "layer_norm",
      [rows, width, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        const T* gy = self.grad.data();
        const auto& gv = self.parents[1]->value;
        if (detail::wants_grad(self, 0)) {
          T* gx = detail::parent_grad(self, 0).data();
          std::vector<T> gh(static_cast<std::size_t>(width));
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_gh = 0;
            T mean_ghx = 0;
            for (int c = 0; c < width; ++c) {
              gh[c] = gy[r * width + c] * gv[c];
              mean_gh += gh[c];
              mean_ghx += gh[c] * xhat[r * width + c];
            }
            mean_gh /= static_cast<T>(width);
            mean_ghx /= static_cast<T>(width);
            for (int c = 0; c < width; ++c) {
              gx[r * width + c] += inv_std[r] * (gh[c] - mean_gh - xhat[r * width + c] * mean_ghx);
            }
          }
        }
        if (detail::wants_grad(self, 1)) {
          auto& gg = detail::parent_grad(self, 1);
          for (std::size_t r = 0; r < rows; ++r) {
            for (int c = 0; c < width; ++c) gg[c] += gy[r * width + c] * xhat[r * width + c];
          }
        }
        if (detail::wants_grad(self, 2)) {
          auto& gb = detail::parent_grad(self, 2);
          for (std::size_t r = 0; r < rows; ++r) {
            for (int c = 0; c < width; ++c) gb[c] += gy[r * width + c];
          }
        }
      });
}

// ---------------------------------------------------------------- spatial ops

struct ConvGeometry {
  int out_h = 0;
  int out_w = 0;
  int pad = 0;
};

inline ConvGeometry conv_geometry(int h, int w, int kh, int kw, int stride, int dilation,
                                  Padding padding) {
  if (stride < 1) throw ArgumentError("conv2d: stride must be >= 1");
  if (dilation < 1) throw ArgumentError("conv2d: dilation must be >= 1");
  ConvGeometry g;
  if (padding == Padding::kSame) {
    if (kh != kw || kh % 2 == 0) throw ArgumentError("conv2d: same padding needs an odd square kernel");
    g.pad = dilation * (kh - 1) / 2;
  }
  const int span_h = dilation * (kh - 1) + 1;
  const int span_w = dilation * (kw - 1) + 1;
  const int ph = h + 2 * g.pad - span_h;
  const int pw = w + 2 * g.pad - span_w;
  if (ph < 0 || pw < 0) throw ShapeError("conv2d: kernel larger than padded input");
  g.out_h = ph / stride + 1;
  g.out_w = pw / stride + 1;
  return g;
}

/// input: H x W x Cin, kernel: kh x kw x Cin x Cout, bias: Cout or undefined.
template <class T>
BasicVar<T> conv2d(const BasicVar<T>& input, const BasicVar<T>& kernel, const BasicVar<T>& bias = {},
                   int stride = 1, int dilation = 1, Padding padding = Padding::kSame) {
  detail::require_rank(input, 3, "conv2d");
  detail::require_rank(kernel, 4, "conv2d kernel");
  const int h = input.dim(0), w = input.dim(1), cin = input.dim(2);
  const int kh = kernel.dim(0), kw = kernel.dim(1), cout = kernel.dim(3);
  if (kernel.dim(2) != cin) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(kernel.dim(2)) +
                     " input channels, input has " + std::to_string(cin));
  }
  if (bias.defined() && bias.size() != static_cast<std::size_t>(cout)) {
    throw ShapeError("conv2d: bias width mismatch");
  }
  const ConvGeometry geo = conv_geometry(h, w, kh, kw, stride, dilation, padding);
  BasicTensor<T> out(Shape{geo.out_h, geo.out_w, cout});
  const T* xv = input.value().data();
  const T* kv = kernel.value().data();
  for (int oy = 0; oy < geo.out_h; ++oy) {
    for (int ox = 0; ox < geo.out_w; ++ox) {
      T* o = out.data() + (static_cast<std::size_t>(oy) * geo.out_w + ox) * cout;
      if (bias.defined()) std::copy_n(bias.value().data(), cout, o);
      for (int ky = 0; ky < kh; ++ky) {
        const int iy = oy * stride - geo.pad + ky * dilation;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const int ix = ox * stride - geo.pad + kx * dilation;
          if (ix < 0 || ix >= w) continue;
          const T* xi = xv + (static_cast<std::size_t>(iy) * w + ix) * cin;
          const T* kk = kv + (static_cast<std::size_t>(ky) * kw + kx) * cin * cout;
          for (int ci = 0; ci < cin; ++ci) {
            const T a = xi[ci];
            const T* kr = kk + static_cast<std::size_t>(ci) * cout;
            for (int co = 0; co < cout; ++co) o[co] += a * kr[co];
          }
        }
      }
    }
  }
  return detail::make_result<T>(
      std::move(out), {input, kernel, bias}, "conv2d",
      [h, w, cin, kh, kw, cout, stride, dilation, geo](Node<T>& self) {
        const T* xv = self.parents[0]->value.data();
        const T* kv = self.parents[1]->value.data();
        const T* gy = self.grad.data();
        const bool want_x = detail::wants_grad(self, 0);
        const bool want_k = detail::wants_grad(self, 1);
        T* gx = want_x ? detail::parent_grad(self, 0).data() : nullptr;
        T* gk = want_k ? detail::parent_grad(self, 1).data() : nullptr;
        if (want_x || want_k) {
          for (int oy = 0; oy < geo.out_h; ++oy) {
            for (int ox = 0; ox < geo.out_w; ++ox) {
              const T* go = gy + (static_cast<std::size_t>(oy) * geo.out_w + ox) * cout;
              for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * stride - geo.pad + ky * dilation;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  const int ix = ox * stride - geo.pad + kx * dilation;
                  if (ix < 0 || ix >= w) continue;
                  const std::size_t xoff = (static_cast<std::size_t>(iy) * w + ix) * cin;
                  const std::size_t koff = (static_cast<std::size_t>(ky) * kw + kx) * cin * cout;
                  for (int ci = 0; ci < cin; ++ci) {
                    const T* kr = kv + koff + static_cast<std::size_t>(ci) * cout;
                    if (want_x) {
                      T acc = 0;
                      for (int co = 0; co < cout; ++co) acc += go[co] * kr[co];
                      gx[xoff + ci] += acc;
                    }
                    if (want_k) {
                      const T a = xv[xoff + ci];
                      T* gkr = gk + koff + static_cast<std::size_t>(ci) * cout;
                      for (int co = 0; co < cout; ++co) gkr[co] += a * go[co];
                    }
                  }
                }
              }
            }
          }
        }
        if (detail::wants_grad(self, 2)) {
          T* gb = detail::parent_grad(self, 2).data();
          const std::size_t pixels = static_cast<std::size_t>(geo.out_h) * geo.out_w;
          for (std::size_t p = 0; p < pixels; ++p) {
            for (int co = 0; co < cout; ++co) gb[co] += gy[p * cout + co];
          }
        }
      });
}

/// Per-channel convolution, same padding, stride 1. kernel: kh x kw x C.
template <class T>
BasicVar<T> depthwise_conv2d(const BasicVar<T>& input, const BasicVar<T>& kernel,
                             const BasicVar<T>& bias = {}, int dilation = 1) {
  detail::require_rank(input, 3, "depthwise_conv2d");
  detail::require_rank(kernel, 3, "depthwise_conv2d kernel");
  const int h = input.dim(0), w = input.dim(1), c = input.dim(2);
  const int kh = kernel.dim(0), kw = kernel.dim(1);
  if (kernel.dim(2) != c) throw ShapeError("depthwise_conv2d: channel mismatch");
  if (bias.defined() && bias.size() != static_cast<std::size_t>(c)) {
    throw ShapeError("depthwise_conv2d: bias width mismatch");
  }
  const ConvGeometry geo = conv_geometry(h, w, kh, kw, 1, dilation, Padding::kSame);
  BasicTensor<T> out(Shape{h, w, c});
  const T* xv = input.value().data();
  const T* kv = kernel.value().data();
  for (int oy = 0; oy < h; ++oy) {
    for (int ox = 0; ox < w; ++ox) {
      T* o = out.data() + (static_cast<std::size_t>(oy) * w + ox) * c;
      if (bias.defined()) std::copy_n(bias.value().data(), c, o);
      for (int ky = 0; ky < kh; ++ky) {
        const int iy = oy - geo.pad + ky * dilation;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const int ix = ox - geo.pad + kx * dilation;
          if (ix < 0 || ix >= w) continue;
          const T* xi = xv + (static_cast<std::size_t>(iy) * w + ix) * c;
          const T* kk = kv + (static_cast<std::size_t>(ky) * kw + kx) * c;
          for (int ch = 0; ch < c; ++ch) o[ch] += xi[ch] * kk[ch];
        }
      }
    }
  }
  return detail::make_result<T>(
      std::move(out), {input, kernel, bias}, "depthwise_conv2d",
      [h, w, c, kh, kw, dilation, geo](Node<T>& self) {
        const T* xv = self.parents[0]->value.data();
        const T* kv = self.parents[1]->value.data();
        const T* gy = self.grad.data();
        const bool want_x = detail::wants_grad(self, 0);
        const bool want_k = detail::wants_grad(self, 1);
        T* gx = want_x ? detail::parent_grad(self, 0).data() : nullptr;
        T* gk = want_k ? detail::parent_grad(self, 1).data() : nullptr;
        for (int oy = 0; oy < h; ++oy) {
          for (int ox = 0; ox < w; ++ox) {
            const T* go = gy + (static_cast<std::size_t>(oy) * w + ox) * c;
            for (int ky = 0; ky < kh; ++ky) {
              const int iy = oy - geo.pad + ky * dilation;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < kw; ++kx) {
                const int ix = ox - geo.pad + kx * dilation;
                if (ix < 0 || ix >= w) continue;
                const std::size_t xoff = (static_cast<std::size_t>(iy) * w + ix) * c;
                const std::size_t koff = (static_cast<std::size_t>(ky) * kw + kx) * c;
                for (int ch = 0; ch < c; ++ch) {
                  if (want_x) gx[xoff + ch] += go[ch] * kv[koff + ch];
                  if (want_k) gk[koff + ch] += go[ch] * xv[xoff + ch];
                }
              }
            }
          }
        }
        if (detail::wants_grad(self, 2)) {
          T* gb = detail::parent_grad(self, 2).data();
          for (std::size_t p = 0; p < static_cast<std::size_t>(h) * w; ++p) {
            for (int ch = 0; ch < c; ++ch) gb[ch] += gy[p * c + ch];
          }
        }
      });
}

/// Mean over non-overlapping factor x factor windows.
template <class T>
BasicVar<T> avgpool2d(const BasicVar<T>& input, int factor) {
  detail::require_rank(input, 3, "avgpool2d");
  if (factor < 1) throw ArgumentError("avgpool2d: factor must be >= 1");
  const int h = input.dim(0), w = input.dim(1), c = input.dim(2);
  if (h % factor != 0 || w % factor != 0) {
    throw ShapeError("avgpool2d: extents " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible by " + std::to_string(factor));
  }
  const int oh = h / factor, ow = w / factor;
  const T norm = T(1) / static_cast<T>(factor * factor);
  BasicTensor<T> out(Shape{oh, ow, c});
  const auto& xv = input.value();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) out.at(y / factor, x / factor, ch) += xv.at(y, x, ch);
    }
  }
  for (auto& v : out.storage()) v *= norm;
  return detail::make_result<T>(std::move(out), {input}, "avgpool2d",
                                [h, w, c, factor, norm](Node<T>& self) {
                                  if (!detail::wants_grad(self, 0)) return;
                                  auto& g = detail::parent_grad(self, 0);
                                  for (int y = 0; y < h; ++y) {
                                    for (int x = 0; x < w; ++x) {
                                      for (int ch = 0; ch < c; ++ch) {
                                        g.at(y, x, ch) += self.grad.at(y / factor, x / factor, ch) * norm;
                                      }
                                    }
                                  }
                                });
}

namespace detail {

struct BilinearTap {
  int i0 = 0;
  int i1 = 0;
  double frac = 0.0;
};

// align_corners = false source coordinates, clamped at the borders.
inline std::vector<BilinearTap> bilinear_taps(int in, int factor) {
  std::vector<BilinearTap> taps(static_cast<std::size_t>(in) * factor);
  for (int o = 0; o < in * factor; ++o) {
    double src = (o + 0.5) / factor - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, src - i0};
  }
  return taps;
}

}  // namespace detail

/// Bilinear upsampling by an integer factor (align_corners = false).
template <class T>
BasicVar<T> upsample_bilinear(const BasicVar<T>& input, int factor) {
  detail::require_rank(input, 3, "upsample_bilinear");
  if (factor < 1) throw ArgumentError("upsample_bilinear: factor must be >= 1");
  const int h = input.dim(0), w = input.dim(1), c = input.dim(2);
  const int oh = h * factor, ow = w * factor;
  auto ty = detail::bilinear_taps(h, factor);
  auto tx = detail::bilinear_taps(w, factor);
  BasicTensor<T> out(Shape{oh, ow, c});
  const auto& xv = input.value();
  for (int oy = 0; oy < oh; ++oy) {
    const auto& a = ty[static_cast<std::size_t>(oy)];
    const T fy = static_cast<T>(a.frac);
    for (int ox = 0; ox < ow; ++ox) {
      const auto& b = tx[static_cast<std::size_t>(ox)];
      const T fx = static_cast<T>(b.frac);
      for (int ch = 0; ch < c; ++ch) {
        const T top = xv.at(a.i0, b.i0, ch) * (T(1) - fx) + xv.at(a.i0, b.i1, ch) * fx;
        const T bot = xv.at(a.i1, b.i0, ch) * (T(1) - fx) + xv.at(a.i1, b.i1, ch) * fx;
        out.at(oy, ox, ch) = top * (T(1) - fy) + bot * fy;
      }
    }
  }
  return detail::make_result<T>(
      std::move(out), {input}, "upsample_bilinear",
      [oh, ow, c, ty = std::move(ty), tx = std::move(tx)](Node<T>& self) {
        if (!detail::wants_grad(self, 0)) return;
        auto& g = detail::parent_grad(self, 0);
        for (int oy = 0; oy < oh; ++oy) {
          const auto& a = ty[static_cast<std::size_t>(oy)];
          const T fy = static_cast<T>(a.frac);
          for (int ox = 0; ox < ow; ++ox) {
            const auto& b = tx[static_cast<std::size_t>(ox)];
            const T fx = static_cast<T>(b.frac);
            for (int ch = 0; ch < c; ++ch) {
              const T go = self.grad.at(oy, ox, ch);
              g.at(a.i0, b.i0, ch) += go * (T(1) - fy) * (T(1) - fx);
              g.at(a.i0, b.i1, ch) += go * (T(1) - fy) * fx;
              g.at(a.i1, b.i0, ch) += go * fy * (T(1) - fx);
              g.at(a.i1, b.i1, ch) += go * fy * fx;
            }
          }
        }
      });
}

/// Count-preserving reduction: sums non-overlapping factor x factor windows.
/// Used on ground-truth density maps, so it is a plain tensor function.
template <class T>
BasicTensor<T> sum_pool2d(const BasicTensor<T>& input, int factor) {
  if (input.rank() != 3) throw ShapeError("sum_pool2d: expected HWC map");
  if (factor < 1) throw ArgumentError("sum_pool2d: factor must be >= 1");
  const int h = input.dim(0), w = input.dim(1), c = input.dim(2);
  if (h % factor != 0 || w % factor != 0) throw ShapeError("sum_pool2d: indivisible extents");
  BasicTensor<T> out(Shape{h / factor, w / factor, c});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) out.at(y / factor, x / factor, ch) += input.at(y, x, ch);
    }
  }
  return out;
}

}  // namespace moc
