#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "busu/autodiff.hpp"
#include "busu/rng.hpp"
#include "busu/tensor.hpp"

namespace busu {

enum class Mode { train, infer };
enum class Padding { same, valid };

/// Fingerprint of the piecewise branches a forward pass takes (ReLU signs,
/// max-pool winners, BCE clamps). Finite-difference checks compare traces to
/// tell when a perturbation crossed a kink. Recording is off unless a Scope
/// is alive on the current thread.
class BranchTrace {
 public:
  class Scope {
   public:
    explicit Scope(BranchTrace& t) : prev_(slot()) { slot() = &t; }
    ~Scope() { slot() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    BranchTrace* prev_;
  };

  static BranchTrace* current() { return slot(); }
  void mix(std::uint64_t v) { hash_ = (hash_ ^ v) * 0x100000001b3ULL; }
  std::uint64_t digest() const { return hash_; }

 private:
  static BranchTrace*& slot() {
    static thread_local BranchTrace* t = nullptr;
    return t;
  }
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

namespace detail {

template <Real T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <Real T>
using MapMat = Eigen::Map<RowMat<T>>;
template <Real T>
using CMapMat = Eigen::Map<const RowMat<T>>;

inline void require_rank(const Shape& s, std::size_t r, const char* op) {
  if (s.size() != r)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + to_string(s));
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

struct ConvGeometry {
  std::size_t n, cin, h, w;
  std::size_t cout, kh, kw;
  std::size_t stride;
  std::size_t ho, wo;
  std::size_t pad_top, pad_left;

  std::size_t patch() const { return cin * kh * kw; }
  std::size_t pixels() const { return ho * wo; }
  bool is_pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad_top == 0 && pad_left == 0; }
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& k, Padding pad, std::size_t stride) {
  require_rank(x, 4, "conv2d input");
  require_rank(k, 4, "conv2d kernel");
  if (stride < 1) throw ParameterError("conv2d: stride must be >= 1");
  if (x[1] != k[1])
    throw ShapeError("conv2d: input has " + std::to_string(x[1]) + " channels, kernel expects " + std::to_string(k[1]));
  ConvGeometry g{x[0], x[1], x[2], x[3], k[0], k[2], k[3], stride, 0, 0, 0, 0};
  if (pad == Padding::same) {
    if (g.kh % 2 == 0 || g.kw % 2 == 0) throw ShapeError("conv2d: same padding needs odd kernel extents");
    g.ho = (g.h + stride - 1) / stride;
    g.wo = (g.w + stride - 1) / stride;
    const std::size_t ph = std::max<std::ptrdiff_t>(0, std::ptrdiff_t((g.ho - 1) * stride + g.kh) - std::ptrdiff_t(g.h));
    const std::size_t pw = std::max<std::ptrdiff_t>(0, std::ptrdiff_t((g.wo - 1) * stride + g.kw) - std::ptrdiff_t(g.w));
    // Odd remainder goes to the trailing edge.
    g.pad_top = ph / 2;
    g.pad_left = pw / 2;
  } else {
    if (g.kh > g.h || g.kw > g.w) throw ShapeError("conv2d: valid convolution produces an empty output");
    g.ho = (g.h - g.kh) / stride + 1;
    g.wo = (g.w - g.kw) / stride + 1;
  }
  if (g.ho == 0 || g.wo == 0) throw ShapeError("conv2d: zero-size spatial output");
  return g;
}

template <Real T>
void im2col(const ConvGeometry& g, const T* x, T* cols) {
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = cols + ((c * g.kh + i) * g.kw + j) * g.pixels();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = std::ptrdiff_t(oy * g.stride + i) - std::ptrdiff_t(g.pad_top);
          T* out = row + oy * g.wo;
          if (iy < 0 || iy >= std::ptrdiff_t(g.h)) {
            std::fill(out, out + g.wo, T(0));
            continue;
          }
          const T* in = x + (c * g.h + std::size_t(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix = std::ptrdiff_t(ox * g.stride + j) - std::ptrdiff_t(g.pad_left);
            out[ox] = (ix < 0 || ix >= std::ptrdiff_t(g.w)) ? T(0) : in[ix];
          }
        }
      }
}

template <Real T>
void col2im_add(const ConvGeometry& g, const T* cols, T* dx) {
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = cols + ((c * g.kh + i) * g.kw + j) * g.pixels();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = std::ptrdiff_t(oy * g.stride + i) - std::ptrdiff_t(g.pad_top);
          if (iy < 0 || iy >= std::ptrdiff_t(g.h)) continue;
          T* out = dx + (c * g.h + std::size_t(iy)) * g.w;
          const T* in = row + oy * g.wo;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix = std::ptrdiff_t(ox * g.stride + j) - std::ptrdiff_t(g.pad_left);
            if (ix >= 0 && ix < std::ptrdiff_t(g.w)) out[ix] += in[ox];
          }
        }
      }
}

// Splits a shape around `axis` into (outer, extent, inner) for slicing and
// concatenation over arbitrary ranks.
struct AxisSplit {
  std::size_t outer, extent, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r{1, s.at(axis), 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, no kernel flip).

template <Real T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias = {}, Padding pad = Padding::same,
              std::size_t stride = 1) {
  using namespace detail;
  const ConvGeometry g = conv_geometry(x.shape(), kernel.shape(), pad, stride);
  if (bias.defined() && bias.shape() != Shape{g.cout})
    throw ShapeError("conv2d: bias shape " + to_string(bias.shape()) + " does not match " + std::to_string(g.cout) +
                     " output channels");

  Tensor<T> y({g.n, g.cout, g.ho, g.wo});
  const std::size_t in_stride = g.cin * g.h * g.w;
  const std::size_t out_stride = g.cout * g.pixels();
  CMapMat<T> w(kernel.value().raw(), g.cout, g.patch());
  Buffer<T> cols(g.is_pointwise() ? 0 : g.patch() * g.pixels());
  for (std::size_t n = 0; n < g.n; ++n) {
    const T* xn = x.value().raw() + n * in_stride;
    if (!g.is_pointwise()) im2col(g, xn, cols.data());
    CMapMat<T> c(g.is_pointwise() ? xn : cols.data(), g.patch(), g.pixels());
    MapMat<T> yn(y.raw() + n * out_stride, g.cout, g.pixels());
    yn.noalias() = w * c;
    if (bias.defined())
      for (std::size_t o = 0; o < g.cout; ++o) yn.row(o).array() += bias.value()[o];
  }

  std::vector<Var<T>> inputs{x, kernel};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(std::move(y), std::move(inputs), [g, in_stride, out_stride](Node<T>& self) {
    auto& xn_node = *self.parents[0];
    auto& kn_node = *self.parents[1];
    const T* dy = self.grad.raw();
    CMapMat<T> w(kn_node.value.raw(), g.cout, g.patch());
    Buffer<T> cols(g.patch() * g.pixels());
    Buffer<T> dcols(xn_node.requires_grad ? g.patch() * g.pixels() : 0);
    for (std::size_t n = 0; n < g.n; ++n) {
      CMapMat<T> dyn(dy + n * out_stride, g.cout, g.pixels());
      const T* xn = xn_node.value.raw() + n * in_stride;
      if (kn_node.requires_grad) {
        MapMat<T> dw(kn_node.grad.raw(), g.cout, g.patch());
        if (g.is_pointwise()) {
          dw.noalias() += dyn * CMapMat<T>(xn, g.patch(), g.pixels()).transpose();
        } else {
          im2col(g, xn, cols.data());
          dw.noalias() += dyn * CMapMat<T>(cols.data(), g.patch(), g.pixels()).transpose();
        }
      }
      if (xn_node.requires_grad) {
        T* dxn = xn_node.grad.raw() + n * in_stride;
        if (g.is_pointwise()) {
          MapMat<T>(dxn, g.patch(), g.pixels()).noalias() += w.transpose() * dyn;
        } else {
          MapMat<T> dc(dcols.data(), g.patch(), g.pixels());
          dc.noalias() = w.transpose() * dyn;
          col2im_add(g, dcols.data(), dxn);
        }
      }
      if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
        T* db = self.parents[2]->grad.raw();
        for (std::size_t o = 0; o < g.cout; ++o) {
          T acc = 0;
          for (std::size_t k = 0; k < g.pixels(); ++k) acc += dyn(o, k);
          db[o] += acc;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Pooling and resampling.

template <Real T>
struct Pooled {
  Var<T> output;
  std::shared_ptr<const std::vector<std::size_t>> argmax;  // flat input index per output element
};

/// 2x2 max-pool with stride 2. On ties the first window element in row-major
/// order wins and is the only one to receive gradient.
template <Real T>
Pooled<T> maxpool2d_with_indices(const Var<T>& x) {
  const auto& s = x.shape();
  detail::require_rank(s, 4, "maxpool2d");
  if (s[2] % 2 || s[3] % 2) throw ShapeError("maxpool2d: spatial dims must be even, got " + to_string(s));
  const std::size_t n = s[0], c = s[1], h = s[2], w = s[3], ho = h / 2, wo = w / 2;
  Tensor<T> y({n, c, ho, wo});
  auto idx = std::make_shared<std::vector<std::size_t>>(y.size());
  const T* in = x.value().raw();
  std::size_t o = 0;
  for (std::size_t p = 0; p < n * c; ++p) {
    const std::size_t base = p * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox, ++o) {
        std::size_t best = base + (2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t k = base + (2 * oy + dy) * w + 2 * ox + dx;
            if (in[k] > in[best]) best = k;
          }
        y[o] = in[best];
        (*idx)[o] = best;
        if (auto* t = BranchTrace::current()) t->mix(best - base);
      }
  }
  std::shared_ptr<const std::vector<std::size_t>> cidx = idx;
  Var<T> out = make_result<T>(std::move(y), {x}, [cidx](Node<T>& self) {
    T* dx = self.parents[0]->grad.raw();
    const T* dy = self.grad.raw();
    for (std::size_t i = 0; i < cidx->size(); ++i) dx[(*cidx)[i]] += dy[i];
  });
  return {std::move(out), std::move(cidx)};
}

template <Real T>
Var<T> maxpool2d(const Var<T>& x) {
  return maxpool2d_with_indices(x).output;
}

/// Nearest-neighbour 2x upsampling.
template <Real T>
Var<T> upsample2x(const Var<T>& x) {
  const auto& s = x.shape();
  detail::require_rank(s, 4, "upsample2x");
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3];
  Tensor<T> y({s[0], s[1], 2 * h, 2 * w});
  const T* in = x.value().raw();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t yy = 0; yy < 2 * h; ++yy) {
      const T* src = in + (p * h + yy / 2) * w;
      T* dst = y.raw() + (p * 2 * h + yy) * 2 * w;
      for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[xx] = src[xx / 2];
    }
  return make_result<T>(std::move(y), {x}, [planes, h, w](Node<T>& self) {
    T* dx = self.parents[0]->grad.raw();
    const T* dy = self.grad.raw();
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t yy = 0; yy < 2 * h; ++yy) {
        const T* src = dy + (p * 2 * h + yy) * 2 * w;
        T* dst = dx + (p * h + yy / 2) * w;
        for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[xx / 2] += src[xx];
      }
  });
}

// ---------------------------------------------------------------------------
// Batch normalization.

template <Real T>
struct RunningStats {
  Tensor<T> mean;
  Tensor<T> var;
  T momentum = T(0.1);

  RunningStats() = default;
  explicit RunningStats(std::size_t channels) : mean({channels}, T(0)), var({channels}, T(1)) {}
};

/// Per-channel normalization over (N, H, W). Train mode uses batch statistics
/// and updates `stats` by exponential moving average (unbiased variance);
/// infer mode uses `stats`.
template <Real T>
Var<T> batchnorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, RunningStats<T>& stats, Mode mode,
                 T eps = T(1e-5)) {
  const auto& s = x.shape();
  detail::require_rank(s, 4, "batchnorm");
  const std::size_t n = s[0], c = s[1], hw = s[2] * s[3];
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c} || stats.mean.shape() != Shape{c} ||
      stats.var.shape() != Shape{c})
    throw ShapeError("batchnorm: parameters do not match " + std::to_string(c) + " channels");
  const std::size_t count = n * hw;
  std::vector<T> mean(c), invstd(c);
  const T* in = x.value().raw();
  if (mode == Mode::train) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double sum = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = in + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) sum += p[i];
      }
      const double mu = sum / double(count);
      double sq = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = in + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      const double var = sq / double(count);
      mean[ch] = T(mu);
      invstd[ch] = T(1.0 / std::sqrt(var + double(eps)));
      const double unbiased = count > 1 ? sq / double(count - 1) : var;
      stats.mean[ch] = (T(1) - stats.momentum) * stats.mean[ch] + stats.momentum * T(mu);
      stats.var[ch] = (T(1) - stats.momentum) * stats.var[ch] + stats.momentum * T(unbiased);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = stats.mean[ch];
      invstd[ch] = T(1) / std::sqrt(stats.var[ch] + eps);
    }
  }
  Tensor<T> y(s);
  Tensor<T> xhat(s);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * hw;
      const T g = gamma.value()[ch], be = beta.value()[ch];
      for (std::size_t i = 0; i < hw; ++i) {
        const T xh = (in[off + i] - mean[ch]) * invstd[ch];
        xhat[off + i] = xh;
        y[off + i] = g * xh + be;
      }
    }
  const bool batch_stats = mode == Mode::train;
  return make_result<T>(std::move(y), {x, gamma, beta},
                        [xhat = std::move(xhat), invstd, n, c, hw, count, batch_stats](Node<T>& self) {
                          const T* dy = self.grad.raw();
                          auto& xn = *self.parents[0];
                          auto& gn = *self.parents[1];
                          auto& bn = *self.parents[2];
                          for (std::size_t ch = 0; ch < c; ++ch) {
                            double sum_dy = 0.0, sum_dy_xhat = 0.0;
                            for (std::size_t b = 0; b < n; ++b) {
                              const std::size_t off = (b * c + ch) * hw;
                              for (std::size_t i = 0; i < hw; ++i) {
                                sum_dy += dy[off + i];
                                sum_dy_xhat += double(dy[off + i]) * xhat[off + i];
                              }
                            }
                            if (gn.requires_grad) gn.grad[ch] += T(sum_dy_xhat);
                            if (bn.requires_grad) bn.grad[ch] += T(sum_dy);
                            if (!xn.requires_grad) continue;
                            const T g = gn.value[ch];
                            const T scale = g * invstd[ch];
                            const T mdy = T(sum_dy / double(count));
                            const T mdyx = T(sum_dy_xhat / double(count));
                            for (std::size_t b = 0; b < n; ++b) {
                              const std::size_t off = (b * c + ch) * hw;
                              T* dx = xn.grad.raw() + off;
                              if (batch_stats) {
                                for (std::size_t i = 0; i < hw; ++i)
                                  dx[i] += scale * (dy[off + i] - mdy - xhat[off + i] * mdyx);
                              } else {
                                for (std::size_t i = 0; i < hw; ++i) dx[i] += scale * dy[off + i];
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Elementwise.

namespace detail {

template <Real T, class Fwd, class Deriv>
Var<T> unary(const Var<T>& x, Fwd f, Deriv df) {
  Tensor<T> y(x.shape());
  const T* in = x.value().raw();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(in[i]);
  // The derivative is expressed in terms of (input, output).
  return make_result<T>(std::move(y), {x}, [df](Node<T>& self) {
    auto& xn = *self.parents[0];
    const T* dy = self.grad.raw();
    const T* yv = self.value.raw();
    const T* xv = xn.value.raw();
    T* dx = xn.grad.raw();
    for (std::size_t i = 0; i < self.value.size(); ++i) dx[i] += dy[i] * df(xv[i], yv[i]);
  });
}

}  // namespace detail

template <Real T>
Var<T> relu(const Var<T>& x) {
  if (auto* t = BranchTrace::current())
    for (T v : x.value().data()) t->mix(v > T(0));
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <Real T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary(
      x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <Real T>
Var<T> tanh(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <Real T>
Var<T> scale(const Var<T>& x, T factor) {
  return detail::unary(
      x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <Real T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "add");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] + b.value()[i];
  return make_result<T>(std::move(y), {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents)
      if (p->requires_grad)
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
  });
}

template <Real T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "mul");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
  return make_result<T>(std::move(y), {a, b}, [](Node<T>& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (an.requires_grad) an.grad[i] += self.grad[i] * bn.value[i];
      if (bn.requires_grad) bn.grad[i] += self.grad[i] * an.value[i];
    }
  });
}

/// Adds a per-channel bias (shape [C]) to an NCHW tensor.
template <Real T>
Var<T> bias_add(const Var<T>& x, const Var<T>& bias) {
  const auto& s = x.shape();
  detail::require_rank(s, 4, "bias_add");
  if (bias.shape() != Shape{s[1]}) throw ShapeError("bias_add: bias shape does not match channels");
  const std::size_t n = s[0], c = s[1], hw = s[2] * s[3];
  Tensor<T> y(s);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t k = (b * c + ch) * hw + i;
        y[k] = x.value()[k] + bias.value()[ch];
      }
  return make_result<T>(std::move(y), {x, bias}, [n, c, hw](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& bn = *self.parents[1];
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < hw; ++i) {
          const std::size_t k = (b * c + ch) * hw + i;
          if (xn.requires_grad) xn.grad[k] += self.grad[k];
          if (bn.requires_grad) bn.grad[ch] += self.grad[k];
        }
  });
}

// ---------------------------------------------------------------------------
// Structural.

template <Real T>
Var<T> concat(const std::vector<Var<T>>& inputs, std::size_t axis = 1) {
  if (inputs.empty()) throw ShapeError("concat: no inputs");
  Shape out_shape = inputs.front().shape();
  if (axis >= out_shape.size()) throw ShapeError("concat: axis out of range");
  out_shape[axis] = 0;
  for (const auto& in : inputs) {
    const auto& s = in.shape();
    if (s.size() != out_shape.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != out_shape[d])
        throw ShapeError("concat: non-concatenated extents differ: " + to_string(inputs.front().shape()) + " vs " +
                         to_string(s));
    out_shape[axis] += s[axis];
  }
  Tensor<T> y(out_shape);
  const auto outer = detail::split_axis(out_shape, axis);
  std::vector<std::size_t> extents;
  std::size_t offset = 0;
  for (const auto& in : inputs) {
    const auto sp = detail::split_axis(in.shape(), axis);
    extents.push_back(sp.extent);
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(in.value().raw() + o * sp.extent * sp.inner, sp.extent * sp.inner,
                  y.raw() + (o * outer.extent + offset) * outer.inner);
    offset += sp.extent;
  }
  return make_result<T>(std::move(y), inputs, [outer, extents](Node<T>& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < extents.size(); ++k) {
      auto& p = *self.parents[k];
      const std::size_t chunk = extents[k] * outer.inner;
      if (p.requires_grad)
        for (std::size_t o = 0; o < outer.outer; ++o) {
          const T* src = self.grad.raw() + (o * outer.extent + offset) * outer.inner;
          T* dst = p.grad.raw() + o * chunk;
          for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
      offset += extents[k];
    }
  });
}

/// Sub-range [begin, end) along `axis`.
template <Real T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  Shape s = x.shape();
  if (axis >= s.size() || begin >= end || end > s[axis])
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                     to_string(s));
  const auto sp = detail::split_axis(s, axis);
  s[axis] = end - begin;
  Tensor<T> y(s);
  const std::size_t chunk = (end - begin) * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(x.value().raw() + (o * sp.extent + begin) * sp.inner, chunk, y.raw() + o * chunk);
  return make_result<T>(std::move(y), {x}, [sp, begin, chunk](Node<T>& self) {
    T* dx = self.parents[0]->grad.raw();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      const T* src = self.grad.raw() + o * chunk;
      T* dst = dx + (o * sp.extent + begin) * sp.inner;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
    }
  });
}

/// Inverted dropout: train mode keeps each element with probability 1-rate and
/// scales survivors by 1/(1-rate); infer mode is the identity.
template <Real T>
Var<T> dropout(const Var<T>& x, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ParameterError("dropout: rate must be in [0, 1)");
  if (mode == Mode::infer || rate == 0.0) return x;
  const T keep_scale = T(1.0 / (1.0 - rate));
  Tensor<T> mask(x.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = rng.uniform() >= rate ? keep_scale : T(0);
  return mul(x, Var<T>::constant(std::move(mask)));
}

// ---------------------------------------------------------------------------
// Reductions and loss.

template <Real T>
Var<T> sum(const Var<T>& x) {
  double acc = 0.0;
  for (T v : x.value().data()) acc += v;
  return make_result<T>(Tensor<T>({1}, T(acc)), {x}, [](Node<T>& self) {
    const T g = self.grad[0];
    for (auto& v : self.parents[0]->grad.data()) v += g;
  });
}

template <Real T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T(1) / T(x.value().size()));
}

inline constexpr double kBceEps = 1e-7;

/// Mean binary cross-entropy with predictions clamped to [eps, 1-eps]. The
/// gradient is evaluated at the clamped prediction.
template <Real T>
Var<T> bce_loss(const Var<T>& pred, const Var<T>& target) {
  detail::require_same(pred.shape(), target.shape(), "bce_loss");
  const T eps = T(kBceEps);
  const std::size_t n = pred.value().size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const T raw = pred.value()[i];
    const double p = std::clamp(raw, eps, T(1) - eps);
    const double t = target.value()[i];
    if (auto* tr = BranchTrace::current()) tr->mix(raw < eps ? 1 : raw > T(1) - eps ? 2 : 0);
    acc -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
  }
  return make_result<T>(Tensor<T>({1}, T(acc / double(n))), {pred, target}, [n, eps](Node<T>& self) {
    auto& pn = *self.parents[0];
    auto& tn = *self.parents[1];
    const T g = self.grad[0] / T(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T p = std::clamp(pn.value[i], eps, T(1) - eps);
      const T t = tn.value[i];
      if (pn.requires_grad) pn.grad[i] += g * (p - t) / (p * (T(1) - p));
      if (tn.requires_grad) tn.grad[i] += g * (std::log(T(1) - p) - std::log(p));
    }
  });
}

}  // namespace busu
