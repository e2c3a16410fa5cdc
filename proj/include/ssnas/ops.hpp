// SPDX-License-Identifier: Apache-2.0
//
// Differentiable tensor operations used by the supernet and the losses.
// Every op computes its forward value eagerly and, when an input requires
// grad, records a closure that accumulates input gradients.
#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ssnas/autodiff.hpp"

namespace ssnas {

enum class ForwardMode {
  train,               // batch statistics, running statistics updated
  train_frozen_stats,  // batch statistics, running statistics untouched
  eval,                // running statistics
};

inline bool uses_batch_stats(ForwardMode m) { return m != ForwardMode::eval; }

namespace ops {

namespace detail {
template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* what) {
  if (a.shape() != b.shape())
    throw StructuralError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
}

inline Index ceil_div_nonneg(Index a, Index b) { return a <= 0 ? 0 : (a + b - 1) / b; }
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reductions
// ---------------------------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  const T* pb = b.value().data();
  for (Index i = 0; i < out.numel(); ++i) out[i] += pb[i];
  return make_node<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants_grad(self, k)) continue;
      auto& g = self.parents[k]->grad_buffer();
      for (Index i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
  });
}

/// Sum of same-shaped tensors.
template <class T>
Var<T> add_n(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw StructuralError("add_n: no inputs");
  if (xs.size() == 1) return xs.front();
  Tensor<T> out = xs.front().value();
  for (std::size_t k = 1; k < xs.size(); ++k) {
    detail::require_same_shape(xs.front(), xs[k], "add_n");
    const T* p = xs[k].value().data();
    for (Index i = 0; i < out.numel(); ++i) out[i] += p[i];
  }
  return make_node<T>(std::move(out), xs, [](Node<T>& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      if (!wants_grad(self, k)) continue;
      auto& g = self.parents[k]->grad_buffer();
      for (Index i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  const T* pb = b.value().data();
  for (Index i = 0; i < out.numel(); ++i) out[i] *= pb[i];
  return make_node<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& va = self.parents[0]->value;
    const auto& vb = self.parents[1]->value;
    if (wants_grad(self, 0)) {
      auto& g = self.parents[0]->grad_buffer();
      for (Index i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * vb[i];
    }
    if (wants_grad(self, 1)) {
      auto& g = self.parents[1]->grad_buffer();
      for (Index i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * va[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= s;
  return make_node<T>(std::move(out), {a}, [s](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (Index i = 0; i < g.numel(); ++i) g[i] += s * self.grad[i];
  });
}

template <class T>
Var<T> sum_all(const Var<T>& a) {
  T s{0};
  for (T v : a.value().values()) s += v;
  return make_node<T>(Tensor<T>({1}, s), {a}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const T go = self.grad[0];
    for (Index i = 0; i < g.numel(); ++i) g[i] += go;
  });
}

/// a + s * b for scalars a, b (shape {1}).
template <class T>
Var<T> axpy_scalar(const Var<T>& a, T s, const Var<T>& b) {
  if (a.numel() != 1 || b.numel() != 1) throw StructuralError("axpy_scalar: operands must be scalars");
  return make_node<T>(Tensor<T>({1}, a.value()[0] + s * b.value()[0]), {a, b}, [s](Node<T>& self) {
    if (wants_grad(self, 0)) self.parents[0]->grad_buffer()[0] += self.grad[0];
    if (wants_grad(self, 1)) self.parents[1]->grad_buffer()[0] += s * self.grad[0];
  });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = v > T{0} ? v : T{0};
  return make_node<T>(std::move(out), {x}, [](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    auto& g = self.parents[0]->grad_buffer();
    for (Index i = 0; i < g.numel(); ++i)
      if (xv[i] > T{0}) g[i] += self.grad[i];
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = T{1} / (T{1} + std::exp(-v));
  return make_node<T>(std::move(out), {x}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (Index i = 0; i < g.numel(); ++i) {
      const T s = self.value[i];
      g[i] += self.grad[i] * s * (T{1} - s);
    }
  });
}

/// Softmax over a flat vector.
template <class T>
Var<T> softmax(const Var<T>& x) {
  Tensor<T> out = x.value();
  T mx = -std::numeric_limits<T>::infinity();
  for (T v : out.values()) mx = std::max(mx, v);
  T z{0};
  for (auto& v : out.values()) {
    v = std::exp(v - mx);
    z += v;
  }
  for (auto& v : out.values()) v /= z;
  return make_node<T>(std::move(out), {x}, [](Node<T>& self) {
    T dot{0};
    for (Index i = 0; i < self.value.numel(); ++i) dot += self.grad[i] * self.value[i];
    auto& g = self.parents[0]->grad_buffer();
    for (Index i = 0; i < g.numel(); ++i) g[i] += self.value[i] * (self.grad[i] - dot);
  });
}

/// Σ_m weights[m] * ys[m]. Null entries in `ys` stand for exact zeros.
template <class T>
Var<T> weighted_sum(const std::vector<Var<T>>& ys, const Var<T>& weights, const Shape& shape) {
  if (static_cast<Index>(ys.size()) != weights.numel())
    throw StructuralError("weighted_sum: " + std::to_string(ys.size()) + " inputs but " +
                          std::to_string(weights.numel()) + " weights");
  Tensor<T> out(shape);
  std::vector<Var<T>> parents{weights};
  for (std::size_t m = 0; m < ys.size(); ++m) {
    if (!ys[m]) continue;
    if (ys[m].shape() != shape)
      throw StructuralError("weighted_sum: input " + std::to_string(m) + " has shape " +
                            shape_str(ys[m].shape()) + ", expected " + shape_str(shape));
    const T w = weights.value()[static_cast<Index>(m)];
    const T* p = ys[m].value().data();
    for (Index i = 0; i < out.numel(); ++i) out[i] += w * p[i];
  }
  std::vector<Index> slot(ys.size(), -1);
  for (std::size_t m = 0; m < ys.size(); ++m) {
    if (ys[m]) {
      slot[m] = static_cast<Index>(parents.size());
      parents.push_back(ys[m]);
    }
  }
  return make_node<T>(std::move(out), parents, [slot](Node<T>& self) {
    const auto& w = self.parents[0]->value;
    Tensor<T>* gw = wants_grad(self, 0) ? &self.parents[0]->grad_buffer() : nullptr;
    for (std::size_t m = 0; m < slot.size(); ++m) {
      if (slot[m] < 0) continue;
      const auto k = static_cast<std::size_t>(slot[m]);
      const auto& y = self.parents[k]->value;
      if (gw) {
        T dot{0};
        for (Index i = 0; i < y.numel(); ++i) dot += self.grad[i] * y[i];
        (*gw)[static_cast<Index>(m)] += dot;
      }
      if (wants_grad(self, k)) {
        auto& gy = self.parents[k]->grad_buffer();
        const T wm = w[static_cast<Index>(m)];
        for (Index i = 0; i < gy.numel(); ++i) gy[i] += wm * self.grad[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution and pooling (NCHW)
// ---------------------------------------------------------------------------

struct Conv2dSpec {
  Index stride = 1;
  Index padding = 0;
  Index dilation = 1;
  Index groups = 1;
};

inline Index conv_out_size(Index in, Index k, const Conv2dSpec& s) {
  return (in + 2 * s.padding - s.dilation * (k - 1) - 1) / s.stride + 1;
}

namespace detail {
// Output columns ox with 0 <= ox*stride - pad + koff < W, clipped to [0, Wo).
inline std::pair<Index, Index> valid_range(Index koff, Index pad, Index stride, Index in, Index out) {
  const Index lo = ceil_div_nonneg(pad - koff, stride);
  Index hi = in - 1 + pad - koff;
  hi = hi < 0 ? -1 : hi / stride;
  return {lo, std::min(hi + 1, out)};
}

/// Visits every (input position, output position, weight) triple of a
/// grouped convolution; `fn(x_off, o_off, w_off, count)` handles a run of
/// `count` output columns (input columns advance by the stride).
template <class Fn>
void conv_sweep(const Shape& xs, const Shape& ws, const Conv2dSpec& s, Index Ho, Index Wo, Fn&& fn) {
  const Index N = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
  const Index Cout = ws[0], cin_g = ws[1], KH = ws[2], KW = ws[3];
  const Index cout_g = Cout / s.groups;
  if (KH == 1 && KW == 1 && s.stride == 1 && s.padding == 0) {
    // pointwise: each (n, co, ci) is one contiguous run over the plane
    for (Index n = 0; n < N; ++n)
      for (Index co = 0; co < Cout; ++co) {
        const Index g = co / cout_g;
        for (Index cl = 0; cl < cin_g; ++cl)
          fn((n * Cin + g * cin_g + cl) * H * W, (n * Cout + co) * H * W, co * cin_g + cl, H * W);
      }
    return;
  }
  for (Index n = 0; n < N; ++n)
    for (Index co = 0; co < Cout; ++co) {
      const Index g = co / cout_g;
      for (Index cl = 0; cl < cin_g; ++cl) {
        const Index ci = g * cin_g + cl;
        for (Index ky = 0; ky < KH; ++ky) {
          const auto [oy0, oy1] = valid_range(ky * s.dilation, s.padding, s.stride, H, Ho);
          for (Index kx = 0; kx < KW; ++kx) {
            const auto [ox0, ox1] = valid_range(kx * s.dilation, s.padding, s.stride, W, Wo);
            if (ox1 <= ox0) continue;
            const Index w_off = ((co * cin_g + cl) * KH + ky) * KW + kx;
            for (Index oy = oy0; oy < oy1; ++oy) {
              const Index iy = oy * s.stride - s.padding + ky * s.dilation;
              const Index ix0 = ox0 * s.stride - s.padding + kx * s.dilation;
              fn(((n * Cin + ci) * H + iy) * W + ix0, ((n * Cout + co) * Ho + oy) * Wo + ox0, w_off,
                 ox1 - ox0);
            }
          }
        }
      }
    }
}
}  // namespace detail

/// Grouped 2-D convolution without bias. weight: Cout x (Cin/groups) x KH x KW.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, Conv2dSpec s) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 4 || ws.size() != 4) throw StructuralError("conv2d: expects 4-D input and weight");
  if (xs[1] % s.groups || ws[0] % s.groups || ws[1] * s.groups != xs[1])
    throw StructuralError("conv2d: channel/group mismatch input " + shape_str(xs) + " weight " + shape_str(ws));
  const Index Ho = conv_out_size(xs[2], ws[2], s);
  const Index Wo = conv_out_size(xs[3], ws[3], s);
  if (Ho <= 0 || Wo <= 0) throw StructuralError("conv2d: empty output for input " + shape_str(xs));
  Tensor<T> out({xs[0], ws[0], Ho, Wo});
  {
    const T* px = x.value().data();
    const T* pw = weight.value().data();
    T* po = out.data();
    const Index st = s.stride;
    detail::conv_sweep(xs, ws, s, Ho, Wo, [&](Index xo, Index oo, Index wo, Index cnt) {
      const T wv = pw[wo];
      const T* xi = px + xo;
      T* o = po + oo;
      if (st == 1)
        for (Index i = 0; i < cnt; ++i) o[i] += wv * xi[i];
      else
        for (Index i = 0; i < cnt; ++i) o[i] += wv * xi[i * st];
    });
  }
  return make_node<T>(std::move(out), {x, weight}, [s, Ho, Wo](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    const T* go = self.grad.data();
    const Index st = s.stride;
    T* gx = wants_grad(self, 0) ? self.parents[0]->grad_buffer().data() : nullptr;
    T* gw = wants_grad(self, 1) ? self.parents[1]->grad_buffer().data() : nullptr;
    const T* px = xv.data();
    const T* pw = wv.data();
    detail::conv_sweep(xv.shape(), wv.shape(), s, Ho, Wo, [&](Index xo, Index oo, Index wo, Index cnt) {
      const T* g = go + oo;
      if (gx) {
        const T w = pw[wo];
        T* d = gx + xo;
        if (st == 1)
          for (Index i = 0; i < cnt; ++i) d[i] += w * g[i];
        else
          for (Index i = 0; i < cnt; ++i) d[i * st] += w * g[i];
      }
      if (gw) {
        const T* xi = px + xo;
        T acc{0};
        if (st == 1)
          for (Index i = 0; i < cnt; ++i) acc += g[i] * xi[i];
        else
          for (Index i = 0; i < cnt; ++i) acc += g[i] * xi[i * st];
        gw[wo] += acc;
      }
    });
  });
}

/// 3x3 pooling with stride 1 and padding 1 (shape preserving).
/// Max pooling ignores padding; average pooling divides by the count of
/// in-bounds taps.
template <class T>
Var<T> pool3x3(const Var<T>& x, bool max_pool) {
  const Shape& xs = x.shape();
  const Index NC = xs[0] * xs[1], H = xs[2], W = xs[3];
  Tensor<T> out(xs);
  std::vector<Index> arg;
  if (max_pool) arg.resize(static_cast<std::size_t>(out.numel()));
  const T* px = x.value().data();
  for (Index p = 0; p < NC; ++p)
    for (Index y = 0; y < H; ++y)
      for (Index xw = 0; xw < W; ++xw) {
        const Index o = (p * H + y) * W + xw;
        T best = -std::numeric_limits<T>::infinity();
        Index best_i = -1;
        T acc{0};
        int cnt = 0;
        for (Index dy = -1; dy <= 1; ++dy) {
          const Index iy = y + dy;
          if (iy < 0 || iy >= H) continue;
          for (Index dx = -1; dx <= 1; ++dx) {
            const Index ix = xw + dx;
            if (ix < 0 || ix >= W) continue;
            const Index i = (p * H + iy) * W + ix;
            if (max_pool) {
              if (px[i] > best) {
                best = px[i];
                best_i = i;
              }
            } else {
              acc += px[i];
              ++cnt;
            }
          }
        }
        if (max_pool) {
          out[o] = best;
          arg[static_cast<std::size_t>(o)] = best_i;
        } else {
          out[o] = acc / static_cast<T>(cnt);
        }
      }
  return make_node<T>(std::move(out), {x}, [max_pool, arg = std::move(arg), NC, H, W](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    if (max_pool) {
      for (Index o = 0; o < self.grad.numel(); ++o) g[arg[static_cast<std::size_t>(o)]] += self.grad[o];
      return;
    }
    for (Index p = 0; p < NC; ++p)
      for (Index y = 0; y < H; ++y)
        for (Index xw = 0; xw < W; ++xw) {
          const Index y0 = std::max<Index>(y - 1, 0), y1 = std::min<Index>(y + 1, H - 1);
          const Index x0 = std::max<Index>(xw - 1, 0), x1 = std::min<Index>(xw + 1, W - 1);
          const T share = self.grad[(p * H + y) * W + xw] / static_cast<T>((y1 - y0 + 1) * (x1 - x0 + 1));
          for (Index iy = y0; iy <= y1; ++iy)
            for (Index ix = x0; ix <= x1; ++ix) g[(p * H + iy) * W + ix] += share;
        }
  });
}

/// Picks pixels (offset + 2i, offset + 2j): the two branches of a
/// factorized reduction.
template <class T>
Var<T> subsample2(const Var<T>& x, Index offset) {
  const Shape& xs = x.shape();
  const Index H = xs[2], W = xs[3];
  const Index Ho = (H - offset + 1) / 2, Wo = (W - offset + 1) / 2;
  const Index NC = xs[0] * xs[1];
  Tensor<T> out({xs[0], xs[1], Ho, Wo});
  const T* px = x.value().data();
  for (Index p = 0; p < NC; ++p)
    for (Index y = 0; y < Ho; ++y)
      for (Index xw = 0; xw < Wo; ++xw) out[(p * Ho + y) * Wo + xw] = px[(p * H + offset + 2 * y) * W + offset + 2 * xw];
  return make_node<T>(std::move(out), {x}, [offset, NC, H, W, Ho, Wo](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (Index p = 0; p < NC; ++p)
      for (Index y = 0; y < Ho; ++y)
        for (Index xw = 0; xw < Wo; ++xw)
          g[(p * H + offset + 2 * y) * W + offset + 2 * xw] += self.grad[(p * Ho + y) * Wo + xw];
  });
}

template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw StructuralError("concat_channels: no inputs");
  const Shape& s0 = xs.front().shape();
  Index C = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
      throw StructuralError("concat_channels: incompatible shapes " + shape_str(s0) + " and " + shape_str(s));
    C += s[1];
  }
  const Index N = s0[0], HW = s0[2] * s0[3];
  Tensor<T> out({N, C, s0[2], s0[3]});
  std::vector<Index> offsets;
  Index c0 = 0;
  for (const auto& x : xs) {
    const Index cx = x.shape()[1];
    for (Index n = 0; n < N; ++n)
      std::copy_n(x.value().data() + n * cx * HW, cx * HW, out.data() + (n * C + c0) * HW);
    offsets.push_back(c0);
    c0 += cx;
  }
  return make_node<T>(std::move(out), xs, [offsets, N, C, HW](Node<T>& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      if (!wants_grad(self, k)) continue;
      auto& g = self.parents[k]->grad_buffer();
      const Index cx = self.parents[k]->value.shape()[1];
      for (Index n = 0; n < N; ++n) {
        const T* src = self.grad.data() + (n * C + offsets[k]) * HW;
        T* dst = g.data() + n * cx * HW;
        for (Index i = 0; i < cx * HW; ++i) dst[i] += src[i];
      }
    }
  });
}

/// N x C x H x W -> N x C.
template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  const Shape& xs = x.shape();
  const Index NC = xs[0] * xs[1], HW = xs[2] * xs[3];
  Tensor<T> out({xs[0], xs[1]});
  const T* px = x.value().data();
  for (Index p = 0; p < NC; ++p) {
    T s{0};
    for (Index i = 0; i < HW; ++i) s += px[p * HW + i];
    out[p] = s / static_cast<T>(HW);
  }
  return make_node<T>(std::move(out), {x}, [NC, HW](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (Index p = 0; p < NC; ++p) {
      const T share = self.grad[p] / static_cast<T>(HW);
      for (Index i = 0; i < HW; ++i) g[p * HW + i] += share;
    }
  });
}

/// x (B x Din) times weight^T (Dout x Din) plus bias (Dout).
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const Index B = x.shape()[0], Din = x.shape()[1], Dout = weight.shape()[0];
  if (weight.shape()[1] != Din || bias.numel() != Dout)
    throw StructuralError("linear: input " + shape_str(x.shape()) + " weight " + shape_str(weight.shape()));
  Tensor<T> out({B, Dout});
  const T* px = x.value().data();
  const T* pw = weight.value().data();
  const T* pb = bias.value().data();
  for (Index b = 0; b < B; ++b)
    for (Index o = 0; o < Dout; ++o) {
      T acc = pb[o];
      for (Index i = 0; i < Din; ++i) acc += px[b * Din + i] * pw[o * Din + i];
      out[b * Dout + o] = acc;
    }
  return make_node<T>(std::move(out), {x, weight, bias}, [B, Din, Dout](Node<T>& self) {
    const T* px = self.parents[0]->value.data();
    const T* pw = self.parents[1]->value.data();
    const T* go = self.grad.data();
    if (wants_grad(self, 0)) {
      T* gx = self.parents[0]->grad_buffer().data();
      for (Index b = 0; b < B; ++b)
        for (Index o = 0; o < Dout; ++o) {
          const T g = go[b * Dout + o];
          for (Index i = 0; i < Din; ++i) gx[b * Din + i] += g * pw[o * Din + i];
        }
    }
    if (wants_grad(self, 1)) {
      T* gw = self.parents[1]->grad_buffer().data();
      for (Index b = 0; b < B; ++b)
        for (Index o = 0; o < Dout; ++o) {
          const T g = go[b * Dout + o];
          for (Index i = 0; i < Din; ++i) gw[o * Din + i] += g * px[b * Din + i];
        }
    }
    if (wants_grad(self, 2)) {
      T* gb = self.parents[2]->grad_buffer().data();
      for (Index b = 0; b < B; ++b)
        for (Index o = 0; o < Dout; ++o) gb[o] += go[b * Dout + o];
    }
  });
}

// ---------------------------------------------------------------------------
// Batch normalization over (N, H, W) per channel
// ---------------------------------------------------------------------------

template <class T>
struct RunningStats {
  Tensor<T> mean;
  Tensor<T> var;
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, RunningStats<T>& stats,
                  ForwardMode mode) {
  const Shape& xs = x.shape();
  const Index N = xs[0], C = xs[1], HW = xs.size() == 4 ? xs[2] * xs[3] : 1;
  const Index M = N * HW;
  const T eps = static_cast<T>(kBatchNormEps);
  std::vector<T> mean(static_cast<std::size_t>(C)), invstd(static_cast<std::size_t>(C));
  const T* px = x.value().data();
  const bool batch = uses_batch_stats(mode);
  for (Index c = 0; c < C; ++c) {
    T m{0}, v{0};
    if (batch) {
      for (Index n = 0; n < N; ++n)
        for (Index i = 0; i < HW; ++i) m += px[(n * C + c) * HW + i];
      m /= static_cast<T>(M);
      for (Index n = 0; n < N; ++n)
        for (Index i = 0; i < HW; ++i) {
          const T d = px[(n * C + c) * HW + i] - m;
          v += d * d;
        }
      v /= static_cast<T>(M);
      if (mode == ForwardMode::train) {
        const T mom = static_cast<T>(kBatchNormMomentum);
        const T unbiased = M > 1 ? v * static_cast<T>(M) / static_cast<T>(M - 1) : v;
        stats.mean[c] = (T{1} - mom) * stats.mean[c] + mom * m;
        stats.var[c] = (T{1} - mom) * stats.var[c] + mom * unbiased;
      }
    } else {
      m = stats.mean[c];
      v = stats.var[c];
    }
    mean[static_cast<std::size_t>(c)] = m;
    invstd[static_cast<std::size_t>(c)] = T{1} / std::sqrt(v + eps);
  }
  Tensor<T> out(xs);
  const T* pg = gamma.value().data();
  const T* pb = beta.value().data();
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c) {
      const T m = mean[static_cast<std::size_t>(c)], is = invstd[static_cast<std::size_t>(c)];
      for (Index i = 0; i < HW; ++i) {
        const Index k = (n * C + c) * HW + i;
        out[k] = pg[c] * (px[k] - m) * is + pb[c];
      }
    }
  return make_node<T>(std::move(out), {x, gamma, beta},
                      [batch, mean = std::move(mean), invstd = std::move(invstd), N, C, HW, M](Node<T>& self) {
                        const T* px = self.parents[0]->value.data();
                        const T* pg = self.parents[1]->value.data();
                        const T* go = self.grad.data();
                        for (Index c = 0; c < C; ++c) {
                          const T m = mean[static_cast<std::size_t>(c)], is = invstd[static_cast<std::size_t>(c)];
                          T sum_g{0}, sum_gx{0};
                          for (Index n = 0; n < N; ++n)
                            for (Index i = 0; i < HW; ++i) {
                              const Index k = (n * C + c) * HW + i;
                              sum_g += go[k];
                              sum_gx += go[k] * (px[k] - m) * is;
                            }
                          if (wants_grad(self, 1)) self.parents[1]->grad_buffer()[c] += sum_gx;
                          if (wants_grad(self, 2)) self.parents[2]->grad_buffer()[c] += sum_g;
                          if (!wants_grad(self, 0)) continue;
                          T* gx = self.parents[0]->grad_buffer().data();
                          const T gscale = pg[c] * is;
                          if (batch) {
                            const T inv_m = T{1} / static_cast<T>(M);
                            for (Index n = 0; n < N; ++n)
                              for (Index i = 0; i < HW; ++i) {
                                const Index k = (n * C + c) * HW + i;
                                const T xhat = (px[k] - m) * is;
                                gx[k] += gscale * (go[k] - inv_m * sum_g - xhat * inv_m * sum_gx);
                              }
                          } else {
                            for (Index n = 0; n < N; ++n)
                              for (Index i = 0; i < HW; ++i) {
                                const Index k = (n * C + c) * HW + i;
                                gx[k] += gscale * go[k];
                              }
                          }
                        }
                      });
}

}  // namespace ops
}  // namespace ssnas
