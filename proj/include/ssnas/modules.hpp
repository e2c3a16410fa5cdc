// SPDX-License-Identifier: Apache-2.0
//
// Building blocks with trainable state: batch norm, conv stacks, the eight
// candidate operations of the cell search space, and affine maps.
#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <string_view>

#include "ssnas/ops.hpp"
#include "ssnas/rng.hpp"

namespace ssnas {

/// Receives every named parameter and buffer of a module tree.
template <class T>
struct StateVisitor {
  std::function<void(const std::string&, Var<T>&)> param = [](const std::string&, Var<T>&) {};
  std::function<void(const std::string&, Tensor<T>&)> buffer = [](const std::string&, Tensor<T>&) {};
};

namespace detail {
template <class T>
Var<T> kaiming_param(Shape shape, Index fan_in, std::uint64_t seed, const std::string& name) {
  Tensor<T> t(std::move(shape));
  Rng rng(derive_seed(seed, name));
  const double sd = std::sqrt(2.0 / static_cast<double>(std::max<Index>(fan_in, 1)));
  for (auto& v : t.values()) v = static_cast<T>(sd * rng.normal());
  return Var<T>::leaf(std::move(t), true);
}

template <class T>
Var<T> clone_param(const Var<T>& v) {
  return Var<T>::leaf(v.value(), v.requires_grad());
}
}  // namespace detail

template <class T>
struct BatchNorm2d {
  Var<T> gamma, beta;
  ops::RunningStats<T> stats;

  BatchNorm2d() = default;
  explicit BatchNorm2d(Index channels)
      : gamma(Var<T>::leaf(Tensor<T>({channels}, T{1}), true)),
        beta(Var<T>::leaf(Tensor<T>({channels}, T{0}), true)),
        stats{Tensor<T>({channels}, T{0}), Tensor<T>({channels}, T{1})} {}

  Var<T> forward(const Var<T>& x, ForwardMode mode) { return ops::batch_norm(x, gamma, beta, stats, mode); }

  void visit(const std::string& prefix, StateVisitor<T>& v) {
    v.param(prefix + ".weight", gamma);
    v.param(prefix + ".bias", beta);
    v.buffer(prefix + ".running_mean", stats.mean);
    v.buffer(prefix + ".running_var", stats.var);
  }
  BatchNorm2d clone() const {
    BatchNorm2d b;
    b.gamma = detail::clone_param(gamma);
    b.beta = detail::clone_param(beta);
    b.stats = stats;
    return b;
  }
  void reset_running_stats() {
    stats.mean.fill(T{0});
    stats.var.fill(T{1});
  }
};

/// ReLU -> conv -> BN.
template <class T>
struct ReLUConvBN {
  Var<T> weight;
  ops::Conv2dSpec spec;
  BatchNorm2d<T> bn;

  ReLUConvBN() = default;
  ReLUConvBN(Index cin, Index cout, Index k, ops::Conv2dSpec s, std::uint64_t seed, const std::string& name)
      : weight(detail::kaiming_param<T>({cout, cin / s.groups, k, k}, cin / s.groups * k * k, seed,
                                        name + ".conv.weight")),
        spec(s),
        bn(cout) {}

  Var<T> forward(const Var<T>& x, ForwardMode mode) {
    return bn.forward(ops::conv2d(ops::relu(x), weight, spec), mode);
  }
  void visit(const std::string& prefix, StateVisitor<T>& v) {
    v.param(prefix + ".conv.weight", weight);
    bn.visit(prefix + ".bn", v);
  }
  ReLUConvBN clone() const {
    ReLUConvBN r;
    r.weight = detail::clone_param(weight);
    r.spec = spec;
    r.bn = bn.clone();
    return r;
  }
};

/// Halves the spatial size: ReLU, two 1x1 convs on the even and the odd
/// pixel lattices, channel concat, BN.
template <class T>
struct FactorizedReduce {
  Var<T> w1, w2;
  BatchNorm2d<T> bn;

  FactorizedReduce() = default;
  FactorizedReduce(Index cin, Index cout, std::uint64_t seed, const std::string& name)
      : w1(detail::kaiming_param<T>({cout / 2, cin, 1, 1}, cin, seed, name + ".conv1.weight")),
        w2(detail::kaiming_param<T>({cout - cout / 2, cin, 1, 1}, cin, seed, name + ".conv2.weight")),
        bn(cout) {}

  Var<T> forward(const Var<T>& x, ForwardMode mode) {
    const Var<T> r = ops::relu(x);
    const Var<T> a = ops::conv2d(ops::subsample2(r, 0), w1, {});
    const Var<T> b = ops::conv2d(ops::subsample2(r, 1), w2, {});
    return bn.forward(ops::concat_channels<T>({a, b}), mode);
  }
  void visit(const std::string& prefix, StateVisitor<T>& v) {
    v.param(prefix + ".conv1.weight", w1);
    v.param(prefix + ".conv2.weight", w2);
    bn.visit(prefix + ".bn", v);
  }
  FactorizedReduce clone() const {
    FactorizedReduce f;
    f.w1 = detail::clone_param(w1);
    f.w2 = detail::clone_param(w2);
    f.bn = bn.clone();
    return f;
  }
};

/// Cell input preprocessing: 1x1 ReLUConvBN at equal resolution or a
/// factorized reduction when the input is twice the cell's resolution.
template <class T>
struct Preprocess {
  bool reduce = false;
  ReLUConvBN<T> conv;
  FactorizedReduce<T> fr;

  Preprocess() = default;
  Preprocess(Index cin, Index cout, bool halve, std::uint64_t seed, const std::string& name) : reduce(halve) {
    if (halve)
      fr = FactorizedReduce<T>(cin, cout, seed, name);
    else
      conv = ReLUConvBN<T>(cin, cout, 1, {}, seed, name);
  }
  Var<T> forward(const Var<T>& x, ForwardMode mode) { return reduce ? fr.forward(x, mode) : conv.forward(x, mode); }
  void visit(const std::string& prefix, StateVisitor<T>& v) {
    if (reduce)
      fr.visit(prefix, v);
    else
      conv.visit(prefix, v);
  }
  Preprocess clone() const {
    Preprocess p;
    p.reduce = reduce;
    if (reduce)
      p.fr = fr.clone();
    else
      p.conv = conv.clone();
    return p;
  }
};

// ---------------------------------------------------------------------------
// Candidate operations
// ---------------------------------------------------------------------------

enum class OpKind : int {
  zero = 0,
  skip_connect,
  max_pool_3x3,
  avg_pool_3x3,
  sep_conv_3x3,
  sep_conv_5x5,
  dil_conv_3x3,
  dil_conv_5x5,
};

inline constexpr std::array<OpKind, 8> kAllOps = {OpKind::zero,         OpKind::skip_connect, OpKind::max_pool_3x3,
                                                  OpKind::avg_pool_3x3, OpKind::sep_conv_3x3, OpKind::sep_conv_5x5,
                                                  OpKind::dil_conv_3x3, OpKind::dil_conv_5x5};

inline std::string_view op_name(OpKind k) {
  switch (k) {
    case OpKind::zero: return "zero";
    case OpKind::skip_connect: return "skip_connect";
    case OpKind::max_pool_3x3: return "max_pool_3x3";
    case OpKind::avg_pool_3x3: return "avg_pool_3x3";
    case OpKind::sep_conv_3x3: return "sep_conv_3x3";
    case OpKind::sep_conv_5x5: return "sep_conv_5x5";
    case OpKind::dil_conv_3x3: return "dil_conv_3x3";
    case OpKind::dil_conv_5x5: return "dil_conv_5x5";
  }
  return "?";
}

inline OpKind op_from_name(std::string_view name) {
  for (OpKind k : kAllOps)
    if (op_name(k) == name) return k;
  throw ParameterError("unknown operation '" + std::string(name) + "'");
}

/// Kernel size and dilation of the convolutional ops (0 for the rest).
inline std::pair<Index, Index> op_geometry(OpKind k) {
  switch (k) {
    case OpKind::sep_conv_3x3: return {3, 1};
    case OpKind::sep_conv_5x5: return {5, 1};
    case OpKind::dil_conv_3x3: return {3, 2};
    case OpKind::dil_conv_5x5: return {5, 2};
    default: return {0, 0};
  }
}

/// One candidate operation on a C -> C edge; every kind preserves the
/// spatial shape. Convolutional kinds are ReLU -> depthwise kxk (dilated
/// for dil_*) -> pointwise 1x1 -> BN.
template <class T>
struct CandidateOp {
  OpKind kind = OpKind::zero;
  Var<T> dw, pw;
  BatchNorm2d<T> bn;

  CandidateOp() = default;
  CandidateOp(OpKind k, Index channels, std::uint64_t seed, const std::string& name) : kind(k) {
    const auto [ks, dil] = op_geometry(k);
    if (ks > 0) {
      dw = detail::kaiming_param<T>({channels, 1, ks, ks}, ks * ks, seed, name + ".dw.weight");
      pw = detail::kaiming_param<T>({channels, channels, 1, 1}, channels, seed, name + ".pw.weight");
      bn = BatchNorm2d<T>(channels);
    }
  }

  bool is_zero() const { return kind == OpKind::zero; }

  Var<T> forward(const Var<T>& x, ForwardMode mode) {
    switch (kind) {
      case OpKind::zero: return Var<T>::constant(Tensor<T>(x.shape()));
      case OpKind::skip_connect: return x;
      case OpKind::max_pool_3x3: return ops::pool3x3(x, true);
      case OpKind::avg_pool_3x3: return ops::pool3x3(x, false);
      default: break;
    }
    const auto [ks, dil] = op_geometry(kind);
    const Index C = x.shape()[1];
    ops::Conv2dSpec depthwise{1, dil * (ks - 1) / 2, dil, C};
    Var<T> h = ops::conv2d(ops::relu(x), dw, depthwise);
    h = ops::conv2d(h, pw, {});
    return bn.forward(h, mode);
  }

  void visit(const std::string& prefix, StateVisitor<T>& v) {
    if (!dw) return;
    v.param(prefix + ".dw.weight", dw);
    v.param(prefix + ".pw.weight", pw);
    bn.visit(prefix + ".bn", v);
  }

  CandidateOp clone() const {
    CandidateOp c;
    c.kind = kind;
    if (dw) {
      c.dw = detail::clone_param(dw);
      c.pw = detail::clone_param(pw);
      c.bn = bn.clone();
    }
    return c;
  }
};

/// Affine map x Wᵀ + b.
template <class T>
struct Linear {
  Var<T> weight, bias;

  Linear() = default;
  Linear(Index din, Index dout, std::uint64_t seed, const std::string& name) {
    Tensor<T> w({dout, din});
    Rng rng(derive_seed(seed, name + ".weight"));
    const double bound = 1.0 / std::sqrt(static_cast<double>(din));
    for (auto& v : w.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    weight = Var<T>::leaf(std::move(w), true);
    bias = Var<T>::leaf(Tensor<T>({dout}), true);
  }
  Index in_features() const { return weight.shape()[1]; }
  Index out_features() const { return weight.shape()[0]; }

  Var<T> forward(const Var<T>& x) { return ops::linear(x, weight, bias); }
  void visit(const std::string& prefix, StateVisitor<T>& v) {
    v.param(prefix + ".weight", weight);
    v.param(prefix + ".bias", bias);
  }
  Linear clone() const {
    Linear l;
    l.weight = detail::clone_param(weight);
    l.bias = detail::clone_param(bias);
    return l;
  }
};

/// Stem: 3x3 conv (padding 1) -> BN.
template <class T>
struct Stem {
  Var<T> weight;
  BatchNorm2d<T> bn;

  Stem() = default;
  Stem(Index cin, Index cout, std::uint64_t seed)
      : weight(detail::kaiming_param<T>({cout, cin, 3, 3}, cin * 9, seed, "stem.conv.weight")), bn(cout) {}

  Var<T> forward(const Var<T>& x, ForwardMode mode) {
    return bn.forward(ops::conv2d(x, weight, {1, 1, 1, 1}), mode);
  }
  void visit(const std::string& prefix, StateVisitor<T>& v) {
    v.param(prefix + ".conv.weight", weight);
    bn.visit(prefix + ".bn", v);
  }
  Stem clone() const {
    Stem s;
    s.weight = detail::clone_param(weight);
    s.bn = bn.clone();
    return s;
  }
};

}  // namespace ssnas
