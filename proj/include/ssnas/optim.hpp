// SPDX-License-Identifier: Apache-2.0
//
// SGD with heavy-ball momentum, coupled L2 weight decay and global-norm
// gradient clipping:
//   d = clip(g) + wd·w;  buf = m·buf + d;  w -= lr·buf
// With m = 0 and wd = 0 the update is exactly w -= lr·g.
#pragma once

#include <cmath>
#include <vector>

#include "ssnas/autodiff.hpp"

namespace ssnas {

struct SgdOptions {
  double lr = 0.025;
  double momentum = 0.9;
  double weight_decay = 3e-4;
  double grad_clip = 5.0;  // <= 0 disables
};

/// Global L2 norm of the gradients held by `params`.
template <class T>
double grad_norm(const std::vector<Var<T>>& params) {
  double sq = 0;
  for (const auto& p : params)
    if (p.has_grad())
      for (T g : p.grad().values()) sq += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(sq);
}

/// One in-place step. `buffers` is (re)sized to match `params` on first use.
template <class T>
void sgd_step(std::vector<Var<T>>& params, std::vector<Tensor<T>>& buffers, const SgdOptions& o) {
  if (buffers.size() != params.size()) {
    buffers.clear();
    for (const auto& p : params) buffers.emplace_back(p.shape());
  }
  T clip_scale{1};
  if (o.grad_clip > 0) {
    const double norm = grad_norm(params);
    if (norm > o.grad_clip) clip_scale = static_cast<T>(o.grad_clip / (norm + 1e-6));
  }
  const T lr = static_cast<T>(o.lr), mom = static_cast<T>(o.momentum), wd = static_cast<T>(o.weight_decay);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    if (!p.has_grad()) continue;
    auto w = p.mutable_value().values();
    const auto g = p.grad().values();
    auto buf = buffers[k].values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      T d = g[i];
      if (clip_scale != T{1}) d *= clip_scale;
      if (wd != T{0}) d += wd * w[i];
      if (mom != T{0}) {
        buf[i] = mom * buf[i] + d;
        d = buf[i];
      }
      w[i] -= lr * d;
    }
  }
}

template <class T>
void zero_grads(std::vector<Var<T>>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace ssnas
