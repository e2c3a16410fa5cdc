// SPDX-License-Identifier: Apache-2.0
//
// Objectives: redundancy-reduction loss on twin embeddings, the zero-one
// sparsity regularizer on architecture weights, and the imbalance-aware
// classification losses (focal, logit-adjusted, and their composition).
#pragma once

#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ssnas/ops.hpp"

namespace ssnas {

inline constexpr double kStandardizeEps = 1e-5;

/// Class priors for logit adjustment.
struct ImbalancePriors {
  std::vector<double> pi;
  double tau = 1.0;

  void validate() const {
    if (pi.empty()) throw PriorError("priors: empty class list");
    double s = 0.0;
    for (std::size_t y = 0; y < pi.size(); ++y) {
      if (!(pi[y] > 0.0) || !std::isfinite(pi[y]))
        throw PriorError("priors: class " + std::to_string(y) + " has non-positive prior");
      s += pi[y];
    }
    if (std::abs(s - 1.0) > 1e-9) throw PriorError("priors: sum is " + std::to_string(s) + ", expected 1");
    if (!(tau >= 0.0)) throw ParameterError("priors: tau must be >= 0");
  }

  /// Empirical class frequencies of a label vector.
  static ImbalancePriors from_labels(std::span<const int> labels, std::size_t class_count, double tau) {
    std::vector<double> counts(class_count, 0.0);
    for (int y : labels) counts.at(static_cast<std::size_t>(y)) += 1.0;
    for (std::size_t y = 0; y < class_count; ++y)
      if (counts[y] == 0.0) throw PriorError("priors: class " + std::to_string(y) + " has no training samples");
    ImbalancePriors p;
    p.tau = tau;
    p.pi.resize(class_count);
    for (std::size_t y = 0; y < class_count; ++y) p.pi[y] = counts[y] / static_cast<double>(labels.size());
    return p;
  }
};

struct FocalParams {
  double gamma = 2.0;
  std::vector<double> alpha_t{1.0};  // one entry (shared) or one per class

  double weight(int label) const {
    return alpha_t.size() == 1 ? alpha_t[0] : alpha_t.at(static_cast<std::size_t>(label));
  }
  void validate(Index classes) const {
    if (!std::isfinite(gamma) || gamma < 0.0) throw ParameterError("focal: gamma must be finite and >= 0");
    if (alpha_t.size() != 1 && static_cast<Index>(alpha_t.size()) != classes)
      throw ParameterError("focal: alpha_t needs 1 or " + std::to_string(classes) + " entries");
    for (double a : alpha_t)
      if (!(a > 0.0)) throw ParameterError("focal: alpha_t entries must be > 0");
  }
};

namespace losses {

namespace detail {
template <class T>
void check_finite(const Tensor<T>& t, const char* what) {
  for (T v : t.values())
    if (!std::isfinite(v)) throw NumericError(std::string(what) + ": non-finite input");
}

template <class T>
void check_labels(const Var<T>& logits, std::span<const int> labels) {
  if (logits.shape().size() != 2) throw StructuralError("classification loss: logits must be B x L");
  const Index B = logits.shape()[0], L = logits.shape()[1];
  if (static_cast<Index>(labels.size()) != B)
    throw StructuralError("classification loss: " + std::to_string(labels.size()) + " labels for batch of " +
                          std::to_string(B));
  for (int y : labels)
    if (y < 0 || y >= L) throw DataError("classification loss: label " + std::to_string(y) + " out of range");
}

/// Row-wise softmax of z (B x L) into p; returns per-row log p[label].
template <class T>
std::vector<T> softmax_rows(const Tensor<T>& z, std::span<const int> labels, Tensor<T>& p) {
  const Index B = z.shape()[0], L = z.shape()[1];
  p = Tensor<T>(z.shape());
  std::vector<T> logp(static_cast<std::size_t>(B));
  for (Index b = 0; b < B; ++b) {
    const T* row = z.data() + b * L;
    T mx = row[0];
    for (Index k = 1; k < L; ++k) mx = std::max(mx, row[k]);
    T s{0};
    for (Index k = 0; k < L; ++k) s += std::exp(row[k] - mx);
    const T lse = std::log(s);
    for (Index k = 0; k < L; ++k) p[b * L + k] = std::exp(row[k] - mx - lse);
    logp[static_cast<std::size_t>(b)] = row[labels[static_cast<std::size_t>(b)]] - mx - lse;
  }
  return logp;
}

/// Mean over the batch of -a_y (1 - p_y)^gamma log p_y, with p the softmax
/// of logits shifted by `offsets` (per class, may be empty).
template <class T>
Var<T> focal_core(const Var<T>& logits, std::span<const int> labels, std::span<const T> offsets,
                  const FocalParams& params) {
  check_labels(logits, labels);
  check_finite(logits.value(), "focal loss");
  const Index B = logits.shape()[0], L = logits.shape()[1];
  params.validate(L);
  Tensor<T> z = logits.value();
  if (!offsets.empty())
    for (Index b = 0; b < B; ++b)
      for (Index k = 0; k < L; ++k) z[b * L + k] += offsets[static_cast<std::size_t>(k)];
  Tensor<T> p;
  const auto logp = softmax_rows(z, labels, p);
  const T gamma = static_cast<T>(params.gamma);
  std::vector<T> g(static_cast<std::size_t>(B));
  T total{0};
  for (Index b = 0; b < B; ++b) {
    const int y = labels[static_cast<std::size_t>(b)];
    const T a = static_cast<T>(params.weight(y));
    const T lp = logp[static_cast<std::size_t>(b)];
    const T pt = p[b * L + y];
    const T q = T{1} - pt;
    const T mod = std::pow(q, gamma);
    total += -a * mod * lp;
    // g = pt * dL/dpt, so dL/dz_k = g * (delta_ky - p_k)
    T t1{0};
    if (gamma != T{0} && q > T{0}) t1 = gamma * pt * std::pow(q, gamma - T{1}) * lp;
    g[static_cast<std::size_t>(b)] = a * (t1 - mod);
  }
  const T loss = total / static_cast<T>(B);
  std::vector<int> lab(labels.begin(), labels.end());
  return make_node<T>(Tensor<T>({1}, loss), {logits},
                      [p = std::move(p), g = std::move(g), lab = std::move(lab), B, L](Node<T>& self) {
                        auto& gz = self.parents[0]->grad_buffer();
                        const T scale = self.grad[0] / static_cast<T>(B);
                        for (Index b = 0; b < B; ++b) {
                          const T gb = g[static_cast<std::size_t>(b)];
                          const int y = lab[static_cast<std::size_t>(b)];
                          for (Index k = 0; k < L; ++k) {
                            const T delta = k == y ? T{1} : T{0};
                            gz[b * L + k] += (gb * (delta - p[b * L + k])) * scale;
                          }
                        }
                      });
}

template <class T>
std::vector<T> prior_offsets(const ImbalancePriors& priors, Index classes) {
  priors.validate();
  if (static_cast<Index>(priors.pi.size()) != classes)
    throw PriorError("priors: " + std::to_string(priors.pi.size()) + " classes, logits have " +
                     std::to_string(classes));
  std::vector<T> off(priors.pi.size());
  for (std::size_t k = 0; k < off.size(); ++k) off[k] = static_cast<T>(priors.tau * std::log(priors.pi[k]));
  return off;
}
}  // namespace detail

/// Mean softmax cross-entropy.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  detail::check_labels(logits, labels);
  detail::check_finite(logits.value(), "cross entropy");
  const Index B = logits.shape()[0], L = logits.shape()[1];
  Tensor<T> p;
  const auto logp = detail::softmax_rows(logits.value(), labels, p);
  T total{0};
  for (T lp : logp) total += -lp;
  std::vector<int> lab(labels.begin(), labels.end());
  return make_node<T>(Tensor<T>({1}, total / static_cast<T>(B)), {logits},
                      [p = std::move(p), lab = std::move(lab), B, L](Node<T>& self) {
                        auto& gz = self.parents[0]->grad_buffer();
                        const T scale = self.grad[0] / static_cast<T>(B);
                        for (Index b = 0; b < B; ++b) {
                          const int y = lab[static_cast<std::size_t>(b)];
                          for (Index k = 0; k < L; ++k) {
                            const T delta = k == y ? T{1} : T{0};
                            gz[b * L + k] += (p[b * L + k] - delta) * scale;
                          }
                        }
                      });
}

template <class T>
Var<T> focal_loss(const Var<T>& logits, std::span<const int> labels, const FocalParams& params) {
  return detail::focal_core<T>(logits, labels, {}, params);
}

/// Cross-entropy on logits shifted by tau * log(pi).
template <class T>
Var<T> logit_adjusted_ce(const Var<T>& logits, std::span<const int> labels, const ImbalancePriors& priors) {
  detail::check_labels(logits, labels);
  const auto off = detail::prior_offsets<T>(priors, logits.shape()[1]);
  return detail::focal_core<T>(logits, labels, off, FocalParams{0.0, {1.0}});
}

/// Focal loss evaluated on the prior-adjusted distribution.
template <class T>
Var<T> focal_logit_adjusted(const Var<T>& logits, std::span<const int> labels, const ImbalancePriors& priors,
                            const FocalParams& params) {
  detail::check_labels(logits, labels);
  const auto off = detail::prior_offsets<T>(priors, logits.shape()[1]);
  return detail::focal_core<T>(logits, labels, off, params);
}

// ---------------------------------------------------------------------------
// Redundancy reduction
// ---------------------------------------------------------------------------

/// Per-column standardization of a B x D matrix (biased variance, eps under
/// the square root).
template <class T>
Var<T> standardize_columns(const Var<T>& z) {
  const Index B = z.shape()[0], D = z.shape()[1];
  const T eps = static_cast<T>(kStandardizeEps);
  std::vector<T> mean(static_cast<std::size_t>(D)), invstd(static_cast<std::size_t>(D));
  const T* pz = z.value().data();
  Tensor<T> out(z.shape());
  for (Index d = 0; d < D; ++d) {
    T m{0}, v{0};
    for (Index b = 0; b < B; ++b) m += pz[b * D + d];
    m /= static_cast<T>(B);
    for (Index b = 0; b < B; ++b) {
      const T x = pz[b * D + d] - m;
      v += x * x;
    }
    v /= static_cast<T>(B);
    const T is = T{1} / std::sqrt(v + eps);
    mean[static_cast<std::size_t>(d)] = m;
    invstd[static_cast<std::size_t>(d)] = is;
    for (Index b = 0; b < B; ++b) out[b * D + d] = (pz[b * D + d] - m) * is;
  }
  return make_node<T>(std::move(out), {z}, [invstd = std::move(invstd), B, D](Node<T>& self) {
    auto& gz = self.parents[0]->grad_buffer();
    const T inv_b = T{1} / static_cast<T>(B);
    for (Index d = 0; d < D; ++d) {
      T sg{0}, sgx{0};
      for (Index b = 0; b < B; ++b) {
        sg += self.grad[b * D + d];
        sgx += self.grad[b * D + d] * self.value[b * D + d];
      }
      const T is = invstd[static_cast<std::size_t>(d)];
      for (Index b = 0; b < B; ++b)
        gz[b * D + d] += is * (self.grad[b * D + d] - inv_b * sg - self.value[b * D + d] * inv_b * sgx);
    }
  });
}

/// C = (1/B) * ẑ_aᵀ ẑ_b on standardized embeddings.
template <class T>
Var<T> cross_correlation(const Var<T>& z_a, const Var<T>& z_b) {
  if (z_a.shape().size() != 2 || z_a.shape() != z_b.shape())
    throw StructuralError("cross_correlation: embeddings must both be B x D, got " + shape_str(z_a.shape()) +
                          " and " + shape_str(z_b.shape()));
  const Index B = z_a.shape()[0], D = z_a.shape()[1];
  if (B < 2) throw DataError("cross_correlation: batch of " + std::to_string(B) + " is too small (need >= 2)");
  if (D < 1) throw StructuralError("cross_correlation: empty embedding");
  const Var<T> a = standardize_columns(z_a);
  const Var<T> b = standardize_columns(z_b);
  const T inv_b = T{1} / static_cast<T>(B);
  Tensor<T> c({D, D});
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  for (Index r = 0; r < B; ++r)
    for (Index i = 0; i < D; ++i) {
      const T ai = pa[r * D + i];
      T* crow = c.data() + i * D;
      for (Index j = 0; j < D; ++j) crow[j] += ai * pb[r * D + j];
    }
  for (auto& v : c.values()) v *= inv_b;
  return make_node<T>(std::move(c), {a, b}, [B, D, inv_b](Node<T>& self) {
    const T* pa = self.parents[0]->value.data();
    const T* pb = self.parents[1]->value.data();
    const T* gc = self.grad.data();
    if (wants_grad(self, 0)) {
      T* ga = self.parents[0]->grad_buffer().data();
      for (Index r = 0; r < B; ++r)
        for (Index i = 0; i < D; ++i) {
          T acc{0};
          for (Index j = 0; j < D; ++j) acc += gc[i * D + j] * pb[r * D + j];
          ga[r * D + i] += acc * inv_b;
        }
    }
    if (wants_grad(self, 1)) {
      T* gb = self.parents[1]->grad_buffer().data();
      for (Index r = 0; r < B; ++r)
        for (Index i = 0; i < D; ++i) {
          const T ai = pa[r * D + i] * inv_b;
          const T* grow = gc + i * D;
          for (Index j = 0; j < D; ++j) gb[r * D + j] += ai * grow[j];
        }
    }
  });
}

/// Σ_i (1 - C_ii)² + λ Σ_{i≠j} C_ij².
template <class T>
Var<T> barlow_twins_loss(const Var<T>& c, T lambda) {
  if (lambda < T{0}) throw ParameterError("barlow_twins_loss: lambda must be >= 0");
  const Index D = c.shape()[0];
  if (c.shape().size() != 2 || c.shape()[1] != D) throw StructuralError("barlow_twins_loss: C must be square");
  T on{0}, off{0};
  for (Index i = 0; i < D; ++i)
    for (Index j = 0; j < D; ++j) {
      const T v = c.value()[i * D + j];
      if (i == j)
        on += (T{1} - v) * (T{1} - v);
      else
        off += v * v;
    }
  return make_node<T>(Tensor<T>({1}, on + lambda * off), {c}, [D, lambda](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const auto& cv = self.parents[0]->value;
    const T go = self.grad[0];
    for (Index i = 0; i < D; ++i)
      for (Index j = 0; j < D; ++j) {
        const T v = cv[i * D + j];
        g[i * D + j] += go * (i == j ? T{-2} * (T{1} - v) : T{2} * lambda * v);
      }
  });
}

/// -(1/N) Σ (σ(α_i) - 0.5)² over every entry of every tensor in `alphas`.
template <class T>
Var<T> zero_one_loss(const std::vector<Var<T>>& alphas) {
  Index n = 0;
  T acc{0};
  for (const auto& a : alphas) {
    for (T v : a.value().values()) {
      if (!std::isfinite(v)) throw NumericError("zero_one_loss: non-finite architecture weight");
      const T s = T{1} / (T{1} + std::exp(-v)) - T{0.5};
      acc += s * s;
    }
    n += a.numel();
  }
  if (n == 0) throw StructuralError("zero_one_loss: no architecture weights");
  const T inv_n = T{1} / static_cast<T>(n);
  return make_node<T>(Tensor<T>({1}, -acc * inv_n), alphas, [inv_n](Node<T>& self) {
    const T go = self.grad[0];
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      if (!wants_grad(self, k)) continue;
      const auto& v = self.parents[k]->value;
      auto& g = self.parents[k]->grad_buffer();
      for (Index i = 0; i < v.numel(); ++i) {
        const T s = T{1} / (T{1} + std::exp(-v[i]));
        g[i] += go * T{-2} * inv_n * (s - T{0.5}) * s * (T{1} - s);
      }
    }
  });
}

/// ss_loss + w01 * zo_loss.
template <class T>
Var<T> total_arch_loss(const Var<T>& ss_loss, const Var<T>& zo_loss, T w01) {
  if (w01 < T{0}) throw ParameterError("total_arch_loss: w01 must be >= 0");
  return ops::axpy_scalar(ss_loss, w01, zo_loss);
}

}  // namespace losses
}  // namespace ssnas
