// SPDX-License-Identifier: Apache-2.0
//
// First-order alternating search: one architecture step on a validation
// twin batch, then one weight step on a training twin batch. Both steps
// minimise the Barlow Twins loss of the two views' embeddings; the
// architecture step adds the weighted zero-one loss on σ(α).
#pragma once

#include <chrono>
#include <cmath>
#include <concepts>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "ssnas/checkpoint.hpp"
#include "ssnas/data.hpp"
#include "ssnas/losses.hpp"
#include "ssnas/optim.hpp"

namespace ssnas {

struct SearchConfig {
  double lr0 = 0.025;
  double lr_min = 0.0;
  double momentum = 0.9;
  double weight_decay = 3e-4;
  double arch_lr = 3e-4;
  double arch_weight_decay = 1e-3;  // decoupled
  Index batch_size = 32;
  int epochs = 100;
  double w01 = 1.0;
  int w01_ramp_epochs = 10;  // linear ramp 0 -> w01
  double lambda_bt = 5e-3;
  std::uint64_t seed = 0;
  double val_fraction = 0.5;
  double grad_clip = 5.0;  // global L2 norm on ω, <= 0 disables
  double divergence_threshold = 1e4;
  DeriveMode derive_mode = DeriveMode::sigmoid_threshold;
  double threshold = 0.75;
  AugmentationPolicy augmentation = AugmentationPolicy::twin_default();
  int checkpoint_every = 0;  // epochs, 0 disables

  void validate() const {
    if (!(lr0 > 0) || !(arch_lr > 0)) throw ParameterError("search: learning rates must be > 0");
    if (lr_min < 0 || lr_min > lr0) throw ParameterError("search: lr_min must lie in [0, lr0]");
    if (momentum < 0 || momentum >= 1) throw ParameterError("search: momentum must lie in [0, 1)");
    if (weight_decay < 0 || arch_weight_decay < 0) throw ParameterError("search: weight decay must be >= 0");
    if (batch_size < 2) throw ParameterError("search: batch_size must be >= 2");
    if (epochs < 0) throw ParameterError("search: epochs must be >= 0");
    if (w01 < 0 || w01_ramp_epochs < 0) throw ParameterError("search: w01 and its ramp must be >= 0");
    if (!(lambda_bt > 0)) throw ParameterError("search: lambda_bt must be > 0");
    if (!(val_fraction > 0 && val_fraction < 1)) throw ParameterError("search: val_fraction must lie in (0, 1)");
    if (!(threshold > 0 && threshold < 1)) throw ParameterError("search: threshold must lie in (0, 1)");
    if (checkpoint_every < 0) throw ParameterError("search: checkpoint_every must be >= 0");
    augmentation.validate();
  }
};

inline std::string_view derive_mode_name(DeriveMode m) {
  return m == DeriveMode::argmax_top2 ? "argmax_top2" : "sigmoid_threshold";
}

inline nlohmann::json to_json(const SearchConfig& c) {
  return {{"lr0", c.lr0},
          {"lr_min", c.lr_min},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"arch_lr", c.arch_lr},
          {"arch_weight_decay", c.arch_weight_decay},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"w01", c.w01},
          {"w01_ramp_epochs", c.w01_ramp_epochs},
          {"lambda_bt", c.lambda_bt},
          {"seed", c.seed},
          {"val_fraction", c.val_fraction},
          {"grad_clip", c.grad_clip},
          {"divergence_threshold", c.divergence_threshold},
          {"derive_mode", std::string(derive_mode_name(c.derive_mode))},
          {"threshold", c.threshold},
          {"augmentation", to_json(c.augmentation)},
          {"checkpoint_every", c.checkpoint_every}};
}

inline SearchConfig search_config_from_json(const nlohmann::json& j, SearchConfig c = {}) {
  detail::check_keys(j, to_json(c), "search");
  c.lr0 = j.value("lr0", c.lr0);
  c.lr_min = j.value("lr_min", c.lr_min);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.arch_lr = j.value("arch_lr", c.arch_lr);
  c.arch_weight_decay = j.value("arch_weight_decay", c.arch_weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.w01 = j.value("w01", c.w01);
  c.w01_ramp_epochs = j.value("w01_ramp_epochs", c.w01_ramp_epochs);
  c.lambda_bt = j.value("lambda_bt", c.lambda_bt);
  c.seed = j.value("seed", c.seed);
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.divergence_threshold = j.value("divergence_threshold", c.divergence_threshold);
  if (j.contains("derive_mode")) c.derive_mode = derive_mode_from_name(j.at("derive_mode").get<std::string>());
  c.threshold = j.value("threshold", c.threshold);
  if (j.contains("augmentation")) c.augmentation = augmentation_from_json(j.at("augmentation"), c.augmentation);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.validate();
  return c;
}

/// η = lr_min + ½(lr0 − lr_min)(1 + cos(π·step/total_steps)).
inline double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr0, double lr_min) {
  if (total_steps <= 0) return lr0;
  if (step < 0 || step > total_steps)
    throw ParameterError("cosine_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

struct UnlabeledSplit {
  std::vector<std::size_t> train, val;
};

/// Seeded disjoint partition of N unlabeled samples; each side sorted.
inline UnlabeledSplit split_unlabeled(std::size_t n, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0 && val_fraction < 1)) throw ParameterError("split_unlabeled: val_fraction must lie in (0, 1)");
  const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * val_fraction));
  if (n_val == 0 || n_val >= n)
    throw DataError("split_unlabeled: " + std::to_string(n) + " samples leave one side of the split empty");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(perm);
  UnlabeledSplit s;
  s.val.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.train.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_val), perm.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

inline UnlabeledSplit split_unlabeled(const Tensor<float>& images, double val_fraction, std::uint64_t seed) {
  return split_unlabeled(static_cast<std::size_t>(images.rank() ? images.dim(0) : 0), val_fraction, seed);
}

/// Anything with an embedding forward and disjoint ω / α parameter lists.
template <class M>
concept SearchModel = requires(M m, const Tensor<typename M::scalar_type>& x) {
  { m.forward(x, ForwardMode::train) } -> std::same_as<Var<typename M::scalar_type>>;
  { m.weight_params() } -> std::same_as<std::vector<Var<typename M::scalar_type>>>;
  { m.arch_params() } -> std::same_as<std::vector<Var<typename M::scalar_type>>>;
};

template <SearchModel Model>
struct SupernetState {
  using T = typename Model::scalar_type;
  Model model;
  std::vector<Tensor<T>> weight_momentum;  // aligned with model.weight_params()
  std::int64_t step = 0;                   // completed (arch, weight) pairs
  int epoch = 0;                           // completed epochs
  std::int64_t total_steps = 0;            // cosine horizon, 0 = constant lr0
  std::int64_t steps_per_epoch = 1;        // for the zero-one ramp

  explicit SupernetState(Model m) : model(std::move(m)) {}

  double current_lr(const SearchConfig& c) const {
    return cosine_lr(std::min(step, total_steps), total_steps, c.lr0, c.lr_min);
  }
  double current_w01(const SearchConfig& c) const {
    if (c.w01_ramp_epochs == 0) return c.w01;
    const double ramp = static_cast<double>(c.w01_ramp_epochs) * static_cast<double>(std::max<std::int64_t>(steps_per_epoch, 1));
    return c.w01 * std::min(1.0, static_cast<double>(step) / ramp);
  }
};

struct StepLosses {
  double barlow = 0.0;
  double zero_one = 0.0;
  double total = 0.0;
  double lr = 0.0;
};

namespace detail {
template <class T>
void set_trainable(std::vector<Var<T>>& ps, bool on) {
  for (auto& p : ps) {
    p.set_requires_grad(on);
    p.zero_grad();
  }
}

template <class T>
Var<T> twin_barlow(auto& model, const TwinBatch& batch, ForwardMode mode, double lambda) {
  const Var<T> za = model.forward(batch.view_a.template cast<T>(), mode);
  const Var<T> zb = model.forward(batch.view_b.template cast<T>(), mode);
  return losses::barlow_twins_loss(losses::cross_correlation(za, zb), static_cast<T>(lambda));
}

inline void check_divergence(double loss, double barlow, double limit, std::int64_t step) {
  if (!std::isfinite(loss) || !std::isfinite(barlow) || barlow > limit) {
    std::ostringstream os;
    os << "search diverged at step " << step << ": loss " << loss << ", barlow twins " << barlow;
    throw DivergenceError(step, os.str());
  }
}

template <class T>
struct FlagGuard {
  std::vector<Var<T>>& ps;
  ~FlagGuard() { set_trainable(ps, true); }
};
}  // namespace detail

/// One update of α on ℓ_BT(val views) + w01·ℓ01(α). ω is held constant and
/// batch-norm running statistics are not touched.
template <SearchModel Model>
StepLosses arch_step(SupernetState<Model>& state, const TwinBatch& val_batch, const SearchConfig& config) {
  using T = typename Model::scalar_type;
  auto omega = state.model.weight_params();
  auto alpha = state.model.arch_params();
  detail::set_trainable(omega, false);
  detail::set_trainable(alpha, true);
  detail::FlagGuard<T> guard{omega};

  const double w01 = state.current_w01(config);
  const Var<T> bt = detail::twin_barlow<T>(state.model, val_batch, ForwardMode::train_frozen_stats, config.lambda_bt);
  const Var<T> zo = losses::zero_one_loss(alpha);
  const Var<T> total = losses::total_arch_loss(bt, zo, static_cast<T>(w01));
  StepLosses out{static_cast<double>(bt.value()[0]), static_cast<double>(zo.value()[0]),
                 static_cast<double>(total.value()[0]), config.arch_lr};
  detail::check_divergence(out.total, out.barlow, config.divergence_threshold, state.step);

  backward(total);
  const T lr = static_cast<T>(config.arch_lr);
  const T decay = static_cast<T>(config.arch_lr * config.arch_weight_decay);
  for (auto& a : alpha) {
    if (!a.has_grad()) continue;
    auto w = a.mutable_value().values();
    const auto g = a.grad().values();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = w[i] - lr * g[i] - decay * w[i];
  }
  return out;
}

/// One SGD step on ω (momentum, coupled weight decay, global-norm clipping)
/// at the current cosine learning rate. α is held constant.
template <SearchModel Model>
StepLosses weight_step(SupernetState<Model>& state, const TwinBatch& train_batch, const SearchConfig& config) {
  using T = typename Model::scalar_type;
  auto omega = state.model.weight_params();
  auto alpha = state.model.arch_params();
  detail::set_trainable(alpha, false);
  detail::set_trainable(omega, true);
  struct AlphaGuard {
    std::vector<Var<T>>& ps;
    ~AlphaGuard() {
      for (auto& p : ps) p.set_requires_grad(true);
    }
  } guard{alpha};

  const double lr = state.current_lr(config);
  const Var<T> bt = detail::twin_barlow<T>(state.model, train_batch, ForwardMode::train, config.lambda_bt);
  StepLosses out{static_cast<double>(bt.value()[0]), 0.0, static_cast<double>(bt.value()[0]), lr};
  detail::check_divergence(out.total, out.barlow, config.divergence_threshold, state.step);

  backward(bt);
  sgd_step(omega, state.weight_momentum, {lr, config.momentum, config.weight_decay, config.grad_clip});
  detail::set_trainable(omega, true);
  return out;
}

// ---------------------------------------------------------------------------
// History
// ---------------------------------------------------------------------------

struct StepRecord {
  std::int64_t step = 0;
  double loss_train = 0, loss_val = 0, loss_zero_one = 0, lr = 0, seconds = 0;
};

struct SigmaHistogram {
  int epoch = 0;                     // 0 = before training
  std::array<std::size_t, 10> bins{};  // [0, 0.1), ..., [0.9, 1.0]
  double mid_fraction = 0;           // share of σ(α) in [0.4, 0.6]
};

struct SearchHistory {
  std::vector<StepRecord> steps;
  std::vector<SigmaHistogram> sigma;

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "step,loss_train,loss_val,loss_zero_one,lr,seconds\n";
    for (const auto& r : steps)
      os << r.step << ',' << r.loss_train << ',' << r.loss_val << ',' << r.loss_zero_one << ',' << r.lr << ','
         << r.seconds << '\n';
    return os.str();
  }

  nlohmann::json sigma_json() const {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& h : sigma) a.push_back({{"epoch", h.epoch}, {"bins", h.bins}, {"mid_fraction", h.mid_fraction}});
    return a;
  }
};

template <class T>
SigmaHistogram sigma_histogram(const std::vector<Var<T>>& alphas, int epoch) {
  SigmaHistogram h;
  h.epoch = epoch;
  std::size_t n = 0, mid = 0;
  for (const auto& a : alphas)
    for (T v : a.value().values()) {
      const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(v)));
      h.bins[std::min<std::size_t>(9, static_cast<std::size_t>(s * 10.0))]++;
      if (s >= 0.4 && s <= 0.6) ++mid;
      ++n;
    }
  h.mid_fraction = n ? static_cast<double>(mid) / static_cast<double>(n) : 0.0;
  return h;
}

/// Divergence during run_search; carries the history recorded so far.
class SearchDivergedError : public DivergenceError {
 public:
  SearchDivergedError(const DivergenceError& e, SearchHistory partial)
      : DivergenceError(e.step, e.what()), history(std::move(partial)) {}
  SearchHistory history;
};

template <class T>
struct SearchResult {
  Genotype genotype;
  SupernetState<Supernet<T>> state;
  SearchHistory history;
};

template <class T>
using CheckpointFn = std::function<void(int epoch, SupernetState<Supernet<T>>&, const SearchHistory&)>;

/// Full search on unlabeled images (N x C x H x W). Each epoch walks a fresh
/// permutation of the training split in ⌊N_train/batch⌋ batches; the
/// validation split is cycled alongside.
template <class T = float>
SearchResult<T> run_search(const Tensor<float>& images, const SupernetConfig& net_cfg, const SearchConfig& config,
                           const CheckpointFn<T>& on_checkpoint = {}) {
  config.validate();
  if (images.rank() != 4 || images.dim(0) == 0) throw DataError("run_search: empty image set");
  const auto split = split_unlabeled(images, config.val_fraction, config.seed);
  const auto bs = static_cast<std::size_t>(config.batch_size);
  const std::size_t steps_per_epoch = split.train.size() / bs;
  if (steps_per_epoch == 0 || split.val.size() < 2)
    throw DataError("run_search: " + std::to_string(split.train.size()) + " training images cannot fill a batch of " +
                    std::to_string(bs));

  SupernetState<Supernet<T>> state{Supernet<T>(net_cfg)};
  state.steps_per_epoch = static_cast<std::int64_t>(steps_per_epoch);
  state.total_steps = static_cast<std::int64_t>(steps_per_epoch) * config.epochs;
  SearchHistory history;
  history.sigma.push_back(sigma_histogram(state.model.arch_params(), 0));

  const auto t0 = std::chrono::steady_clock::now();
  std::size_t val_cursor = 0;
  std::vector<std::size_t> val_order = split.val;
  try {
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      std::vector<std::size_t> order = split.train;
      Rng(derive_seed(config.seed, "train_order", epoch)).shuffle(order);
      if (epoch == 0) Rng(derive_seed(config.seed, "val_order", 0)).shuffle(val_order);
      for (std::size_t b = 0; b < steps_per_epoch; ++b) {
        std::vector<std::size_t> tr(order.begin() + static_cast<std::ptrdiff_t>(b * bs),
                                    order.begin() + static_cast<std::ptrdiff_t>((b + 1) * bs));
        std::vector<std::size_t> va;
        for (std::size_t i = 0; i < bs; ++i) {
          if (val_cursor == val_order.size()) {
            val_cursor = 0;
            Rng(derive_seed(config.seed, "val_order", state.step + 1)).shuffle(val_order);
          }
          va.push_back(val_order[val_cursor++]);
        }
        const auto vb = make_twin_views(gather_rows<float>(images, va), config.augmentation,
                                        derive_seed(config.seed, "twin_val", state.step), va);
        const auto tb = make_twin_views(gather_rows<float>(images, tr), config.augmentation,
                                        derive_seed(config.seed, "twin_train", state.step), tr);
        const StepLosses a = arch_step(state, vb, config);
        const StepLosses w = weight_step(state, tb, config);
        ++state.step;
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        history.steps.push_back({state.step, w.barlow, a.barlow, a.zero_one, w.lr, secs});
      }
      ++state.epoch;
      history.sigma.push_back(sigma_histogram(state.model.arch_params(), state.epoch));
      if (on_checkpoint && config.checkpoint_every > 0 && state.epoch % config.checkpoint_every == 0)
        on_checkpoint(state.epoch, state, history);
    }
  } catch (const DivergenceError& e) {
    throw SearchDivergedError(e, std::move(history));
  }
  Genotype g = derive_genotype(state.model.arch(), config.derive_mode, config.threshold);
  return {std::move(g), std::move(state), std::move(history)};
}

}  // namespace ssnas
