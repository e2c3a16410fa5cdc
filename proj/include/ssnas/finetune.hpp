// SPDX-License-Identifier: Apache-2.0
//
// Supervised fine-tuning of a discretized network with a classifier head,
// evaluation metrics, transfer to another dataset and the loss ablation.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "ssnas/checkpoint.hpp"
#include "ssnas/data.hpp"
#include "ssnas/losses.hpp"
#include "ssnas/optim.hpp"
#include "ssnas/search.hpp"

namespace ssnas {

enum class LossMode { CE, CE_LA, FL, FL_LA };

inline constexpr std::array<LossMode, 4> kAllLossModes = {LossMode::CE, LossMode::CE_LA, LossMode::FL,
                                                          LossMode::FL_LA};

inline std::string_view loss_mode_name(LossMode m) {
  switch (m) {
    case LossMode::CE: return "CE";
    case LossMode::CE_LA: return "CE+LA";
    case LossMode::FL: return "FL";
    case LossMode::FL_LA: return "FL+LA";
  }
  return "?";
}

/// Row labels of the ablation table.
inline std::string_view loss_mode_label(LossMode m) {
  switch (m) {
    case LossMode::CE: return "CE";
    case LossMode::CE_LA: return "CE + Logit adj.";
    case LossMode::FL: return "FL";
    case LossMode::FL_LA: return "FL + Logit adj.";
  }
  return "?";
}

inline LossMode loss_mode_from_name(std::string_view s) {
  for (LossMode m : kAllLossModes)
    if (loss_mode_name(m) == s) return m;
  throw ParameterError("unknown loss mode '" + std::string(s) + "' (expected CE, CE+LA, FL or FL+LA)");
}

struct FinetuneConfig {
  int epochs = 600;
  int patience = 20;  // epochs without min_delta improvement of the train loss
  double min_delta = 1e-4;
  LossMode loss_mode = LossMode::FL_LA;
  FocalParams focal{};
  double tau = 1.0;
  double lr0 = 0.025;
  double lr_min = 0.0;
  double momentum = 0.9;
  double weight_decay = 3e-4;
  double grad_clip = 5.0;
  Index batch_size = 32;
  AugmentationPolicy augmentation = AugmentationPolicy::light();
  bool reset_bn_stats = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw ParameterError("finetune: epochs must be >= 1");
    if (patience < 1) throw ParameterError("finetune: patience must be >= 1");
    if (min_delta < 0) throw ParameterError("finetune: min_delta must be >= 0");
    if (!(lr0 > 0)) throw ParameterError("finetune: lr0 must be > 0");
    if (lr_min < 0 || lr_min > lr0) throw ParameterError("finetune: lr_min must lie in [0, lr0]");
    if (momentum < 0 || momentum >= 1) throw ParameterError("finetune: momentum must lie in [0, 1)");
    if (weight_decay < 0) throw ParameterError("finetune: weight_decay must be >= 0");
    if (batch_size < 2) throw ParameterError("finetune: batch_size must be >= 2");
    if (!(tau >= 0)) throw ParameterError("finetune: tau must be >= 0");
    if (!std::isfinite(focal.gamma) || focal.gamma < 0) throw ParameterError("finetune: gamma must be >= 0");
    augmentation.validate();
  }
};

inline nlohmann::json to_json(const FinetuneConfig& c) {
  return {{"epochs", c.epochs},
          {"patience", c.patience},
          {"min_delta", c.min_delta},
          {"loss_mode", std::string(loss_mode_name(c.loss_mode))},
          {"gamma", c.focal.gamma},
          {"alpha_t", c.focal.alpha_t},
          {"tau", c.tau},
          {"lr0", c.lr0},
          {"lr_min", c.lr_min},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"grad_clip", c.grad_clip},
          {"batch_size", c.batch_size},
          {"augmentation", to_json(c.augmentation)},
          {"reset_bn_stats", c.reset_bn_stats},
          {"seed", c.seed}};
}

inline FinetuneConfig finetune_config_from_json(const nlohmann::json& j, FinetuneConfig c = {}) {
  detail::check_keys(j, to_json(c), "finetune");
  c.epochs = j.value("epochs", c.epochs);
  c.patience = j.value("patience", c.patience);
  c.min_delta = j.value("min_delta", c.min_delta);
  if (j.contains("loss_mode")) c.loss_mode = loss_mode_from_name(j.at("loss_mode").get<std::string>());
  c.focal.gamma = j.value("gamma", c.focal.gamma);
  if (j.contains("alpha_t")) {
    const auto& a = j.at("alpha_t");
    c.focal.alpha_t = a.is_array() ? a.get<std::vector<double>>() : std::vector<double>{a.get<double>()};
  }
  c.tau = j.value("tau", c.tau);
  c.lr0 = j.value("lr0", c.lr0);
  c.lr_min = j.value("lr_min", c.lr_min);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("augmentation")) c.augmentation = augmentation_from_json(j.at("augmentation"), c.augmentation);
  c.reset_bn_stats = j.value("reset_bn_stats", c.reset_bn_stats);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

/// Classification loss of one batch under the selected mode.
template <class T>
Var<T> classification_loss(const Var<T>& logits, std::span<const int> labels, LossMode mode, const FocalParams& focal,
                           const ImbalancePriors& priors) {
  switch (mode) {
    case LossMode::CE: return losses::cross_entropy(logits, labels);
    case LossMode::CE_LA: return losses::logit_adjusted_ce(logits, labels, priors);
    case LossMode::FL: return losses::focal_loss(logits, labels, focal);
    case LossMode::FL_LA: return losses::focal_logit_adjusted(logits, labels, priors, focal);
  }
  throw ParameterError("unknown loss mode");
}

struct EpochRecord {
  int epoch = 0;
  double loss = 0;
  double train_accuracy = 0;  // %, on the augmented batches
  double lr = 0;
  double seconds = 0;
};

struct FinetuneHistory {
  std::vector<EpochRecord> epochs;
  std::uint64_t data_checksum = 0;  // over every (augmented batch, labels) fed to the model
  bool stopped_early = false;
  ImbalancePriors priors;

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "epoch,loss,train_accuracy,lr,seconds\n";
    for (const auto& e : epochs)
      os << e.epoch << ',' << e.loss << ',' << e.train_accuracy << ',' << e.lr << ',' << e.seconds << '\n';
    return os.str();
  }
};

template <class T>
struct FinetuneResult {
  Network<T> network;
  FinetuneHistory history;
};

namespace detail {
/// Fixed batch plan of one epoch: a seeded permutation cut into
/// ⌈N/batch⌉ batches, a trailing singleton folded into its predecessor.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t bs, std::uint64_t seed,
                                                           int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng(derive_seed(seed, "finetune_order", epoch)).shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += bs)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + bs)));
  if (out.size() > 1 && out.back().size() < 2) {
    out[out.size() - 2].push_back(out.back()[0]);
    out.pop_back();
  }
  return out;
}

inline std::size_t batches_per_epoch(std::size_t n, std::size_t bs) {
  const std::size_t b = (n + bs - 1) / bs;
  return (b > 1 && n % bs == 1) ? b - 1 : b;
}

template <class T>
std::vector<int> gather_labels(const std::vector<int>& labels, const std::vector<std::size_t>& idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(labels[i]);
  return out;
}
}  // namespace detail

/// Trains every parameter of `network` (trunk and head) on labelled data.
template <class T>
FinetuneResult<T> finetune(Network<T> network, const Dataset& train, const FinetuneConfig& config) {
  config.validate();
  if (!network.has_head()) throw StructuralError("finetune: network has no classifier head");
  if (train.size() < 2) throw DataError("finetune: need at least 2 training samples");
  if (static_cast<Index>(train.class_count()) != network.num_classes())
    throw StructuralError("finetune: head has " + std::to_string(network.num_classes()) + " outputs, dataset has " +
                          std::to_string(train.class_count()) + " classes");
  const auto& labels = train.labels();
  FinetuneHistory hist;
  hist.priors = ImbalancePriors::from_labels(labels, train.class_count(), config.tau);
  hist.priors.validate();
  config.focal.validate(network.num_classes());
  if (config.reset_bn_stats) network.reset_running_stats();

  const auto bs = static_cast<std::size_t>(config.batch_size);
  const std::size_t per_epoch = detail::batches_per_epoch(train.size(), bs);
  const auto total = static_cast<std::int64_t>(per_epoch) * config.epochs;
  auto params = network.params();
  std::vector<Tensor<T>> buffers;
  std::int64_t step = 0;
  double best = std::numeric_limits<double>::infinity();
  int stale = 0;
  std::uint64_t data_hash = 0xcbf29ce484222325ULL;
  const auto t0 = std::chrono::steady_clock::now();

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto batches = detail::epoch_batches(train.size(), bs, config.seed, epoch);
    double loss_sum = 0;
    std::size_t correct = 0, seen = 0;
    double lr = config.lr0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& idx = batches[b];
      const Tensor<float> x = augment_batch(gather_rows<float>(train.images(), idx), config.augmentation,
                                            derive_seed(config.seed, "finetune_augment", epoch, b));
      const std::vector<int> y = detail::gather_labels<T>(labels, idx);
      data_hash = checksum<float>(x.values(), data_hash);
      data_hash = checksum<int>(std::span<const int>(y), data_hash);

      lr = cosine_lr(std::min(step, total), total, config.lr0, config.lr_min);
      zero_grads(params);
      const auto diverged = [&](const std::string& why) {
        return DivergenceError(step, "finetune diverged at step " + std::to_string(step) + " (epoch " +
                                         std::to_string(epoch) + "): " + why);
      };
      const Var<T> logits = network.forward(x.template cast<T>(), ForwardMode::train);
      Var<T> loss;
      try {
        loss = classification_loss(logits, y, config.loss_mode, config.focal, hist.priors);
      } catch (const DivergenceError&) {
        throw;
      } catch (const NumericError& e) {
        throw diverged(e.what());
      }
      const double lv = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(lv)) throw diverged("non-finite loss");
      backward(loss);
      sgd_step(params, buffers, {lr, config.momentum, config.weight_decay, config.grad_clip});
      ++step;

      loss_sum += lv * static_cast<double>(idx.size());
      const auto& lz = logits.value();
      const Index L = lz.dim(1);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const T* row = lz.data() + static_cast<Index>(i) * L;
        if (std::max_element(row, row + L) - row == y[i]) ++correct;
      }
      seen += idx.size();
    }
    const double mean = loss_sum / static_cast<double>(seen);
    hist.epochs.push_back({epoch + 1, mean, 100.0 * static_cast<double>(correct) / static_cast<double>(seen), lr,
                           std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()});
    if (best - mean > config.min_delta) {
      best = mean;
      stale = 0;
    } else if (++stale >= config.patience) {
      hist.stopped_early = epoch + 1 < config.epochs;
      break;
    }
  }
  zero_grads(params);
  hist.data_checksum = data_hash;
  return {std::move(network), std::move(hist)};
}

/// Parameter gradients of the first fine-tuning batch (no update applied),
/// in network.params() order.
template <class T>
std::vector<Tensor<T>> first_step_gradients(Network<T> network, const Dataset& train, const FinetuneConfig& config) {
  config.validate();
  const auto& labels = train.labels();
  const auto priors = ImbalancePriors::from_labels(labels, train.class_count(), config.tau);
  if (config.reset_bn_stats) network.reset_running_stats();
  const auto idx = detail::epoch_batches(train.size(), static_cast<std::size_t>(config.batch_size), config.seed, 0)[0];
  const Tensor<float> x = augment_batch(gather_rows<float>(train.images(), idx), config.augmentation,
                                        derive_seed(config.seed, "finetune_augment", 0, std::size_t{0}));
  const std::vector<int> y = detail::gather_labels<T>(labels, idx);
  auto params = network.params();
  zero_grads(params);
  const Var<T> logits = network.forward(x.template cast<T>(), ForwardMode::train);
  backward(classification_loss(logits, y, config.loss_mode, config.focal, priors));
  std::vector<Tensor<T>> out;
  for (auto& p : params) out.push_back(p.has_grad() ? p.grad() : Tensor<T>(p.shape()));
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct Metrics {
  double top1_error = 0;  // %
  double accuracy = 0;    // %
  std::vector<double> per_class_recall;  // NaN for classes absent from the test set
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  Index param_count = 0;

  double smallest_class_recall(const std::vector<std::size_t>& train_counts) const {
    const auto it = std::min_element(train_counts.begin(), train_counts.end());
    return per_class_recall.at(static_cast<std::size_t>(it - train_counts.begin()));
  }
};

/// Metrics of a prediction vector against ground truth.
inline Metrics metrics_from_predictions(std::span<const int> predicted, std::span<const int> truth,
                                        std::size_t class_count, Index param_count) {
  if (predicted.size() != truth.size()) throw DataError("evaluate: prediction/label count mismatch");
  if (truth.empty()) throw DataError("evaluate: empty test set");
  Metrics m;
  m.param_count = param_count;
  m.confusion.assign(class_count, std::vector<std::size_t>(class_count, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int t = truth[i], p = predicted[i];
    if (t < 0 || static_cast<std::size_t>(t) >= class_count || p < 0 || static_cast<std::size_t>(p) >= class_count)
      throw DataError("evaluate: class id out of range at sample " + std::to_string(i));
    ++m.confusion[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
    if (t == p) ++correct;
  }
  for (std::size_t c = 0; c < class_count; ++c) {
    std::size_t row = 0;
    for (std::size_t v : m.confusion[c]) row += v;
    m.per_class_recall.push_back(row ? static_cast<double>(m.confusion[c][c]) / static_cast<double>(row)
                                     : std::numeric_limits<double>::quiet_NaN());
  }
  m.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(truth.size());
  m.top1_error = 100.0 - m.accuracy;
  return m;
}

/// Argmax predictions in evaluation mode; no graph is recorded.
template <class T>
std::vector<int> predict(Network<T>& model, const Tensor<float>& images, std::size_t chunk = 64) {
  auto params = model.params();
  std::vector<bool> flags;
  for (auto& p : params) {
    flags.push_back(p.requires_grad());
    p.set_requires_grad(false);
  }
  std::vector<int> out;
  const Index N = images.dim(0);
  try {
    for (Index s = 0; s < N; s += static_cast<Index>(chunk)) {
      const Index n = std::min<Index>(static_cast<Index>(chunk), N - s);
      const Var<T> z = model.forward(slice_rows(images, s, n).template cast<T>(), ForwardMode::eval);
      const Index L = z.shape()[1];
      for (Index i = 0; i < n; ++i) {
        const T* row = z.value().data() + i * L;
        out.push_back(static_cast<int>(std::max_element(row, row + L) - row));
      }
    }
  } catch (...) {
    for (std::size_t k = 0; k < params.size(); ++k) params[k].set_requires_grad(flags[k]);
    throw;
  }
  for (std::size_t k = 0; k < params.size(); ++k) params[k].set_requires_grad(flags[k]);
  return out;
}

template <class T>
Metrics evaluate(Network<T>& model, const Dataset& test) {
  if (!model.has_head()) throw StructuralError("evaluate: network has no classifier head");
  if (test.size() == 0) throw DataError("evaluate: empty test set");
  if (static_cast<Index>(test.class_count()) != model.num_classes())
    throw DataError("evaluate: test set has " + std::to_string(test.class_count()) + " classes, head has " +
                    std::to_string(model.num_classes()));
  const auto pred = predict(model, test.images());
  return metrics_from_predictions(pred, test.labels(), test.class_count(), count_parameters(model));
}

inline nlohmann::json to_json(const Metrics& m) {
  nlohmann::json recall = nlohmann::json::array();
  for (double r : m.per_class_recall) recall.push_back(std::isfinite(r) ? nlohmann::json(r) : nlohmann::json());
  return {{"top1_error", m.top1_error},
          {"accuracy", m.accuracy},
          {"per_class_recall", recall},
          {"param_count", m.param_count}};
}

inline Metrics metrics_from_json(const nlohmann::json& j) {
  Metrics m;
  m.top1_error = j.at("top1_error").get<double>();
  m.accuracy = j.at("accuracy").get<double>();
  for (const auto& r : j.at("per_class_recall"))
    m.per_class_recall.push_back(r.is_null() ? std::numeric_limits<double>::quiet_NaN() : r.get<double>());
  m.param_count = j.at("param_count").get<Index>();
  return m;
}

inline std::string confusion_csv(const Metrics& m) {
  std::ostringstream os;
  os << "true\\pred";
  for (std::size_t c = 0; c < m.confusion.size(); ++c) os << ',' << c;
  os << '\n';
  for (std::size_t r = 0; r < m.confusion.size(); ++r) {
    os << r;
    for (std::size_t v : m.confusion[r]) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Pipelines
// ---------------------------------------------------------------------------

inline std::uint64_t head_seed(std::uint64_t seed) { return derive_seed(seed, "head"); }

/// Network for `genotype` with every matching weight from `weights`; the
/// head (if any in the archive) is not loaded.
template <class T>
Network<T> network_from_archive(const SupernetConfig& cfg, const Genotype& genotype, const NamedTensors& weights) {
  Network<T> net(cfg, genotype);
  const std::size_t loaded = load_state<T>(net, weights, true);
  std::size_t expected = 0;
  StateVisitor<T> v;
  v.param = [&](const std::string&, Var<T>&) { ++expected; };
  v.buffer = [&](const std::string&, Tensor<T>&) { ++expected; };
  net.visit(v);
  if (loaded != expected)
    throw StructuralError("weight archive covers " + std::to_string(loaded) + " of " + std::to_string(expected) +
                          " network tensors; does it belong to this genotype?");
  return net;
}

template <class T>
struct TransferResult {
  Metrics metrics;
  FinetuneHistory history;
  Network<T> network;
};

/// Retained trunk + fresh head for the new class count, FL+LA fine-tuning,
/// evaluation. Images are conformed (bilinear resize, channel adaptation)
/// to the trunk's input geometry.
template <class T>
TransferResult<T> transfer(const SupernetConfig& cfg, const Genotype& genotype, const NamedTensors& weights,
                           const Dataset& new_train, const Dataset& new_test, FinetuneConfig config) {
  config.loss_mode = LossMode::FL_LA;
  Network<T> net = network_from_archive<T>(cfg, genotype, weights);
  replace_head(net, static_cast<Index>(new_train.class_count()), head_seed(config.seed));
  const Dataset tr = conform_dataset(new_train, cfg.input_channels, cfg.input_side);
  const Dataset te = conform_dataset(new_test, cfg.input_channels, cfg.input_side);
  auto r = finetune(std::move(net), tr, config);
  Metrics m = evaluate(r.network, te);
  return {std::move(m), std::move(r.history), std::move(r.network)};
}

struct AblationCell {
  LossMode mode = LossMode::CE;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  Metrics metrics;
  std::uint64_t data_checksum = 0;
};

struct AblationResult {
  std::vector<AblationCell> cells;  // mode-major
  std::vector<std::size_t> train_counts;

  std::vector<const AblationCell*> row(LossMode m) const {
    std::vector<const AblationCell*> out;
    for (const auto& c : cells)
      if (c.mode == m && c.ok) out.push_back(&c);
    return out;
  }

  static double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  }
  double median_error(LossMode m) const {
    std::vector<double> v;
    for (const auto* c : row(m)) v.push_back(c->metrics.top1_error);
    return median(v);
  }
  double median_smallest_recall(LossMode m) const {
    std::vector<double> v;
    for (const auto* c : row(m)) v.push_back(c->metrics.smallest_class_recall(train_counts));
    return median(v);
  }

  /// Method / Error table, one row per loss mode; failed rows say so.
  std::string to_markdown() const {
    std::ostringstream os;
    os << "| Method | Error |\n|---|---|\n";
    for (LossMode m : kAllLossModes) {
      os << "| " << loss_mode_label(m) << " | ";
      const double e = median_error(m);
      if (std::isfinite(e))
        os << std::fixed << std::setprecision(2) << e;
      else
        os << "failed";
      os << " |\n";
    }
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (LossMode m : kAllLossModes) {
      nlohmann::json runs = nlohmann::json::array();
      for (const auto& c : cells) {
        if (c.mode != m) continue;
        nlohmann::json r{{"seed", c.seed}, {"ok", c.ok}};
        if (c.ok) {
          r["metrics"] = ssnas::to_json(c.metrics);
          r["data_checksum"] = c.data_checksum;
        } else {
          r["error"] = c.error;
        }
        runs.push_back(std::move(r));
      }
      const double e = median_error(m), rec = median_smallest_recall(m);
      rows.push_back({{"method", std::string(loss_mode_label(m))},
                      {"median_error", std::isfinite(e) ? nlohmann::json(e) : nlohmann::json()},
                      {"median_smallest_class_recall", std::isfinite(rec) ? nlohmann::json(rec) : nlohmann::json()},
                      {"runs", runs}});
    }
    return {{"rows", rows}, {"train_counts", train_counts}};
  }
};

/// The four loss modes under identical seeds, data streams and initial
/// weights; one cell per (mode, seed). A failing cell is recorded, not fatal.
template <class T>
AblationResult run_ablation(const SupernetConfig& cfg, const Genotype& genotype, const NamedTensors& weights,
                            const Dataset& train, const Dataset& test, const FinetuneConfig& base,
                            const std::vector<std::uint64_t>& seeds) {
  AblationResult res;
  res.train_counts = train.class_counts();
  const Dataset tr = conform_dataset(train, cfg.input_channels, cfg.input_side);
  const Dataset te = conform_dataset(test, cfg.input_channels, cfg.input_side);
  for (LossMode m : kAllLossModes)
    for (std::uint64_t s : seeds) {
      AblationCell cell;
      cell.mode = m;
      cell.seed = s;
      try {
        FinetuneConfig c = base;
        c.loss_mode = m;
        c.seed = s;
        Network<T> net = network_from_archive<T>(cfg, genotype, weights);
        attach_head(net, static_cast<Index>(tr.class_count()), head_seed(s));
        auto r = finetune(std::move(net), tr, c);
        cell.metrics = evaluate(r.network, te);
        cell.data_checksum = r.history.data_checksum;
        cell.ok = true;
      } catch (const Error& e) {
        cell.error = e.what();
      }
      res.cells.push_back(std::move(cell));
    }
  return res;
}

}  // namespace ssnas
