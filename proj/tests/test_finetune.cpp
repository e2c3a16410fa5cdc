// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstring>

#include "oracles.hpp"
#include "test_support.hpp"

namespace ssnas {
namespace {

SupernetConfig small_net() {
  SupernetConfig c;
  c.num_cells = 3;
  c.nodes_per_cell = 2;
  c.init_channels = 8;
  c.input_side = 8;
  c.embed_dim = 16;
  c.seed = 2;
  return c;
}

template <class T>
Network<T> headed(const SupernetConfig& cfg, Index L, std::uint64_t seed = 1) {
  Network<T> net(cfg, oracle::random_genotype(cfg, seed));
  attach_head(net, L, head_seed(seed));
  return net;
}

FinetuneConfig quick(LossMode m, int epochs = 3) {
  FinetuneConfig c;
  c.epochs = epochs;
  c.loss_mode = m;
  c.batch_size = 16;
  c.lr0 = 0.05;
  c.seed = 4;
  return c;
}

template <class T>
NamedTensors weights_of(Network<T>& n) {
  return collect_state<T>(n);
}

TEST(AttachHead, AddsAffineParametersOnly) {
  const auto cfg = small_net();
  const auto g = oracle::random_genotype(cfg, 3);
  Network<double> net(cfg, g);
  const Index trunk = count_parameters(net);
  EXPECT_EQ(trunk, oracle::network_params(cfg, g));
  const auto x = testing::random_tensor({3, 3, 8, 8}, 1);
  const auto before = net.embed(x, ForwardMode::eval).value();
  attach_head(net, 7, 9);
  EXPECT_EQ(count_parameters(net), trunk + cfg.embed_dim * 7 + 7);
  EXPECT_EQ(count_parameters(net), oracle::network_params(cfg, g, 7));
  const auto after = net.embed(x, ForwardMode::eval).value();
  EXPECT_EQ(std::memcmp(before.data(), after.data(), sizeof(double) * static_cast<std::size_t>(before.numel())), 0);
  EXPECT_EQ(net.forward(x, ForwardMode::eval).shape(), (Shape{3, 7}));
  for (const auto& p : net.params()) EXPECT_TRUE(p.requires_grad());
  EXPECT_THROW(attach_head(net, 3, 1), StructuralError);
  Network<double> bare(cfg, g);
  EXPECT_THROW(attach_head(bare, 1, 1), ParameterError);
  replace_head(net, 2, 1);
  EXPECT_EQ(net.head().weight.shape(), (Shape{2, cfg.embed_dim}));
}

TEST(Finetune, CrossEntropyLearnsSeparableBalancedSet) {
  const auto cfg = small_net();
  const auto ds = synth_imbalanced_dataset(10, 30, 8, 1.0, 11);
  auto c = quick(LossMode::CE, 40);
  c.patience = 10;
  auto r = finetune(headed<float>(cfg, 10), ds, c);
  ASSERT_FALSE(r.history.epochs.empty());
  EXPECT_GT(r.history.epochs.back().train_accuracy, 90.0);
  EXPECT_GT(evaluate(r.network, ds).accuracy, 90.0);
  EXPECT_LE(static_cast<int>(r.history.epochs.size()), c.epochs);
}

TEST(Finetune, FocalAdjustedAtZeroIsCrossEntropyBitwise) {
  const auto cfg = small_net();
  const auto ds = synth_imbalanced_dataset(4, 20, 8, 5.0, 2);
  for (std::uint64_t s = 1; s <= 3; ++s) {
    auto ce = quick(LossMode::CE);
    ce.seed = s;
    auto fl = ce;
    fl.loss_mode = LossMode::FL_LA;
    fl.tau = 0.0;
    fl.focal.gamma = 0.0;
    const auto net = headed<double>(cfg, 4, s);
    const auto ga = first_step_gradients(net.clone(), ds, ce);
    const auto gb = first_step_gradients(net.clone(), ds, fl);
    ASSERT_EQ(ga.size(), gb.size());
    for (std::size_t k = 0; k < ga.size(); ++k)
      EXPECT_EQ(std::memcmp(ga[k].data(), gb[k].data(), sizeof(double) * static_cast<std::size_t>(ga[k].numel())), 0);
  }
}

TEST(Finetune, DeterministicGivenSeed) {
  const auto cfg = small_net();
  const auto ds = synth_imbalanced_dataset(4, 20, 8, 5.0, 2);
  auto a = finetune(headed<float>(cfg, 4), ds, quick(LossMode::FL_LA));
  auto b = finetune(headed<float>(cfg, 4), ds, quick(LossMode::FL_LA));
  EXPECT_EQ(weights_of(a.network), weights_of(b.network));
  EXPECT_EQ(a.history.data_checksum, b.history.data_checksum);
  EXPECT_EQ(a.history.to_csv().substr(0, 40), b.history.to_csv().substr(0, 40));
}

TEST(Finetune, EarlyStopAfterPatience) {
  const auto cfg = small_net();
  const auto ds = synth_imbalanced_dataset(4, 10, 8, 1.0, 2);
  auto c = quick(LossMode::CE, 30);
  c.patience = 2;
  c.min_delta = 1e9;
  const auto r = finetune(headed<float>(cfg, 4), ds, c);
  EXPECT_EQ(r.history.epochs.size(), 3u);
  EXPECT_TRUE(r.history.stopped_early);
  c.epochs = 2;
  const auto r2 = finetune(headed<float>(cfg, 4), ds, c);
  EXPECT_EQ(r2.history.epochs.size(), 2u);
  EXPECT_FALSE(r2.history.stopped_early);
}

TEST(Finetune, PriorsFromTrainingFrequencies) {
  const auto cfg = small_net();
  const auto ds = synth_imbalanced_dataset(3, 20, 8, 4.0, 2);
  const auto r = finetune(headed<float>(cfg, 3), ds, quick(LossMode::CE_LA, 1));
  const auto counts = ds.class_counts();
  for (std::size_t y = 0; y < 3; ++y)
    EXPECT_DOUBLE_EQ(r.history.priors.pi[y], static_cast<double>(counts[y]) / static_cast<double>(ds.size()));
}

TEST(Finetune, Errors) {
  const auto cfg = small_net();
  const auto ds = synth_imbalanced_dataset(3, 5, 8, 1.0, 2);
  std::vector<int> labels(ds.size(), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 2);
  const Dataset missing(ds.images(), labels, 3);
  EXPECT_THROW(finetune(headed<float>(cfg, 3), missing, quick(LossMode::FL_LA)), PriorError);
  EXPECT_THROW(finetune(headed<float>(cfg, 4), ds, quick(LossMode::CE)), StructuralError);
  EXPECT_THROW(finetune(Network<float>(cfg, oracle::random_genotype(cfg, 1)), ds, quick(LossMode::CE)),
               StructuralError);
  auto bad = quick(LossMode::CE);
  bad.epochs = 0;
  EXPECT_THROW(finetune(headed<float>(cfg, 3), ds, bad), ParameterError);
  EXPECT_THROW(loss_mode_from_name("LA"), ParameterError);
  auto poisoned = headed<float>(cfg, 3);
  poisoned.head().bias.mutable_value()[0] = NAN;
  EXPECT_THROW(finetune(std::move(poisoned), ds, quick(LossMode::CE)), DivergenceError);
}

TEST(FinetuneConfig, JsonRoundTrip) {
  FinetuneConfig c;
  c.loss_mode = LossMode::CE_LA;
  c.focal.gamma = 1.5;
  c.focal.alpha_t = {0.5, 1.0};
  c.tau = 0.5;
  const auto j = to_json(c);
  EXPECT_EQ(to_json(finetune_config_from_json(j)), j);
  for (LossMode m : kAllLossModes) EXPECT_EQ(loss_mode_from_name(loss_mode_name(m)), m);
}

TEST(Metrics, PerfectPredictor) {
  const std::vector<int> y{0, 1, 2, 2, 1, 0, 2};
  const auto m = metrics_from_predictions(y, y, 3, 10);
  EXPECT_EQ(m.top1_error, 0.0);
  EXPECT_EQ(m.accuracy, 100.0);
  for (double r : m.per_class_recall) EXPECT_EQ(r, 1.0);
}

TEST(Metrics, ConstantPredictorOnEqualCounts) {
  std::vector<int> y;
  for (int c = 0; c < 10; ++c)
    for (int k = 0; k < 7; ++k) y.push_back(c);
  const std::vector<int> p(y.size(), 3);
  const auto m = metrics_from_predictions(p, y, 10, 0);
  EXPECT_DOUBLE_EQ(m.accuracy, 10.0);
  EXPECT_DOUBLE_EQ(m.accuracy, 100.0 - m.top1_error);
  for (std::size_t c = 0; c < 10; ++c) EXPECT_EQ(m.per_class_recall[c], c == 3 ? 1.0 : 0.0);
}

TEST(Metrics, ConfusionRowsSumToClassCounts) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(s);
    const std::size_t L = 2 + s % 7;
    std::vector<int> y(200), p(200);
    std::vector<std::size_t> count(L, 0);
    for (std::size_t i = 0; i < 200; ++i) {
      y[i] = static_cast<int>(rng.below(L));
      p[i] = static_cast<int>(rng.below(L));
      ++count[static_cast<std::size_t>(y[i])];
    }
    const auto m = metrics_from_predictions(p, y, L, 0);
    std::size_t diag = 0;
    for (std::size_t c = 0; c < L; ++c) {
      std::size_t row = 0;
      for (auto v : m.confusion[c]) row += v;
      EXPECT_EQ(row, count[c]);
      diag += m.confusion[c][c];
      if (count[c] == 0) {
        EXPECT_TRUE(std::isnan(m.per_class_recall[c]));
      }
    }
    EXPECT_DOUBLE_EQ(m.accuracy, 100.0 * static_cast<double>(diag) / 200.0);
  }
}

TEST(Metrics, ErrorsAndJson) {
  const std::vector<int> y{0, 1}, p{0, 5};
  EXPECT_THROW(metrics_from_predictions(p, y, 2, 0), DataError);
  EXPECT_THROW(metrics_from_predictions(std::vector<int>{}, std::vector<int>{}, 2, 0), DataError);
  EXPECT_THROW(metrics_from_predictions(std::vector<int>{0}, y, 2, 0), DataError);
  const auto m = metrics_from_predictions(std::vector<int>{0, 0}, std::vector<int>{0, 0}, 2, 42);
  const auto j = to_json(m);
  EXPECT_TRUE(j.at("per_class_recall")[1].is_null());
  const auto back = metrics_from_json(j);
  EXPECT_EQ(back.param_count, 42);
  EXPECT_TRUE(std::isnan(back.per_class_recall[1]));
  EXPECT_EQ(confusion_csv(m), "true\\pred,0,1\n0,2,0\n1,0,0\n");
}

TEST(Evaluate, PureAndDeterministic) {
  const auto cfg = small_net();
  const auto ds = synth_imbalanced_dataset(4, 6, 8, 1.0, 2);
  auto net = headed<float>(cfg, 4);
  const auto before = weights_of(net);
  const auto a = evaluate(net, ds), b = evaluate(net, ds);
  EXPECT_EQ(a.confusion, b.confusion);
  EXPECT_EQ(weights_of(net), before);
  EXPECT_EQ(a.param_count, oracle::network_params(cfg, net.genotype(), 4));
  Network<float> bare(cfg, net.genotype());
  EXPECT_THROW(evaluate(bare, ds), StructuralError);
  const auto other = synth_imbalanced_dataset(3, 6, 8, 1.0, 2);
  EXPECT_THROW(evaluate(net, other), DataError);
}

TEST(Transfer, NewClassCountAndResizedInput) {
  const auto cfg = small_net();
  auto src = headed<float>(cfg, 10);
  const auto weights = weights_of(src);
  const auto tr = synth_imbalanced_dataset(2, 12, 12, 1.0, 5, 1);
  const auto te = synth_imbalanced_dataset(2, 4, 12, 1.0, 6, 1);
  auto r = transfer<float>(cfg, src.genotype(), weights, tr, te, quick(LossMode::CE, 2));
  EXPECT_EQ(r.network.head().weight.shape(), (Shape{2, cfg.embed_dim}));
  EXPECT_TRUE(std::isfinite(r.metrics.top1_error));
  EXPECT_EQ(r.metrics.per_class_recall.size(), 2u);
  EXPECT_EQ(r.metrics.param_count, oracle::network_params(cfg, src.genotype(), 2));
  // trunk tensors start from the archive, not from a fresh initialisation
  auto fresh = network_from_archive<float>(cfg, src.genotype(), weights);
  EXPECT_EQ(collect_state<float>(fresh).size() + 2, weights.size());
  Network<float> other(cfg, oracle::random_genotype(cfg, 99, 1));
  EXPECT_THROW(network_from_archive<float>(cfg, other.genotype(), weights), StructuralError);
}

TEST(Ablation, ControlledVariableAcrossLossModes) {
  const auto cfg = small_net();
  Network<float> trunk(cfg, oracle::random_genotype(cfg, 1));
  const auto weights = weights_of(trunk);
  const auto tr = synth_imbalanced_dataset(4, 20, 8, 5.0, 2);
  const auto te = synth_imbalanced_dataset(4, 5, 8, 1.0, 3);
  const auto res = run_ablation<float>(cfg, trunk.genotype(), weights, tr, te, quick(LossMode::CE, 2), {7, 8});
  ASSERT_EQ(res.cells.size(), 8u);
  for (const auto& c : res.cells) ASSERT_TRUE(c.ok) << c.error;
  for (std::size_t k = 0; k < 8; ++k)
    EXPECT_EQ(res.cells[k].data_checksum, res.cells[k % 2].data_checksum);
  EXPECT_NE(res.cells[0].data_checksum, res.cells[1].data_checksum);

  const auto md = res.to_markdown();
  EXPECT_EQ(md.rfind("| Method | Error |\n|---|---|\n| CE | ", 0), 0u);
  EXPECT_NE(md.find("| CE + Logit adj. | "), std::string::npos);
  EXPECT_NE(md.find("| FL | "), std::string::npos);
  EXPECT_NE(md.find("| FL + Logit adj. | "), std::string::npos);
  EXPECT_EQ(res.to_json().at("rows").size(), 4u);

  // step-1 weight gradients differ between modes on imbalanced data
  Network<double> net(cfg, trunk.genotype());
  attach_head(net, 4, 3);
  const auto g_ce = first_step_gradients(net.clone(), tr, quick(LossMode::CE));
  for (LossMode m : {LossMode::CE_LA, LossMode::FL, LossMode::FL_LA}) {
    const auto g = first_step_gradients(net.clone(), tr, quick(m));
    const auto a = g.back().values(), b = g_ce.back().values();
    EXPECT_FALSE(std::equal(a.begin(), a.end(), b.begin(), b.end())) << loss_mode_name(m);
  }
}

TEST(Ablation, FailedCellsAreRecorded) {
  const auto cfg = small_net();
  Network<float> trunk(cfg, oracle::random_genotype(cfg, 1));
  const auto ds = synth_imbalanced_dataset(3, 5, 8, 1.0, 2);
  std::vector<int> labels(ds.size(), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 2);
  const Dataset missing(ds.images(), labels, 3);
  const auto res = run_ablation<float>(cfg, trunk.genotype(), weights_of(trunk), missing, ds,
                                       quick(LossMode::CE, 1), {1});
  ASSERT_EQ(res.cells.size(), 4u);
  EXPECT_FALSE(res.cells[0].ok);
  EXPECT_NE(res.cells[0].error.find("no training samples"), std::string::npos);
  EXPECT_NE(res.to_markdown().find("| CE | failed |"), std::string::npos);
}

TEST(Ablation, MedianHelpers) {
  EXPECT_EQ(AblationResult::median({3, 1, 2}), 2);
  EXPECT_EQ(AblationResult::median({4, 1, 2, 3}), 2.5);
  EXPECT_TRUE(std::isnan(AblationResult::median({})));
}

}  // namespace
}  // namespace ssnas
