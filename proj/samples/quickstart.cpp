// SPDX-License-Identifier: Apache-2.0
//
// End-to-end run on a small synthetic long-tailed set: self-supervised
// search, discretization with retained weights, FL+LA fine-tuning and
// evaluation.
#include <iostream>

#include <ssnas.hpp>

using namespace ssnas;

int main() {
  ExperimentConfig cfg = ExperimentConfig::desk();
  cfg.set_seed(1);
  cfg.search.epochs = 6;  // short run, sigma has not separated yet
  cfg.finetune.epochs = 15;

  const TrainTest data = load_datasets(cfg.dataset);
  std::cout << "train counts:";
  for (auto n : data.train.class_counts()) std::cout << ' ' << n;
  std::cout << "\n";

  // search sees images only
  auto search = run_search<float>(data.train.images(), cfg.supernet, cfg.search);
  std::cout << "search: " << search.history.steps.size() << " steps, sigma mid fraction "
            << search.history.sigma.front().mid_fraction << " -> " << search.history.sigma.back().mid_fraction << "\n";
  std::cout << "kept ops: " << search.genotype.normal.size() << " normal, " << search.genotype.reduce.size()
            << " reduce\n";

  Network<float> net = discretize_and_retain_weights(search.state.model, search.genotype);
  attach_head(net, static_cast<Index>(data.train.class_count()), head_seed(cfg.finetune.seed));
  auto tuned = finetune(std::move(net), data.train, cfg.finetune);
  const Metrics m = evaluate(tuned.network, data.test);

  RunReport report;
  report.method = "quickstart (FL+LA)";
  report.class_count = data.train.class_count();
  report.metrics = m;
  std::cout << consolidate_reports({report}).markdown;
  return 0;
}
