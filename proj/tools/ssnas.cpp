// SPDX-License-Identifier: Apache-2.0
//
// ssnas command-line front end.
//
//   ssnas make-lt   --rho R --classes L --per-class N --seed S --out DIR
//   ssnas search    [--config F] [--seed S] [--epochs E] --out DIR
//   ssnas finetune  --from SEARCH_DIR [--config F] [--seed S] --out DIR
//   ssnas eval      --from FINETUNE_DIR [--out DIR]
//   ssnas transfer  --from SEARCH_DIR --to SPEC --out DIR
//   ssnas ablate    --from SEARCH_DIR [--seeds K] --out DIR
//   ssnas report    REPORT.json... --out DIR
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence.
#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <ssnas.hpp>

namespace fs = std::filesystem;
using namespace ssnas;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;

struct Common {
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::string from;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// desk defaults <- run directory's report <- --config <- flags.
ExperimentConfig resolve_config(const Common& c, bool from_has_config) {
  ExperimentConfig cfg = ExperimentConfig::desk();
  if (from_has_config && !c.from.empty() && fs::exists(fs::path(c.from) / "report.json"))
    cfg = experiment_config_from_json(read_json_file(fs::path(c.from) / "report.json"));
  if (!c.config_path.empty()) cfg = experiment_config_from_json(read_json_file(c.config_path));
  if (c.seed) cfg.set_seed(*c.seed);
  if (!c.out.empty()) cfg.out_dir = c.out;
  cfg.validate();
  return cfg;
}

void require_file(const fs::path& p) {
  if (!fs::exists(p)) throw DataError("missing " + p.string());
}

struct SearchArtifacts {
  Genotype genotype;
  NamedTensors weights;
};

SearchArtifacts load_search_dir(const fs::path& dir) {
  require_file(dir / "genotype.json");
  require_file(dir / "weights.bin");
  std::ifstream is(dir / "genotype.json");
  SearchArtifacts a;
  try {
    a.genotype = genotype_from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::exception& e) {
    throw DataError((dir / "genotype.json").string() + ": " + e.what());
  }
  a.weights = read_archive(dir / "weights.bin");
  return a;
}

void write_report(const fs::path& out, const RunReport& r) {
  write_text_file(out / "report.json", to_json(r).dump(2) + "\n");
  write_text_file(out / "report.md", report_markdown(r));
}

std::string method_label(const ExperimentConfig& cfg, const std::string& prefix) {
  return prefix + " (" + std::string(loss_mode_name(cfg.finetune.loss_mode)) + ")";
}

// ---------------------------------------------------------------------------

int cmd_make_lt(double rho, std::size_t classes, std::size_t per_class, std::uint64_t seed, const std::string& out) {
  const std::vector<std::size_t> counts(classes, per_class);
  const LongTailPlan plan = build_long_tail(counts, beta_for_rho(rho, classes));
  const ExperimentConfig desk = ExperimentConfig::desk();
  const Dataset balanced = synth_imbalanced_dataset(classes, per_class, desk.dataset.side, 1.0,
                                                    derive_seed(seed, "synthetic_train"), desk.dataset.channels,
                                                    desk.dataset.noise);
  const auto idx = select_for_plan(balanced, plan, derive_seed(seed, "long_tail"));
  nlohmann::json manifest{{"source", "synthetic"},
                          {"classes", classes},
                          {"per_class", per_class},
                          {"seed", seed},
                          {"count", idx.size()},
                          {"indices", idx}};
  const fs::path dir(out.empty() ? "." : out);
  write_text_file(dir / "lt_plan.json", to_json(plan).dump(2) + "\n");
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
  std::cout << "plan: rho " << plan.rho << ", counts";
  for (auto n : plan.lt_counts) std::cout << ' ' << n;
  std::cout << "\n";
  return kExitOk;
}

int cmd_search(const Common& c, int checkpoint_every) {
  ExperimentConfig cfg = resolve_config(c, false);
  if (c.epochs) cfg.search.epochs = *c.epochs;
  if (checkpoint_every >= 0) cfg.search.checkpoint_every = checkpoint_every;
  cfg.search.validate();
  const fs::path out(cfg.out_dir);
  fs::create_directories(out);
  const auto t0 = std::chrono::steady_clock::now();
  TrainTest data = load_datasets(cfg.dataset);
  const Tensor<float> images = conform_dataset(data.train, cfg.supernet.input_channels, cfg.supernet.input_side).images();

  RunReport rep;
  rep.command = "search";
  rep.method = "search";
  rep.config = to_json(cfg);
  const auto reads_before = label_read_counter().load();
  auto checkpoint = [&](int epoch, SupernetState<Supernet<float>>& st, const SearchHistory& h) {
    const fs::path dir = out / "checkpoints" / ("epoch_" + std::to_string(epoch));
    fs::create_directories(dir);
    write_archive(dir / "weights.bin", collect_supernet_state(st.model));
    write_text_file(dir / "genotype.json",
                    genotype_json_string(derive_genotype(st.model.arch(), cfg.search.derive_mode, cfg.search.threshold)));
    write_text_file(dir / "history.csv", h.to_csv());
  };
  try {
    auto res = run_search<float>(images, cfg.supernet, cfg.search, checkpoint);
    const auto label_reads = label_read_counter().load() - reads_before;
    write_text_file(out / "genotype.json", genotype_json_string(res.genotype));
    write_archive(out / "weights.bin", collect_supernet_state(res.state.model));
    write_text_file(out / "history.csv", res.history.to_csv());
    rep.genotype = res.genotype;
    rep.param_count = count_parameters(res.state.model);
    rep.histories = {{"steps", res.history.steps.size()}, {"sigma", res.history.sigma_json()}};
    rep.extra = {{"label_reads_during_search", label_reads}};
    rep.wall_seconds = seconds_since(t0);
    write_report(out, rep);
    std::cout << "search: " << res.history.steps.size() << " steps, genotype written to " << (out / "genotype.json")
              << "\n";
    return kExitOk;
  } catch (const SearchDivergedError& e) {
    write_text_file(out / "history.csv", e.history.to_csv());
    rep.status = "diverged";
    rep.notes.push_back(e.what());
    rep.histories = {{"steps", e.history.steps.size()}, {"sigma", e.history.sigma_json()}};
    rep.wall_seconds = seconds_since(t0);
    write_report(out, rep);
    throw;
  }
}

int cmd_finetune(const Common& c, const std::string& loss_mode) {
  ExperimentConfig cfg = resolve_config(c, true);
  if (c.epochs) cfg.finetune.epochs = *c.epochs;
  if (!loss_mode.empty()) cfg.finetune.loss_mode = loss_mode_from_name(loss_mode);
  cfg.finetune.validate();
  const fs::path out(cfg.out_dir);
  if (fs::exists(out) && fs::exists(c.from) && fs::equivalent(out, c.from))
    throw ParameterError("finetune: --out must differ from --from");
  const auto art = load_search_dir(c.from);
  const auto t0 = std::chrono::steady_clock::now();
  TrainTest data = load_datasets(cfg.dataset);
  const Dataset tr = conform_dataset(data.train, cfg.supernet.input_channels, cfg.supernet.input_side);
  const Dataset te = conform_dataset(data.test, cfg.supernet.input_channels, cfg.supernet.input_side);

  Network<float> net = network_from_archive<float>(cfg.supernet, art.genotype, art.weights);
  attach_head(net, static_cast<Index>(tr.class_count()), head_seed(cfg.finetune.seed));
  auto res = finetune(std::move(net), tr, cfg.finetune);
  const Metrics m = evaluate(res.network, te);

  fs::create_directories(out);
  write_text_file(out / "genotype.json", genotype_json_string(art.genotype));
  write_archive(out / "weights.bin", collect_state<float>(res.network));
  write_text_file(out / "history.csv", res.history.to_csv());
  write_text_file(out / "metrics.json", to_json(m).dump(2) + "\n");
  write_text_file(out / "confusion.csv", confusion_csv(m));
  RunReport rep;
  rep.command = "finetune";
  rep.method = method_label(cfg, "ssnas");
  rep.config = to_json(cfg);
  rep.genotype = art.genotype;
  rep.param_count = m.param_count;
  rep.metrics = m;
  rep.class_count = tr.class_count();
  rep.histories = {{"epochs", res.history.epochs.size()},
                   {"stopped_early", res.history.stopped_early},
                   {"data_checksum", res.history.data_checksum}};
  rep.notes.push_back("batch-norm running statistics reset before fine-tuning");
  rep.notes.push_back("priors from the training split: " + nlohmann::json(res.history.priors.pi).dump());
  rep.wall_seconds = seconds_since(t0);
  write_report(out, rep);
  std::cout << "finetune: error " << fmt2(m.top1_error) << "%, accuracy " << fmt2(m.accuracy) << "%, params "
            << format_millions(m.param_count) << "M\n";
  return kExitOk;
}

int cmd_eval(const Common& c) {
  const fs::path from(c.from);
  require_file(from / "report.json");
  const auto art = load_search_dir(from);
  ExperimentConfig cfg = resolve_config(c, true);
  const auto t0 = std::chrono::steady_clock::now();
  const auto it = art.weights.find("head.weight");
  if (it == art.weights.end()) throw DataError("eval: " + (from / "weights.bin").string() + " has no classifier head");
  Network<float> net(cfg.supernet, art.genotype);
  attach_head(net, it->second.dim(0), 0);
  load_state<float>(net, art.weights);
  TrainTest data = load_datasets(cfg.dataset);
  const Dataset te = conform_dataset(data.test, cfg.supernet.input_channels, cfg.supernet.input_side);
  const Metrics m = evaluate(net, te);

  const fs::path out = c.out.empty() ? from / "eval" : fs::path(c.out);
  fs::create_directories(out);
  write_text_file(out / "metrics.json", to_json(m).dump(2) + "\n");
  write_text_file(out / "confusion.csv", confusion_csv(m));
  RunReport rep;
  rep.command = "eval";
  rep.method = method_label(cfg, "ssnas");
  rep.config = to_json(cfg);
  rep.genotype = art.genotype;
  rep.param_count = m.param_count;
  rep.metrics = m;
  rep.class_count = te.class_count();
  rep.wall_seconds = seconds_since(t0);
  write_report(out, rep);
  std::cout << "eval: error " << fmt2(m.top1_error) << "%, accuracy " << fmt2(m.accuracy) << "%\n";
  return kExitOk;
}

/// `synthetic:L:rho`, `directory:/path` or `cifar10:/dir`.
TrainTest resolve_target(const std::string& spec, const ExperimentConfig& cfg) {
  const auto colon = spec.find(':');
  const std::string kind = spec.substr(0, colon);
  const std::string rest = colon == std::string::npos ? "" : spec.substr(colon + 1);
  const std::uint64_t seed = derive_seed(cfg.dataset.seed, "transfer_data");
  if (kind == "synthetic") {
    std::size_t L = 2;
    double rho = 4.0;
    if (!rest.empty()) {
      const auto c2 = rest.find(':');
      try {
        L = static_cast<std::size_t>(std::stoul(rest.substr(0, c2)));
        if (c2 != std::string::npos) rho = std::stod(rest.substr(c2 + 1));
      } catch (const std::exception&) {
        throw ParameterError("transfer: cannot parse '" + spec + "' (expected synthetic:L:rho)");
      }
    }
    DatasetSpec d = cfg.dataset;
    d.source = DataSource::synthetic;
    d.classes = L;
    d.rho = rho;
    d.seed = seed;
    return load_datasets(d);
  }
  if (kind == "directory") {
    const fs::path dir(rest);
    if (!fs::is_directory(dir)) throw ParameterError("transfer: no such directory " + rest);
    if (fs::exists(dir / "train" / "labels.csv") && fs::exists(dir / "test" / "labels.csv"))
      return {load_directory_dataset(dir / "train"), load_directory_dataset(dir / "test"), std::nullopt};
    return stratified_split(load_directory_dataset(dir), 0.3, seed);
  }
  if (kind == "cifar10") {
    const fs::path dir(rest);
    std::vector<fs::path> tr;
    for (int i = 1; i <= 5; ++i)
      if (fs::exists(dir / ("data_batch_" + std::to_string(i) + ".bin")))
        tr.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    if (tr.empty() || !fs::exists(dir / "test_batch.bin"))
      throw ParameterError("transfer: " + rest + " holds no CIFAR-10 binary batches");
    return {ingest_cifar10_binary(tr), ingest_cifar10_binary({dir / "test_batch.bin"}), std::nullopt};
  }
  throw ParameterError("transfer: unknown target '" + spec + "' (synthetic:L:rho, directory:/path, cifar10:/dir)");
}

int cmd_transfer(const Common& c, const std::string& to) {
  ExperimentConfig cfg = resolve_config(c, true);
  if (c.epochs) cfg.finetune.epochs = *c.epochs;
  cfg.finetune.loss_mode = LossMode::FL_LA;
  const auto art = load_search_dir(c.from);
  const auto t0 = std::chrono::steady_clock::now();
  TrainTest target = resolve_target(to, cfg);
  auto res = transfer<float>(cfg.supernet, art.genotype, art.weights, target.train, target.test, cfg.finetune);
  const fs::path out(cfg.out_dir);
  fs::create_directories(out);
  write_text_file(out / "genotype.json", genotype_json_string(art.genotype));
  write_archive(out / "weights.bin", collect_state<float>(res.network));
  write_text_file(out / "history.csv", res.history.to_csv());
  write_text_file(out / "metrics.json", to_json(res.metrics).dump(2) + "\n");
  write_text_file(out / "confusion.csv", confusion_csv(res.metrics));
  RunReport rep;
  rep.command = "transfer";
  rep.method = "ssnas transfer -> " + to;
  rep.config = to_json(cfg);
  rep.genotype = art.genotype;
  rep.param_count = res.metrics.param_count;
  rep.metrics = res.metrics;
  rep.class_count = target.train.class_count();
  rep.histories = {{"epochs", res.history.epochs.size()}, {"stopped_early", res.history.stopped_early}};
  rep.extra = {{"target", to}};
  rep.notes.push_back("inputs resized (bilinear, half-pixel centers) to " + std::to_string(cfg.supernet.input_side) +
                      "x" + std::to_string(cfg.supernet.input_side));
  rep.wall_seconds = seconds_since(t0);
  write_report(out, rep);
  std::cout << "transfer: " << rep.class_count << " classes, accuracy " << fmt2(res.metrics.accuracy) << "%\n";
  return kExitOk;
}

int cmd_ablate(const Common& c, int n_seeds) {
  ExperimentConfig cfg = resolve_config(c, true);
  if (c.epochs) cfg.finetune.epochs = *c.epochs;
  if (n_seeds < 1) throw ParameterError("ablate: --seeds must be >= 1");
  const auto art = load_search_dir(c.from);
  const auto t0 = std::chrono::steady_clock::now();
  TrainTest data = load_datasets(cfg.dataset);
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < n_seeds; ++i) seeds.push_back(cfg.finetune.seed + static_cast<std::uint64_t>(i));
  const auto res = run_ablation<float>(cfg.supernet, art.genotype, art.weights, data.train, data.test, cfg.finetune,
                                       seeds);
  const fs::path out(cfg.out_dir);
  fs::create_directories(out);
  RunReport rep;
  rep.command = "ablate";
  rep.method = "ablation";
  rep.config = to_json(cfg);
  rep.genotype = art.genotype;
  rep.class_count = data.train.class_count();
  const std::string table = res.to_markdown();
  rep.extra = {{"ablation", res.to_json()}, {"ablation_table", table}};
  bool any_failed = false;
  for (const auto& cell : res.cells) any_failed = any_failed || !cell.ok;
  if (any_failed) rep.status = "partial";
  rep.wall_seconds = seconds_since(t0);
  write_report(out, rep);
  write_text_file(out / "ablation.md", table);
  std::cout << table;
  return kExitOk;
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& out) {
  std::vector<RunReport> reps;
  for (const auto& p : inputs) {
    if (!fs::exists(p)) throw DataError("report: missing " + p);
    reps.push_back(run_report_from_json(read_json_file(p)));
  }
  const auto merged = consolidate_reports(reps);
  const fs::path dir(out.empty() ? "." : out);
  write_text_file(dir / "report.md", merged.markdown);
  write_text_file(dir / "report.csv", merged.csv);
  std::cout << merged.markdown;
  return kExitOk;
}

void add_common(CLI::App* sub, Common& c, bool with_from) {
  sub->add_option("--config", c.config_path, "JSON config (or a report.json to re-run)");
  sub->add_option("--out", c.out, "output directory");
  sub->add_option("--seed", c.seed, "seed for every component");
  sub->add_option("--epochs", c.epochs, "override the epoch count");
  if (with_from) sub->add_option("--from", c.from, "input run directory")->required();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ssnas: self-supervised architecture search on imbalanced images"};
  app.set_version_flag("--version", SSNAS_VERSION);
  app.require_subcommand(1);

  double rho = 10.0;
  std::size_t classes = 10, per_class = 500;
  std::uint64_t lt_seed = 0;
  std::string lt_out;
  auto* make_lt = app.add_subcommand("make-lt", "build a long-tail plan and sample manifest");
  make_lt->add_option("--rho", rho, "imbalance factor");
  make_lt->add_option("--classes", classes, "number of classes");
  make_lt->add_option("--per-class", per_class, "samples per class before the transform");
  make_lt->add_option("--seed", lt_seed, "sampling seed");
  make_lt->add_option("--out", lt_out, "output directory");

  Common search_c, ft_c, eval_c, tr_c, ab_c;
  int checkpoint_every = -1;
  auto* search = app.add_subcommand("search", "architecture search on unlabeled images");
  add_common(search, search_c, false);
  search->add_option("--checkpoint-every", checkpoint_every, "checkpoint every K epochs (0 = off)");

  std::string loss_mode;
  auto* ft = app.add_subcommand("finetune", "fine-tune the searched network with a classifier head");
  add_common(ft, ft_c, true);
  ft->add_option("--loss", loss_mode, "CE, CE+LA, FL or FL+LA");

  auto* ev = app.add_subcommand("eval", "evaluate a fine-tuned network on the test split");
  add_common(ev, eval_c, true);

  std::string to = "synthetic:2:4";
  auto* tr = app.add_subcommand("transfer", "transfer the searched network to another dataset");
  add_common(tr, tr_c, true);
  tr->add_option("--to", to, "synthetic:L:rho, directory:/path or cifar10:/dir");

  int n_seeds = 5;
  auto* ab = app.add_subcommand("ablate", "CE / CE+LA / FL / FL+LA ablation");
  add_common(ab, ab_c, true);
  ab->add_option("--seeds", n_seeds, "number of seeds per loss mode");

  std::vector<std::string> inputs;
  std::string report_out;
  auto* rp = app.add_subcommand("report", "merge run reports into comparison tables");
  rp->add_option("inputs", inputs, "report.json files")->required();
  rp->add_option("--out", report_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*make_lt) return cmd_make_lt(rho, classes, per_class, lt_seed, lt_out);
    if (*search) return cmd_search(search_c, checkpoint_every);
    if (*ft) return cmd_finetune(ft_c, loss_mode);
    if (*ev) return cmd_eval(eval_c);
    if (*tr) return cmd_transfer(tr_c, to);
    if (*ab) return cmd_ablate(ab_c, n_seeds);
    if (*rp) return cmd_report(inputs, report_out);
  } catch (const ConfigError& e) {
    std::cerr << "ssnas: configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "ssnas: divergence: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const DataError& e) {
    std::cerr << "ssnas: data error: " << e.what() << "\n";
    return kExitData;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "ssnas: configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "ssnas: data error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitOk;
}
