// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration (versioned JSON), dataset resolution and run
// reports with their Markdown/CSV renderings.
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ssnas/finetune.hpp"

#ifndef SSNAS_VERSION
#define SSNAS_VERSION "0.0.0"
#endif

namespace ssnas {

inline constexpr int kSchemaVersion = 1;

enum class DataSource { synthetic, cifar10, directory };

inline std::string_view data_source_name(DataSource s) {
  switch (s) {
    case DataSource::synthetic: return "synthetic";
    case DataSource::cifar10: return "cifar10";
    case DataSource::directory: return "directory";
  }
  return "?";
}

inline DataSource data_source_from_name(std::string_view s) {
  if (s == "synthetic") return DataSource::synthetic;
  if (s == "cifar10") return DataSource::cifar10;
  if (s == "directory") return DataSource::directory;
  throw ParameterError("unknown dataset source '" + std::string(s) + "' (expected synthetic, cifar10 or directory)");
}

/// Where the train/test images come from. The long-tail transform (rho)
/// applies to the training split only; test sets stay as provided.
struct DatasetSpec {
  DataSource source = DataSource::synthetic;
  double rho = 10.0;
  std::uint64_t seed = 0;
  // synthetic
  std::size_t classes = 10;
  std::size_t per_class = 100;
  std::size_t test_per_class = 30;
  Index side = 8;
  Index channels = 3;
  double noise = 0.1;
  // cifar10: binary batch files; directory: folders with labels.csv
  std::vector<std::string> train_paths;
  std::vector<std::string> test_paths;

  void validate() const {
    if (!(rho >= 1.0)) throw ParameterError("dataset: rho must be >= 1");
    if (source == DataSource::synthetic) {
      if (classes < 2 || per_class < 1 || test_per_class < 1)
        throw ParameterError("dataset: synthetic set needs >= 2 classes and >= 1 sample per class");
      if (noise < 0) throw ParameterError("dataset: noise must be >= 0");
      return;
    }
    if (train_paths.empty() || test_paths.empty())
      throw ParameterError("dataset: " + std::string(data_source_name(source)) + " needs train_paths and test_paths");
    for (const auto* list : {&train_paths, &test_paths})
      for (const auto& p : *list)
        if (!std::filesystem::exists(p)) throw ParameterError("dataset: path does not exist: " + p);
    if (source == DataSource::directory && (train_paths.size() != 1 || test_paths.size() != 1))
      throw ParameterError("dataset: directory source takes exactly one train and one test folder");
  }
};

inline nlohmann::json to_json(const DatasetSpec& d) {
  return {{"source", std::string(data_source_name(d.source))},
          {"rho", d.rho},
          {"seed", d.seed},
          {"classes", d.classes},
          {"per_class", d.per_class},
          {"test_per_class", d.test_per_class},
          {"side", d.side},
          {"channels", d.channels},
          {"noise", d.noise},
          {"train_paths", d.train_paths},
          {"test_paths", d.test_paths}};
}

inline DatasetSpec dataset_spec_from_json(const nlohmann::json& j, DatasetSpec d = {}) {
  detail::check_keys(j, to_json(d), "dataset");
  if (j.contains("source")) d.source = data_source_from_name(j.at("source").get<std::string>());
  d.rho = j.value("rho", d.rho);
  d.seed = j.value("seed", d.seed);
  d.classes = j.value("classes", d.classes);
  d.per_class = j.value("per_class", d.per_class);
  d.test_per_class = j.value("test_per_class", d.test_per_class);
  d.side = j.value("side", d.side);
  d.channels = j.value("channels", d.channels);
  d.noise = j.value("noise", d.noise);
  d.train_paths = j.value("train_paths", d.train_paths);
  d.test_paths = j.value("test_paths", d.test_paths);
  return d;
}

struct TrainTest {
  Dataset train, test;
  std::optional<LongTailPlan> plan;
};

/// Materialises the train (long-tailed) and test sets of a spec.
inline TrainTest load_datasets(const DatasetSpec& spec) {
  spec.validate();
  TrainTest tt;
  switch (spec.source) {
    case DataSource::synthetic: {
      tt.train = synth_imbalanced_dataset(spec.classes, spec.per_class, spec.side, spec.rho,
                                          derive_seed(spec.seed, "synthetic_train"), spec.channels, spec.noise);
      tt.test = synth_imbalanced_dataset(spec.classes, spec.test_per_class, spec.side, 1.0,
                                         derive_seed(spec.seed, "synthetic_test"), spec.channels, spec.noise);
      const std::vector<std::size_t> counts(spec.classes, spec.per_class);
      tt.plan = build_long_tail(counts, beta_for_rho(spec.rho, spec.classes));
      return tt;
    }
    case DataSource::cifar10: {
      std::vector<std::filesystem::path> tr(spec.train_paths.begin(), spec.train_paths.end());
      std::vector<std::filesystem::path> te(spec.test_paths.begin(), spec.test_paths.end());
      const Dataset full = ingest_cifar10_binary(tr);
      tt.test = ingest_cifar10_binary(te);
      const auto counts = full.class_counts();
      tt.plan = build_long_tail(counts, beta_for_rho(spec.rho, full.class_count()));
      tt.train = subsample_to_plan(full, *tt.plan, derive_seed(spec.seed, "long_tail"));
      return tt;
    }
    case DataSource::directory: {
      const Dataset full = load_directory_dataset(spec.train_paths.front());
      tt.test = load_directory_dataset(spec.test_paths.front());
      if (spec.rho > 1.0) {
        tt.plan = build_long_tail(full.class_counts(), beta_for_rho(spec.rho, full.class_count()));
        tt.train = subsample_to_plan(full, *tt.plan, derive_seed(spec.seed, "long_tail"));
      } else {
        tt.train = full;
      }
      return tt;
    }
  }
  throw ParameterError("unknown dataset source");
}

/// Per-class seeded split; every class keeps at least one sample on each
/// side when it has two or more.
inline TrainTest stratified_split(const Dataset& ds, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0 && test_fraction < 1)) throw ParameterError("split: test_fraction must lie in (0, 1)");
  std::vector<std::vector<std::size_t>> by_class(ds.class_count());
  const auto& labels = ds.labels();
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  std::vector<std::size_t> tr, te;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& pool = by_class[c];
    Rng(derive_seed(seed, "stratified_split", c)).shuffle(pool);
    auto n_te = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(pool.size())));
    if (pool.size() >= 2) n_te = std::clamp<std::size_t>(n_te, 1, pool.size() - 1);
    te.insert(te.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_te));
    tr.insert(tr.end(), pool.begin() + static_cast<std::ptrdiff_t>(n_te), pool.end());
  }
  std::sort(tr.begin(), tr.end());
  std::sort(te.begin(), te.end());
  TrainTest tt;
  tt.train = ds.subset(tr);
  tt.test = ds.subset(te);
  tt.train.class_names = tt.test.class_names = ds.class_names;
  return tt;
}

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  DatasetSpec dataset;
  SupernetConfig supernet;
  SearchConfig search;
  FinetuneConfig finetune;
  std::string out_dir = "runs/default";

  /// Desk-scale profile: 10-class noisy synthetic ρ=10 set at 8x8, 3 cells of 8
  /// channels, a 200-step search, short fine-tuning.
  static ExperimentConfig desk() {
    ExperimentConfig c;
    c.dataset.side = 8;
    c.dataset.noise = 0.6;
    c.dataset.per_class = 110;  // 172 training images: 10 batches of 16 per epoch
    c.supernet.input_side = 8;
    c.supernet.embed_dim = 32;
    c.search.batch_size = 16;
    c.search.epochs = 20;
    c.search.arch_lr = 3.0;
    c.search.w01 = 10.0;
    c.search.w01_ramp_epochs = 2;
    c.finetune.epochs = 40;
    c.finetune.patience = 10;
    c.finetune.batch_size = 32;
    return c;
  }

  /// Seeds every component from one value.
  void set_seed(std::uint64_t s) {
    dataset.seed = s;
    supernet.seed = s;
    search.seed = s;
    finetune.seed = s;
  }

  void validate() const {
    if (schema_version != kSchemaVersion)
      throw ParameterError("config: schema_version " + std::to_string(schema_version) + " is not supported (expected " +
                           std::to_string(kSchemaVersion) + ")");
    dataset.validate();
    supernet.validate();
    search.validate();
    finetune.validate();
  }
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"schema_version", c.schema_version},
          {"dataset", to_json(c.dataset)},
          {"supernet", to_json(c.supernet)},
          {"search", to_json(c.search)},
          {"finetune", to_json(c.finetune)},
          {"out_dir", c.out_dir}};
}

/// Accepts a config file or a RunReport (whose "config" block is used).
inline ExperimentConfig experiment_config_from_json(const nlohmann::json& in) {
  const nlohmann::json& j = in.contains("config") && in.at("config").is_object() ? in.at("config") : in;
  if (!j.contains("schema_version")) throw ParameterError("config: missing schema_version");
  ExperimentConfig c = ExperimentConfig::desk();
  detail::check_keys(j, to_json(c), "config");
  c.schema_version = j.at("schema_version").get<int>();
  if (c.schema_version != kSchemaVersion)
    throw ParameterError("config: schema_version " + std::to_string(c.schema_version) + " is not supported");
  if (j.contains("dataset")) c.dataset = dataset_spec_from_json(j.at("dataset"), c.dataset);
  if (j.contains("supernet")) c.supernet = supernet_config_from_json(j.at("supernet"), c.supernet);
  if (j.contains("search")) c.search = search_config_from_json(j.at("search"), c.search);
  if (j.contains("finetune")) c.finetune = finetune_config_from_json(j.at("finetune"), c.finetune);
  c.out_dir = j.value("out_dir", c.out_dir);
  return c;
}

inline nlohmann::json read_json_file(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw ParameterError("cannot open " + p.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ParameterError(p.string() + ": " + e.what());
  }
}

inline void write_text_file(const std::filesystem::path& p, const std::string& text) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + p.string());
  os << text;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Parameter count in millions with two decimals (810000 -> "0.81").
inline std::string format_millions(Index params) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", static_cast<double>(params) / 1e6);
  return buf;
}

struct RunReport {
  std::string command;
  std::string method;  // row label in consolidated tables
  std::string status = "ok";
  nlohmann::json config;
  std::optional<Genotype> genotype;
  Index param_count = 0;
  std::optional<Metrics> metrics;
  std::size_t class_count = 0;
  nlohmann::json histories = nlohmann::json::object();
  nlohmann::json extra = nlohmann::json::object();
  std::vector<std::string> notes;
  double wall_seconds = 0;
};

inline nlohmann::json to_json(const RunReport& r) {
  nlohmann::json j{{"tool", "ssnas"},
                   {"version", SSNAS_VERSION},
                   {"command", r.command},
                   {"method", r.method},
                   {"status", r.status},
                   {"config", r.config},
                   {"param_count", r.param_count},
                   {"class_count", r.class_count},
                   {"histories", r.histories},
                   {"notes", r.notes},
                   {"wall_seconds", r.wall_seconds}};
  j["genotype"] = r.genotype ? to_json(*r.genotype) : nlohmann::json();
  j["metrics"] = r.metrics ? to_json(*r.metrics) : nlohmann::json();
  for (const auto& [k, v] : r.extra.items()) j[k] = v;
  return j;
}

inline RunReport run_report_from_json(const nlohmann::json& j) {
  RunReport r;
  r.command = j.value("command", "");
  r.method = j.value("method", r.command);
  r.status = j.value("status", "ok");
  r.config = j.value("config", nlohmann::json::object());
  if (j.contains("genotype") && !j.at("genotype").is_null()) r.genotype = genotype_from_json(j.at("genotype"));
  r.param_count = j.value("param_count", Index{0});
  if (j.contains("metrics") && !j.at("metrics").is_null()) r.metrics = metrics_from_json(j.at("metrics"));
  r.class_count = j.value("class_count", std::size_t{0});
  r.histories = j.value("histories", nlohmann::json::object());
  r.notes = j.value("notes", std::vector<std::string>{});
  r.wall_seconds = j.value("wall_seconds", 0.0);
  return r;
}

inline std::string fmt2(double v) {
  if (!std::isfinite(v)) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

/// Single-report Markdown summary.
inline std::string report_markdown(const RunReport& r) {
  std::ostringstream os;
  os << "# ssnas " << r.command << "\n\n";
  os << "- status: " << r.status << "\n";
  if (r.param_count) os << "- parameters: " << format_millions(r.param_count) << "M (" << r.param_count << ")\n";
  if (r.class_count) os << "- classes: " << r.class_count << "\n";
  os << "- wall time: " << fmt2(r.wall_seconds) << " s\n";
  for (const auto& n : r.notes) os << "- " << n << "\n";
  if (r.metrics) {
    const auto& m = *r.metrics;
    os << "\n| Method | # Params | Error | Accuracy |\n|---|---|---|---|\n";
    os << "| " << r.method << " | " << format_millions(m.param_count) << " | " << fmt2(m.top1_error) << " | "
       << fmt2(m.accuracy) << " |\n";
    os << "\n| Class | Recall |\n|---|---|\n";
    for (std::size_t c = 0; c < m.per_class_recall.size(); ++c)
      os << "| " << c << " | " << fmt2(m.per_class_recall[c]) << " |\n";
  }
  if (r.extra.contains("ablation_table")) os << "\n" << r.extra.at("ablation_table").get<std::string>();
  return os.str();
}

struct Consolidated {
  std::string markdown;
  std::string csv;
};

/// Comparison table over reports with metrics: Method, # Params, Error,
/// Accuracy. All reports must agree on the class count.
inline Consolidated consolidate_reports(const std::vector<RunReport>& reports) {
  if (reports.empty()) throw ParameterError("report: no input reports");
  std::set<std::size_t> ls;
  for (const auto& r : reports)
    if (r.metrics) ls.insert(r.class_count);
  if (ls.size() > 1) {
    std::string msg = "report: conflicting class counts across reports:";
    for (auto l : ls) msg += " " + std::to_string(l);
    throw ParameterError(msg);
  }
  Consolidated out;
  std::ostringstream md, csv;
  md << "| Method | # Params | Error | Accuracy |\n|---|---|---|---|\n";
  csv << "method,params_millions,error,accuracy\n";
  for (const auto& r : reports) {
    if (!r.metrics) continue;
    const auto& m = *r.metrics;
    md << "| " << r.method << " | " << format_millions(m.param_count) << " | " << fmt2(m.top1_error) << " | "
       << fmt2(m.accuracy) << " |\n";
    csv << '"' << r.method << "\"," << format_millions(m.param_count) << ',' << fmt2(m.top1_error) << ','
        << fmt2(m.accuracy) << '\n';
  }
  out.markdown = md.str();
  out.csv = csv.str();
  return out;
}

}  // namespace ssnas
