// SPDX-License-Identifier: Apache-2.0
//
// Datasets, long-tail construction, twin-view augmentation and ingestion
// (CIFAR-10 binary batches, PNG directories, procedural synthetic data).
#pragma once

#include <png.h>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ssnas/json_keys.hpp"
#include "ssnas/parallel.hpp"
#include "ssnas/rng.hpp"
#include "ssnas/tensor.hpp"

namespace ssnas {

/// Counts every access to dataset labels. The search path must leave it
/// untouched.
inline std::atomic<std::uint64_t>& label_read_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

/// Images (N x C x H x W, values in [0, 1]) with integer class labels.
class Dataset {
 public:
  Dataset() = default;
  Dataset(Tensor<float> images, std::vector<int> labels, std::size_t class_count)
      : images_(std::move(images)), labels_(std::move(labels)), class_count_(class_count) {
    validate();
  }

  std::size_t size() const { return labels_.size(); }
  std::size_t class_count() const { return class_count_; }
  const Tensor<float>& images() const { return images_; }
  Shape image_shape() const {
    return images_.rank() == 4 ? Shape{images_.dim(1), images_.dim(2), images_.dim(3)} : Shape{};
  }

  const std::vector<int>& labels() const {
    ++label_read_counter();
    return labels_;
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(class_count_, 0);
    for (int y : labels()) ++counts[static_cast<std::size_t>(y)];
    return counts;
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    std::vector<int> lab;
    lab.reserve(idx.size());
    for (std::size_t i : idx) lab.push_back(labels_.at(i));
    ++label_read_counter();
    Tensor<float> imgs = images_.rank() == 4 ? gather_rows(images_, idx) : Tensor<float>({0, 0, 0, 0});
    return Dataset(std::move(imgs), std::move(lab), class_count_);
  }

  std::vector<std::string> class_names;

 private:
  void validate() const {
    if (images_.rank() != 4 && !(labels_.empty() && images_.numel() == 0))
      throw DataError("dataset: images must be N x C x H x W, got " + shape_str(images_.shape()));
    const Index n = images_.rank() == 4 ? images_.dim(0) : 0;
    if (n != static_cast<Index>(labels_.size()))
      throw DataError("dataset: " + std::to_string(n) + " images but " + std::to_string(labels_.size()) +
                      " labels");
    for (std::size_t i = 0; i < labels_.size(); ++i)
      if (labels_[i] < 0 || static_cast<std::size_t>(labels_[i]) >= class_count_)
        throw DataError("dataset: label " + std::to_string(labels_[i]) + " at index " + std::to_string(i) +
                        " outside [0, " + std::to_string(class_count_) + ")");
  }

  Tensor<float> images_;
  std::vector<int> labels_;
  std::size_t class_count_ = 0;
};

// ---------------------------------------------------------------------------
// Long-tail construction
// ---------------------------------------------------------------------------

struct LongTailPlan {
  double beta = 1.0;
  std::vector<std::size_t> original_counts;
  std::vector<std::size_t> lt_counts;
  double rho = 1.0;
};

inline double imbalance_factor(std::span<const std::size_t> counts) {
  const auto [mn, mx] = std::minmax_element(counts.begin(), counts.end());
  return static_cast<double>(*mx) / static_cast<double>(*mn);
}

/// n_c <- floor(beta^(c+1) * n_c); class 0 stays the head class.
inline LongTailPlan build_long_tail(std::span<const std::size_t> counts, double beta) {
  if (!(beta > 0.0 && beta <= 1.0)) throw ParameterError("build_long_tail: beta must lie in (0, 1]");
  if (counts.empty()) throw ParameterError("build_long_tail: no classes");
  LongTailPlan plan;
  plan.beta = beta;
  plan.original_counts.assign(counts.begin(), counts.end());
  std::vector<std::size_t> empty;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] < 1) throw ParameterError("build_long_tail: class " + std::to_string(c) + " has no samples");
    const double v = std::floor(std::pow(beta, static_cast<double>(c + 1)) * static_cast<double>(counts[c]));
    if (v < 1.0) empty.push_back(c);
    plan.lt_counts.push_back(static_cast<std::size_t>(std::max(v, 0.0)));
  }
  if (!empty.empty()) {
    std::string names;
    for (std::size_t c : empty) names += (names.empty() ? "" : ", ") + std::to_string(c);
    throw UnsatisfiableImbalanceError(empty.front(), "unsatisfiable imbalance: class" +
                                                         std::string(empty.size() > 1 ? "es " : " ") + names +
                                                         " would keep 0 samples at beta=" + std::to_string(beta));
  }
  plan.rho = imbalance_factor(plan.lt_counts);
  return plan;
}

/// beta such that the un-floored decay reaches exactly rho across the classes.
inline double beta_for_rho(double rho, std::size_t class_count) {
  if (!(rho >= 1.0) || !std::isfinite(rho)) throw ParameterError("beta_for_rho: rho must be >= 1");
  if (class_count < 2) throw ParameterError("beta_for_rho: need at least 2 classes");
  return std::pow(rho, -1.0 / static_cast<double>(class_count - 1));
}

inline nlohmann::json to_json(const LongTailPlan& p) {
  return {{"beta", p.beta}, {"rho", p.rho}, {"original_counts", p.original_counts}, {"lt_counts", p.lt_counts}};
}

inline LongTailPlan plan_from_json(const nlohmann::json& j) {
  LongTailPlan p;
  p.beta = j.at("beta").get<double>();
  p.rho = j.at("rho").get<double>();
  p.original_counts = j.at("original_counts").get<std::vector<std::size_t>>();
  p.lt_counts = j.at("lt_counts").get<std::vector<std::size_t>>();
  return p;
}

/// Indices (ascending) of a seeded per-class draw without replacement.
inline std::vector<std::size_t> select_for_plan(const Dataset& ds, const LongTailPlan& plan, std::uint64_t seed) {
  if (plan.lt_counts.size() != ds.class_count())
    throw ParameterError("subsample: plan has " + std::to_string(plan.lt_counts.size()) + " classes, dataset has " +
                         std::to_string(ds.class_count()));
  std::vector<std::vector<std::size_t>> by_class(ds.class_count());
  const auto& labels = ds.labels();
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  std::vector<std::size_t> chosen;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& pool = by_class[c];
    if (pool.size() < plan.lt_counts[c])
      throw InsufficientSamplesError(c, "subsample: class " + std::to_string(c) + " has " +
                                            std::to_string(pool.size()) + " samples, plan needs " +
                                            std::to_string(plan.lt_counts[c]));
    Rng rng(derive_seed(seed, "subsample", c));
    rng.shuffle(pool);
    chosen.insert(chosen.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(plan.lt_counts[c]));
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

inline Dataset subsample_to_plan(const Dataset& ds, const LongTailPlan& plan, std::uint64_t seed) {
  auto idx = select_for_plan(ds, plan, seed);
  Dataset out = ds.subset(idx);
  out.class_names = ds.class_names;
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentationPolicy {
  bool crop = false;
  int crop_padding = -1;  // -1: 4 px at side 32, scaled with the side
  double flip_probability = 0.0;
  bool color = false;
  double brightness = 0.2;  // additive jitter range, per channel
  double contrast = 0.2;    // multiplicative jitter range around 1, per channel

  static AugmentationPolicy none() { return {}; }
  /// Crop, flip, and color distortion for the self-supervised twin views.
  static AugmentationPolicy twin_default() { return {true, -1, 0.5, true, 0.2, 0.2}; }
  /// Crop and flip only, for supervised fine-tuning.
  static AugmentationPolicy light() { return {true, -1, 0.5, false, 0.2, 0.2}; }

  int padding_for(Index side) const {
    if (crop_padding >= 0) return crop_padding;
    return static_cast<int>(std::lround(4.0 * static_cast<double>(side) / 32.0));
  }

  void validate() const {
    if (!(flip_probability >= 0.0 && flip_probability <= 1.0))
      throw ParameterError("augmentation: flip probability must lie in [0, 1]");
    if (brightness < 0.0 || contrast < 0.0 || contrast >= 1.0)
      throw ParameterError("augmentation: jitter ranges must be >= 0 (contrast < 1)");
  }
};

inline nlohmann::json to_json(const AugmentationPolicy& p) {
  return {{"crop", p.crop},   {"crop_padding", p.crop_padding}, {"flip_probability", p.flip_probability},
          {"color", p.color}, {"brightness", p.brightness},     {"contrast", p.contrast}};
}

inline AugmentationPolicy augmentation_from_json(const nlohmann::json& j, AugmentationPolicy p = {}) {
  detail::check_keys(j, to_json(p), "augmentation");
  p.crop = j.value("crop", p.crop);
  p.crop_padding = j.value("crop_padding", p.crop_padding);
  p.flip_probability = j.value("flip_probability", p.flip_probability);
  p.color = j.value("color", p.color);
  p.brightness = j.value("brightness", p.brightness);
  p.contrast = j.value("contrast", p.contrast);
  p.validate();
  return p;
}

namespace detail {
/// One sampled transformation chain (crop -> flip -> color) on a C x H x W image.
inline void augment_image(const float* src, float* dst, Index C, Index H, Index W, const AugmentationPolicy& pol,
                          Rng& rng) {
  const Index plane = H * W;
  std::vector<float> buf(src, src + C * plane);
  if (pol.crop) {
    const Index pad = pol.padding_for(std::max(H, W));
    const Index oy = static_cast<Index>(rng.below(static_cast<std::uint64_t>(2 * pad + 1))) - pad;
    const Index ox = static_cast<Index>(rng.below(static_cast<std::uint64_t>(2 * pad + 1))) - pad;
    std::vector<float> out(buf.size(), 0.0f);
    for (Index c = 0; c < C; ++c)
      for (Index y = 0; y < H; ++y) {
        const Index sy = y + oy;
        if (sy < 0 || sy >= H) continue;
        for (Index x = 0; x < W; ++x) {
          const Index sx = x + ox;
          if (sx >= 0 && sx < W) out[static_cast<std::size_t>(c * plane + y * W + x)] = buf[static_cast<std::size_t>(c * plane + sy * W + sx)];
        }
      }
    buf.swap(out);
  }
  if (pol.flip_probability > 0.0 && rng.bernoulli(pol.flip_probability)) {
    for (Index c = 0; c < C; ++c)
      for (Index y = 0; y < H; ++y) {
        float* row = buf.data() + c * plane + y * W;
        std::reverse(row, row + W);
      }
  }
  if (pol.color) {
    for (Index c = 0; c < C; ++c) {
      const float cf = static_cast<float>(1.0 + rng.uniform(-pol.contrast, pol.contrast));
      const float bf = static_cast<float>(rng.uniform(-pol.brightness, pol.brightness));
      float* p = buf.data() + c * plane;
      double mean = 0.0;
      for (Index i = 0; i < plane; ++i) mean += p[i];
      const float m = static_cast<float>(mean / static_cast<double>(plane));
      for (Index i = 0; i < plane; ++i) p[i] = std::clamp((p[i] - m) * cf + m + bf, 0.0f, 1.0f);
    }
  }
  std::copy(buf.begin(), buf.end(), dst);
}
}  // namespace detail

/// One augmented view per image; image i draws from derive_seed(seed, stream, i)
/// so output is independent of worker count.
inline Tensor<float> augment_batch(const Tensor<float>& images, const AugmentationPolicy& policy, std::uint64_t seed,
                                   std::string_view stream = "augment") {
  policy.validate();
  Tensor<float> out(images.shape());
  if (images.numel() == 0) return out;
  const Index B = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
  const Index sz = C * H * W;
  parallel_for(static_cast<std::size_t>(B), [&](std::size_t i) {
    Rng rng(derive_seed(seed, stream, i));
    detail::augment_image(images.data() + static_cast<Index>(i) * sz, out.data() + static_cast<Index>(i) * sz, C, H,
                          W, policy, rng);
  });
  return out;
}

struct TwinBatch {
  Tensor<float> view_a;
  Tensor<float> view_b;
  std::vector<std::size_t> source_indices;
};

inline TwinBatch make_twin_views(const Tensor<float>& images, const AugmentationPolicy& policy, std::uint64_t seed,
                                 std::vector<std::size_t> source_indices = {}) {
  if (images.rank() != 4 || images.dim(0) < 1) throw DataError("make_twin_views: need a non-empty B x C x H x W batch");
  if (source_indices.empty()) {
    source_indices.resize(static_cast<std::size_t>(images.dim(0)));
    std::iota(source_indices.begin(), source_indices.end(), std::size_t{0});
  }
  TwinBatch tb;
  tb.view_a = augment_batch(images, policy, seed, "view_a");
  tb.view_b = augment_batch(images, policy, seed, "view_b");
  tb.source_indices = std::move(source_indices);
  return tb;
}

/// Bilinear resize with half-pixel centers (align_corners = false) and
/// edge clamping.
inline Tensor<float> resize_bilinear(const Tensor<float>& images, Index out_h, Index out_w) {
  const Index N = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
  if (H == out_h && W == out_w) return images;
  Tensor<float> out({N, C, out_h, out_w});
  const double sy = static_cast<double>(H) / static_cast<double>(out_h);
  const double sx = static_cast<double>(W) / static_cast<double>(out_w);
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c)
      for (Index y = 0; y < out_h; ++y) {
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(H - 1));
        const Index y0 = static_cast<Index>(fy);
        const Index y1 = std::min(y0 + 1, H - 1);
        const double wy = fy - static_cast<double>(y0);
        for (Index x = 0; x < out_w; ++x) {
          const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(W - 1));
          const Index x0 = static_cast<Index>(fx);
          const Index x1 = std::min(x0 + 1, W - 1);
          const double wx = fx - static_cast<double>(x0);
          const double v = (1 - wy) * ((1 - wx) * images.at(n, c, y0, x0) + wx * images.at(n, c, y0, x1)) +
                           wy * ((1 - wx) * images.at(n, c, y1, x0) + wx * images.at(n, c, y1, x1));
          out.at(n, c, y, x) = static_cast<float>(v);
        }
      }
  return out;
}

/// Channel adaptation: 1 -> k replicates, k -> 1 averages.
inline Tensor<float> adapt_channels(const Tensor<float>& images, Index channels) {
  const Index N = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
  if (C == channels) return images;
  Tensor<float> out({N, channels, H, W});
  for (Index n = 0; n < N; ++n)
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) {
        if (C == 1) {
          for (Index c = 0; c < channels; ++c) out.at(n, c, y, x) = images.at(n, 0, y, x);
        } else if (channels == 1) {
          float s = 0.0f;
          for (Index c = 0; c < C; ++c) s += images.at(n, c, y, x);
          out.at(n, 0, y, x) = s / static_cast<float>(C);
        } else {
          throw DataError("adapt_channels: cannot map " + std::to_string(C) + " channels to " +
                          std::to_string(channels));
        }
      }
  return out;
}

/// Resize and channel-adapt a dataset to a model's expected input.
inline Dataset conform_dataset(const Dataset& ds, Index channels, Index side) {
  if (ds.size() == 0) return ds;
  Tensor<float> imgs = adapt_channels(resize_bilinear(ds.images(), side, side), channels);
  Dataset out(std::move(imgs), ds.labels(), ds.class_count());
  out.class_names = ds.class_names;
  return out;
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

inline constexpr std::size_t kCifarRecordBytes = 3073;

/// CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes
/// (R, G, B planes of 32 x 32, row-major).
inline Dataset ingest_cifar10_binary(const std::vector<std::filesystem::path>& paths) {
  std::vector<unsigned char> bytes_all;
  std::vector<int> labels;
  for (const auto& path : paths) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cifar10: cannot open " + path.string());
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::size_t whole = buf.size() / kCifarRecordBytes;
    if (buf.size() % kCifarRecordBytes != 0)
      throw FormatError(whole * kCifarRecordBytes, "cifar10: truncated record in " + path.string() + " at byte offset " +
                                                       std::to_string(whole * kCifarRecordBytes));
    for (std::size_t r = 0; r < whole; ++r) {
      const unsigned char label = buf[r * kCifarRecordBytes];
      if (label >= 10)
        throw FormatError(r * kCifarRecordBytes, "cifar10: label byte " + std::to_string(label) + " in " +
                                                     path.string() + " at byte offset " +
                                                     std::to_string(r * kCifarRecordBytes));
      labels.push_back(label);
      bytes_all.insert(bytes_all.end(), buf.begin() + static_cast<std::ptrdiff_t>(r * kCifarRecordBytes + 1),
                       buf.begin() + static_cast<std::ptrdiff_t>((r + 1) * kCifarRecordBytes));
    }
  }
  const auto n = static_cast<Index>(labels.size());
  Tensor<float> images({n, 3, 32, 32});
  for (std::size_t i = 0; i < bytes_all.size(); ++i) images[static_cast<Index>(i)] = static_cast<float>(bytes_all[i]) / 255.0f;
  Dataset ds(std::move(images), std::move(labels), 10);
  ds.class_names = {"airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"};
  return ds;
}

namespace detail {
struct PngImage {
  Index channels = 0, height = 0, width = 0;
  std::vector<unsigned char> pixels;  // interleaved
};

inline PngImage read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    throw DataError("png: cannot read " + path.string() + ": " + img.message);
  const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  PngImage out;
  out.channels = color ? 3 : 1;
  out.height = img.height;
  out.width = img.width;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw DataError("png: cannot decode " + path.string() + ": " + msg);
  }
  return out;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, ',')) {
    while (!cur.empty() && (cur.back() == '\r' || cur.back() == ' ')) cur.pop_back();
    while (!cur.empty() && cur.front() == ' ') cur.erase(cur.begin());
    out.push_back(cur);
  }
  return out;
}
}  // namespace detail

/// Directory dataset: `labels.csv` with rows `filename,label` next to 8-bit
/// grayscale or RGB PNGs. Labels are integer ids, or names mapped to ids in
/// sorted order. Mixed gray/RGB inputs are promoted to RGB; differing sizes
/// are resized to `side` (required in that case).
inline Dataset load_directory_dataset(const std::filesystem::path& dir, std::optional<Index> side = std::nullopt) {
  std::ifstream csv(dir / "labels.csv");
  if (!csv) throw DataError("directory dataset: missing " + (dir / "labels.csv").string());
  std::vector<std::pair<std::string, std::string>> rows;
  std::string line;
  bool first = true;
  while (std::getline(csv, line)) {
    if (line.empty() || line == "\r") continue;
    auto f = detail::split_csv_line(line);
    if (f.size() != 2) throw DataError("directory dataset: malformed row '" + line + "'");
    if (first && f[0] == "filename" && f[1] == "label") {
      first = false;
      continue;
    }
    first = false;
    rows.emplace_back(f[0], f[1]);
  }
  bool numeric = true;
  for (const auto& [_, l] : rows)
    numeric = numeric && !l.empty() && std::all_of(l.begin(), l.end(), [](char ch) { return std::isdigit(static_cast<unsigned char>(ch)); });
  std::vector<int> labels;
  std::vector<std::string> names;
  if (numeric) {
    int mx = -1;
    for (const auto& [_, l] : rows) {
      labels.push_back(std::stoi(l));
      mx = std::max(mx, labels.back());
    }
    for (int c = 0; c <= mx; ++c) names.push_back(std::to_string(c));
  } else {
    std::set<std::string> uniq;
    for (const auto& [_, l] : rows) uniq.insert(l);
    names.assign(uniq.begin(), uniq.end());
    for (const auto& [_, l] : rows)
      labels.push_back(static_cast<int>(std::lower_bound(names.begin(), names.end(), l) - names.begin()));
  }
  std::vector<detail::PngImage> imgs;
  Index channels = 1;
  for (const auto& [file, _] : rows) {
    imgs.push_back(detail::read_png(dir / file));
    channels = std::max(channels, imgs.back().channels);
  }
  Index H = side.value_or(imgs.empty() ? 0 : imgs.front().height);
  Index W = side.value_or(imgs.empty() ? 0 : imgs.front().width);
  Tensor<float> all({static_cast<Index>(imgs.size()), channels, H, W});
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    const auto& im = imgs[i];
    if (!side && (im.height != H || im.width != W))
      throw DataError("directory dataset: " + rows[i].first + " is " + std::to_string(im.height) + "x" +
                      std::to_string(im.width) + ", expected " + std::to_string(H) + "x" + std::to_string(W));
    Tensor<float> one({1, im.channels, im.height, im.width});
    for (Index y = 0; y < im.height; ++y)
      for (Index x = 0; x < im.width; ++x)
        for (Index c = 0; c < im.channels; ++c)
          one.at(0, c, y, x) = static_cast<float>(im.pixels[static_cast<std::size_t>((y * im.width + x) * im.channels + c)]) / 255.0f;
    one = adapt_channels(resize_bilinear(one, H, W), channels);
    std::copy(one.values().begin(), one.values().end(), all.data() + static_cast<Index>(i) * one.numel());
  }
  Dataset ds(std::move(all), std::move(labels), names.size());
  ds.class_names = std::move(names);
  return ds;
}

/// Procedural class-imbalanced images. Each class has a fixed colour tint
/// and an oriented grating; samples add seeded Gaussian noise. Class sizes
/// follow build_long_tail(per_class, beta_for_rho(rho, classes)).
inline Dataset synth_imbalanced_dataset(std::size_t class_count, std::size_t per_class, Index side, double rho,
                                        std::uint64_t seed, Index channels = 3, double noise = 0.1) {
  if (class_count < 2) throw ParameterError("synthetic dataset: need at least 2 classes");
  if (side < 8) throw ParameterError("synthetic dataset: side must be >= 8");
  if (per_class < 1) throw ParameterError("synthetic dataset: per_class must be >= 1");
  const std::vector<std::size_t> counts(class_count, per_class);
  const LongTailPlan plan = build_long_tail(counts, beta_for_rho(rho, class_count));
  std::size_t total = 0;
  for (auto n : plan.lt_counts) total += n;
  Tensor<float> images({static_cast<Index>(total), channels, side, side});
  std::vector<int> labels;
  labels.reserve(total);
  const double two_pi = 2.0 * std::numbers::pi;
  Index row = 0;
  for (std::size_t c = 0; c < class_count; ++c) {
    const double u = static_cast<double>(c) / static_cast<double>(class_count);
    const double theta = std::numbers::pi * static_cast<double>(c % 4) / 4.0;
    const double freq = 1.0 + static_cast<double>((c / 4) % 3);
    for (std::size_t k = 0; k < plan.lt_counts[c]; ++k, ++row) {
      Rng rng(derive_seed(seed, "synth", c, k));
      for (Index ch = 0; ch < channels; ++ch) {
        const double tint = 0.5 + 0.25 * std::cos(two_pi * (u + static_cast<double>(ch) / 3.0));
        for (Index y = 0; y < side; ++y)
          for (Index x = 0; x < side; ++x) {
            const double t = (static_cast<double>(x) * std::cos(theta) + static_cast<double>(y) * std::sin(theta)) /
                             static_cast<double>(side);
            const double v = tint + 0.2 * std::cos(two_pi * freq * t) + noise * rng.normal();
            images.at(row, ch, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
          }
      }
      labels.push_back(static_cast<int>(c));
    }
  }
  Dataset ds(std::move(images), std::move(labels), class_count);
  for (std::size_t c = 0; c < class_count; ++c) ds.class_names.push_back("class" + std::to_string(c));
  return ds;
}

}  // namespace ssnas
