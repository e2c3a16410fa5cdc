// SPDX-License-Identifier: Apache-2.0
//
// The cell-based supernet: every edge of every cell mixes all candidate
// operations under a softmax or sigmoid relaxation of the architecture
// weights. Also genotype derivation from those weights.
#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ssnas/json_keys.hpp"
#include "ssnas/modules.hpp"

namespace ssnas {

enum class Relaxation { softmax, sigmoid };

inline std::string_view relaxation_name(Relaxation r) { return r == Relaxation::softmax ? "softmax" : "sigmoid"; }
inline Relaxation relaxation_from_name(std::string_view s) {
  if (s == "softmax") return Relaxation::softmax;
  if (s == "sigmoid") return Relaxation::sigmoid;
  throw ParameterError("unknown relaxation '" + std::string(s) + "'");
}

struct EdgeId {
  int src = 0;
  int dst = 0;
};

/// Edges of a cell with `nodes` intermediate nodes. Nodes 0 and 1 are the
/// two cell inputs; intermediate node j is node j + 2 and receives an edge
/// from every earlier node.
inline std::vector<EdgeId> cell_edges(int nodes) {
  std::vector<EdgeId> out;
  for (int j = 0; j < nodes; ++j)
    for (int src = 0; src < j + 2; ++src) out.push_back({src, j + 2});
  return out;
}

inline std::size_t edge_index(int src, int dst) {
  // edges into node d (d >= 2) start after Σ_{t=2}^{d-1} t entries
  const auto d = static_cast<std::size_t>(dst);
  return (d * (d - 1)) / 2 - 1 + static_cast<std::size_t>(src);
}

struct SupernetConfig {
  int num_cells = 3;
  int nodes_per_cell = 4;
  Index init_channels = 8;
  Index input_channels = 3;
  Index input_side = 32;
  Index embed_dim = 128;
  Index stem_multiplier = 3;
  std::vector<OpKind> ops{kAllOps.begin(), kAllOps.end()};
  Relaxation relaxation = Relaxation::sigmoid;
  std::uint64_t seed = 0;  // weight initialisation

  /// Reduction cells sit at floor(k/3) and floor(2k/3), restricted to
  /// [1, k-2]; three cells give a single reduction at index 1.
  std::vector<bool> reduction_mask() const {
    std::vector<bool> mask(static_cast<std::size_t>(std::max(num_cells, 0)), false);
    for (int idx : {num_cells / 3, 2 * num_cells / 3})
      if (idx >= 1 && idx <= num_cells - 2) mask[static_cast<std::size_t>(idx)] = true;
    return mask;
  }

  void validate() const {
    if (num_cells < 1) throw ParameterError("supernet: num_cells must be >= 1");
    if (nodes_per_cell < 1) throw ParameterError("supernet: nodes_per_cell must be >= 1");
    if (init_channels < 2 || init_channels % 2) throw ParameterError("supernet: init_channels must be even and >= 2");
    if (input_channels < 1 || embed_dim < 1 || stem_multiplier < 1)
      throw ParameterError("supernet: channel counts must be positive");
    if (ops.empty()) throw ParameterError("supernet: empty candidate operation list");
    for (std::size_t i = 0; i < ops.size(); ++i)
      for (std::size_t j = i + 1; j < ops.size(); ++j)
        if (ops[i] == ops[j]) throw ParameterError("supernet: duplicate operation " + std::string(op_name(ops[i])));
    Index side = input_side;
    for (bool r : reduction_mask()) {
      if (r) {
        if (side % 2) throw ParameterError("supernet: input_side must stay even at every reduction");
        side /= 2;
      }
    }
    const auto mask = reduction_mask();
    for (std::size_t k = 1; k < mask.size(); ++k)
      if (mask[k] && mask[k - 1]) throw ParameterError("supernet: adjacent reduction cells are not supported");
    if (side < 1) throw ParameterError("supernet: input_side too small");
  }

  std::size_t op_slot(OpKind k) const {
    for (std::size_t i = 0; i < ops.size(); ++i)
      if (ops[i] == k) return i;
    throw StructuralError("operation " + std::string(op_name(k)) + " is not in the candidate set");
  }
};

inline nlohmann::json to_json(const SupernetConfig& c) {
  std::vector<std::string> names;
  for (auto k : c.ops) names.emplace_back(op_name(k));
  return {{"num_cells", c.num_cells},
          {"nodes_per_cell", c.nodes_per_cell},
          {"init_channels", c.init_channels},
          {"input_channels", c.input_channels},
          {"input_side", c.input_side},
          {"embed_dim", c.embed_dim},
          {"stem_multiplier", c.stem_multiplier},
          {"ops", names},
          {"relaxation", std::string(relaxation_name(c.relaxation))},
          {"seed", c.seed}};
}

inline SupernetConfig supernet_config_from_json(const nlohmann::json& j, SupernetConfig c = {}) {
  detail::check_keys(j, to_json(c), "supernet");
  c.num_cells = j.value("num_cells", c.num_cells);
  c.nodes_per_cell = j.value("nodes_per_cell", c.nodes_per_cell);
  c.init_channels = j.value("init_channels", c.init_channels);
  c.input_channels = j.value("input_channels", c.input_channels);
  c.input_side = j.value("input_side", c.input_side);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.stem_multiplier = j.value("stem_multiplier", c.stem_multiplier);
  if (j.contains("ops")) {
    c.ops.clear();
    for (const auto& n : j.at("ops")) c.ops.push_back(op_from_name(n.get<std::string>()));
  }
  if (j.contains("relaxation")) c.relaxation = relaxation_from_name(j.at("relaxation").get<std::string>());
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

/// Channel and resolution plan of one cell.
struct CellLayout {
  bool reduction = false;
  Index channels = 0;     // per intermediate node
  Index in0 = 0, in1 = 0;  // channels of the two inputs
  bool halve0 = false, halve1 = false;
  Index side = 0;  // working resolution
};

inline std::vector<CellLayout> cell_layouts(const SupernetConfig& cfg) {
  cfg.validate();
  std::vector<CellLayout> out;
  const auto mask = cfg.reduction_mask();
  const Index stem_c = cfg.stem_multiplier * cfg.init_channels;
  Index c_pp = stem_c, c_p = stem_c, side_pp = cfg.input_side, side_p = cfg.input_side;
  Index c = cfg.init_channels;
  for (int k = 0; k < cfg.num_cells; ++k) {
    CellLayout l;
    l.reduction = mask[static_cast<std::size_t>(k)];
    if (l.reduction) c *= 2;
    l.channels = c;
    l.in0 = c_pp;
    l.in1 = c_p;
    l.side = l.reduction ? side_p / 2 : side_p;
    l.halve0 = side_pp != l.side;
    l.halve1 = side_p != l.side;
    if ((l.halve0 && side_pp != 2 * l.side) || (l.halve1 && side_p != 2 * l.side))
      throw ParameterError("supernet: cell " + std::to_string(k) + " would need more than one halving");
    out.push_back(l);
    c_pp = c_p;
    side_pp = side_p;
    c_p = c * cfg.nodes_per_cell;
    side_p = l.side;
  }
  return out;
}

/// Architecture weights: one vector (one entry per candidate op) per edge,
/// shared by every cell of the same type.
template <class T>
struct ArchParams {
  Relaxation relaxation = Relaxation::sigmoid;
  std::vector<OpKind> ops;
  int nodes = 0;
  std::vector<Var<T>> normal, reduce;

  static ArchParams zeros(const SupernetConfig& cfg) {
    ArchParams a;
    a.relaxation = cfg.relaxation;
    a.ops = cfg.ops;
    a.nodes = cfg.nodes_per_cell;
    const auto n_edges = cell_edges(cfg.nodes_per_cell).size();
    const auto m = static_cast<Index>(cfg.ops.size());
    for (std::size_t e = 0; e < n_edges; ++e) {
      a.normal.push_back(Var<T>::leaf(Tensor<T>({m}), true));
      a.reduce.push_back(Var<T>::leaf(Tensor<T>({m}), true));
    }
    return a;
  }

  const std::vector<Var<T>>& cell(bool reduction) const { return reduction ? reduce : normal; }
  std::vector<Var<T>>& cell(bool reduction) { return reduction ? reduce : normal; }

  std::vector<Var<T>> all() const {
    std::vector<Var<T>> v = normal;
    v.insert(v.end(), reduce.begin(), reduce.end());
    return v;
  }

  /// Relaxed mixing weights of one edge.
  Var<T> mixing(const Var<T>& alpha) const {
    for (T v : alpha.value().values())
      if (!std::isfinite(v)) throw NumericError("architecture weight is not finite");
    return relaxation == Relaxation::softmax ? ops::softmax(alpha) : ops::sigmoid(alpha);
  }

  /// Edge-major E x M matrix of one cell type.
  Tensor<T> matrix(bool reduction) const {
    const auto& v = cell(reduction);
    const auto m = static_cast<Index>(ops.size());
    Tensor<T> t({static_cast<Index>(v.size()), m});
    for (std::size_t e = 0; e < v.size(); ++e)
      std::copy_n(v[e].value().data(), m, t.data() + static_cast<Index>(e) * m);
    return t;
  }
  void set_matrix(bool reduction, const Tensor<T>& t) {
    auto& v = cell(reduction);
    const auto m = static_cast<Index>(ops.size());
    if (t.rank() != 2 || t.dim(0) != static_cast<Index>(v.size()) || t.dim(1) != m)
      throw StructuralError("architecture matrix has shape " + shape_str(t.shape()));
    for (std::size_t e = 0; e < v.size(); ++e)
      std::copy_n(t.data() + static_cast<Index>(e) * m, m, v[e].mutable_value().data());
  }
};

/// Explicit per-(edge, op) mixing weights that bypass the relaxation.
/// Entries equal to 0 skip the op entirely.
struct PinnedWeights {
  std::vector<std::vector<double>> normal, reduce;
  const std::vector<std::vector<double>>& cell(bool reduction) const { return reduction ? reduce : normal; }
};

/// Σ_o w_o(α) · o(x) with w = softmax(α) or σ(α).
template <class T>
Var<T> mixed_edge_forward(const Var<T>& x, const Var<T>& alpha, Relaxation relaxation,
                          std::vector<CandidateOp<T>>& candidates, ForwardMode mode) {
  if (alpha.numel() != static_cast<Index>(candidates.size()))
    throw StructuralError("mixed edge: " + std::to_string(alpha.numel()) + " weights for " +
                          std::to_string(candidates.size()) + " operations");
  for (T v : alpha.value().values())
    if (!std::isfinite(v)) throw NumericError("mixed edge: architecture weight is not finite");
  const Var<T> w = relaxation == Relaxation::softmax ? ops::softmax(alpha) : ops::sigmoid(alpha);
  std::vector<Var<T>> ys;
  ys.reserve(candidates.size());
  for (auto& op : candidates) ys.push_back(op.is_zero() ? Var<T>() : op.forward(x, mode));
  return ops::weighted_sum(ys, w, x.shape());
}

/// Mixed edge under pinned weights; returns an empty Var when every
/// weight is zero.
template <class T>
Var<T> mixed_edge_pinned(const Var<T>& x, std::span<const double> weights, std::vector<CandidateOp<T>>& candidates,
                         ForwardMode mode) {
  std::vector<Var<T>> ys;
  Tensor<T> w({static_cast<Index>(candidates.size())});
  bool any = false;
  for (std::size_t m = 0; m < candidates.size(); ++m) {
    w[static_cast<Index>(m)] = static_cast<T>(weights[m]);
    if (weights[m] == 0.0 || candidates[m].is_zero()) {
      ys.emplace_back();
      continue;
    }
    ys.push_back(candidates[m].forward(x, mode));
    any = true;
  }
  if (!any) return {};
  return ops::weighted_sum(ys, Var<T>::constant(std::move(w)), x.shape());
}

template <class T>
struct SuperCell {
  CellLayout layout;
  Preprocess<T> pre0, pre1;
  std::vector<std::vector<CandidateOp<T>>> edges;  // [edge][op slot]
  int nodes = 0;

  /// Node j sums the mixed edges from all predecessors; the output
  /// concatenates the intermediate nodes along channels.
  Var<T> forward(const Var<T>& s0, const Var<T>& s1, const std::vector<Var<T>>& alphas, const ArchParams<T>& arch,
                 ForwardMode mode, const std::vector<std::vector<double>>* pinned = nullptr) {
    std::vector<Var<T>> states{pre0.forward(s0, mode), pre1.forward(s1, mode)};
    if (states[0].shape() != states[1].shape())
      throw StructuralError("cell inputs disagree after preprocessing: " + shape_str(states[0].shape()) + " vs " +
                            shape_str(states[1].shape()));
    if (!pinned && alphas.size() != edges.size())
      throw StructuralError("cell has " + std::to_string(edges.size()) + " edges but " +
                            std::to_string(alphas.size()) + " alpha vectors");
    std::vector<Var<T>> weights;
    if (!pinned)
      for (const auto& a : alphas) weights.push_back(arch.mixing(a));
    for (int j = 0; j < nodes; ++j) {
      const int dst = j + 2;
      std::vector<Var<T>> parts;
      for (int src = 0; src < dst; ++src) {
        const std::size_t e = edge_index(src, dst);
        Var<T> out;
        if (pinned) {
          out = mixed_edge_pinned<T>(states[static_cast<std::size_t>(src)], (*pinned)[e], edges[e], mode);
        } else {
          std::vector<Var<T>> ys;
          for (auto& op : edges[e])
            ys.push_back(op.is_zero() ? Var<T>() : op.forward(states[static_cast<std::size_t>(src)], mode));
          out = ops::weighted_sum(ys, weights[e], states[static_cast<std::size_t>(src)].shape());
        }
        if (!out) continue;
        if (out.shape() != states[0].shape())
          throw StructuralError("edge " + std::to_string(src) + "->" + std::to_string(dst) + " produced " +
                                shape_str(out.shape()) + ", expected " + shape_str(states[0].shape()));
        parts.push_back(out);
      }
      states.push_back(parts.empty() ? Var<T>::constant(Tensor<T>(states[0].shape())) : ops::add_n(parts));
    }
    return ops::concat_channels(std::vector<Var<T>>(states.begin() + 2, states.end()));
  }

  void visit(const std::string& prefix, const std::vector<OpKind>& kinds, StateVisitor<T>& v) {
    pre0.visit(prefix + ".pre0", v);
    pre1.visit(prefix + ".pre1", v);
    const auto ids = cell_edges(nodes);
    for (std::size_t e = 0; e < edges.size(); ++e)
      for (std::size_t m = 0; m < edges[e].size(); ++m)
        edges[e][m].visit(prefix + ".edges." + std::to_string(ids[e].src) + "_" + std::to_string(ids[e].dst) + "." +
                              std::string(op_name(kinds[m])),
                          v);
  }
};

inline std::string cell_prefix(int k) { return "cells." + std::to_string(k); }
inline std::string edge_op_prefix(int cell, int src, int dst, OpKind k) {
  return cell_prefix(cell) + ".edges." + std::to_string(src) + "_" + std::to_string(dst) + "." +
         std::string(op_name(k));
}

/// stem -> cells -> global average pool -> linear projection to embed_dim.
template <class T>
class Supernet {
 public:
  using scalar_type = T;

  explicit Supernet(SupernetConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    stem_ = Stem<T>(cfg_.input_channels, cfg_.stem_multiplier * cfg_.init_channels, cfg_.seed);
    const auto layouts = cell_layouts(cfg_);
    const auto ids = cell_edges(cfg_.nodes_per_cell);
    for (int k = 0; k < cfg_.num_cells; ++k) {
      const auto& l = layouts[static_cast<std::size_t>(k)];
      SuperCell<T> cell;
      cell.layout = l;
      cell.nodes = cfg_.nodes_per_cell;
      cell.pre0 = Preprocess<T>(l.in0, l.channels, l.halve0, cfg_.seed, cell_prefix(k) + ".pre0");
      cell.pre1 = Preprocess<T>(l.in1, l.channels, l.halve1, cfg_.seed, cell_prefix(k) + ".pre1");
      for (const auto& id : ids) {
        std::vector<CandidateOp<T>> ops;
        for (OpKind kind : cfg_.ops)
          ops.emplace_back(kind, l.channels, cfg_.seed, edge_op_prefix(k, id.src, id.dst, kind));
        cell.edges.push_back(std::move(ops));
      }
      cells_.push_back(std::move(cell));
    }
    proj_ = Linear<T>(layouts.back().channels * cfg_.nodes_per_cell, cfg_.embed_dim, cfg_.seed, "proj");
    arch_ = ArchParams<T>::zeros(cfg_);
  }

  const SupernetConfig& config() const { return cfg_; }
  ArchParams<T>& arch() { return arch_; }
  const ArchParams<T>& arch() const { return arch_; }
  std::vector<SuperCell<T>>& cells() { return cells_; }
  Stem<T>& stem() { return stem_; }
  Linear<T>& proj() { return proj_; }

  Var<T> forward(const Tensor<T>& images, ForwardMode mode, const PinnedWeights* pinned = nullptr) {
    check_input(images);
    Var<T> s = stem_.forward(Var<T>::constant(images), mode);
    Var<T> s0 = s, s1 = s;
    for (auto& cell : cells_) {
      const bool red = cell.layout.reduction;
      Var<T> out = cell.forward(s0, s1, arch_.cell(red), arch_, mode, pinned ? &pinned->cell(red) : nullptr);
      s0 = s1;
      s1 = out;
    }
    return proj_.forward(ops::global_avg_pool(s1));
  }

  /// Network weights ω and batch-norm buffers (α excluded).
  void visit(StateVisitor<T>& v) {
    stem_.visit("stem", v);
    for (std::size_t k = 0; k < cells_.size(); ++k) cells_[k].visit(cell_prefix(static_cast<int>(k)), cfg_.ops, v);
    proj_.visit("proj", v);
  }

  std::vector<Var<T>> weight_params() {
    std::vector<Var<T>> out;
    StateVisitor<T> v;
    v.param = [&](const std::string&, Var<T>& p) { out.push_back(p); };
    visit(v);
    return out;
  }
  std::vector<Var<T>> arch_params() const { return arch_.all(); }

  void check_input(const Tensor<T>& images) const {
    if (images.rank() != 4 || images.dim(1) != cfg_.input_channels || images.dim(2) != cfg_.input_side ||
        images.dim(3) != cfg_.input_side)
      throw StructuralError("supernet expects B x " + std::to_string(cfg_.input_channels) + " x " +
                            std::to_string(cfg_.input_side) + " x " + std::to_string(cfg_.input_side) +
                            " input, got " + shape_str(images.shape()));
  }

 private:
  SupernetConfig cfg_;
  Stem<T> stem_;
  std::vector<SuperCell<T>> cells_;
  Linear<T> proj_;
  ArchParams<T> arch_;
};

/// Exact count of trainable scalars reported by a module's visitor.
template <class T, class Model>
Index count_parameters(Model& model) {
  Index n = 0;
  StateVisitor<T> v;
  v.param = [&](const std::string&, Var<T>& p) { n += p.numel(); };
  if constexpr (requires { model.visit(v); })
    model.visit(v);
  else
    model.visit("", v);
  return n;
}

template <class Model>
Index count_parameters(Model& model) {
  return count_parameters<typename Model::scalar_type>(model);
}

// ---------------------------------------------------------------------------
// Genotype
// ---------------------------------------------------------------------------

struct GenotypeEdge {
  int src = 0;
  int dst = 0;
  OpKind op = OpKind::zero;
  auto operator<=>(const GenotypeEdge&) const = default;
};

struct Genotype {
  Relaxation relaxation = Relaxation::sigmoid;
  double threshold = 0.75;
  std::vector<GenotypeEdge> normal, reduce;

  const std::vector<GenotypeEdge>& cell(bool reduction) const { return reduction ? reduce : normal; }
  bool operator==(const Genotype&) const = default;
};

enum class DeriveMode { argmax_top2, sigmoid_threshold };

inline DeriveMode derive_mode_from_name(std::string_view s) {
  if (s == "argmax_top2") return DeriveMode::argmax_top2;
  if (s == "sigmoid_threshold") return DeriveMode::sigmoid_threshold;
  throw ParameterError("unknown derivation mode '" + std::string(s) + "'");
}

namespace detail {
/// One cell type: alpha[e][m] over cell_edges(nodes) and ops.
inline std::vector<GenotypeEdge> derive_cell(const std::vector<std::vector<double>>& alpha,
                                             const std::vector<OpKind>& kinds, int nodes, DeriveMode mode,
                                             double threshold) {
  std::vector<GenotypeEdge> out;
  const auto sigma = [](double a) { return 1.0 / (1.0 + std::exp(-a)); };
  for (int j = 0; j < nodes; ++j) {
    const int dst = j + 2;
    if (mode == DeriveMode::argmax_top2) {
      struct Pick {
        int src;
        std::size_t m;
        double a;
      };
      std::vector<Pick> picks;
      for (int src = 0; src < dst; ++src) {
        const auto& row = alpha[edge_index(src, dst)];
        std::optional<std::size_t> best;
        for (std::size_t m = 0; m < kinds.size(); ++m) {
          if (kinds[m] == OpKind::zero) continue;
          if (!best || row[m] > row[*best]) best = m;
        }
        if (best) picks.push_back({src, *best, row[*best]});
      }
      std::stable_sort(picks.begin(), picks.end(), [](const Pick& x, const Pick& y) { return x.a > y.a; });
      picks.resize(std::min<std::size_t>(2, picks.size()));
      for (const auto& p : picks) out.push_back({p.src, dst, kinds[p.m]});
    } else {
      std::size_t kept = 0;
      std::optional<GenotypeEdge> fallback;
      std::size_t fb_m = 0;
      double fb_a = 0.0;
      for (int src = 0; src < dst; ++src) {
        const auto& row = alpha[edge_index(src, dst)];
        for (std::size_t m = 0; m < kinds.size(); ++m) {
          if (kinds[m] == OpKind::zero) continue;
          if (sigma(row[m]) > threshold) {
            out.push_back({src, dst, kinds[m]});
            ++kept;
          }
          // max alpha, then lowest op index, then lowest source
          if (!fallback || row[m] > fb_a || (row[m] == fb_a && m < fb_m)) {
            fallback = GenotypeEdge{src, dst, kinds[m]};
            fb_m = m;
            fb_a = row[m];
          }
        }
      }
      if (kept == 0 && fallback) out.push_back(*fallback);
    }
  }
  std::sort(out.begin(), out.end(), [&](const GenotypeEdge& x, const GenotypeEdge& y) {
    if (x.dst != y.dst) return x.dst < y.dst;
    if (x.src != y.src) return x.src < y.src;
    return static_cast<int>(x.op) < static_cast<int>(y.op);
  });
  return out;
}
}  // namespace detail

/// Discrete architecture from the relaxed weights. `argmax_top2` keeps the
/// best non-zero op per edge and the two strongest edges per node;
/// `sigmoid_threshold` keeps every non-zero (edge, op) with σ(α) above the
/// threshold and falls back to a node's single best entry.
template <class T>
Genotype derive_genotype(const ArchParams<T>& arch, DeriveMode mode, double threshold = 0.75) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ParameterError("derive_genotype: threshold must lie in (0, 1)");
  Genotype g;
  g.relaxation = arch.relaxation;
  g.threshold = threshold;
  for (bool red : {false, true}) {
    std::vector<std::vector<double>> a;
    for (const auto& v : arch.cell(red)) {
      std::vector<double> row;
      for (T x : v.value().values()) {
        if (!std::isfinite(x)) throw NumericError("derive_genotype: architecture weight is not finite");
        row.push_back(static_cast<double>(x));
      }
      a.push_back(std::move(row));
    }
    (red ? g.reduce : g.normal) = detail::derive_cell(a, arch.ops, arch.nodes, mode, threshold);
  }
  return g;
}

inline void validate_genotype(const Genotype& g, const SupernetConfig& cfg) {
  for (bool red : {false, true}) {
    std::vector<int> incoming(static_cast<std::size_t>(cfg.nodes_per_cell + 2), 0);
    for (const auto& e : g.cell(red)) {
      if (e.dst < 2 || e.dst >= cfg.nodes_per_cell + 2 || e.src < 0 || e.src >= e.dst)
        throw StructuralError("genotype edge " + std::to_string(e.src) + "->" + std::to_string(e.dst) +
                              " does not fit a cell with " + std::to_string(cfg.nodes_per_cell) + " nodes");
      if (e.op == OpKind::zero) throw StructuralError("genotype retains a zero operation");
      if (std::find(cfg.ops.begin(), cfg.ops.end(), e.op) == cfg.ops.end())
        throw StructuralError("genotype uses " + std::string(op_name(e.op)) + " which is not a candidate op");
      ++incoming[static_cast<std::size_t>(e.dst)];
    }
    for (int d = 2; d < cfg.nodes_per_cell + 2; ++d)
      if (incoming[static_cast<std::size_t>(d)] == 0)
        throw StructuralError(std::string(red ? "reduce" : "normal") + " cell node " + std::to_string(d) +
                              " has no incoming edge");
  }
}

/// Mixing weights selecting exactly the genotype's operations.
inline PinnedWeights pinned_from_genotype(const Genotype& g, const SupernetConfig& cfg) {
  PinnedWeights p;
  const auto n_edges = cell_edges(cfg.nodes_per_cell).size();
  for (bool red : {false, true}) {
    auto& w = red ? p.reduce : p.normal;
    w.assign(n_edges, std::vector<double>(cfg.ops.size(), 0.0));
    for (const auto& e : g.cell(red)) w[edge_index(e.src, e.dst)][cfg.op_slot(e.op)] = 1.0;
  }
  return p;
}

inline nlohmann::json to_json(const Genotype& g) {
  auto cell = [](const std::vector<GenotypeEdge>& es) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& e : es) a.push_back(nlohmann::json::array({e.src, e.dst, std::string(op_name(e.op))}));
    return a;
  };
  return {{"relaxation", std::string(relaxation_name(g.relaxation))},
          {"threshold", g.threshold},
          {"normal", cell(g.normal)},
          {"reduce", cell(g.reduce)}};
}

inline Genotype genotype_from_json(const nlohmann::json& j) {
  Genotype g;
  g.relaxation = relaxation_from_name(j.at("relaxation").get<std::string>());
  g.threshold = j.at("threshold").get<double>();
  for (bool red : {false, true}) {
    auto& dst = red ? g.reduce : g.normal;
    for (const auto& e : j.at(red ? "reduce" : "normal"))
      dst.push_back({e.at(0).get<int>(), e.at(1).get<int>(), op_from_name(e.at(2).get<std::string>())});
  }
  return g;
}

inline std::string genotype_json_string(const Genotype& g) { return to_json(g).dump(2) + "\n"; }

}  // namespace ssnas
