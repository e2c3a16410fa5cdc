// SPDX-License-Identifier: Apache-2.0
//
// The discrete network obtained from a genotype. Discretization copies the
// retained operations (weights and batch-norm buffers) out of the supernet
// so the searched weights carry over into fine-tuning.
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ssnas/supernet.hpp"

namespace ssnas {

template <class T>
struct DiscreteEdge {
  int src = 0;
  int dst = 0;
  CandidateOp<T> op;
};

template <class T>
struct DiscreteCell {
  CellLayout layout;
  Preprocess<T> pre0, pre1;
  std::vector<DiscreteEdge<T>> edges;  // sorted by (dst, src, op)
  int nodes = 0;

  Var<T> forward(const Var<T>& s0, const Var<T>& s1, ForwardMode mode) {
    std::vector<Var<T>> states{pre0.forward(s0, mode), pre1.forward(s1, mode)};
    for (int j = 0; j < nodes; ++j) {
      const int dst = j + 2;
      std::vector<Var<T>> parts;
      for (auto& e : edges)
        if (e.dst == dst) parts.push_back(e.op.forward(states[static_cast<std::size_t>(e.src)], mode));
      states.push_back(parts.empty() ? Var<T>::constant(Tensor<T>(states[0].shape())) : ops::add_n(parts));
    }
    return ops::concat_channels(std::vector<Var<T>>(states.begin() + 2, states.end()));
  }

  void visit(const std::string& prefix, StateVisitor<T>& v) {
    pre0.visit(prefix + ".pre0", v);
    pre1.visit(prefix + ".pre1", v);
    for (auto& e : edges)
      e.op.visit(prefix + ".edges." + std::to_string(e.src) + "_" + std::to_string(e.dst) + "." +
                     std::string(op_name(e.op.kind)),
                 v);
  }
};

/// Stacked discrete cells with stem, global pooling, projection to
/// embed_dim and an optional classifier head.
template <class T>
class Network {
 public:
  using scalar_type = T;

  Network() = default;

  /// Freshly initialised network for a genotype.
  Network(SupernetConfig cfg, Genotype genotype) : cfg_(std::move(cfg)), genotype_(std::move(genotype)) {
    cfg_.validate();
    validate_genotype(genotype_, cfg_);
    stem_ = Stem<T>(cfg_.input_channels, cfg_.stem_multiplier * cfg_.init_channels, cfg_.seed);
    const auto layouts = cell_layouts(cfg_);
    for (int k = 0; k < cfg_.num_cells; ++k) {
      const auto& l = layouts[static_cast<std::size_t>(k)];
      DiscreteCell<T> cell;
      cell.layout = l;
      cell.nodes = cfg_.nodes_per_cell;
      cell.pre0 = Preprocess<T>(l.in0, l.channels, l.halve0, cfg_.seed, cell_prefix(k) + ".pre0");
      cell.pre1 = Preprocess<T>(l.in1, l.channels, l.halve1, cfg_.seed, cell_prefix(k) + ".pre1");
      for (const auto& e : genotype_.cell(l.reduction))
        cell.edges.push_back({e.src, e.dst, CandidateOp<T>(e.op, l.channels, cfg_.seed,
                                                           edge_op_prefix(k, e.src, e.dst, e.op))});
      cells_.push_back(std::move(cell));
    }
    proj_ = Linear<T>(layouts.back().channels * cfg_.nodes_per_cell, cfg_.embed_dim, cfg_.seed, "proj");
  }

  const SupernetConfig& config() const { return cfg_; }
  const Genotype& genotype() const { return genotype_; }
  std::vector<DiscreteCell<T>>& cells() { return cells_; }
  Stem<T>& stem() { return stem_; }
  Linear<T>& proj() { return proj_; }
  bool has_head() const { return head_.has_value(); }
  Linear<T>& head() { return head_.value(); }
  Index num_classes() const { return head_ ? head_->out_features() : 0; }

  /// Trunk features (B x embed_dim) before the head.
  Var<T> embed(const Tensor<T>& images, ForwardMode mode) {
    if (images.rank() != 4 || images.dim(1) != cfg_.input_channels || images.dim(2) != cfg_.input_side ||
        images.dim(3) != cfg_.input_side)
      throw StructuralError("network expects B x " + std::to_string(cfg_.input_channels) + " x " +
                            std::to_string(cfg_.input_side) + " x " + std::to_string(cfg_.input_side) +
                            " input, got " + shape_str(images.shape()));
    Var<T> s = stem_.forward(Var<T>::constant(images), mode);
    Var<T> s0 = s, s1 = s;
    for (auto& cell : cells_) {
      Var<T> out = cell.forward(s0, s1, mode);
      s0 = s1;
      s1 = out;
    }
    return proj_.forward(ops::global_avg_pool(s1));
  }

  /// B x embed_dim without a head, B x L with one.
  Var<T> forward(const Tensor<T>& images, ForwardMode mode) {
    Var<T> z = embed(images, mode);
    return head_ ? head_->forward(z) : z;
  }

  void visit(StateVisitor<T>& v) {
    stem_.visit("stem", v);
    for (std::size_t k = 0; k < cells_.size(); ++k) cells_[k].visit(cell_prefix(static_cast<int>(k)), v);
    proj_.visit("proj", v);
    if (head_) head_->visit("head", v);
  }

  std::vector<Var<T>> params() {
    std::vector<Var<T>> out;
    StateVisitor<T> v;
    v.param = [&](const std::string&, Var<T>& p) { out.push_back(p); };
    visit(v);
    return out;
  }

  void set_head(std::optional<Linear<T>> h) { head_ = std::move(h); }

  void reset_running_stats() {
    StateVisitor<T> v;
    v.buffer = [](const std::string& name, Tensor<T>& t) {
      t.fill(name.ends_with(".running_var") ? T{1} : T{0});
    };
    visit(v);
  }

  Network clone() const {
    Network n;
    n.cfg_ = cfg_;
    n.genotype_ = genotype_;
    n.stem_ = stem_.clone();
    for (const auto& c : cells_) {
      DiscreteCell<T> d;
      d.layout = c.layout;
      d.nodes = c.nodes;
      d.pre0 = c.pre0.clone();
      d.pre1 = c.pre1.clone();
      for (const auto& e : c.edges) d.edges.push_back({e.src, e.dst, e.op.clone()});
      n.cells_.push_back(std::move(d));
    }
    n.proj_ = proj_.clone();
    if (head_) n.head_ = head_->clone();
    return n;
  }

 private:
  SupernetConfig cfg_;
  Genotype genotype_;
  Stem<T> stem_;
  std::vector<DiscreteCell<T>> cells_;
  Linear<T> proj_;
  std::optional<Linear<T>> head_;
};

/// Keeps exactly the genotype's operations of the supernet, copying their
/// trained weights and batch-norm buffers bit-for-bit.
template <class T>
Network<T> discretize_and_retain_weights(Supernet<T>& supernet, const Genotype& genotype) {
  const auto& cfg = supernet.config();
  validate_genotype(genotype, cfg);
  Network<T> net(cfg, genotype);
  net.stem() = supernet.stem().clone();
  net.proj() = supernet.proj().clone();
  for (std::size_t k = 0; k < net.cells().size(); ++k) {
    auto& dc = net.cells()[k];
    auto& sc = supernet.cells()[k];
    dc.pre0 = sc.pre0.clone();
    dc.pre1 = sc.pre1.clone();
    for (auto& e : dc.edges) e.op = sc.edges[edge_index(e.src, e.dst)][cfg.op_slot(e.op.kind)].clone();
  }
  return net;
}

/// Appends an embed_dim -> num_classes affine head; the trunk stays trainable.
template <class T>
void attach_head(Network<T>& net, Index num_classes, std::uint64_t seed) {
  if (net.has_head()) throw StructuralError("attach_head: network already has a head");
  if (num_classes < 2) throw ParameterError("attach_head: need at least 2 classes");
  net.set_head(Linear<T>(net.config().embed_dim, num_classes, seed, "head"));
}

template <class T>
void replace_head(Network<T>& net, Index num_classes, std::uint64_t seed) {
  net.set_head(std::nullopt);
  attach_head(net, num_classes, seed);
}

}  // namespace ssnas
