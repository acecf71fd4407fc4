#include "jamt/blocks.hpp"

#include <cmath>

namespace jamt {

Tensor xavier_uniform(std::vector<int> shape, RngStream& rng) {
  int64_t fan_in = shape.size() >= 2 ? shape[0] : 1;
  int64_t fan_out = shape.back();
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.raw_data())
    v = static_cast<real_t>(rng.next_uniform(-bound, bound));
  return t;
}

// ---- Linear ----

Linear::Linear(const std::string& name, int in, int out, RngStream& rng,
               Parameter::Group group)
    : in_(in), out_(out) {
  w = Parameter(name + ".w", xavier_uniform({in, out}, rng), group);
  b = Parameter(name + ".b", Tensor::zeros({out}), group);
}

Tensor Linear::forward(const Tensor& x) const {
  return add_row_bias(matmul(x, w.tensor), b.tensor);
}

void Linear::visit(const ParamVisitor& fn) {
  fn(w);
  fn(b);
}

// ---- EmbeddingTable ----

EmbeddingTable::EmbeddingTable(const std::string& name, int vocab, int dim,
                               RngStream& rng, Parameter::Group group)
    : vocab_(vocab), dim_(dim) {
  Tensor t = Tensor::zeros({vocab, dim});
  double sd = 1.0 / std::sqrt(static_cast<double>(dim));
  for (auto& v : t.raw_data()) v = static_cast<real_t>(rng.next_normal() * sd);
  weights = Parameter(name + ".weight", std::move(t), group);
}

Tensor EmbeddingTable::lookup(const std::vector<int>& ids) const {
  return embedding_rows(weights.tensor, ids);
}

void EmbeddingTable::visit(const ParamVisitor& fn) { fn(weights); }

// ---- positional encoding ----

Tensor positional_encode(const Tensor& embedded, int max_len) {
  int n = embedded.rows();
  int d = embedded.cols();
  if (n > max_len)
    throw DataError("positional_encode: sequence of " + std::to_string(n) +
                    " exceeds the maximum of " + std::to_string(max_len));
  if (d % 2 != 0)
    throw ShapeError("positional_encode: model width must be even, got " +
                     std::to_string(d));
  Tensor pe = Tensor::zeros({n, d});
  auto out = pe.raw_data();
  for (int pos = 0; pos < n; ++pos)
    for (int i = 0; i < d / 2; ++i) {
      double angle = pos * std::pow(10000.0, -2.0 * i / d);
      out[static_cast<size_t>(pos) * d + 2 * i] =
          static_cast<real_t>(std::sin(angle));
      out[static_cast<size_t>(pos) * d + 2 * i + 1] =
          static_cast<real_t>(std::cos(angle));
    }
  return add(embedded, pe);
}

// ---- LayerNormBlock ----

LayerNormBlock::LayerNormBlock(const std::string& name, int dim,
                               Parameter::Group group) {
  gain = Parameter(name + ".gain", Tensor::constant({dim}, 1), group);
  bias = Parameter(name + ".bias", Tensor::zeros({dim}), group);
}

Tensor LayerNormBlock::forward(const Tensor& x) const {
  return layer_norm(x, gain.tensor, bias.tensor, eps);
}

void LayerNormBlock::visit(const ParamVisitor& fn) {
  fn(gain);
  fn(bias);
}

// ---- FeedForward ----

FeedForward::FeedForward(const std::string& name, int dim, int hidden,
                         real_t dropout, RngStream& rng,
                         Parameter::Group group)
    : lin1(name + ".lin1", dim, hidden, rng, group),
      lin2(name + ".lin2", hidden, dim, rng, group),
      dropout_rate(dropout) {}

Tensor FeedForward::forward(const Tensor& x, bool training,
                            RngStream& rng) const {
  Tensor h = relu(lin1.forward(x));
  h = dropout(h, dropout_rate, rng, training);
  return lin2.forward(h);
}

void FeedForward::visit(const ParamVisitor& fn) {
  lin1.visit(fn);
  lin2.visit(fn);
}

// ---- JointAttentionBlock ----

JointAttentionBlock::JointAttentionBlock(const std::string& name,
                                         const JointAttentionConfig& cfg,
                                         RngStream& rng,
                                         Parameter::Group group)
    : cfg_(cfg) {
  if (cfg.d_model % cfg.n_heads != 0)
    throw UsageError("joint attention: d_model " +
                     std::to_string(cfg.d_model) + " not divisible by " +
                     std::to_string(cfg.n_heads) + " heads");
  int d = cfg.d_model;
  q_proj = Linear(name + ".q", d, d, rng, group);
  k_proj = Linear(name + ".k", d, d, rng, group);
  v_proj = Linear(name + ".v", d, d, rng, group);
  if (cfg.secondary_dim) {
    ks_proj = Linear(name + ".ks", *cfg.secondary_dim, d, rng, group);
    vs_proj = Linear(name + ".vs", *cfg.secondary_dim, d, rng, group);
  }
  out_proj = Linear(name + ".out", d, d, rng, group);
}

Tensor JointAttentionBlock::forward(const Tensor& primary,
                                    const Tensor* secondary,
                                    const Mask& primary_mask,
                                    const Mask& secondary_mask, bool training,
                                    RngStream& rng) const {
  int n = primary.rows();
  int d = cfg_.d_model;
  if (primary.cols() != d)
    throw ShapeError("joint attention: primary " + shape_str(primary.shape()) +
                     " but d_model " + std::to_string(d));
  int m = secondary && secondary->defined() ? secondary->rows() : 0;
  if (m > 0 && !cfg_.secondary_dim)
    throw ShapeError(
        "joint attention: secondary input on a block without "
        "secondary projections");
  if (primary_mask.shape != std::vector<int>{n, n})
    throw ShapeError("joint attention: primary mask " +
                     shape_str(primary_mask.shape) + " for n=" +
                     std::to_string(n));
  if (secondary_mask.shape != std::vector<int>{n, m})
    throw ShapeError("joint attention: secondary mask " +
                     shape_str(secondary_mask.shape) + " for n=" +
                     std::to_string(n) + ", m=" + std::to_string(m));

  Tensor q = q_proj.forward(primary);
  Tensor k = k_proj.forward(primary);
  Tensor v = v_proj.forward(primary);
  if (m > 0) {
    k = concat_rows(k, ks_proj.forward(*secondary));
    v = concat_rows(v, vs_proj.forward(*secondary));
  }

  // joint attendability over the n + m key positions
  Mask joint({n, n + m}, false);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) joint.at(r, c) = primary_mask.at(r, c);
    for (int c = 0; c < m; ++c) joint.at(r, n + c) = secondary_mask.at(r, c);
  }

  int dh = d / cfg_.n_heads;
  real_t scale = static_cast<real_t>(
      1.0 / std::sqrt(static_cast<double>(cfg_.scale_per_head ? dh : d)));
  std::vector<Tensor> heads;
  heads.reserve(cfg_.n_heads);
  for (int h = 0; h < cfg_.n_heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, dh);
    Tensor kh = slice_cols(k, h * dh, dh);
    Tensor vh = slice_cols(v, h * dh, dh);
    Tensor scores = scalar_mul(matmul(qh, transpose2d(kh)), scale);
    Tensor weights = masked_softmax(scores, joint);
    weights = dropout(weights, cfg_.attn_dropout, rng, training);
    heads.push_back(matmul(weights, vh));
  }
  Tensor ctx = cfg_.n_heads == 1 ? heads[0] : concat_cols(heads);
  return out_proj.forward(ctx);
}

void JointAttentionBlock::visit(const ParamVisitor& fn) {
  q_proj.visit(fn);
  k_proj.visit(fn);
  v_proj.visit(fn);
  if (cfg_.secondary_dim) {
    ks_proj.visit(fn);
    vs_proj.visit(fn);
  }
  out_proj.visit(fn);
}

// ---- GluCombiner ----

std::string combiner_mode_name(CombinerMode m) {
  switch (m) {
    case CombinerMode::Gated:
      return "gated";
    case CombinerMode::WeightedSum:
      return "weighted_sum";
    case CombinerMode::LastLayer:
      return "last_layer";
  }
  return "gated";
}

CombinerMode combiner_mode_from(const std::string& s) {
  if (s == "gated") return CombinerMode::Gated;
  if (s == "weighted_sum") return CombinerMode::WeightedSum;
  if (s == "last_layer") return CombinerMode::LastLayer;
  throw UsageError("unknown combiner mode: " + s);
}

GluCombiner::GluCombiner(const std::string& name, int n, CombinerMode m)
    : mode(m), n_states(n) {
  if (n < 1) throw UsageError("combiner: need at least one state");
  if (mode == CombinerMode::LastLayer) return;
  Tensor a = Tensor::zeros({n});
  a.raw_data()[n - 1] = 1;
  alpha = Parameter(name + ".alpha", std::move(a), Parameter::Group::Glu);
  if (mode == CombinerMode::Gated)
    beta =
        Parameter(name + ".beta", Tensor::zeros({n}), Parameter::Group::Glu);
}

Tensor GluCombiner::combine(const std::vector<Tensor>& states) const {
  if (static_cast<int>(states.size()) != n_states)
    throw ShapeError("combiner: expected " + std::to_string(n_states) +
                     " states, got " + std::to_string(states.size()));
  switch (mode) {
    case CombinerMode::LastLayer:
      return states.back();
    case CombinerMode::WeightedSum:
      return weighted_sum(states, alpha.tensor);
    case CombinerMode::Gated: {
      Tensor mix = weighted_sum(states, alpha.tensor);
      Tensor gate = sigmoid(weighted_sum(states, beta.tensor));
      Tensor out = mul(gate, mix);
      return compensation_active ? scalar_mul(out, 2) : out;
    }
  }
  throw UsageError("combiner: invalid mode");
}

void GluCombiner::fold_compensation() {
  if (!compensation_active) return;
  for (auto& v : alpha.tensor.raw_data()) v *= 2;
  compensation_active = false;
}

void GluCombiner::visit(const ParamVisitor& fn) {
  if (mode == CombinerMode::LastLayer) return;
  fn(alpha);
  if (mode == CombinerMode::Gated) fn(beta);
}

Tensor glu_combine(const std::vector<Tensor>& states,
                   const GluCombiner& combiner) {
  return combiner.combine(states);
}

}  // namespace jamt
