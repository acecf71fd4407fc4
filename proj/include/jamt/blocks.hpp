#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "jamt/tensor.hpp"

namespace jamt {

struct Parameter {
  enum class Group { EncDec, Glu, Bert };

  std::string name;
  Tensor tensor;  // requires_grad is always true
  bool trainable = true;
  Group group = Group::EncDec;

  Parameter() = default;
  Parameter(std::string n, Tensor t, Group g)
      : name(std::move(n)), tensor(std::move(t)), group(g) {
    tensor.set_requires_grad(true);
  }
};

// Visitation order defines the checkpoint record order.
using ParamVisitor = std::function<void(Parameter&)>;

Tensor xavier_uniform(std::vector<int> shape, RngStream& rng);

class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in, int out, RngStream& rng,
         Parameter::Group group);

  // y = x W + b with x: [n x in]
  Tensor forward(const Tensor& x) const;
  void visit(const ParamVisitor& fn);
  int in_dim() const { return in_; }
  int out_dim() const { return out_; }

  Parameter w;  // [in x out]
  Parameter b;  // [out]

 private:
  int in_ = 0;
  int out_ = 0;
};

class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(const std::string& name, int vocab, int dim, RngStream& rng,
                 Parameter::Group group);

  Tensor lookup(const std::vector<int>& ids) const;
  void visit(const ParamVisitor& fn);
  int vocab() const { return vocab_; }
  int dim() const { return dim_; }

  Parameter weights;  // [vocab x dim]

 private:
  int vocab_ = 0;
  int dim_ = 0;
};

// Adds the fixed sinusoidal position signal to an embedded sequence.
Tensor positional_encode(const Tensor& embedded, int max_len);

class LayerNormBlock {
 public:
  LayerNormBlock() = default;
  LayerNormBlock(const std::string& name, int dim, Parameter::Group group);

  Tensor forward(const Tensor& x) const;
  void visit(const ParamVisitor& fn);

  Parameter gain;
  Parameter bias;
  real_t eps = static_cast<real_t>(1e-5);
};

class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(const std::string& name, int dim, int hidden, real_t dropout,
              RngStream& rng, Parameter::Group group);

  Tensor forward(const Tensor& x, bool training, RngStream& rng) const;
  void visit(const ParamVisitor& fn);

  Linear lin1;
  Linear lin2;
  real_t dropout_rate = 0;
};

struct JointAttentionConfig {
  int d_model = 0;
  int n_heads = 1;
  real_t attn_dropout = 0;
  // scale logits by 1/sqrt(d_head); the alternative divides by
  // sqrt(d_model) for every head
  bool scale_per_head = true;
  // width of the secondary sequence; empty means the block is plain
  // self-attention and owns no secondary projections
  std::optional<int> secondary_dim;
};

// Queries from the primary sequence attend over the concatenation of
// primary and secondary key/value projections. An absent or zero-length
// secondary reduces the block to multi-head self-attention.
class JointAttentionBlock {
 public:
  JointAttentionBlock() = default;
  JointAttentionBlock(const std::string& name, const JointAttentionConfig& cfg,
                      RngStream& rng, Parameter::Group group);

  // primary: [n x d_model], secondary: [m x secondary_dim] or nullptr,
  // primary_mask: [n x n], secondary_mask: [n x m]
  Tensor forward(const Tensor& primary, const Tensor* secondary,
                 const Mask& primary_mask, const Mask& secondary_mask,
                 bool training, RngStream& rng) const;
  void visit(const ParamVisitor& fn);
  const JointAttentionConfig& config() const { return cfg_; }
  bool has_secondary() const { return cfg_.secondary_dim.has_value(); }

  Linear q_proj, k_proj, v_proj;    // primary side
  Linear ks_proj, vs_proj;          // secondary side, when configured
  Linear out_proj;

 private:
  JointAttentionConfig cfg_;
};

enum class CombinerMode {
  Gated,        // sigma-gated linear combination of all states
  WeightedSum,  // gateless learned weighted sum of all states
  LastLayer     // hard-wired passthrough of the final state
};

std::string combiner_mode_name(CombinerMode m);
CombinerMode combiner_mode_from(const std::string& s);

// Mixes the per-layer states of the pre-trained encoder into one composite
// representation. Gated mode computes g = sigma(sum beta_i B_i) and returns
// g (*) (sum alpha_i B_i), doubled while compensation is active.
class GluCombiner {
 public:
  GluCombiner() = default;
  GluCombiner(const std::string& name, int n_states, CombinerMode mode);

  Tensor combine(const std::vector<Tensor>& states) const;
  // Scales alpha by 2 and clears the compensation flag; the computed
  // function is unchanged.
  void fold_compensation();
  void visit(const ParamVisitor& fn);

  CombinerMode mode = CombinerMode::Gated;
  int n_states = 0;
  bool compensation_active = false;
  Parameter alpha;  // [n_states], init (0, ..., 0, 1)
  Parameter beta;   // [n_states], init 0, gated mode only
};

Tensor glu_combine(const std::vector<Tensor>& states,
                   const GluCombiner& combiner);

}  // namespace jamt
