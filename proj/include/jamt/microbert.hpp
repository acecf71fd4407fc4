#pragma once

#include <memory>
#include <string>
#include <vector>

#include "jamt/blocks.hpp"
#include "jamt/data.hpp"
#include "jamt/optim.hpp"

#include <nlohmann/json_fwd.hpp>

namespace jamt {

struct MicroBertConfig {
  int layers = 2;        // L_B
  int dim = 32;          // H_B
  int n_heads = 4;
  int d_ff = 64;
  real_t dropout = static_cast<real_t>(0.1);
  int max_len = 256;
  int vocab = 0;
  real_t mask_rate = static_cast<real_t>(0.15);

  void validate() const;
  nlohmann::json to_json() const;
  static MicroBertConfig from_json(const nlohmann::json& j);
};

// Ordered per-layer representations for one source sentence. Reads through
// layer() are counted so structural variants can prove which layers they
// touch.
struct BertStates {
  std::vector<Tensor> layers;
  std::vector<uint8_t> pad;  // true marks a real (non-pad) position
  mutable std::vector<int64_t> reads;

  const Tensor& layer(size_t i) const {
    ++reads[i];
    return layers[i];
  }
  size_t count() const { return layers.size(); }
  int seq_len() const { return layers.empty() ? 0 : layers[0].rows(); }

  // Zero-length states standing in for an absent secondary sequence.
  static BertStates empty(int n_layers, int dim);
};

class MicroBert {
 public:
  MicroBert(const MicroBertConfig& cfg, RngStream init_rng);
  MicroBert(const MicroBert&) = delete;
  MicroBert& operator=(const MicroBert&) = delete;

  // Outputs of every encoder layer; the embedding output is not included.
  BertStates encode_all_layers(const TokenIds& tokens, bool training,
                               RngStream& rng) const;
  // Vocabulary logits over the last layer, for masked-token prediction.
  Tensor mlm_logits(const TokenIds& tokens, bool training,
                    RngStream& rng) const;

  void visit_params(const ParamVisitor& fn);
  const MicroBertConfig& config() const { return cfg_; }

 private:
  struct Layer {
    JointAttentionBlock attn;
    LayerNormBlock norm1;
    FeedForward ffn;
    LayerNormBlock norm2;
  };

  MicroBertConfig cfg_;
  EmbeddingTable emb_;
  std::vector<Layer> layers_;
  Linear mlm_head_;
};

struct MaskedSample {
  TokenIds input;
  std::vector<int> labels;  // original id at corrupted positions, else -1
};

// Standard masking convention: select positions at mask_rate, then 80%
// mask token / 10% random non-reserved token / 10% keep.
MaskedSample mask_tokens(const TokenIds& seq, int vocab_size,
                         double mask_rate, RngStream& rng);

struct PretrainOptions {
  int max_tokens = 1024;
  double peak_lr = 3e-3;
  int warmup = 100;
};

// Trains a fresh model (initialized from rng.fork(0)) with masked language
// modeling for the given number of optimizer steps. Deterministic in rng.
std::unique_ptr<MicroBert> pretrain_mlm(const std::vector<TokenIds>& corpus,
                                        const MicroBertConfig& cfg,
                                        int steps, RngStream rng,
                                        const PretrainOptions& opts = {},
                                        std::vector<double>* step_losses =
                                            nullptr);

struct MlmEval {
  double loss = 0;
  double accuracy = 0;  // over labeled positions
  int64_t positions = 0;
};

MlmEval evaluate_mlm(const MicroBert& model, const std::vector<TokenIds>& corpus,
                     RngStream mask_rng);

}  // namespace jamt
