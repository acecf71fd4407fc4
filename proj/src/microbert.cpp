#include "jamt/microbert.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

namespace jamt {

void MicroBertConfig::validate() const {
  if (layers < 1) throw UsageError("bert config: need at least one layer");
  if (dim < 2 || dim % n_heads != 0)
    throw UsageError("bert config: dim " + std::to_string(dim) +
                     " not divisible by " + std::to_string(n_heads) +
                     " heads");
  if (vocab < Vocab::RESERVED + 1)
    throw UsageError("bert config: vocab too small");
}

nlohmann::json MicroBertConfig::to_json() const {
  return {{"layers", layers},   {"dim", dim},
          {"n_heads", n_heads}, {"d_ff", d_ff},
          {"dropout", dropout}, {"max_len", max_len},
          {"vocab", vocab},     {"mask_rate", mask_rate}};
}

MicroBertConfig MicroBertConfig::from_json(const nlohmann::json& j) {
  MicroBertConfig c;
  c.layers = j.at("layers");
  c.dim = j.at("dim");
  c.n_heads = j.at("n_heads");
  c.d_ff = j.at("d_ff");
  c.dropout = j.at("dropout");
  c.max_len = j.at("max_len");
  c.vocab = j.at("vocab");
  c.mask_rate = j.at("mask_rate");
  return c;
}

BertStates BertStates::empty(int n_layers, int dim) {
  BertStates s;
  for (int i = 0; i < n_layers; ++i)
    s.layers.push_back(Tensor::zeros({0, dim}));
  s.reads.assign(n_layers, 0);
  return s;
}

MicroBert::MicroBert(const MicroBertConfig& cfg, RngStream init_rng)
    : cfg_(cfg) {
  cfg_.validate();
  emb_ = EmbeddingTable("bert.emb", cfg.vocab, cfg.dim, init_rng,
                        Parameter::Group::Bert);
  JointAttentionConfig ac;
  ac.d_model = cfg.dim;
  ac.n_heads = cfg.n_heads;
  ac.attn_dropout = cfg.dropout;
  for (int i = 0; i < cfg.layers; ++i) {
    std::string base = "bert.layers." + std::to_string(i);
    Layer l;
    l.attn = JointAttentionBlock(base + ".attn", ac, init_rng,
                                 Parameter::Group::Bert);
    l.norm1 = LayerNormBlock(base + ".norm1", cfg.dim, Parameter::Group::Bert);
    l.ffn = FeedForward(base + ".ffn", cfg.dim, cfg.d_ff, cfg.dropout,
                        init_rng, Parameter::Group::Bert);
    l.norm2 = LayerNormBlock(base + ".norm2", cfg.dim, Parameter::Group::Bert);
    layers_.push_back(std::move(l));
  }
  mlm_head_ = Linear("bert.mlm_head", cfg.dim, cfg.vocab, init_rng,
                     Parameter::Group::Bert);
}

BertStates MicroBert::encode_all_layers(const TokenIds& tokens, bool training,
                                        RngStream& rng) const {
  int n = static_cast<int>(tokens.size());
  if (n == 0) throw DataError("bert: empty input sequence");
  if (n > cfg_.max_len)
    throw DataError("bert: sequence of " + std::to_string(n) +
                    " exceeds the maximum of " + std::to_string(cfg_.max_len));

  BertStates states;
  states.pad.resize(n);
  for (int i = 0; i < n; ++i) states.pad[i] = tokens[i] != Vocab::PAD;

  // pad rows keep themselves attendable so their softmax stays defined;
  // their outputs are never consumed downstream
  Mask self({n, n}, false);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) self.at(r, c) = states.pad[c] || r == c;
  Mask none({n, 0}, false);

  Tensor x = scalar_mul(emb_.lookup(tokens),
                        static_cast<real_t>(std::sqrt(double(cfg_.dim))));
  x = positional_encode(x, cfg_.max_len);
  for (const auto& l : layers_) {
    Tensor a = l.attn.forward(x, nullptr, self, none, training, rng);
    x = l.norm1.forward(add(x, dropout(a, cfg_.dropout, rng, training)));
    Tensor f = l.ffn.forward(x, training, rng);
    x = l.norm2.forward(add(x, dropout(f, cfg_.dropout, rng, training)));
    states.layers.push_back(x);
  }
  states.reads.assign(states.layers.size(), 0);
  return states;
}

Tensor MicroBert::mlm_logits(const TokenIds& tokens, bool training,
                             RngStream& rng) const {
  BertStates states = encode_all_layers(tokens, training, rng);
  return mlm_head_.forward(states.layers.back());
}

void MicroBert::visit_params(const ParamVisitor& fn) {
  emb_.visit(fn);
  for (auto& l : layers_) {
    l.attn.visit(fn);
    l.norm1.visit(fn);
    l.ffn.visit(fn);
    l.norm2.visit(fn);
  }
  mlm_head_.visit(fn);
}

MaskedSample mask_tokens(const TokenIds& seq, int vocab_size, double mask_rate,
                         RngStream& rng) {
  if (seq.empty()) throw DataError("mask_tokens: empty sequence");
  if (!(mask_rate > 0 && mask_rate < 1))
    throw UsageError("mask_tokens: rate must lie in (0, 1), got " +
                     std::to_string(mask_rate));
  if (vocab_size <= Vocab::RESERVED)
    throw UsageError("mask_tokens: vocab has no content tokens");
  MaskedSample out;
  out.input = seq;
  out.labels.assign(seq.size(), -1);
  for (size_t i = 0; i < seq.size(); ++i) {
    if (!rng.next_bernoulli(mask_rate)) continue;
    out.labels[i] = seq[i];
    double r = rng.next_double();
    if (r < 0.8) {
      out.input[i] = Vocab::MASK;
    } else if (r < 0.9) {
      out.input[i] = Vocab::RESERVED + static_cast<int>(rng.next_below(
                                           vocab_size - Vocab::RESERVED));
    }  // else keep the original token
  }
  return out;
}

namespace {

// monolingual length-bucketed index groups under a padded-token budget
std::vector<std::vector<size_t>> mono_batches(
    const std::vector<TokenIds>& corpus, int max_tokens) {
  std::vector<size_t> idx(corpus.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
    if (corpus[a].size() != corpus[b].size())
      return corpus[a].size() < corpus[b].size();
    return a < b;
  });
  std::vector<std::vector<size_t>> out;
  size_t start = 0;
  while (start < idx.size()) {
    size_t end = start;
    size_t max_len = 0;
    while (end < idx.size()) {
      size_t ml = std::max(max_len, corpus[idx[end]].size());
      if (end > start &&
          static_cast<int64_t>((end - start + 1) * ml) > max_tokens)
        break;
      max_len = ml;
      ++end;
    }
    out.emplace_back(idx.begin() + start, idx.begin() + end);
    start = end;
  }
  return out;
}

}  // namespace

std::unique_ptr<MicroBert> pretrain_mlm(const std::vector<TokenIds>& corpus,
                                        const MicroBertConfig& cfg, int steps,
                                        RngStream rng,
                                        const PretrainOptions& opts,
                                        std::vector<double>* step_losses) {
  if (corpus.empty()) throw DataError("pretrain: empty corpus");
  for (const auto& s : corpus)
    for (int id : s)
      if (id < 0 || id >= cfg.vocab)
        throw DataError("pretrain: corpus token " + std::to_string(id) +
                        " outside vocab of " + std::to_string(cfg.vocab));

  auto model = std::make_unique<MicroBert>(cfg, rng.fork(0));
  if (steps <= 0) return model;

  RngStream order_rng = rng.fork(1);
  RngStream mask_rng = rng.fork(2);
  RngStream drop_rng = rng.fork(3);

  Adam adam;
  adam.attach([&](const ParamVisitor& fn) { model->visit_params(fn); });
  LrSchedule sched;
  sched.warmup = opts.warmup;
  sched.peak = opts.peak_lr;

  auto batches = mono_batches(corpus, opts.max_tokens);
  std::vector<size_t> order;
  size_t cursor = 0;

  for (int step = 1; step <= steps; ++step) {
    if (cursor == 0 || cursor >= order.size()) {
      order = epoch_order(batches.size(), order_rng, true);
      cursor = 0;
    }
    const auto& batch = batches[order[cursor++]];

    adam.zero_grads();
    Tensor total;
    int64_t count = 0;
    for (size_t si : batch) {
      MaskedSample ms = mask_tokens(corpus[si], cfg.vocab, cfg.mask_rate,
                                    mask_rng);
      std::vector<uint8_t> include(ms.labels.size());
      std::vector<int> targets(ms.labels.size());
      bool any = false;
      for (size_t i = 0; i < ms.labels.size(); ++i) {
        include[i] = ms.labels[i] >= 0;
        targets[i] = std::max(ms.labels[i], 0);
        any = any || include[i];
      }
      if (!any) continue;
      Tensor logits = model->mlm_logits(ms.input, true, drop_rng);
      int64_t c = 0;
      Tensor part = cross_entropy_sum(logits, targets, include, &c);
      count += c;
      total = total.defined() ? add(total, part) : part;
    }
    if (count == 0) continue;  // a batch can mask nothing by chance
    Tensor loss = scalar_mul(total, static_cast<real_t>(1.0 / count));
    double lv = loss.item();
    if (!std::isfinite(lv))
      throw NumericError("pretrain: loss diverged at step " +
                         std::to_string(step));
    if (step_losses) step_losses->push_back(lv);
    backward(loss);
    adam.step(sched.lr_at(step));
  }
  return model;
}

MlmEval evaluate_mlm(const MicroBert& model, const std::vector<TokenIds>& corpus,
                     RngStream mask_rng) {
  NoGradGuard ng;
  RngStream drop(0, 0);
  MlmEval out;
  double total = 0;
  int64_t hits = 0;
  const auto& cfg = model.config();
  for (const auto& sent : corpus) {
    MaskedSample ms = mask_tokens(sent, cfg.vocab, cfg.mask_rate, mask_rng);
    std::vector<uint8_t> include(ms.labels.size());
    std::vector<int> targets(ms.labels.size());
    bool any = false;
    for (size_t i = 0; i < ms.labels.size(); ++i) {
      include[i] = ms.labels[i] >= 0;
      targets[i] = std::max(ms.labels[i], 0);
      any = any || include[i];
    }
    if (!any) continue;
    Tensor logits = model.mlm_logits(ms.input, false, drop);
    int64_t c = 0;
    total += cross_entropy_sum(logits, targets, include, &c).item();
    out.positions += c;
    int v = logits.cols();
    for (size_t i = 0; i < targets.size(); ++i) {
      if (!include[i]) continue;
      int best = 0;
      for (int j = 1; j < v; ++j)
        if (logits.at(static_cast<int>(i), j) >
            logits.at(static_cast<int>(i), best))
          best = j;
      if (best == targets[i]) ++hits;
    }
  }
  if (out.positions == 0) throw DataError("evaluate_mlm: nothing was masked");
  out.loss = total / static_cast<double>(out.positions);
  out.accuracy = static_cast<double>(hits) / static_cast<double>(out.positions);
  return out;
}

}  // namespace jamt
