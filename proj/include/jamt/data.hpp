#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "jamt/common.hpp"
#include "jamt/rng.hpp"

namespace jamt {

using Sentence = std::vector<std::string>;
using TokenIds = std::vector<int>;

// Token table with fixed reserved ids; non-reserved tokens are assigned ids
// in sorted order, so a rebuild from the same corpus is identical.
struct Vocab {
  static constexpr int PAD = 0;
  static constexpr int BOS = 1;
  static constexpr int EOS = 2;
  static constexpr int UNK = 3;
  static constexpr int MASK = 4;
  static constexpr int RESERVED = 5;

  std::vector<std::string> id_to_token;
  std::unordered_map<std::string, int> token_to_id;

  Vocab();
  static Vocab build(const std::vector<Sentence>& corpus);

  int size() const { return static_cast<int>(id_to_token.size()); }
  int encode(const std::string& token) const;
  TokenIds encode(const Sentence& s) const;
  const std::string& decode(int id) const;
  Sentence decode(const TokenIds& ids) const;

  void save(const std::string& path) const;
  static Vocab load(const std::string& path);
};

struct SynthTaskSpec {
  int content_vocab = 64;
  int polysemous = 8;
  int n_markers = 2;
  int len_min = 5;
  int len_max = 16;
  bool reorder = false;         // swap adjacent target pairs
  bool identity_cipher = false; // copy task: target tokens equal source tokens
  int train_size = 20000;
  int valid_size = 1000;
  int test_size = 1000;
  uint64_t seed = 1;

  void validate() const;
  static SynthTaskSpec copy_task();
  static SynthTaskSpec marker_task();
};

struct ParallelCorpus {
  std::vector<Sentence> src;
  std::vector<Sentence> tgt;
  size_t size() const { return src.size(); }
};

// Generated corpora together with the cipher tables, which double as the
// reference translator for oracle scoring.
struct SynthTask {
  SynthTaskSpec spec;
  ParallelCorpus train, valid, test;
  std::vector<std::string> markers;
  // base target for each content token
  std::unordered_map<std::string, std::string> base_map;
  // (marker, content) override for polysemous tokens
  std::map<std::pair<std::string, std::string>, std::string> marked_map;

  Sentence oracle_translate(const Sentence& src) const;
};

SynthTask generate_bitext(const SynthTaskSpec& spec);

void save_corpus(const std::string& dir, const SynthTask& task);
ParallelCorpus load_parallel(const std::string& src_path,
                             const std::string& tgt_path);
std::vector<Sentence> load_lines(const std::string& path);
void save_lines(const std::string& path, const std::vector<Sentence>& lines);

struct EncodedPair {
  TokenIds src;
  TokenIds tgt;
};

std::vector<EncodedPair> encode_corpus(const ParallelCorpus& corpus,
                                       const Vocab& src_vocab,
                                       const Vocab& tgt_vocab);

// One padded batch. Row-major [b x len] id blocks; pad masks mark real
// tokens. Target input rows are BOS-prefixed, target output rows are
// EOS-suffixed, both padded to the same width.
struct Batch {
  int b = 0;
  int src_len = 0;
  int tgt_len = 0;  // width of tgt_in and tgt_out
  std::vector<int> src;
  std::vector<uint8_t> src_mask;
  std::vector<int> tgt_in;
  std::vector<int> tgt_out;
  std::vector<uint8_t> tgt_mask;

  TokenIds src_sentence(int i) const;     // true length, no pads
  TokenIds tgt_in_sentence(int i) const;  // BOS + target
  TokenIds tgt_out_sentence(int i) const; // target + EOS
};

// Length-bucketed packing under a padded-token budget. Both the padded
// source block and the padded target block of a batch stay within
// max_tokens. Packing is deterministic; per-epoch order comes from
// epoch_order.
std::vector<Batch> make_batches(const std::vector<EncodedPair>& pairs,
                                int max_tokens);

// Deterministic shuffle of batch indices for one epoch; identity when
// shuffle is off.
std::vector<size_t> epoch_order(size_t n_batches, RngStream& rng,
                                bool shuffle);

}  // namespace jamt
