#include "jamt/data.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace jamt {

namespace {

const char* kReservedNames[] = {"<pad>", "<bos>", "<eos>", "<unk>", "<mask>"};

std::string join(const Sentence& s) {
  std::string out;
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ' ';
    out += s[i];
  }
  return out;
}

Sentence split(const std::string& line) {
  Sentence out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

std::string content_token(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "w%02d", i);
  return buf;
}

std::string target_token(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "v%02d", i);
  return buf;
}

}  // namespace

// ---- Vocab ----

Vocab::Vocab() {
  for (const char* name : kReservedNames) {
    token_to_id.emplace(name, static_cast<int>(id_to_token.size()));
    id_to_token.emplace_back(name);
  }
}

Vocab Vocab::build(const std::vector<Sentence>& corpus) {
  Vocab v;
  std::set<std::string> seen;
  for (const auto& s : corpus)
    for (const auto& tok : s) seen.insert(tok);
  for (const auto& tok : seen) {
    if (v.token_to_id.count(tok))
      throw DataError("vocab: token collides with a reserved name: " + tok);
    v.token_to_id.emplace(tok, static_cast<int>(v.id_to_token.size()));
    v.id_to_token.push_back(tok);
  }
  return v;
}

int Vocab::encode(const std::string& token) const {
  auto it = token_to_id.find(token);
  return it == token_to_id.end() ? UNK : it->second;
}

TokenIds Vocab::encode(const Sentence& s) const {
  TokenIds out;
  out.reserve(s.size());
  for (const auto& tok : s) out.push_back(encode(tok));
  return out;
}

const std::string& Vocab::decode(int id) const {
  if (id < 0 || id >= size())
    throw DataError("vocab: id " + std::to_string(id) + " out of range");
  return id_to_token[id];
}

Sentence Vocab::decode(const TokenIds& ids) const {
  Sentence out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(decode(id));
  return out;
}

void Vocab::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("vocab: cannot write " + path);
  for (const auto& tok : id_to_token) os << tok << '\n';
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("vocab: cannot read " + path);
  Vocab v;
  std::string line;
  int id = 0;
  while (std::getline(is, line)) {
    if (id < RESERVED) {
      if (line != v.id_to_token[id])
        throw DataError("vocab: reserved slot " + std::to_string(id) +
                        " holds '" + line + "'");
    } else {
      v.token_to_id.emplace(line, id);
      v.id_to_token.push_back(line);
    }
    ++id;
  }
  return v;
}

// ---- SynthTaskSpec ----

void SynthTaskSpec::validate() const {
  if (content_vocab < 1) throw DataError("task spec: empty content vocab");
  if (polysemous < 0 || polysemous > content_vocab)
    throw DataError("task spec: polysemous subset of " +
                    std::to_string(polysemous) + " exceeds content vocab of " +
                    std::to_string(content_vocab));
  if (polysemous > 0 && n_markers != 2)
    throw DataError("task spec: polysemous tokens need exactly 2 markers");
  if (n_markers < 0 || n_markers > 2)
    throw DataError("task spec: marker count must be 0..2");
  if (len_min < 1 || len_max < len_min)
    throw DataError("task spec: bad length range");
  if (train_size < 1 || valid_size < 1 || test_size < 1)
    throw DataError("task spec: split sizes must be positive");
  if (identity_cipher && polysemous > 0)
    throw DataError("task spec: identity cipher excludes polysemous tokens");
}

SynthTaskSpec SynthTaskSpec::copy_task() {
  SynthTaskSpec s;
  s.polysemous = 0;
  s.n_markers = 0;
  s.identity_cipher = true;
  return s;
}

SynthTaskSpec SynthTaskSpec::marker_task() { return SynthTaskSpec(); }

// ---- generation ----

Sentence SynthTask::oracle_translate(const Sentence& s) const {
  Sentence out;
  size_t start = 0;
  std::string marker;
  if (!markers.empty() && !s.empty() &&
      std::find(markers.begin(), markers.end(), s[0]) != markers.end()) {
    marker = s[0];
    start = 1;
  }
  for (size_t i = start; i < s.size(); ++i) {
    auto marked = marked_map.find({marker, s[i]});
    if (marked != marked_map.end()) {
      out.push_back(marked->second);
      continue;
    }
    auto base = base_map.find(s[i]);
    if (base == base_map.end())
      throw DataError("oracle: unknown source token " + s[i]);
    out.push_back(base->second);
  }
  if (spec.reorder)
    for (size_t i = 0; i + 1 < out.size(); i += 2) std::swap(out[i], out[i + 1]);
  return out;
}

SynthTask generate_bitext(const SynthTaskSpec& spec) {
  spec.validate();
  SynthTask task;
  task.spec = spec;

  RngStream table_rng(spec.seed, 1);
  RngStream sent_rng(spec.seed, 2);

  for (int i = 0; i < spec.n_markers; ++i)
    task.markers.push_back(i == 0 ? "mka" : "mkb");

  // base cipher: content token i -> target pi(i); identity for the copy task
  std::vector<int> perm(spec.content_vocab);
  for (int i = 0; i < spec.content_vocab; ++i) perm[i] = i;
  if (!spec.identity_cipher)
    for (int i = spec.content_vocab - 1; i > 0; --i)
      std::swap(perm[i],
                perm[static_cast<int>(table_rng.next_below(i + 1))]);
  for (int i = 0; i < spec.content_vocab; ++i)
    task.base_map[content_token(i)] = spec.identity_cipher
                                          ? content_token(i)
                                          : target_token(perm[i]);

  // polysemous tokens: the base target under the first marker, a dedicated
  // extra target under the second
  std::vector<int> poly_ids;
  {
    std::vector<int> pool(spec.content_vocab);
    for (int i = 0; i < spec.content_vocab; ++i) pool[i] = i;
    for (int k = 0; k < spec.polysemous; ++k) {
      int j = k + static_cast<int>(table_rng.next_below(pool.size() - k));
      std::swap(pool[k], pool[j]);
      poly_ids.push_back(pool[k]);
    }
    std::sort(poly_ids.begin(), poly_ids.end());
  }
  for (int k = 0; k < spec.polysemous; ++k) {
    const std::string content = content_token(poly_ids[k]);
    task.marked_map[{task.markers[0], content}] = task.base_map[content];
    task.marked_map[{task.markers[1], content}] =
        target_token(spec.content_vocab + k);
  }

  // sentence sets are disjoint across splits, keyed by the source tokens
  std::set<std::string> used;
  auto gen_sentence = [&](int force_poly, int force_marker) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
      Sentence s;
      if (!task.markers.empty()) {
        int m = force_marker >= 0
                    ? force_marker
                    : static_cast<int>(sent_rng.next_below(task.markers.size()));
        s.push_back(task.markers[m]);
      }
      int len = spec.len_min +
                static_cast<int>(sent_rng.next_below(
                    static_cast<uint64_t>(spec.len_max - spec.len_min + 1)));
      for (int i = 0; i < len; ++i)
        s.push_back(content_token(
            static_cast<int>(sent_rng.next_below(spec.content_vocab))));
      if (force_poly >= 0) {
        size_t pos = (task.markers.empty() ? 0 : 1) +
                     sent_rng.next_below(static_cast<uint64_t>(len));
        s[pos] = content_token(force_poly);
      }
      std::string key = join(s);
      if (used.insert(key).second) return s;
    }
    throw DataError("bitext: could not draw a fresh sentence; "
                    "the sentence space is too small for the split sizes");
  };

  auto fill = [&](ParallelCorpus& corpus, int count, bool coverage) {
    // coverage sentences pin every (polysemous, marker) pair into the split
    if (coverage)
      for (int k = 0; k < spec.polysemous && count > 0; ++k)
        for (int m = 0; m < 2 && count > 0; ++m) {
          Sentence s = gen_sentence(poly_ids[k], m);
          corpus.tgt.push_back(task.oracle_translate(s));
          corpus.src.push_back(std::move(s));
          --count;
        }
    for (int i = 0; i < count; ++i) {
      Sentence s = gen_sentence(-1, -1);
      corpus.tgt.push_back(task.oracle_translate(s));
      corpus.src.push_back(std::move(s));
    }
  };

  fill(task.train, spec.train_size, spec.polysemous > 0);
  fill(task.valid, spec.valid_size, false);
  fill(task.test, spec.test_size, false);
  return task;
}

// ---- corpus files ----

void save_lines(const std::string& path, const std::vector<Sentence>& lines) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("corpus: cannot write " + path);
  for (const auto& s : lines) os << join(s) << '\n';
}

std::vector<Sentence> load_lines(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("corpus: cannot read " + path);
  std::vector<Sentence> out;
  std::string line;
  while (std::getline(is, line)) out.push_back(split(line));
  return out;
}

void save_corpus(const std::string& dir, const SynthTask& task) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  save_lines((fs::path(dir) / "train.src").string(), task.train.src);
  save_lines((fs::path(dir) / "train.tgt").string(), task.train.tgt);
  save_lines((fs::path(dir) / "valid.src").string(), task.valid.src);
  save_lines((fs::path(dir) / "valid.tgt").string(), task.valid.tgt);
  save_lines((fs::path(dir) / "test.src").string(), task.test.src);
  save_lines((fs::path(dir) / "test.tgt").string(), task.test.tgt);
}

ParallelCorpus load_parallel(const std::string& src_path,
                             const std::string& tgt_path) {
  ParallelCorpus c;
  c.src = load_lines(src_path);
  c.tgt = load_lines(tgt_path);
  if (c.src.size() != c.tgt.size())
    throw DataError("corpus: " + src_path + " has " +
                    std::to_string(c.src.size()) + " lines but " + tgt_path +
                    " has " + std::to_string(c.tgt.size()));
  return c;
}

std::vector<EncodedPair> encode_corpus(const ParallelCorpus& corpus,
                                       const Vocab& src_vocab,
                                       const Vocab& tgt_vocab) {
  std::vector<EncodedPair> out;
  out.reserve(corpus.size());
  for (size_t i = 0; i < corpus.size(); ++i)
    out.push_back({src_vocab.encode(corpus.src[i]),
                   tgt_vocab.encode(corpus.tgt[i])});
  return out;
}

// ---- batching ----

TokenIds Batch::src_sentence(int i) const {
  TokenIds out;
  for (int c = 0; c < src_len; ++c) {
    if (!src_mask[static_cast<size_t>(i) * src_len + c]) break;
    out.push_back(src[static_cast<size_t>(i) * src_len + c]);
  }
  return out;
}

TokenIds Batch::tgt_in_sentence(int i) const {
  TokenIds out;
  for (int c = 0; c < tgt_len; ++c) {
    if (!tgt_mask[static_cast<size_t>(i) * tgt_len + c]) break;
    out.push_back(tgt_in[static_cast<size_t>(i) * tgt_len + c]);
  }
  return out;
}

TokenIds Batch::tgt_out_sentence(int i) const {
  TokenIds out;
  for (int c = 0; c < tgt_len; ++c) {
    if (!tgt_mask[static_cast<size_t>(i) * tgt_len + c]) break;
    out.push_back(tgt_out[static_cast<size_t>(i) * tgt_len + c]);
  }
  return out;
}

std::vector<Batch> make_batches(const std::vector<EncodedPair>& pairs,
                                int max_tokens) {
  std::vector<size_t> idx(pairs.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
    if (pairs[a].src.size() != pairs[b].src.size())
      return pairs[a].src.size() < pairs[b].src.size();
    if (pairs[a].tgt.size() != pairs[b].tgt.size())
      return pairs[a].tgt.size() < pairs[b].tgt.size();
    return a < b;
  });

  for (size_t i : idx) {
    int need = static_cast<int>(
        std::max(pairs[i].src.size(), pairs[i].tgt.size() + 1));
    if (need > max_tokens)
      throw DataError("batching: sentence " + std::to_string(i) + " needs " +
                      std::to_string(need) + " tokens, budget is " +
                      std::to_string(max_tokens));
  }

  std::vector<Batch> out;
  size_t start = 0;
  while (start < idx.size()) {
    size_t end = start;
    int max_src = 0, max_tgt = 0;
    while (end < idx.size()) {
      const auto& p = pairs[idx[end]];
      int ms = std::max(max_src, static_cast<int>(p.src.size()));
      int mt = std::max(max_tgt, static_cast<int>(p.tgt.size()) + 1);
      int64_t b = static_cast<int64_t>(end - start + 1);
      if (end > start &&
          (b * ms > max_tokens || b * mt > max_tokens))
        break;
      max_src = ms;
      max_tgt = mt;
      ++end;
    }
    Batch batch;
    batch.b = static_cast<int>(end - start);
    batch.src_len = max_src;
    batch.tgt_len = max_tgt;
    batch.src.assign(static_cast<size_t>(batch.b) * max_src, Vocab::PAD);
    batch.src_mask.assign(batch.src.size(), 0);
    batch.tgt_in.assign(static_cast<size_t>(batch.b) * max_tgt, Vocab::PAD);
    batch.tgt_out.assign(batch.tgt_in.size(), Vocab::PAD);
    batch.tgt_mask.assign(batch.tgt_in.size(), 0);
    for (size_t r = start; r < end; ++r) {
      const auto& p = pairs[idx[r]];
      int row = static_cast<int>(r - start);
      for (size_t c = 0; c < p.src.size(); ++c) {
        batch.src[static_cast<size_t>(row) * max_src + c] = p.src[c];
        batch.src_mask[static_cast<size_t>(row) * max_src + c] = 1;
      }
      batch.tgt_in[static_cast<size_t>(row) * max_tgt] = Vocab::BOS;
      for (size_t c = 0; c < p.tgt.size(); ++c) {
        batch.tgt_in[static_cast<size_t>(row) * max_tgt + c + 1] = p.tgt[c];
        batch.tgt_out[static_cast<size_t>(row) * max_tgt + c] = p.tgt[c];
      }
      batch.tgt_out[static_cast<size_t>(row) * max_tgt + p.tgt.size()] =
          Vocab::EOS;
      for (size_t c = 0; c <= p.tgt.size(); ++c)
        batch.tgt_mask[static_cast<size_t>(row) * max_tgt + c] = 1;
    }
    out.push_back(std::move(batch));
    start = end;
  }
  return out;
}

std::vector<size_t> epoch_order(size_t n_batches, RngStream& rng,
                                bool shuffle) {
  std::vector<size_t> order(n_batches);
  for (size_t i = 0; i < n_batches; ++i) order[i] = i;
  if (shuffle)
    for (size_t i = n_batches; i > 1; --i)
      std::swap(order[i - 1], order[rng.next_below(i)]);
  return order;
}

}  // namespace jamt
