#ifndef ANCHOR_DATA_HPP_
#define ANCHOR_DATA_HPP_

#include "anchor/tokens.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

// Character-level tokenizer, synthetic query-document corpus with a hidden
// substitution-cipher alignment, JSONL ingestion, and padded batching.

namespace anchor {

class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Fixed printable inventory plus [PAD]=0 and [EOS]=1. Bijective between
// in-alphabet strings and id sequences.
class Tokenizer {
 public:
  static const Tokenizer& standard() {
    static const Tokenizer t;
    return t;
  }

  Index vocab_size() const { return static_cast<Index>(symbols_.size()) + 2; }
  int32_t pad_id() const { return 0; }
  int32_t eos_id() const { return 1; }

  bool in_alphabet(char c) const { return to_id_.count(c) != 0; }

  TokenSequence tokenize(std::string_view text) const {
    TokenSequence out;
    out.reserve(text.size());
    for (char c : text) {
      auto it = to_id_.find(c);
      if (it == to_id_.end())
        throw DataError(std::string("tokenize: symbol '") + c + "' not in alphabet");
      out.push_back(it->second);
    }
    return out;
  }

  std::string detokenize(const TokenSequence& ids) const {
    std::string out;
    out.reserve(ids.size());
    for (int32_t id : ids) {
      const int32_t sym = id - 2;
      if (sym < 0 || sym >= static_cast<int32_t>(symbols_.size()))
        throw DataError("detokenize: id " + std::to_string(id) + " is not a symbol");
      out.push_back(symbols_[static_cast<size_t>(sym)]);
    }
    return out;
  }

 private:
  Tokenizer() {
    symbols_ += ' ';
    for (char c = 'a'; c <= 'z'; ++c) symbols_ += c;
    for (char c = '0'; c <= '9'; ++c) symbols_ += c;
    symbols_ += ".,?!-:";
    for (size_t i = 0; i < symbols_.size(); ++i)
      to_id_[symbols_[i]] = static_cast<int32_t>(i) + 2;
  }
  std::string symbols_;
  std::unordered_map<char, int32_t> to_id_;
};

struct QDPair {
  std::string query_text;
  std::string doc_text;
  TokenSequence query;
  TokenSequence document;
  std::vector<std::string> hard_negative_texts;
  std::vector<TokenSequence> hard_negatives;
  std::string key;  // synthetic provenance; empty for loaded corpora

  bool operator==(const QDPair& o) const {
    return query_text == o.query_text && doc_text == o.doc_text &&
           hard_negative_texts == o.hard_negative_texts;
  }
};

// ---------------------------------------------------------------------------
// synthetic corpus
// ---------------------------------------------------------------------------

struct GenSpec {
  Index count = 320;
  Index key_len_min = 4;
  Index key_len_max = 4;
  Index filler_len_min = 2;
  Index filler_len_max = 5;
  Index key_alphabet = 16;   // keys and filler use the first N letters
  Index hard_negatives = 2;  // sampled per pair from other keys
  uint64_t cipher_seed = 7;
  bool unique_keys = true;
};

// Seeded substitution over the key alphabet. The output alphabet (digits,
// then letters taken from 'z' downward) is disjoint from the key/filler
// alphabet, so a document contains an enciphered key if and only if it is
// that key's document.
class SubstitutionCipher {
 public:
  SubstitutionCipher(Index key_alphabet, uint64_t cipher_seed) {
    if (key_alphabet < 2 || key_alphabet > 18)
      throw DataError("SubstitutionCipher: key alphabet size " +
                      std::to_string(key_alphabet) + " outside [2,18]");
    std::string out_symbols;
    for (char c = '0'; c <= '9' && static_cast<Index>(out_symbols.size()) < key_alphabet; ++c)
      out_symbols += c;
    for (char c = 'z'; static_cast<Index>(out_symbols.size()) < key_alphabet; --c)
      out_symbols += c;
    std::mt19937_64 rng(cipher_seed);
    std::shuffle(out_symbols.begin(), out_symbols.end(), rng);
    for (Index i = 0; i < key_alphabet; ++i)
      map_[static_cast<char>('a' + i)] = out_symbols[static_cast<size_t>(i)];
  }

  std::string encode(std::string_view key) const {
    std::string out;
    out.reserve(key.size());
    for (char c : key) {
      auto it = map_.find(c);
      if (it == map_.end())
        throw DataError(std::string("cipher: '") + c + "' outside key alphabet");
      out.push_back(it->second);
    }
    return out;
  }

 private:
  std::unordered_map<char, char> map_;
};

// Each query is "find <key>"; its document is the enciphered key embedded in
// random filler drawn from the key alphabet. Queries and documents share no
// surface tokens for the key content, so retrieval requires learning the
// cipher alignment. Hard negatives are documents of other keys. Fully
// deterministic per (seed, cipher_seed).
inline std::vector<QDPair> generate_synthetic_pairs(uint64_t seed, const GenSpec& spec,
                                                    const Tokenizer& tok) {
  if (spec.count <= 0) return {};
  if (spec.key_len_min < 1 || spec.key_len_min > spec.key_len_max ||
      spec.filler_len_min < 0 || spec.filler_len_min > spec.filler_len_max)
    throw DataError("generate_synthetic_pairs: invalid length ranges");
  SubstitutionCipher cipher(spec.key_alphabet, spec.cipher_seed);

  if (spec.unique_keys) {
    double space = 0;
    for (Index l = spec.key_len_min; l <= spec.key_len_max; ++l)
      space += std::pow(double(spec.key_alphabet), double(l));
    if (double(spec.count) > 0.5 * space)
      throw DataError("generate_synthetic_pairs: cannot draw " + std::to_string(spec.count) +
                      " unique keys from a space of ~" + std::to_string((long long)space));
  }

  std::mt19937_64 rng(seed);
  auto rand_index = [&rng](Index lo, Index hi) {  // inclusive range
    return lo + static_cast<Index>(rng() % static_cast<uint64_t>(hi - lo + 1));
  };
  auto rand_letters = [&](Index len) {
    std::string s;
    for (Index i = 0; i < len; ++i)
      s += static_cast<char>('a' + rand_index(0, spec.key_alphabet - 1));
    return s;
  };

  std::vector<QDPair> pairs;
  pairs.reserve(static_cast<size_t>(spec.count));
  std::set<std::string> seen;
  for (Index i = 0; i < spec.count; ++i) {
    std::string key;
    while (true) {
      key = rand_letters(rand_index(spec.key_len_min, spec.key_len_max));
      if (!spec.unique_keys || seen.insert(key).second) break;
    }
    QDPair p;
    p.key = key;
    p.query_text = "find " + key;
    p.doc_text = rand_letters(rand_index(spec.filler_len_min, spec.filler_len_max)) +
                 cipher.encode(key) +
                 rand_letters(rand_index(spec.filler_len_min, spec.filler_len_max));
    p.query = tok.tokenize(p.query_text);
    p.document = tok.tokenize(p.doc_text);
    pairs.push_back(std::move(p));
  }

  // Hard negatives: documents of other keys.
  if (spec.hard_negatives > 0 && spec.count > 1) {
    for (Index i = 0; i < spec.count; ++i) {
      auto& p = pairs[static_cast<size_t>(i)];
      Index attempts = 0;
      while (static_cast<Index>(p.hard_negatives.size()) < spec.hard_negatives &&
             attempts < 16 * spec.hard_negatives) {
        ++attempts;
        const Index j = rand_index(0, spec.count - 1);
        const auto& other = pairs[static_cast<size_t>(j)];
        if (other.key == p.key) continue;
        p.hard_negative_texts.push_back(other.doc_text);
        p.hard_negatives.push_back(other.document);
      }
    }
  }
  return pairs;
}

// Key-level split keeping every pair of a key on one side.
inline std::pair<std::vector<QDPair>, std::vector<QDPair>> split_by_key(
    const std::vector<QDPair>& pairs, double train_frac, uint64_t seed) {
  if (train_frac < 0.0 || train_frac > 1.0)
    throw DataError("split_by_key: train fraction outside [0,1]");
  std::vector<std::string> keys;
  std::set<std::string> seen;
  for (const auto& p : pairs) {
    if (p.key.empty()) throw DataError("split_by_key: pair without a key");
    if (seen.insert(p.key).second) keys.push_back(p.key);
  }
  std::mt19937_64 rng(seed ^ 0x5b1dc0deULL);
  std::shuffle(keys.begin(), keys.end(), rng);
  const size_t n_train = static_cast<size_t>(std::llround(train_frac * double(keys.size())));
  std::set<std::string> train_keys(keys.begin(), keys.begin() + static_cast<ptrdiff_t>(n_train));
  std::pair<std::vector<QDPair>, std::vector<QDPair>> out;
  for (const auto& p : pairs)
    (train_keys.count(p.key) ? out.first : out.second).push_back(p);
  return out;
}

// ---------------------------------------------------------------------------
// JSONL
// ---------------------------------------------------------------------------

inline std::vector<QDPair> load_pairs_jsonl(const std::string& path, const Tokenizer& tok) {
  std::ifstream is(path);
  if (!is) throw DataError("load_pairs_jsonl: cannot open " + path);
  std::vector<QDPair> out;
  std::string line;
  size_t line_no = 0;
  auto fail = [&](const std::string& why) {
    throw DataError("load_pairs_jsonl: " + path + " line " + std::to_string(line_no) +
                    ": " + why);
  };
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(std::string("malformed JSON: ") + e.what());
    }
    if (!j.contains("query") || !j["query"].is_string()) fail("missing required field \"query\"");
    if (!j.contains("document") || !j["document"].is_string())
      fail("missing required field \"document\"");
    QDPair p;
    p.query_text = j["query"].get<std::string>();
    p.doc_text = j["document"].get<std::string>();
    if (p.query_text.empty()) fail("empty query");
    if (p.doc_text.empty()) fail("empty document");
    try {
      p.query = tok.tokenize(p.query_text);
      p.document = tok.tokenize(p.doc_text);
      if (j.contains("hard_negatives")) {
        if (!j["hard_negatives"].is_array()) fail("\"hard_negatives\" must be an array");
        for (const auto& h : j["hard_negatives"]) {
          if (!h.is_string()) fail("\"hard_negatives\" must hold strings");
          const std::string text = h.get<std::string>();
          if (text == p.doc_text) fail("negative equals positive");
          p.hard_negative_texts.push_back(text);
          p.hard_negatives.push_back(tok.tokenize(text));
        }
      }
    } catch (const DataError& e) {
      fail(e.what());
    }
    out.push_back(std::move(p));
  }
  return out;
}

inline void write_pairs_jsonl(const std::vector<QDPair>& pairs, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("write_pairs_jsonl: cannot open " + path);
  for (const auto& p : pairs) {
    nlohmann::json j;
    j["query"] = p.query_text;
    j["document"] = p.doc_text;
    if (!p.hard_negative_texts.empty()) j["hard_negatives"] = p.hard_negative_texts;
    os << j.dump() << '\n';
  }
  if (!os) throw DataError("write_pairs_jsonl: write failed for " + path);
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

struct PairBatch {
  TokenBatch query;
  TokenBatch doc;
  TokenBatch hard_negs;                // flattened across the batch; may be empty
  std::vector<Index> hard_neg_owner;   // owning row per hard negative
  Index size() const { return query.rows; }
};

// Deterministic shuffle per (seed, epoch); right padding; at most
// `hard_negs_per_query` negatives drawn per pair each epoch. Batches whose
// row count falls below `min_batch` (only ever the last one) are dropped.
inline std::vector<PairBatch> make_batches(const std::vector<QDPair>& pairs, Index batch_size,
                                           int32_t pad_id, uint64_t seed, bool shuffle,
                                           Index epoch = 0, Index hard_negs_per_query = 1,
                                           Index min_batch = 1) {
  if (batch_size < 1) throw DataError("make_batches: batch_size must be >= 1");
  std::vector<size_t> order(pairs.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::seed_seq seq{seed, static_cast<uint64_t>(epoch)};
  std::mt19937_64 rng(seq);
  if (shuffle) std::shuffle(order.begin(), order.end(), rng);

  std::vector<PairBatch> out;
  for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(order.size(), start + static_cast<size_t>(batch_size));
    if (static_cast<Index>(end - start) < min_batch) break;
    std::vector<TokenSequence> qs, ds, hs;
    std::vector<Index> owners;
    for (size_t i = start; i < end; ++i) {
      const QDPair& p = pairs[order[i]];
      qs.push_back(p.query);
      ds.push_back(p.document);
      if (hard_negs_per_query > 0 && !p.hard_negatives.empty()) {
        const Index take =
            std::min<Index>(hard_negs_per_query, static_cast<Index>(p.hard_negatives.size()));
        const size_t base = rng() % p.hard_negatives.size();
        for (Index t = 0; t < take; ++t) {
          hs.push_back(p.hard_negatives[(base + static_cast<size_t>(t)) % p.hard_negatives.size()]);
          owners.push_back(static_cast<Index>(i - start));
        }
      }
    }
    PairBatch b;
    b.query = TokenBatch::pad(qs, pad_id);
    b.doc = TokenBatch::pad(ds, pad_id);
    b.hard_negs = TokenBatch::pad(hs, pad_id);
    b.hard_neg_owner = std::move(owners);
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace anchor

#endif  // ANCHOR_DATA_HPP_
