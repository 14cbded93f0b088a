#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "phonelm/arpabet.hpp"
#include "phonelm/errors.hpp"

namespace phonelm {

enum class BpeMode { word, phoneme };

inline std::string bpe_mode_name(BpeMode m) {
  return m == BpeMode::word ? "word" : "phoneme";
}

namespace bpe_detail {

// Word-mode pre-tokenization: chunks are (optional single leading space +
// run of non-whitespace); any other whitespace byte is its own chunk.
// Concatenating chunks reproduces the input byte-for-byte, so encode and
// decode round-trip on arbitrary UTF-8. Merges never cross chunks.
inline std::vector<std::string> word_chunks(const std::string& s) {
  std::vector<std::string> out;
  size_t i = 0;
  auto is_space = [](unsigned char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' ||
           c == '\v';
  };
  while (i < s.size()) {
    const unsigned char c = s[i];
    if (c == ' ' && i + 1 < s.size() && !is_space(s[i + 1])) {
      size_t j = i + 1;
      while (j < s.size() && !is_space(s[j])) ++j;
      out.push_back(s.substr(i, j - i));
      i = j;
    } else if (is_space(c)) {
      out.push_back(s.substr(i, 1));
      ++i;
    } else {
      size_t j = i;
      while (j < s.size() && !is_space(s[j])) ++j;
      out.push_back(s.substr(i, j - i));
      i = j;
    }
  }
  return out;
}

inline uint64_t pair_key(uint32_t a, uint32_t b) {
  return (static_cast<uint64_t>(a) << 32) | b;
}

}  // namespace bpe_detail

// Byte-pair-encoding model. Word mode works on raw UTF-8 bytes (all 256
// byte values are base symbols, so nothing is ever unknown); phoneme mode
// works on the 39 ARPABET symbols plus the pause mark, with merged token
// strings joined by spaces. Token ids here are local to the model;
// JointVocabulary offsets them into a shared id space.
struct BpeModel {
  BpeMode mode = BpeMode::word;
  std::vector<std::string> tokens;  // id -> token string; base first
  std::vector<std::pair<std::string, std::string>> merges;  // training order
  size_t base_size = 0;

  std::unordered_map<std::string, int32_t> token_to_id;
  std::unordered_map<uint64_t, uint32_t> merge_rank;  // (left,right) ids

  static constexpr int32_t kUnknown = -1;

  size_t size() const { return tokens.size(); }

  static BpeModel with_base_alphabet(BpeMode mode) {
    BpeModel m;
    m.mode = mode;
    if (mode == BpeMode::word) {
      for (int b = 0; b < 256; ++b) {
        m.tokens.push_back(std::string(1, static_cast<char>(b)));
      }
    } else {
      for (const auto& s : arpabet_symbols()) m.tokens.push_back(s);
      m.tokens.push_back(std::string(kPauseMark));
    }
    m.base_size = m.tokens.size();
    m.rebuild_index();
    return m;
  }

  void rebuild_index() {
    token_to_id.clear();
    for (size_t i = 0; i < tokens.size(); ++i) {
      if (!token_to_id.emplace(tokens[i], static_cast<int32_t>(i)).second) {
        throw FormatError("bpe model: duplicate token string");
      }
    }
    merge_rank.clear();
    for (size_t r = 0; r < merges.size(); ++r) {
      const auto li = token_to_id.find(merges[r].first);
      const auto ri = token_to_id.find(merges[r].second);
      if (li == token_to_id.end() || ri == token_to_id.end()) {
        throw FormatError("bpe model: merge references unknown token");
      }
      merge_rank.emplace(
          bpe_detail::pair_key(static_cast<uint32_t>(li->second),
                               static_cast<uint32_t>(ri->second)),
          static_cast<uint32_t>(r));
    }
  }

  std::string joined(const std::string& left, const std::string& right) const {
    return mode == BpeMode::word ? left + right : left + " " + right;
  }

  // Applies merges (lowest rank first) to one chunk of base symbol ids.
  void apply_merges(std::vector<int32_t>& syms) const {
    while (syms.size() >= 2) {
      uint32_t best_rank = UINT32_MAX;
      for (size_t i = 0; i + 1 < syms.size(); ++i) {
        if (syms[i] < 0 || syms[i + 1] < 0) continue;
        const auto it = merge_rank.find(bpe_detail::pair_key(
            static_cast<uint32_t>(syms[i]), static_cast<uint32_t>(syms[i + 1])));
        if (it != merge_rank.end() && it->second < best_rank) {
          best_rank = it->second;
        }
      }
      if (best_rank == UINT32_MAX) break;
      const auto& [left, right] = merges[best_rank];
      const int32_t li = token_to_id.at(left);
      const int32_t ri = token_to_id.at(right);
      const int32_t merged = token_to_id.at(joined(left, right));
      std::vector<int32_t> next;
      next.reserve(syms.size());
      for (size_t i = 0; i < syms.size();) {
        if (i + 1 < syms.size() && syms[i] == li && syms[i + 1] == ri) {
          next.push_back(merged);
          i += 2;
        } else {
          next.push_back(syms[i]);
          ++i;
        }
      }
      syms.swap(next);
    }
  }

  // Base symbol ids of one chunk; unknown phoneme symbols become -1.
  std::vector<int32_t> base_ids(const std::string& chunk) const {
    std::vector<int32_t> ids;
    if (mode == BpeMode::word) {
      ids.reserve(chunk.size());
      for (unsigned char c : chunk) ids.push_back(static_cast<int32_t>(c));
    } else {
      for (const auto& sym : split_ws_local(chunk)) {
        const auto it = token_to_id.find(sym);
        if (it == token_to_id.end() ||
            static_cast<size_t>(it->second) >= base_size) {
          ids.push_back(kUnknown);
        } else {
          ids.push_back(it->second);
        }
      }
    }
    return ids;
  }

  // Encode a full line; ids are local to this model, kUnknown marks
  // unknown base symbols.
  std::vector<int32_t> encode(const std::string& text) const {
    std::vector<int32_t> out;
    if (mode == BpeMode::word) {
      for (const auto& chunk : bpe_detail::word_chunks(text)) {
        auto syms = base_ids(chunk);
        apply_merges(syms);
        out.insert(out.end(), syms.begin(), syms.end());
      }
    } else {
      auto syms = base_ids(text);
      apply_merges(syms);
      out.insert(out.end(), syms.begin(), syms.end());
    }
    return out;
  }

  std::string decode(const std::vector<int32_t>& ids) const {
    std::string out;
    bool first = true;
    for (int32_t id : ids) {
      if (id < 0 || static_cast<size_t>(id) >= tokens.size()) {
        throw ConfigError("bpe decode: id out of range");
      }
      if (mode == BpeMode::phoneme && !first) out += ' ';
      out += tokens[static_cast<size_t>(id)];
      first = false;
    }
    return out;
  }

 private:
  static std::vector<std::string> split_ws_local(const std::string& s) {
    std::vector<std::string> out;
    size_t i = 0;
    while (i < s.size()) {
      while (i < s.size() && s[i] == ' ') ++i;
      size_t j = i;
      while (j < s.size() && s[j] != ' ') ++j;
      if (j > i) out.push_back(s.substr(i, j - i));
      i = j;
    }
    return out;
  }
};

// Greedy highest-frequency pair merging; ties broken by the
// lexicographically smallest (left, right) token strings. Stops early
// when no pair occurs at least twice.
inline BpeModel train_bpe(const std::vector<std::string>& corpus_lines,
                          size_t merge_budget, BpeMode mode) {
  if (corpus_lines.empty()) throw ConfigError("train_bpe: empty corpus");
  BpeModel model = BpeModel::with_base_alphabet(mode);

  // Unique chunk types with frequencies.
  std::unordered_map<std::string, int64_t> chunk_freq;
  bool any = false;
  for (const auto& line : corpus_lines) {
    if (mode == BpeMode::word) {
      for (const auto& chunk : bpe_detail::word_chunks(line)) {
        ++chunk_freq[chunk];
        any = true;
      }
    } else {
      if (!line.empty()) {
        ++chunk_freq[line];
        any = true;
      }
    }
  }
  if (!any) throw ConfigError("train_bpe: corpus has no usable tokens");

  struct Word {
    std::vector<int32_t> syms;
    int64_t freq;
  };
  std::vector<Word> words;
  words.reserve(chunk_freq.size());
  for (const auto& [chunk, freq] : chunk_freq) {
    auto syms = model.base_ids(chunk);
    // Unknown symbols break merge adjacency but are kept as gaps.
    words.push_back({std::move(syms), freq});
  }

  auto count_pairs = [&] {
    std::unordered_map<uint64_t, int64_t> counts;
    for (const auto& w : words) {
      for (size_t i = 0; i + 1 < w.syms.size(); ++i) {
        if (w.syms[i] < 0 || w.syms[i + 1] < 0) continue;
        counts[bpe_detail::pair_key(static_cast<uint32_t>(w.syms[i]),
                                    static_cast<uint32_t>(w.syms[i + 1]))] +=
            w.freq;
      }
    }
    return counts;
  };

  auto counts = count_pairs();
  for (size_t step = 0; step < merge_budget; ++step) {
    // Best pair: max count, ties by lexicographic token strings.
    bool found = false;
    int64_t best_count = 0;
    uint32_t best_l = 0, best_r = 0;
    for (const auto& [key, count] : counts) {
      if (count < 2 || count < best_count) continue;
      const auto l = static_cast<uint32_t>(key >> 32);
      const auto r = static_cast<uint32_t>(key & 0xffffffffu);
      if (count > best_count) {
        best_count = count;
        best_l = l;
        best_r = r;
        found = true;
        continue;
      }
      // count == best_count: lexicographic tie-break on token strings
      const auto& bl = model.tokens[best_l];
      const auto& br = model.tokens[best_r];
      const auto& cl = model.tokens[l];
      const auto& cr = model.tokens[r];
      if (std::tie(cl, cr) < std::tie(bl, br)) {
        best_l = l;
        best_r = r;
      }
    }
    if (!found) break;

    // Copies: the push_back below may reallocate model.tokens.
    const std::string left = model.tokens[best_l];
    const std::string right = model.tokens[best_r];
    const std::string merged = model.joined(left, right);
    int32_t merged_id;
    if (auto it = model.token_to_id.find(merged);
        it != model.token_to_id.end()) {
      merged_id = it->second;
    } else {
      merged_id = static_cast<int32_t>(model.tokens.size());
      model.tokens.push_back(merged);
      model.token_to_id.emplace(merged, merged_id);
    }
    model.merges.emplace_back(left, right);

    // Rewrite affected words, updating pair counts incrementally.
    const int32_t li = static_cast<int32_t>(best_l);
    const int32_t ri = static_cast<int32_t>(best_r);
    for (auto& w : words) {
      bool contains = false;
      for (size_t i = 0; i + 1 < w.syms.size(); ++i) {
        if (w.syms[i] == li && w.syms[i + 1] == ri) {
          contains = true;
          break;
        }
      }
      if (!contains) continue;
      auto sub_pairs = [&](const std::vector<int32_t>& syms, int64_t sign) {
        for (size_t i = 0; i + 1 < syms.size(); ++i) {
          if (syms[i] < 0 || syms[i + 1] < 0) continue;
          counts[bpe_detail::pair_key(static_cast<uint32_t>(syms[i]),
                                      static_cast<uint32_t>(syms[i + 1]))] +=
              sign * w.freq;
        }
      };
      sub_pairs(w.syms, -1);
      std::vector<int32_t> next;
      next.reserve(w.syms.size());
      for (size_t i = 0; i < w.syms.size();) {
        if (i + 1 < w.syms.size() && w.syms[i] == li &&
            w.syms[i + 1] == ri) {
          next.push_back(merged_id);
          i += 2;
        } else {
          next.push_back(w.syms[i]);
          ++i;
        }
      }
      w.syms.swap(next);
      sub_pairs(w.syms, +1);
    }
    // Drop exhausted entries so the scan stays tight.
    std::erase_if(counts, [](const auto& kv) { return kv.second <= 0; });
  }

  model.rebuild_index();
  return model;
}

}  // namespace phonelm
