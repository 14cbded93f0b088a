#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "phonelm/errors.hpp"
#include "phonelm/rng.hpp"
#include "phonelm/vocab.hpp"

namespace phonelm {

// Assembled joint input: BOS, word ids, SEP, phoneme ids, SEP. The
// phoneme block's position ids restart at 0; type ids are 0 on the word
// block and its flanking specials, 1 on the phoneme block and its
// trailing SEP. Word-only rows drop the phoneme block and second SEP.
struct JointSequence {
  std::vector<int32_t> ids;
  std::vector<int32_t> positions;
  std::vector<int8_t> types;
  size_t word_begin = 0, word_end = 0;  // [begin,end) into ids
  size_t phon_begin = 0, phon_end = 0;

  size_t size() const { return ids.size(); }
  size_t word_len() const { return word_end - word_begin; }
  size_t phon_len() const { return phon_end - phon_begin; }
};

namespace batching_detail {

// Seats `budget` tokens across two non-empty blocks proportionally to
// their lengths. The leftover seat goes to the larger fractional part;
// on a tie the LONGER block is trimmed first (the seat goes to the
// shorter block), and if the lengths tie too, the word block keeps it.
inline std::pair<size_t, size_t> apportion(size_t w, size_t p,
                                           size_t budget) {
  if (w + p <= budget) return {w, p};
  const size_t total = w + p;
  size_t ws = budget * w / total;
  size_t ps = budget * p / total;
  if (ws + ps < budget) {
    const size_t wrem = budget * w % total;
    const size_t prem = budget * p % total;
    bool to_word;
    if (wrem != prem) {
      to_word = wrem > prem;
    } else {
      to_word = w <= p;
    }
    if (to_word) {
      ++ws;
    } else {
      ++ps;
    }
  }
  // Never squeeze a non-empty block to nothing while the other has spare.
  if (ws == 0 && w > 0 && ps > 1) {
    ++ws;
    --ps;
  }
  if (ps == 0 && p > 0 && ws > 1) {
    ++ps;
    --ws;
  }
  return {std::min(ws, w), std::min(ps, p)};
}

}  // namespace batching_detail

inline JointSequence assemble_sequence(const std::vector<int32_t>& word_ids,
                                       const std::vector<int32_t>& phoneme_ids,
                                       const JointVocabulary& vocab,
                                       size_t max_len) {
  if (max_len < 4) {
    throw ConfigError("assemble_sequence: max_len too small for specials");
  }
  (void)vocab;
  const bool has_phon = !phoneme_ids.empty();
  const bool has_word = !word_ids.empty();
  const size_t n_specials = (has_phon && has_word) ? 3 : 2;
  const size_t budget = max_len - n_specials;
  auto [w, p] = batching_detail::apportion(
      word_ids.size(), phoneme_ids.size(), budget);

  JointSequence seq;
  seq.ids.reserve(w + p + n_specials);
  seq.ids.push_back(JointVocabulary::kBos);
  seq.positions.push_back(0);
  seq.types.push_back(0);

  seq.word_begin = seq.ids.size();
  for (size_t i = 0; i < w; ++i) {
    seq.ids.push_back(word_ids[i]);
    seq.positions.push_back(static_cast<int32_t>(i + 1));
    seq.types.push_back(0);
  }
  seq.word_end = seq.ids.size();
  if (has_word || !has_phon) {
    seq.ids.push_back(JointVocabulary::kSep);
    seq.positions.push_back(static_cast<int32_t>(w + 1));
    seq.types.push_back(0);
  }

  seq.phon_begin = seq.ids.size();
  if (has_phon) {
    for (size_t i = 0; i < p; ++i) {
      seq.ids.push_back(phoneme_ids[i]);
      seq.positions.push_back(static_cast<int32_t>(i));
      seq.types.push_back(1);
    }
    seq.phon_end = seq.ids.size();
    seq.ids.push_back(JointVocabulary::kSep);
    seq.positions.push_back(static_cast<int32_t>(p));
    seq.types.push_back(1);
  } else {
    seq.phon_end = seq.phon_begin;
  }
  return seq;
}

// One masked row. `seq.ids` holds the corrupted ids; targets store the
// originals at the recorded positions.
struct MaskedRow {
  JointSequence seq;
  std::vector<uint8_t> attn;  // 1 = real token, 0 = padding
  std::vector<size_t> word_mask_pos;
  std::vector<int32_t> word_targets;
  std::vector<size_t> phon_mask_pos;
  std::vector<int32_t> phon_targets;

  size_t masked_total() const {
    return word_mask_pos.size() + phon_mask_pos.size();
  }
};

// The masking regime. Walking positions left to right, each non-special,
// non-PAD token is selected independently with probability mask_prob.
// RNG consumption per position is fixed and part of the contract:
//   u1 = next_double();              selected iff u1 < mask_prob
//   if selected: u2 = next_double();
//     u2 < 0.8  -> replace with [MASK]
//     u2 < 0.9  -> keep the original id
//     else      -> r = next_below(range_size); replace with
//                  range_start + r, the range being the word or phoneme
//                  id range matching the original token's type
inline MaskedRow apply_masking(const JointSequence& seq,
                               const JointVocabulary& vocab,
                               double mask_prob, uint64_t seed) {
  if (mask_prob < 0.0 || mask_prob > 1.0) {
    throw ConfigError("apply_masking: mask_prob outside [0,1]");
  }
  MaskedRow row;
  row.seq = seq;
  row.attn.assign(seq.size(), 1);
  Rng rng(seed);
  for (size_t i = 0; i < seq.size(); ++i) {
    const int32_t original = seq.ids[i];
    if (original < JointVocabulary::kNumSpecials) continue;  // specials
    const double u1 = rng.next_double();
    if (u1 >= mask_prob) continue;
    const bool in_word_block = i >= seq.word_begin && i < seq.word_end;
    const double u2 = rng.next_double();
    int32_t replacement = original;
    if (u2 < 0.8) {
      replacement = JointVocabulary::kMask;
    } else if (u2 < 0.9) {
      // kept
    } else {
      const auto type = vocab.type_of(original);
      const size_t start = type == JointVocabulary::TokenType::word
                               ? vocab.word_offset()
                               : vocab.phoneme_offset();
      const size_t count = type == JointVocabulary::TokenType::word
                               ? vocab.word_size()
                               : vocab.phoneme_size();
      replacement =
          static_cast<int32_t>(start + rng.next_below(count));
    }
    row.seq.ids[i] = replacement;
    if (in_word_block) {
      row.word_mask_pos.push_back(i);
      row.word_targets.push_back(original);
    } else {
      row.phon_mask_pos.push_back(i);
      row.phon_targets.push_back(original);
    }
  }
  return row;
}

struct MaskedBatch {
  std::vector<MaskedRow> rows;
  size_t width = 0;
};

// Right-pads all rows to the widest row: PAD ids, zero attention, zero
// position/type ids. Mask positions are unaffected (padding is on the
// right).
inline MaskedBatch collate_batch(std::vector<MaskedRow> rows,
                                 int32_t pad_id) {
  if (rows.empty()) throw ConfigError("collate_batch: empty row list");
  MaskedBatch batch;
  size_t width = 0;
  for (const auto& r : rows) width = std::max(width, r.seq.size());
  for (auto& r : rows) {
    while (r.seq.size() < width) {
      r.seq.ids.push_back(pad_id);
      r.seq.positions.push_back(0);
      r.seq.types.push_back(0);
      r.attn.push_back(0);
    }
  }
  batch.rows = std::move(rows);
  batch.width = width;
  return batch;
}

// Debug dump for seeded-oracle tests: one JSON object per row.
inline std::string masked_row_jsonl(const MaskedRow& row) {
  nlohmann::json j;
  j["ids"] = row.seq.ids;
  j["positions"] = row.seq.positions;
  j["types"] = row.seq.types;
  j["attn"] = row.attn;
  j["word_mask"] = nlohmann::json::array();
  for (size_t k = 0; k < row.word_mask_pos.size(); ++k) {
    j["word_mask"].push_back({row.word_mask_pos[k], row.word_targets[k]});
  }
  j["phon_mask"] = nlohmann::json::array();
  for (size_t k = 0; k < row.phon_mask_pos.size(); ++k) {
    j["phon_mask"].push_back({row.phon_mask_pos[k], row.phon_targets[k]});
  }
  return j.dump();
}

}  // namespace phonelm
