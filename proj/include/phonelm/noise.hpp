#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <string>
#include <vector>

#include "phonelm/arpabet.hpp"
#include "phonelm/edit_distance.hpp"
#include "phonelm/errors.hpp"
#include "phonelm/lexicon.hpp"
#include "phonelm/rng.hpp"

namespace phonelm {

// Error rates for the word- and phoneme-level channels plus the corpus
// filter band. Rates are per-position event probabilities; per position
// the three events are mutually exclusive.
struct NoiseConfig {
  double word_sub_rate = 0.18;
  double word_del_rate = 0.075;
  double word_ins_rate = 0.045;
  double phoneme_sub_rate = 0.07;
  double phoneme_del_rate = 0.025;
  double phoneme_ins_rate = 0.02;
  double target_mean_wer = 0.30;
  double wer_floor = 0.05;
  double wer_ceiling = 0.40;
  // A second, harsher noise level applied to a fraction of the corpus.
  double second_level_fraction = 0.25;
  double second_level_factor = 1.4;
  uint64_t seed = 0;

  void validate() const {
    auto in01 = [](double r) { return r >= 0.0 && r <= 1.0; };
    for (double r : {word_sub_rate, word_del_rate, word_ins_rate,
                     phoneme_sub_rate, phoneme_del_rate, phoneme_ins_rate,
                     second_level_fraction}) {
      if (!in01(r)) throw ConfigError("noise rate outside [0,1]");
    }
    if (word_sub_rate + word_del_rate + word_ins_rate > 1.0) {
      throw ConfigError("word sub+del+ins rates exceed 1 per position");
    }
    if (phoneme_sub_rate + phoneme_del_rate + phoneme_ins_rate > 1.0) {
      throw ConfigError("phoneme sub+del+ins rates exceed 1 per position");
    }
    if (!(wer_floor < wer_ceiling)) {
      throw ConfigError("wer_floor must be below wer_ceiling");
    }
    if (second_level_factor < 0.0) {
      throw ConfigError("second_level_factor must be non-negative");
    }
  }

  // Word rates scaled by `factor`, keeping the per-position total <= 0.95.
  NoiseConfig scaled_words(double factor) const {
    NoiseConfig out = *this;
    out.word_sub_rate *= factor;
    out.word_del_rate *= factor;
    out.word_ins_rate *= factor;
    const double total =
        out.word_sub_rate + out.word_del_rate + out.word_ins_rate;
    if (total > 0.95) {
      const double shrink = 0.95 / total;
      out.word_sub_rate *= shrink;
      out.word_del_rate *= shrink;
      out.word_ins_rate *= shrink;
    }
    return out;
  }
};

// Word-level ASR error channel. Per word, with seeded randomness:
//   u < sub                 -> replace by a phonetically nearest word
//   u < sub+del             -> delete
//   u < sub+del+ins         -> keep and insert a unigram-pool word after
// Substitution candidates are the distinct lexicon words at minimum
// phoneme edit distance (<= 2) from the word's pronunciation; ties are
// broken by a uniform seeded draw over the sorted candidate list.
class WordNoiseChannel {
 public:
  WordNoiseChannel(const Lexicon& lexicon,
                   std::vector<std::string> insert_pool)
      : lexicon_(&lexicon), insert_pool_(std::move(insert_pool)) {}

  const std::vector<std::string>& insert_pool() const { return insert_pool_; }

  // Distinct lexicon words at minimum pronunciation distance (<= 2),
  // sorted. Exposed so tests can compare with an exhaustive oracle.
  const std::vector<std::string>& neighbor_candidates(
      const std::string& word) const {
    auto it = cache_.find(word);
    if (it != cache_.end()) return it->second;
    const auto pron = lexicon_->pronounce(word);
    // Buckets by distance 0..2; the minimum is over DISTINCT words, so a
    // self-only homophone bucket must not shadow distance-1 neighbors.
    std::array<std::vector<std::string>, 3> buckets;
    for (const auto& [key, words] : lexicon_->by_pronunciation()) {
      const auto key_phones = split_ws(key);
      if (key_phones.size() + 2 < pron.size() ||
          pron.size() + 2 < key_phones.size()) {
        continue;
      }
      const size_t d = levenshtein(pron, key_phones);
      if (d > 2) continue;
      for (const auto& w : words) {
        if (w != word) buckets[d].push_back(w);
      }
    }
    std::vector<std::string> best;
    for (auto& bucket : buckets) {
      if (!bucket.empty()) {
        best = std::move(bucket);
        break;
      }
    }
    std::sort(best.begin(), best.end());
    best.erase(std::unique(best.begin(), best.end()), best.end());
    return cache_.emplace(word, std::move(best)).first->second;
  }

  std::string apply(const std::string& clean, const NoiseConfig& cfg,
                    Rng& rng) const {
    cfg.validate();
    if (clean.empty()) throw ConfigError("word channel: empty input");
    const auto words = split_ws(clean);
    std::vector<std::string> out;
    out.reserve(words.size());
    const double sub = cfg.word_sub_rate;
    const double del = sub + cfg.word_del_rate;
    const double ins = del + cfg.word_ins_rate;
    for (const auto& w : words) {
      const double u = rng.next_double();
      if (u < sub) {
        const auto& cands = neighbor_candidates(w);
        if (cands.empty()) {
          out.push_back(w);
        } else {
          out.push_back(cands[rng.next_index(cands.size())]);
        }
      } else if (u < del) {
        // dropped
      } else if (u < ins) {
        out.push_back(w);
        if (!insert_pool_.empty()) {
          out.push_back(insert_pool_[rng.next_index(insert_pool_.size())]);
        }
      } else {
        out.push_back(w);
      }
    }
    std::string joined;
    for (size_t i = 0; i < out.size(); ++i) {
      if (i) joined += ' ';
      joined += out[i];
    }
    return joined;
  }

 private:
  const Lexicon* lexicon_;
  std::vector<std::string> insert_pool_;
  mutable std::map<std::string, std::vector<std::string>> cache_;
};

// Phoneme-level error channel; input must be the g2p of the CLEAN text so
// word-channel errors never propagate into the phoneme sequence.
// Substitutions stay inside the confusion class; pause marks are never
// substituted but may be deleted; insertions draw a uniform ARPABET
// symbol after the current position.
inline std::vector<std::string> phoneme_noise_channel(
    const std::vector<std::string>& clean_phonemes, const NoiseConfig& cfg,
    const ConfusionTable& table, Rng& rng) {
  cfg.validate();
  std::vector<std::string> out;
  out.reserve(clean_phonemes.size());
  const auto& alphabet = arpabet_symbols();
  const double sub = cfg.phoneme_sub_rate;
  const double del = cfg.phoneme_del_rate;
  const double ins = cfg.phoneme_ins_rate;
  for (const auto& p : clean_phonemes) {
    const bool pause = (p == kPauseMark);
    const double u = rng.next_double();
    bool keep = true;
    bool insert_after = false;
    if (pause) {
      if (u < del) {
        keep = false;
      } else if (u < del + ins) {
        insert_after = true;
      }
      if (keep) out.push_back(p);
    } else {
      if (u < sub) {
        const auto* members = table.class_members(p);
        if (members != nullptr && members->size() > 1) {
          // Uniform over the class excluding the symbol itself.
          size_t self = 0;
          for (size_t i = 0; i < members->size(); ++i) {
            if ((*members)[i] == p) {
              self = i;
              break;
            }
          }
          size_t pick = rng.next_index(members->size() - 1);
          if (pick >= self) ++pick;
          out.push_back((*members)[pick]);
        } else {
          out.push_back(p);
        }
      } else if (u < sub + del) {
        keep = false;
      } else if (u < sub + del + ins) {
        out.push_back(p);
        insert_after = true;
      } else {
        out.push_back(p);
      }
    }
    if (insert_after) {
      out.push_back(alphabet[rng.next_index(alphabet.size())]);
    }
  }
  return out;
}

}  // namespace phonelm
