#pragma once

#include <array>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "phonelm/edit_distance.hpp"
#include "phonelm/errors.hpp"
#include "phonelm/lexicon.hpp"
#include "phonelm/noise.hpp"
#include "phonelm/rng.hpp"

namespace phonelm {

// One utterance: the clean text, its noisy transcript, the independently
// noised phoneme sequence of the clean text, the stored word error rate
// and an optional class label.
struct CorpusRecord {
  std::string clean;
  std::string asr;
  std::string phoneme;  // space-joined tokens, '|' as the pause mark
  double wer = 0.0;
  std::optional<int> label;
};

inline nlohmann::json to_json(const CorpusRecord& r) {
  nlohmann::json j{{"clean", r.clean},
                   {"asr", r.asr},
                   {"phoneme", r.phoneme},
                   {"wer", r.wer}};
  if (r.label.has_value()) j["label"] = *r.label;
  return j;
}

inline CorpusRecord record_from_json(const nlohmann::json& j) {
  CorpusRecord r;
  r.clean = j.at("clean").get<std::string>();
  r.asr = j.at("asr").get<std::string>();
  r.phoneme = j.at("phoneme").get<std::string>();
  r.wer = j.at("wer").get<double>();
  if (j.contains("label")) r.label = j.at("label").get<int>();
  return r;
}

inline void write_jsonl(const std::string& path,
                        const std::vector<CorpusRecord>& records) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write corpus: " + path);
  for (const auto& r : records) out << to_json(r).dump() << '\n';
}

inline std::vector<CorpusRecord> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus: " + path);
  std::vector<CorpusRecord> records;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      throw FormatError(path + ":" + std::to_string(lineno) +
                        ": invalid JSON");
    }
    try {
      records.push_back(record_from_json(j));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " +
                        e.what());
    }
  }
  return records;
}

struct CorpusStats {
  size_t input = 0;
  size_t emitted = 0;
  size_t rejected_low = 0;
  size_t rejected_high = 0;
  size_t skipped_empty = 0;
  size_t g2p_dropped_chars = 0;
  double mean_wer = 0.0;
  std::array<size_t, 10> wer_histogram{};  // 0.05-wide bins, last open

  nlohmann::json to_json() const {
    return nlohmann::json{{"input", input},
                          {"emitted", emitted},
                          {"rejected_low", rejected_low},
                          {"rejected_high", rejected_high},
                          {"skipped_empty", skipped_empty},
                          {"g2p_dropped_chars", g2p_dropped_chars},
                          {"mean_wer", mean_wer},
                          {"wer_histogram", wer_histogram}};
  }
};

// Per-record stream seeds: records are independent of processing order,
// so a parallel builder would produce byte-identical output.
inline uint64_t record_seed(uint64_t base, uint64_t stream, size_t index) {
  return derive_seed(base, stream, static_cast<uint64_t>(index));
}

struct LabeledSentence {
  std::string text;
  std::optional<int> label;
};

// Runs both channels over the clean input, drops records whose WER falls
// outside [wer_floor, wer_ceiling], and applies the harsher second noise
// level to the configured fraction of records.
inline std::pair<std::vector<CorpusRecord>, CorpusStats> build_corpus(
    const std::vector<LabeledSentence>& input, const NoiseConfig& cfg,
    const Lexicon& lexicon, const ConfusionTable& confusion,
    const WordNoiseChannel& channel) {
  cfg.validate();
  if (input.empty()) throw ConfigError("build_corpus: empty input");
  std::vector<CorpusRecord> out;
  CorpusStats stats;
  stats.input = input.size();
  const NoiseConfig high = cfg.scaled_words(cfg.second_level_factor);
  double wer_sum = 0.0;
  for (size_t i = 0; i < input.size(); ++i) {
    const auto& [clean, label] = input[i];
    if (split_ws(clean).empty()) {
      ++stats.skipped_empty;
      continue;
    }
    Rng level_rng(record_seed(cfg.seed, seed_stream::kLevel, i));
    const bool second = level_rng.next_double() < cfg.second_level_fraction;
    const NoiseConfig& rc = second ? high : cfg;

    Rng word_rng(record_seed(cfg.seed, seed_stream::kWordNoise, i));
    const std::string asr = channel.apply(clean, rc, word_rng);
    const double wer = compute_wer(clean, asr);
    if (wer < cfg.wer_floor) {
      ++stats.rejected_low;
      continue;
    }
    if (wer > cfg.wer_ceiling) {
      ++stats.rejected_high;
      continue;
    }

    const auto clean_phones = g2p(clean, lexicon, &stats.g2p_dropped_chars);
    Rng phon_rng(record_seed(cfg.seed, seed_stream::kPhonNoise, i));
    const auto noisy_phones =
        phoneme_noise_channel(clean_phones, rc, confusion, phon_rng);

    CorpusRecord rec;
    rec.clean = clean;
    rec.asr = asr;
    rec.phoneme = join_phonemes(noisy_phones);
    rec.wer = wer;
    rec.label = label;
    out.push_back(std::move(rec));
    wer_sum += wer;
    const size_t bin =
        std::min<size_t>(static_cast<size_t>(wer / 0.05), 9);
    ++stats.wer_histogram[bin];
  }
  stats.emitted = out.size();
  stats.mean_wer = out.empty() ? 0.0 : wer_sum / static_cast<double>(out.size());
  return {std::move(out), stats};
}

// Calibrates the word-channel rates so that the mean WER of the EMITTED
// (post-filter) corpus hits target_mean_wer. Rates are not analytically
// invertible to WER, so this bisects a common scale factor on a pilot
// sample; the post-filter mean is monotone in the scale over the
// searched range.
inline NoiseConfig calibrate_word_rates(
    const std::vector<LabeledSentence>& pilot, const NoiseConfig& base,
    const Lexicon& lexicon, const ConfusionTable& confusion,
    const WordNoiseChannel& channel, int iterations = 24) {
  base.validate();
  if (pilot.empty()) throw ConfigError("calibrate: empty pilot sample");
  const double rate_sum =
      base.word_sub_rate + base.word_del_rate + base.word_ins_rate;
  if (rate_sum <= 0.0) {
    throw ConfigError("calibrate: word rates are all zero");
  }
  const double lambda_max =
      0.95 / (rate_sum * std::max(1.0, base.second_level_factor));
  auto mean_at = [&](double lambda) {
    const NoiseConfig scaled = base.scaled_words(lambda);
    auto [records, stats] =
        build_corpus(pilot, scaled, lexicon, confusion, channel);
    (void)records;
    return stats.mean_wer;
  };
  double lo = 0.0, hi = lambda_max;
  for (int i = 0; i < iterations; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (mean_at(mid) < base.target_mean_wer) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return base.scaled_words(0.5 * (lo + hi));
}

}  // namespace phonelm
