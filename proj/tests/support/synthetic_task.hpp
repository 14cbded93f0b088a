#pragma once

// Synthetic classification task with a deterministic word <-> phoneme
// correspondence, built to exercise the joint word+phoneme training
// pipeline end to end:
//
//   - every word is spelled in CV syllables whose letters map 1:1 onto
//     phonemes, so the shipped-lexicon machinery works unchanged;
//   - each of the four classes owns a few keyword words; every clean
//     sentence contains exactly one keyword (the label) among fillers;
//   - each keyword has phonetically adjacent "variant" words that sit in
//     the lexicon but never occur in clean text, so the word channel's
//     nearest-pronunciation substitution maps keywords onto them;
//   - fillers are at phoneme distance >= 2 from every keyword, so
//     substitution never turns a filler into class evidence.

#include <map>
#include <set>
#include <string>
#include <vector>

#include "phonelm/corpus.hpp"
#include "phonelm/edit_distance.hpp"
#include "phonelm/lexicon.hpp"
#include "phonelm/rng.hpp"

namespace phonelm::testing {

struct SyntheticTask {
  std::string lexicon_text;                 // CMUdict format
  std::vector<std::vector<std::string>> keywords;  // [class][j]
  std::vector<std::string> fillers;
  size_t num_classes = 4;
};

inline SyntheticTask make_synthetic_task(size_t keywords_per_class = 3,
                                         size_t variants_per_keyword = 4,
                                         size_t num_fillers = 30) {
  const std::vector<char> lead = {'b', 'd', 'g', 'k'};        // class
  const std::vector<char> mid = {'l', 'm', 'n', 'p', 'r',
                                 's', 't', 'v', 'z', 'f'};    // keyword slot
  const std::vector<char> vowels = {'a', 'e', 'i', 'o', 'u'};
  const std::map<char, std::string> c2p = {
      {'b', "B"}, {'d', "D"}, {'g', "G"}, {'k', "K"}, {'l', "L"},
      {'m', "M"}, {'n', "N"}, {'p', "P"}, {'r', "R"}, {'s', "S"},
      {'t', "T"}, {'v', "V"}, {'z', "Z"}, {'f', "F"}, {'w', "W"},
      {'y', "Y"}, {'h', "HH"}};
  const std::map<char, std::string> v2p = {{'a', "AA"},
                                           {'e', "EH"},
                                           {'i', "IY"},
                                           {'o', "OW"},
                                           {'u', "UW"}};
  auto pron = [&](const std::string& word) {
    std::string p;
    for (char ch : word) {
      const auto ci = c2p.find(ch);
      if (!p.empty()) p += ' ';
      p += ci != c2p.end() ? ci->second : v2p.at(ch);
    }
    return p;
  };

  SyntheticTask task;
  task.num_classes = lead.size();
  std::string lex = ";;; synthetic task lexicon\n";
  std::set<std::string> prons;  // keyword/variant pronunciations
  auto add = [&](const std::string& word) {
    lex += word + "  " + pron(word) + "\n";
    prons.insert(pron(word));
  };

  // Keyword (c, j): lead[c] vowels[c] mid[j] 'a'. Variants stay at
  // phoneme distance 1 by swapping either the final vowel or the middle
  // consonant (middle consonants beyond the keyword slots are reserved
  // for variants, so variants collide with nothing else).
  task.keywords.resize(task.num_classes);
  for (size_t c = 0; c < task.num_classes; ++c) {
    for (size_t j = 0; j < keywords_per_class; ++j) {
      std::string kw{lead[c], vowels[c], mid[j], 'a'};
      task.keywords[c].push_back(kw);
      add(kw);
      size_t made_variants = 0;
      for (size_t v = 1; v < vowels.size() && made_variants <
           variants_per_keyword; ++v, ++made_variants) {
        std::string var = kw;
        var[3] = vowels[v];
        add(var);
      }
      for (size_t m = keywords_per_class;
           m < mid.size() && made_variants < variants_per_keyword;
           ++m, ++made_variants) {
        std::string var = kw;
        var[2] = mid[m];
        add(var);
      }
    }
  }

  // Fillers: lead consonants outside the class set keep them at distance
  // >= 2 from every keyword and variant (asserted below).
  const std::vector<char> filler_lead = {'w', 'y', 'h'};
  size_t made = 0;
  for (size_t i = 0; made < num_fillers && i < 1000; ++i) {
    std::string f{filler_lead[i % filler_lead.size()],
                  vowels[(i / 3) % vowels.size()],
                  mid[(i / 15) % mid.size()],
                  vowels[(i / 75) % vowels.size()]};
    const auto fp = split_ws(pron(f));
    bool too_close = false;
    for (const auto& kp : prons) {
      if (levenshtein(fp, split_ws(kp)) < 2) {
        too_close = true;
        break;
      }
    }
    if (too_close) continue;
    task.fillers.push_back(f);
    add(f);
    ++made;
  }
  task.lexicon_text = std::move(lex);
  return task;
}

struct SyntheticPipeline {
  SyntheticTask task;
  Lexicon lexicon;
  ConfusionTable confusion;
  NoiseConfig noise;  // calibrated to ~0.30 mean WER
  JointVocabulary vocab;
  std::vector<CorpusRecord> pretrain, train, test;
};

// Clean labeled sentences: fillers plus exactly one class keyword at a
// seeded random position.
inline std::vector<LabeledSentence> synthetic_sentences(
    const SyntheticTask& task, size_t count, uint64_t seed,
    size_t min_len = 7, size_t max_len = 11) {
  Rng rng(seed);
  std::vector<LabeledSentence> out;
  out.reserve(count);
  for (size_t i = 0; i < count; ++i) {
    const size_t len = min_len + rng.next_index(max_len - min_len + 1);
    const int label = static_cast<int>(rng.next_index(task.num_classes));
    const auto& kws = task.keywords[static_cast<size_t>(label)];
    const std::string keyword = kws[rng.next_index(kws.size())];
    const size_t kw_pos = rng.next_index(len);
    std::string text;
    for (size_t j = 0; j < len; ++j) {
      if (j) text += ' ';
      if (j == kw_pos) {
        text += keyword;
      } else {
        text += task.fillers[rng.next_index(task.fillers.size())];
      }
    }
    out.push_back({text, label});
  }
  return out;
}

// Full synthetic data pipeline through the real corpus/tokenizer stack.
inline SyntheticPipeline make_synthetic_pipeline(
    uint64_t seed, size_t n_pretrain, size_t n_train, size_t n_test,
    size_t word_merges = 200, size_t phoneme_merges = 150) {
  SyntheticPipeline p;
  p.task = make_synthetic_task();
  p.lexicon = Lexicon::from_text(p.task.lexicon_text);
  p.confusion = ConfusionTable::defaults();

  // The WER band rejects roughly 60% of drawn sentences; oversample so
  // the emitted corpora can be trimmed to the requested sizes.
  const auto pre_sentences =
      synthetic_sentences(p.task, n_pretrain * 4, derive_seed(seed, 101));
  const auto train_sentences =
      synthetic_sentences(p.task, n_train * 4, derive_seed(seed, 102));
  const auto test_sentences =
      synthetic_sentences(p.task, n_test * 4, derive_seed(seed, 103));

  // Insert pool: every task word (unigram-uniform synthetic corpus).
  std::vector<std::string> pool = p.task.fillers;
  for (const auto& kws : p.task.keywords) {
    pool.insert(pool.end(), kws.begin(), kws.end());
  }
  WordNoiseChannel channel(p.lexicon, pool);

  NoiseConfig base;
  base.seed = derive_seed(seed, 104);
  std::vector<LabeledSentence> pilot(
      pre_sentences.begin(),
      pre_sentences.begin() + std::min<size_t>(500, pre_sentences.size()));
  p.noise =
      calibrate_word_rates(pilot, base, p.lexicon, p.confusion, channel, 16);

  auto build = [&](const std::vector<LabeledSentence>& in, uint64_t s,
                   size_t want) {
    NoiseConfig cfg = p.noise;
    cfg.seed = s;
    auto records = build_corpus(in, cfg, p.lexicon, p.confusion, channel).first;
    if (records.size() < want) {
      throw ConfigError("synthetic pipeline: oversampling too small");
    }
    records.resize(want);
    return records;
  };
  p.pretrain = build(pre_sentences, derive_seed(seed, 105), n_pretrain);
  p.train = build(train_sentences, derive_seed(seed, 106), n_train);
  p.test = build(test_sentences, derive_seed(seed, 107), n_test);

  std::vector<std::string> word_lines, phon_lines;
  for (const auto& r : p.pretrain) {
    word_lines.push_back(r.asr);
    phon_lines.push_back(r.phoneme);
  }
  p.vocab =
      build_joint_vocab(train_bpe(word_lines, word_merges, BpeMode::word),
                        train_bpe(phon_lines, phoneme_merges,
                                  BpeMode::phoneme));
  return p;
}

}  // namespace phonelm::testing
