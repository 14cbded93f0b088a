#pragma once

#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "phonelm/corpus.hpp"
#include "phonelm/errors.hpp"
#include "phonelm/metrics.hpp"
#include "phonelm/trainer.hpp"
#include "phonelm/vocab.hpp"

namespace phonelm::cli {

// Exit codes; every error category maps to its own code.
enum ExitCode : int {
  kOk = 0,
  kFailure = 1,   // unexpected errors
  kUsage = 2,     // bad command line
  kConfig = 3,    // invalid configuration / arguments
  kIo = 4,        // missing or unwritable files
  kFormat = 5,    // malformed file contents
  kNumeric = 6,   // non-finite numbers
};

namespace detail {

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open input file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

inline std::vector<LabeledSentence> read_sentences(
    const std::string& input_path, const std::string& labels_path) {
  std::vector<LabeledSentence> out;
  for (const auto& line : read_lines(input_path)) {
    out.push_back({line, std::nullopt});
  }
  if (!labels_path.empty()) {
    const auto labels = read_lines(labels_path);
    if (labels.size() != out.size()) {
      throw ConfigError("labels file has " + std::to_string(labels.size()) +
                        " lines but the input has " +
                        std::to_string(out.size()));
    }
    for (size_t i = 0; i < labels.size(); ++i) {
      try {
        out[i].label = std::stoi(labels[i]);
      } catch (const std::exception&) {
        throw FormatError("labels file line " + std::to_string(i + 1) +
                          ": not an integer");
      }
    }
  }
  return out;
}

// Most frequent corpus words (ties alphabetical), capped at 1000: the
// insertion pool for the word channel.
inline std::vector<std::string> unigram_pool(
    const std::vector<LabeledSentence>& sentences) {
  std::map<std::string, size_t> counts;
  for (const auto& s : sentences) {
    for (const auto& w : split_ws(s.text)) ++counts[w];
  }
  std::vector<std::pair<std::string, size_t>> items(counts.begin(),
                                                    counts.end());
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<std::string> pool;
  for (size_t i = 0; i < items.size() && i < 1000; ++i) {
    pool.push_back(items[i].first);
  }
  return pool;
}

inline ConfusionTable load_confusion(const std::string& path) {
  return path.empty() ? ConfusionTable::defaults()
                      : ConfusionTable::load(path);
}

}  // namespace detail

struct CommonFlags {
  bool json = false;
  std::optional<uint64_t> seed;
};

inline int cmd_build_corpus(const CommonFlags& common,
                            const std::string& input,
                            const std::string& labels,
                            const std::string& lexicon_path,
                            const std::string& classes_path,
                            const std::string& output, NoiseConfig noise,
                            bool calibrate, size_t pilot_size) {
  if (common.seed) noise.seed = *common.seed;
  noise.validate();
  const auto lexicon = Lexicon::load(lexicon_path);
  const auto confusion = detail::load_confusion(classes_path);
  const auto sentences = detail::read_sentences(input, labels);
  if (sentences.empty()) throw ConfigError("input file has no sentences");
  WordNoiseChannel channel(lexicon, detail::unigram_pool(sentences));

  NoiseConfig cfg = noise;
  if (calibrate) {
    const size_t n = std::min(pilot_size, sentences.size());
    std::vector<LabeledSentence> pilot(sentences.begin(),
                                       sentences.begin() + n);
    cfg = calibrate_word_rates(pilot, noise, lexicon, confusion, channel);
  }
  auto [records, stats] =
      build_corpus(sentences, cfg, lexicon, confusion, channel);
  write_jsonl(output, records);

  nlohmann::json summary = stats.to_json();
  summary["output"] = output;
  summary["word_rates"] = {{"sub", cfg.word_sub_rate},
                           {"del", cfg.word_del_rate},
                           {"ins", cfg.word_ins_rate}};
  if (common.json) {
    std::cout << summary.dump() << "\n";
  } else {
    std::cout << "wrote " << stats.emitted << " records to " << output
              << " (rejected " << (stats.rejected_low + stats.rejected_high)
              << ", mean WER " << stats.mean_wer << ")\n";
  }
  return kOk;
}

inline int cmd_train_bpe(const CommonFlags& common, const std::string& corpus,
                         const std::string& mode, size_t word_budget,
                         size_t phoneme_budget, const std::string& output) {
  const auto records = read_jsonl(corpus);
  if (records.empty()) throw ConfigError("corpus is empty: " + corpus);
  std::vector<std::string> word_lines, phon_lines;
  for (const auto& r : records) {
    word_lines.push_back(r.asr);
    phon_lines.push_back(r.phoneme);
  }
  BpeModel word_model = BpeModel::with_base_alphabet(BpeMode::word);
  BpeModel phon_model = BpeModel::with_base_alphabet(BpeMode::phoneme);
  if (mode == "word" || mode == "both") {
    word_model = train_bpe(word_lines, word_budget, BpeMode::word);
  }
  if (mode == "phoneme" || mode == "both") {
    phon_model = train_bpe(phon_lines, phoneme_budget, BpeMode::phoneme);
  }
  const auto vocab =
      build_joint_vocab(std::move(word_model), std::move(phon_model));
  vocab.save(output);
  if (common.json) {
    std::cout << nlohmann::json{{"output", output},
                                {"word_tokens", vocab.word_size()},
                                {"phoneme_tokens", vocab.phoneme_size()},
                                {"total_size", vocab.total_size()}}
                     .dump()
              << "\n";
  } else {
    std::cout << "vocabulary: " << vocab.word_size() << " word + "
              << vocab.phoneme_size() << " phoneme units -> " << output
              << "\n";
  }
  return kOk;
}

inline RunConfig load_run_config(const std::string& path,
                                 const CommonFlags& common, int epochs,
                                 size_t max_steps,
                                 const std::string& out_dir) {
  RunConfig cfg = RunConfig::load(path);
  if (common.seed) cfg.seed = *common.seed;
  if (epochs >= 0) cfg.epochs = epochs;
  if (max_steps > 0) cfg.max_steps = max_steps;
  if (!out_dir.empty()) cfg.checkpoint_dir = out_dir;
  return cfg;
}

inline int cmd_pretrain(const CommonFlags& common, const std::string& config,
                        const std::string& corpus_path,
                        const std::string& vocab_path,
                        const std::string& lexicon_path,
                        const std::string& resume_path,
                        const std::string& init_embeddings_path, int epochs,
                        size_t max_steps, const std::string& out_dir) {
  RunConfig cfg =
      load_run_config(config, common, epochs, max_steps, out_dir);
  const auto corpus = read_jsonl(corpus_path);
  const auto vocab = JointVocabulary::load(vocab_path);
  std::optional<Lexicon> lexicon;
  if (!lexicon_path.empty()) lexicon = Lexicon::load(lexicon_path);
  std::optional<Checkpoint> resume;
  if (!resume_path.empty()) resume = Checkpoint::load(resume_path);

  // Optional warm start for the token embedding table.
  std::optional<Tensor32> warm_embeddings;
  if (!init_embeddings_path.empty()) {
    const auto donor = Checkpoint::load(init_embeddings_path);
    warm_embeddings = donor.weights.p.tok_emb;
  }

  if (warm_embeddings.has_value()) {
    if (resume.has_value()) {
      throw ConfigError("--init-embeddings cannot be combined with --resume");
    }
    // Run zero steps to materialize the initialization, import, then
    // train from the modified weights via the resume path.
    RunConfig init_cfg = cfg.resolved();
    init_cfg.max_steps = 0;
    init_cfg.epochs = 0;
    auto seeded = pretrain(corpus, vocab, init_cfg,
                           lexicon ? &*lexicon : nullptr);
    seeded.checkpoint.weights.import_token_embeddings(*warm_embeddings);
    seeded.checkpoint.total_steps_planned = 0;
    resume = std::move(seeded.checkpoint);
  }

  const auto result = pretrain(corpus, vocab, cfg,
                               lexicon ? &*lexicon : nullptr,
                               resume ? &*resume : nullptr);
  const std::string ckpt_path =
      cfg.checkpoint_dir.empty()
          ? ""
          : (std::filesystem::path(cfg.checkpoint_dir) / "last.ckpt")
                .string();
  const double final_loss =
      result.step_losses.empty() ? 0.0 : result.step_losses.back().total;
  if (common.json) {
    std::cout << nlohmann::json{{"steps", result.checkpoint.step},
                                {"final_loss", final_loss},
                                {"checkpoint", ckpt_path}}
                     .dump()
              << "\n";
  } else {
    std::cout << "pretrained " << result.checkpoint.step << " steps, final "
              << "loss " << final_loss;
    if (!ckpt_path.empty()) std::cout << " -> " << ckpt_path;
    std::cout << "\n";
  }
  return kOk;
}

inline int cmd_finetune(const CommonFlags& common, const std::string& config,
                        const std::string& corpus_path,
                        const std::string& vocab_path,
                        const std::string& init_path,
                        const std::string& test_path,
                        const std::string& lexicon_path, int epochs,
                        const std::string& out_dir) {
  RunConfig cfg = load_run_config(config, common, epochs, 0, out_dir);
  const auto corpus = read_jsonl(corpus_path);
  const auto vocab = JointVocabulary::load(vocab_path);
  std::optional<Checkpoint> init;
  if (!init_path.empty()) init = Checkpoint::load(init_path);
  std::optional<Lexicon> lexicon;
  if (!lexicon_path.empty()) lexicon = Lexicon::load(lexicon_path);
  std::optional<std::vector<CorpusRecord>> test;
  if (!test_path.empty()) test = read_jsonl(test_path);

  const auto result =
      finetune(corpus, vocab, cfg, init ? &*init : nullptr,
               lexicon ? &*lexicon : nullptr, test ? &*test : nullptr);
  nlohmann::json out{{"best_epoch", result.best.best_epoch},
                     {"best_val_accuracy", result.best.best_val_accuracy},
                     {"best_val_macro_f1", result.best.best_val_macro_f1}};
  if (result.test_report.has_value()) {
    out["test"] = result.test_report->to_json();
  }
  if (!cfg.checkpoint_dir.empty()) {
    out["checkpoint"] =
        (std::filesystem::path(cfg.checkpoint_dir) / "best.ckpt").string();
  }
  if (common.json) {
    std::cout << out.dump() << "\n";
  } else {
    std::cout << "best validation accuracy "
              << result.best.best_val_accuracy << " (macro-F1 "
              << result.best.best_val_macro_f1 << ") at epoch "
              << result.best.best_epoch << "\n";
    if (result.test_report.has_value()) {
      std::cout << "test: accuracy / macro-F1 = "
                << result.test_report->accuracy << " / "
                << result.test_report->macro_f1 << "\n";
    }
  }
  return kOk;
}

inline int cmd_evaluate(const CommonFlags& common,
                        const std::string& checkpoint_path,
                        const std::string& corpus_path,
                        const std::string& vocab_path,
                        const std::string& lexicon_path,
                        const std::string& report_path) {
  const auto ckpt = Checkpoint::load(checkpoint_path);
  const auto vocab = JointVocabulary::load(vocab_path);
  const auto test = read_jsonl(corpus_path);
  std::optional<Lexicon> lexicon;
  if (!lexicon_path.empty()) lexicon = Lexicon::load(lexicon_path);

  const auto report = evaluate_checkpoint(ckpt, vocab, test,
                                          lexicon ? &*lexicon : nullptr);
  if (!report_path.empty()) report.save(report_path);
  if (common.json) {
    std::cout << report.to_json().dump() << "\n";
  } else {
    std::cout << "accuracy / macro-F1 = " << report.accuracy << " / "
              << report.macro_f1 << "\n";
    for (size_t b = 0; b < report.buckets.size(); ++b) {
      std::cout << "  WER " << wer_bucket_names()[b] << ": accuracy "
                << report.buckets[b].accuracy << " (n="
                << report.buckets[b].count << ")\n";
    }
  }
  return kOk;
}

inline int run(int argc, const char* const* argv) {
  CLI::App app{"joint word+phoneme masked-LM toolkit for noisy transcripts"};
  app.require_subcommand(1);
  CommonFlags common;
  uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value,
                                  "override every configured seed");
  app.add_flag("--json", common.json, "machine-readable JSON output");

  // build-corpus
  auto* bc = app.add_subcommand("build-corpus",
                                "synthesize a noisy parallel corpus");
  std::string bc_input, bc_labels, bc_lexicon = "data/lexicon.dict";
  std::string bc_classes, bc_output = "corpus.jsonl";
  NoiseConfig bc_noise;
  bool bc_calibrate = true;
  size_t bc_pilot = 1000;
  bc->add_option("--input", bc_input, "clean sentences, one per line")
      ->required();
  bc->add_option("--labels", bc_labels, "integer labels, one per line");
  bc->add_option("--lexicon", bc_lexicon, "CMUdict-format lexicon");
  bc->add_option("--classes", bc_classes,
                 "phoneme confusion classes (default: built-in)");
  bc->add_option("--output", bc_output, "output corpus (JSON-lines)");
  bc->add_option("--target-wer", bc_noise.target_mean_wer,
                 "post-filter mean WER target");
  bc->add_option("--floor", bc_noise.wer_floor, "reject records below");
  bc->add_option("--ceiling", bc_noise.wer_ceiling, "reject records above");
  bc->add_option("--second-level-fraction", bc_noise.second_level_fraction,
                 "share of records at the harsher noise level");
  bc->add_option("--second-level-factor", bc_noise.second_level_factor,
                 "rate multiplier of the harsher level");
  bc->add_option("--noise-seed", bc_noise.seed, "channel seed");
  bc->add_flag("--calibrate,!--no-calibrate", bc_calibrate,
               "bisect word rates to the target mean WER");
  bc->add_option("--pilot", bc_pilot, "calibration pilot sample size");

  // train-bpe
  auto* tb = app.add_subcommand("train-bpe", "train BPE vocabularies");
  std::string tb_corpus, tb_mode = "both", tb_output = "vocab.json";
  size_t tb_word_budget = 8000, tb_phoneme_budget = 560;
  tb->add_option("--corpus", tb_corpus, "corpus JSON-lines")->required();
  tb->add_option("--mode", tb_mode, "word|phoneme|both")
      ->check(CLI::IsMember({"word", "phoneme", "both"}));
  tb->add_option("--word-budget", tb_word_budget, "word merge budget");
  tb->add_option("--phoneme-budget", tb_phoneme_budget,
                 "phoneme merge budget (560 keeps the vocabulary at 600)");
  tb->add_option("--output", tb_output, "joint vocabulary JSON");

  // pretrain
  auto* pt = app.add_subcommand("pretrain", "masked-LM pretraining");
  std::string pt_config, pt_corpus, pt_vocab, pt_lexicon, pt_resume;
  std::string pt_init_embeddings, pt_out;
  int pt_epochs = -1;
  size_t pt_max_steps = 0;
  pt->add_option("--config", pt_config, "run config JSON")->required();
  pt->add_option("--corpus", pt_corpus, "training corpus")->required();
  pt->add_option("--vocab", pt_vocab, "joint vocabulary")->required();
  pt->add_option("--lexicon", pt_lexicon,
                 "lexicon (required when phonemes derive from transcripts)");
  pt->add_option("--resume", pt_resume, "checkpoint to resume from");
  pt->add_option("--init-embeddings", pt_init_embeddings,
                 "checkpoint donating a token embedding table");
  pt->add_option("--epochs", pt_epochs, "override configured epochs");
  pt->add_option("--max-steps", pt_max_steps, "stop after this many steps");
  pt->add_option("--out", pt_out, "checkpoint directory");

  // finetune
  auto* ft = app.add_subcommand("finetune", "task fine-tuning");
  std::string ft_config, ft_corpus, ft_vocab, ft_init, ft_test, ft_lexicon;
  std::string ft_out;
  int ft_epochs = -1;
  ft->add_option("--config", ft_config, "run config JSON")->required();
  ft->add_option("--corpus", ft_corpus, "labeled task corpus")->required();
  ft->add_option("--vocab", ft_vocab, "joint vocabulary")->required();
  ft->add_option("--init", ft_init, "pretraining checkpoint");
  ft->add_option("--test", ft_test, "labeled test corpus");
  ft->add_option("--lexicon", ft_lexicon, "lexicon for g2p_asr runs");
  ft->add_option("--epochs", ft_epochs, "override configured epochs");
  ft->add_option("--out", ft_out, "checkpoint directory");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "metrics + WER-bucket report");
  std::string ev_ckpt, ev_corpus, ev_vocab, ev_lexicon, ev_report;
  ev->add_option("--checkpoint", ev_ckpt, "fine-tuned checkpoint")
      ->required();
  ev->add_option("--corpus", ev_corpus, "labeled test corpus")->required();
  ev->add_option("--vocab", ev_vocab, "joint vocabulary")->required();
  ev->add_option("--lexicon", ev_lexicon, "lexicon for g2p_asr checkpoints");
  ev->add_option("--report", ev_report, "write the JSON report here");

  // Global flags remain usable after the subcommand name.
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help() << "\n";
    return kOk;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << "\n";
    return kUsage;
  }
  if (seed_opt->count() > 0) common.seed = seed_value;

  try {
    if (bc->parsed()) {
      return cmd_build_corpus(common, bc_input, bc_labels, bc_lexicon,
                              bc_classes, bc_output, bc_noise, bc_calibrate,
                              bc_pilot);
    }
    if (tb->parsed()) {
      return cmd_train_bpe(common, tb_corpus, tb_mode, tb_word_budget,
                           tb_phoneme_budget, tb_output);
    }
    if (pt->parsed()) {
      return cmd_pretrain(common, pt_config, pt_corpus, pt_vocab, pt_lexicon,
                          pt_resume, pt_init_embeddings, pt_epochs,
                          pt_max_steps, pt_out);
    }
    if (ft->parsed()) {
      return cmd_finetune(common, ft_config, ft_corpus, ft_vocab, ft_init,
                          ft_test, ft_lexicon, ft_epochs, ft_out);
    }
    if (ev->parsed()) {
      return cmd_evaluate(common, ev_ckpt, ev_corpus, ev_vocab, ev_lexicon,
                          ev_report);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFormat;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}

}  // namespace phonelm::cli
