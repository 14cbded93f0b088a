#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "phonelm/batching.hpp"
#include "phonelm/checkpoint.hpp"
#include "phonelm/corpus.hpp"
#include "phonelm/errors.hpp"
#include "phonelm/lexicon.hpp"
#include "phonelm/metrics.hpp"
#include "phonelm/model.hpp"
#include "phonelm/optimizer.hpp"
#include "phonelm/vocab.hpp"

namespace phonelm {

enum class RunMode {
  pretrain_word_only,
  pretrain_joint,
  pretrain_joint_no_joint_loss,
  pretrain_joint_g2p_on_asr,
  finetune_joint,
  finetune_word_only,
  finetune_phoneme_only,
  finetune_clean,
};

inline const std::map<std::string, RunMode>& run_mode_names() {
  static const std::map<std::string, RunMode> names = {
      {"pretrain_word_only", RunMode::pretrain_word_only},
      {"pretrain_joint", RunMode::pretrain_joint},
      {"pretrain_joint_no_joint_loss", RunMode::pretrain_joint_no_joint_loss},
      {"pretrain_joint_g2p_on_asr", RunMode::pretrain_joint_g2p_on_asr},
      {"finetune_joint", RunMode::finetune_joint},
      {"finetune_word_only", RunMode::finetune_word_only},
      {"finetune_phoneme_only", RunMode::finetune_phoneme_only},
      {"finetune_clean", RunMode::finetune_clean},
  };
  return names;
}

inline std::string to_string(RunMode mode) {
  for (const auto& [name, m] : run_mode_names()) {
    if (m == mode) return name;
  }
  throw ConfigError("unknown run mode");
}

inline RunMode run_mode_from_string(const std::string& name) {
  auto it = run_mode_names().find(name);
  if (it == run_mode_names().end()) {
    throw ConfigError("unknown run mode '" + name + "'");
  }
  return it->second;
}

inline bool is_pretrain_mode(RunMode m) {
  return m == RunMode::pretrain_word_only || m == RunMode::pretrain_joint ||
         m == RunMode::pretrain_joint_no_joint_loss ||
         m == RunMode::pretrain_joint_g2p_on_asr;
}
inline bool is_finetune_mode(RunMode m) { return !is_pretrain_mode(m); }

inline LossMode loss_mode_for(RunMode m) {
  switch (m) {
    case RunMode::pretrain_word_only:
      return LossMode::word_only;
    case RunMode::pretrain_joint_no_joint_loss:
      return LossMode::separate_losses;
    default:
      return LossMode::joint;
  }
}

struct RunConfig {
  RunMode mode = RunMode::pretrain_joint;
  int epochs = -1;       // <0: mode default (50 pretraining, 20 fine-tuning)
  size_t batch_size = 16;
  double lr = -1.0;      // <=0: mode default (3e-4 pretraining, 3e-5 fine-tuning)
  double warmup_fraction = 0.10;
  double val_fraction = 0.20;
  uint64_t seed = 1;
  std::string checkpoint_dir;
  size_t max_len = 128;
  double mask_prob = 0.15;
  size_t num_classes = 0;  // 0: infer from labels
  size_t max_steps = 0;    // 0: run every planned step
  std::string phoneme_source = "stored";  // or "g2p_asr"
  ModelConfig model;

  RunConfig resolved() const {
    RunConfig out = *this;
    if (out.epochs < 0) out.epochs = is_pretrain_mode(mode) ? 50 : 20;
    if (out.lr <= 0.0) out.lr = is_pretrain_mode(mode) ? 3e-4 : 3e-5;
    return out;
  }

  void validate() const {
    if (batch_size == 0) throw ConfigError("run: batch_size must be > 0");
    if (val_fraction <= 0.0 || val_fraction >= 1.0) {
      throw ConfigError("run: val_fraction outside (0,1)");
    }
    if (mask_prob < 0.0 || mask_prob > 1.0) {
      throw ConfigError("run: mask_prob outside [0,1]");
    }
    if (phoneme_source != "stored" && phoneme_source != "g2p_asr") {
      throw ConfigError("run: phoneme_source must be 'stored' or 'g2p_asr'");
    }
    if (max_len < 4) throw ConfigError("run: max_len too small");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"mode", phonelm::to_string(mode)},
                          {"epochs", epochs},
                          {"batch_size", batch_size},
                          {"lr", lr},
                          {"warmup_fraction", warmup_fraction},
                          {"val_fraction", val_fraction},
                          {"seed", seed},
                          {"checkpoint_dir", checkpoint_dir},
                          {"max_len", max_len},
                          {"mask_prob", mask_prob},
                          {"num_classes", num_classes},
                          {"max_steps", max_steps},
                          {"phoneme_source", phoneme_source},
                          {"model", model.to_json()}};
  }

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    try {
      c.mode = run_mode_from_string(j.at("mode").get<std::string>());
      c.epochs = j.value("epochs", -1);
      c.batch_size = j.value("batch_size", size_t{16});
      c.lr = j.value("lr", -1.0);
      c.warmup_fraction = j.value("warmup_fraction", 0.10);
      c.val_fraction = j.value("val_fraction", 0.20);
      c.seed = j.value("seed", uint64_t{1});
      c.checkpoint_dir = j.value("checkpoint_dir", std::string{});
      c.max_len = j.value("max_len", size_t{128});
      c.mask_prob = j.value("mask_prob", 0.15);
      c.num_classes = j.value("num_classes", size_t{0});
      c.max_steps = j.value("max_steps", size_t{0});
      c.phoneme_source = j.value("phoneme_source", std::string{"stored"});
      if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("run config json: ") + e.what());
    }
    return c;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open run config: " + path);
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw FormatError("run config: invalid JSON");
    return from_json(j);
  }
};

// The eight experiment rows covered by the trainer: which pretraining
// feeds which fine-tuning.
struct ExperimentPlan {
  std::optional<RunMode> pretrain_mode;  // nullopt: no pretraining
  RunMode finetune_mode = RunMode::finetune_word_only;
  std::string finetune_phoneme_source = "stored";
  bool operator==(const ExperimentPlan&) const = default;
};

inline const std::map<std::string, ExperimentPlan>& experiment_matrix() {
  static const std::map<std::string, ExperimentPlan> matrix = {
      {"clean_upper_bound", {std::nullopt, RunMode::finetune_clean, "stored"}},
      {"no_pretrain", {std::nullopt, RunMode::finetune_word_only, "stored"}},
      {"word_pretrain",
       {RunMode::pretrain_word_only, RunMode::finetune_word_only, "stored"}},
      {"joint_pretrain_asr_phonemes",
       {RunMode::pretrain_joint_g2p_on_asr, RunMode::finetune_joint,
        "g2p_asr"}},
      {"joint_pretrain",
       {RunMode::pretrain_joint, RunMode::finetune_joint, "stored"}},
      {"joint_pretrain_word_finetune",
       {RunMode::pretrain_joint, RunMode::finetune_word_only, "stored"}},
      {"joint_pretrain_phoneme_finetune",
       {RunMode::pretrain_joint, RunMode::finetune_phoneme_only, "stored"}},
      {"separate_losses_pretrain",
       {RunMode::pretrain_joint_no_joint_loss, RunMode::finetune_joint,
        "stored"}},
  };
  return matrix;
}

namespace trainer_detail {

struct EncodedRecord {
  std::vector<int32_t> word_ids;
  std::vector<int32_t> phon_ids;
  int label = -1;
  double wer = 0.0;
};

inline void require_field(bool present, RunMode mode, const char* field) {
  if (!present) {
    throw ConfigError("mode " + phonelm::to_string(mode) +
                      " requires corpus field '" + field + "'");
  }
}

// Tokenizes one record for the given mode. B3-style runs derive the
// phoneme side by running g2p over the noisy transcript.
inline EncodedRecord encode_record(const CorpusRecord& rec,
                                   const JointVocabulary& vocab,
                                   RunMode mode,
                                   const std::string& phoneme_source,
                                   const Lexicon* lexicon) {
  EncodedRecord out;
  out.wer = rec.wer;
  out.label = rec.label.value_or(-1);
  const bool g2p_on_asr = mode == RunMode::pretrain_joint_g2p_on_asr ||
                          phoneme_source == "g2p_asr";
  auto phonemes_from_asr = [&]() {
    if (lexicon == nullptr) {
      throw ConfigError("mode " + phonelm::to_string(mode) +
                        " requires a lexicon to derive phonemes from the "
                        "transcript");
    }
    return join_phonemes(g2p(rec.asr, *lexicon));
  };
  switch (mode) {
    case RunMode::pretrain_word_only:
    case RunMode::finetune_word_only:
      require_field(!rec.asr.empty(), mode, "asr");
      out.word_ids = vocab.encode(rec.asr, BpeMode::word);
      break;
    case RunMode::pretrain_joint:
    case RunMode::pretrain_joint_no_joint_loss:
    case RunMode::finetune_joint:
      require_field(!rec.asr.empty(), mode, "asr");
      out.word_ids = vocab.encode(rec.asr, BpeMode::word);
      if (g2p_on_asr) {
        out.phon_ids = vocab.encode(phonemes_from_asr(), BpeMode::phoneme);
      } else {
        require_field(!rec.phoneme.empty(), mode, "phoneme");
        out.phon_ids = vocab.encode(rec.phoneme, BpeMode::phoneme);
      }
      break;
    case RunMode::pretrain_joint_g2p_on_asr:
      require_field(!rec.asr.empty(), mode, "asr");
      out.word_ids = vocab.encode(rec.asr, BpeMode::word);
      out.phon_ids = vocab.encode(phonemes_from_asr(), BpeMode::phoneme);
      break;
    case RunMode::finetune_phoneme_only:
      require_field(!rec.phoneme.empty(), mode, "phoneme");
      out.phon_ids = vocab.encode(rec.phoneme, BpeMode::phoneme);
      break;
    case RunMode::finetune_clean:
      require_field(!rec.clean.empty(), mode, "clean");
      out.word_ids = vocab.encode(rec.clean, BpeMode::word);
      break;
  }
  return out;
}

inline std::vector<Tensor32*> weight_slots(ModelWeights& w) {
  std::vector<Tensor32*> slots;
  w.p.for_each([&](const std::string&, Tensor32& t) { slots.push_back(&t); });
  return slots;
}

inline void apply_gradients(ModelWeights& weights, Tape<float>& tape,
                            const BoundModel<float>& bound, Adam<float>& adam,
                            double lr_scale) {
  auto slots = weight_slots(weights);
  adam.begin_step();
  for (size_t i = 0; i < bound.flat.size(); ++i) {
    const auto& [name, var] = bound.flat[i];
    adam.update(name, *slots[i], tape.grad(var), lr_scale);
  }
}

}  // namespace trainer_detail

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<LossBreakdown> step_losses;
};

// MLM pretraining over shuffled minibatches; gradient accumulation is
// per batch, one Adam step per batch. All randomness (shuffles, masking,
// dropout) is derived from (seed, epoch, counters), so resuming from a
// checkpoint reproduces the uninterrupted run bit for bit.
inline PretrainResult pretrain(const std::vector<CorpusRecord>& corpus,
                               const JointVocabulary& vocab, RunConfig cfg,
                               const Lexicon* lexicon = nullptr,
                               const Checkpoint* resume = nullptr) {
  cfg = cfg.resolved();
  cfg.validate();
  if (!is_pretrain_mode(cfg.mode)) {
    throw ConfigError("pretrain: '" + phonelm::to_string(cfg.mode) +
                      "' is not a pretraining mode");
  }
  if (corpus.empty()) throw ConfigError("pretrain: empty corpus");

  ModelConfig model_cfg = cfg.model;
  if (model_cfg.vocab_size == 0) model_cfg.vocab_size = vocab.total_size();
  if (model_cfg.vocab_size != vocab.total_size()) {
    throw ConfigError("pretrain: model vocab_size " +
                      std::to_string(model_cfg.vocab_size) +
                      " does not match vocabulary size " +
                      std::to_string(vocab.total_size()));
  }
  model_cfg.seed = cfg.seed;
  model_cfg.validate();

  std::vector<trainer_detail::EncodedRecord> encoded;
  encoded.reserve(corpus.size());
  for (const auto& rec : corpus) {
    encoded.push_back(trainer_detail::encode_record(
        rec, vocab, cfg.mode, cfg.phoneme_source, lexicon));
  }

  const size_t n = encoded.size();
  const size_t nb = (n + cfg.batch_size - 1) / cfg.batch_size;
  const uint64_t schedule_total =
      static_cast<uint64_t>(cfg.epochs) * static_cast<uint64_t>(nb);

  ModelWeights weights;
  Adam<float> adam(AdamConfig{.lr = cfg.lr});
  uint64_t start_epoch = 0, start_batch = 0, steps_done = 0;
  if (resume != nullptr) {
    if (resume->weights.cfg != model_cfg) {
      throw ConfigError("pretrain: resume checkpoint model config mismatch");
    }
    weights = resume->weights;
    adam = Adam<float>(resume->adam_cfg);
    adam.set_step_count(resume->adam_step);
    for (const auto& [name, mv] : resume->adam_moments) {
      adam.moments()[name] = {mv.first, mv.second};
    }
    start_epoch = resume->epoch;
    start_batch = resume->batch_in_epoch;
    steps_done = resume->step;
  } else {
    weights = ModelWeights::init(model_cfg);
  }

  const LossMode loss_mode = loss_mode_for(cfg.mode);
  PretrainResult result;

  auto fill_checkpoint = [&](uint64_t epoch, uint64_t batch, uint64_t step) {
    Checkpoint ck;
    ck.weights = weights;
    ck.mode = phonelm::to_string(cfg.mode);
    ck.phoneme_source = cfg.phoneme_source;
    ck.seed = cfg.seed;
    ck.max_len = cfg.max_len;
    ck.mask_prob = cfg.mask_prob;
    ck.epoch = epoch;
    ck.batch_in_epoch = batch;
    ck.step = step;
    ck.total_steps_planned = schedule_total;
    ck.rng_state = Rng(derive_seed(cfg.seed, seed_stream::kMask, step)).state();
    ck.adam_cfg = adam.config();
    ck.adam_step = adam.step_count();
    for (const auto& [name, mv] : adam.moments()) {
      ck.adam_moments[name] = {mv.m, mv.v};
    }
    return ck;
  };

  bool stopped = false;
  uint64_t epoch = start_epoch;
  for (; epoch < static_cast<uint64_t>(cfg.epochs) && !stopped; ++epoch) {
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    Rng shuffle_rng(derive_seed(cfg.seed, seed_stream::kOrder, epoch));
    shuffle_rng.shuffle(order);

    const uint64_t first_batch = (epoch == start_epoch) ? start_batch : 0;
    for (uint64_t b = first_batch; b < nb; ++b) {
      if (cfg.max_steps > 0 && steps_done >= cfg.max_steps) {
        stopped = true;
        break;
      }
      const size_t begin = static_cast<size_t>(b) * cfg.batch_size;
      const size_t end = std::min(n, begin + cfg.batch_size);
      std::vector<MaskedRow> rows;
      rows.reserve(end - begin);
      for (size_t k = begin; k < end; ++k) {
        const size_t idx = order[k];
        const auto& er = encoded[idx];
        const auto seq = assemble_sequence(er.word_ids, er.phon_ids, vocab,
                                           cfg.max_len);
        rows.push_back(apply_masking(
            seq, vocab, cfg.mask_prob,
            derive_seed(cfg.seed, seed_stream::kMask, epoch, idx)));
      }

      Tape<float> tape;
      auto bound = bind_weights(tape, weights, true);
      const uint64_t global_batch = epoch * nb + b;
      auto loss = joint_pretrain_loss(
          tape, bound, model_cfg, rows, loss_mode,
          derive_seed(cfg.seed, seed_stream::kDropout, global_batch), true);
      result.step_losses.push_back(loss.values);
      if (!loss.values.skip_step) {
        tape.backward(loss.total);
        trainer_detail::apply_gradients(
            weights, tape, bound, adam,
            warmup_decay_scale(global_batch, schedule_total,
                               cfg.warmup_fraction));
      }
      ++steps_done;
    }
  }

  // Next-position counters for resumption.
  uint64_t next_epoch = epoch, next_batch = 0;
  if (stopped) {
    next_epoch = steps_done / nb;
    next_batch = steps_done % nb;
  }
  result.checkpoint = fill_checkpoint(next_epoch, next_batch, steps_done);
  if (!cfg.checkpoint_dir.empty()) {
    std::filesystem::create_directories(cfg.checkpoint_dir);
    result.checkpoint.save(
        (std::filesystem::path(cfg.checkpoint_dir) / "last.ckpt").string());
  }
  return result;
}

struct FinetuneResult {
  Checkpoint best;
  std::vector<std::pair<double, double>> epoch_val_metrics;  // (acc, f1)
  std::optional<EvalReport> test_report;
};

inline int predict_record(const ModelWeights& weights,
                          const JointVocabulary& vocab,
                          const CorpusRecord& rec, RunMode mode,
                          const std::string& phoneme_source,
                          const Lexicon* lexicon, size_t max_len) {
  const auto er = trainer_detail::encode_record(rec, vocab, mode,
                                                phoneme_source, lexicon);
  const auto seq = assemble_sequence(er.word_ids, er.phon_ids, vocab, max_len);
  return predict_class(weights, seq);
}

// Task fine-tuning with a fresh classifier head. The checkpoint with the
// best validation accuracy (ties: macro-F1, then the earlier epoch) is
// returned; test metrics are computed on it when a test set is supplied.
inline FinetuneResult finetune(const std::vector<CorpusRecord>& task_corpus,
                               const JointVocabulary& vocab, RunConfig cfg,
                               const Checkpoint* init = nullptr,
                               const Lexicon* lexicon = nullptr,
                               const std::vector<CorpusRecord>* test = nullptr,
                               const std::vector<CorpusRecord>* val_override =
                                   nullptr) {
  cfg = cfg.resolved();
  cfg.validate();
  if (!is_finetune_mode(cfg.mode)) {
    throw ConfigError("finetune: '" + phonelm::to_string(cfg.mode) +
                      "' is not a fine-tuning mode");
  }
  if (task_corpus.empty()) throw ConfigError("finetune: empty task corpus");

  size_t num_classes = cfg.num_classes;
  int max_label = -1;
  for (size_t i = 0; i < task_corpus.size(); ++i) {
    if (!task_corpus[i].label.has_value()) {
      throw ConfigError("finetune: record " + std::to_string(i) +
                        " has no label");
    }
    max_label = std::max(max_label, *task_corpus[i].label);
    if (*task_corpus[i].label < 0) {
      throw ConfigError("finetune: negative label");
    }
  }
  if (num_classes == 0) {
    num_classes = static_cast<size_t>(max_label) + 1;
  } else if (static_cast<size_t>(max_label) >= num_classes) {
    throw ConfigError("finetune: corpus labels reach class id " +
                      std::to_string(max_label) + " but the run is " +
                      "configured for " + std::to_string(num_classes) +
                      " classes");
  }

  ModelWeights weights;
  ModelConfig model_cfg;
  if (init != nullptr) {
    if (init->weights.cfg.vocab_size != vocab.total_size()) {
      throw ConfigError(
          "finetune: checkpoint vocab_size " +
          std::to_string(init->weights.cfg.vocab_size) +
          " does not match vocabulary size " +
          std::to_string(vocab.total_size()));
    }
    weights = init->weights;
    model_cfg = weights.cfg;
  } else {
    model_cfg = cfg.model;
    if (model_cfg.vocab_size == 0) model_cfg.vocab_size = vocab.total_size();
    if (model_cfg.vocab_size != vocab.total_size()) {
      throw ConfigError("finetune: model vocab_size mismatch");
    }
    model_cfg.seed = cfg.seed;
    model_cfg.validate();
    weights = ModelWeights::init(model_cfg);
  }
  weights.init_classifier(num_classes, cfg.seed);

  // Validation split: last val_fraction of the seed-shuffled order, used
  // only when no explicit validation set exists.
  std::vector<size_t> train_idx, val_idx;
  if (val_override != nullptr) {
    train_idx.resize(task_corpus.size());
    for (size_t i = 0; i < train_idx.size(); ++i) train_idx[i] = i;
  } else {
    std::vector<size_t> order(task_corpus.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(cfg.seed, seed_stream::kValSplit));
    rng.shuffle(order);
    size_t n_val = static_cast<size_t>(
        std::llround(cfg.val_fraction * static_cast<double>(order.size())));
    n_val = std::clamp<size_t>(n_val, 1, order.size() - 1);
    train_idx.assign(order.begin(), order.end() - n_val);
    val_idx.assign(order.end() - n_val, order.end());
  }

  std::vector<trainer_detail::EncodedRecord> encoded;
  encoded.reserve(task_corpus.size());
  for (const auto& rec : task_corpus) {
    encoded.push_back(trainer_detail::encode_record(
        rec, vocab, cfg.mode, cfg.phoneme_source, lexicon));
  }

  auto eval_on = [&](const ModelWeights& w,
                     const std::vector<size_t>& idx,
                     const std::vector<CorpusRecord>* extern_set) {
    std::vector<int> preds, gold;
    if (extern_set != nullptr) {
      for (const auto& rec : *extern_set) {
        preds.push_back(predict_record(w, vocab, rec, cfg.mode,
                                       cfg.phoneme_source, lexicon,
                                       cfg.max_len));
        gold.push_back(rec.label.value());
      }
    } else {
      for (size_t i : idx) {
        const auto seq = assemble_sequence(encoded[i].word_ids,
                                           encoded[i].phon_ids, vocab,
                                           cfg.max_len);
        preds.push_back(predict_class(w, seq));
        gold.push_back(encoded[i].label);
      }
    }
    return evaluate_metrics(preds, gold, num_classes);
  };

  const size_t n = train_idx.size();
  const size_t nb = (n + cfg.batch_size - 1) / cfg.batch_size;
  const uint64_t schedule_total =
      static_cast<uint64_t>(cfg.epochs) * static_cast<uint64_t>(nb);
  Adam<float> adam(AdamConfig{.lr = cfg.lr});

  FinetuneResult result;
  ModelWeights best_weights = weights;
  double best_acc = -1.0, best_f1 = -1.0;
  int64_t best_epoch = -1;

  for (uint64_t epoch = 0; epoch < static_cast<uint64_t>(cfg.epochs);
       ++epoch) {
    std::vector<size_t> order = train_idx;
    Rng shuffle_rng(derive_seed(cfg.seed, seed_stream::kOrder, epoch));
    shuffle_rng.shuffle(order);
    for (uint64_t b = 0; b < nb; ++b) {
      const size_t begin = static_cast<size_t>(b) * cfg.batch_size;
      const size_t end = std::min(n, begin + cfg.batch_size);
      if (begin >= end) break;

      Tape<float> tape;
      auto bound = bind_weights(tape, weights, true);
      std::optional<Var<float>> loss_sum;
      const uint64_t global_batch = epoch * nb + b;
      for (size_t k = begin; k < end; ++k) {
        const size_t idx = order[k];
        const auto seq = assemble_sequence(encoded[idx].word_ids,
                                           encoded[idx].phon_ids, vocab,
                                           cfg.max_len);
        Rng drop(derive_seed(cfg.seed, seed_stream::kDropout,
                             global_batch, k - begin));
        Rng* drop_ptr =
            model_cfg.dropout_rate > 0.0 ? &drop : nullptr;
        auto logits =
            classify_forward(tape, bound, model_cfg, seq, nullptr, drop_ptr);
        auto ce = ag::cross_entropy_sum(logits, {encoded[idx].label});
        loss_sum = loss_sum.has_value() ? ag::add(*loss_sum, ce) : ce;
      }
      auto loss = ag::scale(*loss_sum,
                            1.0f / static_cast<float>(end - begin));
      tape.backward(loss);
      trainer_detail::apply_gradients(
          weights, tape, bound, adam,
          warmup_decay_scale(global_batch, schedule_total,
                             cfg.warmup_fraction));
    }

    const auto [acc, f1] = eval_on(weights, val_idx, val_override);
    result.epoch_val_metrics.emplace_back(acc, f1);
    if (acc > best_acc || (acc == best_acc && f1 > best_f1)) {
      best_acc = acc;
      best_f1 = f1;
      best_epoch = static_cast<int64_t>(epoch);
      best_weights = weights;
    }
  }

  Checkpoint ck;
  ck.weights = best_weights;
  ck.mode = phonelm::to_string(cfg.mode);
  ck.phoneme_source = cfg.phoneme_source;
  ck.seed = cfg.seed;
  ck.max_len = cfg.max_len;
  ck.mask_prob = cfg.mask_prob;
  ck.epoch = static_cast<uint64_t>(cfg.epochs);
  ck.step = schedule_total;
  ck.total_steps_planned = schedule_total;
  ck.best_val_accuracy = best_acc;
  ck.best_val_macro_f1 = best_f1;
  ck.best_epoch = best_epoch;
  ck.adam_cfg = adam.config();
  ck.adam_step = adam.step_count();
  result.best = std::move(ck);
  if (!cfg.checkpoint_dir.empty()) {
    std::filesystem::create_directories(cfg.checkpoint_dir);
    result.best.save(
        (std::filesystem::path(cfg.checkpoint_dir) / "best.ckpt").string());
  }

  if (test != nullptr) {
    std::vector<int> preds;
    for (const auto& rec : *test) {
      preds.push_back(predict_record(result.best.weights, vocab, rec,
                                     cfg.mode, cfg.phoneme_source, lexicon,
                                     cfg.max_len));
    }
    nlohmann::json meta{{"mode", phonelm::to_string(cfg.mode)},
                        {"seed", cfg.seed},
                        {"best_epoch", best_epoch}};
    result.test_report = wer_bucket_report(*test, preds, num_classes, meta);
  }
  return result;
}

// Evaluates a fine-tuned checkpoint on a labeled test corpus.
inline EvalReport evaluate_checkpoint(const Checkpoint& ckpt,
                                      const JointVocabulary& vocab,
                                      const std::vector<CorpusRecord>& test,
                                      const Lexicon* lexicon = nullptr) {
  const RunMode mode = run_mode_from_string(ckpt.mode);
  if (!is_finetune_mode(mode)) {
    throw ConfigError("evaluate: checkpoint mode '" + ckpt.mode +
                      "' has no classifier");
  }
  if (ckpt.weights.num_classes == 0) {
    throw ConfigError("evaluate: checkpoint has no classifier head");
  }
  if (test.empty()) throw ConfigError("evaluate: empty test corpus");
  int max_label = -1;
  for (const auto& rec : test) {
    if (!rec.label.has_value()) {
      throw ConfigError("evaluate: test record has no label");
    }
    max_label = std::max(max_label, *rec.label);
  }
  if (static_cast<size_t>(max_label) >= ckpt.weights.num_classes) {
    throw ConfigError(
        "evaluate: corpus labels reach class id " +
        std::to_string(max_label) + " but the checkpoint classifier has " +
        std::to_string(ckpt.weights.num_classes) + " classes");
  }
  std::vector<int> preds;
  preds.reserve(test.size());
  for (const auto& rec : test) {
    preds.push_back(predict_record(ckpt.weights, vocab, rec, mode,
                                   ckpt.phoneme_source, lexicon,
                                   ckpt.max_len));
  }
  nlohmann::json meta{{"mode", ckpt.mode},
                      {"seed", ckpt.seed},
                      {"step", ckpt.step}};
  return wer_bucket_report(test, preds, ckpt.weights.num_classes, meta);
}

}  // namespace phonelm
