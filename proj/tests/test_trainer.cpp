#include <catch2/catch_amalgamated.hpp>

#include <fstream>
#include <set>
#include <vector>

#include "phonelm/checkpoint.hpp"
#include "phonelm/trainer.hpp"
#include "support/synthetic_task.hpp"
#include "support/test_support.hpp"

using namespace phonelm;
using phonelm::testing::make_synthetic_pipeline;
using phonelm::testing::SyntheticPipeline;
using phonelm::testing::TempDir;

namespace {

const SyntheticPipeline& small_pipeline() {
  static const SyntheticPipeline pipe = make_synthetic_pipeline(
      /*seed=*/11, /*n_pretrain=*/220, /*n_train=*/120, /*n_test=*/80,
      /*word_merges=*/120, /*phoneme_merges=*/100);
  return pipe;
}

RunConfig tiny_pretrain(RunMode mode, uint64_t seed) {
  RunConfig cfg;
  cfg.mode = mode;
  cfg.epochs = 1;
  cfg.batch_size = 16;
  cfg.lr = 3e-4;
  cfg.seed = seed;
  cfg.max_len = 96;
  cfg.model.hidden_dim = 32;
  cfg.model.num_layers = 2;
  cfg.model.num_heads = 2;
  cfg.model.ffn_dim = 64;
  cfg.model.max_positions = 96;
  cfg.model.dropout_rate = 0.1;
  return cfg;
}

bool weights_equal(const ModelWeights& a, const ModelWeights& b) {
  if (a.cfg != b.cfg || a.num_classes != b.num_classes) return false;
  bool equal = true;
  std::vector<const Tensor32*> av, bv;
  a.p.for_each([&](const std::string&, const Tensor32& t) {
    av.push_back(&t);
  });
  b.p.for_each([&](const std::string&, const Tensor32& t) {
    bv.push_back(&t);
  });
  if (av.size() != bv.size()) return false;
  for (size_t i = 0; i < av.size(); ++i) {
    if (av[i]->shape() != bv[i]->shape()) return false;
    for (size_t k = 0; k < av[i]->size(); ++k) {
      if ((*av[i])[k] != (*bv[i])[k]) equal = false;
    }
  }
  return equal;
}

}  // namespace

TEST_CASE("experiment matrix covers all eight rows exactly once") {
  const auto& matrix = experiment_matrix();
  REQUIRE(matrix.size() == 8);
  const std::set<std::string> expected = {
      "clean_upper_bound",        "no_pretrain",
      "word_pretrain",            "joint_pretrain_asr_phonemes",
      "joint_pretrain",           "joint_pretrain_word_finetune",
      "joint_pretrain_phoneme_finetune", "separate_losses_pretrain"};
  std::set<std::string> got;
  std::set<std::tuple<std::string, std::string, std::string>> plans;
  for (const auto& [name, plan] : matrix) {
    got.insert(name);
    if (plan.pretrain_mode.has_value()) {
      REQUIRE(is_pretrain_mode(*plan.pretrain_mode));
    }
    REQUIRE(is_finetune_mode(plan.finetune_mode));
    plans.insert({plan.pretrain_mode ? to_string(*plan.pretrain_mode) : "-",
                  to_string(plan.finetune_mode),
                  plan.finetune_phoneme_source});
  }
  REQUIRE(got == expected);
  REQUIRE(plans.size() == 8);  // all distinct
}

TEST_CASE("run mode names round-trip; configs resolve mode defaults") {
  for (const auto& [name, mode] : run_mode_names()) {
    REQUIRE(to_string(mode) == name);
    REQUIRE(run_mode_from_string(name) == mode);
  }
  REQUIRE_THROWS_AS(run_mode_from_string("nope"), ConfigError);

  RunConfig pre;
  pre.mode = RunMode::pretrain_joint;
  REQUIRE(pre.resolved().epochs == 50);
  REQUIRE(pre.resolved().lr == Catch::Approx(3e-4));
  RunConfig ft;
  ft.mode = RunMode::finetune_joint;
  REQUIRE(ft.resolved().epochs == 20);
  REQUIRE(ft.resolved().lr == Catch::Approx(3e-5));

  // Explicit zero epochs survives resolution (it is meaningful).
  pre.epochs = 0;
  REQUIRE(pre.resolved().epochs == 0);

  const auto j = pre.to_json();
  const auto back = RunConfig::from_json(j);
  REQUIRE(back.mode == pre.mode);
  REQUIRE(back.epochs == 0);
}

TEST_CASE("pretrain: zero epochs returns the untouched initialization") {
  const auto& pipe = small_pipeline();
  auto cfg = tiny_pretrain(RunMode::pretrain_joint, 5);
  cfg.epochs = 0;
  const auto res = pretrain(pipe.pretrain, pipe.vocab, cfg);

  ModelConfig expect_cfg = cfg.model;
  expect_cfg.vocab_size = pipe.vocab.total_size();
  expect_cfg.seed = cfg.seed;
  const auto fresh = ModelWeights::init(expect_cfg);
  REQUIRE(weights_equal(res.checkpoint.weights, fresh));
  REQUIRE(res.step_losses.empty());
}

TEST_CASE("pretrain: loss decreases over 200 steps on a toy corpus") {
  const auto& pipe = small_pipeline();
  auto cfg = tiny_pretrain(RunMode::pretrain_joint, 7);
  cfg.epochs = 15;  // 220 records / 16 -> 14 steps per epoch
  cfg.max_steps = 200;
  const auto res = pretrain(pipe.pretrain, pipe.vocab, cfg);
  REQUIRE(res.step_losses.size() == 200);
  double first = 0, last = 0;
  for (size_t i = 0; i < 10; ++i) {
    first += res.step_losses[i].total;
    last += res.step_losses[200 - 10 + i].total;
  }
  REQUIRE(last / 10.0 < first / 10.0);
}

TEST_CASE("pretrain: mode-specific corpus field errors") {
  const auto& pipe = small_pipeline();
  auto cfg = tiny_pretrain(RunMode::pretrain_joint, 8);
  cfg.epochs = 1;

  auto corpus = pipe.pretrain;
  for (auto& r : corpus) r.phoneme.clear();
  REQUIRE_THROWS_WITH(
      pretrain(corpus, pipe.vocab, cfg),
      Catch::Matchers::ContainsSubstring("pretrain_joint") &&
          Catch::Matchers::ContainsSubstring("phoneme"));

  // B3-style pretraining derives phonemes from the transcript but needs
  // a lexicon for that.
  cfg.mode = RunMode::pretrain_joint_g2p_on_asr;
  REQUIRE_THROWS_WITH(pretrain(corpus, pipe.vocab, cfg),
                      Catch::Matchers::ContainsSubstring("lexicon"));
  const auto res = pretrain(
      std::vector<CorpusRecord>(corpus.begin(), corpus.begin() + 40),
      pipe.vocab, cfg, &pipe.lexicon);
  REQUIRE(res.step_losses.size() == 3);
}

TEST_CASE("pretrain loss modes: word-only and separate-losses zeros") {
  const auto& pipe = small_pipeline();
  std::vector<CorpusRecord> corpus(pipe.pretrain.begin(),
                                   pipe.pretrain.begin() + 60);

  auto b2 = tiny_pretrain(RunMode::pretrain_word_only, 9);
  const auto res_b2 = pretrain(corpus, pipe.vocab, b2);
  for (const auto& l : res_b2.step_losses) {
    REQUIRE(l.phoneme_mlm_loss == 0.0);
    REQUIRE(l.joint_mlm_loss == 0.0);
    REQUIRE(l.total == l.word_mlm_loss);
  }

  auto a3 = tiny_pretrain(RunMode::pretrain_joint_no_joint_loss, 9);
  const auto res_a3 = pretrain(corpus, pipe.vocab, a3);
  for (const auto& l : res_a3.step_losses) {
    REQUIRE(l.joint_mlm_loss == 0.0);
    REQUIRE(l.total == l.word_mlm_loss + l.phoneme_mlm_loss);
    REQUIRE(l.phoneme_mlm_loss > 0.0);
  }
}

TEST_CASE("pretrain is reproducible for a fixed seed") {
  const auto& pipe = small_pipeline();
  std::vector<CorpusRecord> corpus(pipe.pretrain.begin(),
                                   pipe.pretrain.begin() + 48);
  auto cfg = tiny_pretrain(RunMode::pretrain_joint, 31);
  cfg.epochs = 2;
  const auto a = pretrain(corpus, pipe.vocab, cfg);
  const auto b = pretrain(corpus, pipe.vocab, cfg);
  REQUIRE(a.step_losses.size() == b.step_losses.size());
  for (size_t i = 0; i < a.step_losses.size(); ++i) {
    REQUIRE(a.step_losses[i].total == b.step_losses[i].total);
  }
  REQUIRE(weights_equal(a.checkpoint.weights, b.checkpoint.weights));
}

TEST_CASE("checkpoint: save/load round trip is bitwise") {
  const auto& pipe = small_pipeline();
  std::vector<CorpusRecord> corpus(pipe.pretrain.begin(),
                                   pipe.pretrain.begin() + 48);
  auto cfg = tiny_pretrain(RunMode::pretrain_joint, 13);
  const auto res = pretrain(corpus, pipe.vocab, cfg);

  TempDir tmp("ckpt");
  const auto path = tmp.file("m.ckpt");
  res.checkpoint.save(path);
  const auto back = Checkpoint::load(path);
  REQUIRE(weights_equal(back.weights, res.checkpoint.weights));
  REQUIRE(back.mode == res.checkpoint.mode);
  REQUIRE(back.seed == res.checkpoint.seed);
  REQUIRE(back.step == res.checkpoint.step);
  REQUIRE(back.adam_step == res.checkpoint.adam_step);
  REQUIRE(back.adam_moments.size() == res.checkpoint.adam_moments.size());
  for (const auto& [name, mv] : res.checkpoint.adam_moments) {
    const auto& got = back.adam_moments.at(name);
    for (size_t i = 0; i < mv.first.size(); ++i) {
      REQUIRE(got.first[i] == mv.first[i]);
      REQUIRE(got.second[i] == mv.second[i]);
    }
  }
}

TEST_CASE("checkpoint: corrupted files raise distinct errors") {
  const auto& pipe = small_pipeline();
  std::vector<CorpusRecord> corpus(pipe.pretrain.begin(),
                                   pipe.pretrain.begin() + 32);
  auto cfg = tiny_pretrain(RunMode::pretrain_joint, 14);
  cfg.epochs = 1;
  const auto res = pretrain(corpus, pipe.vocab, cfg);

  TempDir tmp("ckpt-bad");
  const auto path = tmp.file("m.ckpt");
  res.checkpoint.save(path);
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  in.close();

  SECTION("bad magic") {
    auto bad = bytes;
    bad[0] = 'X';
    const auto p = tmp.file("magic.ckpt");
    std::ofstream(p, std::ios::binary).write(bad.data(), bad.size());
    REQUIRE_THROWS_WITH(Checkpoint::load(p),
                        Catch::Matchers::ContainsSubstring("magic"));
  }
  SECTION("bumped format version") {
    auto bad = bytes;
    bad[4] = 9;  // little-endian u32 version field
    const auto p = tmp.file("ver.ckpt");
    std::ofstream(p, std::ios::binary).write(bad.data(), bad.size());
    REQUIRE_THROWS_WITH(Checkpoint::load(p),
                        Catch::Matchers::ContainsSubstring("version"));
  }
  SECTION("truncated file") {
    const auto p = tmp.file("trunc.ckpt");
    std::ofstream(p, std::ios::binary)
        .write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    REQUIRE_THROWS_WITH(Checkpoint::load(p),
                        Catch::Matchers::ContainsSubstring("truncated"));
  }
  SECTION("tensor shape mismatch against the embedded config") {
    // Patch hidden_dim 32 -> 48 in the JSON header (same byte length).
    auto bad = bytes;
    const auto needle = std::string("\"hidden_dim\":32");
    const auto at = bad.find(needle);
    REQUIRE(at != std::string::npos);
    bad.replace(at, needle.size(), "\"hidden_dim\":48");
    const auto p = tmp.file("shape.ckpt");
    std::ofstream(p, std::ios::binary).write(bad.data(), bad.size());
    REQUIRE_THROWS_WITH(Checkpoint::load(p),
                        Catch::Matchers::ContainsSubstring("shape mismatch"));
  }
}

TEST_CASE("resume from a checkpoint matches uninterrupted training bitwise") {
  const auto& pipe = small_pipeline();
  std::vector<CorpusRecord> corpus(pipe.pretrain.begin(),
                                   pipe.pretrain.begin() + 64);
  auto cfg = tiny_pretrain(RunMode::pretrain_joint, 17);
  cfg.epochs = 6;

  auto cfg10 = cfg;
  cfg10.max_steps = 10;
  const auto first = pretrain(corpus, pipe.vocab, cfg10);
  REQUIRE(first.checkpoint.step == 10);

  // Round trip through disk before resuming.
  TempDir tmp("resume");
  const auto path = tmp.file("mid.ckpt");
  first.checkpoint.save(path);
  const auto mid = Checkpoint::load(path);

  auto cfg20 = cfg;
  cfg20.max_steps = 20;
  const auto resumed = pretrain(corpus, pipe.vocab, cfg20, nullptr, &mid);
  const auto straight = pretrain(corpus, pipe.vocab, cfg20);
  REQUIRE(resumed.checkpoint.step == 20);
  REQUIRE(straight.checkpoint.step == 20);
  REQUIRE(weights_equal(resumed.checkpoint.weights,
                        straight.checkpoint.weights));
}

TEST_CASE("finetune: baseline with no pretraining runs and selects best") {
  const auto& pipe = small_pipeline();
  RunConfig cfg;
  cfg.mode = RunMode::finetune_word_only;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.lr = 3e-4;
  cfg.seed = 21;
  cfg.max_len = 64;
  cfg.model.hidden_dim = 32;
  cfg.model.num_layers = 1;
  cfg.model.num_heads = 2;
  cfg.model.ffn_dim = 64;
  cfg.model.max_positions = 64;
  cfg.model.dropout_rate = 0.0;
  const auto res = finetune(pipe.train, pipe.vocab, cfg, nullptr, nullptr,
                            &pipe.test);
  REQUIRE(res.epoch_val_metrics.size() == 2);
  REQUIRE(res.best.best_epoch >= 0);
  REQUIRE(res.best.weights.num_classes == 4);
  REQUIRE(res.test_report.has_value());
  REQUIRE(res.test_report->accuracy >= 0.0);
  size_t bucket_total = 0;
  for (const auto& b : res.test_report->buckets) bucket_total += b.count;
  REQUIRE(bucket_total == pipe.test.size());
}

TEST_CASE("finetune: label errors") {
  const auto& pipe = small_pipeline();
  RunConfig cfg;
  cfg.mode = RunMode::finetune_word_only;
  cfg.epochs = 1;
  cfg.seed = 3;
  cfg.model.dropout_rate = 0.0;
  cfg.model.hidden_dim = 16;
  cfg.model.num_layers = 1;
  cfg.model.num_heads = 2;
  cfg.model.ffn_dim = 32;

  auto unlabeled = pipe.train;
  unlabeled[3].label.reset();
  REQUIRE_THROWS_WITH(finetune(unlabeled, pipe.vocab, cfg),
                      Catch::Matchers::ContainsSubstring("no label"));

  auto cfg2 = cfg;
  cfg2.num_classes = 2;  // labels reach 3
  REQUIRE_THROWS_WITH(finetune(pipe.train, pipe.vocab, cfg2),
                      Catch::Matchers::ContainsSubstring("2 classes"));
}

TEST_CASE("finetune: word-only fine-tune on a joint-pretrained encoder") {
  // The low-resource path: the task corpus has no phoneme field at all.
  const auto& pipe = small_pipeline();
  auto pre_cfg = tiny_pretrain(RunMode::pretrain_joint, 23);
  std::vector<CorpusRecord> corpus(pipe.pretrain.begin(),
                                   pipe.pretrain.begin() + 64);
  const auto pre = pretrain(corpus, pipe.vocab, pre_cfg);

  auto task = pipe.train;
  for (auto& r : task) r.phoneme.clear();

  RunConfig cfg;
  cfg.mode = RunMode::finetune_word_only;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.lr = 3e-4;
  cfg.seed = 24;
  cfg.max_len = 96;
  const auto res =
      finetune(task, pipe.vocab, cfg, &pre.checkpoint, nullptr, &pipe.test);
  REQUIRE(res.test_report.has_value());
  REQUIRE(res.best.weights.cfg == pre.checkpoint.weights.cfg);
}

TEST_CASE("finetune: B3-style phoneme source derives from the transcript") {
  const auto& pipe = small_pipeline();
  RunConfig cfg;
  cfg.mode = RunMode::finetune_joint;
  cfg.phoneme_source = "g2p_asr";
  cfg.epochs = 1;
  cfg.batch_size = 16;
  cfg.lr = 3e-4;
  cfg.seed = 25;
  cfg.max_len = 96;
  cfg.model.hidden_dim = 16;
  cfg.model.num_layers = 1;
  cfg.model.num_heads = 2;
  cfg.model.ffn_dim = 32;
  cfg.model.max_positions = 96;
  cfg.model.dropout_rate = 0.0;

  REQUIRE_THROWS_WITH(finetune(pipe.train, pipe.vocab, cfg),
                      Catch::Matchers::ContainsSubstring("lexicon"));
  const auto res = finetune(pipe.train, pipe.vocab, cfg, nullptr,
                            &pipe.lexicon);
  REQUIRE(res.epoch_val_metrics.size() == 1);
}

TEST_CASE("finetune reaches 100% training accuracy on 64 samples") {
  // Overfit sanity: 64 records, validation pinned to the training set
  // itself, 200 optimization steps available.
  const auto& pipe = small_pipeline();
  std::vector<CorpusRecord> task(pipe.train.begin(), pipe.train.begin() + 64);

  RunConfig cfg;
  cfg.mode = RunMode::finetune_joint;
  cfg.epochs = 50;  // 64/16 = 4 steps per epoch -> 200 steps
  cfg.batch_size = 16;
  cfg.lr = 1e-3;
  cfg.warmup_fraction = 0.05;
  cfg.seed = 29;
  cfg.max_len = 96;
  cfg.model.hidden_dim = 32;
  cfg.model.num_layers = 2;
  cfg.model.num_heads = 2;
  cfg.model.ffn_dim = 64;
  cfg.model.max_positions = 96;
  cfg.model.dropout_rate = 0.0;

  const auto res =
      finetune(task, pipe.vocab, cfg, nullptr, nullptr, nullptr, &task);
  double best = 0;
  for (const auto& [acc, f1] : res.epoch_val_metrics) {
    best = std::max(best, acc);
  }
  REQUIRE(best == 1.0);
}

TEST_CASE("evaluate_checkpoint: layout from the checkpoint, error surface") {
  const auto& pipe = small_pipeline();
  RunConfig cfg;
  cfg.mode = RunMode::finetune_joint;
  cfg.epochs = 1;
  cfg.batch_size = 16;
  cfg.lr = 3e-4;
  cfg.seed = 33;
  cfg.max_len = 96;
  cfg.model.hidden_dim = 16;
  cfg.model.num_layers = 1;
  cfg.model.num_heads = 2;
  cfg.model.ffn_dim = 32;
  cfg.model.max_positions = 96;
  cfg.model.dropout_rate = 0.0;
  const auto res = finetune(pipe.train, pipe.vocab, cfg);

  const auto report = evaluate_checkpoint(res.best, pipe.vocab, pipe.test);
  REQUIRE(report.accuracy >= 0.0);
  REQUIRE(report.meta.at("mode") == "finetune_joint");

  // Labels beyond the classifier's class count are rejected.
  auto bad_test = pipe.test;
  bad_test[0].label = 17;
  REQUIRE_THROWS_WITH(evaluate_checkpoint(res.best, pipe.vocab, bad_test),
                      Catch::Matchers::ContainsSubstring("4 classes"));

  // Pretraining checkpoints have no classifier to evaluate.
  auto pre_cfg = tiny_pretrain(RunMode::pretrain_joint, 34);
  pre_cfg.epochs = 0;
  const auto pre = pretrain(pipe.pretrain, pipe.vocab, pre_cfg);
  REQUIRE_THROWS_AS(evaluate_checkpoint(pre.checkpoint, pipe.vocab, pipe.test),
                    ConfigError);
}
