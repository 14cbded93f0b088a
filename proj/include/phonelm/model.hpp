#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "phonelm/autograd.hpp"
#include "phonelm/batching.hpp"
#include "phonelm/errors.hpp"
#include "phonelm/rng.hpp"
#include "phonelm/tensor.hpp"
#include "phonelm/vocab.hpp"

namespace phonelm {

inline constexpr double kLayerNormEps = 1e-5;

struct ModelConfig {
  size_t vocab_size = 0;
  size_t hidden_dim = 128;
  size_t num_layers = 4;
  size_t num_heads = 4;
  size_t ffn_dim = 512;
  size_t max_positions = 256;
  size_t num_types = 2;
  double dropout_rate = 0.1;
  uint64_t seed = 1;

  void validate() const {
    if (vocab_size == 0) throw ConfigError("model: vocab_size must be set");
    if (hidden_dim == 0 || num_heads == 0 || hidden_dim % num_heads != 0) {
      throw ConfigError("model: hidden_dim must be divisible by num_heads");
    }
    if (num_types != 2) throw ConfigError("model: num_types must be 2");
    if (max_positions < 4) throw ConfigError("model: max_positions too small");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
      throw ConfigError("model: dropout_rate outside [0,1)");
    }
  }

  nlohmann::json to_json() const {
    return nlohmann::json{
        {"vocab_size", vocab_size},   {"hidden_dim", hidden_dim},
        {"num_layers", num_layers},   {"num_heads", num_heads},
        {"ffn_dim", ffn_dim},         {"max_positions", max_positions},
        {"num_types", num_types},     {"dropout_rate", dropout_rate},
        {"seed", seed}};
  }
  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<size_t>();
    c.hidden_dim = j.at("hidden_dim").get<size_t>();
    c.num_layers = j.at("num_layers").get<size_t>();
    c.num_heads = j.at("num_heads").get<size_t>();
    c.ffn_dim = j.at("ffn_dim").get<size_t>();
    c.max_positions = j.at("max_positions").get<size_t>();
    c.num_types = j.at("num_types").get<size_t>();
    c.dropout_rate = j.at("dropout_rate").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
  }
  bool operator==(const ModelConfig&) const = default;
};

// Parameter bundle, generic over the element type so the same layout
// serves tensors (storage) and tape vars (one training step).
template <typename TT>
struct EncoderLayerParams {
  TT wq, bq, wk, bk, wv, bv, wo, bo;
  TT ln1_g, ln1_b;
  TT w1, b1, w2, b2;
  TT ln2_g, ln2_b;
};

template <typename TT>
struct ModelParams {
  TT tok_emb, pos_emb, type_emb;
  TT emb_ln_g, emb_ln_b;
  std::vector<EncoderLayerParams<TT>> layers;
  TT final_ln_g, final_ln_b;
  TT mlm_w, mlm_b, mlm_ln_g, mlm_ln_b;
  TT cls_w, cls_b;
  bool has_classifier = false;

  template <typename Self, typename F>
  static void visit(Self&& self, F&& f) {
    f("tok_emb", self.tok_emb);
    f("pos_emb", self.pos_emb);
    f("type_emb", self.type_emb);
    f("emb_ln.g", self.emb_ln_g);
    f("emb_ln.b", self.emb_ln_b);
    for (size_t i = 0; i < self.layers.size(); ++i) {
      auto& l = self.layers[i];
      const std::string p = "layer" + std::to_string(i) + ".";
      f(p + "wq", l.wq);
      f(p + "bq", l.bq);
      f(p + "wk", l.wk);
      f(p + "bk", l.bk);
      f(p + "wv", l.wv);
      f(p + "bv", l.bv);
      f(p + "wo", l.wo);
      f(p + "bo", l.bo);
      f(p + "ln1.g", l.ln1_g);
      f(p + "ln1.b", l.ln1_b);
      f(p + "w1", l.w1);
      f(p + "b1", l.b1);
      f(p + "w2", l.w2);
      f(p + "b2", l.b2);
      f(p + "ln2.g", l.ln2_g);
      f(p + "ln2.b", l.ln2_b);
    }
    f("final_ln.g", self.final_ln_g);
    f("final_ln.b", self.final_ln_b);
    f("mlm.w", self.mlm_w);
    f("mlm.b", self.mlm_b);
    f("mlm_ln.g", self.mlm_ln_g);
    f("mlm_ln.b", self.mlm_ln_b);
    if (self.has_classifier) {
      f("cls.w", self.cls_w);
      f("cls.b", self.cls_b);
    }
  }
  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }
};

// Trainable state: config + tensors. The MLM output projection reuses
// tok_emb (weight tying); there is no separate output matrix anywhere.
template <typename T>
struct ModelWeightsT {
  ModelConfig cfg;
  size_t num_classes = 0;
  ModelParams<TensorT<T>> p;

  static ModelWeightsT init(const ModelConfig& cfg, size_t num_classes = 0) {
    cfg.validate();
    ModelWeightsT w;
    w.cfg = cfg;
    w.num_classes = num_classes;
    Rng rng(derive_seed(cfg.seed, seed_stream::kInit));
    const T std = static_cast<T>(0.02);
    const size_t d = cfg.hidden_dim;
    auto mat = [&](size_t r, size_t c) {
      return TensorT<T>::randn({r, c}, rng, std);
    };
    auto zeros = [&](size_t n) { return TensorT<T>({n}); };
    auto ones = [&](size_t n) { return TensorT<T>::full({n}, T{1}); };

    w.p.tok_emb = mat(cfg.vocab_size, d);
    w.p.pos_emb = mat(cfg.max_positions, d);
    w.p.type_emb = mat(cfg.num_types, d);
    w.p.emb_ln_g = ones(d);
    w.p.emb_ln_b = zeros(d);
    w.p.layers.resize(cfg.num_layers);
    for (auto& l : w.p.layers) {
      l.wq = mat(d, d);
      l.bq = zeros(d);
      l.wk = mat(d, d);
      l.bk = zeros(d);
      l.wv = mat(d, d);
      l.bv = zeros(d);
      l.wo = mat(d, d);
      l.bo = zeros(d);
      l.ln1_g = ones(d);
      l.ln1_b = zeros(d);
      l.w1 = mat(d, cfg.ffn_dim);
      l.b1 = zeros(cfg.ffn_dim);
      l.w2 = mat(cfg.ffn_dim, d);
      l.b2 = zeros(d);
      l.ln2_g = ones(d);
      l.ln2_b = zeros(d);
    }
    w.p.final_ln_g = ones(d);
    w.p.final_ln_b = zeros(d);
    w.p.mlm_w = mat(d, d);
    w.p.mlm_b = zeros(d);
    w.p.mlm_ln_g = ones(d);
    w.p.mlm_ln_b = zeros(d);
    if (num_classes > 0) {
      w.p.has_classifier = true;
      w.init_classifier(num_classes, cfg.seed);
    }
    return w;
  }

  // Fresh classifier head, independent of the encoder init stream.
  void init_classifier(size_t classes, uint64_t seed) {
    if (classes == 0) throw ConfigError("classifier: zero classes");
    num_classes = classes;
    p.has_classifier = true;
    Rng rng(derive_seed(seed, seed_stream::kHead));
    p.cls_w = TensorT<T>::randn({cfg.hidden_dim, classes}, rng,
                                static_cast<T>(0.02));
    p.cls_b = TensorT<T>({classes});
  }

  // Replaces the token embedding table (external warm start).
  void import_token_embeddings(const TensorT<T>& table) {
    if (!table.same_shape(p.tok_emb)) {
      throw ConfigError("embedding import: shape mismatch");
    }
    p.tok_emb = table;
  }

  template <typename U>
  ModelWeightsT<U> cast() const {
    ModelWeightsT<U> out;
    out.cfg = cfg;
    out.num_classes = num_classes;
    out.p.layers.resize(p.layers.size());
    out.p.has_classifier = p.has_classifier;
    std::vector<const TensorT<T>*> src;
    p.for_each([&](const std::string&, const TensorT<T>& t) {
      src.push_back(&t);
    });
    size_t i = 0;
    out.p.for_each([&](const std::string&, TensorT<U>& t) {
      t = src[i++]->template cast<U>();
    });
    return out;
  }

  size_t param_count() const {
    size_t n = 0;
    p.for_each([&](const std::string&, const TensorT<T>& t) {
      n += t.size();
    });
    return n;
  }

  bool all_finite() const {
    bool ok = true;
    p.for_each([&](const std::string&, const TensorT<T>& t) {
      ok = ok && t.all_finite();
    });
    return ok;
  }
};

using ModelWeights = ModelWeightsT<float>;

// One training step's view: every parameter bound to a tape leaf.
template <typename T>
struct BoundModel {
  ModelParams<Var<T>> p;
  std::vector<std::pair<std::string, Var<T>>> flat;  // visit order
};

template <typename T>
BoundModel<T> bind_weights(Tape<T>& tape, const ModelWeightsT<T>& w,
                           bool trainable) {
  BoundModel<T> out;
  out.p.layers.resize(w.p.layers.size());
  out.p.has_classifier = w.p.has_classifier;
  std::vector<Var<T>> vars;
  w.p.for_each([&](const std::string& name, const TensorT<T>& t) {
    Var<T> v = tape.leaf(t, trainable, name);
    vars.push_back(v);
    out.flat.emplace_back(name, v);
  });
  size_t i = 0;
  out.p.for_each([&](const std::string&, Var<T>& v) { v = vars[i++]; });
  return out;
}

// Captured attention probabilities, one [H,S,S] tensor per layer.
template <typename T>
struct AttnCapture {
  std::vector<TensorT<T>> probs;
};

namespace model_detail {

template <typename T>
Var<T> maybe_dropout(Var<T> x, double rate, Rng* rng) {
  if (rng == nullptr || rate <= 0.0) return x;
  return ag::dropout(x, rate, *rng);
}

}  // namespace model_detail

// Embedding sum (token + position + type), layer norm, dropout.
template <typename T>
Var<T> embed_row(Tape<T>& tape, const BoundModel<T>& m,
                 const ModelConfig& cfg, const JointSequence& seq,
                 Rng* dropout_rng) {
  for (int32_t pos : seq.positions) {
    if (pos < 0 || static_cast<size_t>(pos) >= cfg.max_positions) {
      throw ConfigError("embed: position id exceeds max_positions: " +
                        std::to_string(pos));
    }
  }
  std::vector<int32_t> type_ids(seq.types.begin(), seq.types.end());
  for (int32_t t : type_ids) {
    if (t < 0 || static_cast<size_t>(t) >= cfg.num_types) {
      throw ConfigError("embed: type id out of range");
    }
  }
  auto tok = ag::embedding(m.p.tok_emb, seq.ids);
  auto pos = ag::embedding(m.p.pos_emb, seq.positions);
  auto typ = ag::embedding(m.p.type_emb, type_ids);
  auto sum = ag::add(ag::add(tok, pos), typ);
  auto normed =
      ag::layer_norm(sum, m.p.emb_ln_g, m.p.emb_ln_b,
                     static_cast<T>(kLayerNormEps));
  return model_detail::maybe_dropout(normed, cfg.dropout_rate, dropout_rng);
}

// Post-layer-norm transformer stack. PAD positions (attn == 0) are
// excluded from attention with an additive -1e9 key bias, which
// underflows to exactly zero probability after the softmax.
template <typename T>
Var<T> encoder_forward(Tape<T>& tape, const BoundModel<T>& m,
                       const ModelConfig& cfg, const JointSequence& seq,
                       const std::vector<uint8_t>* attn = nullptr,
                       Rng* dropout_rng = nullptr,
                       AttnCapture<T>* capture = nullptr) {
  if (attn != nullptr && attn->size() != seq.size()) {
    throw ConfigError("encoder: attention mask length mismatch");
  }
  const size_t s = seq.size();
  std::vector<T> key_bias(s, T{});
  if (attn != nullptr) {
    for (size_t j = 0; j < s; ++j) {
      if ((*attn)[j] == 0) key_bias[j] = static_cast<T>(-1e9);
    }
  }
  const T scale =
      static_cast<T>(1.0 /
                     std::sqrt(static_cast<double>(cfg.hidden_dim /
                                                   cfg.num_heads)));
  auto x = embed_row(tape, m, cfg, seq, dropout_rng);
  const T eps = static_cast<T>(kLayerNormEps);
  for (const auto& l : m.p.layers) {
    auto q = ag::split_heads(ag::linear(x, l.wq, l.bq), cfg.num_heads);
    auto k = ag::split_heads(ag::linear(x, l.wk, l.bk), cfg.num_heads);
    auto v = ag::split_heads(ag::linear(x, l.wv, l.bv), cfg.num_heads);
    auto scores = ag::scale(ag::bmm_nt(q, k), scale);
    scores = ag::add_key_bias(scores, key_bias);
    auto probs = ag::softmax_lastdim(scores);
    if (capture != nullptr) capture->probs.push_back(probs.value());
    auto ctx = ag::merge_heads(ag::bmm(probs, v));
    auto attn_out = ag::linear(ctx, l.wo, l.bo);
    attn_out =
        model_detail::maybe_dropout(attn_out, cfg.dropout_rate, dropout_rng);
    x = ag::layer_norm(ag::add(x, attn_out), l.ln1_g, l.ln1_b, eps);
    auto ffn = ag::linear(ag::gelu(ag::linear(x, l.w1, l.b1)), l.w2, l.b2);
    ffn = model_detail::maybe_dropout(ffn, cfg.dropout_rate, dropout_rng);
    x = ag::layer_norm(ag::add(x, ffn), l.ln2_g, l.ln2_b, eps);
  }
  x = ag::layer_norm(x, m.p.final_ln_g, m.p.final_ln_b, eps);
  if (!x.value().all_finite()) {
    throw NumericError("encoder: non-finite activations");
  }
  return x;
}

// MLM head at the selected positions: dense + GELU + layer norm, then
// the tied projection onto the token embedding.
template <typename T>
Var<T> mlm_logits(Tape<T>& tape, const BoundModel<T>& m,
                  Var<T> states, const std::vector<size_t>& positions) {
  auto h = ag::gather_rows(states, positions);
  auto t = ag::layer_norm(ag::gelu(ag::linear(h, m.p.mlm_w, m.p.mlm_b)),
                          m.p.mlm_ln_g, m.p.mlm_ln_b,
                          static_cast<T>(kLayerNormEps));
  return ag::matmul_nt(t, m.p.tok_emb);
}

// Class logits from the BOS state.
template <typename T>
Var<T> classify_forward(Tape<T>& tape, const BoundModel<T>& m,
                        const ModelConfig& cfg, const JointSequence& seq,
                        const std::vector<uint8_t>* attn = nullptr,
                        Rng* dropout_rng = nullptr) {
  if (!m.p.has_classifier) {
    throw ConfigError("classify: model has no classifier head");
  }
  auto states = encoder_forward(tape, m, cfg, seq, attn, dropout_rng);
  auto pooled = ag::gather_rows(states, {0});
  pooled = model_detail::maybe_dropout(pooled, cfg.dropout_rate, dropout_rng);
  return ag::linear(pooled, m.p.cls_w, m.p.cls_b);
}

// ----------------------------------------------------------------------
// Joint pretraining loss: three forward passes through ONE weight set.
//   word pass    masked word layout      -> CE at word mask positions
//   phoneme pass masked phoneme layout   -> CE at phoneme mask positions
//   joint pass   full masked joint row   -> CE at all mask positions
// Each term is the mean token cross entropy over its mask set across the
// batch; the three terms are summed unweighted. The same mask
// realization feeds all passes.
// ----------------------------------------------------------------------

enum class LossMode { joint, word_only, separate_losses };

struct LossBreakdown {
  double word_mlm_loss = 0.0;
  double phoneme_mlm_loss = 0.0;
  double joint_mlm_loss = 0.0;
  double total = 0.0;
  size_t word_masked = 0;
  size_t phoneme_masked = 0;
  size_t joint_masked = 0;
  // True when no pass had any masked token: callers skip the step.
  bool skip_step = false;
};

// Word-only view of a (possibly masked) joint row: BOS .. words .. SEP.
// Mask indices are unchanged (the word block is a prefix).
inline JointSequence word_slice(const JointSequence& s) {
  JointSequence out;
  const size_t end = s.word_end + 1;  // include the middle SEP
  out.ids.assign(s.ids.begin(), s.ids.begin() + end);
  out.positions.assign(s.positions.begin(), s.positions.begin() + end);
  out.types.assign(s.types.begin(), s.types.begin() + end);
  out.word_begin = s.word_begin;
  out.word_end = s.word_end;
  out.phon_begin = out.phon_end = out.ids.size();
  return out;
}

// Phoneme-only view: BOS .. phonemes .. SEP; indices shift by
// (phon_begin - 1).
inline JointSequence phoneme_slice(const JointSequence& s) {
  JointSequence out;
  out.ids.push_back(JointVocabulary::kBos);
  out.positions.push_back(0);
  out.types.push_back(0);
  const size_t end = s.phon_end + 1;  // include the trailing SEP
  out.ids.insert(out.ids.end(), s.ids.begin() + s.phon_begin,
                 s.ids.begin() + end);
  out.positions.insert(out.positions.end(),
                       s.positions.begin() + s.phon_begin,
                       s.positions.begin() + end);
  out.types.insert(out.types.end(), s.types.begin() + s.phon_begin,
                   s.types.begin() + end);
  out.word_begin = out.word_end = 1;
  out.phon_begin = 1;
  out.phon_end = 1 + s.phon_len();
  return out;
}

template <typename T>
struct LossVars {
  Var<T> total;
  LossBreakdown values;
};

template <typename T>
LossVars<T> joint_pretrain_loss(Tape<T>& tape, const BoundModel<T>& m,
                                const ModelConfig& cfg,
                                const std::vector<MaskedRow>& rows,
                                LossMode mode, uint64_t dropout_seed,
                                bool training) {
  std::optional<Var<T>> word_sum, phon_sum, joint_sum;
  size_t word_n = 0, phon_n = 0, joint_n = 0;
  auto accumulate = [](std::optional<Var<T>>& acc, Var<T> v) {
    acc = acc.has_value() ? ag::add(*acc, v) : v;
  };

  const bool use_dropout = training && cfg.dropout_rate > 0.0;
  for (size_t r = 0; r < rows.size(); ++r) {
    const MaskedRow& row = rows[r];
    auto pass_rng = [&](uint64_t pass) {
      return Rng(derive_seed(dropout_seed, seed_stream::kDropout,
                             r * 4 + pass));
    };

    if (!row.word_mask_pos.empty()) {
      Rng rng = pass_rng(0);
      auto states = encoder_forward(tape, m, cfg, word_slice(row.seq),
                                    nullptr, use_dropout ? &rng : nullptr);
      auto logits = mlm_logits(tape, m, states, row.word_mask_pos);
      accumulate(word_sum, ag::cross_entropy_sum(logits, row.word_targets));
      word_n += row.word_mask_pos.size();
    }
    if (mode != LossMode::word_only && !row.phon_mask_pos.empty()) {
      Rng rng = pass_rng(1);
      std::vector<size_t> shifted;
      shifted.reserve(row.phon_mask_pos.size());
      for (size_t i : row.phon_mask_pos) {
        shifted.push_back(i - row.seq.phon_begin + 1);
      }
      auto states = encoder_forward(tape, m, cfg, phoneme_slice(row.seq),
                                    nullptr, use_dropout ? &rng : nullptr);
      auto logits = mlm_logits(tape, m, states, shifted);
      accumulate(phon_sum, ag::cross_entropy_sum(logits, row.phon_targets));
      phon_n += row.phon_mask_pos.size();
    }
    if (mode == LossMode::joint && row.masked_total() > 0) {
      Rng rng = pass_rng(2);
      std::vector<size_t> positions = row.word_mask_pos;
      positions.insert(positions.end(), row.phon_mask_pos.begin(),
                       row.phon_mask_pos.end());
      std::vector<int32_t> targets = row.word_targets;
      targets.insert(targets.end(), row.phon_targets.begin(),
                     row.phon_targets.end());
      auto states =
          encoder_forward(tape, m, cfg, row.seq, &row.attn,
                          use_dropout ? &rng : nullptr);
      auto logits = mlm_logits(tape, m, states, positions);
      accumulate(joint_sum, ag::cross_entropy_sum(logits, targets));
      joint_n += positions.size();
    }
  }

  auto finish = [&](std::optional<Var<T>>& sum, size_t n) {
    if (!sum.has_value() || n == 0) return tape.scalar(T{});
    return ag::scale(*sum, T{1} / static_cast<T>(n));
  };
  Var<T> word_term = finish(word_sum, word_n);
  Var<T> phon_term = finish(phon_sum, phon_n);
  Var<T> joint_term = finish(joint_sum, joint_n);

  LossVars<T> out{ag::add(ag::add(word_term, phon_term), joint_term), {}};
  out.values.word_mlm_loss = static_cast<double>(word_term.value()[0]);
  out.values.phoneme_mlm_loss = static_cast<double>(phon_term.value()[0]);
  out.values.joint_mlm_loss = static_cast<double>(joint_term.value()[0]);
  out.values.total = out.values.word_mlm_loss + out.values.phoneme_mlm_loss +
                     out.values.joint_mlm_loss;
  out.values.word_masked = word_n;
  out.values.phoneme_masked = phon_n;
  out.values.joint_masked = joint_n;
  out.values.skip_step = (word_n + phon_n + joint_n) == 0;
  return out;
}

// ----------------------------------------------------------------------
// Gradient-free evaluation helpers.
// ----------------------------------------------------------------------

template <typename T>
TensorT<T> encode_states_eval(const ModelWeightsT<T>& w,
                              const JointSequence& seq,
                              const std::vector<uint8_t>* attn = nullptr,
                              AttnCapture<T>* capture = nullptr) {
  Tape<T> tape;
  auto m = bind_weights(tape, w, false);
  auto states = encoder_forward(tape, m, w.cfg, seq, attn, nullptr, capture);
  return states.value();
}

template <typename T>
TensorT<T> mlm_logits_eval(const ModelWeightsT<T>& w,
                           const JointSequence& seq,
                           const std::vector<size_t>& positions,
                           const std::vector<uint8_t>* attn = nullptr) {
  Tape<T> tape;
  auto m = bind_weights(tape, w, false);
  auto states = encoder_forward(tape, m, w.cfg, seq, attn);
  return mlm_logits(tape, m, states, positions).value();
}

template <typename T>
std::vector<T> classify_logits_eval(const ModelWeightsT<T>& w,
                                    const JointSequence& seq) {
  Tape<T> tape;
  auto m = bind_weights(tape, w, false);
  auto logits = classify_forward(tape, m, w.cfg, seq, nullptr, nullptr);
  const auto& v = logits.value();
  return std::vector<T>(v.data(), v.data() + v.size());
}

template <typename T>
int predict_class(const ModelWeightsT<T>& w, const JointSequence& seq) {
  const auto logits = classify_logits_eval(w, seq);
  int best = 0;
  for (size_t c = 1; c < logits.size(); ++c) {
    if (logits[c] > logits[best]) best = static_cast<int>(c);
  }
  return best;
}

}  // namespace phonelm
