#pragma once

#include <array>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "phonelm/bpe.hpp"
#include "phonelm/errors.hpp"

namespace phonelm {

namespace vocab_detail {

// Byte <-> printable-codepoint bijection so that raw-byte word tokens
// serialize as valid UTF-8 JSON strings: printable latin-1 maps to
// itself, everything else to U+0100 + byte.
inline const std::array<uint32_t, 256>& byte_to_cp() {
  static const std::array<uint32_t, 256> table = [] {
    std::array<uint32_t, 256> t{};
    for (int b = 0; b < 256; ++b) {
      const bool printable = (b >= 0x21 && b <= 0x7e) ||
                             (b >= 0xa1 && b <= 0xac) ||
                             (b >= 0xae && b <= 0xff);
      t[b] = printable ? static_cast<uint32_t>(b)
                       : 0x100u + static_cast<uint32_t>(b);
    }
    return t;
  }();
  return table;
}

inline void append_utf8(std::string& s, uint32_t cp) {
  if (cp < 0x80) {
    s += static_cast<char>(cp);
  } else if (cp < 0x800) {
    s += static_cast<char>(0xc0 | (cp >> 6));
    s += static_cast<char>(0x80 | (cp & 0x3f));
  } else {
    s += static_cast<char>(0xe0 | (cp >> 12));
    s += static_cast<char>(0x80 | ((cp >> 6) & 0x3f));
    s += static_cast<char>(0x80 | (cp & 0x3f));
  }
}

inline std::string bytes_to_printable(const std::string& raw) {
  std::string out;
  for (unsigned char b : raw) append_utf8(out, byte_to_cp()[b]);
  return out;
}

inline std::string printable_to_bytes(const std::string& s) {
  // Inverse of bytes_to_printable; input is well-formed by construction.
  static const auto cp_to_byte = [] {
    std::array<int, 0x200> inv;
    inv.fill(-1);
    for (int b = 0; b < 256; ++b) inv[byte_to_cp()[b]] = b;
    return inv;
  }();
  std::string out;
  size_t i = 0;
  while (i < s.size()) {
    uint32_t cp = 0;
    const unsigned char c = s[i];
    if (c < 0x80) {
      cp = c;
      i += 1;
    } else if ((c >> 5) == 0x6 && i + 1 < s.size()) {
      cp = (static_cast<uint32_t>(c & 0x1f) << 6) |
           (static_cast<uint32_t>(static_cast<unsigned char>(s[i + 1])) &
            0x3f);
      i += 2;
    } else if ((c >> 4) == 0xe && i + 2 < s.size()) {
      cp = (static_cast<uint32_t>(c & 0x0f) << 12) |
           ((static_cast<uint32_t>(static_cast<unsigned char>(s[i + 1])) &
             0x3f)
            << 6) |
           (static_cast<uint32_t>(static_cast<unsigned char>(s[i + 2])) &
            0x3f);
      i += 3;
    } else {
      throw FormatError("vocabulary: malformed token encoding");
    }
    if (cp >= 0x200 || cp_to_byte[cp] < 0) {
      throw FormatError("vocabulary: token codepoint outside byte map");
    }
    out += static_cast<char>(cp_to_byte[cp]);
  }
  return out;
}

}  // namespace vocab_detail

// Joint id space: specials [0,5), then word-model ids, then
// phoneme-model ids. The phoneme sub-vocabulary is capped at 600 units.
struct JointVocabulary {
  static constexpr int32_t kBos = 0;
  static constexpr int32_t kSep = 1;
  static constexpr int32_t kMask = 2;
  static constexpr int32_t kPad = 3;
  static constexpr int32_t kUnk = 4;
  static constexpr int32_t kNumSpecials = 5;

  static constexpr size_t kMaxPhonemeUnits = 600;

  BpeModel word_model;
  BpeModel phoneme_model;

  enum class TokenType { special, word, phoneme };

  size_t word_offset() const { return kNumSpecials; }
  size_t phoneme_offset() const {
    return kNumSpecials + word_model.tokens.size();
  }
  size_t word_size() const { return word_model.tokens.size(); }
  size_t phoneme_size() const { return phoneme_model.tokens.size(); }
  size_t total_size() const {
    return kNumSpecials + word_model.tokens.size() +
           phoneme_model.tokens.size();
  }

  void validate() const {
    if (word_model.mode != BpeMode::word ||
        phoneme_model.mode != BpeMode::phoneme) {
      throw ConfigError("joint vocabulary: models in the wrong modes");
    }
    if (phoneme_model.tokens.size() > kMaxPhonemeUnits) {
      throw ConfigError("joint vocabulary: phoneme vocabulary exceeds " +
                        std::to_string(kMaxPhonemeUnits) + " units");
    }
  }

  TokenType type_of(int32_t id) const {
    if (id < 0 || static_cast<size_t>(id) >= total_size()) {
      throw ConfigError("type_of: id out of range: " + std::to_string(id));
    }
    if (id < kNumSpecials) return TokenType::special;
    if (static_cast<size_t>(id) < phoneme_offset()) return TokenType::word;
    return TokenType::phoneme;
  }

  static std::string special_name(int32_t id) {
    switch (id) {
      case kBos: return "[BOS]";
      case kSep: return "[SEP]";
      case kMask: return "[MASK]";
      case kPad: return "[PAD]";
      case kUnk: return "[UNK]";
      default: throw ConfigError("special_name: not a special id");
    }
  }

  // Encode into joint ids; unknown phoneme symbols map to [UNK].
  std::vector<int32_t> encode(const std::string& text, BpeMode mode) const {
    const BpeModel& model =
        mode == BpeMode::word ? word_model : phoneme_model;
    const int32_t offset = static_cast<int32_t>(
        mode == BpeMode::word ? word_offset() : phoneme_offset());
    std::vector<int32_t> out;
    for (int32_t id : model.encode(text)) {
      out.push_back(id == BpeModel::kUnknown ? kUnk : id + offset);
    }
    return out;
  }

  // Inverse of encode on its image; specials render bracketed. Adjacent
  // runs of different types are joined with a single space.
  std::string decode(const std::vector<int32_t>& ids) const {
    std::string out;
    std::vector<int32_t> run;
    TokenType run_type = TokenType::special;
    auto flush = [&] {
      if (run.empty()) return;
      if (!out.empty()) out += ' ';
      const BpeModel& model =
          run_type == TokenType::word ? word_model : phoneme_model;
      out += model.decode(run);
      run.clear();
    };
    for (int32_t id : ids) {
      const TokenType t = type_of(id);
      if (t == TokenType::special) {
        flush();
        if (!out.empty()) out += ' ';
        out += special_name(id);
        continue;
      }
      if (!run.empty() && t != run_type) flush();
      run_type = t;
      const int32_t offset = static_cast<int32_t>(
          t == TokenType::word ? word_offset() : phoneme_offset());
      run.push_back(id - offset);
    }
    flush();
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["specials"] = {{"bos", kBos}, {"sep", kSep}, {"mask", kMask},
                     {"pad", kPad}, {"unk", kUnk}};
    auto dump_tokens = [](const BpeModel& m, bool word_mode) {
      nlohmann::json arr = nlohmann::json::array();
      for (const auto& t : m.tokens) {
        arr.push_back(word_mode ? vocab_detail::bytes_to_printable(t) : t);
      }
      return arr;
    };
    auto dump_merges = [](const BpeModel& m, bool word_mode) {
      nlohmann::json arr = nlohmann::json::array();
      for (const auto& [l, r] : m.merges) {
        if (word_mode) {
          arr.push_back({vocab_detail::bytes_to_printable(l),
                         vocab_detail::bytes_to_printable(r)});
        } else {
          arr.push_back({l, r});
        }
      }
      return arr;
    };
    j["word_tokens"] = dump_tokens(word_model, true);
    j["phoneme_tokens"] = dump_tokens(phoneme_model, false);
    j["word_merges"] = dump_merges(word_model, true);
    j["phoneme_merges"] = dump_merges(phoneme_model, false);
    j["word_base_size"] = word_model.base_size;
    j["phoneme_base_size"] = phoneme_model.base_size;
    return j;
  }

  static JointVocabulary from_json(const nlohmann::json& j) {
    JointVocabulary v;
    try {
      v.word_model.mode = BpeMode::word;
      v.phoneme_model.mode = BpeMode::phoneme;
      for (const auto& t : j.at("word_tokens")) {
        v.word_model.tokens.push_back(
            vocab_detail::printable_to_bytes(t.get<std::string>()));
      }
      for (const auto& t : j.at("phoneme_tokens")) {
        v.phoneme_model.tokens.push_back(t.get<std::string>());
      }
      for (const auto& m : j.at("word_merges")) {
        v.word_model.merges.emplace_back(
            vocab_detail::printable_to_bytes(m.at(0).get<std::string>()),
            vocab_detail::printable_to_bytes(m.at(1).get<std::string>()));
      }
      for (const auto& m : j.at("phoneme_merges")) {
        v.phoneme_model.merges.emplace_back(m.at(0).get<std::string>(),
                                            m.at(1).get<std::string>());
      }
      v.word_model.base_size = j.at("word_base_size").get<size_t>();
      v.phoneme_model.base_size = j.at("phoneme_base_size").get<size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("vocabulary json: ") + e.what());
    }
    v.word_model.rebuild_index();
    v.phoneme_model.rebuild_index();
    v.validate();
    return v;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write vocabulary: " + path);
    out << to_json().dump(2) << '\n';
  }

  static JointVocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open vocabulary: " + path);
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) {
      throw FormatError("vocabulary json: parse error in " + path);
    }
    return from_json(j);
  }
};

inline JointVocabulary build_joint_vocab(BpeModel word_model,
                                         BpeModel phoneme_model) {
  JointVocabulary v;
  v.word_model = std::move(word_model);
  v.phoneme_model = std::move(phoneme_model);
  v.validate();
  return v;
}

}  // namespace phonelm
