#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "phonelm/arpabet.hpp"
#include "phonelm/errors.hpp"

namespace phonelm {

// Pronouncing dictionary with an inverse (pronunciation -> words) index.
// Loads CMUdict-format text: `word  PH1 PH2 ...` per line, `;;;` comments,
// `word(2)`-style alternates (only the first pronunciation is kept),
// stress digits stripped.
class Lexicon {
 public:
  static Lexicon from_text(std::string_view text) {
    Lexicon lex;
    std::istringstream iss{std::string(text)};
    std::string line;
    size_t lineno = 0;
    while (std::getline(iss, line)) {
      ++lineno;
      if (line.rfind(";;;", 0) == 0) continue;
      std::istringstream ls(line);
      std::string word;
      if (!(ls >> word)) continue;
      // Alternate pronunciations ("word(2)") are skipped: entries keeps
      // exactly one pronunciation per word.
      if (auto paren = word.find('('); paren != std::string::npos) continue;
      std::transform(word.begin(), word.end(), word.begin(),
                     [](unsigned char c) { return std::tolower(c); });
      std::vector<std::string> phones;
      std::string sym;
      while (ls >> sym) {
        sym = strip_stress(std::move(sym));
        if (!is_arpabet(sym)) {
          throw FormatError("lexicon line " + std::to_string(lineno) +
                            ": unknown phoneme '" + sym + "'");
        }
        phones.push_back(std::move(sym));
      }
      if (phones.empty()) {
        throw FormatError("lexicon line " + std::to_string(lineno) +
                          ": no phonemes for '" + word + "'");
      }
      lex.entries_.emplace(std::move(word), std::move(phones));
    }
    if (lex.entries_.empty()) throw FormatError("lexicon: no entries");
    lex.build_inverse();
    return lex;
  }

  static Lexicon load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open lexicon: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return from_text(buf.str());
  }

  const std::map<std::string, std::vector<std::string>>& entries() const {
    return entries_;
  }
  // Inverse index: space-joined pronunciation -> sorted word list.
  const std::map<std::string, std::vector<std::string>>& by_pronunciation()
      const {
    return inverse_;
  }
  const std::map<char, std::string>& letter_fallback() const {
    return letter_fallback_table();
  }

  bool contains(const std::string& word) const {
    return entries_.count(word) > 0;
  }

  const std::vector<std::string>* find(const std::string& word) const {
    auto it = entries_.find(word);
    return it == entries_.end() ? nullptr : &it->second;
  }

  static std::string pronunciation_key(
      const std::vector<std::string>& phones) {
    std::string key;
    for (size_t i = 0; i < phones.size(); ++i) {
      if (i) key += ' ';
      key += phones[i];
    }
    return key;
  }

  // Pronunciation of a single word: lexicon entry, or the letter fallback
  // for OOV words. Characters outside [a-z0-9] are dropped and counted.
  std::vector<std::string> pronounce(const std::string& word,
                                     size_t* dropped = nullptr) const {
    if (const auto* p = find(word)) return *p;
    std::vector<std::string> out;
    const auto& fb = letter_fallback_table();
    for (char c : word) {
      auto it = fb.find(static_cast<char>(
          std::tolower(static_cast<unsigned char>(c))));
      if (it == fb.end()) {
        if (dropped) ++*dropped;
      } else {
        out.push_back(it->second);
      }
    }
    return out;
  }

 private:
  void build_inverse() {
    for (const auto& [word, phones] : entries_) {
      inverse_[pronunciation_key(phones)].push_back(word);
    }
    for (auto& [key, words] : inverse_) {
      std::sort(words.begin(), words.end());
    }
  }

  std::map<std::string, std::vector<std::string>> entries_;
  std::map<std::string, std::vector<std::string>> inverse_;
};

// Grapheme-to-phoneme conversion: per-word pronunciations joined by a
// single pause mark. Total function; unknown characters are dropped and
// counted through `dropped`.
inline std::vector<std::string> g2p(const std::string& text,
                                    const Lexicon& lexicon,
                                    size_t* dropped = nullptr) {
  std::vector<std::string> out;
  std::istringstream iss(text);
  std::string raw;
  bool first = true;
  while (iss >> raw) {
    // Trim surrounding punctuation so "cat," resolves to "cat".
    size_t b = 0, e = raw.size();
    auto word_char = [](unsigned char c) {
      return std::isalnum(c) || c == '\'';
    };
    while (b < e && !word_char(static_cast<unsigned char>(raw[b]))) {
      if (dropped) ++*dropped;
      ++b;
    }
    while (e > b && !word_char(static_cast<unsigned char>(raw[e - 1]))) {
      if (dropped) ++*dropped;
      --e;
    }
    std::string word = raw.substr(b, e - b);
    std::transform(word.begin(), word.end(), word.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    if (word.empty()) continue;
    auto phones = lexicon.pronounce(word, dropped);
    if (phones.empty()) continue;
    if (!first) out.emplace_back(kPauseMark);
    first = false;
    out.insert(out.end(), phones.begin(), phones.end());
  }
  return out;
}

inline std::string join_phonemes(const std::vector<std::string>& phones) {
  std::string s;
  for (size_t i = 0; i < phones.size(); ++i) {
    if (i) s += ' ';
    s += phones[i];
  }
  return s;
}

}  // namespace phonelm
