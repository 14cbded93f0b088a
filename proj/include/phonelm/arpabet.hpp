#pragma once

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "phonelm/errors.hpp"

namespace phonelm {

// Word-boundary pause mark used inside phoneme sequences.
inline constexpr std::string_view kPauseMark = "|";

// The 39-symbol ARPABET alphabet (stress digits stripped).
inline const std::array<std::string, 39>& arpabet_symbols() {
  static const std::array<std::string, 39> syms = {
      "AA", "AE", "AH", "AO", "AW", "AY", "B",  "CH", "D",  "DH",
      "EH", "ER", "EY", "F",  "G",  "HH", "IH", "IY", "JH", "K",
      "L",  "M",  "N",  "NG", "OW", "OY", "P",  "R",  "S",  "SH",
      "T",  "TH", "UH", "UW", "V",  "W",  "Y",  "Z",  "ZH"};
  return syms;
}

inline bool is_arpabet(std::string_view s) {
  const auto& syms = arpabet_symbols();
  return std::find(syms.begin(), syms.end(), s) != syms.end();
}

// Strips a trailing stress digit (AE1 -> AE).
inline std::string strip_stress(std::string sym) {
  if (!sym.empty() && sym.back() >= '0' && sym.back() <= '9') {
    sym.pop_back();
  }
  return sym;
}

// Fixed letter -> phoneme fallback used for out-of-vocabulary words.
// Total over [a-z0-9].
inline const std::map<char, std::string>& letter_fallback_table() {
  static const std::map<char, std::string> table = {
      {'a', "AE"}, {'b', "B"},  {'c', "K"},  {'d', "D"},  {'e', "EH"},
      {'f', "F"},  {'g', "G"},  {'h', "HH"}, {'i', "IH"}, {'j', "JH"},
      {'k', "K"},  {'l', "L"},  {'m', "M"},  {'n', "N"},  {'o', "AA"},
      {'p', "P"},  {'q', "K"},  {'r', "R"},  {'s', "S"},  {'t', "T"},
      {'u', "AH"}, {'v', "V"},  {'w', "W"},  {'x', "S"},  {'y', "Y"},
      {'z', "Z"},  {'0', "Z"},  {'1', "W"},  {'2', "T"},  {'3', "TH"},
      {'4', "F"},  {'5', "F"},  {'6', "S"},  {'7', "S"},  {'8', "EY"},
      {'9', "N"}};
  return table;
}

// Default manner-of-articulation confusion classes; identical content is
// shipped as data/phoneme_classes.txt.
inline constexpr std::string_view kDefaultConfusionClasses =
    "AA AE AH AO AW AY EH ER EY IH IY OW OY UH UW\n"
    "B D G K P T\n"
    "CH JH\n"
    "DH F HH S SH TH V Z ZH\n"
    "M N NG\n"
    "L R\n"
    "W Y\n";

// Disjoint confusion classes; substitutions stay inside a class.
class ConfusionTable {
 public:
  static ConfusionTable from_text(std::string_view text) {
    ConfusionTable table;
    std::istringstream iss{std::string(text)};
    std::string line;
    while (std::getline(iss, line)) {
      std::vector<std::string> members;
      std::istringstream ls(line);
      std::string sym;
      while (ls >> sym) members.push_back(sym);
      if (members.empty()) continue;
      const size_t idx = table.classes_.size();
      for (const auto& s : members) {
        if (!is_arpabet(s)) {
          throw FormatError("confusion table: unknown phoneme '" + s + "'");
        }
        if (!table.class_of_.emplace(s, idx).second) {
          throw FormatError("confusion table: '" + s +
                            "' appears in two classes");
        }
      }
      table.classes_.push_back(std::move(members));
    }
    if (table.classes_.empty()) {
      throw FormatError("confusion table: no classes");
    }
    return table;
  }

  static ConfusionTable load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open confusion table: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return from_text(buf.str());
  }

  static ConfusionTable defaults() {
    return from_text(kDefaultConfusionClasses);
  }

  // Members of the class containing sym, or nullptr for symbols outside
  // the table (e.g. the pause mark).
  const std::vector<std::string>* class_members(const std::string& sym) const {
    auto it = class_of_.find(sym);
    if (it == class_of_.end()) return nullptr;
    return &classes_[it->second];
  }

  bool same_class(const std::string& a, const std::string& b) const {
    auto ia = class_of_.find(a);
    auto ib = class_of_.find(b);
    return ia != class_of_.end() && ib != class_of_.end() &&
           ia->second == ib->second;
  }

  const std::vector<std::vector<std::string>>& classes() const {
    return classes_;
  }

 private:
  std::vector<std::vector<std::string>> classes_;
  std::map<std::string, size_t> class_of_;
};

}  // namespace phonelm
