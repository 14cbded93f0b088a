#pragma once

#include <algorithm>
#include <sstream>
#include <string>
#include <vector>

#include "phonelm/errors.hpp"

namespace phonelm {

inline std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream iss(s);
  std::string tok;
  while (iss >> tok) out.push_back(tok);
  return out;
}

// Unit-cost Levenshtein distance over token sequences.
template <typename Token>
size_t levenshtein(const std::vector<Token>& a, const std::vector<Token>& b) {
  const size_t n = a.size(), m = b.size();
  std::vector<size_t> prev(m + 1), cur(m + 1);
  for (size_t j = 0; j <= m; ++j) prev[j] = j;
  for (size_t i = 1; i <= n; ++i) {
    cur[0] = i;
    for (size_t j = 1; j <= m; ++j) {
      const size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

// Word error rate: edit distance over whitespace tokens divided by the
// reference length. The reference must be non-empty.
inline double compute_wer(const std::string& ref, const std::string& hyp) {
  const auto r = split_ws(ref);
  if (r.empty()) throw ConfigError("compute_wer: empty reference");
  const auto h = split_ws(hyp);
  return static_cast<double>(levenshtein(r, h)) /
         static_cast<double>(r.size());
}

// Phoneme error rate over token sequences.
inline double compute_per(const std::vector<std::string>& ref,
                          const std::vector<std::string>& hyp) {
  if (ref.empty()) throw ConfigError("compute_per: empty reference");
  return static_cast<double>(levenshtein(ref, hyp)) /
         static_cast<double>(ref.size());
}

}  // namespace phonelm
