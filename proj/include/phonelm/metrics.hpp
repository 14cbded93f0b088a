#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "phonelm/corpus.hpp"
#include "phonelm/errors.hpp"

namespace phonelm {

// Accuracy and macro-F1. Classes with no support in either predictions
// or gold contribute an F1 of zero to the macro average.
inline std::pair<double, double> evaluate_metrics(
    const std::vector<int>& predictions, const std::vector<int>& gold,
    size_t num_classes) {
  if (predictions.size() != gold.size()) {
    throw ConfigError("evaluate_metrics: predictions/gold length mismatch");
  }
  if (predictions.empty()) {
    throw ConfigError("evaluate_metrics: empty inputs");
  }
  std::vector<size_t> tp(num_classes), fp(num_classes), fn(num_classes);
  size_t correct = 0;
  for (size_t i = 0; i < gold.size(); ++i) {
    const int p = predictions[i], g = gold[i];
    if (p < 0 || static_cast<size_t>(p) >= num_classes || g < 0 ||
        static_cast<size_t>(g) >= num_classes) {
      throw ConfigError("evaluate_metrics: label out of range");
    }
    if (p == g) {
      ++correct;
      ++tp[g];
    } else {
      ++fp[p];
      ++fn[g];
    }
  }
  const double accuracy =
      static_cast<double>(correct) / static_cast<double>(gold.size());
  double f1_sum = 0.0;
  for (size_t c = 0; c < num_classes; ++c) {
    const double denom_p = static_cast<double>(tp[c] + fp[c]);
    const double denom_r = static_cast<double>(tp[c] + fn[c]);
    const double prec = denom_p > 0 ? tp[c] / denom_p : 0.0;
    const double rec = denom_r > 0 ? tp[c] / denom_r : 0.0;
    f1_sum += (prec + rec) > 0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
  }
  return {accuracy, f1_sum / static_cast<double>(num_classes)};
}

inline const std::vector<std::string>& wer_bucket_names() {
  static const std::vector<std::string> names = {"<10", "10-20", "20-30",
                                                 "30+"};
  return names;
}

inline size_t wer_bucket_index(double wer) {
  if (wer < 0.10) return 0;
  if (wer < 0.20) return 1;
  if (wer < 0.30) return 2;
  return 3;
}

struct BucketStat {
  double accuracy = 0.0;
  size_t count = 0;
  bool operator==(const BucketStat&) const = default;
};

struct EvalReport {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<BucketStat> buckets;  // wer_bucket_names() order
  nlohmann::json meta;

  bool operator==(const EvalReport& o) const {
    return accuracy == o.accuracy && macro_f1 == o.macro_f1 &&
           buckets == o.buckets && meta == o.meta;
  }

  nlohmann::json to_json() const {
    nlohmann::json b;
    for (size_t i = 0; i < buckets.size(); ++i) {
      b[wer_bucket_names()[i]] = {{"accuracy", buckets[i].accuracy},
                                  {"count", buckets[i].count}};
    }
    return nlohmann::json{
        {"overall", {{"accuracy", accuracy}, {"macro_f1", macro_f1}}},
        {"buckets", b},
        {"meta", meta}};
  }

  static EvalReport from_json(const nlohmann::json& j) {
    EvalReport r;
    try {
      r.accuracy = j.at("overall").at("accuracy").get<double>();
      r.macro_f1 = j.at("overall").at("macro_f1").get<double>();
      for (const auto& name : wer_bucket_names()) {
        const auto& b = j.at("buckets").at(name);
        r.buckets.push_back(
            {b.at("accuracy").get<double>(), b.at("count").get<size_t>()});
      }
      r.meta = j.value("meta", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("eval report json: ") + e.what());
    }
    return r;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write report: " + path);
    out << to_json().dump(2) << '\n';
  }
  static EvalReport load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open report: " + path);
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw FormatError("eval report: invalid JSON");
    return from_json(j);
  }
};

// Routes records into the WER buckets by their stored per-record WER and
// reports per-bucket accuracy plus the overall row.
inline EvalReport wer_bucket_report(const std::vector<CorpusRecord>& records,
                                    const std::vector<int>& predictions,
                                    size_t num_classes,
                                    nlohmann::json meta = {}) {
  if (records.size() != predictions.size()) {
    throw ConfigError("wer_bucket_report: records/predictions mismatch");
  }
  std::vector<int> gold;
  gold.reserve(records.size());
  for (size_t i = 0; i < records.size(); ++i) {
    if (!records[i].label.has_value()) {
      throw ConfigError("wer_bucket_report: record " + std::to_string(i) +
                        " has no label");
    }
    gold.push_back(*records[i].label);
  }
  EvalReport report;
  std::tie(report.accuracy, report.macro_f1) =
      evaluate_metrics(predictions, gold, num_classes);
  report.buckets.assign(wer_bucket_names().size(), {});
  std::vector<size_t> correct(report.buckets.size(), 0);
  for (size_t i = 0; i < records.size(); ++i) {
    const size_t b = wer_bucket_index(records[i].wer);
    ++report.buckets[b].count;
    if (predictions[i] == gold[i]) ++correct[b];
  }
  for (size_t b = 0; b < report.buckets.size(); ++b) {
    report.buckets[b].accuracy =
        report.buckets[b].count > 0
            ? static_cast<double>(correct[b]) /
                  static_cast<double>(report.buckets[b].count)
            : 0.0;
  }
  report.meta = std::move(meta);
  return report;
}

}  // namespace phonelm
