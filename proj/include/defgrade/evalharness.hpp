#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "defgrade/cot.hpp"

namespace defgrade::evalharness {

struct LabeledPair {
  Grade predicted;  // may be kParseFailureGrade
  Grade truth;
};

// Exact non-negative rational, always reduced.
struct Fraction {
  std::int64_t num = 0;
  std::int64_t den = 1;

  static Fraction make(std::int64_t num, std::int64_t den);
  Fraction operator+(const Fraction& o) const;
  Fraction operator/(std::int64_t k) const;
  [[nodiscard]] double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  bool operator==(const Fraction&) const = default;
};

// K x (K + 1) counts; rows are truths, the last column collects predictions
// outside the grade set (parse failures included).
struct ConfusionMatrix {
  std::vector<Grade> classes;
  std::vector<std::vector<std::int64_t>> counts;

  [[nodiscard]] std::int64_t total() const;
  [[nodiscard]] std::int64_t tp(std::size_t i) const;
  [[nodiscard]] std::int64_t fp(std::size_t i) const;
  [[nodiscard]] std::int64_t fn(std::size_t i) const;
};

ConfusionMatrix confusion(const std::vector<LabeledPair>& pairs, const std::vector<Grade>& classes);

// Without an explicit grade set, the classes are the distinct non-sentinel
// labels seen in truths and predictions, sorted.
std::vector<Grade> infer_classes(const std::vector<LabeledPair>& pairs);

Fraction accuracy_exact(const std::vector<LabeledPair>& pairs);
// A class with TP = FP = FN = 0 scores F1 = 0 and still counts toward K.
Fraction macro_f1_exact(const std::vector<LabeledPair>& pairs, const std::vector<Grade>& classes);

double accuracy(const std::vector<LabeledPair>& pairs);
double macro_f1(const std::vector<LabeledPair>& pairs);
double macro_f1(const std::vector<LabeledPair>& pairs, const std::vector<Grade>& classes);

struct Summary {
  double acc = 0.0;
  double mf1 = 0.0;
  std::size_t n = 0;
};
Summary summarize(const std::vector<LabeledPair>& pairs, const std::vector<Grade>& classes);

// One row of the machine-readable report.
struct ReportRow {
  std::string task;
  std::string model;
  int case_id = 4;
  std::string placement = "corresponding";
  std::string modules = "-";
  double acc = 0.0;
  double mf1 = 0.0;
  std::size_t n = 0;
};

enum class Layout { models_by_cases, placements, modules };
Layout layout_from(std::string_view s);

std::string to_csv(const std::vector<ReportRow>& rows);
std::vector<ReportRow> from_csv(std::string_view csv);
// Markdown table built from the CSV rows: percentages with two decimals,
// per-column maxima in bold (every tied maximum is bolded). Throws
// InvalidArgument when rows disagree on an axis the layout holds fixed or
// when two rows land in the same cell.
std::string render_markdown(const std::vector<ReportRow>& rows, Layout layout);

}  // namespace defgrade::evalharness
