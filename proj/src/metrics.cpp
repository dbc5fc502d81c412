#include "minibert/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <vector>

#include "minibert/error.hpp"

namespace minibert {
namespace {

void CheckInputs(std::span<const double> scores, std::span<const int> labels, const char* what) {
  if (scores.size() != labels.size()) {
    Fail(ErrorKind::kInvalidArgument, std::string(what) + ": " + std::to_string(scores.size()) +
                                          " scores but " + std::to_string(labels.size()) + " labels");
  }
  if (scores.empty()) Fail(ErrorKind::kInvalidArgument, std::string(what) + ": empty input");
  for (int l : labels) {
    if (l != 0 && l != 1) Fail(ErrorKind::kInvalidArgument, std::string(what) + ": labels must be 0 or 1");
  }
}

}  // namespace

double Auc(std::span<const double> scores, std::span<const int> labels) {
  CheckInputs(scores, labels, "auc");
  const std::size_t n = scores.size();
  const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t negatives = n - positives;
  if (positives == 0 || negatives == 0) {
    Fail(ErrorKind::kUndefinedMetric, "auc is undefined unless both classes are present");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the rank sum keeps midranks integral.
  std::size_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const std::size_t twice_midrank = (i + 1) + j;  // ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) twice_rank_sum += twice_midrank;
    }
    i = j;
  }
  // 2U = 2R - P(P+1): twice the count of (pos > neg) pairs plus ties.
  const std::size_t twice_u = twice_rank_sum - positives * (positives + 1);
  return static_cast<double>(twice_u) / (2.0 * static_cast<double>(positives) * static_cast<double>(negatives));
}

ConfusionMetrics Prf1(std::span<const double> scores, std::span<const int> labels, double threshold) {
  CheckInputs(scores, labels, "prf1");
  ConfusionMetrics m;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= threshold;
    const bool actual = labels[i] == 1;
    if (predicted && actual) ++m.tp;
    if (predicted && !actual) ++m.fp;
    if (!predicted && actual) ++m.fn;
    if (!predicted && !actual) ++m.tn;
  }
  if (m.tp + m.fn == 0) Fail(ErrorKind::kUndefinedMetric, "recall is undefined without positive labels");
  const auto d = [](std::size_t v) { return static_cast<double>(v); };
  m.precision = m.tp + m.fp == 0 ? 0.0 : d(m.tp) / d(m.tp + m.fp);
  m.recall = d(m.tp) / d(m.tp + m.fn);
  // One rounding from integers, so equal F1 values compare equal in the sweep.
  m.f1 = m.tp == 0 ? 0.0 : d(2 * m.tp) / d(2 * m.tp + m.fp + m.fn);
  m.accuracy = d(m.tp + m.tn) / d(scores.size());
  return m;
}

std::array<double, kThresholdCount> ThresholdGrid() {
  std::array<double, kThresholdCount> grid{};
  for (std::size_t i = 0; i < kThresholdCount; ++i) grid[i] = static_cast<double>(i + 1) / 100.0;
  return grid;
}

ThresholdReport ThresholdSweep(std::span<const double> scores, std::span<const int> labels) {
  ThresholdReport r;
  r.grid = ThresholdGrid();
  for (std::size_t i = 0; i < kThresholdCount; ++i) {
    r.f1_at[i] = Prf1(scores, labels, r.grid[i]).f1;
    if (i == 0 || r.f1_at[i] > r.best_f1) {
      r.best_f1 = r.f1_at[i];
      r.best_threshold = r.grid[i];
    }
  }
  return r;
}

std::string FormatThresholdReport(const ThresholdReport& report) {
  std::string out = "threshold\tf1\n";
  char line[64];
  for (std::size_t i = 0; i < kThresholdCount; ++i) {
    std::snprintf(line, sizeof line, "%.2f\t%.6f\n", report.grid[i], report.f1_at[i]);
    out += line;
  }
  return out;
}

void WriteThresholdReport(const ThresholdReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) Fail(ErrorKind::kIo, "cannot write threshold report: " + path);
  out << FormatThresholdReport(report);
  if (!out) Fail(ErrorKind::kIo, "failed writing threshold report: " + path);
}

}  // namespace minibert
