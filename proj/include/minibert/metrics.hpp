#pragma once

// Binary classification metrics. Labels are 0/1; a score is predicted
// positive when score >= threshold.

#include <array>
#include <cstddef>
#include <span>
#include <string>

namespace minibert {

inline constexpr std::size_t kThresholdCount = 99;

// Probability that a random positive outranks a random negative, ties
// counted 1/2. Rank-sum form with midranks, O(n log n). Throws
// kUndefinedMetric unless both classes are present.
double Auc(std::span<const double> scores, std::span<const int> labels);

struct ConfusionMetrics {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision = 0.0;  // 0 when nothing is predicted positive
  double recall = 0.0;
  double f1 = 0.0;         // 0 when precision + recall == 0
  double accuracy = 0.0;
};

// Throws kInvalidArgument on empty input, kUndefinedMetric when no label
// is positive (recall undefined).
ConfusionMetrics Prf1(std::span<const double> scores, std::span<const int> labels,
                      double threshold);

struct ThresholdReport {
  std::array<double, kThresholdCount> grid{};
  std::array<double, kThresholdCount> f1_at{};
  double best_threshold = 0.0;  // smallest grid value attaining best_f1
  double best_f1 = 0.0;
};

// {0.01, 0.02, ..., 0.99}, each computed as i / 100.0.
std::array<double, kThresholdCount> ThresholdGrid();

ThresholdReport ThresholdSweep(std::span<const double> scores, std::span<const int> labels);

// "threshold\tf1" header, then one "%.2f\t%.6f" row per grid point.
std::string FormatThresholdReport(const ThresholdReport& report);
void WriteThresholdReport(const ThresholdReport& report, const std::string& path);

}  // namespace minibert
