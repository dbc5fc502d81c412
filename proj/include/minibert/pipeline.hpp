#pragma once

// Frozen-encoder feature extraction followed by logistic regression.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "minibert/dataset.hpp"
#include "minibert/model.hpp"
#include "minibert/tensor.hpp"
#include "minibert/tokenizer.hpp"

namespace minibert {

struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> values;  // row-major [rows, cols]
  std::vector<int> labels;

  const float* row(std::size_t i) const { return values.data() + i * cols; }
  void Validate() const;
};

struct ClsFeatures {
  FeatureMatrix matrix;
  // Encoder output shape before [CLS] selection: [n, seq_len, hidden_dim].
  Shape encoder_shape;
};

// Row i is the position-0 hidden vector of sentence i (eval mode, no graph
// recorded, parameters untouched). Batches run in parallel and write to
// fixed rows.
ClsFeatures ExtractClsFeatures(const LabeledDataset& dataset, const Model<float>& model,
                               const Vocab& vocab, std::size_t max_len, std::size_t batch_size = 32);

// Normalized token-id counts over the vocabulary (special ids excluded).
FeatureMatrix BagOfIdsFeatures(const LabeledDataset& dataset, const Vocab& vocab);

// Feature file: "rows cols" header, then one space-separated row per line.
// Label file: one 0/1 per line.
void SaveFeatures(const FeatureMatrix& features, const std::string& features_path,
                  const std::string& labels_path);
FeatureMatrix LoadFeatures(const std::string& features_path, const std::string& labels_path);

struct LogRegOptions {
  double lr = 0.1;
  std::size_t steps = 500;
  double l2 = 1e-4;
};

struct LogRegModel {
  std::vector<double> weights;
  double bias = 0.0;
  std::vector<double> loss_history;  // objective before each step, then after the last
};

// Full-batch gradient descent on mean binary cross-entropy plus
// (l2 / 2) * |w|^2. Weights start at zero and the bias at the log-odds of
// the class prior, so zero steps predicts the majority class. Throws
// kInvalidArgument unless both classes are present.
LogRegModel TrainLogReg(const FeatureMatrix& features, const LogRegOptions& options);
double LogRegObjective(const LogRegModel& model, const FeatureMatrix& features, double l2);
// Step sizes below this bound make every gradient step non-increasing:
// 2 / (trace(X^T X) / (4 n) + l2), X augmented by a ones column. The trace
// over-estimates the top eigenvalue, so the bound is conservative.
double LogRegStabilityBound(const FeatureMatrix& features, double l2);
std::vector<double> PredictLogReg(const LogRegModel& model, const FeatureMatrix& features);

// "bias <value>" line then "weights <n>" and one weight per line, %.17g.
void SaveLogReg(const LogRegModel& model, const std::string& path);
LogRegModel LoadLogReg(const std::string& path);

enum class FeatureKind { kCls, kBagOfIds };

struct PipelineReport {
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  std::size_t feature_dim = 0;
  double accuracy = 0.0;  // at threshold 0.5
  double auc = 0.0;       // nan when the test set has one class
  double best_threshold = 0.0;
  double best_f1 = 0.0;
  double majority_baseline = 0.0;  // share of the most frequent class in test
};

PipelineReport EvaluatePipeline(const LabeledDataset& train, const LabeledDataset& test,
                                const Model<float>& model, const Vocab& vocab, std::size_t max_len,
                                const LogRegOptions& options, FeatureKind kind = FeatureKind::kCls);
std::string FormatPipelineReport(const PipelineReport& report);

}  // namespace minibert
