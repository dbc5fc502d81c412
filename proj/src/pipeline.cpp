#include "minibert/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "minibert/error.hpp"
#include "minibert/metrics.hpp"
#include "minibert/parallel.hpp"
#include "minibert/training.hpp"

namespace minibert {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double Sigmoid(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

std::size_t CountPositives(const std::vector<int>& labels) {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
}

}  // namespace

void FeatureMatrix::Validate() const {
  if (values.size() != rows * cols) {
    Fail(ErrorKind::kDimension, "feature matrix holds " + std::to_string(values.size()) +
                                    " values, expected " + std::to_string(rows) + " x " +
                                    std::to_string(cols));
  }
  if (labels.size() != rows) {
    Fail(ErrorKind::kDimension, "feature matrix has " + std::to_string(rows) + " rows but " +
                                    std::to_string(labels.size()) + " labels");
  }
}

ClsFeatures ExtractClsFeatures(const LabeledDataset& dataset, const Model<float>& model,
                               const Vocab& vocab, std::size_t max_len, std::size_t batch_size) {
  dataset.Validate();
  const ModelConfig& cfg = model.config();
  if (vocab.size() != cfg.vocab_size) {
    Fail(ErrorKind::kMismatch, "vocabulary has " + std::to_string(vocab.size()) +
                                   " tokens but the checkpoint expects " + std::to_string(cfg.vocab_size));
  }
  if (batch_size == 0) Fail(ErrorKind::kInvalidArgument, "batch size must be > 0");
  max_len = std::min(max_len, cfg.max_len);

  const std::size_t n = dataset.size();
  const std::size_t h = cfg.hidden_dim;
  std::vector<TokenizedPair> inputs;
  inputs.reserve(n);
  for (const auto& s : dataset.sentences) inputs.push_back(EncodePair(vocab, s, std::nullopt, max_len));

  ClsFeatures out;
  out.matrix.rows = n;
  out.matrix.cols = h;
  out.matrix.values.assign(n * h, 0.0f);
  out.matrix.labels = dataset.labels;

  const std::size_t batches = (n + batch_size - 1) / batch_size;
  std::vector<std::size_t> widths(batches, 0);
  ParallelFor(batches, 1, [&](std::size_t b0, std::size_t b1) {
    NoGradGuard no_grad;
    for (std::size_t b = b0; b < b1; ++b) {
      const std::size_t begin = b * batch_size;
      const std::size_t end = std::min(n, begin + batch_size);
      const Batch batch = Batch::FromPairs(std::span<const TokenizedPair>(inputs).subspan(begin, end - begin));
      ForwardContext ctx;
      const Tensor<float> hidden = model.Encode(batch, ctx);
      widths[b] = batch.seq_len;
      const auto data = hidden.data();
      for (std::size_t r = 0; r < end - begin; ++r) {
        std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(r * batch.seq_len * h), h,
                    out.matrix.values.begin() + static_cast<std::ptrdiff_t>((begin + r) * h));
      }
    }
  });
  const std::size_t seq = widths.empty() ? 0 : *std::max_element(widths.begin(), widths.end());
  out.encoder_shape = {n, seq, h};
  return out;
}

FeatureMatrix BagOfIdsFeatures(const LabeledDataset& dataset, const Vocab& vocab) {
  dataset.Validate();
  FeatureMatrix fm;
  fm.rows = dataset.size();
  fm.cols = vocab.size();
  fm.values.assign(fm.rows * fm.cols, 0.0f);
  fm.labels = dataset.labels;
  for (std::size_t i = 0; i < fm.rows; ++i) {
    const TokenizedText t = Tokenize(vocab, dataset.sentences[i]);
    std::size_t counted = 0;
    for (std::int32_t id : t.ids) counted += Vocab::IsSpecial(id) ? 0 : 1;
    if (counted == 0) continue;
    for (std::int32_t id : t.ids) {
      if (!Vocab::IsSpecial(id)) fm.values[i * fm.cols + static_cast<std::size_t>(id)] += 1.0f / static_cast<float>(counted);
    }
  }
  return fm;
}

void SaveFeatures(const FeatureMatrix& features, const std::string& features_path,
                  const std::string& labels_path) {
  features.Validate();
  std::ofstream f(features_path, std::ios::binary);
  if (!f) Fail(ErrorKind::kIo, "cannot write " + features_path);
  f << features.rows << ' ' << features.cols << '\n';
  char buf[32];
  for (std::size_t i = 0; i < features.rows; ++i) {
    for (std::size_t j = 0; j < features.cols; ++j) {
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(features.row(i)[j]));
      if (j) f << ' ';
      f << buf;
    }
    f << '\n';
  }
  if (!f) Fail(ErrorKind::kIo, "failed writing " + features_path);
  std::ofstream l(labels_path, std::ios::binary);
  if (!l) Fail(ErrorKind::kIo, "cannot write " + labels_path);
  for (int y : features.labels) l << y << '\n';
  if (!l) Fail(ErrorKind::kIo, "failed writing " + labels_path);
}

FeatureMatrix LoadFeatures(const std::string& features_path, const std::string& labels_path) {
  std::ifstream f(features_path, std::ios::binary);
  if (!f) Fail(ErrorKind::kIo, "cannot open " + features_path);
  FeatureMatrix fm;
  std::string line;
  if (!std::getline(f, line)) Fail(ErrorKind::kParse, features_path + ": missing header");
  {
    std::istringstream hs(line);
    std::string extra;
    if (!(hs >> fm.rows >> fm.cols) || (hs >> extra)) {
      Fail(ErrorKind::kParse, features_path + ":1: header must be 'rows cols'");
    }
  }
  fm.values.reserve(fm.rows * fm.cols);
  for (std::size_t i = 0; i < fm.rows; ++i) {
    const std::string where = features_path + ":" + std::to_string(i + 2);
    if (!std::getline(f, line)) Fail(ErrorKind::kParse, where + ": missing row");
    std::istringstream rs(line);
    float v;
    std::size_t count = 0;
    while (rs >> v) {
      fm.values.push_back(v);
      ++count;
    }
    if (!rs.eof() || count != fm.cols) {
      Fail(ErrorKind::kParse, where + ": expected " + std::to_string(fm.cols) + " numbers");
    }
  }
  std::ifstream l(labels_path, std::ios::binary);
  if (!l) Fail(ErrorKind::kIo, "cannot open " + labels_path);
  std::size_t line_no = 0;
  while (std::getline(l, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line != "0" && line != "1") {
      Fail(ErrorKind::kParse, labels_path + ":" + std::to_string(line_no) + ": label must be 0 or 1");
    }
    fm.labels.push_back(line[0] - '0');
  }
  fm.Validate();
  return fm;
}

// ---------------------------------------------------------------------------
// Logistic regression

namespace {

std::vector<double> Logits(const LogRegModel& m, const FeatureMatrix& fm) {
  std::vector<double> z(fm.rows, m.bias);
  for (std::size_t i = 0; i < fm.rows; ++i) {
    const float* x = fm.row(i);
    double acc = m.bias;
    for (std::size_t j = 0; j < fm.cols; ++j) acc += m.weights[j] * x[j];
    z[i] = acc;
  }
  return z;
}

}  // namespace

double LogRegObjective(const LogRegModel& model, const FeatureMatrix& features, double l2) {
  features.Validate();
  if (model.weights.size() != features.cols) {
    Fail(ErrorKind::kDimension, "model has " + std::to_string(model.weights.size()) +
                                    " weights for " + std::to_string(features.cols) + " features");
  }
  const auto z = Logits(model, features);
  double reg = 0.0;
  for (double w : model.weights) reg += w * w;
  return MeanBce(z, features.labels) + 0.5 * l2 * reg;
}

double LogRegStabilityBound(const FeatureMatrix& features, double l2) {
  features.Validate();
  if (features.rows == 0) Fail(ErrorKind::kInvalidArgument, "no examples");
  double trace = 0.0;
  for (float v : features.values) trace += double(v) * double(v);
  trace = trace / static_cast<double>(features.rows) + 1.0;  // ones column
  return 2.0 / (trace / 4.0 + l2);
}

LogRegModel TrainLogReg(const FeatureMatrix& features, const LogRegOptions& options) {
  features.Validate();
  const std::size_t pos = CountPositives(features.labels);
  if (pos == 0 || pos == features.rows) {
    Fail(ErrorKind::kInvalidArgument, "logistic regression needs both classes in the training set");
  }
  if (!(options.lr > 0.0)) Fail(ErrorKind::kInvalidArgument, "learning rate must be > 0");
  if (options.l2 < 0.0) Fail(ErrorKind::kInvalidArgument, "l2 must be >= 0");

  const std::size_t n = features.rows;
  const std::size_t d = features.cols;
  LogRegModel m;
  m.weights.assign(d, 0.0);
  const double prior = static_cast<double>(pos) / static_cast<double>(n);
  m.bias = std::log(prior / (1.0 - prior));

  std::vector<double> grad(d);
  for (std::size_t step = 0; step < options.steps; ++step) {
    m.loss_history.push_back(LogRegObjective(m, features, options.l2));
    const auto z = Logits(m, features);
    std::fill(grad.begin(), grad.end(), 0.0);
    double grad_b = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = Sigmoid(z[i]) - features.labels[i];
      grad_b += r;
      const float* x = features.row(i);
      for (std::size_t j = 0; j < d; ++j) grad[j] += r * x[j];
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t j = 0; j < d; ++j) {
      m.weights[j] -= options.lr * (grad[j] * inv_n + options.l2 * m.weights[j]);
    }
    m.bias -= options.lr * grad_b * inv_n;
  }
  m.loss_history.push_back(LogRegObjective(m, features, options.l2));
  return m;
}

std::vector<double> PredictLogReg(const LogRegModel& model, const FeatureMatrix& features) {
  features.Validate();
  if (model.weights.size() != features.cols) {
    Fail(ErrorKind::kMismatch, "logistic model has " + std::to_string(model.weights.size()) +
                                   " weights but features have " + std::to_string(features.cols) +
                                   " columns");
  }
  auto z = Logits(model, features);
  for (double& v : z) v = Sigmoid(v);
  return z;
}

void SaveLogReg(const LogRegModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) Fail(ErrorKind::kIo, "cannot write " + path);
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", model.bias);
  out << "bias " << buf << '\n' << "weights " << model.weights.size() << '\n';
  for (double w : model.weights) {
    std::snprintf(buf, sizeof buf, "%.17g", w);
    out << buf << '\n';
  }
  if (!out) Fail(ErrorKind::kIo, "failed writing " + path);
}

LogRegModel LoadLogReg(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) Fail(ErrorKind::kIo, "cannot open " + path);
  LogRegModel m;
  std::string key;
  std::size_t n = 0;
  if (!(in >> key >> m.bias) || key != "bias") Fail(ErrorKind::kParse, path + ": expected 'bias <value>'");
  if (!(in >> key >> n) || key != "weights") Fail(ErrorKind::kParse, path + ": expected 'weights <count>'");
  m.weights.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(in >> m.weights[i])) Fail(ErrorKind::kParse, path + ": weight " + std::to_string(i) + " missing");
  }
  return m;
}

// ---------------------------------------------------------------------------

PipelineReport EvaluatePipeline(const LabeledDataset& train, const LabeledDataset& test,
                                const Model<float>& model, const Vocab& vocab, std::size_t max_len,
                                const LogRegOptions& options, FeatureKind kind) {
  if (test.size() == 0) Fail(ErrorKind::kInvalidArgument, "test set is empty");
  auto features = [&](const LabeledDataset& ds) {
    return kind == FeatureKind::kCls ? ExtractClsFeatures(ds, model, vocab, max_len).matrix
                                     : BagOfIdsFeatures(ds, vocab);
  };
  const FeatureMatrix train_fm = features(train);
  const FeatureMatrix test_fm = features(test);
  const LogRegModel lr = TrainLogReg(train_fm, options);
  const std::vector<double> scores = PredictLogReg(lr, test_fm);

  PipelineReport rep;
  rep.n_train = train.size();
  rep.n_test = test.size();
  rep.feature_dim = train_fm.cols;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    correct += (scores[i] >= 0.5 ? 1 : 0) == test.labels[i] ? 1 : 0;
  }
  rep.accuracy = static_cast<double>(correct) / static_cast<double>(scores.size());

  const std::size_t test_pos = CountPositives(test.labels);
  rep.majority_baseline =
      static_cast<double>(std::max(test_pos, test.size() - test_pos)) / static_cast<double>(test.size());

  if (test_pos == 0 || test_pos == test.size()) {
    rep.auc = kNaN;
    rep.best_threshold = kNaN;
    rep.best_f1 = kNaN;
  } else {
    rep.auc = Auc(scores, test.labels);
    const ThresholdReport sweep = ThresholdSweep(scores, test.labels);
    rep.best_threshold = sweep.best_threshold;
    rep.best_f1 = sweep.best_f1;
  }
  return rep;
}

std::string FormatPipelineReport(const PipelineReport& r) {
  std::string out;
  char buf[96];
  auto line = [&](const char* key, double v, const char* fmt) {
    if (std::isnan(v)) {
      std::snprintf(buf, sizeof buf, "%s=nan\n", key);
    } else {
      std::string f = std::string("%s=") + fmt + "\n";
      std::snprintf(buf, sizeof buf, f.c_str(), key, v);
    }
    out += buf;
  };
  out += "n_train=" + std::to_string(r.n_train) + "\n";
  out += "n_test=" + std::to_string(r.n_test) + "\n";
  out += "feature_dim=" + std::to_string(r.feature_dim) + "\n";
  line("accuracy", r.accuracy, "%.6f");
  line("majority_baseline", r.majority_baseline, "%.6f");
  line("auc", r.auc, "%.6f");
  line("best_threshold", r.best_threshold, "%.2f");
  line("best_f1", r.best_f1, "%.6f");
  return out;
}

}  // namespace minibert
