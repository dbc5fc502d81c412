#include "minibert/dataset.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "minibert/error.hpp"
#include "minibert/random.hpp"

namespace minibert {

void LabeledDataset::Validate() const {
  if (sentences.size() != labels.size()) {
    Fail(ErrorKind::kInvalidArgument, "dataset has " + std::to_string(sentences.size()) +
                                          " sentences but " + std::to_string(labels.size()) +
                                          " labels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) {
      Fail(ErrorKind::kInvalidArgument,
           "label of example " + std::to_string(i) + " is " + std::to_string(labels[i]));
    }
  }
}

LabeledDataset LoadTsv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) Fail(ErrorKind::kIo, "cannot open " + path);
  LabeledDataset ds;
  ds.source_path = path;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const auto tab = line.rfind('\t');
    const std::string where = path + ":" + std::to_string(line_no);
    if (tab == std::string::npos) Fail(ErrorKind::kParse, where + ": missing tab before label");
    std::string label = line.substr(tab + 1);
    while (!label.empty() && label.back() == ' ') label.pop_back();
    if (ds.sentences.empty() && label == "label") continue;
    if (label != "0" && label != "1") {
      Fail(ErrorKind::kParse, where + ": label must be 0 or 1, got '" + label + "'");
    }
    ds.sentences.push_back(line.substr(0, tab));
    ds.labels.push_back(label[0] - '0');
  }
  return ds;
}

void SaveTsv(const LabeledDataset& dataset, const std::string& path) {
  dataset.Validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) Fail(ErrorKind::kIo, "cannot write " + path);
  out << "sentence\tlabel\n";
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    out << dataset.sentences[i] << '\t' << dataset.labels[i] << '\n';
  }
  if (!out) Fail(ErrorKind::kIo, "failed writing " + path);
}

std::pair<LabeledDataset, LabeledDataset> Split(const LabeledDataset& dataset,
                                                double train_fraction, std::uint64_t seed) {
  dataset.Validate();
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    Fail(ErrorKind::kInvalidArgument, "train fraction must be in (0, 1)");
  }
  const std::size_t n = dataset.size();
  if (n < 2) Fail(ErrorKind::kInvalidArgument, "cannot split fewer than 2 examples");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.Shuffle(order.begin(), order.end());
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));

  std::pair<LabeledDataset, LabeledDataset> out;
  out.first.source_path = dataset.source_path;
  out.second.source_path = dataset.source_path;
  for (std::size_t k = 0; k < n; ++k) {
    auto& half = k < n_train ? out.first : out.second;
    half.sentences.push_back(dataset.sentences[order[k]]);
    half.labels.push_back(dataset.labels[order[k]]);
  }
  return out;
}

}  // namespace minibert
