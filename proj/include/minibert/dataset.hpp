#pragma once

// Labeled sentence sets in "sentence<TAB>label" form.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace minibert {

struct LabeledDataset {
  std::vector<std::string> sentences;
  std::vector<int> labels;  // 0 or 1
  std::string source_path;

  std::size_t size() const { return sentences.size(); }
  // Throws kInvalidArgument on unequal lengths or a label outside {0, 1}.
  void Validate() const;
};

// Blank lines are skipped. A first line whose label field reads "label" is
// taken as a header. Errors carry the 1-based line number.
LabeledDataset LoadTsv(const std::string& path);
void SaveTsv(const LabeledDataset& dataset, const std::string& path);

// Seeded Fisher-Yates shuffle, then the first round(fraction * n) examples
// form the training half.
std::pair<LabeledDataset, LabeledDataset> Split(const LabeledDataset& dataset,
                                                double train_fraction, std::uint64_t seed);

}  // namespace minibert
