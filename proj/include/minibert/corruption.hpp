#pragma once

// Pretraining corruptions. Every function is a pure function of its inputs
// and seed. [CLS], [SEP], [PAD] (and every other reserved id) are never
// touched; only "eligible" positions (valid, non-special) are candidates.

#include <cstdint>
#include <span>
#include <vector>

#include "minibert/tensor.hpp"
#include "minibert/tokenizer.hpp"

namespace minibert {

class Rng;

enum class Action : std::uint8_t {
  kKeep,
  kMasked,             // replaced by [MASK]
  kRandom,             // replaced by a random non-special id
  kUnchangedSelected,  // selected for prediction but left as is
  kDeleted,            // removed (denoising corruption only)
};

// kIgnoreIndex (-1) marks positions that do not contribute to the loss.
struct CorruptionPlan {
  std::vector<std::int32_t> input_ids;
  std::vector<std::int32_t> labels;
  std::vector<Action> action;
  std::uint64_t rng_seed = 0;
  bool saturated = false;  // span masking could not reach its budget

  std::size_t NumSelected() const;
};

bool IsEligible(const TokenizedPair& pair, std::size_t position);

// Token-level BERT masking: each eligible position is selected with
// probability select_rate; a selected position becomes [MASK] / random /
// unchanged with probability 0.8 / 0.1 / 0.1.
CorruptionPlan MlmCorrupt(const TokenizedPair& pair, const Vocab& vocab,
                          double select_rate, std::uint64_t seed);

// Same law, drawn once per word: every piece of a selected word shares the
// action class and keeps its own label. For all-single-piece input the
// result is identical to MlmCorrupt with the same seed.
CorruptionPlan WwmCorrupt(const TokenizedPair& pair, const Vocab& vocab,
                          double select_rate, std::uint64_t seed);

// Length ~ Geometric(geo_p) on {1, 2, ...} conditioned on length <= max_span.
int SampleSpanLength(Rng& rng, double geo_p, int max_span);

// Masks whole contiguous spans (all [MASK]) at uniform eligible starts until
// at least mask_budget * eligible positions are covered. A span that would
// overlap an existing span or a non-eligible position is redrawn; after too
// many consecutive rejections the plan is returned with saturated = true.
CorruptionPlan SpanCorrupt(const TokenizedPair& pair, const Vocab& vocab,
                           double mask_budget, double geo_p, int max_span,
                           std::uint64_t seed);

struct DaeExample {
  std::vector<std::int32_t> corrupted_ids;  // re-padded to the input length
  std::vector<std::int32_t> corrupted_segments;
  std::vector<std::uint8_t> attn_mask;
  std::vector<std::int32_t> original_ids;
  std::vector<Action> action;  // per original position: kKeep or kDeleted
};

// Denoising corruption: independent token deletion, optionally followed by
// swapping the two sentences of a pair as whole blocks.
DaeExample DaeCorrupt(const TokenizedPair& pair, double delete_rate,
                      bool shuffle_sentences, std::uint64_t seed);

enum class RtdTag : std::uint8_t { kOriginal = 0, kReplaced = 1 };

struct RtdExample {
  std::vector<std::int32_t> input_ids;
  std::vector<RtdTag> rtd_labels;
  std::vector<std::uint8_t> attn_mask;
};

// Replaced-token detection targets: the original sequence with each kMasked
// position of `plan` filled by the next generator prediction (in position
// order). Tagged kReplaced exactly where the prediction differs.
RtdExample RtdLabel(const TokenizedPair& original, const CorruptionPlan& plan,
                    std::span<const std::int32_t> generator_output);

}  // namespace minibert
