#include "minibert/corruption.hpp"

#include <algorithm>
#include <string>

#include "minibert/error.hpp"
#include "minibert/random.hpp"

namespace minibert {
namespace {

constexpr double kMaskShare = 0.8;
constexpr double kRandomShare = 0.1;

void CheckRate(double rate, const char* what) {
  if (!(rate > 0.0 && rate < 1.0)) {
    Fail(ErrorKind::kInvalidArgument, std::string(what) + " must be in (0, 1), got " + std::to_string(rate));
  }
}

void CheckRandomPossible(const Vocab& vocab) {
  if (vocab.size() <= static_cast<std::size_t>(kNumSpecialTokens)) {
    Fail(ErrorKind::kInvalidArgument, "vocabulary has no non-special tokens to sample from");
  }
}

CorruptionPlan BlankPlan(const TokenizedPair& pair, std::uint64_t seed) {
  CorruptionPlan plan;
  plan.input_ids = pair.ids;
  plan.labels.assign(pair.ids.size(), kIgnoreIndex);
  plan.action.assign(pair.ids.size(), Action::kKeep);
  plan.rng_seed = seed;
  return plan;
}

Action DrawAction(Rng& rng) {
  const double v = rng.Uniform();
  if (v < kMaskShare) return Action::kMasked;
  if (v < kMaskShare + kRandomShare) return Action::kRandom;
  return Action::kUnchangedSelected;
}

std::int32_t RandomTokenId(Rng& rng, const Vocab& vocab) {
  const auto span = vocab.size() - static_cast<std::size_t>(kNumSpecialTokens);
  return kNumSpecialTokens + static_cast<std::int32_t>(rng.Below(span));
}

void Apply(CorruptionPlan& plan, std::size_t i, Action action, Rng& rng, const Vocab& vocab) {
  plan.action[i] = action;
  plan.labels[i] = plan.input_ids[i];
  if (action == Action::kMasked) {
    plan.input_ids[i] = kMaskId;
  } else if (action == Action::kRandom) {
    plan.input_ids[i] = RandomTokenId(rng, vocab);
  }
}

}  // namespace

std::size_t CorruptionPlan::NumSelected() const {
  return static_cast<std::size_t>(
      std::count_if(labels.begin(), labels.end(), [](std::int32_t l) { return l != kIgnoreIndex; }));
}

bool IsEligible(const TokenizedPair& pair, std::size_t position) {
  return pair.attn_mask[position] != 0 && !Vocab::IsSpecial(pair.ids[position]);
}

CorruptionPlan MlmCorrupt(const TokenizedPair& pair, const Vocab& vocab, double select_rate,
                          std::uint64_t seed) {
  CheckRate(select_rate, "select_rate");
  CheckRandomPossible(vocab);
  CorruptionPlan plan = BlankPlan(pair, seed);
  Rng rng(seed);
  for (std::size_t i = 0; i < pair.size(); ++i) {
    if (!IsEligible(pair, i)) continue;
    if (!rng.Bernoulli(select_rate)) continue;
    Apply(plan, i, DrawAction(rng), rng, vocab);
  }
  return plan;
}

CorruptionPlan WwmCorrupt(const TokenizedPair& pair, const Vocab& vocab, double select_rate,
                          std::uint64_t seed) {
  CheckRate(select_rate, "select_rate");
  CheckRandomPossible(vocab);
  CorruptionPlan plan = BlankPlan(pair, seed);
  Rng rng(seed);
  for (const WordSpan& word : pair.word_boundaries) {
    // A truncated or [UNK] word still forms a group; skip groups holding
    // nothing eligible so the draw sequence matches MlmCorrupt.
    bool any = false;
    for (std::size_t i = word.begin; i < word.end; ++i) any = any || IsEligible(pair, i);
    if (!any) continue;
    if (!rng.Bernoulli(select_rate)) continue;
    const Action action = DrawAction(rng);
    for (std::size_t i = word.begin; i < word.end; ++i) {
      if (IsEligible(pair, i)) Apply(plan, i, action, rng, vocab);
    }
  }
  return plan;
}

int SampleSpanLength(Rng& rng, double geo_p, int max_span) {
  CheckRate(geo_p, "geo_p");
  if (max_span < 1) Fail(ErrorKind::kInvalidArgument, "max_span must be >= 1");
  for (;;) {
    int len = 1;
    while (len <= max_span && !rng.Bernoulli(geo_p)) ++len;
    if (len <= max_span) return len;
  }
}

CorruptionPlan SpanCorrupt(const TokenizedPair& pair, const Vocab& /*vocab*/, double mask_budget,
                           double geo_p, int max_span, std::uint64_t seed) {
  CheckRate(mask_budget, "mask_budget");
  CheckRate(geo_p, "geo_p");
  if (max_span < 1) Fail(ErrorKind::kInvalidArgument, "max_span must be >= 1");
  CorruptionPlan plan = BlankPlan(pair, seed);
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < pair.size(); ++i) {
    if (IsEligible(pair, i)) eligible.push_back(i);
  }
  if (eligible.empty()) return plan;

  const double target = mask_budget * static_cast<double>(eligible.size());
  const std::size_t max_rejections = 64 * eligible.size() + 64;
  Rng rng(seed);
  std::size_t masked = 0;
  std::size_t rejections = 0;
  while (static_cast<double>(masked) < target) {
    const auto len = static_cast<std::size_t>(SampleSpanLength(rng, geo_p, max_span));
    const std::size_t start = eligible[rng.Below(eligible.size())];
    bool fits = start + len <= pair.size();
    for (std::size_t i = start; fits && i < start + len; ++i) {
      fits = IsEligible(pair, i) && plan.action[i] == Action::kKeep;
    }
    if (!fits) {
      if (++rejections > max_rejections) {
        plan.saturated = true;
        break;
      }
      continue;
    }
    rejections = 0;
    for (std::size_t i = start; i < start + len; ++i) {
      plan.action[i] = Action::kMasked;
      plan.labels[i] = plan.input_ids[i];
      plan.input_ids[i] = kMaskId;
    }
    masked += len;
  }
  return plan;
}

DaeExample DaeCorrupt(const TokenizedPair& pair, double delete_rate, bool shuffle_sentences,
                      std::uint64_t seed) {
  if (!(delete_rate >= 0.0 && delete_rate < 1.0)) {
    Fail(ErrorKind::kInvalidArgument, "delete_rate must be in [0, 1)");
  }
  DaeExample ex;
  ex.original_ids = pair.ids;
  ex.action.assign(pair.size(), Action::kKeep);
  Rng rng(seed);

  std::vector<std::int32_t> first;
  std::vector<std::int32_t> second;
  bool has_second = false;
  for (std::size_t i = 0; i < pair.size(); ++i) {
    if (!pair.attn_mask[i]) continue;
    if (pair.segments[i] == 1) has_second = true;
    if (pair.ids[i] == kClsId || pair.ids[i] == kSepId) continue;
    // [UNK] and other reserved ids travel with their sentence but are never deleted.
    if (IsEligible(pair, i) && delete_rate > 0.0 && rng.Bernoulli(delete_rate)) {
      ex.action[i] = Action::kDeleted;
      continue;
    }
    (pair.segments[i] == 0 ? first : second).push_back(pair.ids[i]);
  }
  if (shuffle_sentences && has_second) std::swap(first, second);

  auto emit = [&](std::int32_t id, std::int32_t seg) {
    ex.corrupted_ids.push_back(id);
    ex.corrupted_segments.push_back(seg);
    ex.attn_mask.push_back(1);
  };
  emit(kClsId, 0);
  for (auto id : first) emit(id, 0);
  emit(kSepId, 0);
  if (has_second) {
    for (auto id : second) emit(id, 1);
    emit(kSepId, 1);
  }
  ex.corrupted_ids.resize(pair.size(), kPadId);
  ex.corrupted_segments.resize(pair.size(), 0);
  ex.attn_mask.resize(pair.size(), 0);
  return ex;
}

RtdExample RtdLabel(const TokenizedPair& original, const CorruptionPlan& plan,
                    std::span<const std::int32_t> generator_output) {
  if (plan.action.size() != original.size()) {
    Fail(ErrorKind::kContract, "rtd: plan length does not match the sequence");
  }
  const auto masked = static_cast<std::size_t>(
      std::count(plan.action.begin(), plan.action.end(), Action::kMasked));
  if (generator_output.size() != masked) {
    Fail(ErrorKind::kContract, "rtd: plan has " + std::to_string(masked) + " masked positions but " +
                                   std::to_string(generator_output.size()) +
                                   " generator predictions were supplied");
  }
  RtdExample ex;
  ex.input_ids = original.ids;
  ex.rtd_labels.assign(original.size(), RtdTag::kOriginal);
  ex.attn_mask = original.attn_mask;
  std::size_t next = 0;
  for (std::size_t i = 0; i < original.size(); ++i) {
    if (plan.action[i] != Action::kMasked) continue;
    const std::int32_t predicted = generator_output[next++];
    ex.input_ids[i] = predicted;
    if (predicted != original.ids[i]) ex.rtd_labels[i] = RtdTag::kReplaced;
  }
  return ex;
}

}  // namespace minibert
