#include <doctest.h>

#include <cmath>
#include <map>

#include "minibert/corruption.hpp"
#include "minibert/error.hpp"
#include "minibert/random.hpp"

using namespace minibert;

namespace {

Vocab MakeVocab(std::size_t n_regular) {
  std::vector<std::string> t = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  for (std::size_t i = 0; i < n_regular; ++i) t.push_back("w" + std::to_string(i));
  return Vocab::FromTokens(t);
}

// [CLS] x1..xn [SEP] [PAD]*pad, one word per token unless `group` > 1, in
// which case consecutive tokens form words of that many pieces.
TokenizedPair MakePair(std::size_t n, std::uint64_t seed, std::size_t vocab_size, std::size_t pad = 0,
                       std::size_t group = 1) {
  Rng rng(seed);
  TokenizedPair p;
  p.ids.push_back(kClsId);
  for (std::size_t i = 0; i < n; ++i) {
    p.ids.push_back(kNumSpecialTokens + static_cast<std::int32_t>(rng.Below(vocab_size - kNumSpecialTokens)));
  }
  p.ids.push_back(kSepId);
  p.segments.assign(p.ids.size(), 0);
  p.attn_mask.assign(p.ids.size(), 1);
  for (std::size_t i = 0; i < pad; ++i) {
    p.ids.push_back(kPadId);
    p.segments.push_back(0);
    p.attn_mask.push_back(0);
  }
  for (std::size_t b = 1; b <= n; b += group) p.word_boundaries.push_back({b, std::min(n + 1, b + group)});
  return p;
}

// Two-sided 99% normal interval half-width for a binomial proportion.
double HalfWidth99(double p, double n) { return 2.5758293035489 * std::sqrt(p * (1 - p) / n); }

void CheckPlanInvariants(const TokenizedPair& pair, const CorruptionPlan& plan) {
  REQUIRE(plan.labels.size() == pair.size());
  for (std::size_t i = 0; i < pair.size(); ++i) {
    const bool selected = plan.action[i] == Action::kMasked || plan.action[i] == Action::kRandom ||
                          plan.action[i] == Action::kUnchangedSelected;
    CHECK((plan.labels[i] != kIgnoreIndex) == selected);
    if (!IsEligible(pair, i)) {
      CHECK(plan.action[i] == Action::kKeep);
      CHECK(plan.input_ids[i] == pair.ids[i]);
    }
    if (plan.action[i] == Action::kMasked) CHECK(plan.input_ids[i] == kMaskId);
    if (plan.action[i] == Action::kRandom) CHECK(!Vocab::IsSpecial(plan.input_ids[i]));
    if (plan.action[i] == Action::kUnchangedSelected) CHECK(plan.input_ids[i] == pair.ids[i]);
    if (selected) CHECK(plan.labels[i] == pair.ids[i]);
  }
}

}  // namespace

TEST_CASE("mlm: vanishing rate keeps everything") {
  const Vocab v = MakeVocab(20);
  const auto pair = MakePair(10, 1, v.size());
  const auto plan = MlmCorrupt(pair, v, 1e-9, 3);
  CHECK(plan.NumSelected() == 0);
  for (auto a : plan.action) CHECK(a == Action::kKeep);
  CHECK(plan.input_ids == pair.ids);
}

TEST_CASE("mlm: deterministic per seed, invariants hold") {
  const Vocab v = MakeVocab(30);
  const auto pair = MakePair(40, 2, v.size(), 8);
  const auto a = MlmCorrupt(pair, v, 0.3, 99);
  const auto b = MlmCorrupt(pair, v, 0.3, 99);
  CHECK(a.input_ids == b.input_ids);
  CHECK(a.labels == b.labels);
  CHECK(a.action == b.action);
  CHECK(a.rng_seed == 99);
  CheckPlanInvariants(pair, a);
}

TEST_CASE("mlm: input errors") {
  const Vocab specials_only = MakeVocab(0);
  const auto pair = MakePair(5, 1, 10);
  CHECK_THROWS_AS(MlmCorrupt(pair, specials_only, 0.15, 1), Error);
  const Vocab v = MakeVocab(5);
  CHECK_THROWS_AS(MlmCorrupt(pair, v, 0.0, 1), Error);
  CHECK_THROWS_AS(MlmCorrupt(pair, v, 1.0, 1), Error);
}

TEST_CASE("mlm: selection and action frequencies over 100k positions") {
  const Vocab v = MakeVocab(100);
  std::size_t eligible = 0, selected = 0;
  std::map<Action, std::size_t> counts;
  for (std::uint64_t s = 0; eligible < 100000; ++s) {
    const auto pair = MakePair(50, s, v.size(), 4);
    const auto plan = MlmCorrupt(pair, v, 0.15, DeriveSeed(7, {s}));
    CheckPlanInvariants(pair, plan);
    eligible += 50;
    selected += plan.NumSelected();
    for (auto a : plan.action) ++counts[a];
  }
  const double frac = double(selected) / double(eligible);
  CHECK(frac >= 0.146);
  CHECK(frac <= 0.154);
  const double masked = double(counts[Action::kMasked]) / double(selected);
  CHECK(masked >= 0.79);
  CHECK(masked <= 0.81);
}

TEST_CASE("wwm: single-token words reproduce mlm exactly") {
  const Vocab v = MakeVocab(50);
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto pair = MakePair(30, s, v.size(), 3);
    const auto a = MlmCorrupt(pair, v, 0.2, s + 1000);
    const auto b = WwmCorrupt(pair, v, 0.2, s + 1000);
    CHECK(a.input_ids == b.input_ids);
    CHECK(a.labels == b.labels);
    CHECK(a.action == b.action);
  }
}

TEST_CASE("wwm: a selected 3-piece word is corrupted as a unit") {
  const Vocab v = MakeVocab(50);
  std::size_t selected_words = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto pair = MakePair(30, s, v.size(), 0, 3);
    const auto plan = WwmCorrupt(pair, v, 0.3, s);
    CheckPlanInvariants(pair, plan);
    for (const auto& w : pair.word_boundaries) {
      const Action first = plan.action[w.begin];
      for (std::size_t i = w.begin; i < w.end; ++i) CHECK(plan.action[i] == first);
      if (first != Action::kKeep) ++selected_words;
    }
  }
  CHECK(selected_words > 0);
}

TEST_CASE("wwm: selected-word fraction over 50k words") {
  const Vocab v = MakeVocab(80);
  std::size_t words = 0, chosen = 0;
  for (std::uint64_t s = 0; words < 50000; ++s) {
    const auto pair = MakePair(60, s, v.size(), 0, 2);
    const auto plan = WwmCorrupt(pair, v, 0.15, DeriveSeed(11, {s}));
    for (const auto& w : pair.word_boundaries) {
      ++words;
      chosen += plan.action[w.begin] != Action::kKeep ? 1 : 0;
    }
  }
  const double frac = double(chosen) / double(words);
  CHECK(std::abs(frac - 0.15) <= HalfWidth99(0.15, double(words)));
}

TEST_CASE("span: max_span 1 gives single-token spans") {
  const Vocab v = MakeVocab(20);
  Rng rng(5);
  for (int i = 0; i < 1000; ++i) CHECK(SampleSpanLength(rng, 0.2, 1) == 1);
  const auto pair = MakePair(40, 3, v.size(), 5);
  const auto plan = SpanCorrupt(pair, v, 0.15, 0.2, 1, 17);
  // 0.15 * 40 = 6 positions, one per span.
  CHECK(plan.NumSelected() == 6);
  CHECK_FALSE(plan.saturated);
  CheckPlanInvariants(pair, plan);
}

TEST_CASE("span: length mean matches the truncated geometric") {
  const double p = 0.2;
  const int max_span = 10;
  double mass = 0, mean = 0;
  for (int k = 1; k <= max_span; ++k) {
    const double pk = std::pow(1 - p, k - 1) * p;
    mass += pk;
    mean += k * pk;
  }
  mean /= mass;  // 3.797...
  Rng rng(2024);
  double total = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const int len = SampleSpanLength(rng, p, max_span);
    REQUIRE(len >= 1);
    REQUIRE(len <= max_span);
    total += len;
  }
  CHECK(std::abs(total / n - mean) / mean < 0.02);
}

TEST_CASE("span: contiguous masks, budget, determinism, saturation") {
  const Vocab v = MakeVocab(40);
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto pair = MakePair(60, s, v.size(), 6);
    const auto plan = SpanCorrupt(pair, v, 0.2, 0.2, 10, s);
    CheckPlanInvariants(pair, plan);
    for (auto a : plan.action) CHECK((a == Action::kKeep || a == Action::kMasked));
    CHECK(double(plan.NumSelected()) >= 0.2 * 60);
    const auto again = SpanCorrupt(pair, v, 0.2, 0.2, 10, s);
    CHECK(again.action == plan.action);
  }
  // A near-total budget on 3 tokens either fills them or gives up flagged.
  const auto tiny = MakePair(3, 1, v.size());
  const auto plan = SpanCorrupt(tiny, v, 0.99, 0.01, 10, 4);
  CheckPlanInvariants(tiny, plan);
  CHECK((plan.NumSelected() == 3 || plan.saturated));
}

TEST_CASE("dae: identity at rate 0") {
  const auto pair = MakePair(12, 3, 30, 4);
  const auto ex = DaeCorrupt(pair, 0.0, false, 1);
  CHECK(ex.corrupted_ids == pair.ids);
  CHECK(ex.corrupted_segments == pair.segments);
  CHECK(ex.attn_mask == pair.attn_mask);
  CHECK(ex.original_ids == pair.ids);
}

TEST_CASE("dae: deletion rate over 100k tokens") {
  std::size_t tokens = 0, deleted = 0;
  for (std::uint64_t s = 0; tokens < 100000; ++s) {
    const auto pair = MakePair(100, s, 60);
    const auto ex = DaeCorrupt(pair, 0.1, false, DeriveSeed(3, {s}));
    tokens += 100;
    const auto d = static_cast<std::size_t>(std::count(ex.action.begin(), ex.action.end(), Action::kDeleted));
    deleted += d;
    // Re-padded to the original length; the kept tokens stay in order.
    CHECK(ex.corrupted_ids.size() == pair.size());
    CHECK(static_cast<std::size_t>(std::count(ex.attn_mask.begin(), ex.attn_mask.end(), 1)) == pair.size() - d);
  }
  const double frac = double(deleted) / double(tokens);
  CHECK(std::abs(frac - 0.1) <= HalfWidth99(0.1, double(tokens)));
}

TEST_CASE("dae: sentence shuffle preserves the multiset") {
  const Vocab v = MakeVocab(30);
  const auto pair = EncodePair(v, "w1 w2 w3", "w4 w5", 12);
  const auto ex = DaeCorrupt(pair, 0.0, true, 5);
  std::vector<std::int32_t> before, after;
  for (std::size_t i = 0; i < pair.size(); ++i) {
    if (!Vocab::IsSpecial(pair.ids[i])) before.push_back(pair.ids[i]);
    if (!Vocab::IsSpecial(ex.corrupted_ids[i])) after.push_back(ex.corrupted_ids[i]);
  }
  std::sort(before.begin(), before.end());
  std::sort(after.begin(), after.end());
  CHECK(before == after);
  // Block swap: the former B sentence now comes first.
  CHECK(ex.corrupted_ids[1] == v.IdOf("w4"));
  CHECK(ex.corrupted_ids[0] == kClsId);
  CHECK(std::count(ex.corrupted_ids.begin(), ex.corrupted_ids.end(), kSepId) == 2);
}

TEST_CASE("rtd: labels follow the generator") {
  const Vocab v = MakeVocab(50);
  const auto pair = MakePair(40, 8, v.size(), 4);
  const auto plan = MlmCorrupt(pair, v, 0.4, 21);
  std::vector<std::int32_t> correct, wrong;
  for (std::size_t i = 0; i < pair.size(); ++i) {
    if (plan.action[i] != Action::kMasked) continue;
    correct.push_back(pair.ids[i]);
    wrong.push_back(pair.ids[i] == 5 ? 6 : 5);
  }
  REQUIRE(!correct.empty());
  const auto ok = RtdLabel(pair, plan, correct);
  for (auto t : ok.rtd_labels) CHECK(t == RtdTag::kOriginal);
  CHECK(ok.input_ids == pair.ids);
  const auto bad = RtdLabel(pair, plan, wrong);
  for (std::size_t i = 0; i < pair.size(); ++i) {
    CHECK((bad.rtd_labels[i] == RtdTag::kReplaced) == (plan.action[i] == Action::kMasked));
  }
  correct.pop_back();
  CHECK_THROWS_AS(RtdLabel(pair, plan, correct), Error);
}

TEST_CASE("rtd: uniform generator replaces at rate 1 - 1/V") {
  const std::size_t V = 20;  // regular ids the generator draws from
  const Vocab v = MakeVocab(V);
  Rng gen(77);
  std::size_t masked = 0, replaced = 0;
  for (std::uint64_t s = 0; masked < 50000; ++s) {
    const auto pair = MakePair(50, s, v.size());
    const auto plan = MlmCorrupt(pair, v, 0.5, s);
    std::vector<std::int32_t> out;
    for (auto a : plan.action) {
      if (a == Action::kMasked) out.push_back(kNumSpecialTokens + static_cast<std::int32_t>(gen.Below(V)));
    }
    const auto ex = RtdLabel(pair, plan, out);
    masked += out.size();
    replaced += static_cast<std::size_t>(std::count(ex.rtd_labels.begin(), ex.rtd_labels.end(), RtdTag::kReplaced));
  }
  const double expected = 1.0 - 1.0 / double(V);
  CHECK(std::abs(double(replaced) / double(masked) - expected) <= HalfWidth99(expected, double(masked)));
}
