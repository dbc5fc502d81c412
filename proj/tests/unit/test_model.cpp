#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "grad_check.hpp"
#include "minibert/error.hpp"
#include "minibert/model.hpp"

using namespace minibert;
using minibert::testing::MaxGradError;
using minibert::testing::RandomTensor;

namespace {

ModelConfig SmallConfig(std::size_t layers = 2, std::size_t hidden = 16, std::size_t heads = 2) {
  ModelConfig c;
  c.vocab_size = 50;
  c.hidden_dim = hidden;
  c.num_layers = layers;
  c.num_heads = heads;
  c.ff_dim = 4 * hidden;
  c.max_len = 16;
  c.dropout = 0.0f;
  return c;
}

// Deterministic ids in [5, vocab); the first `valid[r]` columns of row r are
// unmasked.
Batch MakeBatch(std::size_t b, std::size_t L, std::size_t vocab, std::vector<std::size_t> valid = {},
                std::uint64_t seed = 1) {
  Batch batch;
  batch.batch_size = b;
  batch.seq_len = L;
  Rng rng(seed);
  for (std::size_t r = 0; r < b; ++r) {
    const std::size_t n = valid.empty() ? L : valid[r];
    for (std::size_t i = 0; i < L; ++i) {
      batch.ids.push_back(i < n ? 5 + static_cast<std::int32_t>(rng.Below(vocab - 5)) : kPadId);
      batch.segments.push_back(i >= n / 2 && i < n ? 1 : 0);
      batch.attn_mask.push_back(i < n ? 1 : 0);
    }
  }
  return batch;
}

template <class T>
std::vector<T> Values(const Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

template <class T>
void Fill(Tensor<T>& t, T value) {
  for (auto& v : t.mutable_data()) v = value;
}

template <class T>
void Randomize(Model<T>& m, std::uint64_t seed, double scale) {
  Rng rng(seed);
  for (auto& p : m.Parameters()) {
    for (auto& v : p.tensor.mutable_data()) v = static_cast<T>(scale * (2.0 * rng.Uniform() - 1.0));
  }
}

std::filesystem::path TempPath(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("minibert_test_model_" + name);
}

ErrorKind KindOf(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an exception");
  return ErrorKind::kContract;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = SmallConfig();
  CHECK_NOTHROW(c.Validate());
  c.num_heads = 3;
  CHECK(KindOf([&] { c.Validate(); }) == ErrorKind::kInvalidArgument);
  c = SmallConfig();
  c.max_len = 2;
  CHECK_THROWS_AS(c.Validate(), Error);
  c = SmallConfig();
  c.vocab_size = 0;
  CHECK_THROWS_AS(c.Validate(), Error);
}

TEST_CASE("parameter shapes") {
  const ModelConfig c = SmallConfig();
  Model<float> m(c, 1);
  CHECK(m.Param("embeddings.token").shape() == Shape{50, 16});
  CHECK(m.Param("embeddings.position").shape() == Shape{16, 16});
  CHECK(m.Param("embeddings.segment").shape() == Shape{2, 16});
  CHECK(m.Param("layers.1.attention.query.weight").shape() == Shape{16, 16});
  CHECK(m.Param("layers.0.ffn.in.weight").shape() == Shape{16, 64});
  CHECK(m.Param("heads.mlm.w_vocab").shape() == Shape{16, 50});
  CHECK(m.Param("heads.nsp.weight").shape() == Shape{16, 2});
  CHECK(m.Param("heads.sentiment.weight").shape() == Shape{16, 1});
  CHECK(m.Param("heads.sentiment.bias").shape() == Shape{1});
  CHECK_FALSE(m.HasParam("heads.rtd.weight"));

  ModelConfig tied = c;
  tied.tie_mlm_weights = true;
  CHECK_FALSE(Model<float>(tied, 1).HasParam("heads.mlm.w_vocab"));
}

TEST_CASE("initialization statistics") {
  ModelConfig c = SmallConfig();
  c.vocab_size = 2000;
  Model<double> m(c, 3);
  const auto w = m.Param("embeddings.token").data();
  double mean = 0, sq = 0;
  for (double v : w) mean += v;
  mean /= static_cast<double>(w.size());
  for (double v : w) sq += (v - mean) * (v - mean);
  CHECK(std::abs(mean) < 1e-3);
  CHECK(std::sqrt(sq / static_cast<double>(w.size())) == doctest::Approx(0.02).epsilon(0.02));
  for (double v : m.Param("layers.0.ffn.ln.gain").data()) CHECK(v == 1.0);
  for (double v : m.Param("layers.0.ffn.in.bias").data()) CHECK(v == 0.0);
}

TEST_CASE("float and double models agree from one seed") {
  const ModelConfig c = SmallConfig();
  Model<float> f(c, 9);
  Model<double> d(c, 9);
  const auto pf = f.Parameters();
  const auto pd = d.Parameters();
  REQUIRE(pf.size() == pd.size());
  for (std::size_t i = 0; i < pf.size(); ++i) {
    CHECK(pf[i].name == pd[i].name);
    for (std::size_t j = 0; j < pf[i].tensor.numel(); ++j) {
      REQUIRE(pf[i].tensor.data()[j] == static_cast<float>(pd[i].tensor.data()[j]));
    }
  }
}

TEST_CASE("embed: output shape") {
  const ModelConfig c = SmallConfig();
  Model<float> m(c, 1);
  ForwardContext ctx;
  const auto batch = MakeBatch(2, 9, c.vocab_size);
  CHECK(m.Embed(batch, ctx).shape() == Shape{2, 9, 16});
  CHECK(m.Encode(batch, ctx).shape() == Shape{2, 9, 16});
  CHECK(EncoderOutputShape(c, 2, 9) == Shape{2, 9, 16});
}

TEST_CASE("embed: all-zero tables give zero pre-norm sum") {
  Model<double> m(SmallConfig(), 1);
  Fill(m.Param("embeddings.token"), 0.0);
  Fill(m.Param("embeddings.position"), 0.0);
  Fill(m.Param("embeddings.segment"), 0.0);
  const auto sum = m.EmbeddingSum(MakeBatch(2, 5, 50));
  for (double v : sum.data()) CHECK(v == 0.0);
}

TEST_CASE("embed: segment difference is linear") {
  Model<double> m(SmallConfig(), 2);
  Batch a = MakeBatch(1, 6, 50);
  Batch b = a;
  std::fill(a.segments.begin(), a.segments.end(), 0);
  std::fill(b.segments.begin(), b.segments.end(), 0);
  b.segments[3] = 1;
  const auto ea = m.EmbeddingSum(a);
  const auto eb = m.EmbeddingSum(b);
  const auto seg = m.Param("embeddings.segment").data();
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t k = 0; k < 16; ++k) {
      const double diff = eb.data()[i * 16 + k] - ea.data()[i * 16 + k];
      const double expect = i == 3 ? seg[16 + k] - seg[k] : 0.0;
      CHECK(diff == doctest::Approx(expect).epsilon(1e-12).scale(1e-12));
    }
  }
}

TEST_CASE("embed: out-of-range ids, bad segments and overlong input fail") {
  const ModelConfig c = SmallConfig();
  Model<float> m(c, 1);
  Batch b = MakeBatch(1, 4, 50);
  b.ids[2] = 50;
  CHECK_THROWS_AS(m.EmbeddingSum(b), Error);
  b = MakeBatch(1, 4, 50);
  b.segments[1] = 2;
  CHECK(KindOf([&] { m.EmbeddingSum(b); }) == ErrorKind::kContract);
  CHECK(KindOf([&] { m.EmbeddingSum(MakeBatch(1, 17, 50)); }) == ErrorKind::kDimension);
}

TEST_CASE("embed: layer norm statistics") {
  Model<double> m(SmallConfig(), 4);
  ForwardContext ctx;
  const auto batch = MakeBatch(2, 7, 50);
  const auto e = m.Embed(batch, ctx);
  const auto raw = m.EmbeddingSum(batch);
  auto moments = [](std::span<const double> row) {
    double mean = 0, var = 0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(row.size());
    for (double v : row) var += (v - mean) * (v - mean);
    return std::pair{mean, var / static_cast<double>(row.size())};
  };
  for (std::size_t row = 0; row < 14; ++row) {
    const auto [mean, var] = moments(e.data().subspan(row * 16, 16));
    const double raw_var = moments(raw.data().subspan(row * 16, 16)).second;
    CHECK(std::abs(mean) < 1e-9);
    // eps = 1e-5 inside the square root
    CHECK(var == doctest::Approx(raw_var / (raw_var + 1e-5)).epsilon(1e-9));
  }
}

TEST_CASE("attention: single position, single head") {
  ModelConfig c = SmallConfig(1, 8, 1);
  Model<double> m(c, 5);
  Randomize(m, 6, 0.5);
  const auto batch = MakeBatch(1, 1, 50);
  const auto x = RandomTensor({1, 1, 8}, 7);
  ForwardContext ctx;
  const auto out = m.Attention(x, batch, 0, ctx);
  REQUIRE(out.weights.shape() == Shape{1, 1, 1, 1});
  CHECK(out.weights.data()[0] == 1.0);
  const auto wv = m.Param("layers.0.attention.value.weight").data();
  const auto bv = m.Param("layers.0.attention.value.bias").data();
  const auto wo = m.Param("layers.0.attention.output.weight").data();
  const auto bo = m.Param("layers.0.attention.output.bias").data();
  std::vector<double> v(8, 0.0);
  for (std::size_t j = 0; j < 8; ++j) {
    v[j] = bv[j];
    for (std::size_t k = 0; k < 8; ++k) v[j] += x.data()[k] * wv[k * 8 + j];
  }
  for (std::size_t j = 0; j < 8; ++j) {
    double o = bo[j];
    for (std::size_t k = 0; k < 8; ++k) o += v[k] * wo[k * 8 + j];
    CHECK(out.output.data()[j] == doctest::Approx(o).epsilon(1e-12));
  }
}

TEST_CASE("attention: equal queries and keys give uniform weights over valid positions") {
  Model<double> m(SmallConfig(1, 8, 2), 5);
  Randomize(m, 8, 0.5);
  Fill(m.Param("layers.0.attention.query.weight"), 0.0);
  Fill(m.Param("layers.0.attention.query.bias"), 0.0);
  const auto batch = MakeBatch(2, 6, 50, {6, 4});
  ForwardContext ctx;
  const auto out = m.Attention(RandomTensor({2, 6, 8}, 3), batch, 0, ctx);
  const auto w = out.weights.data();
  for (std::size_t b = 0; b < 2; ++b) {
    const std::size_t valid = b == 0 ? 6 : 4;
    for (std::size_t h = 0; h < 2; ++h) {
      for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t j = 0; j < 6; ++j) {
          const double got = w[((b * 2 + h) * 6 + i) * 6 + j];
          if (j < valid) {
            CHECK(got == doctest::Approx(1.0 / static_cast<double>(valid)).epsilon(1e-12));
          } else {
            CHECK(got == 0.0);
          }
        }
      }
    }
  }
}

TEST_CASE("attention: matches a straight-line reference on 1x4x8 with 2 heads") {
  Model<double> m(SmallConfig(1, 8, 2), 11);
  Randomize(m, 12, 0.6);
  const auto batch = MakeBatch(1, 4, 50);
  const auto x = RandomTensor({1, 4, 8}, 13);
  ForwardContext ctx;
  const auto got = Values(m.Attention(x, batch, 0, ctx).output);

  auto proj = [&](const char* name) {
    const auto w = m.Param(std::string("layers.0.attention.") + name + ".weight").data();
    const auto b = m.Param(std::string("layers.0.attention.") + name + ".bias").data();
    std::vector<std::vector<double>> y(4, std::vector<double>(8));
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = 0; j < 8; ++j) {
        double s = b[j];
        for (std::size_t k = 0; k < 8; ++k) s += x.data()[i * 8 + k] * w[k * 8 + j];
        y[i][j] = s;
      }
    }
    return y;
  };
  const auto q = proj("query");
  const auto k = proj("key");
  const auto v = proj("value");
  std::vector<std::vector<double>> ctxv(4, std::vector<double>(8, 0.0));
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t i = 0; i < 4; ++i) {
      double s[4];
      double mx = -1e300;
      for (std::size_t j = 0; j < 4; ++j) {
        s[j] = 0;
        for (std::size_t d = 0; d < 4; ++d) s[j] += q[i][h * 4 + d] * k[j][h * 4 + d];
        s[j] /= 2.0;  // sqrt(head dim 4)
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (double& e : s) z += (e = std::exp(e - mx));
      for (std::size_t j = 0; j < 4; ++j) {
        for (std::size_t d = 0; d < 4; ++d) ctxv[i][h * 4 + d] += s[j] / z * v[j][h * 4 + d];
      }
    }
  }
  const auto wo = m.Param("layers.0.attention.output.weight").data();
  const auto bo = m.Param("layers.0.attention.output.bias").data();
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 8; ++j) {
      double o = bo[j];
      for (std::size_t kk = 0; kk < 8; ++kk) o += ctxv[i][kk] * wo[kk * 8 + j];
      CHECK(std::abs(got[i * 8 + j] - o) < 1e-5);
    }
  }
}

TEST_CASE("attention: rows sum to one, padded columns get zero weight") {
  Model<float> m(SmallConfig(), 21);
  const auto batch = MakeBatch(3, 7, 50, {7, 3, 5});
  ForwardContext ctx;
  const auto x = m.Embed(batch, ctx);
  const auto w = Values(m.Attention(x, batch, 1, ctx).weights);
  const std::size_t valid[3] = {7, 3, 5};
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t h = 0; h < 2; ++h) {
      for (std::size_t i = 0; i < 7; ++i) {
        double sum = 0;
        for (std::size_t j = 0; j < 7; ++j) {
          const float v = w[((b * 2 + h) * 7 + i) * 7 + j];
          if (j >= valid[b]) CHECK(v == 0.0f);
          sum += v;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("encode: zero layers equals embed") {
  Model<float> m(SmallConfig(0), 1);
  ForwardContext ctx;
  const auto batch = MakeBatch(2, 5, 50);
  const auto a = m.Embed(batch, ctx);
  const auto b = m.Encode(batch, ctx);
  REQUIRE(a.shape() == b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
}

TEST_CASE("encode: padded tokens never influence valid positions") {
  Model<float> m(SmallConfig(), 31);
  ForwardContext ctx;
  Batch a = MakeBatch(2, 8, 50, {8, 5});
  Batch b = a;
  for (std::size_t i = 5; i < 8; ++i) b.ids[8 + i] = 7 + static_cast<std::int32_t>(i);
  const auto ha = Values(m.Encode(a, ctx));
  const auto hb = Values(m.Encode(b, ctx));
  for (std::size_t r = 0; r < 2; ++r) {
    const std::size_t valid = r == 0 ? 8 : 5;
    for (std::size_t i = 0; i < valid; ++i) {
      for (std::size_t k = 0; k < 16; ++k) REQUIRE(ha[(r * 8 + i) * 16 + k] == hb[(r * 8 + i) * 16 + k]);
    }
  }
}

TEST_CASE("encode: batch permutation permutes outputs") {
  Model<double> m(SmallConfig(), 41);
  ForwardContext ctx;
  const Batch a = MakeBatch(3, 6, 50, {6, 4, 5});
  Batch b = a;
  const std::size_t order[3] = {2, 0, 1};
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t i = 0; i < 6; ++i) {
      b.ids[r * 6 + i] = a.ids[order[r] * 6 + i];
      b.segments[r * 6 + i] = a.segments[order[r] * 6 + i];
      b.attn_mask[r * 6 + i] = a.attn_mask[order[r] * 6 + i];
    }
  }
  const auto ha = Values(m.Encode(a, ctx));
  const auto hb = Values(m.Encode(b, ctx));
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t j = 0; j < 6 * 16; ++j) {
      CHECK(hb[r * 96 + j] == doctest::Approx(ha[order[r] * 96 + j]).epsilon(1e-12));
    }
  }
}

TEST_CASE("encode: dropout is identity in eval mode and random in training") {
  ModelConfig c = SmallConfig();
  c.dropout = 0.3f;
  Model<float> m(c, 1);
  ModelConfig c0 = c;
  c0.dropout = 0.0f;
  Model<float> m0(c0, 1);
  const auto batch = MakeBatch(2, 6, 50);
  ForwardContext eval;
  const auto a = Values(m.Encode(batch, eval));
  const auto b = Values(m0.Encode(batch, eval));
  for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a[i] == b[i]);

  ForwardContext t1{true, 5, 0};
  ForwardContext t2{true, 5, 0};
  ForwardContext t3{true, 6, 0};
  const auto x1 = m.Encode(batch, t1);
  const auto x2 = m.Encode(batch, t2);
  const auto x3 = m.Encode(batch, t3);
  bool same12 = true, same13 = true;
  for (std::size_t i = 0; i < x1.numel(); ++i) {
    same12 = same12 && x1.data()[i] == x2.data()[i];
    same13 = same13 && x1.data()[i] == x3.data()[i];
  }
  CHECK(same12);
  CHECK_FALSE(same13);
}

TEST_CASE("encode: full-scale shape contract") {
  ModelConfig full;
  full.vocab_size = 30522;
  full.hidden_dim = 768;
  full.num_layers = 12;
  full.num_heads = 12;
  full.ff_dim = 3072;
  full.max_len = 512;
  CHECK_NOTHROW(full.Validate());
  CHECK(EncoderOutputShape(full, 2000, 59) == Shape{2000, 59, 768});
  CHECK_THROWS_AS(EncoderOutputShape(full, 2000, 513), Error);
}

TEST_CASE("mlm head: zero W_vocab gives uniform probabilities") {
  Model<double> m(SmallConfig(), 1);
  Fill(m.Param("heads.mlm.w_vocab"), 0.0);
  const auto p = Softmax(m.MlmLogits(RandomTensor({2, 3, 16}, 1)), -1);
  REQUIRE(p.shape() == Shape{2, 3, 50});
  for (double v : p.data()) CHECK(v == doctest::Approx(1.0 / 50.0).epsilon(1e-12));
}

TEST_CASE("mlm head: softmax rows sum to one") {
  Model<float> m(SmallConfig(), 2);
  ForwardContext ctx;
  const auto p = Values(Softmax(m.MlmLogits(m.Encode(MakeBatch(2, 6, 50), ctx)), -1));
  for (std::size_t r = 0; r < 12; ++r) {
    double s = 0;
    for (std::size_t v = 0; v < 50; ++v) s += p[r * 50 + v];
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("mlm head: one-hot hidden row selects a W_vocab row") {
  Model<double> m(SmallConfig(), 3);
  std::vector<double> hidden(16, 0.0);
  hidden[5] = 1.0;
  const auto logits = Values(m.MlmLogits(Tensor<double>::FromData({1, 1, 16}, hidden)));
  const auto w = m.Param("heads.mlm.w_vocab").data();
  for (std::size_t v = 0; v < 50; ++v) CHECK(logits[v] == w[5 * 50 + v]);

  ModelConfig tied = SmallConfig();
  tied.tie_mlm_weights = true;
  Model<double> t(tied, 3);
  const auto tl = Values(t.MlmLogits(Tensor<double>::FromData({1, 1, 16}, hidden)));
  const auto emb = t.Param("embeddings.token").data();
  for (std::size_t v = 0; v < 50; ++v) CHECK(tl[v] == emb[v * 16 + 5]);
}

TEST_CASE("nsp head: zero weights, shape, gradient") {
  Model<double> m(SmallConfig(), 4);
  const auto hidden = RandomTensor({3, 5, 16}, 2);
  CHECK(m.NspLogits(hidden).shape() == Shape{3, 2});
  const std::vector<std::int32_t> labels = {1, 0, 1};
  const double err = MaxGradError({hidden, m.Param("heads.nsp.weight")},
                                  [&] { return NspLoss(m.NspLogits(hidden), std::span<const std::int32_t>(labels)); });
  CHECK(err < 1e-6);
  Fill(m.Param("heads.nsp.weight"), 0.0);
  for (double v : Values(m.NspLogits(hidden))) CHECK(v == 0.0);
}

TEST_CASE("sentiment head: zero head scores 0.5, range, gradient") {
  Model<double> m(SmallConfig(), 5);
  const auto hidden = RandomTensor({4, 3, 16}, 3, 50.0);
  for (double v : Values(m.SentimentScore(hidden))) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  const auto small = RandomTensor({4, 3, 16}, 4);
  const std::vector<double> y = {1, 0, 0, 1};
  auto bce = [&] {
    const auto p = m.SentimentScore(small);
    const auto ones = Tensor<double>::Full({4}, 1.0);
    const auto yt = Tensor<double>::FromData({4}, y);
    const auto ll = Add(Mul(yt, Log(p)), Mul(Sub(ones, yt), Log(Sub(ones, p))));
    return Scale(Mean(ll), -1.0);
  };
  CHECK(MaxGradError({m.Param("heads.sentiment.weight"), m.Param("heads.sentiment.bias")}, bce) < 1e-3);
  Fill(m.Param("heads.sentiment.weight"), 0.0);
  for (double v : Values(m.SentimentScore(hidden))) CHECK(v == 0.5);
}

TEST_CASE("masked mlm loss: analytic values") {
  const std::vector<std::int32_t> labels = {kIgnoreIndex, 7, 42};
  const auto uniform = Tensor<double>::Zeros({1, 3, 100});
  CHECK(MaskedMlmLoss(uniform, std::span<const std::int32_t>(labels)).item() ==
        doctest::Approx(std::log(100.0)).epsilon(1e-12));

  std::vector<double> onehot(300, 0.0);
  onehot[100 + 7] = 60.0;
  onehot[200 + 42] = 60.0;
  CHECK(MaskedMlmLoss(Tensor<double>::FromData({1, 3, 100}, onehot), std::span<const std::int32_t>(labels)).item() <
        1e-20);

  const std::vector<std::int32_t> none(3, kIgnoreIndex);
  CHECK(MaskedMlmLoss(uniform, std::span<const std::int32_t>(none)).item() == 0.0);
}

TEST_CASE("masked mlm loss ignores non-selected positions bit-exactly") {
  const auto logits = RandomTensor({2, 4, 30}, 9, 3.0);
  const std::vector<std::int32_t> labels = {kIgnoreIndex, 3, kIgnoreIndex, kIgnoreIndex, 8, kIgnoreIndex, 20, kIgnoreIndex};
  const double base = MaskedMlmLoss(logits, std::span<const std::int32_t>(labels)).item();
  std::vector<double> changed(logits.data().begin(), logits.data().end());
  for (std::size_t pos : {0, 2, 3, 5, 7}) {
    for (std::size_t v = 0; v < 30; ++v) changed[pos * 30 + v] += 1e3 * static_cast<double>(v + pos);
  }
  CHECK(MaskedMlmLoss(Tensor<double>::FromData({2, 4, 30}, changed), std::span<const std::int32_t>(labels)).item() ==
        base);
}

TEST_CASE("copies are deep") {
  Model<float> a(SmallConfig(), 1);
  Model<float> b = a;
  b.Param("embeddings.token").mutable_data()[0] += 1.0f;
  CHECK(a.Param("embeddings.token").data()[0] != b.Param("embeddings.token").data()[0]);
}

TEST_CASE("checkpoint: byte round trip") {
  ModelConfig c = SmallConfig();
  c.rtd_head = true;
  c.dropout = 0.1f;
  Model<float> m(c, 17);
  const auto bytes = SerializeCheckpoint(m);
  REQUIRE(bytes.size() > 8);
  CHECK(std::string(bytes.begin(), bytes.begin() + 8) == "MINIBERT");
  CHECK(bytes[8] == 1);
  CHECK(bytes[12] == 50);  // vocab_size
  const Model<float> back = DeserializeCheckpoint(bytes);
  CHECK(back.config() == c);
  CHECK(SerializeCheckpoint(back) == bytes);
  const auto pa = m.Parameters();
  const auto pb = back.Parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pb[i].tensor.data().begin()));
  }
}

TEST_CASE("checkpoint: file round trip and errors") {
  const ModelConfig c = SmallConfig();
  Model<float> m(c, 18);
  const auto path = TempPath("ckpt.bin").string();
  SaveCheckpoint(m, path);
  CHECK(SerializeCheckpoint(LoadCheckpoint(path)) == SerializeCheckpoint(m));
  CHECK_NOTHROW(LoadCheckpoint(path, c));

  ModelConfig other = c;
  other.hidden_dim = 32;
  try {
    LoadCheckpoint(path, other);
    FAIL("mismatch not detected");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kMismatch);
    const std::string msg = e.what();
    CHECK(msg.find(c.ToString()) != std::string::npos);
    CHECK(msg.find(other.ToString()) != std::string::npos);
  }

  CHECK(KindOf([] { LoadCheckpoint(TempPath("missing.bin").string()); }) == ErrorKind::kIo);

  auto bytes = SerializeCheckpoint(m);
  bytes[0] = 'X';
  CHECK(KindOf([&] { DeserializeCheckpoint(bytes); }) == ErrorKind::kParse);
  bytes = SerializeCheckpoint(m);
  bytes.resize(bytes.size() - 3);
  CHECK(KindOf([&] { DeserializeCheckpoint(bytes); }) == ErrorKind::kParse);
  bytes = SerializeCheckpoint(m);
  bytes.push_back(0);
  CHECK(KindOf([&] { DeserializeCheckpoint(bytes); }) == ErrorKind::kParse);
  std::filesystem::remove(path);
}

TEST_CASE("batch from pairs trims shared padding") {
  TokenizedPair p1{{kClsId, 7, 8, kSepId, kPadId, kPadId}, {0, 0, 0, 0, 0, 0}, {1, 1, 1, 1, 0, 0}, {}};
  TokenizedPair p2{{kClsId, 9, kSepId, kPadId, kPadId, kPadId}, {0, 0, 0, 0, 0, 0}, {1, 1, 1, 0, 0, 0}, {}};
  const std::vector<TokenizedPair> pairs = {p1, p2};
  const Batch trimmed = Batch::FromPairs(pairs);
  CHECK(trimmed.seq_len == 4);
  CHECK(trimmed.ids == std::vector<std::int32_t>{kClsId, 7, 8, kSepId, kClsId, 9, kSepId, kPadId});
  CHECK(Batch::FromPairs(pairs, false).seq_len == 6);
  CHECK_THROWS_AS(Batch::FromPairs(std::span<const TokenizedPair>{}), Error);
}
