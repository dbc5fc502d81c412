#include "minibert/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "minibert/error.hpp"
#include "minibert/log.hpp"

namespace minibert {
namespace {

constexpr double kInitStd = 0.02;
constexpr double kLayerNormEps = 1e-5;

enum InitKind { kInitNormal, kInitZeros, kInitOnes };

std::string LayerName(std::size_t layer, const char* suffix) {
  return "layers." + std::to_string(layer) + "." + suffix;
}

}  // namespace

void ModelConfig::Validate() const {
  auto fail = [this](const std::string& why) {
    Fail(ErrorKind::kInvalidArgument, "invalid model config (" + why + "): " + ToString());
  };
  if (vocab_size <= static_cast<std::size_t>(kNumSpecialTokens)) fail("vocab_size must exceed the 5 special tokens");
  if (hidden_dim == 0 || num_heads == 0 || ff_dim == 0) fail("dimensions must be positive");
  if (hidden_dim % num_heads != 0) fail("hidden_dim must be divisible by num_heads");
  if (max_len < 3) fail("max_len must be at least 3");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
}

std::string ModelConfig::ToString() const {
  std::ostringstream os;
  os << "vocab_size=" << vocab_size << " hidden_dim=" << hidden_dim << " num_layers=" << num_layers
     << " num_heads=" << num_heads << " ff_dim=" << ff_dim << " max_len=" << max_len
     << " dropout=" << dropout << " tie_mlm_weights=" << tie_mlm_weights
     << " rtd_head=" << rtd_head;
  return os.str();
}

Shape EncoderOutputShape(const ModelConfig& config, std::size_t batch, std::size_t seq_len) {
  config.Validate();
  if (seq_len > config.max_len) {
    Fail(ErrorKind::kDimension, "sequence length " + std::to_string(seq_len) + " exceeds max_len " +
                                    std::to_string(config.max_len));
  }
  return {batch, seq_len, config.hidden_dim};
}

Batch Batch::FromPairs(std::span<const TokenizedPair> pairs, bool trim_padding) {
  if (pairs.empty()) Fail(ErrorKind::kInvalidArgument, "empty batch");
  Batch b;
  b.batch_size = pairs.size();
  std::size_t width = 0;
  std::size_t used = 0;
  for (const auto& p : pairs) {
    width = std::max(width, p.size());
    for (std::size_t i = p.size(); i-- > 0;) {
      if (p.attn_mask[i]) {
        used = std::max(used, i + 1);
        break;
      }
    }
  }
  b.seq_len = trim_padding ? std::max<std::size_t>(used, 1) : width;
  b.ids.assign(b.batch_size * b.seq_len, kPadId);
  b.segments.assign(b.batch_size * b.seq_len, 0);
  b.attn_mask.assign(b.batch_size * b.seq_len, 0);
  for (std::size_t r = 0; r < pairs.size(); ++r) {
    const std::size_t n = std::min(pairs[r].size(), b.seq_len);
    std::copy_n(pairs[r].ids.begin(), n, b.ids.begin() + static_cast<std::ptrdiff_t>(r * b.seq_len));
    std::copy_n(pairs[r].segments.begin(), n, b.segments.begin() + static_cast<std::ptrdiff_t>(r * b.seq_len));
    std::copy_n(pairs[r].attn_mask.begin(), n, b.attn_mask.begin() + static_cast<std::ptrdiff_t>(r * b.seq_len));
  }
  return b;
}

// ---------------------------------------------------------------------------

template <class T>
void Model<T>::AddParam(std::string name, Shape shape, unsigned group, int init, std::uint64_t seed) {
  std::vector<T> values(NumElements(shape));
  if (init == kInitNormal) {
    Rng rng(DeriveSeed(seed, {params_.size()}));
    for (auto& v : values) v = static_cast<T>(kInitStd * rng.Normal());
  } else {
    std::fill(values.begin(), values.end(), init == kInitOnes ? T(1) : T(0));
  }
  index_.emplace(name, params_.size());
  params_.push_back({std::move(name), Tensor<T>::FromData(std::move(shape), std::move(values), true)});
  groups_.push_back(group);
}

template <class T>
Model<T>::Model(ModelConfig config, std::uint64_t seed) : config_(config) {
  config_.Validate();
  const std::size_t V = config_.vocab_size;
  const std::size_t h = config_.hidden_dim;
  const std::size_t ff = config_.ff_dim;
  AddParam("embeddings.token", {V, h}, kEncoderParams, kInitNormal, seed);
  AddParam("embeddings.position", {config_.max_len, h}, kEncoderParams, kInitNormal, seed);
  AddParam("embeddings.segment", {2, h}, kEncoderParams, kInitNormal, seed);
  AddParam("embeddings.ln.gain", {h}, kEncoderParams, kInitOnes, seed);
  AddParam("embeddings.ln.bias", {h}, kEncoderParams, kInitZeros, seed);
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    for (const char* proj : {"query", "key", "value", "output"}) {
      const std::string base = LayerName(l, "attention.") + proj;
      AddParam(base + ".weight", {h, h}, kEncoderParams, kInitNormal, seed);
      AddParam(base + ".bias", {h}, kEncoderParams, kInitZeros, seed);
    }
    AddParam(LayerName(l, "attention.ln.gain"), {h}, kEncoderParams, kInitOnes, seed);
    AddParam(LayerName(l, "attention.ln.bias"), {h}, kEncoderParams, kInitZeros, seed);
    AddParam(LayerName(l, "ffn.in.weight"), {h, ff}, kEncoderParams, kInitNormal, seed);
    AddParam(LayerName(l, "ffn.in.bias"), {ff}, kEncoderParams, kInitZeros, seed);
    AddParam(LayerName(l, "ffn.out.weight"), {ff, h}, kEncoderParams, kInitNormal, seed);
    AddParam(LayerName(l, "ffn.out.bias"), {h}, kEncoderParams, kInitZeros, seed);
    AddParam(LayerName(l, "ffn.ln.gain"), {h}, kEncoderParams, kInitOnes, seed);
    AddParam(LayerName(l, "ffn.ln.bias"), {h}, kEncoderParams, kInitZeros, seed);
  }
  if (!config_.tie_mlm_weights) AddParam("heads.mlm.w_vocab", {h, V}, kMlmHeadParams, kInitNormal, seed);
  AddParam("heads.nsp.weight", {h, 2}, kNspHeadParams, kInitNormal, seed);
  AddParam("heads.sentiment.weight", {h, 1}, kSentimentHeadParams, kInitNormal, seed);
  AddParam("heads.sentiment.bias", {1}, kSentimentHeadParams, kInitZeros, seed);
  if (config_.rtd_head) {
    AddParam("heads.rtd.weight", {h, 1}, kRtdHeadParams, kInitNormal, seed);
    AddParam("heads.rtd.bias", {1}, kRtdHeadParams, kInitZeros, seed);
  }
}

template <class T>
Model<T>::Model(const Model& other)
    : config_(other.config_), groups_(other.groups_), index_(other.index_) {
  for (const auto& p : other.params_) params_.push_back({p.name, p.tensor.Detach()});
  for (auto& p : params_) p.tensor.set_requires_grad(true);
}

template <class T>
Model<T>& Model<T>::operator=(const Model& other) {
  if (this != &other) *this = Model(other);
  return *this;
}

template <class T>
std::vector<NamedTensor<T>> Model<T>::Parameters(unsigned groups) const {
  std::vector<NamedTensor<T>> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (groups_[i] & groups) out.push_back(params_[i]);
  }
  return out;
}

template <class T>
bool Model<T>::HasParam(std::string_view name) const {
  return index_.count(std::string(name)) != 0;
}

template <class T>
Tensor<T>& Model<T>::Param(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) Fail(ErrorKind::kContract, "no parameter named '" + std::string(name) + "'");
  return params_[it->second].tensor;
}

template <class T>
const Tensor<T>& Model<T>::Param(std::string_view name) const {
  return const_cast<Model*>(this)->Param(name);
}

template <class T>
Tensor<T> Model<T>::EmbeddingSum(const Batch& batch) const {
  const std::size_t L = batch.seq_len;
  if (L > config_.max_len) {
    Fail(ErrorKind::kDimension, "sequence length " + std::to_string(L) + " exceeds max_len " +
                                    std::to_string(config_.max_len));
  }
  for (std::int32_t s : batch.segments) {
    if (s != 0 && s != 1) Fail(ErrorKind::kContract, "segment id " + std::to_string(s) + " not in {0, 1}");
  }
  const Shape ids_shape{batch.batch_size, L};
  std::vector<std::int32_t> positions(L);
  for (std::size_t i = 0; i < L; ++i) positions[i] = static_cast<std::int32_t>(i);
  auto tok = Embedding(Param("embeddings.token"), batch.ids, ids_shape);
  auto pos = Embedding(Param("embeddings.position"), positions, Shape{L});
  auto seg = Embedding(Param("embeddings.segment"), batch.segments, ids_shape);
  return Add(Add(tok, pos), seg);
}

template <class T>
Tensor<T> Model<T>::Embed(const Batch& batch, ForwardContext& ctx) const {
  auto x = LayerNorm(EmbeddingSum(batch), Param("embeddings.ln.gain"), Param("embeddings.ln.bias"),
                     kLayerNormEps);
  return Dropout(x, config_.dropout, ctx.training, ctx.NextSeed());
}

template <class T>
Tensor<T> Model<T>::AttentionMask(const Batch& batch) const {
  std::vector<T> mask(batch.attn_mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = batch.attn_mask[i] ? T(0) : -std::numeric_limits<T>::infinity();
  }
  return Tensor<T>::FromData({batch.batch_size, 1, 1, batch.seq_len}, std::move(mask));
}

template <class T>
AttentionOutput<T> Model<T>::Attention(const Tensor<T>& x, const Batch& batch, std::size_t layer,
                                       ForwardContext& /*ctx*/) const {
  const std::size_t b = x.dim(0);
  const std::size_t L = x.dim(1);
  const std::size_t heads = config_.num_heads;
  const std::size_t d = config_.hidden_dim / heads;
  auto project = [&](const char* which) {
    const std::string base = LayerName(layer, "attention.") + which;
    auto y = Add(Matmul(x, Param(base + ".weight")), Param(base + ".bias"));
    return Permute(Reshape(y, {b, L, heads, d}), {0, 2, 1, 3});  // [b, H, L, d]
  };
  auto q = project("query");
  auto k = project("key");
  auto v = project("value");
  // Stage 1: query-key similarity; stage 2: normalization; stage 3: weighted
  // sum of the values.
  auto scores = Scale(BatchMatmul(q, k, /*transpose_b=*/true), static_cast<T>(1.0 / std::sqrt(double(d))));
  auto weights = Softmax(Add(scores, AttentionMask(batch)), -1);
  auto context = BatchMatmul(weights, v);  // [b, H, L, d]
  auto merged = Reshape(Permute(context, {0, 2, 1, 3}), {b, L, config_.hidden_dim});
  const std::string out = LayerName(layer, "attention.output");
  return {Add(Matmul(merged, Param(out + ".weight")), Param(out + ".bias")), weights};
}

template <class T>
Tensor<T> Model<T>::Encode(const Batch& batch, ForwardContext& ctx) const {
  auto x = Embed(batch, ctx);
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    auto attended = Attention(x, batch, l, ctx).output;
    x = LayerNorm(Add(x, Dropout(attended, config_.dropout, ctx.training, ctx.NextSeed())),
                  Param(LayerName(l, "attention.ln.gain")), Param(LayerName(l, "attention.ln.bias")),
                  kLayerNormEps);
    auto inner = Gelu(Add(Matmul(x, Param(LayerName(l, "ffn.in.weight"))), Param(LayerName(l, "ffn.in.bias"))));
    auto ffn = Add(Matmul(inner, Param(LayerName(l, "ffn.out.weight"))), Param(LayerName(l, "ffn.out.bias")));
    x = LayerNorm(Add(x, Dropout(ffn, config_.dropout, ctx.training, ctx.NextSeed())),
                  Param(LayerName(l, "ffn.ln.gain")), Param(LayerName(l, "ffn.ln.bias")), kLayerNormEps);
  }
  return x;
}

template <class T>
Tensor<T> Model<T>::MlmLogits(const Tensor<T>& hidden) const {
  if (config_.tie_mlm_weights) return Matmul(hidden, Transpose2d(Param("embeddings.token")));
  return Matmul(hidden, Param("heads.mlm.w_vocab"));
}

template <class T>
Tensor<T> Model<T>::ClsVectors(const Tensor<T>& hidden) const {
  if (hidden.rank() != 3) Fail(ErrorKind::kDimension, "expected [b, L, h] hidden states, got " + ShapeToString(hidden.shape()));
  return Select(hidden, 1, 0);
}

template <class T>
Tensor<T> Model<T>::NspLogits(const Tensor<T>& hidden) const {
  return Matmul(ClsVectors(hidden), Param("heads.nsp.weight"));
}

template <class T>
Tensor<T> Model<T>::SentimentLogits(const Tensor<T>& hidden) const {
  auto z = Add(Matmul(ClsVectors(hidden), Param("heads.sentiment.weight")), Param("heads.sentiment.bias"));
  return Reshape(z, {hidden.dim(0)});
}

template <class T>
Tensor<T> Model<T>::SentimentScore(const Tensor<T>& hidden) const {
  return Sigmoid(SentimentLogits(hidden));
}

template <class T>
Tensor<T> Model<T>::RtdLogits(const Tensor<T>& hidden) const {
  if (!config_.rtd_head) Fail(ErrorKind::kContract, "model was built without a replaced-token-detection head");
  auto z = Add(Matmul(hidden, Param("heads.rtd.weight")), Param("heads.rtd.bias"));
  return Reshape(z, {hidden.dim(0), hidden.dim(1)});
}

template <class T>
template <class U>
Model<U> Model<T>::Cast() const {
  Model<U> out;
  out.config_ = config_;
  out.groups_ = groups_;
  out.index_ = index_;
  for (const auto& p : params_) {
    std::vector<U> values(p.tensor.data().begin(), p.tensor.data().end());
    out.params_.push_back({p.name, Tensor<U>::FromData(p.tensor.shape(), std::move(values), true)});
  }
  return out;
}

template class Model<float>;
template class Model<double>;
template Model<double> Model<float>::Cast<double>() const;
template Model<float> Model<double>::Cast<float>() const;
template Model<float> Model<float>::Cast<float>() const;
template Model<double> Model<double>::Cast<double>() const;

// ---------------------------------------------------------------------------
// Losses

template <class T>
Tensor<T> MaskedMlmLoss(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  const bool any = std::any_of(labels.begin(), labels.end(),
                               [](std::int32_t l) { return l != kIgnoreIndex; });
  if (!any) Log(LogLevel::kWarning, "masked LM loss: no selected positions in batch; loss is 0");
  return CrossEntropy(logits, labels);
}

std::vector<std::int32_t> PlanLabels(std::span<const CorruptionPlan> plans, std::size_t seq_len) {
  std::vector<std::int32_t> labels(plans.size() * seq_len, kIgnoreIndex);
  for (std::size_t r = 0; r < plans.size(); ++r) {
    const std::size_t n = std::min(seq_len, plans[r].labels.size());
    for (std::size_t i = n; i < plans[r].labels.size(); ++i) {
      if (plans[r].labels[i] != kIgnoreIndex) {
        Fail(ErrorKind::kContract, "plan selects a position beyond the batch width");
      }
    }
    std::copy_n(plans[r].labels.begin(), n, labels.begin() + static_cast<std::ptrdiff_t>(r * seq_len));
  }
  return labels;
}

template <class T>
Tensor<T> NspLoss(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  for (std::int32_t l : labels) {
    if (l != 0 && l != 1) Fail(ErrorKind::kContract, "NSP labels must be 0 or 1");
  }
  return CrossEntropy(logits, labels);
}

template Tensor<float> MaskedMlmLoss(const Tensor<float>&, std::span<const std::int32_t>);
template Tensor<double> MaskedMlmLoss(const Tensor<double>&, std::span<const std::int32_t>);
template Tensor<float> NspLoss(const Tensor<float>&, std::span<const std::int32_t>);
template Tensor<double> NspLoss(const Tensor<double>&, std::span<const std::int32_t>);

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

class ByteWriter {
 public:
  void U8(std::uint8_t v) { bytes_.push_back(v); }
  void U32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void F32(float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof bits);
    U32(bits);
  }
  void Raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  std::vector<std::uint8_t> Take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  void Need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) Fail(ErrorKind::kParse, "checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::uint8_t U8() {
    Need(1);
    return bytes_[pos_++];
  }
  std::uint32_t U32() {
    Need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  float F32() {
    const std::uint32_t bits = U32();
    float f;
    std::memcpy(&f, &bits, sizeof f);
    return f;
  }
  std::string Str(std::size_t n) {
    Need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool AtEnd() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> SerializeCheckpoint(const Model<float>& model) {
  const auto& c = model.config();
  ByteWriter w;
  w.Raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.U32(kCheckpointVersion);
  for (std::size_t v : {c.vocab_size, c.hidden_dim, c.num_layers, c.num_heads, c.ff_dim, c.max_len}) {
    w.U32(static_cast<std::uint32_t>(v));
  }
  w.F32(c.dropout);
  w.U8(c.tie_mlm_weights ? 1 : 0);
  w.U8(c.rtd_head ? 1 : 0);
  const auto params = model.Parameters();
  w.U32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.U32(static_cast<std::uint32_t>(p.name.size()));
    w.Raw(p.name.data(), p.name.size());
    w.U32(static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t d : p.tensor.shape()) w.U32(static_cast<std::uint32_t>(d));
    for (float v : p.tensor.data()) w.F32(v);
  }
  return w.Take();
}

Model<float> DeserializeCheckpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.Str(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic)) {
    Fail(ErrorKind::kParse, "not a minibert checkpoint (bad magic)");
  }
  const std::uint32_t version = r.U32();
  if (version != kCheckpointVersion) {
    Fail(ErrorKind::kParse, "unsupported checkpoint version " + std::to_string(version));
  }
  ModelConfig c;
  c.vocab_size = r.U32();
  c.hidden_dim = r.U32();
  c.num_layers = r.U32();
  c.num_heads = r.U32();
  c.ff_dim = r.U32();
  c.max_len = r.U32();
  c.dropout = r.F32();
  c.tie_mlm_weights = r.U8() != 0;
  c.rtd_head = r.U8() != 0;
  Model<float> model(c, 0);
  const std::uint32_t count = r.U32();
  const std::size_t expected = model.Parameters().size();
  if (count != expected) {
    Fail(ErrorKind::kMismatch, "checkpoint holds " + std::to_string(count) + " parameters, config implies " +
                                   std::to_string(expected));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.Str(r.U32());
    if (!model.HasParam(name)) Fail(ErrorKind::kMismatch, "unexpected checkpoint parameter '" + name + "'");
    Tensor<float>& t = model.Param(name);
    Shape shape(r.U32());
    for (auto& d : shape) d = r.U32();
    if (shape != t.shape()) {
      Fail(ErrorKind::kMismatch, "parameter '" + name + "' has shape " + ShapeToString(shape) +
                                     " in checkpoint, config implies " + ShapeToString(t.shape()));
    }
    auto data = t.mutable_data();
    for (auto& v : data) v = r.F32();
  }
  if (!r.AtEnd()) Fail(ErrorKind::kParse, "trailing bytes after checkpoint");
  return model;
}

void SaveCheckpoint(const Model<float>& model, const std::string& path) {
  const auto bytes = SerializeCheckpoint(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) Fail(ErrorKind::kIo, "cannot write checkpoint: " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) Fail(ErrorKind::kIo, "failed writing checkpoint: " + path);
}

Model<float> LoadCheckpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) Fail(ErrorKind::kIo, "cannot open checkpoint: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return DeserializeCheckpoint(bytes);
}

Model<float> LoadCheckpoint(const std::string& path, const ModelConfig& expected) {
  Model<float> model = LoadCheckpoint(path);
  if (!(model.config() == expected)) {
    Fail(ErrorKind::kMismatch, "checkpoint config {" + model.config().ToString() +
                                   "} does not match requested config {" + expected.ToString() + "}");
  }
  return model;
}

}  // namespace minibert
