#pragma once

// Miniature bidirectional Transformer encoder with MLM, NSP, sentiment and
// (optional) replaced-token-detection heads.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "minibert/corruption.hpp"
#include "minibert/random.hpp"
#include "minibert/tensor.hpp"
#include "minibert/tokenizer.hpp"

namespace minibert {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t hidden_dim = 64;
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t ff_dim = 256;
  std::size_t max_len = 64;
  float dropout = 0.1f;
  bool tie_mlm_weights = false;  // W_vocab := token_embedding^T
  bool rtd_head = false;         // per-position discriminator head

  void Validate() const;
  std::string ToString() const;
  bool operator==(const ModelConfig&) const = default;
};

// Shape of the encoder output for a batch: [batch, seq_len, hidden_dim].
Shape EncoderOutputShape(const ModelConfig& config, std::size_t batch, std::size_t seq_len);

// Row-major [batch, seq_len] inputs.
struct Batch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::int32_t> segments;
  std::vector<std::uint8_t> attn_mask;

  // Pairs are right-padded to a common length. With trim_padding, columns
  // that are padding in every row are dropped (valid outputs are unchanged).
  static Batch FromPairs(std::span<const TokenizedPair> pairs, bool trim_padding = true);
};

// Per-forward settings; dropout masks come from a counter-based seed stream.
struct ForwardContext {
  bool training = false;
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;

  std::uint64_t NextSeed() { return DeriveSeed(seed, {counter++}); }
};

enum ParamGroup : unsigned {
  kEncoderParams = 1u << 0,
  kMlmHeadParams = 1u << 1,
  kNspHeadParams = 1u << 2,
  kSentimentHeadParams = 1u << 3,
  kRtdHeadParams = 1u << 4,
  kAllParams = 0x1Fu,
};

template <class T>
struct AttentionOutput {
  Tensor<T> output;   // [b, L, h]
  Tensor<T> weights;  // [b, heads, L, L]
};

template <class T>
class Model {
 public:
  // Weights ~ N(0, 0.02), biases 0, layer-norm gain 1 / bias 0. Each
  // parameter draws from its own seed stream, so float and double models
  // built from the same seed agree up to rounding.
  Model(ModelConfig config, std::uint64_t seed);

  // Copies are deep: training a copy never touches the original.
  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelConfig& config() const { return config_; }

  // Canonical (checkpoint) order, filtered by group bits.
  std::vector<NamedTensor<T>> Parameters(unsigned groups = kAllParams) const;
  Tensor<T>& Param(std::string_view name);
  const Tensor<T>& Param(std::string_view name) const;
  bool HasParam(std::string_view name) const;

  // token_emb[ids] + position_emb[0..L) + segment_emb[segments]
  Tensor<T> EmbeddingSum(const Batch& batch) const;
  // EmbeddingSum followed by layer norm and dropout.
  Tensor<T> Embed(const Batch& batch, ForwardContext& ctx) const;
  AttentionOutput<T> Attention(const Tensor<T>& x, const Batch& batch, std::size_t layer,
                               ForwardContext& ctx) const;
  // Post-LN encoder stack; returns X_hidden [b, L, h].
  Tensor<T> Encode(const Batch& batch, ForwardContext& ctx) const;

  Tensor<T> MlmLogits(const Tensor<T>& hidden) const;        // [b, L, V]
  Tensor<T> NspLogits(const Tensor<T>& hidden) const;        // [b, 2]
  Tensor<T> SentimentLogits(const Tensor<T>& hidden) const;  // [b]
  Tensor<T> SentimentScore(const Tensor<T>& hidden) const;   // [b], in (0, 1)
  Tensor<T> RtdLogits(const Tensor<T>& hidden) const;        // [b, L]

  template <class U>
  Model<U> Cast() const;

 private:
  template <class>
  friend class Model;
  Model() = default;
  void AddParam(std::string name, Shape shape, unsigned group, int init, std::uint64_t seed);
  Tensor<T> AttentionMask(const Batch& batch) const;
  Tensor<T> ClsVectors(const Tensor<T>& hidden) const;

  ModelConfig config_;
  std::vector<NamedTensor<T>> params_;
  std::vector<unsigned> groups_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Mean cross-entropy over positions whose label is not kIgnoreIndex, with
// labels laid out [b, L] row-major. With nothing selected the loss is 0 (a
// warning is logged) and no gradient reaches the logits.
template <class T>
Tensor<T> MaskedMlmLoss(const Tensor<T>& logits, std::span<const std::int32_t> labels);

// Convenience: concatenates per-example plan labels.
std::vector<std::int32_t> PlanLabels(std::span<const CorruptionPlan> plans, std::size_t seq_len);

// labels in {0, 1}; 1 = B really follows A.
template <class T>
Tensor<T> NspLoss(const Tensor<T>& logits, std::span<const std::int32_t> labels);

// ---- checkpoints ----
// Layout (all integers little-endian uint32, floats IEEE-754 binary32 LE):
//   "MINIBERT" magic (8 bytes), format version (=1),
//   vocab_size, hidden_dim, num_layers, num_heads, ff_dim, max_len,
//   dropout (f32), tie_mlm_weights (u8), rtd_head (u8),
//   parameter count, then per parameter:
//     name length, name bytes, rank, dims..., numel f32 values.
inline constexpr char kCheckpointMagic[8] = {'M', 'I', 'N', 'I', 'B', 'E', 'R', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> SerializeCheckpoint(const Model<float>& model);
Model<float> DeserializeCheckpoint(std::span<const std::uint8_t> bytes);
void SaveCheckpoint(const Model<float>& model, const std::string& path);
Model<float> LoadCheckpoint(const std::string& path);
// Fails with kMismatch naming both configs when they differ.
Model<float> LoadCheckpoint(const std::string& path, const ModelConfig& expected);

}  // namespace minibert
