#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a node of the autodiff graph. Operations
// that consume a tensor requiring gradients record their inputs and a
// backward closure on the result; Backward() on a scalar walks that graph
// once in reverse topological order and then releases every interior node,
// so a graph lives exactly as long as one forward/backward pass.
//
// Everything is templated on the scalar type: float for training, double for
// finite-difference verification.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace minibert {

using Shape = std::vector<std::size_t>;

std::size_t NumElements(const Shape& shape);
std::string ShapeToString(const Shape& shape);

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is first accumulated
  bool requires_grad = false;
  bool released = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void EnsureGrad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

}  // namespace detail

// While alive, newly created op results do not record graph edges.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool GradEnabled();

template <class T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  static Tensor Zeros(Shape shape, bool requires_grad = false);
  static Tensor Full(Shape shape, T value, bool requires_grad = false);
  static Tensor FromData(Shape shape, std::vector<T> data,
                         bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  // Negative axes count from the end.
  std::size_t dim(int axis) const;
  std::size_t numel() const { return node_->data.size(); }

  // Views die with the node, so taking one from a temporary is rejected.
  std::span<const T> data() const& { return node_->data; }
  std::span<const T> data() const&& = delete;
  // Only leaves may be written (parameters, inputs).
  std::span<T> mutable_data();
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const& { return node_->grad; }
  std::span<const T> grad() const&& = delete;
  std::span<T> mutable_grad();
  void ZeroGrad();

  // Accumulates d(this)/d(leaf) into every requires_grad leaf, then frees
  // the interior of the graph. Requires a single-element tensor.
  void Backward() const;

  // A new leaf holding a copy of the values.
  Tensor Detach() const;

  const void* identity() const { return node_.get(); }

  static Tensor FromNode(std::shared_ptr<detail::Node<T>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }
  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

// ---- elementwise (numpy-style right-aligned broadcasting) ----
template <class T> Tensor<T> Add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> Sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> Mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> Scale(const Tensor<T>& x, T factor);
template <class T> Tensor<T> Gelu(const Tensor<T>& x);  // exact erf form
template <class T> Tensor<T> Sigmoid(const Tensor<T>& x);
template <class T> Tensor<T> Log(const Tensor<T>& x);

// Identity when !training or p == 0. Otherwise zeroes each element with
// probability p (mask drawn from `seed`) and scales survivors by 1/(1-p).
template <class T>
Tensor<T> Dropout(const Tensor<T>& x, double p, bool training,
                  std::uint64_t seed);

// Normalizes over the last axis, then applies gain and bias of that width.
template <class T>
Tensor<T> LayerNorm(const Tensor<T>& x, const Tensor<T>& gain,
                    const Tensor<T>& bias, double eps = 1e-5);

// ---- linear algebra ----
// a[..., m, k] x b[k, n] -> [..., m, n]
template <class T> Tensor<T> Matmul(const Tensor<T>& a, const Tensor<T>& b);
// a[B..., m, k] x b[B..., k, n] -> [B..., m, n]; with transpose_b the right
// operand is read as b[B..., n, k].
template <class T>
Tensor<T> BatchMatmul(const Tensor<T>& a, const Tensor<T>& b,
                      bool transpose_b = false);

// ---- shape ----
template <class T> Tensor<T> Reshape(const Tensor<T>& x, Shape shape);
template <class T>
Tensor<T> Permute(const Tensor<T>& x, const std::vector<std::size_t>& perm);
template <class T> Tensor<T> Transpose2d(const Tensor<T>& x);
// Drops `axis` by taking slice `index`.
template <class T>
Tensor<T> Select(const Tensor<T>& x, std::size_t axis, std::size_t index);

// ---- reductions / normalization ----
template <class T> Tensor<T> Softmax(const Tensor<T>& x, int axis);
template <class T> Tensor<T> Sum(const Tensor<T>& x);
template <class T> Tensor<T> Mean(const Tensor<T>& x);

// Row lookup: table[V, h] gathered by ids laid out as ids_shape.
// Result shape is ids_shape + [h].
template <class T>
Tensor<T> Embedding(const Tensor<T>& table, std::span<const std::int32_t> ids,
                    const Shape& ids_shape);

// ---- losses ----
inline constexpr std::int32_t kIgnoreIndex = -1;

// Mean cross-entropy over rows of logits[..., V] whose target is not
// kIgnoreIndex. Ignored rows are never read. With no selected rows the
// result is 0 and no gradient flows.
template <class T>
Tensor<T> CrossEntropy(const Tensor<T>& logits,
                       std::span<const std::int32_t> targets);

// Mean binary cross-entropy of sigmoid(logits) against targets in [0, 1],
// evaluated in the numerically stable log-sum-exp form. A non-empty `mask`
// restricts the mean to elements with mask != 0; the rest get no gradient.
template <class T>
Tensor<T> BceWithLogits(const Tensor<T>& logits, std::span<const T> targets,
                        std::span<const std::uint8_t> mask = {});

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return Add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return Sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return Mul(a, b); }

// ---- optimizer ----
template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamOptions options;
  std::uint64_t step_count = 0;
  std::vector<std::string> names;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

template <class T>
AdamState MakeAdamState(std::span<const NamedTensor<T>> params,
                        AdamOptions options = {});

// One bias-corrected Adam update of every parameter from its gradient.
template <class T>
void AdamStep(std::span<const NamedTensor<T>> params, AdamState& state,
              double lr);

template <class T>
void ZeroGrads(std::span<const NamedTensor<T>> params) {
  for (const auto& p : params) p.tensor.node()->grad.clear();
}

}  // namespace minibert
