#include "minibert/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "minibert/error.hpp"
#include "minibert/parallel.hpp"
#include "minibert/random.hpp"

namespace minibert {

std::size_t NumElements(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string ShapeToString(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;

template <class T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

template <class T>
NodePtr<T> NewNode(Shape shape, std::vector<T> data) {
  auto n = std::make_shared<detail::Node<T>>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  return n;
}

// Builds the result node; records inputs and the backward closure only if
// some input needs a gradient and recording is enabled.
template <class T>
Tensor<T> MakeResult(Shape shape, std::vector<T> data,
                     std::initializer_list<NodePtr<T>> inputs,
                     std::function<void(detail::Node<T>&)> backward) {
  auto out = NewNode<T>(std::move(shape), std::move(data));
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in->requires_grad;
  }
  if (needs) {
    out->requires_grad = true;
    out->inputs.assign(inputs.begin(), inputs.end());
    out->backward = std::move(backward);
  }
  return Tensor<T>::FromNode(out);
}

void CheckDefined(bool defined, const char* op) {
  if (!defined) Fail(ErrorKind::kContract, std::string(op) + ": undefined tensor");
}

// Right-aligned broadcast of two shapes; strides of size-1 / missing axes
// become zero so the same loop serves the gradient reduction.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
};

std::vector<std::size_t> RowMajorStrides(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

Broadcast MakeBroadcast(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Broadcast bc;
  bc.out.assign(rank, 1);
  bc.stride_a.assign(rank, 0);
  bc.stride_b.assign(rank, 0);
  const auto sa = RowMajorStrides(a);
  const auto sb = RowMajorStrides(b);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ia = i + a.size() >= rank ? i + a.size() - rank : SIZE_MAX;
    const std::size_t ib = i + b.size() >= rank ? i + b.size() - rank : SIZE_MAX;
    const std::size_t da = ia == SIZE_MAX ? 1 : a[ia];
    const std::size_t db = ib == SIZE_MAX ? 1 : b[ib];
    if (da != db && da != 1 && db != 1) {
      Fail(ErrorKind::kDimension, std::string(op) + ": shapes " + ShapeToString(a) +
                                      " and " + ShapeToString(b) +
                                      " are not broadcast-compatible");
    }
    bc.out[i] = std::max(da, db);
    if (da != 1) bc.stride_a[i] = sa[ia];
    if (db != 1) bc.stride_b[i] = sb[ib];
  }
  return bc;
}

template <class F>
void ForEachBroadcast(const Broadcast& bc, F&& f) {
  const std::size_t n = NumElements(bc.out);
  const std::size_t rank = bc.out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0;
  std::size_t ob = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, oa, ob);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      oa += bc.stride_a[d];
      ob += bc.stride_b[d];
      if (idx[d] < bc.out[d]) break;
      oa -= bc.stride_a[d] * bc.out[d];
      ob -= bc.stride_b[d] * bc.out[d];
      idx[d] = 0;
    }
  }
}

// True when `small` equals the trailing axes of `big` (a bias row pattern).
bool IsSuffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

// Binary elementwise op with broadcasting. `fwd(a, b)` is the value;
// `da(a, b, out)` / `db(a, b, out)` are the local partial derivatives.
template <class T, class Fwd, class Da, class Db>
Tensor<T> BinaryOp(const Tensor<T>& a, const Tensor<T>& b, const char* name,
                   Fwd fwd, Da da, Db db) {
  CheckDefined(a.defined() && b.defined(), name);
  auto bc = MakeBroadcast(a.shape(), b.shape(), name);
  std::vector<T> out(NumElements(bc.out));
  const auto& ad = a.node()->data;
  const auto& bd = b.node()->data;
  // Fast path: b repeats along the leading axes of a.
  const bool row_b = a.shape() == bc.out && IsSuffix(b.shape(), a.shape());
  if (row_b) {
    const std::size_t nb = bd.size();
    for (std::size_t i = 0; i < out.size(); i += nb) {
      for (std::size_t j = 0; j < nb; ++j) out[i + j] = fwd(ad[i + j], bd[j]);
    }
  } else {
    ForEachBroadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      out[i] = fwd(ad[ia], bd[ib]);
    });
  }
  auto an = a.node();
  auto bn = b.node();
  return MakeResult<T>(
      bc.out, std::move(out), {an, bn},
      [an, bn, bc, da, db, row_b](detail::Node<T>& self) {
        const bool ga = an->requires_grad;
        const bool gb = bn->requires_grad;
        if (ga) an->EnsureGrad();
        if (gb) bn->EnsureGrad();
        if (row_b) {
          const std::size_t nb = bn->data.size();
          for (std::size_t i = 0; i < self.grad.size(); i += nb) {
            for (std::size_t j = 0; j < nb; ++j) {
              const T g = self.grad[i + j];
              const T x = an->data[i + j];
              const T y = bn->data[j];
              if (ga) an->grad[i + j] += g * da(x, y, self.data[i + j]);
              if (gb) bn->grad[j] += g * db(x, y, self.data[i + j]);
            }
          }
          return;
        }
        ForEachBroadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
          const T g = self.grad[i];
          const T x = an->data[ia];
          const T y = bn->data[ib];
          if (ga) an->grad[ia] += g * da(x, y, self.data[i]);
          if (gb) bn->grad[ib] += g * db(x, y, self.data[i]);
        });
      });
}

// Unary elementwise op; `deriv(x, y)` is dy/dx given input x and output y.
template <class T, class Fwd, class Deriv>
Tensor<T> UnaryOp(const Tensor<T>& x, const char* name, Fwd fwd, Deriv deriv) {
  CheckDefined(x.defined(), name);
  const auto& xd = x.node()->data;
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
  auto xn = x.node();
  return MakeResult<T>(x.shape(), std::move(out), {xn},
                       [xn, deriv](detail::Node<T>& self) {
                         xn->EnsureGrad();
                         for (std::size_t i = 0; i < self.grad.size(); ++i) {
                           xn->grad[i] += self.grad[i] * deriv(xn->data[i], self.data[i]);
                         }
                       });
}

// ---- GEMM kernels over contiguous row-major blocks ----
// Each output row is reduced in a fixed order by a single worker, so results
// do not depend on the thread count.

constexpr std::size_t kParallelWork = 1u << 16;

std::size_t RowChunk(std::size_t rows, std::size_t work) {
  if (work < kParallelWork) return rows == 0 ? 1 : rows;
  return std::max<std::size_t>(1, rows / 64);
}

// C[M,N] += A[M,K] * B[K,N]
template <class T>
void GemmNN(const T* A, const T* B, T* C, std::size_t M, std::size_t K,
            std::size_t N) {
  ParallelFor(M, RowChunk(M, M * K * N), [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      T* __restrict c = C + i * N;
      const T* a = A + i * K;
      for (std::size_t p = 0; p < K; ++p) {
        const T av = a[p];
        const T* __restrict b = B + p * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
      }
    }
  });
}

// Dot product with four interleaved partial sums (fixed order).
template <class T>
T Dot(const T* __restrict a, const T* __restrict b, std::size_t n) {
  T s0 = T(0), s1 = T(0), s2 = T(0), s3 = T(0);
  std::size_t p = 0;
  for (; p + 4 <= n; p += 4) {
    s0 += a[p] * b[p];
    s1 += a[p + 1] * b[p + 1];
    s2 += a[p + 2] * b[p + 2];
    s3 += a[p + 3] * b[p + 3];
  }
  for (; p < n; ++p) s0 += a[p] * b[p];
  return (s0 + s1) + (s2 + s3);
}

// C[M,N] += A[M,K] * B[N,K]^T
template <class T>
void GemmNT(const T* A, const T* B, T* C, std::size_t M, std::size_t K,
            std::size_t N) {
  ParallelFor(M, RowChunk(M, M * K * N), [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      const T* a = A + i * K;
      for (std::size_t j = 0; j < N; ++j) C[i * N + j] += Dot(a, B + j * K, K);
    }
  });
}

// C[K,N] += A[M,K]^T * B[M,N]
template <class T>
void GemmTN(const T* A, const T* B, T* C, std::size_t M, std::size_t K,
            std::size_t N) {
  ParallelFor(K, RowChunk(K, M * K * N), [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = 0; i < M; ++i) {
      const T* __restrict b = B + i * N;
      for (std::size_t p = r0; p < r1; ++p) {
        const T av = A[i * K + p];
        T* __restrict c = C + p * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
      }
    }
  });
}

std::size_t NormalizeAxis(int axis, std::size_t rank, const char* op) {
  const long r = static_cast<long>(rank);
  const long a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    Fail(ErrorKind::kDimension, std::string(op) + ": axis " + std::to_string(axis) +
                                    " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool GradEnabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// Tensor

template <class T>
Tensor<T> Tensor<T>::Zeros(Shape shape, bool requires_grad) {
  return Full(std::move(shape), T(0), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::Full(Shape shape, T value, bool requires_grad) {
  const std::size_t n = NumElements(shape);
  return FromData(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::FromData(Shape shape, std::vector<T> data, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) Fail(ErrorKind::kDimension, "tensor dimensions must be positive, got " + ShapeToString(shape));
  }
  if (NumElements(shape) != data.size()) {
    Fail(ErrorKind::kDimension, "shape " + ShapeToString(shape) + " needs " +
                                    std::to_string(NumElements(shape)) + " values, got " +
                                    std::to_string(data.size()));
  }
  auto n = NewNode<T>(std::move(shape), std::move(data));
  n->requires_grad = requires_grad;
  return FromNode(n);
}

template <class T>
std::size_t Tensor<T>::dim(int axis) const {
  return node_->shape[NormalizeAxis(axis, rank(), "dim")];
}

template <class T>
std::span<T> Tensor<T>::mutable_data() {
  if (node_->backward || !node_->inputs.empty()) {
    Fail(ErrorKind::kContract, "mutable_data on a non-leaf tensor");
  }
  return node_->data;
}

template <class T>
T Tensor<T>::item() const {
  if (numel() != 1) Fail(ErrorKind::kContract, "item() on tensor of shape " + ShapeToString(shape()));
  return node_->data[0];
}

template <class T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) Fail(ErrorKind::kDimension, "at(): wrong number of indices");
  std::size_t off = 0;
  std::size_t i = 0;
  for (std::size_t v : index) {
    if (v >= node_->shape[i]) Fail(ErrorKind::kDimension, "at(): index out of range");
    off = off * node_->shape[i] + v;
    ++i;
  }
  return node_->data[off];
}

template <class T>
void Tensor<T>::set_requires_grad(bool on) {
  node_->requires_grad = on;
}

template <class T>
std::span<T> Tensor<T>::mutable_grad() {
  node_->EnsureGrad();
  return node_->grad;
}

template <class T>
void Tensor<T>::ZeroGrad() {
  node_->grad.clear();
}

template <class T>
void Tensor<T>::Backward() const {
  CheckDefined(defined(), "Backward");
  if (numel() != 1) {
    Fail(ErrorKind::kContract, "Backward needs a scalar loss, got shape " + ShapeToString(shape()));
  }
  if (node_->released) Fail(ErrorKind::kContract, "Backward called twice on the same graph");
  if (!node_->requires_grad) Fail(ErrorKind::kContract, "Backward on a tensor that does not require grad");

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> seen;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      detail::Node<T>* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->EnsureGrad();
  node_->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  for (detail::Node<T>* n : order) {
    if (n->backward) {
      n->backward = nullptr;
      n->inputs.clear();
      n->grad.clear();
      n->grad.shrink_to_fit();
      n->released = true;
    }
  }
}

template <class T>
Tensor<T> Tensor<T>::Detach() const {
  return FromData(shape(), node_->data, false);
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> Add(const Tensor<T>& a, const Tensor<T>& b) {
  return BinaryOp<T>(
      a, b, "add", [](T x, T y) { return x + y; },
      [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
}

template <class T>
Tensor<T> Sub(const Tensor<T>& a, const Tensor<T>& b) {
  return BinaryOp<T>(
      a, b, "sub", [](T x, T y) { return x - y; },
      [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
}

template <class T>
Tensor<T> Mul(const Tensor<T>& a, const Tensor<T>& b) {
  return BinaryOp<T>(
      a, b, "mul", [](T x, T y) { return x * y; },
      [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

template <class T>
Tensor<T> Scale(const Tensor<T>& x, T factor) {
  return UnaryOp<T>(
      x, "scale", [factor](T v) { return v * factor; },
      [factor](T, T) { return factor; });
}

template <class T>
Tensor<T> Gelu(const Tensor<T>& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return UnaryOp<T>(
      x, "gelu",
      [](T v) {
        const double d = v;
        return static_cast<T>(0.5 * d * (1.0 + std::erf(d * kInvSqrt2)));
      },
      [](T v, T) {
        const double d = v;
        const double cdf = 0.5 * (1.0 + std::erf(d * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * d * d);
        return static_cast<T>(cdf + d * pdf);
      });
}

template <class T>
Tensor<T> Sigmoid(const Tensor<T>& x) {
  return UnaryOp<T>(
      x, "sigmoid",
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> Log(const Tensor<T>& x) {
  return UnaryOp<T>(
      x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Tensor<T> Dropout(const Tensor<T>& x, double p, bool training, std::uint64_t seed) {
  if (!(p >= 0.0 && p < 1.0)) {
    Fail(ErrorKind::kInvalidArgument, "dropout probability must be in [0, 1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) return x;
  Rng rng(seed);
  std::vector<T> mask(x.numel());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  for (auto& m : mask) m = rng.Uniform() < p ? T(0) : keep_scale;
  return Mul(x, Tensor<T>::FromData(x.shape(), std::move(mask)));
}

template <class T>
Tensor<T> LayerNorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                    double eps) {
  CheckDefined(x.defined() && gain.defined() && bias.defined(), "layer_norm");
  const std::size_t h = x.dim(-1);
  if (gain.numel() != h || bias.numel() != h) {
    Fail(ErrorKind::kDimension, "layer_norm: input " + ShapeToString(x.shape()) + " with gain " +
                                    ShapeToString(gain.shape()) + " and bias " +
                                    ShapeToString(bias.shape()));
  }
  const std::size_t rows = x.numel() / h;
  const auto& xd = x.node()->data;
  const auto& gd = gain.node()->data;
  const auto& bd = bias.node()->data;
  std::vector<T> out(xd.size());
  std::vector<T> xhat(xd.size());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xd.data() + r * h;
    T mean = T(0);
    for (std::size_t j = 0; j < h; ++j) mean += xr[j];
    mean /= static_cast<T>(h);
    T var = T(0);
    for (std::size_t j = 0; j < h; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(h);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(eps));
    rstd[r] = rs;
    for (std::size_t j = 0; j < h; ++j) {
      const T n = (xr[j] - mean) * rs;
      xhat[r * h + j] = n;
      out[r * h + j] = n * gd[j] + bd[j];
    }
  }
  auto xn = x.node();
  auto gn = gain.node();
  auto bn = bias.node();
  return MakeResult<T>(
      x.shape(), std::move(out), {xn, gn, bn},
      [xn, gn, bn, h, rows, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node<T>& self) {
        if (gn->requires_grad) gn->EnsureGrad();
        if (bn->requires_grad) bn->EnsureGrad();
        if (xn->requires_grad) xn->EnsureGrad();
        std::vector<T> dn(h);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* g = self.grad.data() + r * h;
          const T* nr = xhat.data() + r * h;
          T mean_dn = T(0);
          T mean_dn_n = T(0);
          for (std::size_t j = 0; j < h; ++j) {
            if (gn->requires_grad) gn->grad[j] += g[j] * nr[j];
            if (bn->requires_grad) bn->grad[j] += g[j];
            dn[j] = g[j] * gn->data[j];
            mean_dn += dn[j];
            mean_dn_n += dn[j] * nr[j];
          }
          if (!xn->requires_grad) continue;
          mean_dn /= static_cast<T>(h);
          mean_dn_n /= static_cast<T>(h);
          T* dx = xn->grad.data() + r * h;
          for (std::size_t j = 0; j < h; ++j) {
            dx[j] += rstd[r] * (dn[j] - mean_dn - nr[j] * mean_dn_n);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Tensor<T> Matmul(const Tensor<T>& a, const Tensor<T>& b) {
  CheckDefined(a.defined() && b.defined(), "matmul");
  if (a.rank() < 2 || b.rank() != 2 || a.dim(-1) != b.dim(0)) {
    Fail(ErrorKind::kDimension, "matmul: cannot multiply " + ShapeToString(a.shape()) + " by " +
                                    ShapeToString(b.shape()));
  }
  const std::size_t K = b.dim(0);
  const std::size_t N = b.dim(1);
  const std::size_t M = a.numel() / K;
  Shape out_shape = a.shape();
  out_shape.back() = N;
  std::vector<T> out(M * N, T(0));
  GemmNN(a.node()->data.data(), b.node()->data.data(), out.data(), M, K, N);
  auto an = a.node();
  auto bn = b.node();
  return MakeResult<T>(out_shape, std::move(out), {an, bn},
                       [an, bn, M, K, N](detail::Node<T>& self) {
                         if (an->requires_grad) {
                           an->EnsureGrad();
                           GemmNT(self.grad.data(), bn->data.data(), an->grad.data(), M, N, K);
                         }
                         if (bn->requires_grad) {
                           bn->EnsureGrad();
                           GemmTN(an->data.data(), self.grad.data(), bn->grad.data(), M, K, N);
                         }
                       });
}

template <class T>
Tensor<T> BatchMatmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  CheckDefined(a.defined() && b.defined(), "batch_matmul");
  const bool ranks_ok = a.rank() >= 2 && a.rank() == b.rank() &&
                        std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin());
  const std::size_t K = ranks_ok ? a.dim(-1) : 0;
  const std::size_t bk = ranks_ok ? (transpose_b ? b.dim(-1) : b.dim(-2)) : 1;
  if (!ranks_ok || K != bk) {
    Fail(ErrorKind::kDimension, "batch_matmul: cannot multiply " + ShapeToString(a.shape()) +
                                    " by " + ShapeToString(b.shape()) +
                                    (transpose_b ? " (transposed)" : ""));
  }
  const std::size_t M = a.dim(-2);
  const std::size_t N = transpose_b ? b.dim(-2) : b.dim(-1);
  const std::size_t batches = a.numel() / (M * K);
  Shape out_shape = a.shape();
  out_shape.back() = N;
  std::vector<T> out(batches * M * N, T(0));
  const T* ad = a.node()->data.data();
  const T* bd = b.node()->data.data();
  for (std::size_t i = 0; i < batches; ++i) {
    if (transpose_b) {
      GemmNT(ad + i * M * K, bd + i * N * K, out.data() + i * M * N, M, K, N);
    } else {
      GemmNN(ad + i * M * K, bd + i * K * N, out.data() + i * M * N, M, K, N);
    }
  }
  auto an = a.node();
  auto bn = b.node();
  return MakeResult<T>(
      out_shape, std::move(out), {an, bn},
      [an, bn, M, K, N, batches, transpose_b](detail::Node<T>& self) {
        if (an->requires_grad) an->EnsureGrad();
        if (bn->requires_grad) bn->EnsureGrad();
        for (std::size_t i = 0; i < batches; ++i) {
          const T* g = self.grad.data() + i * M * N;
          const T* ai = an->data.data() + i * M * K;
          const T* bi = bn->data.data() + i * K * N;
          if (an->requires_grad) {
            T* ga = an->grad.data() + i * M * K;
            // dA = dC * B^T, or dC * B when B is stored transposed.
            if (transpose_b) {
              GemmNN(g, bi, ga, M, N, K);
            } else {
              GemmNT(g, bi, ga, M, N, K);
            }
          }
          if (bn->requires_grad) {
            T* gb = bn->grad.data() + i * K * N;
            if (transpose_b) {
              GemmTN(g, ai, gb, M, N, K);  // dB[N,K] = dC^T * A
            } else {
              GemmTN(ai, g, gb, M, K, N);  // dB[K,N] = A^T * dC
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Shape

template <class T>
Tensor<T> Reshape(const Tensor<T>& x, Shape shape) {
  CheckDefined(x.defined(), "reshape");
  if (NumElements(shape) != x.numel()) {
    Fail(ErrorKind::kDimension, "reshape: cannot view " + ShapeToString(x.shape()) + " as " +
                                    ShapeToString(shape));
  }
  auto xn = x.node();
  return MakeResult<T>(std::move(shape), xn->data, {xn}, [xn](detail::Node<T>& self) {
    xn->EnsureGrad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> Permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  CheckDefined(x.defined(), "permute");
  const std::size_t rank = x.rank();
  std::vector<bool> used(rank, false);
  bool ok = perm.size() == rank;
  for (std::size_t p : perm) {
    ok = ok && p < rank && !used[p];
    if (p < rank) used[p] = true;
  }
  if (!ok) Fail(ErrorKind::kDimension, "permute: invalid permutation for shape " + ShapeToString(x.shape()));
  Shape out_shape(rank);
  const auto in_strides = RowMajorStrides(x.shape());
  Broadcast walk;  // reuse the strided walker: a = source offsets
  walk.stride_a.resize(rank);
  walk.stride_b.assign(rank, 0);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = x.shape()[perm[i]];
    walk.stride_a[i] = in_strides[perm[i]];
  }
  walk.out = out_shape;
  const auto& xd = x.node()->data;
  std::vector<T> out(xd.size());
  ForEachBroadcast(walk, [&](std::size_t i, std::size_t src, std::size_t) { out[i] = xd[src]; });
  auto xn = x.node();
  return MakeResult<T>(out_shape, std::move(out), {xn}, [xn, walk](detail::Node<T>& self) {
    xn->EnsureGrad();
    ForEachBroadcast(walk, [&](std::size_t i, std::size_t src, std::size_t) {
      xn->grad[src] += self.grad[i];
    });
  });
}

template <class T>
Tensor<T> Transpose2d(const Tensor<T>& x) {
  if (x.rank() != 2) Fail(ErrorKind::kDimension, "transpose2d expects a matrix, got " + ShapeToString(x.shape()));
  return Permute(x, {1, 0});
}

template <class T>
Tensor<T> Select(const Tensor<T>& x, std::size_t axis, std::size_t index) {
  CheckDefined(x.defined(), "select");
  if (axis >= x.rank() || index >= x.shape()[axis] || x.rank() < 2) {
    Fail(ErrorKind::kDimension, "select: axis " + std::to_string(axis) + " index " +
                                    std::to_string(index) + " invalid for " + ShapeToString(x.shape()));
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
  const std::size_t len = x.shape()[axis];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  const auto& xd = x.node()->data;
  std::vector<T> out(outer * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>((o * len + index) * inner), inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * inner));
  }
  auto xn = x.node();
  return MakeResult<T>(out_shape, std::move(out), {xn},
                       [xn, outer, len, inner, index](detail::Node<T>& self) {
                         xn->EnsureGrad();
                         for (std::size_t o = 0; o < outer; ++o) {
                           for (std::size_t j = 0; j < inner; ++j) {
                             xn->grad[(o * len + index) * inner + j] += self.grad[o * inner + j];
                           }
                         }
                       });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> Softmax(const Tensor<T>& x, int axis_in) {
  CheckDefined(x.defined(), "softmax");
  const std::size_t axis = NormalizeAxis(axis_in, x.rank(), "softmax");
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
  const std::size_t len = x.shape()[axis];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  const auto& xd = x.node()->data;
  std::vector<T> out(xd.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, xd[base + k * inner]);
      T total = T(0);
      for (std::size_t k = 0; k < len; ++k) {
        const T e = std::exp(xd[base + k * inner] - mx);
        out[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= total;
    }
  }
  auto xn = x.node();
  return MakeResult<T>(x.shape(), std::move(out), {xn},
                       [xn, outer, len, inner](detail::Node<T>& self) {
                         xn->EnsureGrad();
                         for (std::size_t o = 0; o < outer; ++o) {
                           for (std::size_t in = 0; in < inner; ++in) {
                             const std::size_t base = o * len * inner + in;
                             T dot = T(0);
                             for (std::size_t k = 0; k < len; ++k) {
                               dot += self.grad[base + k * inner] * self.data[base + k * inner];
                             }
                             for (std::size_t k = 0; k < len; ++k) {
                               const std::size_t i = base + k * inner;
                               xn->grad[i] += self.data[i] * (self.grad[i] - dot);
                             }
                           }
                         }
                       });
}

template <class T>
Tensor<T> Sum(const Tensor<T>& x) {
  CheckDefined(x.defined(), "sum");
  T total = T(0);
  for (T v : x.node()->data) total += v;
  auto xn = x.node();
  return MakeResult<T>({1}, {total}, {xn}, [xn](detail::Node<T>& self) {
    xn->EnsureGrad();
    for (auto& g : xn->grad) g += self.grad[0];
  });
}

template <class T>
Tensor<T> Mean(const Tensor<T>& x) {
  return Scale(Sum(x), T(1) / static_cast<T>(x.numel()));
}

template <class T>
Tensor<T> Embedding(const Tensor<T>& table, std::span<const std::int32_t> ids,
                    const Shape& ids_shape) {
  CheckDefined(table.defined(), "embedding");
  if (table.rank() != 2) Fail(ErrorKind::kDimension, "embedding table must be 2-D, got " + ShapeToString(table.shape()));
  if (NumElements(ids_shape) != ids.size()) Fail(ErrorKind::kDimension, "embedding: ids do not match ids_shape");
  const std::size_t V = table.dim(0);
  const std::size_t h = table.dim(1);
  for (std::int32_t id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= V) {
      Fail(ErrorKind::kContract, "embedding: id " + std::to_string(id) + " outside table of " +
                                     std::to_string(V) + " rows");
    }
  }
  Shape out_shape = ids_shape;
  out_shape.push_back(h);
  const auto& td = table.node()->data;
  std::vector<T> out(ids.size() * h);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(ids[i]) * h), h,
                out.begin() + static_cast<std::ptrdiff_t>(i * h));
  }
  auto tn = table.node();
  std::vector<std::int32_t> id_copy(ids.begin(), ids.end());
  return MakeResult<T>(out_shape, std::move(out), {tn},
                       [tn, h, id_copy = std::move(id_copy)](detail::Node<T>& self) {
                         tn->EnsureGrad();
                         for (std::size_t i = 0; i < id_copy.size(); ++i) {
                           T* row = tn->grad.data() + static_cast<std::size_t>(id_copy[i]) * h;
                           for (std::size_t j = 0; j < h; ++j) row[j] += self.grad[i * h + j];
                         }
                       });
}

// ---------------------------------------------------------------------------
// Losses

template <class T>
Tensor<T> CrossEntropy(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
  CheckDefined(logits.defined(), "cross_entropy");
  const std::size_t V = logits.dim(-1);
  const std::size_t rows = logits.numel() / V;
  if (targets.size() != rows) {
    Fail(ErrorKind::kDimension, "cross_entropy: " + std::to_string(targets.size()) +
                                    " targets for logits " + ShapeToString(logits.shape()));
  }
  std::vector<std::size_t> selected;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::int32_t t = targets[r];
    if (t == kIgnoreIndex) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= V) {
      Fail(ErrorKind::kContract, "cross_entropy: target " + std::to_string(t) + " outside " +
                                     std::to_string(V) + " classes");
    }
    selected.push_back(r);
  }
  const auto& ld = logits.node()->data;
  // Per selected row: softmax probabilities saved for the backward pass.
  std::vector<T> probs(selected.size() * V);
  T total = T(0);
  for (std::size_t s = 0; s < selected.size(); ++s) {
    const T* row = ld.data() + selected[s] * V;
    T mx = row[0];
    for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    T z = T(0);
    for (std::size_t j = 0; j < V; ++j) {
      const T e = std::exp(row[j] - mx);
      probs[s * V + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < V; ++j) probs[s * V + j] /= z;
    const std::size_t t = static_cast<std::size_t>(targets[selected[s]]);
    total += (std::log(z) + mx) - row[t];
  }
  const T count = static_cast<T>(selected.size());
  const T loss = selected.empty() ? T(0) : total / count;
  auto ln = logits.node();
  std::vector<std::int32_t> tcopy(targets.begin(), targets.end());
  return MakeResult<T>(
      {1}, {loss}, {ln},
      [ln, V, selected = std::move(selected), probs = std::move(probs),
       tcopy = std::move(tcopy)](detail::Node<T>& self) {
        ln->EnsureGrad();
        if (selected.empty()) return;
        const T scale = self.grad[0] / static_cast<T>(selected.size());
        for (std::size_t s = 0; s < selected.size(); ++s) {
          T* g = ln->grad.data() + selected[s] * V;
          const std::size_t t = static_cast<std::size_t>(tcopy[selected[s]]);
          for (std::size_t j = 0; j < V; ++j) {
            g[j] += scale * (probs[s * V + j] - (j == t ? T(1) : T(0)));
          }
        }
      });
}

template <class T>
Tensor<T> BceWithLogits(const Tensor<T>& logits, std::span<const T> targets,
                        std::span<const std::uint8_t> mask) {
  CheckDefined(logits.defined(), "bce_with_logits");
  if (targets.size() != logits.numel() || (!mask.empty() && mask.size() != logits.numel())) {
    Fail(ErrorKind::kDimension, "bce_with_logits: " + std::to_string(targets.size()) +
                                    " targets for logits " + ShapeToString(logits.shape()));
  }
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (mask.empty() || mask[i]) active.push_back(i);
  }
  const auto& zd = logits.node()->data;
  T total = T(0);
  for (std::size_t i : active) {
    const T z = zd[i];
    total += std::max(z, T(0)) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
  }
  const T loss = active.empty() ? T(0) : total / static_cast<T>(active.size());
  auto zn = logits.node();
  std::vector<T> tcopy(targets.begin(), targets.end());
  return MakeResult<T>({1}, {loss}, {zn},
                       [zn, active = std::move(active), tcopy = std::move(tcopy)](detail::Node<T>& self) {
                         zn->EnsureGrad();
                         if (active.empty()) return;
                         const T scale = self.grad[0] / static_cast<T>(active.size());
                         for (std::size_t i : active) {
                           const T z = zn->data[i];
                           const T s = z >= T(0) ? T(1) / (T(1) + std::exp(-z))
                                                 : std::exp(z) / (T(1) + std::exp(z));
                           zn->grad[i] += scale * (s - tcopy[i]);
                         }
                       });
}

// ---------------------------------------------------------------------------
// Adam

template <class T>
AdamState MakeAdamState(std::span<const NamedTensor<T>> params, AdamOptions options) {
  AdamState state;
  state.options = options;
  for (const auto& p : params) {
    state.names.push_back(p.name);
    state.first_moment.emplace_back(p.tensor.numel(), 0.0);
    state.second_moment.emplace_back(p.tensor.numel(), 0.0);
  }
  return state;
}

template <class T>
void AdamStep(std::span<const NamedTensor<T>> params, AdamState& state, double lr) {
  if (!(lr > 0.0)) Fail(ErrorKind::kInvalidArgument, "adam: learning rate must be positive");
  if (params.size() != state.names.size()) {
    Fail(ErrorKind::kContract, "adam: state tracks " + std::to_string(state.names.size()) +
                                   " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != state.names[i] || params[i].tensor.numel() != state.first_moment[i].size()) {
      Fail(ErrorKind::kContract, "adam: parameter '" + params[i].name + "' does not match its state");
    }
    if (!params[i].tensor.has_grad()) {
      Fail(ErrorKind::kContract, "adam: parameter '" + params[i].name + "' has no gradient");
    }
  }
  ++state.step_count;
  const auto& o = state.options;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& node = *params[i].tensor.node();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < node.data.size(); ++j) {
      const double g = node.grad[j];
      m[j] = o.beta1 * m[j] + (1.0 - o.beta1) * g;
      v[j] = o.beta2 * v[j] + (1.0 - o.beta2) * g * g;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      node.data[j] = static_cast<T>(node.data[j] - lr * mhat / (std::sqrt(vhat) + o.epsilon));
    }
  }
}

// ---------------------------------------------------------------------------

#define MINIBERT_INSTANTIATE(T)                                                          \
  template class Tensor<T>;                                                             \
  template Tensor<T> Add(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> Sub(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> Mul(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> Scale(const Tensor<T>&, T);                                        \
  template Tensor<T> Gelu(const Tensor<T>&);                                            \
  template Tensor<T> Sigmoid(const Tensor<T>&);                                         \
  template Tensor<T> Log(const Tensor<T>&);                                             \
  template Tensor<T> Dropout(const Tensor<T>&, double, bool, std::uint64_t);            \
  template Tensor<T> LayerNorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                               double);                                                 \
  template Tensor<T> Matmul(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> BatchMatmul(const Tensor<T>&, const Tensor<T>&, bool);             \
  template Tensor<T> Reshape(const Tensor<T>&, Shape);                                  \
  template Tensor<T> Permute(const Tensor<T>&, const std::vector<std::size_t>&);        \
  template Tensor<T> Transpose2d(const Tensor<T>&);                                     \
  template Tensor<T> Select(const Tensor<T>&, std::size_t, std::size_t);                \
  template Tensor<T> Softmax(const Tensor<T>&, int);                                    \
  template Tensor<T> Sum(const Tensor<T>&);                                             \
  template Tensor<T> Mean(const Tensor<T>&);                                            \
  template Tensor<T> Embedding(const Tensor<T>&, std::span<const std::int32_t>,         \
                               const Shape&);                                           \
  template Tensor<T> CrossEntropy(const Tensor<T>&, std::span<const std::int32_t>);     \
  template Tensor<T> BceWithLogits(const Tensor<T>&, std::span<const T>,                \
                                   std::span<const std::uint8_t>);                       \
  template AdamState MakeAdamState(std::span<const NamedTensor<T>>, AdamOptions);       \
  template void AdamStep(std::span<const NamedTensor<T>>, AdamState&, double);

MINIBERT_INSTANTIATE(float)
MINIBERT_INSTANTIATE(double)

#undef MINIBERT_INSTANTIATE

}  // namespace minibert
