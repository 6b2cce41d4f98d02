#pragma once

// Minimal reverse-mode autodiff over dense row-major arrays.
//
// Every activation is a rank-N array with batch size 1. Ops build a graph of
// shared nodes; Var::backward() walks it in reverse topological order. The
// scalar type is a template parameter: networks train in float and the
// finite-difference checks run the same code in double.

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace latentseg::nn {

using Shape = std::vector<int>;

// 64-byte aligned storage so vectorized kernels see the same alignment on
// every run, which keeps float results bitwise reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename Real>
struct Node {
  Shape shape;
  Buffer<Real> value;
  Buffer<Real> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), Real(0));
  }
};

template <typename Real>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<Real>> node) : node_(std::move(node)) {}

  static Var constant(Shape shape, std::vector<Real> values);
  static Var constant(Shape shape, Real fill = Real(0));
  static Var parameter(Shape shape, std::vector<Real> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const Real> value() const { return node_->value; }
  std::span<Real> mutable_value() { return node_->value; }
  std::span<const Real> grad() const { return node_->grad; }
  std::span<Real> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void zero_grad();

  // Seeds d(self)/d(self) = 1; self must hold one element.
  void backward();

  Node<Real>* node() const { return node_.get(); }
  const std::shared_ptr<Node<Real>>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node<Real>> node_;
};

// Graph recording is on by default; NoGradGuard disables it for inference.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---- elementwise ----
template <typename Real> Var<Real> add(const Var<Real>& a, const Var<Real>& b);
template <typename Real> Var<Real> scale(const Var<Real>& x, Real s);
template <typename Real> Var<Real> silu(const Var<Real>& x);
template <typename Real> Var<Real> gelu(const Var<Real>& x);
template <typename Real> Var<Real> tanh(const Var<Real>& x);
// x: (1,C,H,W), bias: C elements of any shape.
template <typename Real> Var<Real> add_channel_bias(const Var<Real>& x, const Var<Real>& bias);

// ---- dense layers ----
// x: (1,C,H,W), weight: (O,C,k,k), bias: (O) or undefined.
template <typename Real>
Var<Real> conv2d(const Var<Real>& x, const Var<Real>& weight, const Var<Real>& bias, int stride,
                 int padding);
// x: (n,in), weight: (out,in), bias: (out) or undefined.
template <typename Real>
Var<Real> linear(const Var<Real>& x, const Var<Real>& weight, const Var<Real>& bias);

template <typename Real>
Var<Real> group_norm(const Var<Real>& x, const Var<Real>& gamma, const Var<Real>& beta, int groups,
                     Real eps = Real(1e-5));
// Normalizes over the last dimension of an (n,d) array.
template <typename Real>
Var<Real> layer_norm(const Var<Real>& x, const Var<Real>& gamma, const Var<Real>& beta,
                     Real eps = Real(1e-5));

// Multi-head scaled dot-product attention over projected q (nq,d), k (nk,d),
// v (nk,d). If probs is non-null it receives the (heads,nq,nk) attention maps.
template <typename Real>
Var<Real> attention(const Var<Real>& q, const Var<Real>& k, const Var<Real>& v, int heads,
                    std::vector<Real>* probs = nullptr);

// ---- layout ----
template <typename Real> Var<Real> concat_channels(const Var<Real>& a, const Var<Real>& b);
// (n,d) and (m,d) -> (n+m,d).
template <typename Real> Var<Real> concat_rows(const Var<Real>& a, const Var<Real>& b);
template <typename Real> Var<Real> slice_channels(const Var<Real>& x, int begin, int end);
template <typename Real> Var<Real> upsample_nearest2x(const Var<Real>& x);
template <typename Real> Var<Real> avg_pool(const Var<Real>& x, int factor);
// (1,C,H,W) -> (H*W, C) and back.
template <typename Real> Var<Real> to_tokens(const Var<Real>& x);
template <typename Real> Var<Real> from_tokens(const Var<Real>& t, int height, int width);
template <typename Real> Var<Real> reshape(const Var<Real>& x, Shape shape);

// ---- reductions ----
template <typename Real> Var<Real> mse_loss(const Var<Real>& prediction, const Var<Real>& target);
template <typename Real> Var<Real> weighted_sum(const Var<Real>& x, std::span<const Real> weights);

// ---- parameters ----
template <typename Real>
struct NamedParam {
  std::string name;
  Var<Real> var;
};

template <typename Real>
using ParamList = std::vector<NamedParam<Real>>;

// PyTorch-style uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init.
template <typename Real>
Var<Real> uniform_param(Shape shape, int fan_in, std::mt19937_64& rng);
template <typename Real>
Var<Real> filled_param(Shape shape, Real value);

}  // namespace latentseg::nn
