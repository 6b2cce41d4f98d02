#include "latentseg/nn.hpp"

#include <Eigen/Dense>

#include <malloc.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "latentseg/errors.hpp"

namespace latentseg::nn {

namespace {

thread_local bool g_grad_enabled = true;

// Activations are freed and reallocated every step; keep them on the heap
// instead of round-tripping through mmap.
const bool g_allocator_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  return true;
}();

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MatMap = Eigen::Map<RowMat<Real>>;
template <typename Real>
using CMatMap = Eigen::Map<const RowMat<Real>>;

template <typename Real>
Var<Real> make_node(Shape shape, Buffer<Real> value,
                    std::initializer_list<const Var<Real>*> inputs,
                    std::function<void(Node<Real>&)> backward) {
  auto node = std::make_shared<Node<Real>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto* in : inputs) {
      if (in && in->defined() && in->requires_grad()) any = true;
    }
    if (any) {
      node->requires_grad = true;
      for (const auto* in : inputs) {
        if (in && in->defined()) node->parents.push_back(in->ptr());
      }
      node->backward = std::move(backward);
    }
  }
  return Var<Real>(std::move(node));
}

// Gradient buffer of an input, or nullptr when it does not participate.
template <typename Real>
Real* grad_of(Node<Real>* n) {
  if (n == nullptr || !n->requires_grad) return nullptr;
  n->ensure_grad();
  return n->grad.data();
}

template <typename Real>
void require_shape(const Var<Real>& x, std::size_t rank, const char* op) {
  if (!x.defined() || x.shape().size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + " input, got " +
                     (x.defined() ? shape_str(x.shape()) : std::string("undefined")));
  }
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename Real>
Var<Real> Var<Real>::constant(Shape shape, std::vector<Real> values) {
  if (numel(shape) != values.size()) throw ShapeError("constant: value count does not match shape");
  auto node = std::make_shared<Node<Real>>();
  node->shape = std::move(shape);
  node->value.assign(values.begin(), values.end());
  return Var(std::move(node));
}

template <typename Real>
Var<Real> Var<Real>::constant(Shape shape, Real fill) {
  std::vector<Real> values(numel(shape), fill);
  return constant(std::move(shape), std::move(values));
}

template <typename Real>
Var<Real> Var<Real>::parameter(Shape shape, std::vector<Real> values) {
  Var v = constant(std::move(shape), std::move(values));
  v.node_->requires_grad = true;
  return v;
}

template <typename Real>
void Var<Real>::zero_grad() {
  if (node_) node_->grad.assign(node_->value.size(), Real(0));
}

template <typename Real>
void Var<Real>::backward() {
  if (size() != 1) throw ShapeError("backward: root must be a scalar");
  if (!node_->requires_grad) return;

  std::vector<Node<Real>*> order;
  std::unordered_set<Node<Real>*> visited;
  std::vector<std::pair<Node<Real>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<Real>* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Real>* n = *it;
    if (n->backward) {
      n->ensure_grad();
      n->backward(*n);
    }
  }
}

// ---------------------------------------------------------------------------
// elementwise

template <typename Real>
Var<Real> add(const Var<Real>& a, const Var<Real>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Buffer<Real> out(a.value().begin(), a.value().end());
  auto bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  Node<Real>* an = a.node();
  Node<Real>* bn = b.node();
  return make_node<Real>(a.shape(), std::move(out), {&a, &b}, [an, bn](Node<Real>& self) {
    for (Node<Real>* p : {an, bn}) {
      if (Real* g = grad_of(p)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

template <typename Real>
Var<Real> scale(const Var<Real>& x, Real s) {
  Buffer<Real> out(x.value().begin(), x.value().end());
  for (auto& v : out) v *= s;
  Node<Real>* xn = x.node();
  return make_node<Real>(x.shape(), std::move(out), {&x}, [xn, s](Node<Real>& self) {
    if (Real* g = grad_of(xn)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += s * self.grad[i];
    }
  });
}

template <typename Real>
Var<Real> silu(const Var<Real>& x) {
  auto xv = x.value();
  Buffer<Real> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] / (Real(1) + std::exp(-xv[i]));
  Node<Real>* xn = x.node();
  return make_node<Real>(x.shape(), std::move(out), {&x}, [xn](Node<Real>& self) {
    if (Real* g = grad_of(xn)) {
      const auto& in = xn->value;
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const Real sig = Real(1) / (Real(1) + std::exp(-in[i]));
        g[i] += self.grad[i] * sig * (Real(1) + in[i] * (Real(1) - sig));
      }
    }
  });
}

template <typename Real>
Var<Real> gelu(const Var<Real>& x) {
  constexpr Real kAlpha = Real(0.7978845608028654);  // sqrt(2/pi)
  constexpr Real kBeta = Real(0.044715);
  auto xv = x.value();
  Buffer<Real> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Real v = xv[i];
    out[i] = Real(0.5) * v * (Real(1) + std::tanh(kAlpha * (v + kBeta * v * v * v)));
  }
  Node<Real>* xn = x.node();
  return make_node<Real>(x.shape(), std::move(out), {&x}, [xn](Node<Real>& self) {
    if (Real* g = grad_of(xn)) {
      const auto& in = xn->value;
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const Real v = in[i];
        const Real t = std::tanh(kAlpha * (v + kBeta * v * v * v));
        const Real d = Real(0.5) * (Real(1) + t) +
                       Real(0.5) * v * (Real(1) - t * t) * kAlpha * (Real(1) + Real(3) * kBeta * v * v);
        g[i] += self.grad[i] * d;
      }
    }
  });
}

template <typename Real>
Var<Real> tanh(const Var<Real>& x) {
  auto xv = x.value();
  Buffer<Real> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
  Node<Real>* xn = x.node();
  auto result = make_node<Real>(x.shape(), std::move(out), {&x}, nullptr);
  if (result.requires_grad()) {
    result.node()->backward = [xn](Node<Real>& self) {
      if (Real* g = grad_of(xn)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const Real y = self.value[i];
          g[i] += self.grad[i] * (Real(1) - y * y);
        }
      }
    };
  }
  return result;
}

template <typename Real>
Var<Real> add_channel_bias(const Var<Real>& x, const Var<Real>& bias) {
  require_shape(x, 4, "add_channel_bias");
  const int C = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  if (bias.size() != static_cast<std::size_t>(C)) throw ShapeError("add_channel_bias: bias size");
  Buffer<Real> out(x.value().begin(), x.value().end());
  auto bv = bias.value();
  for (int c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] += bv[c];
  }
  Node<Real>* xn = x.node();
  Node<Real>* bn = bias.node();
  return make_node<Real>(x.shape(), std::move(out), {&x, &bias},
                         [xn, bn, C, plane](Node<Real>& self) {
                           if (Real* g = grad_of(xn)) {
                             for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                           }
                           if (Real* g = grad_of(bn)) {
                             for (int c = 0; c < C; ++c) {
                               Real s = 0;
                               for (std::size_t i = 0; i < plane; ++i) s += self.grad[c * plane + i];
                               g[c] += s;
                             }
                           }
                         });
}

// ---------------------------------------------------------------------------
// dense layers

template <typename Real>
Var<Real> conv2d(const Var<Real>& x, const Var<Real>& weight, const Var<Real>& bias, int stride,
                 int padding) {
  require_shape(x, 4, "conv2d");
  require_shape(weight, 4, "conv2d weight");
  const int C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != C || weight.dim(3) != k) {
    throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " vs input " +
                     shape_str(x.shape()));
  }
  if (bias.defined() && bias.size() != static_cast<std::size_t>(O)) {
    throw ShapeError("conv2d: bias size");
  }
  const int Ho = (H + 2 * padding - k) / stride + 1;
  const int Wo = (W + 2 * padding - k) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d: empty output");
  const int K = C * k * k;
  const int P = Ho * Wo;

  auto cols = std::make_shared<Buffer<Real>>(static_cast<std::size_t>(K) * P, Real(0));
  auto xv = x.value();
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        Real* row = cols->data() + static_cast<std::size_t>((c * k + ki) * k + kj) * P;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride - padding + ki;
          if (ih < 0 || ih >= H) continue;
          const Real* src = xv.data() + (static_cast<std::size_t>(c) * H + ih) * W;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * stride - padding + kj;
            if (iw >= 0 && iw < W) row[oh * Wo + ow] = src[iw];
          }
        }
      }
    }
  }

  Buffer<Real> out(static_cast<std::size_t>(O) * P);
  MatMap<Real> Y(out.data(), O, P);
  CMatMap<Real> Wm(weight.value().data(), O, K);
  CMatMap<Real> X(cols->data(), K, P);
  Y.noalias() = Wm * X;
  if (bias.defined()) {
    auto bv = bias.value();
    for (int o = 0; o < O; ++o) Y.row(o).array() += bv[o];
  }

  Node<Real>* xn = x.node();
  Node<Real>* wn = weight.node();
  Node<Real>* bn = bias.defined() ? bias.node() : nullptr;
  return make_node<Real>(
      {1, O, Ho, Wo}, std::move(out), {&x, &weight, bias.defined() ? &bias : nullptr},
      [=](Node<Real>& self) {
        CMatMap<Real> dY(self.grad.data(), O, P);
        if (Real* g = grad_of(wn)) {
          MatMap<Real> dW(g, O, K);
          dW.noalias() += dY * CMatMap<Real>(cols->data(), K, P).transpose();
        }
        if (Real* g = grad_of(bn)) {
          for (int o = 0; o < O; ++o) g[o] += dY.row(o).sum();
        }
        if (Real* g = grad_of(xn)) {
          RowMat<Real> dcols = CMatMap<Real>(wn->value.data(), O, K).transpose() * dY;
          for (int c = 0; c < C; ++c) {
            for (int ki = 0; ki < k; ++ki) {
              for (int kj = 0; kj < k; ++kj) {
                const Real* row = dcols.data() + static_cast<std::size_t>((c * k + ki) * k + kj) * P;
                for (int oh = 0; oh < Ho; ++oh) {
                  const int ih = oh * stride - padding + ki;
                  if (ih < 0 || ih >= H) continue;
                  Real* dst = g + (static_cast<std::size_t>(c) * H + ih) * W;
                  for (int ow = 0; ow < Wo; ++ow) {
                    const int iw = ow * stride - padding + kj;
                    if (iw >= 0 && iw < W) dst[iw] += row[oh * Wo + ow];
                  }
                }
              }
            }
          }
        }
      });
}

template <typename Real>
Var<Real> linear(const Var<Real>& x, const Var<Real>& weight, const Var<Real>& bias) {
  require_shape(x, 2, "linear");
  require_shape(weight, 2, "linear weight");
  const int n = x.dim(0), in = x.dim(1), outd = weight.dim(0);
  if (weight.dim(1) != in) {
    throw ShapeError("linear: weight " + shape_str(weight.shape()) + " vs input " +
                     shape_str(x.shape()));
  }
  if (bias.defined() && bias.size() != static_cast<std::size_t>(outd)) {
    throw ShapeError("linear: bias size");
  }
  Buffer<Real> out(static_cast<std::size_t>(n) * outd);
  MatMap<Real> Y(out.data(), n, outd);
  Y.noalias() = CMatMap<Real>(x.value().data(), n, in) *
                CMatMap<Real>(weight.value().data(), outd, in).transpose();
  if (bias.defined()) {
    auto bv = bias.value();
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < outd; ++c) Y(r, c) += bv[c];
    }
  }
  Node<Real>* xn = x.node();
  Node<Real>* wn = weight.node();
  Node<Real>* bn = bias.defined() ? bias.node() : nullptr;
  return make_node<Real>(
      {n, outd}, std::move(out), {&x, &weight, bias.defined() ? &bias : nullptr},
      [=](Node<Real>& self) {
        CMatMap<Real> dY(self.grad.data(), n, outd);
        if (Real* g = grad_of(xn)) {
          MatMap<Real>(g, n, in).noalias() += dY * CMatMap<Real>(wn->value.data(), outd, in);
        }
        if (Real* g = grad_of(wn)) {
          MatMap<Real>(g, outd, in).noalias() += dY.transpose() * CMatMap<Real>(xn->value.data(), n, in);
        }
        if (Real* g = grad_of(bn)) {
          for (int c = 0; c < outd; ++c) g[c] += dY.col(c).sum();
        }
      });
}

namespace {

// Shared normalization kernel: `rows` independent groups of `len` elements;
// element e of row r uses affine index channel_of(r, e).
template <typename Real, typename ChannelOf>
Var<Real> normalize_rows(const Var<Real>& x, const Var<Real>& gamma, const Var<Real>& beta,
                         int rows, int len, Real eps, ChannelOf channel_of) {
  auto xv = x.value();
  auto gv = gamma.value();
  auto bv = beta.value();
  auto xhat = std::make_shared<Buffer<Real>>(xv.size());
  auto rstd = std::make_shared<Buffer<Real>>(rows);
  Buffer<Real> out(xv.size());
  for (int r = 0; r < rows; ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * len;
    double mean = 0;
    for (int e = 0; e < len; ++e) mean += xv[base + e];
    mean /= len;
    double var = 0;
    for (int e = 0; e < len; ++e) {
      const double d = xv[base + e] - mean;
      var += d * d;
    }
    var /= len;
    const Real rs = Real(1.0 / std::sqrt(var + eps));
    (*rstd)[r] = rs;
    for (int e = 0; e < len; ++e) {
      const Real h = (xv[base + e] - Real(mean)) * rs;
      (*xhat)[base + e] = h;
      const int c = channel_of(r, e);
      out[base + e] = h * gv[c] + bv[c];
    }
  }
  Node<Real>* xn = x.node();
  Node<Real>* gn = gamma.node();
  Node<Real>* bn = beta.node();
  return make_node<Real>(x.shape(), std::move(out), {&x, &gamma, &beta}, [=](Node<Real>& self) {
    Real* gx = grad_of(xn);
    Real* gg = grad_of(gn);
    Real* gb = grad_of(bn);
    const auto& gamma_v = gn->value;
    for (int r = 0; r < rows; ++r) {
      const std::size_t base = static_cast<std::size_t>(r) * len;
      double sum_d = 0, sum_dx = 0;
      for (int e = 0; e < len; ++e) {
        const int c = channel_of(r, e);
        const Real dy = self.grad[base + e];
        const Real h = (*xhat)[base + e];
        if (gg) gg[c] += dy * h;
        if (gb) gb[c] += dy;
        const double dh = static_cast<double>(dy) * gamma_v[c];
        sum_d += dh;
        sum_dx += dh * h;
      }
      if (!gx) continue;
      const double md = sum_d / len, mdx = sum_dx / len;
      for (int e = 0; e < len; ++e) {
        const int c = channel_of(r, e);
        const double dh = static_cast<double>(self.grad[base + e]) * gamma_v[c];
        gx[base + e] += Real((*rstd)[r] * (dh - md - (*xhat)[base + e] * mdx));
      }
    }
  });
}

}  // namespace

template <typename Real>
Var<Real> group_norm(const Var<Real>& x, const Var<Real>& gamma, const Var<Real>& beta, int groups,
                     Real eps) {
  require_shape(x, 4, "group_norm");
  const int C = x.dim(1);
  if (groups <= 0 || C % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
  if (gamma.size() != static_cast<std::size_t>(C) || beta.size() != static_cast<std::size_t>(C)) {
    throw ShapeError("group_norm: affine size");
  }
  const int plane = x.dim(2) * x.dim(3);
  const int per_group = C / groups;
  const int len = per_group * plane;
  return normalize_rows(x, gamma, beta, groups, len, eps,
                        [=](int r, int e) { return r * per_group + e / plane; });
}

template <typename Real>
Var<Real> layer_norm(const Var<Real>& x, const Var<Real>& gamma, const Var<Real>& beta, Real eps) {
  require_shape(x, 2, "layer_norm");
  const int d = x.dim(1);
  if (gamma.size() != static_cast<std::size_t>(d) || beta.size() != static_cast<std::size_t>(d)) {
    throw ShapeError("layer_norm: affine size");
  }
  return normalize_rows(x, gamma, beta, x.dim(0), d, eps, [](int, int e) { return e; });
}

template <typename Real>
Var<Real> attention(const Var<Real>& q, const Var<Real>& k, const Var<Real>& v, int heads,
                    std::vector<Real>* probs) {
  require_shape(q, 2, "attention q");
  require_shape(k, 2, "attention k");
  require_shape(v, 2, "attention v");
  const int nq = q.dim(0), nk = k.dim(0), d = q.dim(1);
  if (k.dim(1) != d || v.dim(1) != d || v.dim(0) != nk) {
    throw ShapeError("attention: q " + shape_str(q.shape()) + " k " + shape_str(k.shape()) +
                     " v " + shape_str(v.shape()));
  }
  if (heads <= 0 || d % heads != 0) throw ShapeError("attention: width not divisible by heads");
  const int dh = d / heads;
  const Real scl = Real(1) / std::sqrt(Real(dh));

  CMatMap<Real> Q(q.value().data(), nq, d), K(k.value().data(), nk, d), V(v.value().data(), nk, d);
  auto P = std::make_shared<std::vector<RowMat<Real>>>(heads);
  Buffer<Real> out(static_cast<std::size_t>(nq) * d);
  MatMap<Real> O(out.data(), nq, d);
  for (int h = 0; h < heads; ++h) {
    RowMat<Real> S = (Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose()) * scl;
    for (int r = 0; r < nq; ++r) {
      const Real m = S.row(r).maxCoeff();
      S.row(r) = (S.row(r).array() - m).exp();
      S.row(r) /= S.row(r).sum();
    }
    O.middleCols(h * dh, dh).noalias() = S * V.middleCols(h * dh, dh);
    (*P)[h] = std::move(S);
  }
  if (probs) {
    probs->clear();
    for (const auto& m : *P) probs->insert(probs->end(), m.data(), m.data() + m.size());
  }

  Node<Real>* qn = q.node();
  Node<Real>* kn = k.node();
  Node<Real>* vn = v.node();
  return make_node<Real>({nq, d}, std::move(out), {&q, &k, &v}, [=](Node<Real>& self) {
    CMatMap<Real> dO(self.grad.data(), nq, d);
    CMatMap<Real> Qv(qn->value.data(), nq, d), Kv(kn->value.data(), nk, d), Vv(vn->value.data(), nk, d);
    Real* gq = grad_of(qn);
    Real* gk = grad_of(kn);
    Real* gv = grad_of(vn);
    for (int h = 0; h < heads; ++h) {
      const RowMat<Real>& Ph = (*P)[h];
      auto dOh = dO.middleCols(h * dh, dh);
      if (gv) MatMap<Real>(gv, nk, d).middleCols(h * dh, dh).noalias() += Ph.transpose() * dOh;
      if (!gq && !gk) continue;
      RowMat<Real> dP = dOh * Vv.middleCols(h * dh, dh).transpose();
      RowMat<Real> dS(nq, nk);
      for (int r = 0; r < nq; ++r) {
        const Real dot = (dP.row(r).array() * Ph.row(r).array()).sum();
        dS.row(r) = Ph.row(r).array() * (dP.row(r).array() - dot);
      }
      dS *= scl;
      if (gq) MatMap<Real>(gq, nq, d).middleCols(h * dh, dh).noalias() += dS * Kv.middleCols(h * dh, dh);
      if (gk) {
        MatMap<Real>(gk, nk, d).middleCols(h * dh, dh).noalias() +=
            dS.transpose() * Qv.middleCols(h * dh, dh);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// layout

template <typename Real>
Var<Real> concat_channels(const Var<Real>& a, const Var<Real>& b) {
  require_shape(a, 4, "concat_channels");
  require_shape(b, 4, "concat_channels");
  if (a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Buffer<Real> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.value().begin(), a.value().end());
  out.insert(out.end(), b.value().begin(), b.value().end());
  Node<Real>* an = a.node();
  Node<Real>* bn = b.node();
  const std::size_t na = a.size();
  return make_node<Real>({1, a.dim(1) + b.dim(1), a.dim(2), a.dim(3)}, std::move(out), {&a, &b},
                         [an, bn, na](Node<Real>& self) {
                           if (Real* g = grad_of(an)) {
                             for (std::size_t i = 0; i < na; ++i) g[i] += self.grad[i];
                           }
                           if (Real* g = grad_of(bn)) {
                             for (std::size_t i = na; i < self.grad.size(); ++i) g[i - na] += self.grad[i];
                           }
                         });
}

template <typename Real>
Var<Real> concat_rows(const Var<Real>& a, const Var<Real>& b) {
  require_shape(a, 2, "concat_rows");
  require_shape(b, 2, "concat_rows");
  if (a.dim(1) != b.dim(1)) throw ShapeError("concat_rows: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Buffer<Real> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.value().begin(), a.value().end());
  out.insert(out.end(), b.value().begin(), b.value().end());
  Node<Real>* an = a.node();
  Node<Real>* bn = b.node();
  const std::size_t na = a.size();
  return make_node<Real>({a.dim(0) + b.dim(0), a.dim(1)}, std::move(out), {&a, &b}, [an, bn, na](Node<Real>& self) {
    if (Real* g = grad_of(an)) {
      for (std::size_t i = 0; i < na; ++i) g[i] += self.grad[i];
    }
    if (Real* g = grad_of(bn)) {
      for (std::size_t i = na; i < self.grad.size(); ++i) g[i - na] += self.grad[i];
    }
  });
}

template <typename Real>
Var<Real> slice_channels(const Var<Real>& x, int begin, int end) {
  require_shape(x, 4, "slice_channels");
  if (begin < 0 || end > x.dim(1) || begin >= end) throw ShapeError("slice_channels: bad range");
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Buffer<Real> out(x.value().begin() + begin * plane, x.value().begin() + end * plane);
  Node<Real>* xn = x.node();
  const std::size_t offset = begin * plane;
  return make_node<Real>({1, end - begin, x.dim(2), x.dim(3)}, std::move(out), {&x},
                         [xn, offset](Node<Real>& self) {
                           if (Real* g = grad_of(xn)) {
                             for (std::size_t i = 0; i < self.grad.size(); ++i) g[offset + i] += self.grad[i];
                           }
                         });
}

template <typename Real>
Var<Real> upsample_nearest2x(const Var<Real>& x) {
  require_shape(x, 4, "upsample_nearest2x");
  const int C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Buffer<Real> out(static_cast<std::size_t>(C) * 4 * H * W);
  auto xv = x.value();
  for (int c = 0; c < C; ++c) {
    for (int i = 0; i < 2 * H; ++i) {
      for (int j = 0; j < 2 * W; ++j) {
        out[(static_cast<std::size_t>(c) * 2 * H + i) * 2 * W + j] =
            xv[(static_cast<std::size_t>(c) * H + i / 2) * W + j / 2];
      }
    }
  }
  Node<Real>* xn = x.node();
  return make_node<Real>({1, C, 2 * H, 2 * W}, std::move(out), {&x}, [=](Node<Real>& self) {
    if (Real* g = grad_of(xn)) {
      for (int c = 0; c < C; ++c) {
        for (int i = 0; i < 2 * H; ++i) {
          for (int j = 0; j < 2 * W; ++j) {
            g[(static_cast<std::size_t>(c) * H + i / 2) * W + j / 2] +=
                self.grad[(static_cast<std::size_t>(c) * 2 * H + i) * 2 * W + j];
          }
        }
      }
    }
  });
}

template <typename Real>
Var<Real> avg_pool(const Var<Real>& x, int factor) {
  require_shape(x, 4, "avg_pool");
  const int C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (factor <= 0 || H % factor || W % factor) throw ShapeError("avg_pool: size not divisible");
  if (factor == 1) return x;
  const int Ho = H / factor, Wo = W / factor;
  const Real inv = Real(1) / Real(factor * factor);
  Buffer<Real> out(static_cast<std::size_t>(C) * Ho * Wo, Real(0));
  auto xv = x.value();
  for (int c = 0; c < C; ++c) {
    for (int i = 0; i < H; ++i) {
      for (int j = 0; j < W; ++j) {
        out[(static_cast<std::size_t>(c) * Ho + i / factor) * Wo + j / factor] +=
            xv[(static_cast<std::size_t>(c) * H + i) * W + j] * inv;
      }
    }
  }
  Node<Real>* xn = x.node();
  return make_node<Real>({1, C, Ho, Wo}, std::move(out), {&x}, [=](Node<Real>& self) {
    if (Real* g = grad_of(xn)) {
      for (int c = 0; c < C; ++c) {
        for (int i = 0; i < H; ++i) {
          for (int j = 0; j < W; ++j) {
            g[(static_cast<std::size_t>(c) * H + i) * W + j] +=
                self.grad[(static_cast<std::size_t>(c) * Ho + i / factor) * Wo + j / factor] * inv;
          }
        }
      }
    }
  });
}

template <typename Real>
Var<Real> to_tokens(const Var<Real>& x) {
  require_shape(x, 4, "to_tokens");
  const int C = x.dim(1), n = x.dim(2) * x.dim(3);
  Buffer<Real> out(static_cast<std::size_t>(C) * n);
  auto xv = x.value();
  for (int c = 0; c < C; ++c) {
    for (int t = 0; t < n; ++t) out[static_cast<std::size_t>(t) * C + c] = xv[static_cast<std::size_t>(c) * n + t];
  }
  Node<Real>* xn = x.node();
  return make_node<Real>({n, C}, std::move(out), {&x}, [=](Node<Real>& self) {
    if (Real* g = grad_of(xn)) {
      for (int c = 0; c < C; ++c) {
        for (int t = 0; t < n; ++t) g[static_cast<std::size_t>(c) * n + t] += self.grad[static_cast<std::size_t>(t) * C + c];
      }
    }
  });
}

template <typename Real>
Var<Real> from_tokens(const Var<Real>& t, int height, int width) {
  require_shape(t, 2, "from_tokens");
  const int n = t.dim(0), C = t.dim(1);
  if (n != height * width) throw ShapeError("from_tokens: token count does not match grid");
  Buffer<Real> out(static_cast<std::size_t>(C) * n);
  auto tv = t.value();
  for (int c = 0; c < C; ++c) {
    for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(c) * n + i] = tv[static_cast<std::size_t>(i) * C + c];
  }
  Node<Real>* tn = t.node();
  return make_node<Real>({1, C, height, width}, std::move(out), {&t}, [=](Node<Real>& self) {
    if (Real* g = grad_of(tn)) {
      for (int c = 0; c < C; ++c) {
        for (int i = 0; i < n; ++i) g[static_cast<std::size_t>(i) * C + c] += self.grad[static_cast<std::size_t>(c) * n + i];
      }
    }
  });
}

template <typename Real>
Var<Real> reshape(const Var<Real>& x, Shape shape) {
  if (numel(shape) != x.size()) throw ShapeError("reshape: element count mismatch");
  Buffer<Real> out(x.value().begin(), x.value().end());
  Node<Real>* xn = x.node();
  return make_node<Real>(std::move(shape), std::move(out), {&x}, [xn](Node<Real>& self) {
    if (Real* g = grad_of(xn)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// reductions

template <typename Real>
Var<Real> mse_loss(const Var<Real>& prediction, const Var<Real>& target) {
  if (prediction.shape() != target.shape()) {
    throw ShapeError("mse_loss: " + shape_str(prediction.shape()) + " vs " +
                     shape_str(target.shape()));
  }
  auto a = prediction.value();
  auto b = target.value();
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  const Real n = Real(a.size());
  Node<Real>* an = prediction.node();
  Node<Real>* bn = target.node();
  return make_node<Real>({1}, {Real(acc / a.size())}, {&prediction, &target},
                         [an, bn, n](Node<Real>& self) {
                           const Real g0 = self.grad[0] * Real(2) / n;
                           Real* ga = grad_of(an);
                           Real* gb = grad_of(bn);
                           for (std::size_t i = 0; i < an->value.size(); ++i) {
                             const Real d = an->value[i] - bn->value[i];
                             if (ga) ga[i] += g0 * d;
                             if (gb) gb[i] -= g0 * d;
                           }
                         });
}

template <typename Real>
Var<Real> weighted_sum(const Var<Real>& x, std::span<const Real> weights) {
  if (weights.size() != x.size()) throw ShapeError("weighted_sum: weight count");
  auto xv = x.value();
  double acc = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) acc += static_cast<double>(xv[i]) * weights[i];
  Buffer<Real> w(weights.begin(), weights.end());
  Node<Real>* xn = x.node();
  return make_node<Real>({1}, {Real(acc)}, {&x}, [xn, w = std::move(w)](Node<Real>& self) {
    if (Real* g = grad_of(xn)) {
      for (std::size_t i = 0; i < w.size(); ++i) g[i] += self.grad[0] * w[i];
    }
  });
}

template <typename Real>
Var<Real> uniform_param(Shape shape, int fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<Real> values(numel(shape));
  for (auto& v : values) v = Real(dist(rng));
  return Var<Real>::parameter(std::move(shape), std::move(values));
}

template <typename Real>
Var<Real> filled_param(Shape shape, Real value) {
  std::vector<Real> values(numel(shape), value);
  return Var<Real>::parameter(std::move(shape), std::move(values));
}

#define LATENTSEG_INSTANTIATE(R)                                                               \
  template class Var<R>;                                                                       \
  template Var<R> add(const Var<R>&, const Var<R>&);                                           \
  template Var<R> scale(const Var<R>&, R);                                                     \
  template Var<R> silu(const Var<R>&);                                                         \
  template Var<R> gelu(const Var<R>&);                                                         \
  template Var<R> tanh(const Var<R>&);                                                         \
  template Var<R> add_channel_bias(const Var<R>&, const Var<R>&);                              \
  template Var<R> conv2d(const Var<R>&, const Var<R>&, const Var<R>&, int, int);               \
  template Var<R> linear(const Var<R>&, const Var<R>&, const Var<R>&);                         \
  template Var<R> group_norm(const Var<R>&, const Var<R>&, const Var<R>&, int, R);             \
  template Var<R> layer_norm(const Var<R>&, const Var<R>&, const Var<R>&, R);                  \
  template Var<R> attention(const Var<R>&, const Var<R>&, const Var<R>&, int, std::vector<R>*); \
  template Var<R> concat_channels(const Var<R>&, const Var<R>&);                               \
  template Var<R> concat_rows(const Var<R>&, const Var<R>&);                                   \
  template Var<R> slice_channels(const Var<R>&, int, int);                                     \
  template Var<R> upsample_nearest2x(const Var<R>&);                                           \
  template Var<R> avg_pool(const Var<R>&, int);                                                \
  template Var<R> to_tokens(const Var<R>&);                                                    \
  template Var<R> from_tokens(const Var<R>&, int, int);                                        \
  template Var<R> reshape(const Var<R>&, Shape);                                               \
  template Var<R> mse_loss(const Var<R>&, const Var<R>&);                                      \
  template Var<R> weighted_sum(const Var<R>&, std::span<const R>);                             \
  template Var<R> uniform_param(Shape, int, std::mt19937_64&);                                 \
  template Var<R> filled_param(Shape, R);

LATENTSEG_INSTANTIATE(float)
LATENTSEG_INSTANTIATE(double)

#undef LATENTSEG_INSTANTIATE

}  // namespace latentseg::nn
