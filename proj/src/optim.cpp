#include "latentseg/optim.hpp"

#include <cmath>

namespace latentseg::nn {

template <typename Real>
std::size_t AdamW<Real>::add_group(const ParamList<Real>& params, Hyper hyper) {
  const std::size_t index = groups_.size();
  groups_.push_back(hyper);
  for (const auto& p : params) {
    slots_.push_back(Slot{p.name, p.var, index, std::vector<Real>(p.var.size(), Real(0)),
                          std::vector<Real>(p.var.size(), Real(0))});
  }
  return index;
}

template <typename Real>
void AdamW<Real>::zero_grad() {
  for (auto& s : slots_) s.param.zero_grad();
}

template <typename Real>
void AdamW<Real>::step() {
  ++steps_;
  for (auto& s : slots_) {
    const Hyper& h = groups_[s.group];
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(steps_));
    auto value = s.param.mutable_value();
    auto grad = s.param.mutable_grad();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i];
      const double m = h.beta1 * s.m[i] + (1.0 - h.beta1) * g;
      const double v = h.beta2 * s.v[i] + (1.0 - h.beta2) * g * g;
      s.m[i] = Real(m);
      s.v[i] = Real(v);
      double p = value[i];
      p -= h.lr * h.weight_decay * p;
      p -= h.lr * (m / bc1) / (std::sqrt(v / bc2) + h.eps);
      value[i] = Real(p);
    }
  }
}

template <typename Real>
double global_grad_norm(const ParamList<Real>& params) {
  double acc = 0;
  for (const auto& p : params) {
    for (Real g : p.var.grad()) acc += static_cast<double>(g) * g;
  }
  return std::sqrt(acc);
}

template <typename Real>
double clip_grad_norm(const ParamList<Real>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (const auto& p : params) {
      Var<Real> v = p.var;
      for (auto& g : v.mutable_grad()) g = Real(g * factor);
    }
  }
  return norm;
}

template class AdamW<float>;
template class AdamW<double>;
template double global_grad_norm(const ParamList<float>&);
template double global_grad_norm(const ParamList<double>&);
template double clip_grad_norm(const ParamList<float>&, double);
template double clip_grad_norm(const ParamList<double>&, double);

}  // namespace latentseg::nn
