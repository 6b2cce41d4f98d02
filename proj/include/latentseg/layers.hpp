#pragma once

#include <random>
#include <string>

#include "latentseg/nn.hpp"

namespace latentseg::nn {

template <typename Real>
struct Conv2d {
  Var<Real> weight;
  Var<Real> bias;
  int stride = 1;
  int padding = 0;

  Conv2d() = default;
  Conv2d(int in, int out, int kernel, int stride_, int padding_, std::mt19937_64& rng)
      : weight(uniform_param<Real>({out, in, kernel, kernel}, in * kernel * kernel, rng)),
        bias(uniform_param<Real>({out}, in * kernel * kernel, rng)),
        stride(stride_),
        padding(padding_) {}

  Var<Real> operator()(const Var<Real>& x) const { return conv2d(x, weight, bias, stride, padding); }

  void zero_init() {
    for (auto& v : weight.mutable_value()) v = Real(0);
    for (auto& v : bias.mutable_value()) v = Real(0);
  }

  void collect(const std::string& prefix, ParamList<Real>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <typename Real>
struct Linear {
  Var<Real> weight;
  Var<Real> bias;

  Linear() = default;
  Linear(int in, int out, std::mt19937_64& rng)
      : weight(uniform_param<Real>({out, in}, in, rng)), bias(uniform_param<Real>({out}, in, rng)) {}

  Var<Real> operator()(const Var<Real>& x) const { return linear(x, weight, bias); }

  int in_features() const { return weight.dim(1); }
  int out_features() const { return weight.dim(0); }

  void zero_init() {
    for (auto& v : weight.mutable_value()) v = Real(0);
    for (auto& v : bias.mutable_value()) v = Real(0);
  }

  void collect(const std::string& prefix, ParamList<Real>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <typename Real>
struct GroupNorm {
  Var<Real> gamma;
  Var<Real> beta;
  int groups = 1;

  GroupNorm() = default;
  GroupNorm(int channels, int groups_)
      : gamma(filled_param<Real>({channels}, Real(1))),
        beta(filled_param<Real>({channels}, Real(0))),
        groups(groups_) {}

  Var<Real> operator()(const Var<Real>& x) const { return group_norm(x, gamma, beta, groups); }

  void collect(const std::string& prefix, ParamList<Real>& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
};

template <typename Real>
struct LayerNorm {
  Var<Real> gamma;
  Var<Real> beta;

  LayerNorm() = default;
  explicit LayerNorm(int width)
      : gamma(filled_param<Real>({width}, Real(1))), beta(filled_param<Real>({width}, Real(0))) {}

  Var<Real> operator()(const Var<Real>& x) const { return layer_norm(x, gamma, beta); }

  void collect(const std::string& prefix, ParamList<Real>& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
};

// Overwrites every parameter with small random values. Used by gradient
// checks so zero-initialized layers do not mask upstream gradients.
template <typename Real>
void randomize_params(const ParamList<Real>& params, std::mt19937_64& rng, double scale = 0.2) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  for (const auto& p : params) {
    Var<Real> v = p.var;
    for (auto& x : v.mutable_value()) x = Real(dist(rng));
  }
}

}  // namespace latentseg::nn
