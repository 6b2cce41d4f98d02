#pragma once

// Central finite-difference gradient checking for double-precision graphs.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "latentseg/nn.hpp"

namespace latentseg::testing {

struct GradCheckResult {
  double max_rel_error = 0;
  std::string worst;
  int checked = 0;
};

inline double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

// Checks `per_param` randomly chosen coordinates of every listed parameter
// (all coordinates when per_param <= 0). `loss` must rebuild the graph from
// the current parameter values on every call.
inline GradCheckResult gradcheck(const nn::ParamList<double>& params,
                                 const std::function<nn::Var<double>()>& loss, int per_param,
                                 std::mt19937_64& rng, double step = 1e-5) {
  for (const auto& p : params) {
    nn::Var<double> v = p.var;
    v.zero_grad();
  }
  loss().backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) analytic.emplace_back(p.var.grad().begin(), p.var.grad().end());

  GradCheckResult result;
  for (std::size_t k = 0; k < params.size(); ++k) {
    nn::Var<double> v = params[k].var;
    std::vector<std::size_t> coords;
    if (per_param <= 0 || static_cast<std::size_t>(per_param) >= v.size()) {
      for (std::size_t i = 0; i < v.size(); ++i) coords.push_back(i);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, v.size() - 1);
      for (int i = 0; i < per_param; ++i) coords.push_back(pick(rng));
    }
    for (std::size_t i : coords) {
      const double saved = v.value()[i];
      v.mutable_value()[i] = saved + step;
      const double up = loss().value()[0];
      v.mutable_value()[i] = saved - step;
      const double down = loss().value()[0];
      v.mutable_value()[i] = saved;
      const double numeric = (up - down) / (2 * step);
      const double err = rel_error(analytic[k][i], numeric);
      ++result.checked;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst = params[k].name + "[" + std::to_string(i) + "] analytic=" +
                       std::to_string(analytic[k][i]) + " numeric=" + std::to_string(numeric);
      }
    }
  }
  return result;
}

// Checks `count` coordinates drawn uniformly over all parameter entries.
inline GradCheckResult gradcheck_subset(const nn::ParamList<double>& params,
                                        const std::function<nn::Var<double>()>& loss, int count,
                                        std::mt19937_64& rng, double step = 1e-5) {
  for (const auto& p : params) {
    nn::Var<double> v = p.var;
    v.zero_grad();
  }
  loss().backward();
  std::size_t total = 0;
  for (const auto& p : params) total += p.var.size();
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  GradCheckResult result;
  for (int n = 0; n < count; ++n) {
    std::size_t flat = pick(rng), k = 0;
    while (flat >= params[k].var.size()) flat -= params[k].var.size(), ++k;
    nn::Var<double> v = params[k].var;
    const double analytic = v.grad()[flat];
    const double saved = v.value()[flat];
    v.mutable_value()[flat] = saved + step;
    const double up = loss().value()[0];
    v.mutable_value()[flat] = saved - step;
    const double down = loss().value()[0];
    v.mutable_value()[flat] = saved;
    const double numeric = (up - down) / (2 * step);
    const double err = rel_error(analytic, numeric);
    ++result.checked;
    if (err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst = params[k].name + "[" + std::to_string(flat) + "] analytic=" + std::to_string(analytic) +
                     " numeric=" + std::to_string(numeric);
    }
  }
  return result;
}

inline std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> out(n);
  for (auto& v : out) v = dist(rng);
  return out;
}

}  // namespace latentseg::testing
