#pragma once

#include <string>
#include <vector>

#include "latentseg/nn.hpp"

namespace latentseg::nn {

// AdamW with decoupled weight decay and per-group learning rates.
template <typename Real>
class AdamW {
 public:
  struct Hyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;
  };

  struct Slot {
    std::string name;
    Var<Real> param;
    std::size_t group = 0;
    std::vector<Real> m;
    std::vector<Real> v;
  };

  // Returns the group index.
  std::size_t add_group(const ParamList<Real>& params, Hyper hyper);

  void zero_grad();
  void step();

  long steps_taken() const { return steps_; }
  void set_steps_taken(long steps) { steps_ = steps; }
  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }
  const Hyper& group(std::size_t i) const { return groups_.at(i); }
  void set_lr(std::size_t i, double lr) { groups_.at(i).lr = lr; }

 private:
  std::vector<Hyper> groups_;
  std::vector<Slot> slots_;
  long steps_ = 0;
};

// Global L2 norm of the gradients of all params.
template <typename Real>
double global_grad_norm(const ParamList<Real>& params);

// Scales gradients so the global norm is at most max_norm. Returns the
// pre-clip norm.
template <typename Real>
double clip_grad_norm(const ParamList<Real>& params, double max_norm);

}  // namespace latentseg::nn
