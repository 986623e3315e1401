#pragma once

#include "pomnet/checkpoint.hpp"
#include "pomnet/params.hpp"

#include <vector>

namespace pomnet {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(ParamStore<float>& store, AdamConfig config = {});

  // One update from the gradients currently held by the store.
  void step(double lr);
  long long steps() const { return t_; }

  std::vector<NamedTensor> state() const;
  void load_state(const std::vector<NamedTensor>& tensors);

 private:
  ParamStore<float>* store_;
  AdamConfig config_;
  long long t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

// base * factor^(number of decay epochs <= epoch); epochs are 0-based.
double step_decay_lr(double base, const std::vector<int>& decay_epochs, double factor, int epoch);

}  // namespace pomnet
