#pragma once

#include <vector>

#include "mindloop/checkpoint.hpp"

namespace mindloop {

// Adam over leaf parameters. step() reads each parameter's grad, so call it
// after backward and before Tape::clear().
class Adam {
 public:
  Adam(NamedTensors params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step();
  double learning_rate() const { return lr_; }

 private:
  NamedTensors params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long steps_ = 0;
};

void set_trainable(const NamedTensors& params, bool on);

}  // namespace mindloop
