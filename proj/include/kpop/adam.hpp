#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "kpop/tensor.hpp"

namespace kpop::nn {

struct AdamState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::int64_t step_count = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  // Moments sized to match params, all zero.
  static AdamState init(std::span<const Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                        double epsilon = 1e-8);
};

/// One bias-corrected Adam update, in place. Every parameter must carry a
/// gradient (UsageError otherwise); gradients are left untouched.
void adam_step(std::span<Tensor> params, AdamState& state);

void zero_grads(std::span<Tensor> params);

}  // namespace kpop::nn
