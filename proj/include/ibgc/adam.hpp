#pragma once

// Adam with bias correction over a flat parameter vector.

#include <cstddef>
#include <span>
#include <vector>

namespace ibgc {

struct AdamState {
  std::vector<double> m, v;
  std::size_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

AdamState make_adam_state(std::size_t n);

/// m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2;
/// w <- w - lr * mhat / (sqrt(vhat) + eps). Non-finite gradients throw.
void adam_step(std::span<double> w, std::span<const double> grad, AdamState& state, double lr);

}  // namespace ibgc
