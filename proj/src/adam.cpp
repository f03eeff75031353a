#include "ibgc/adam.hpp"

#include <cmath>

#include "ibgc/error.hpp"

namespace ibgc {

AdamState make_adam_state(std::size_t n) {
  AdamState s;
  s.m.assign(n, 0.0);
  s.v.assign(n, 0.0);
  return s;
}

void adam_step(std::span<double> w, std::span<const double> grad, AdamState& state, double lr) {
  if (w.size() != grad.size() || w.size() != state.m.size()) throw usage_error("adam_step: size mismatch");
  for (double g : grad) {
    if (!std::isfinite(g)) throw numeric_error("adam_step: non-finite gradient");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < w.size(); ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    w[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
  }
}

}  // namespace ibgc
