#pragma once

#include <cmath>
#include <functional>
#include <random>

#include "ibgc/rng.hpp"
#include "ibgc/tensor.hpp"

namespace ibgc::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng = make_rng(seed, Stream::test);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = u(rng);
  return t;
}

/// Relative error |analytic - numeric| / max(|analytic|, |numeric|) of the
/// gradient of sum(r * f(x)) with respect to x, r a fixed random weight.
inline double gradient_error(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-6,
                             std::uint64_t seed = 99) {
  const Tensor probe = f(x.detach());
  const Tensor r = random_tensor(probe.shape(), seed);
  auto objective = [&](const Tensor& xx) {
    const Tensor y = f(xx);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += r[i] * y[i];
    return s;
  };
  std::vector<double> analytic;
  {
    Tape tape;
    const Tensor xv = tape.variable(x);
    const Tensor y = f(xv);
    tape.backward(y, r.data());
    analytic = xv.grad();
  }
  double diff = 0.0, na = 0.0, nn = 0.0;
  Tensor xp = x.detach();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = xp[i];
    xp.mutable_data()[i] = keep + h;
    const double up = objective(xp);
    xp.mutable_data()[i] = keep - h;
    const double down = objective(xp);
    xp.mutable_data()[i] = keep;
    const double numeric = (up - down) / (2.0 * h);
    diff += (analytic[i] - numeric) * (analytic[i] - numeric);
    na += analytic[i] * analytic[i];
    nn += numeric * numeric;
  }
  const double scale = std::max(std::sqrt(std::max(na, nn)), 1e-12);
  return std::sqrt(diff) / scale;
}

}  // namespace ibgc::testing
