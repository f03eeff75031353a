#include "ibgc/loss.hpp"

#include <cmath>

#include "ibgc/error.hpp"
#include "ibgc/model.hpp"

namespace ibgc {

namespace {

Tensor logits(const Tensor& z, const Tensor& means, const Tensor& log_priors) {
  if (z.rank() != 2 || means.rank() != 2 || z.dim(1) != means.dim(1) || log_priors.size() != means.dim(0)) {
    throw usage_error("loss: latent " + shape_str(z.shape()) + " does not match means " + shape_str(means.shape()));
  }
  return add(scale(pairwise_sq_dist(z, means), -0.5), broadcast_rows(log_priors, z.dim(0)));
}

}  // namespace

void check_beta(double beta) {
  if (std::isnan(beta) || beta < 0.0) throw usage_error("beta must be non-negative (or inf)");
}

Tensor loss_x(const Tensor& z, const Tensor& logdet, const Tensor& means, const Tensor& log_priors) {
  if (logdet.size() != z.dim(0)) throw usage_error("loss_x: logdet length does not match batch");
  const Tensor lse = reduce(logits(z, means, log_priors), Reduce::logsumexp, 1);
  return mean_all(neg(add(reshape(logdet, {z.dim(0)}), lse)));
}

Tensor loss_y(const Tensor& z, const Tensor& targets, const Tensor& means, const Tensor& log_priors) {
  if (targets.rank() != 2 || targets.dim(0) != z.dim(0) || targets.dim(1) != means.dim(0)) {
    throw usage_error("loss_y: targets " + shape_str(targets.shape()) + " do not match batch/classes");
  }
  const std::size_t m = targets.dim(1);
  for (std::size_t i = 0; i < targets.dim(0); ++i) {
    double total = 0.0;
    for (std::size_t y = 0; y < m; ++y) {
      const double t = targets[i * m + y];
      if (!(t >= 0.0)) throw usage_error("loss_y: targets must be non-negative");
      total += t;
    }
    if (std::abs(total - 1.0) > 1e-9) throw usage_error("loss_y: target rows must sum to one");
  }
  const Tensor lsm = reduce(logits(z, means, log_priors), Reduce::logsoftmax, 1);
  return scale(reduce(reduce(mul(targets, lsm), Reduce::sum, 1), Reduce::mean, 0), -1.0);
}

Tensor ib_total(const Tensor& l_x, const Tensor& l_y, double beta) {
  check_beta(beta);
  if (std::isinf(beta)) return l_y;
  if (beta == 0.0) return l_x;
  return add(l_x, scale(l_y, beta));
}

LossTerms ib_loss(const Tensor& z, const Tensor& logdet, const Tensor& targets, const Tensor& means,
                  const Tensor& log_priors, double beta) {
  check_beta(beta);
  LossTerms out;
  if (!std::isinf(beta)) out.l_x = loss_x(z, logdet, means, log_priors);
  if (beta != 0.0) out.l_y = loss_y(z, targets, means, log_priors);
  out.total = ib_total(out.l_x, out.l_y, beta);
  return out;
}

double bits_per_dim(double marginal_nats, std::size_t dims, bool quantized) {
  if (dims == 0) throw usage_error("bits_per_dim: dimension must be positive");
  const double bpd = -marginal_nats / (static_cast<double>(dims) * std::log(2.0));
  return quantized ? bpd + 8.0 : bpd;
}

Tensor dequantize(const Tensor& x, double amplitude, Rng& rng) {
  if (!(amplitude >= 0.0)) throw usage_error("dequantization amplitude must be non-negative");
  Tensor out = x.detach();
  if (amplitude == 0.0) return out;
  std::uniform_real_distribution<double> u(0.0, amplitude);
  for (double& v : out.mutable_data()) v += u(rng);
  return out;
}

std::vector<double> smooth_labels(std::size_t y, std::size_t classes, double alpha) {
  if (!(alpha >= 0.0 && alpha < 1.0)) throw usage_error("label smoothing must lie in [0, 1)");
  if (y >= classes) throw data_error("label " + std::to_string(y) + " out of range for " + std::to_string(classes) + " classes");
  std::vector<double> out(classes, alpha / static_cast<double>(classes));
  out[y] += 1.0 - alpha;
  return out;
}

Tensor smoothed_targets(const std::vector<std::size_t>& labels, std::size_t classes, double alpha) {
  Tensor out({labels.size(), classes});
  auto d = out.mutable_data();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = smooth_labels(labels[i], classes, alpha);
    std::copy(row.begin(), row.end(), d.begin() + static_cast<long>(i * classes));
  }
  return out;
}

}  // namespace ibgc
