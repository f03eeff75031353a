#pragma once

// Information-bottleneck objective L_X + beta * L_Y and its helpers.

#include <cstddef>
#include <limits>
#include <vector>

#include "ibgc/rng.hpp"
#include "ibgc/tensor.hpp"

namespace ibgc {

/// beta = infinity trains on L_Y alone.
inline constexpr double kInfiniteBeta = std::numeric_limits<double>::infinity();

/// Batch mean of -logdet - logsumexp_y(-1/2 |z - mu_y|^2 + w_y): the mixture
/// negative log-likelihood without the (D/2) ln(2 pi) constant.
Tensor loss_x(const Tensor& z, const Tensor& logdet, const Tensor& means, const Tensor& log_priors);

/// Batch mean cross-entropy -sum_y t_y log softmax_y(-1/2 |z - mu_y|^2 + w_y).
/// targets is [N, M], each row a probability vector.
Tensor loss_y(const Tensor& z, const Tensor& targets, const Tensor& means, const Tensor& log_priors);

/// l_x + beta * l_y; beta = 0 gives l_x, beta = infinity gives l_y.
Tensor ib_total(const Tensor& l_x, const Tensor& l_y, double beta);

struct LossTerms {
  Tensor l_x;    // absent (empty) when beta = infinity
  Tensor l_y;    // absent (empty) when beta = 0
  Tensor total;
};

LossTerms ib_loss(const Tensor& z, const Tensor& logdet, const Tensor& targets, const Tensor& means,
                  const Tensor& log_priors, double beta);

void check_beta(double beta);

/// -marginal / (D ln 2); quantized data adds log2(256) = 8.
double bits_per_dim(double marginal_nats, std::size_t dims, bool quantized);

/// x + u, u ~ U[0, amplitude) elementwise.
Tensor dequantize(const Tensor& x, double amplitude, Rng& rng);

/// (1 - alpha) onehot(y) + alpha / M.
std::vector<double> smooth_labels(std::size_t y, std::size_t classes, double alpha);
/// [N, M] smoothed targets for a label list.
Tensor smoothed_targets(const std::vector<std::size_t>& labels, std::size_t classes, double alpha);

}  // namespace ibgc
