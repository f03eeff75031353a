#pragma once

// The invertible network with its class-conditional Gaussian-mixture latent
// head: encode/decode, class-conditional and marginal likelihoods, posterior.

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "ibgc/blocks.hpp"
#include "ibgc/tensor.hpp"

namespace ibgc {

/// Entry downsampling coupling with a 7x7 subnet conv and narrow hidden
/// width, Haar stage, two couplings, downsampling coupling, two couplings.
/// dct_pool is appended implicitly.
std::vector<std::string> default_layout();

struct ModelSpec {
  std::array<std::size_t, 3> input_chw{1, 16, 16};
  std::size_t classes = 4;
  /// Tokens "coupling[:kernel[:hidden]]", "down[:kernel[:hidden]]", "haar".
  std::vector<std::string> layout = default_layout();
  std::size_t hidden = 32;
  double clamp = 2.0;
  double s0 = 0.1;
  double gamma_init = 10.0;
  std::size_t rank = 8;  // prototypes K for the non-DC part of the means
  double mu_init = 3.0;  // expected norm of an initial class mean
  std::uint64_t seed = 0;
};

struct LayoutToken {
  std::string kind;
  std::size_t kernel = 3;
  std::size_t hidden = 0;  // 0: use the model default
};

LayoutToken parse_layout_token(const std::string& token);

/// mu_y = [mu_mean_y ; sum_k alpha_yk * prototype_k]. The first d_mean latent
/// coordinates are the DC coefficients from dct_pool.
class GmmHead {
 public:
  GmmHead(std::size_t classes, std::size_t d_mean, std::size_t d_rest, std::size_t rank, double mu_init, Rng& rng);

  /// [M, D], differentiable in the head parameters.
  Tensor means() const;
  /// [M]; exp sums to one.
  const Tensor& log_priors() const { return log_priors_; }
  void set_log_priors(const std::vector<double>& w);

  std::size_t classes() const { return classes_; }
  std::size_t dim() const { return d_mean_ + d_rest_; }
  std::size_t d_mean() const { return d_mean_; }
  std::size_t d_rest() const { return d_rest_; }
  std::size_t rank() const { return rank_; }

  const Tensor& mu_mean() const { return mu_mean_; }
  const Tensor& prototypes() const { return prototypes_; }
  const Tensor& alpha() const { return alpha_; }

  void collect(std::vector<Parameter>& out) const;

 private:
  std::size_t classes_, d_mean_, d_rest_, rank_;
  Tensor mu_mean_, prototypes_, alpha_, log_priors_;
};

struct Encoding {
  Tensor z;         // [N, D]
  Tensor logdet;    // [N]
  Tensor features;  // [N, C, h, w], the last feature map before dct_pool
};

class FlowModel {
 public:
  explicit FlowModel(const ModelSpec& spec);

  /// x is [N, C, H, W] with the configured image shape.
  Encoding encode(const Tensor& x) const;
  /// z is [N, D]; exact inverse of encode.
  Tensor decode(const Tensor& z) const;

  const ModelSpec& spec() const { return spec_; }
  std::size_t latent_dim() const { return head_->dim(); }
  std::size_t input_dim() const { return spec_.input_chw[0] * spec_.input_chw[1] * spec_.input_chw[2]; }
  std::array<std::size_t, 3> feature_chw() const { return feature_chw_; }

  const GmmHead& head() const { return *head_; }
  GmmHead& head() { return *head_; }

  std::size_t num_blocks() const { return blocks_.size(); }
  const InvertibleBlock& block(std::size_t i) const { return *blocks_.at(i); }

  /// Every tensor that defines the model, in a fixed order (block order, then
  /// head). Handles share storage with the model.
  std::vector<Parameter> parameters() const;

 private:
  ModelSpec spec_;
  std::vector<std::unique_ptr<InvertibleBlock>> blocks_;
  std::array<std::size_t, 3> feature_chw_{};
  std::unique_ptr<GmmHead> head_;
};

/// v[M] -> [n, M] (differentiable).
Tensor broadcast_rows(const Tensor& v, std::size_t n);

/// [N, M]: -1/2 |z - mu_y|^2 - D/2 ln(2 pi) + logdet.
Tensor class_log_likelihoods(const Tensor& z, const Tensor& logdet, const Tensor& means);
/// [N]: logsumexp_y(w_y + log p(z|y)) + logdet.
Tensor marginal_log_likelihood(const Tensor& z, const Tensor& logdet, const Tensor& means, const Tensor& log_priors);
/// [N, M]: log softmax_y(-1/2 |z - mu_y|^2 + w_y).
Tensor log_posterior(const Tensor& z, const Tensor& means, const Tensor& log_priors);

struct Prediction {
  std::vector<double> class_log_likelihoods;
  double marginal = 0.0;
  std::vector<double> posterior;
  std::size_t argmax = 0;
  double confidence = 0.0;
};

/// Evaluates a batch of images [N, C, H, W] in chunks of `chunk`.
std::vector<Prediction> predict(const FlowModel& model, const Tensor& x, std::size_t chunk = 200);
/// Same from precomputed latents.
std::vector<Prediction> predict_latent(const Tensor& z, const Tensor& logdet, const GmmHead& head);

}  // namespace ibgc
