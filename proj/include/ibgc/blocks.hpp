#pragma once

// Invertible building blocks with exact inverses and analytic log-Jacobian
// contributions.

#include <memory>
#include <string>
#include <vector>

#include "ibgc/rng.hpp"
#include "ibgc/tensor.hpp"
#include "ibgc/transforms.hpp"

namespace ibgc {

/// A named model tensor. Buffers (trainable = false) are frozen but still
/// serialized, e.g. the orthogonal mixing matrices.
struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;
  bool decay = true;
};

/// Output of one block application. logdet has shape [N]; for the inverse
/// direction it is the negated forward contribution.
struct FlowStep {
  Tensor y;
  Tensor logdet;
};

struct SubnetSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t hidden = 32;
  std::size_t kernel = 3;  // spatial kernel of the middle convolution
  std::size_t stride = 1;
};

/// Predicts affine coefficients. Layout: 1x1 conv -> affine norm -> relu ->
/// kxk conv (strided for downsampling) -> norm -> relu -> 1x1 conv -> norm ->
/// relu -> 1x1 projection with bias. The projection starts at zero so that a
/// fresh coupling is the identity up to its global affine.
class Subnet {
 public:
  Subnet(const SubnetSpec& spec, Rng& rng);

  Tensor operator()(const Tensor& u) const;
  void collect(const std::string& prefix, std::vector<Parameter>& out) const;
  const SubnetSpec& spec() const { return spec_; }

 private:
  SubnetSpec spec_;
  Tensor conv_in_, norm1_scale_, norm1_bias_;
  Tensor conv_mid_, norm2_scale_, norm2_bias_;
  Tensor conv_out_, norm3_scale_, norm3_bias_;
  Tensor proj_, proj_bias_;
};

struct CouplingSpec {
  std::size_t channels = 0;  // block input channels
  std::size_t hidden = 32;
  std::size_t kernel = 3;
  double clamp = 2.0;      // alpha in s = exp(alpha * tanh(.))
  double s0 = 0.1;         // s_global = s0 * softplus(gamma)
  double gamma_init = 10.0;
};

class InvertibleBlock {
 public:
  virtual ~InvertibleBlock() = default;
  /// x is [N,C,H,W].
  virtual FlowStep apply(const Tensor& x, Direction dir) const = 0;
  /// Forward-direction output shape for an input of {C,H,W}.
  virtual std::array<std::size_t, 3> output_chw(std::array<std::size_t, 3> in) const = 0;
  virtual void collect(const std::string& prefix, std::vector<Parameter>& out) const = 0;
  virtual std::string kind() const = 0;
};

/// Split -> affine coupling -> concat -> global affine -> orthogonal mixing.
class CouplingBlock final : public InvertibleBlock {
 public:
  CouplingBlock(const CouplingSpec& spec, Rng& rng, std::uint64_t mixing_seed);

  FlowStep apply(const Tensor& x, Direction dir) const override;
  std::array<std::size_t, 3> output_chw(std::array<std::size_t, 3> in) const override { return in; }
  void collect(const std::string& prefix, std::vector<Parameter>& out) const override;
  std::string kind() const override { return "coupling"; }

  /// s_global = s0 * softplus(gamma), per channel.
  std::vector<double> global_scale() const;
  const CouplingSpec& spec() const { return spec_; }
  const OrthoMixing& mixing() const { return mixing_; }

 private:
  CouplingSpec spec_;
  Subnet subnet_;
  Tensor gamma_, t_global_;
  OrthoMixing mixing_;
};

/// Coupling that halves the spatial extent and quadruples channels. Both
/// halves pass through the checkerboard reordering; the subnet sees the
/// conditioning half at full resolution through a strided convolution.
///
/// With an even channel count the halves are channel halves. With an odd
/// count (e.g. grayscale input) the split is spatial: the top row of every
/// 2x2 patch conditions the bottom row, and the subnet sees the input with
/// the bottom rows zeroed.
class DownsamplingCouplingBlock final : public InvertibleBlock {
 public:
  DownsamplingCouplingBlock(const CouplingSpec& spec, Rng& rng, std::uint64_t mixing_seed);

  FlowStep apply(const Tensor& x, Direction dir) const override;
  std::array<std::size_t, 3> output_chw(std::array<std::size_t, 3> in) const override {
    return {in[0] * 4, in[1] / 2, in[2] / 2};
  }
  void collect(const std::string& prefix, std::vector<Parameter>& out) const override;
  std::string kind() const override { return "down"; }

  bool spatial_split() const { return spec_.channels % 2 == 1; }
  std::vector<double> global_scale() const;
  const CouplingSpec& spec() const { return spec_; }

 private:
  Tensor subnet_input_forward(const Tensor& x) const;
  Tensor subnet_input_inverse(const Tensor& v1) const;

  CouplingSpec spec_;
  Subnet subnet_;
  Tensor gamma_, t_global_;
  OrthoMixing mixing_;
  std::vector<std::size_t> first_, second_, merge_;  // channel index sets on the reordered tensor
};

/// Haar wavelet downsampling; no parameters, log-det 0.
class HaarBlock final : public InvertibleBlock {
 public:
  FlowStep apply(const Tensor& x, Direction dir) const override;
  std::array<std::size_t, 3> output_chw(std::array<std::size_t, 3> in) const override {
    return {in[0] * 4, in[1] / 2, in[2] / 2};
  }
  void collect(const std::string&, std::vector<Parameter>&) const override {}
  std::string kind() const override { return "haar"; }
};

/// Broadcasts a one-element tensor to shape [n] (differentiable).
Tensor broadcast_scalar(const Tensor& s, std::size_t n);
/// Sums every axis but the first: [N,...] -> [N].
Tensor sum_per_sample(const Tensor& x);

}  // namespace ibgc
