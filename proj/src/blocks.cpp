#include "ibgc/blocks.hpp"

#include <cmath>
#include <numeric>

#include "ibgc/error.hpp"

namespace ibgc {

namespace {

Tensor he_kernel(std::size_t out, std::size_t in, std::size_t k, Rng& rng) {
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(in * k * k)));
  Tensor w({out, in, k, k});
  for (double& v : w.mutable_data()) v = normal(rng);
  return w;
}

Tensor global_log_scale(const Tensor& gamma, double s0, std::size_t pixels, std::size_t n) {
  const Tensor logs = log(scale(softplus(gamma), s0));
  return broadcast_scalar(scale(sum_all(logs), static_cast<double>(pixels)), n);
}

std::vector<double> global_scale_values(const Tensor& gamma, double s0) {
  std::vector<double> out;
  for (double g : gamma.data()) out.push_back(s0 * (g > 0 ? g + std::log1p(std::exp(-g)) : std::log1p(std::exp(g))));
  return out;
}

// Undoes y = x * s + t per channel (not differentiated).
Tensor undo_global_affine(const Tensor& y, const Tensor& gamma, const Tensor& t_global, double s0) {
  const auto s = global_scale_values(gamma, s0);
  Tensor inv_s({s.size()}), shift({s.size()});
  for (std::size_t c = 0; c < s.size(); ++c) {
    inv_s.mutable_data()[c] = 1.0 / s[c];
    shift.mutable_data()[c] = -t_global[c] / s[c];
  }
  return channel_affine(y, inv_s, shift);
}

void check_coefficients(const Tensor& st) {
  for (double v : st.data()) {
    if (!std::isfinite(v)) throw numeric_error("coupling subnet produced a non-finite coefficient");
  }
}

}  // namespace

Tensor broadcast_scalar(const Tensor& s, std::size_t n) {
  if (s.size() != 1) throw usage_error("broadcast_scalar expects one element");
  return gather(reshape(s, {1}), 0, std::vector<std::size_t>(n, 0));
}

Tensor sum_per_sample(const Tensor& x) {
  const std::size_t n = x.dim(0);
  return reduce(reshape(x, {n, x.size() / n}), Reduce::sum, 1);
}

// ---------------------------------------------------------------------------

Subnet::Subnet(const SubnetSpec& spec, Rng& rng) : spec_(spec) {
  if (spec.in_channels == 0 || spec.out_channels == 0 || spec.hidden == 0) throw usage_error("subnet with zero width");
  const std::size_t h = spec.hidden;
  conv_in_ = he_kernel(h, spec.in_channels, 1, rng);
  norm1_scale_ = Tensor({h}, 1.0);
  norm1_bias_ = Tensor({h}, 0.0);
  conv_mid_ = he_kernel(h, h, spec.kernel, rng);
  norm2_scale_ = Tensor({h}, 1.0);
  norm2_bias_ = Tensor({h}, 0.0);
  conv_out_ = he_kernel(h, h, 1, rng);
  norm3_scale_ = Tensor({h}, 1.0);
  norm3_bias_ = Tensor({h}, 0.0);
  proj_ = Tensor({spec.out_channels, h, 1, 1}, 0.0);
  proj_bias_ = Tensor({spec.out_channels}, 0.0);
}

Tensor Subnet::operator()(const Tensor& u) const {
  Tensor a = relu(channel_affine(conv2d(u, conv_in_, 1, 0), norm1_scale_, norm1_bias_));
  a = relu(channel_affine(conv2d(a, conv_mid_, spec_.stride, spec_.kernel / 2), norm2_scale_, norm2_bias_));
  a = relu(channel_affine(conv2d(a, conv_out_, 1, 0), norm3_scale_, norm3_bias_));
  return channel_affine(conv2d(a, proj_, 1, 0), Tensor(), proj_bias_);
}

void Subnet::collect(const std::string& prefix, std::vector<Parameter>& out) const {
  out.push_back({prefix + "conv_in", conv_in_, true, true});
  out.push_back({prefix + "norm1.scale", norm1_scale_, true, true});
  out.push_back({prefix + "norm1.bias", norm1_bias_, true, false});
  out.push_back({prefix + "conv_mid", conv_mid_, true, true});
  out.push_back({prefix + "norm2.scale", norm2_scale_, true, true});
  out.push_back({prefix + "norm2.bias", norm2_bias_, true, false});
  out.push_back({prefix + "conv_out", conv_out_, true, true});
  out.push_back({prefix + "norm3.scale", norm3_scale_, true, true});
  out.push_back({prefix + "norm3.bias", norm3_bias_, true, false});
  out.push_back({prefix + "proj", proj_, true, true});
  out.push_back({prefix + "proj.bias", proj_bias_, true, false});
}

// ---------------------------------------------------------------------------

CouplingBlock::CouplingBlock(const CouplingSpec& spec, Rng& rng, std::uint64_t mixing_seed)
    : spec_(spec),
      subnet_({spec.channels / 2, spec.channels, spec.hidden, spec.kernel, 1}, rng),
      gamma_({spec.channels}, spec.gamma_init),
      t_global_({spec.channels}, 0.0),
      mixing_(sample_orthogonal(spec.channels, mixing_seed)) {
  if (spec.channels < 2 || spec.channels % 2 != 0) {
    throw usage_error("coupling block needs an even channel count, got " + std::to_string(spec.channels));
  }
  if (!(spec.clamp > 0.0)) throw usage_error("coupling clamp must be positive");
}

std::vector<double> CouplingBlock::global_scale() const { return global_scale_values(gamma_, spec_.s0); }

FlowStep CouplingBlock::apply(const Tensor& x, Direction dir) const {
  if (x.rank() != 4 || x.dim(1) != spec_.channels) {
    throw usage_error("coupling block expects " + std::to_string(spec_.channels) + " channels, got " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), c = spec_.channels, half = c / 2, pixels = x.dim(2) * x.dim(3);

  if (dir == Direction::forward) {
    const Tensor u1 = slice(x, 1, 0, half);
    const Tensor u2 = slice(x, 1, half, c);
    const Tensor st = subnet_(u1);
    check_coefficients(st);
    const Tensor log_s = scale(tanh(slice(st, 1, 0, half)), spec_.clamp);
    const Tensor v2 = add(mul(exp(log_s), u2), slice(st, 1, half, c));
    Tensor y = concat({u1, v2}, 1);
    y = channel_affine(y, scale(softplus(gamma_), spec_.s0), t_global_);
    y = apply_mixing(mixing_, y, Direction::forward);
    Tensor logdet = add(sum_per_sample(log_s), global_log_scale(gamma_, spec_.s0, pixels, n));
    return {y, logdet};
  }

  Tensor y = apply_mixing(mixing_, x, Direction::inverse);
  y = undo_global_affine(y, gamma_, t_global_, spec_.s0);
  const Tensor v1 = slice(y, 1, 0, half);
  const Tensor v2 = slice(y, 1, half, c);
  const Tensor st = subnet_(v1);
  check_coefficients(st);
  const Tensor log_s = scale(tanh(slice(st, 1, 0, half)), spec_.clamp);
  const Tensor u2 = div(sub(v2, slice(st, 1, half, c)), exp(log_s));
  Tensor logdet = neg(add(sum_per_sample(log_s), global_log_scale(gamma_, spec_.s0, pixels, n)));
  return {concat({v1, u2}, 1), logdet};
}

void CouplingBlock::collect(const std::string& prefix, std::vector<Parameter>& out) const {
  subnet_.collect(prefix + "subnet.", out);
  out.push_back({prefix + "gamma", gamma_, true, true});
  out.push_back({prefix + "t_global", t_global_, true, false});
  out.push_back({prefix + "mixing", mixing_.matrix, false, false});
}

// ---------------------------------------------------------------------------

DownsamplingCouplingBlock::DownsamplingCouplingBlock(const CouplingSpec& spec, Rng& rng, std::uint64_t mixing_seed)
    : spec_(spec),
      subnet_({spec.channels % 2 == 1 ? spec.channels : spec.channels / 2, 4 * spec.channels, spec.hidden, spec.kernel, 2},
              rng),
      gamma_({4 * spec.channels}, spec.gamma_init),
      t_global_({4 * spec.channels}, 0.0),
      mixing_(sample_orthogonal(4 * spec.channels, mixing_seed)) {
  if (spec.channels == 0) throw usage_error("downsampling block with zero channels");
  if (!(spec.clamp > 0.0)) throw usage_error("coupling clamp must be positive");
  const std::size_t c = spec.channels;
  // Reordered tensor: channel 4k+p is patch position p of input channel k.
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t p = 0; p < 4; ++p) {
      const bool conditioning = spatial_split() ? p < 2 : k < c / 2;
      (conditioning ? first_ : second_).push_back(4 * k + p);
    }
  }
  merge_.assign(4 * c, 0);
  for (std::size_t i = 0; i < first_.size(); ++i) merge_[first_[i]] = i;
  for (std::size_t i = 0; i < second_.size(); ++i) merge_[second_[i]] = first_.size() + i;
}

std::vector<double> DownsamplingCouplingBlock::global_scale() const { return global_scale_values(gamma_, spec_.s0); }

Tensor DownsamplingCouplingBlock::subnet_input_forward(const Tensor& x) const {
  if (!spatial_split()) return slice(x, 1, 0, spec_.channels / 2);
  Tensor mask(x.shape(), 0.0);
  auto m = mask.mutable_data();
  const std::size_t h = x.dim(2), w = x.dim(3);
  for (std::size_t plane = 0; plane < x.dim(0) * x.dim(1); ++plane) {
    for (std::size_t r = 0; r < h; r += 2) {
      for (std::size_t col = 0; col < w; ++col) m[plane * h * w + r * w + col] = 1.0;
    }
  }
  return mul(x, mask);
}

Tensor DownsamplingCouplingBlock::subnet_input_inverse(const Tensor& v1) const {
  if (!spatial_split()) return checkerboard_transform(v1, Direction::inverse);
  const Tensor zeros({v1.dim(0), second_.size(), v1.dim(2), v1.dim(3)}, 0.0);
  return checkerboard_transform(gather(concat({v1, zeros}, 1), 1, merge_), Direction::inverse);
}

FlowStep DownsamplingCouplingBlock::apply(const Tensor& x, Direction dir) const {
  const std::size_t c = spec_.channels, half = 2 * c;
  if (dir == Direction::forward) {
    if (x.rank() != 4 || x.dim(1) != c) {
      throw usage_error("downsampling block expects " + std::to_string(c) + " channels, got " + shape_str(x.shape()));
    }
    const std::size_t n = x.dim(0);
    const Tensor reordered = checkerboard_transform(x, Direction::forward);
    const Tensor v1 = gather(reordered, 1, first_);
    const Tensor u2 = gather(reordered, 1, second_);
    const Tensor st = subnet_(subnet_input_forward(x));
    check_coefficients(st);
    const Tensor log_s = scale(tanh(slice(st, 1, 0, half)), spec_.clamp);
    const Tensor v2 = add(mul(exp(log_s), u2), slice(st, 1, half, 2 * half));
    Tensor y = concat({v1, v2}, 1);
    y = channel_affine(y, scale(softplus(gamma_), spec_.s0), t_global_);
    y = apply_mixing(mixing_, y, Direction::forward);
    const std::size_t pixels = y.dim(2) * y.dim(3);
    Tensor logdet = add(sum_per_sample(log_s), global_log_scale(gamma_, spec_.s0, pixels, n));
    return {y, logdet};
  }

  if (x.rank() != 4 || x.dim(1) != 4 * c) {
    throw usage_error("downsampling block inverse expects " + std::to_string(4 * c) + " channels, got " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), pixels = x.dim(2) * x.dim(3);
  Tensor y = apply_mixing(mixing_, x, Direction::inverse);
  y = undo_global_affine(y, gamma_, t_global_, spec_.s0);
  const Tensor v1 = slice(y, 1, 0, half);
  const Tensor v2 = slice(y, 1, half, 2 * half);
  const Tensor st = subnet_(subnet_input_inverse(v1));
  check_coefficients(st);
  const Tensor log_s = scale(tanh(slice(st, 1, 0, half)), spec_.clamp);
  const Tensor u2 = div(sub(v2, slice(st, 1, half, 2 * half)), exp(log_s));
  const Tensor restored = checkerboard_transform(gather(concat({v1, u2}, 1), 1, merge_), Direction::inverse);
  Tensor logdet = neg(add(sum_per_sample(log_s), global_log_scale(gamma_, spec_.s0, pixels, n)));
  return {restored, logdet};
}

void DownsamplingCouplingBlock::collect(const std::string& prefix, std::vector<Parameter>& out) const {
  subnet_.collect(prefix + "subnet.", out);
  out.push_back({prefix + "gamma", gamma_, true, true});
  out.push_back({prefix + "t_global", t_global_, true, false});
  out.push_back({prefix + "mixing", mixing_.matrix, false, false});
}

// ---------------------------------------------------------------------------

FlowStep HaarBlock::apply(const Tensor& x, Direction dir) const {
  return {haar_transform(x, dir), Tensor({x.dim(0)}, 0.0)};
}

}  // namespace ibgc
