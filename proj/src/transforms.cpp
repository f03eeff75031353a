#include "ibgc/transforms.hpp"

#include <cmath>
#include <numbers>

#include <Eigen/Dense>

#include "ibgc/error.hpp"
#include "ibgc/rng.hpp"

namespace ibgc {

namespace {

struct Chw {
  std::size_t c, h, w;
};

Chw downsample_input(const Tensor& x, const char* op) {
  if (x.rank() != 4) throw usage_error(std::string(op) + " expects [N,C,H,W], got " + shape_str(x.shape()));
  const Chw g{x.dim(1), x.dim(2), x.dim(3)};
  if (g.h % 2 != 0 || g.w % 2 != 0) throw usage_error(std::string(op) + ": odd spatial extent " + shape_str(x.shape()));
  return g;
}

Chw upsample_input(const Tensor& x, const char* op) {
  if (x.rank() != 4 || x.dim(1) % 4 != 0) throw usage_error(std::string(op) + " inverse expects [N,4C,h,w]");
  return {x.dim(1) / 4, x.dim(2) * 2, x.dim(3) * 2};
}

// Fine layout [C,H,W] -> coarse [4C,H/2,W/2], patch gathered as (a,b,c,d)
// and combined with `basis` (4x4, row = output band).
void patch_forward(std::span<const double> in, std::span<double> out, Chw g, const double (&basis)[4][4]) {
  const std::size_t h2 = g.h / 2, w2 = g.w / 2;
  for (std::size_t c = 0; c < g.c; ++c) {
    const double* src = in.data() + c * g.h * g.w;
    for (std::size_t y = 0; y < h2; ++y) {
      for (std::size_t x = 0; x < w2; ++x) {
        const double v[4] = {src[(2 * y) * g.w + 2 * x], src[(2 * y) * g.w + 2 * x + 1], src[(2 * y + 1) * g.w + 2 * x],
                             src[(2 * y + 1) * g.w + 2 * x + 1]};
        for (std::size_t p = 0; p < 4; ++p) {
          out[((4 * c + p) * h2 + y) * w2 + x] =
              basis[p][0] * v[0] + basis[p][1] * v[1] + basis[p][2] * v[2] + basis[p][3] * v[3];
        }
      }
    }
  }
}

// Transpose of patch_forward.
void patch_adjoint(std::span<const double> in, std::span<double> out, Chw g, const double (&basis)[4][4]) {
  const std::size_t h2 = g.h / 2, w2 = g.w / 2;
  for (std::size_t c = 0; c < g.c; ++c) {
    double* dst = out.data() + c * g.h * g.w;
    for (std::size_t y = 0; y < h2; ++y) {
      for (std::size_t x = 0; x < w2; ++x) {
        double u[4];
        for (std::size_t p = 0; p < 4; ++p) u[p] = in[((4 * c + p) * h2 + y) * w2 + x];
        double v[4];
        for (std::size_t q = 0; q < 4; ++q) {
          v[q] = basis[0][q] * u[0] + basis[1][q] * u[1] + basis[2][q] * u[2] + basis[3][q] * u[3];
        }
        dst[(2 * y) * g.w + 2 * x] = v[0];
        dst[(2 * y) * g.w + 2 * x + 1] = v[1];
        dst[(2 * y + 1) * g.w + 2 * x] = v[2];
        dst[(2 * y + 1) * g.w + 2 * x + 1] = v[3];
      }
    }
  }
}

constexpr double kHaar[4][4] = {{0.5, 0.5, 0.5, 0.5}, {0.5, -0.5, 0.5, -0.5}, {0.5, 0.5, -0.5, -0.5}, {0.5, -0.5, -0.5, 0.5}};
constexpr double kIdentity[4][4] = {{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}};

Tensor patch_transform(const Tensor& x, Direction dir, const double (&basis)[4][4], const char* op) {
  if (dir == Direction::forward) {
    const Chw g = downsample_input(x, op);
    return linear_map(
        x, {x.dim(0), 4 * g.c, g.h / 2, g.w / 2},
        [g, &basis](std::span<const double> in, std::span<double> out) { patch_forward(in, out, g, basis); },
        [g, &basis](std::span<const double> in, std::span<double> out) { patch_adjoint(in, out, g, basis); });
  }
  const Chw g = upsample_input(x, op);
  return linear_map(
      x, {x.dim(0), g.c, g.h, g.w},
      [g, &basis](std::span<const double> in, std::span<double> out) { patch_adjoint(in, out, g, basis); },
      [g, &basis](std::span<const double> in, std::span<double> out) { patch_forward(in, out, g, basis); });
}

}  // namespace

Tensor haar_transform(const Tensor& x, Direction dir) { return patch_transform(x, dir, kHaar, "haar_transform"); }

Tensor checkerboard_transform(const Tensor& x, Direction dir) {
  return patch_transform(x, dir, kIdentity, "checkerboard_transform");
}

std::vector<double> dct_matrix(std::size_t n) {
  std::vector<double> m(n * n);
  for (std::size_t k = 0; k < n; ++k) {
    const double a = k == 0 ? std::sqrt(1.0 / static_cast<double>(n)) : std::sqrt(2.0 / static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
      m[k * n + i] = a * std::cos(std::numbers::pi * (2.0 * static_cast<double>(i) + 1.0) * static_cast<double>(k) /
                                  (2.0 * static_cast<double>(n)));
    }
  }
  return m;
}

namespace {

// Coefficient index of channel c, frequency (u, v) in the pooled layout.
std::size_t dct_slot(std::size_t c, std::size_t u, std::size_t v, Chw g) {
  const std::size_t f = u * g.w + v;
  if (f == 0) return c;
  return g.c + c * (g.h * g.w - 1) + (f - 1);
}

void dct_forward(std::span<const double> in, std::span<double> out, Chw g, const std::vector<double>& m) {
  const std::size_t n = g.h;
  std::vector<double> tmp(n * n);
  for (std::size_t c = 0; c < g.c; ++c) {
    const double* x = in.data() + c * n * n;
    // tmp = M X
    for (std::size_t u = 0; u < n; ++u) {
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += m[u * n + i] * x[i * n + j];
        tmp[u * n + j] = acc;
      }
    }
    // Y = tmp M^T
    for (std::size_t u = 0; u < n; ++u) {
      for (std::size_t v = 0; v < n; ++v) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += tmp[u * n + j] * m[v * n + j];
        out[dct_slot(c, u, v, g)] = acc;
      }
    }
  }
}

void dct_inverse(std::span<const double> in, std::span<double> out, Chw g, const std::vector<double>& m) {
  const std::size_t n = g.h;
  std::vector<double> coef(n * n), tmp(n * n);
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t u = 0; u < n; ++u) {
      for (std::size_t v = 0; v < n; ++v) coef[u * n + v] = in[dct_slot(c, u, v, g)];
    }
    // X = M^T Y M
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t v = 0; v < n; ++v) {
        double acc = 0.0;
        for (std::size_t u = 0; u < n; ++u) acc += m[u * n + i] * coef[u * n + v];
        tmp[i * n + v] = acc;
      }
    }
    double* x = out.data() + c * n * n;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t v = 0; v < n; ++v) acc += tmp[i * n + v] * m[v * n + j];
        x[i * n + j] = acc;
      }
    }
  }
}

}  // namespace

Tensor dct_pool(const Tensor& x, Direction dir, std::array<std::size_t, 3> chw) {
  if (dir == Direction::forward) {
    if (x.rank() != 4) throw usage_error("dct_pool expects [N,C,H,W], got " + shape_str(x.shape()));
    const Chw g{x.dim(1), x.dim(2), x.dim(3)};
    if (g.h != g.w) throw usage_error("dct_pool: feature maps must be square, got " + shape_str(x.shape()));
    auto m = std::make_shared<std::vector<double>>(dct_matrix(g.h));
    return linear_map(
        x, {x.dim(0), g.c * g.h * g.w},
        [g, m](std::span<const double> in, std::span<double> out) { dct_forward(in, out, g, *m); },
        [g, m](std::span<const double> in, std::span<double> out) { dct_inverse(in, out, g, *m); });
  }
  const Chw g{chw[0], chw[1], chw[2]};
  if (g.h != g.w) throw usage_error("dct_pool: feature maps must be square");
  if (x.rank() != 2 || x.dim(1) != g.c * g.h * g.w) {
    throw usage_error("dct_pool inverse: latent " + shape_str(x.shape()) + " does not match feature shape");
  }
  auto m = std::make_shared<std::vector<double>>(dct_matrix(g.h));
  return linear_map(
      x, {x.dim(0), g.c, g.h, g.w},
      [g, m](std::span<const double> in, std::span<double> out) { dct_inverse(in, out, g, *m); },
      [g, m](std::span<const double> in, std::span<double> out) { dct_forward(in, out, g, *m); });
}

OrthoMixing make_mixing(Tensor matrix) {
  if (matrix.rank() != 2 || matrix.dim(0) != matrix.dim(1)) throw usage_error("mixing matrix must be square");
  return {matrix.dim(0), std::move(matrix)};
}

OrthoMixing sample_orthogonal(std::size_t n, std::uint64_t seed) {
  if (n < 1) throw usage_error("sample_orthogonal: n must be at least 1");
  Rng rng = make_rng(seed, Stream::mixing, n);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd a(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = normal(rng);
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(n); ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  std::vector<double> data(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) data[i * n + j] = q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
  return make_mixing(Tensor({n, n}, std::move(data)));
}

Tensor apply_mixing(const OrthoMixing& mixing, const Tensor& x, Direction dir) {
  if (x.rank() != 4 || x.dim(1) != mixing.n) {
    throw usage_error("apply_mixing: expected " + std::to_string(mixing.n) + " channels, got " + shape_str(x.shape()));
  }
  const std::size_t n = mixing.n;
  auto q = mixing.matrix.data();
  std::vector<double> kernel(q.begin(), q.end());
  if (dir == Direction::inverse) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) kernel[i * n + j] = q[j * n + i];
    }
  }
  return conv2d(x, Tensor({n, n, 1, 1}, std::move(kernel)), 1, 0);
}

}  // namespace ibgc
