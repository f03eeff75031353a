#pragma once

// Fixed volume-preserving transforms: invertible downsampling reorderings,
// the Haar wavelet stage, DCT pooling and random orthogonal channel mixing.
// None of them contributes to log|det J|.

#include <array>
#include <cstdint>

#include "ibgc/tensor.hpp"

namespace ibgc {

enum class Direction { forward, inverse };

/// [N,C,H,W] <-> [N,4C,H/2,W/2]. Output channel 4c+p holds band p of input
/// channel c for each 2x2 patch (a b / c d):
///   p=0 (a+b+c+d)/2, p=1 (a-b+c-d)/2, p=2 (a+b-c-d)/2, p=3 (a-b-c+d)/2.
Tensor haar_transform(const Tensor& x, Direction dir);

/// Pure permutation [N,C,H,W] <-> [N,4C,H/2,W/2]. Output channel 4c+p holds
/// patch position p of input channel c, positions row-major within the patch.
Tensor checkerboard_transform(const Tensor& x, Direction dir);

/// Orthonormal 2D DCT-II per channel, flattened to [N, C*H*W]. The first C
/// entries are the per-channel DC coefficients (sqrt(H*W) * channel mean);
/// then, channel by channel, the remaining H*W-1 coefficients in row-major
/// frequency order. The inverse needs the feature shape {C, H, W}.
Tensor dct_pool(const Tensor& x, Direction dir, std::array<std::size_t, 3> chw = {0, 0, 0});

/// Orthonormal DCT-II matrix of size n, row k = frequency k.
std::vector<double> dct_matrix(std::size_t n);

/// The matrix tensor is the single source of truth; it is a model buffer and
/// may be overwritten when a checkpoint is loaded.
struct OrthoMixing {
  std::size_t n = 0;
  Tensor matrix;  // [n, n], Q^T Q = I
};

/// Haar-distributed orthogonal matrix: QR of a standard-normal matrix with
/// the diagonal of R made positive. Deterministic per seed.
OrthoMixing sample_orthogonal(std::size_t n, std::uint64_t seed);
OrthoMixing make_mixing(Tensor matrix);

/// Channel mixing of a [N,C,H,W] tensor.
Tensor apply_mixing(const OrthoMixing& mixing, const Tensor& x, Direction dir);

}  // namespace ibgc
