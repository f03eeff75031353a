#pragma once

// Synthetic desk-scale image datasets and the flat IBDS1 file format.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ibgc/tensor.hpp"

namespace ibgc {

struct Dataset {
  std::size_t n = 0, c = 1, h = 16, w = 16, classes = 0;
  std::vector<double> images;  // [n, c, h, w] row-major, values in [0, 1]
  std::vector<std::size_t> labels;
  std::string generator;  // informational, not stored in files
  std::uint64_t seed = 0;

  std::size_t image_size() const { return c * h * w; }
  std::array<std::size_t, 3> chw() const { return {c, h, w}; }
  /// [B, C, H, W] copy of the selected images.
  Tensor batch(const std::vector<std::size_t>& indices) const;
  Tensor all() const;
  std::vector<std::size_t> batch_labels(const std::vector<std::size_t>& indices) const;
  /// Images [begin, end).
  Dataset range(std::size_t begin, std::size_t end) const;
  void validate() const;
};

/// Oriented Gaussian bar per image, angle y*pi/M, with positional jitter,
/// additive Gaussian noise (sigma 0.05) and clipping. Image i of the stream
/// has label i mod M and is generated from its own (seed, i) generator, so
/// index ranges [first, first + n) of one seed never overlap.
Dataset synth_bars(std::size_t n, std::size_t classes, std::array<std::size_t, 3> chw, std::uint64_t seed,
                   std::size_t first = 0);

enum class OodKind { uniform_noise, inverted, shuffled };
OodKind parse_ood_kind(const std::string& name);
std::string to_string(OodKind kind);

/// uniform_noise: i.i.d. U[0,1] images shaped like base; inverted: 1 - x;
/// shuffled: per-image random pixel permutation. Labels copied from base.
Dataset synth_ood(OodKind kind, const Dataset& base, std::uint64_t seed);

/// Magic "IBDS1", little-endian u32 N, C, H, W, M, f64 pixels, u16 labels.
void save_dataset(const Dataset& data, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace ibgc
