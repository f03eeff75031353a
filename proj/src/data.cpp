#include "ibgc/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "ibgc/error.hpp"
#include "ibgc/rng.hpp"

namespace ibgc {

Tensor Dataset::batch(const std::vector<std::size_t>& indices) const {
  const std::size_t sz = image_size();
  Tensor out({indices.size(), c, h, w});
  auto d = out.mutable_data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= n) throw usage_error("dataset index out of range");
    std::copy_n(images.begin() + static_cast<long>(indices[i] * sz), sz, d.begin() + static_cast<long>(i * sz));
  }
  return out;
}

Tensor Dataset::all() const { return Tensor({n, c, h, w}, images); }

std::vector<std::size_t> Dataset::batch_labels(const std::vector<std::size_t>& indices) const {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::range(std::size_t begin, std::size_t end) const {
  if (begin > end || end > n) throw usage_error("dataset range out of bounds");
  Dataset out = *this;
  out.n = end - begin;
  const std::size_t sz = image_size();
  out.images.assign(images.begin() + static_cast<long>(begin * sz), images.begin() + static_cast<long>(end * sz));
  out.labels.assign(labels.begin() + static_cast<long>(begin), labels.begin() + static_cast<long>(end));
  return out;
}

void Dataset::validate() const {
  if (images.size() != n * image_size() || labels.size() != n) throw data_error("dataset size fields are inconsistent");
  for (std::size_t y : labels) {
    if (y >= classes) throw data_error("label " + std::to_string(y) + " out of range for " + std::to_string(classes) + " classes");
  }
}

Dataset synth_bars(std::size_t n, std::size_t classes, std::array<std::size_t, 3> chw, std::uint64_t seed,
                   std::size_t first) {
  if (classes < 1 || classes > 8) throw usage_error("synth_bars supports 1 to 8 classes");
  if (chw[0] == 0 || chw[1] < 4 || chw[2] < 4) throw usage_error("synth_bars needs images of at least 4x4");
  Dataset d;
  d.n = n;
  d.c = chw[0];
  d.h = chw[1];
  d.w = chw[2];
  d.classes = classes;
  d.generator = "synth_bars";
  d.seed = seed;
  d.images.resize(n * d.image_size());
  d.labels.resize(n);
  const double cy0 = 0.5 * static_cast<double>(d.h - 1), cx0 = 0.5 * static_cast<double>(d.w - 1);
  const double extent = 0.3 * static_cast<double>(std::min(d.h, d.w));  // half-length scale of the bar
  const double width = 1.1;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t index = first + i;
    Rng rng = make_rng(seed, Stream::data, index);
    std::uniform_real_distribution<double> jitter(-1.5, 1.5);
    std::uniform_real_distribution<double> level(0.7, 1.0);
    std::normal_distribution<double> noise(0.0, 0.05);
    const std::size_t y = index % classes;
    const double theta = static_cast<double>(y) * std::numbers::pi / static_cast<double>(classes);
    const double cy = cy0 + jitter(rng), cx = cx0 + jitter(rng), amp = level(rng);
    const double ct = std::cos(theta), st = std::sin(theta);
    double* img = d.images.data() + i * d.image_size();
    for (std::size_t ch = 0; ch < d.c; ++ch) {
      for (std::size_t r = 0; r < d.h; ++r) {
        for (std::size_t col = 0; col < d.w; ++col) {
          const double dy = static_cast<double>(r) - cy, dx = static_cast<double>(col) - cx;
          const double along = dx * ct - dy * st, across = dx * st + dy * ct;
          double v = amp * std::exp(-0.5 * across * across / (width * width)) *
                     std::exp(-0.5 * along * along / (extent * extent));
          v += noise(rng);
          img[(ch * d.h + r) * d.w + col] = std::clamp(v, 0.0, 1.0);
        }
      }
    }
    d.labels[i] = y;
  }
  return d;
}

OodKind parse_ood_kind(const std::string& name) {
  if (name == "uniform_noise" || name == "noise") return OodKind::uniform_noise;
  if (name == "inverted") return OodKind::inverted;
  if (name == "shuffled" || name == "shuffled_pixels") return OodKind::shuffled;
  throw usage_error("unknown OoD kind '" + name + "' (uniform_noise, inverted, shuffled)");
}

std::string to_string(OodKind kind) {
  switch (kind) {
    case OodKind::uniform_noise:
      return "uniform_noise";
    case OodKind::inverted:
      return "inverted";
    case OodKind::shuffled:
      return "shuffled";
  }
  return "?";
}

Dataset synth_ood(OodKind kind, const Dataset& base, std::uint64_t seed) {
  base.validate();
  Dataset d = base;
  d.generator = to_string(kind);
  d.seed = seed;
  const std::size_t sz = d.image_size();
  for (std::size_t i = 0; i < d.n; ++i) {
    double* img = d.images.data() + i * sz;
    Rng rng = make_rng(seed, Stream::corruption, i);
    switch (kind) {
      case OodKind::uniform_noise: {
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (std::size_t k = 0; k < sz; ++k) img[k] = u(rng);
        break;
      }
      case OodKind::inverted:
        for (std::size_t k = 0; k < sz; ++k) img[k] = 1.0 - img[k];
        break;
      case OodKind::shuffled:
        std::shuffle(img, img + sz, rng);
        break;
    }
  }
  return d;
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[5] = {'I', 'B', 'D', 'S', '1'};

template <typename T>
void put_le(std::ostream& os, T v) {
  unsigned char bytes[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& is, const std::string& path) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw data_error("truncated dataset file " + path);
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void save_dataset(const Dataset& data, const std::string& path) {
  data.validate();
  if (data.classes > 65536) throw usage_error("too many classes for the u16 label format");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw data_error("cannot write " + path);
  os.write(kMagic, sizeof(kMagic));
  for (std::size_t v : {data.n, data.c, data.h, data.w, data.classes}) {
    if (v > 0xFFFFFFFFu) throw usage_error("dataset extent exceeds u32");
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(v));
  }
  for (double v : data.images) put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
  for (std::size_t y : data.labels) put_le<std::uint16_t>(os, static_cast<std::uint16_t>(y));
  if (!os) throw data_error("failed writing " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw data_error("cannot open dataset " + path);
  char magic[5];
  if (!is.read(magic, 5) || !std::equal(magic, magic + 5, kMagic)) throw data_error(path + " is not an IBDS1 dataset");
  Dataset d;
  d.n = get_le<std::uint32_t>(is, path);
  d.c = get_le<std::uint32_t>(is, path);
  d.h = get_le<std::uint32_t>(is, path);
  d.w = get_le<std::uint32_t>(is, path);
  d.classes = get_le<std::uint32_t>(is, path);
  d.generator = "file";
  const std::size_t total = d.n * d.image_size();
  d.images.resize(total);
  for (std::size_t i = 0; i < total; ++i) {
    d.images[i] = std::bit_cast<double>(get_le<std::uint64_t>(is, path));
    if (!std::isfinite(d.images[i])) throw data_error("non-finite pixel in " + path);
  }
  d.labels.resize(d.n);
  for (std::size_t i = 0; i < d.n; ++i) d.labels[i] = get_le<std::uint16_t>(is, path);
  if (is.peek() != std::char_traits<char>::eof()) throw data_error("trailing bytes in " + path);
  d.validate();
  return d;
}

}  // namespace ibgc
