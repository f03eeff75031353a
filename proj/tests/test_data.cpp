#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "ibgc/data.hpp"
#include "ibgc/error.hpp"

using namespace ibgc;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("ibgc_test_" + name)).string();
}

}  // namespace

TEST(Data, BarsAreDeterministicAndInRange) {
  const Dataset a = synth_bars(20, 4, {1, 16, 16}, 3);
  const Dataset b = synth_bars(20, 4, {1, 16, 16}, 3);
  EXPECT_EQ(a.images, b.images);
  for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(a.labels[i], i % 4);
  for (double v : a.images) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  // An offset stream continues the same sequence.
  const Dataset tail = synth_bars(5, 4, {1, 16, 16}, 3, 15);
  EXPECT_TRUE(std::equal(tail.images.begin(), tail.images.end(), a.images.begin() + 15 * 256));
  EXPECT_THROW(synth_bars(4, 9, {1, 16, 16}, 0), Error);
}

TEST(Data, OodKinds) {
  const Dataset base = synth_bars(6, 2, {1, 8, 8}, 1);
  const Dataset inv = synth_ood(OodKind::inverted, base, 0);
  EXPECT_DOUBLE_EQ(inv.images[10], 1.0 - base.images[10]);
  const Dataset shuf = synth_ood(OodKind::shuffled, base, 0);
  for (std::size_t i = 0; i < 6; ++i) {
    std::vector<double> x(base.images.begin() + i * 64, base.images.begin() + (i + 1) * 64);
    std::vector<double> y(shuf.images.begin() + i * 64, shuf.images.begin() + (i + 1) * 64);
    std::sort(x.begin(), x.end());
    std::sort(y.begin(), y.end());
    EXPECT_EQ(x, y);
  }
  const Dataset noise = synth_ood(OodKind::uniform_noise, base, 0);
  EXPECT_EQ(noise.images.size(), base.images.size());
  EXPECT_EQ(parse_ood_kind(to_string(OodKind::shuffled)), OodKind::shuffled);
  EXPECT_THROW(parse_ood_kind("static"), Error);
}

TEST(Data, FileRoundTrip) {
  const Dataset a = synth_bars(7, 3, {2, 4, 6}, 5);
  const std::string path = temp_path("roundtrip.ibds");
  save_dataset(a, path);
  const Dataset b = load_dataset(path);
  EXPECT_EQ(b.n, 7u);
  EXPECT_EQ(b.chw(), a.chw());
  EXPECT_EQ(b.classes, 3u);
  EXPECT_EQ(b.images, a.images);
  EXPECT_EQ(b.labels, a.labels);
  std::filesystem::remove(path);
}

TEST(Data, CorruptFilesAreDataErrors) {
  const Dataset a = synth_bars(3, 2, {1, 4, 4}, 6);
  const std::string path = temp_path("trunc.ibds");
  save_dataset(a, path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  try {
    load_dataset(path);
    FAIL() << "truncated file accepted";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::data);
  }
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOTIT";
  }
  EXPECT_THROW(load_dataset(path), Error);
  std::filesystem::remove(path);
  EXPECT_THROW(load_dataset(path), Error);
}

TEST(Data, BatchAndRange) {
  const Dataset a = synth_bars(10, 2, {1, 4, 4}, 7);
  const Tensor b = a.batch({3, 1});
  EXPECT_EQ(b.shape(), (Shape{2, 1, 4, 4}));
  EXPECT_EQ(b[0], a.images[48]);
  EXPECT_EQ(a.batch_labels({3, 1}), (std::vector<std::size_t>{1, 1}));
  const Dataset r = a.range(2, 5);
  EXPECT_EQ(r.n, 3u);
  EXPECT_EQ(r.labels[0], 0u);
  EXPECT_THROW(a.range(5, 11), Error);
  EXPECT_THROW(a.batch({10}), Error);
}
