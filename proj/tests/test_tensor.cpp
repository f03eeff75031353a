#include <gtest/gtest.h>

#include <cmath>

#include "ibgc/error.hpp"
#include "ibgc/tensor.hpp"
#include "util.hpp"

using namespace ibgc;
using ibgc::testing::gradient_error;
using ibgc::testing::random_tensor;

namespace {

constexpr double kGradTol = 1e-4;

Tensor naive_conv(const Tensor& x, const Tensor& k, std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t o = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  Tensor y({n, o, oh, ow});
  auto yd = y.mutable_data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t q = 0; q < o; ++q)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double s = 0.0;
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t u = 0; u < kh; ++u)
              for (std::size_t v = 0; v < kw; ++v) {
                const long r = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                const long cc = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                if (r < 0 || cc < 0 || r >= static_cast<long>(h) || cc >= static_cast<long>(w)) continue;
                s += k[((q * c + ch) * kh + u) * kw + v] * x[((b * c + ch) * h + r) * w + cc];
              }
          yd[((b * o + q) * oh + i) * ow + j] = s;
        }
  return y;
}

}  // namespace

TEST(Tensor, UnaryGradients) {
  const Tensor x = random_tensor({3, 4}, 1);
  const Tensor pos = random_tensor({3, 4}, 2, 0.2, 2.0);
  EXPECT_LT(gradient_error([](const Tensor& t) { return exp(t); }, x), kGradTol);
  EXPECT_LT(gradient_error([](const Tensor& t) { return log(t); }, pos), kGradTol);
  EXPECT_LT(gradient_error([](const Tensor& t) { return tanh(t); }, x), kGradTol);
  EXPECT_LT(gradient_error([](const Tensor& t) { return softplus(t); }, x), kGradTol);
  EXPECT_LT(gradient_error([](const Tensor& t) { return relu(t); }, x), kGradTol);
  EXPECT_LT(gradient_error([](const Tensor& t) { return square(t); }, x), kGradTol);
  EXPECT_LT(gradient_error([](const Tensor& t) { return neg(t); }, x), kGradTol);
  EXPECT_LT(gradient_error([](const Tensor& t) { return scale(t, -2.5); }, x), kGradTol);
  EXPECT_LT(gradient_error([](const Tensor& t) { return add_scalar(t, 3.0); }, x), kGradTol);
  EXPECT_LT(gradient_error([](const Tensor& t) { return clamp_min(t, 0.1); }, x), kGradTol);
}

TEST(Tensor, BinaryGradients) {
  const Tensor a = random_tensor({2, 5}, 3);
  const Tensor b = random_tensor({2, 5}, 4, 0.5, 1.5);
  EXPECT_LT(gradient_error([&](const Tensor& t) { return add(t, b); }, a), kGradTol);
  EXPECT_LT(gradient_error([&](const Tensor& t) { return sub(b, t); }, a), kGradTol);
  EXPECT_LT(gradient_error([&](const Tensor& t) { return mul(t, b); }, a), kGradTol);
  EXPECT_LT(gradient_error([&](const Tensor& t) { return div(a, t); }, b), kGradTol);
  EXPECT_LT(gradient_error([&](const Tensor& t) { return div(t, b); }, a), kGradTol);
  // Both operands tied to the same leaf.
  EXPECT_LT(gradient_error([](const Tensor& t) { return mul(t, t); }, a), kGradTol);
}

TEST(Tensor, MatmulMatchesNaiveAndGradient) {
  const Tensor a = random_tensor({3, 4}, 5), b = random_tensor({4, 2}, 6);
  const Tensor y = matmul(a, b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 4; ++k) s += a[i * 4 + k] * b[k * 2 + j];
      EXPECT_NEAR(y[i * 2 + j], s, 1e-14);
    }
  EXPECT_LT(gradient_error([&](const Tensor& t) { return matmul(t, b); }, a), kGradTol);
  EXPECT_LT(gradient_error([&](const Tensor& t) { return matmul(a, t); }, b), kGradTol);
  EXPECT_THROW(matmul(a, a), Error);
}

TEST(Tensor, Conv2dMatchesNaive) {
  for (std::size_t k : {1, 3, 7}) {
    for (std::size_t stride : {1, 2}) {
      const Tensor x = random_tensor({2, 3, 8, 8}, 7);
      const Tensor w = random_tensor({4, 3, k, k}, 8);
      const Tensor y = conv2d(x, w, stride, k / 2);
      const Tensor ref = naive_conv(x, w, stride, k / 2);
      ASSERT_EQ(y.shape(), ref.shape());
      for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
    }
  }
}

TEST(Tensor, Conv2dGradients) {
  const Tensor x = random_tensor({2, 2, 6, 6}, 9);
  const Tensor w = random_tensor({3, 2, 3, 3}, 10);
  EXPECT_LT(gradient_error([&](const Tensor& t) { return conv2d(t, w, 1, 1); }, x), kGradTol);
  EXPECT_LT(gradient_error([&](const Tensor& t) { return conv2d(x, t, 1, 1); }, w), kGradTol);
  EXPECT_LT(gradient_error([&](const Tensor& t) { return conv2d(t, w, 2, 1); }, x), kGradTol);
  const Tensor w7 = random_tensor({2, 2, 7, 7}, 11);
  EXPECT_LT(gradient_error([&](const Tensor& t) { return conv2d(x, t, 2, 3); }, w7), kGradTol);
}

TEST(Tensor, ChannelAffine) {
  const Tensor x = random_tensor({2, 3, 2, 2}, 12);
  const Tensor s = random_tensor({3}, 13), b = random_tensor({3}, 14);
  const Tensor y = channel_affine(x, s, b);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < 4; ++p) {
        const std::size_t i = (n * 3 + c) * 4 + p;
        EXPECT_NEAR(y[i], x[i] * s[c] + b[c], 1e-15);
      }
  EXPECT_LT(gradient_error([&](const Tensor& t) { return channel_affine(t, s, b); }, x), kGradTol);
  EXPECT_LT(gradient_error([&](const Tensor& t) { return channel_affine(x, t, b); }, s), kGradTol);
  EXPECT_LT(gradient_error([&](const Tensor& t) { return channel_affine(x, s, t); }, b), kGradTol);
  EXPECT_LT(gradient_error([&](const Tensor& t) { return channel_affine(x, Tensor(), t); }, b), kGradTol);
}

TEST(Tensor, Reductions) {
  const Tensor x = random_tensor({3, 4}, 15);
  for (Reduce r : {Reduce::sum, Reduce::mean, Reduce::logsumexp, Reduce::logsoftmax, Reduce::max}) {
    for (std::size_t axis : {0, 1}) {
      EXPECT_LT(gradient_error([&](const Tensor& t) { return reduce(t, r, axis); }, x), kGradTol);
    }
  }
  EXPECT_LT(gradient_error([](const Tensor& t) { return sum_all(t); }, x), kGradTol);
  EXPECT_LT(gradient_error([](const Tensor& t) { return mean_all(t); }, x), kGradTol);

  const Tensor big({1, 3}, std::vector<double>{1000.0, 1000.0, -1e300});
  EXPECT_NEAR(reduce(big, Reduce::logsumexp, 1).item(), 1000.0 + std::log(2.0), 1e-12);
  const Tensor ls = reduce(x, Reduce::logsoftmax, 1);
  for (std::size_t i = 0; i < 3; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 4; ++j) s += std::exp(ls[i * 4 + j]);
    EXPECT_NEAR(s, 1.0, 1e-14);
  }
}

TEST(Tensor, ShapeOps) {
  const Tensor x = random_tensor({2, 3, 4}, 16);
  EXPECT_LT(gradient_error([](const Tensor& t) { return reshape(t, {6, 4}); }, x), kGradTol);
  EXPECT_LT(gradient_error([](const Tensor& t) { return slice(t, 1, 1, 3); }, x), kGradTol);
  EXPECT_LT(gradient_error([](const Tensor& t) { return slice(t, 2, 0, 1); }, x), kGradTol);
  EXPECT_LT(gradient_error([](const Tensor& t) { return concat({t, scale(t, 2.0)}, 1); }, x), kGradTol);
  EXPECT_LT(gradient_error([](const Tensor& t) { return gather(t, 2, {3, 0, 0, 1}); }, x), kGradTol);
  const Tensor g = gather(x, 1, {2, 2});
  EXPECT_EQ(g.shape(), (Shape{2, 2, 4}));
  EXPECT_EQ(g[0], x[8]);
  EXPECT_THROW(reshape(x, {5, 5}), Error);
  EXPECT_THROW(slice(x, 1, 2, 5), Error);
}

TEST(Tensor, PairwiseSquaredDistance) {
  const Tensor z = random_tensor({3, 5}, 17), mu = random_tensor({2, 5}, 18);
  const Tensor d = pairwise_sq_dist(z, mu);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t m = 0; m < 2; ++m) {
      double s = 0.0;
      for (std::size_t k = 0; k < 5; ++k) s += (z[i * 5 + k] - mu[m * 5 + k]) * (z[i * 5 + k] - mu[m * 5 + k]);
      EXPECT_NEAR(d[i * 2 + m], s, 1e-13);
    }
  EXPECT_LT(gradient_error([&](const Tensor& t) { return pairwise_sq_dist(t, mu); }, z), kGradTol);
  EXPECT_LT(gradient_error([&](const Tensor& t) { return pairwise_sq_dist(z, t); }, mu), kGradTol);
}

TEST(Tensor, TapeAccumulatesAndDetaches) {
  Tensor p = random_tensor({3}, 19);
  {
    Tape tape;
    tape.watch(p);
    const Tensor y = sum_all(add(square(p), p));
    tape.backward(y);
    const auto g = p.grad();
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(g[i], 2.0 * p[i] + 1.0, 1e-14);
  }
  EXPECT_FALSE(p.requires_grad());
  EXPECT_EQ(exp(p).tape(), nullptr);
}

TEST(Tensor, BackwardRejectsWrongSeed) {
  Tape tape;
  const Tensor x = tape.variable(random_tensor({2, 2}, 20));
  const Tensor y = exp(x);
  const double seed[] = {1.0};
  EXPECT_THROW(tape.backward(y, seed), Error);
  EXPECT_THROW(tape.backward(y), Error);
}
