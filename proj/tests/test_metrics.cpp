#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ibgc/error.hpp"
#include "ibgc/metrics.hpp"
#include "util.hpp"

using namespace ibgc;
using ibgc::testing::random_tensor;

namespace {

void perturb(const FlowModel& model, std::uint64_t seed) {
  Rng rng = make_rng(seed, Stream::test);
  std::normal_distribution<double> normal(0.0, 0.3);
  for (Parameter& p : model.parameters()) {
    if (!p.trainable) continue;
    for (double& v : p.value.mutable_data()) v += normal(rng);
  }
}

ModelSpec rf_spec(std::vector<std::string> layout) {
  ModelSpec s;
  s.input_chw = {1, 8, 8};
  s.classes = 2;
  s.layout = std::move(layout);
  s.hidden = 4;
  s.rank = 2;
  s.seed = 1;
  return s;
}

}  // namespace

TEST(Metrics, Entropy) {
  EXPECT_NEAR(predictive_entropy({0.5, 0.25, 0.25}), 1.5 * std::log(2.0), 1e-15);
  EXPECT_NEAR(predictive_entropy({0.25, 0.25, 0.25, 0.25}), std::log(4.0), 1e-15);
  EXPECT_EQ(predictive_entropy({0.0, 1.0}), 0.0);
  EXPECT_THROW(predictive_entropy({0.5, 0.6}), Error);
}

TEST(Metrics, EceHandBuiltThreeBins) {
  // Three bins of width 1/3, midpoints 1/6, 1/2, 5/6.
  const std::vector<double> conf{0.1, 0.2, 0.4, 0.5, 0.6, 0.9, 0.9, 0.95};
  const std::vector<bool> ok{false, false, true, false, true, true, true, false};
  const CalibrationCurve c = calibration_curve(conf, ok, 3);
  EXPECT_EQ(c.count, (std::vector<std::size_t>{2, 3, 3}));
  EXPECT_EQ(c.total, 8u);
  const double expect = (2 * (1.0 / 6.0) + 3 * std::abs(0.5 - 2.0 / 3.0) + 3 * std::abs(5.0 / 6.0 - 2.0 / 3.0)) / 8.0;
  EXPECT_NEAR(ece(c), expect, 1e-12);
  EXPECT_NEAR(mce(c), 1.0 / 6.0, 1e-12);
}

TEST(Metrics, SingleBinAndTopEdge) {
  const CalibrationCurve c = calibration_curve(std::vector<double>(10, 1.0), std::vector<bool>(10, true), 15);
  EXPECT_EQ(c.count.back(), 10u);
  EXPECT_DOUBLE_EQ(c.accuracy.back(), 1.0);
  EXPECT_TRUE(std::isnan(c.accuracy.front()));
  // One bin, midpoint 0.9, accuracy 0.7.
  std::vector<bool> ok(10, true);
  ok[0] = ok[1] = ok[2] = false;
  const CalibrationCurve one = calibration_curve(std::vector<double>(10, 0.9), ok, 5);
  EXPECT_NEAR(ece(one), 0.2, 1e-12);
  EXPECT_NEAR(mce(one), 0.2, 1e-12);
  EXPECT_THROW(calibration_curve({}, {}, 15), Error);
  EXPECT_THROW(calibration_curve({1.2}, {true}, 15), Error);
}

TEST(Metrics, CoinFlipBinIsBinomial) {
  Rng rng = make_rng(3, Stream::test);
  std::bernoulli_distribution coin(0.5);
  std::vector<double> conf(10000, 0.5);
  std::vector<bool> ok(10000);
  for (std::size_t i = 0; i < ok.size(); ++i) ok[i] = coin(rng);
  const CalibrationCurve c = calibration_curve(conf, ok, 15);
  EXPECT_NEAR(c.accuracy[7], 0.5, 3.0 * 0.5 / 100.0);
}

TEST(Metrics, OverconfidenceError) {
  std::vector<double> conf(1000, 0.999);
  std::vector<bool> ok(1000, true);
  for (std::size_t i = 0; i < 11; ++i) ok[i] = false;
  conf.push_back(0.5);  // below c_crit, ignored
  ok.push_back(false);
  EXPECT_NEAR(*oce(conf, ok), 11.0 / 3.0, 1e-9);
  EXPECT_EQ(*oce(std::vector<double>(5, 1.0), std::vector<bool>(5, true)), 0.0);
  EXPECT_NEAR(*oce(std::vector<double>(5, 1.0), std::vector<bool>(5, false)), 1.0 / 0.003, 1e-9);
  EXPECT_FALSE(oce({0.5}, {true}).has_value());
}

TEST(Metrics, PerfectlyCalibratedStream) {
  Rng rng = make_rng(4, Stream::test);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> conf(100000);
  std::vector<bool> ok(conf.size());
  for (std::size_t i = 0; i < conf.size(); ++i) {
    conf[i] = u(rng);
    ok[i] = u(rng) < conf[i];
  }
  EXPECT_LT(ece(calibration_curve(conf, ok)), 0.01);
}

TEST(Metrics, PerClassPairs) {
  Prediction p;
  p.posterior = {0.7, 0.2, 0.1};
  p.argmax = 0;
  std::vector<double> conf;
  std::vector<bool> ok;
  per_class_pairs({p, p}, {0, 2}, conf, ok);
  EXPECT_EQ(conf.size(), 6u);
  EXPECT_EQ(ok, (std::vector<bool>{true, false, false, false, false, true}));
}

TEST(Metrics, ReceptiveFieldOfConvFreeModelIsDownsamplingProduct) {
  const FlowModel model(rf_spec({"down:1", "haar", "coupling:1"}));
  perturb(model, 2);
  const Tensor images = random_tensor({4, 1, 8, 8}, 3, 0.0, 1.0);
  const ReceptiveField rf = effective_receptive_field(model, images);
  for (double v : rf.sensitivity) EXPECT_GE(v, 0.0);
  EXPECT_EQ(rf.support_width, 4u);
  std::size_t nonzero = 0;
  for (double v : rf.sensitivity) nonzero += v > 0.0;
  EXPECT_EQ(nonzero, 16u);

  const FlowModel wider(rf_spec({"down:1", "haar", "coupling:1", "coupling:3"}));
  perturb(wider, 2);
  EXPECT_GT(effective_receptive_field(wider, images).support_width, 4u);
}

TEST(Metrics, CorruptionSeverityZeroIsClean) {
  const Tensor x = random_tensor({2, 1, 4, 4}, 4, 0.0, 1.0);
  for (CorruptionKind k : all_corruptions()) {
    Rng rng = make_rng(0, Stream::corruption);
    const Tensor y = corrupt(x, k, 0, rng);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i]);
    Rng rng5 = make_rng(0, Stream::corruption);
    const Tensor worst = corrupt(x, k, 5, rng5);
    for (double v : worst.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_THROW(corruption_parameter(k, 6), Error);
  }
}

TEST(Metrics, CorruptionSuiteSelfBaseline) {
  const FlowModel model(rf_spec({"down:3", "coupling:1"}));
  perturb(model, 5);
  const Dataset clean = synth_bars(20, 2, {1, 8, 8}, 6);
  const auto preds = predict(model, clean.all());
  std::vector<double> ll;
  for (const auto& p : preds) ll.push_back(p.marginal);
  const CorruptionReport r = corruption_suite(model, clean, ScoreSet(ll), &model, 7);
  EXPECT_EQ(r.cells.size(), 25u);
  for (const auto& ratio : r.corruption_error) {
    if (ratio) EXPECT_NEAR(*ratio, 1.0, 1e-15);
  }
  const CorruptionReport nobase = corruption_suite(model, clean, ScoreSet(ll), nullptr, 7);
  EXPECT_FALSE(nobase.mce.has_value());
  EXPECT_EQ(corruption_csv(nobase), corruption_csv(corruption_suite(model, clean, ScoreSet(ll), nullptr, 7)));
}
