#pragma once

// SGD-with-momentum training of the IB objective with plateau cooling and
// augmentation, plus held-out evaluation.

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "ibgc/data.hpp"
#include "ibgc/model.hpp"

namespace ibgc {

struct TrainConfig {
  double lr0 = 0.02;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double cooling_factor = 10.0;
  std::size_t max_coolings = 2;
  std::size_t plateau_patience = 5;
  std::size_t batch_size = 64;
  std::size_t epochs = 20;
  double beta = 2.0;  // kInfiniteBeta for the pure cross-entropy objective
  double label_smoothing = 0.05;
  double dequant_amplitude = 1.0 / 255.0;
  bool flip = true;
  bool crop = true;
  bool quantized = false;  // report bits/dim in the 8-bit convention
  std::uint64_t seed = 0;

  void validate() const;
};

struct OptState {
  std::vector<std::vector<double>> velocity;  // one buffer per trainable parameter
  double lr = 0.0;
  std::size_t coolings = 0;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t epochs_since_best = 0;
};

OptState make_opt_state(const std::vector<Parameter>& trainable, const TrainConfig& cfg);

/// v <- momentum * v + (g + wd * p); p <- p - lr * v. Weight decay only for
/// parameters flagged `decay`.
void sgd_momentum_step(std::vector<Parameter>& trainable, const std::vector<std::vector<double>>& grads,
                       OptState& state, const TrainConfig& cfg);

/// Cools the learning rate after `plateau_patience` epochs without a new best
/// loss, at most `max_coolings` times. Returns the learning rate to use next.
double plateau_schedule(OptState& state, double epoch_loss, const TrainConfig& cfg);

/// Horizontal flip with probability 1/2, random shift by up to one pixel with
/// zero fill (crop of a 1-pixel padded image), dequantization noise.
Tensor augment(const Tensor& batch, const TrainConfig& cfg, Rng& rng);
/// Mirrors every image left-right.
Tensor flip_horizontal(const Tensor& batch);

struct EpochStats {
  std::size_t epoch = 0;
  double lr = 0.0;
  double l_x = std::numeric_limits<double>::quiet_NaN();  // NaN when not computed
  double l_y = std::numeric_limits<double>::quiet_NaN();
  double total = 0.0;
  double acc = 0.0;
  double bpd = 0.0;
};

std::string epoch_csv_header();
std::string epoch_csv_row(const EpochStats& s);

using EpochCallback = std::function<void(const EpochStats&)>;

/// Deterministic for a fixed config seed. Throws a numeric error when the loss
/// becomes non-finite.
std::vector<EpochStats> train(FlowModel& model, const Dataset& data, const TrainConfig& cfg,
                              const EpochCallback& on_epoch = {});

struct EvalStats {
  double acc = 0.0;
  double bpd = 0.0;
  double mean_log_likelihood = 0.0;
  double mean_entropy = 0.0;
  std::vector<Prediction> predictions;
};

EvalStats evaluate(const FlowModel& model, const Dataset& data, bool quantized = false);

std::vector<Parameter> trainable_parameters(const FlowModel& model);

}  // namespace ibgc
