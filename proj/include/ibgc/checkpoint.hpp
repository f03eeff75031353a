#pragma once

// JSON experiment configuration and the IBGC1 checkpoint format.

#include <memory>
#include <optional>
#include <string>

#include "ibgc/model.hpp"
#include "ibgc/ood.hpp"
#include "ibgc/trainer.hpp"

namespace ibgc {

/// One flat JSON object. Keys and defaults:
///   seed 0 (shared by model init and training)
///   input_channels 1, input_height 16, input_width 16, classes 4,
///   layout [default_layout()], hidden 32, clamp 2, s0 0.1, gamma_init 10,
///   rank 8, mu_init 3,
///   lr 0.02, momentum 0.9, weight_decay 1e-4, cooling_factor 10,
///   max_coolings 2, plateau_patience 5, batch_size 64, epochs 20,
///   beta 2 (a number or "inf"), label_smoothing 0.05,
///   dequant_amplitude 1/255, flip true, crop true, quantized false.
/// Unknown keys are rejected.
struct ExperimentConfig {
  ModelSpec model;
  TrainConfig train;
};

ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config(const std::string& path);
/// Every key with its effective value, keys sorted.
std::string config_json(const ExperimentConfig& cfg);

struct Checkpoint {
  ExperimentConfig config;
  std::unique_ptr<FlowModel> model;
  std::optional<ScoreSet> refs;  // training log-likelihoods for the OoD tests
};

/// "IBGC1", u32 version, u64 length + config JSON, u32 parameter count,
/// per parameter (u32 name length, name, u32 rank, u64 extents), f64 payload
/// in manifest order, u64 score count + f64 scores. All little-endian.
void save_checkpoint(const FlowModel& model, const ExperimentConfig& config, const std::optional<ScoreSet>& refs,
                     const std::string& path);
std::string checkpoint_bytes(const FlowModel& model, const ExperimentConfig& config,
                             const std::optional<ScoreSet>& refs);
Checkpoint load_checkpoint(const std::string& path);
Checkpoint parse_checkpoint(const std::string& bytes);

inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace ibgc
