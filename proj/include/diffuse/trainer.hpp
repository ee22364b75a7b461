// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "diffuse/checkpoint.hpp"
#include "diffuse/diffusion.hpp"
#include "diffuse/predictor.hpp"
#include "diffuse/schedule.hpp"
#include "diffuse/signal.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace diffuse {

/// pretrain: clean Mel conditioner computed from the waveform being
/// corrupted. finetune: linear log-spectrum of the paired noisy waveform.
enum class Phase { pretrain, finetune };

std::string to_string(Phase p);
Phase parse_phase(const std::string& text);
/// Conditioner width used by a phase (80 or 513).
int conditioner_dim_for(Phase p);

struct TrainConfig {
  double learning_rate = 2e-4;
  int batch_size = 16;
  int max_iters = 10000;
  /// Validation checks without improvement before stopping.
  int early_stop_patience = 10;
  Phase phase = Phase::finetune;
  std::uint64_t seed = 0;
  /// Training crop in samples; a multiple of the hop size.
  int crop_length = 16384;
  int valid_interval = 500;
  /// Fixed (crop, t, eps) draws per validation utterance.
  int valid_pairs_per_utterance = 4;
  int log_interval = 100;
  int jobs = 1;

  void validate() const;
};

/// A named bundle of architecture, schedule and training defaults.
struct Profile {
  std::string name;
  PredictorConfig model;
  NoiseSchedule schedule;
  TrainConfig train;
};

/// tiny, base or large.
Profile make_profile(const std::string& name);

AdamState init_adam(const PredictorParams<float>& params);

enum class ConditionerSource { clean, noisy };

/// One training utterance with its full-length conditioner.
struct Example {
  std::string id;
  Vector clean;  // zero-padded to a whole number of hops, at least one crop
  Conditioner cond;
  ConditionerSource source = ConditionerSource::clean;
};

/// Reads every record of `split` and computes the conditioner `phase` needs.
std::vector<Example> load_examples(const Manifest& manifest, const std::string& split, Phase phase,
                                   int crop_length);

/// Corrupted crops ready for the loss: pairs[i] belongs to crops[i].
struct TrainBatch {
  std::vector<Example> crops;
  std::vector<TrainingPair> pairs;
};

/// Draws `batch_size` examples with replacement, a random hop-aligned crop of
/// each, and a training pair per crop.
TrainBatch sample_batch(const std::vector<Example>& examples, int batch_size, int crop_length,
                        const NoiseSchedule& schedule, Rng& rng);

/// Throws std::logic_error if any conditioner does not match `phase`.
void check_phase(const TrainBatch& batch, Phase phase);

/// One adaptive-moment update on `batch`; returns the loss before the
/// update. A non-finite loss throws DivergenceError and leaves params and
/// state untouched.
double train_step(PredictorParams<float>& params, AdamState& state, const TrainBatch& batch,
                  const NoiseSchedule& schedule, const TrainConfig& config);

/// Fixed corruption of the valid split used for every validation check.
struct ValidationSet {
  TrainBatch batch;
};

ValidationSet make_validation_set(const std::vector<Example>& examples, const NoiseSchedule& schedule,
                                  int crop_length, int pairs_per_utterance);
double validation_loss(const PredictorParams<float>& params, const ValidationSet& set, int chunk = 16);

struct TrainResult {
  std::filesystem::path checkpoint;
  int best_iteration = 0;
  double best_valid_loss = 0.0;
  int last_iteration = 0;
  double last_valid_loss = 0.0;
  bool diverged = false;
  bool stopped_early = false;
};

/// Trains from `init` (or a fresh initialization when empty) and writes the
/// best-validation checkpoint to `out`. Log records are
/// "iter<TAB>train_loss<TAB>valid_loss", "-" where a value was not computed.
TrainResult train_loop(const Manifest& manifest, const TrainConfig& config, const NoiseSchedule& schedule,
                       PredictorConfig model, const std::filesystem::path& out,
                       std::optional<PredictorParams<float>> init = std::nullopt, std::ostream* log = nullptr);

/// Pretraining on clean Mel conditioners, conditioner-encoder reset to 513
/// inputs, then fine-tuning on noisy spectra. With pretrain.max_iters == 0
/// phase one is skipped and nothing is written to `pretrain_out`.
TrainResult pretrain_then_finetune(const Manifest& pretrain_manifest, const Manifest& finetune_manifest,
                                   const TrainConfig& pretrain, const TrainConfig& finetune,
                                   const NoiseSchedule& schedule, const PredictorConfig& model,
                                   const std::filesystem::path& pretrain_out,
                                   const std::filesystem::path& finetune_out, std::ostream* log = nullptr);

/// Parameters after the phase transition: everything from `pretrained`
/// except a fresh conditioner encoder for noisy spectra.
PredictorParams<float> finetune_start(const PredictorParams<float>& pretrained, std::uint64_t seed);

}  // namespace diffuse
