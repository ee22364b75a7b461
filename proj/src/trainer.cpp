// SPDX-License-Identifier: Apache-2.0
#include "diffuse/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

namespace diffuse {

namespace fs = std::filesystem;

namespace {

constexpr float kBeta1 = 0.9f;
constexpr float kBeta2 = 0.999f;
constexpr float kAdamEps = 1e-8f;
constexpr std::uint64_t kValidationSeed = 0x76616c6964ULL;

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_log(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

Vector pad_to(const Vector& x, Eigen::Index length) {
  Vector out = Vector::Zero(length);
  out.head(std::min(length, x.size())) = x.head(std::min(length, x.size()));
  return out;
}

Example crop_example(const Example& ex, Eigen::Index first_frame, int crop_length) {
  Example c;
  c.id = ex.id;
  c.source = ex.source;
  c.clean = ex.clean.segment(first_frame * kHop, crop_length);
  c.cond = crop_frames(ex.cond, first_frame, crop_length / kHop);
  return c;
}

Eigen::Index max_first_frame(const Example& ex, int crop_length) {
  return (ex.clean.size() - crop_length) / kHop;
}

std::vector<BatchItem<float>> to_items(const TrainBatch& batch) {
  std::vector<BatchItem<float>> items(batch.pairs.size());
  for (std::size_t i = 0; i < batch.pairs.size(); ++i) {
    const auto& p = batch.pairs[i];
    items[i].x_t = p.x_t.cast<float>();
    items[i].step_position = p.t;
    items[i].epsilon = p.epsilon.cast<float>();
    items[i].cond = &batch.crops[p.conditioner_key].cond;
  }
  return items;
}

Checkpoint make_checkpoint(const PredictorParams<float>& params, const AdamState& state,
                           const NoiseSchedule& schedule, const TrainConfig& config, int iteration,
                           double valid_loss) {
  Checkpoint ck{params, schedule, state, {}};
  ck.meta["phase"] = to_string(config.phase);
  ck.meta["iteration"] = std::to_string(iteration);
  ck.meta["valid_loss"] = fmt(valid_loss);
  ck.meta["seed"] = std::to_string(config.seed);
  ck.meta["crop_length"] = std::to_string(config.crop_length);
  ck.meta["valid_pairs_per_utterance"] = std::to_string(config.valid_pairs_per_utterance);
  return ck;
}

}  // namespace

std::string to_string(Phase p) { return p == Phase::pretrain ? "pretrain" : "finetune"; }

Phase parse_phase(const std::string& text) {
  if (text == "pretrain") return Phase::pretrain;
  if (text == "finetune") return Phase::finetune;
  throw std::invalid_argument("unknown phase '" + text + "' (expected pretrain or finetune)");
}

int conditioner_dim_for(Phase p) { return p == Phase::pretrain ? kMelBins : kLinearBins; }

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw std::invalid_argument("learning_rate must be finite and non-negative");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (max_iters < 0) throw std::invalid_argument("max_iters must be >= 0");
  if (early_stop_patience < 1) throw std::invalid_argument("early_stop_patience must be >= 1");
  if (crop_length < kHop || crop_length % kHop != 0)
    throw std::invalid_argument("crop_length must be a positive multiple of " + std::to_string(kHop));
  if (valid_interval < 1) throw std::invalid_argument("valid_interval must be >= 1");
  if (valid_pairs_per_utterance < 1) throw std::invalid_argument("valid_pairs_per_utterance must be >= 1");
  if (jobs < 1) throw std::invalid_argument("jobs must be >= 1");
}

Profile make_profile(const std::string& name) {
  if (name == "tiny") {
    PredictorConfig m;
    m.n_layers = 10;
    m.n_blocks = 1;
    m.residual_channels = 16;
    m.conditioner_channels = 16;
    m.step_encoding_dim = 64;
    m.step_hidden_dim = 64;
    TrainConfig t;
    t.batch_size = 8;
    t.crop_length = 2048;
    t.max_iters = 20000;
    return {name, m, linear_schedule(10, 0.01, 0.2), t};
  }
  if (name == "base") {
    TrainConfig t;
    t.batch_size = 16;
    return {name, PredictorConfig{}, linear_schedule(50, 1e-4, 0.05), t};
  }
  if (name == "large") {
    PredictorConfig m;
    m.residual_channels = 128;
    TrainConfig t;
    t.batch_size = 15;
    return {name, m, linear_schedule(200, 1e-4, 0.02), t};
  }
  throw std::invalid_argument("unknown profile '" + name + "' (expected tiny, base or large)");
}

AdamState init_adam(const PredictorParams<float>& params) {
  return {params.zeros_like(), params.zeros_like(), 0};
}

std::vector<Example> load_examples(const Manifest& manifest, const std::string& split, Phase phase,
                                   int crop_length) {
  std::vector<Example> out;
  for (const auto& rec : manifest.split(split)) {
    AudioBuffer clean = read_wav(rec.clean_path);
    require_sample_rate(clean);
    Example ex;
    ex.id = rec.id();
    Eigen::Index length = std::max<Eigen::Index>(clean.samples.size(), crop_length);
    length = frames_for_length(length) * kHop;
    ex.clean = pad_to(clean.samples, length);
    if (phase == Phase::pretrain) {
      ex.cond = mel_spectrogram({ex.clean, kSampleRate});
      ex.source = ConditionerSource::clean;
    } else {
      if (!rec.noisy_path) throw std::invalid_argument("finetune needs a noisy file for " + rec.clean_path);
      AudioBuffer noisy = read_wav(*rec.noisy_path);
      require_sample_rate(noisy);
      if (noisy.samples.size() != clean.samples.size())
        throw ShapeMismatch("clean and noisy lengths differ for " + rec.clean_path);
      ex.cond = stft_log_magnitude({pad_to(noisy.samples, length), kSampleRate});
      ex.source = ConditionerSource::noisy;
    }
    out.push_back(std::move(ex));
  }
  return out;
}

TrainBatch sample_batch(const std::vector<Example>& examples, int batch_size, int crop_length,
                        const NoiseSchedule& schedule, Rng& rng) {
  if (examples.empty()) throw std::invalid_argument("no training examples");
  TrainBatch b;
  for (int i = 0; i < batch_size; ++i) {
    const Example& ex = examples[rng.uniform_int(0, static_cast<std::int64_t>(examples.size()) - 1)];
    const Eigen::Index first = rng.uniform_int(0, max_first_frame(ex, crop_length));
    b.crops.push_back(crop_example(ex, first, crop_length));
    b.pairs.push_back(make_training_pair(b.crops.back().clean, schedule, rng, b.crops.size() - 1));
  }
  return b;
}

void check_phase(const TrainBatch& batch, Phase phase) {
  const auto want_kind = phase == Phase::pretrain ? ConditionerKind::mel : ConditionerKind::linear;
  const auto want_source = phase == Phase::pretrain ? ConditionerSource::clean : ConditionerSource::noisy;
  for (const auto& c : batch.crops)
    if (c.cond.kind != want_kind || c.source != want_source || c.cond.dim() != conditioner_dim_for(phase))
      throw std::logic_error("conditioner of '" + c.id + "' does not match the " + to_string(phase) + " phase");
  for (const auto& p : batch.pairs)
    if (p.conditioner_key >= batch.crops.size()) throw std::logic_error("training pair without a conditioner");
}

double train_step(PredictorParams<float>& params, AdamState& state, const TrainBatch& batch,
                  const NoiseSchedule& schedule, const TrainConfig& config) {
  check_phase(batch, config.phase);
  for (const auto& p : batch.pairs)
    if (p.t < 1 || p.t > schedule.steps()) throw std::invalid_argument("training pair step outside the schedule");
  const auto items = to_items(batch);
  PredictorParams<float> grads = params.zeros_like();
  const double loss = loss_and_grad<float>(params, items, grads, config.jobs);
  if (!std::isfinite(loss)) throw DivergenceError("non-finite training loss");
  if (!grads.all_finite()) throw DivergenceError("non-finite gradient");

  state.step += 1;
  const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(state.step));
  const float lr = static_cast<float>(config.learning_rate);
  std::vector<MatrixT<float>*> gs, ms, vs;
  grads.for_each([&](const std::string&, MatrixT<float>& g, bool) { gs.push_back(&g); });
  state.m.for_each([&](const std::string&, MatrixT<float>& m, bool) { ms.push_back(&m); });
  state.v.for_each([&](const std::string&, MatrixT<float>& v, bool) { vs.push_back(&v); });
  std::size_t k = 0;
  params.for_each([&](const std::string&, MatrixT<float>& p, bool) {
    auto& g = *gs[k];
    auto& m = *ms[k];
    auto& v = *vs[k];
    ++k;
    m = kBeta1 * m.array() + (1.0f - kBeta1) * g.array();
    v = kBeta2 * v.array() + (1.0f - kBeta2) * g.array().square();
    const auto m_hat = m.array() / static_cast<float>(bc1);
    const auto v_hat = v.array() / static_cast<float>(bc2);
    p.array() -= lr * (m_hat / (v_hat.sqrt() + kAdamEps));
  });
  return loss;
}

ValidationSet make_validation_set(const std::vector<Example>& examples, const NoiseSchedule& schedule,
                                  int crop_length, int pairs_per_utterance) {
  ValidationSet set;
  for (std::size_t u = 0; u < examples.size(); ++u) {
    Rng rng = Rng::stream(kValidationSeed, u);
    for (int k = 0; k < pairs_per_utterance; ++k) {
      const Eigen::Index first = rng.uniform_int(0, max_first_frame(examples[u], crop_length));
      set.batch.crops.push_back(crop_example(examples[u], first, crop_length));
      set.batch.pairs.push_back(
          make_training_pair(set.batch.crops.back().clean, schedule, rng, set.batch.crops.size() - 1));
    }
  }
  return set;
}

double validation_loss(const PredictorParams<float>& params, const ValidationSet& set, int chunk) {
  const auto items = to_items(set.batch);
  if (items.empty()) throw std::invalid_argument("empty validation set");
  double total = 0.0;
  for (std::size_t i = 0; i < items.size(); i += chunk) {
    const std::size_t n = std::min<std::size_t>(chunk, items.size() - i);
    total += batch_loss<float>(params, std::span(items).subspan(i, n)) * static_cast<double>(n);
  }
  return total / static_cast<double>(items.size());
}

TrainResult train_loop(const Manifest& manifest, const TrainConfig& config, const NoiseSchedule& schedule,
                       PredictorConfig model, const fs::path& out, std::optional<PredictorParams<float>> init,
                       std::ostream* log) {
  config.validate();
  model.conditioner_dim = conditioner_dim_for(config.phase);
  model.validate();
  const auto train = load_examples(manifest, "train", config.phase, config.crop_length);
  const auto valid = load_examples(manifest, "valid", config.phase, config.crop_length);
  if (train.empty()) throw std::invalid_argument("manifest has no train records");
  if (valid.empty()) throw std::invalid_argument("manifest has no valid records");
  const ValidationSet vset =
      make_validation_set(valid, schedule, config.crop_length, config.valid_pairs_per_utterance);

  PredictorParams<float> params;
  if (init) {
    if (!(init->config == model))
      throw std::invalid_argument("initial parameters do not match the model configuration");
    params = std::move(*init);
  } else {
    Rng init_rng = Rng::stream(config.seed, 1);
    params = init_params<float>(model, init_rng);
  }
  AdamState state = init_adam(params);
  Rng rng = Rng::stream(config.seed, 2);

  TrainResult result;
  result.checkpoint = out;
  auto emit = [&](int it, std::optional<double> train_loss, std::optional<double> valid_loss) {
    if (!log) return;
    *log << it << '\t' << (train_loss ? fmt_log(*train_loss) : "-") << '\t'
         << (valid_loss ? fmt_log(*valid_loss) : "-") << '\n';
    log->flush();
  };
  if (log) *log << "iter\ttrain_loss\tvalid_loss\n";

  const double v0 = validation_loss(params, vset);
  result.best_valid_loss = result.last_valid_loss = v0;
  save_checkpoint(out, make_checkpoint(params, state, schedule, config, 0, v0));
  emit(0, std::nullopt, v0);

  int stale = 0;
  double running = 0.0;
  int running_n = 0;
  for (int it = 1; it <= config.max_iters; ++it) {
    const TrainBatch batch = sample_batch(train, config.batch_size, config.crop_length, schedule, rng);
    double loss = 0.0;
    try {
      loss = train_step(params, state, batch, schedule, config);
    } catch (const DivergenceError&) {
      result.diverged = true;
      result.last_iteration = it;
      if (log) *log << "# diverged at iteration " << it << "; keeping iteration " << result.best_iteration << '\n';
      return result;
    }
    result.last_iteration = it;
    running += loss;
    ++running_n;
    const bool validate_now = it % config.valid_interval == 0 || it == config.max_iters;
    std::optional<double> v;
    if (validate_now) {
      v = validation_loss(params, vset);
      result.last_valid_loss = *v;
      if (!std::isfinite(*v)) {
        result.diverged = true;
        emit(it, running / running_n, *v);
        return result;
      }
      if (*v < result.best_valid_loss) {
        result.best_valid_loss = *v;
        result.best_iteration = it;
        stale = 0;
        save_checkpoint(out, make_checkpoint(params, state, schedule, config, it, *v));
      } else {
        ++stale;
      }
    }
    if (validate_now || it % config.log_interval == 0) {
      emit(it, running / running_n, v);
      running = 0.0;
      running_n = 0;
    }
    if (stale >= config.early_stop_patience) {
      result.stopped_early = true;
      break;
    }
  }
  return result;
}

PredictorParams<float> finetune_start(const PredictorParams<float>& pretrained, std::uint64_t seed) {
  Rng rng = Rng::stream(seed, 3);
  return reset_conditioner_encoder<float>(pretrained, kLinearBins, rng);
}

TrainResult pretrain_then_finetune(const Manifest& pretrain_manifest, const Manifest& finetune_manifest,
                                   const TrainConfig& pretrain, const TrainConfig& finetune,
                                   const NoiseSchedule& schedule, const PredictorConfig& model,
                                   const fs::path& pretrain_out, const fs::path& finetune_out, std::ostream* log) {
  if (pretrain.phase != Phase::pretrain || finetune.phase != Phase::finetune)
    throw std::invalid_argument("pretrain_then_finetune needs a pretrain and a finetune configuration");
  std::optional<PredictorParams<float>> start;
  if (pretrain.max_iters > 0) {
    if (log) *log << "# phase pretrain\n";
    const TrainResult first = train_loop(pretrain_manifest, pretrain, schedule, model, pretrain_out,
                                         std::nullopt, log);
    start = finetune_start(load_checkpoint(first.checkpoint).params, finetune.seed);
  }
  if (log) *log << "# phase finetune\n";
  return train_loop(finetune_manifest, finetune, schedule, model, finetune_out, std::move(start), log);
}

}  // namespace diffuse
