// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "diffuse/core.hpp"
#include "diffuse/predictor.hpp"
#include "diffuse/schedule.hpp"

#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace diffuse {

/// What a noise predictor is told about the step it is evaluated at.
struct StepContext {
  int index = 1;            // step of the chain being run (1-based)
  double position = 1.0;    // training-step position fed to the step embedding
  double alpha_bar = 1.0;   // alpha_bar of the chain at this step
};

/// eps_hat = f(x_t, step). The conditioner is bound inside the callable.
using NoisePredictor = std::function<Vector(const Vector& x_t, const StepContext& step)>;

/// Wraps network parameters and a conditioner; the conditioner encoding is
/// computed once and reused for every step.
template <typename Scalar>
NoisePredictor network_predictor(const PredictorParams<Scalar>& params, const Conditioner& cond,
                                 Eigen::Index length);

/// Analytic predictor that knows x0: returns the exact noise inside x_t.
NoisePredictor oracle_predictor(const Vector& x0);

/// Counts calls made through the wrapped predictor.
NoisePredictor counting_predictor(NoisePredictor inner, int& counter);

enum class Variant { rp, rp_n_in, rp_n_out, rp_n_in_out, srp };

std::string to_string(Variant v);
/// Accepts rp, rp-nin, rp-nout, rp-ninout, srp.
Variant parse_variant(const std::string& text);

struct FullSchedule {};
struct FastBetas {
  std::vector<double> user_betas;
};

struct SamplerSpec {
  Variant variant = Variant::srp;
  std::variant<FullSchedule, FastBetas> schedule_mode = FullSchedule{};
  GammaPolicy gamma_policy{};
  /// Weight of the noisy signal in the final mix of the N_out variants.
  double output_mix_weight = 0.2;
  /// Extra post-hoc mix applied after SRP (0 = gamma_1 is the only mix).
  double srp_post_mix = 0.0;

  void validate() const;
};

struct TraceRecord {
  int step = 0;
  double position = 0.0;
  double eps_norm = 0.0;
  double x_norm = 0.0;
};
using ReverseTrace = std::vector<TraceRecord>;

/// (1/sqrt(alpha_t)) (x_t - beta_t / sqrt(1 - abar_t) eps_hat).
Vector mu_theta(const Vector& x_t, int t, const Vector& eps_hat, const NoiseSchedule& schedule);

/// Plain reverse chain from x_start: x_{t-1} = mu + sigma_t z, z = 0 at t = 1.
/// `chain` supplies the coefficients and `positions` the embedding step of
/// each chain step (1..T for the training chain).
Vector run_reverse_chain(const NoisePredictor& predictor, Vector x_start, const NoiseSchedule& chain,
                         const std::vector<double>& positions, Rng& rng, ReverseTrace* trace = nullptr);

/// Supportive chain: starts from y and mixes sqrt(abar_{t-1}) y back in with
/// ratio gamma_t; residual noise scale sigma_hat_t.
Vector run_supportive_chain(const NoisePredictor& predictor, const Vector& y, const NoiseSchedule& chain,
                            const std::vector<double>& positions, const GammaPolicy& gamma_policy, Rng& rng,
                            ReverseTrace* trace = nullptr);

/// Training-chain positions 1..T.
std::vector<double> full_positions(const NoiseSchedule& schedule);

/// Reverse sampling from Gaussian noise of length `length`.
Vector reverse_sample(const NoisePredictor& predictor, Eigen::Index length, const NoiseSchedule& schedule, Rng& rng,
                      ReverseTrace* trace = nullptr);

Vector supportive_reverse_sample(const NoisePredictor& predictor, const Vector& y, const NoiseSchedule& schedule,
                                 const GammaPolicy& gamma_policy, Rng& rng, ReverseTrace* trace = nullptr);

/// Short-chain sampling with `fast`. For rp the start is replaced by
/// Gaussian noise; rp_n_in starts at `start`; srp runs the supportive chain
/// with start as y. rp_n_out / rp_n_in_out are handled by enhance().
Vector fast_sample(const NoisePredictor& predictor, const Vector& start, const FastSchedule& fast, Variant variant,
                   const GammaPolicy& gamma_policy, Rng& rng, ReverseTrace* trace = nullptr);

/// Runs the requested variant on noisy input y.
Vector enhance(const NoisePredictor& predictor, const Vector& y, const SamplerSpec& spec,
               const NoiseSchedule& train_schedule, Rng& rng, ReverseTrace* trace = nullptr);

/// (1 - w) x_hat + w y.
Vector mix_output(const Vector& x_hat, const Vector& y, double weight);

}  // namespace diffuse
