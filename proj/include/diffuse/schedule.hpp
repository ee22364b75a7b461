// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "diffuse/core.hpp"

#include <string>
#include <vector>

namespace diffuse {

/// Step-indexed constants of the forward and reverse chains.
///
/// Steps are 1-based: t = 1..T. alpha_bar(0) is defined as 1, which makes
/// sigma(1) = sqrt(beta(1)). All arithmetic is in double precision.
/// Immutable once built; safe to share across threads.
class NoiseSchedule {
 public:
  /// Builds from an explicit beta list (each in (0,1)).
  static NoiseSchedule from_betas(std::vector<double> betas);

  int steps() const { return static_cast<int>(betas_.size()); }

  double beta(int t) const;
  double alpha(int t) const;
  /// Defined on 0..T with alpha_bar(0) = 1.
  double alpha_bar(int t) const;
  double sigma(int t) const;

  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alphas() const { return alphas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }
  const std::vector<double>& sigmas() const { return sigmas_; }

  /// Linear-schedule bounds when built by linear_schedule (0 otherwise).
  bool is_linear() const { return linear_; }
  double beta_min() const { return beta_min_; }
  double beta_max() const { return beta_max_; }

  /// Key/value text form stored inside checkpoints.
  std::string to_text() const;
  static NoiseSchedule from_text(const std::string& text);

  /// Copy with sigma(t) replaced; used only to exercise self-check failures.
  NoiseSchedule with_corrupted_sigma(int t, double value) const;

  friend NoiseSchedule linear_schedule(int, double, double);

 private:
  NoiseSchedule() = default;
  void populate();
  void check_step(int t) const;

  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
  std::vector<double> sigmas_;
  bool linear_ = false;
  double beta_min_ = 0.0;
  double beta_max_ = 0.0;
};

NoiseSchedule linear_schedule(int steps, double beta_min, double beta_max);

/// sigma_t = sqrt(((1 - abar_{t-1}) / (1 - abar_t)) * beta_t).
double sigma(const NoiseSchedule& s, int t);

struct GammaPolicy {
  double gamma1 = 0.2;
};

/// Mixing ratio of the noisy signal at step t: sigma_t / sqrt(abar_{t-1})
/// for t > 1, gamma1 at t = 1.
double gamma(const NoiseSchedule& s, const GammaPolicy& p, int t);

/// Residual noise scale of the supportive step,
/// sqrt(sigma_t^2 - gamma_t^2 abar_{t-1}). Radicands within rounding of
/// zero are treated as zero; a genuinely negative one throws
/// NegativeVariance.
double srp_sigma_hat(const NoiseSchedule& s, const GammaPolicy& p, int t);

/// Same as srp_sigma_hat but clamps a negative radicand to zero.
double srp_sigma_hat_clamped(const NoiseSchedule& s, const GammaPolicy& p, int t);

/// A short inference chain aligned to a training schedule.
struct FastSchedule {
  std::vector<double> user_betas;
  /// Chain constants computed from user_betas exactly like a training
  /// schedule (alpha_bar, sigma, gamma all come from here).
  NoiseSchedule chain;
  /// Fractional training-step position for each inference step, 1-based
  /// steps mapped onto [0, T].
  std::vector<double> step_positions;

  int steps() const { return chain.steps(); }
  const std::vector<double>& fast_alpha_bars() const { return chain.alpha_bars(); }
  const std::vector<double>& fast_sigmas() const { return chain.sigmas(); }
};

/// Aligns user_betas to `train` by linear interpolation in sqrt(alpha_bar).
FastSchedule fast_alignment(const NoiseSchedule& train, const std::vector<double>& user_betas);

/// Six-step inference schedules for the base and large profiles.
std::vector<double> base_fast_betas();
std::vector<double> large_fast_betas();

/// Parses "a,b,c" into doubles.
std::vector<double> parse_beta_list(const std::string& text);

}  // namespace diffuse
