// SPDX-License-Identifier: Apache-2.0
#include "diffuse/cli.hpp"
#include "diffuse/diffusion.hpp"
#include "diffuse/metrics.hpp"
#include "diffuse/predictor.hpp"
#include "diffuse/sampler.hpp"
#include "diffuse/schedule.hpp"
#include "diffuse/signal.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <exception>
#include <functional>

namespace diffuse {

namespace {

std::string printf_string(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

CheckResult guarded(const std::string& name, const std::function<CheckResult()>& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    return {name, false, std::string("exception: ") + e.what()};
  }
}

CheckResult schedule_algebra(const std::string& label, const NoiseSchedule& s) {
  constexpr double tol = 1e-12;
  double abar_err = 0.0, sigma_err = 0.0, sigma_hat_max = 0.0;
  double abar_prev = 1.0;
  for (int t = 1; t <= s.steps(); ++t) {
    const double abar = abar_prev * (1.0 - s.beta(t));
    abar_err = std::max(abar_err, std::abs(s.alpha_bar(t) - s.alpha_bar(t - 1) * (1.0 - s.beta(t))));
    abar_err = std::max(abar_err, std::abs(s.alpha_bar(t) - abar));
    const double expect = t == 1 ? std::sqrt(s.beta(1)) : std::sqrt((1.0 - abar_prev) / (1.0 - abar) * s.beta(t));
    sigma_err = std::max(sigma_err, std::abs(s.sigma(t) - expect));
    if (t > 1) sigma_hat_max = std::max(sigma_hat_max, srp_sigma_hat_clamped(s, GammaPolicy{}, t));
    abar_prev = abar;
  }
  const bool ok = abar_err <= tol && sigma_err <= tol && sigma_hat_max <= tol;
  return {"schedule-algebra " + label, ok,
          printf_string("max|abar err|=%.3g max|sigma err|=%.3g max sigma_hat(t>1)=%.3g (tol %.0e)", abar_err,
                        sigma_err, sigma_hat_max, tol)};
}

CheckResult forward_consistency(const std::string& label, const NoiseSchedule& s, int n, Rng& rng) {
  constexpr double tol = 0.02;
  Vector sign(n);
  for (int i = 0; i < n; ++i) sign[i] = i % 2 ? -1.0 : 1.0;
  const int T = s.steps();
  const std::vector<int> probes{1, T / 2, T};
  DiffusionState state{sign, 0};
  double worst = 0.0;
  std::string detail;
  for (int probe : probes) {
    while (state.t < probe) state = q_step(state, s, rng);
    const Vector aligned = state.x.cwiseProduct(sign);
    const double mean = aligned.mean();
    const double var = (aligned.array() - mean).square().mean();
    const double want_mean = std::sqrt(s.alpha_bar(probe));
    const double want_var = 1.0 - s.alpha_bar(probe);
    const double em = std::abs(mean - want_mean) / want_mean;
    const double ev = std::abs(var - want_var) / want_var;
    worst = std::max({worst, em, ev});
    detail += printf_string("t=%d mean %.5g/%.5g var %.5g/%.5g; ", probe, mean, want_mean, var, want_var);
  }
  detail += printf_string("worst rel err %.4f (tol %.2f, %d trajectories)", worst, tol, n);
  return {"forward-consistency " + label, worst <= tol, detail};
}

CheckResult oracle_inversion(const NoiseSchedule& s, Rng& rng) {
  constexpr double tol = 1e-10;
  double worst = 0.0;
  for (int k = 0; k < 1000; ++k) {
    const int t = static_cast<int>(rng.uniform_int(1, s.steps()));
    const Vector x0 = rng.normal_vector(64) * 0.5;
    const Vector eps = rng.normal_vector(64);
    const Vector x_t = q_sample(x0, t, eps, s);
    worst = std::max(worst, (oracle_predict(x_t, t, x0, s) - eps).cwiseAbs().maxCoeff());
  }
  return {"oracle-inversion", worst <= tol, printf_string("max|eps_hat - eps|=%.3g over 1000 triples (tol %.0e)", worst, tol)};
}

CheckResult srp_fixed_point(const NoiseSchedule& s, Rng& rng) {
  constexpr double tol = 1e-6;
  const Vector x0 = synth_speech(8000, rng);
  const auto pred = oracle_predictor(x0);
  Rng full_rng = rng.split();
  const Vector full = supportive_reverse_sample(pred, x0, s, GammaPolicy{}, full_rng);
  const FastSchedule fast = fast_alignment(s, base_fast_betas());
  Rng fast_rng = rng.split();
  const Vector quick = fast_sample(pred, x0, fast, Variant::srp, GammaPolicy{}, fast_rng);
  const double e_full = (full - x0).norm() / x0.norm();
  const double e_fast = (quick - x0).norm() / x0.norm();
  return {"srp-clean-fixed-point", e_full <= tol && e_fast <= tol,
          printf_string("rel L2 err full=%.3g fast=%.3g (tol %.0e)", e_full, e_fast, tol)};
}

CheckResult srp_recovery(const NoiseSchedule& s, Rng& rng) {
  constexpr double threshold = 5.0;
  const Vector x0 = synth_speech(16000, rng);
  Vector noise = synth_noise(NoiseKind::white, x0.size(), rng);
  noise *= std::sqrt(energy(x0) / (energy(noise) * std::pow(10.0, 5.0 / 10.0)));
  const Vector y = x0 + noise;
  const Vector out = supportive_reverse_sample(oracle_predictor(x0), y, s, GammaPolicy{}, rng);
  const double before = si_sdr(x0, y);
  const double after = si_sdr(x0, out);
  return {"srp-oracle-recovery", after - before >= threshold,
          printf_string("input SNR %.2f dB, SI-SDR %.2f -> %.2f dB, gain %.2f dB (threshold %.1f)", snr_db(x0, noise),
                        before, after, after - before, threshold)};
}

CheckResult fast_reduction(const NoiseSchedule& s, std::uint64_t seed) {
  Rng data(seed);
  const Vector x0 = synth_speech(4000, data);
  const Vector y = x0 + 0.1 * data.normal_vector(x0.size());
  const auto pred = oracle_predictor(x0);
  const FastSchedule identity = fast_alignment(s, s.betas());
  bool identical = true;
  double pos_err = 0.0;
  for (int t = 1; t <= s.steps(); ++t) pos_err = std::max(pos_err, std::abs(identity.step_positions[t - 1] - t));
  for (Variant v : {Variant::rp, Variant::rp_n_in, Variant::srp}) {
    Rng a = Rng::stream(seed, 11), b = Rng::stream(seed, 11);
    Vector full;
    if (v == Variant::rp) full = reverse_sample(pred, y.size(), s, a);
    else if (v == Variant::rp_n_in) full = run_reverse_chain(pred, y, s, full_positions(s), a);
    else full = supportive_reverse_sample(pred, y, s, GammaPolicy{}, a);
    const Vector quick = fast_sample(pred, y, identity, v, GammaPolicy{}, b);
    identical = identical && full.size() == quick.size() &&
                std::memcmp(full.data(), quick.data(), sizeof(double) * full.size()) == 0;
  }
  int calls = 0;
  Rng c(seed);
  fast_sample(counting_predictor(pred, calls), y, fast_alignment(s, base_fast_betas()), Variant::srp, GammaPolicy{}, c);
  const bool ok = identical && pos_err == 0.0 && calls == 6;
  return {"fast-identity-reduction", ok,
          printf_string("bit-identical=%s max|position - t|=%.3g six-step predictor calls=%d (want 6)",
                        identical ? "yes" : "no", pos_err, calls)};
}

}  // namespace

std::vector<CheckResult> oracle_check(const OracleCheckOptions& options) {
  NoiseSchedule base = linear_schedule(50, 1e-4, 0.05);
  const NoiseSchedule large = linear_schedule(200, 1e-4, 0.02);
  if (options.corrupt_sigma) base = base.with_corrupted_sigma(options.corrupt_sigma->first, options.corrupt_sigma->second);
  std::vector<CheckResult> out;
  const auto add = [&](const std::string& name, auto&& check) {
    if (name.rfind(options.only, 0) == 0) out.push_back(guarded(name, check));
  };
  add("schedule-algebra base", [&] { return schedule_algebra("base", base); });
  add("schedule-algebra large", [&] { return schedule_algebra("large", large); });
  add("forward-consistency base", [&] {
    Rng rng = Rng::stream(options.seed, 1);
    return forward_consistency("base", base, options.mc_trajectories, rng);
  });
  add("forward-consistency large", [&] {
    Rng rng = Rng::stream(options.seed, 2);
    return forward_consistency("large", large, options.mc_trajectories, rng);
  });
  add("oracle-inversion", [&] {
    Rng rng = Rng::stream(options.seed, 3);
    return oracle_inversion(base, rng);
  });
  add("srp-clean-fixed-point", [&] {
    Rng rng = Rng::stream(options.seed, 4);
    return srp_fixed_point(base, rng);
  });
  add("srp-oracle-recovery", [&] {
    Rng rng = Rng::stream(options.seed, 5);
    return srp_recovery(base, rng);
  });
  add("fast-identity-reduction", [&] { return fast_reduction(base, options.seed); });
  return out;
}

}  // namespace diffuse
