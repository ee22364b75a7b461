// SPDX-License-Identifier: Apache-2.0
#include "diffuse/sampler.hpp"

#include <cmath>
#include <memory>
#include <sstream>

namespace diffuse {

template <typename Scalar>
NoisePredictor network_predictor(const PredictorParams<Scalar>& params, const Conditioner& cond, Eigen::Index length) {
  auto encoded = std::make_shared<const MatrixT<Scalar>>(encode_conditioner(params, cond, length));
  const PredictorParams<Scalar>* p = &params;
  return [p, encoded](const Vector& x_t, const StepContext& step) -> Vector {
    const VectorT<Scalar> x = x_t.template cast<Scalar>();
    return predict_noise_encoded(*p, x, step.position, *encoded).template cast<double>();
  };
}

template NoisePredictor network_predictor<float>(const PredictorParams<float>&, const Conditioner&, Eigen::Index);
template NoisePredictor network_predictor<double>(const PredictorParams<double>&, const Conditioner&, Eigen::Index);

NoisePredictor oracle_predictor(const Vector& x0) {
  return [x0](const Vector& x_t, const StepContext& step) {
    return oracle_predict_alpha_bar(x_t, step.alpha_bar, x0);
  };
}

NoisePredictor counting_predictor(NoisePredictor inner, int& counter) {
  return [inner = std::move(inner), &counter](const Vector& x_t, const StepContext& step) {
    ++counter;
    return inner(x_t, step);
  };
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::rp: return "rp";
    case Variant::rp_n_in: return "rp-nin";
    case Variant::rp_n_out: return "rp-nout";
    case Variant::rp_n_in_out: return "rp-ninout";
    case Variant::srp: return "srp";
  }
  return "?";
}

Variant parse_variant(const std::string& text) {
  if (text == "rp") return Variant::rp;
  if (text == "rp-nin") return Variant::rp_n_in;
  if (text == "rp-nout") return Variant::rp_n_out;
  if (text == "rp-ninout") return Variant::rp_n_in_out;
  if (text == "srp") return Variant::srp;
  throw std::invalid_argument("unknown sampler variant '" + text + "' (rp, rp-nin, rp-nout, rp-ninout, srp)");
}

void SamplerSpec::validate() const {
  if (!(output_mix_weight >= 0.0 && output_mix_weight <= 1.0))
    throw std::invalid_argument("output mix weight must lie in [0, 1]");
  if (!(srp_post_mix >= 0.0 && srp_post_mix <= 1.0))
    throw std::invalid_argument("SRP post mix must lie in [0, 1]");
  if (!std::isfinite(gamma_policy.gamma1)) throw std::invalid_argument("gamma1 must be finite");
  if (const auto* fast = std::get_if<FastBetas>(&schedule_mode)) {
    if (fast->user_betas.empty()) throw std::invalid_argument("fast schedule needs at least one beta");
    for (double b : fast->user_betas)
      if (!(b > 0.0 && b < 1.0)) throw std::invalid_argument("fast betas must lie in (0, 1)");
  }
}

Vector mu_theta(const Vector& x_t, int t, const Vector& eps_hat, const NoiseSchedule& schedule) {
  if (t < 1) throw std::out_of_range("mu_theta: t must be >= 1");
  if (x_t.size() != eps_hat.size()) throw ShapeMismatch("mu_theta: x_t and eps_hat differ in length");
  const double beta = schedule.beta(t);
  const double coeff = beta / std::sqrt(1.0 - schedule.alpha_bar(t));
  return (x_t - coeff * eps_hat) / std::sqrt(schedule.alpha(t));
}

namespace {

void check_finite(const Vector& v, const char* what, int t) {
  if (!v.allFinite()) {
    std::ostringstream msg;
    msg << "reverse process diverged: non-finite " << what << " at step " << t;
    throw DivergenceError(msg.str());
  }
}

void check_positions(const NoiseSchedule& chain, const std::vector<double>& positions) {
  if (static_cast<int>(positions.size()) != chain.steps())
    throw std::invalid_argument("reverse chain: one embedding position per step required");
}

}  // namespace

std::vector<double> full_positions(const NoiseSchedule& schedule) {
  std::vector<double> p(static_cast<std::size_t>(schedule.steps()));
  for (int t = 1; t <= schedule.steps(); ++t) p[t - 1] = static_cast<double>(t);
  return p;
}

Vector run_reverse_chain(const NoisePredictor& predictor, Vector x, const NoiseSchedule& chain,
                         const std::vector<double>& positions, Rng& rng, ReverseTrace* trace) {
  check_positions(chain, positions);
  for (int t = chain.steps(); t >= 1; --t) {
    const StepContext ctx{t, positions[t - 1], chain.alpha_bar(t)};
    const Vector eps = predictor(x, ctx);
    check_finite(eps, "noise estimate", t);
    if (trace) trace->push_back({t, ctx.position, eps.norm(), x.norm()});
    Vector next = mu_theta(x, t, eps, chain);
    if (t > 1) next += chain.sigma(t) * rng.normal_vector(x.size());
    check_finite(next, "state", t);
    x = std::move(next);
  }
  return x;
}

Vector run_supportive_chain(const NoisePredictor& predictor, const Vector& y, const NoiseSchedule& chain,
                            const std::vector<double>& positions, const GammaPolicy& gamma_policy, Rng& rng,
                            ReverseTrace* trace) {
  check_positions(chain, positions);
  Vector x = y;
  for (int t = chain.steps(); t >= 1; --t) {
    const StepContext ctx{t, positions[t - 1], chain.alpha_bar(t)};
    const Vector eps = predictor(x, ctx);
    check_finite(eps, "noise estimate", t);
    if (trace) trace->push_back({t, ctx.position, eps.norm(), x.norm()});
    const double g = gamma(chain, gamma_policy, t);
    Vector next = (1.0 - g) * mu_theta(x, t, eps, chain) + (g * std::sqrt(chain.alpha_bar(t - 1))) * y;
    if (t > 1) {
      const double scale = srp_sigma_hat(chain, gamma_policy, t);
      if (scale > 0.0) next += scale * rng.normal_vector(x.size());
    }
    check_finite(next, "state", t);
    x = std::move(next);
  }
  return x;
}

Vector reverse_sample(const NoisePredictor& predictor, Eigen::Index length, const NoiseSchedule& schedule, Rng& rng,
                      ReverseTrace* trace) {
  if (length <= 0) throw std::invalid_argument("reverse_sample: length must be positive");
  Vector start = rng.normal_vector(length);
  return run_reverse_chain(predictor, std::move(start), schedule, full_positions(schedule), rng, trace);
}

Vector supportive_reverse_sample(const NoisePredictor& predictor, const Vector& y, const NoiseSchedule& schedule,
                                 const GammaPolicy& gamma_policy, Rng& rng, ReverseTrace* trace) {
  if (y.size() == 0) throw std::invalid_argument("supportive_reverse_sample: empty input");
  return run_supportive_chain(predictor, y, schedule, full_positions(schedule), gamma_policy, rng, trace);
}

Vector fast_sample(const NoisePredictor& predictor, const Vector& start, const FastSchedule& fast, Variant variant,
                   const GammaPolicy& gamma_policy, Rng& rng, ReverseTrace* trace) {
  if (start.size() == 0) throw std::invalid_argument("fast_sample: empty input");
  switch (variant) {
    case Variant::rp:
      return run_reverse_chain(predictor, rng.normal_vector(start.size()), fast.chain, fast.step_positions, rng,
                               trace);
    case Variant::rp_n_in:
      return run_reverse_chain(predictor, start, fast.chain, fast.step_positions, rng, trace);
    case Variant::srp:
      return run_supportive_chain(predictor, start, fast.chain, fast.step_positions, gamma_policy, rng, trace);
    default:
      throw std::invalid_argument("fast_sample: output-mix variants are composed by enhance()");
  }
}

Vector mix_output(const Vector& x_hat, const Vector& y, double weight) {
  if (x_hat.size() != y.size()) throw ShapeMismatch("mix_output: length mismatch");
  return (1.0 - weight) * x_hat + weight * y;
}

Vector enhance(const NoisePredictor& predictor, const Vector& y, const SamplerSpec& spec,
               const NoiseSchedule& train_schedule, Rng& rng, ReverseTrace* trace) {
  spec.validate();
  if (y.size() == 0) throw std::invalid_argument("enhance: empty input");
  std::optional<FastSchedule> fast;
  if (const auto* f = std::get_if<FastBetas>(&spec.schedule_mode)) fast = fast_alignment(train_schedule, f->user_betas);

  const auto chain_from = [&](Variant base) -> Vector {
    if (fast) return fast_sample(predictor, y, *fast, base, spec.gamma_policy, rng, trace);
    switch (base) {
      case Variant::rp: return reverse_sample(predictor, y.size(), train_schedule, rng, trace);
      case Variant::rp_n_in:
        return run_reverse_chain(predictor, y, train_schedule, full_positions(train_schedule), rng, trace);
      default: return supportive_reverse_sample(predictor, y, train_schedule, spec.gamma_policy, rng, trace);
    }
  };

  switch (spec.variant) {
    case Variant::rp: return chain_from(Variant::rp);
    case Variant::rp_n_in: return chain_from(Variant::rp_n_in);
    case Variant::rp_n_out: return mix_output(chain_from(Variant::rp), y, spec.output_mix_weight);
    case Variant::rp_n_in_out: return mix_output(chain_from(Variant::rp_n_in), y, spec.output_mix_weight);
    case Variant::srp: {
      Vector out = chain_from(Variant::srp);
      if (spec.srp_post_mix > 0.0) out = mix_output(out, y, spec.srp_post_mix);
      return out;
    }
  }
  throw std::logic_error("enhance: unhandled variant");
}

}  // namespace diffuse
