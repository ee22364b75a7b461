// SPDX-License-Identifier: Apache-2.0
#include "diffuse/diffusion.hpp"

#include <cmath>

namespace diffuse {

DiffusionState q_step(const DiffusionState& state, const NoiseSchedule& schedule, Rng& rng) {
  if (state.t >= schedule.steps())
    throw std::out_of_range("q_step: state already at the final step");
  const double beta = schedule.beta(state.t + 1);
  DiffusionState next;
  next.t = state.t + 1;
  next.x = std::sqrt(1.0 - beta) * state.x + std::sqrt(beta) * rng.normal_vector(state.x.size());
  return next;
}

TrainingPair make_training_pair(const Vector& x0, const NoiseSchedule& schedule, Rng& rng,
                                std::size_t conditioner_key) {
  if (x0.size() == 0) throw std::invalid_argument("make_training_pair: empty signal");
  TrainingPair pair;
  pair.t = static_cast<int>(rng.uniform_int(1, schedule.steps()));
  pair.epsilon = rng.normal_vector(x0.size());
  pair.x_t = q_sample(x0, pair.t, pair.epsilon, schedule);
  pair.conditioner_key = conditioner_key;
  return pair;
}

}  // namespace diffuse
