// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "diffuse/core.hpp"
#include "diffuse/schedule.hpp"

#include <cstddef>

namespace diffuse {

/// A signal somewhere on the forward chain.
struct DiffusionState {
  Vector x;
  int t = 0;
};

struct TrainingPair {
  Vector x_t;
  int t = 0;
  Vector epsilon;
  /// Index of the conditioner this pair is meant to be scored with.
  std::size_t conditioner_key = 0;
};

/// One forward transition: x_{t+1} = sqrt(1 - beta_{t+1}) x_t + sqrt(beta_{t+1}) z.
DiffusionState q_step(const DiffusionState& state, const NoiseSchedule& schedule, Rng& rng);

/// Closed-form corruption sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, t in [0, T].
template <typename DerivedA, typename DerivedB>
Vector q_sample(const Eigen::MatrixBase<DerivedA>& x0, int t,
                const Eigen::MatrixBase<DerivedB>& epsilon, const NoiseSchedule& schedule) {
  if (x0.size() != epsilon.size())
    throw ShapeMismatch("q_sample: x0 and epsilon differ in length");
  const double abar = schedule.alpha_bar(t);
  return std::sqrt(abar) * x0 + std::sqrt(1.0 - abar) * epsilon;
}

/// Draws t ~ U{1..T} and eps ~ N(0, I) and corrupts x0.
TrainingPair make_training_pair(const Vector& x0, const NoiseSchedule& schedule, Rng& rng,
                                std::size_t conditioner_key = 0);

}  // namespace diffuse
