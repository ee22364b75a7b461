// SPDX-License-Identifier: Apache-2.0
#include "diffuse/schedule.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>

namespace diffuse {

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  if (betas.empty()) throw std::invalid_argument("noise schedule needs at least one step");
  for (double b : betas) {
    if (!std::isfinite(b) || b <= 0.0 || b >= 1.0)
      throw std::invalid_argument("beta values must lie in (0, 1), got " + format_double(b));
  }
  NoiseSchedule s;
  s.betas_ = std::move(betas);
  s.populate();
  return s;
}

void NoiseSchedule::populate() {
  const std::size_t n = betas_.size();
  alphas_.resize(n);
  alpha_bars_.resize(n);
  sigmas_.resize(n);
  double running = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    alphas_[i] = 1.0 - betas_[i];
    running *= alphas_[i];
    alpha_bars_[i] = running;
  }
  // sigma_1 = sqrt(beta_1): the boundary step, abar_0 = 1.
  sigmas_[0] = std::sqrt(betas_[0]);
  for (std::size_t i = 1; i < n; ++i) {
    const double tilde = (1.0 - alpha_bars_[i - 1]) / (1.0 - alpha_bars_[i]) * betas_[i];
    sigmas_[i] = std::sqrt(tilde);
  }
}

void NoiseSchedule::check_step(int t) const {
  if (t < 1 || t > steps())
    throw std::out_of_range("step " + std::to_string(t) + " outside [1, " +
                            std::to_string(steps()) + "]");
}

double NoiseSchedule::beta(int t) const {
  check_step(t);
  return betas_[t - 1];
}

double NoiseSchedule::alpha(int t) const {
  check_step(t);
  return alphas_[t - 1];
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t == 0) return 1.0;
  check_step(t);
  return alpha_bars_[t - 1];
}

double NoiseSchedule::sigma(int t) const {
  check_step(t);
  return sigmas_[t - 1];
}

std::string NoiseSchedule::to_text() const {
  std::ostringstream out;
  if (linear_) {
    out << "schedule.kind=linear\n";
    out << "schedule.T=" << steps() << "\n";
    out << "schedule.beta_min=" << format_double(beta_min_) << "\n";
    out << "schedule.beta_max=" << format_double(beta_max_) << "\n";
  } else {
    out << "schedule.kind=explicit\n";
    out << "schedule.T=" << steps() << "\n";
    out << "schedule.betas=";
    for (std::size_t i = 0; i < betas_.size(); ++i) {
      if (i) out << ',';
      out << format_double(betas_[i]);
    }
    out << "\n";
  }
  return out.str();
}

NoiseSchedule NoiseSchedule::from_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto get = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("schedule descriptor missing '" + key + "'");
    return it->second;
  };
  const std::string& kind = get("schedule.kind");
  const int steps = std::stoi(get("schedule.T"));
  if (kind == "linear")
    return linear_schedule(steps, std::stod(get("schedule.beta_min")),
                           std::stod(get("schedule.beta_max")));
  if (kind == "explicit") {
    auto betas = parse_beta_list(get("schedule.betas"));
    if (static_cast<int>(betas.size()) != steps)
      throw FormatError("schedule descriptor: beta count does not match T");
    return from_betas(std::move(betas));
  }
  throw FormatError("unknown schedule kind '" + kind + "'");
}

NoiseSchedule NoiseSchedule::with_corrupted_sigma(int t, double value) const {
  check_step(t);
  NoiseSchedule copy = *this;
  copy.sigmas_[t - 1] = value;
  return copy;
}

NoiseSchedule linear_schedule(int steps, double beta_min, double beta_max) {
  if (steps < 1) throw std::invalid_argument("linear_schedule: T must be >= 1");
  if (!std::isfinite(beta_min) || !std::isfinite(beta_max))
    throw std::invalid_argument("linear_schedule: non-finite beta bound");
  if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0))
    throw std::invalid_argument("linear_schedule: need 0 < beta_min <= beta_max < 1");
  std::vector<double> betas(static_cast<std::size_t>(steps));
  if (steps == 1) {
    betas[0] = beta_min;
  } else {
    const double span = beta_max - beta_min;
    for (int t = 1; t <= steps; ++t)
      betas[t - 1] = beta_min + span * static_cast<double>(t - 1) / static_cast<double>(steps - 1);
  }
  NoiseSchedule s = NoiseSchedule::from_betas(std::move(betas));
  s.linear_ = true;
  s.beta_min_ = beta_min;
  s.beta_max_ = beta_max;
  return s;
}

double sigma(const NoiseSchedule& s, int t) { return s.sigma(t); }

double gamma(const NoiseSchedule& s, const GammaPolicy& p, int t) {
  if (t == 1) {
    (void)s.sigma(1);
    return p.gamma1;
  }
  return s.sigma(t) / std::sqrt(s.alpha_bar(t - 1));
}

namespace {

// Radicand of the supportive noise scale, snapped to zero when it is only
// cancellation noise.
double sigma_hat_radicand(const NoiseSchedule& s, const GammaPolicy& p, int t) {
  const double sig = s.sigma(t);
  const double g = gamma(s, p, t);
  const double var = sig * sig;
  const double radicand = var - g * g * s.alpha_bar(t - 1);
  if (std::abs(radicand) <= 64.0 * std::numeric_limits<double>::epsilon() * var) return 0.0;
  return radicand;
}

}  // namespace

double srp_sigma_hat(const NoiseSchedule& s, const GammaPolicy& p, int t) {
  const double radicand = sigma_hat_radicand(s, p, t);
  if (radicand < 0.0)
    throw NegativeVariance("supportive noise variance negative at step " + std::to_string(t) +
                           " (" + format_double(radicand) + ")");
  return std::sqrt(radicand);
}

double srp_sigma_hat_clamped(const NoiseSchedule& s, const GammaPolicy& p, int t) {
  return std::sqrt(std::max(0.0, sigma_hat_radicand(s, p, t)));
}

FastSchedule fast_alignment(const NoiseSchedule& train, const std::vector<double>& user_betas) {
  FastSchedule fast{user_betas, NoiseSchedule::from_betas(user_betas), {}};
  const int T = train.steps();
  fast.step_positions.reserve(user_betas.size());
  for (int s = 1; s <= fast.chain.steps(); ++s) {
    const double target = fast.chain.alpha_bar(s);
    if (target < train.alpha_bar(T))
      throw AlignmentOutOfRange("fast alpha_bar at step " + std::to_string(s) + " (" +
                                format_double(target) + ") below the training chain's final " +
                                format_double(train.alpha_bar(T)));
    double position = -1.0;
    for (int t = 0; t < T; ++t) {
      const double hi = train.alpha_bar(t);
      const double lo = train.alpha_bar(t + 1);
      if (lo <= target && target <= hi) {
        const double twiddle =
            (std::sqrt(hi) - std::sqrt(target)) / (std::sqrt(hi) - std::sqrt(lo));
        position = static_cast<double>(t) + twiddle;
        break;
      }
    }
    if (position < 0.0)
      throw AlignmentOutOfRange("fast alpha_bar at step " + std::to_string(s) +
                                " is outside the training chain");
    fast.step_positions.push_back(position);
  }
  return fast;
}

std::vector<double> base_fast_betas() { return {0.0001, 0.001, 0.01, 0.05, 0.2, 0.5}; }
std::vector<double> large_fast_betas() { return {0.0001, 0.001, 0.01, 0.05, 0.2, 0.7}; }

std::vector<double> parse_beta_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto first = item.find_first_not_of(" \t");
    const auto last = item.find_last_not_of(" \t");
    if (first == std::string::npos) throw std::invalid_argument("empty field in list '" + text + "'");
    item = item.substr(first, last - first + 1);
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      throw std::invalid_argument("bad number in beta list: '" + item + "'");
    }
    if (used != item.size()) throw std::invalid_argument("bad number in beta list: '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw std::invalid_argument("empty beta list");
  return out;
}

}  // namespace diffuse
