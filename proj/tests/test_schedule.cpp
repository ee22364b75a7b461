#include "diffuse/schedule.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>

using namespace diffuse;

TEST_CASE("linear schedule end points and products") {
  const auto base = linear_schedule(50, 1e-4, 0.05);
  CHECK(base.steps() == 50);
  CHECK(base.beta(1) == 1e-4);
  CHECK(base.beta(50) == doctest::Approx(0.05).epsilon(1e-15));
  CHECK(base.alpha_bar(50) == doctest::Approx(0.27967250019288403).epsilon(1e-13));

  const auto one = linear_schedule(1, 0.5, 0.5);
  CHECK(one.betas() == std::vector<double>{0.5});
  CHECK(one.alphas() == std::vector<double>{0.5});
  CHECK(one.alpha_bars() == std::vector<double>{0.5});

  const auto three = linear_schedule(3, 0.1, 0.3);
  CHECK(three.alpha_bar(3) == doctest::Approx(0.9 * 0.8 * 0.7).epsilon(1e-14));
}

TEST_CASE("linear schedule rejects bad bounds") {
  CHECK_THROWS_AS(linear_schedule(0, 1e-4, 0.05), std::invalid_argument);
  CHECK_THROWS_AS(linear_schedule(10, 0.0, 0.05), std::invalid_argument);
  CHECK_THROWS_AS(linear_schedule(10, 0.2, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(linear_schedule(10, 1e-4, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(linear_schedule(10, std::nan(""), 0.1), std::invalid_argument);
  CHECK_THROWS_AS(linear_schedule(10, 1e-4, std::numeric_limits<double>::infinity()), std::invalid_argument);
}

TEST_CASE("schedule invariants") {
  for (const auto& s : {linear_schedule(50, 1e-4, 0.05), linear_schedule(200, 1e-4, 0.02),
                        linear_schedule(10, 0.01, 0.2)}) {
    CHECK(s.alpha_bar(0) == 1.0);
    for (int t = 1; t <= s.steps(); ++t) {
      CHECK(s.alpha(t) == 1.0 - s.beta(t));
      CHECK(std::abs(s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)) <= 1e-15);
      CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
      if (t > 1) CHECK(s.beta(t) >= s.beta(t - 1));
    }
    CHECK(s.sigma(s.steps()) * s.sigma(s.steps()) < s.beta(s.steps()));
  }
}

TEST_CASE("sigma values") {
  CHECK(sigma(linear_schedule(50, 1e-4, 0.05), 1) == doctest::Approx(0.01).epsilon(1e-14));
  const auto three = linear_schedule(3, 0.1, 0.3);
  CHECK(sigma(three, 2) == doctest::Approx(0.2672612419124244).epsilon(1e-12));
  CHECK_THROWS(sigma(three, 0));
  CHECK_THROWS(sigma(three, 4));
}

TEST_CASE("gamma rule") {
  const auto three = linear_schedule(3, 0.1, 0.3);
  CHECK(gamma(three, GammaPolicy{0.2}, 1) == 0.2);
  CHECK(gamma(three, GammaPolicy{}, 2) == doctest::Approx(0.28171808490950556).epsilon(1e-12));
  const auto base = linear_schedule(50, 1e-4, 0.05);
  for (int t = 2; t <= 50; ++t)
    CHECK(gamma(base, GammaPolicy{}, t) * std::sqrt(base.alpha_bar(t - 1)) == doctest::Approx(base.sigma(t)).epsilon(1e-14));
}

TEST_CASE("supportive noise scale") {
  const auto base = linear_schedule(50, 1e-4, 0.05);
  for (int t = 2; t <= 50; ++t) CHECK(std::abs(srp_sigma_hat(base, GammaPolicy{}, t)) <= 1e-12);
  CHECK_THROWS_AS(srp_sigma_hat(base, GammaPolicy{0.2}, 1), NegativeVariance);
  CHECK(srp_sigma_hat_clamped(base, GammaPolicy{0.2}, 1) == 0.0);
  CHECK(srp_sigma_hat(base, GammaPolicy{0.0}, 1) == doctest::Approx(base.sigma(1)).epsilon(1e-15));
}

TEST_CASE("fast alignment") {
  const auto base = linear_schedule(50, 1e-4, 0.05);
  SUBCASE("identity") {
    const auto fast = fast_alignment(base, base.betas());
    REQUIRE(fast.steps() == 50);
    for (int t = 1; t <= 50; ++t) CHECK(fast.step_positions[t - 1] == t);
  }
  SUBCASE("base six-step schedule") {
    const auto fast = fast_alignment(base, base_fast_betas());
    const std::vector<double> expect{1.0, 1.894134103441655, 5.086654023014474,
                                     11.451816523911088, 23.992493307367457, 43.9186430599322};
    REQUIRE(fast.steps() == 6);
    for (int s = 0; s < 6; ++s) CHECK(fast.step_positions[s] == doctest::Approx(expect[s]).epsilon(1e-10));
    for (int s = 1; s < 6; ++s) {
      CHECK(fast.step_positions[s] > fast.step_positions[s - 1]);
      CHECK(fast.fast_alpha_bars()[s] < fast.fast_alpha_bars()[s - 1]);
    }
  }
  SUBCASE("large six-step schedule") {
    const auto large = linear_schedule(200, 1e-4, 0.02);
    const auto fast = fast_alignment(large, large_fast_betas());
    const std::vector<double> expect{1.0, 4.200680474308252, 14.430277370282612,
                                     34.82028843293526, 74.98246096947005, 171.605125835204};
    for (int s = 0; s < 6; ++s) CHECK(fast.step_positions[s] == doctest::Approx(expect[s]).epsilon(1e-10));
    CHECK_THROWS_AS(fast_alignment(base, large_fast_betas()), AlignmentOutOfRange);
  }
  SUBCASE("positions inside [0, T]") {
    const auto tiny = linear_schedule(10, 0.01, 0.2);
    const auto fast = fast_alignment(tiny, base_fast_betas());
    CHECK(fast.step_positions.front() == doctest::Approx(0.009975186571429925).epsilon(1e-9));
    CHECK(fast.step_positions.back() == doctest::Approx(9.323584516760771).epsilon(1e-10));
  }
  SUBCASE("bad betas") {
    CHECK_THROWS(fast_alignment(base, {}));
    CHECK_THROWS(fast_alignment(base, {0.1, 1.5}));
  }
}

TEST_CASE("schedule text round trip") {
  for (const auto& s : {linear_schedule(50, 1e-4, 0.05), NoiseSchedule::from_betas({0.013, 0.2, 0.31})}) {
    const auto back = NoiseSchedule::from_text(s.to_text());
    CHECK(back.betas() == s.betas());
    CHECK(back.alpha_bars() == s.alpha_bars());
    CHECK(back.sigmas() == s.sigmas());
    CHECK(back.to_text() == s.to_text());
  }
  CHECK_THROWS(NoiseSchedule::from_text("schedule.kind=linear\n"));
}

TEST_CASE("beta list parsing") {
  CHECK(parse_beta_list("0.0001,0.001, 0.5") == std::vector<double>{0.0001, 0.001, 0.5});
  CHECK_THROWS(parse_beta_list("0.1,,0.2"));
  CHECK_THROWS(parse_beta_list("abc"));
}
