// SPDX-License-Identifier: Apache-2.0
#include "diffuse/metrics.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>

using namespace diffuse;
namespace fs = std::filesystem;

namespace {

Vector noise(Eigen::Index n, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  return scale * rng.normal_vector(n);
}

// Four utterances with clean, noisy and a deliberately imperfect enhanced copy.
Manifest make_corpus(const testutil::TempDir& dir) {
  fs::create_directories(dir / "clean");
  fs::create_directories(dir / "noisy");
  fs::create_directories(dir / "enhanced");
  Manifest m;
  for (int i = 0; i < 4; ++i) {
    const std::string id = "utt" + std::to_string(i);
    Vector clean(8000);
    for (Eigen::Index k = 0; k < clean.size(); ++k) clean[k] = 0.3 * std::sin(0.05 * (i + 1) * k);
    const Vector n = noise(8000, 100 + i, 0.05 * (i + 1));
    write_wav(dir / "clean" / (id + ".wav"), {clean});
    write_wav(dir / "noisy" / (id + ".wav"), {clean + n});
    write_wav(dir / "enhanced" / (id + ".wav"), {clean + 0.3 * n});
    ManifestRecord r;
    r.clean_path = (dir / "clean" / (id + ".wav")).string();
    r.noisy_path = (dir / "noisy" / (id + ".wav")).string();
    r.split = "test";
    m.records.push_back(r);
  }
  ManifestRecord train;
  train.clean_path = (dir / "clean" / "utt0.wav").string();
  train.split = "train";
  m.records.push_back(train);
  return m;
}

}  // namespace

TEST_CASE("si_sdr of an exact copy reports the cap") {
  const Vector x = noise(4000, 1);
  CHECK(si_sdr(x, x) == kMetricCapDb);
  CHECK(si_sdr(x, (2.0 * x).eval()) == kMetricCapDb);
}

TEST_CASE("si_sdr is invariant to positive scaling of the estimate") {
  const Vector x = noise(4000, 2);
  const Vector e = x + noise(4000, 3, 0.3);
  const double base = si_sdr(x, e);
  for (double a : {0.01, 0.5, 3.0, 1000.0}) CHECK(si_sdr(x, (a * e).eval()) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("si_sdr with orthogonal noise of equal energy is 0 dB") {
  const Vector x = noise(4000, 4);
  Vector n = noise(4000, 5);
  n -= (n.dot(x) / x.squaredNorm()) * x;
  n *= x.norm() / n.norm();
  CHECK(std::abs(si_sdr(x, x + n)) <= 1e-6);
}

TEST_CASE("si_sdr rejects bad input") {
  CHECK_THROWS_AS(si_sdr(Vector::Ones(4), Vector::Ones(5)), ShapeMismatch);
  CHECK_THROWS(si_sdr(Vector::Zero(4), Vector::Ones(4)));
}

TEST_CASE("segmental SNR clamps at both ends") {
  const Vector x = noise(16000, 6);
  CHECK(segmental_snr(x, x) == 35.0);
  CHECK(segmental_snr(x, Vector::Zero(16000)) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(segmental_snr(x, (-10.0 * x).eval()) == -10.0);
}

TEST_CASE("segmental SNR of stationary noise at 10 dB") {
  const Vector x = noise(32000, 7);
  const Vector n = noise(32000, 8, std::sqrt(0.1));
  CHECK(std::abs(segmental_snr(x, x + n) - 10.0) <= 0.5);
}

TEST_CASE("segmental SNR skips silent frames") {
  Vector x = noise(16384, 9);
  x.tail(8192).setZero();
  const Vector e = x + noise(16384, 10, std::sqrt(0.1));
  CHECK(std::abs(segmental_snr(x, e) - 10.0) <= 0.5);
  CHECK_THROWS(segmental_snr(Vector::Zero(4096), Vector::Ones(4096)));
  CHECK_THROWS_AS(segmental_snr(Vector::Ones(4), Vector::Ones(5)), ShapeMismatch);
}

TEST_CASE("summaries") {
  const auto odd = summarize({3.0, 1.0, 2.0});
  CHECK(odd.mean == 2.0);
  CHECK(odd.median == 2.0);
  const auto even = summarize({4.0, 1.0, 2.0, 3.0});
  CHECK(even.median == 2.5);
}

TEST_CASE("evaluate clean copies reaches the ceiling") {
  const testutil::TempDir dir("metrics");
  const Manifest m = make_corpus(dir);
  const auto report = evaluate(m, dir / "clean");
  REQUIRE(report.rows.size() == 4u);
  for (const auto& r : report.rows) {
    CHECK(r.si_sdr_db == kMetricCapDb);
    CHECK(r.seg_snr_db == 35.0);
  }
}

TEST_CASE("evaluate noisy copies reproduces the baseline") {
  const testutil::TempDir dir("metrics");
  const Manifest m = make_corpus(dir);
  const auto report = evaluate(m, dir / "noisy");
  for (const auto& r : report.rows) {
    REQUIRE(r.noisy_si_sdr_db);
    CHECK(r.si_sdr_db == *r.noisy_si_sdr_db);
    CHECK(r.seg_snr_db == *r.noisy_seg_snr_db);
  }
}

TEST_CASE("evaluate aggregates recompute from rows and the run is pure") {
  const testutil::TempDir dir("metrics");
  const Manifest m = make_corpus(dir);
  const auto report = evaluate(m, dir / "enhanced");
  std::vector<double> si;
  for (const auto& r : report.rows) si.push_back(r.si_sdr_db);
  const double mean = std::accumulate(si.begin(), si.end(), 0.0) / si.size();
  CHECK(report.si_sdr_summary().mean == doctest::Approx(mean).epsilon(1e-14));
  for (const auto& r : report.rows) CHECK(r.si_sdr_db > *r.noisy_si_sdr_db);
  CHECK(evaluate(m, dir / "enhanced").to_tsv() == report.to_tsv());
  CHECK(report.to_tsv().find("# median") != std::string::npos);
}

TEST_CASE("evaluate lists every missing file") {
  const testutil::TempDir dir("metrics");
  const Manifest m = make_corpus(dir);
  fs::remove(dir / "enhanced" / "utt1.wav");
  fs::remove(dir / "enhanced" / "utt3.wav");
  try {
    evaluate(m, dir / "enhanced");
    FAIL("expected MissingFiles");
  } catch (const MissingFiles& e) {
    REQUIRE(e.paths.size() == 2u);
    CHECK(e.paths[0].find("utt1.wav") != std::string::npos);
    CHECK(e.paths[1].find("utt3.wav") != std::string::npos);
  }
}

TEST_CASE("export writes paired copies") {
  const testutil::TempDir dir("metrics");
  const Manifest m = make_corpus(dir);
  export_for_scoring(m, dir / "enhanced", dir / "export");
  for (const char* sub : {"clean", "noisy", "enhanced"})
    for (int i = 0; i < 4; ++i) {
      const std::string name = "utt" + std::to_string(i) + ".wav";
      CHECK(testutil::slurp(dir / "export" / sub / name) == testutil::slurp(dir / sub / name));
    }
}
