// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "diffuse/core.hpp"
#include "diffuse/signal.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace diffuse {

/// Reported in place of +inf / -inf.
inline constexpr double kMetricCapDb = 100.0;

/// Scale-invariant SDR in dB: the estimate is projected onto the reference
/// and the projection is compared with the remainder.
double si_sdr(const Vector& reference, const Vector& estimate);
double si_sdr(const AudioBuffer& reference, const AudioBuffer& estimate);

struct SegmentalSnrOptions {
  Eigen::Index frame = 1024;
  Eigen::Index hop = 512;
  double floor_db = -10.0;
  double ceiling_db = 35.0;
  /// Frames whose reference energy is this far below the loudest frame are
  /// treated as silence and skipped.
  double silence_db = 40.0;
};

double segmental_snr(const Vector& reference, const Vector& estimate, const SegmentalSnrOptions& opt = {});

struct ScoreRow {
  std::string id;
  double si_sdr_db = 0.0;
  double seg_snr_db = 0.0;
  std::optional<double> noisy_si_sdr_db;
  std::optional<double> noisy_seg_snr_db;
};

struct ScoreSummary {
  double mean = 0.0;
  double median = 0.0;
};

struct ScoreReport {
  std::vector<ScoreRow> rows;

  ScoreSummary si_sdr_summary() const;
  ScoreSummary seg_snr_summary() const;
  std::optional<ScoreSummary> noisy_si_sdr_summary() const;
  std::optional<ScoreSummary> noisy_seg_snr_summary() const;

  /// Tab-separated rows followed by a '#'-prefixed summary block.
  std::string to_tsv() const;
};

ScoreSummary summarize(std::vector<double> values);

/// Raised by evaluate() when enhanced files are missing; lists all of them.
struct MissingFiles : std::runtime_error {
  explicit MissingFiles(std::vector<std::string> paths);
  std::vector<std::string> paths;
};

/// Scores enhanced_dir/<id>.wav against the clean file of every record in
/// `split`. Noisy inputs, when listed, are scored as a baseline.
ScoreReport evaluate(const Manifest& manifest, const std::filesystem::path& enhanced_dir,
                     const std::string& split = "test");

/// Writes clean/, noisy/ and enhanced/ 16-bit WAV copies under `dir`, one
/// file per record, named <id>.wav, for external scoring tools.
void export_for_scoring(const Manifest& manifest, const std::filesystem::path& enhanced_dir,
                        const std::filesystem::path& dir, const std::string& split = "test");

}  // namespace diffuse
