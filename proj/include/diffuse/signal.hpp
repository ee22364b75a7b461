// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "diffuse/core.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace diffuse {

inline constexpr int kSampleRate = 16000;
inline constexpr int kWindow = 1024;
inline constexpr int kHop = 256;
inline constexpr int kLinearBins = kWindow / 2 + 1;  // 513
inline constexpr int kMelBins = 80;
inline constexpr double kLogFloor = 1e-5;

/// Mono waveform, samples nominally in [-1, 1].
struct AudioBuffer {
  Vector samples;
  int sample_rate = kSampleRate;

  Eigen::Index size() const { return samples.size(); }
};

/// Reads RIFF/WAVE 16-bit PCM mono. Samples are scaled by 1/32768.
AudioBuffer read_wav(const std::filesystem::path& path);
/// Writes 16-bit PCM mono with saturating rounding.
void write_wav(const std::filesystem::path& path, const AudioBuffer& audio);
/// Throws with a message naming the expected rate when it does not match.
void require_sample_rate(const AudioBuffer& audio, int expected = kSampleRate);

enum class ConditionerKind { mel, linear };

/// Time-frequency features aligned to a waveform: frame k summarizes
/// samples [k * hop, (k + 1) * hop).
struct Conditioner {
  ConditionerKind kind = ConditionerKind::linear;
  Matrix frames;  // n_frames x dim

  Eigen::Index n_frames() const { return frames.rows(); }
  Eigen::Index dim() const { return frames.cols(); }
};

/// ceil(length / hop).
inline Eigen::Index frames_for_length(Eigen::Index length) { return (length + kHop - 1) / kHop; }

/// |STFT| with a 1024-point Hann window, hop 256, reflect padding and
/// ceil(L / hop) frames centred on each hop segment. n_frames x 513.
Matrix stft_magnitude(const AudioBuffer& x);
/// log(1e-5 + |STFT|).
Conditioner stft_log_magnitude(const AudioBuffer& x);
/// 80 HTK-scale triangular filters over 0..8000 Hz; 80 x 513.
const Matrix& mel_filterbank();
/// log(1e-5 + mel(|STFT|^2)).
Conditioner mel_spectrogram(const AudioBuffer& x);

/// Crops frames [first, first + count) of a conditioner.
Conditioner crop_frames(const Conditioner& c, Eigen::Index first, Eigen::Index count);

double energy(const Vector& x);
/// 10 log10(||clean||^2 / ||noise||^2).
double snr_db(const Vector& clean, const Vector& noise);

struct MixResult {
  AudioBuffer clean;  // after joint peak normalization
  AudioBuffer noisy;
  AudioBuffer scaled_noise;
  double noise_gain = 1.0;  // applied to the raw noise before normalization
  double normalization = 1.0;  // joint factor, 1 when no clipping risk
};

/// Scales noise to the requested SNR and adds it. Noise longer than the
/// clean signal is randomly cropped; shorter noise is tiled then cropped.
MixResult mix_at_snr(const AudioBuffer& clean, const AudioBuffer& noise, double snr_db, Rng& rng);

struct ManifestRecord {
  std::string clean_path;
  std::optional<std::string> noisy_path;
  std::optional<double> snr_db;
  std::string split;

  /// Utterance id: the clean file's stem.
  std::string id() const;
};

/// Tab-separated: clean_path, noisy_path, snr_db, split; "-" marks a
/// missing field. Relative paths are resolved against the manifest's
/// directory on read.
struct Manifest {
  std::vector<ManifestRecord> records;

  std::vector<ManifestRecord> split(const std::string& tag) const;
};

Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);

struct SynthSpec {
  int count = 10;
  double duration_s = 2.0;
  std::vector<double> snrs_db{0.0, 5.0, 10.0, 15.0};
  double valid_fraction = 0.1;
  double test_fraction = 0.1;
};

/// Speech-like harmonic signal with pitch/amplitude modulation and pauses.
Vector synth_speech(Eigen::Index length, Rng& rng);
enum class NoiseKind { white, pink, babble };
Vector synth_noise(NoiseKind kind, Eigen::Index length, Rng& rng);

/// Writes clean/ and noisy/ WAVs plus manifest.tsv under `outdir`. The
/// manifest SNR is measured on the written 16-bit files.
Manifest synth_corpus(const SynthSpec& spec, const std::filesystem::path& outdir, Rng& rng);

}  // namespace diffuse
