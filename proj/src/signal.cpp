// SPDX-License-Identifier: Apache-2.0
#include "diffuse/signal.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

namespace diffuse {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// WAV

namespace {

std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

}  // namespace

AudioBuffer read_wav(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  const std::string where = " in " + path.string();
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw FormatError("not a RIFF/WAVE file" + where);

  bool have_fmt = false;
  std::uint16_t channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_size = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::uint32_t size = read_u32(chunk + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) {
      // Tolerate a truncated data chunk; anything else is malformed.
      if (std::memcmp(chunk, "data", 4) != 0) throw FormatError("truncated chunk" + where);
    }
    const std::size_t avail = std::min<std::size_t>(size, bytes.size() - body);
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (avail < 16) throw FormatError("short fmt chunk" + where);
      std::uint16_t format = read_u16(chunk + 8);
      channels = read_u16(chunk + 10);
      rate = read_u32(chunk + 12);
      bits = read_u16(chunk + 22);
      if (format == 0xFFFE && avail >= 26) format = read_u16(chunk + 8 + 24);
      if (format != 1) throw FormatError("unsupported encoding (PCM only)" + where);
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = chunk + 8;
      data_size = avail;
    }
    pos = body + size + (size & 1u);
  }
  if (!have_fmt) throw FormatError("missing fmt chunk" + where);
  if (!data) throw FormatError("missing data chunk" + where);
  if (channels != 1) throw FormatError("expected mono, got " + std::to_string(channels) + " channels" + where);
  if (bits != 16) throw FormatError("expected 16-bit samples, got " + std::to_string(bits) + where);
  if (rate == 0) throw FormatError("zero sample rate" + where);

  AudioBuffer audio;
  audio.sample_rate = static_cast<int>(rate);
  const std::size_t n = data_size / 2;
  audio.samples.resize(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto raw = static_cast<std::int16_t>(read_u16(data + 2 * i));
    audio.samples[static_cast<Eigen::Index>(i)] = raw / 32768.0;
  }
  return audio;
}

void write_wav(const fs::path& path, const AudioBuffer& audio) {
  if (audio.sample_rate <= 0) throw std::invalid_argument("write_wav: bad sample rate");
  const auto n = static_cast<std::uint32_t>(audio.samples.size());
  std::string out;
  out.reserve(44 + 2 * n);
  out += "RIFF";
  put_u32(out, 36 + 2 * n);
  out += "WAVEfmt ";
  put_u32(out, 16);
  put_u16(out, 1);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(audio.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(audio.sample_rate) * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  out += "data";
  put_u32(out, 2 * n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const double v = audio.samples[i];
    if (!std::isfinite(v)) throw std::invalid_argument("write_wav: non-finite sample");
    const double scaled = std::clamp(std::round(v * 32768.0), -32768.0, 32767.0);
    put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(scaled)));
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot write " + path.string());
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw IoError("write failed for " + path.string());
}

void require_sample_rate(const AudioBuffer& audio, int expected) {
  if (audio.sample_rate != expected)
    throw FormatError("sample rate " + std::to_string(audio.sample_rate) + " Hz not supported; expected " +
                      std::to_string(expected) + " Hz");
}

// ---------------------------------------------------------------------------
// Features

namespace {

const std::vector<double>& hann_window() {
  static const std::vector<double> w = [] {
    std::vector<double> v(kWindow);
    for (int i = 0; i < kWindow; ++i)
      v[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / kWindow);
    return v;
  }();
  return w;
}

Eigen::Index reflect(Eigen::Index i, Eigen::Index n) {
  if (n == 1) return 0;
  const Eigen::Index period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

}  // namespace

Matrix stft_magnitude(const AudioBuffer& x) {
  const Eigen::Index len = x.samples.size();
  if (len < kWindow)
    throw std::invalid_argument("signal shorter than the " + std::to_string(kWindow) +
                                "-sample analysis window");
  const Eigen::Index frames = frames_for_length(len);
  const auto& window = hann_window();
  Matrix mag(frames, kLinearBins);
  Eigen::FFT<double> fft;
  std::vector<double> buf(kWindow);
  std::vector<std::complex<double>> spec;
  for (Eigen::Index k = 0; k < frames; ++k) {
    const Eigen::Index start = k * kHop + kHop / 2 - kWindow / 2;
    for (int i = 0; i < kWindow; ++i) buf[i] = window[i] * x.samples[reflect(start + i, len)];
    fft.fwd(spec, buf);
    for (int b = 0; b < kLinearBins; ++b) mag(k, b) = std::abs(spec[b]);
  }
  return mag;
}

Conditioner stft_log_magnitude(const AudioBuffer& x) {
  Conditioner c;
  c.kind = ConditionerKind::linear;
  c.frames = (stft_magnitude(x).array() + kLogFloor).log().matrix();
  return c;
}

const Matrix& mel_filterbank() {
  static const Matrix bank = [] {
    Matrix fb = Matrix::Zero(kMelBins, kLinearBins);
    const double mel_lo = hz_to_mel(0.0);
    const double mel_hi = hz_to_mel(kSampleRate / 2.0);
    std::vector<double> edges(kMelBins + 2);
    for (int i = 0; i < kMelBins + 2; ++i)
      edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (kMelBins + 1));
    for (int m = 0; m < kMelBins; ++m) {
      const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
      for (int b = 0; b < kLinearBins; ++b) {
        const double f = static_cast<double>(b) * kSampleRate / kWindow;
        double w = 0.0;
        if (f > lo && f <= mid) w = (f - lo) / (mid - lo);
        else if (f > mid && f < hi) w = (hi - f) / (hi - mid);
        fb(m, b) = w;
      }
    }
    return fb;
  }();
  return bank;
}

Conditioner mel_spectrogram(const AudioBuffer& x) {
  const Matrix mag = stft_magnitude(x);
  const Matrix power = mag.array().square().matrix();
  Conditioner c;
  c.kind = ConditionerKind::mel;
  c.frames = ((power * mel_filterbank().transpose()).array() + kLogFloor).log().matrix();
  return c;
}

Conditioner crop_frames(const Conditioner& c, Eigen::Index first, Eigen::Index count) {
  if (first < 0 || count < 0 || first + count > c.n_frames())
    throw ShapeMismatch("crop_frames: range outside conditioner");
  return Conditioner{c.kind, c.frames.middleRows(first, count)};
}

// ---------------------------------------------------------------------------
// Mixing

double energy(const Vector& x) { return x.squaredNorm(); }

double snr_db(const Vector& clean, const Vector& noise) {
  return 10.0 * std::log10(energy(clean) / energy(noise));
}

MixResult mix_at_snr(const AudioBuffer& clean, const AudioBuffer& noise, double target_db, Rng& rng) {
  if (clean.sample_rate != noise.sample_rate)
    throw std::invalid_argument("mix_at_snr: sample rates differ");
  if (!std::isfinite(target_db)) throw std::invalid_argument("mix_at_snr: SNR must be finite");
  const Eigen::Index n = clean.size();
  const double clean_energy = energy(clean.samples);
  if (n == 0 || clean_energy == 0.0)
    throw std::invalid_argument("mix_at_snr: clean signal is silent, SNR undefined");
  if (noise.size() == 0) throw std::invalid_argument("mix_at_snr: empty noise");

  Vector segment(n);
  if (noise.size() >= n) {
    const Eigen::Index offset = rng.uniform_int(0, noise.size() - n);
    segment = noise.samples.segment(offset, n);
  } else {
    for (Eigen::Index i = 0; i < n; ++i) segment[i] = noise.samples[i % noise.size()];
  }
  const double noise_energy = energy(segment);
  if (noise_energy == 0.0) throw std::invalid_argument("mix_at_snr: noise is silent");

  MixResult r;
  r.noise_gain = std::sqrt(clean_energy / (noise_energy * std::pow(10.0, target_db / 10.0)));
  Vector scaled = r.noise_gain * segment;
  Vector noisy = clean.samples + scaled;
  const double peak = noisy.cwiseAbs().maxCoeff();
  r.normalization = peak > 1.0 ? 0.99 / peak : 1.0;
  r.clean = AudioBuffer{clean.samples * r.normalization, clean.sample_rate};
  r.scaled_noise = AudioBuffer{scaled * r.normalization, clean.sample_rate};
  r.noisy = AudioBuffer{noisy * r.normalization, clean.sample_rate};
  return r;
}

// ---------------------------------------------------------------------------
// Manifest

std::string ManifestRecord::id() const { return fs::path(clean_path).stem().string(); }

std::vector<ManifestRecord> Manifest::split(const std::string& tag) const {
  std::vector<ManifestRecord> out;
  for (const auto& r : records)
    if (r.split == tag) out.push_back(r);
  return out;
}

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  const fs::path base = path.parent_path();
  const auto resolve = [&](const std::string& p) {
    fs::path q(p);
    return (q.is_absolute() || base.empty() ? q : base / q).string();
  };
  Manifest m;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    if (fields.size() != 4)
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 4 tab-separated fields");
    ManifestRecord r;
    r.clean_path = resolve(fields[0]);
    if (fields[1] != "-") r.noisy_path = resolve(fields[1]);
    if (fields[2] != "-") {
      try {
        r.snr_db = std::stod(fields[2]);
      } catch (const std::exception&) {
        throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad SNR");
      }
      if (!std::isfinite(*r.snr_db))
        throw FormatError(path.string() + ":" + std::to_string(lineno) + ": SNR must be finite");
    }
    r.split = fields[3];
    m.records.push_back(std::move(r));
  }
  return m;
}

void write_manifest(const fs::path& path, const Manifest& manifest) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path.string());
  for (const auto& r : manifest.records) {
    out << r.clean_path << '\t' << (r.noisy_path ? *r.noisy_path : "-") << '\t';
    if (r.snr_db) {
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.17g", *r.snr_db);
      out << buf;
    } else {
      out << '-';
    }
    out << '\t' << r.split << '\n';
  }
  if (!out) throw IoError("write failed for manifest " + path.string());
}

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {

double raised_cosine(double u) {
  // 0 at u=0 and u=1, 1 in the middle with 20% ramps.
  constexpr double ramp = 0.2;
  if (u < ramp) return 0.5 - 0.5 * std::cos(std::numbers::pi * u / ramp);
  if (u > 1.0 - ramp) return 0.5 - 0.5 * std::cos(std::numbers::pi * (1.0 - u) / ramp);
  return 1.0;
}

}  // namespace

Vector synth_speech(Eigen::Index length, Rng& rng) {
  const double fs = kSampleRate;
  Vector out = Vector::Zero(length);
  const double base_f0 = 90.0 + 150.0 * rng.uniform();
  Eigen::Index pos = static_cast<Eigen::Index>((0.05 + 0.15 * rng.uniform()) * fs);
  std::vector<double> phases;
  while (pos < length) {
    const auto syllable = static_cast<Eigen::Index>((0.10 + 0.25 * rng.uniform()) * fs);
    const auto pause = static_cast<Eigen::Index>((0.04 + 0.20 * rng.uniform()) * fs);
    const double f0_start = base_f0 * (0.85 + 0.3 * rng.uniform());
    const double f0_slope = (rng.uniform() - 0.5) * 0.4;
    const double vibrato_hz = 4.0 + 3.0 * rng.uniform();
    const double level = 0.4 + 0.6 * rng.uniform();
    const std::array<double, 3> formants{300.0 + 500.0 * rng.uniform(), 900.0 + 1300.0 * rng.uniform(),
                                         2300.0 + 700.0 * rng.uniform()};
    const std::array<double, 3> bandwidths{90.0, 140.0, 220.0};
    const std::array<double, 3> gains{1.0, 0.6 + 0.3 * rng.uniform(), 0.25 + 0.2 * rng.uniform()};
    phases.assign(64, 0.0);
    for (int k = 0; k < 64; ++k) phases[k] = 2.0 * std::numbers::pi * rng.uniform();
    for (Eigen::Index i = 0; i < syllable && pos + i < length; ++i) {
      const double u = static_cast<double>(i) / static_cast<double>(syllable);
      const double tsec = static_cast<double>(i) / fs;
      const double f0 = f0_start * (1.0 + f0_slope * u) *
                        (1.0 + 0.02 * std::sin(2.0 * std::numbers::pi * vibrato_hz * tsec));
      double value = 0.0;
      for (int k = 1; k <= 64; ++k) {
        const double fk = k * f0;
        if (fk > 4000.0) break;
        phases[k - 1] += 2.0 * std::numbers::pi * fk / fs;
        double env = 0.0;
        for (int m = 0; m < 3; ++m) {
          const double d = (fk - formants[m]) / bandwidths[m];
          env += gains[m] * std::exp(-0.5 * d * d);
        }
        value += (env + 0.02) * std::sin(phases[k - 1]) / std::sqrt(static_cast<double>(k));
      }
      out[pos + i] = level * raised_cosine(u) * value;
    }
    pos += syllable + pause;
  }
  const double peak = out.cwiseAbs().maxCoeff();
  if (peak > 0.0) out *= (0.3 + 0.3 * rng.uniform()) / peak;
  return out;
}

Vector synth_noise(NoiseKind kind, Eigen::Index length, Rng& rng) {
  Vector out(length);
  switch (kind) {
    case NoiseKind::white:
      for (Eigen::Index i = 0; i < length; ++i) out[i] = rng.normal();
      break;
    case NoiseKind::pink: {
      // Paul Kellet's economy pink filter.
      double b0 = 0, b1 = 0, b2 = 0;
      for (Eigen::Index i = 0; i < length; ++i) {
        const double w = rng.normal();
        b0 = 0.99765 * b0 + w * 0.0990460;
        b1 = 0.96300 * b1 + w * 0.2965164;
        b2 = 0.57000 * b2 + w * 1.0526913;
        out[i] = b0 + b1 + b2 + w * 0.1848;
      }
      break;
    }
    case NoiseKind::babble: {
      out.setZero();
      const int talkers = 4 + static_cast<int>(rng.uniform_int(0, 2));
      for (int k = 0; k < talkers; ++k) out += synth_speech(length, rng);
      // Fill pauses with a little low-passed noise so the babble never gates off.
      double state = 0.0;
      for (Eigen::Index i = 0; i < length; ++i) {
        state = 0.9 * state + 0.1 * rng.normal();
        out[i] += 0.05 * state;
      }
      break;
    }
  }
  const double peak = out.cwiseAbs().maxCoeff();
  if (peak > 0.0) out /= peak;
  return out;
}

namespace {

Vector quantize(const Vector& x) {
  return (x * 32768.0).array().round().cwiseMax(-32768.0).cwiseMin(32767.0).matrix() / 32768.0;
}

std::string utterance_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "utt%05d.wav", index);
  return buf;
}

}  // namespace

Manifest synth_corpus(const SynthSpec& spec, const fs::path& outdir, Rng& rng) {
  if (spec.count < 1) throw std::invalid_argument("synth_corpus: count must be >= 1");
  if (!(spec.duration_s > 0.0)) throw std::invalid_argument("synth_corpus: duration must be > 0");
  if (spec.snrs_db.empty()) throw std::invalid_argument("synth_corpus: empty SNR list");
  const auto length = static_cast<Eigen::Index>(std::llround(spec.duration_s * kSampleRate));
  if (length < kWindow) throw std::invalid_argument("synth_corpus: duration shorter than one analysis window");

  std::error_code ec;
  fs::create_directories(outdir / "clean", ec);
  fs::create_directories(outdir / "noisy", ec);
  if (ec) throw IoError("cannot create " + outdir.string() + ": " + ec.message());

  const int n_valid = static_cast<int>(std::lround(spec.valid_fraction * spec.count));
  const int n_test = static_cast<int>(std::lround(spec.test_fraction * spec.count));
  const int n_train = std::max(0, spec.count - n_valid - n_test);

  Manifest m;
  for (int i = 0; i < spec.count; ++i) {
    Rng local = rng.split();
    const Vector speech = synth_speech(length, local);
    const auto kind = static_cast<NoiseKind>(local.uniform_int(0, 2));
    const Vector noise = synth_noise(kind, length + kSampleRate / 2, local);
    const double target =
        spec.snrs_db[static_cast<std::size_t>(local.uniform_int(0, static_cast<std::int64_t>(spec.snrs_db.size()) - 1))];
    const MixResult mix = mix_at_snr(AudioBuffer{speech, kSampleRate}, AudioBuffer{noise, kSampleRate}, target, local);

    // Quantize clean and noise separately so the noisy file is their exact
    // sum on the 16-bit grid and the recorded SNR survives re-measurement.
    const Vector clean_q = quantize(mix.clean.samples);
    const Vector noise_q = quantize(mix.scaled_noise.samples);
    const Vector noisy_q = (clean_q + noise_q).cwiseMax(-1.0).cwiseMin(32767.0 / 32768.0);

    const std::string name = utterance_name(i);
    write_wav(outdir / "clean" / name, AudioBuffer{clean_q, kSampleRate});
    write_wav(outdir / "noisy" / name, AudioBuffer{noisy_q, kSampleRate});

    ManifestRecord r;
    r.clean_path = "clean/" + name;
    r.noisy_path = "noisy/" + name;
    r.snr_db = snr_db(clean_q, noisy_q - clean_q);
    r.split = i < n_train ? "train" : (i < n_train + n_valid ? "valid" : "test");
    m.records.push_back(std::move(r));
  }
  write_manifest(outdir / "manifest.tsv", m);
  return read_manifest(outdir / "manifest.tsv");
}

}  // namespace diffuse
