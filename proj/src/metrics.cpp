// SPDX-License-Identifier: Apache-2.0
#include "diffuse/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace diffuse {

namespace fs = std::filesystem;

namespace {

double capped_db(double num, double den) {
  if (den <= 0.0) return num > 0.0 ? kMetricCapDb : -kMetricCapDb;
  if (num <= 0.0) return -kMetricCapDb;
  return std::clamp(10.0 * std::log10(num / den), -kMetricCapDb, kMetricCapDb);
}

}  // namespace

double si_sdr(const Vector& reference, const Vector& estimate) {
  if (reference.size() != estimate.size()) throw ShapeMismatch("si_sdr: signals differ in length");
  const double ref_energy = reference.squaredNorm();
  if (ref_energy == 0.0) throw std::invalid_argument("si_sdr: silent reference");
  const double scale = reference.dot(estimate) / ref_energy;
  const Vector target = scale * reference;
  const Vector residual = estimate - target;
  const double t = target.squaredNorm();
  const double r = residual.squaredNorm();
  // Residual at rounding level relative to the target counts as exact.
  if (r <= 1e-20 * t) return kMetricCapDb;
  return capped_db(t, r);
}

double si_sdr(const AudioBuffer& reference, const AudioBuffer& estimate) {
  return si_sdr(reference.samples, estimate.samples);
}

double segmental_snr(const Vector& reference, const Vector& estimate, const SegmentalSnrOptions& opt) {
  if (reference.size() != estimate.size()) throw ShapeMismatch("segmental_snr: signals differ in length");
  if (opt.frame <= 0 || opt.hop <= 0) throw std::invalid_argument("segmental_snr: bad framing");
  const Eigen::Index n = reference.size();
  std::vector<Eigen::Index> starts;
  if (n <= opt.frame) {
    starts.push_back(0);
  } else {
    for (Eigen::Index s = 0; s + opt.frame <= n; s += opt.hop) starts.push_back(s);
  }
  std::vector<double> ref_energy(starts.size()), err_energy(starts.size());
  double loudest = 0.0;
  for (std::size_t i = 0; i < starts.size(); ++i) {
    const Eigen::Index len = std::min(opt.frame, n - starts[i]);
    const auto r = reference.segment(starts[i], len);
    ref_energy[i] = r.squaredNorm();
    err_energy[i] = (r - estimate.segment(starts[i], len)).squaredNorm();
    loudest = std::max(loudest, ref_energy[i]);
  }
  const double floor = loudest * std::pow(10.0, -opt.silence_db / 10.0);
  double total = 0.0;
  int used = 0;
  for (std::size_t i = 0; i < starts.size(); ++i) {
    if (ref_energy[i] <= floor || ref_energy[i] == 0.0) continue;
    double snr = err_energy[i] == 0.0 ? opt.ceiling_db : 10.0 * std::log10(ref_energy[i] / err_energy[i]);
    total += std::clamp(snr, opt.floor_db, opt.ceiling_db);
    ++used;
  }
  if (used == 0) throw std::invalid_argument("segmental_snr: every reference frame is silent");
  return total / used;
}

ScoreSummary summarize(std::vector<double> values) {
  if (values.empty()) return {};
  ScoreSummary s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  std::sort(values.begin(), values.end());
  const std::size_t m = values.size() / 2;
  s.median = values.size() % 2 ? values[m] : 0.5 * (values[m - 1] + values[m]);
  return s;
}

namespace {

template <typename Get>
std::vector<double> column(const std::vector<ScoreRow>& rows, Get get) {
  std::vector<double> out;
  for (const auto& r : rows) {
    auto v = get(r);
    if (v) out.push_back(*v);
  }
  return out;
}

}  // namespace

ScoreSummary ScoreReport::si_sdr_summary() const {
  return summarize(column(rows, [](const ScoreRow& r) { return std::optional<double>(r.si_sdr_db); }));
}

ScoreSummary ScoreReport::seg_snr_summary() const {
  return summarize(column(rows, [](const ScoreRow& r) { return std::optional<double>(r.seg_snr_db); }));
}

std::optional<ScoreSummary> ScoreReport::noisy_si_sdr_summary() const {
  auto v = column(rows, [](const ScoreRow& r) { return r.noisy_si_sdr_db; });
  if (v.empty()) return std::nullopt;
  return summarize(std::move(v));
}

std::optional<ScoreSummary> ScoreReport::noisy_seg_snr_summary() const {
  auto v = column(rows, [](const ScoreRow& r) { return r.noisy_seg_snr_db; });
  if (v.empty()) return std::nullopt;
  return summarize(std::move(v));
}

std::string ScoreReport::to_tsv() const {
  std::ostringstream out;
  char buf[64];
  const auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  const auto opt = [&](const std::optional<double>& v) { return v ? num(*v) : std::string("-"); };
  out << "id\tsi_sdr_db\tseg_snr_db\tnoisy_si_sdr_db\tnoisy_seg_snr_db\n";
  for (const auto& r : rows)
    out << r.id << '\t' << num(r.si_sdr_db) << '\t' << num(r.seg_snr_db) << '\t' << opt(r.noisy_si_sdr_db) << '\t'
        << opt(r.noisy_seg_snr_db) << '\n';
  const auto si = si_sdr_summary();
  const auto seg = seg_snr_summary();
  const auto nsi = noisy_si_sdr_summary();
  const auto nseg = noisy_seg_snr_summary();
  out << "# summary\tsi_sdr_db\tseg_snr_db\tnoisy_si_sdr_db\tnoisy_seg_snr_db\n";
  out << "# count\t" << rows.size() << "\n";
  out << "# mean\t" << num(si.mean) << '\t' << num(seg.mean) << '\t' << (nsi ? num(nsi->mean) : "-") << '\t'
      << (nseg ? num(nseg->mean) : "-") << '\n';
  out << "# median\t" << num(si.median) << '\t' << num(seg.median) << '\t' << (nsi ? num(nsi->median) : "-") << '\t'
      << (nseg ? num(nseg->median) : "-") << '\n';
  return out.str();
}

MissingFiles::MissingFiles(std::vector<std::string> p)
    : std::runtime_error([&] {
        std::string msg = std::to_string(p.size()) + " enhanced file(s) missing:";
        for (const auto& s : p) msg += "\n  " + s;
        return msg;
      }()),
      paths(std::move(p)) {}

ScoreReport evaluate(const Manifest& manifest, const fs::path& enhanced_dir, const std::string& split) {
  const auto records = manifest.split(split);
  std::vector<std::string> missing;
  for (const auto& r : records) {
    const fs::path p = enhanced_dir / (r.id() + ".wav");
    if (!fs::exists(p)) missing.push_back(p.string());
  }
  if (!missing.empty()) throw MissingFiles(std::move(missing));

  ScoreReport report;
  for (const auto& r : records) {
    const AudioBuffer clean = read_wav(r.clean_path);
    const AudioBuffer enhanced = read_wav(enhanced_dir / (r.id() + ".wav"));
    if (enhanced.size() != clean.size())
      throw ShapeMismatch("evaluate: " + r.id() + " enhanced length " + std::to_string(enhanced.size()) +
                          " differs from clean length " + std::to_string(clean.size()));
    ScoreRow row;
    row.id = r.id();
    row.si_sdr_db = si_sdr(clean.samples, enhanced.samples);
    row.seg_snr_db = segmental_snr(clean.samples, enhanced.samples);
    if (r.noisy_path) {
      const AudioBuffer noisy = read_wav(*r.noisy_path);
      if (noisy.size() == clean.size()) {
        row.noisy_si_sdr_db = si_sdr(clean.samples, noisy.samples);
        row.noisy_seg_snr_db = segmental_snr(clean.samples, noisy.samples);
      }
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

void export_for_scoring(const Manifest& manifest, const fs::path& enhanced_dir, const fs::path& dir,
                        const std::string& split) {
  for (const auto& r : manifest.split(split)) {
    const std::string name = r.id() + ".wav";
    write_wav(dir / "clean" / name, read_wav(r.clean_path));
    if (r.noisy_path) write_wav(dir / "noisy" / name, read_wav(*r.noisy_path));
    write_wav(dir / "enhanced" / name, read_wav(enhanced_dir / name));
  }
}

}  // namespace diffuse
