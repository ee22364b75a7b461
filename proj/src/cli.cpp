// SPDX-License-Identifier: Apache-2.0
#include "diffuse/cli.hpp"

#include "diffuse/checkpoint.hpp"
#include "diffuse/metrics.hpp"
#include "diffuse/sampler.hpp"
#include "diffuse/schedule.hpp"
#include "diffuse/signal.hpp"
#include "diffuse/trainer.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

namespace diffuse {

namespace fs = std::filesystem;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  int jobs = 1;
  bool verbose = false;
};

std::string fmt(const char* format, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

std::pair<double, double> parse_beta_range(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw std::invalid_argument("--beta expects MIN:MAX, got '" + text + "'");
  return {std::stod(text.substr(0, colon)), std::stod(text.substr(colon + 1))};
}

// ---------------------------------------------------------------- schedule-inspect

struct InspectArgs {
  int T = 50;
  std::string beta = "1e-4:0.05";
  std::string betas;
  std::string profile;
  double gamma1 = 0.2;
};

int cmd_schedule_inspect(const InspectArgs& a, std::ostream& out) {
  NoiseSchedule s = a.profile.empty() ? NoiseSchedule::from_betas({0.5}) : make_profile(a.profile).schedule;
  if (a.profile.empty()) {
    if (!a.betas.empty()) {
      s = NoiseSchedule::from_betas(parse_beta_list(a.betas));
    } else {
      const auto [lo, hi] = parse_beta_range(a.beta);
      s = linear_schedule(a.T, lo, hi);
    }
  }
  const GammaPolicy policy{a.gamma1};
  out << "t\tbeta\talpha\talpha_bar\tsigma\tgamma\tsigma_hat\n";
  for (int t = 1; t <= s.steps(); ++t) {
    // No noise is added at t = 1, so the supportive scale there is 0.
    const double sh = t == 1 ? 0.0 : srp_sigma_hat_clamped(s, policy, t);
    out << fmt("%d\t%.10g\t%.10g\t%.10g\t%.10g\t%.10g\t%.10g\n", t, s.beta(t), s.alpha(t), s.alpha_bar(t), s.sigma(t),
               gamma(s, policy, t), sh);
  }
  return 0;
}

// ---------------------------------------------------------------- synth-data

struct SynthArgs {
  std::string out;
  int count = 10;
  double duration = 2.0;
  std::string snrs = "0,5,10,15";
  double valid_fraction = 0.1;
  double test_fraction = 0.1;
};

int cmd_synth(const SynthArgs& a, const Globals& g, std::ostream& out) {
  SynthSpec spec;
  spec.count = a.count;
  spec.duration_s = a.duration;
  spec.snrs_db = parse_beta_list(a.snrs);
  spec.valid_fraction = a.valid_fraction;
  spec.test_fraction = a.test_fraction;
  Rng rng(g.seed);
  const Manifest m = synth_corpus(spec, a.out, rng);
  out << "wrote " << m.records.size() << " utterances to " << (fs::path(a.out) / "manifest.tsv").string() << '\n';
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string profile = "tiny";
  std::string phase = "finetune";
  std::string manifest;
  std::string out;
  std::optional<int> max_iters, patience, batch_size, crop_length, valid_interval, pretrain_iters;
  std::optional<double> lr;
  std::string log;
};

int cmd_train(const TrainArgs& a, const Globals& g, std::ostream& out) {
  const Profile prof = make_profile(a.profile);
  TrainConfig cfg = prof.train;
  cfg.seed = g.seed;
  cfg.jobs = g.jobs;
  if (a.max_iters) cfg.max_iters = *a.max_iters;
  if (a.patience) cfg.early_stop_patience = *a.patience;
  if (a.batch_size) cfg.batch_size = *a.batch_size;
  if (a.crop_length) cfg.crop_length = *a.crop_length;
  if (a.valid_interval) cfg.valid_interval = *a.valid_interval;
  if (a.lr) cfg.learning_rate = *a.lr;
  const Manifest manifest = read_manifest(a.manifest);

  std::ofstream log_file;
  std::ostream* log = &out;
  if (!a.log.empty()) {
    log_file.open(a.log, std::ios::trunc);
    if (!log_file) throw IoError("cannot write log " + a.log);
    log = &log_file;
  }
  const fs::path out_path(a.out);
  TrainResult r;
  if (a.phase == "both") {
    TrainConfig pre = cfg;
    pre.phase = Phase::pretrain;
    if (a.pretrain_iters) pre.max_iters = *a.pretrain_iters;
    TrainConfig fine = cfg;
    fine.phase = Phase::finetune;
    fs::path pre_path = out_path;
    pre_path.replace_extension(".pretrain" + out_path.extension().string());
    r = pretrain_then_finetune(manifest, manifest, pre, fine, prof.schedule, prof.model, pre_path, out_path, log);
  } else {
    cfg.phase = parse_phase(a.phase);
    r = train_loop(manifest, cfg, prof.schedule, prof.model, out_path, std::nullopt, log);
  }
  out << fmt("# checkpoint %s best_iteration %d best_valid_loss %.6f last_iteration %d%s%s\n",
             r.checkpoint.string().c_str(), r.best_iteration, r.best_valid_loss, r.last_iteration,
             r.stopped_early ? " stopped_early" : "", r.diverged ? " diverged" : "");
  return 0;
}

// ---------------------------------------------------------------- enhance

struct EnhanceArgs {
  std::string checkpoint;
  std::string input;
  std::string manifest;
  std::string split = "test";
  std::string out;
  std::string variant = "srp";
  std::string schedule = "full";
  std::string fast_betas;
  double gamma1 = 0.2;
  double mix = 0.2;
  std::string trace;
};

Conditioner conditioner_for(const PredictorConfig& model, const AudioBuffer& noisy) {
  if (model.conditioner_dim == kLinearBins) return stft_log_magnitude(noisy);
  if (model.conditioner_dim == kMelBins) return mel_spectrogram(noisy);
  throw FormatError("checkpoint conditioner width " + std::to_string(model.conditioner_dim) +
                    " is neither a linear spectrum nor a Mel spectrum");
}

int cmd_enhance(const EnhanceArgs& a, const Globals& g, std::ostream& out, std::ostream& err) {
  if (a.input.empty() == a.manifest.empty()) throw CLI::ValidationError("enhance", "give exactly one of --input or --manifest");
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  SamplerSpec spec;
  spec.variant = parse_variant(a.variant);
  spec.gamma_policy.gamma1 = a.gamma1;
  spec.output_mix_weight = a.mix;
  if (a.schedule == "fast")
    spec.schedule_mode = FastBetas{a.fast_betas.empty() ? base_fast_betas() : parse_beta_list(a.fast_betas)};
  spec.validate();

  struct Job {
    std::string id;
    fs::path noisy;
    fs::path dest;
  };
  std::vector<Job> jobs;
  if (!a.input.empty()) {
    jobs.push_back({fs::path(a.input).stem().string(), a.input, a.out});
  } else {
    const Manifest m = read_manifest(a.manifest);
    for (const auto& rec : m.split(a.split)) {
      if (!rec.noisy_path) throw FormatError("record " + rec.id() + " has no noisy file");
      jobs.push_back({rec.id(), *rec.noisy_path, fs::path(a.out) / (rec.id() + ".wav")});
    }
    if (jobs.empty()) throw std::invalid_argument("manifest has no '" + a.split + "' records");
    fs::create_directories(a.out);
  }

  std::vector<ReverseTrace> traces(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        const AudioBuffer noisy = read_wav(jobs[i].noisy);
        require_sample_rate(noisy);
        const Conditioner cond = conditioner_for(ck.params.config, noisy);
        const auto pred = network_predictor<float>(ck.params, cond, noisy.samples.size());
        Rng rng = Rng::stream(g.seed, i);
        const Vector x = enhance(pred, noisy.samples, spec, ck.schedule, rng, a.trace.empty() ? nullptr : &traces[i]);
        write_wav(jobs[i].dest, {x, kSampleRate});
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 1; w < std::min<int>(g.jobs, static_cast<int>(jobs.size())); ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  if (!a.trace.empty()) {
    std::ofstream tr(a.trace, std::ios::trunc);
    if (!tr) throw IoError("cannot write trace " + a.trace);
    tr << "id\tstep\tposition\teps_norm\tx_norm\n";
    for (std::size_t i = 0; i < jobs.size(); ++i)
      for (const auto& r : traces[i])
        tr << fmt("%s\t%d\t%.10g\t%.10g\t%.10g\n", jobs[i].id.c_str(), r.step, r.position, r.eps_norm, r.x_norm);
  }
  if (g.verbose) err << "enhanced " << jobs.size() << " file(s) with " << to_string(spec.variant) << '\n';
  out << "enhanced " << jobs.size() << " file(s)\n";
  return 0;
}

// ---------------------------------------------------------------- evaluate

struct EvaluateArgs {
  std::string manifest;
  std::string enhanced_dir;
  std::string split = "test";
  std::string report;
  std::string export_dir;
};

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out, std::ostream& err) {
  const Manifest m = read_manifest(a.manifest);
  ScoreReport report;
  try {
    report = evaluate(m, a.enhanced_dir, a.split);
  } catch (const MissingFiles& e) {
    err << "error: " << e.paths.size() << " enhanced file(s) missing:\n";
    for (const auto& p : e.paths) err << "  " << p << '\n';
    return 1;
  }
  if (a.report.empty()) {
    out << report.to_tsv();
  } else {
    std::ofstream f(a.report, std::ios::trunc);
    if (!f) throw IoError("cannot write report " + a.report);
    f << report.to_tsv();
    const auto s = report.si_sdr_summary();
    out << fmt("scored %zu utterances: SI-SDR mean %.3f median %.3f dB\n", report.rows.size(), s.mean, s.median);
  }
  if (!a.export_dir.empty()) export_for_scoring(m, a.enhanced_dir, a.export_dir, a.split);
  return 0;
}

// ---------------------------------------------------------------- oracle-check

struct OracleArgs {
  std::string corrupt_sigma;
  std::string only;
};

int cmd_oracle(const OracleArgs& a, const Globals& g, std::ostream& out) {
  OracleCheckOptions opt;
  opt.seed = g.seed;
  opt.only = a.only;
  if (!a.corrupt_sigma.empty()) {
    const auto colon = a.corrupt_sigma.find(':');
    if (colon == std::string::npos) throw CLI::ValidationError("--corrupt-sigma", "expects STEP:VALUE");
    opt.corrupt_sigma = {std::stoi(a.corrupt_sigma.substr(0, colon)), std::stod(a.corrupt_sigma.substr(colon + 1))};
  }
  const auto results = oracle_check(opt);
  if (results.empty()) throw std::invalid_argument("no check name starts with '" + a.only + "'");
  bool all = true;
  for (const auto& r : results) {
    out << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
    all = all && r.passed;
  }
  out << (all ? "all checks passed\n" : "some checks failed\n");
  return all ? 0 : 1;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Diffusion-based speech enhancement toolkit", "diffuse"};
  app.fallthrough();
  app.require_subcommand(1);
  app.set_config("--config", "", "Key=value configuration file; flags take precedence");
  Globals g;
  app.add_option("--seed", g.seed, "Seed for every stochastic step")->capture_default_str();
  app.add_option("--jobs", g.jobs, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_flag("--verbose", g.verbose, "Extra diagnostics on stderr");

  InspectArgs ia;
  auto* inspect = app.add_subcommand("schedule-inspect", "Print the per-step constants of a noise schedule");
  inspect->add_option("--T", ia.T, "Number of diffusion steps")->capture_default_str()->check(CLI::PositiveNumber);
  inspect->add_option("--beta", ia.beta, "Linear beta range MIN:MAX")->capture_default_str();
  inspect->add_option("--betas", ia.betas, "Explicit comma-separated beta list");
  inspect->add_option("--profile", ia.profile, "Use a profile's schedule")->check(CLI::IsMember({"tiny", "base", "large"}));
  inspect->add_option("--gamma1", ia.gamma1, "Mixing ratio at the last step")->capture_default_str();

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth-data", "Generate a synthetic noisy-speech corpus");
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--count", sa.count, "Number of utterances")->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--duration", sa.duration, "Seconds per utterance")->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--snrs", sa.snrs, "Comma-separated SNR choices in dB")->capture_default_str();
  synth->add_option("--valid-fraction", sa.valid_fraction)->capture_default_str()->check(CLI::Range(0.0, 1.0));
  synth->add_option("--test-fraction", sa.test_fraction)->capture_default_str()->check(CLI::Range(0.0, 1.0));

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a noise predictor");
  train->add_option("--profile", ta.profile)->capture_default_str()->check(CLI::IsMember({"tiny", "base", "large"}));
  train->add_option("--phase", ta.phase)->capture_default_str()->check(CLI::IsMember({"pretrain", "finetune", "both"}));
  train->add_option("--manifest", ta.manifest, "Corpus manifest")->required();
  train->add_option("--out", ta.out, "Checkpoint path")->required();
  train->add_option("--max-iters", ta.max_iters)->check(CLI::NonNegativeNumber);
  train->add_option("--patience", ta.patience, "Validation checks without improvement")->check(CLI::PositiveNumber);
  train->add_option("--lr", ta.lr, "Learning rate")->check(CLI::NonNegativeNumber);
  train->add_option("--batch-size", ta.batch_size)->check(CLI::PositiveNumber);
  train->add_option("--crop-length", ta.crop_length, "Training crop in samples")->check(CLI::PositiveNumber);
  train->add_option("--valid-interval", ta.valid_interval)->check(CLI::PositiveNumber);
  train->add_option("--pretrain-iters", ta.pretrain_iters, "Phase-one iterations with --phase both")
      ->check(CLI::NonNegativeNumber);
  train->add_option("--log", ta.log, "Write progress records here instead of stdout");

  EnhanceArgs ea;
  auto* enh = app.add_subcommand("enhance", "Enhance noisy speech with a trained checkpoint");
  enh->add_option("--checkpoint", ea.checkpoint)->required()->check(CLI::ExistingFile);
  enh->add_option("--input", ea.input, "Single noisy WAV")->check(CLI::ExistingFile);
  enh->add_option("--manifest", ea.manifest, "Enhance every noisy file of --split")->check(CLI::ExistingFile);
  enh->add_option("--split", ea.split)->capture_default_str();
  enh->add_option("--out", ea.out, "Output WAV (--input) or directory (--manifest)")->required();
  enh->add_option("--variant", ea.variant)->capture_default_str()->check(
      CLI::IsMember({"rp", "rp-nin", "rp-nout", "rp-ninout", "srp"}));
  enh->add_option("--schedule", ea.schedule)->capture_default_str()->check(CLI::IsMember({"full", "fast"}));
  enh->add_option("--fast-betas", ea.fast_betas, "Comma-separated inference betas");
  enh->add_option("--gamma1", ea.gamma1)->capture_default_str()->check(CLI::Range(0.0, 1.0));
  enh->add_option("--mix", ea.mix, "Noisy-signal weight of the output mix")->capture_default_str()->check(
      CLI::Range(0.0, 1.0));
  enh->add_option("--trace", ea.trace, "Per-step trace TSV");

  EvaluateArgs va;
  auto* eval = app.add_subcommand("evaluate", "Score enhanced files against clean references");
  eval->add_option("--manifest", va.manifest)->required()->check(CLI::ExistingFile);
  eval->add_option("--enhanced-dir", va.enhanced_dir)->required();
  eval->add_option("--split", va.split)->capture_default_str();
  eval->add_option("--report", va.report, "Report path (stdout when omitted)");
  eval->add_option("--export", va.export_dir, "Write paired WAVs for external scoring");

  OracleArgs oa;
  auto* oracle = app.add_subcommand("oracle-check", "Self-check with analytic predictors");
  oracle->add_option("--only", oa.only, "Run only checks whose name starts with this prefix");
  oracle->add_option("--corrupt-sigma", oa.corrupt_sigma, "Test hook: overwrite sigma at STEP:VALUE")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return 2;
  }

  try {
    if (*inspect) return cmd_schedule_inspect(ia, out);
    if (*synth) return cmd_synth(sa, g, out);
    if (*train) return cmd_train(ta, g, out);
    if (*enh) return cmd_enhance(ea, g, out, err);
    if (*eval) return cmd_evaluate(va, out, err);
    if (*oracle) return cmd_oracle(oa, g, out);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace diffuse
