// SPDX-License-Identifier: Apache-2.0
// Acceptance runner: one PASS/FAIL line per criterion, exit 0 iff all pass.
#include "diffuse/cli.hpp"
#include "diffuse/metrics.hpp"
#include "diffuse/sampler.hpp"
#include "diffuse/trainer.hpp"

#include "finite_difference.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <sstream>

#include <unistd.h>

using namespace diffuse;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

struct Criterion {
  std::string name;
  double budget_s;  // 0 = unbounded
  std::function<Outcome(const fs::path&)> body;
};

std::string format(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Runs oracle-check entries whose names start with `prefix`.
Outcome from_oracle(const std::string& prefix) {
  OracleCheckOptions opt;
  opt.only = prefix;
  Outcome o{true, ""};
  for (const auto& r : oracle_check(opt)) {
    o.passed = o.passed && r.passed;
    o.detail += (o.detail.empty() ? "" : " | ") + r.name + ": " + r.detail;
  }
  if (o.detail.empty()) o = {false, "no check named " + prefix};
  return o;
}

// ------------------------------------------------------------- gradients

Outcome gradient_correctness(const fs::path&) {
  PredictorConfig cfg = make_profile("tiny").model;
  cfg.conditioner_dim = 80;
  Rng rng(21);
  auto p = init_params<double>(cfg, rng);
  p.for_each([&](const std::string&, Matrix& m, bool) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += 0.2 * rng.normal();
  });
  const Eigen::Index length = 256;
  Conditioner cond_a, cond_b;
  cond_a.frames = Matrix(frames_for_length(length), 80);
  cond_b.frames = Matrix(frames_for_length(length), 80);
  for (Eigen::Index i = 0; i < cond_a.frames.size(); ++i) {
    cond_a.frames.data()[i] = rng.normal();
    cond_b.frames.data()[i] = rng.normal();
  }
  std::vector<BatchItem<double>> batch{{rng.normal_vector(length), 2.0, rng.normal_vector(length), &cond_a},
                                       {rng.normal_vector(length), 9.0, rng.normal_vector(length), &cond_b}};
  PredictorParams<double> grads;
  loss_and_grad<double>(p, batch, grads);

  std::vector<std::pair<std::string, Matrix*>> tensors;
  std::vector<const Matrix*> gtensors;
  p.for_each([&](const std::string& n, Matrix& m, bool) { tensors.emplace_back(n, &m); });
  grads.for_each([&](const std::string&, const Matrix& m, bool) { gtensors.push_back(&m); });

  // One group per tensor role; layer tensors of the same role share a group.
  std::map<std::string, std::vector<std::pair<std::size_t, Eigen::Index>>> groups;
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    std::string role = tensors[k].first;
    if (role.rfind("layer.", 0) == 0) role = role.substr(role.find('.', 6) + 1);
    for (Eigen::Index i = 0; i < tensors[k].second->size(); ++i) groups[role].push_back({k, i});
  }
  double worst = 0.0;
  std::string worst_at;
  std::size_t fewest = SIZE_MAX, checked = 0;
  for (auto& [role, entries] : groups) {
    std::shuffle(entries.begin(), entries.end(), rng.engine());
    const std::size_t n = std::min<std::size_t>(20, entries.size());
    fewest = std::min(fewest, n);
    for (std::size_t s = 0; s < n; ++s) {
      const auto [k, i] = entries[s];
      double& w = tensors[k].second->data()[i];
      const double orig = w;
      const auto f = [&](double v) {
        w = v;
        return batch_loss<double>(p, batch);
      };
      const double numeric = testutil::numeric_derivative(f, orig);
      w = orig;
      const double analytic = gtensors[k]->data()[i];
      const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-4});
      if (rel > worst) {
        worst = rel;
        worst_at = tensors[k].first + "[" + std::to_string(i) + "]";
      }
      ++checked;
    }
  }
  return {worst <= 1e-4, format("tiny model, %zu groups, %zu entries (>= %zu per group, all when smaller), worst rel err "
                                "%.3g at %s (tol 1e-4)",
                                groups.size(), checked, fewest, worst, worst_at.c_str())};
}

// ------------------------------------------------------------- overfit

Manifest small_corpus(const fs::path& dir, int count, std::uint64_t seed) {
  SynthSpec spec;
  spec.count = count;
  spec.duration_s = 1.0;
  spec.valid_fraction = 0.1;
  spec.test_fraction = 0.1;
  Rng rng(seed);
  return synth_corpus(spec, dir, rng);
}

Outcome overfit_one_batch(const fs::path& work) {
  const Profile profile = make_profile("tiny");
  const Manifest m = small_corpus(work / "overfit", 10, 31);
  const auto examples = load_examples(m, "train", Phase::finetune, profile.train.crop_length);
  Rng batch_rng(32);
  const TrainBatch batch =
      sample_batch(examples, profile.train.batch_size, profile.train.crop_length, profile.schedule, batch_rng);
  PredictorConfig model = profile.model;
  model.conditioner_dim = conditioner_dim_for(Phase::finetune);
  Rng init_rng(33);
  auto params = init_params<float>(model, init_rng);
  AdamState state = init_adam(params);
  TrainConfig cfg = profile.train;
  cfg.phase = Phase::finetune;

  double initial = 0.0, previous = 0.0, last = 0.0;
  int rises = 0, steps = 0;
  for (steps = 1; steps <= 2000; ++steps) {
    last = train_step(params, state, batch, profile.schedule, cfg);
    if (steps == 1) initial = last;
    else if (last > previous) ++rises;
    previous = last;
    if (last < 0.1 * initial) break;
  }
  const bool reached = last < 0.1 * initial;
  const int used = std::min(steps, 2000);
  return {reached, format("lr %.0e batch %d crop %d: loss %.4g -> %.4g (%.1f%%) after %d steps, %.1f%% non-monotone "
                          "steps (limit 2000 steps, 10%%)",
                          cfg.learning_rate, cfg.batch_size, cfg.crop_length, initial, last, 100.0 * last / initial,
                          used, 100.0 * rises / std::max(1, used - 1))};
}

// ------------------------------------------------------------- ablation

double median(std::vector<double> v) { return summarize(std::move(v)).median; }

Outcome ablation_trend(const fs::path& work) {
  const fs::path dir = work / "ablation";
  SynthSpec spec;
  spec.count = 500;
  spec.duration_s = 2.0;
  Rng synth_rng(1);
  const Manifest m = synth_corpus(spec, dir / "corpus", synth_rng);
  const auto test = m.split("test");

  const Profile profile = make_profile("tiny");
  TrainConfig cfg = profile.train;
  cfg.phase = Phase::finetune;
  cfg.seed = 1;
  cfg.early_stop_patience = cfg.max_iters;  // train the full budget, keep the best validation point
  std::ofstream log(dir / "train.log");
  const TrainResult trained = train_loop(m, cfg, profile.schedule, profile.model, dir / "tiny.ckpt", std::nullopt, &log);
  const Checkpoint ck = load_checkpoint(trained.checkpoint);

  const std::vector<std::pair<std::string, Variant>> variants{{"RP", Variant::rp},
                                                               {"RP-N_in", Variant::rp_n_in},
                                                               {"RP-N_out", Variant::rp_n_out},
                                                               {"RP-N_in+out", Variant::rp_n_in_out},
                                                               {"SRP", Variant::srp}};
  std::map<std::string, std::vector<double>> scores;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const AudioBuffer clean = read_wav(test[i].clean_path);
    const AudioBuffer noisy = read_wav(*test[i].noisy_path);
    const auto pred = network_predictor<float>(ck.params, stft_log_magnitude(noisy), noisy.size());
    scores["noisy"].push_back(si_sdr(clean.samples, noisy.samples));
    for (const auto& [name, v] : variants) {
      SamplerSpec s;
      s.variant = v;
      Rng rng = Rng::stream(7, i);
      scores[name].push_back(si_sdr(clean.samples, enhance(pred, noisy.samples, s, ck.schedule, rng)));
    }
  }
  std::map<std::string, double> med;
  for (const auto& [name, values] : scores) med[name] = median(values);
  const bool ordered = med["SRP"] >= med["RP-N_in+out"] && med["RP-N_in+out"] >= med["RP"];
  const bool gain = med["SRP"] >= med["noisy"] + 1.0;
  std::string detail = format("%zu test utterances, %d iterations (best %d, valid loss %.4g); median SI-SDR dB:",
                              test.size(), trained.last_iteration, trained.best_iteration, trained.best_valid_loss);
  for (const char* name : {"noisy", "RP", "RP-N_in", "RP-N_out", "RP-N_in+out", "SRP"})
    detail += format(" %s %.2f", name, med[name]);
  detail += format("; SRP - noisy %.2f dB (want >= 1)", med["SRP"] - med["noisy"]);
  const bool enough = test.size() >= 50 && trained.last_iteration >= 20000;
  return {ordered && gain && enough, detail};
}

// ------------------------------------------------------------- determinism

struct Call {
  int code;
  std::string out;
  std::string err;
};

Call call(std::vector<std::string> args) {
  args.insert(args.begin(), "diffuse");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  if (!fs::exists(dir)) return files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) {
      std::ifstream in(e.path(), std::ios::binary);
      files[fs::relative(e.path(), dir).string()] = {std::istreambuf_iterator<char>(in), {}};
    }
  return files;
}

Outcome cli_determinism(const fs::path& work) {
  const fs::path dir = work / "determinism";
  fs::remove_all(dir);
  const std::string corpus = (dir / "corpus").string();
  const std::string manifest = (dir / "corpus" / "manifest.tsv").string();
  const std::string ckpt = (dir / "model.ckpt").string();
  const std::vector<std::pair<std::string, std::vector<std::string>>> commands{
      {"schedule-inspect", {"schedule-inspect", "--profile", "base"}},
      {"oracle-check", {"oracle-check"}},
      {"synth-data", {"synth-data", "--out", corpus, "--count", "10", "--duration", "0.5"}},
      {"train",
       {"train", "--profile", "tiny", "--manifest", manifest, "--out", ckpt, "--max-iters", "6", "--valid-interval", "3",
        "--log", (dir / "train.log").string()}},
      {"enhance srp",
       {"enhance", "--checkpoint", ckpt, "--manifest", manifest, "--out", (dir / "srp").string(), "--variant", "srp",
        "--trace", (dir / "srp.trace").string()}},
      {"enhance rp fast",
       {"enhance", "--checkpoint", ckpt, "--manifest", manifest, "--out", (dir / "rp").string(), "--variant", "rp",
        "--schedule", "fast"}},
      {"evaluate",
       {"evaluate", "--manifest", manifest, "--enhanced-dir", (dir / "srp").string(), "--report",
        (dir / "report.tsv").string(), "--export", (dir / "export").string()}},
  };
  std::string detail;
  bool all = true;
  for (const auto& [label, args] : commands) {
    std::vector<std::string> full{"--seed", "11", "--jobs", "1"};
    full.insert(full.end(), args.begin(), args.end());
    const Call first = call(full);
    const auto files = snapshot(dir);
    const Call second = call(full);
    const bool same = first.code == 0 && second.code == first.code && second.out == first.out &&
                      second.err == first.err && snapshot(dir) == files;
    all = all && same;
    detail += (detail.empty() ? "" : ", ") + label + (same ? " identical" : " DIFFERS (exit " +
                                                                                std::to_string(first.code) + ")");
  }
  return {all, detail + " (each run twice, stdout, stderr and every output file compared)"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<std::string> only;
  std::string workdir;
  bool keep = false;
  app.add_option("--only", only, "Run only these criteria");
  app.add_option("--workdir", workdir, "Scratch directory (default: a fresh temporary directory)");
  app.add_flag("--keep", keep, "Keep the scratch directory");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria{
      {"schedule-algebra", 1, [](const fs::path&) { return from_oracle("schedule-algebra"); }},
      {"forward-consistency", 30, [](const fs::path&) { return from_oracle("forward-consistency"); }},
      {"oracle-inversion", 5, [](const fs::path&) { return from_oracle("oracle-inversion"); }},
      {"srp-clean-fixed-point", 5, [](const fs::path&) { return from_oracle("srp-clean-fixed-point"); }},
      {"srp-oracle-recovery", 10, [](const fs::path&) { return from_oracle("srp-oracle-recovery"); }},
      {"gradient-correctness", 120, gradient_correctness},
      {"overfit-one-batch", 600, overfit_one_batch},
      {"ablation-trend", 3600, ablation_trend},
      {"fast-schedule-reduction", 10, [](const fs::path&) { return from_oracle("fast-identity-reduction"); }},
      {"cli-determinism", 0, cli_determinism},
  };
  for (const auto& name : only)
    if (std::none_of(criteria.begin(), criteria.end(), [&](const Criterion& c) { return c.name == name; })) {
      std::cerr << "unknown criterion '" << name << "'\n";
      return 2;
    }

  const bool temporary = workdir.empty();
  const fs::path work = temporary ? fs::temp_directory_path() / ("diffuse-acceptance-" + std::to_string(::getpid()))
                                  : fs::path(workdir);
  fs::create_directories(work);

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.name) == only.end()) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.body(work);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = c.budget_s <= 0 || secs <= c.budget_s;
    const bool pass = o.passed && in_time;
    failed += pass ? 0 : 1;
    std::string timing = format("%.2f s", secs);
    if (c.budget_s > 0) timing += format(" of %.0f s%s", c.budget_s, in_time ? "" : " EXCEEDED");
    std::cout << (pass ? "PASS " : "FAIL ") << c.name << " [" << timing << "]: " << o.detail << std::endl;
  }
  if (temporary && !keep) fs::remove_all(work);
  std::cout << (failed ? std::to_string(failed) + " criterion(s) failed" : std::string("all criteria passed"))
            << std::endl;
  return failed ? 1 : 0;
}
