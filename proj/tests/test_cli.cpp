// SPDX-License-Identifier: Apache-2.0
#include "diffuse/cli.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <algorithm>
#include <map>
#include <sstream>
#include <vector>

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = 0;
  std::string out;
  std::string err;
};

Outcome call(std::vector<std::string> args) {
  args.insert(args.begin(), "diffuse");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = diffuse::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

int count_lines(const std::string& s) { return static_cast<int>(std::count(s.begin(), s.end(), '\n')); }

// Every regular file under `dir`, keyed by relative path.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = testutil::slurp(e.path());
  return files;
}

// Synthetic corpus, a few-iteration tiny checkpoint and its enhanced test split.
struct Workspace {
  testutil::TempDir dir{"cli"};
  fs::path corpus = dir / "corpus";
  fs::path manifest = corpus / "manifest.tsv";
  fs::path ckpt = dir / "tiny.ckpt";
  Workspace() {
    REQUIRE(call({"synth-data", "--out", corpus.string(), "--count", "10", "--duration", "0.5", "--seed", "4"}).code ==
            0);
    REQUIRE(call({"train", "--profile", "tiny", "--manifest", manifest.string(), "--out", ckpt.string(), "--max-iters",
                  "4", "--valid-interval", "2", "--seed", "4"})
                .code == 0);
  }
};

Workspace& workspace() {
  static Workspace w;
  return w;
}

}  // namespace

TEST_CASE("schedule-inspect prints one row per step") {
  const auto r = call({"schedule-inspect"});
  CHECK(r.code == 0);
  CHECK(count_lines(r.out) == 51);
  CHECK(r.out.rfind("t\tbeta\talpha\talpha_bar\tsigma\tgamma\tsigma_hat\n", 0) == 0);
  const auto t3 = call({"schedule-inspect", "--T", "3", "--beta", "0.1:0.3"});
  CHECK(t3.out.find("3\t0.3\t0.7\t0.504\t") != std::string::npos);
  CHECK(call({"schedule-inspect", "--profile", "large"}).out.size() > 0);
  CHECK(count_lines(call({"schedule-inspect", "--profile", "large"}).out) == 201);
}

TEST_CASE("usage errors exit with 2") {
  const auto no_ckpt = call({"enhance", "--input", "x.wav", "--out", "y"});
  CHECK(no_ckpt.code == 2);
  CHECK(no_ckpt.err.find("checkpoint") != std::string::npos);
  CHECK(call({"schedule-inspect", "--bogus"}).code == 2);
  CHECK(call({}).code == 2);
  CHECK(call({"frobnicate"}).code == 2);
  CHECK(call({"train", "--profile", "huge", "--out", "x"}).code == 2);
  CHECK(call({"--help"}).code == 0);
}

TEST_CASE("runtime errors exit with 1") {
  const testutil::TempDir dir("cli-err");
  const auto r = call({"schedule-inspect", "--beta", "0.3:0.1"});
  CHECK(r.code == 1);
  CHECK(r.err.rfind("error: ", 0) == 0);
  CHECK(call({"train", "--manifest", (dir / "none.tsv").string(), "--out", (dir / "a.ckpt").string()}).code == 1);
}

TEST_CASE("config file supplies options") {
  const testutil::TempDir dir("cli-config");
  std::ofstream(dir / "a.ini") << "[schedule-inspect]\nT=3\nbeta=0.1:0.3\n";
  const auto r = call({"--config", (dir / "a.ini").string(), "schedule-inspect"});
  CHECK(r.code == 0);
  CHECK(r.out == call({"schedule-inspect", "--T", "3", "--beta", "0.1:0.3"}).out);
}

TEST_CASE("oracle-check passes and reports corrupted schedules") {
  const auto ok = call({"oracle-check"});
  CHECK(ok.code == 0);
  CHECK(ok.out.find("FAIL") == std::string::npos);
  const auto bad = call({"oracle-check", "--corrupt-sigma", "10:0.5"});
  CHECK(bad.code == 1);
  CHECK(bad.out.find("FAIL schedule-algebra base") != std::string::npos);
  CHECK(bad.out == call({"oracle-check", "--corrupt-sigma", "10:0.5"}).out);
}

TEST_CASE("synth-data is byte-reproducible") {
  const testutil::TempDir dir("cli-synth");
  const std::vector<std::string> args{"synth-data", "--out", (dir / "c").string(), "--count", "6", "--duration",
                                      "0.25", "--seed", "9"};
  const auto first = call(args);
  REQUIRE(first.code == 0);
  const auto files = snapshot(dir / "c");
  CHECK(files.size() == 13u);
  const auto second = call(args);
  CHECK(second.out == first.out);
  CHECK(snapshot(dir / "c") == files);
  call({"synth-data", "--out", (dir / "d").string(), "--count", "6", "--duration", "0.25", "--seed", "10"});
  const auto other = snapshot(dir / "d");
  REQUIRE(other.size() == files.size());
  CHECK(other.begin()->first == files.begin()->first);
  CHECK(other.begin()->second != files.begin()->second);
}

TEST_CASE("train is byte-reproducible") {
  auto& w = workspace();
  const fs::path out = w.dir / "again.ckpt";
  const std::vector<std::string> args{"train",          "--profile", "tiny", "--manifest", w.manifest.string(),
                                      "--out",          out.string(), "--max-iters", "4", "--valid-interval", "2",
                                      "--seed", "4", "--log", (w.dir / "again.log").string()};
  const auto a = call(args);
  REQUIRE(a.code == 0);
  const std::string ckpt = testutil::slurp(out);
  const std::string log = testutil::slurp(w.dir / "again.log");
  CHECK(ckpt == testutil::slurp(w.ckpt));
  const auto b = call(args);
  CHECK(b.out == a.out);
  CHECK(testutil::slurp(out) == ckpt);
  CHECK(testutil::slurp(w.dir / "again.log") == log);
  CHECK(log.rfind("iter\ttrain_loss\tvalid_loss\n", 0) == 0);
}

TEST_CASE("train with both phases writes both checkpoints") {
  auto& w = workspace();
  const fs::path out = w.dir / "both.ckpt";
  const auto r = call({"train", "--profile", "tiny", "--phase", "both", "--manifest", w.manifest.string(), "--out",
                       out.string(), "--max-iters", "2", "--pretrain-iters", "2", "--valid-interval", "1"});
  CHECK(r.code == 0);
  CHECK(fs::exists(out));
  CHECK(fs::exists(w.dir / "both.pretrain.ckpt"));
}

TEST_CASE("enhance and evaluate are byte-reproducible") {
  auto& w = workspace();
  for (const char* variant : {"rp", "rp-nin", "rp-nout", "rp-ninout", "srp"}) {
    CAPTURE(variant);
    const fs::path out = w.dir / ("enh-" + std::string(variant));
    const std::vector<std::string> args{"enhance", "--checkpoint", w.ckpt.string(), "--manifest", w.manifest.string(),
                                        "--out", out.string(), "--variant", variant, "--seed", "3", "--trace",
                                        (w.dir / (std::string(variant) + ".trace")).string()};
    const auto a = call(args);
    REQUIRE(a.code == 0);
    const auto files = snapshot(out);
    CHECK(files.size() == 1u);
    const std::string trace = testutil::slurp(w.dir / (std::string(variant) + ".trace"));
    CHECK(count_lines(trace) == 1 + 10);
    const auto b = call(args);
    CHECK(b.out == a.out);
    CHECK(snapshot(out) == files);
    CHECK(testutil::slurp(w.dir / (std::string(variant) + ".trace")) == trace);

    const std::vector<std::string> eval{"evaluate", "--manifest", w.manifest.string(), "--enhanced-dir", out.string(),
                                        "--report", (w.dir / "report.tsv").string()};
    const auto e1 = call(eval);
    REQUIRE(e1.code == 0);
    const std::string report = testutil::slurp(w.dir / "report.tsv");
    const auto e2 = call(eval);
    CHECK(e2.out == e1.out);
    CHECK(testutil::slurp(w.dir / "report.tsv") == report);
  }
}

TEST_CASE("enhance output does not depend on the worker count") {
  auto& w = workspace();
  const auto run_with = [&](const std::string& jobs) {
    const fs::path out = w.dir / ("jobs" + jobs);
    REQUIRE(call({"enhance", "--checkpoint", w.ckpt.string(), "--manifest", w.manifest.string(), "--split", "train",
                  "--out", out.string(), "--variant", "rp", "--schedule", "fast", "--jobs", jobs})
                .code == 0);
    return snapshot(out);
  };
  const auto one = run_with("1");
  CHECK(one.size() == 8u);
  CHECK(run_with("3") == one);
}

TEST_CASE("enhance of a single file and the fast schedule") {
  auto& w = workspace();
  const fs::path noisy = fs::directory_iterator(w.corpus / "noisy")->path();
  const fs::path out = w.dir / "single.wav";
  const auto r = call({"enhance", "--checkpoint", w.ckpt.string(), "--input", noisy.string(), "--out", out.string(),
                       "--schedule", "fast", "--trace", (w.dir / "fast.trace").string()});
  CHECK(r.code == 0);
  CHECK(fs::is_regular_file(out));
  CHECK(count_lines(testutil::slurp(w.dir / "fast.trace")) == 1 + 6);
  CHECK(call({"enhance", "--checkpoint", w.ckpt.string(), "--input", noisy.string(), "--manifest",
              w.manifest.string(), "--out", out.string()})
            .code == 2);
}

TEST_CASE("evaluate lists every missing file and exits with 1") {
  auto& w = workspace();
  const testutil::TempDir empty("cli-empty");
  const auto r = call({"evaluate", "--manifest", w.manifest.string(), "--enhanced-dir", empty.path().string(),
                       "--split", "train"});
  CHECK(r.code == 1);
  CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1 + 8);
}

TEST_CASE("evaluate export writes the scoring layout") {
  auto& w = workspace();
  const fs::path enhanced = w.dir / "enh-srp";
  if (!fs::exists(enhanced)) return;
  const fs::path exported = w.dir / "export";
  CHECK(call({"evaluate", "--manifest", w.manifest.string(), "--enhanced-dir", enhanced.string(), "--export",
              exported.string()})
            .code == 0);
  for (const char* sub : {"clean", "noisy", "enhanced"}) CHECK(fs::is_directory(exported / sub));
}
