#include "doctest.h"

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(IMM_GPT_CLI) + " " + args + " 2>&1";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Workdir {
  fs::path root;
  Workdir() {
    root = fs::temp_directory_path() / ("imm_gpt_cli_" + std::to_string(::getpid()));
    fs::create_directories(root);
    std::ofstream(root / "corpus.txt") << [] {
      std::string s;
      for (int i = 0; i < 200; ++i) s += "the quick brown fox jumps over the lazy dog.\n";
      return s;
    }();
    std::ofstream(root / "tiny.json")
        << R"({"block_size": 16, "n_layer": 1, "n_head": 2, "n_embd": 16, "batch_size": 2,
              "eval_interval": 5, "eval_iters": 2, "warmup_iters": 2, "lr_decay_iters": 10})";
  }
  ~Workdir() { fs::remove_all(root); }
  std::string path(const std::string& name) const { return (root / name).string(); }
  std::string train_args(const std::string& out) const {
    return "train --corpus " + path("corpus.txt") + " --config " + path("tiny.json") + " --steps 10 --quiet --out " +
           path(out);
  }
};

}  // namespace

TEST_CASE("cli: train writes artifacts and sample reads them back") {
  Workdir w;
  const auto r = run(w.train_args("a") + " --imm dense --slots 4 --deterministic");
  REQUIRE_MESSAGE(r.code == 0, r.out);
  CHECK(fs::exists(w.root / "a" / "log.csv"));
  CHECK(fs::exists(w.root / "a" / "model.ckpt"));
  const auto manifest = nlohmann::json::parse(slurp(w.root / "a" / "manifest.json"));
  CHECK(manifest.at("command") == "train");
  CHECK(manifest.at("model").at("imm_slots") == 4);
  CHECK(manifest.at("params").at("per_layer_imm").get<long>() > 0);
  CHECK(slurp(w.root / "a" / "log.csv").starts_with("step,split,smoothed_loss,raw_loss,lr,step_ms,variant\n"));

  const std::string ckpt = w.path("a/model.ckpt");
  const auto s1 = run("sample --checkpoint " + ckpt + " --prompt the --max-new 30 --seed 5");
  const auto s2 = run("sample --checkpoint " + ckpt + " --prompt the --max-new 30 --seed 5");
  REQUIRE_MESSAGE(s1.code == 0, s1.out);
  CHECK(s1.out == s2.out);
  CHECK(s1.out.starts_with("the"));
  const auto echo = run("sample --checkpoint " + ckpt + " --prompt fox --max-new 0");
  CHECK(echo.code == 0);
  CHECK(echo.out == "fox\n");
  CHECK(run("sample --checkpoint " + ckpt + " --prompt XYZ").code == 2);

  // Re-running from the manifest reproduces the log byte for byte.
  const auto rerun = run("train --manifest " + w.path("a/manifest.json") + " --deterministic --quiet --out " + w.path("b"));
  REQUIRE_MESSAGE(rerun.code == 0, rerun.out);
  CHECK(slurp(w.root / "a" / "log.csv") == slurp(w.root / "b" / "log.csv"));
}

TEST_CASE("cli: baseline manifest reports no memory parameters") {
  Workdir w;
  const auto r = run(w.train_args("off") + " --imm off");
  REQUIRE_MESSAGE(r.code == 0, r.out);
  const auto manifest = nlohmann::json::parse(slurp(w.root / "off" / "manifest.json"));
  CHECK(manifest.at("params").at("per_layer_imm") == 0);
  CHECK(manifest.at("model").at("imm_enabled") == false);
}

TEST_CASE("cli: input errors exit 2") {
  Workdir w;
  CHECK(run("train --corpus " + w.path("missing.txt") + " --steps 1 --out " + w.path("x")).code == 2);
  std::ofstream(w.root / "bad.ckpt") << "IMMGPTCK garbage";
  CHECK(run("sample --checkpoint " + w.path("bad.ckpt")).code == 2);
  CHECK(run("sample --checkpoint " + w.path("nothing.ckpt")).code == 2);
  CHECK(run("train --bogus-flag").code == 2);
  CHECK(run("train --preset block999 --corpus " + w.path("corpus.txt")).code == 2);
  std::ofstream(w.root / "unknown.json") << R"({"n_layers": 2})";
  CHECK(run("train --corpus " + w.path("corpus.txt") + " --config " + w.path("unknown.json")).code == 2);
}

TEST_CASE("cli: gradcheck and profile exit codes") {
  const auto ok = run("gradcheck --variant lowrank");
  CHECK_MESSAGE(ok.code == 0, ok.out);
  CHECK(ok.out.find("PASS") != std::string::npos);
  const auto strict = run("gradcheck --variant dense --tolerance 1e-12");
  CHECK(strict.code == 1);
  CHECK(strict.out.find("FAIL") != std::string::npos);

  const auto none = run("profile --steps 0");
  CHECK(none.code == 1);
  CHECK(none.out.find("no samples") != std::string::npos);
}

TEST_CASE("cli: compare writes combined outputs") {
  Workdir w;
  const auto r = run("compare --corpus " + w.path("corpus.txt") + " --config " + w.path("tiny.json") +
                     " --steps 6 --quiet --imm lowrank --memory-mode causal --out " + w.path("cmp"));
  REQUIRE_MESSAGE(r.code == 0, r.out);
  for (const char* f : {"log.csv", "compare.svg", "summary.json", "summary.txt", "manifest.json"}) {
    CHECK_MESSAGE(fs::exists(w.root / "cmp" / f), f);
  }
  const auto summary = nlohmann::json::parse(slurp(w.root / "cmp" / "summary.json"));
  CHECK(summary.dump().find("reduction_percent") != std::string::npos);
  const auto log = slurp(w.root / "cmp" / "log.csv");
  CHECK(log.find(",baseline\n") != std::string::npos);
  CHECK(log.find(",imm-lowrank-causal\n") != std::string::npos);
}
