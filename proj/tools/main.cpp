#include <iostream>

#include "CLI11.hpp"
#include "commands.hpp"
#include "imm_gpt/ops.hpp"

namespace {

using imm_gpt::cli::CommonFlags;

void add_run_flags(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--corpus", f.corpus, "Training text file (UTF-8)");
  cmd->add_option("--preset", f.preset, "Model/training preset")
      ->check(CLI::IsMember({"block64", "block128", "block256"}));
  cmd->add_option("--imm", f.imm, "Memory module variant")->check(CLI::IsMember({"off", "dense", "lowrank"}));
  cmd->add_option("--bank-scope", f.bank_scope, "One bank per layer or one bank shared by all layers")
      ->check(CLI::IsMember({"per_layer", "shared"}));
  cmd->add_option("--slots", f.slots, "Memory slots N")->check(CLI::PositiveNumber);
  cmd->add_option("--rank", f.rank, "Low-rank factor k")->check(CLI::PositiveNumber);
  cmd->add_option("--seed", f.seed, "Seed for initialization and data sampling");
  cmd->add_option("--config", f.config_file, "JSON file overriding preset fields");
  cmd->add_option("--manifest", f.manifest, "Re-run from a manifest.json");
  cmd->add_flag("--deterministic", f.deterministic, "Write step_ms as 0 so log.csv is reproducible");
  cmd->add_flag("--quiet", f.quiet, "Do not print progress records");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Character-level GPT with an implicit memory module"};
  app.require_subcommand(1);
  app.set_version_flag("--version", IMM_GPT_VERSION);

  CommonFlags train_flags, compare_flags, profile_flags;
  imm_gpt::cli::GradcheckFlags grad_flags;
  imm_gpt::cli::SampleFlags sample_flags;

  auto* train = app.add_subcommand("train", "Train one model; writes log.csv, model.ckpt, manifest.json");
  add_run_flags(train, train_flags);
  train->add_option("--memory-mode", train_flags.memory_mode)->check(CLI::IsMember({"causal", "noncausal"}));
  train->add_option("--out", train_flags.out, "Output directory");
  train->add_option("--steps", train_flags.steps, "Override max_iters")->check(CLI::PositiveNumber);

  auto* compare = app.add_subcommand("compare", "Train baseline and IMM models on the same data stream");
  add_run_flags(compare, compare_flags);
  compare->add_option("--memory-mode", compare_flags.memory_mode, "IMM memory mode(s) to train")
      ->check(CLI::IsMember({"causal", "noncausal", "both"}))
      ->default_str("both");
  compare->add_option("--out", compare_flags.out, "Output directory");
  compare->add_option("--steps", compare_flags.steps, "Override max_iters")->check(CLI::PositiveNumber);

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every gradient on a tiny model");
  gradcheck->add_option("--variant", grad_flags.variant)->check(CLI::IsMember({"dense", "lowrank", "both"}));
  gradcheck->add_option("--memory-mode", grad_flags.memory_mode)->check(CLI::IsMember({"causal", "noncausal"}));
  gradcheck->add_option("--bank-scope", grad_flags.bank_scope)->check(CLI::IsMember({"per_layer", "shared"}));
  gradcheck->add_option("--tolerance", grad_flags.tolerance, "Maximum relative error");
  gradcheck->add_option("--seed", grad_flags.seed);

  auto* sample = app.add_subcommand("sample", "Generate text from a checkpoint");
  sample->add_option("--checkpoint", sample_flags.checkpoint, "Path to model.ckpt")->required();
  sample->add_option("--prompt", sample_flags.prompt);
  sample->add_option("--max-new", sample_flags.max_new);
  sample->add_option("--top-k", sample_flags.top_k, "0 samples from the full distribution");
  sample->add_option("--temperature", sample_flags.temperature);
  sample->add_option("--seed", sample_flags.seed);

  auto* profile = app.add_subcommand("profile", "Time baseline and IMM training steps");
  add_run_flags(profile, profile_flags);
  profile->add_option("--memory-mode", profile_flags.memory_mode)->check(CLI::IsMember({"causal", "noncausal"}));
  profile->add_option("--steps", profile_flags.steps, "Timed steps (default 20)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : imm_gpt::cli::kBadInput;
  }

  try {
    imm_gpt::configure_kernel_threads();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return imm_gpt::cli::kBadInput;
  }

  if (*train) return imm_gpt::cli::cmd_train(train_flags);
  if (*compare) return imm_gpt::cli::cmd_compare(compare_flags);
  if (*gradcheck) return imm_gpt::cli::cmd_gradcheck(grad_flags);
  if (*sample) return imm_gpt::cli::cmd_sample(sample_flags);
  return imm_gpt::cli::cmd_profile(profile_flags);
}
