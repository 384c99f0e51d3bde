#pragma once

#include <cstdint>
#include <optional>
#include <string>

namespace imm_gpt::cli {

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kBadInput = 2, kNumericAbort = 3 };

// Flags shared by the commands. Unset optionals keep the preset/config value.
struct CommonFlags {
  std::string corpus;
  std::string preset = "block64";
  std::string imm;  // off | dense | lowrank; empty means command default
  std::string memory_mode;
  std::string bank_scope;
  std::optional<std::int64_t> slots;
  std::optional<std::int64_t> rank;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string config_file;
  std::string manifest;
  std::optional<std::int64_t> steps;
  bool deterministic = false;
  bool quiet = false;
};

struct GradcheckFlags {
  std::string variant = "both";  // dense | lowrank | both
  std::string memory_mode = "causal";
  std::string bank_scope = "per_layer";
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
};

struct SampleFlags {
  std::string checkpoint;
  std::string prompt = "\n";
  std::int64_t max_new = 200;
  std::int64_t top_k = 0;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

int cmd_train(const CommonFlags& flags);
int cmd_compare(const CommonFlags& flags);
int cmd_gradcheck(const GradcheckFlags& flags);
int cmd_sample(const SampleFlags& flags);
int cmd_profile(const CommonFlags& flags);

}  // namespace imm_gpt::cli
