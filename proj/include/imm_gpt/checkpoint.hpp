#pragma once

#include <filesystem>
#include <stdexcept>

#include "imm_gpt/config.hpp"
#include "imm_gpt/model.hpp"
#include "imm_gpt/tokenizer.hpp"

namespace imm_gpt {

// Layout:
//   8 bytes   magic "IMMGPTCK"
//   uint32    format version (1)
//   uint64    header length in bytes
//   header    JSON {"config": ModelConfig, "vocab": Vocab, "tensors": [{"name", "shape"}]}
//   payload   float32 values of each tensor in header order
// All integers and floats are little-endian.

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  ModelConfig config;
  Vocab vocab;
  GPTModel<float> model;
};

void save_checkpoint(const std::filesystem::path& path, const GPTModel<float>& model, const Vocab& vocab);

/// Throws CheckpointError on a missing, truncated or inconsistent file.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace imm_gpt
