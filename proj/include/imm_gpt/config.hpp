#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace imm_gpt {

enum class ImmVariant { dense, lowrank };
enum class MemoryMode { causal, noncausal };
enum class BankScope { per_layer, shared };
// Which implementation of the memory path the model uses. `sequential` is
// the slot-by-slot reference and only supports per-layer banks.
enum class ImmImpl { parallel, sequential };

std::string to_string(ImmVariant v);
std::string to_string(MemoryMode m);
std::string to_string(BankScope s);
std::string to_string(ImmImpl i);
ImmVariant parse_variant(std::string_view s);
MemoryMode parse_memory_mode(std::string_view s);
BankScope parse_bank_scope(std::string_view s);
ImmImpl parse_impl(std::string_view s);

/// Thrown when a configuration violates an invariant.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  std::int64_t block_size = 64;
  std::int64_t n_layer = 4;
  std::int64_t n_head = 4;
  std::int64_t n_embd = 128;
  std::int64_t vocab_size = 65;
  double dropout = 0.0;

  bool imm_enabled = false;
  ImmVariant imm_variant = ImmVariant::dense;
  std::int64_t imm_slots = 0;  // 0: variant default
  std::int64_t imm_rank = 0;   // 0: variant default (lowrank only)
  MemoryMode imm_memory_mode = MemoryMode::causal;
  BankScope imm_bank_scope = BankScope::per_layer;
  bool imm_scaled_scores = false;
  ImmImpl imm_impl = ImmImpl::parallel;

  double init_std = 0.02;
  std::uint64_t seed = 1337;

  /// Fills imm_slots / imm_rank when left at 0: dense uses 16 slots,
  /// lowrank uses floor(sqrt(n_embd)) slots and rank equal to the slot count.
  ModelConfig& resolve_defaults();
  void validate() const;
};

struct TrainConfig {
  std::int64_t batch_size = 12;
  std::int64_t max_iters = 2000;
  double lr_max = 1e-3;
  double lr_min = 1e-4;
  std::int64_t warmup_iters = 100;
  std::int64_t lr_decay_iters = 2000;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 1.0;
  std::int64_t eval_interval = 40;
  std::int64_t eval_iters = 20;
  std::uint64_t seed = 1337;

  void validate() const;
  /// Non-fatal oddities, e.g. warmup longer than the decay span.
  std::vector<std::string> warnings() const;
};

struct Preset {
  std::string name;
  ModelConfig model;
  TrainConfig train;
};

/// block64 / block128 / block256: 4 layers, 4 heads, batch 12, 2000 iters,
/// n_embd 128 / 256 / 512, dropout 0.
Preset preset(std::string_view name);
std::vector<std::string> preset_names();

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Applies a JSON override document onto existing configs. Accepts either
/// {"model": {...}, "train": {...}} or a flat object whose keys are field
/// names of either struct ("seed" sets both). Unknown keys throw ConfigError.
void apply_overrides(const nlohmann::json& overrides, ModelConfig& model, TrainConfig& train);

}  // namespace imm_gpt
