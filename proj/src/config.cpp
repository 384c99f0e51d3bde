#include "imm_gpt/config.hpp"

#include <cmath>
#include <set>

#include "imm_gpt/imm.hpp"

namespace imm_gpt {

std::string to_string(ImmVariant v) { return v == ImmVariant::dense ? "dense" : "lowrank"; }
std::string to_string(MemoryMode m) { return m == MemoryMode::causal ? "causal" : "noncausal"; }
std::string to_string(BankScope s) { return s == BankScope::per_layer ? "per_layer" : "shared"; }
std::string to_string(ImmImpl i) { return i == ImmImpl::parallel ? "parallel" : "sequential"; }

ImmVariant parse_variant(std::string_view s) {
  if (s == "dense") return ImmVariant::dense;
  if (s == "lowrank") return ImmVariant::lowrank;
  throw ConfigError("unknown IMM variant: " + std::string(s));
}

MemoryMode parse_memory_mode(std::string_view s) {
  if (s == "causal") return MemoryMode::causal;
  if (s == "noncausal") return MemoryMode::noncausal;
  throw ConfigError("unknown memory mode: " + std::string(s));
}

BankScope parse_bank_scope(std::string_view s) {
  if (s == "per_layer") return BankScope::per_layer;
  if (s == "shared") return BankScope::shared;
  throw ConfigError("unknown bank scope: " + std::string(s));
}

ImmImpl parse_impl(std::string_view s) {
  if (s == "parallel") return ImmImpl::parallel;
  if (s == "sequential") return ImmImpl::sequential;
  throw ConfigError("unknown IMM implementation: " + std::string(s));
}

ModelConfig& ModelConfig::resolve_defaults() {
  if (imm_slots == 0) imm_slots = imm_variant == ImmVariant::dense ? 16 : num_slots(n_embd);
  if (imm_rank == 0 && imm_variant == ImmVariant::lowrank) imm_rank = imm_slots;
  return *this;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid model config: " + msg); };
  if (block_size < 1) fail("block_size must be >= 1");
  if (n_layer < 1) fail("n_layer must be >= 1");
  if (n_head < 1) fail("n_head must be >= 1");
  if (n_embd < 1 || n_embd % n_head != 0) fail("n_embd must be a positive multiple of n_head");
  if (vocab_size < 1) fail("vocab_size must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must be in [0, 1)");
  if (init_std <= 0.0) fail("init_std must be positive");
  if (imm_enabled) {
    if (imm_slots < 1) fail("imm_slots must be >= 1");
    if (imm_variant == ImmVariant::lowrank && imm_rank < 1) fail("imm_rank must be >= 1 for lowrank");
    if (imm_impl == ImmImpl::sequential && imm_bank_scope != BankScope::per_layer) {
      fail("the sequential reference implementation supports per_layer banks only");
    }
    if (imm_impl == ImmImpl::sequential && imm_memory_mode != MemoryMode::causal) {
      fail("the sequential reference implementation is causal by construction");
    }
  }
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid train config: " + msg); };
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (max_iters < 1) fail("max_iters must be >= 1");
  if (!(lr_max > 0.0) || !(lr_min > 0.0)) fail("learning rates must be positive");
  if (warmup_iters < 0 || lr_decay_iters < 0) fail("schedule lengths must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must be in [0, 1)");
  if (weight_decay < 0.0) fail("weight_decay must be >= 0");
  if (grad_clip < 0.0) fail("grad_clip must be >= 0 (0 disables clipping)");
  if (eval_interval < 1) fail("eval_interval must be >= 1");
  if (eval_iters < 0) fail("eval_iters must be >= 0");
}

std::vector<std::string> TrainConfig::warnings() const {
  std::vector<std::string> out;
  if (warmup_iters >= lr_decay_iters) out.push_back("warmup_iters >= lr_decay_iters");
  if (lr_decay_iters > max_iters) out.push_back("lr_decay_iters > max_iters");
  if (lr_min > lr_max) out.push_back("lr_min > lr_max");
  return out;
}

Preset preset(std::string_view name) {
  Preset p;
  p.name = std::string(name);
  if (name == "block64") {
    p.model.block_size = 64;
    p.model.n_embd = 128;
  } else if (name == "block128") {
    p.model.block_size = 128;
    p.model.n_embd = 256;
  } else if (name == "block256") {
    p.model.block_size = 256;
    p.model.n_embd = 512;
  } else {
    throw ConfigError("unknown preset: " + std::string(name));
  }
  p.model.n_layer = 4;
  p.model.n_head = 4;
  p.model.dropout = 0.0;
  p.train.batch_size = 12;
  p.train.max_iters = 2000;
  p.train.lr_decay_iters = 2000;
  return p;
}

std::vector<std::string> preset_names() { return {"block64", "block128", "block256"}; }

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"block_size", c.block_size},
                     {"n_layer", c.n_layer},
                     {"n_head", c.n_head},
                     {"n_embd", c.n_embd},
                     {"vocab_size", c.vocab_size},
                     {"dropout", c.dropout},
                     {"imm_enabled", c.imm_enabled},
                     {"imm_variant", to_string(c.imm_variant)},
                     {"imm_slots", c.imm_slots},
                     {"imm_rank", c.imm_rank},
                     {"imm_memory_mode", to_string(c.imm_memory_mode)},
                     {"imm_bank_scope", to_string(c.imm_bank_scope)},
                     {"imm_scaled_scores", c.imm_scaled_scores},
                     {"imm_impl", to_string(c.imm_impl)},
                     {"init_std", c.init_std},
                     {"seed", c.seed}};
}

namespace {

bool apply_model_key(const std::string& key, const nlohmann::json& v, ModelConfig& c) {
  if (key == "block_size") c.block_size = v.get<std::int64_t>();
  else if (key == "n_layer") c.n_layer = v.get<std::int64_t>();
  else if (key == "n_head") c.n_head = v.get<std::int64_t>();
  else if (key == "n_embd") c.n_embd = v.get<std::int64_t>();
  else if (key == "vocab_size") c.vocab_size = v.get<std::int64_t>();
  else if (key == "dropout") c.dropout = v.get<double>();
  else if (key == "imm_enabled") c.imm_enabled = v.get<bool>();
  else if (key == "imm_variant") c.imm_variant = parse_variant(v.get<std::string>());
  else if (key == "imm_slots") c.imm_slots = v.get<std::int64_t>();
  else if (key == "imm_rank") c.imm_rank = v.get<std::int64_t>();
  else if (key == "imm_memory_mode") c.imm_memory_mode = parse_memory_mode(v.get<std::string>());
  else if (key == "imm_bank_scope") c.imm_bank_scope = parse_bank_scope(v.get<std::string>());
  else if (key == "imm_scaled_scores") c.imm_scaled_scores = v.get<bool>();
  else if (key == "imm_impl") c.imm_impl = parse_impl(v.get<std::string>());
  else if (key == "init_std") c.init_std = v.get<double>();
  else if (key == "seed") c.seed = v.get<std::uint64_t>();
  else return false;
  return true;
}

bool apply_train_key(const std::string& key, const nlohmann::json& v, TrainConfig& c) {
  if (key == "batch_size") c.batch_size = v.get<std::int64_t>();
  else if (key == "max_iters") c.max_iters = v.get<std::int64_t>();
  else if (key == "lr_max") c.lr_max = v.get<double>();
  else if (key == "lr_min") c.lr_min = v.get<double>();
  else if (key == "warmup_iters") c.warmup_iters = v.get<std::int64_t>();
  else if (key == "lr_decay_iters") c.lr_decay_iters = v.get<std::int64_t>();
  else if (key == "beta1") c.beta1 = v.get<double>();
  else if (key == "beta2") c.beta2 = v.get<double>();
  else if (key == "adam_eps") c.adam_eps = v.get<double>();
  else if (key == "weight_decay") c.weight_decay = v.get<double>();
  else if (key == "grad_clip") c.grad_clip = v.get<double>();
  else if (key == "eval_interval") c.eval_interval = v.get<std::int64_t>();
  else if (key == "eval_iters") c.eval_iters = v.get<std::int64_t>();
  else if (key == "seed") c.seed = v.get<std::uint64_t>();
  else return false;
  return true;
}

}  // namespace

void from_json(const nlohmann::json& j, ModelConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (!apply_model_key(key, value, c)) throw ConfigError("unknown model config key: " + key);
  }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"batch_size", c.batch_size},
                     {"max_iters", c.max_iters},
                     {"lr_max", c.lr_max},
                     {"lr_min", c.lr_min},
                     {"warmup_iters", c.warmup_iters},
                     {"lr_decay_iters", c.lr_decay_iters},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"adam_eps", c.adam_eps},
                     {"weight_decay", c.weight_decay},
                     {"grad_clip", c.grad_clip},
                     {"eval_interval", c.eval_interval},
                     {"eval_iters", c.eval_iters},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (!apply_train_key(key, value, c)) throw ConfigError("unknown train config key: " + key);
  }
}

void apply_overrides(const nlohmann::json& overrides, ModelConfig& model, TrainConfig& train) {
  if (!overrides.is_object()) throw ConfigError("config overrides must be a JSON object");
  for (const auto& [key, value] : overrides.items()) {
    if (key == "model") {
      from_json(value, model);
    } else if (key == "train") {
      from_json(value, train);
    } else {
      const bool m = apply_model_key(key, value, model);
      const bool t = apply_train_key(key, value, train);
      if (!m && !t) throw ConfigError("unknown config key: " + key);
    }
  }
}

}  // namespace imm_gpt
