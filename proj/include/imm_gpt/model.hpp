#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "imm_gpt/config.hpp"
#include "imm_gpt/imm.hpp"
#include "imm_gpt/ops.hpp"
#include "imm_gpt/tensor.hpp"
#include "imm_gpt/tokenizer.hpp"

namespace imm_gpt {

template <typename T>
struct LayerParams {
  Tensor<T> ln1_gain, ln1_bias;
  Tensor<T> attn_weight, attn_bias;  // [d, 3d], [3d]
  Tensor<T> attn_proj_weight, attn_proj_bias;
  Tensor<T> ln2_gain, ln2_bias;
  Tensor<T> fc_weight, fc_bias;  // [d, 4d], [4d]
  Tensor<T> mlp_proj_weight, mlp_proj_bias;
  std::optional<IMMParams<T>> imm;
};

/// Memory state of one forward pass. Created zero-filled on entry to
/// forward and dropped on exit.
template <typename T>
struct ForwardMemory {
  std::vector<Tensor<T>> write_history;  // parallel path: f_write output per layer
  std::vector<MemoryBank<T>> banks;      // sequential path: one bank per layer

  /// Total slot writes performed during the pass.
  std::int64_t total_writes() const;
};

struct ParamBreakdown {
  std::int64_t embedding = 0;           // wte + wpe
  std::int64_t per_layer_core = 0;      // attention, MLP, two LayerNorms
  std::int64_t per_layer_imm = 0;       // all IMM tensors incl. its LayerNorm
  std::int64_t per_layer_imm_maps = 0;  // f_write, f_query, g only
  std::int64_t final_norm = 0;
  std::int64_t total = 0;
};

/// Decoder-only transformer (nanoGPT layout, tied output head) with an
/// optional IMM applied after the MLP residual of every block.
template <typename T>
class GPTModel {
 public:
  /// Builds and initializes parameters from config.seed: normal(0,
  /// init_std) weights, zero biases, residual projections scaled by
  /// 1/sqrt(2·n_layer). IMM tensors come from a separate stream so the
  /// core weights match the baseline model for the same seed.
  static GPTModel init(ModelConfig config);

  /// Builds a model with zero-filled tensors, for loading checkpoints.
  static GPTModel allocate(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  const ParameterList<T>& parameters() const { return params_; }
  const Tensor<T>& parameter(const std::string& name) const;
  std::vector<LayerParams<T>>& layers() { return layers_; }
  const std::vector<LayerParams<T>>& layers() const { return layers_; }

  /// tokens is row-major [batch, steps]. Returns logits [batch, steps, V].
  Tensor<T> forward(std::span<const TokenId> tokens, std::int64_t batch, std::int64_t steps,
                    bool training = false, std::mt19937_64* rng = nullptr) const;
  Tensor<T> forward(std::span<const TokenId> tokens, std::int64_t batch, std::int64_t steps,
                    ForwardMemory<T>& memory, bool training = false,
                    std::mt19937_64* rng = nullptr) const;

  /// Multi-head causal self-attention of block `layer` including its output
  /// projection, applied to an already normalized input [B, T, d].
  Tensor<T> self_attention(const Tensor<T>& x, std::int64_t layer) const;

  /// One transformer block. `memory` is required iff the IMM is enabled.
  Tensor<T> block_forward(const Tensor<T>& h, std::int64_t layer, ForwardMemory<T>* memory,
                          bool training = false, std::mt19937_64* rng = nullptr) const;

  /// Mean next-token cross-entropy on a batch.
  Tensor<T> loss(const Batch& batch, bool training = false, std::mt19937_64* rng = nullptr) const;

  ParamBreakdown count_params() const;

 private:
  explicit GPTModel(ModelConfig config) : config_(std::move(config)) {}
  void build(bool randomize);

  ModelConfig config_;
  Tensor<T> wte_;  // [V, d], shared with the output head
  Tensor<T> wpe_;  // [block_size, d]
  std::vector<LayerParams<T>> layers_;
  Tensor<T> lnf_gain_, lnf_bias_;
  ParameterList<T> params_;
};

struct GenerateOptions {
  std::int64_t max_new = 100;
  double temperature = 1.0;
  std::int64_t top_k = 0;  // 0: full distribution
  std::uint64_t seed = 0;
};

/// Autoregressive sampling. The context is cropped to the last block_size
/// ids before each step; top_k == 1 is greedy decoding.
template <typename T>
std::vector<TokenId> generate(const GPTModel<T>& model, std::span<const TokenId> prompt,
                              const GenerateOptions& options);

extern template class GPTModel<float>;
extern template class GPTModel<double>;

}  // namespace imm_gpt
