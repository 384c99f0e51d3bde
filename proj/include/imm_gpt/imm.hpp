#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "imm_gpt/config.hpp"
#include "imm_gpt/ops.hpp"
#include "imm_gpt/tensor.hpp"

// Implicit memory module: a zero-initialized bank of N slots written with
// f_write(h_t), read by softmax attention with query f_query(h_t), and folded
// back into the hidden state as LayerNorm(h_t + g(r_t)).

namespace imm_gpt {

/// floor(sqrt(d)), at least 1.
std::int64_t num_slots(std::int64_t d);

/// Learnable parameters of one IMM: three affine maps plus LayerNorm.
/// dense: 3(d² + d) + 2d. lowrank: 3(2dk + d) + 2d.
std::int64_t param_count(std::int64_t d, ImmVariant variant, std::int64_t rank);

/// d→d affine map, either a full matrix or a rank-k factorization U·V with
/// the bias applied after V.
template <typename T>
struct AffineMap {
  ImmVariant variant = ImmVariant::dense;
  Tensor<T> weight;  // dense: [d, d]
  Tensor<T> u;       // lowrank: [d, k]
  Tensor<T> v;       // lowrank: [k, d]
  Tensor<T> bias;    // [d]

  static AffineMap init(std::int64_t d, ImmVariant variant, std::int64_t rank, double std,
                        std::mt19937_64& rng);
  static AffineMap zero(std::int64_t d, ImmVariant variant, std::int64_t rank);
  static AffineMap identity(std::int64_t d);

  Tensor<T> operator()(const Tensor<T>& x) const;
  void collect(ParameterList<T>& out, const std::string& prefix) const;
};

template <typename T>
struct IMMParams {
  ImmVariant variant = ImmVariant::dense;
  std::int64_t dim = 0;
  std::int64_t rank = 0;
  bool scaled_scores = false;
  AffineMap<T> f_write;
  AffineMap<T> f_query;
  AffineMap<T> g;
  Tensor<T> ln_gain;
  Tensor<T> ln_bias;

  static IMMParams init(std::int64_t d, ImmVariant variant, std::int64_t rank, double std,
                        std::mt19937_64& rng);
  /// Registers every tensor under `prefix` (e.g. "layer.0.imm.").
  void collect(ParameterList<T>& out, const std::string& prefix) const;
  /// Multiplier on slot·query scores: 1, or 1/sqrt(d) when scaled_scores.
  T score_scale() const;
};

/// Per-forward-pass memory: slots [B, N, d] and the number of writes since
/// the last reset. All sequences in a batch advance in lockstep, so a single
/// cursor serves every row.
template <typename T>
class MemoryBank {
 public:
  MemoryBank(std::int64_t batch, std::int64_t slots, std::int64_t dim);

  void reset();
  const Tensor<T>& slots() const { return slots_; }
  std::int64_t num_slots() const { return n_; }
  std::int64_t write_count() const { return write_count_; }

  /// Stores f_write(h_t) ([B, d]) in slot t mod N and returns that index.
  std::int64_t write(const Tensor<T>& h_t, std::int64_t t, const IMMParams<T>& params);

  struct ReadResult {
    Tensor<T> value;    // r_t [B, d]
    Tensor<T> weights;  // alpha [B, N]
  };
  ReadResult read_with_weights(const Tensor<T>& h_t, const IMMParams<T>& params) const;
  Tensor<T> read(const Tensor<T>& h_t, const IMMParams<T>& params) const {
    return read_with_weights(h_t, params).value;
  }

 private:
  std::int64_t batch_;
  std::int64_t n_;
  std::int64_t dim_;
  std::int64_t write_count_ = 0;
  Tensor<T> slots_;
};

/// LayerNorm(h_t + g(r_t)) with the IMM's own gain and bias.
template <typename T>
Tensor<T> integrate(const Tensor<T>& h_t, const Tensor<T>& r_t, const IMMParams<T>& params);

/// Reference semantics over h [B, T, d]: for each t in order, write then
/// read then integrate. `bank` must be freshly reset; it holds the final
/// state on return.
template <typename T>
Tensor<T> apply_sequential(const Tensor<T>& h, MemoryBank<T>& bank, const IMMParams<T>& params);

/// Which earlier write (layer, position) a query position sees in a slot.
struct SlotSource {
  std::int32_t layer = -1;  // index into the write history; -1 when empty
  std::int32_t pos = -1;
  bool empty() const { return layer < 0; }
};

struct SlotSources {
  std::int64_t steps = 0;
  std::int64_t slots = 0;
  std::vector<SlotSource> table;  // [steps * slots]
  const SlotSource& at(std::int64_t t, std::int64_t i) const { return table[t * slots + i]; }
};

/// Resolves the visible content of every slot for every query position of
/// layer `layer`. Writes are numbered by a global cursor w (per_layer: w = p;
/// shared: w = layer·T + p) and land in slot w mod N; a slot shows its
/// largest visible w. causal: only writes from positions <= t are visible.
/// noncausal: every write of layers <= `layer` is visible.
SlotSources visible_sources(std::int64_t layer, std::int64_t steps, std::int64_t slots,
                            MemoryMode mode, BankScope scope);

/// Fused gather + attention read. writes[l] is [B, T, d]; query is [B, T, d].
/// Empty slots hold zero vectors and still take part in the softmax.
template <typename T>
Tensor<T> memory_attend(const std::vector<Tensor<T>>& writes, const Tensor<T>& query,
                        const SlotSources& sources, T score_scale);

/// Vectorized IMM application for a single per-layer bank.
template <typename T>
Tensor<T> apply_parallel(const Tensor<T>& h, const IMMParams<T>& params, MemoryMode mode,
                         std::int64_t num_slots);

/// Vectorized IMM application inside a stack of layers. `history` collects
/// the write tensors of the layers processed so far in this forward pass;
/// this layer's writes are appended.
template <typename T>
Tensor<T> apply_parallel(const Tensor<T>& h, const IMMParams<T>& params, MemoryMode mode,
                         BankScope scope, std::int64_t num_slots, std::vector<Tensor<T>>& history);

extern template struct AffineMap<float>;
extern template struct AffineMap<double>;
extern template struct IMMParams<float>;
extern template struct IMMParams<double>;
extern template class MemoryBank<float>;
extern template class MemoryBank<double>;

}  // namespace imm_gpt
