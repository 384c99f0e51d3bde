#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "imm_gpt/tensor.hpp"

namespace imm_gpt {

using TokenId = std::int32_t;

/// Applies the IMM_GPT_THREADS cap (if set) to the matrix kernels and
/// returns the resulting thread count. Set it to 1 for bit-reproducible runs.
int configure_kernel_threads();

// Primitive differentiable operations. Every op validates shapes and throws
// ShapeError naming the offending shapes. Leading dimensions marked "..."
// are flattened into rows.

/// y = x·W + b over the last axis. weight is [in, out]; bias may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {});

/// y = x·Wᵀ where weight is [out, in]. Used for the tied output head.
template <typename T>
Tensor<T> linear_transposed(const Tensor<T>& x, const Tensor<T>& weight);

/// Elementwise a + b. b may match a's shape or any suffix of it, in which
/// case it is broadcast over the leading axes.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

/// Sum of all elements, as a scalar tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& x);

/// Numerically stable softmax along `axis` (max-subtracted).
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::int64_t axis = -1);

/// Normalizes the last axis to zero mean and unit variance, then applies
/// gain and bias (both [d]). Variance is the biased (1/d) estimator.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5));

/// tanh-approximation GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

/// Inverted dropout. Identity when p == 0 or when not training.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, std::mt19937_64* rng);

/// Mean negative log-likelihood of `targets` under softmax(logits) over the
/// last axis. targets.size() must equal the number of logit rows.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const TokenId> targets);

/// Gathers rows of `table` [V, d]; the result has shape ids_shape + [d].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const TokenId> ids, const Shape& ids_shape);

/// Multi-head causal scaled dot-product attention over a packed
/// [B, T, 3d] query/key/value tensor. Returns [B, T, d].
template <typename T>
Tensor<T> causal_attention(const Tensor<T>& qkv, std::int64_t n_head);

/// x[:, t, :] of a [B, T, d] tensor.
template <typename T>
Tensor<T> select_step(const Tensor<T>& x, std::int64_t t);

/// Stacks T tensors of shape [B, d] into [B, T, d].
template <typename T>
Tensor<T> stack_steps(const std::vector<Tensor<T>>& steps);

/// Returns a copy of `bank` [B, N, d] with row `slot` replaced by value [B, d].
template <typename T>
Tensor<T> assign_slot(const Tensor<T>& bank, std::int64_t slot, const Tensor<T>& value);

/// scores[b, i] = <bank[b, i, :], query[b, :]>. Result [B, N].
template <typename T>
Tensor<T> slot_scores(const Tensor<T>& bank, const Tensor<T>& query);

/// out[b, :] = sum_i weights[b, i] * bank[b, i, :]. Result [B, d].
template <typename T>
Tensor<T> slot_mix(const Tensor<T>& weights, const Tensor<T>& bank);

}  // namespace imm_gpt
