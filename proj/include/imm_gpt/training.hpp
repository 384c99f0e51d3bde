#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "imm_gpt/config.hpp"
#include "imm_gpt/model.hpp"
#include "imm_gpt/tokenizer.hpp"

namespace imm_gpt {

/// Linear warmup to lr_max, cosine decay to lr_min at lr_decay_iters, then
/// constant lr_min.
double lr_at(std::int64_t step, const TrainConfig& cfg);

/// Whether weight decay applies: matrices only, excluding the embeddings.
/// Biases and LayerNorm gains/biases are 1-D and never decayed.
bool applies_weight_decay(const std::string& name, std::int64_t rank);

/// Scales all gradients so their global L2 norm is at most max_norm (no-op
/// for max_norm <= 0). Returns the norm before clipping.
template <typename T>
double clip_grad_norm(const ParameterList<T>& params, double max_norm);

/// AdamW with bias correction and decoupled weight decay.
template <typename T>
class AdamW {
 public:
  AdamW(ParameterList<T> params, const TrainConfig& cfg);

  /// One update using the gradients currently stored on the parameters.
  /// Missing gradients count as zero.
  void step(double lr);
  void zero_grad();

  std::int64_t steps_taken() const { return steps_; }
  const ParameterList<T>& params() const { return params_; }
  /// First and second moment buffers, one per parameter.
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  const std::vector<bool>& decay_mask() const { return decay_; }

 private:
  ParameterList<T> params_;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  std::vector<bool> decay_;
  double beta1_, beta2_, eps_, weight_decay_;
  std::int64_t steps_ = 0;
};

/// Raised when a training loss becomes NaN or infinite.
class NumericError : public std::runtime_error {
 public:
  NumericError(std::int64_t step, double loss);
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

enum class Split { train, val };
std::string to_string(Split s);

struct LogRecord {
  std::int64_t step = 0;
  Split split = Split::train;
  double smoothed_loss = 0.0;
  double raw_loss = 0.0;
  double lr = 0.0;
  double step_ms = 0.0;
  std::string variant;
};

struct TrainingSummary {
  double final_smoothed_loss = 0.0;  // mean of the last eval_interval training losses
  double final_val_loss = 0.0;
  double total_s = 0.0;
  std::int64_t params = 0;
};

struct TrainingLog {
  std::vector<LogRecord> records;
  std::vector<double> raw_losses;  // every step, in order
  TrainingSummary summary;

  static constexpr const char* kCsvHeader = "step,split,smoothed_loss,raw_loss,lr,step_ms,variant";
  void write_csv(std::ostream& out) const;
  void write_csv(const std::filesystem::path& path) const;
  static std::vector<LogRecord> read_csv(const std::filesystem::path& path);
  std::vector<LogRecord> split_records(Split s) const;
};

/// Shortest round-trip decimal form of a double.
std::string format_double(double v);

/// Mean cross-entropy over eval_iters freshly sampled batches, without
/// recording a graph or touching the parameters.
template <typename T>
double estimate_loss(const GPTModel<T>& model, std::span<const TokenId> data, std::int64_t batch_size,
                     std::int64_t eval_iters, std::mt19937_64& rng);

struct TrainOptions {
  std::string variant = "baseline";
  bool record_timing = true;
  // Called after every optimizer step with the step index and raw loss.
  std::function<void(std::int64_t, double)> on_step;
  std::function<void(const LogRecord&)> on_record;
};

template <typename T>
struct TrainResult {
  GPTModel<T> model;
  TrainingLog log;
};

/// Trains a fresh model. model_cfg.vocab_size is taken from the dataset.
/// Batches come from a stream seeded with train_cfg.seed, so two runs with
/// the same train config see the same data regardless of the model.
template <typename T>
TrainResult<T> train(ModelConfig model_cfg, const TrainConfig& train_cfg, const TokenDataset& dataset,
                     const TrainOptions& options = {});

struct ProfileStats {
  double mean_ms = 0.0;
  double p50_ms = 0.0;
  double p90_ms = 0.0;
  std::int64_t samples = 0;
};

/// Times n_steps full optimization steps on `data` after 5 discarded
/// warmup steps. Throws std::invalid_argument("no samples") for n_steps <= 0.
template <typename T>
ProfileStats profile_step(GPTModel<T>& model, const TrainConfig& train_cfg, std::span<const TokenId> data,
                          std::int64_t n_steps);

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace imm_gpt
