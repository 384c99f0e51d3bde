#include "imm_gpt/training.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace imm_gpt {

double lr_at(std::int64_t step, const TrainConfig& cfg) {
  if (step < cfg.warmup_iters) {
    return cfg.lr_max * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_iters + 1);
  }
  if (step > cfg.lr_decay_iters) return cfg.lr_min;
  const double span = static_cast<double>(cfg.lr_decay_iters - cfg.warmup_iters);
  const double ratio = span > 0.0 ? static_cast<double>(step - cfg.warmup_iters) / span : 1.0;
  const double coeff = 0.5 * (1.0 + std::cos(std::numbers::pi * ratio));
  return cfg.lr_min + coeff * (cfg.lr_max - cfg.lr_min);
}

bool applies_weight_decay(const std::string& name, std::int64_t rank) {
  if (name == "wte" || name == "wpe") return false;
  return rank >= 2;
}

template <typename T>
double clip_grad_norm(const ParameterList<T>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T factor = static_cast<T>(max_norm / (norm + 1e-6));
    for (const auto& p : params) {
      Tensor<T> t = p.tensor;
      if (!t.has_grad()) continue;
      for (T& g : t.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

template <typename T>
AdamW<T>::AdamW(ParameterList<T> params, const TrainConfig& cfg)
    : params_(std::move(params)),
      beta1_(cfg.beta1),
      beta2_(cfg.beta2),
      eps_(cfg.adam_eps),
      weight_decay_(cfg.weight_decay) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.tensor.size()), T(0));
    v_.emplace_back(static_cast<std::size_t>(p.tensor.size()), T(0));
    decay_.push_back(applies_weight_decay(p.name, p.tensor.rank()));
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  ++steps_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  const T step_size = static_cast<T>(lr / bc1);
  const T bc2_sqrt = static_cast<T>(std::sqrt(bc2));
  const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_), eps = static_cast<T>(eps_);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor<T> t = params_[k].tensor;
    auto values = t.mutable_data();
    auto grads = t.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    if (m.size() != values.size() || v.size() != values.size() ||
        (!grads.empty() && grads.size() != values.size())) {
      throw ShapeError("adamw: state for " + params_[k].name + " does not match parameter shape " +
                       shape_str(t.shape()));
    }
    const T decay = decay_[k] ? static_cast<T>(1.0 - lr * weight_decay_) : T(1);
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T g = grads.empty() ? T(0) : grads[i];
      values[i] *= decay;
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      values[i] -= step_size * m[i] / (std::sqrt(v[i]) / bc2_sqrt + eps);
    }
  }
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

NumericError::NumericError(std::int64_t step, double loss)
    : std::runtime_error("non-finite loss " + std::to_string(loss) + " at step " + std::to_string(step)),
      step_(step) {}

std::string to_string(Split s) { return s == Split::train ? "train" : "val"; }

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) return std::to_string(v);
  return std::string(buf, end);
}

void TrainingLog::write_csv(std::ostream& out) const {
  out << kCsvHeader << '\n';
  for (const auto& r : records) {
    out << r.step << ',' << to_string(r.split) << ',' << format_double(r.smoothed_loss) << ','
        << format_double(r.raw_loss) << ',' << format_double(r.lr) << ',' << format_double(r.step_ms)
        << ',' << r.variant << '\n';
  }
}

void TrainingLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_csv(out);
}

std::vector<LogRecord> TrainingLog::read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != kCsvHeader) throw std::runtime_error("unexpected log header in " + path.string());
  std::vector<LogRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cols.push_back(cell);
    if (cols.size() != 7) throw std::runtime_error("malformed log row: " + line);
    LogRecord r;
    r.step = std::stoll(cols[0]);
    r.split = cols[1] == "train" ? Split::train : Split::val;
    r.smoothed_loss = std::stod(cols[2]);
    r.raw_loss = std::stod(cols[3]);
    r.lr = std::stod(cols[4]);
    r.step_ms = std::stod(cols[5]);
    r.variant = cols[6];
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<LogRecord> TrainingLog::split_records(Split s) const {
  std::vector<LogRecord> out;
  std::copy_if(records.begin(), records.end(), std::back_inserter(out),
               [s](const LogRecord& r) { return r.split == s; });
  return out;
}

template <typename T>
double estimate_loss(const GPTModel<T>& model, std::span<const TokenId> data, std::int64_t batch_size,
                     std::int64_t eval_iters, std::mt19937_64& rng) {
  if (eval_iters < 1) throw std::invalid_argument("estimate_loss: eval_iters must be >= 1");
  NoGradGuard no_grad;
  double total = 0.0;
  for (std::int64_t i = 0; i < eval_iters; ++i) {
    const Batch batch = sample_batch(data, model.config().block_size, batch_size, rng);
    total += static_cast<double>(model.loss(batch).item());
  }
  return total / static_cast<double>(eval_iters);
}

namespace {

constexpr std::uint64_t kEvalSeedSalt = 0xD1B54A32D192ED03ULL;
constexpr std::uint64_t kDropoutSeedSalt = 0x8CB92BA72F3D8DD7ULL;

double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

}  // namespace

template <typename T>
TrainResult<T> train(ModelConfig model_cfg, const TrainConfig& train_cfg, const TokenDataset& dataset,
                     const TrainOptions& options) {
  train_cfg.validate();
  model_cfg.vocab_size = dataset.vocab.size();
  TrainResult<T> result{GPTModel<T>::init(model_cfg), {}};
  auto& model = result.model;
  auto& log = result.log;

  std::mt19937_64 data_rng(train_cfg.seed);
  std::mt19937_64 eval_rng(train_cfg.seed ^ kEvalSeedSalt);
  std::mt19937_64 dropout_rng(train_cfg.seed ^ kDropoutSeedSalt);
  AdamW<T> optimizer(model.parameters(), train_cfg);
  const std::int64_t block = model.config().block_size;
  const bool eval_val = train_cfg.eval_iters > 0 &&
                        static_cast<std::int64_t>(dataset.val_ids.size()) > block;

  const auto start = std::chrono::steady_clock::now();
  std::int64_t window_begin = 0;
  for (std::int64_t step = 0; step < train_cfg.max_iters; ++step) {
    const auto step_start = std::chrono::steady_clock::now();
    const double lr = lr_at(step, train_cfg);
    const Batch batch = sample_batch(dataset.train_ids, block, train_cfg.batch_size, data_rng);
    const Tensor<T> loss = model.loss(batch, true, &dropout_rng);
    const double loss_value = static_cast<double>(loss.item());
    if (!std::isfinite(loss_value)) throw NumericError(step, loss_value);
    optimizer.zero_grad();
    backward(loss);
    clip_grad_norm(model.parameters(), train_cfg.grad_clip);
    optimizer.step(lr);
    const double step_ms = options.record_timing ? elapsed_ms(step_start) : 0.0;
    log.raw_losses.push_back(loss_value);
    if (options.on_step) options.on_step(step, loss_value);

    const bool last = step + 1 == train_cfg.max_iters;
    if (step % train_cfg.eval_interval == 0 || last) {
      double window_sum = 0.0;
      for (std::int64_t s = window_begin; s <= step; ++s) window_sum += log.raw_losses[s];
      LogRecord rec{step, Split::train, window_sum / static_cast<double>(step - window_begin + 1),
                    loss_value, lr, step_ms, options.variant};
      log.records.push_back(rec);
      if (options.on_record) options.on_record(rec);
      window_begin = step + 1;
      if (eval_val) {
        const double val = estimate_loss(model, dataset.val_ids, train_cfg.batch_size,
                                         train_cfg.eval_iters, eval_rng);
        LogRecord vrec{step, Split::val, val, val, lr, step_ms, options.variant};
        log.records.push_back(vrec);
        if (options.on_record) options.on_record(vrec);
        log.summary.final_val_loss = val;
      }
    }
  }

  const std::int64_t n = static_cast<std::int64_t>(log.raw_losses.size());
  const std::int64_t tail = std::min(n, train_cfg.eval_interval);
  double tail_sum = 0.0;
  for (std::int64_t s = n - tail; s < n; ++s) tail_sum += log.raw_losses[s];
  log.summary.final_smoothed_loss = tail_sum / static_cast<double>(tail);
  log.summary.total_s = options.record_timing ? elapsed_ms(start) / 1000.0 : 0.0;
  log.summary.params = model.count_params().total;
  return result;
}

template <typename T>
ProfileStats profile_step(GPTModel<T>& model, const TrainConfig& train_cfg, std::span<const TokenId> data,
                          std::int64_t n_steps) {
  if (n_steps <= 0) throw std::invalid_argument("no samples");
  constexpr std::int64_t kWarmup = 5;
  std::mt19937_64 rng(train_cfg.seed);
  AdamW<T> optimizer(model.parameters(), train_cfg);
  std::vector<double> times;
  for (std::int64_t step = 0; step < kWarmup + n_steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const Batch batch = sample_batch(data, model.config().block_size, train_cfg.batch_size, rng);
    const Tensor<T> loss = model.loss(batch, true, &rng);
    optimizer.zero_grad();
    backward(loss);
    clip_grad_norm(model.parameters(), train_cfg.grad_clip);
    optimizer.step(lr_at(step, train_cfg));
    if (step >= kWarmup) times.push_back(elapsed_ms(t0));
  }
  ProfileStats stats;
  stats.samples = static_cast<std::int64_t>(times.size());
  for (double t : times) stats.mean_ms += t;
  stats.mean_ms /= static_cast<double>(times.size());
  std::sort(times.begin(), times.end());
  auto quantile = [&](double q) {
    const auto idx = static_cast<std::size_t>(std::ceil(q * static_cast<double>(times.size()))) - 1;
    return times[std::min(idx, times.size() - 1)];
  };
  stats.p50_ms = quantile(0.5);
  stats.p90_ms = quantile(0.9);
  return stats;
}

template class AdamW<float>;
template class AdamW<double>;
template double clip_grad_norm(const ParameterList<float>&, double);
template double clip_grad_norm(const ParameterList<double>&, double);
template double estimate_loss(const GPTModel<float>&, std::span<const TokenId>, std::int64_t,
                              std::int64_t, std::mt19937_64&);
template double estimate_loss(const GPTModel<double>&, std::span<const TokenId>, std::int64_t,
                              std::int64_t, std::mt19937_64&);
template TrainResult<float> train(ModelConfig, const TrainConfig&, const TokenDataset&,
                                  const TrainOptions&);
template TrainResult<double> train(ModelConfig, const TrainConfig&, const TokenDataset&,
                                   const TrainOptions&);
template ProfileStats profile_step(GPTModel<float>&, const TrainConfig&, std::span<const TokenId>,
                                   std::int64_t);
template ProfileStats profile_step(GPTModel<double>&, const TrainConfig&, std::span<const TokenId>,
                                   std::int64_t);

}  // namespace imm_gpt
