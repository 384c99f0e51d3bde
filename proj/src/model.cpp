#include "imm_gpt/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace imm_gpt {

namespace {

// Stream for IMM tensors, kept apart from the core stream.
constexpr std::uint64_t kImmSeedSalt = 0x9E3779B97F4A7C15ULL;

template <typename T>
class Initializer {
 public:
  Initializer(std::uint64_t seed, bool randomize) : rng_(seed), randomize_(randomize) {}

  Tensor<T> normal(Shape shape, double std) {
    if (!randomize_) return Tensor<T>::zeros(std::move(shape), true);
    std::normal_distribution<double> dist(0.0, std);
    Buffer<T> values(static_cast<std::size_t>(numel(shape)));
    for (auto& v : values) v = static_cast<T>(dist(rng_));
    return Tensor<T>::from(std::move(shape), std::move(values), true);
  }
  static Tensor<T> zeros(Shape shape) { return Tensor<T>::zeros(std::move(shape), true); }
  static Tensor<T> ones(Shape shape) { return Tensor<T>::full(std::move(shape), T(1), true); }
  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
  bool randomize_;
};

}  // namespace

template <typename T>
std::int64_t ForwardMemory<T>::total_writes() const {
  std::int64_t n = 0;
  for (const auto& b : banks) n += b.write_count();
  for (const auto& w : write_history) n += w.dim(1);
  return n;
}

template <typename T>
GPTModel<T> GPTModel<T>::init(ModelConfig config) {
  config.resolve_defaults().validate();
  GPTModel model(std::move(config));
  model.build(true);
  return model;
}

template <typename T>
GPTModel<T> GPTModel<T>::allocate(ModelConfig config) {
  config.resolve_defaults().validate();
  GPTModel model(std::move(config));
  model.build(false);
  return model;
}

template <typename T>
void GPTModel<T>::build(bool randomize) {
  const auto& c = config_;
  const std::int64_t d = c.n_embd;
  const double std = c.init_std;
  const double proj_std = std / std::sqrt(2.0 * static_cast<double>(c.n_layer));
  Initializer<T> core(c.seed, randomize);
  Initializer<T> imm_init(c.seed ^ kImmSeedSalt, randomize);

  wte_ = core.normal({c.vocab_size, d}, std);
  wpe_ = core.normal({c.block_size, d}, std);
  params_ = {{"wte", wte_}, {"wpe", wpe_}};
  layers_.clear();
  for (std::int64_t l = 0; l < c.n_layer; ++l) {
    LayerParams<T> p;
    p.ln1_gain = Initializer<T>::ones({d});
    p.ln1_bias = Initializer<T>::zeros({d});
    p.attn_weight = core.normal({d, 3 * d}, std);
    p.attn_bias = Initializer<T>::zeros({3 * d});
    p.attn_proj_weight = core.normal({d, d}, proj_std);
    p.attn_proj_bias = Initializer<T>::zeros({d});
    p.ln2_gain = Initializer<T>::ones({d});
    p.ln2_bias = Initializer<T>::zeros({d});
    p.fc_weight = core.normal({d, 4 * d}, std);
    p.fc_bias = Initializer<T>::zeros({4 * d});
    p.mlp_proj_weight = core.normal({4 * d, d}, proj_std);
    p.mlp_proj_bias = Initializer<T>::zeros({d});

    const std::string prefix = "layer." + std::to_string(l) + ".";
    params_.push_back({prefix + "ln_1.gain", p.ln1_gain});
    params_.push_back({prefix + "ln_1.bias", p.ln1_bias});
    params_.push_back({prefix + "attn.c_attn.weight", p.attn_weight});
    params_.push_back({prefix + "attn.c_attn.bias", p.attn_bias});
    params_.push_back({prefix + "attn.c_proj.weight", p.attn_proj_weight});
    params_.push_back({prefix + "attn.c_proj.bias", p.attn_proj_bias});
    params_.push_back({prefix + "ln_2.gain", p.ln2_gain});
    params_.push_back({prefix + "ln_2.bias", p.ln2_bias});
    params_.push_back({prefix + "mlp.c_fc.weight", p.fc_weight});
    params_.push_back({prefix + "mlp.c_fc.bias", p.fc_bias});
    params_.push_back({prefix + "mlp.c_proj.weight", p.mlp_proj_weight});
    params_.push_back({prefix + "mlp.c_proj.bias", p.mlp_proj_bias});

    if (c.imm_enabled) {
      IMMParams<T> imm = randomize
          ? IMMParams<T>::init(d, c.imm_variant, c.imm_rank, std, imm_init.rng())
          : IMMParams<T>{c.imm_variant,
                         d,
                         c.imm_variant == ImmVariant::lowrank ? c.imm_rank : 0,
                         false,
                         AffineMap<T>::zero(d, c.imm_variant, c.imm_rank),
                         AffineMap<T>::zero(d, c.imm_variant, c.imm_rank),
                         AffineMap<T>::zero(d, c.imm_variant, c.imm_rank),
                         Initializer<T>::ones({d}),
                         Initializer<T>::zeros({d})};
      imm.scaled_scores = c.imm_scaled_scores;
      imm.collect(params_, prefix + "imm.");
      p.imm = std::move(imm);
    }
    layers_.push_back(std::move(p));
  }
  lnf_gain_ = Initializer<T>::ones({d});
  lnf_bias_ = Initializer<T>::zeros({d});
  params_.push_back({"ln_f.gain", lnf_gain_});
  params_.push_back({"ln_f.bias", lnf_bias_});
}

template <typename T>
const Tensor<T>& GPTModel<T>::parameter(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.tensor;
  }
  throw std::out_of_range("no parameter named " + name);
}

template <typename T>
Tensor<T> GPTModel<T>::self_attention(const Tensor<T>& x, std::int64_t layer) const {
  if (x.rank() != 3 || x.dim(1) > config_.block_size) {
    throw ShapeError("self_attention: input " + shape_str(x.shape()) + " exceeds block_size " +
                     std::to_string(config_.block_size));
  }
  const auto& p = layers_.at(static_cast<std::size_t>(layer));
  const Tensor<T> qkv = linear(x, p.attn_weight, p.attn_bias);
  return linear(causal_attention(qkv, config_.n_head), p.attn_proj_weight, p.attn_proj_bias);
}

template <typename T>
Tensor<T> GPTModel<T>::block_forward(const Tensor<T>& h, std::int64_t layer, ForwardMemory<T>* memory,
                                     bool training, std::mt19937_64* rng) const {
  const auto& p = layers_.at(static_cast<std::size_t>(layer));
  const double drop = config_.dropout;

  Tensor<T> x = add(h, dropout(self_attention(layer_norm(h, p.ln1_gain, p.ln1_bias), layer), drop,
                               training, rng));
  Tensor<T> m = linear(gelu(linear(layer_norm(x, p.ln2_gain, p.ln2_bias), p.fc_weight, p.fc_bias)),
                       p.mlp_proj_weight, p.mlp_proj_bias);
  x = add(x, dropout(m, drop, training, rng));

  if (!p.imm) return x;
  if (memory == nullptr) throw std::logic_error("block_forward: IMM enabled but no memory supplied");
  if (config_.imm_impl == ImmImpl::sequential) {
    memory->banks.emplace_back(x.dim(0), config_.imm_slots, config_.n_embd);
    return apply_sequential(x, memory->banks.back(), *p.imm);
  }
  return apply_parallel(x, *p.imm, config_.imm_memory_mode, config_.imm_bank_scope,
                        config_.imm_slots, memory->write_history);
}

template <typename T>
Tensor<T> GPTModel<T>::forward(std::span<const TokenId> tokens, std::int64_t batch, std::int64_t steps,
                               ForwardMemory<T>& memory, bool training, std::mt19937_64* rng) const {
  if (steps < 1 || batch < 1) throw ShapeError("forward: batch and steps must be >= 1");
  if (steps > config_.block_size) {
    throw ShapeError("forward: sequence length " + std::to_string(steps) + " exceeds block_size " +
                     std::to_string(config_.block_size));
  }
  if (static_cast<std::int64_t>(tokens.size()) != batch * steps) {
    throw ShapeError("forward: expected " + std::to_string(batch * steps) + " tokens, got " +
                     std::to_string(tokens.size()));
  }
  for (auto id : tokens) {
    if (id < 0 || id >= config_.vocab_size) {
      throw std::out_of_range("forward: token id " + std::to_string(id) + " out of range for vocab " +
                              std::to_string(config_.vocab_size));
    }
  }
  memory = ForwardMemory<T>{};

  std::vector<TokenId> positions(static_cast<std::size_t>(steps));
  std::iota(positions.begin(), positions.end(), 0);
  Tensor<T> h = add(embedding(wte_, tokens, {batch, steps}), embedding(wpe_, positions, {steps}));
  h = dropout(h, config_.dropout, training, rng);
  for (std::int64_t l = 0; l < config_.n_layer; ++l) h = block_forward(h, l, &memory, training, rng);
  h = layer_norm(h, lnf_gain_, lnf_bias_);
  return linear_transposed(h, wte_);
}

template <typename T>
Tensor<T> GPTModel<T>::forward(std::span<const TokenId> tokens, std::int64_t batch, std::int64_t steps,
                               bool training, std::mt19937_64* rng) const {
  ForwardMemory<T> memory;
  return forward(tokens, batch, steps, memory, training, rng);
}

template <typename T>
Tensor<T> GPTModel<T>::loss(const Batch& batch, bool training, std::mt19937_64* rng) const {
  const Tensor<T> logits = forward(batch.x, batch.batch_size, batch.block_size, training, rng);
  return cross_entropy(logits, batch.y);
}

template <typename T>
ParamBreakdown GPTModel<T>::count_params() const {
  ParamBreakdown out;
  const std::string layer0 = "layer.0.";
  for (const auto& p : params_) {
    const auto n = p.tensor.size();
    out.total += n;
    if (p.name == "wte" || p.name == "wpe") {
      out.embedding += n;
    } else if (p.name.rfind("ln_f.", 0) == 0) {
      out.final_norm += n;
    } else if (p.name.rfind(layer0, 0) == 0) {
      const bool is_imm = p.name.rfind(layer0 + "imm.", 0) == 0;
      if (!is_imm) {
        out.per_layer_core += n;
      } else {
        out.per_layer_imm += n;
        if (p.name.rfind(layer0 + "imm.ln.", 0) != 0) out.per_layer_imm_maps += n;
      }
    }
  }
  return out;
}

template <typename T>
std::vector<TokenId> generate(const GPTModel<T>& model, std::span<const TokenId> prompt,
                              const GenerateOptions& options) {
  if (prompt.empty()) throw std::invalid_argument("generate: prompt must be non-empty");
  if (options.temperature <= 0.0) throw std::invalid_argument("generate: temperature must be > 0");
  NoGradGuard no_grad;
  std::mt19937_64 rng(options.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<TokenId> ids(prompt.begin(), prompt.end());
  const std::int64_t V = model.config().vocab_size;
  const std::int64_t block = model.config().block_size;
  std::vector<double> probs(static_cast<std::size_t>(V));
  std::vector<std::int64_t> order(static_cast<std::size_t>(V));
  for (std::int64_t n = 0; n < options.max_new; ++n) {
    const std::int64_t ctx = std::min<std::int64_t>(static_cast<std::int64_t>(ids.size()), block);
    std::span<const TokenId> window(ids.data() + ids.size() - ctx, static_cast<std::size_t>(ctx));
    const Tensor<T> logits = model.forward(window, 1, ctx);
    const T* last = logits.data().data() + (ctx - 1) * V;

    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [last](std::int64_t a, std::int64_t b) { return last[a] > last[b]; });
    const std::int64_t keep = options.top_k > 0 ? std::min(options.top_k, V) : V;
    const double top = static_cast<double>(last[order[0]]) / options.temperature;
    double z = 0.0;
    for (std::int64_t k = 0; k < keep; ++k) {
      probs[k] = std::exp(static_cast<double>(last[order[k]]) / options.temperature - top);
      z += probs[k];
    }
    double u = unit(rng) * z;
    std::int64_t pick = order[keep - 1];
    for (std::int64_t k = 0; k < keep; ++k) {
      u -= probs[k];
      if (u <= 0.0) {
        pick = order[k];
        break;
      }
    }
    ids.push_back(static_cast<TokenId>(pick));
  }
  return ids;
}

template struct ForwardMemory<float>;
template struct ForwardMemory<double>;
template class GPTModel<float>;
template class GPTModel<double>;
template std::vector<TokenId> generate(const GPTModel<float>&, std::span<const TokenId>,
                                       const GenerateOptions&);
template std::vector<TokenId> generate(const GPTModel<double>&, std::span<const TokenId>,
                                       const GenerateOptions&);

}  // namespace imm_gpt
