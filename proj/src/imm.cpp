#include "imm_gpt/imm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace imm_gpt {

std::int64_t num_slots(std::int64_t d) {
  if (d < 1) throw std::invalid_argument("num_slots: dimension must be >= 1");
  auto n = static_cast<std::int64_t>(std::sqrt(static_cast<double>(d)));
  while (n * n > d) --n;
  while ((n + 1) * (n + 1) <= d) ++n;
  return std::max<std::int64_t>(n, 1);
}

std::int64_t param_count(std::int64_t d, ImmVariant variant, std::int64_t rank) {
  const std::int64_t layer_norm = 2 * d;
  if (variant == ImmVariant::dense) return 3 * (d * d + d) + layer_norm;
  if (rank < 1) throw std::invalid_argument("param_count: lowrank variant needs rank >= 1");
  return 3 * (2 * d * rank + d) + layer_norm;
}

namespace {

template <typename T>
Tensor<T> normal_tensor(Shape shape, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std);
  Buffer<T> values(static_cast<std::size_t>(numel(shape)));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  return Tensor<T>::from(std::move(shape), std::move(values), true);
}

}  // namespace

template <typename T>
AffineMap<T> AffineMap<T>::init(std::int64_t d, ImmVariant variant, std::int64_t rank, double std,
                                std::mt19937_64& rng) {
  AffineMap m;
  m.variant = variant;
  if (variant == ImmVariant::dense) {
    m.weight = normal_tensor<T>({d, d}, std, rng);
  } else {
    if (rank < 1) throw std::invalid_argument("lowrank affine map needs rank >= 1");
    m.u = normal_tensor<T>({d, rank}, std, rng);
    m.v = normal_tensor<T>({rank, d}, std, rng);
  }
  m.bias = Tensor<T>::zeros({d}, true);
  return m;
}

template <typename T>
AffineMap<T> AffineMap<T>::zero(std::int64_t d, ImmVariant variant, std::int64_t rank) {
  AffineMap m;
  m.variant = variant;
  if (variant == ImmVariant::dense) {
    m.weight = Tensor<T>::zeros({d, d}, true);
  } else {
    m.u = Tensor<T>::zeros({d, rank}, true);
    m.v = Tensor<T>::zeros({rank, d}, true);
  }
  m.bias = Tensor<T>::zeros({d}, true);
  return m;
}

template <typename T>
AffineMap<T> AffineMap<T>::identity(std::int64_t d) {
  AffineMap m = zero(d, ImmVariant::dense, 0);
  auto w = m.weight.mutable_data();
  for (std::int64_t i = 0; i < d; ++i) w[i * d + i] = T(1);
  return m;
}

template <typename T>
Tensor<T> AffineMap<T>::operator()(const Tensor<T>& x) const {
  if (variant == ImmVariant::dense) return linear(x, weight, bias);
  return linear(linear(x, u), v, bias);
}

template <typename T>
void AffineMap<T>::collect(ParameterList<T>& out, const std::string& prefix) const {
  if (variant == ImmVariant::dense) {
    out.push_back({prefix + "weight", weight});
  } else {
    out.push_back({prefix + "u", u});
    out.push_back({prefix + "v", v});
  }
  out.push_back({prefix + "bias", bias});
}

template <typename T>
IMMParams<T> IMMParams<T>::init(std::int64_t d, ImmVariant variant, std::int64_t rank, double std,
                                std::mt19937_64& rng) {
  IMMParams p;
  p.variant = variant;
  p.dim = d;
  p.rank = variant == ImmVariant::lowrank ? rank : 0;
  p.f_write = AffineMap<T>::init(d, variant, rank, std, rng);
  p.f_query = AffineMap<T>::init(d, variant, rank, std, rng);
  p.g = AffineMap<T>::init(d, variant, rank, std, rng);
  p.ln_gain = Tensor<T>::full({d}, T(1), true);
  p.ln_bias = Tensor<T>::zeros({d}, true);
  return p;
}

template <typename T>
void IMMParams<T>::collect(ParameterList<T>& out, const std::string& prefix) const {
  f_write.collect(out, prefix + "f_write.");
  f_query.collect(out, prefix + "f_query.");
  g.collect(out, prefix + "g.");
  out.push_back({prefix + "ln.gain", ln_gain});
  out.push_back({prefix + "ln.bias", ln_bias});
}

template <typename T>
T IMMParams<T>::score_scale() const {
  return scaled_scores ? T(1) / std::sqrt(T(dim)) : T(1);
}

template <typename T>
MemoryBank<T>::MemoryBank(std::int64_t batch, std::int64_t slots, std::int64_t dim)
    : batch_(batch), n_(slots), dim_(dim) {
  if (batch < 1 || slots < 1 || dim < 1) {
    throw std::invalid_argument("memory bank dimensions must be >= 1");
  }
  reset();
}

template <typename T>
void MemoryBank<T>::reset() {
  slots_ = Tensor<T>::zeros({batch_, n_, dim_});
  write_count_ = 0;
}

template <typename T>
std::int64_t MemoryBank<T>::write(const Tensor<T>& h_t, std::int64_t t, const IMMParams<T>& params) {
  if (t < 0) throw std::invalid_argument("memory write position must be >= 0");
  const std::int64_t slot = t % n_;
  slots_ = assign_slot(slots_, slot, params.f_write(h_t));
  ++write_count_;
  return slot;
}

template <typename T>
typename MemoryBank<T>::ReadResult MemoryBank<T>::read_with_weights(const Tensor<T>& h_t,
                                                                   const IMMParams<T>& params) const {
  const Tensor<T> query = params.f_query(h_t);
  Tensor<T> scores = slot_scores(slots_, query);
  if (params.scaled_scores) scores = scale(scores, params.score_scale());
  Tensor<T> alpha = softmax(scores, -1);
  return {slot_mix(alpha, slots_), alpha};
}

template <typename T>
Tensor<T> integrate(const Tensor<T>& h_t, const Tensor<T>& r_t, const IMMParams<T>& params) {
  if (h_t.shape() != r_t.shape()) {
    throw ShapeError("integrate: hidden state " + shape_str(h_t.shape()) + " and read " +
                     shape_str(r_t.shape()) + " differ");
  }
  return layer_norm(add(h_t, params.g(r_t)), params.ln_gain, params.ln_bias);
}

template <typename T>
Tensor<T> apply_sequential(const Tensor<T>& h, MemoryBank<T>& bank, const IMMParams<T>& params) {
  if (h.rank() != 3) throw ShapeError("apply_sequential: expected [B,T,d], got " + shape_str(h.shape()));
  if (bank.write_count() != 0) throw std::logic_error("apply_sequential: bank was not reset");
  std::vector<Tensor<T>> steps;
  steps.reserve(static_cast<std::size_t>(h.dim(1)));
  for (std::int64_t t = 0; t < h.dim(1); ++t) {
    const Tensor<T> h_t = select_step(h, t);
    bank.write(h_t, t, params);
    steps.push_back(integrate(h_t, bank.read(h_t, params), params));
  }
  return stack_steps(steps);
}

SlotSources visible_sources(std::int64_t layer, std::int64_t steps, std::int64_t slots,
                            MemoryMode mode, BankScope scope) {
  if (steps < 1 || slots < 1 || layer < 0) throw std::invalid_argument("visible_sources: bad sizes");
  const std::int64_t first_layer = scope == BankScope::shared ? 0 : layer;
  auto cursor = [&](std::int64_t l, std::int64_t p) {
    return scope == BankScope::shared ? l * steps + p : p;
  };
  std::vector<std::int64_t> latest(static_cast<std::size_t>(slots), -1);
  auto add_write = [&](std::int64_t l, std::int64_t p) {
    const std::int64_t w = cursor(l, p);
    auto& cur = latest[static_cast<std::size_t>(w % slots)];
    cur = std::max(cur, w);
  };
  auto decode = [&](std::int64_t w) -> SlotSource {
    if (w < 0) return {};
    if (scope == BankScope::shared) {
      return {static_cast<std::int32_t>(w / steps), static_cast<std::int32_t>(w % steps)};
    }
    return {static_cast<std::int32_t>(layer), static_cast<std::int32_t>(w)};
  };

  SlotSources out;
  out.steps = steps;
  out.slots = slots;
  out.table.resize(static_cast<std::size_t>(steps * slots));
  if (mode == MemoryMode::noncausal) {
    for (std::int64_t l = first_layer; l <= layer; ++l) {
      for (std::int64_t p = 0; p < steps; ++p) add_write(l, p);
    }
  }
  for (std::int64_t t = 0; t < steps; ++t) {
    if (mode == MemoryMode::causal) {
      for (std::int64_t l = first_layer; l <= layer; ++l) add_write(l, t);
    }
    for (std::int64_t i = 0; i < slots; ++i) out.table[t * slots + i] = decode(latest[i]);
  }
  return out;
}

template <typename T>
Tensor<T> memory_attend(const std::vector<Tensor<T>>& writes, const Tensor<T>& query,
                        const SlotSources& sources, T score_scale) {
  if (query.rank() != 3) throw ShapeError("memory_attend: query must be [B,T,d]");
  const std::int64_t B = query.dim(0), T_ = query.dim(1), d = query.dim(2), N = sources.slots;
  if (sources.steps != T_) throw ShapeError("memory_attend: source table length differs from query");
  for (const auto& w : writes) {
    if (w.shape() != query.shape()) {
      throw ShapeError("memory_attend: write " + shape_str(w.shape()) + " differs from query " +
                       shape_str(query.shape()));
    }
  }
  for (const auto& s : sources.table) {
    if (!s.empty() && (s.layer >= static_cast<std::int32_t>(writes.size()) || s.pos >= T_)) {
      throw ShapeError("memory_attend: slot source outside the write history");
    }
  }

  auto row_of = [B, T_, d](std::int64_t b, std::int64_t p) { return (b * T_ + p) * d; };
  Buffer<T> out(static_cast<std::size_t>(B * T_ * d), T(0));
  auto alpha = std::make_shared<Buffer<T>>(static_cast<std::size_t>(B * T_ * N));
  auto qv = query.data();
  Buffer<T> scores(static_cast<std::size_t>(N));
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t t = 0; t < T_; ++t) {
      const T* q = qv.data() + row_of(b, t);
      T mx = -std::numeric_limits<T>::infinity();
      for (std::int64_t i = 0; i < N; ++i) {
        const auto& src = sources.at(t, i);
        T s = T(0);
        if (!src.empty()) {
          const T* m = writes[src.layer].data().data() + row_of(b, src.pos);
          for (std::int64_t k = 0; k < d; ++k) s += m[k] * q[k];
          s *= score_scale;
        }
        scores[i] = s;
        mx = std::max(mx, s);
      }
      T z = T(0);
      for (std::int64_t i = 0; i < N; ++i) {
        scores[i] = std::exp(scores[i] - mx);
        z += scores[i];
      }
      T* a = alpha->data() + (b * T_ + t) * N;
      T* r = out.data() + row_of(b, t);
      for (std::int64_t i = 0; i < N; ++i) {
        a[i] = scores[i] / z;
        const auto& src = sources.at(t, i);
        if (src.empty()) continue;
        const T* m = writes[src.layer].data().data() + row_of(b, src.pos);
        for (std::int64_t k = 0; k < d; ++k) r[k] += a[i] * m[k];
      }
    }
  }

  std::vector<Tensor<T>> parents(writes.begin(), writes.end());
  parents.push_back(query);
  const std::size_t query_index = writes.size();
  return Tensor<T>::make_result(
      query.shape(), std::move(out), std::move(parents),
      [B, T_, d, N, sources, alpha, score_scale, query_index, row_of](Node<T>& self) {
        auto& qn = *self.parents[query_index];
        Buffer<T> dalpha(static_cast<std::size_t>(N));
        for (std::int64_t b = 0; b < B; ++b) {
          for (std::int64_t t = 0; t < T_; ++t) {
            const T* dr = self.grad.data() + row_of(b, t);
            const T* a = alpha->data() + (b * T_ + t) * N;
            T weighted = T(0);
            for (std::int64_t i = 0; i < N; ++i) {
              const auto& src = sources.at(t, i);
              T da = T(0);
              if (!src.empty()) {
                const T* m = self.parents[src.layer]->value.data() + row_of(b, src.pos);
                for (std::int64_t k = 0; k < d; ++k) da += dr[k] * m[k];
              }
              dalpha[i] = da;
              weighted += a[i] * da;
            }
            const T* q = qn.value.data() + row_of(b, t);
            for (std::int64_t i = 0; i < N; ++i) {
              const auto& src = sources.at(t, i);
              if (src.empty()) continue;
              const T dscore = a[i] * (dalpha[i] - weighted) * score_scale;
              auto& mn = *self.parents[src.layer];
              const T* m = mn.value.data() + row_of(b, src.pos);
              if (qn.requires_grad) {
                T* dq = qn.ensure_grad().data() + row_of(b, t);
                for (std::int64_t k = 0; k < d; ++k) dq[k] += dscore * m[k];
              }
              if (mn.requires_grad) {
                T* dm = mn.ensure_grad().data() + row_of(b, src.pos);
                for (std::int64_t k = 0; k < d; ++k) dm[k] += a[i] * dr[k] + dscore * q[k];
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> apply_parallel(const Tensor<T>& h, const IMMParams<T>& params, MemoryMode mode,
                         BankScope scope, std::int64_t slots, std::vector<Tensor<T>>& history) {
  if (h.rank() != 3) throw ShapeError("apply_parallel: expected [B,T,d], got " + shape_str(h.shape()));
  const std::int64_t layer = static_cast<std::int64_t>(history.size());
  history.push_back(params.f_write(h));
  const Tensor<T> query = params.f_query(h);
  const auto sources = visible_sources(layer, h.dim(1), slots, mode, scope);
  const Tensor<T> read = memory_attend(history, query, sources, params.score_scale());
  return layer_norm(add(h, params.g(read)), params.ln_gain, params.ln_bias);
}

template <typename T>
Tensor<T> apply_parallel(const Tensor<T>& h, const IMMParams<T>& params, MemoryMode mode,
                         std::int64_t slots) {
  std::vector<Tensor<T>> history;
  return apply_parallel(h, params, mode, BankScope::per_layer, slots, history);
}

template struct AffineMap<float>;
template struct AffineMap<double>;
template struct IMMParams<float>;
template struct IMMParams<double>;
template class MemoryBank<float>;
template class MemoryBank<double>;

#define IMM_GPT_INSTANTIATE_IMM(T)                                                                  \
  template Tensor<T> integrate(const Tensor<T>&, const Tensor<T>&, const IMMParams<T>&);            \
  template Tensor<T> apply_sequential(const Tensor<T>&, MemoryBank<T>&, const IMMParams<T>&);       \
  template Tensor<T> memory_attend(const std::vector<Tensor<T>>&, const Tensor<T>&,                 \
                                   const SlotSources&, T);                                          \
  template Tensor<T> apply_parallel(const Tensor<T>&, const IMMParams<T>&, MemoryMode,              \
                                    std::int64_t);                                                  \
  template Tensor<T> apply_parallel(const Tensor<T>&, const IMMParams<T>&, MemoryMode, BankScope,   \
                                    std::int64_t, std::vector<Tensor<T>>&);

IMM_GPT_INSTANTIATE_IMM(float)
IMM_GPT_INSTANTIATE_IMM(double)

#undef IMM_GPT_INSTANTIATE_IMM

}  // namespace imm_gpt
