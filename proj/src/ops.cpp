#include "imm_gpt/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <string>
#include <limits>

namespace imm_gpt {

int configure_kernel_threads() {
  if (const char* env = std::getenv("IMM_GPT_THREADS"); env != nullptr && *env != '\0') {
    const int n = std::stoi(env);
    if (n < 1) throw std::invalid_argument("IMM_GPT_THREADS must be >= 1");
    Eigen::setNbThreads(n);
  }
  return Eigen::nbThreads();
}

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;
template <typename T>
using StridedMap = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStridedMap = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;

template <typename T>
Node<T>& parent(Node<T>& self, std::size_t i) {
  return *self.parents[i];
}

std::int64_t last_dim(const Shape& s, const char* op) {
  if (s.empty()) throw ShapeError(std::string(op) + ": scalar input has no last axis");
  return s.back();
}

}  // namespace

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2 || x.rank() < 1 || x.dim(-1) != weight.dim(0)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  const std::int64_t in = weight.dim(0), out = weight.dim(1), rows = x.size() / in;
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out)) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                     shape_str(weight.shape()));
  }
  Shape out_shape = x.shape();
  out_shape.back() = out;
  Buffer<T> y(static_cast<std::size_t>(rows * out));
  MapR<T> Y(y.data(), rows, out);
  Y.noalias() = CMapR<T>(x.data().data(), rows, in) * CMapR<T>(weight.data().data(), in, out);
  if (bias.defined()) {
    Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data().data(), out);
  }
  std::vector<Tensor<T>> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  const bool has_bias = bias.defined();
  return Tensor<T>::make_result(
      std::move(out_shape), std::move(y), std::move(parents),
      [rows, in, out, has_bias](Node<T>& self) {
        CMapR<T> dY(self.grad.data(), rows, out);
        auto& xn = parent(self, 0);
        auto& wn = parent(self, 1);
        if (xn.requires_grad) {
          MapR<T>(xn.ensure_grad().data(), rows, in).noalias() +=
              dY * CMapR<T>(wn.value.data(), in, out).transpose();
        }
        if (wn.requires_grad) {
          MapR<T>(wn.ensure_grad().data(), in, out).noalias() +=
              CMapR<T>(xn.value.data(), rows, in).transpose() * dY;
        }
        if (has_bias) {
          auto& bn = parent(self, 2);
          if (bn.requires_grad) {
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(bn.ensure_grad().data(), out) +=
                dY.colwise().sum();
          }
        }
      });
}

template <typename T>
Tensor<T> linear_transposed(const Tensor<T>& x, const Tensor<T>& weight) {
  if (weight.rank() != 2 || x.rank() < 1 || x.dim(-1) != weight.dim(1)) {
    throw ShapeError("linear_transposed: input " + shape_str(x.shape()) +
                     " incompatible with weight " + shape_str(weight.shape()));
  }
  const std::int64_t out = weight.dim(0), in = weight.dim(1), rows = x.size() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out;
  Buffer<T> y(static_cast<std::size_t>(rows * out));
  MapR<T>(y.data(), rows, out).noalias() =
      CMapR<T>(x.data().data(), rows, in) * CMapR<T>(weight.data().data(), out, in).transpose();
  return Tensor<T>::make_result(
      std::move(out_shape), std::move(y), {x, weight}, [rows, in, out](Node<T>& self) {
        CMapR<T> dY(self.grad.data(), rows, out);
        auto& xn = parent(self, 0);
        auto& wn = parent(self, 1);
        if (xn.requires_grad) {
          MapR<T>(xn.ensure_grad().data(), rows, in).noalias() +=
              dY * CMapR<T>(wn.value.data(), out, in);
        }
        if (wn.requires_grad) {
          MapR<T>(wn.ensure_grad().data(), out, in).noalias() +=
              dY.transpose() * CMapR<T>(xn.value.data(), rows, in);
        }
      });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  bool suffix = bs.size() <= as.size() && std::equal(bs.rbegin(), bs.rend(), as.rbegin());
  if (!suffix) {
    throw ShapeError("add: shape " + shape_str(bs) + " cannot broadcast to " + shape_str(as));
  }
  const std::size_t n = static_cast<std::size_t>(a.size());
  const std::size_t m = static_cast<std::size_t>(b.size());
  Buffer<T> y(a.data().begin(), a.data().end());
  auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i) y[i] += bv[i % m];
  return Tensor<T>::make_result(as, std::move(y), {a, b}, [n, m](Node<T>& self) {
    auto& an = parent(self, 0);
    auto& bn = parent(self, 1);
    if (an.requires_grad) {
      auto& g = an.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
    }
    if (bn.requires_grad) {
      auto& g = bn.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) g[i % m] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Buffer<T> y(x.data().begin(), x.data().end());
  for (auto& v : y) v *= factor;
  return Tensor<T>::make_result(x.shape(), std::move(y), {x}, [factor](Node<T>& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (auto v : x.data()) total += v;
  return Tensor<T>::make_result({}, {total}, {x}, [](Node<T>& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::int64_t axis) {
  const auto r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("softmax: axis out of range for shape " + shape_str(x.shape()));
  }
  const auto& s = x.shape();
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (std::int64_t i = axis + 1; i < r; ++i) inner *= s[static_cast<std::size_t>(i)];
  const std::int64_t len = s[static_cast<std::size_t>(axis)];

  auto xv = x.data();
  Buffer<T> y(xv.size());
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::int64_t k = 0; k < len; ++k) mx = std::max(mx, xv[base + k * inner]);
      T z = T(0);
      for (std::int64_t k = 0; k < len; ++k) {
        T e = std::exp(xv[base + k * inner] - mx);
        y[base + k * inner] = e;
        z += e;
      }
      for (std::int64_t k = 0; k < len; ++k) y[base + k * inner] /= z;
    }
  }
  return Tensor<T>::make_result(s, std::move(y), {x}, [outer, inner, len](Node<T>& self) {
    auto& g = parent(self, 0).ensure_grad();
    const auto& yv = self.value;
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t in = 0; in < inner; ++in) {
        const std::int64_t base = o * len * inner + in;
        T dot = T(0);
        for (std::int64_t k = 0; k < len; ++k) {
          dot += self.grad[base + k * inner] * yv[base + k * inner];
        }
        for (std::int64_t k = 0; k < len; ++k) {
          const auto idx = base + k * inner;
          g[idx] += yv[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const std::int64_t d = last_dim(x.shape(), "layer_norm");
  if (d < 1) throw ShapeError("layer_norm: last axis must be >= 1");
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw ShapeError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                     shape_str(bias.shape()) + " do not match input " + shape_str(x.shape()));
  }
  const std::int64_t rows = x.size() / d;
  auto xv = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  Buffer<T> y(xv.size());
  Buffer<T> mean(static_cast<std::size_t>(rows)), rstd(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T mu = T(0);
    for (std::int64_t i = 0; i < d; ++i) mu += row[i];
    mu /= T(d);
    T var = T(0);
    for (std::int64_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= T(d);
    const T rs = T(1) / std::sqrt(var + eps);
    mean[r] = mu;
    rstd[r] = rs;
    for (std::int64_t i = 0; i < d; ++i) y[r * d + i] = (row[i] - mu) * rs * gv[i] + bv[i];
  }
  return Tensor<T>::make_result(
      x.shape(), std::move(y), {x, gain, bias},
      [rows, d, mean = std::move(mean), rstd = std::move(rstd)](Node<T>& self) {
        auto& xn = parent(self, 0);
        auto& gn = parent(self, 1);
        auto& bn = parent(self, 2);
        Buffer<T> xhat(static_cast<std::size_t>(d));
        for (std::int64_t r = 0; r < rows; ++r) {
          const T* row = xn.value.data() + r * d;
          const T* dy = self.grad.data() + r * d;
          for (std::int64_t i = 0; i < d; ++i) xhat[i] = (row[i] - mean[r]) * rstd[r];
          if (gn.requires_grad) {
            auto& gg = gn.ensure_grad();
            for (std::int64_t i = 0; i < d; ++i) gg[i] += dy[i] * xhat[i];
          }
          if (bn.requires_grad) {
            auto& bg = bn.ensure_grad();
            for (std::int64_t i = 0; i < d; ++i) bg[i] += dy[i];
          }
          if (xn.requires_grad) {
            T mean_dyh = T(0), mean_dyh_xhat = T(0);
            for (std::int64_t i = 0; i < d; ++i) {
              const T dyh = dy[i] * gn.value[i];
              mean_dyh += dyh;
              mean_dyh_xhat += dyh * xhat[i];
            }
            mean_dyh /= T(d);
            mean_dyh_xhat /= T(d);
            T* dx = xn.ensure_grad().data() + r * d;
            for (std::int64_t i = 0; i < d; ++i) {
              dx[i] += rstd[r] * (dy[i] * gn.value[i] - mean_dyh - xhat[i] * mean_dyh_xhat);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kAlpha = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kCubic = T(0.044715);
  Buffer<T> y(x.data().begin(), x.data().end());
  for (auto& v : y) {
    v = T(0.5) * v * (T(1) + std::tanh(kAlpha * (v + kCubic * v * v * v)));
  }
  return Tensor<T>::make_result(x.shape(), std::move(y), {x}, [](Node<T>& self) {
    auto& xn = parent(self, 0);
    auto& g = xn.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = xn.value[i];
      const T th = std::tanh(kAlpha * (v + kCubic * v * v * v));
      const T dinner = kAlpha * (T(1) + T(3) * kCubic * v * v);
      g[i] += self.grad[i] * (T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * dinner);
    }
  });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, std::mt19937_64* rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0, 1)");
  if (!training || p == 0.0) return x;
  if (rng == nullptr) throw std::invalid_argument("dropout: training mode requires an rng");
  std::bernoulli_distribution keep(1.0 - p);
  const T inv = T(1.0 / (1.0 - p));
  Buffer<T> mask(static_cast<std::size_t>(x.size()));
  Buffer<T> y(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < y.size(); ++i) {
    mask[i] = keep(*rng) ? inv : T(0);
    y[i] *= mask[i];
  }
  return Tensor<T>::make_result(x.shape(), std::move(y), {x},
                                [mask = std::move(mask)](Node<T>& self) {
                                  auto& g = parent(self, 0).ensure_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                    g[i] += mask[i] * self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const TokenId> targets) {
  const std::int64_t V = last_dim(logits.shape(), "cross_entropy");
  const std::int64_t rows = logits.size() / V;
  if (static_cast<std::int64_t>(targets.size()) != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(logits.shape()));
  }
  auto lv = logits.data();
  Buffer<T> lse(static_cast<std::size_t>(rows));
  std::vector<TokenId> tgt(targets.begin(), targets.end());
  T total = T(0);
  for (std::int64_t r = 0; r < rows; ++r) {
    const TokenId t = tgt[r];
    if (t < 0 || t >= V) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) +
                              " out of range for " + std::to_string(V) + " classes");
    }
    const T* row = lv.data() + r * V;
    T mx = *std::max_element(row, row + V);
    T z = T(0);
    for (std::int64_t k = 0; k < V; ++k) z += std::exp(row[k] - mx);
    lse[r] = mx + std::log(z);
    total += lse[r] - row[t];
  }
  return Tensor<T>::make_result(
      {}, {total / T(rows)}, {logits},
      [rows, V, lse = std::move(lse), tgt = std::move(tgt)](Node<T>& self) {
        auto& ln = parent(self, 0);
        auto& g = ln.ensure_grad();
        const T coeff = self.grad[0] / T(rows);
        for (std::int64_t r = 0; r < rows; ++r) {
          const T* row = ln.value.data() + r * V;
          T* gr = g.data() + r * V;
          for (std::int64_t k = 0; k < V; ++k) gr[k] += coeff * std::exp(row[k] - lse[r]);
          gr[tgt[r]] -= coeff;
        }
      });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const TokenId> ids, const Shape& ids_shape) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be 2-D, got " + shape_str(table.shape()));
  if (numel(ids_shape) != static_cast<std::int64_t>(ids.size())) {
    throw ShapeError("embedding: id count does not match shape " + shape_str(ids_shape));
  }
  const std::int64_t V = table.dim(0), d = table.dim(1);
  std::vector<TokenId> idx(ids.begin(), ids.end());
  Buffer<T> y(idx.size() * static_cast<std::size_t>(d));
  auto tv = table.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= V) {
      throw std::out_of_range("embedding: id " + std::to_string(idx[i]) + " out of range for " +
                              std::to_string(V) + " rows");
    }
    std::copy_n(tv.data() + idx[i] * d, d, y.data() + i * d);
  }
  Shape out_shape = ids_shape;
  out_shape.push_back(d);
  return Tensor<T>::make_result(std::move(out_shape), std::move(y), {table},
                                [d, idx = std::move(idx)](Node<T>& self) {
                                  auto& g = parent(self, 0).ensure_grad();
                                  for (std::size_t i = 0; i < idx.size(); ++i) {
                                    T* dst = g.data() + idx[i] * d;
                                    const T* src = self.grad.data() + i * d;
                                    for (std::int64_t k = 0; k < d; ++k) dst[k] += src[k];
                                  }
                                });
}

template <typename T>
Tensor<T> causal_attention(const Tensor<T>& qkv, std::int64_t n_head) {
  if (qkv.rank() != 3 || qkv.dim(2) % 3 != 0) {
    throw ShapeError("causal_attention: expected [B,T,3d], got " + shape_str(qkv.shape()));
  }
  const std::int64_t B = qkv.dim(0), T_ = qkv.dim(1), C = qkv.dim(2) / 3;
  if (n_head < 1 || C % n_head != 0) {
    throw ShapeError("causal_attention: width " + std::to_string(C) + " not divisible by " +
                     std::to_string(n_head) + " heads");
  }
  const std::int64_t hs = C / n_head;
  const T factor = T(1) / std::sqrt(T(hs));
  Buffer<T> y(static_cast<std::size_t>(B * T_ * C));
  auto probs = std::make_shared<Buffer<T>>(static_cast<std::size_t>(B * n_head * T_ * T_));
  const T* src = qkv.data().data();
  MatR<T> scores(T_, T_);
  for (std::int64_t b = 0; b < B; ++b) {
    const T* base = src + b * T_ * 3 * C;
    for (std::int64_t h = 0; h < n_head; ++h) {
      CStridedMap<T> Q(base + h * hs, T_, hs, Eigen::OuterStride<>(3 * C));
      CStridedMap<T> K(base + C + h * hs, T_, hs, Eigen::OuterStride<>(3 * C));
      CStridedMap<T> Vm(base + 2 * C + h * hs, T_, hs, Eigen::OuterStride<>(3 * C));
      MapR<T> P(probs->data() + (b * n_head + h) * T_ * T_, T_, T_);
      scores.noalias() = (Q * K.transpose()) * factor;
      for (std::int64_t i = 0; i < T_; ++i) {
        T mx = scores(i, 0);
        for (std::int64_t j = 1; j <= i; ++j) mx = std::max(mx, scores(i, j));
        T z = T(0);
        for (std::int64_t j = 0; j <= i; ++j) {
          P(i, j) = std::exp(scores(i, j) - mx);
          z += P(i, j);
        }
        for (std::int64_t j = 0; j <= i; ++j) P(i, j) /= z;
        for (std::int64_t j = i + 1; j < T_; ++j) P(i, j) = T(0);
      }
      StridedMap<T> Y(y.data() + b * T_ * C + h * hs, T_, hs, Eigen::OuterStride<>(C));
      Y.noalias() = P * Vm;
    }
  }
  return Tensor<T>::make_result(
      {B, T_, C}, std::move(y), {qkv}, [B, T_, C, n_head, hs, factor, probs](Node<T>& self) {
        auto& xn = parent(self, 0);
        auto& g = xn.ensure_grad();
        MatR<T> dP(T_, T_);
        for (std::int64_t b = 0; b < B; ++b) {
          const T* base = xn.value.data() + b * T_ * 3 * C;
          T* gbase = g.data() + b * T_ * 3 * C;
          for (std::int64_t h = 0; h < n_head; ++h) {
            CStridedMap<T> Q(base + h * hs, T_, hs, Eigen::OuterStride<>(3 * C));
            CStridedMap<T> K(base + C + h * hs, T_, hs, Eigen::OuterStride<>(3 * C));
            CStridedMap<T> Vm(base + 2 * C + h * hs, T_, hs, Eigen::OuterStride<>(3 * C));
            StridedMap<T> dQ(gbase + h * hs, T_, hs, Eigen::OuterStride<>(3 * C));
            StridedMap<T> dK(gbase + C + h * hs, T_, hs, Eigen::OuterStride<>(3 * C));
            StridedMap<T> dV(gbase + 2 * C + h * hs, T_, hs, Eigen::OuterStride<>(3 * C));
            CMapR<T> P(probs->data() + (b * n_head + h) * T_ * T_, T_, T_);
            CStridedMap<T> dY(self.grad.data() + b * T_ * C + h * hs, T_, hs,
                              Eigen::OuterStride<>(C));
            dV.noalias() += P.transpose() * dY;
            dP.noalias() = dY * Vm.transpose();
            for (std::int64_t i = 0; i < T_; ++i) {
              T dot = T(0);
              for (std::int64_t j = 0; j <= i; ++j) dot += dP(i, j) * P(i, j);
              for (std::int64_t j = 0; j <= i; ++j) dP(i, j) = P(i, j) * (dP(i, j) - dot) * factor;
              for (std::int64_t j = i + 1; j < T_; ++j) dP(i, j) = T(0);
            }
            dQ.noalias() += dP * K;
            dK.noalias() += dP.transpose() * Q;
          }
        }
      });
}

template <typename T>
Tensor<T> select_step(const Tensor<T>& x, std::int64_t t) {
  if (x.rank() != 3) throw ShapeError("select_step: expected [B,T,d], got " + shape_str(x.shape()));
  const std::int64_t B = x.dim(0), T_ = x.dim(1), d = x.dim(2);
  if (t < 0 || t >= T_) throw ShapeError("select_step: step " + std::to_string(t) + " out of range");
  Buffer<T> y(static_cast<std::size_t>(B * d));
  auto xv = x.data();
  for (std::int64_t b = 0; b < B; ++b) {
    std::copy_n(xv.data() + (b * T_ + t) * d, d, y.data() + b * d);
  }
  return Tensor<T>::make_result({B, d}, std::move(y), {x}, [B, T_, d, t](Node<T>& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::int64_t b = 0; b < B; ++b) {
      for (std::int64_t k = 0; k < d; ++k) g[(b * T_ + t) * d + k] += self.grad[b * d + k];
    }
  });
}

template <typename T>
Tensor<T> stack_steps(const std::vector<Tensor<T>>& steps) {
  if (steps.empty()) throw ShapeError("stack_steps: no steps");
  const Shape s0 = steps[0].shape();
  if (s0.size() != 2) throw ShapeError("stack_steps: expected [B,d] steps, got " + shape_str(s0));
  const std::int64_t B = s0[0], d = s0[1], T_ = static_cast<std::int64_t>(steps.size());
  Buffer<T> y(static_cast<std::size_t>(B * T_ * d));
  for (std::int64_t t = 0; t < T_; ++t) {
    if (steps[t].shape() != s0) {
      throw ShapeError("stack_steps: step shape " + shape_str(steps[t].shape()) + " differs from " +
                       shape_str(s0));
    }
    auto sv = steps[t].data();
    for (std::int64_t b = 0; b < B; ++b) std::copy_n(sv.data() + b * d, d, y.data() + (b * T_ + t) * d);
  }
  return Tensor<T>::make_result({B, T_, d}, std::move(y), steps, [B, T_, d](Node<T>& self) {
    for (std::int64_t t = 0; t < T_; ++t) {
      auto& pn = parent(self, static_cast<std::size_t>(t));
      if (!pn.requires_grad) continue;
      auto& g = pn.ensure_grad();
      for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t k = 0; k < d; ++k) g[b * d + k] += self.grad[(b * T_ + t) * d + k];
      }
    }
  });
}

template <typename T>
Tensor<T> assign_slot(const Tensor<T>& bank, std::int64_t slot, const Tensor<T>& value) {
  if (bank.rank() != 3 || value.rank() != 2 || value.dim(0) != bank.dim(0) ||
      value.dim(1) != bank.dim(2)) {
    throw ShapeError("assign_slot: bank " + shape_str(bank.shape()) + " incompatible with value " +
                     shape_str(value.shape()));
  }
  const std::int64_t B = bank.dim(0), N = bank.dim(1), d = bank.dim(2);
  if (slot < 0 || slot >= N) throw ShapeError("assign_slot: slot " + std::to_string(slot) + " out of range");
  Buffer<T> y(bank.data().begin(), bank.data().end());
  auto vv = value.data();
  for (std::int64_t b = 0; b < B; ++b) std::copy_n(vv.data() + b * d, d, y.data() + (b * N + slot) * d);
  return Tensor<T>::make_result(bank.shape(), std::move(y), {bank, value},
                                [B, N, d, slot](Node<T>& self) {
                                  auto& mn = parent(self, 0);
                                  auto& vn = parent(self, 1);
                                  for (std::int64_t b = 0; b < B; ++b) {
                                    for (std::int64_t i = 0; i < N; ++i) {
                                      const T* src = self.grad.data() + (b * N + i) * d;
                                      if (i == slot) {
                                        if (!vn.requires_grad) continue;
                                        T* dst = vn.ensure_grad().data() + b * d;
                                        for (std::int64_t k = 0; k < d; ++k) dst[k] += src[k];
                                      } else if (mn.requires_grad) {
                                        T* dst = mn.ensure_grad().data() + (b * N + i) * d;
                                        for (std::int64_t k = 0; k < d; ++k) dst[k] += src[k];
                                      }
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> slot_scores(const Tensor<T>& bank, const Tensor<T>& query) {
  if (bank.rank() != 3 || query.rank() != 2 || query.dim(0) != bank.dim(0) ||
      query.dim(1) != bank.dim(2)) {
    throw ShapeError("slot_scores: bank " + shape_str(bank.shape()) + " incompatible with query " +
                     shape_str(query.shape()));
  }
  const std::int64_t B = bank.dim(0), N = bank.dim(1), d = bank.dim(2);
  auto mv = bank.data();
  auto qv = query.data();
  Buffer<T> y(static_cast<std::size_t>(B * N));
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t i = 0; i < N; ++i) {
      T acc = T(0);
      for (std::int64_t k = 0; k < d; ++k) acc += mv[(b * N + i) * d + k] * qv[b * d + k];
      y[b * N + i] = acc;
    }
  }
  return Tensor<T>::make_result({B, N}, std::move(y), {bank, query}, [B, N, d](Node<T>& self) {
    auto& mn = parent(self, 0);
    auto& qn = parent(self, 1);
    for (std::int64_t b = 0; b < B; ++b) {
      for (std::int64_t i = 0; i < N; ++i) {
        const T gs = self.grad[b * N + i];
        if (mn.requires_grad) {
          T* dm = mn.ensure_grad().data() + (b * N + i) * d;
          for (std::int64_t k = 0; k < d; ++k) dm[k] += gs * qn.value[b * d + k];
        }
        if (qn.requires_grad) {
          T* dq = qn.ensure_grad().data() + b * d;
          for (std::int64_t k = 0; k < d; ++k) dq[k] += gs * mn.value[(b * N + i) * d + k];
        }
      }
    }
  });
}

template <typename T>
Tensor<T> slot_mix(const Tensor<T>& weights, const Tensor<T>& bank) {
  if (bank.rank() != 3 || weights.rank() != 2 || weights.dim(0) != bank.dim(0) ||
      weights.dim(1) != bank.dim(1)) {
    throw ShapeError("slot_mix: weights " + shape_str(weights.shape()) + " incompatible with bank " +
                     shape_str(bank.shape()));
  }
  const std::int64_t B = bank.dim(0), N = bank.dim(1), d = bank.dim(2);
  auto mv = bank.data();
  auto wv = weights.data();
  Buffer<T> y(static_cast<std::size_t>(B * d), T(0));
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t i = 0; i < N; ++i) {
      const T w = wv[b * N + i];
      for (std::int64_t k = 0; k < d; ++k) y[b * d + k] += w * mv[(b * N + i) * d + k];
    }
  }
  return Tensor<T>::make_result({B, d}, std::move(y), {weights, bank}, [B, N, d](Node<T>& self) {
    auto& wn = parent(self, 0);
    auto& mn = parent(self, 1);
    for (std::int64_t b = 0; b < B; ++b) {
      const T* dy = self.grad.data() + b * d;
      for (std::int64_t i = 0; i < N; ++i) {
        if (wn.requires_grad) {
          T acc = T(0);
          for (std::int64_t k = 0; k < d; ++k) acc += dy[k] * mn.value[(b * N + i) * d + k];
          wn.ensure_grad()[b * N + i] += acc;
        }
        if (mn.requires_grad) {
          const T w = wn.value[b * N + i];
          T* dm = mn.ensure_grad().data() + (b * N + i) * d;
          for (std::int64_t k = 0; k < d; ++k) dm[k] += w * dy[k];
        }
      }
    }
  });
}

#define IMM_GPT_INSTANTIATE_OPS(T)                                                          \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);          \
  template Tensor<T> linear_transposed(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> scale(const Tensor<T>&, T);                                             \
  template Tensor<T> sum(const Tensor<T>&);                                                  \
  template Tensor<T> softmax(const Tensor<T>&, std::int64_t);                                \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);    \
  template Tensor<T> gelu(const Tensor<T>&);                                                 \
  template Tensor<T> dropout(const Tensor<T>&, double, bool, std::mt19937_64*);              \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const TokenId>);              \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const TokenId>, const Shape&);    \
  template Tensor<T> causal_attention(const Tensor<T>&, std::int64_t);                       \
  template Tensor<T> select_step(const Tensor<T>&, std::int64_t);                            \
  template Tensor<T> stack_steps(const std::vector<Tensor<T>>&);                             \
  template Tensor<T> assign_slot(const Tensor<T>&, std::int64_t, const Tensor<T>&);          \
  template Tensor<T> slot_scores(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> slot_mix(const Tensor<T>&, const Tensor<T>&);

IMM_GPT_INSTANTIATE_OPS(float)
IMM_GPT_INSTANTIATE_OPS(double)

#undef IMM_GPT_INSTANTIATE_OPS

}  // namespace imm_gpt
