#include "doctest.h"

#include <cmath>
#include <random>

#include "imm_gpt/grad_check.hpp"
#include "imm_gpt/ops.hpp"
#include "oracles.hpp"

using namespace imm_gpt;
using oracle::random_tensor;

namespace {

Tensor<double> leaf(Shape s, std::vector<double> v) { return Tensor<double>::from(std::move(s), std::move(v), true); }

double check(const std::function<Tensor<double>()>& f, const ParameterList<double>& params) {
  return grad_check(f, params).worst_error();
}

}  // namespace

TEST_CASE("linear: examples and shape errors") {
  auto x = Tensor<double>::from({2}, {1, 0});
  auto eye = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  auto y = linear(x, eye, Tensor<double>::zeros({2}));
  CHECK(y.data()[0] == 1.0);
  CHECK(y.data()[1] == 0.0);

  auto y2 = linear(Tensor<double>::from({2}, {1, 1}), Tensor<double>::from({2, 1}, {1, 1}),
                   Tensor<double>::from({1}, {1}));
  CHECK(y2.shape() == Shape{1});
  CHECK(y2.item() == 3.0);

  try {
    linear(Tensor<double>::zeros({3, 4}), Tensor<double>::zeros({5, 2}));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[3,4]") != std::string::npos);
    CHECK(msg.find("[5,2]") != std::string::npos);
  }
}

TEST_CASE("linear: gradient against finite differences") {
  std::mt19937_64 rng(1);
  auto x = random_tensor({3, 4}, rng, -1, 1, true);
  auto W = random_tensor({4, 5}, rng, -1, 1, true);
  auto b = random_tensor({5}, rng, -1, 1, true);
  auto f = [&] { return sum(linear(x, W, b)); };
  GradCheckOptions two_point;
  two_point.eps = 1e-5;
  two_point.five_point = false;
  const auto report = grad_check(f, {{"x", x}, {"W", W}, {"b", b}}, two_point);
  CHECK(report.worst_error() < 1e-8);
  CHECK(check(f, {{"x", x}, {"W", W}, {"b", b}}) < 1e-8);
}

TEST_CASE("softmax: examples, shift invariance, row sums") {
  auto u = softmax(Tensor<double>::from({3}, {0, 0, 0}));
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));

  auto p = softmax(Tensor<double>::from({3}, {std::log(1.0), std::log(2.0), std::log(3.0)}));
  CHECK(p.data()[0] == doctest::Approx(1.0 / 6).epsilon(1e-14));
  CHECK(p.data()[1] == doctest::Approx(2.0 / 6).epsilon(1e-14));
  CHECK(p.data()[2] == doctest::Approx(3.0 / 6).epsilon(1e-14));

  std::mt19937_64 rng(2);
  auto x = random_tensor({4, 7}, rng, -10, 10);
  std::vector<double> shifted(x.data().begin(), x.data().end());
  for (auto& v : shifted) v += 123.25;
  auto a = softmax(x);
  auto b = softmax(Tensor<double>::from({4, 7}, shifted));
  CHECK(oracle::max_abs_diff(a.data(), b.data()) < 1e-12);
  for (int r = 0; r < 4; ++r) {
    double s = 0.0;
    for (int c = 0; c < 7; ++c) {
      CHECK(a.data()[r * 7 + c] >= 0.0);
      s += a.data()[r * 7 + c];
    }
    CHECK(std::abs(s - 1.0) < 1e-6);
  }

  auto col = softmax(x, 0);
  for (int c = 0; c < 7; ++c) {
    double s = 0.0;
    for (int r = 0; r < 4; ++r) s += col.data()[r * 7 + c];
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("softmax and layer_norm: gradients") {
  std::mt19937_64 rng(3);
  auto x = random_tensor({3, 5}, rng, -2, 2, true);
  auto gain = random_tensor({5}, rng, 0.5, 1.5, true);
  auto bias = random_tensor({5}, rng, -1, 1, true);
  auto proj = random_tensor({5, 1}, rng);
  auto f = [&] { return sum(linear(layer_norm(x, gain, bias), proj)); };
  CHECK(check(f, {{"x", x}, {"gain", gain}, {"bias", bias}}) < 1e-4);
  auto g = [&] { return sum(linear(softmax(x), proj)); };
  CHECK(check(g, {{"x", x}}) < 1e-4);
}

TEST_CASE("layer_norm: examples and moments") {
  auto ones = Tensor<double>::full({4}, 1.0);
  auto zeros = Tensor<double>::zeros({4});
  auto c = layer_norm(Tensor<double>::full({4}, 2.5), ones, zeros);
  for (double v : c.data()) CHECK(v == 0.0);

  auto y = layer_norm(Tensor<double>::from({2}, {1, 3}), Tensor<double>::full({2}, 1.0),
                      Tensor<double>::zeros({2}), 0.0);
  CHECK(y.data()[0] == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(y.data()[1] == doctest::Approx(1.0).epsilon(1e-15));

  std::mt19937_64 rng(4);
  auto x = random_tensor({20, 16}, rng, -10, 10);
  auto n = layer_norm(x, Tensor<double>::full({16}, 1.0), Tensor<double>::zeros({16}));
  for (int r = 0; r < 20; ++r) {
    double m = 0.0, v = 0.0;
    for (int k = 0; k < 16; ++k) m += n.data()[r * 16 + k];
    m /= 16;
    for (int k = 0; k < 16; ++k) v += (n.data()[r * 16 + k] - m) * (n.data()[r * 16 + k] - m);
    v /= 16;
    CHECK(std::abs(m) < 1e-6);
    CHECK(std::abs(v - 1.0) < 1e-4);
  }
}

TEST_CASE("cross_entropy: examples, errors, gradient") {
  auto uniform = Tensor<double>::zeros({2, 3, 65});
  std::vector<TokenId> targets = {0, 5, 64, 3, 2, 1};
  CHECK(cross_entropy(uniform, targets).item() == doctest::Approx(std::log(65.0)).epsilon(1e-14));
  CHECK(std::abs(std::log(65.0) - 4.174) < 5e-4);

  std::vector<double> v(4, 0.0);
  v[2] = 30.0;
  CHECK(cross_entropy(Tensor<double>::from({1, 4}, v), std::vector<TokenId>{2}).item() < 1e-9);

  std::vector<TokenId> bad = {0, 5, 65, 3, 2, 1};
  CHECK_THROWS_AS(cross_entropy(uniform, bad), std::out_of_range);
  CHECK_THROWS_AS(cross_entropy(uniform, std::vector<TokenId>{0, 1}), ShapeError);

  std::mt19937_64 rng(5);
  auto logits = random_tensor({2, 3, 6}, rng, -3, 3, true);
  std::vector<TokenId> t = {0, 5, 2, 3, 1, 4};
  CHECK(check([&] { return cross_entropy(logits, t); }, {{"logits", logits}}) < 1e-4);
}

TEST_CASE("gelu: examples and gradient") {
  CHECK(gelu(Tensor<double>::scalar(0.0)).item() == 0.0);
  CHECK(std::abs(gelu(Tensor<double>::scalar(10.0)).item() - 10.0) / 10.0 < 1e-3);
  std::mt19937_64 rng(6);
  auto x = random_tensor({10}, rng, -4, 4, true);
  auto w = random_tensor({10, 1}, rng);
  CHECK(check([&] { return sum(linear(gelu(x), w)); }, {{"x", x}}) < 1e-4);
}

TEST_CASE("embedding, add broadcast, scale: gradients") {
  std::mt19937_64 rng(7);
  auto table = random_tensor({6, 4}, rng, -1, 1, true);
  auto pos = random_tensor({3, 4}, rng, -1, 1, true);
  auto w = random_tensor({4, 1}, rng);
  std::vector<TokenId> ids = {1, 5, 1, 0, 2, 3};
  auto f = [&] {
    return sum(linear(scale(add(embedding(table, ids, {2, 3}), pos), 0.5), w));
  };
  CHECK(check(f, {{"table", table}, {"pos", pos}}) < 1e-4);
  CHECK_THROWS(embedding(table, std::vector<TokenId>{6}, {1}));
  CHECK_THROWS_AS(add(table, pos), ShapeError);
}

TEST_CASE("causal_attention: brute-force oracle, T=1, causality, gradient") {
  std::mt19937_64 rng(8);
  auto qkv = random_tensor({1, 4, 24}, rng, -2, 2);
  auto out = causal_attention(qkv, 2);
  CHECK(out.shape() == Shape{1, 4, 8});
  CHECK(oracle::max_abs_diff(out.data(), oracle::attention(qkv, 2)) < 1e-10);

  auto multi = random_tensor({3, 5, 24}, rng, -2, 2);
  CHECK(oracle::max_abs_diff(causal_attention(multi, 4).data(), oracle::attention(multi, 4)) < 1e-10);

  // T = 1: the output is the value vector itself.
  auto single = random_tensor({2, 1, 24}, rng);
  auto o1 = causal_attention(single, 2);
  for (int b = 0; b < 2; ++b) {
    for (int k = 0; k < 8; ++k) CHECK(o1.data()[b * 8 + k] == doctest::Approx(single.data()[b * 24 + 16 + k]));
  }

  // Perturbing later positions leaves earlier outputs untouched.
  std::vector<double> v(qkv.data().begin(), qkv.data().end());
  for (int k = 0; k < 24; ++k) v[3 * 24 + k] += 5.0;
  auto perturbed = causal_attention(Tensor<double>::from({1, 4, 24}, v), 2);
  for (int i = 0; i < 3 * 8; ++i) CHECK(perturbed.data()[i] == out.data()[i]);

  auto x = random_tensor({2, 3, 12}, rng, -1, 1, true);
  auto w = random_tensor({4, 1}, rng);
  CHECK(check([&] { return sum(linear(causal_attention(x, 2), w)); }, {{"x", x}}) < 1e-4);
  CHECK_THROWS_AS(causal_attention(Tensor<double>::zeros({1, 2, 12}), 5), ShapeError);
}

TEST_CASE("slot ops: gradients") {
  std::mt19937_64 rng(9);
  auto bank = random_tensor({2, 3, 4}, rng, -1, 1, true);
  auto val = random_tensor({2, 4}, rng, -1, 1, true);
  auto q = random_tensor({2, 4}, rng, -1, 1, true);
  auto w = random_tensor({4, 1}, rng);
  auto f = [&] {
    auto m = assign_slot(bank, 1, val);
    auto alpha = softmax(slot_scores(m, q));
    return sum(linear(slot_mix(alpha, m), w));
  };
  CHECK(check(f, {{"bank", bank}, {"val", val}, {"q", q}}) < 1e-4);

  auto h = random_tensor({2, 3, 4}, rng, -1, 1, true);
  auto g = [&] {
    std::vector<Tensor<double>> steps;
    for (int t = 2; t >= 0; --t) steps.push_back(scale(select_step(h, t), double(t + 1)));
    return sum(linear(stack_steps(steps), w));
  };
  CHECK(check(g, {{"h", h}}) < 1e-4);
}

TEST_CASE("dropout: identity at p=0 or eval, scaled mask in training") {
  std::mt19937_64 rng(10);
  auto x = random_tensor({100}, rng);
  CHECK(dropout(x, 0.0, true, &rng).same_storage(x));
  CHECK(dropout(x, 0.5, false, &rng).same_storage(x));
  auto y = dropout(x, 0.5, true, &rng);
  int zeros = 0;
  for (int i = 0; i < 100; ++i) {
    if (y.data()[i] == 0.0) {
      ++zeros;
    } else {
      CHECK(y.data()[i] == doctest::Approx(2.0 * x.data()[i]));
    }
  }
  CHECK(zeros > 20);
  CHECK(zeros < 80);
}

TEST_CASE("backward: linear structure, off-path zero, determinism, scalar check") {
  auto W = leaf({2, 3}, {1, 2, 3, 4, 5, 6});
  auto x = Tensor<double>::from({2}, {0.5, -2});
  auto unused = leaf({3}, {1, 1, 1});
  W.zero_grad();
  unused.zero_grad();
  backward(sum(linear(x, W)));
  // d sum(x·W) / dW[i][j] = x[i]
  for (int j = 0; j < 3; ++j) {
    CHECK(W.grad()[j] == 0.5);
    CHECK(W.grad()[3 + j] == -2.0);
  }
  for (double g : unused.grad()) CHECK(g == 0.0);

  std::mt19937_64 rng(11);
  auto a = random_tensor({3, 4}, rng, -1, 1, true);
  auto b = random_tensor({4, 4}, rng, -1, 1, true);
  auto loss = [&] { return sum(gelu(linear(softmax(a), b))); };
  a.zero_grad();
  backward(loss());
  std::vector<double> first(a.grad().begin(), a.grad().end());
  a.zero_grad();
  backward(loss());
  std::vector<double> second(a.grad().begin(), a.grad().end());
  CHECK(first == second);

  CHECK_THROWS(backward(linear(x, W)));
}

TEST_CASE("NoGradGuard: no graph recorded") {
  auto W = leaf({2, 2}, {1, 0, 0, 1});
  NoGradGuard guard;
  auto y = linear(Tensor<double>::from({2}, {1, 2}), W);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("grad_check: corrupted gradient is reported, nondeterminism throws") {
  std::mt19937_64 rng(12);
  auto x = random_tensor({4}, rng, -1, 1, true);
  auto w = random_tensor({4, 1}, rng);
  // gelu with its gradient inflated by 1% through a custom op.
  auto corrupt = [&] {
    auto y = gelu(x);
    auto out = Tensor<double>::make_result(y.shape(), Buffer<double>(y.data().begin(), y.data().end()),
                                           {y}, [](Node<double>& n) {
                                             auto& g = n.parents[0]->ensure_grad();
                                             for (std::size_t i = 0; i < g.size(); ++i) g[i] += 1.01 * n.grad[i];
                                           });
    return sum(linear(out, w));
  };
  const auto report = grad_check(corrupt, {{"x", x}});
  CHECK_FALSE(report.passed());
  CHECK(report.worst()->name == "x");
  CHECK(report.worst_error() > 1e-4);
  CHECK(report.worst_error() < 2e-2);

  int calls = 0;
  auto flaky = [&] { return scale(sum(gelu(x)), 1.0 + 1e-3 * (++calls)); };
  CHECK_THROWS_AS(grad_check(flaky, {{"x", x}}), std::runtime_error);

  CHECK(relative_error(1.0, 1.0) == 0.0);
  CHECK(relative_error(2.0, 1.0) == 0.5);
  CHECK(relative_error(0.0, 1e-12) == doctest::Approx(1e-6));
}

TEST_CASE("ops keep finite outputs on random inputs in [-10, 10]") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_tensor({3, 4, 12}, rng, -10, 10);
    auto W = random_tensor({12, 12}, rng, -10, 10);
    auto g = random_tensor({12}, rng, -10, 10);
    std::vector<Tensor<double>> outs = {
        softmax(x), layer_norm(x, g, g), gelu(x), linear(x, W), causal_attention(x, 2),
        cross_entropy(x, std::vector<TokenId>(12, 3)),
        slot_mix(softmax(slot_scores(x, select_step(x, 1))), x)};
    for (const auto& o : outs) {
      for (double v : o.data()) REQUIRE(std::isfinite(v));
    }
  }
}
