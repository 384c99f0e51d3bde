#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "imm_gpt/checkpoint.hpp"
#include "imm_gpt/training.hpp"

using namespace imm_gpt;
namespace fs = std::filesystem;

namespace {

// Short periodic text with a little noise: learnable within a few dozen steps.
TokenDataset toy_dataset(std::size_t length = 6000) {
  std::mt19937_64 rng(11);
  const std::u32string words[] = {U"to be ", U"or not ", U"that is ", U"the question. "};
  std::u32string text;
  std::uniform_int_distribution<int> pick(0, 3);
  while (text.size() < length) text += words[pick(rng)];
  return TokenDataset::from_text(text);
}

ModelConfig small_model(bool imm) {
  ModelConfig c;
  c.block_size = 16;
  c.n_layer = 2;
  c.n_head = 2;
  c.n_embd = 16;
  c.imm_enabled = imm;
  c.imm_slots = 4;
  return c;
}

TrainConfig small_train(std::int64_t iters) {
  TrainConfig t;
  t.batch_size = 4;
  t.max_iters = iters;
  t.warmup_iters = 5;
  t.lr_decay_iters = iters;
  t.lr_max = 3e-3;
  t.eval_interval = 10;
  t.eval_iters = 2;
  return t;
}

double checksum(const ParameterList<float>& params) {
  double s = 0.0;
  for (const auto& p : params) {
    for (float v : p.tensor.data()) s += static_cast<double>(v) * 1.000001;
  }
  return s;
}

}  // namespace

TEST_CASE("lr_at: schedule endpoints, midpoint, continuity, monotonicity") {
  TrainConfig c;
  CHECK(lr_at(c.warmup_iters, c) == doctest::Approx(c.lr_max).epsilon(1e-15));
  CHECK(lr_at(c.lr_decay_iters, c) == doctest::Approx(c.lr_min).epsilon(1e-12));
  CHECK(lr_at(c.lr_decay_iters + 500, c) == c.lr_min);
  const auto mid = (c.warmup_iters + c.lr_decay_iters) / 2;
  CHECK(std::abs(lr_at(mid, c) - (c.lr_max + c.lr_min) / 2) < 1e-12);
  CHECK(lr_at(0, c) == doctest::Approx(c.lr_max / (c.warmup_iters + 1)));
  CHECK(std::abs(lr_at(c.warmup_iters - 1, c) - lr_at(c.warmup_iters, c)) < c.lr_max / 50);
  for (std::int64_t s = c.warmup_iters; s < c.lr_decay_iters + 10; ++s) CHECK(lr_at(s + 1, c) <= lr_at(s, c));
  for (std::int64_t s = 0; s < c.warmup_iters; ++s) CHECK(lr_at(s + 1, c) > lr_at(s, c));
}

TEST_CASE("weight decay mask follows the no-decay list") {
  CHECK(applies_weight_decay("layer.0.attn.c_attn.weight", 2));
  CHECK(applies_weight_decay("layer.3.imm.f_write.u", 2));
  CHECK_FALSE(applies_weight_decay("layer.0.attn.c_attn.bias", 1));
  CHECK_FALSE(applies_weight_decay("layer.0.ln_1.gain", 1));
  CHECK_FALSE(applies_weight_decay("wte", 2));
  CHECK_FALSE(applies_weight_decay("wpe", 2));

  ModelConfig mc = small_model(true);
  auto m = GPTModel<float>::init(mc);
  AdamW<float> opt(m.parameters(), TrainConfig{});
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    const auto& name = m.parameters()[i].name;
    const bool decayed = opt.decay_mask()[i];
    if (name.ends_with("bias") || name.ends_with("gain") || name == "wte" || name == "wpe") {
      CHECK_MESSAGE(!decayed, name);
    } else {
      CHECK_MESSAGE(decayed, name);
    }
  }
}

TEST_CASE("adamw: first step, zero gradient, decay, state shape check") {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  auto p = Tensor<float>::from({1, 1}, {0.0f}, true);
  AdamW<float> opt({{"w", p}}, cfg);
  p.mutable_grad()[0] = 1.0f;
  opt.step(0.1);
  CHECK(p.data()[0] == doctest::Approx(-0.1).epsilon(1e-6));

  auto q = Tensor<float>::from({2, 2}, {1, 2, 3, 4}, true);
  AdamW<float> still({{"w", q}}, cfg);
  q.zero_grad();
  still.step(0.1);
  CHECK(std::vector<float>(q.data().begin(), q.data().end()) == std::vector<float>{1, 2, 3, 4});

  TrainConfig decay;
  decay.weight_decay = 0.5;
  auto r = Tensor<float>::from({1, 2}, {2, -2}, true);
  AdamW<float> dec({{"w", r}}, decay);
  r.zero_grad();
  dec.step(0.1);
  CHECK(r.data()[0] == doctest::Approx(2.0 * (1 - 0.05)));
  CHECK(r.data()[1] == doctest::Approx(-2.0 * (1 - 0.05)));

  auto bias = Tensor<float>::from({2}, {2, -2}, true);
  AdamW<float> nodec({{"b", bias}}, decay);
  bias.zero_grad();
  nodec.step(0.1);
  CHECK(bias.data()[0] == 2.0f);

  dec.first_moments()[0].resize(5);
  CHECK_THROWS_AS(dec.step(0.1), ShapeError);
}

TEST_CASE("clip_grad_norm scales to the bound") {
  auto a = Tensor<float>::from({2}, {0, 0}, true);
  auto b = Tensor<float>::from({1}, {0}, true);
  a.mutable_grad()[0] = 6.0f;
  a.mutable_grad()[1] = 0.0f;
  b.mutable_grad()[0] = 8.0f;
  ParameterList<float> params{{"a", a}, {"b", b}};
  CHECK(clip_grad_norm(params, 1.0) == doctest::Approx(10.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6).epsilon(1e-5));
  CHECK(b.grad()[0] == doctest::Approx(0.8).epsilon(1e-5));
  CHECK(clip_grad_norm(params, 5.0) == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(a.grad()[0] == doctest::Approx(0.6).epsilon(1e-5));
}

TEST_CASE("estimate_loss: near ln V untrained, no mutation, variance shrinks") {
  const auto data = toy_dataset();
  ModelConfig mc = small_model(true);
  mc.vocab_size = data.vocab.size();
  const auto m = GPTModel<float>::init(mc);
  const double before = checksum(m.parameters());
  std::mt19937_64 rng(1);
  const double loss = estimate_loss(m, data.train_ids, 4, 5, rng);
  CHECK(std::abs(loss - std::log(static_cast<double>(data.vocab.size()))) < 0.2);
  CHECK(checksum(m.parameters()) == before);
  CHECK_THROWS(estimate_loss(m, data.train_ids, 4, 0, rng));

  auto spread = [&](std::int64_t iters) {
    std::vector<double> v;
    for (int r = 0; r < 12; ++r) v.push_back(estimate_loss(m, data.train_ids, 2, iters, rng));
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    return std::sqrt(var / v.size());
  };
  CHECK(spread(16) < spread(1));
}

TEST_CASE("train: loss decreases, records, determinism") {
  const auto data = toy_dataset();
  for (bool imm : {false, true}) {
    TrainOptions opts;
    opts.variant = imm ? "imm" : "baseline";
    opts.record_timing = false;
    const auto run = train<float>(small_model(imm), small_train(50), data, opts);
    const auto& log = run.log;
    REQUIRE(log.raw_losses.size() == 50);
    const auto train_recs = log.split_records(Split::train);
    REQUIRE(train_recs.size() == 6);  // steps 0, 10, ..., 40, 49
    CHECK(train_recs.front().step == 0);
    CHECK(train_recs.back().step == 49);
    CHECK(train_recs.back().smoothed_loss < train_recs.front().smoothed_loss);
    for (std::size_t i = 1; i < train_recs.size(); ++i) CHECK(train_recs[i].step > train_recs[i - 1].step);
    // smoothed = mean of raw losses since the previous record
    const double window = std::accumulate(log.raw_losses.begin() + 1, log.raw_losses.begin() + 11, 0.0) / 10;
    CHECK(train_recs[1].smoothed_loss == doctest::Approx(window).epsilon(1e-12));
    const double tail = std::accumulate(log.raw_losses.begin() + 40, log.raw_losses.end(), 0.0) / 10;
    CHECK(log.summary.final_smoothed_loss == doctest::Approx(tail).epsilon(1e-12));
    CHECK(log.split_records(Split::val).size() == 6);
    for (const auto& r : log.records) CHECK(std::isfinite(r.raw_loss));
    CHECK(run.model.config().vocab_size == data.vocab.size());

    const auto again = train<float>(small_model(imm), small_train(50), data, opts);
    CHECK(again.log.raw_losses == log.raw_losses);
  }
}

TEST_CASE("train: non-finite loss aborts naming the step") {
  const auto data = toy_dataset();
  TrainConfig t = small_train(40);
  t.lr_max = 1e30;
  t.lr_min = 1e29;
  t.warmup_iters = 0;
  t.grad_clip = 0.0;
  t.weight_decay = 0.0;
  try {
    train<float>(small_model(false), t, data);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(e.step() > 0);
    CHECK(std::string(e.what()).find("step " + std::to_string(e.step())) != std::string::npos);
  }
}

TEST_CASE("log CSV: header, round trip, shortest decimal form") {
  TrainingLog log;
  log.records.push_back({0, Split::train, 4.1234567890123, 4.5, 1e-5, 0.0, "baseline"});
  log.records.push_back({40, Split::val, 0.1 + 0.2, 3.0, 0.001, 12.5, "imm-dense-causal"});
  const auto path = fs::temp_directory_path() / "imm_gpt_log_test.csv";
  log.write_csv(path);
  std::ifstream in(path);
  std::string header, first;
  std::getline(in, header);
  std::getline(in, first);
  CHECK(header == "step,split,smoothed_loss,raw_loss,lr,step_ms,variant");
  CHECK(first == "0,train,4.1234567890123,4.5,1e-05,0,baseline");
  const auto back = TrainingLog::read_csv(path);
  REQUIRE(back.size() == 2);
  CHECK(back[1].smoothed_loss == 0.1 + 0.2);
  CHECK(back[1].split == Split::val);
  CHECK(back[1].variant == "imm-dense-causal");
  fs::remove(path);
  CHECK(format_double(0.1) == "0.1");
}

TEST_CASE("profile_step: statistics and empty request") {
  const auto data = toy_dataset();
  ModelConfig mc = small_model(false);
  mc.vocab_size = data.vocab.size();
  auto m = GPTModel<float>::init(mc);
  TrainConfig t = small_train(10);
  CHECK_THROWS_WITH(profile_step(m, t, data.train_ids, 0), "no samples");
  const auto s = profile_step(m, t, data.train_ids, 6);
  CHECK(s.samples == 6);
  CHECK(s.mean_ms > 0.0);
  CHECK(s.p50_ms <= s.p90_ms);
}

TEST_CASE("checkpoint: round trip and corruption") {
  const auto data = toy_dataset();
  ModelConfig mc = small_model(true);
  mc.imm_variant = ImmVariant::lowrank;
  mc.imm_rank = 3;
  mc.vocab_size = data.vocab.size();
  const auto m = GPTModel<float>::init(mc);
  const auto path = fs::temp_directory_path() / "imm_gpt_ckpt_test.ckpt";
  save_checkpoint(path, m, data.vocab);

  const auto ck = load_checkpoint(path);
  CHECK(ck.vocab == data.vocab);
  CHECK(ck.config.imm_rank == 3);
  CHECK(ck.config.imm_variant == ImmVariant::lowrank);
  REQUIRE(ck.model.parameters().size() == m.parameters().size());
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    const auto a = m.parameters()[i].tensor.data();
    const auto b = ck.model.parameters()[i].tensor.data();
    CHECK(std::equal(a.begin(), a.end(), b.begin(), b.end()));
  }

  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  in.close();
  CHECK(bytes.substr(0, 8) == "IMMGPTCK");

  std::ofstream(path, std::ios::binary) << bytes.substr(0, bytes.size() - 3);
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  std::string bad = bytes;
  bad[2] = 'X';
  std::ofstream(path, std::ios::binary) << bad;
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  std::ofstream(path, std::ios::binary) << bytes << "extra";
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  fs::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
}

TEST_CASE("config: presets, overrides, json round trip, validation") {
  const auto p64 = preset("block64");
  CHECK(p64.model.block_size == 64);
  CHECK(p64.model.n_embd == 128);
  CHECK(p64.model.n_layer == 4);
  CHECK(p64.model.n_head == 4);
  CHECK(p64.model.dropout == 0.0);
  CHECK(p64.train.batch_size == 12);
  CHECK(p64.train.max_iters == 2000);
  CHECK(p64.train.lr_decay_iters == 2000);
  CHECK(preset("block128").model.n_embd == 256);
  CHECK(preset("block256").model.block_size == 256);
  CHECK(preset("block256").model.n_embd == 512);
  CHECK_THROWS_AS(preset("block32"), ConfigError);

  ModelConfig m = p64.model;
  TrainConfig t = p64.train;
  apply_overrides(nlohmann::json{{"model", {{"n_layer", 2}}}, {"train", {{"max_iters", 10}}}}, m, t);
  CHECK(m.n_layer == 2);
  CHECK(t.max_iters == 10);
  apply_overrides(nlohmann::json{{"seed", 9}, {"imm_variant", "lowrank"}, {"lr_max", 0.5}}, m, t);
  CHECK(m.seed == 9);
  CHECK(t.seed == 9);
  CHECK(m.imm_variant == ImmVariant::lowrank);
  CHECK(t.lr_max == 0.5);
  CHECK_THROWS_AS(apply_overrides(nlohmann::json{{"bogus", 1}}, m, t), ConfigError);

  nlohmann::json j = m;
  CHECK(j.get<ModelConfig>().n_layer == 2);
  nlohmann::json jt = t;
  CHECK(jt.get<TrainConfig>().max_iters == 10);

  ModelConfig lr;
  lr.imm_enabled = true;
  lr.imm_variant = ImmVariant::lowrank;
  lr.resolve_defaults();
  CHECK(lr.imm_slots == 11);
  CHECK(lr.imm_rank == 11);
  ModelConfig dense;
  dense.imm_enabled = true;
  CHECK(dense.resolve_defaults().imm_slots == 16);

  ModelConfig bad;
  bad.n_embd = 130;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  TrainConfig tb;
  tb.lr_max = -1;
  CHECK_THROWS_AS(tb.validate(), ConfigError);
  TrainConfig warn;
  warn.warmup_iters = 3000;
  CHECK_FALSE(warn.warnings().empty());
}
