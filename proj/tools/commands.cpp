#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include "imm_gpt/checkpoint.hpp"
#include "imm_gpt/grad_check.hpp"
#include "imm_gpt/training.hpp"
#include "json.hpp"

#ifndef IMM_GPT_VERSION
#define IMM_GPT_VERSION "0.0.0"
#endif

namespace imm_gpt::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Input problems the user can fix; mapped to exit code 2.
struct BadInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Resolved {
  std::string command;
  fs::path corpus;
  fs::path out;
  ModelConfig model;
  TrainConfig train;
};

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw BadInput("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw BadInput("malformed JSON in " + path.string() + ": " + e.what());
  }
}

std::string variant_label(const ModelConfig& m) {
  if (!m.imm_enabled) return "baseline";
  std::string label = "imm-" + to_string(m.imm_variant) + "-" + to_string(m.imm_memory_mode);
  if (m.imm_bank_scope == BankScope::shared) label += "-shared";
  return label;
}

void apply_imm_flag(const std::string& imm, ModelConfig& m) {
  if (imm.empty()) return;
  if (imm == "off") {
    m.imm_enabled = false;
    return;
  }
  m.imm_enabled = true;
  m.imm_variant = parse_variant(imm);
}

// preset → manifest or --config → explicit flags. Slot and rank defaults are
// filled last so they follow the final variant and width.
Resolved resolve(const std::string& command, const CommonFlags& f) {
  Resolved r;
  r.command = command;
  if (!f.manifest.empty()) {
    const json m = read_json_file(f.manifest);
    try {
      r.model = m.at("model").get<ModelConfig>();
      r.train = m.at("train").get<TrainConfig>();
      r.corpus = m.value("corpus", std::string());
      r.out = m.value("out", std::string());
    } catch (const json::exception& e) {
      throw BadInput("malformed manifest " + f.manifest + ": " + e.what());
    }
  } else {
    const Preset p = preset(f.preset);
    r.model = p.model;
    r.train = p.train;
  }
  if (!f.config_file.empty()) apply_overrides(read_json_file(f.config_file), r.model, r.train);
  if (!f.corpus.empty()) r.corpus = f.corpus;
  if (!f.out.empty()) r.out = f.out;
  apply_imm_flag(f.imm, r.model);
  if (!f.memory_mode.empty() && f.memory_mode != "both") r.model.imm_memory_mode = parse_memory_mode(f.memory_mode);
  if (!f.bank_scope.empty()) r.model.imm_bank_scope = parse_bank_scope(f.bank_scope);
  if (f.slots) r.model.imm_slots = *f.slots;
  if (f.rank) r.model.imm_rank = *f.rank;
  if (f.seed) r.model.seed = r.train.seed = *f.seed;
  if (f.steps) r.train.max_iters = *f.steps;
  r.model.resolve_defaults();
  return r;
}

TokenDataset load_corpus(const fs::path& corpus) {
  if (corpus.empty()) throw BadInput("--corpus is required");
  if (!fs::is_regular_file(corpus)) throw BadInput("corpus not found: " + corpus.string());
  try {
    return TokenDataset::from_file(corpus);
  } catch (const std::exception& e) {
    throw BadInput("cannot use corpus " + corpus.string() + ": " + e.what());
  }
}

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

json breakdown_json(const ParamBreakdown& b) {
  return {{"embedding", b.embedding},       {"per_layer_core", b.per_layer_core},
          {"per_layer_imm", b.per_layer_imm}, {"per_layer_imm_maps", b.per_layer_imm_maps},
          {"final_norm", b.final_norm},     {"total", b.total}};
}

void write_manifest(const Resolved& r, const json& params) {
  json m;
  m["command"] = r.command;
  m["tool_version"] = IMM_GPT_VERSION;
  m["started_at"] = utc_now();
  m["corpus"] = r.corpus.string();
  m["out"] = r.out.string();
  m["model"] = r.model;
  m["train"] = r.train;
  m["params"] = params;
  std::ofstream(r.out / "manifest.json") << m.dump(2) << '\n';
}

bool deterministic_mode(const CommonFlags& f) {
  const char* env = std::getenv("IMM_GPT_THREADS");
  return f.deterministic || (env != nullptr && std::string(env) == "1");
}

TrainOptions make_options(const std::string& variant, bool timing, bool quiet) {
  TrainOptions opts;
  opts.variant = variant;
  opts.record_timing = timing;
  if (!quiet) {
    opts.on_record = [variant](const LogRecord& rec) {
      std::cerr << variant << " step " << rec.step << " " << to_string(rec.split) << " "
                << std::fixed << std::setprecision(4) << rec.smoothed_loss << std::defaultfloat << '\n';
    };
  }
  return opts;
}

void print_summary_line(const std::string& label, const TrainingSummary& s) {
  std::cout << std::left << std::setw(28) << label << std::right << std::fixed << std::setprecision(4)
            << " final_smoothed_loss " << s.final_smoothed_loss << "  val_loss " << s.final_val_loss
            << "  params " << s.params << "  time " << std::setprecision(1) << s.total_s << "s"
            << std::defaultfloat << '\n';
}

// Wraps a command body with the exit-code contract.
template <typename Fn>
int guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNumericAbort;
  } catch (const BadInput& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kBadInput;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kBadInput;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kBadInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kCheckFailed;
  }
}

std::string svg_plot(const std::vector<std::pair<std::string, std::vector<LogRecord>>>& series) {
  constexpr double W = 720, H = 440, left = 70, right = 170, top = 30, bottom = 60;
  double max_step = 1, lo = 1e300, hi = -1e300;
  for (const auto& [_, recs] : series) {
    for (const auto& r : recs) {
      max_step = std::max(max_step, static_cast<double>(r.step));
      lo = std::min(lo, r.smoothed_loss);
      hi = std::max(hi, r.smoothed_loss);
    }
  }
  if (lo > hi) lo = 0, hi = 1;
  if (hi - lo < 1e-9) hi = lo + 1;
  const double pw = W - left - right, ph = H - top - bottom;
  auto x_of = [&](double s) { return left + pw * s / max_step; };
  auto y_of = [&](double v) { return top + ph * (hi - v) / (hi - lo); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"};

  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
     << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = lo + (hi - lo) * i / 4.0;
    const double s = max_step * i / 4.0;
    os << "<text x=\"" << left - 8 << "\" y=\"" << y_of(v) + 4 << "\" font-size=\"11\" text-anchor=\"end\">"
       << std::setprecision(2) << v << "</text>\n";
    os << "<text x=\"" << x_of(s) << "\" y=\"" << top + ph + 16 << "\" font-size=\"11\" text-anchor=\"middle\">"
       << std::setprecision(0) << s << "</text>\n";
    os << std::setprecision(2);
  }
  os << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 15 << "\" font-size=\"13\" text-anchor=\"middle\">step</text>\n";
  os << "<text x=\"18\" y=\"" << top + ph / 2 << "\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
     << top + ph / 2 << ")\">loss</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* color = colors[k % 5];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& r : series[k].second) os << x_of(static_cast<double>(r.step)) << ',' << y_of(r.smoothed_loss) << ' ';
    os << "\"/>\n";
    const double ly = top + 16 + 18 * static_cast<double>(k);
    os << "<line x1=\"" << W - right + 12 << "\" y1=\"" << ly << "\" x2=\"" << W - right + 32 << "\" y2=\"" << ly
       << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << W - right + 38 << "\" y=\"" << ly + 4 << "\" font-size=\"11\">" << series[k].first
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace

int cmd_train(const CommonFlags& flags) {
  return guarded([&] {
    Resolved r = resolve("train", flags);
    if (r.out.empty()) throw BadInput("--out is required");
    const TokenDataset data = load_corpus(r.corpus);
    r.model.vocab_size = data.vocab.size();
    r.model.validate();
    r.train.validate();
    for (const auto& w : r.train.warnings()) std::cerr << "warning: " << w << '\n';
    fs::create_directories(r.out);
    write_manifest(r, breakdown_json(GPTModel<float>::allocate(r.model).count_params()));

    const std::string label = variant_label(r.model);
    const bool timing = !deterministic_mode(flags);
    auto result = train<float>(r.model, r.train, data, make_options(label, timing, flags.quiet));
    result.log.write_csv(r.out / "log.csv");
    save_checkpoint(r.out / "model.ckpt", result.model, data.vocab);
    print_summary_line(label, result.log.summary);
    return int{kOk};
  });
}

int cmd_compare(const CommonFlags& flags) {
  return guarded([&] {
    Resolved r = resolve("compare", flags);
    if (r.out.empty()) throw BadInput("--out is required");
    const TokenDataset data = load_corpus(r.corpus);
    r.model.vocab_size = data.vocab.size();

    std::vector<MemoryMode> modes;
    if (flags.memory_mode.empty() || flags.memory_mode == "both") {
      modes = {MemoryMode::causal, MemoryMode::noncausal};
    } else {
      modes = {parse_memory_mode(flags.memory_mode)};
    }
    std::vector<ModelConfig> configs;
    ModelConfig base = r.model;
    base.imm_enabled = false;
    configs.push_back(base);
    ModelConfig imm = r.model;
    if (flags.imm.empty() || flags.imm == "off") imm.imm_variant = ImmVariant::dense;
    imm.imm_enabled = true;
    imm.resolve_defaults();
    for (MemoryMode mode : modes) {
      imm.imm_memory_mode = mode;
      configs.push_back(imm);
    }
    for (const auto& c : configs) c.validate();
    r.train.validate();
    fs::create_directories(r.out);

    json params = json::object();
    for (const auto& c : configs) {
      params[variant_label(c)] = breakdown_json(GPTModel<float>::allocate(c).count_params());
    }
    r.model = imm;
    write_manifest(r, params);

    const bool timing = !deterministic_mode(flags);
    TrainingLog combined;
    std::vector<std::pair<std::string, std::vector<LogRecord>>> series;
    std::vector<std::pair<std::string, TrainingSummary>> summaries;
    for (const auto& c : configs) {
      const std::string label = variant_label(c);
      auto result = train<float>(c, r.train, data, make_options(label, timing, flags.quiet));
      save_checkpoint(r.out / (label + ".ckpt"), result.model, data.vocab);
      combined.records.insert(combined.records.end(), result.log.records.begin(), result.log.records.end());
      series.emplace_back(label, result.log.split_records(Split::train));
      summaries.emplace_back(label, result.log.summary);
      print_summary_line(label, result.log.summary);
    }
    combined.write_csv(r.out / "log.csv");
    std::ofstream(r.out / "compare.svg") << svg_plot(series);

    const double baseline = summaries.front().second.final_smoothed_loss;
    json summary;
    summary["steps"] = r.train.max_iters;
    summary["block_size"] = r.model.block_size;
    summary["n_embd"] = r.model.n_embd;
    summary["baseline"] = {{"final_smoothed_loss", baseline},
                           {"final_val_loss", summaries.front().second.final_val_loss}};
    summary["imm"] = json::array();
    std::ofstream txt(r.out / "summary.txt");
    txt << "baseline final smoothed loss " << format_double(baseline) << '\n';
    for (std::size_t k = 1; k < summaries.size(); ++k) {
      const auto& [label, s] = summaries[k];
      const double reduction = 100.0 * (baseline - s.final_smoothed_loss) / baseline;
      summary["imm"].push_back({{"variant", label},
                                {"memory_mode", to_string(configs[k].imm_memory_mode)},
                                {"final_smoothed_loss", s.final_smoothed_loss},
                                {"final_val_loss", s.final_val_loss},
                                {"reduction_percent", reduction}});
      std::ostringstream line;
      line << label << " final smoothed loss " << format_double(s.final_smoothed_loss) << ", reduction "
           << std::fixed << std::setprecision(1) << reduction << "% vs baseline";
      txt << line.str() << '\n';
      std::cout << line.str() << '\n';
    }
    std::ofstream(r.out / "summary.json") << summary.dump(2) << '\n';
    return int{kOk};
  });
}

int cmd_gradcheck(const GradcheckFlags& flags) {
  return guarded([&] {
    std::vector<ImmVariant> variants;
    if (flags.variant == "both") {
      variants = {ImmVariant::dense, ImmVariant::lowrank};
    } else {
      variants = {parse_variant(flags.variant)};
    }
    if (!(flags.tolerance > 0.0)) throw BadInput("--tolerance must be positive");

    bool all_passed = true;
    const ParamGradError* worst_overall = nullptr;
    std::string worst_variant;
    std::vector<GradCheckReport> reports;
    reports.reserve(variants.size());
    for (ImmVariant v : variants) {
      ModelConfig c;
      c.block_size = 5;
      c.n_layer = 2;
      c.n_head = 2;
      c.n_embd = 8;
      c.vocab_size = 11;
      c.imm_enabled = true;
      c.imm_variant = v;
      c.imm_slots = 3;
      c.imm_rank = v == ImmVariant::lowrank ? 2 : 0;
      c.imm_memory_mode = parse_memory_mode(flags.memory_mode);
      c.imm_bank_scope = parse_bank_scope(flags.bank_scope);
      c.seed = flags.seed + 1;
      c.validate();
      auto model = GPTModel<double>::init(c);

      // Re-draw every tensor at unit scale so no gradient is degenerate
      // (zero biases and unit gains would hide errors in their paths).
      std::mt19937_64 rng(flags.seed);
      std::normal_distribution<double> normal(0.0, 0.5);
      for (const auto& p : model.parameters()) {
        Tensor<double> t = p.tensor;
        const bool gain = p.name.ends_with("gain");
        for (double& x : t.mutable_data()) x = (gain ? 1.0 : 0.0) + normal(rng);
      }
      Batch batch;
      batch.batch_size = 2;
      batch.block_size = c.block_size;
      std::uniform_int_distribution<TokenId> tok(0, static_cast<TokenId>(c.vocab_size - 1));
      for (int i = 0; i < 10; ++i) {
        batch.x.push_back(tok(rng));
        batch.y.push_back(tok(rng));
      }
      GradCheckOptions opts;
      opts.tolerance = flags.tolerance;
      opts.seed = flags.seed;
      reports.push_back(grad_check([&] { return model.loss(batch); }, model.parameters(), opts));
      const auto& report = reports.back();

      std::cout << "variant " << to_string(v) << " (d=8, N=3" << (v == ImmVariant::lowrank ? ", k=2" : "")
                << ", T=5, B=2, " << to_string(c.imm_memory_mode) << ", " << to_string(c.imm_bank_scope)
                << ")\n";
      std::cout << std::left << std::setw(32) << "parameter" << std::right << std::setw(8) << "coords"
                << std::setw(14) << "max_rel_err" << "\n";
      for (const auto& e : report.params) {
        std::cout << std::left << std::setw(32) << e.name << std::right << std::setw(8) << e.coords_checked
                  << std::setw(14) << std::scientific << std::setprecision(3) << e.max_rel_error
                  << std::defaultfloat << (e.max_rel_error < flags.tolerance ? "" : "  FAIL") << '\n';
      }
      all_passed = all_passed && report.passed();
      const auto* w = report.worst();
      if (w != nullptr && (worst_overall == nullptr || w->max_rel_error > worst_overall->max_rel_error)) {
        worst_overall = w;
        worst_variant = to_string(v);
      }
    }
    if (worst_overall != nullptr) {
      std::cout << "worst: " << worst_variant << " " << worst_overall->name << " rel_err " << std::scientific
                << worst_overall->max_rel_error << " (analytic " << worst_overall->analytic << ", numeric "
                << worst_overall->numeric << ")" << std::defaultfloat << '\n';
    }
    std::cout << (all_passed ? "PASS" : "FAIL") << " tolerance " << flags.tolerance << '\n';
    return int{all_passed ? kOk : kCheckFailed};
  });
}

int cmd_sample(const SampleFlags& flags) {
  return guarded([&] {
    if (flags.checkpoint.empty()) throw BadInput("--checkpoint is required");
    const Checkpoint ck = load_checkpoint(flags.checkpoint);
    std::u32string prompt;
    try {
      prompt = utf8_decode(flags.prompt);
    } catch (const std::exception& e) {
      throw BadInput(std::string("prompt: ") + e.what());
    }
    if (prompt.empty()) throw BadInput("--prompt must be non-empty");
    std::vector<TokenId> ids;
    try {
      ids = ck.vocab.encode(prompt);
    } catch (const std::exception& e) {
      throw BadInput(std::string("prompt: ") + e.what());
    }
    if (flags.max_new < 0) throw BadInput("--max-new must be >= 0");
    if (flags.top_k < 0) throw BadInput("--top-k must be >= 0");
    GenerateOptions opts;
    opts.max_new = flags.max_new;
    opts.top_k = flags.top_k;
    opts.temperature = flags.temperature;
    opts.seed = flags.seed;
    const auto out = generate(ck.model, ids, opts);
    std::cout << utf8_encode(ck.vocab.decode(out)) << '\n';
    return int{kOk};
  });
}

int cmd_profile(const CommonFlags& flags) {
  return guarded([&] {
    CommonFlags f = flags;
    const std::int64_t steps = flags.steps.value_or(20);
    f.steps.reset();
    if (steps <= 0) {
      std::cerr << "error: no samples\n";
      return int{kCheckFailed};
    }
    Resolved r = resolve("profile", f);
    std::vector<TokenId> tokens;
    if (!r.corpus.empty()) {
      const TokenDataset data = load_corpus(r.corpus);
      r.model.vocab_size = data.vocab.size();
      tokens = data.train_ids;
    } else {
      std::mt19937_64 rng(r.train.seed);
      std::uniform_int_distribution<TokenId> tok(0, static_cast<TokenId>(r.model.vocab_size - 1));
      tokens.resize(200000);
      for (auto& t : tokens) t = tok(rng);
    }
    ModelConfig base = r.model;
    base.imm_enabled = false;
    ModelConfig imm = r.model;
    if (flags.imm.empty() || flags.imm == "off") imm.imm_variant = ImmVariant::dense;
    imm.imm_enabled = true;
    imm.resolve_defaults();
    base.validate();
    imm.validate();

    std::cout << "preset " << flags.preset << ", " << steps << " timed steps after 5 warmup, "
              << configure_kernel_threads() << " kernel thread(s)\n";
    std::cout << std::left << std::setw(28) << "variant" << std::right << std::setw(12) << "mean_ms"
              << std::setw(12) << "p50_ms" << std::setw(12) << "p90_ms" << std::setw(10) << "ratio" << '\n';
    double base_mean = 0.0, ratio = 0.0;
    for (const auto* c : {&base, &imm}) {
      auto model = GPTModel<float>::init(*c);
      const ProfileStats s = profile_step(model, r.train, tokens, steps);
      if (c == &base) base_mean = s.mean_ms;
      ratio = s.mean_ms / base_mean;
      std::cout << std::left << std::setw(28) << variant_label(*c) << std::right << std::fixed
                << std::setprecision(2) << std::setw(12) << s.mean_ms << std::setw(12) << s.p50_ms
                << std::setw(12) << s.p90_ms << std::setw(10) << std::setprecision(3) << ratio
                << std::defaultfloat << '\n';
    }
    std::cout << "ratio " << std::fixed << std::setprecision(3) << ratio << std::defaultfloat << '\n';
    if (ratio > 1.5) std::cout << "WARN: IMM step time exceeds 1.5x baseline\n";
    return int{kOk};
  });
}

}  // namespace imm_gpt::cli
