#pragma once

#include "bench.hpp"
#include "core.hpp"
#include "gp.hpp"
#include "metrics.hpp"
#include "optim.hpp"
#include "seek.hpp"

#include <json.hpp>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace seekgp {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------- config

/// Hidden-layer width `constant + per_dim * P`; JSON accepts 8 or "2P".
struct Width {
  Index constant = 0;
  Index per_dim = 0;
  Index resolve(Index P) const { return constant + per_dim * P; }
  std::string str() const {
    if (per_dim == 0) return std::to_string(constant);
    return (per_dim == 1 ? std::string() : std::to_string(per_dim)) + "P" +
           (constant ? "+" + std::to_string(constant) : std::string());
  }
};

struct KernelConfig {
  std::string family = "seek";
  std::vector<BaseKind> bases{BaseKind::gaussian};
  std::optional<std::vector<Width>> weight_hidden, bias_hidden;
  Index weight_outputs = 1;
  Index bias_outputs = 2;
  Activation hidden_activation = Activation::softplus;
  SeekActivation activation = SeekActivation::exp;
  bool shared_weight_net = false;
  BaseKind base = BaseKind::gaussian;        // stationary and deep families
  std::optional<std::vector<Width>> hidden;  // gibbs and deep families
  std::optional<bool> output_scale;
  std::string structure;  // structure code the bases came from, if any
};

inline const std::vector<std::string>& kernel_families() {
  static const std::vector<std::string> f{"seek", "stationary", "gaussian", "gibbs", "deep"};
  return f;
}

struct ModelConfig {
  std::optional<double> fixed_noise;  // original output units
  IntervalMode interval = IntervalMode::standard_deviation;
  JitterPolicy jitter;
};

struct ExperimentConfig {
  std::string name;
  BenchmarkSpec benchmark;
  std::optional<TestSpec> test;  // default per benchmark
  KernelConfig kernel;
  ModelConfig model;
  TrainConfig train;
  int repetitions = 16;
  std::uint64_t seed = 0;
  std::string output = "out";
  bool write_predictions = true;

  TestSpec test_spec() const { return test ? *test : default_test_spec(benchmark.name); }
};

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> repetitions;
  std::optional<std::string> output;
};

namespace detail {

inline std::string join(const std::vector<std::string>& items) {
  std::string s;
  for (std::size_t i = 0; i < items.size(); ++i) s += (i ? ", " : "") + items[i];
  return s;
}

inline void check_keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) {
      std::vector<std::string> names(allowed.begin(), allowed.end());
      throw ConfigError(where + ": unknown key '" + key + "' (valid keys: " + join(names) + ")");
    }
  }
}

template <class T>
T get(const json& obj, const char* key, const std::string& where, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type (" + obj.at(key).dump() + ")");
  }
}

inline Width parse_width(const json& v, const std::string& where) {
  if (v.is_number_integer()) {
    const auto w = v.get<long long>();
    if (w <= 0) throw ConfigError(where + ": hidden widths must be positive");
    return {static_cast<Index>(w), 0};
  }
  if (v.is_string()) {
    const std::string s = v.get<std::string>();
    const auto p = s.find('P');
    if (p != std::string::npos && p + 1 == s.size()) {
      Index k = 1;
      if (p > 0) {
        try {
          std::size_t used = 0;
          k = std::stoll(s.substr(0, p), &used);
          if (used != p) throw std::invalid_argument(s);
        } catch (const std::exception&) {
          throw ConfigError(where + ": cannot parse width '" + s + "' (use an integer or kP)");
        }
      }
      if (k <= 0) throw ConfigError(where + ": width multiplier must be positive");
      return {0, k};
    }
  }
  throw ConfigError(where + ": cannot parse width " + v.dump() + " (use an integer or a string like \"2P\")");
}

inline std::vector<Width> parse_widths(const json& v, const std::string& where) {
  if (!v.is_array()) throw ConfigError(where + ": expected a list of widths");
  std::vector<Width> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(parse_width(v[i], where + "[" + std::to_string(i) + "]"));
  return out;
}

inline BaseKind parse_base(const std::string& s, const std::string& where) {
  if (auto k = parse_base_kind(s)) return *k;
  throw ConfigError(where + ": unknown base kernel '" + s +
                    "' (valid: gaussian, matern12, matern32, matern52, periodic, power_exponential)");
}

inline Activation parse_hidden_activation(const std::string& s, const std::string& where) {
  if (s == "softplus") return Activation::softplus;
  if (s == "tanh") return Activation::tanh;
  if (s == "identity" || s == "iden") return Activation::identity;
  throw ConfigError(where + ": unknown hidden activation '" + s + "' (valid: softplus, tanh, identity)");
}

inline SeekActivation parse_activation(const std::string& s, const std::string& where) {
  if (auto a = parse_seek_activation(s)) return *a;
  throw ConfigError(where + ": unknown activation '" + s + "' (valid: exp, sinh, cosh, iden)");
}

}  // namespace detail

/// Expands a structure code: "G-k" Gaussian, "PE-k" power exponential, "H-k"
/// cycling Gaussian, periodic and Matern 5/2.
inline std::vector<BaseKind> parse_structure(const std::string& code) {
  const auto dash = code.find('-');
  if (dash == std::string::npos) throw ConfigError("structure code '" + code + "' must look like G-k, PE-k or H-k");
  const std::string letter = code.substr(0, dash);
  int k = 0;
  try {
    std::size_t used = 0;
    k = std::stoi(code.substr(dash + 1), &used);
    if (used != code.size() - dash - 1) throw std::invalid_argument(code);
  } catch (const std::exception&) {
    throw ConfigError("structure code '" + code + "' has no valid base count");
  }
  if (k < 0) throw ConfigError("structure code '" + code + "' has a negative base count");
  std::vector<BaseKind> out;
  for (int i = 0; i < k; ++i) {
    if (letter == "G") out.push_back(BaseKind::gaussian);
    else if (letter == "PE") out.push_back(BaseKind::power_exponential);
    else if (letter == "H") {
      constexpr BaseKind cycle[3] = {BaseKind::gaussian, BaseKind::periodic, BaseKind::matern52};
      out.push_back(cycle[i % 3]);
    } else {
      throw ConfigError("structure code '" + code + "': unknown letter '" + letter + "' (valid: G, PE, H)");
    }
  }
  return out;
}

inline KernelConfig parse_kernel_config(const json& j, const std::string& where = "kernel") {
  detail::check_keys(j, where,
                     {"family", "label", "bases", "structure", "weight_hidden", "bias_hidden", "weight_outputs",
                      "bias_outputs", "hidden_activation", "activation", "shared_weight_net", "base", "hidden",
                      "output_scale"});
  KernelConfig k;
  k.family = detail::get<std::string>(j, "family", where, "seek");
  const auto& fams = kernel_families();
  if (std::find(fams.begin(), fams.end(), k.family) == fams.end()) {
    throw ConfigError(where + ": unknown kernel family '" + k.family + "' (valid: " + detail::join(fams) + ")");
  }
  if (j.contains("structure") && j.contains("bases")) throw ConfigError(where + ": give either bases or structure, not both");
  if (j.contains("structure")) {
    k.structure = detail::get<std::string>(j, "structure", where, "");
    k.bases = parse_structure(k.structure);
  }
  if (j.contains("bases")) {
    const auto names = detail::get<std::vector<std::string>>(j, "bases", where, {});
    k.bases.clear();
    for (const auto& n : names) k.bases.push_back(detail::parse_base(n, where + ".bases"));
  }
  if (j.contains("weight_hidden")) k.weight_hidden = detail::parse_widths(j["weight_hidden"], where + ".weight_hidden");
  if (j.contains("bias_hidden")) k.bias_hidden = detail::parse_widths(j["bias_hidden"], where + ".bias_hidden");
  if (j.contains("hidden")) k.hidden = detail::parse_widths(j["hidden"], where + ".hidden");
  k.weight_outputs = detail::get<Index>(j, "weight_outputs", where, 1);
  k.bias_outputs = detail::get<Index>(j, "bias_outputs", where, 2);
  if (k.weight_outputs < 1) throw ConfigError(where + ".weight_outputs must be at least 1");
  if (k.bias_outputs < 0) throw ConfigError(where + ".bias_outputs must be non-negative");
  k.hidden_activation = detail::parse_hidden_activation(detail::get<std::string>(j, "hidden_activation", where, "softplus"),
                                                        where + ".hidden_activation");
  k.activation = detail::parse_activation(detail::get<std::string>(j, "activation", where, "exp"), where + ".activation");
  k.shared_weight_net = detail::get<bool>(j, "shared_weight_net", where, false);
  k.base = detail::parse_base(detail::get<std::string>(j, "base", where, "gaussian"), where + ".base");
  if (j.contains("output_scale")) k.output_scale = detail::get<bool>(j, "output_scale", where, false);
  if (k.family == "gaussian") {
    if (j.contains("base") && k.base != BaseKind::gaussian) throw ConfigError(where + ": family gaussian fixes base=gaussian");
    k.base = BaseKind::gaussian;
  }
  if (k.family == "seek" && k.bases.empty() && k.bias_outputs == 0) {
    throw ConfigError(where + ": a SEEK kernel needs at least one base kernel or a bias network");
  }
  return k;
}

inline ExperimentConfig parse_experiment(const json& j) {
  detail::check_keys(j, "config",
                     {"name", "benchmark", "test", "kernel", "model", "train", "repetitions", "seed", "output",
                      "write_predictions"});
  ExperimentConfig c;
  c.name = detail::get<std::string>(j, "name", "config", "");
  c.repetitions = detail::get<int>(j, "repetitions", "config", 16);
  c.seed = detail::get<std::uint64_t>(j, "seed", "config", 0);
  c.output = detail::get<std::string>(j, "output", "config", "out");
  c.write_predictions = detail::get<bool>(j, "write_predictions", "config", true);

  if (!j.contains("benchmark")) throw ConfigError("config: missing required section 'benchmark'");
  const json& b = j["benchmark"];
  detail::check_keys(b, "benchmark", {"name", "n_train", "noise_variance", "sobol_offset", "csv"});
  const std::string bname = detail::get<std::string>(b, "name", "benchmark", "");
  const auto parsed = parse_benchmark_name(bname);
  if (!parsed) throw ConfigError("benchmark.name: unknown benchmark '" + bname + "' (valid: analytic1, analytic2, hartmann6, csv)");
  c.benchmark.name = *parsed;
  c.benchmark.n_train = detail::get<Index>(b, "n_train", "benchmark", c.benchmark.name == BenchmarkName::analytic2 ? 140 : c.benchmark.name == BenchmarkName::hartmann6 ? 800 : 55);
  c.benchmark.noise_variance = detail::get<double>(b, "noise_variance", "benchmark", 1e-4);
  c.benchmark.sobol_offset = detail::get<bool>(b, "sobol_offset", "benchmark", true);
  if (b.contains("csv")) {
    const json& cj = b["csv"];
    detail::check_keys(cj, "benchmark.csv", {"path", "target", "features", "test_path"});
    c.benchmark.csv.path = detail::get<std::string>(cj, "path", "benchmark.csv", "");
    c.benchmark.csv.target = detail::get<std::string>(cj, "target", "benchmark.csv", "");
    c.benchmark.csv.features = detail::get<std::vector<std::string>>(cj, "features", "benchmark.csv", {});
    c.benchmark.csv.test_path = detail::get<std::string>(cj, "test_path", "benchmark.csv", "");
  }

  if (j.contains("test")) {
    const json& t = j["test"];
    detail::check_keys(t, "test", {"kind", "size", "start"});
    TestSpec ts = default_test_spec(c.benchmark.name);
    const std::string kind = detail::get<std::string>(t, "kind", "test", ts.kind == TestKind::grid ? "grid" : ts.kind == TestKind::sobol ? "sobol" : "csv");
    if (kind == "grid") ts.kind = TestKind::grid;
    else if (kind == "sobol") ts.kind = TestKind::sobol;
    else if (kind == "csv") ts.kind = TestKind::csv;
    else throw ConfigError("test.kind: unknown test set kind '" + kind + "' (valid: grid, sobol, csv)");
    ts.size = detail::get<Index>(t, "size", "test", ts.size);
    ts.start = detail::get<std::uint64_t>(t, "start", "test", ts.kind == TestKind::sobol ? 5001 : 0);
    c.test = ts;
  }

  c.kernel = parse_kernel_config(j.value("kernel", json::object()));

  if (j.contains("model")) {
    const json& m = j["model"];
    detail::check_keys(m, "model", {"noise", "interval", "jitter", "max_jitter"});
    if (m.contains("noise")) {
      if (m["noise"].is_string()) {
        if (m["noise"].get<std::string>() != "learn") throw ConfigError("model.noise: use \"learn\" or a non-negative number");
      } else if (m["noise"].is_number()) {
        const double v = m["noise"].get<double>();
        if (!(v >= 0) || !std::isfinite(v)) throw ConfigError("model.noise: fixed noise variance must be non-negative");
        c.model.fixed_noise = v;
      } else {
        throw ConfigError("model.noise: use \"learn\" or a non-negative number");
      }
    }
    const std::string iv = detail::get<std::string>(m, "interval", "model", "sqrt");
    if (iv == "sqrt") c.model.interval = IntervalMode::standard_deviation;
    else if (iv == "variance") c.model.interval = IntervalMode::variance;
    else throw ConfigError("model.interval: unknown interval convention '" + iv + "' (valid: sqrt, variance)");
    c.model.jitter.initial = detail::get<double>(m, "jitter", "model", 1e-8);
    c.model.jitter.max = detail::get<double>(m, "max_jitter", "model", 1e-4);
    if (!(c.model.jitter.initial > 0) || !(c.model.jitter.max >= c.model.jitter.initial))
      throw ConfigError("model: jitter must be positive and not exceed max_jitter");
  }

  if (j.contains("train")) {
    const json& t = j["train"];
    detail::check_keys(t, "train",
                       {"restarts", "max_epochs", "patience", "step_size", "lbfgs_history", "seed", "mode", "grad_tol",
                        "threads"});
    TrainConfig& tc = c.train;
    tc.restarts = detail::get<int>(t, "restarts", "train", tc.restarts);
    tc.max_epochs = detail::get<int>(t, "max_epochs", "train", tc.max_epochs);
    tc.patience = detail::get<int>(t, "patience", "train", tc.patience);
    tc.step_size = detail::get<double>(t, "step_size", "train", tc.step_size);
    tc.lbfgs_history = detail::get<int>(t, "lbfgs_history", "train", tc.lbfgs_history);
    tc.seed = detail::get<std::uint64_t>(t, "seed", "train", 0);
    tc.grad_tol = detail::get<double>(t, "grad_tol", "train", tc.grad_tol);
    tc.threads = detail::get<int>(t, "threads", "train", tc.threads);
    const std::string mode = detail::get<std::string>(t, "mode", "train", "line_search");
    if (mode == "line_search") tc.mode = StepMode::line_search;
    else if (mode == "fixed") tc.mode = StepMode::fixed;
    else throw ConfigError("train.mode: unknown mode '" + mode + "' (valid: line_search, fixed)");
  }
  return c;
}

inline void apply_overrides(ExperimentConfig& c, const Overrides& o) {
  if (o.seed) c.seed = *o.seed;
  if (o.repetitions) c.repetitions = *o.repetitions;
  if (o.output) c.output = *o.output;
}

/// Input dimension of the benchmark; csv files are inspected.
inline Index input_dimension(const ExperimentConfig& c) {
  if (c.benchmark.name != BenchmarkName::csv) return benchmark_dim(c.benchmark.name);
  const CsvTable t = read_csv(c.benchmark.csv.path);
  if (!c.benchmark.csv.features.empty()) return static_cast<Index>(c.benchmark.csv.features.size());
  return static_cast<Index>(t.header.size()) - 1;
}

inline Kernel build_kernel(const KernelConfig& k, Index P, std::uint64_t seed = 0) {
  auto widths = [P](const std::optional<std::vector<Width>>& w, Index per_dim) {
    std::vector<Index> out;
    if (!w) return std::vector<Index>{per_dim * P, per_dim * P};
    for (const auto& x : *w) out.push_back(x.resolve(P));
    return out;
  };
  if (k.family == "seek") {
    SeekOptions o;
    o.bases = k.bases;
    o.weight_hidden = widths(k.weight_hidden, 2);
    o.bias_hidden = widths(k.bias_hidden, 2);
    o.weight_outputs = k.weight_outputs;
    o.bias_outputs = k.bias_outputs;
    o.hidden_activation = k.hidden_activation;
    o.activation = k.activation;
    o.shared_weight_net = k.shared_weight_net;
    return make_seek(P, o, seed);
  }
  if (k.family == "stationary" || k.family == "gaussian") {
    BaseKernel b(k.base, Vector::Zero(P));
    Rng rng(seed);
    b.randomize(rng);
    return KernelExpr(std::move(b));
  }
  if (k.family == "gibbs") return make_gibbs(P, widths(k.hidden, 4), seed);
  if (k.family == "deep") return make_deep(P, k.base, widths(k.hidden, 4), seed);
  throw ConfigError("kernel: unknown kernel family '" + k.family + "' (valid: " + detail::join(kernel_families()) + ")");
}

/// Fail-fast validation: every field is resolved and every object that
/// training needs is constructed once.
inline void validate_experiment(const ExperimentConfig& c) {
  if (c.repetitions < 1) throw ConfigError("repetitions must be at least 1");
  if (c.output.empty()) throw ConfigError("output directory must be non-empty");
  try {
    c.train.validate();
  } catch (const ContractError& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }
  c.benchmark.validate();
  const TestSpec t = c.test_spec();
  if (c.benchmark.name == BenchmarkName::csv) {
    if (t.kind != TestKind::csv) throw ConfigError("test: the csv benchmark takes its test set from csv files");
    if (!fs::exists(c.benchmark.csv.path)) throw ConfigError("benchmark.csv.path: file '" + c.benchmark.csv.path + "' does not exist");
    if (!c.benchmark.csv.test_path.empty() && !fs::exists(c.benchmark.csv.test_path))
      throw ConfigError("benchmark.csv.test_path: file '" + c.benchmark.csv.test_path + "' does not exist");
  } else {
    if (t.kind == TestKind::csv) throw ConfigError("test: csv test sets require the csv benchmark");
    if (t.kind == TestKind::grid && benchmark_dim(c.benchmark.name) != 1)
      throw ConfigError("test: grid test sets are only supported for 1D benchmarks");
    if (t.size < 2) throw ConfigError("test.size must be at least 2");
  }
  if (c.kernel.family == "seek" && c.kernel.shared_weight_net && c.kernel.bases.empty())
    throw ConfigError("kernel: shared_weight_net needs at least one base kernel");
  try {
    const Index P = input_dimension(c);
    if (P < 1) throw ConfigError("benchmark: no input features");
    (void)build_kernel(c.kernel, P);
  } catch (const ContractError& e) {
    throw ConfigError(std::string("kernel: ") + e.what());
  } catch (const IngestError& e) {
    throw ConfigError(std::string("benchmark: ") + e.what());
  }
}

inline json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

/// Relative csv paths resolve against the config file's directory.
inline void resolve_paths(ExperimentConfig& c, const fs::path& base_dir) {
  auto fix = [&](std::string& p) {
    if (!p.empty() && fs::path(p).is_relative() && !fs::exists(p) && fs::exists(base_dir / p)) p = (base_dir / p).string();
  };
  fix(c.benchmark.csv.path);
  fix(c.benchmark.csv.test_path);
}

inline ExperimentConfig load_experiment(const fs::path& path) {
  ExperimentConfig c = parse_experiment(read_json_file(path));
  resolve_paths(c, path.parent_path());
  return c;
}

// ---------------------------------------------------------------- running

struct Quartiles {
  double min = 0, q1 = 0, median = 0, q3 = 0, max = 0, mean = 0;
  int count = 0;
};

/// Linear-interpolation quantiles over the finite values.
inline Quartiles quartiles(std::vector<double> v) {
  v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return !std::isfinite(x); }), v.end());
  Quartiles q;
  q.count = static_cast<int>(v.size());
  if (v.empty()) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    q = {nan, nan, nan, nan, nan, nan, 0};
    return q;
  }
  std::sort(v.begin(), v.end());
  auto at = [&](double p) {
    const double pos = p * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  q.min = v.front();
  q.q1 = at(0.25);
  q.median = at(0.5);
  q.q3 = at(0.75);
  q.max = v.back();
  double s = 0.0;
  for (double x : v) s += x;
  q.mean = s / static_cast<double>(v.size());
  return q;
}

struct RunRecord {
  int rep = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  MetricsReport metrics;
  double final_nll = std::numeric_limits<double>::quiet_NaN();
  int epochs = 0;
  double wall_ms = 0.0;
  std::uint64_t dataset_hash = 0;
  int best_restart = -1;
  std::string stop_reason;
  bool converged = false;
  int failed_restarts = 0;
  double noise_variance = std::numeric_limits<double>::quiet_NaN();  // original units
  std::vector<std::string> warnings;
};

struct Predictions {
  Points X;
  Vector truth, mean, lower, upper, variance;
};

struct RepetitionOutcome {
  RunRecord record;
  std::optional<Predictions> predictions;
  std::optional<GpModel> model;
  Dataset train;  // original units
};

inline std::uint64_t repetition_seed(const ExperimentConfig& c, int rep) { return c.seed + static_cast<std::uint64_t>(rep); }

/// Train and test sets of one repetition, in original units.
inline std::pair<Dataset, Dataset> repetition_data(const ExperimentConfig& c, int rep) {
  BenchmarkSpec spec = c.benchmark;
  spec.seed = repetition_seed(c, rep);
  if (spec.name == BenchmarkName::csv) return load_csv_benchmark(spec);
  return {synthesize_dataset(spec), make_test_set(spec, c.test_spec())};
}

/// GpModel for standardized data; a fixed noise variance given in output
/// units is rescaled by the target standardization.
inline GpModel build_model(const ExperimentConfig& c, Index P, double y_std) {
  GpModel model(build_kernel(c.kernel, P));
  model.learn_output_scale = c.kernel.output_scale.value_or(c.kernel.family != "seek");
  if (c.model.fixed_noise) model.fixed_noise = *c.model.fixed_noise / (y_std * y_std);
  model.jitter = c.model.jitter;
  return model;
}

/// One repetition end to end. Failures are captured in the record.
inline RepetitionOutcome run_repetition(const ExperimentConfig& c, int rep, bool keep_predictions = true) {
  RepetitionOutcome out;
  RunRecord& r = out.record;
  r.rep = rep;
  r.seed = repetition_seed(c, rep);
  const auto t0 = std::chrono::steady_clock::now();
  try {
    auto [train_raw, test_raw] = repetition_data(c, rep);
    out.train = train_raw;
    r.dataset_hash = dataset_hash(train_raw);
    const Standardizer st = fit_standardizer(train_raw);
    r.warnings = st.warnings;
    const Dataset train = standardize(train_raw, st);
    GpModel model = build_model(c, train.dim(), st.y_std);
    TrainConfig tc = c.train;
    tc.seed = mix_seed(r.seed) + c.train.seed;
    const FitResult fit = multi_restart_fit(model, train, tc);
    const auto& best = fit.restarts[static_cast<std::size_t>(fit.best_restart)];
    r.final_nll = fit.best_loss;
    r.epochs = best.epochs;
    r.best_restart = fit.best_restart;
    r.stop_reason = to_string(best.reason);
    r.converged = fit.converged;
    r.noise_variance = model.noise_variance() * st.y_std * st.y_std;
    for (const auto& rr : fit.restarts) r.failed_restarts += rr.ok ? 0 : 1;

    const PosteriorPrediction post = posterior(model, train, st.apply_x(test_raw.X), c.model.interval);
    Predictions p;
    p.X = test_raw.X;
    p.truth = test_raw.y;
    p.mean = st.inverse_y(post.mean);
    p.lower = st.inverse_y(post.lower);
    p.upper = st.inverse_y(post.upper);
    p.variance = post.variance * (st.y_std * st.y_std);
    r.metrics = evaluate(p.mean, p.lower, p.upper, p.truth);
    r.ok = true;
    if (keep_predictions) out.predictions = std::move(p);
    out.model = std::move(model);
  } catch (const std::exception& e) {
    r.ok = false;
    r.error = e.what();
  }
  r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

// ---------------------------------------------------------------- output

/// Exclusive advisory lock on <dir>/.seekgp.lock for the lifetime of the object.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) {
    fs::create_directories(dir);
    path_ = dir / ".seekgp.lock";
    fd_ = ::open(path_.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw std::runtime_error("cannot create lock file '" + path_.string() + "'");
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      fd_ = -1;
      throw std::runtime_error("output directory '" + dir.string() + "' is locked by another run");
    }
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;
  ~RunLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }

 private:
  fs::path path_;
  int fd_ = -1;
};

inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline std::ofstream open_output(const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  return out;
}

inline const char* kMetricsHeader = "rep,seed,nrmse,nnois,coverage,final_nll,epochs,wall_ms";

inline std::string metrics_row(const RunRecord& r) {
  char wall[32];
  std::snprintf(wall, sizeof wall, "%.3f", r.wall_ms);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  return std::to_string(r.rep) + "," + std::to_string(r.seed) + "," + fmt(r.ok ? r.metrics.nrmse : nan) + "," +
         fmt(r.ok ? r.metrics.nnois : nan) + "," + fmt(r.ok ? r.metrics.coverage : nan) + "," +
         fmt(r.ok ? r.final_nll : nan) + "," + std::to_string(r.epochs) + "," + wall;
}

inline void write_metrics_csv(const fs::path& path, const std::vector<RunRecord>& records) {
  auto out = open_output(path);
  out << kMetricsHeader << "\n";
  for (const auto& r : records) out << metrics_row(r) << "\n";
}

inline void write_predictions_csv(const fs::path& path, const Predictions& p) {
  auto out = open_output(path);
  for (Index d = 0; d < p.X.cols(); ++d) out << "x" << d << ",";
  out << "truth,mean,lower,upper\n";
  for (Index i = 0; i < p.X.rows(); ++i) {
    for (Index d = 0; d < p.X.cols(); ++d) out << fmt(p.X(i, d)) << ",";
    out << fmt(p.truth[i]) << "," << fmt(p.mean[i]) << "," << fmt(p.lower[i]) << "," << fmt(p.upper[i]) << "\n";
  }
}

inline json quartiles_json(const Quartiles& q) {
  return {{"min", finite_or_null(q.min)}, {"q1", finite_or_null(q.q1)},     {"median", finite_or_null(q.median)},
          {"q3", finite_or_null(q.q3)},   {"max", finite_or_null(q.max)},   {"mean", finite_or_null(q.mean)},
          {"count", q.count}};
}

struct MetricSummary {
  Quartiles nrmse, nnois, coverage, rmse, final_nll, epochs;
};

inline MetricSummary summarize(const std::vector<RunRecord>& records) {
  std::vector<double> a, b, c, d, e, f;
  for (const auto& r : records) {
    if (!r.ok) continue;
    a.push_back(r.metrics.nrmse);
    b.push_back(r.metrics.nnois);
    c.push_back(r.metrics.coverage);
    d.push_back(r.metrics.rmse);
    e.push_back(r.final_nll);
    f.push_back(r.epochs);
  }
  return {quartiles(a), quartiles(b), quartiles(c), quartiles(d), quartiles(e), quartiles(f)};
}

inline json describe_test_set(const ExperimentConfig& c) {
  const TestSpec t = c.test_spec();
  if (t.kind == TestKind::grid) return {{"kind", "grid"}, {"size", t.size}, {"inclusive", true}};
  if (t.kind == TestKind::sobol) return {{"kind", "sobol"}, {"size", t.size}, {"start_index", t.start}};
  return {{"kind", "csv"}, {"path", c.benchmark.csv.test_path.empty() ? "held-out rows" : c.benchmark.csv.test_path}};
}

inline json describe_kernel(const KernelConfig& k) {
  json j{{"family", k.family}};
  if (k.family == "seek") {
    std::vector<std::string> names;
    for (auto b : k.bases) names.push_back(to_string(b));
    j["bases"] = names;
    if (!k.structure.empty()) j["structure"] = k.structure;
    auto widths = [](const std::optional<std::vector<Width>>& w) {
      std::vector<std::string> s;
      if (!w) return std::vector<std::string>{"2P", "2P"};
      for (const auto& x : *w) s.push_back(x.str());
      return s;
    };
    j["weight_hidden"] = widths(k.weight_hidden);
    j["bias_hidden"] = widths(k.bias_hidden);
    j["weight_outputs"] = k.weight_outputs;
    j["bias_outputs"] = k.bias_outputs;
    j["hidden_activation"] = to_string(k.hidden_activation);
    j["activation"] = to_string(k.activation);
    j["shared_weight_net"] = k.shared_weight_net;
  } else {
    j["base"] = to_string(k.base);
  }
  return j;
}

inline json summary_json(const ExperimentConfig& c, const std::vector<RunRecord>& records) {
  const MetricSummary s = summarize(records);
  int ok = 0;
  for (const auto& r : records) ok += r.ok ? 1 : 0;
  json j;
  j["name"] = c.name;
  j["benchmark"] = {{"name", to_string(c.benchmark.name)},
                    {"n_train", c.benchmark.n_train},
                    {"noise_variance", c.benchmark.noise_variance},
                    {"sobol_offset", c.benchmark.sobol_offset}};
  j["test_set"] = describe_test_set(c);
  j["kernel"] = describe_kernel(c.kernel);
  j["interval"] = c.model.interval == IntervalMode::standard_deviation ? "sqrt" : "variance";
  j["standardization"] = "population std of the training set";
  j["repetitions"] = c.repetitions;
  j["succeeded"] = ok;
  j["seed"] = c.seed;
  j["train"] = {{"restarts", c.train.restarts}, {"max_epochs", c.train.max_epochs}, {"patience", c.train.patience},
                {"step_size", c.train.step_size}, {"lbfgs_history", c.train.lbfgs_history},
                {"mode", c.train.mode == StepMode::line_search ? "line_search" : "fixed"}};
  j["metrics"] = {{"nrmse", quartiles_json(s.nrmse)},         {"nnois", quartiles_json(s.nnois)},
                  {"coverage", quartiles_json(s.coverage)},   {"rmse", quartiles_json(s.rmse)},
                  {"final_nll", quartiles_json(s.final_nll)}, {"epochs", quartiles_json(s.epochs)}};
  return j;
}

inline json records_json(const std::vector<RunRecord>& records) {
  json arr = json::array();
  for (const auto& r : records) {
    json j{{"rep", r.rep},
           {"seed", r.seed},
           {"status", r.ok ? "ok" : "failed"},
           {"dataset_hash", r.dataset_hash},
           {"wall_ms", r.wall_ms}};
    if (r.ok) {
      j["nrmse"] = r.metrics.nrmse;
      j["nnois"] = r.metrics.nnois;
      j["coverage"] = r.metrics.coverage;
      j["rmse"] = r.metrics.rmse;
      j["final_nll"] = r.final_nll;
      j["epochs"] = r.epochs;
      j["best_restart"] = r.best_restart;
      j["stop_reason"] = r.stop_reason;
      j["converged"] = r.converged;
      j["failed_restarts"] = r.failed_restarts;
      j["noise_variance"] = finite_or_null(r.noise_variance);
    } else {
      j["error"] = r.error;
    }
    if (!r.warnings.empty()) j["warnings"] = r.warnings;
    arr.push_back(j);
  }
  return arr;
}

struct RunResult {
  std::vector<RunRecord> records;
  fs::path output;
};

/// Runs every repetition and writes metrics.csv, summary.json, records.json
/// and predictions_<rep>.csv under the output directory.
inline RunResult run_config(const ExperimentConfig& c) {
  validate_experiment(c);
  const fs::path dir = c.output;
  RunLock lock(dir);
  RunResult result;
  result.output = dir;
  for (int rep = 0; rep < c.repetitions; ++rep) {
    RepetitionOutcome o = run_repetition(c, rep, c.write_predictions);
    if (o.predictions) write_predictions_csv(dir / ("predictions_" + std::to_string(rep) + ".csv"), *o.predictions);
    result.records.push_back(std::move(o.record));
  }
  write_metrics_csv(dir / "metrics.csv", result.records);
  open_output(dir / "summary.json") << summary_json(c, result.records).dump(2) << "\n";
  open_output(dir / "records.json") << records_json(result.records).dump(2) << "\n";
  return result;
}

// ---------------------------------------------------------------- sweep

inline const std::vector<std::string>& sweep_axes() {
  static const std::vector<std::string> a{"n_train", "structure", "activation", "hidden_width", "hidden_activation"};
  return a;
}

struct SweepVariant {
  std::string tag;
  ExperimentConfig config;
};

struct SweepConfig {
  std::string axis;
  std::vector<SweepVariant> variants;
  std::string output = "out";
};

inline std::string value_tag(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

inline ExperimentConfig apply_axis(ExperimentConfig c, const std::string& axis, const json& v) {
  const std::string where = "sweep.axis.values (" + v.dump() + ")";
  if (axis == "n_train") {
    if (!v.is_number_integer() || v.get<long long>() < 1) throw ConfigError(where + ": n_train values must be positive integers");
    c.benchmark.n_train = v.get<Index>();
  } else if (axis == "structure") {
    if (!v.is_string()) throw ConfigError(where + ": structure values must be codes like G-4");
    if (c.kernel.family != "seek") throw ConfigError("sweep: the structure axis needs a seek kernel");
    c.kernel.structure = v.get<std::string>();
    c.kernel.bases = parse_structure(c.kernel.structure);
  } else if (axis == "activation") {
    if (!v.is_string()) throw ConfigError(where + ": activation values must be strings");
    c.kernel.activation = detail::parse_activation(v.get<std::string>(), where);
  } else if (axis == "hidden_width") {
    const Width w = detail::parse_width(v, where);
    const std::vector<Width> two{w, w};
    if (c.kernel.family == "seek") {
      c.kernel.weight_hidden = two;
      c.kernel.bias_hidden = two;
    } else {
      c.kernel.hidden = two;
    }
  } else if (axis == "hidden_activation") {
    if (!v.is_string()) throw ConfigError(where + ": hidden_activation values must be strings");
    c.kernel.hidden_activation = detail::parse_hidden_activation(v.get<std::string>(), where);
  } else {
    throw ConfigError("sweep.axis.name: unknown axis '" + axis + "' (valid: " + detail::join(sweep_axes()) + ")");
  }
  return c;
}

inline json load_base(const json& j, const fs::path& base_dir, const std::string& where) {
  if (!j.contains("base")) throw ConfigError(where + ": missing required 'base' experiment config");
  if (j["base"].is_string()) return read_json_file(base_dir / j["base"].get<std::string>());
  return j["base"];
}

inline SweepConfig parse_sweep(const json& j, const fs::path& base_dir = ".", const Overrides& o = {}) {
  detail::check_keys(j, "sweep", {"base", "axis", "output", "name"});
  ExperimentConfig base = parse_experiment(load_base(j, base_dir, "sweep"));
  resolve_paths(base, base_dir);
  apply_overrides(base, o);
  SweepConfig s;
  s.output = o.output.value_or(detail::get<std::string>(j, "output", "sweep", base.output));
  if (!j.contains("axis")) throw ConfigError("sweep: missing required 'axis'");
  const json& a = j["axis"];
  detail::check_keys(a, "sweep.axis", {"name", "values"});
  s.axis = detail::get<std::string>(a, "name", "sweep.axis", "");
  const auto& axes = sweep_axes();
  if (std::find(axes.begin(), axes.end(), s.axis) == axes.end())
    throw ConfigError("sweep.axis.name: unknown axis '" + s.axis + "' (valid: " + detail::join(axes) + ")");
  if (!a.contains("values") || !a["values"].is_array() || a["values"].empty())
    throw ConfigError("sweep.axis.values: the axis needs at least one value");
  std::set<std::string> seen;
  for (const auto& v : a["values"]) {
    SweepVariant var{value_tag(v), apply_axis(base, s.axis, v)};
    if (!seen.insert(var.tag).second) throw ConfigError("sweep.axis.values: duplicate value '" + var.tag + "'");
    var.config.output = (fs::path(s.output) / (s.axis + "=" + var.tag)).string();
    s.variants.push_back(std::move(var));
  }
  for (const auto& v : s.variants) {
    try {
      validate_experiment(v.config);
    } catch (const ConfigError& e) {
      throw ConfigError("sweep value '" + v.tag + "': " + e.what());
    }
  }
  return s;
}

inline void write_group_table(const fs::path& path, const std::string& key,
                              const std::vector<std::pair<std::string, std::vector<RunRecord>>>& groups) {
  auto out = open_output(path);
  out << key << ",n_ok";
  for (const char* m : {"nrmse", "nnois", "coverage"})
    for (const char* s : {"min", "q1", "median", "q3", "max", "mean"}) out << "," << m << "_" << s;
  out << "\n";
  for (const auto& [tag, recs] : groups) {
    const MetricSummary s = summarize(recs);
    out << tag << "," << s.nrmse.count;
    for (const Quartiles* q : {&s.nrmse, &s.nnois, &s.coverage})
      for (double v : {q->min, q->q1, q->median, q->q3, q->max, q->mean}) out << "," << fmt(v);
    out << "\n";
  }
}

struct SweepResult {
  std::vector<std::pair<std::string, std::vector<RunRecord>>> groups;
};

/// One run per axis value, then sweep.csv with quartiles keyed by value.
inline SweepResult run_sweep(const SweepConfig& s) {
  if (s.variants.empty()) throw ConfigError("sweep: the axis needs at least one value");
  fs::create_directories(s.output);
  RunLock lock(s.output);
  SweepResult res;
  for (const auto& v : s.variants) res.groups.emplace_back(v.tag, run_config(v.config).records);
  write_group_table(fs::path(s.output) / "sweep.csv", s.axis, res.groups);
  return res;
}

// ---------------------------------------------------------------- compare

struct CompareConfig {
  std::vector<std::pair<std::string, ExperimentConfig>> runs;
  std::string output = "out";
};

inline std::string benchmark_signature(const ExperimentConfig& c) {
  const TestSpec t = c.test_spec();
  return to_string(c.benchmark.name) + "|" + std::to_string(c.benchmark.n_train) + "|" + fmt(c.benchmark.noise_variance) +
         "|" + (c.benchmark.sobol_offset ? "1" : "0") + "|" + c.benchmark.csv.path + "|" + c.benchmark.csv.target + "|" +
         detail::join(c.benchmark.csv.features) + "|" + c.benchmark.csv.test_path + "|" +
         std::to_string(static_cast<int>(t.kind)) + "|" + std::to_string(t.size) + "|" + std::to_string(t.start);
}

inline void check_compare_consistency(const CompareConfig& cc) {
  if (cc.runs.empty()) throw ConfigError("compare: at least one kernel is required");
  const ExperimentConfig& first = cc.runs.front().second;
  std::set<std::string> labels;
  for (const auto& [label, c] : cc.runs) {
    if (!labels.insert(label).second) throw ConfigError("compare: duplicate label '" + label + "'");
    if (benchmark_signature(c) != benchmark_signature(first))
      throw ConfigError("compare: benchmark/test settings of '" + label + "' differ from '" + cc.runs.front().first + "'");
    if (c.repetitions != first.repetitions)
      throw ConfigError("compare: repetitions of '" + label + "' differ from '" + cc.runs.front().first + "'");
    if (c.seed != first.seed) throw ConfigError("compare: seed of '" + label + "' differs from '" + cc.runs.front().first + "'");
  }
}

/// Either {"base": cfg, "kernels": [kernel objects with "label"]} or
/// {"runs": [{"label": .., "config": cfg}, ...]}.
inline CompareConfig parse_compare(const json& j, const fs::path& base_dir = ".", const Overrides& o = {}) {
  detail::check_keys(j, "compare", {"base", "kernels", "runs", "output", "name"});
  CompareConfig cc;
  if (j.contains("runs") == j.contains("kernels")) throw ConfigError("compare: give exactly one of 'kernels' or 'runs'");
  std::string default_out = "out";
  if (j.contains("kernels")) {
    const json base_json = load_base(j, base_dir, "compare");
    ExperimentConfig base = parse_experiment(base_json);
    default_out = base.output;
    if (!j["kernels"].is_array()) throw ConfigError("compare.kernels: expected a list of kernel configs");
    for (std::size_t i = 0; i < j["kernels"].size(); ++i) {
      const json& kj = j["kernels"][i];
      const std::string where = "compare.kernels[" + std::to_string(i) + "]";
      ExperimentConfig c = base;
      c.kernel = parse_kernel_config(kj, where);
      const std::string label = kj.is_object() && kj.contains("label") ? detail::get<std::string>(kj, "label", where, "")
                                                                         : c.kernel.family;
      cc.runs.emplace_back(label, std::move(c));
    }
  } else {
    if (!j["runs"].is_array()) throw ConfigError("compare.runs: expected a list");
    for (std::size_t i = 0; i < j["runs"].size(); ++i) {
      const json& rj = j["runs"][i];
      const std::string where = "compare.runs[" + std::to_string(i) + "]";
      detail::check_keys(rj, where, {"label", "config"});
      if (!rj.contains("config")) throw ConfigError(where + ": missing 'config'");
      const json cfg = rj["config"].is_string() ? read_json_file(base_dir / rj["config"].get<std::string>()) : rj["config"];
      ExperimentConfig c = parse_experiment(cfg);
      if (i == 0) default_out = c.output;
      cc.runs.emplace_back(detail::get<std::string>(rj, "label", where, c.kernel.family), std::move(c));
    }
  }
  cc.output = o.output.value_or(detail::get<std::string>(j, "output", "compare", default_out));
  for (auto& [label, c] : cc.runs) {
    resolve_paths(c, base_dir);
    apply_overrides(c, o);
    c.output = (fs::path(cc.output) / label).string();
  }
  check_compare_consistency(cc);
  for (const auto& [label, c] : cc.runs) {
    try {
      validate_experiment(c);
    } catch (const ConfigError& e) {
      throw ConfigError("compare kernel '" + label + "': " + e.what());
    }
  }
  return cc;
}

struct CompareResult {
  std::vector<std::pair<std::string, std::vector<RunRecord>>> groups;
};

/// Runs each kernel on the same per-repetition datasets and writes
/// compare.csv (one row per kernel and repetition) plus compare_summary.csv.
inline CompareResult run_compare(const CompareConfig& cc) {
  check_compare_consistency(cc);
  fs::create_directories(cc.output);
  RunLock lock(cc.output);
  CompareResult res;
  for (const auto& [label, c] : cc.runs) res.groups.emplace_back(label, run_config(c).records);
  const auto& ref = res.groups.front().second;
  for (const auto& [label, recs] : res.groups) {
    for (std::size_t r = 0; r < recs.size(); ++r) {
      if (recs[r].dataset_hash != 0 && ref[r].dataset_hash != 0 && recs[r].dataset_hash != ref[r].dataset_hash)
        throw NumericalError("compare: repetition " + std::to_string(r) + " saw a different dataset for '" + label + "'");
    }
  }
  auto out = open_output(fs::path(cc.output) / "compare.csv");
  out << "kernel,dataset_hash," << kMetricsHeader << "\n";
  for (const auto& [label, recs] : res.groups) {
    for (const auto& r : recs) {
      char hash[24];
      std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(r.dataset_hash));
      out << label << "," << hash << "," << metrics_row(r) << "\n";
    }
  }
  write_group_table(fs::path(cc.output) / "compare_summary.csv", "kernel", res.groups);
  return res;
}

// ---------------------------------------------------------------- gradcheck

struct GradcheckOutcome {
  int rep = 0;
  FdReport report;
  std::string worst_group;
  Index num_params = 0;
};

/// Finite-difference check of the loss gradient at a randomized model on each
/// repetition's standardized training set.
inline std::vector<GradcheckOutcome> run_gradcheck(const ExperimentConfig& c, double h = 1e-5) {
  validate_experiment(c);
  std::vector<GradcheckOutcome> out;
  for (int rep = 0; rep < c.repetitions; ++rep) {
    auto [train_raw, test_raw] = repetition_data(c, rep);
    const Standardizer st = fit_standardizer(train_raw);
    const Dataset train = standardize(train_raw, st);
    GpModel model = build_model(c, train.dim(), st.y_std);
    model.randomize(mix_seed(repetition_seed(c, rep)) + c.train.seed);
    GradcheckOutcome g;
    g.rep = rep;
    g.num_params = model.num_params();
    g.report = fd_check(make_objective(model, train), model.params(), h);
    if (g.report.worst_index) g.worst_group = model.layout().owner(*g.report.worst_index);
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace seekgp
