#include <seekgp/seekgp.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

using namespace seekgp;

namespace {

enum class ConfigType { experiment, sweep, compare };

ConfigType detect(const json& j) {
  if (j.is_object() && j.contains("axis")) return ConfigType::sweep;
  if (j.is_object() && (j.contains("kernels") || j.contains("runs"))) return ConfigType::compare;
  return ConfigType::experiment;
}

void emit(const json& j) { std::cout << j.dump() << std::endl; }

json brief(const std::vector<RunRecord>& records) {
  const MetricSummary s = summarize(records);
  return {{"succeeded", s.nrmse.count},
          {"repetitions", records.size()},
          {"median_nrmse", finite_or_null(s.nrmse.median)},
          {"median_nnois", finite_or_null(s.nnois.median)}};
}

struct Args {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> reps;
  std::optional<std::string> out;
  double h = 1e-5;
  double tolerance = 1e-4;

  Overrides overrides() const { return {seed, reps, out}; }
};

ExperimentConfig experiment_from(const Args& a) {
  ExperimentConfig c = load_experiment(a.config);
  apply_overrides(c, a.overrides());
  return c;
}

int cmd_run(const Args& a) {
  const ExperimentConfig c = experiment_from(a);
  const RunResult r = run_config(c);
  json j = brief(r.records);
  j["status"] = "ok";
  j["output"] = r.output.string();
  emit(j);
  return 0;
}

int cmd_sweep(const Args& a) {
  const json j = read_json_file(a.config);
  const SweepConfig s = parse_sweep(j, fs::path(a.config).parent_path(), a.overrides());
  const SweepResult r = run_sweep(s);
  json groups = json::object();
  for (const auto& [tag, recs] : r.groups) groups[tag] = brief(recs);
  emit({{"status", "ok"}, {"output", s.output}, {"axis", s.axis}, {"values", groups}});
  return 0;
}

int cmd_compare(const Args& a) {
  const json j = read_json_file(a.config);
  const CompareConfig cc = parse_compare(j, fs::path(a.config).parent_path(), a.overrides());
  const CompareResult r = run_compare(cc);
  json groups = json::object();
  for (const auto& [label, recs] : r.groups) groups[label] = brief(recs);
  emit({{"status", "ok"}, {"output", cc.output}, {"kernels", groups}});
  return 0;
}

int cmd_validate(const Args& a) {
  const json j = read_json_file(a.config);
  const fs::path dir = fs::path(a.config).parent_path();
  switch (detect(j)) {
    case ConfigType::sweep: {
      const SweepConfig s = parse_sweep(j, dir, a.overrides());
      emit({{"status", "ok"}, {"type", "sweep"}, {"runs", s.variants.size()}});
      break;
    }
    case ConfigType::compare: {
      const CompareConfig cc = parse_compare(j, dir, a.overrides());
      emit({{"status", "ok"}, {"type", "compare"}, {"runs", cc.runs.size()}});
      break;
    }
    case ConfigType::experiment: {
      ExperimentConfig c = parse_experiment(j);
      resolve_paths(c, dir);
      apply_overrides(c, a.overrides());
      validate_experiment(c);
      emit({{"status", "ok"}, {"type", "experiment"}, {"kernel", describe_kernel(c.kernel)}});
      break;
    }
  }
  return 0;
}

int cmd_gradcheck(const Args& a) {
  const ExperimentConfig c = experiment_from(a);
  double worst = 0.0;
  for (const auto& g : run_gradcheck(c, a.h)) {
    worst = std::max(worst, g.report.max_relative_error);
    emit({{"rep", g.rep},
          {"num_params", g.num_params},
          {"max_relative_error", g.report.max_relative_error},
          {"worst_parameter", g.worst_group}});
  }
  const bool ok = worst <= a.tolerance;
  emit({{"status", ok ? "ok" : "failed"}, {"max_relative_error", worst}, {"tolerance", a.tolerance}});
  return ok ? 0 : 5;
}

void fail(const char* kind, const std::string& message) {
  std::cerr << json{{"error", message}, {"kind", kind}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SEEK Gaussian process regression experiments"};
  app.require_subcommand(1);
  Args args;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("config", args.config, "JSON config file")->required();
    sub->add_option("--seed", args.seed, "master seed");
    sub->add_option("--reps", args.reps, "number of repetitions")->check(CLI::PositiveNumber);
    sub->add_option("--out", args.out, "output directory");
  };
  auto* run = app.add_subcommand("run", "train and evaluate over repetitions");
  auto* sweep = app.add_subcommand("sweep", "run a base config across one axis of values");
  auto* compare = app.add_subcommand("compare", "run several kernels on identical data");
  auto* validate = app.add_subcommand("validate", "parse and check a config without training");
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the loss gradient");
  for (auto* s : {run, sweep, compare, validate, gradcheck}) add_common(s);
  gradcheck->add_option("--step", args.h, "relative finite-difference step");
  gradcheck->add_option("--tolerance", args.tolerance, "maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail("usage", e.what());
    return 2;
  }

  try {
    if (*run) return cmd_run(args);
    if (*sweep) return cmd_sweep(args);
    if (*compare) return cmd_compare(args);
    if (*validate) return cmd_validate(args);
    if (*gradcheck) return cmd_gradcheck(args);
  } catch (const ConfigError& e) {
    fail("config", e.what());
    return 2;
  } catch (const IngestError& e) {
    fail("ingest", e.what());
    return 3;
  } catch (const NumericalError& e) {
    fail("numerical", e.what());
    return 4;
  } catch (const std::exception& e) {
    fail("runtime", e.what());
    return 1;
  }
  return 1;
}
