#pragma once

#include "core.hpp"
#include "gp.hpp"
#include "neural.hpp"

#include <atomic>
#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace seekgp {

enum class StepMode { line_search, fixed };

enum class StopReason { max_epochs, patience, gradient_tolerance, line_search_failure, numerical_error };

inline std::string to_string(StopReason r) {
  switch (r) {
    case StopReason::max_epochs: return "max_epochs";
    case StopReason::patience: return "patience";
    case StopReason::gradient_tolerance: return "gradient_tolerance";
    case StopReason::line_search_failure: return "line_search_failure";
    case StopReason::numerical_error: return "numerical_error";
  }
  return "?";
}

struct TrainConfig {
  int restarts = 80;
  int max_epochs = 2000;
  int patience = 20;
  double step_size = 0.01;
  int lbfgs_history = 10;
  std::uint64_t seed = 0;
  StepMode mode = StepMode::line_search;
  double grad_tol = 1e-8;
  double improvement_tol = 1e-9;
  int max_backtracks = 30;
  int threads = 1;

  void validate() const {
    require(restarts > 0, "TrainConfig: restarts must be positive");
    require(max_epochs > 0, "TrainConfig: max_epochs must be positive");
    require(patience > 0, "TrainConfig: patience must be positive");
    require(patience < max_epochs, "TrainConfig: patience must be smaller than max_epochs");
    require(step_size > 0 && std::isfinite(step_size), "TrainConfig: step_size must be positive");
    require(lbfgs_history > 0, "TrainConfig: lbfgs_history must be positive");
    require(grad_tol >= 0 && improvement_tol >= 0, "TrainConfig: tolerances must be non-negative");
    require(threads > 0, "TrainConfig: threads must be positive");
  }
};

/// Returns the loss at x; fills *grad when grad is non-null.
using Objective = std::function<double(const Vector& x, Vector* grad)>;

struct MinimizeResult {
  Vector x;  // best point seen
  double loss = 0.0;
  int epochs = 0;
  StopReason reason = StopReason::max_epochs;
  std::vector<double> trace;  // best-so-far loss, entry 0 is the initial loss
};

namespace detail {

class LbfgsMemory {
 public:
  explicit LbfgsMemory(int capacity) : capacity_(capacity) {}

  void clear() { pairs_.clear(); }
  bool empty() const { return pairs_.empty(); }

  void push(Vector s, Vector y) {
    const double sy = s.dot(y);
    if (!(sy > 1e-12 * s.norm() * y.norm()) || !std::isfinite(sy)) return;
    if (static_cast<int>(pairs_.size()) == capacity_) pairs_.pop_front();
    pairs_.push_back({std::move(s), std::move(y), 1.0 / sy});
  }

  /// -H g by the two-loop recursion.
  Vector direction(const Vector& g) const {
    Vector q = g;
    std::vector<double> a(pairs_.size());
    for (std::size_t k = pairs_.size(); k-- > 0;) {
      a[k] = pairs_[k].rho * pairs_[k].s.dot(q);
      q -= a[k] * pairs_[k].y;
    }
    if (!pairs_.empty()) {
      const auto& last = pairs_.back();
      q *= last.s.dot(last.y) / last.y.squaredNorm();
    }
    for (std::size_t k = 0; k < pairs_.size(); ++k) {
      const double b = pairs_[k].rho * pairs_[k].y.dot(q);
      q += (a[k] - b) * pairs_[k].s;
    }
    return -q;
  }

 private:
  struct Pair {
    Vector s, y;
    double rho;
  };
  int capacity_;
  std::deque<Pair> pairs_;
};

inline double safe_loss(const Objective& f, const Vector& x) {
  try {
    const double v = f(x, nullptr);
    return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
  } catch (const std::exception&) {
    return std::numeric_limits<double>::infinity();
  }
}

}  // namespace detail

/// L-BFGS with Armijo backtracking (or fixed steps) and early stopping.
/// In line-search mode the first trial step is step_size; a trial that passes
/// without backtracking is doubled (up to 1) while the loss keeps dropping, and
/// the next epoch starts from the accepted step.
inline MinimizeResult lbfgs_minimize(const Objective& f, Vector x, const TrainConfig& cfg) {
  cfg.validate();
  constexpr double c1 = 1e-4;
  Vector g(x.size());
  double fx = f(x, &g);
  if (!std::isfinite(fx) || !g.allFinite()) throw NumericalError("lbfgs: non-finite loss or gradient at the initial point");

  MinimizeResult out;
  out.x = x;
  out.loss = fx;
  out.trace.push_back(fx);
  detail::LbfgsMemory memory(cfg.lbfgs_history);
  double t_prev = cfg.step_size;
  bool reset_used = false;
  int stale = 0;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    if (g.lpNorm<Eigen::Infinity>() < cfg.grad_tol) {
      out.reason = StopReason::gradient_tolerance;
      return out;
    }
    Vector d;
    if (!memory.empty()) {
      d = memory.direction(g);
      if (!(g.dot(d) < 0) || !d.allFinite()) memory.clear();
    }
    // Without curvature pairs, steepest descent scaled to unit l1 length keeps
    // a huge initial gradient from throwing the first step far.
    if (memory.empty()) d = -g / std::max(1.0, g.lpNorm<1>());
    const double slope = g.dot(d);

    Vector x_new;
    double f_new = 0.0;
    Vector g_new(x.size());

    if (cfg.mode == StepMode::fixed) {
      x_new = x + cfg.step_size * d;
      try {
        f_new = f(x_new, &g_new);
      } catch (const std::exception&) {
        f_new = std::numeric_limits<double>::quiet_NaN();
      }
      if (!std::isfinite(f_new) || !g_new.allFinite()) {
        out.epochs = epoch;
        out.reason = StopReason::numerical_error;
        return out;
      }
    } else {
      // The first trial carries a gradient so an immediately accepted step
      // needs no second evaluation.
      double t = std::min(t_prev, 1.0);
      double ft;
      bool have_grad = true;
      try {
        ft = f(x + t * d, &g_new);
        if (!std::isfinite(ft) || !g_new.allFinite()) ft = std::numeric_limits<double>::infinity();
      } catch (const std::exception&) {
        ft = std::numeric_limits<double>::infinity();
      }
      int backtracks = 0;
      while (!(ft <= fx + c1 * t * slope) && backtracks < cfg.max_backtracks) {
        t *= 0.5;
        ft = detail::safe_loss(f, x + t * d);
        have_grad = false;
        ++backtracks;
      }
      if (!(ft <= fx + c1 * t * slope)) {
        if (!reset_used && !memory.empty()) {
          memory.clear();
          reset_used = true;
          --epoch;
          continue;
        }
        out.epochs = epoch;
        out.reason = StopReason::line_search_failure;
        return out;
      }
      if (backtracks == 0) {
        while (t < 1.0) {
          const double t2 = std::min(2.0 * t, 1.0);
          const double f2 = detail::safe_loss(f, x + t2 * d);
          if (!(f2 < ft && f2 <= fx + c1 * t2 * slope)) break;
          t = t2;
          ft = f2;
          have_grad = false;
        }
      }
      reset_used = false;
      t_prev = t;
      x_new = x + t * d;
      f_new = ft;
      if (!have_grad) {
        try {
          f_new = f(x_new, &g_new);
        } catch (const std::exception&) {
          f_new = std::numeric_limits<double>::quiet_NaN();
        }
      }
      if (!std::isfinite(f_new) || !g_new.allFinite()) {
        out.epochs = epoch;
        out.reason = StopReason::numerical_error;
        return out;
      }
    }

    memory.push(x_new - x, g_new - g);
    x = std::move(x_new);
    g = std::move(g_new);
    fx = f_new;
    out.epochs = epoch;

    if (fx < out.loss - cfg.improvement_tol) {
      out.loss = fx;
      out.x = x;
      stale = 0;
    } else {
      if (fx < out.loss) {
        out.loss = fx;
        out.x = x;
      }
      ++stale;
    }
    out.trace.push_back(out.loss);
    if (stale >= cfg.patience) {
      out.reason = StopReason::patience;
      return out;
    }
  }
  out.reason = StopReason::max_epochs;
  return out;
}

/// Gradient of the loss over GpModel::params(); a non-finite entry is
/// reported with the name of its parameter group.
inline Vector gradient(const GpModel& model, const Dataset& data) {
  LossAndGradient lg = nll_and_gradient(model, data);
  for (Index i = 0; i < lg.gradient.size(); ++i) {
    if (!std::isfinite(lg.gradient[i])) {
      throw NumericalError("gradient: non-finite entry " + std::to_string(i) + " in parameter group '" +
                           model.layout().owner(i) + "'");
    }
  }
  return lg.gradient;
}

/// Objective over GpModel::params() for a private copy of `model`.
inline Objective make_objective(const GpModel& model, const Dataset& data) {
  auto work = std::make_shared<GpModel>(model);
  return [work, &data](const Vector& x, Vector* grad) {
    work->set_params(x);
    if (!grad) return nll(*work, data);
    LossAndGradient lg = nll_and_gradient(*work, data);
    *grad = std::move(lg.gradient);
    return lg.loss;
  };
}

struct FdReport {
  double max_relative_error = 0.0;
  std::optional<Index> worst_index;
  std::vector<double> errors;  // per probed index
};

/// Central differences with step h * max(1, |x_i|); relative error against
/// the analytic gradient uses the max(1, |analytic|) denominator.
inline FdReport fd_check(const Objective& f, const Vector& x, double h = 1e-5, std::vector<Index> indices = {},
                         bool all_indices = true) {
  if (indices.empty() && all_indices) {
    for (Index i = 0; i < x.size(); ++i) indices.push_back(i);
  }
  FdReport report;
  if (indices.empty()) return report;
  Vector analytic(x.size());
  f(x, &analytic);
  for (Index i : indices) {
    require(i >= 0 && i < x.size(), "fd_check: index out of range");
    const double step = h * std::max(1.0, std::abs(x[i]));
    Vector xp = x, xm = x;
    xp[i] += step;
    xm[i] -= step;
    const double fd = (f(xp, nullptr) - f(xm, nullptr)) / (2.0 * step);
    const double err = std::abs(fd - analytic[i]) / std::max(1.0, std::abs(analytic[i]));
    report.errors.push_back(err);
    if (!report.worst_index || err > report.max_relative_error) {
      report.max_relative_error = err;
      report.worst_index = i;
    }
  }
  return report;
}

struct FitTrace {
  Vector params;
  double loss = 0.0;
  int epochs = 0;
  StopReason reason = StopReason::max_epochs;
  std::vector<double> trace;
};

/// One L-BFGS run from `initial`; leaves the model at the best parameters.
inline FitTrace lbfgs_fit(GpModel& model, const Dataset& data, const TrainConfig& cfg, const Vector& initial) {
  require(initial.size() == model.num_params(), "lbfgs_fit: initial parameter vector has wrong length");
  MinimizeResult r = lbfgs_minimize(make_objective(model, data), initial, cfg);
  model.set_params(r.x);
  return {std::move(r.x), r.loss, r.epochs, r.reason, std::move(r.trace)};
}

struct RestartRecord {
  int index = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  double final_loss = std::numeric_limits<double>::infinity();
  int epochs = 0;
  StopReason reason = StopReason::numerical_error;
  std::string error;
  std::vector<double> trace;
};

struct FitResult {
  ParamVector best_params;
  double best_loss = std::numeric_limits<double>::infinity();
  int best_restart = -1;
  std::vector<RestartRecord> restarts;
  bool converged = false;
};

/// Sets the starting point of restart `seed`.
using Initializer = std::function<void(GpModel&, std::uint64_t seed)>;

inline void default_initializer(GpModel& model, std::uint64_t seed) { model.randomize(seed); }

/// Independent fits seeded seed+0 .. seed+restarts-1; the lowest final loss
/// wins, ties going to the lowest index. Leaves `model` at the winner.
inline FitResult multi_restart_fit(GpModel& model, const Dataset& data, const TrainConfig& cfg,
                                   const Initializer& init = default_initializer) {
  cfg.validate();
  std::vector<RestartRecord> records(static_cast<std::size_t>(cfg.restarts));
  std::vector<Vector> params(records.size());

  auto work = [&](int r) {
    RestartRecord& rec = records[static_cast<std::size_t>(r)];
    rec.index = r;
    rec.seed = cfg.seed + static_cast<std::uint64_t>(r);
    try {
      GpModel clone = model;
      init(clone, rec.seed);
      FitTrace t = lbfgs_fit(clone, data, cfg, clone.params());
      rec.ok = true;
      rec.final_loss = t.loss;
      rec.epochs = t.epochs;
      rec.reason = t.reason;
      rec.trace = std::move(t.trace);
      params[static_cast<std::size_t>(r)] = std::move(t.params);
    } catch (const std::exception& e) {
      rec.ok = false;
      rec.error = e.what();
    }
  };

  const int threads = std::min(cfg.threads, cfg.restarts);
  if (threads <= 1) {
    for (int r = 0; r < cfg.restarts; ++r) work(r);
  } else {
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w) {
      pool.emplace_back([&] {
        for (int r = next++; r < cfg.restarts; r = next++) work(r);
      });
    }
    for (auto& th : pool) th.join();
  }

  FitResult out;
  for (const auto& rec : records) {
    if (rec.ok && rec.final_loss < out.best_loss) {
      out.best_loss = rec.final_loss;
      out.best_restart = rec.index;
    }
  }
  if (out.best_restart < 0) {
    std::string msg = "multi_restart_fit: all " + std::to_string(cfg.restarts) + " restarts failed:";
    for (const auto& rec : records) msg += " [" + std::to_string(rec.index) + "] " + rec.error + ";";
    throw NumericalError(msg);
  }
  const auto& best = records[static_cast<std::size_t>(out.best_restart)];
  model.set_params(params[static_cast<std::size_t>(out.best_restart)]);
  out.best_params = {params[static_cast<std::size_t>(out.best_restart)], model.layout()};
  out.converged = best.reason != StopReason::max_epochs && best.reason != StopReason::numerical_error;
  out.restarts = std::move(records);
  return out;
}

}  // namespace seekgp
