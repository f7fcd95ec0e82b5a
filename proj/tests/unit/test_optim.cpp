#include "helpers.hpp"

#include <gtest/gtest.h>

using namespace seekgp;
using namespace testutil;

namespace {

Dataset toy_data(Index n, Index P, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.X = random_points(rng, n, P);
  d.y.resize(n);
  for (Index i = 0; i < n; ++i) d.y[i] = std::sin(2 * d.X(i, 0)) + (P > 1 ? 0.5 * d.X(i, 1) : 0.0) + 0.05 * uniform(rng, -1, 1);
  return d;
}

Kernel family_kernel(int family, Index P, std::uint64_t seed) {
  switch (family) {
    case 0: return make_seek(P, SeekOptions{}, seed);
    case 1: {
      SeekOptions o;
      o.bases = {BaseKind::gaussian, BaseKind::periodic, BaseKind::matern52};
      o.activation = static_cast<SeekActivation>(seed % 4);
      return make_seek(P, o, seed);
    }
    case 2: return make_gibbs(P, {}, seed);
    case 3: return make_deep(P, BaseKind::matern32, {}, seed);
    default: {
      const KernelExpr a(BaseKernel(BaseKind::gaussian, Vector::Zero(P)));
      const KernelExpr b(BaseKernel(BaseKind::power_exponential, Vector::Zero(P)));
      KernelExpr e = KernelExpr::sum(Coefficient::learned(0.7), a, Coefficient::learned(1.3), KernelExpr::product(a, b));
      Rng rng(seed);
      e.randomize(rng);
      return e;
    }
  }
}

TrainConfig quick_config(int restarts = 2, int epochs = 60) {
  TrainConfig c;
  c.restarts = restarts;
  c.max_epochs = epochs;
  c.patience = 10;
  return c;
}

}  // namespace

TEST(Gradient, SingleTargetNoiseDerivativeVanishesAtZero) {
  // L(s) = 1/2 log(1+s) + 1/(2(1+s)) with s = lambda^2, so dL/ds = 1/2/(1+s) - 1/(2(1+s)^2).
  GpModel m(KernelExpr(BaseKernel(BaseKind::gaussian, vec({0.0}))));
  m.jitter.initial = 1e-300;
  Dataset d;
  d.X = points({{0.0}});
  d.y = vec({1.0});
  for (double s : {1e-12, 0.5, 2.0}) {
    m.log_noise = std::log(s);
    const Vector g = gradient(m, d);
    const double dLds = 0.5 / (1 + s) - 0.5 / ((1 + s) * (1 + s));
    EXPECT_NEAR(g[g.size() - 1], dLds * s, 1e-12) << s;
  }
  m.log_noise = std::log(1e-12);
  EXPECT_NEAR(gradient(m, d)[1], 0.0, 1e-11);
}

TEST(Gradient, ZeroTargetsOnlyLogDeterminant) {
  Dataset d = toy_data(12, 2, 3);
  d.y.setZero();
  GpModel m(make_seek(2, SeekOptions{}, 4));
  const Vector g = gradient(m, d);
  const Factorization f = factorize(m, d.X, d.y);
  EXPECT_TRUE(f.alpha.isZero());
  auto logdet = [&](const Vector& x, Vector* grad) {
    GpModel w = m;
    w.set_params(x);
    if (grad) *grad = gradient(w, d);
    return 0.5 * factorize(w, d.X, d.y).log_det;
  };
  EXPECT_LE(fd_check(logdet, m.params()).max_relative_error, 1e-4);
}

TEST(Gradient, MatchesFiniteDifferencesAcrossFamilies) {
  for (int family = 0; family < 5; ++family) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const Index P = 1 + static_cast<Index>(seed);
      const Dataset d = toy_data(15, P, seed + 10);
      GpModel m(family_kernel(family, P, seed));
      m.learn_output_scale = family >= 2;
      m.randomize(seed + 100);
      const FdReport r = fd_check(make_objective(m, d), m.params());
      EXPECT_LE(r.max_relative_error, 1e-4) << "family " << family << " seed " << seed << " worst "
                                            << m.layout().owner(*r.worst_index);
    }
  }
}

TEST(Gradient, RandomSubsetOfSeekParameters) {
  const Dataset d = toy_data(20, 3, 1);
  GpModel m(make_seek(3, SeekOptions{}, 9));
  Rng rng(2);
  std::vector<Index> idx;
  for (int k = 0; k < 20; ++k) idx.push_back(static_cast<Index>(rng() % static_cast<std::uint64_t>(m.num_params())));
  const FdReport r = fd_check(make_objective(m, d), m.params(), 1e-5, idx);
  EXPECT_EQ(r.errors.size(), 20u);
  EXPECT_LE(r.max_relative_error, 1e-4);
}

TEST(FdCheck, QuadraticExact) {
  auto f = [](const Vector& x, Vector* g) {
    if (g) *g = x;
    return 0.5 * x.squaredNorm();
  };
  const FdReport r = fd_check(f, vec({0.3, -2.0, 10.0}));
  EXPECT_LE(r.max_relative_error, 1e-9);
}

TEST(FdCheck, EmptyIndexSet) {
  auto f = [](const Vector& x, Vector* g) {
    if (g) *g = x;
    return 0.5 * x.squaredNorm();
  };
  const FdReport r = fd_check(f, vec({1.0, 2.0}), 1e-5, {}, false);
  EXPECT_TRUE(r.errors.empty());
  EXPECT_EQ(r.max_relative_error, 0.0);
  EXPECT_FALSE(r.worst_index.has_value());
}

TEST(FdCheck, CorruptedEntryIdentified) {
  auto f = [](const Vector& x, Vector* g) {
    if (g) {
      *g = x;
      (*g)[2] = -(*g)[2];
    }
    return 0.5 * x.squaredNorm();
  };
  const FdReport r = fd_check(f, vec({1.0, -2.0, 3.0, 0.5}));
  ASSERT_TRUE(r.worst_index.has_value());
  EXPECT_EQ(*r.worst_index, 2);
  EXPECT_GT(r.max_relative_error, 1.0);
}

TEST(Lbfgs, ConvexQuadraticReachesMinimizer) {
  Rng rng(5);
  Matrix B = random_points(rng, 5, 5);
  const Matrix A = B * B.transpose() + Matrix::Identity(5, 5);
  const Vector b = vec({1.0, -2.0, 0.5, 3.0, -1.0});
  const Vector xstar = A.llt().solve(b);
  auto f = [&](const Vector& x, Vector* g) {
    if (g) *g = A * x - b;
    return 0.5 * x.dot(A * x) - b.dot(x);
  };
  TrainConfig c;
  c.max_epochs = 50;
  c.patience = 49;
  c.grad_tol = 1e-10;
  const MinimizeResult r = lbfgs_minimize(f, Vector::Zero(5), c);
  EXPECT_LE((r.x - xstar).cwiseAbs().maxCoeff(), 1e-8) << to_string(r.reason) << " after " << r.epochs;
  EXPECT_LE(r.epochs, 50);
}

TEST(Lbfgs, StationaryStartStopsImmediately) {
  auto f = [](const Vector& x, Vector* g) {
    if (g) *g = x;
    return 0.5 * x.squaredNorm();
  };
  const MinimizeResult r = lbfgs_minimize(f, Vector::Zero(3), TrainConfig{});
  EXPECT_EQ(r.reason, StopReason::gradient_tolerance);
  EXPECT_EQ(r.epochs, 0);
}

TEST(Lbfgs, PatienceStopsExactlyAfterLastImprovement) {
  auto f = [](const Vector& x, Vector* g) {
    const double s = std::sqrt(1 + x[0] * x[0]);
    if (g) *g = vec({x[0] / s});
    return s;
  };
  TrainConfig c;
  c.grad_tol = 0.0;
  c.patience = 20;
  const MinimizeResult r = lbfgs_minimize(f, vec({40.0}), c);
  ASSERT_EQ(r.reason, StopReason::patience);
  int last = 0;
  for (std::size_t e = 1; e < r.trace.size(); ++e)
    if (r.trace[e] < r.trace[e - 1] - c.improvement_tol) last = static_cast<int>(e);
  EXPECT_EQ(r.epochs, last + 20);
}

TEST(Lbfgs, BestSoFarTraceMonotone) {
  const Dataset d = toy_data(20, 2, 4);
  for (StepMode mode : {StepMode::line_search, StepMode::fixed}) {
    GpModel m(make_seek(2, SeekOptions{}, 3));
    TrainConfig c = quick_config(1, 80);
    c.mode = mode;
    const FitTrace t = lbfgs_fit(m, d, c, m.params());
    for (std::size_t e = 1; e < t.trace.size(); ++e) EXPECT_LE(t.trace[e], t.trace[e - 1]);
    EXPECT_EQ(t.loss, t.trace.back());
    EXPECT_NEAR(nll(m, d), t.loss, 1e-9);
  }
}

TEST(Lbfgs, LineSearchFailureIsGraceful) {
  auto f = [](const Vector& x, Vector* g) {
    if (g) *g = vec({1.0});  // gradient inconsistent with the flat loss
    return x[0] * 0.0 + 1.0;
  };
  TrainConfig c;
  c.max_backtracks = 5;
  const MinimizeResult r = lbfgs_minimize(f, vec({0.0}), c);
  EXPECT_EQ(r.reason, StopReason::line_search_failure);
}

TEST(Lbfgs, ConfigValidation) {
  TrainConfig c;
  c.patience = c.max_epochs;
  EXPECT_THROW(c.validate(), ContractError);
  c = TrainConfig{};
  c.restarts = 0;
  EXPECT_THROW(c.validate(), ContractError);
}

TEST(MultiRestart, SingleRestartEqualsPlainFit) {
  const Dataset d = toy_data(15, 1, 6);
  GpModel a(make_seek(1, SeekOptions{}, 0)), b = a;
  TrainConfig c = quick_config(1);
  c.seed = 42;
  const FitResult r = multi_restart_fit(a, d, c);
  b.randomize(42);
  const FitTrace t = lbfgs_fit(b, d, c, b.params());
  EXPECT_EQ(r.best_loss, t.loss);
  EXPECT_EQ(r.best_params.values, t.params);
}

TEST(MultiRestart, OptimumInitializedRestartWins) {
  const Dataset d = toy_data(15, 1, 7);
  GpModel m(KernelExpr(BaseKernel(BaseKind::gaussian, vec({0.0}))));
  m.learn_output_scale = true;
  TrainConfig c = quick_config(1, 400);
  c.patience = 50;
  c.restarts = 8;
  const FitResult best = multi_restart_fit(m, d, c);
  const Vector optimum = best.best_params.values;
  c.restarts = 2;
  c.max_epochs = 2;
  c.patience = 1;
  c.seed = 100;
  auto init = [&](GpModel& g, std::uint64_t seed) {
    if (seed == 101) g.set_params(optimum);
    else g.randomize(seed);
  };
  const FitResult r = multi_restart_fit(m, d, c, init);
  EXPECT_EQ(r.best_restart, 1) << r.restarts[0].final_loss << " vs " << r.restarts[1].final_loss << " opt " << best.best_loss;
  EXPECT_LE(r.best_loss, best.best_loss + 1e-12);
}

TEST(MultiRestart, BestIsMinimumAndDeterministic) {
  const Dataset d = toy_data(15, 2, 8);
  GpModel m(make_seek(2, SeekOptions{}, 0));
  TrainConfig c = quick_config(4);
  c.seed = 7;
  GpModel m2 = m;
  const FitResult a = multi_restart_fit(m, d, c);
  c.threads = 3;
  const FitResult b = multi_restart_fit(m2, d, c);
  for (const auto& rec : a.restarts) EXPECT_LE(a.best_loss, rec.final_loss);
  EXPECT_EQ(a.best_loss, b.best_loss);
  EXPECT_EQ(a.best_restart, b.best_restart);
  EXPECT_EQ(a.best_params.values, b.best_params.values);
  for (std::size_t r = 0; r < a.restarts.size(); ++r) {
    EXPECT_EQ(a.restarts[r].final_loss, b.restarts[r].final_loss);
    EXPECT_EQ(a.restarts[r].seed, 7 + r);
  }
}

TEST(MultiRestart, AllFailuresAggregated) {
  const Dataset d = toy_data(5, 1, 9);
  GpModel m(KernelExpr(BaseKernel(BaseKind::gaussian, vec({0.0}))));
  auto init = [](GpModel&, std::uint64_t seed) { throw NumericalError("boom " + std::to_string(seed)); };
  TrainConfig c = quick_config(3);
  try {
    multi_restart_fit(m, d, c, init);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("boom 0"), std::string::npos);
    EXPECT_NE(msg.find("boom 2"), std::string::npos);
  }
}
