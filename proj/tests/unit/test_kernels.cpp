#include "helpers.hpp"

#include <gtest/gtest.h>

#include <numbers>

using namespace seekgp;
using namespace testutil;

namespace {

const std::vector<BaseKind> kAllKinds{BaseKind::gaussian, BaseKind::matern12, BaseKind::matern32,
                                      BaseKind::matern52, BaseKind::periodic, BaseKind::power_exponential};

BaseKernel random_base(Rng& rng, Index P) {
  BaseKernel k(kAllKinds[rng() % kAllKinds.size()], Vector::Zero(P));
  k.randomize(rng);
  return k;
}

KernelExpr random_expr(Rng& rng, Index P, int depth) {
  const auto pick = depth <= 0 ? 0 : rng() % 5;
  switch (pick) {
    case 1: return KernelExpr::scale(uniform(rng, 0, 3), random_expr(rng, P, depth - 1));
    case 2:
      return KernelExpr::sum(uniform(rng, 0, 2), random_expr(rng, P, depth - 1), uniform(rng, 0, 2),
                             random_expr(rng, P, depth - 1));
    case 3: return KernelExpr::product(random_expr(rng, P, depth - 1), random_expr(rng, P, depth - 1));
    case 4: {
      const Index Z = 1 + static_cast<Index>(rng() % 3);
      Mlp map(MlpSpec{P, {4}, Z, Activation::tanh});
      map.init(rng);
      return KernelExpr::warp(std::move(map), random_expr(rng, Z, depth - 1));
    }
    default: return KernelExpr(random_base(rng, P));
  }
}

}  // namespace

TEST(ScaledDistance, IdenticalPointsGiveZero) {
  const Vector x = vec({0.3, -2.0}), w = vec({1.7, -0.4});
  EXPECT_EQ(scaled_distance(pt(x), pt(x), w), 0.0);
}

TEST(ScaledDistance, UnitGap) {
  const Vector a = vec({0.0}), b = vec({1.0});
  EXPECT_DOUBLE_EQ(scaled_distance(pt(a), pt(b), vec({0.0})), 1.0);
}

TEST(ScaledDistance, OmegaTwoScalesByTen) {
  const Vector a = vec({0.0}), b = vec({1.0});
  EXPECT_NEAR(scaled_distance(pt(a), pt(b), vec({2.0})), 10.0, 1e-14);
}

TEST(ScaledDistance, DimensionMismatchThrows) {
  const Vector a = vec({0.0, 1.0}), b = vec({1.0});
  EXPECT_THROW(scaled_distance(pt(a), pt(b), vec({0.0})), ContractError);
}

TEST(BaseKernel, ClosedFormsAtUnitDistance) {
  const Vector a = vec({0.0}), b = vec({1.0});
  const double d = 1.0;
  auto at = [&](BaseKind k) { return eval_base(BaseKernel(k, vec({0.0})), pt(a), pt(b)); };
  EXPECT_NEAR(at(BaseKind::gaussian), std::exp(-1.0), 1e-15);
  EXPECT_NEAR(at(BaseKind::matern12), 0.36787944117144233, 1e-15);
  EXPECT_NEAR(at(BaseKind::matern32), (1 + std::sqrt(3.0) * d) * std::exp(-std::sqrt(3.0) * d), 1e-15);
  EXPECT_NEAR(at(BaseKind::matern52), (1 + std::sqrt(5.0) * d + 5 * d * d / 3) * std::exp(-std::sqrt(5.0) * d), 1e-15);
}

TEST(BaseKernel, PeriodicAndPowerExponentialForms) {
  const Vector a = vec({0.1}), b = vec({0.35});
  const BaseKernel per(BaseKind::periodic, vec({0.0}), 0.8);
  const double r = 0.25;
  EXPECT_NEAR(per(pt(a), pt(b)), std::exp(-2 * std::pow(std::sin(std::numbers::pi * r / 0.8), 2)), 1e-14);
  const BaseKernel pe(BaseKind::power_exponential, vec({0.5}), 1.0, 1.3);
  const double dist = std::sqrt(std::pow(10.0, 0.5)) * r;
  EXPECT_NEAR(pe(pt(a), pt(b)), std::exp(-std::pow(dist, 1.3)), 1e-14);
}

TEST(BaseKernel, Matern12EqualsExpOfDistance) {
  Rng rng(4);
  for (int t = 0; t < 200; ++t) {
    BaseKernel k(BaseKind::matern12, Vector::Zero(3));
    k.randomize(rng);
    const Points X = random_points(rng, 2, 3);
    const double d = scaled_distance(row(X, 0), row(X, 1), k.omega());
    EXPECT_NEAR(k(row(X, 0), row(X, 1)), std::exp(-d), 1e-15);
  }
}

TEST(BaseKernel, SymmetricBitwiseAndUnitDiagonal) {
  Rng rng(12);
  for (int t = 0; t < 500; ++t) {
    const Index P = 1 + static_cast<Index>(rng() % 8);
    const BaseKernel k = random_base(rng, P);
    const Points X = random_points(rng, 2, P, -3, 3);
    EXPECT_EQ(k(row(X, 0), row(X, 1)), k(row(X, 1), row(X, 0))) << to_string(k.kind());
    EXPECT_EQ(k(row(X, 0), row(X, 0)), 1.0) << to_string(k.kind());
  }
}

TEST(BaseKernel, TendsToOneAsDistanceVanishes) {
  for (BaseKind kind : kAllKinds) {
    const BaseKernel k(kind, vec({0.0}));
    const Vector a = vec({0.0}), b = vec({1e-9});
    EXPECT_NEAR(k(pt(a), pt(b)), 1.0, 1e-6) << to_string(kind);
  }
}

TEST(Compose, ZeroScaleIsZero) {
  const KernelExpr e = KernelExpr::scale(0.0, KernelExpr(BaseKernel(BaseKind::gaussian, vec({0.0}))));
  const Vector a = vec({0.2}), b = vec({0.9});
  EXPECT_EQ(compose(e, pt(a), pt(b)), 0.0);
}

TEST(Compose, ProductOfGaussianAtSamePointIsOne) {
  const KernelExpr g(BaseKernel(BaseKind::gaussian, vec({0.3, 0.1})));
  const KernelExpr e = KernelExpr::product(g, g);
  const Vector a = vec({0.2, -0.7});
  EXPECT_EQ(compose(e, pt(a), pt(a)), 1.0);
}

TEST(Compose, IdentityWarpMatchesBase) {
  Rng rng(9);
  const BaseKernel base(BaseKind::gaussian, vec({0.4, -0.2}));
  const KernelExpr e = KernelExpr::warp(Mlp::identity(2), KernelExpr(base));
  for (int t = 0; t < 50; ++t) {
    const Points X = random_points(rng, 2, 2);
    EXPECT_EQ(compose(e, row(X, 0), row(X, 1)), eval_base(base, row(X, 0), row(X, 1)));
  }
}

TEST(Compose, SumAndScaleRecursion) {
  const BaseKernel g(BaseKind::gaussian, vec({0.0})), m(BaseKind::matern32, vec({0.5}));
  const KernelExpr e = KernelExpr::sum(0.3, KernelExpr(g), 1.7, KernelExpr::scale(2.0, KernelExpr(m)));
  const Vector a = vec({0.1}), b = vec({0.6});
  EXPECT_NEAR(compose(e, pt(a), pt(b)), 0.3 * g(pt(a), pt(b)) + 1.7 * 2.0 * m(pt(a), pt(b)), 1e-15);
}

TEST(Compose, NegativeCoefficientRejected) {
  const KernelExpr g(BaseKernel(BaseKind::gaussian, vec({0.0})));
  EXPECT_THROW(KernelExpr::scale(-1.0, g), ContractError);
  EXPECT_THROW(KernelExpr::sum(1.0, g, -0.1, g), ContractError);
}

TEST(Compose, WarpDimensionMismatchRejected) {
  const KernelExpr g(BaseKernel(BaseKind::gaussian, vec({0.0, 0.0})));
  EXPECT_THROW(KernelExpr::warp(Mlp::identity(3), g), ContractError);
}

TEST(Gram, SinglePoint) {
  const Matrix C = gram(BaseKernel(BaseKind::gaussian, vec({0.0})), points({{0.4}}));
  ASSERT_EQ(C.rows(), 1);
  EXPECT_EQ(C(0, 0), 1.0);
}

TEST(Gram, DuplicatePointsAllOnes) {
  const Matrix C = base_gram(BaseKernel(BaseKind::gaussian, vec({0.0})), points({{0.4}, {0.4}}));
  EXPECT_TRUE((C.array() == 1.0).all());
}

TEST(Gram, TwoPointsOracle) {
  const Matrix C = base_gram(BaseKernel(BaseKind::gaussian, vec({0.0})), points({{0.0}, {1.0}}));
  const double e = std::exp(-1.0);
  EXPECT_NEAR(C(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(C(0, 1), e, 1e-15);
  EXPECT_NEAR(C(1, 0), e, 1e-15);
  EXPECT_NEAR(C(1, 1), 1.0, 1e-15);
}

TEST(Gram, ExactlySymmetricAndMatchesPointwise) {
  Rng rng(31);
  for (int t = 0; t < 100; ++t) {
    const Index P = 1 + static_cast<Index>(rng() % 6);
    const BaseKernel k = random_base(rng, P);
    const Points X = random_points(rng, 12, P);
    const Matrix C = base_gram(k, X);
    EXPECT_EQ(C, Matrix(C.transpose()));
    for (Index i = 0; i < X.rows(); ++i)
      for (Index j = 0; j < X.rows(); ++j) EXPECT_NEAR(C(i, j), k(row(X, i), row(X, j)), 1e-13);
    const KernelExpr e = random_expr(rng, P, 3);
    const Matrix E = e.gram(X);
    EXPECT_EQ(E, Matrix(E.transpose()));
    const Points Y = random_points(rng, 5, P);
    const Matrix cross = e.gram(X, Y);
    for (Index i = 0; i < X.rows(); ++i)
      for (Index j = 0; j < Y.rows(); ++j) EXPECT_NEAR(cross(i, j), e(row(X, i), row(Y, j)), 1e-13);
  }
}

TEST(Gram, NonFiniteValueNamesIndices) {
  auto bad = [](Point x, Point) { return x[0] > 0.5 ? std::nan("") : 1.0; };
  try {
    gram(bad, points({{0.0}, {1.0}}));
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("(1, 1)"), std::string::npos) << e.what();
  }
}

TEST(ValidateKernel, GaussianIsValid) {
  Rng rng(1);
  const ValidityReport r = validate_kernel(BaseKernel(BaseKind::gaussian, vec({0.0, 0.0})), {random_points(rng, 10, 2)});
  EXPECT_TRUE(r.symmetric);
  EXPECT_TRUE(r.psd);
}

TEST(ValidateKernel, AntisymmetricFunctionDetected) {
  auto f = [](Point x, Point xp) { return x[0] - xp[0]; };
  const ValidityReport r = validate_kernel(f, {points({{0.0}, {0.5}, {1.0}})});
  EXPECT_FALSE(r.symmetric);
}

TEST(ValidateKernel, NegatedGaussianNotPsd) {
  const BaseKernel g(BaseKind::gaussian, vec({0.0}));
  auto f = [&](Point x, Point xp) { return -g(x, xp); };
  const Points X = points({{0.0}, {0.7}, {1.5}});
  const ValidityReport r = validate_kernel(f, {X});
  EXPECT_FALSE(r.psd);
  Matrix C(3, 3);
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 3; ++j) C(i, j) = f(row(X, i), row(X, j));
  Eigen::SelfAdjointEigenSolver<Matrix> eig(C);
  EXPECT_NEAR(r.min_eigenvalue[0], eig.eigenvalues().minCoeff(), 1e-12);
  EXPECT_LT(r.min_eigenvalue[0], 0.0);
}

TEST(ValidateKernel, RejectsBadArguments) {
  const BaseKernel g(BaseKind::gaussian, vec({0.0}));
  EXPECT_THROW(validate_kernel(g, {points({{0.0}})}, 0.0), ContractError);
  EXPECT_THROW(validate_kernel(g, {Points(0, 1)}), ContractError);
}

TEST(ValidateKernel, RandomCompositionsStayValid) {
  Rng rng(2024);
  for (int t = 0; t < 300; ++t) {
    const Index P = 1 + static_cast<Index>(rng() % 8);
    const Index n = 1 + static_cast<Index>(rng() % 64);
    const KernelExpr e = random_expr(rng, P, 3);
    const ValidityReport r = validate_kernel(e, {random_points(rng, n, P)});
    EXPECT_LE(r.max_asymmetry, 1e-12);
    EXPECT_TRUE(r.psd) << "trial " << t << " min eig " << r.min_eigenvalue[0];
  }
}

TEST(KernelExpr, ParamsRoundTrip) {
  Rng rng(77);
  for (int t = 0; t < 30; ++t) {
    KernelExpr e = random_expr(rng, 2, 3);
    std::vector<double> v(static_cast<std::size_t>(e.num_params()));
    e.get_params(v);
    for (auto& x : v) x += 0.01;
    e.set_params(v);
    std::vector<double> back(v.size());
    e.get_params(back);
    EXPECT_EQ(v, back);
    ParamLayout layout;
    e.describe(layout, "kernel");
    EXPECT_EQ(layout.size(), e.num_params());
  }
}
