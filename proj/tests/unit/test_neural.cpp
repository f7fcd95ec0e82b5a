#include "helpers.hpp"

#include <gtest/gtest.h>

using namespace seekgp;
using namespace testutil;

TEST(InitParams, DeterministicForSeed) {
  const MlpSpec spec{3, {5, 4}, 2, Activation::softplus};
  const ParamVector a = init_params(spec, 7), b = init_params(spec, 7);
  EXPECT_EQ(a.values, b.values);
}

TEST(InitParams, SeedChangesValues) {
  const MlpSpec spec{3, {5, 4}, 2, Activation::softplus};
  EXPECT_NE(init_params(spec, 7).values, init_params(spec, 8).values);
}

TEST(InitParams, CountMatchesLayerShapes) {
  EXPECT_EQ(init_params(MlpSpec{2, {4, 4}, 1, Activation::softplus}, 0).values.size(), 37);
}

TEST(InitParams, GlorotRangeAndZeroBiases) {
  const MlpSpec spec{6, {12, 12}, 1, Activation::softplus};
  const ParamVector pv = init_params(spec, 3);
  for (const auto& seg : pv.layout.segments()) {
    const auto block = pv.values.segment(seg.offset, seg.size);
    if (seg.name.find("bias") != std::string::npos) {
      EXPECT_TRUE((block.array() == 0).all()) << seg.name;
    } else {
      const Index l = seg.name[5] - '0';
      const double a = std::sqrt(6.0 / static_cast<double>(spec.fan_in(l) + spec.fan_out(l)));
      EXPECT_LE(block.cwiseAbs().maxCoeff(), a) << seg.name;
    }
  }
}

TEST(InitParams, RandomSpecsCountFormula) {
  Rng rng(11);
  for (int t = 0; t < 100; ++t) {
    MlpSpec spec;
    spec.input_dim = 1 + static_cast<Index>(rng() % 8);
    spec.output_dim = 1 + static_cast<Index>(rng() % 5);
    const auto depth = rng() % 4;
    for (std::size_t d = 0; d < depth; ++d) spec.hidden.push_back(1 + static_cast<Index>(rng() % 10));
    Index expected = 0, in = spec.input_dim;
    for (Index h : spec.hidden) {
      expected += in * h + h;
      in = h;
    }
    expected += in * spec.output_dim + spec.output_dim;
    EXPECT_EQ(spec.num_params(), expected);
    EXPECT_EQ(Mlp(spec).num_params(), expected);
  }
}

TEST(Forward, IdentityActivationIsAffine) {
  Rng rng(5);
  Mlp net(MlpSpec{3, {6, 5}, 2, Activation::identity});
  net.init(9);
  const Vector zero = Vector::Zero(3);
  const Vector f0 = net.forward(pt(zero));
  for (int t = 0; t < 20; ++t) {
    Vector a(3), b(3);
    for (Index i = 0; i < 3; ++i) {
      a[i] = uniform(rng, -2, 2);
      b[i] = uniform(rng, -2, 2);
    }
    const double s = uniform(rng, -3, 3);
    const Vector ab = a + s * b;
    const Vector lhs = net.forward(pt(ab)) - f0;
    const Vector rhs = (net.forward(pt(a)) - f0) + s * (net.forward(pt(b)) - f0);
    EXPECT_LE((lhs - rhs).norm(), 1e-10 * std::max(1.0, rhs.norm()));
  }
}

TEST(Forward, ZeroNetworkIsConstant) {
  Mlp net(MlpSpec{2, {4, 4}, 3, Activation::softplus});
  const Vector x = vec({0.3, -1.2}), y = vec({5.0, 2.0});
  EXPECT_EQ(net.forward(pt(x)), net.forward(pt(y)));
  EXPECT_TRUE(net.forward(pt(x)).isZero());
}

TEST(Forward, SoftplusHiddenUnitsPositive) {
  Mlp net(MlpSpec{2, {7}, 1, Activation::softplus});
  net.init(1);
  Rng rng(2);
  const Points X = random_points(rng, 50, 2, -50, 50);
  Mlp::Tape tape;
  net.forward(X, tape);
  EXPECT_TRUE((tape.post[0].array() > 0).all());
}

TEST(Forward, SoftplusStableForLargeInputs) {
  EXPECT_DOUBLE_EQ(softplus(1000.0), 1000.0);
  EXPECT_NEAR(softplus(-1000.0), 0.0, 1e-300);
  EXPECT_NEAR(softplus(0.0), std::log(2.0), 1e-15);
}

TEST(Forward, BatchedMatchesPointwise) {
  Mlp net(MlpSpec{3, {5, 4}, 2, Activation::tanh});
  net.init(4);
  Rng rng(8);
  const Points X = random_points(rng, 10, 3);
  const Matrix F = net.forward(X);
  for (Index i = 0; i < X.rows(); ++i) {
    const Vector f = net.forward(row(X, i));
    EXPECT_LE((F.row(i).transpose() - f).norm(), 1e-14);
  }
}

TEST(Forward, DimensionMismatchThrows) {
  Mlp net(MlpSpec{3, {4}, 1, Activation::softplus});
  const Vector x = vec({1.0, 2.0});
  EXPECT_THROW(net.forward(pt(x)), ContractError);
}

TEST(Backward, MatchesFiniteDifferences) {
  for (Activation act : {Activation::softplus, Activation::tanh, Activation::identity}) {
    Mlp net(MlpSpec{2, {4, 3}, 2, act});
    net.init(21);
    Rng rng(3);
    const Points X = random_points(rng, 6, 2);
    const Matrix D = random_points(rng, 6, 2);  // upstream adjoint
    auto loss = [&](const Mlp& m) { return m.forward(X).cwiseProduct(D).sum(); };
    Mlp::Tape tape;
    net.forward(X, tape);
    Vector grad = Vector::Zero(net.num_params());
    net.backward(tape, D, std::span<double>(grad.data(), static_cast<std::size_t>(grad.size())));
    for (Index k = 0; k < net.num_params(); ++k) {
      Mlp plus = net, minus = net;
      plus.params()[k] += 1e-6;
      minus.params()[k] -= 1e-6;
      const double fd = (loss(plus) - loss(minus)) / 2e-6;
      EXPECT_NEAR(grad[k], fd, 1e-7 * std::max(1.0, std::abs(fd))) << to_string(act) << " param " << k;
    }
  }
}

TEST(ParamRoundTrip, EmptyGroupList) {
  const ParamVector pv = flatten({});
  EXPECT_EQ(pv.values.size(), 0);
  EXPECT_TRUE(unflatten(pv).empty());
}

TEST(ParamRoundTrip, SingleScalarGroup) {
  const ParamVector pv = flatten({{"noise", vec({-3.5})}});
  ASSERT_EQ(pv.values.size(), 1);
  EXPECT_EQ(pv.values[0], -3.5);
}

TEST(ParamRoundTrip, TwoGroupsOffsets) {
  const std::vector<ParamGroup> groups{{"a", vec({1, 2, 3})}, {"b", vec({4, 5, 6, 7, 8})}};
  const ParamVector pv = flatten(groups);
  ASSERT_EQ(pv.values.size(), 8);
  EXPECT_EQ(pv.layout.segments()[0].offset, 0);
  EXPECT_EQ(pv.layout.segments()[1].offset, 3);
  EXPECT_EQ(pv.layout.owner(2), "a");
  EXPECT_EQ(pv.layout.owner(3), "b");
  const auto back = unflatten(pv);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].name, "a");
  EXPECT_EQ(back[0].values, groups[0].values);
  EXPECT_EQ(back[1].values, groups[1].values);
}

TEST(ParamRoundTrip, LayoutMismatchThrows) {
  ParamVector pv = flatten({{"a", vec({1, 2})}});
  pv.values.resize(3);
  EXPECT_THROW(unflatten(pv), ContractError);
}

TEST(ParamRoundTrip, RandomGroupsExact) {
  Rng rng(17);
  for (int t = 0; t < 50; ++t) {
    std::vector<ParamGroup> groups;
    const auto k = rng() % 6;
    for (std::size_t g = 0; g < k; ++g) {
      Vector v(static_cast<Index>(rng() % 7));
      for (Index i = 0; i < v.size(); ++i) v[i] = uniform(rng, -10, 10);
      groups.push_back({"g" + std::to_string(g), v});
    }
    const auto back = unflatten(flatten(groups));
    ASSERT_EQ(back.size(), groups.size());
    for (std::size_t g = 0; g < groups.size(); ++g) EXPECT_EQ(back[g].values, groups[g].values);
  }
}
