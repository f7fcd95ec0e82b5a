#pragma once

#include "core.hpp"
#include "kernels.hpp"
#include "neural.hpp"
#include "seek.hpp"

#include <Eigen/Cholesky>

#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace seekgp {

/// Any kernel the GP can be trained with.
using Kernel = std::variant<KernelExpr, SeekKernel, GibbsKernel, DeepKernel>;

inline Index input_dim(const Kernel& k) {
  return std::visit([](const auto& kk) { return kk.input_dim(); }, k);
}
inline Matrix kernel_gram(const Kernel& k, const Points& X) {
  return std::visit([&](const auto& kk) -> Matrix { return kk.gram(X); }, k);
}
inline Matrix kernel_gram(const Kernel& k, const Points& X1, const Points& X2) {
  return std::visit([&](const auto& kk) -> Matrix { return kk.gram(X1, X2); }, k);
}
inline Vector kernel_diag(const Kernel& k, const Points& X) {
  return std::visit([&](const auto& kk) -> Vector { return kk.diag(X); }, k);
}
inline double kernel_eval(const Kernel& k, Point x, Point xp) {
  return std::visit([&](const auto& kk) { return kk(x, xp); }, k);
}
inline Index kernel_num_params(const Kernel& k) {
  return std::visit([](const auto& kk) { return kk.num_params(); }, k);
}
inline void kernel_get_params(const Kernel& k, std::span<double> out) {
  std::visit([&](const auto& kk) { kk.get_params(out); }, k);
}
inline void kernel_set_params(Kernel& k, std::span<const double> in) {
  std::visit([&](auto& kk) { kk.set_params(in); }, k);
}
inline void kernel_describe(const Kernel& k, ParamLayout& layout) {
  std::visit([&](const auto& kk) { kk.describe(layout, "kernel"); }, k);
}
inline void kernel_randomize(Kernel& k, Rng& rng) {
  std::visit([&](auto& kk) { kk.randomize(rng); }, k);
}
inline void kernel_gram_backward(const Kernel& k, const Points& X, const Matrix& G, std::span<double> grad) {
  std::visit([&](const auto& kk) { kk.gram_backward(X, G, grad); }, k);
}

struct Standardizer {
  Vector x_mean, x_std;
  double y_mean = 0.0, y_std = 1.0;
  std::string fitted_on;
  std::string std_convention = "population";
  std::vector<std::string> warnings;

  Points apply_x(const Points& X) const {
    Points Z = X;
    for (Index i = 0; i < Z.rows(); ++i)
      for (Index p = 0; p < Z.cols(); ++p) Z(i, p) = (X(i, p) - x_mean[p]) / x_std[p];
    return Z;
  }
  Points inverse_x(const Points& Z) const {
    Points X = Z;
    for (Index i = 0; i < X.rows(); ++i)
      for (Index p = 0; p < X.cols(); ++p) X(i, p) = Z(i, p) * x_std[p] + x_mean[p];
    return X;
  }
  Vector apply_y(const Vector& y) const { return (y.array() - y_mean) / y_std; }
  Vector inverse_y(const Vector& z) const { return z.array() * y_std + y_mean; }
};

struct Dataset {
  Points X;
  Vector y;
  std::string id;
  std::optional<Standardizer> standardizer;

  Index size() const { return X.rows(); }
  Index dim() const { return X.cols(); }

  void validate() const {
    require(X.rows() >= 1, "Dataset: at least one row is required");
    require(y.size() == X.rows(), "Dataset: X has " + std::to_string(X.rows()) + " rows but y has " +
                                      std::to_string(y.size()) + " entries");
    require(X.allFinite() && y.allFinite(), "Dataset: non-finite entries");
  }
};

/// Standard deviations below this are replaced by 1 (constant columns).
inline constexpr double kStdFloor = 1e-12;

inline Standardizer fit_standardizer(const Dataset& train) {
  train.validate();
  const auto n = static_cast<double>(train.size());
  Standardizer s;
  s.fitted_on = train.id;
  s.x_mean = train.X.colwise().mean().transpose();
  s.x_std.resize(train.dim());
  for (Index p = 0; p < train.dim(); ++p) {
    const double var = (train.X.col(p).array() - s.x_mean[p]).square().sum() / n;
    double sd = std::sqrt(var);
    if (!(sd > kStdFloor)) {
      s.warnings.push_back("input column " + std::to_string(p) + " has zero variance; std set to 1");
      sd = 1.0;
    }
    s.x_std[p] = sd;
  }
  s.y_mean = train.y.mean();
  s.y_std = std::sqrt((train.y.array() - s.y_mean).square().sum() / n);
  if (!(s.y_std > kStdFloor)) {
    s.warnings.push_back("target has zero variance; std set to 1");
    s.y_std = 1.0;
  }
  return s;
}

inline Dataset standardize(const Dataset& d, const Standardizer& s) {
  Dataset out{s.apply_x(d.X), s.apply_y(d.y), d.id, s};
  return out;
}

enum class IntervalMode { standard_deviation, variance };

struct JitterPolicy {
  double initial = 1e-8;  // relative to mean(diag C) when `relative`
  double max = 1e-4;
  double factor = 10.0;
  bool relative = true;
};

/// Zero-mean GP: kernel, noise variance lambda^2 and jitter policy. An
/// optional learnable signal variance multiplies the kernel.
struct GpModel {
  Kernel kernel;
  double log_noise = std::log(1e-2);
  bool learn_noise = true;
  /// When set, lambda^2 is fixed to this value (may be 0) and not learned.
  std::optional<double> fixed_noise;
  bool learn_output_scale = false;
  double log_output_scale = 0.0;
  JitterPolicy jitter;

  GpModel(Kernel k) : kernel(std::move(k)) {}

  double noise_variance() const { return fixed_noise ? *fixed_noise : std::exp(log_noise); }
  double output_scale() const { return learn_output_scale ? std::exp(log_output_scale) : 1.0; }
  bool noise_is_learned() const { return !fixed_noise && learn_noise; }

  Index num_params() const {
    return kernel_num_params(kernel) + (learn_output_scale ? 1 : 0) + (noise_is_learned() ? 1 : 0);
  }

  Vector params() const {
    Vector v(num_params());
    const Index nk = kernel_num_params(kernel);
    kernel_get_params(kernel, std::span<double>(v.data(), static_cast<std::size_t>(nk)));
    Index pos = nk;
    if (learn_output_scale) v[pos++] = log_output_scale;
    if (noise_is_learned()) v[pos++] = log_noise;
    return v;
  }

  void set_params(const Vector& v) {
    if (v.size() != num_params()) {
      throw ContractError("GpModel::set_params: expected " + std::to_string(num_params()) + " parameters, got " +
                          std::to_string(v.size()));
    }
    const Index nk = kernel_num_params(kernel);
    kernel_set_params(kernel, std::span<const double>(v.data(), static_cast<std::size_t>(nk)));
    Index pos = nk;
    if (learn_output_scale) log_output_scale = v[pos++];
    if (noise_is_learned()) log_noise = v[pos++];
  }

  ParamLayout layout() const {
    ParamLayout layout;
    kernel_describe(kernel, layout);
    if (learn_output_scale) layout.add("log_output_scale", 1);
    if (noise_is_learned()) layout.add("log_noise", 1);
    return layout;
  }

  void randomize(std::uint64_t seed) {
    Rng rng(seed);
    kernel_randomize(kernel, rng);
    if (learn_output_scale) log_output_scale = uniform(rng, -1.0, 1.0);
    if (noise_is_learned()) log_noise = uniform(rng, -9.0, -4.0);
  }

  /// sigma^2 K(X, X), without noise or jitter.
  Matrix prior_covariance(const Points& X) const { return output_scale() * kernel_gram(kernel, X); }
};

/// Cholesky factorization of C_lambda = C + (lambda^2 + jitter) I.
struct Factorization {
  Matrix C;  // prior covariance sigma^2 K(X, X)
  Eigen::LLT<Matrix> llt;
  Vector alpha;  // C_lambda^{-1} y
  double jitter = 0.0;
  double jitter_relative = 0.0;  // jitter / mean(diag C), when relative
  double log_det = 0.0;
};

inline Factorization factorize(const GpModel& model, const Points& X, const Vector& y) {
  require(X.rows() == y.size(), "factorize: X and y sizes differ");
  Factorization f;
  f.C = model.prior_covariance(X);
  if (!f.C.allFinite()) throw NumericalError("factorize: covariance matrix has non-finite entries");
  const Index n = X.rows();
  const double noise = model.noise_variance();
  const double diag_mean = f.C.diagonal().mean();
  const double base = model.jitter.relative ? std::abs(diag_mean) : 1.0;
  double rel = model.jitter.initial;
  for (;;) {
    f.jitter = rel * base;
    f.jitter_relative = model.jitter.relative ? rel : 0.0;
    Matrix Cl = f.C;
    Cl.diagonal().array() += noise + f.jitter;
    f.llt.compute(Cl);
    if (f.llt.info() == Eigen::Success && f.llt.matrixLLT().diagonal().minCoeff() > 0) break;
    rel *= model.jitter.factor;
    if (rel > model.jitter.max * (1.0 + 1e-12)) {
      Eigen::SelfAdjointEigenSolver<Matrix> eig(f.C, Eigen::EigenvaluesOnly);
      const auto ev = eig.eigenvalues();
      throw NumericalError("factorize: Cholesky failed after jitter escalation to " + std::to_string(f.jitter) +
                           " (noise " + std::to_string(noise) + ", eigenvalue range [" +
                           std::to_string(ev.minCoeff()) + ", " + std::to_string(ev.maxCoeff()) + "], n " +
                           std::to_string(n) + ")");
    }
  }
  f.alpha = f.llt.solve(y);
  f.log_det = 2.0 * f.llt.matrixLLT().diagonal().array().log().sum();
  return f;
}

/// 1/2 log|C_lambda| + 1/2 y^T C_lambda^{-1} y
inline double nll(const GpModel& model, const Dataset& data) {
  const Factorization f = factorize(model, data.X, data.y);
  return 0.5 * f.log_det + 0.5 * data.y.dot(f.alpha);
}

struct LossAndGradient {
  double loss = 0.0;
  Vector gradient;
};

/// Loss and its exact gradient over GpModel::params().
///
/// dL/dtheta = 1/2 tr((C_lambda^{-1} - alpha alpha^T) dC_lambda/dtheta); the
/// adjoint 1/2 (C_lambda^{-1} - alpha alpha^T) is pushed back through the
/// kernel. Relative jitter depends on mean(diag C) and is differentiated too.
inline LossAndGradient nll_and_gradient(const GpModel& model, const Dataset& data) {
  const Factorization f = factorize(model, data.X, data.y);
  const Index n = data.size();
  LossAndGradient out;
  out.loss = 0.5 * f.log_det + 0.5 * data.y.dot(f.alpha);

  Matrix W = f.llt.solve(Matrix::Identity(n, n));
  W.noalias() -= f.alpha * f.alpha.transpose();
  const double trW = W.trace();

  // Adjoint wrt the prior covariance sigma^2 K.
  Matrix G = 0.5 * W;
  if (f.jitter_relative > 0 && f.C.diagonal().mean() > 0) {
    G.diagonal().array() += 0.5 * trW * f.jitter_relative / static_cast<double>(n);
  }

  out.gradient = Vector::Zero(model.num_params());
  const Index nk = kernel_num_params(model.kernel);
  const double s2 = model.output_scale();
  kernel_gram_backward(model.kernel, data.X, s2 * G, std::span<double>(out.gradient.data(), static_cast<std::size_t>(nk)));
  Index pos = nk;
  if (model.learn_output_scale) out.gradient[pos++] = G.cwiseProduct(f.C).sum();
  if (model.noise_is_learned()) out.gradient[pos++] = 0.5 * trW * model.noise_variance();
  return out;
}

struct PosteriorPrediction {
  Vector mean;
  Vector variance;  // latent f, clamped at 0
  Vector lower, upper;
};

/// 95% interval endpoints mean -/+ z * sqrt(variance); the variance mode
/// multiplies z by the variance itself.
inline std::pair<Vector, Vector> predict_interval(const Vector& mean, const Vector& variance,
                                                  IntervalMode mode = IntervalMode::standard_deviation,
                                                  double z = 1.96) {
  require(mean.size() == variance.size(), "predict_interval: size mismatch");
  require((variance.array() >= 0).all(), "predict_interval: variance must be non-negative");
  const Vector half = mode == IntervalMode::standard_deviation ? Vector(z * variance.cwiseSqrt()) : Vector(z * variance);
  return {mean - half, mean + half};
}

inline PosteriorPrediction posterior(const GpModel& model, const Dataset& train, const Points& X_star,
                                     IntervalMode mode = IntervalMode::standard_deviation) {
  require(X_star.cols() == train.dim(), "posterior: query dimension does not match training data");
  const Factorization f = factorize(model, train.X, train.y);
  const double s2 = model.output_scale();
  const Matrix Ks = s2 * kernel_gram(model.kernel, X_star, train.X);  // Q x N
  PosteriorPrediction out;
  out.mean = Ks * f.alpha;
  const Matrix V = f.llt.matrixL().solve(Ks.transpose());  // N x Q
  const Vector prior = s2 * kernel_diag(model.kernel, X_star);
  out.variance = (prior - V.colwise().squaredNorm().transpose()).cwiseMax(0.0);
  std::tie(out.lower, out.upper) = predict_interval(out.mean, out.variance, mode);
  return out;
}

}  // namespace seekgp
