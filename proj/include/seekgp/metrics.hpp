#pragma once

#include "core.hpp"

#include <string>

namespace seekgp {

/// Population standard deviation of the truth; zero spread is an error.
inline double truth_scale(const Vector& truth) {
  require(truth.size() > 0, "metrics: empty truth vector");
  const double mean = truth.mean();
  const double s = std::sqrt((truth.array() - mean).square().mean());
  if (!(s > 0)) throw ContractError("metrics: truth has zero variance, normalization is undefined");
  return s;
}

inline double nrmse(const Vector& prediction, const Vector& truth) {
  require(prediction.size() == truth.size(), "nrmse: prediction and truth lengths differ");
  const double s = truth_scale(truth);
  return std::sqrt((prediction - truth).squaredNorm() / static_cast<double>(truth.size())) / s;
}

/// Normalized negatively oriented interval score at miscoverage level alpha.
inline double nnois(const Vector& lower, const Vector& upper, const Vector& truth, double alpha = 0.05) {
  require(lower.size() == truth.size() && upper.size() == truth.size(), "nnois: length mismatch");
  require(alpha > 0 && alpha < 1, "nnois: alpha must lie in (0, 1)");
  require((lower.array() <= upper.array()).all(), "nnois: lower must not exceed upper");
  const double s = truth_scale(truth);
  const double penalty = 2.0 / alpha;
  double total = 0.0;
  for (Index i = 0; i < truth.size(); ++i) {
    total += upper[i] - lower[i];
    if (truth[i] < lower[i]) total += penalty * (lower[i] - truth[i]);
    if (truth[i] > upper[i]) total += penalty * (truth[i] - upper[i]);
  }
  return total / (s * static_cast<double>(truth.size()));
}

/// Fraction of truths inside [lower, upper].
inline double coverage(const Vector& lower, const Vector& upper, const Vector& truth) {
  require(lower.size() == truth.size() && upper.size() == truth.size(), "coverage: length mismatch");
  require(truth.size() > 0, "coverage: empty truth vector");
  Index inside = 0;
  for (Index i = 0; i < truth.size(); ++i) inside += (truth[i] >= lower[i] && truth[i] <= upper[i]) ? 1 : 0;
  return static_cast<double>(inside) / static_cast<double>(truth.size());
}

struct MetricsReport {
  double nrmse = 0.0;
  double nnois = 0.0;
  double coverage = 0.0;
  double rmse = 0.0;  // unnormalized
  Index n_test = 0;
};

inline MetricsReport evaluate(const Vector& mean, const Vector& lower, const Vector& upper, const Vector& truth,
                              double alpha = 0.05) {
  MetricsReport r;
  r.nrmse = nrmse(mean, truth);
  r.nnois = nnois(lower, upper, truth, alpha);
  r.coverage = coverage(lower, upper, truth);
  r.rmse = std::sqrt((mean - truth).squaredNorm() / static_cast<double>(truth.size()));
  r.n_test = truth.size();
  return r;
}

}  // namespace seekgp
