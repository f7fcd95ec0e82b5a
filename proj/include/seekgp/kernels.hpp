#pragma once

#include "core.hpp"
#include "neural.hpp"

#include <Eigen/Eigenvalues>

#include <numbers>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace seekgp {

enum class BaseKind { gaussian, matern12, matern32, matern52, periodic, power_exponential };

inline std::string to_string(BaseKind k) {
  switch (k) {
    case BaseKind::gaussian: return "gaussian";
    case BaseKind::matern12: return "matern12";
    case BaseKind::matern32: return "matern32";
    case BaseKind::matern52: return "matern52";
    case BaseKind::periodic: return "periodic";
    case BaseKind::power_exponential: return "power_exp";
  }
  return "?";
}

inline std::optional<BaseKind> parse_base_kind(const std::string& s) {
  if (s == "gaussian" || s == "G") return BaseKind::gaussian;
  if (s == "matern12") return BaseKind::matern12;
  if (s == "matern32") return BaseKind::matern32;
  if (s == "matern52" || s == "matern") return BaseKind::matern52;
  if (s == "periodic") return BaseKind::periodic;
  if (s == "power_exp" || s == "PE") return BaseKind::power_exponential;
  return std::nullopt;
}

/// sqrt(sum_p 10^omega_p (x_p - x'_p)^2)
inline double scaled_distance(Point x, Point xp, const Vector& omega) {
  require(x.size() == xp.size() && static_cast<Index>(x.size()) == omega.size(),
          "scaled_distance: dimension mismatch (" + std::to_string(x.size()) + ", " +
              std::to_string(xp.size()) + ", omega " + std::to_string(omega.size()) + ")");
  double d2 = 0.0;
  for (std::size_t p = 0; p < x.size(); ++p) {
    const double r = x[p] - xp[p];
    d2 += std::pow(10.0, omega[static_cast<Index>(p)]) * r * r;
  }
  return std::sqrt(d2);
}

/// A stationary kernel on the scaled distance, with unit variance.
///
/// Learnable parameters, in flat order: omega (P entries), then log period
/// for the periodic kind, or the logit of gamma/2 for the power-exponential
/// kind. Matern nu is fixed by the kind.
///
/// The periodic kind is exp(-2 sum_p sin^2(pi d_p / period)) with
/// d_p = sqrt(10^omega_p) |x_p - x'_p|, the per-dimension form that stays
/// positive semi-definite in any dimension; in 1D it is exp(-2 sin^2(pi d / period)).
class BaseKernel {
 public:
  BaseKernel() = default;
  BaseKernel(BaseKind kind, Vector omega, double period = 1.0, double gamma = 1.5)
      : kind_(kind), omega_(std::move(omega)) {
    require(omega_.size() > 0, "BaseKernel: omega must be non-empty");
    require(omega_.allFinite(), "BaseKernel: omega must be finite");
    require(period > 0, "BaseKernel: period must be positive");
    require(gamma > 0 && gamma <= 2, "BaseKernel: power-exponential gamma must lie in (0, 2]");
    log_period_ = std::log(period);
    // gamma = 2 sigmoid(u); gamma == 2 is the limit, clamp the logit.
    const double g = std::min(gamma / 2.0, 1.0 - 1e-12);
    gamma_logit_ = std::log(g / (1.0 - g));
    refresh();
  }

  BaseKind kind() const { return kind_; }
  Index dim() const { return omega_.size(); }
  const Vector& omega() const { return omega_; }
  double period() const { return std::exp(log_period_); }
  double gamma() const { return 2.0 * sigmoid(gamma_logit_); }

  Index num_params() const {
    return dim() + (kind_ == BaseKind::periodic || kind_ == BaseKind::power_exponential ? 1 : 0);
  }

  void get_params(std::span<double> out) const {
    for (Index p = 0; p < dim(); ++p) out[p] = omega_[p];
    if (kind_ == BaseKind::periodic) out[dim()] = log_period_;
    if (kind_ == BaseKind::power_exponential) out[dim()] = gamma_logit_;
  }

  void set_params(std::span<const double> in) {
    for (Index p = 0; p < dim(); ++p) omega_[p] = in[p];
    if (kind_ == BaseKind::periodic) log_period_ = in[dim()];
    if (kind_ == BaseKind::power_exponential) gamma_logit_ = in[dim()];
    refresh();
  }

  void describe(ParamLayout& layout, const std::string& prefix) const {
    layout.add(prefix + ".omega", dim());
    if (kind_ == BaseKind::periodic) layout.add(prefix + ".log_period", 1);
    if (kind_ == BaseKind::power_exponential) layout.add(prefix + ".gamma_logit", 1);
  }

  void randomize(Rng& rng) {
    const double hi = kind_ == BaseKind::periodic ? 1.0 : 3.0;
    for (Index p = 0; p < dim(); ++p) omega_[p] = uniform(rng, -2.0, hi);
    if (kind_ == BaseKind::periodic) log_period_ = uniform(rng, std::log(0.3), std::log(3.0));
    if (kind_ == BaseKind::power_exponential) gamma_logit_ = uniform(rng, -1.0, 3.0);
    refresh();
  }

  double operator()(Point x, Point xp) const {
    check_dims(x, xp);
    if (kind_ == BaseKind::periodic) return periodic_value(x, xp);
    double d2 = 0.0;
    for (Index p = 0; p < dim(); ++p) {
      const double r = x[p] - xp[p];
      d2 += scale_[p] * r * r;
    }
    return profile(d2);
  }

  /// Accumulates adj * dk/dtheta into grad (length num_params()) and, when
  /// non-null, adj * dk/dx into dx and adj * dk/dx' into dxp.
  void backward(Point x, Point xp, double adj, std::span<double> grad, double* dx,
                double* dxp) const {
    if (adj == 0.0) return;
    const Index P = dim();
    if (kind_ == BaseKind::periodic) {
      const double k = periodic_value(x, xp);
      const double inv_period = 1.0 / period();
      for (Index p = 0; p < P; ++p) {
        const double r = x[p] - xp[p];
        const double u = std::numbers::pi * sqrt_scale_[p] * std::abs(r) * inv_period;
        // dk/du = -2 k sin(2u)
        const double dk_du = -2.0 * k * std::sin(2.0 * u);
        grad[p] += adj * dk_du * u * (std::numbers::ln10 / 2.0);
        grad[P] -= adj * dk_du * u;
        if (dx || dxp) {
          const double sgn = r > 0 ? 1.0 : (r < 0 ? -1.0 : 0.0);
          const double du_dx = std::numbers::pi * sqrt_scale_[p] * inv_period * sgn;
          if (dx) dx[p] += adj * dk_du * du_dx;
          if (dxp) dxp[p] -= adj * dk_du * du_dx;
        }
      }
      return;
    }
    double d2 = 0.0;
    for (Index p = 0; p < P; ++p) {
      const double r = x[p] - xp[p];
      d2 += scale_[p] * r * r;
    }
    if (d2 == 0.0) return;  // k == 1 locally constant in theta; subgradient 0 in x
    const double k = profile(d2);
    const double dk = dk_dd2(d2, k);
    for (Index p = 0; p < P; ++p) {
      const double r = x[p] - xp[p];
      grad[p] += adj * dk * std::numbers::ln10 * scale_[p] * r * r;
      if (dx) dx[p] += adj * dk * 2.0 * scale_[p] * r;
      if (dxp) dxp[p] -= adj * dk * 2.0 * scale_[p] * r;
    }
    if (kind_ == BaseKind::power_exponential) {
      // k = exp(-(d2)^(g/2)); dk/dg = -k (d2)^(g/2) ln(d2)/2; dg/du = g (1 - g/2)
      const double g = gamma();
      const double dk_dg = -k * std::pow(d2, g / 2.0) * 0.5 * std::log(d2);
      grad[P] += adj * dk_dg * g * (1.0 - g / 2.0);
    }
  }

  /// Gram over all pairs of X1 x X2, built from whole distance matrices.
  Matrix gram(const Points& X1, const Points& X2) const {
    if (X1.cols() != dim() || X2.cols() != dim()) throw ContractError("BaseKernel::gram: input dimension mismatch");
    Matrix S = Matrix::Zero(X1.rows(), X2.rows());
    for (Index p = 0; p < dim(); ++p) accumulate_distance(X1, X2, p, S);
    return profile(S);
  }

  /// Accumulates sum_ij G_ij dK_ij/dtheta into grad for K = gram(X, X).
  void gram_backward(const Points& X, const Matrix& G, std::span<double> grad) const {
    if (X.cols() != dim()) throw ContractError("BaseKernel::gram_backward: input dimension mismatch");
    const Index n = X.rows(), P = dim();
    Matrix S = Matrix::Zero(n, n);
    for (Index p = 0; p < P; ++p) accumulate_distance(X, X, p, S);
    if (kind_ == BaseKind::periodic) {
      // dk/du_p = -2 k sin(2 u_p) with u_p = pi sqrt(10^omega_p) |r_p| / period
      const Matrix H = G.cwiseProduct((-2.0 * S.array()).exp().matrix());
      const double c = std::numbers::pi / period();
      for (Index p = 0; p < P; ++p) {
        double acc = 0.0;
        for (Index j = 0; j < n; ++j) {
          for (Index i = 0; i < n; ++i) {
            const double u = c * sqrt_scale_[p] * std::abs(X(i, p) - X(j, p));
            acc += H(i, j) * -2.0 * std::sin(2.0 * u) * u;
          }
        }
        grad[p] += acc * (std::numbers::ln10 / 2.0);
        grad[P] -= acc;
      }
      return;
    }
    const Matrix K = profile(S);
    const Matrix H = (S.array() == 0.0).select(0.0, G.array() * dk_dd2(S, K).array()).matrix();
    for (Index p = 0; p < P; ++p) {
      double acc = 0.0;
      for (Index j = 0; j < n; ++j) {
        for (Index i = 0; i < n; ++i) {
          const double r = X(i, p) - X(j, p);
          acc += H(i, j) * r * r;
        }
      }
      grad[p] += acc * std::numbers::ln10 * scale_[p];
    }
    if (kind_ == BaseKind::power_exponential) {
      const double g = gamma();
      const Eigen::ArrayXXd logs = S.array().log();
      const Eigen::ArrayXXd term = -K.array() * ((g / 2.0) * logs).exp() * 0.5 * logs;
      const double acc = (S.array() == 0.0).select(0.0, G.array() * term).sum();
      grad[P] += acc * g * (1.0 - g / 2.0);
    }
  }

 private:
  /// S += scaled squared difference (or sin^2 term for the periodic kind) in dimension p.
  void accumulate_distance(const Points& X1, const Points& X2, Index p, Matrix& S) const {
    if (kind_ == BaseKind::periodic) {
      const double c = std::numbers::pi * sqrt_scale_[p] / period();
      for (Index j = 0; j < X2.rows(); ++j) {
        for (Index i = 0; i < X1.rows(); ++i) {
          const double sn = std::sin(c * std::abs(X1(i, p) - X2(j, p)));
          S(i, j) += sn * sn;
        }
      }
      return;
    }
    const double w = scale_[p];
    for (Index j = 0; j < X2.rows(); ++j) {
      for (Index i = 0; i < X1.rows(); ++i) {
        const double r = X1(i, p) - X2(j, p);
        S(i, j) += w * r * r;
      }
    }
  }

  void check_dims(Point x, Point xp) const {
    if (static_cast<Index>(x.size()) != dim() || static_cast<Index>(xp.size()) != dim()) {
      throw ContractError("BaseKernel: input dimension " + std::to_string(x.size()) + "/" + std::to_string(xp.size()) +
                          " does not match omega dimension " + std::to_string(dim()));
    }
  }

  void refresh() {
    scale_ = omega_.unaryExpr([](double w) { return std::pow(10.0, w); });
    sqrt_scale_ = scale_.cwiseSqrt();
  }

  double periodic_value(Point x, Point xp) const {
    const double inv_period = 1.0 / period();
    double s = 0.0;
    for (Index p = 0; p < dim(); ++p) {
      const double u = std::numbers::pi * sqrt_scale_[p] * std::abs(x[p] - xp[p]) * inv_period;
      const double sn = std::sin(u);
      s += sn * sn;
    }
    return std::exp(-2.0 * s);
  }

  /// Elementwise profile over a matrix of squared distances (sin^2 sums for
  /// the periodic kind).
  Matrix profile(const Matrix& S) const {
    const auto s = S.array();
    switch (kind_) {
      case BaseKind::gaussian: return (-s).exp().matrix();
      case BaseKind::matern12: return (-s.sqrt()).exp().matrix();
      case BaseKind::matern32: {
        const Eigen::ArrayXXd a = (3.0 * s).sqrt();
        return ((1.0 + a) * (-a).exp()).matrix();
      }
      case BaseKind::matern52: {
        const Eigen::ArrayXXd a = (5.0 * s).sqrt();
        return ((1.0 + a + (5.0 / 3.0) * s) * (-a).exp()).matrix();
      }
      case BaseKind::power_exponential: {
        const double g = gamma();
        return (s == 0.0).select(1.0, (-((g / 2.0) * s.log()).exp()).exp()).matrix();
      }
      case BaseKind::periodic: return (-2.0 * s).exp().matrix();
    }
    return Matrix();
  }

  /// Elementwise dk/d(d^2); entries with d^2 == 0 are unspecified.
  Matrix dk_dd2(const Matrix& S, const Matrix& K) const {
    const auto s = S.array();
    switch (kind_) {
      case BaseKind::gaussian: return -K;
      case BaseKind::matern12: return (-K.array() / (2.0 * s.sqrt())).matrix();
      case BaseKind::matern32: return (-1.5 * (-(3.0 * s).sqrt()).exp()).matrix();
      case BaseKind::matern52: {
        const Eigen::ArrayXXd a = (5.0 * s).sqrt();
        return (-(5.0 / 6.0) * (1.0 + a) * (-a).exp()).matrix();
      }
      case BaseKind::power_exponential: {
        const double g = gamma();
        return (-K.array() * (g / 2.0) * ((g / 2.0 - 1.0) * s.log()).exp()).matrix();
      }
      case BaseKind::periodic: break;
    }
    return Matrix::Zero(S.rows(), S.cols());
  }

  /// Kernel value as a function of the squared scaled distance.
  double profile(double d2) const {
    switch (kind_) {
      case BaseKind::gaussian: return std::exp(-d2);
      case BaseKind::matern12: return std::exp(-std::sqrt(d2));
      case BaseKind::matern32: {
        const double a = std::sqrt(3.0 * d2);
        return (1.0 + a) * std::exp(-a);
      }
      case BaseKind::matern52: {
        const double a = std::sqrt(5.0 * d2);
        return (1.0 + a + 5.0 * d2 / 3.0) * std::exp(-a);
      }
      case BaseKind::power_exponential: return d2 == 0.0 ? 1.0 : std::exp(-std::pow(d2, gamma() / 2.0));
      case BaseKind::periodic: break;
    }
    throw ContractError("profile: periodic kernel has no distance profile");
  }

  /// dk/d(d^2), for d2 > 0.
  double dk_dd2(double d2, double k) const {
    switch (kind_) {
      case BaseKind::gaussian: return -k;
      case BaseKind::matern12: return -k / (2.0 * std::sqrt(d2));
      case BaseKind::matern32: return -1.5 * std::exp(-std::sqrt(3.0 * d2));
      case BaseKind::matern52: {
        const double a = std::sqrt(5.0 * d2);
        return -(5.0 / 6.0) * (1.0 + a) * std::exp(-a);
      }
      case BaseKind::power_exponential: {
        const double g = gamma();
        return -k * (g / 2.0) * std::pow(d2, g / 2.0 - 1.0);
      }
      case BaseKind::periodic: break;
    }
    return 0.0;
  }

  BaseKind kind_ = BaseKind::gaussian;
  Vector omega_ = Vector::Zero(1);
  double log_period_ = 0.0;
  double gamma_logit_ = 0.0;
  Vector scale_ = Vector::Ones(1);
  Vector sqrt_scale_ = Vector::Ones(1);
};

inline double eval_base(const BaseKernel& k, Point x, Point xp) { return k(x, xp); }

inline Matrix base_gram(const BaseKernel& k, const Points& X) { return k.gram(X, X); }

inline Matrix base_gram(const BaseKernel& k, const Points& X1, const Points& X2) { return k.gram(X1, X2); }

/// Backward pass of base_gram(k, X) given the adjoint G = dL/dC. The diagonal
/// is constant (k(x,x) = 1) and contributes nothing. Input gradients, when
/// requested, go through the per-pair path.
inline void base_gram_backward(const BaseKernel& k, const Points& X, const Matrix& G,
                               std::span<double> grad, Points* dX = nullptr) {
  if (!dX) {
    k.gram_backward(X, G, grad);
    return;
  }
  const Index n = X.rows();
  for (Index i = 0; i < n; ++i) {
    for (Index j = i + 1; j < n; ++j) {
      const double adj = G(i, j) + G(j, i);
      k.backward(row(X, i), row(X, j), adj, grad, dX->data() + i * dX->cols(), dX->data() + j * dX->cols());
    }
  }
}

/// Non-negative multiplier of a scale/sum node. When learnable it is stored
/// as a logarithm in the flat parameter vector.
struct Coefficient {
  double value = 1.0;
  bool learnable = false;

  static Coefficient fixed(double v) {
    require(v >= 0 && std::isfinite(v), "kernel coefficient must be finite and non-negative, got " + std::to_string(v));
    return {v, false};
  }
  static Coefficient learned(double v) {
    require(v > 0 && std::isfinite(v), "learnable kernel coefficient must be positive, got " + std::to_string(v));
    return {v, true};
  }
};

/// Algebraic kernel expression: base kernels combined by scaling, weighted
/// sums, products and input warping. Every node keeps the result a valid
/// (symmetric PSD) kernel as long as coefficients are non-negative.
class KernelExpr {
 public:
  struct BaseNode {
    BaseKernel kernel;
  };
  struct ScaleNode {
    Coefficient alpha;
    Box<KernelExpr> child;
  };
  struct SumNode {
    Coefficient alpha1, alpha2;
    Box<KernelExpr> left, right;
  };
  struct ProductNode {
    Box<KernelExpr> left, right;
  };
  struct WarpNode {
    Mlp map;
    Box<KernelExpr> child;
  };
  using Node = std::variant<BaseNode, ScaleNode, SumNode, ProductNode, WarpNode>;

  KernelExpr(BaseKernel k) : node_(BaseNode{std::move(k)}) {}

  static KernelExpr base(BaseKernel k) { return KernelExpr(std::move(k)); }
  static KernelExpr scale(Coefficient alpha, KernelExpr child) {
    check(alpha);
    return KernelExpr(ScaleNode{alpha, std::move(child)});
  }
  static KernelExpr scale(double alpha, KernelExpr child) {
    return scale(Coefficient::fixed(alpha), std::move(child));
  }
  static KernelExpr sum(Coefficient a1, KernelExpr c1, Coefficient a2, KernelExpr c2) {
    check(a1);
    check(a2);
    require(c1.input_dim() == c2.input_dim(), "KernelExpr::sum: operand dimensions differ");
    return KernelExpr(SumNode{a1, a2, std::move(c1), std::move(c2)});
  }
  static KernelExpr sum(double a1, KernelExpr c1, double a2, KernelExpr c2) {
    return sum(Coefficient::fixed(a1), std::move(c1), Coefficient::fixed(a2), std::move(c2));
  }
  static KernelExpr product(KernelExpr c1, KernelExpr c2) {
    require(c1.input_dim() == c2.input_dim(), "KernelExpr::product: operand dimensions differ");
    return KernelExpr(ProductNode{std::move(c1), std::move(c2)});
  }
  static KernelExpr warp(Mlp map, KernelExpr child) {
    require(map.output_dim() == child.input_dim(),
            "KernelExpr::warp: feature map output dimension " + std::to_string(map.output_dim()) +
                " does not match child input dimension " + std::to_string(child.input_dim()));
    return KernelExpr(WarpNode{std::move(map), std::move(child)});
  }

  const Node& node() const { return node_; }

  Index input_dim() const {
    return std::visit(
        [](const auto& n) -> Index {
          using T = std::decay_t<decltype(n)>;
          if constexpr (std::is_same_v<T, BaseNode>) return n.kernel.dim();
          else if constexpr (std::is_same_v<T, ScaleNode>) return n.child->input_dim();
          else if constexpr (std::is_same_v<T, WarpNode>) return n.map.input_dim();
          else return n.left->input_dim();
        },
        node_);
  }

  double operator()(Point x, Point xp) const {
    return std::visit(
        [&](const auto& n) -> double {
          using T = std::decay_t<decltype(n)>;
          if constexpr (std::is_same_v<T, BaseNode>) {
            return n.kernel(x, xp);
          } else if constexpr (std::is_same_v<T, ScaleNode>) {
            return n.alpha.value * (*n.child)(x, xp);
          } else if constexpr (std::is_same_v<T, SumNode>) {
            return n.alpha1.value * (*n.left)(x, xp) + n.alpha2.value * (*n.right)(x, xp);
          } else if constexpr (std::is_same_v<T, ProductNode>) {
            return (*n.left)(x, xp) * (*n.right)(x, xp);
          } else {
            const Vector fx = n.map.forward(x), fxp = n.map.forward(xp);
            return (*n.child)(Point(fx.data(), fx.size()), Point(fxp.data(), fxp.size()));
          }
        },
        node_);
  }

  Matrix gram(const Points& X) const {
    return std::visit(
        [&](const auto& n) -> Matrix {
          using T = std::decay_t<decltype(n)>;
          if constexpr (std::is_same_v<T, BaseNode>) {
            return base_gram(n.kernel, X);
          } else if constexpr (std::is_same_v<T, ScaleNode>) {
            return n.alpha.value * n.child->gram(X);
          } else if constexpr (std::is_same_v<T, SumNode>) {
            return n.alpha1.value * n.left->gram(X) + n.alpha2.value * n.right->gram(X);
          } else if constexpr (std::is_same_v<T, ProductNode>) {
            return n.left->gram(X).cwiseProduct(n.right->gram(X));
          } else {
            return n.child->gram(Points(n.map.forward(X)));
          }
        },
        node_);
  }

  Matrix gram(const Points& X1, const Points& X2) const {
    return std::visit(
        [&](const auto& n) -> Matrix {
          using T = std::decay_t<decltype(n)>;
          if constexpr (std::is_same_v<T, BaseNode>) {
            return base_gram(n.kernel, X1, X2);
          } else if constexpr (std::is_same_v<T, ScaleNode>) {
            return n.alpha.value * n.child->gram(X1, X2);
          } else if constexpr (std::is_same_v<T, SumNode>) {
            return n.alpha1.value * n.left->gram(X1, X2) + n.alpha2.value * n.right->gram(X1, X2);
          } else if constexpr (std::is_same_v<T, ProductNode>) {
            return n.left->gram(X1, X2).cwiseProduct(n.right->gram(X1, X2));
          } else {
            return n.child->gram(Points(n.map.forward(X1)), Points(n.map.forward(X2)));
          }
        },
        node_);
  }

  Vector diag(const Points& X) const {
    Vector d(X.rows());
    for (Index i = 0; i < X.rows(); ++i) d[i] = (*this)(row(X, i), row(X, i));
    return d;
  }

  Index num_params() const {
    return std::visit(
        [](const auto& n) -> Index {
          using T = std::decay_t<decltype(n)>;
          if constexpr (std::is_same_v<T, BaseNode>) return n.kernel.num_params();
          else if constexpr (std::is_same_v<T, ScaleNode>) return (n.alpha.learnable ? 1 : 0) + n.child->num_params();
          else if constexpr (std::is_same_v<T, SumNode>)
            return (n.alpha1.learnable ? 1 : 0) + (n.alpha2.learnable ? 1 : 0) + n.left->num_params() +
                   n.right->num_params();
          else if constexpr (std::is_same_v<T, ProductNode>) return n.left->num_params() + n.right->num_params();
          else return n.map.num_params() + n.child->num_params();
        },
        node_);
  }

  void get_params(std::span<double> out) const {
    std::size_t pos = 0;
    collect(out, pos);
  }

  void set_params(std::span<const double> in) {
    std::size_t pos = 0;
    assign(in, pos);
  }

  void describe(ParamLayout& layout, const std::string& prefix) const {
    std::visit(
        [&](const auto& n) {
          using T = std::decay_t<decltype(n)>;
          if constexpr (std::is_same_v<T, BaseNode>) {
            n.kernel.describe(layout, prefix + ".base");
          } else if constexpr (std::is_same_v<T, ScaleNode>) {
            if (n.alpha.learnable) layout.add(prefix + ".log_scale", 1);
            n.child->describe(layout, prefix + ".scale");
          } else if constexpr (std::is_same_v<T, SumNode>) {
            if (n.alpha1.learnable) layout.add(prefix + ".log_alpha1", 1);
            if (n.alpha2.learnable) layout.add(prefix + ".log_alpha2", 1);
            n.left->describe(layout, prefix + ".sum.l");
            n.right->describe(layout, prefix + ".sum.r");
          } else if constexpr (std::is_same_v<T, ProductNode>) {
            n.left->describe(layout, prefix + ".prod.l");
            n.right->describe(layout, prefix + ".prod.r");
          } else {
            layout.add(prefix + ".warp_net", n.map.num_params());
            n.child->describe(layout, prefix + ".warp");
          }
        },
        node_);
  }

  void randomize(Rng& rng) {
    std::visit(
        [&](auto& n) {
          using T = std::decay_t<decltype(n)>;
          if constexpr (std::is_same_v<T, BaseNode>) {
            n.kernel.randomize(rng);
          } else if constexpr (std::is_same_v<T, ScaleNode>) {
            if (n.alpha.learnable) n.alpha.value = std::exp(uniform(rng, -1.0, 1.0));
            n.child->randomize(rng);
          } else if constexpr (std::is_same_v<T, SumNode>) {
            if (n.alpha1.learnable) n.alpha1.value = std::exp(uniform(rng, -1.0, 1.0));
            if (n.alpha2.learnable) n.alpha2.value = std::exp(uniform(rng, -1.0, 1.0));
            n.left->randomize(rng);
            n.right->randomize(rng);
          } else if constexpr (std::is_same_v<T, ProductNode>) {
            n.left->randomize(rng);
            n.right->randomize(rng);
          } else {
            n.map.init(rng);
            n.child->randomize(rng);
          }
        },
        node_);
  }

  /// Backward pass of gram(X) given G = dL/dC: accumulates into grad
  /// (length num_params()) and, when non-null, into dX = dL/dX.
  void gram_backward(const Points& X, const Matrix& G, std::span<double> grad,
                     Points* dX = nullptr) const {
    std::visit(
        [&](const auto& n) {
          using T = std::decay_t<decltype(n)>;
          if constexpr (std::is_same_v<T, BaseNode>) {
            base_gram_backward(n.kernel, X, G, grad, dX);
          } else if constexpr (std::is_same_v<T, ScaleNode>) {
            std::size_t pos = 0;
            if (n.alpha.learnable) {
              grad[pos++] += n.alpha.value * G.cwiseProduct(n.child->gram(X)).sum();
            }
            n.child->gram_backward(X, n.alpha.value * G, grad.subspan(pos), dX);
          } else if constexpr (std::is_same_v<T, SumNode>) {
            std::size_t pos = 0;
            if (n.alpha1.learnable) grad[pos++] += n.alpha1.value * G.cwiseProduct(n.left->gram(X)).sum();
            if (n.alpha2.learnable) grad[pos++] += n.alpha2.value * G.cwiseProduct(n.right->gram(X)).sum();
            const auto nl = static_cast<std::size_t>(n.left->num_params());
            n.left->gram_backward(X, n.alpha1.value * G, grad.subspan(pos, nl), dX);
            n.right->gram_backward(X, n.alpha2.value * G, grad.subspan(pos + nl), dX);
          } else if constexpr (std::is_same_v<T, ProductNode>) {
            const Matrix Cl = n.left->gram(X), Cr = n.right->gram(X);
            const auto nl = static_cast<std::size_t>(n.left->num_params());
            n.left->gram_backward(X, G.cwiseProduct(Cr), grad.subspan(0, nl), dX);
            n.right->gram_backward(X, G.cwiseProduct(Cl), grad.subspan(nl), dX);
          } else {
            Mlp::Tape tape;
            const Points F = n.map.forward(X, tape);
            Points dF = Points::Zero(F.rows(), F.cols());
            const auto nm = static_cast<std::size_t>(n.map.num_params());
            n.child->gram_backward(F, G, grad.subspan(nm), &dF);
            n.map.backward(tape, Matrix(dF), grad.subspan(0, nm), dX);
          }
        },
        node_);
  }

 private:
  template <class N>
    requires(!std::is_same_v<std::decay_t<N>, KernelExpr> && !std::is_same_v<std::decay_t<N>, BaseKernel>)
  explicit KernelExpr(N n) : node_(std::move(n)) {}

  static void check(const Coefficient& c) {
    require(c.value >= 0 && std::isfinite(c.value),
            "kernel scale coefficient must be non-negative, got " + std::to_string(c.value));
  }

  void collect(std::span<double> out, std::size_t& pos) const {
    std::visit(
        [&](const auto& n) {
          using T = std::decay_t<decltype(n)>;
          if constexpr (std::is_same_v<T, BaseNode>) {
            n.kernel.get_params(out.subspan(pos));
            pos += static_cast<std::size_t>(n.kernel.num_params());
          } else if constexpr (std::is_same_v<T, ScaleNode>) {
            if (n.alpha.learnable) out[pos++] = std::log(n.alpha.value);
            n.child->collect(out, pos);
          } else if constexpr (std::is_same_v<T, SumNode>) {
            if (n.alpha1.learnable) out[pos++] = std::log(n.alpha1.value);
            if (n.alpha2.learnable) out[pos++] = std::log(n.alpha2.value);
            n.left->collect(out, pos);
            n.right->collect(out, pos);
          } else if constexpr (std::is_same_v<T, ProductNode>) {
            n.left->collect(out, pos);
            n.right->collect(out, pos);
          } else {
            n.map.get_params(out.subspan(pos));
            pos += static_cast<std::size_t>(n.map.num_params());
            n.child->collect(out, pos);
          }
        },
        node_);
  }

  void assign(std::span<const double> in, std::size_t& pos) {
    std::visit(
        [&](auto& n) {
          using T = std::decay_t<decltype(n)>;
          if constexpr (std::is_same_v<T, BaseNode>) {
            n.kernel.set_params(in.subspan(pos));
            pos += static_cast<std::size_t>(n.kernel.num_params());
          } else if constexpr (std::is_same_v<T, ScaleNode>) {
            if (n.alpha.learnable) n.alpha.value = std::exp(in[pos++]);
            n.child->assign(in, pos);
          } else if constexpr (std::is_same_v<T, SumNode>) {
            if (n.alpha1.learnable) n.alpha1.value = std::exp(in[pos++]);
            if (n.alpha2.learnable) n.alpha2.value = std::exp(in[pos++]);
            n.left->assign(in, pos);
            n.right->assign(in, pos);
          } else if constexpr (std::is_same_v<T, ProductNode>) {
            n.left->assign(in, pos);
            n.right->assign(in, pos);
          } else {
            n.map.set_params(in.subspan(pos));
            pos += static_cast<std::size_t>(n.map.num_params());
            n.child->assign(in, pos);
          }
        },
        node_);
  }

  Node node_;
};

inline double compose(const KernelExpr& expr, Point x, Point xp) { return expr(x, xp); }

/// Gram matrix of any kernel-like object. For the self-Gram each unordered
/// pair is evaluated once and mirrored.
template <class K>
Matrix gram(const K& k, const Points& X) {
  const Index n = X.rows();
  Matrix C(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = i; j < n; ++j) {
      const double v = k(row(X, i), row(X, j));
      if (!std::isfinite(v)) {
        throw NumericalError("gram: non-finite kernel value at (" + std::to_string(i) + ", " +
                             std::to_string(j) + ")");
      }
      C(i, j) = C(j, i) = v;
    }
  }
  return C;
}

template <class K>
Matrix gram(const K& k, const Points& X1, const Points& X2) {
  Matrix C(X1.rows(), X2.rows());
  for (Index i = 0; i < X1.rows(); ++i) {
    for (Index j = 0; j < X2.rows(); ++j) {
      const double v = k(row(X1, i), row(X2, j));
      if (!std::isfinite(v)) {
        throw NumericalError("gram: non-finite kernel value at (" + std::to_string(i) + ", " +
                             std::to_string(j) + ")");
      }
      C(i, j) = v;
    }
  }
  return C;
}

struct ValidityReport {
  bool symmetric = true;
  bool psd = true;
  double max_asymmetry = 0.0;         // relative, max over sampled pairs
  std::vector<double> min_eigenvalue;  // per point set
  std::vector<double> psd_threshold;   // -tol * n * max|C| per point set
};

/// Numerical check of symmetry and positive semi-definiteness of `k` on the
/// given point sets. `k` is any callable double(Point, Point).
template <class K>
ValidityReport validate_kernel(const K& k, const std::vector<Points>& point_sets, double tol = 1e-8) {
  require(tol > 0, "validate_kernel: tol must be positive");
  ValidityReport report;
  for (const Points& X : point_sets) {
    const Index n = X.rows();
    require(n >= 1, "validate_kernel: empty point set");
    Matrix C(n, n);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j) C(i, j) = k(row(X, i), row(X, j));
    if (!C.allFinite()) throw NumericalError("validate_kernel: non-finite kernel value");
    for (Index i = 0; i < n; ++i) {
      for (Index j = i + 1; j < n; ++j) {
        const double rel = std::abs(C(i, j) - C(j, i)) / std::max(1.0, std::abs(C(i, j)));
        report.max_asymmetry = std::max(report.max_asymmetry, rel);
        if (rel > tol) report.symmetric = false;
      }
    }
    const Matrix S = 0.5 * (C + C.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> eig(S, Eigen::EigenvaluesOnly);
    if (eig.info() != Eigen::Success) throw NumericalError("validate_kernel: eigen-decomposition failed");
    const double min_eig = eig.eigenvalues().minCoeff();
    const double threshold = -tol * static_cast<double>(n) * C.cwiseAbs().maxCoeff();
    report.min_eigenvalue.push_back(min_eig);
    report.psd_threshold.push_back(threshold);
    if (min_eig < threshold) report.psd = false;
  }
  return report;
}

}  // namespace seekgp
