#pragma once

#include "kernels.hpp"
#include "neural.hpp"

#include <optional>
#include <string>
#include <vector>

namespace seekgp {

enum class SeekActivation { exp, sinh, cosh, identity };

inline std::string to_string(SeekActivation a) {
  switch (a) {
    case SeekActivation::exp: return "exp";
    case SeekActivation::sinh: return "sinh";
    case SeekActivation::cosh: return "cosh";
    case SeekActivation::identity: return "iden";
  }
  return "?";
}

inline std::optional<SeekActivation> parse_seek_activation(const std::string& s) {
  if (s == "exp") return SeekActivation::exp;
  if (s == "sinh") return SeekActivation::sinh;
  if (s == "cosh") return SeekActivation::cosh;
  if (s == "iden" || s == "identity") return SeekActivation::identity;
  return std::nullopt;
}

/// Pre-activations are clamped to this magnitude before exp/sinh/cosh.
inline constexpr double kPreactivationClamp = 30.0;

inline double apply_activation(SeekActivation a, double z) {
  if (a == SeekActivation::identity) return z;
  const double zc = std::clamp(z, -kPreactivationClamp, kPreactivationClamp);
  switch (a) {
    case SeekActivation::exp: return std::exp(zc);
    case SeekActivation::sinh: return std::sinh(zc);
    case SeekActivation::cosh: return std::cosh(zc);
    case SeekActivation::identity: break;
  }
  return z;
}

inline double activation_derivative(SeekActivation a, double z) {
  if (a == SeekActivation::identity) return 1.0;
  if (std::abs(z) > kPreactivationClamp) return 0.0;
  switch (a) {
    case SeekActivation::exp: return std::exp(z);
    case SeekActivation::sinh: return std::cosh(z);
    case SeekActivation::cosh: return std::sinh(z);
    case SeekActivation::identity: break;
  }
  return 1.0;
}

/// Elementwise activation over a matrix of pre-activations.
inline Matrix apply_activation(SeekActivation a, const Matrix& Z) {
  if (a == SeekActivation::identity) return Z;
  const Eigen::ArrayXXd zc = Z.array().max(-kPreactivationClamp).min(kPreactivationClamp);
  switch (a) {
    case SeekActivation::exp: return zc.exp().matrix();
    case SeekActivation::sinh: return (0.5 * (zc.exp() - (-zc).exp())).matrix();
    case SeekActivation::cosh: return (0.5 * (zc.exp() + (-zc).exp())).matrix();
    case SeekActivation::identity: break;
  }
  return Z;
}

inline Matrix activation_derivative(SeekActivation a, const Matrix& Z) {
  if (a == SeekActivation::identity) return Matrix::Ones(Z.rows(), Z.cols());
  const Eigen::ArrayXXd zc = Z.array().max(-kPreactivationClamp).min(kPreactivationClamp);
  Eigen::ArrayXXd d;
  switch (a) {
    case SeekActivation::exp: d = zc.exp(); break;
    case SeekActivation::sinh: d = 0.5 * (zc.exp() + (-zc).exp()); break;
    case SeekActivation::cosh: d = 0.5 * (zc.exp() - (-zc).exp()); break;
    case SeekActivation::identity: break;
  }
  return (Z.array().abs() > kPreactivationClamp).select(0.0, d).matrix();
}

namespace detail {

inline double dot_rows(const Matrix& A, Index i, const Matrix& B, Index j) {
  double s = 0.0;
  for (Index k = 0; k < A.cols(); ++k) s += A(i, k) * B(j, k);
  return s;
}

}  // namespace detail

/// Activation applied to an input-weighted sum of base kernels plus a bias
/// inner product:
///
///   c(x, x') = phi(z),  z = sum_m w_m(x)^T w_m(x') c_m(x, x') + b(x)^T b(x').
///
/// Each w_m is either its own network or a slice of one shared network.
/// Every term of z is a valid kernel (warped linear kernels, products, sums)
/// and phi has a power series with non-negative coefficients, so c is valid.
class SeekKernel {
 public:
  SeekKernel(std::vector<BaseKernel> bases, std::vector<Mlp> weight_nets, std::optional<Mlp> bias_net,
             SeekActivation activation, bool shared_weight_net = false)
      : bases_(std::move(bases)),
        weight_nets_(std::move(weight_nets)),
        bias_net_(std::move(bias_net)),
        activation_(activation),
        shared_(shared_weight_net) {
    const auto M = static_cast<Index>(bases_.size());
    require(M > 0 || (bias_net_ && bias_net_->output_dim() >= 1),
            "SeekKernel: with no base kernels a bias network with B >= 1 outputs is required");
    input_dim_ = M > 0 ? bases_[0].dim() : bias_net_->input_dim();
    for (const auto& b : bases_) require(b.dim() == input_dim_, "SeekKernel: base kernel dimensions differ");
    if (shared_ && M > 0) {
      require(weight_nets_.size() == 1, "SeekKernel: shared mode needs exactly one weight network");
      const Index out = weight_nets_[0].output_dim();
      require(out % M == 0, "SeekKernel: shared weight network output must split evenly across bases");
      weight_dims_.assign(static_cast<std::size_t>(M), out / M);
    } else {
      require(static_cast<Index>(weight_nets_.size()) == M, "SeekKernel: need one weight network per base kernel");
      for (const auto& n : weight_nets_) weight_dims_.push_back(n.output_dim());
    }
    for (const auto& n : weight_nets_) require(n.input_dim() == input_dim_, "SeekKernel: weight network input dimension mismatch");
    if (bias_net_) require(bias_net_->input_dim() == input_dim_, "SeekKernel: bias network input dimension mismatch");
  }

  Index input_dim() const { return input_dim_; }
  Index num_bases() const { return static_cast<Index>(bases_.size()); }
  const std::vector<BaseKernel>& bases() const { return bases_; }
  const std::vector<Mlp>& weight_nets() const { return weight_nets_; }
  const std::optional<Mlp>& bias_net() const { return bias_net_; }
  SeekActivation activation() const { return activation_; }
  bool shared_weight_net() const { return shared_; }

  /// Network outputs at a point set.
  struct Features {
    std::vector<Matrix> weights;  // per base, N x W_m
    Matrix bias;                  // N x B (B may be 0)
  };

  Features features(const Points& X) const {
    std::vector<Mlp::Tape> wt;
    Mlp::Tape bt;
    return features(X, wt, bt);
  }

  double preactivation(Point x, Point xp) const {
    require(static_cast<Index>(x.size()) == input_dim_ && static_cast<Index>(xp.size()) == input_dim_,
            "SeekKernel: input dimension mismatch");
    Points X(2, input_dim_);
    std::copy(x.begin(), x.end(), X.data());
    std::copy(xp.begin(), xp.end(), X.data() + input_dim_);
    const Features f = features(X);
    return pair_preactivation(f, 0, f, 1, bases_, x, xp);
  }

  double operator()(Point x, Point xp) const { return apply_activation(activation_, preactivation(x, xp)); }

  Matrix gram(const Points& X) const {
    const Features f = features(X);
    const Matrix C = apply_activation(activation_, preactivation_gram(X, f, nullptr));
    if (!C.allFinite()) {
      for (Index j = 0; j < C.cols(); ++j)
        for (Index i = 0; i < C.rows(); ++i)
          if (!std::isfinite(C(i, j)))
            throw NumericalError("SeekKernel: non-finite kernel value at pair (" + std::to_string(i) + ", " +
                                 std::to_string(j) + ")");
    }
    return C;
  }

  Matrix gram(const Points& X1, const Points& X2) const {
    const Features f1 = features(X1), f2 = features(X2);
    Matrix Z = f1.bias.cols() > 0 ? Matrix(f1.bias * f2.bias.transpose()) : Matrix(Matrix::Zero(X1.rows(), X2.rows()));
    for (std::size_t m = 0; m < bases_.size(); ++m)
      Z += (f1.weights[m] * f2.weights[m].transpose()).cwiseProduct(base_gram(bases_[m], X1, X2));
    const Matrix C = apply_activation(activation_, Z);
    if (!C.allFinite()) throw NumericalError("SeekKernel: non-finite cross-covariance");
    return C;
  }

  Vector diag(const Points& X) const {
    const Features f = features(X);
    Vector d(X.rows());
    for (Index i = 0; i < X.rows(); ++i)
      d[i] = apply_activation(activation_, pair_preactivation(f, i, f, i, bases_, row(X, i), row(X, i)));
    return d;
  }

  Index num_params() const {
    Index n = 0;
    for (const auto& b : bases_) n += b.num_params();
    for (const auto& w : weight_nets_) n += w.num_params();
    if (bias_net_) n += bias_net_->num_params();
    return n;
  }

  void get_params(std::span<double> out) const {
    std::size_t pos = 0;
    for (const auto& b : bases_) {
      b.get_params(out.subspan(pos));
      pos += static_cast<std::size_t>(b.num_params());
    }
    for (const auto& w : weight_nets_) {
      w.get_params(out.subspan(pos));
      pos += static_cast<std::size_t>(w.num_params());
    }
    if (bias_net_) bias_net_->get_params(out.subspan(pos));
  }

  void set_params(std::span<const double> in) {
    std::size_t pos = 0;
    for (auto& b : bases_) {
      b.set_params(in.subspan(pos));
      pos += static_cast<std::size_t>(b.num_params());
    }
    for (auto& w : weight_nets_) {
      w.set_params(in.subspan(pos));
      pos += static_cast<std::size_t>(w.num_params());
    }
    if (bias_net_) bias_net_->set_params(in.subspan(pos));
  }

  void describe(ParamLayout& layout, const std::string& prefix) const {
    for (std::size_t m = 0; m < bases_.size(); ++m)
      bases_[m].describe(layout, prefix + ".base[" + std::to_string(m) + "]");
    for (std::size_t m = 0; m < weight_nets_.size(); ++m)
      layout.add(prefix + ".weight_net[" + std::to_string(m) + "]", weight_nets_[m].num_params());
    if (bias_net_) layout.add(prefix + ".bias_net", bias_net_->num_params());
  }

  void randomize(Rng& rng) {
    for (auto& b : bases_) b.randomize(rng);
    for (auto& w : weight_nets_) w.init(rng);
    if (bias_net_) bias_net_->init(rng);
  }

  /// Backward pass of gram(X) given G = dL/dC.
  void gram_backward(const Points& X, const Matrix& G, std::span<double> grad) const {
    std::vector<Mlp::Tape> wtapes;
    Mlp::Tape btape;
    const Features f = features(X, wtapes, btape);
    const auto M = static_cast<std::size_t>(bases_.size());
    std::vector<Matrix> K;
    const Matrix Z = preactivation_gram(X, f, &K);
    const Matrix A = G.cwiseProduct(activation_derivative(activation_, Z));

    std::size_t pos = 0;
    std::vector<Matrix> dW;
    for (std::size_t m = 0; m < M; ++m) {
      const Matrix& Wm = f.weights[m];
      const Matrix S = A.cwiseProduct(K[m]);
      dW.push_back((S + S.transpose()) * Wm);
      const Matrix Gk = A.cwiseProduct(Wm * Wm.transpose());
      base_gram_backward(bases_[m], X, Gk, grad.subspan(pos));
      pos += static_cast<std::size_t>(bases_[m].num_params());
    }

    if (shared_ && M > 0) {
      Matrix dOut(X.rows(), weight_nets_[0].output_dim());
      Index col = 0;
      for (std::size_t m = 0; m < M; ++m) {
        dOut.middleCols(col, dW[m].cols()) = dW[m];
        col += dW[m].cols();
      }
      weight_nets_[0].backward(wtapes[0], dOut, grad.subspan(pos));
      pos += static_cast<std::size_t>(weight_nets_[0].num_params());
    } else {
      for (std::size_t m = 0; m < M; ++m) {
        weight_nets_[m].backward(wtapes[m], dW[m], grad.subspan(pos));
        pos += static_cast<std::size_t>(weight_nets_[m].num_params());
      }
    }

    if (bias_net_) {
      const Matrix dB = (A + A.transpose()) * f.bias;
      bias_net_->backward(btape, dB, grad.subspan(pos));
    }
  }

 private:
  Features features(const Points& X, std::vector<Mlp::Tape>& wtapes, Mlp::Tape& btape) const {
    Features f;
    wtapes.assign(weight_nets_.size(), {});
    if (shared_ && !bases_.empty()) {
      const Matrix out = weight_nets_[0].forward(X, wtapes[0]);
      Index col = 0;
      for (Index d : weight_dims_) {
        f.weights.push_back(out.middleCols(col, d));
        col += d;
      }
    } else {
      for (std::size_t m = 0; m < weight_nets_.size(); ++m) f.weights.push_back(weight_nets_[m].forward(X, wtapes[m]));
    }
    f.bias = bias_net_ ? bias_net_->forward(X, btape) : Matrix(X.rows(), 0);
    for (const auto& w : f.weights)
      if (!w.allFinite()) throw NumericalError("SeekKernel: weight network produced a non-finite output");
    if (!f.bias.allFinite()) throw NumericalError("SeekKernel: bias network produced a non-finite output");
    return f;
  }

  /// z over all pairs of X; the base Grams are kept in *K when requested.
  Matrix preactivation_gram(const Points& X, const Features& f, std::vector<Matrix>* K) const {
    const Index n = X.rows();
    Matrix Z = f.bias.cols() > 0 ? Matrix(f.bias * f.bias.transpose()) : Matrix(Matrix::Zero(n, n));
    for (std::size_t m = 0; m < bases_.size(); ++m) {
      Matrix Km = base_gram(bases_[m], X);
      Z += (f.weights[m] * f.weights[m].transpose()).cwiseProduct(Km);
      if (K) K->push_back(std::move(Km));
    }
    Z.triangularView<Eigen::StrictlyLower>() = Z.transpose();
    return Z;
  }

  static double pair_preactivation(const Features& f1, Index i, const Features& f2, Index j,
                                   const std::vector<BaseKernel>& bases, Point x, Point xp) {
    double z = 0.0;
    for (std::size_t m = 0; m < bases.size(); ++m)
      z += detail::dot_rows(f1.weights[m], i, f2.weights[m], j) * bases[m](x, xp);
    if (f1.bias.cols() > 0) z += detail::dot_rows(f1.bias, i, f2.bias, j);
    return z;
  }

  std::vector<BaseKernel> bases_;
  std::vector<Mlp> weight_nets_;
  std::optional<Mlp> bias_net_;
  SeekActivation activation_;
  bool shared_;
  Index input_dim_ = 0;
  std::vector<Index> weight_dims_;
};

inline double preactivation(const SeekKernel& k, Point x, Point xp) { return k.preactivation(x, xp); }
inline double seek_eval(const SeekKernel& k, Point x, Point xp) { return k(x, xp); }

struct SeekOptions {
  std::vector<BaseKind> bases{BaseKind::gaussian};
  std::vector<Index> weight_hidden;  // empty -> (2P, 2P)
  std::vector<Index> bias_hidden;    // empty -> (2P, 2P)
  Index weight_outputs = 1;
  Index bias_outputs = 2;
  Activation hidden_activation = Activation::softplus;
  SeekActivation activation = SeekActivation::exp;
  bool shared_weight_net = false;
};

/// Builds a SEEK kernel over P inputs; defaults follow the comparative-study
/// configuration (one Gaussian base, (2P, 2P) softplus nets, W = 1, B = 2, exp).
inline SeekKernel make_seek(Index P, const SeekOptions& opt, std::uint64_t seed = 0) {
  Rng rng(seed);
  const std::vector<Index> wh = opt.weight_hidden.empty() ? std::vector<Index>{2 * P, 2 * P} : opt.weight_hidden;
  const std::vector<Index> bh = opt.bias_hidden.empty() ? std::vector<Index>{2 * P, 2 * P} : opt.bias_hidden;
  std::vector<BaseKernel> bases;
  for (BaseKind kind : opt.bases) bases.emplace_back(kind, Vector::Zero(P));
  std::vector<Mlp> wnets;
  const auto M = static_cast<Index>(bases.size());
  if (opt.shared_weight_net && M > 0) {
    wnets.emplace_back(MlpSpec{P, wh, M * opt.weight_outputs, opt.hidden_activation});
  } else {
    for (Index m = 0; m < M; ++m) wnets.emplace_back(MlpSpec{P, wh, opt.weight_outputs, opt.hidden_activation});
  }
  std::optional<Mlp> bnet;
  if (opt.bias_outputs > 0) bnet.emplace(MlpSpec{P, bh, opt.bias_outputs, opt.hidden_activation});
  SeekKernel k(std::move(bases), std::move(wnets), std::move(bnet), opt.activation, opt.shared_weight_net);
  k.randomize(rng);
  return k;
}

/// Input-dependent lengthscale kernel:
///
///   c = prod_p sqrt(2 l_p(x) l_p(x') / (l_p(x)^2 + l_p(x')^2))
///       * exp(-sum_p (x_p - x'_p)^2 / (l_p(x)^2 + l_p(x')^2)),
///
/// with l(x) = softplus(net(x)) + 1e-3.
class GibbsKernel {
 public:
  static constexpr double kFloor = 1e-3;

  explicit GibbsKernel(Mlp lengthscale_net) : net_(std::move(lengthscale_net)) {
    require(net_.output_dim() == net_.input_dim(), "GibbsKernel: lengthscale network must map R^P to R^P");
  }

  Index input_dim() const { return net_.input_dim(); }
  const Mlp& lengthscale_net() const { return net_; }

  Vector lengthscales(Point x) const {
    Vector u = net_.forward(x);
    for (Index p = 0; p < u.size(); ++p) u[p] = softplus(u[p]) + kFloor;
    return u;
  }

  Matrix lengthscales(const Points& X) const {
    Mlp::Tape tape;
    return transform(net_.forward(X, tape));
  }

  double operator()(Point x, Point xp) const {
    const Vector lx = lengthscales(x), lxp = lengthscales(xp);
    return pair_value(x, xp, lx.data(), lxp.data());
  }

  Matrix gram(const Points& X) const {
    const Points LR = lengthscales(X);
    const Index n = X.rows();
    Matrix C(n, n);
    for (Index i = 0; i < n; ++i) {
      C(i, i) = 1.0;
      for (Index j = i + 1; j < n; ++j)
        C(i, j) = C(j, i) = pair_value(row(X, i), row(X, j), LR.data() + i * LR.cols(), LR.data() + j * LR.cols());
    }
    return C;
  }

  Matrix gram(const Points& X1, const Points& X2) const {
    const Points L1 = lengthscales(X1), L2 = lengthscales(X2);
    Matrix C(X1.rows(), X2.rows());
    for (Index i = 0; i < X1.rows(); ++i)
      for (Index j = 0; j < X2.rows(); ++j)
        C(i, j) = pair_value(row(X1, i), row(X2, j), L1.data() + i * L1.cols(), L2.data() + j * L2.cols());
    return C;
  }

  Vector diag(const Points& X) const { return Vector::Ones(X.rows()); }

  Index num_params() const { return net_.num_params(); }
  void get_params(std::span<double> out) const { net_.get_params(out); }
  void set_params(std::span<const double> in) { net_.set_params(in); }
  void describe(ParamLayout& layout, const std::string& prefix) const {
    layout.add(prefix + ".lengthscale_net", net_.num_params());
  }
  void randomize(Rng& rng) { net_.init(rng); }

  void gram_backward(const Points& X, const Matrix& G, std::span<double> grad) const {
    Mlp::Tape tape;
    const Matrix U = net_.forward(X, tape);
    const Points L = transform(U);
    const Index n = X.rows(), P = X.cols();
    Matrix dL = Matrix::Zero(n, P);
    for (Index i = 0; i < n; ++i) {
      for (Index j = i + 1; j < n; ++j) {
        const double adj = G(i, j) + G(j, i);
        if (adj == 0.0) continue;
        const double* li = L.data() + i * P;
        const double* lj = L.data() + j * P;
        const double c = pair_value(row(X, i), row(X, j), li, lj);
        const double ac = adj * c;
        for (Index p = 0; p < P; ++p) {
          const double r = X(i, p) - X(j, p);
          const double s = li[p] * li[p] + lj[p] * lj[p];
          const double s2 = s * s;
          dL(i, p) += ac * (0.5 / li[p] - li[p] / s + 2.0 * li[p] * r * r / s2);
          dL(j, p) += ac * (0.5 / lj[p] - lj[p] / s + 2.0 * lj[p] * r * r / s2);
        }
      }
    }
    for (Index i = 0; i < n; ++i)
      for (Index p = 0; p < P; ++p) dL(i, p) *= sigmoid(U(i, p));
    net_.backward(tape, dL, grad);
  }

 private:
  static Matrix transform(Matrix U) {
    for (Index i = 0; i < U.size(); ++i) U.data()[i] = softplus(U.data()[i]) + kFloor;
    return U;
  }

  static double pair_value(Point x, Point xp, const double* lx, const double* lxp) {
    double log_prefactor = 0.0, expo = 0.0;
    for (std::size_t p = 0; p < x.size(); ++p) {
      require(lx[p] > 0 && lxp[p] > 0, "GibbsKernel: lengthscales must be positive");
      const double s = lx[p] * lx[p] + lxp[p] * lxp[p];
      const double r = x[p] - xp[p];
      log_prefactor += 0.5 * std::log(2.0 * lx[p] * lxp[p] / s);
      expo += r * r / s;
    }
    return std::exp(log_prefactor - expo);
  }

  Mlp net_;
};

inline double gibbs_eval(const GibbsKernel& k, Point x, Point xp) { return k(x, xp); }

/// Base kernel applied to learned features: c(x, x') = k(psi(x), psi(x')).
class DeepKernel {
 public:
  DeepKernel(Mlp feature_net, BaseKernel base) : net_(std::move(feature_net)), base_(std::move(base)) {
    require(net_.output_dim() == base_.dim(), "DeepKernel: feature dimension must match the base kernel dimension");
  }

  Index input_dim() const { return net_.input_dim(); }
  const Mlp& feature_net() const { return net_; }
  const BaseKernel& base() const { return base_; }

  double operator()(Point x, Point xp) const {
    const Vector fx = net_.forward(x), fxp = net_.forward(xp);
    return base_(Point(fx.data(), fx.size()), Point(fxp.data(), fxp.size()));
  }

  Matrix gram(const Points& X) const { return base_gram(base_, Points(net_.forward(X))); }
  Matrix gram(const Points& X1, const Points& X2) const {
    return base_gram(base_, Points(net_.forward(X1)), Points(net_.forward(X2)));
  }
  Vector diag(const Points& X) const { return Vector::Ones(X.rows()); }

  Index num_params() const { return net_.num_params() + base_.num_params(); }
  void get_params(std::span<double> out) const {
    net_.get_params(out);
    base_.get_params(out.subspan(static_cast<std::size_t>(net_.num_params())));
  }
  void set_params(std::span<const double> in) {
    net_.set_params(in);
    base_.set_params(in.subspan(static_cast<std::size_t>(net_.num_params())));
  }
  void describe(ParamLayout& layout, const std::string& prefix) const {
    layout.add(prefix + ".feature_net", net_.num_params());
    base_.describe(layout, prefix + ".base");
  }
  void randomize(Rng& rng) {
    net_.init(rng);
    base_.randomize(rng);
  }

  void gram_backward(const Points& X, const Matrix& G, std::span<double> grad) const {
    Mlp::Tape tape;
    const Points F = net_.forward(X, tape);
    Points dF = Points::Zero(F.rows(), F.cols());
    const auto nn = static_cast<std::size_t>(net_.num_params());
    base_gram_backward(base_, F, G, grad.subspan(nn), &dF);
    net_.backward(tape, Matrix(dF), grad.subspan(0, nn));
  }

 private:
  Mlp net_;
  BaseKernel base_;
};

inline double deep_eval(const DeepKernel& k, Point x, Point xp) { return k(x, xp); }

/// Gibbs kernel with a (hidden..., P) softplus lengthscale network; default (4P, 4P).
inline GibbsKernel make_gibbs(Index P, std::vector<Index> hidden = {}, std::uint64_t seed = 0) {
  if (hidden.empty()) hidden = {4 * P, 4 * P};
  Mlp net(MlpSpec{P, hidden, P, Activation::softplus});
  net.init(seed);
  return GibbsKernel(std::move(net));
}

/// Deep kernel with a (hidden..., P) softplus feature network; default (4P, 4P).
inline DeepKernel make_deep(Index P, BaseKind base = BaseKind::gaussian, std::vector<Index> hidden = {},
                            std::uint64_t seed = 0) {
  if (hidden.empty()) hidden = {4 * P, 4 * P};
  Rng rng(seed);
  Mlp net(MlpSpec{P, hidden, P, Activation::softplus});
  BaseKernel b(base, Vector::Zero(P));
  DeepKernel k(std::move(net), std::move(b));
  k.randomize(rng);
  return k;
}

}  // namespace seekgp
