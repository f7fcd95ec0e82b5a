#pragma once

#include "core.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace seekgp {

/// A named contiguous block of a flat parameter vector.
struct ParamSegment {
  std::string name;
  Index offset = 0;
  Index size = 0;
};

struct ParamGroup {
  std::string name;
  Vector values;
};

class ParamLayout {
 public:
  ParamLayout() = default;

  void add(std::string name, Index size) {
    segments_.push_back({std::move(name), size_, size});
    size_ += size;
  }

  Index size() const { return size_; }
  const std::vector<ParamSegment>& segments() const { return segments_; }

  /// Name of the segment that owns flat index `i`.
  const std::string& owner(Index i) const {
    auto it = std::upper_bound(segments_.begin(), segments_.end(), i,
                               [](Index v, const ParamSegment& s) { return v < s.offset; });
    require(it != segments_.begin() && i < size_, "parameter index out of range");
    return std::prev(it)->name;
  }

  static ParamLayout of(const std::vector<ParamGroup>& groups) {
    ParamLayout layout;
    for (const auto& g : groups) layout.add(g.name, g.values.size());
    return layout;
  }

 private:
  std::vector<ParamSegment> segments_;
  Index size_ = 0;
};

struct ParamVector {
  Vector values;
  ParamLayout layout;
};

inline ParamVector flatten(const std::vector<ParamGroup>& groups) {
  ParamVector out{Vector(0), ParamLayout::of(groups)};
  out.values.resize(out.layout.size());
  for (std::size_t k = 0; k < groups.size(); ++k) {
    const auto& seg = out.layout.segments()[k];
    out.values.segment(seg.offset, seg.size) = groups[k].values;
  }
  return out;
}

inline std::vector<ParamGroup> unflatten(const ParamVector& pv) {
  if (pv.values.size() != pv.layout.size()) {
    throw ContractError("unflatten: vector length " + std::to_string(pv.values.size()) +
                        " does not match layout size " + std::to_string(pv.layout.size()));
  }
  std::vector<ParamGroup> groups;
  groups.reserve(pv.layout.segments().size());
  for (const auto& seg : pv.layout.segments()) {
    groups.push_back({seg.name, pv.values.segment(seg.offset, seg.size)});
  }
  return groups;
}

enum class Activation { softplus, tanh, identity };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::softplus: return "softplus";
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
  }
  return "?";
}

struct MlpSpec {
  Index input_dim = 1;
  std::vector<Index> hidden;
  Index output_dim = 1;
  Activation hidden_activation = Activation::softplus;

  Index num_layers() const { return static_cast<Index>(hidden.size()) + 1; }
  Index fan_in(Index layer) const { return layer == 0 ? input_dim : hidden[layer - 1]; }
  Index fan_out(Index layer) const {
    return layer == num_layers() - 1 ? output_dim : hidden[layer];
  }

  Index num_params() const {
    Index n = 0;
    for (Index l = 0; l < num_layers(); ++l) n += fan_in(l) * fan_out(l) + fan_out(l);
    return n;
  }

  void validate() const {
    require(input_dim > 0 && output_dim > 0, "MlpSpec: dimensions must be positive");
    for (Index h : hidden) require(h > 0, "MlpSpec: hidden widths must be positive");
  }
};

/// Weights of every layer are stored row-major (fan_out x fan_in) followed by
/// the layer's bias.
inline ParamVector init_params(const MlpSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  ParamVector pv;
  pv.values = Vector::Zero(spec.num_params());
  Index offset = 0;
  for (Index l = 0; l < spec.num_layers(); ++l) {
    const Index in = spec.fan_in(l), out = spec.fan_out(l);
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    for (Index k = 0; k < in * out; ++k) pv.values[offset + k] = uniform(rng, -a, a);
    pv.layout.add("layer" + std::to_string(l) + ".weight", in * out);
    pv.layout.add("layer" + std::to_string(l) + ".bias", out);
    offset += in * out + out;
  }
  return pv;
}

inline double activate(Activation a, double t) {
  switch (a) {
    case Activation::softplus: return softplus(t);
    case Activation::tanh: return std::tanh(t);
    case Activation::identity: return t;
  }
  return t;
}

/// Derivative expressed through the pre-activation value.
inline double activate_derivative(Activation a, double t) {
  switch (a) {
    case Activation::softplus: return sigmoid(t);
    case Activation::tanh: {
      const double th = std::tanh(t);
      return 1.0 - th * th;
    }
    case Activation::identity: return 1.0;
  }
  return 1.0;
}

inline Matrix activate(Activation a, const Matrix& T) {
  switch (a) {
    case Activation::softplus: return ((-T.array().abs()).exp().log1p() + T.array().max(0.0)).matrix();
    case Activation::tanh: return T.array().tanh().matrix();
    case Activation::identity: return T;
  }
  return T;
}

inline Matrix activate_derivative(Activation a, const Matrix& T) {
  switch (a) {
    case Activation::softplus: return (1.0 / (1.0 + (-T.array()).exp())).matrix();
    case Activation::tanh: return (1.0 - T.array().tanh().square()).matrix();
    case Activation::identity: return Matrix::Ones(T.rows(), T.cols());
  }
  return T;
}

/// Feed-forward network with affine output layer.
class Mlp {
 public:
  using LayerMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  /// Intermediate activations of a batched forward pass, needed by backward.
  struct Tape {
    Matrix input;
    std::vector<Matrix> pre;   // per hidden layer, N x width
    std::vector<Matrix> post;  // per hidden layer, N x width
  };

  Mlp() : Mlp(MlpSpec{}) {}
  explicit Mlp(MlpSpec spec) : spec_(std::move(spec)), params_(Vector::Zero(spec_.num_params())) {
    spec_.validate();
  }
  Mlp(MlpSpec spec, Vector params) : spec_(std::move(spec)), params_(std::move(params)) {
    spec_.validate();
    require(params_.size() == spec_.num_params(), "Mlp: parameter vector has wrong length");
  }

  /// Single affine layer with W = I, b = 0.
  static Mlp identity(Index dim) {
    Mlp m(MlpSpec{dim, {}, dim, Activation::identity});
    m.weight(0).setIdentity();
    return m;
  }

  /// Single affine layer with W = 0 and b = value.
  static Mlp constant(Index input_dim, const Vector& value) {
    Mlp m(MlpSpec{input_dim, {}, value.size(), Activation::identity});
    m.bias(0) = value;
    return m;
  }

  const MlpSpec& spec() const { return spec_; }
  Index input_dim() const { return spec_.input_dim; }
  Index output_dim() const { return spec_.output_dim; }
  Index num_params() const { return params_.size(); }
  const Vector& params() const { return params_; }
  Vector& params() { return params_; }

  void get_params(std::span<double> out) const {
    std::copy(params_.data(), params_.data() + params_.size(), out.begin());
  }
  void set_params(std::span<const double> in) {
    std::copy(in.begin(), in.begin() + params_.size(), params_.data());
  }

  void init(std::uint64_t seed) { params_ = init_params(spec_, seed).values; }
  void init(Rng& rng) { init(rng()); }

  Eigen::Map<LayerMatrix> weight(Index l) {
    return {params_.data() + offset(l), spec_.fan_out(l), spec_.fan_in(l)};
  }
  Eigen::Map<const LayerMatrix> weight(Index l) const {
    return {params_.data() + offset(l), spec_.fan_out(l), spec_.fan_in(l)};
  }
  Eigen::Map<Vector> bias(Index l) {
    return {params_.data() + offset(l) + spec_.fan_in(l) * spec_.fan_out(l), spec_.fan_out(l)};
  }
  Eigen::Map<const Vector> bias(Index l) const {
    return {params_.data() + offset(l) + spec_.fan_in(l) * spec_.fan_out(l), spec_.fan_out(l)};
  }

  Vector forward(Point x) const {
    if (static_cast<Index>(x.size()) != spec_.input_dim) {
      throw ContractError("Mlp::forward: input has length " + std::to_string(x.size()) + ", expected " +
                          std::to_string(spec_.input_dim));
    }
    Vector h = Eigen::Map<const Vector>(x.data(), spec_.input_dim);
    for (Index l = 0; l < spec_.num_layers(); ++l) {
      Vector a = weight(l) * h + bias(l);
      if (l + 1 < spec_.num_layers()) {
        for (Index k = 0; k < a.size(); ++k) a[k] = activate(spec_.hidden_activation, a[k]);
      }
      h = std::move(a);
    }
    return h;
  }

  /// Batched forward pass; returns N x output_dim.
  Matrix forward(const Points& X) const {
    Tape tape;
    return forward(X, tape);
  }

  Matrix forward(const Points& X, Tape& tape) const {
    require(X.cols() == spec_.input_dim, "Mlp::forward: input dimension mismatch");
    tape.input = X;
    tape.pre.clear();
    tape.post.clear();
    Matrix h = X;
    for (Index l = 0; l < spec_.num_layers(); ++l) {
      Matrix a = h * weight(l).transpose();
      a.rowwise() += bias(l).transpose();
      if (l + 1 < spec_.num_layers()) {
        Matrix z = activate(spec_.hidden_activation, a);
        tape.pre.push_back(std::move(a));
        tape.post.push_back(z);
        h = std::move(z);
      } else {
        h = std::move(a);
      }
    }
    return h;
  }

  /// Accumulates dL/dparams into `grad` given dL/doutput (N x output_dim).
  /// When `d_input` is non-null, dL/dX is accumulated into it.
  void backward(const Tape& tape, const Matrix& d_output, std::span<double> grad,
                Points* d_input = nullptr) const {
    const Index layers = spec_.num_layers();
    Matrix delta = d_output;
    for (Index l = layers - 1; l >= 0; --l) {
      const Matrix& h_in = l == 0 ? tape.input : tape.post[l - 1];
      Eigen::Map<LayerMatrix> gw(grad.data() + offset(l), spec_.fan_out(l), spec_.fan_in(l));
      Eigen::Map<Vector> gb(grad.data() + offset(l) + spec_.fan_in(l) * spec_.fan_out(l),
                            spec_.fan_out(l));
      gw.noalias() += delta.transpose() * h_in;
      gb.noalias() += delta.colwise().sum().transpose();
      if (l == 0) {
        if (d_input) *d_input += delta * weight(0);
        break;
      }
      delta = (delta * weight(l)).cwiseProduct(activate_derivative(spec_.hidden_activation, tape.pre[l - 1]));
    }
  }

 private:
  Index offset(Index layer) const {
    Index o = 0;
    for (Index l = 0; l < layer; ++l) o += spec_.fan_in(l) * spec_.fan_out(l) + spec_.fan_out(l);
    return o;
  }

  MlpSpec spec_;
  Vector params_;
};

}  // namespace seekgp
