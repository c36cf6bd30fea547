#pragma once

// The attacker-side model of the layers recovered so far, and the hidden
// space views built on it. A view maps inputs to a chosen hidden tap
// (post-activation of the last decided layer, or preactivation of an
// undecided top layer held up to per-neuron factors) and steers input
// perturbations to realize hidden-space directions.

#include <Eigen/Dense>
#include <utility>
#include <vector>

#include "pnx/error.hpp"
#include "pnx/network.hpp"

namespace pnx {

struct PrefixLayer {
  Mat W;
  Vec b;
  Vec pos;  // activation multipliers, pos for y >= 0
  Vec neg;
  bool decided = true;  // false while the layer is known only up to factors
};

class PrefixModel {
public:
  PrefixModel() = default;
  explicit PrefixModel(int input_dim) : input_dim_(input_dim) {}

  int input_dim() const { return input_dim_; }
  int layer_count() const { return static_cast<int>(layers_.size()); }
  const PrefixLayer& layer(int k) const { return layers_[k]; }
  PrefixLayer& layer(int k) { return layers_[k]; }

  void push_layer(PrefixLayer l) {
    const int expect = layer_count() == 0 ? input_dim_ : out_dim(layer_count() - 1);
    if (l.W.cols() != expect) throw ShapeError("prefix layer width mismatch");
    layers_.push_back(std::move(l));
  }
  void pop_layer() { layers_.pop_back(); }

  int out_dim(int k) const { return static_cast<int>(layers_[k].W.rows()); }

  // Preactivations of every prefix layer at x.
  std::vector<Vec> preactivations(const Vec& x) const {
    std::vector<Vec> ys;
    Vec z = x;
    ys.reserve(layers_.size());
    for (const auto& l : layers_) {
      Vec y = l.W * z + l.b;
      ys.push_back(y);
      z = activate(l, y);
    }
    return ys;
  }

  Vec post_activation(const Vec& x, int k) const {
    Vec z = x;
    for (int i = 0; i <= k; ++i) {
      Vec y = layers_[i].W * z + layers_[i].b;
      z = activate(layers_[i], y);
    }
    return z;
  }

  Vec preactivation(const Vec& x, int k) const {
    Vec z = x;
    for (int i = 0; i < k; ++i) {
      Vec y = layers_[i].W * z + layers_[i].b;
      z = activate(layers_[i], y);
    }
    return layers_[k].W * z + layers_[k].b;
  }

  // Jacobian of the post-activation of layer k at x (constant inside the
  // linear region of x).
  Mat jacobian_post(const Vec& x, int k) const {
    Mat J = Mat::Identity(input_dim_, input_dim_);
    Vec z = x;
    for (int i = 0; i <= k; ++i) {
      Vec y = layers_[i].W * z + layers_[i].b;
      J = tau(layers_[i], y).asDiagonal() * (layers_[i].W * J);
      z = activate(layers_[i], y);
    }
    return J;
  }

  Mat jacobian_pre(const Vec& x, int k) const {
    if (k == 0) return layers_[0].W;
    Mat J = jacobian_post(x, k - 1);
    return layers_[k].W * J;
  }

  static Vec activate(const PrefixLayer& l, const Vec& y) {
    Vec z(y.size());
    for (int j = 0; j < y.size(); ++j)
      z[j] = y[j] >= 0.0 ? l.pos[j] * y[j] : l.neg[j] * y[j];
    return z;
  }

  static Vec tau(const PrefixLayer& l, const Vec& y) {
    Vec t(y.size());
    for (int j = 0; j < y.size(); ++j) t[j] = y[j] >= 0.0 ? l.pos[j] : l.neg[j];
    return t;
  }

private:
  int input_dim_ = 0;
  std::vector<PrefixLayer> layers_;
};

// Prefix over the first `hidden_count` hidden layers of a network, all
// decided. Used where a context holds true parameters (baselines, tests).
inline PrefixModel prefix_from_network(const PreluNetwork& net,
                                       int hidden_count) {
  PrefixModel p(net.input_dim());
  for (int k = 0; k < hidden_count; ++k)
    p.push_layer(PrefixLayer{net.weight(k), net.bias(k), net.pos_slope(k),
                             net.neg_slope(k), true});
  return p;
}

// Solves M dx = h in the least-squares sense (minimum norm). Fails with an
// expansiveness diagnostic when the prefix cannot realize the direction.
inline Vec steer_hidden(const Mat& M, const Vec& h, double rel_tol = 1e-8) {
  if (M.rows() != h.size()) throw ShapeError("steer direction length mismatch");
  Eigen::CompleteOrthogonalDecomposition<Mat> cod(M);
  Vec dx = cod.solve(h);
  const double hn = h.norm();
  const double res = (M * dx - h).norm();
  if (hn > 0.0 && res > rel_tol * hn)
    throw ExpansivenessError(
        "hidden direction not realizable through the recovered prefix "
        "(rank " + std::to_string(cod.rank()) + " < " +
        std::to_string(h.size()) + " required); residual " +
        std::to_string(res / hn));
  return dx;
}

// Hidden-space view used by probing, refinement, and sign recovery.
// kind kPost taps the post-activation of prefix layer `tap`; kind kPre taps
// the preactivation (used when the top layer is held up to factors, and for
// probing the next layer across a split). kInput is the identity view for
// first-layer recovery.
class HiddenView {
public:
  enum Kind { kInput, kPost, kPre };

  static HiddenView input(int dim) {
    HiddenView v;
    v.kind_ = kInput;
    v.dim_ = dim;
    return v;
  }
  static HiddenView post(const PrefixModel& prefix, int tap) {
    HiddenView v;
    v.kind_ = kPost;
    v.prefix_ = &prefix;
    v.tap_ = tap;
    v.dim_ = prefix.out_dim(tap);
    return v;
  }
  static HiddenView pre(const PrefixModel& prefix, int tap) {
    HiddenView v;
    v.kind_ = kPre;
    v.prefix_ = &prefix;
    v.tap_ = tap;
    v.dim_ = prefix.out_dim(tap);
    return v;
  }

  int dim() const { return dim_; }

  Vec hidden(const Vec& x) const {
    switch (kind_) {
      case kInput:
        return x;
      case kPost:
        return prefix_->post_activation(x, tap_);
      case kPre:
        return prefix_->preactivation(x, tap_);
    }
    throw Error("bad view");
  }

  Mat jacobian(const Vec& x) const {
    switch (kind_) {
      case kInput:
        return Mat::Identity(dim_, dim_);
      case kPost:
        return prefix_->jacobian_post(x, tap_);
      case kPre:
        return prefix_->jacobian_pre(x, tap_);
    }
    throw Error("bad view");
  }

  // Input perturbation realizing hidden move h from x. For the input view
  // this is h itself.
  Vec steer(const Vec& x, const Vec& h) const {
    if (kind_ == kInput) return h;
    return steer_hidden(jacobian(x), h);
  }

  // Prefix preactivations strictly before the tapped hidden space (for
  // kPre views the tapped layer's own preactivation is the hidden value and
  // is not included here).
  std::vector<Vec> prior_preactivations(const Vec& x) const {
    if (kind_ == kInput) return {};
    std::vector<Vec> ys = prefix_->preactivations(x);
    const int keep = kind_ == kPost ? tap_ + 1 : tap_;
    ys.resize(keep);
    return ys;
  }

private:
  Kind kind_ = kInput;
  const PrefixModel* prefix_ = nullptr;
  int tap_ = -1;
  int dim_ = 0;
};

}  // namespace pnx
