#pragma once

// Differential recovery of hidden-neuron weight rows. At a critical point
// of a neuron, the second directional difference along H equals the slope
// jump coefficient times |A.H|; probing a spanning direction set and
// resolving the relative signs of A.H_j yields the row up to one unknown
// factor.

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <vector>

#include "pnx/critical_search.hpp"
#include "pnx/error.hpp"
#include "pnx/prefix.hpp"

namespace pnx {

// One neuron as recovered by the differential attack: unit-norm weight row
// with canonical sign, matching bias, and (once decided) the sign of the
// hidden factor and the activation slope.
struct RecoveredNeuron {
  Vec weight;
  double bias = 0.0;
  int sign = 0;          // 0 while undecided
  double slope = -1.0;   // < 0 while undecided
  std::vector<CriticalWitness> witnesses;
  double residual = std::numeric_limits<double>::infinity();
  bool refinement_failed = false;
};

struct DerivativeProbeSet {
  Vec z;            // hidden point of the witness
  Mat directions;   // columns H_j, orthonormal
  Vec deltas;       // delta_j per direction
  Vec pair_deltas;  // entry j >= 1 holds delta_{1+j} for H_1 + H_j
  double f0 = 0;
  double eps = 0;
};

inline Mat random_orthonormal(int d, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Mat A(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) A(i, j) = gauss(rng);
  Eigen::HouseholderQR<Mat> qr(A);
  Mat Q = qr.householderQ() * Mat::Identity(d, d);
  Vec diag = qr.matrixQR().diagonal();
  for (int j = 0; j < d; ++j)
    if (diag[j] < 0) Q.col(j) = -Q.col(j);
  return Q;
}

// Probes one witness with a random orthonormal direction set. Spends
// exactly 4*dim - 1 fresh queries: one for f at the witness, two per
// direction, and two per pairwise direction H_1 + H_j.
inline DerivativeProbeSet probe_directions(const ScalarFn& f,
                                           const HiddenView& view,
                                           const Vec& x_w,
                                           const ProbeConfig& cfg,
                                           std::mt19937_64& rng) {
  const int d = view.dim();
  DerivativeProbeSet p;
  p.z = view.hidden(x_w);
  p.directions = random_orthonormal(d, rng);
  p.eps = cfg.fd_stride * std::max(1.0, p.z.norm());
  p.f0 = f(x_w);
  p.deltas.resize(d);
  for (int j = 0; j < d; ++j) {
    const Vec dx = view.steer(x_w, p.eps * p.directions.col(j));
    p.deltas[j] =
        (f(x_w + dx) + f(x_w - dx) - 2.0 * p.f0) / p.eps;
  }
  p.pair_deltas = Vec::Zero(d);
  for (int j = 1; j < d; ++j) {
    const Vec dir = p.directions.col(0) + p.directions.col(j);
    const Vec dx = view.steer(x_w, p.eps * dir);
    p.pair_deltas[j] =
        (f(x_w + dx) + f(x_w - dx) - 2.0 * p.f0) / p.eps;
  }
  return p;
}

inline double probe_noise_floor(const DerivativeProbeSet& p,
                                const ProbeConfig& cfg) {
  return std::max(cfg.noise_floor, 1e-9 * std::abs(p.f0));
}

// Relative signs of A.H_j against A.H_1 (sign +1 for j = 0 by convention).
// The comparison |delta_{1+j}| against |delta_1 +- delta_j| decides whether
// the two projections share a sign. A comparison margin below the noise
// floor is indeterminate and reported via the optional flag so the caller
// can resample directions.
inline std::optional<Eigen::VectorXi> resolve_projection_signs(
    const DerivativeProbeSet& p, double margin_floor) {
  const int d = static_cast<int>(p.deltas.size());
  if (std::abs(p.deltas[0]) <= margin_floor) return std::nullopt;
  Eigen::VectorXi s(d);
  s[0] = 1;
  for (int j = 1; j < d; ++j) {
    const double same =
        std::abs(std::abs(p.pair_deltas[j]) -
                 std::abs(p.deltas[0] + p.deltas[j]));
    const double diff =
        std::abs(std::abs(p.pair_deltas[j]) -
                 std::abs(p.deltas[0] - p.deltas[j]));
    if (std::abs(same - diff) <= margin_floor) return std::nullopt;
    s[j] = same < diff ? 1 : -1;
  }
  return s;
}

// Solves A.H_j = sign_j |delta_j| for the weight row, derives the bias from
// the witness, and normalizes to unit norm with canonical sign. The
// pairwise probes give a free consistency check; deviations mean the probe
// strides escaped the adjacent regions and the witness should be dropped.
inline std::optional<RecoveredNeuron> solve_neuron(
    const DerivativeProbeSet& p, const Eigen::VectorXi& signs,
    double residual_tol = 1e-6) {
  const int d = static_cast<int>(p.deltas.size());
  Vec alpha(d);
  for (int j = 0; j < d; ++j) alpha[j] = signs[j] * std::abs(p.deltas[j]);
  Vec w = p.directions.transpose().colPivHouseholderQr().solve(alpha);
  const double scale = p.deltas.cwiseAbs().maxCoeff();
  if (!(scale > 0)) return std::nullopt;
  double worst = 0;
  for (int j = 1; j < d; ++j) {
    const double predicted = std::abs(alpha[0] + alpha[j]);
    worst = std::max(worst,
                     std::abs(std::abs(p.pair_deltas[j]) - predicted));
  }
  if (worst / scale > residual_tol) return std::nullopt;
  RecoveredNeuron n;
  const double nw = w.norm();
  if (!(nw > 0)) return std::nullopt;
  double bias = -w.dot(p.z);
  w /= nw;
  bias /= nw;
  // canonical sign: first non-negligible entry positive
  for (int i = 0; i < d; ++i) {
    if (std::abs(w[i]) > 1e-9) {
      if (w[i] < 0) {
        w = -w;
        bias = -bias;
      }
      break;
    }
  }
  n.weight = std::move(w);
  n.bias = bias;
  n.residual = worst / scale;
  return n;
}

// Probe-and-solve with one direction resample before giving up on the
// witness, as deep-layer witnesses and region escapes look like noise.
inline std::optional<RecoveredNeuron> recover_neuron_at_witness(
    const ScalarFn& f, const HiddenView& view, const CriticalWitness& w,
    const ProbeConfig& cfg, std::mt19937_64& rng) {
  for (int attempt = 0; attempt < 2; ++attempt) {
    ProbeConfig c = cfg;
    if (attempt == 1) c.fd_stride *= 0.5;
    DerivativeProbeSet p = probe_directions(f, view, w.x, c, rng);
    const double floor = probe_noise_floor(p, c);
    if (p.deltas.cwiseAbs().minCoeff() <= floor) continue;
    auto signs = resolve_projection_signs(p, floor);
    if (!signs) continue;
    auto neuron = solve_neuron(p, *signs);
    if (!neuron) continue;
    neuron->witnesses.push_back(w);
    return neuron;
  }
  return std::nullopt;
}

// Affine fit of the final layer over the tapped hidden space. Samples
// dim+1 fresh inputs, solves the square system, and validates on held-out
// probes; rank trouble triggers a resample, then a diagnostic naming the
// colinear hidden coordinates.
inline std::pair<Mat, Vec> recover_last_layer(
    const std::function<Vec(const Vec&)>& query_vec, const HiddenView& view,
    int input_dim, int out_dim, double radius, std::mt19937_64& rng,
    double holdout_tol = 1e-8) {
  const int d = view.dim();
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto sample_input = [&]() {
    Vec x(input_dim);
    for (int i = 0; i < input_dim; ++i) x[i] = radius * gauss(rng);
    return x;
  };
  for (int attempt = 0; attempt < 5; ++attempt) {
    Mat design(d + 1, d + 1);
    Mat targets(d + 1, out_dim);
    for (int r = 0; r < d + 1; ++r) {
      const Vec x = sample_input();
      design.row(r).head(d) = view.hidden(x).transpose();
      design(r, d) = 1.0;
      targets.row(r) = query_vec(x).transpose();
    }
    Eigen::ColPivHouseholderQR<Mat> qr(design);
    if (qr.rank() < d + 1) continue;
    Mat sol = qr.solve(targets);  // (d+1) x out_dim
    double worst = 0, scale = 1;
    for (int h = 0; h < 10; ++h) {
      const Vec x = sample_input();
      Vec z(d + 1);
      z.head(d) = view.hidden(x);
      z[d] = 1.0;
      const Vec pred = sol.transpose() * z;
      const Vec truth = query_vec(x);
      worst = std::max(worst, (pred - truth).cwiseAbs().maxCoeff());
      scale = std::max(scale, truth.cwiseAbs().maxCoeff());
    }
    if (worst <= holdout_tol * scale) {
      Mat A = sol.topRows(d).transpose();
      Vec B = sol.row(d).transpose();
      return {A, B};
    }
  }
  throw Error(
      "last-layer fit stayed rank deficient: hidden coordinates are "
      "colinear over the sample distribution");
}

// Architecture guard shared by both workflows: every hidden layer must be
// no wider than the narrowest dimension before it, otherwise the hidden
// space cannot be steered and the differential attack does not apply.
// Checked before any query is spent.
inline void expansiveness_guard(const std::vector<int>& dims) {
  int narrowest = dims[0];
  const int n = static_cast<int>(dims.size()) - 2;
  for (int i = 1; i <= n; ++i) {
    if (dims[i] > narrowest)
      throw ExpansivenessError(
          "hidden layer " + std::to_string(i) + " has width " +
          std::to_string(dims[i]) + " > " + std::to_string(narrowest) +
          ", the narrowest preceding dimension; the differential attack "
          "does not apply to expansive networks");
    narrowest = std::min(narrowest, dims[i]);
  }
}

}  // namespace pnx
