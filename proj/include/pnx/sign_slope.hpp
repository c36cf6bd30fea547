#pragma once

// Recovery of the per-neuron factor sign and PReLU slope. Two routes:
//
//  - Independent: fit the affine maps on the two sides of a neuron's
//    critical hyperplane. The target coordinate's coefficients differ by
//    the slope factor, and which side carries the larger magnitude reveals
//    the sign.
//  - Joint: over a split hidden layer, a next-layer weight row extends to
//    pairs (w_j, w_{j+d}); the magnitude ratio of a pair is the slope and
//    the larger slot identifies the sign. Partial rows from different
//    witnesses are scale-aligned on overlapping slots and merged.

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <random>
#include <vector>

#include "pnx/critical_search.hpp"
#include "pnx/error.hpp"
#include "pnx/prefix.hpp"

namespace pnx {

struct AdjacentAffinePair {
  Vec w_plus;   // coefficients with the target preactivation positive
  Vec w_minus;  // coefficients with it negative
  int target = 0;
};

// Fits the two adjacent affine maps around the critical hyperplane of
// neuron `target` (view taps the undecided layer's preactivations; the
// witness satisfies hidden[target] ~ 0). Each side solves a dim x dim
// system built from dim+1 samples, 2(dim+1) queries total per attempt.
// Disagreement on the non-target coordinates means a sample escaped the
// adjacent regions; the sampling radius is halved and the fit retried.
inline AdjacentAffinePair recover_adjacent_affines(
    const ScalarFn& f, const HiddenView& view, const Vec& x_w, int target,
    std::mt19937_64& rng, double agree_tol = 1e-6, int max_shrinks = 6) {
  const int d = view.dim();
  const Vec z0 = view.hidden(x_w);
  double radius = std::max(1e-4 * z0.norm(), 1e-6);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  auto fit_side = [&](int side, double r) {
    Mat H(d, d + 1);
    Vec vals(d + 1);
    for (int k = 0; k <= d; ++k) {
      Vec h(d);
      for (int i = 0; i < d; ++i) h[i] = r * unit(rng);
      h[target] = side * r * (0.25 + 0.75 * std::abs(unit(rng)));
      H.col(k) = h;
      vals[k] = f(x_w + view.steer(x_w, h));
    }
    Mat A(d, d);
    Vec b(d);
    for (int k = 1; k <= d; ++k) {
      A.row(k - 1) = (H.col(k) - H.col(0)).transpose();
      b[k - 1] = vals[k] - vals[0];
    }
    return Vec(A.colPivHouseholderQr().solve(b));
  };
  for (int shrink = 0; shrink < max_shrinks; ++shrink, radius *= 0.5) {
    const Vec wp = fit_side(+1, radius);
    const Vec wm = fit_side(-1, radius);
    double scale = std::max(wp.cwiseAbs().maxCoeff(), wm.cwiseAbs().maxCoeff());
    if (!(scale > 0)) continue;
    double worst = 0;
    for (int i = 0; i < d; ++i) {
      if (i == target) continue;
      worst = std::max(worst, std::abs(wp[i] - wm[i]));
    }
    if (worst <= agree_tol * scale) return {wp, wm, target};
  }
  throw Error(
      "adjacent affine fit kept escaping the two regions around the "
      "critical hyperplane");
}

// Sign and slope from the two side coefficients of the target coordinate.
// The side with the larger magnitude is the identity branch; the magnitude
// ratio is the slope. Magnitudes too close to call (slope near 1) are
// indeterminate and retried with a fresh witness by the caller.
inline std::pair<int, double> decide_sign_slope_independent(
    const AdjacentAffinePair& pair, double noise_floor = 1e-12,
    double tie_tol = 1e-9) {
  const double wp = pair.w_plus[pair.target];
  const double wm = pair.w_minus[pair.target];
  const double ap = std::abs(wp), am = std::abs(wm);
  if (ap <= noise_floor || am <= noise_floor)
    throw IndeterminateSignSlope("side coefficient below noise floor");
  if (std::abs(ap - am) <= tie_tol * std::max(ap, am))
    throw IndeterminateSignSlope(
        "side coefficients have equal magnitude (slope near 1?)");
  return ap > am ? std::make_pair(1, am / ap) : std::make_pair(-1, ap / am);
}

// --- extended weight vectors over a split layer ---------------------------

// One witness's contribution: the compressed solve scattered into the
// extended slot layout. Slot j is filled when the witness had hidden
// coordinate j positive, slot j+d when negative; the bias is always known.
struct PartialExtendedRow {
  Vec values;                // length 2d, meaningful where filled
  std::vector<char> filled;  // length 2d
  double bias = 0;
  CriticalWitness witness;
};

inline PartialExtendedRow scatter_to_extended(const Vec& compressed,
                                              double bias,
                                              const Vec& hidden_at_witness,
                                              const CriticalWitness& w) {
  const int d = static_cast<int>(compressed.size());
  PartialExtendedRow p;
  p.values = Vec::Zero(2 * d);
  p.filled.assign(2 * d, 0);
  for (int j = 0; j < d; ++j) {
    const int slot = hidden_at_witness[j] > 0 ? j : j + d;
    p.values[slot] = compressed[j];
    p.filled[slot] = 1;
  }
  p.bias = bias;
  p.witness = w;
  return p;
}

// Merged extended row of one next-layer neuron, held up to one factor.
struct ExtendedWeightVector {
  Vec values;                // length 2d, scale of the first merged part
  std::vector<char> filled;  // length 2d
  double bias = 0;
  std::vector<PartialExtendedRow> parts;  // scale-aligned contributions

  bool complete() const {
    for (char c : filled)
      if (!c) return false;
    return true;
  }
};

// Scale factor aligning `part` onto `base` using slots present in both.
// Requires at least min_shared common weight slots; the factor is the
// median of the slot ratios; spread beyond rel_tol marks the part as an
// outlier (nullopt with the flag set).
inline std::optional<double> overlap_ratio(const ExtendedWeightVector& base,
                                           const PartialExtendedRow& part,
                                           int min_shared, double rel_tol,
                                           bool* outlier = nullptr) {
  std::vector<double> ratios;
  for (size_t s = 0; s < part.filled.size(); ++s) {
    if (!part.filled[s] || !base.filled[s]) continue;
    if (std::abs(part.values[s]) < 1e-14) continue;
    ratios.push_back(base.values[s] / part.values[s]);
  }
  if (static_cast<int>(ratios.size()) < min_shared) return std::nullopt;
  std::sort(ratios.begin(), ratios.end());
  const double lambda = ratios[ratios.size() / 2];
  for (double r : ratios) {
    if (std::abs(r - lambda) > rel_tol * std::max(std::abs(lambda), 1e-30)) {
      if (outlier) *outlier = true;
      return std::nullopt;
    }
  }
  return lambda;
}

// Greedy accretion of partial rows into per-neuron extended vectors. A part
// joins the first vector it scale-aligns with; parts that align with
// nothing open a new vector. Deep-layer witnesses produce junk rows that
// never recur, so they end up as singleton vectors and are ignored by the
// caller, which keeps collecting until enough vectors are complete.
inline void merge_partial_row(std::vector<ExtendedWeightVector>& vectors,
                              const PartialExtendedRow& part,
                              int min_shared = 2, double rel_tol = 1e-4) {
  for (auto& v : vectors) {
    bool outlier = false;
    auto lambda = overlap_ratio(v, part, min_shared, rel_tol, &outlier);
    if (outlier) continue;  // inconsistent overlap: treat as foreign
    if (!lambda) continue;
    PartialExtendedRow scaled = part;
    scaled.values *= *lambda;
    scaled.bias *= *lambda;
    v.parts.push_back(std::move(scaled));
    // slot-wise median over contributions, bias included
    const int slots = static_cast<int>(v.values.size());
    for (int s = 0; s < slots; ++s) {
      std::vector<double> vals;
      for (const auto& q : v.parts)
        if (q.filled[s]) vals.push_back(q.values[s]);
      if (vals.empty()) continue;
      std::sort(vals.begin(), vals.end());
      v.values[s] = vals[vals.size() / 2];
      v.filled[s] = 1;
    }
    std::vector<double> biases;
    for (const auto& q : v.parts) biases.push_back(q.bias);
    std::sort(biases.begin(), biases.end());
    v.bias = biases[biases.size() / 2];
    return;
  }
  ExtendedWeightVector fresh;
  fresh.values = part.values;
  fresh.filled = part.filled;
  fresh.bias = part.bias;
  fresh.parts.push_back(part);
  vectors.push_back(std::move(fresh));
}

// Sign, slope, and compressed outgoing weight from one extended pair. The
// larger-magnitude slot is the identity branch, the ratio is the slope, and
// the compressed weight is the larger slot's value (still in the undecided
// basis; assembling the next-layer matrix applies the recovered sign).
struct JointDecision {
  int sign;
  double slope;
  double compressed;
};

inline JointDecision decide_sign_slope_joint(const ExtendedWeightVector& ext,
                                             int j, double noise_floor = 1e-12,
                                             double tie_tol = 1e-9) {
  const int d = static_cast<int>(ext.values.size()) / 2;
  if (!ext.filled[j] || !ext.filled[j + d])
    throw IndeterminateSignSlope("extended pair " + std::to_string(j) +
                                 " not observed in both branches");
  const double wj = ext.values[j], wt = ext.values[j + d];
  const double aj = std::abs(wj), at = std::abs(wt);
  if (aj <= noise_floor || at <= noise_floor)
    throw IndeterminateSignSlope("extended pair magnitude below noise floor");
  if (std::abs(aj - at) <= tie_tol * std::max(aj, at))
    throw IndeterminateSignSlope(
        "extended pair magnitudes tie (slope near 1?)");
  if (aj > at) return {1, at / aj, wj};
  return {-1, aj / at, wt};
}

}  // namespace pnx
