#pragma once

// Counting-based neuron sign recovery via wiggles, implemented from the
// sketch: at a critical point of the target neuron, perturb the hidden
// state along the recovered row and compare the output-change magnitudes
// of the two sides. The identity branch transmits more than the sloped
// branch, so the larger side votes for the sign hypothesis. With slopes
// near 1 the margin collapses and votes degrade; that degradation is the
// phenomenon this baseline exists to measure.
//
// Context: the layers below the target are assumed recovered exactly, so
// the harness supplies the true network for witness generation and
// steering, and a scaled row c_j * A_j whose factor sign is hidden.

#include <cmath>
#include <optional>
#include <random>

#include "pnx/critical_search.hpp"
#include "pnx/prefix.hpp"

namespace pnx {

struct WiggleTally {
  int votes_plus = 0;
  int votes_minus = 0;
  int sign = 0;
  int witnesses = 0;
};

// Critical point of one neuron found directly from the true parameters:
// Newton steps on the piecewise-linear preactivation along a random line.
// Costs no oracle queries.
inline std::optional<Vec> find_true_critical_point(const PreluNetwork& net,
                                                   const PrefixModel& prefix,
                                                   int hidden, int neuron,
                                                   std::mt19937_64& rng,
                                                   double radius = 1.0) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int d0 = net.input_dim();
  for (int attempt = 0; attempt < 32; ++attempt) {
    Vec x0(d0), dir(d0);
    for (int i = 0; i < d0; ++i) {
      x0[i] = radius * gauss(rng);
      dir[i] = gauss(rng);
    }
    dir.normalize();
    double t = 0;
    for (int iter = 0; iter < 64; ++iter) {
      const Vec x = x0 + t * dir;
      const double y = prefix.preactivation(x, hidden)[neuron];
      if (std::abs(y) < 1e-12) return x;
      const double slope = prefix.jacobian_pre(x, hidden).row(neuron) * dir;
      if (std::abs(slope) < 1e-12) break;
      t -= y / slope;
      if (std::abs(t) > 1e6 * radius) break;
    }
  }
  return std::nullopt;
}

// Majority vote over `witness_count` critical points of (hidden, neuron).
// scaled_row is the recovered row c_j * A_j over the hidden input space of
// the target layer. 3 oracle queries per witness.
inline WiggleTally wiggle_sign(const ScalarFn& f, const PreluNetwork& victim,
                               int hidden, int neuron, const Vec& scaled_row,
                               int witness_count, std::mt19937_64& rng,
                               double eps_rel = 1e-4, double radius = 1.0) {
  PrefixModel prefix = prefix_from_network(victim, hidden);
  HiddenView view = hidden == 0 ? HiddenView::input(victim.input_dim())
                                : HiddenView::post(prefix, hidden - 1);
  WiggleTally tally;
  const Vec wiggle = scaled_row.normalized();
  PrefixModel target_prefix = prefix_from_network(victim, hidden + 1);
  while (tally.witnesses < witness_count) {
    auto x = find_true_critical_point(victim, target_prefix, hidden, neuron,
                                      rng, radius);
    if (!x) break;
    const double eps = eps_rel * std::max(1.0, view.hidden(*x).norm());
    Vec dx;
    try {
      dx = view.steer(*x, eps * wiggle);
    } catch (const ExpansivenessError&) {
      throw;
    }
    const double f0 = f(*x);
    const double vp = std::abs(f(*x + dx) - f0);
    const double vm = std::abs(f(*x - dx) - f0);
    ++tally.witnesses;
    if (vp > vm)
      ++tally.votes_plus;
    else
      ++tally.votes_minus;
  }
  tally.sign = tally.votes_plus >= tally.votes_minus ? 1 : -1;
  return tally;
}

}  // namespace pnx
