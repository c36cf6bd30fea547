#pragma once

// Precision refinement of recovered neurons. Each round finds fresh
// witnesses on the neuron's predicted critical hyperplane (binary search
// along segments that cross it), re-probes them with orthonormal direction
// sets, and aggregates the per-witness solves by component-wise median.
// The best iterate by hyperplane residual is kept, so the stored residual
// never increases.

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <vector>

#include "pnx/critical_search.hpp"
#include "pnx/weight_recovery.hpp"

namespace pnx {

// Produces a scalar oracle view valid around a given input. Raw and
// sigmoid feedback ignore the location; top-m feedback picks a label pair
// that is actually served there.
using ScalarAt = std::function<ScalarFn(const Vec&)>;

inline ScalarAt fixed_scalar(ScalarFn f) {
  return [f = std::move(f)](const Vec&) { return f; };
}

struct RefinementReport {
  double pre_residual = 0;
  double post_residual = 0;
  int witnesses_used = 0;
  bool failed = false;
};

struct FreshWitness {
  CriticalWitness witness;
  ScalarFn fn;  // scalar view the witness was found (and is probed) with
};

// Finds a fresh critical point of the neuron predicted by (weight, bias)
// over the view's hidden space. Starts from a random input, steers across
// the predicted hyperplane, and keeps the kink whose predicted
// preactivation is by far the smallest on the crossing segment.
inline std::optional<FreshWitness> find_witness_near_hyperplane(
    const ScalarAt& scalar_at, const HiddenView& view, const Vec& weight,
    double bias, const ProbeConfig& cfg, std::mt19937_64& rng, double radius,
    int input_dim, int max_tries = 12) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int attempt = 0; attempt < max_tries; ++attempt) {
    Vec x0(input_dim);
    for (int i = 0; i < input_dim; ++i) x0[i] = radius * gauss(rng);
    const Vec z0 = view.hidden(x0);
    const double p0 = weight.dot(z0) + bias;
    const Vec dx = view.steer(x0, -p0 * weight / weight.squaredNorm());
    if (!dx.allFinite() || dx.norm() == 0) continue;
    const Vec a = x0 - 0.25 * dx;
    const Vec b = x0 + 1.5 * dx;
    ScalarFn fn;
    std::vector<SegmentKink> kinks;
    try {
      fn = scalar_at(0.5 * (a + b));
      kinks = find_critical_on_segment(fn, a, b, cfg);
    } catch (const LabelUnavailable&) {
      continue;
    }
    if (kinks.empty()) continue;
    double best = std::numeric_limits<double>::infinity(), second = best;
    int best_idx = -1;
    for (size_t k = 0; k < kinks.size(); ++k) {
      const double pred = std::abs(weight.dot(view.hidden(kinks[k].x)) + bias);
      if (pred < best) {
        second = best;
        best = pred;
        best_idx = static_cast<int>(k);
      } else if (pred < second) {
        second = pred;
      }
    }
    const double scale = std::max(1.0, z0.norm());
    if (best_idx < 0 || best > 2e-2 * scale) continue;
    if (kinks.size() > 1 && best > 0.25 * second) continue;  // ambiguous
    std::optional<double> spike;
    try {
      spike = certify_kink(fn, kinks[best_idx].x, b - a, cfg);
    } catch (const LabelUnavailable&) {
      continue;
    }
    if (!spike) continue;
    CriticalWitness w;
    w.x = kinks[best_idx].x;
    w.hidden = view.hidden(w.x);
    w.residual = std::abs(*spike);
    w.seg_a = a;
    w.seg_b = b;
    return FreshWitness{std::move(w), std::move(fn)};
  }
  return std::nullopt;
}

inline double hyperplane_residual(const Vec& weight, double bias,
                                  const std::vector<CriticalWitness>& ws) {
  double worst = 0;
  for (const auto& w : ws)
    worst = std::max(worst, std::abs(weight.dot(w.hidden) + bias));
  return worst;
}

namespace detail {

inline Vec columnwise_median(const std::vector<Vec>& rows) {
  Vec out(rows.front().size());
  std::vector<double> col(rows.size());
  for (int i = 0; i < out.size(); ++i) {
    for (size_t r = 0; r < rows.size(); ++r) col[r] = rows[r][i];
    std::sort(col.begin(), col.end());
    out[i] = col.size() % 2
                 ? col[col.size() / 2]
                 : 0.5 * (col[col.size() / 2] + col[col.size() / 2 - 1]);
  }
  return out;
}

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v.size() % 2 ? v[v.size() / 2]
                      : 0.5 * (v[v.size() / 2] + v[v.size() / 2 - 1]);
}

}  // namespace detail

// Refines one neuron in place. `witnesses_per_round` defaults to the hidden
// dimension, giving an aggregate built from at least 2*dim equations. An
// already exact neuron passes through unchanged. A predicted hyperplane
// that the oracle never witnesses marks the neuron as refinement-failed
// instead of degrading it.
inline RefinementReport refine_neuron(const ScalarAt& scalar_at,
                                      const HiddenView& view,
                                      RecoveredNeuron& neuron, int rounds,
                                      const ProbeConfig& cfg,
                                      std::mt19937_64& rng, double radius,
                                      int input_dim,
                                      int witnesses_per_round = -1) {
  RefinementReport report;
  if (witnesses_per_round <= 0) witnesses_per_round = view.dim();
  witnesses_per_round = std::max(2, witnesses_per_round);
  report.pre_residual = neuron.residual;
  for (int round = 0; round < rounds; ++round) {
    std::vector<FreshWitness> fresh;
    int misses = 0;
    while (static_cast<int>(fresh.size()) < witnesses_per_round &&
           misses < 3) {
      auto w = find_witness_near_hyperplane(scalar_at, view, neuron.weight,
                                            neuron.bias, cfg, rng, radius,
                                            input_dim);
      if (!w) {
        ++misses;
        continue;
      }
      fresh.push_back(std::move(*w));
    }
    if (static_cast<int>(fresh.size()) < 2) {
      report.failed = true;
      neuron.refinement_failed = true;
      break;
    }
    report.witnesses_used += static_cast<int>(fresh.size());
    std::vector<Vec> solved_rows;
    std::vector<CriticalWitness> used;
    for (const auto& fw : fresh) {
      std::optional<RecoveredNeuron> cand;
      try {
        cand = recover_neuron_at_witness(fw.fn, view, fw.witness, cfg, rng);
      } catch (const LabelUnavailable&) {
        continue;
      }
      if (!cand) continue;
      solved_rows.push_back(cand->weight);
      used.push_back(fw.witness);
    }
    if (solved_rows.size() < 2) {
      report.failed = true;
      neuron.refinement_failed = true;
      break;
    }
    Vec w_new = detail::columnwise_median(solved_rows);
    canonicalize_direction(w_new);
    std::vector<double> biases;
    for (const auto& w : used) biases.push_back(-w_new.dot(w.hidden));
    const double b_new = detail::median_of(std::move(biases));
    const double res_new = hyperplane_residual(w_new, b_new, used);
    const double res_old =
        hyperplane_residual(neuron.weight, neuron.bias, used);
    if (res_new <= res_old) {
      neuron.weight = std::move(w_new);
      neuron.bias = b_new;
      neuron.residual = res_new;
      neuron.witnesses = used;
    } else {
      neuron.residual = std::min(neuron.residual, res_old);
    }
    if (neuron.residual < 1e-12) break;
  }
  report.post_residual = neuron.residual;
  return report;
}

}  // namespace pnx
