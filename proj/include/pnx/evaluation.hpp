#pragma once

// Extraction quality certification: align recovered parameters to the
// victim's (permutation + positive scaling per hidden neuron), measure
// empirical functional equivalence on a sampled box, and propagate a sound
// analytic bound on the output error from the parameter deltas.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "pnx/error.hpp"
#include "pnx/network.hpp"

namespace pnx {

// Minimum-cost perfect assignment on a square cost matrix (shortest
// augmenting path with potentials, O(n^3)). Returns row -> column.
inline std::vector<int> min_cost_assignment(const Mat& cost) {
  const int n = static_cast<int>(cost.rows());
  std::vector<double> u(n + 1, 0), v(n + 1, 0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, std::numeric_limits<double>::infinity());
    std::vector<char> used(n + 1, false);
    do {
      used[j0] = true;
      const int i0 = p[j0];
      int j1 = 0;
      double delta = std::numeric_limits<double>::infinity();
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> match(n, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j] > 0) match[p[j] - 1] = j - 1;
  return match;
}

struct AlignmentResult {
  PreluNetwork aligned;        // recovered net, permuted and rescaled
  double max_param_err = 0;    // max |theta - theta_hat| after alignment
  bool ambiguous = false;      // two candidates within 1e-6 cosine
  bool sign_mismatch = false;  // some matched pair had negative cosine
};

// Aligns the recovered network to the reference layer by layer: hidden
// neurons are matched by maximal |cosine| of their weight rows (optimal
// assignment up to width 256, greedy beyond), then each matched neuron is
// rescaled so the weight rows coincide in norm. Slopes are compared
// directly; the output layer is pinned by the observable outputs.
inline AlignmentResult align(const PreluNetwork& reference,
                             const PreluNetwork& recovered) {
  if (reference.dims() != recovered.dims())
    throw ShapeError("align requires identical architectures");
  AlignmentResult out{recovered, 0, false, false};
  for (int k = 0; k < reference.depth(); ++k) {
    const int d = reference.dims()[k + 1];
    const Mat& A = reference.weight(k);
    const Mat& R = out.aligned.weight(k);
    Mat cosines(d, d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) {
        const double denom = A.row(i).norm() * R.row(j).norm();
        cosines(i, j) = denom > 0 ? A.row(i).dot(R.row(j)) / denom : 0.0;
      }
    std::vector<int> match;
    if (d <= 256) {
      match = min_cost_assignment(-cosines.cwiseAbs());
    } else {
      match.assign(d, -1);
      std::vector<char> taken(d, 0);
      for (int i = 0; i < d; ++i) {
        int best = -1;
        double bc = -1;
        for (int j = 0; j < d; ++j)
          if (!taken[j] && std::abs(cosines(i, j)) > bc) {
            bc = std::abs(cosines(i, j));
            best = j;
          }
        match[i] = best;
        taken[best] = 1;
      }
    }
    for (int i = 0; i < d; ++i) {
      double best = std::abs(cosines(i, match[i]));
      for (int j = 0; j < d; ++j)
        if (j != match[i] && std::abs(cosines(i, j)) > best - 1e-6)
          out.ambiguous = true;
      if (cosines(i, match[i]) < 0) out.sign_mismatch = true;
    }
    out.aligned = permute_layer(out.aligned, k, match);
    for (int i = 0; i < d; ++i) {
      const double rn = out.aligned.weight(k).row(i).norm();
      const double an = A.row(i).norm();
      if (rn > 0 && an > 0)
        out.aligned = scale_neuron(out.aligned, k, i, an / rn);
    }
  }
  double worst = 0;
  for (int k = 0; k <= reference.depth(); ++k) {
    worst = std::max(
        worst,
        (reference.weight(k) - out.aligned.weight(k)).cwiseAbs().maxCoeff());
    worst = std::max(
        worst, (reference.bias(k) - out.aligned.bias(k)).cwiseAbs().maxCoeff());
    if (k < reference.depth())
      worst = std::max(worst, (reference.slope(k) - out.aligned.slope(k))
                                  .cwiseAbs()
                                  .maxCoeff());
  }
  out.max_param_err = worst;
  return out;
}

// Empirical (epsilon, 0)-equivalence: the max output deviation over N
// inputs sampled uniformly from the box [-box, box]^d0. Reproducible
// bit-for-bit under a fixed seed.
inline double empirical_equivalence(const PreluNetwork& a,
                                    const PreluNetwork& b, double box, int N,
                                    unsigned long long seed) {
  if (a.input_dim() != b.input_dim() || a.output_dim() != b.output_dim())
    throw ShapeError("networks disagree on input/output dims");
  if (N < 1) throw Error("need at least one sample");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-box, box);
  double worst = 0;
  Vec x(a.input_dim());
  for (int s = 0; s < N; ++s) {
    for (int i = 0; i < x.size(); ++i) x[i] = u(rng);
    worst = std::max(worst, (a.forward(x) - b.forward(x)).cwiseAbs().maxCoeff());
  }
  return worst;
}

// Sound layer-by-layer propagation of parameter deltas to an output error
// bound over the box, using per-neuron interval bounds:
//   |y - y_hat| <= |dW| m + |W_hat| e + |db|
//   |act_s(y) - act_shat(y_hat)| <= max(1,s,s_hat)|y - y_hat| + |s - s_hat||y_hat|
// where m bounds |true preactivation inputs| and e the accumulated error.
inline double propagate_bounds(const PreluNetwork& reference,
                               const PreluNetwork& aligned, double box) {
  if (reference.dims() != aligned.dims())
    throw ShapeError("bound propagation requires aligned architectures");
  Vec m = Vec::Constant(reference.input_dim(), box);  // bound on |true z|
  Vec e = Vec::Zero(reference.input_dim());           // bound on |z - z_hat|
  for (int k = 0; k <= reference.depth(); ++k) {
    const Mat& W = reference.weight(k);
    const Mat& Wh = aligned.weight(k);
    const Vec& bt = reference.bias(k);
    const Vec& bh = aligned.bias(k);
    Vec my = W.cwiseAbs() * m + bt.cwiseAbs();
    Vec ey = (W - Wh).cwiseAbs() * m + Wh.cwiseAbs() * e +
             (bt - bh).cwiseAbs();
    if (k == reference.depth()) {
      const double worst = ey.maxCoeff();
      if (worst == 0.0) return 0.0;  // identical parameters, identical output
      // allowance for rounding of the two evaluations themselves
      const double fp = 64.0 * std::numeric_limits<double>::epsilon() *
                        (my.maxCoeff() + 1.0);
      return worst + fp;
    }
    const int d = reference.dims()[k + 1];
    Vec mz(d), ez(d);
    for (int j = 0; j < d; ++j) {
      const double s = reference.slope(k)[j];
      const double sh = aligned.slope(k)[j];
      const double lip = std::max({1.0, std::abs(s), std::abs(sh)});
      mz[j] = std::max(1.0, std::abs(s)) * my[j];
      ez[j] = lip * ey[j] + std::abs(s - sh) * (my[j] + ey[j]);
    }
    m = std::move(mz);
    e = std::move(ez);
  }
  return 0;  // unreachable
}

// Final certification record for one extraction run.
struct EquivalenceReport {
  double box = 1.0;
  int samples = 0;
  unsigned long long seed = 0;
  double empirical_eps = 0;   // r_max over the sample set; epsilon at xi=0
  double propagated_bound = 0;
  double max_param_err = 0;
  bool aligned_ambiguous = false;
  bool sign_mismatch = false;
  long long total_queries = 0;
  int workflow = 0;
  bool fused = false;  // comparison against the pivot-fused victim
};

inline EquivalenceReport certify(const PreluNetwork& reference,
                                 const PreluNetwork& recovered, double box,
                                 int samples, unsigned long long seed) {
  EquivalenceReport rep;
  rep.box = box;
  rep.samples = samples;
  rep.seed = seed;
  AlignmentResult al = align(reference, recovered);
  rep.max_param_err = al.max_param_err;
  rep.aligned_ambiguous = al.ambiguous;
  rep.sign_mismatch = al.sign_mismatch;
  rep.empirical_eps = empirical_equivalence(reference, recovered, box, samples, seed);
  rep.propagated_bound = propagate_bounds(reference, al.aligned, box);
  return rep;
}

}  // namespace pnx
