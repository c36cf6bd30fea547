#pragma once

// Critical-point discovery on oracle segments. The scalar restriction of
// the network to a segment is piecewise linear; kinks are isolated by
// recursive midpoint tests and then located to full double precision by
// intersecting the two affine pieces around the kink.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <set>
#include <vector>

#include "pnx/error.hpp"
#include "pnx/prefix.hpp"
#include "pnx/scores_adapter.hpp"

namespace pnx {

struct ProbeConfig {
  double fd_stride = 1e-5;    // finite-difference stride, relative to scale
  int depth = 60;             // max halvings per descent
  double lin_tol = 1e-8;      // relative linearity tolerance
  double noise_floor = 1e-7;  // relative noise floor for delta
  int iso_depth = 14;         // subdivision depth used to isolate kinks

  void validate() const {
    if (!(fd_stride > 0 && depth > 0 && lin_tol > 0 && noise_floor > 0))
      throw Error("probe config entries must be strictly positive");
  }
};

// A kink of the scalar restriction to a segment, located at parameter t.
struct SegmentKink {
  double t = 0;
  Vec x;
  double slope_jump = 0;  // |right slope - left slope| along the segment
};

// A certified critical point attached to one (layer, neuron) during
// extraction. `hidden` is the tapped hidden-space point of the view that
// probes it; scalar_a/scalar_b tag the feedback pair (or raw coordinate)
// whose scalar view discovered it.
struct CriticalWitness {
  Vec x;
  int layer = 0;
  Vec hidden;
  double residual = 0;  // |delta| spike measured at certification
  Vec seg_a, seg_b;
  int scalar_a = 0, scalar_b = -1;
};

// Second directional difference across x. For a piecewise linear function
// this is eps-invariant inside the two adjacent regions: it equals the
// slope jump times |movement along the kink normal|, and is zero (up to
// rounding) strictly inside one region. Costs 3 queries, 2 when f(x) is
// supplied.
inline double second_directional_derivative(const ScalarFn& f, const Vec& x,
                                            const Vec& h, double eps) {
  if (!(eps > 0)) throw Error("stride must be positive");
  const double f0 = f(x);
  return (f(x + eps * h) + f(x - eps * h) - 2.0 * f0) / eps;
}

inline double second_directional_derivative_cached(const ScalarFn& f,
                                                   const Vec& x, const Vec& h,
                                                   double eps, double f0) {
  return (f(x + eps * h) + f(x - eps * h) - 2.0 * f0) / eps;
}

namespace detail {

// Scalar restriction to the segment [a, b], parameterized on [0, 1].
struct SegmentFn {
  const ScalarFn& f;
  const Vec& a;
  Vec dir;
  double operator()(double t) const { return f(a + t * dir); }
};

// Locates the single kink assumed to lie in (lo, hi) by intersecting the
// affine pieces anchored just outside the current estimate. Returns nullopt
// when the slopes on the two sides agree (no kink) or the located point
// fails verification.
inline std::optional<std::pair<double, double>> locate_single_kink(
    const SegmentFn& g, double lo, double hi, double g_lo, double g_hi,
    double tol_abs, int max_rounds) {
  double a = lo, b = hi, ga = g_lo, gb = g_hi;
  double t = 0;
  double jump = 0;
  bool located = false;
  // initial estimate from anchors just inside the bracket, with bisection
  // as the fallback when an anchor span straddles the kink
  for (int round = 0; round < max_rounds && !located; ++round) {
    const double h = (b - a) / 256.0;
    if (a + h == a || b - h == b) return std::nullopt;
    const double ml = (g(a + h) - ga) / h;
    const double mr = (gb - g(b - h)) / h;
    jump = std::abs(mr - ml);
    if (jump * (b - a) < tol_abs) return std::nullopt;
    const double tk = (gb - ga + ml * a - mr * b) / (ml - mr);
    if (tk > a && tk < b) {
      t = tk;
      located = true;
      break;
    }
    const double m = a + 0.4937 * (b - a);
    const double gm = g(m);
    const double dev_left =
        std::abs(g(a + 0.5 * (m - a)) - (ga + 0.5 * (gm - ga)));
    if (dev_left > tol_abs) {
      b = m;
      gb = gm;
    } else {
      a = m;
      ga = gm;
    }
  }
  if (!located) return std::nullopt;
  // polish: slopes re-measured over spans adjacent to the estimate, so the
  // anchor distance and span length stay comparable and the intersection
  // reaches the rounding floor
  double w = (b - a) / 64.0;
  for (int round = 0; round < 3; ++round) {
    const double al = t - w, bl = t + w;
    if (al - w < lo - (hi - lo) || bl + w > hi + (hi - lo)) break;
    const double gl1 = g(al - w), gl0 = g(al);
    const double gr0 = g(bl), gr1 = g(bl + w);
    const double ml = (gl0 - gl1) / w;
    const double mr = (gr1 - gr0) / w;
    if (!(std::abs(mr - ml) * w > 0)) break;
    const double tk = (gr0 - gl0 + ml * al - mr * bl) / (ml - mr);
    if (tk > al - w && tk < bl + w) t = tk;
    const double floor_w =
        64.0 * std::numeric_limits<double>::epsilon() * (std::abs(t) + 1.0);
    if (w <= floor_w) break;
    w = std::max(w / 512.0, floor_w);
  }
  return std::make_pair(t, jump);
}

inline void collect_kinks(const SegmentFn& g, double a, double b, double ga,
                          double gb, double tol_abs, int depth,
                          const ProbeConfig& cfg,
                          std::vector<std::pair<double, double>>& out) {
  // split off-center so kinks at dyadic points cannot hide on a boundary
  const double m = a + 0.4937 * (b - a);
  const double gm = g(m);
  const double interp = ga + 0.4937 * (gb - ga);
  if (std::abs(gm - interp) <= tol_abs) return;  // affine piece
  if (depth >= cfg.iso_depth) {
    auto k = locate_single_kink(g, a, b, ga, gb, tol_abs,
                                std::max(4, cfg.depth / 8));
    if (k) out.push_back(*k);
    return;
  }
  collect_kinks(g, a, m, ga, gm, tol_abs, depth + 1, cfg, out);
  collect_kinks(g, m, b, gm, gb, tol_abs, depth + 1, cfg, out);
}

}  // namespace detail

// Finds the points on [x1, x2] where the scalar restriction changes affine
// pieces. A segment whose midpoint matches the endpoint interpolation
// within the linearity tolerance is declared affine and not subdivided.
inline std::vector<SegmentKink> find_critical_on_segment(const ScalarFn& f,
                                                         const Vec& x1,
                                                         const Vec& x2,
                                                         const ProbeConfig& cfg) {
  cfg.validate();
  detail::SegmentFn g{f, x1, x2 - x1};
  const double g0 = g(0.0), g1 = g(1.0);
  const double scale =
      std::max({std::abs(g0), std::abs(g1), std::abs(g1 - g0), 1.0});
  const double tol_abs = cfg.lin_tol * scale;
  std::vector<std::pair<double, double>> raw;
  detail::collect_kinks(g, 0.0, 1.0, g0, g1, tol_abs, 0, cfg, raw);
  std::sort(raw.begin(), raw.end());
  std::vector<SegmentKink> out;
  for (const auto& [t, jump] : raw) {
    if (!out.empty() && std::abs(t - out.back().t) < 1e-12) continue;
    SegmentKink k;
    k.t = t;
    k.x = x1 + t * (x2 - x1);
    k.slope_jump = jump;
    out.push_back(std::move(k));
  }
  return out;
}

// Certifies a located kink: re-probing across it must show a second
// difference spike above the noise floor. Costs 3 queries.
inline std::optional<double> certify_kink(const ScalarFn& f, const Vec& x,
                                          const Vec& seg_dir,
                                          const ProbeConfig& cfg) {
  Vec h = seg_dir.normalized();
  const double eps = cfg.fd_stride * std::max(1.0, x.norm());
  const double f0 = f(x);
  const double delta =
      second_directional_derivative_cached(f, x, h, eps, f0);
  const double floor =
      std::max(cfg.noise_floor, cfg.noise_floor * 0.01 * std::abs(f0));
  if (std::abs(delta) <= floor) return std::nullopt;
  return delta;
}

// True iff every recovered-prefix preactivation strictly before the view's
// tap stays at least `tol` away from zero at x, so the witness cannot
// belong to an earlier layer.
inline bool filter_prior_layers(const HiddenView& view, const Vec& x,
                                double tol) {
  for (const Vec& y : view.prior_preactivations(x))
    for (int j = 0; j < y.size(); ++j)
      if (std::abs(y[j]) < tol) return false;
  return true;
}

// --- frequency filtering ------------------------------------------------

struct FrequencyCluster {
  Vec representative;        // component-wise median, unit, canonical sign
  std::vector<int> members;  // indices into the candidate list
};

inline void canonicalize_direction(Vec& v, double tiny = 1e-9) {
  const double n = v.norm();
  if (n > 0) v /= n;
  for (int i = 0; i < v.size(); ++i) {
    if (std::abs(v[i]) > tiny) {
      if (v[i] < 0) v = -v;
      return;
    }
  }
}

inline double angular_distance(const Vec& a, const Vec& b) {
  const double c = std::clamp(a.dot(b) / (a.norm() * b.norm()), -1.0, 1.0);
  return std::acos(c);
}

// Groups unit candidate vectors by angular distance and returns the
// d_target most populated groups. Candidates are visited in a canonical
// lexicographic order, which makes the result independent of input order.
// Fewer than d_target groups with at least two members is an error that
// callers answer with more critical-point search.
inline std::vector<FrequencyCluster> filter_by_frequency(
    const std::vector<Vec>& candidates, int d_target, double match_tol) {
  std::vector<int> order(candidates.size());
  for (size_t i = 0; i < candidates.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const Vec &va = candidates[a], &vb = candidates[b];
    for (int i = 0; i < va.size(); ++i)
      if (va[i] != vb[i]) return va[i] < vb[i];
    return a < b;
  });
  std::vector<FrequencyCluster> clusters;
  for (int idx : order) {
    bool placed = false;
    for (auto& c : clusters) {
      if (angular_distance(c.representative, candidates[idx]) <= match_tol) {
        c.members.push_back(idx);
        placed = true;
        break;
      }
    }
    if (!placed) clusters.push_back({candidates[idx], {idx}});
  }
  for (auto& c : clusters) {
    const int d = static_cast<int>(c.representative.size());
    Vec rep(d);
    std::vector<double> col(c.members.size());
    for (int i = 0; i < d; ++i) {
      for (size_t m = 0; m < c.members.size(); ++m)
        col[m] = candidates[c.members[m]][i];
      std::nth_element(col.begin(), col.begin() + col.size() / 2, col.end());
      double med = col[col.size() / 2];
      if (col.size() % 2 == 0) {
        std::nth_element(col.begin(), col.begin() + col.size() / 2 - 1,
                         col.end());
        med = 0.5 * (med + col[col.size() / 2 - 1]);
      }
      rep[i] = med;
    }
    canonicalize_direction(rep);
    c.representative = rep;
    std::sort(c.members.begin(), c.members.end());
  }
  std::stable_sort(clusters.begin(), clusters.end(),
                   [](const FrequencyCluster& a, const FrequencyCluster& b) {
                     return a.members.size() > b.members.size();
                   });
  int strong = 0;
  for (const auto& c : clusters)
    if (c.members.size() >= 2) ++strong;
  if (strong < d_target)
    throw InsufficientWitnesses(
        "frequency filter found " + std::to_string(strong) +
        " recurring weight directions, need " + std::to_string(d_target));
  clusters.resize(d_target);
  return clusters;
}

// --- top-m starting points ----------------------------------------------

inline std::set<int> topm_labels(Oracle& oracle, const Vec& x) {
  const Feedback fb = oracle.query(x);
  return std::set<int>(fb.labels.begin(), fb.labels.end());
}

// Walks two points toward their midpoint (step halves each round) until
// their top-m label sets share at least two labels. Returns the moved
// points and the shared labels.
struct StartingPoints {
  Vec x1, x2;
  std::vector<int> shared;
};

inline StartingPoints good_starting_points(Oracle& oracle, const Vec& x1,
                                           const Vec& x2, int max_steps = 40) {
  if (oracle.mode().kind != FeedbackKind::kTopM &&
      oracle.mode().kind != FeedbackKind::kSoftmax)
    throw Error("starting-point walk expects score feedback");
  double t1 = 0.0, t2 = 1.0;
  auto at = [&](double t) -> Vec {
    if (t == 0.0) return x1;
    if (t == 1.0) return x2;
    return (1.0 - t) * x1 + t * x2;
  };
  std::set<int> l1 = topm_labels(oracle, x1);
  std::set<int> l2 = topm_labels(oracle, x2);
  for (int step = 0; step <= max_steps; ++step) {
    std::vector<int> shared;
    std::set_intersection(l1.begin(), l1.end(), l2.begin(), l2.end(),
                          std::back_inserter(shared));
    if (shared.size() >= 2) return {at(t1), at(t2), std::move(shared)};
    if (step == max_steps) break;
    t1 += 0.5 * (0.5 - t1);
    t2 += 0.5 * (0.5 - t2);
    l1 = topm_labels(oracle, at(t1));
    l2 = topm_labels(oracle, at(t2));
  }
  throw EntrapmentError("starting-points",
                        "walk exhausted without a shared label pair");
}

}  // namespace pnx
