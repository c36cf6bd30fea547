#pragma once

// End-to-end extraction driver. Both workflows recover the network layer
// by layer: witnesses -> differential weight recovery -> frequency filter.
// Workflow 1 then decides each neuron's sign and slope from the adjacent
// affine maps around its hyperplane. Workflow 2 splits the undecided layer
// and recovers the next layer's extended weight vectors, which yield the
// signs and slopes jointly and keep them refinable. Score feedback runs
// the same pipeline through log-ratio views and recovers the pivot-fused
// victim.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "pnx/critical_search.hpp"
#include "pnx/error.hpp"
#include "pnx/network.hpp"
#include "pnx/oracle.hpp"
#include "pnx/prefix.hpp"
#include "pnx/refinement.hpp"
#include "pnx/scores_adapter.hpp"
#include "pnx/sign_slope.hpp"
#include "pnx/weight_recovery.hpp"

namespace pnx {

struct AttackConfig {
  int workflow = 2;
  double witness_budget_mult = 3.0;
  ProbeConfig probe;
  int refine_rounds = 3;
  double exploration_radius = 1.0;
  unsigned long long seed = 1;
  double prior_filter_tol = 1e-4;
  double cluster_match_tol = 1e-3;
  int max_segments_per_layer = 20000;
  int max_failed_segments = 3000;
  int sign_retries = 3;
  int pivot = 0;        // fusion pivot for score feedback
  int raw_coord = 0;    // scalar coordinate for raw multi-output feedback
  long long query_budget = -1;

  void validate() const {
    probe.validate();
    if (workflow != 1 && workflow != 2) throw Error("workflow must be 1 or 2");
    if (!(witness_budget_mult > 0) || refine_rounds < 0 ||
        !(exploration_radius > 0) || sign_retries < 1)
      throw Error("attack budgets must be positive");
  }
};

struct PhaseLog {
  std::string name;
  long long queries = 0;
};

struct ExtractionResult {
  std::optional<PreluNetwork> recovered;
  bool fused = false;
  int workflow = 2;
  int pivot = 0;
  long long total_queries = 0;
  std::vector<PhaseLog> phases;
  std::vector<std::string> diagnostics;
  std::optional<std::string> failure;
  std::string failure_phase;
  int layers_completed = 0;
};

namespace detail {

class Extractor {
public:
  Extractor(Oracle& oracle, std::vector<int> dims, AttackConfig cfg)
      : oracle_(oracle),
        dims_(std::move(dims)),
        cfg_(std::move(cfg)),
        rng_(cfg_.seed),
        prefix_(dims_.empty() ? 0 : dims_.front()) {
    cfg_.validate();
    if (static_cast<int>(dims_.size()) < 2)
      throw ShapeError("architecture needs at least input and output dims");
    if (dims_.front() != oracle_.input_dim())
      throw ShapeError("architecture disagrees with the oracle input dim");
    expansiveness_guard(dims_);
    if (cfg_.query_budget >= 0) oracle_.reset_budget(cfg_.query_budget);
    score_mode_ = oracle_.mode().kind == FeedbackKind::kSoftmax ||
                  oracle_.mode().kind == FeedbackKind::kTopM;
  }

  ExtractionResult run() {
    ExtractionResult res;
    res.workflow = cfg_.workflow;
    res.fused = score_mode_;
    res.pivot = cfg_.pivot;
    const int n = static_cast<int>(dims_.size()) - 2;
    try {
      if (cfg_.workflow == 1) {
        for (int h = 0; h < n; ++h) {
          auto neurons = stage_plain_weights(h);
          push_undecided(neurons);
          stage_sign_slope_independent(h, neurons);
          res.layers_completed = h + 1;
        }
      } else {
        if (n > 0) {
          auto neurons = stage_plain_weights(0);
          push_undecided(neurons);
        }
        for (int h = 0; h < n; ++h) {
          if (h + 1 < n)
            stage_extended_hidden(h);
          else
            stage_extended_last(h);
          res.layers_completed = h + 1;
        }
      }
      auto [A, B] = stage_last_layer();
      res.recovered = assemble_network(A, B);
    } catch (const Error& e) {
      res.failure = e.what();
      res.failure_phase = phase_;
      res.diagnostics.push_back(std::string("failed: ") + e.what());
    }
    end_phase();
    res.phases = phases_;
    res.total_queries = oracle_.query_count();
    for (auto& d : diagnostics_) res.diagnostics.push_back(d);
    return res;
  }

  // Sign/slope recovery for the current undecided top layer, exposed for
  // the exact-prefix comparison against the wiggle baseline. The prefix
  // must already hold `hidden` decided layers plus the undecided target.
  static std::vector<std::pair<int, double>> joint_signs_for_top_layer(
      Oracle& oracle, const std::vector<int>& dims, const PrefixModel& seed_prefix,
      const AttackConfig& cfg) {
    Extractor ex(oracle, dims, cfg);
    ex.prefix_ = seed_prefix;
    const int h = ex.prefix_.layer_count() - 1;
    const int n = static_cast<int>(dims.size()) - 2;
    if (h + 1 < n)
      ex.stage_extended_hidden(h);
    else
      ex.stage_extended_last(h);
    std::vector<std::pair<int, double>> out;
    for (size_t j = 0; j < ex.last_signs_.size(); ++j)
      out.emplace_back(ex.last_signs_[j], ex.last_slopes_[j]);
    return out;
  }

private:
  // --- phases -------------------------------------------------------------

  void begin_phase(const std::string& name) {
    end_phase();
    phase_ = name;
    oracle_.set_phase(name);
    phase_start_ = oracle_.query_count();
  }

  void end_phase() {
    if (!phase_.empty())
      phases_.push_back({phase_, oracle_.query_count() - phase_start_});
    phase_.clear();
  }

  // --- input sampling and scalar views -------------------------------------

  Vec sample_input() {
    std::normal_distribution<double> gauss(0.0, 1.0);
    Vec x(dims_.front());
    for (int i = 0; i < x.size(); ++i)
      x[i] = cfg_.exploration_radius * gauss(rng_);
    return x;
  }

  ScalarFn scalar_for_pair(int a, int b) {
    switch (oracle_.mode().kind) {
      case FeedbackKind::kRaw:
        return scalar_view(oracle_, a < 0 ? 0 : a);
      case FeedbackKind::kSigmoid:
        return scalar_view(oracle_, 0);
      default:
        return scalar_view(oracle_, a, b);
    }
  }

  // A scalar view valid around x, with its label tag. Top-m feedback picks
  // a random pair of the labels served there (one query); softmax picks any
  // random pair; raw feedback uses the configured coordinate.
  std::pair<ScalarFn, std::pair<int, int>> scalar_at_point(const Vec& x) {
    switch (oracle_.mode().kind) {
      case FeedbackKind::kRaw: {
        int c = cfg_.raw_coord;
        if (c < 0)
          c = std::uniform_int_distribution<int>(0, oracle_.output_dim() - 1)(
              rng_);
        return {scalar_for_pair(c, -1), {c, -1}};
      }
      case FeedbackKind::kSigmoid:
        return {scalar_for_pair(0, -1), {0, -1}};
      case FeedbackKind::kSoftmax: {
        const int d = oracle_.output_dim();
        int a = std::uniform_int_distribution<int>(0, d - 1)(rng_);
        int b = std::uniform_int_distribution<int>(0, d - 2)(rng_);
        if (b >= a) ++b;
        return {scalar_for_pair(a, b), {a, b}};
      }
      case FeedbackKind::kTopM: {
        const Feedback fb = oracle_.query(x);
        std::vector<int> avail;
        for (size_t i = 0; i < fb.labels.size(); ++i)
          if (fb.scores[i] > 0) avail.push_back(fb.labels[i]);
        if (avail.size() < 2)
          throw LabelUnavailable("fewer than two positive scores served");
        int a = std::uniform_int_distribution<int>(
            0, static_cast<int>(avail.size()) - 1)(rng_);
        int b = std::uniform_int_distribution<int>(
            0, static_cast<int>(avail.size()) - 2)(rng_);
        if (b >= a) ++b;
        return {scalar_for_pair(avail[a], avail[b]), {avail[a], avail[b]}};
      }
    }
    throw Error("unknown feedback mode");
  }

  ScalarAt provider() {
    return [this](const Vec& x) { return scalar_at_point(x).first; };
  }

  struct Segment {
    Vec a, b;
    ScalarFn fn;
    int ta = 0, tb = -1;
  };

  std::optional<Segment> make_segment() {
    Vec x1 = sample_input();
    Vec x2 = sample_input();
    if (oracle_.mode().kind == FeedbackKind::kTopM) {
      try {
        StartingPoints sp = good_starting_points(oracle_, x1, x2);
        int a = std::uniform_int_distribution<int>(
            0, static_cast<int>(sp.shared.size()) - 1)(rng_);
        int b = std::uniform_int_distribution<int>(
            0, static_cast<int>(sp.shared.size()) - 2)(rng_);
        if (b >= a) ++b;
        return Segment{sp.x1, sp.x2,
                       scalar_for_pair(sp.shared[a], sp.shared[b]),
                       sp.shared[a], sp.shared[b]};
      } catch (const EntrapmentError&) {
        return std::nullopt;
      }
    }
    auto [fn, tag] = scalar_at_point(0.5 * (x1 + x2));
    return Segment{std::move(x1), std::move(x2), std::move(fn), tag.first,
                   tag.second};
  }

  // --- witness collection ---------------------------------------------------

  bool duplicate_witness(const std::vector<Vec>& seen, const Vec& x) const {
    for (const auto& s : seen)
      if ((s - x).norm() < 1e-9 * (1.0 + x.norm())) return true;
    return false;
  }

  // Collects certified witnesses over random segments and hands each to
  // `consume`. `done` is polled after every productive witness. Throws an
  // entrapment error when segments stop producing.
  void collect_witnesses(
      const HiddenView& view, bool check_tap_coords,
      const std::function<bool(const Segment&, const CriticalWitness&)>& consume,
      const std::function<bool()>& done) {
    int segments = 0, consecutive_failures = 0;
    std::vector<Vec> seen;
    while (!done()) {
      if (segments++ > cfg_.max_segments_per_layer)
        throw EntrapmentError(phase_, "segment budget exhausted");
      if (consecutive_failures > cfg_.max_failed_segments)
        throw EntrapmentError(phase_, "witness search stalled");
      auto seg = make_segment();
      if (!seg) {
        ++consecutive_failures;
        continue;
      }
      std::vector<SegmentKink> kinks;
      try {
        kinks = find_critical_on_segment(seg->fn, seg->a, seg->b, cfg_.probe);
      } catch (const LabelUnavailable&) {
        ++consecutive_failures;
        continue;
      }
      bool productive = false;
      for (const auto& k : kinks) {
        if (done()) break;
        if (duplicate_witness(seen, k.x)) continue;
        if (!filter_prior_layers(view, k.x, cfg_.prior_filter_tol)) continue;
        Vec hidden = view.hidden(k.x);
        if (check_tap_coords &&
            hidden.cwiseAbs().minCoeff() <
                cfg_.prior_filter_tol * std::max(1.0, hidden.norm()))
          continue;
        std::optional<double> spike;
        try {
          spike = certify_kink(seg->fn, k.x, seg->b - seg->a, cfg_.probe);
        } catch (const LabelUnavailable&) {
          continue;
        }
        if (!spike) continue;
        CriticalWitness w;
        w.x = k.x;
        w.hidden = std::move(hidden);
        w.residual = std::abs(*spike);
        w.seg_a = seg->a;
        w.seg_b = seg->b;
        w.scalar_a = seg->ta;
        w.scalar_b = seg->tb;
        seen.push_back(w.x);
        if (consume(*seg, w)) productive = true;
      }
      if (productive)
        consecutive_failures = 0;
      else
        ++consecutive_failures;
    }
  }

  // --- plain layer recovery (weights up to factor) --------------------------

  std::vector<RecoveredNeuron> stage_plain_weights(int h) {
    const int d_target = dims_[h + 1];
    HiddenView view = h == 0 ? HiddenView::input(dims_.front())
                             : HiddenView::post(prefix_, h - 1);
    begin_phase("layer" + std::to_string(h + 1) + ".witnesses");
    std::size_t target = static_cast<std::size_t>(
        std::ceil(cfg_.witness_budget_mult * d_target *
                  std::log2(std::max(2.0, double(d_target)))));
    std::vector<RecoveredNeuron> candidates;
    std::vector<Vec> dirs;
    std::optional<std::vector<FrequencyCluster>> clusters;
    auto consume = [&](const Segment& seg, const CriticalWitness& w) {
      std::optional<RecoveredNeuron> neuron;
      try {
        neuron = recover_neuron_at_witness(seg.fn, view, w, cfg_.probe, rng_);
      } catch (const LabelUnavailable&) {
        return false;
      }
      if (!neuron) return false;
      candidates.push_back(std::move(*neuron));
      dirs.push_back(candidates.back().weight);
      return true;
    };
    auto done = [&]() {
      if (candidates.size() < target) return false;
      try {
        clusters = filter_by_frequency(dirs, d_target, cfg_.cluster_match_tol);
        return true;
      } catch (const InsufficientWitnesses&) {
        target += target / 2 + 1;
        return false;
      }
    };
    collect_witnesses(view, false, consume, done);
    std::vector<RecoveredNeuron> neurons;
    for (const auto& c : *clusters) {
      RecoveredNeuron n;
      n.weight = c.representative;
      std::vector<double> biases;
      double res = 0;
      for (int m : c.members) {
        biases.push_back(candidates[m].bias);
        res = std::max(res, candidates[m].residual);
        for (auto& w : candidates[m].witnesses) n.witnesses.push_back(w);
      }
      std::sort(biases.begin(), biases.end());
      n.bias = biases.size() % 2 ? biases[biases.size() / 2]
                                 : 0.5 * (biases[biases.size() / 2] +
                                          biases[biases.size() / 2 - 1]);
      n.residual = hyperplane_residual(n.weight, n.bias, n.witnesses);
      neurons.push_back(std::move(n));
    }
    begin_phase("layer" + std::to_string(h + 1) + ".refine");
    for (auto& n : neurons) {
      auto rep = refine_neuron(provider(), view, n, cfg_.refine_rounds,
                               cfg_.probe, rng_, cfg_.exploration_radius,
                               dims_.front());
      if (rep.failed)
        diagnostics_.push_back("layer " + std::to_string(h + 1) +
                               ": refinement failed for one neuron");
    }
    return neurons;
  }

  void push_undecided(const std::vector<RecoveredNeuron>& neurons) {
    const int d = static_cast<int>(neurons.size());
    const int in = prefix_.layer_count() == 0
                       ? prefix_.input_dim()
                       : prefix_.out_dim(prefix_.layer_count() - 1);
    PrefixLayer l;
    l.W.resize(d, in);
    l.b.resize(d);
    for (int j = 0; j < d; ++j) {
      l.W.row(j) = neurons[j].weight.transpose();
      l.b[j] = neurons[j].bias;
    }
    l.pos = Vec::Ones(d);
    l.neg = Vec::Ones(d);
    l.decided = false;
    prefix_.push_layer(std::move(l));
  }

  void decide_layer(int h, const std::vector<int>& signs,
                    const std::vector<double>& slopes) {
    PrefixLayer& l = prefix_.layer(h);
    for (int j = 0; j < l.W.rows(); ++j) {
      if (signs[j] < 0) {
        l.W.row(j) = -l.W.row(j);
        l.b[j] = -l.b[j];
      }
      l.neg[j] = slopes[j];
    }
    l.pos = Vec::Ones(l.W.rows());
    l.decided = true;
    last_signs_ = signs;
    last_slopes_ = slopes;
  }

  // --- workflow 1: independent sign/slope ----------------------------------

  void stage_sign_slope_independent(int h,
                                    std::vector<RecoveredNeuron>& neurons) {
    begin_phase("layer" + std::to_string(h + 1) + ".signslope");
    HiddenView pre = HiddenView::pre(prefix_, h);
    const int d = dims_[h + 1];
    std::vector<int> signs(d, 0);
    std::vector<double> slopes(d, -1.0);
    for (int j = 0; j < d; ++j) {
      Vec ej = Vec::Zero(d);
      ej[j] = 1.0;
      for (int attempt = 0; attempt < cfg_.sign_retries && signs[j] == 0;
           ++attempt) {
        std::optional<Vec> wx;
        ScalarFn fn;
        if (attempt == 0 && !neurons[j].witnesses.empty()) {
          const auto& w0 = neurons[j].witnesses.front();
          wx = w0.x;
          try {
            fn = scalar_at_point(*wx);
          } catch (const LabelUnavailable&) {
            wx.reset();
          }
        }
        if (!wx) {
          auto fw =
              find_witness_near_hyperplane(provider(), pre, ej, 0.0, cfg_.probe,
                                           rng_, cfg_.exploration_radius,
                                           dims_.front());
          if (!fw) continue;
          wx = fw->witness.x;
          fn = fw->fn;
        }
        // other tap coordinates must sit away from their hyperplanes
        Vec ty = pre.hidden(*wx);
        bool clean = true;
        for (int i = 0; i < d; ++i)
          if (i != j && std::abs(ty[i]) <
                            cfg_.prior_filter_tol * std::max(1.0, ty.norm()))
            clean = false;
        if (!clean) continue;
        try {
          AdjacentAffinePair pair =
              recover_adjacent_affines(fn, pre, *wx, j, rng_);
          auto [sg, sl] = decide_sign_slope_independent(pair);
          signs[j] = sg;
          slopes[j] = sl;
        } catch (const IndeterminateSignSlope&) {
          continue;
        } catch (const LabelUnavailable&) {
          continue;
        } catch (const Error& e) {
          if (dynamic_cast<const BudgetExhausted*>(&e)) throw;
          continue;
        }
      }
      if (signs[j] == 0)
        throw Error("layer " + std::to_string(h + 1) + " neuron " +
                    std::to_string(j) +
                    " failed sign/slope recovery after retries");
    }
    decide_layer(h, signs, slopes);
  }

  // --- workflow 2: joint sign/slope over a split layer ----------------------

  Vec split_coords(const Vec& ty) const {
    const int d = static_cast<int>(ty.size());
    Vec u = Vec::Zero(2 * d);
    for (int j = 0; j < d; ++j) {
      if (ty[j] > 0)
        u[j] = ty[j];
      else
        u[j + d] = ty[j];
    }
    return u;
  }

  // Predicted preactivation of an extended row at x; requires the slots
  // active at x to be filled.
  std::optional<double> extended_pred(const ExtendedWeightVector& v,
                                      const Vec& ty) const {
    const int d = static_cast<int>(ty.size());
    double p = v.bias;
    for (int j = 0; j < d; ++j) {
      const int slot = ty[j] > 0 ? j : j + d;
      if (!v.filled[slot]) return std::nullopt;
      p += v.values[slot] * ty[j];
    }
    return p;
  }

  struct ExtendedCoverage {
    bool vectors_ok = false;    // d_next vectors with >= 2 parts
    bool pairs_ok = false;      // every j paired in some vector
    bool rows_ok = false;       // every vector has some slot per j
  };

  ExtendedCoverage extended_coverage(std::vector<ExtendedWeightVector>& vecs,
                                     int d_next, int dh) const {
    std::stable_sort(vecs.begin(), vecs.end(),
                     [](const ExtendedWeightVector& a,
                        const ExtendedWeightVector& b) {
                       return a.parts.size() > b.parts.size();
                     });
    ExtendedCoverage cov;
    int strong = 0;
    for (const auto& v : vecs)
      if (v.parts.size() >= 2) ++strong;
    cov.vectors_ok = strong >= d_next;
    if (!cov.vectors_ok) return cov;
    cov.pairs_ok = true;
    cov.rows_ok = true;
    for (int j = 0; j < dh; ++j) {
      bool paired = false;
      for (int k = 0; k < d_next; ++k) {
        if (vecs[k].filled[j] && vecs[k].filled[j + dh]) paired = true;
        if (!vecs[k].filled[j] && !vecs[k].filled[j + dh]) cov.rows_ok = false;
      }
      if (!paired) cov.pairs_ok = false;
    }
    return cov;
  }

  // Fresh witness close to an extended row's hyperplane, anchored near one
  // of its existing witnesses so the active slots stay known.
  std::optional<std::pair<FreshWitness, PartialExtendedRow>>
  extended_fresh_witness(const HiddenView& view, ExtendedWeightVector& v,
                         int max_tries = 10) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    const int dh = view.dim();
    for (int attempt = 0; attempt < max_tries; ++attempt) {
      const auto& anchor =
          v.parts[std::uniform_int_distribution<std::size_t>(
              0, v.parts.size() - 1)(rng_)];
      double spread = 0.35 * cfg_.exploration_radius;
      for (int shrink = 0; shrink < 5; ++shrink, spread *= 0.4) {
        Vec x0 = anchor.witness.x;
        for (int i = 0; i < x0.size(); ++i) x0[i] += spread * gauss(rng_);
        Vec ty = view.hidden(x0);
        auto p0 = extended_pred(v, ty);
        if (!p0) continue;
        Vec coeff(dh);
        bool ok = true;
        for (int j = 0; j < dh; ++j) {
          const int slot = ty[j] > 0 ? j : j + dh;
          if (!v.filled[slot]) {
            ok = false;
            break;
          }
          coeff[j] = v.values[slot];
        }
        if (!ok || coeff.squaredNorm() == 0) continue;
        Vec dhid = -(*p0) * coeff / coeff.squaredNorm();
        Vec dx;
        try {
          dx = view.steer(x0, dhid);
        } catch (const ExpansivenessError&) {
          throw;
        }
        const Vec a = x0 - 0.25 * dx, b = x0 + 1.5 * dx;
        ScalarFn fn;
        std::vector<SegmentKink> kinks;
        try {
          fn = scalar_at_point(0.5 * (a + b));
          kinks = find_critical_on_segment(fn, a, b, cfg_.probe);
        } catch (const LabelUnavailable&) {
          continue;
        }
        double best = std::numeric_limits<double>::infinity(), second = best;
        int bi = -1;
        for (size_t k = 0; k < kinks.size(); ++k) {
          Vec tk = view.hidden(kinks[k].x);
          auto pk = extended_pred(v, tk);
          if (!pk) continue;
          const double ap = std::abs(*pk);
          if (ap < best) {
            second = best;
            best = ap;
            bi = static_cast<int>(k);
          } else if (ap < second) {
            second = ap;
          }
        }
        const double scale = std::max(1.0, ty.norm());
        if (bi < 0 || best > 2e-2 * scale) continue;
        if (kinks.size() > 1 && best > 0.25 * second) continue;
        Vec th = view.hidden(kinks[bi].x);
        if (th.cwiseAbs().minCoeff() <
            cfg_.prior_filter_tol * std::max(1.0, th.norm()))
          continue;
        if (!filter_prior_layers(view, kinks[bi].x, cfg_.prior_filter_tol))
          continue;
        std::optional<double> spike;
        try {
          spike = certify_kink(fn, kinks[bi].x, b - a, cfg_.probe);
        } catch (const LabelUnavailable&) {
          continue;
        }
        if (!spike) continue;
        CriticalWitness w;
        w.x = kinks[bi].x;
        w.hidden = std::move(th);
        w.residual = std::abs(*spike);
        w.seg_a = a;
        w.seg_b = b;
        std::optional<RecoveredNeuron> sol;
        try {
          sol = recover_neuron_at_witness(fn, view, w, cfg_.probe, rng_);
        } catch (const LabelUnavailable&) {
          continue;
        }
        if (!sol) continue;
        PartialExtendedRow part =
            scatter_to_extended(sol->weight, sol->bias, w.hidden, w);
        return std::make_pair(FreshWitness{w, fn}, std::move(part));
      }
    }
    return std::nullopt;
  }

  double extended_residual(const ExtendedWeightVector& v,
                           const HiddenView& view) const {
    double worst = 0;
    for (const auto& p : v.parts) {
      auto pr = extended_pred(v, view.hidden(p.witness.x));
      if (pr) worst = std::max(worst, std::abs(*pr));
    }
    return worst;
  }

  void decide_from_extended(int h,
                            const std::vector<ExtendedWeightVector>& vecs) {
    const int dh = dims_[h + 1];
    std::vector<int> signs(dh, 0);
    std::vector<double> slopes(dh, -1.0);
    for (int j = 0; j < dh; ++j) {
      int plus = 0, minus = 0;
      std::vector<double> sl;
      for (const auto& v : vecs) {
        try {
          JointDecision d = decide_sign_slope_joint(v, j);
          (d.sign > 0 ? plus : minus)++;
          sl.push_back(d.slope);
        } catch (const IndeterminateSignSlope&) {
          continue;
        }
      }
      if (plus == minus)
        throw Error("layer " + std::to_string(h + 1) + " neuron " +
                    std::to_string(j) + " sign undecidable from " +
                    std::to_string(plus + minus) + " extended pairs");
      signs[j] = plus > minus ? 1 : -1;
      std::sort(sl.begin(), sl.end());
      slopes[j] = sl[sl.size() / 2];
    }
    decide_layer(h, signs, slopes);
  }

  // Compressed next-layer rows in the decided basis of layer h.
  std::vector<RecoveredNeuron> compress_extended(
      int h, const std::vector<ExtendedWeightVector>& vecs) {
    const int dh = dims_[h + 1];
    std::vector<RecoveredNeuron> rows;
    for (const auto& v : vecs) {
      Vec row(dh);
      for (int j = 0; j < dh; ++j) {
        const int big = last_signs_[j] > 0 ? j : j + dh;
        const int small = last_signs_[j] > 0 ? j + dh : j;
        double val;
        if (v.filled[big])
          val = v.values[big];
        else
          val = v.values[small] / last_slopes_[j];
        row[j] = last_signs_[j] * val;
      }
      RecoveredNeuron n;
      double bias = v.bias;
      const double norm = row.norm();
      row /= norm;
      bias /= norm;
      for (int i = 0; i < dh; ++i) {
        if (std::abs(row[i]) > 1e-9) {
          if (row[i] < 0) {
            row = -row;
            bias = -bias;
          }
          break;
        }
      }
      n.weight = std::move(row);
      n.bias = bias;
      for (const auto& p : v.parts) n.witnesses.push_back(p.witness);
      rows.push_back(std::move(n));
    }
    return rows;
  }

  void stage_extended_hidden(int h) {
    const int dh = dims_[h + 1];
    const int d_next = dims_[h + 2];
    HiddenView view = HiddenView::pre(prefix_, h);
    begin_phase("layer" + std::to_string(h + 2) + ".witnesses");
    std::vector<ExtendedWeightVector> vectors;
    std::size_t target = static_cast<std::size_t>(
        std::ceil(cfg_.witness_budget_mult * d_next *
                  std::log2(std::max(2.0, double(d_next)))));
    std::size_t consumed = 0;
    auto consume = [&](const Segment& seg, const CriticalWitness& w) {
      std::optional<RecoveredNeuron> sol;
      try {
        sol = recover_neuron_at_witness(seg.fn, view, w, cfg_.probe, rng_);
      } catch (const LabelUnavailable&) {
        return false;
      }
      if (!sol) return false;
      merge_partial_row(vectors,
                        scatter_to_extended(sol->weight, sol->bias, w.hidden, w));
      ++consumed;
      return true;
    };
    auto done = [&]() {
      if (consumed < target) return false;
      auto cov = extended_coverage(vectors, d_next, dh);
      if (cov.vectors_ok && cov.pairs_ok && cov.rows_ok) return true;
      target += target / 2 + 1;
      return false;
    };
    collect_witnesses(view, true, consume, done);
    auto cov = extended_coverage(vectors, d_next, dh);
    if (!(cov.vectors_ok && cov.pairs_ok && cov.rows_ok))
      throw InsufficientWitnesses("extended vectors incomplete for layer " +
                                  std::to_string(h + 2));
    vectors.resize(d_next);

    begin_phase("layer" + std::to_string(h + 2) + ".refine");
    for (int round = 0; round < cfg_.refine_rounds; ++round) {
      bool any = false;
      for (auto& v : vectors) {
        ExtendedWeightVector snapshot = v;
        const double before = extended_residual(v, view);
        if (before < 1e-12) continue;
        int added = 0;
        for (int t = 0; t < dh && added < dh; ++t) {
          auto fw = extended_fresh_witness(view, v);
          if (!fw) break;
          std::vector<ExtendedWeightVector> self{v};
          merge_partial_row(self, fw->second);
          v = self.front();
          ++added;
        }
        if (added == 0) continue;
        if (extended_residual(v, view) > before)
          v = snapshot;  // keep the better iterate
        else
          any = true;
      }
      if (!any) break;
    }

    begin_phase("layer" + std::to_string(h + 1) + ".signslope");
    decide_from_extended(h, vectors);
    auto rows = compress_extended(h, vectors);
    push_undecided(rows);

    begin_phase("layer" + std::to_string(h + 2) + ".rowrefine");
    HiddenView post = HiddenView::post(prefix_, h);
    for (std::size_t j = 0; j < rows.size(); ++j) {
      rows[j].residual =
          hyperplane_residual(rows[j].weight, rows[j].bias, rows[j].witnesses);
      refine_neuron(provider(), post, rows[j], cfg_.refine_rounds, cfg_.probe,
                    rng_, cfg_.exploration_radius, dims_.front());
      prefix_.layer(h + 1).W.row(j) = rows[j].weight.transpose();
      prefix_.layer(h + 1).b[j] = rows[j].bias;
    }
  }

  // Extended recovery of the output layer by exact affine regression over
  // the split coordinates, then sign/slope decisions for the last hidden
  // layer. The regression carries no unknown factor, so for one-hidden-
  // layer victims the recovered slopes are final and never refined again.
  void stage_extended_last(int h) {
    const int dh = dims_[h + 1];
    const int d_out = dims_.back();
    HiddenView view = HiddenView::pre(prefix_, h);
    begin_phase("lastlayer.extended");
    const int unknowns = 2 * dh + 1;
    const int want_rows = 2 * unknowns + 8;
    std::vector<Vec> us;
    std::vector<Feedback> fbs;
    std::vector<char> seen_pos(dh, 0), seen_neg(dh, 0);
    int attempts = 0;
    auto coverage_done = [&]() {
      if (static_cast<int>(us.size()) < want_rows) return false;
      for (int j = 0; j < dh; ++j)
        if (!seen_pos[j] || !seen_neg[j]) return false;
      return true;
    };
    while (!coverage_done()) {
      if (++attempts > 200 * want_rows)
        throw EntrapmentError(phase_,
                              "split coordinates never covered both branches");
      Vec x = sample_input();
      Vec ty = view.hidden(x);
      if (ty.cwiseAbs().minCoeff() < 1e-6 * std::max(1.0, ty.norm())) continue;
      if (!filter_prior_layers(view, x, 1e-9)) continue;
      for (int j = 0; j < dh; ++j) (ty[j] > 0 ? seen_pos : seen_neg)[j] = 1;
      us.push_back(split_coords(ty));
      fbs.push_back(oracle_.query(x));
    }
    Mat rows;  // d_out x (2dh+1), one extended affine row per output
    if (oracle_.mode().kind == FeedbackKind::kTopM) {
      rows = fit_pairwise_rows(us, fbs, unknowns);
    } else {
      Mat design(us.size(), unknowns);
      for (std::size_t r = 0; r < us.size(); ++r) {
        design.row(r).head(2 * dh) = us[r].transpose();
        design(r, 2 * dh) = 1.0;
      }
      Eigen::ColPivHouseholderQR<Mat> qr(design);
      if (qr.rank() < unknowns)
        throw Error("extended last-layer design is rank deficient");
      rows.resize(d_out, unknowns);
      rows.setZero();
      for (int k = 0; k < d_out; ++k) {
        if (score_mode_ && k == cfg_.pivot) continue;
        Vec t(us.size());
        for (std::size_t r = 0; r < us.size(); ++r)
          t[r] = target_value(fbs[r], k);
        rows.row(k) = qr.solve(t).transpose();
      }
    }
    begin_phase("layer" + std::to_string(h + 1) + ".signslope");
    std::vector<ExtendedWeightVector> vecs;
    for (int k = 0; k < d_out; ++k) {
      if (score_mode_ && k == cfg_.pivot) continue;
      ExtendedWeightVector v;
      v.values = rows.row(k).head(2 * dh).transpose();
      v.filled.assign(2 * dh, 1);
      v.bias = rows(k, 2 * dh);
      vecs.push_back(std::move(v));
    }
    decide_from_extended(h, vecs);
  }

  double target_value(const Feedback& fb, int k) const {
    switch (oracle_.mode().kind) {
      case FeedbackKind::kRaw:
        return fb.values[k];
      case FeedbackKind::kSigmoid:
        return sigmoid_to_raw(fb.values[0]);
      case FeedbackKind::kSoftmax:
        return log_ratio(fb, k, cfg_.pivot);
      default:
        throw Error("target_value unsupported for top-m feedback");
    }
  }

  // Joint least squares over label pairs served by top-m feedback: one
  // unknown affine row per non-pivot label, equations ln(qa/qb) for every
  // served pair. Requires each label's co-occurrence component to reach the
  // pivot.
  Mat fit_pairwise_rows(const std::vector<Vec>& features,
                        const std::vector<Feedback>& fbs, int per_row) {
    const int d_out = dims_.back();
    std::vector<int> parent(d_out);
    std::iota(parent.begin(), parent.end(), 0);
    std::function<int(int)> find = [&](int a) {
      return parent[a] == a ? a : parent[a] = find(parent[a]);
    };
    long long eqs = 0;
    for (const auto& fb : fbs) {
      for (size_t i = 0; i < fb.labels.size(); ++i)
        for (size_t j = i + 1; j < fb.labels.size(); ++j)
          if (fb.scores[i] > 0 && fb.scores[j] > 0) {
            parent[find(fb.labels[i])] = find(fb.labels[j]);
            ++eqs;
          }
    }
    for (int l = 0; l < d_out; ++l)
      if (find(l) != find(cfg_.pivot))
        throw EntrapmentError(
            phase_, "label " + std::to_string(l) +
                        " never co-served with the pivot component");
    auto block = [&](int label) {
      return label < cfg_.pivot ? label : label - 1;
    };
    const int unknowns = (d_out - 1) * per_row;
    Mat A = Mat::Zero(eqs, unknowns);
    Vec b(eqs);
    long long r = 0;
    for (std::size_t s = 0; s < fbs.size(); ++s) {
      const Feedback& fb = fbs[s];
      Vec feat(per_row);
      feat.head(per_row - 1) = features[s];
      feat[per_row - 1] = 1.0;
      for (size_t i = 0; i < fb.labels.size(); ++i) {
        for (size_t j = i + 1; j < fb.labels.size(); ++j) {
          if (!(fb.scores[i] > 0 && fb.scores[j] > 0)) continue;
          const int la = fb.labels[i], lb = fb.labels[j];
          if (la != cfg_.pivot)
            A.row(r).segment(block(la) * per_row, per_row) = feat.transpose();
          if (lb != cfg_.pivot)
            A.row(r).segment(block(lb) * per_row, per_row) -= feat.transpose();
          b[r] = std::log(fb.scores[i]) - std::log(fb.scores[j]);
          ++r;
        }
      }
    }
    Vec sol = A.householderQr().solve(b);
    if (!sol.allFinite() ||
        (A * sol - b).norm() > 1e-6 * std::max(1.0, b.norm()))
      throw Error("pairwise last-layer fit did not converge");
    Mat rows = Mat::Zero(d_out, per_row);
    for (int l = 0; l < d_out; ++l) {
      if (l == cfg_.pivot) continue;
      rows.row(l) = sol.segment(block(l) * per_row, per_row).transpose();
    }
    return rows;
  }

  // --- final affine layer ----------------------------------------------------

  std::pair<Mat, Vec> stage_last_layer() {
    begin_phase("lastlayer.solve");
    const int n = static_cast<int>(dims_.size()) - 2;
    HiddenView view = n == 0 ? HiddenView::input(dims_.front())
                             : HiddenView::post(prefix_, n - 1);
    const int d_out = dims_.back();
    if (oracle_.mode().kind == FeedbackKind::kTopM) {
      const int dh = view.dim();
      const int per_row = dh + 1;
      const int want_rows = 3 * per_row + 8;
      std::vector<Vec> feats;
      std::vector<Feedback> fbs;
      int attempts = 0;
      while (static_cast<int>(feats.size()) < want_rows) {
        if (++attempts > 200 * want_rows)
          throw EntrapmentError(phase_, "last-layer sampling stalled");
        Vec x = sample_input();
        feats.push_back(view.hidden(x));
        fbs.push_back(oracle_.query(x));
      }
      Mat rows = fit_pairwise_rows(feats, fbs, per_row);
      Mat A = rows.leftCols(dh);
      Vec B = rows.col(dh);
      return {A, B};
    }
    auto query_vec = [&](const Vec& x) {
      const Feedback fb = oracle_.query(x);
      Vec t(d_out);
      for (int k = 0; k < d_out; ++k) {
        if (score_mode_ && k == cfg_.pivot) {
          t[k] = 0.0;
          continue;
        }
        switch (oracle_.mode().kind) {
          case FeedbackKind::kRaw:
            t[k] = fb.values[k];
            break;
          case FeedbackKind::kSigmoid:
            t[k] = sigmoid_to_raw(fb.values[0]);
            break;
          default:
            t[k] = log_ratio(fb, k, cfg_.pivot);
        }
      }
      return t;
    };
    auto [A, B] = recover_last_layer(query_vec, view, dims_.front(), d_out,
                                     cfg_.exploration_radius, rng_);
    if (score_mode_) {
      A.row(cfg_.pivot).setZero();
      B[cfg_.pivot] = 0.0;
    }
    return {A, B};
  }

  PreluNetwork assemble_network(const Mat& A_last, const Vec& B_last) const {
    const int n = static_cast<int>(dims_.size()) - 2;
    std::vector<Mat> W;
    std::vector<Vec> b, slopes;
    for (int k = 0; k < n; ++k) {
      const PrefixLayer& l = prefix_.layer(k);
      if (!l.decided) throw Error("internal: undecided layer at assembly");
      W.push_back(l.W);
      b.push_back(l.b);
      slopes.push_back(l.neg);
    }
    W.push_back(A_last);
    b.push_back(B_last);
    return PreluNetwork::dense(dims_, std::move(W), std::move(b),
                               std::move(slopes));
  }

  Oracle& oracle_;
  std::vector<int> dims_;
  AttackConfig cfg_;
  std::mt19937_64 rng_;
  PrefixModel prefix_;
  bool score_mode_ = false;
  std::vector<PhaseLog> phases_;
  std::vector<std::string> diagnostics_;
  std::string phase_;
  long long phase_start_ = 0;
  std::vector<int> last_signs_;
  std::vector<double> last_slopes_;
};

}  // namespace detail

inline ExtractionResult extract(Oracle& oracle, const std::vector<int>& dims,
                                const AttackConfig& cfg) {
  detail::Extractor ex(oracle, dims, cfg);
  return ex.run();
}

// Joint sign/slope recovery for one layer in the exact-prefix setting:
// layers below `hidden` come from the true parameters, the target layer
// rows are supplied up to signed factors. Returns per-neuron
// (sign, slope). Benchmark companion to the wiggle baseline.
inline std::vector<std::pair<int, double>> joint_sign_slope_exact_prefix(
    Oracle& oracle, const PreluNetwork& victim, int hidden,
    const Mat& scaled_rows, const Vec& scaled_biases, AttackConfig cfg) {
  PrefixModel prefix = prefix_from_network(victim, hidden);
  PrefixLayer top;
  top.W = scaled_rows;
  top.b = scaled_biases;
  top.pos = Vec::Ones(scaled_rows.rows());
  top.neg = Vec::Ones(scaled_rows.rows());
  top.decided = false;
  prefix.push_layer(std::move(top));
  std::vector<int> dims;
  for (int d : victim.dims()) dims.push_back(d);
  return detail::Extractor::joint_signs_for_top_layer(oracle, dims, prefix,
                                                      cfg);
}

}  // namespace pnx
