#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "pnx/oracle.hpp"
#include "pnx/sign_slope.hpp"

using namespace pnx;

namespace {

PreluNetwork toy111() {
  Mat A1(1, 1), A2(1, 1);
  A1 << 2.0;
  A2 << 3.0;
  Vec b1(1), b2(1), s1(1);
  b1 << 0.0;
  b2 << 1.0;
  s1 << 0.5;
  return PreluNetwork::dense({1, 1, 1}, {A1, A2}, {b1, b2}, {s1});
}

// prefix whose top layer holds the given rows, flagged undecided
PrefixModel undecided_prefix(const PreluNetwork& net, int decided_layers,
                             const Mat& rows, const Vec& biases) {
  PrefixModel p = prefix_from_network(net, decided_layers);
  PrefixLayer top;
  top.W = rows;
  top.b = biases;
  top.pos = Vec::Ones(rows.rows());
  top.neg = Vec::Ones(rows.rows());
  top.decided = false;
  p.push_layer(std::move(top));
  return p;
}

}  // namespace

TEST_CASE("adjacent affines of the toy network leak sign and slope") {
  PreluNetwork net = toy111();
  ScalarFn f = [&](const Vec& x) { return net.forward(x)[0]; };
  Mat rows(1, 1);
  rows << 2.0;  // exact row, positive factor
  Vec biases(1);
  biases << 0.0;
  PrefixModel prefix = undecided_prefix(net, 0, rows, biases);
  HiddenView view = HiddenView::pre(prefix, 0);
  std::mt19937_64 rng(3);
  Vec xw = Vec::Zero(1);
  AdjacentAffinePair pair = recover_adjacent_affines(f, view, xw, 0, rng);
  CHECK(pair.w_plus[0] == Catch::Approx(3.0).epsilon(1e-6));
  CHECK(pair.w_minus[0] == Catch::Approx(1.5).epsilon(1e-6));
  auto [sign, slope] = decide_sign_slope_independent(pair);
  CHECK(sign == 1);
  CHECK(slope == Catch::Approx(0.5).epsilon(1e-7));
}

TEST_CASE("negative factor flips which side carries the identity branch") {
  PreluNetwork net = toy111();
  ScalarFn f = [&](const Vec& x) { return net.forward(x)[0]; };
  Mat rows(1, 1);
  rows << -1.0;  // c = -0.5
  Vec biases(1);
  biases << 0.0;
  PrefixModel prefix = undecided_prefix(net, 0, rows, biases);
  HiddenView view = HiddenView::pre(prefix, 0);
  std::mt19937_64 rng(4);
  AdjacentAffinePair pair =
      recover_adjacent_affines(f, view, Vec::Zero(1), 0, rng);
  auto [sign, slope] = decide_sign_slope_independent(pair);
  CHECK(sign == -1);
  CHECK(slope == Catch::Approx(0.5).epsilon(1e-7));
}

TEST_CASE("independent decision rule on direct values") {
  AdjacentAffinePair p;
  p.w_plus = Vec::Constant(1, 4.0);
  p.w_minus = Vec::Constant(1, 2.0);
  p.target = 0;
  auto [s1, v1] = decide_sign_slope_independent(p);
  CHECK(s1 == 1);
  CHECK(v1 == 0.5);
  std::swap(p.w_plus, p.w_minus);
  auto [s2, v2] = decide_sign_slope_independent(p);
  CHECK(s2 == -1);
  CHECK(v2 == 0.5);
  // scale invariance
  p.w_plus *= 17.0;
  p.w_minus *= 17.0;
  auto [s3, v3] = decide_sign_slope_independent(p);
  CHECK(s3 == s2);
  CHECK(v3 == Catch::Approx(v2).epsilon(1e-15));
  // tie is indeterminate
  p.w_plus = p.w_minus;
  CHECK_THROWS_AS(decide_sign_slope_independent(p), IndeterminateSignSlope);
}

TEST_CASE("SOE query and sample count") {
  PreluNetwork net = toy111();
  ModelOracle oracle(net, FeedbackMode::raw());
  ScalarFn f = [&](const Vec& x) { return oracle.query(x).values[0]; };
  Mat rows(1, 1);
  rows << 2.0;
  Vec biases(1);
  biases << 0.0;
  PrefixModel prefix = undecided_prefix(net, 0, rows, biases);
  HiddenView view = HiddenView::pre(prefix, 0);
  std::mt19937_64 rng(5);
  const long long before = oracle.query_count();
  recover_adjacent_affines(f, view, Vec::Zero(1), 0, rng);
  CHECK(oracle.query_count() - before == 2 * (1 + 1));
}

TEST_CASE("adjacent affines agree off-target on a random deeper layer") {
  PreluNetwork net = random_network({8, 6, 6, 1}, 0.05, 0.95, 31);
  ScalarFn f = [&](const Vec& x) { return net.forward(x)[0]; };
  // exact layer 1; layer 2 rows scaled by random signed factors
  std::mt19937_64 rng(32);
  std::uniform_real_distribution<double> u(0.5, 2.0);
  Mat rows = net.weight(1);
  Vec biases = net.bias(1);
  std::vector<double> factors(6);
  for (int j = 0; j < 6; ++j) {
    factors[j] = (j % 2 ? -1 : 1) * u(rng);
    rows.row(j) *= factors[j];
    biases[j] *= factors[j];
  }
  PrefixModel prefix = undecided_prefix(net, 1, rows, biases);
  HiddenView view = HiddenView::pre(prefix, 1);
  // place a witness on neuron 2 of layer 2 by bisection on its preactivation
  const int target = 2;
  std::normal_distribution<double> g(0, 1);
  Vec a(8), b(8);
  double pa = 0, pb = 0;
  for (int tries = 0; tries < 200; ++tries) {
    for (int i = 0; i < 8; ++i) {
      a[i] = g(rng);
      b[i] = g(rng);
    }
    pa = view.hidden(a)[target];
    pb = view.hidden(b)[target];
    if (pa * pb < 0) break;
  }
  REQUIRE(pa * pb < 0);
  for (int it = 0; it < 200; ++it) {
    Vec m = 0.5 * (a + b);
    if (view.hidden(m)[target] * pa > 0)
      a = m;
    else
      b = m;
  }
  Vec xw = 0.5 * (a + b);
  REQUIRE(std::abs(view.hidden(xw)[target]) < 1e-10);
  AdjacentAffinePair pair = recover_adjacent_affines(f, view, xw, target, rng);
  const double scale =
      std::max(pair.w_plus.cwiseAbs().maxCoeff(), pair.w_minus.cwiseAbs().maxCoeff());
  for (int i = 0; i < 6; ++i) {
    if (i == target) continue;
    CHECK(std::abs(pair.w_plus[i] - pair.w_minus[i]) <= 1e-8 * scale);
  }
  auto [sign, slope] = decide_sign_slope_independent(pair);
  CHECK(sign == (factors[target] > 0 ? 1 : -1));
  CHECK(slope == Catch::Approx(net.slope(1)[target]).epsilon(1e-6));
}

TEST_CASE("joint decision rule on extended pairs") {
  ExtendedWeightVector v;
  v.values = Vec::Zero(2);
  v.filled = {1, 1};
  v.values << 3.0, 1.5;
  JointDecision d = decide_sign_slope_joint(v, 0);
  CHECK(d.sign == 1);
  CHECK(d.slope == 0.5);
  CHECK(d.compressed == 3.0);

  v.values << 1.5, 3.0;
  d = decide_sign_slope_joint(v, 0);
  CHECK(d.sign == -1);
  CHECK(d.slope == 0.5);
  CHECK(d.compressed == 3.0);

  // invariant under nonzero rescaling
  v.values *= -7.3;
  JointDecision d2 = decide_sign_slope_joint(v, 0);
  CHECK(d2.sign == d.sign);
  CHECK(d2.slope == Catch::Approx(d.slope).epsilon(1e-15));

  v.values << 2.0, 2.0;
  CHECK_THROWS_AS(decide_sign_slope_joint(v, 0), IndeterminateSignSlope);
  v.filled = {1, 0};
  CHECK_THROWS_AS(decide_sign_slope_joint(v, 0), IndeterminateSignSlope);
}

TEST_CASE("extended slots fill by hidden sign and merge across witnesses") {
  // two witnesses of the same neuron with complementary activation patterns
  Vec truth(4);  // extended target, arbitrary scale
  truth << 3.0, -2.0, 1.5, -0.8;
  CriticalWitness w1, w2;
  w1.hidden = Vec(2);
  w1.hidden << 0.7, 0.4;  // both positive: slots 0, 1
  w2.hidden = Vec(2);
  w2.hidden << -0.3, 0.5;  // slots 2, 1

  Vec c1(2), c2(2);
  c1 << truth[0], truth[1];
  const double lam = 0.37;  // second witness solved at its own scale
  c2 << lam * truth[2], lam * truth[1];

  PartialExtendedRow p1 = scatter_to_extended(c1, 0.9, w1.hidden, w1);
  PartialExtendedRow p2 = scatter_to_extended(c2, lam * 0.9, w2.hidden, w2);
  CHECK(p1.filled == std::vector<char>({1, 1, 0, 0}));
  CHECK(p2.filled == std::vector<char>({0, 1, 1, 0}));

  std::vector<ExtendedWeightVector> vecs;
  merge_partial_row(vecs, p1, 1);
  merge_partial_row(vecs, p2, 1);
  REQUIRE(vecs.size() == 1);
  CHECK(vecs[0].filled == std::vector<char>({1, 1, 1, 0}));
  CHECK(vecs[0].values[0] == Catch::Approx(truth[0]).epsilon(1e-12));
  CHECK(vecs[0].values[1] == Catch::Approx(truth[1]).epsilon(1e-12));
  CHECK(vecs[0].values[2] == Catch::Approx(truth[2]).epsilon(1e-12));
  CHECK(vecs[0].bias == Catch::Approx(0.9).epsilon(1e-12));
}

TEST_CASE("foreign rows do not merge") {
  CriticalWitness w;
  w.hidden = Vec(2);
  w.hidden << 0.7, 0.4;
  Vec c1(2), c2(2);
  c1 << 1.0, 2.0;
  c2 << 1.0, -3.0;  // inconsistent ratios on the shared slots
  std::vector<ExtendedWeightVector> vecs;
  merge_partial_row(vecs, scatter_to_extended(c1, 0.0, w.hidden, w));
  merge_partial_row(vecs, scatter_to_extended(c2, 0.0, w.hidden, w));
  CHECK(vecs.size() == 2);
}

TEST_CASE("split toy network extended pair from both branches") {
  // f over the split hidden coordinates is linear with coefficients [3, 1.5]
  PreluNetwork net = toy111();
  PreluNetwork split = split_layer(net, 0);
  // one sample with y > 0 and one with y < 0 determine the two slots
  Vec xp(1), xn(1);
  xp << 0.8;
  xn << -0.6;
  const double yp = 2 * 0.8, yn = 2 * -0.6;
  // slopes of f along each branch coordinate
  const double wp = (split.forward(xp)[0] - 1.0) / yp;
  const double wn = (split.forward(xn)[0] - 1.0) / yn;
  ExtendedWeightVector v;
  v.values = Vec(2);
  v.values << wp, wn;
  v.filled = {1, 1};
  JointDecision d = decide_sign_slope_joint(v, 0);
  CHECK(d.sign == 1);
  CHECK(d.slope == Catch::Approx(0.5).epsilon(1e-12));
  CHECK(d.compressed == Catch::Approx(3.0).epsilon(1e-12));
}
