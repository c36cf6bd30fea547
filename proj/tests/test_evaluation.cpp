#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "pnx/evaluation.hpp"

using namespace pnx;

TEST_CASE("alignment of a network against itself is exact") {
  PreluNetwork net = random_network({6, 5, 4, 2}, 0.05, 0.95, 71);
  AlignmentResult r = align(net, net);
  CHECK(r.max_param_err <= 1e-15);
  CHECK(!r.sign_mismatch);
}

TEST_CASE("alignment undoes scaling and permutation") {
  PreluNetwork net = random_network({6, 5, 4, 2}, 0.05, 0.95, 73);
  PreluNetwork mangled = scale_neuron(net, 0, 1, 2.0);
  mangled = scale_neuron(mangled, 1, 3, 0.37);
  mangled = permute_layer(mangled, 0, {4, 2, 0, 1, 3});
  mangled = permute_layer(mangled, 1, {1, 0, 3, 2});
  AlignmentResult r = align(net, mangled);
  CHECK(r.max_param_err <= 1e-10);
}

TEST_CASE("empirical equivalence basics") {
  PreluNetwork net = random_network({5, 4, 1}, 0.05, 0.95, 74);
  CHECK(empirical_equivalence(net, net, 1.0, 100, 9) == 0.0);
  // reproducible bit for bit under a fixed seed
  PreluNetwork other = scale_neuron(net, 0, 0, 1.0 + 1e-7);
  const double e1 = empirical_equivalence(net, other, 1.0, 500, 9);
  const double e2 = empirical_equivalence(net, other, 1.0, 500, 9);
  CHECK(e1 == e2);
  // monotone in nested sample counts: the sampler is prefix-stable
  std::mt19937_64 rng_a(9);
  (void)rng_a;
  const double small = empirical_equivalence(net, other, 1.0, 100, 9);
  CHECK(e1 >= small);
}

TEST_CASE("propagated bound on a single affine layer matches hand interval") {
  Mat A(1, 3), Ah(1, 3);
  A << 1.0, -2.0, 0.5;
  Ah << 1.1, -2.2, 0.6;
  Vec b(1), bh(1);
  b << 0.3;
  bh << 0.1;
  PreluNetwork t({3, 1}, {A}, {b}, {}, {});
  PreluNetwork h({3, 1}, {Ah}, {bh}, {}, {});
  // |dW| . box + |db| = (0.1 + 0.2 + 0.1) * 1 + 0.2
  const double bound = propagate_bounds(t, h, 1.0);
  CHECK(bound == Catch::Approx(0.6).epsilon(1e-12));
  CHECK(bound >= empirical_equivalence(t, h, 1.0, 2000, 5));
}

TEST_CASE("identical networks have zero bound") {
  PreluNetwork net = random_network({5, 4, 3, 1}, 0.05, 0.95, 75);
  CHECK(propagate_bounds(net, net, 1.0) == 0.0);
}

TEST_CASE("bound dominates the empirical error for perturbed networks") {
  PreluNetwork net = random_network({6, 5, 4, 1}, 0.05, 0.95, 76);
  std::mt19937_64 rng(77);
  std::normal_distribution<double> g(0, 1);
  PreluNetwork noisy = net;
  for (int k = 0; k <= noisy.depth(); ++k) {
    for (int r = 0; r < noisy.weight(k).rows(); ++r)
      for (int c = 0; c < noisy.weight(k).cols(); ++c)
        noisy.weight(k)(r, c) *= 1.0 + 1e-6 * g(rng);
  }
  AlignmentResult al = align(net, noisy);
  const double bound = propagate_bounds(net, al.aligned, 1.0);
  const double emp = empirical_equivalence(net, al.aligned, 1.0, 5000, 78);
  CHECK(bound >= emp);
}

TEST_CASE("certify assembles a full report") {
  PreluNetwork net = random_network({5, 4, 1}, 0.05, 0.95, 79);
  PreluNetwork re = permute_layer(scale_neuron(net, 0, 2, 3.0), 0, {3, 1, 2, 0});
  EquivalenceReport rep = certify(net, re, 1.0, 1000, 80);
  CHECK(rep.empirical_eps <= 1e-12);
  CHECK(rep.max_param_err <= 1e-10);
  CHECK(rep.propagated_bound >= rep.empirical_eps);
}
