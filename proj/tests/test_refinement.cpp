#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "pnx/oracle.hpp"
#include "pnx/refinement.hpp"

using namespace pnx;

namespace {

RecoveredNeuron neuron_from_row(const Vec& row, double bias) {
  RecoveredNeuron n;
  n.weight = row;
  n.bias = bias;
  const double norm = n.weight.norm();
  n.weight /= norm;
  n.bias /= norm;
  canonicalize_direction(n.weight);
  if (n.weight.dot(row) < 0) n.bias = -n.bias;
  return n;
}

}  // namespace

TEST_CASE("refinement drives a perturbed first-layer neuron to high precision") {
  PreluNetwork net = random_network({8, 6, 1}, 0.05, 0.95, 55);
  ModelOracle oracle(net, FeedbackMode::raw());
  ScalarFn f = [&](const Vec& x) { return oracle.query(x).values[0]; };
  HiddenView view = HiddenView::input(8);
  std::mt19937_64 rng(56);
  std::normal_distribution<double> g(0, 1);

  const int j = 2;
  Vec truth = net.weight(0).row(j).transpose();
  const double tb = net.bias(0)[j];
  Vec noisy = truth;
  for (int i = 0; i < 8; ++i) noisy[i] *= 1.0 + 1e-4 * g(rng);
  RecoveredNeuron n = neuron_from_row(noisy, tb * (1.0 + 1e-4 * g(rng)));
  n.residual = 1.0;

  auto report = refine_neuron(fixed_scalar(f), view, n, 3, {}, rng, 1.0, 8);
  CHECK(!report.failed);
  Vec tn = truth.normalized();
  canonicalize_direction(tn);
  const double cosv = std::abs(tn.dot(n.weight));
  CHECK(1.0 - cosv <= 1e-9);
  const double flip = tn.dot(truth.normalized()) > 0 ? 1.0 : -1.0;
  CHECK(std::abs(n.bias - flip * tb / truth.norm()) <= 1e-8);
  CHECK(report.post_residual <= report.pre_residual);
}

TEST_CASE("an exact neuron passes through refinement unchanged") {
  PreluNetwork net = random_network({6, 4, 1}, 0.05, 0.95, 57);
  ModelOracle oracle(net, FeedbackMode::raw());
  ScalarFn f = [&](const Vec& x) { return oracle.query(x).values[0]; };
  HiddenView view = HiddenView::input(6);
  std::mt19937_64 rng(58);
  RecoveredNeuron n =
      neuron_from_row(net.weight(0).row(1).transpose(), net.bias(0)[1]);
  Vec before = n.weight;
  const double bias_before = n.bias;
  n.residual = 0.0;
  refine_neuron(fixed_scalar(f), view, n, 2, {}, rng, 1.0, 6);
  CHECK((n.weight - before).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(std::abs(n.bias - bias_before) <= 1e-12);
}

TEST_CASE("residual never increases across rounds") {
  PreluNetwork net = random_network({7, 5, 1}, 0.05, 0.95, 59);
  ModelOracle oracle(net, FeedbackMode::raw());
  ScalarFn f = [&](const Vec& x) { return oracle.query(x).values[0]; };
  HiddenView view = HiddenView::input(7);
  std::mt19937_64 rng(60);
  std::normal_distribution<double> g(0, 1);
  Vec truth = net.weight(0).row(0).transpose();
  Vec noisy = truth;
  for (int i = 0; i < 7; ++i) noisy[i] *= 1.0 + 1e-5 * g(rng);
  RecoveredNeuron n = neuron_from_row(noisy, net.bias(0)[0]);
  n.residual = 1e3;
  double prev = n.residual;
  for (int round = 0; round < 3; ++round) {
    refine_neuron(fixed_scalar(f), view, n, 1, {}, rng, 1.0, 7);
    CHECK(n.residual <= prev);
    prev = n.residual;
  }
}

TEST_CASE("a hyperplane the oracle never witnesses flags failure") {
  PreluNetwork net = random_network({5, 3, 1}, 0.05, 0.95, 61);
  ModelOracle oracle(net, FeedbackMode::raw());
  ScalarFn f = [&](const Vec& x) { return oracle.query(x).values[0]; };
  HiddenView view = HiddenView::input(5);
  std::mt19937_64 rng(62);
  RecoveredNeuron phantom;
  phantom.weight = Vec::Unit(5, 0);
  phantom.bias = -50.0;  // far outside the sampled region
  phantom.residual = 1.0;
  auto report = refine_neuron(fixed_scalar(f), view, phantom, 2, {}, rng, 1.0, 5);
  CHECK(report.failed);
  CHECK(phantom.refinement_failed);
}
