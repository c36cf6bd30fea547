#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "pnx/scores_adapter.hpp"

using namespace pnx;

TEST_CASE("sigmoid inversion") {
  CHECK(sigmoid_to_raw(0.5) == 0.0);
  CHECK(sigmoid_to_raw(0.7310585786300049) == Catch::Approx(1.0).margin(1e-12));
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(1e-6, 1.0 - 1e-6);
  for (int t = 0; t < 200; ++t) {
    const double q = u(rng);
    const double f = sigmoid_to_raw(q);
    CHECK(1.0 / (1.0 + std::exp(-f)) == Catch::Approx(q).margin(1e-12));
  }
  CHECK_THROWS_AS(sigmoid_to_raw(0.0), Error);
  CHECK_THROWS_AS(sigmoid_to_raw(1.0), Error);
}

TEST_CASE("log ratio examples and antisymmetry") {
  Feedback fb;
  fb.kind = FeedbackKind::kSoftmax;
  fb.values.resize(2);
  fb.values << 0.5, 0.5;
  CHECK(log_ratio(fb, 0, 1) == 0.0);

  const double e = std::exp(1.0);
  fb.values << e / (1 + e), 1 / (1 + e);
  CHECK(log_ratio(fb, 0, 1) == Catch::Approx(1.0).margin(1e-12));
  CHECK(log_ratio(fb, 0, 1) == -log_ratio(fb, 1, 0));

  Feedback top;
  top.kind = FeedbackKind::kTopM;
  top.labels = {3, 1};
  top.scores = {0.6, 0.4};
  CHECK(log_ratio(top, 3, 1) == Catch::Approx(std::log(1.5)).margin(1e-12));
  CHECK_THROWS_AS(log_ratio(top, 3, 0), LabelUnavailable);
}

TEST_CASE("sigmoid scalar view recovers raw output") {
  Mat A1(1, 1), A2(1, 1);
  A1 << 2.0;
  A2 << 3.0;
  Vec b1(1), b2(1), s1(1);
  b1 << 0.0;
  b2 << 1.0;
  s1 << 0.5;
  PreluNetwork net = PreluNetwork::dense({1, 1, 1}, {A1, A2}, {b1, b2}, {s1});
  ModelOracle oracle(net, FeedbackMode::sigmoid());
  ScalarFn f = scalar_view(oracle, 0);
  Vec x(1);
  x << 1.0;
  CHECK(f(x) == Catch::Approx(7.0).margin(1e-12));
}

TEST_CASE("softmax log-ratio view equals the fused network coordinate") {
  PreluNetwork net = random_network({6, 5, 4}, 0.05, 0.95, 12);
  const int pivot = 0;
  PreluNetwork fused = fuse_outputs(net, pivot);
  ModelOracle oracle(net, FeedbackMode::softmax());
  std::mt19937_64 rng(13);
  std::normal_distribution<double> g(0, 1);
  for (int j = 1; j < 4; ++j) {
    ScalarFn f = scalar_view(oracle, j, pivot);
    for (int t = 0; t < 100; ++t) {
      Vec x(6);
      for (int i = 0; i < 6; ++i) x[i] = g(rng);
      CHECK(f(x) == Catch::Approx(fused.forward(x)[j]).margin(1e-12));
    }
  }
}

TEST_CASE("full top-m equals the softmax view") {
  PreluNetwork net = random_network({5, 4, 4}, 0.05, 0.95, 21);
  ModelOracle soft(net, FeedbackMode::softmax());
  ModelOracle top(net, FeedbackMode::topm(4));
  ScalarFn fs = scalar_view(soft, 2, 1);
  ScalarFn ft = scalar_view(top, 2, 1);
  std::mt19937_64 rng(22);
  std::normal_distribution<double> g(0, 1);
  for (int t = 0; t < 50; ++t) {
    Vec x(5);
    for (int i = 0; i < 5; ++i) x[i] = g(rng);
    CHECK(fs(x) == ft(x));
  }
}
