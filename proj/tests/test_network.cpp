#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <sstream>

#include "pnx/network.hpp"

using namespace pnx;

namespace {

// 1-1-1 toy: A1=[2], b1=0, s=0.5, A2=[3], b2=1.
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

Vec scalar_vec(double v) {
  Vec x(1);
  x << v;
  return x;
}

}  // namespace

TEST_CASE("prelu scalar activation") {
  CHECK(prelu(2.0, 0.5) == 2.0);
  CHECK(prelu(-2.0, 0.5) == -1.0);
  CHECK(prelu(0.0, 0.3) == 0.0);
}

TEST_CASE("forward on hand network") {
  PreluNetwork net = toy111();
  CHECK(net.forward(scalar_vec(1.0))[0] == Catch::Approx(7.0).margin(0));
  CHECK(net.forward(scalar_vec(0.0))[0] == Catch::Approx(1.0).margin(0));
  CHECK(net.forward(scalar_vec(-1.0))[0] == Catch::Approx(-2.0).margin(0));
}

TEST_CASE("forward records activation state, zero counts as non-negative") {
  PreluNetwork net = toy111();
  auto [out, st] = net.forward_state(scalar_vec(0.0));
  CHECK(out[0] == 1.0);
  CHECK(st.signs[0][0] == 0);
  auto [out2, st2] = net.forward_state(scalar_vec(-3.0));
  CHECK(st2.signs[0][0] == -1);
}

TEST_CASE("forward rejects shape and non-finite input") {
  PreluNetwork net = toy111();
  Vec bad(2);
  bad << 1.0, 2.0;
  CHECK_THROWS_AS(net.forward(bad), ShapeError);
  Vec nan = scalar_vec(std::nan(""));
  CHECK_THROWS_AS(net.forward(nan), ShapeError);
}

TEST_CASE("scale_neuron examples") {
  PreluNetwork net = toy111();
  PreluNetwork scaled = scale_neuron(net, 0, 0, 2.0);
  CHECK(scaled.weight(0)(0, 0) == 4.0);
  CHECK(scaled.bias(0)[0] == 0.0);
  CHECK(scaled.weight(1)(0, 0) == 1.5);
  CHECK(scaled.bias(1)[0] == 1.0);
  CHECK(scaled.forward(scalar_vec(1.0))[0] == 7.0);

  PreluNetwork same = scale_neuron(net, 0, 0, 1.0);
  CHECK(same == net);

  CHECK_THROWS_AS(scale_neuron(net, 0, 0, -1.0), Error);
  CHECK_THROWS_AS(scale_neuron(net, 0, 0, 0.0), Error);
}

TEST_CASE("scaling preserves the function on random inputs") {
  PreluNetwork net = random_network({6, 5, 3, 2}, 0.05, 0.95, 11);
  PreluNetwork scaled = scale_neuron(scale_neuron(net, 0, 2, 3.7), 1, 1, 0.21);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0, 1);
  for (int t = 0; t < 1000; ++t) {
    Vec x(6);
    for (int i = 0; i < 6; ++i) x[i] = g(rng);
    CHECK((net.forward(x) - scaled.forward(x)).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("permute_layer identity, swap, inverse composition") {
  PreluNetwork net = random_network({2, 2, 1}, 0.05, 0.95, 3);
  PreluNetwork ident = permute_layer(net, 0, {0, 1});
  CHECK(ident == net);

  PreluNetwork swapped = permute_layer(net, 0, {1, 0});
  std::mt19937_64 rng(7);
  std::normal_distribution<double> g(0, 1);
  for (int t = 0; t < 100; ++t) {
    Vec x(2);
    x << g(rng), g(rng);
    CHECK((net.forward(x) - swapped.forward(x)).cwiseAbs().maxCoeff() <=
          1e-15);
  }
  PreluNetwork back = permute_layer(swapped, 0, {1, 0});
  CHECK(back == net);

  CHECK_THROWS_AS(permute_layer(net, 0, {0, 0}), Error);
}

TEST_CASE("split_layer on the toy network") {
  PreluNetwork net = toy111();
  PreluNetwork split = split_layer(net, 0);
  REQUIRE(split.dims() == std::vector<int>({1, 2, 1}));
  CHECK(split.weight(1)(0, 0) == 3.0);
  CHECK(split.weight(1)(0, 1) == 1.5);
  CHECK(split.forward(scalar_vec(1.0))[0] == 7.0);
  CHECK(split.forward(scalar_vec(-1.0))[0] == -2.0);
}

TEST_CASE("split_layer preserves a random network") {
  PreluNetwork net = random_network({10, 8, 8, 1}, 0.05, 0.95, 17);
  PreluNetwork s0 = split_layer(net, 0);
  PreluNetwork s1 = split_layer(net, 1);
  std::mt19937_64 rng(23);
  std::normal_distribution<double> g(0, 1);
  for (int t = 0; t < 1000; ++t) {
    Vec x(10);
    for (int i = 0; i < 10; ++i) x[i] = g(rng);
    Vec y = net.forward(x);
    CHECK((y - s0.forward(x)).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((y - s1.forward(x)).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("fuse_outputs zeroes the pivot and matches direct differences") {
  PreluNetwork net = random_network({4, 3, 2}, 0.05, 0.95, 29);
  PreluNetwork fused = fuse_outputs(net, 0);
  std::mt19937_64 rng(31);
  std::normal_distribution<double> g(0, 1);
  for (int t = 0; t < 100; ++t) {
    Vec x(4);
    for (int i = 0; i < 4; ++i) x[i] = g(rng);
    Vec y = net.forward(x);
    Vec f = fused.forward(x);
    CHECK(f[0] == 0.0);
    CHECK(std::abs(f[1] - (y[1] - y[0])) <= 1e-15);
  }
  // fusing twice with the same pivot keeps the same function
  PreluNetwork twice = fuse_outputs(fused, 0);
  for (int t = 0; t < 20; ++t) {
    Vec x(4);
    for (int i = 0; i < 4; ++i) x[i] = g(rng);
    CHECK((twice.forward(x) - fused.forward(x)).cwiseAbs().maxCoeff() <=
          1e-15);
  }
  PreluNetwork single = toy111();
  CHECK_THROWS_AS(fuse_outputs(single, 0), Error);
}

TEST_CASE("random_network determinism, slope range, parameter count") {
  PreluNetwork a = random_network({32, 16, 1}, 0.05, 0.95, 7);
  PreluNetwork b = random_network({32, 16, 1}, 0.05, 0.95, 7);
  CHECK(a == b);

  PreluNetwork star = random_network({8, 4, 1}, 0.9, 1.0 - 1e-9, 5);
  for (int j = 0; j < 4; ++j) {
    CHECK(star.slope(0)[j] > 0.9);
    CHECK(star.slope(0)[j] < 1.0);
  }

  CHECK(parameter_count({32, 16, 1}) == 561);
  CHECK(parameter_count({20, 10, 10, 1}) == 351);
  CHECK(parameter_count({32, 16, 16, 1}) == 849);

  CHECK_THROWS_AS(random_network({4, 0, 1}, 0.05, 0.95, 1), ShapeError);
  CHECK_THROWS_AS(random_network({4, 2, 1}, 0.0, 0.95, 1), Error);
}

TEST_CASE("forward is exactly piecewise affine within a region") {
  PreluNetwork net = random_network({6, 5, 4, 2}, 0.05, 0.95, 41);
  std::mt19937_64 rng(43);
  std::normal_distribution<double> g(0, 1);
  int checked = 0;
  while (checked < 200) {
    Vec x1(6), x2(6);
    for (int i = 0; i < 6; ++i) {
      x1[i] = g(rng);
      x2[i] = x1[i] + 1e-3 * g(rng);
    }
    auto [y1, s1] = net.forward_state(x1);
    auto [y2, s2] = net.forward_state(x2);
    bool same = true;
    for (size_t k = 0; k < s1.signs.size(); ++k)
      if (s1.signs[k] != s2.signs[k]) same = false;
    if (!same) continue;
    const double lam = 0.37;
    Vec mid = lam * x1 + (1 - lam) * x2;
    Vec expect = lam * y1 + (1 - lam) * y2;
    Vec got = net.forward(mid);
    const double scale = std::max(1.0, expect.cwiseAbs().maxCoeff());
    CHECK((got - expect).cwiseAbs().maxCoeff() / scale <= 1e-10);
    ++checked;
  }
}

TEST_CASE("tail affine view reproduces the network inside a region") {
  PreluNetwork net = random_network({5, 4, 3, 1}, 0.05, 0.95, 47);
  std::mt19937_64 rng(53);
  std::normal_distribution<double> g(0, 1);
  Vec x(5);
  for (int i = 0; i < 5; ++i) x[i] = g(rng);
  for (int hidden = 0; hidden < 2; ++hidden) {
    LocalAffineView view = tail_affine(net, x, hidden);
    auto ys = net.preactivations(x);
    Vec re = view.coeff * ys[hidden] + view.offset;
    CHECK((re - net.forward(x)).cwiseAbs().maxCoeff() <= 1e-9);
  }
}

TEST_CASE("model file round trip is bit exact") {
  PreluNetwork net = random_network({7, 5, 3}, 0.05, 0.95, 59);
  std::stringstream ss;
  write_model(ss, net);
  PreluNetwork back = read_model(ss);
  CHECK(back == net);
  CHECK(ss.str().rfind("prelu-net v1\n", 0) == 0);
}

TEST_CASE("model reader accepts plain decimal tokens") {
  std::stringstream ss;
  ss << "prelu-net v1\n1 1 1\n";
  ss << "2\n0\n0.5\n3\n1\n";
  PreluNetwork net = read_model(ss);
  CHECK(net.forward(scalar_vec(1.0))[0] == 7.0);
  CHECK(net.forward(scalar_vec(-1.0))[0] == -2.0);
}

TEST_CASE("model reader rejects garbage") {
  std::stringstream ss("prelu-net v2\n1 1\n");
  CHECK_THROWS_AS(read_model(ss), Error);
  std::stringstream ss2("prelu-net v1\n1 1\n1.0 nope\n");
  CHECK_THROWS_AS(read_model(ss2), Error);
}

TEST_CASE("imported nonstandard slopes are flagged, not rejected") {
  Mat A1(1, 1), A2(1, 1);
  A1 << 1.0;
  A2 << 1.0;
  Vec b(1), s(1);
  b << 0.0;
  s << 1.7;
  PreluNetwork net =
      PreluNetwork::dense({1, 1, 1}, {A1, A2}, {b, b}, {s});
  CHECK(net.nonstandard_slopes().size() == 1);
}
