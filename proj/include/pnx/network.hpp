#pragma once

// Exact representation and evaluation of PReLU fully connected networks,
// plus the structural transforms used by the extraction attacks (neuron
// scaling, layer permutation, neuron splitting, output fusion).
//
// Conventions: a network with dims d0-d1-...-d{n+1} has n hidden layers.
// Hidden layers are indexed 0..n-1 throughout the public API; the output
// layer is affine (no activation). All arithmetic is IEEE double.

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pnx/error.hpp"

namespace pnx {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline double prelu(double x, double s) { return x >= 0.0 ? x : s * x; }

// Per-layer sign pattern of the preactivations. +1 positive, -1 negative,
// 0 only at an exact critical input (treated as the non-negative branch).
struct ActivationState {
  std::vector<Eigen::VectorXi> signs;
};

class PreluNetwork {
public:
  PreluNetwork() = default;

  // Standard PReLU network: activation is x -> x for x >= 0 and s*x below.
  // weights[k] has shape d_{k+1} x d_k, one entry of slopes per hidden
  // neuron.
  static PreluNetwork dense(std::vector<int> dims, std::vector<Mat> weights,
                            std::vector<Vec> biases, std::vector<Vec> slopes) {
    const int n = static_cast<int>(dims.size()) - 2;
    std::vector<Vec> pos(n), neg(n);
    for (int k = 0; k < n; ++k) {
      pos[k] = Vec::Ones(dims[k + 1]);
      neg[k] = slopes[k];
    }
    return PreluNetwork(std::move(dims), std::move(weights), std::move(biases),
                        std::move(pos), std::move(neg));
  }

  // Generalized form where each hidden neuron applies
  //   y -> pos*max(y,0) + neg*min(y,0).
  // Standard PReLU is pos=1, neg=s; split layers use (1,0) and (0,1) pairs.
  PreluNetwork(std::vector<int> dims, std::vector<Mat> weights,
               std::vector<Vec> biases, std::vector<Vec> pos_slopes,
               std::vector<Vec> neg_slopes)
      : dims_(std::move(dims)),
        weights_(std::move(weights)),
        biases_(std::move(biases)),
        pos_(std::move(pos_slopes)),
        neg_(std::move(neg_slopes)) {
    validate();
  }

  int depth() const { return static_cast<int>(dims_.size()) - 2; }
  const std::vector<int>& dims() const { return dims_; }
  int input_dim() const { return dims_.front(); }
  int output_dim() const { return dims_.back(); }

  const Mat& weight(int layer) const { return weights_[layer]; }
  const Vec& bias(int layer) const { return biases_[layer]; }
  const Vec& pos_slope(int hidden) const { return pos_[hidden]; }
  const Vec& neg_slope(int hidden) const { return neg_[hidden]; }
  // Slope vector of a standard PReLU hidden layer.
  const Vec& slope(int hidden) const { return neg_[hidden]; }

  Mat& weight(int layer) { return weights_[layer]; }
  Vec& bias(int layer) { return biases_[layer]; }
  Vec& slope(int hidden) { return neg_[hidden]; }

  bool is_standard() const {
    for (const auto& p : pos_)
      if ((p.array() != 1.0).any()) return false;
    return true;
  }

  // Hidden neurons whose slope falls outside (0,1). Imported models may
  // carry such slopes; they are reported, not rejected.
  std::vector<std::pair<int, int>> nonstandard_slopes() const {
    std::vector<std::pair<int, int>> out;
    for (int k = 0; k < depth(); ++k)
      for (int j = 0; j < dims_[k + 1]; ++j)
        if (pos_[k][j] != 1.0 || neg_[k][j] <= 0.0 || neg_[k][j] >= 1.0)
          out.emplace_back(k, j);
    return out;
  }

  Vec forward(const Vec& x) const {
    check_input(x);
    Vec z = x;
    for (int k = 0; k < depth(); ++k) {
      Vec y = weights_[k] * z + biases_[k];
      z = activate(k, y);
    }
    return weights_.back() * z + biases_.back();
  }

  std::pair<Vec, ActivationState> forward_state(const Vec& x) const {
    check_input(x);
    ActivationState st;
    st.signs.resize(depth());
    Vec z = x;
    for (int k = 0; k < depth(); ++k) {
      Vec y = weights_[k] * z + biases_[k];
      st.signs[k].resize(y.size());
      for (int j = 0; j < y.size(); ++j)
        st.signs[k][j] = y[j] > 0.0 ? 1 : (y[j] < 0.0 ? -1 : 0);
      z = activate(k, y);
    }
    return {weights_.back() * z + biases_.back(), std::move(st)};
  }

  // Preactivation vectors of every hidden layer at x.
  std::vector<Vec> preactivations(const Vec& x) const {
    check_input(x);
    std::vector<Vec> ys;
    ys.reserve(depth());
    Vec z = x;
    for (int k = 0; k < depth(); ++k) {
      Vec y = weights_[k] * z + biases_[k];
      ys.push_back(y);
      z = activate(k, y);
    }
    return ys;
  }

  bool operator==(const PreluNetwork& o) const {
    if (dims_ != o.dims_) return false;
    for (size_t k = 0; k < weights_.size(); ++k)
      if (weights_[k] != o.weights_[k] || biases_[k] != o.biases_[k])
        return false;
    for (size_t k = 0; k < pos_.size(); ++k)
      if (pos_[k] != o.pos_[k] || neg_[k] != o.neg_[k]) return false;
    return true;
  }

private:
  Vec activate(int hidden, const Vec& y) const {
    Vec z(y.size());
    for (int j = 0; j < y.size(); ++j)
      z[j] = y[j] >= 0.0 ? pos_[hidden][j] * y[j] : neg_[hidden][j] * y[j];
    return z;
  }

  void check_input(const Vec& x) const {
    if (x.size() != dims_.front())
      throw ShapeError("input has length " + std::to_string(x.size()) +
                       ", layer 0 expects " + std::to_string(dims_.front()));
    if (!x.allFinite()) throw ShapeError("input contains non-finite entries");
  }

  void validate() const {
    const int L = static_cast<int>(dims_.size()) - 1;
    if (L < 1) throw ShapeError("network needs at least one layer");
    if (static_cast<int>(weights_.size()) != L ||
        static_cast<int>(biases_.size()) != L ||
        static_cast<int>(pos_.size()) != L - 1 ||
        static_cast<int>(neg_.size()) != L - 1)
      throw ShapeError("layer count mismatch against dims");
    for (int k = 0; k < L; ++k) {
      if (dims_[k] <= 0)
        throw ShapeError("degenerate dimension at layer " + std::to_string(k));
      if (weights_[k].rows() != dims_[k + 1] || weights_[k].cols() != dims_[k])
        throw ShapeError("weight shape mismatch at layer " +
                         std::to_string(k + 1));
      if (biases_[k].size() != dims_[k + 1])
        throw ShapeError("bias shape mismatch at layer " +
                         std::to_string(k + 1));
      if (!weights_[k].allFinite() || !biases_[k].allFinite())
        throw ShapeError("non-finite parameter in layer " +
                         std::to_string(k + 1));
      if (k < L - 1) {
        if (pos_[k].size() != dims_[k + 1] || neg_[k].size() != dims_[k + 1])
          throw ShapeError("slope shape mismatch at hidden layer " +
                           std::to_string(k + 1));
        if (!pos_[k].allFinite() || !neg_[k].allFinite())
          throw ShapeError("non-finite slope in hidden layer " +
                           std::to_string(k + 1));
      }
    }
    if (dims_.back() <= 0) throw ShapeError("degenerate output dimension");
  }

  std::vector<int> dims_;
  std::vector<Mat> weights_;
  std::vector<Vec> biases_;
  std::vector<Vec> pos_, neg_;
};

inline long long parameter_count(const std::vector<int>& dims) {
  long long total = 0;
  const int n = static_cast<int>(dims.size()) - 2;
  for (size_t k = 1; k < dims.size(); ++k)
    total += static_cast<long long>(dims[k]) * (dims[k - 1] + 1);
  for (int k = 1; k <= n; ++k) total += dims[k];
  return total;
}

// Scales the incoming row and bias of one hidden neuron by c > 0 and the
// outgoing column by 1/c. The network function is unchanged.
inline PreluNetwork scale_neuron(const PreluNetwork& net, int hidden, int j,
                                 double c) {
  if (!(c > 0.0))
    throw Error("scale_neuron requires c > 0, got " + std::to_string(c));
  if (hidden < 0 || hidden >= net.depth())
    throw ShapeError("hidden layer index out of range");
  std::vector<Mat> W;
  std::vector<Vec> b, pos, neg;
  for (int k = 0; k <= net.depth(); ++k) {
    W.push_back(net.weight(k));
    b.push_back(net.bias(k));
  }
  for (int k = 0; k < net.depth(); ++k) {
    pos.push_back(net.pos_slope(k));
    neg.push_back(net.neg_slope(k));
  }
  W[hidden].row(j) *= c;
  b[hidden][j] *= c;
  W[hidden + 1].col(j) /= c;
  return PreluNetwork(net.dims(), std::move(W), std::move(b), std::move(pos),
                      std::move(neg));
}

// Reorders the neurons of one hidden layer; perm[i] is the old index that
// moves to position i. Rows of the layer and columns of the next layer are
// permuted together, so the function is unchanged.
inline PreluNetwork permute_layer(const PreluNetwork& net, int hidden,
                                  const std::vector<int>& perm) {
  if (hidden < 0 || hidden >= net.depth())
    throw ShapeError("hidden layer index out of range");
  const int d = net.dims()[hidden + 1];
  std::vector<char> seen(d, 0);
  if (static_cast<int>(perm.size()) != d)
    throw Error("permutation size mismatch");
  for (int p : perm) {
    if (p < 0 || p >= d || seen[p]) throw Error("permutation is not a bijection");
    seen[p] = 1;
  }
  std::vector<Mat> W;
  std::vector<Vec> b, pos, neg;
  for (int k = 0; k <= net.depth(); ++k) {
    W.push_back(net.weight(k));
    b.push_back(net.bias(k));
  }
  for (int k = 0; k < net.depth(); ++k) {
    pos.push_back(net.pos_slope(k));
    neg.push_back(net.neg_slope(k));
  }
  Mat Wk = W[hidden], Wn = W[hidden + 1];
  Vec bk = b[hidden], pk = pos[hidden], nk = neg[hidden];
  for (int i = 0; i < d; ++i) {
    W[hidden].row(i) = Wk.row(perm[i]);
    b[hidden][i] = bk[perm[i]];
    pos[hidden][i] = pk[perm[i]];
    neg[hidden][i] = nk[perm[i]];
    W[hidden + 1].col(i) = Wn.col(perm[i]);
  }
  return PreluNetwork(net.dims(), std::move(W), std::move(b), std::move(pos),
                      std::move(neg));
}

// Doubles hidden layer i: each neuron gets a twin sharing its incoming row
// and bias. Originals keep max(y,0), twins keep min(y,0), and the twin's
// outgoing weights absorb the slope, so the function is unchanged.
inline PreluNetwork split_layer(const PreluNetwork& net, int hidden) {
  if (hidden < 0 || hidden >= net.depth())
    throw ShapeError("hidden layer index out of range");
  const int d = net.dims()[hidden + 1];
  std::vector<int> dims = net.dims();
  dims[hidden + 1] = 2 * d;
  std::vector<Mat> W;
  std::vector<Vec> b, pos, neg;
  for (int k = 0; k <= net.depth(); ++k) {
    W.push_back(net.weight(k));
    b.push_back(net.bias(k));
  }
  for (int k = 0; k < net.depth(); ++k) {
    pos.push_back(net.pos_slope(k));
    neg.push_back(net.neg_slope(k));
  }
  Mat Win(2 * d, W[hidden].cols());
  Win << W[hidden], W[hidden];
  Vec bin(2 * d);
  bin << b[hidden], b[hidden];
  Vec p(2 * d), q(2 * d);
  p.head(d).setOnes();
  p.tail(d).setZero();
  q.head(d).setZero();
  q.tail(d).setOnes();
  Mat Wout(W[hidden + 1].rows(), 2 * d);
  Wout.leftCols(d) = W[hidden + 1];
  Wout.rightCols(d) =
      W[hidden + 1] * net.neg_slope(hidden).asDiagonal();
  W[hidden] = std::move(Win);
  b[hidden] = std::move(bin);
  pos[hidden] = std::move(p);
  neg[hidden] = std::move(q);
  W[hidden + 1] = std::move(Wout);
  return PreluNetwork(std::move(dims), std::move(W), std::move(b),
                      std::move(pos), std::move(neg));
}

// Subtracts output row `pivot` from every output row (and bias), so output
// j of the result equals y_j - y_pivot of the original and coordinate
// `pivot` is identically zero.
inline PreluNetwork fuse_outputs(const PreluNetwork& net, int pivot) {
  if (net.output_dim() < 2)
    throw Error("fuse_outputs needs at least two outputs");
  if (pivot < 0 || pivot >= net.output_dim())
    throw ShapeError("pivot out of range");
  std::vector<Mat> W;
  std::vector<Vec> b, pos, neg;
  for (int k = 0; k <= net.depth(); ++k) {
    W.push_back(net.weight(k));
    b.push_back(net.bias(k));
  }
  for (int k = 0; k < net.depth(); ++k) {
    pos.push_back(net.pos_slope(k));
    neg.push_back(net.neg_slope(k));
  }
  const Eigen::RowVectorXd prow = W.back().row(pivot);
  const double pb = b.back()[pivot];
  for (int i = 0; i < net.output_dim(); ++i) {
    W.back().row(i) -= prow;
    b.back()[i] -= pb;
  }
  return PreluNetwork(net.dims(), std::move(W), std::move(b), std::move(pos),
                      std::move(neg));
}

// Random victim generator. Weights and biases are i.i.d. uniform on [-1,1]
// scaled by 1/sqrt(fan-in), which keeps preactivations O(1) so critical
// hyperplanes pass near the origin. Slopes are uniform in (lo, hi).
// Deterministic for a fixed seed; fill order is per layer: weights
// (row-major), bias, slopes.
inline PreluNetwork random_network(const std::vector<int>& dims, double lo,
                                   double hi, unsigned long long seed) {
  if (dims.size() < 2) throw ShapeError("need at least input and output dims");
  for (int d : dims)
    if (d <= 0) throw ShapeError("degenerate dimension in dims");
  if (!(0.0 < lo && lo < hi && hi < 1.0))
    throw Error("slope range must satisfy 0 < lo < hi < 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> srange(lo, hi);
  const int n = static_cast<int>(dims.size()) - 2;
  std::vector<Mat> W(n + 1);
  std::vector<Vec> b(n + 1), slopes(n);
  for (int k = 0; k <= n; ++k) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(dims[k]));
    W[k].resize(dims[k + 1], dims[k]);
    for (int i = 0; i < dims[k + 1]; ++i)
      for (int j = 0; j < dims[k]; ++j) W[k](i, j) = scale * unit(rng);
    b[k].resize(dims[k + 1]);
    for (int i = 0; i < dims[k + 1]; ++i) b[k][i] = scale * unit(rng);
    if (k < n) {
      slopes[k].resize(dims[k + 1]);
      for (int i = 0; i < dims[k + 1]; ++i) slopes[k][i] = srange(rng);
    }
  }
  return PreluNetwork::dense(dims, std::move(W), std::move(b),
                             std::move(slopes));
}

// Affine tail map of the network at x: within the linear region of x,
// f(x') = L * Y_hidden(x') + U where Y_hidden is the preactivation of the
// given hidden layer.
struct LocalAffineView {
  int hidden;
  Mat coeff;   // d_out x d_{hidden+1}
  Vec offset;  // d_out
};

inline LocalAffineView tail_affine(const PreluNetwork& net, const Vec& x,
                                   int hidden) {
  if (hidden < 0 || hidden >= net.depth())
    throw ShapeError("hidden layer index out of range");
  const auto ys = net.preactivations(x);
  auto tau = [&](int k) {
    Vec t(ys[k].size());
    for (int j = 0; j < t.size(); ++j)
      t[j] = ys[k][j] >= 0.0 ? net.pos_slope(k)[j] : net.neg_slope(k)[j];
    return t;
  };
  Mat L = net.weight(net.depth());
  for (int k = net.depth() - 1; k > hidden; --k)
    L = L * tau(k).asDiagonal() * net.weight(k);
  L = L * tau(hidden).asDiagonal();
  Vec U = net.forward(x) - L * ys[hidden];
  return {hidden, std::move(L), std::move(U)};
}

// --- model file format ------------------------------------------------
//
// Text format, versioned. First line is `prelu-net v1`, second line the
// dims, then per layer: weights row-major, bias, slopes (hidden layers
// only), one number per token. Numbers are written as hexadecimal floats
// for a bit-exact round trip; the reader also accepts plain decimal.

inline std::string format_double_token(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%a", v);
  return buf;
}

inline void write_model(std::ostream& os, const PreluNetwork& net) {
  if (!net.is_standard())
    throw Error("model file format v1 stores standard PReLU networks only");
  os << "prelu-net v1\n";
  for (size_t i = 0; i < net.dims().size(); ++i)
    os << (i ? " " : "") << net.dims()[i];
  os << "\n";
  auto emit = [&](const double* p, long long count) {
    for (long long i = 0; i < count; ++i)
      os << format_double_token(p[i]) << (i + 1 == count ? "\n" : " ");
  };
  for (int k = 0; k <= net.depth(); ++k) {
    const Mat& W = net.weight(k);
    for (int r = 0; r < W.rows(); ++r) {
      Eigen::RowVectorXd row = W.row(r);
      emit(row.data(), row.size());
    }
    emit(net.bias(k).data(), net.bias(k).size());
    if (k < net.depth()) emit(net.slope(k).data(), net.slope(k).size());
  }
}

inline PreluNetwork read_model(std::istream& is) {
  std::string header;
  std::getline(is, header);
  while (!header.empty() && (header.back() == '\r' || header.back() == '\n'))
    header.pop_back();
  if (header != "prelu-net v1")
    throw Error("unrecognized model header: '" + header + "'");
  std::string dim_line;
  std::getline(is, dim_line);
  std::istringstream ds(dim_line);
  std::vector<int> dims;
  int d;
  while (ds >> d) dims.push_back(d);
  if (dims.size() < 2) throw Error("model file has fewer than two dims");
  auto next = [&]() {
    std::string tok;
    if (!(is >> tok)) throw Error("model file truncated");
    char* end = nullptr;
    double v = std::strtod(tok.c_str(), &end);
    if (end == tok.c_str() || *end != '\0')
      throw Error("bad numeric token in model file: '" + tok + "'");
    return v;
  };
  const int n = static_cast<int>(dims.size()) - 2;
  std::vector<Mat> W(n + 1);
  std::vector<Vec> b(n + 1), slopes(n);
  for (int k = 0; k <= n; ++k) {
    W[k].resize(dims[k + 1], dims[k]);
    for (int r = 0; r < dims[k + 1]; ++r)
      for (int c = 0; c < dims[k]; ++c) W[k](r, c) = next();
    b[k].resize(dims[k + 1]);
    for (int r = 0; r < dims[k + 1]; ++r) b[k][r] = next();
    if (k < n) {
      slopes[k].resize(dims[k + 1]);
      for (int r = 0; r < dims[k + 1]; ++r) slopes[k][r] = next();
    }
  }
  return PreluNetwork::dense(std::move(dims), std::move(W), std::move(b),
                             std::move(slopes));
}

inline void save_model(const PreluNetwork& net, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw Error("cannot open '" + path + "' for writing");
  write_model(f, net);
}

inline PreluNetwork load_model(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open '" + path + "' for reading");
  return read_model(f);
}

}  // namespace pnx
