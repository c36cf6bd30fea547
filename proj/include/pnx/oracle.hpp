#pragma once

// The adversary's only access path to the victim model: feedback-mode
// enforcement, exact query accounting with optional budgets, and the
// newline-delimited wire encoding used by `serve`.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pnx/error.hpp"
#include "pnx/network.hpp"

namespace pnx {

enum class FeedbackKind { kRaw, kSigmoid, kSoftmax, kTopM };

struct FeedbackMode {
  FeedbackKind kind = FeedbackKind::kRaw;
  int m = 0;  // only for kTopM

  static FeedbackMode raw() { return {FeedbackKind::kRaw, 0}; }
  static FeedbackMode sigmoid() { return {FeedbackKind::kSigmoid, 0}; }
  static FeedbackMode softmax() { return {FeedbackKind::kSoftmax, 0}; }
  static FeedbackMode topm(int m) { return {FeedbackKind::kTopM, m}; }
};

struct Feedback {
  FeedbackKind kind;
  Vec values;                    // raw or softmax scores; [q] for sigmoid
  std::vector<int> labels;       // top-m labels, descending score
  std::vector<double> scores;    // top-m scores

  std::optional<double> score_of(int label) const {
    if (kind == FeedbackKind::kSoftmax) {
      if (label < 0 || label >= values.size()) return std::nullopt;
      return values[label];
    }
    if (kind == FeedbackKind::kTopM) {
      for (size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == label) return scores[i];
      return std::nullopt;
    }
    return std::nullopt;
  }
};

inline Vec softmax(const Vec& y) {
  const double m = y.maxCoeff();
  Vec e = (y.array() - m).exp();
  return e / e.sum();
}

// Abstract query interface. Attack code only ever sees this type, never
// the parameters behind it.
class Oracle {
public:
  virtual ~Oracle() = default;
  virtual Feedback query(const Vec& x) = 0;
  virtual const FeedbackMode& mode() const = 0;
  virtual int input_dim() const = 0;
  virtual int output_dim() const = 0;
  virtual long long query_count() const = 0;
  virtual void reset_budget(long long limit) = 0;  // limit < 0 disables
  virtual void set_phase(const std::string& phase) = 0;
  virtual const std::string& phase() const = 0;
};

// In-process oracle backed by a network. The counter update is atomic so a
// handle can be shared across probing workers.
class ModelOracle : public Oracle {
public:
  ModelOracle(PreluNetwork net, FeedbackMode mode)
      : net_(std::move(net)), mode_(mode) {
    if (mode_.kind == FeedbackKind::kSigmoid && net_.output_dim() != 1)
      throw Error("sigmoid feedback requires a single output");
    if (mode_.kind == FeedbackKind::kTopM &&
        (mode_.m < 2 || mode_.m > net_.output_dim()))
      throw Error("top-m requires 2 <= m <= output dimension");
  }

  Feedback query(const Vec& x) override {
    if (x.size() != net_.input_dim())
      throw ShapeError("query input has wrong length");
    if (!x.allFinite()) throw Error("query input must be finite");
    count_query();
    return make_feedback(net_.forward(x), mode_);
  }

  const FeedbackMode& mode() const override { return mode_; }
  int input_dim() const override { return net_.input_dim(); }
  int output_dim() const override { return net_.output_dim(); }
  long long query_count() const override { return count_.load(); }

  void reset_budget(long long limit) override { limit_ = limit; }
  void set_phase(const std::string& phase) override { phase_ = phase; }
  const std::string& phase() const override { return phase_; }

  static Feedback make_feedback(const Vec& y, const FeedbackMode& mode) {
    Feedback fb;
    fb.kind = mode.kind;
    switch (mode.kind) {
      case FeedbackKind::kRaw:
        fb.values = y;
        break;
      case FeedbackKind::kSigmoid: {
        fb.values.resize(1);
        fb.values[0] = 1.0 / (1.0 + std::exp(-y[0]));
        break;
      }
      case FeedbackKind::kSoftmax:
        fb.values = softmax(y);
        break;
      case FeedbackKind::kTopM: {
        Vec q = softmax(y);
        std::vector<int> order(q.size());
        for (int i = 0; i < q.size(); ++i) order[i] = i;
        // equal scores break ties by ascending label for deterministic replay
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
          if (q[a] != q[b]) return q[a] > q[b];
          return a < b;
        });
        for (int i = 0; i < mode.m; ++i) {
          fb.labels.push_back(order[i]);
          fb.scores.push_back(q[order[i]]);
        }
        break;
      }
    }
    return fb;
  }

private:
  void count_query() {
    long long cur = count_.load();
    for (;;) {
      const long long lim = limit_.load();
      if (lim >= 0 && cur + 1 > lim) throw BudgetExhausted(phase_, lim);
      if (count_.compare_exchange_weak(cur, cur + 1)) return;
    }
  }

  PreluNetwork net_;
  FeedbackMode mode_;
  std::atomic<long long> count_{0};
  std::atomic<long long> limit_{-1};
  std::string phase_ = "idle";
};

// --- wire protocol ------------------------------------------------------
//
// One request per line: `Q v1 v2 ... v_d0`. Responses: `R ...` for raw,
// `S q` for sigmoid, `P q1 ... qd` for softmax, `T l1 q1 ... lm qm` for
// top-m, `E <message>` for malformed requests. All numbers are decimal
// text with 17 significant digits.

inline std::string format_wire_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string encode_request(const Vec& x) {
  std::string line = "Q";
  for (int i = 0; i < x.size(); ++i) {
    line += ' ';
    line += format_wire_double(x[i]);
  }
  return line;
}

inline std::string encode_feedback(const Feedback& fb) {
  std::string line;
  switch (fb.kind) {
    case FeedbackKind::kRaw:
      line = "R";
      for (int i = 0; i < fb.values.size(); ++i)
        line += ' ' + format_wire_double(fb.values[i]);
      break;
    case FeedbackKind::kSigmoid:
      line = "S " + format_wire_double(fb.values[0]);
      break;
    case FeedbackKind::kSoftmax:
      line = "P";
      for (int i = 0; i < fb.values.size(); ++i)
        line += ' ' + format_wire_double(fb.values[i]);
      break;
    case FeedbackKind::kTopM:
      line = "T";
      for (size_t i = 0; i < fb.labels.size(); ++i) {
        line += ' ' + std::to_string(fb.labels[i]);
        line += ' ' + format_wire_double(fb.scores[i]);
      }
      break;
  }
  return line;
}

inline std::optional<Vec> parse_request(const std::string& line,
                                        std::string* error) {
  std::istringstream ss(line);
  std::string tag;
  if (!(ss >> tag) || tag != "Q") {
    if (error) *error = "expected request line starting with Q";
    return std::nullopt;
  }
  std::vector<double> vals;
  double v;
  while (ss >> v) vals.push_back(v);
  if (!ss.eof()) {
    if (error) *error = "malformed numeric token in request";
    return std::nullopt;
  }
  Vec x(vals.size());
  for (size_t i = 0; i < vals.size(); ++i) x[i] = vals[i];
  return x;
}

inline Feedback parse_feedback(const std::string& line) {
  std::istringstream ss(line);
  std::string tag;
  if (!(ss >> tag)) throw Error("empty response line");
  Feedback fb;
  if (tag == "E") {
    std::string rest;
    std::getline(ss, rest);
    throw Error("oracle error:" + rest);
  } else if (tag == "R" || tag == "P") {
    fb.kind = tag == "R" ? FeedbackKind::kRaw : FeedbackKind::kSoftmax;
    std::vector<double> vals;
    double v;
    while (ss >> v) vals.push_back(v);
    fb.values.resize(vals.size());
    for (size_t i = 0; i < vals.size(); ++i) fb.values[i] = vals[i];
  } else if (tag == "S") {
    fb.kind = FeedbackKind::kSigmoid;
    double q;
    if (!(ss >> q)) throw Error("malformed sigmoid response");
    fb.values.resize(1);
    fb.values[0] = q;
  } else if (tag == "T") {
    fb.kind = FeedbackKind::kTopM;
    int label;
    double score;
    while (ss >> label >> score) {
      fb.labels.push_back(label);
      fb.scores.push_back(score);
    }
  } else {
    throw Error("unrecognized response tag '" + tag + "'");
  }
  return fb;
}

// Serves requests line by line from `in` to `out` until EOF. Used both by
// the stdio server and the TCP server in the CLI.
inline void serve_lines(std::istream& in, std::ostream& out, Oracle& oracle) {
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n'))
      line.pop_back();
    if (line.empty()) continue;
    std::string err;
    auto x = parse_request(line, &err);
    if (!x) {
      out << "E " << err << "\n" << std::flush;
      continue;
    }
    try {
      out << encode_feedback(oracle.query(*x)) << "\n" << std::flush;
    } catch (const std::exception& e) {
      out << "E " << e.what() << "\n" << std::flush;
    }
  }
}

}  // namespace pnx
