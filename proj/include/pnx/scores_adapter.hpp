#pragma once

// Turns score feedback back into raw-output-equivalent scalars so the raw
// output attack runs unchanged. Sigmoid feedback inverts exactly; softmax
// and top-m feedback expose differences of raw outputs via log ratios,
// which equal coordinates of the pivot-fused victim.

#include <cmath>
#include <functional>
#include <string>

#include "pnx/error.hpp"
#include "pnx/oracle.hpp"

namespace pnx {

inline double sigmoid_to_raw(double q) {
  if (!(q > 0.0 && q < 1.0))
    throw Error("sigmoid score must lie strictly inside (0,1)");
  return std::log(q / (1.0 - q));
}

// ln(q_{i1}/q_{i2}) = y_{i1} - y_{i2}. Underflowed scores are treated as
// unavailable labels so no silently wrong value can propagate.
inline double log_ratio(const Feedback& fb, int i1, int i2) {
  auto q1 = fb.score_of(i1);
  auto q2 = fb.score_of(i2);
  if (!q1 || !q2)
    throw LabelUnavailable("label " + std::to_string(!q1 ? i1 : i2) +
                           " absent from feedback");
  if (!(*q1 > 0.0) || !(*q2 > 0.0))
    throw LabelUnavailable("score underflowed to zero for label pair (" +
                           std::to_string(i1) + "," + std::to_string(i2) + ")");
  // difference of logs keeps the pair swap exactly antisymmetric
  return std::log(*q1) - std::log(*q2);
}

// A scalar query function over the oracle, with exact query accounting
// delegated to the oracle itself.
using ScalarFn = std::function<double(const Vec&)>;

// Scalar view of the oracle for one extraction phase:
//  - raw feedback: a fixed output coordinate,
//  - sigmoid feedback: the inverted raw scalar,
//  - softmax / top-m feedback: the log ratio of a fixed label pair, which
//    equals output (i1 - i2) of the pivot-fused victim.
inline ScalarFn scalar_view(Oracle& oracle, int coord_or_i1, int i2 = -1) {
  switch (oracle.mode().kind) {
    case FeedbackKind::kRaw: {
      const int c = coord_or_i1;
      if (c < 0 || c >= oracle.output_dim())
        throw Error("raw coordinate out of range");
      return [&oracle, c](const Vec& x) { return oracle.query(x).values[c]; };
    }
    case FeedbackKind::kSigmoid:
      return [&oracle](const Vec& x) {
        return sigmoid_to_raw(oracle.query(x).values[0]);
      };
    case FeedbackKind::kSoftmax:
    case FeedbackKind::kTopM: {
      const int i1 = coord_or_i1;
      if (i2 < 0) throw Error("score modes need a label pair");
      return [&oracle, i1, i2](const Vec& x) {
        return log_ratio(oracle.query(x), i1, i2);
      };
    }
  }
  throw Error("unknown feedback mode");
}

}  // namespace pnx
