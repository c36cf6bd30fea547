#pragma once

#include <stdexcept>
#include <string>

namespace pnx {

// Base class for all toolkit errors. Derived types exist so callers can
// react to a specific failure (budget exhaustion, expansive architecture,
// a label missing from top-m feedback, ...) without string matching.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public Error {
public:
  using Error::Error;
};

// Raised when the installed query budget would be exceeded. Carries the
// attack phase that was active so reports can attribute the failure.
class BudgetExhausted : public Error {
public:
  BudgetExhausted(const std::string& phase, long long limit)
      : Error("query budget exhausted (limit " + std::to_string(limit) +
              ") during phase '" + phase + "'"),
        phase_(phase),
        limit_(limit) {}
  const std::string& phase() const { return phase_; }
  long long limit() const { return limit_; }

private:
  std::string phase_;
  long long limit_;
};

// The architecture (or the recovered prefix at runtime) does not provide
// enough degrees of freedom to steer the hidden space.
class ExpansivenessError : public Error {
public:
  using Error::Error;
};

// Top-m feedback did not contain a label needed for a log-ratio.
class LabelUnavailable : public Error {
public:
  using Error::Error;
};

// Witness collection could not populate enough clusters.
class InsufficientWitnesses : public Error {
public:
  using Error::Error;
};

// Witness search made no progress within its budget. Mirrors the observed
// failure mode under narrow top-m feedback.
class EntrapmentError : public Error {
public:
  EntrapmentError(const std::string& phase, const std::string& msg)
      : Error("entrapment in phase '" + phase + "': " + msg), phase_(phase) {}
  const std::string& phase() const { return phase_; }

private:
  std::string phase_;
};

// Sign/slope magnitudes too close to call (slope near 1 regime).
class IndeterminateSignSlope : public Error {
public:
  using Error::Error;
};

}  // namespace pnx
