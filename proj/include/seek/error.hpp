#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace seek {

// Malformed model, shape mismatch, or a shift aimed at a non-malleable boundary.
class StructuralError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ProtocolError : public std::runtime_error {
 public:
  explicit ProtocolError(const std::string& what, std::uint32_t layer = 0)
      : std::runtime_error(what + " (layer " + std::to_string(layer) + ")"),
        layer_(layer) {}
  std::uint32_t layer() const noexcept { return layer_; }

 private:
  std::uint32_t layer_;
};

// Connection-level failure. Queries that hit it may be retried.
class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ExtractionFailure {
  NoBoundary,
  CornerPoint,
  NonMonotone,
  DeadFeature,
  BelowSuppressionFloor,
};

inline const char* to_string(ExtractionFailure f) {
  switch (f) {
    case ExtractionFailure::NoBoundary: return "no boundary reachable at norm d";
    case ExtractionFailure::CornerPoint: return "corner point";
    case ExtractionFailure::NonMonotone: return "criticality non-monotone in shift";
    case ExtractionFailure::DeadFeature: return "dead feature";
    case ExtractionFailure::BelowSuppressionFloor: return "target below suppression floor";
  }
  return "unknown";
}

class ExtractionError : public std::runtime_error {
 public:
  explicit ExtractionError(ExtractionFailure kind, const std::string& detail = {})
      : std::runtime_error(detail.empty() ? std::string(to_string(kind))
                                          : std::string(to_string(kind)) + ": " + detail),
        kind_(kind) {}
  ExtractionFailure kind() const noexcept { return kind_; }

 private:
  ExtractionFailure kind_;
};

}  // namespace seek
