#pragma once

#include <atomic>
#include <cstdint>
#include <memory>

#include "seek/forward.hpp"
#include "seek/model.hpp"
#include "seek/shift.hpp"

namespace seek {

// Probe offset on the tied logits. Must dominate float noise in the logits
// (~1e-15 in-process, ~1e-13 through masked shares) while staying small next
// to the precision wanted from the boundary scans.
inline constexpr double kDefaultProbeEpsilon = 1e-12;

// Anything that answers a label-only query.
class OracleBackend {
 public:
  virtual ~OracleBackend() = default;
  virtual std::size_t label(const QueryInput& q) = 0;
};

class InProcessBackend final : public OracleBackend {
 public:
  explicit InProcessBackend(std::shared_ptr<const ModelGraph> model) : model_(std::move(model)) {}
  std::size_t label(const QueryInput& q) override { return forward_label(*model_, q); }

 private:
  std::shared_ptr<const ModelGraph> model_;
};

// The attacker's view of the service: labels in, nothing else out. Every
// forward evaluation is counted; the counter is safe under concurrent callers.
class OracleHandle {
 public:
  OracleHandle(std::shared_ptr<OracleBackend> backend, LayerId logits_layer,
               double epsilon = kDefaultProbeEpsilon)
      : backend_(std::move(backend)), logits_layer_(logits_layer), epsilon_(epsilon) {
    if (!(epsilon_ > 0.0)) throw StructuralError("probe epsilon must be positive");
  }

  OracleHandle(const OracleHandle&) = delete;
  OracleHandle& operator=(const OracleHandle&) = delete;

  // A fresh handle on the same backend with its own counter.
  std::unique_ptr<OracleHandle> fork() const {
    return std::make_unique<OracleHandle>(backend_, logits_layer_, epsilon_);
  }

  std::size_t query(const QueryInput& q) {
    count_.fetch_add(1, std::memory_order_relaxed);
    return backend_->label(q);
  }

  // Both probes are always issued.
  bool is_critical(const QueryInput& v, std::size_t c1, std::size_t c2) {
    if (c1 == c2) throw StructuralError("is_critical needs two distinct classes");
    QueryInput probe = v;
    probe.shifts.add_at(logits_layer_, Side::Pre, c1, epsilon_);
    const bool first = query(probe) == c1;
    probe = v;
    probe.shifts.add_at(logits_layer_, Side::Pre, c2, epsilon_);
    const bool second = query(probe) == c2;
    return first && second;
  }

  std::uint64_t count() const noexcept { return count_.load(std::memory_order_relaxed); }
  double epsilon() const noexcept { return epsilon_; }
  LayerId logits_layer() const noexcept { return logits_layer_; }

 private:
  std::shared_ptr<OracleBackend> backend_;
  LayerId logits_layer_;
  double epsilon_;
  std::atomic<std::uint64_t> count_{0};
};

// A query sitting on the boundary between classes c1 and c2. `base` is the
// query before the boundary shift was added on `layer`'s pre-side.
struct CriticalPoint {
  QueryInput v;
  std::size_t c1 = 0;
  std::size_t c2 = 0;
  QueryInput base;
  LayerId layer = 0;
  std::vector<double> boundary_shift;
};

}  // namespace seek
