#pragma once

#include <random>
#include <span>
#include <vector>

#include "seek/extraction/config.hpp"
#include "seek/extraction/search.hpp"
#include "seek/oracle.hpp"
#include "seek/ops.hpp"

namespace seek {

struct FeatureEstimate {
  double value = 0.0;
  bool dead = false;
  bool negative_branch = false;
  double eta = 0.0;  // located boundary
  std::uint64_t queries = 0;
};

namespace detail {

// Doubles eta from the initial step until `critical` turns false, then bisects.
// Returns nullopt when eta_max is reached with the point still critical.
template <typename Probe>
std::optional<double> scan_boundary(Probe&& critical, const BoundarySearchConfig& cfg) {
  double lo = 0.0;
  double hi = 0.0;
  double eta = cfg.initial_step();
  for (;;) {
    if (eta >= cfg.eta_max) {
      if (critical(cfg.eta_max)) return std::nullopt;
      hi = cfg.eta_max;
      break;
    }
    if (!critical(eta)) {
      hi = eta;
      break;
    }
    lo = eta;
    eta *= 2.0;
  }
  while (hi - lo > cfg.eta_tolerance) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (critical(mid)) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  // Past the boundary the safe-error shift no longer cancels; it must stay that way.
  if (critical(hi + cfg.sign_probe)) {
    throw ExtractionError(ExtractionFailure::NonMonotone, "critical again beyond eta=" + std::to_string(hi));
  }
  return 0.5 * (lo + hi);
}

// Shared by the ReLU and maxpool-ReLU variants: `pre` are the y indices being
// probed (all assumed to hold one value), `post` the z indices that receive
// the compensating shift on the positive branch.
inline FeatureEstimate scan_feature(OracleHandle& oracle, const CriticalPoint& cp, LayerId layer,
                                    std::span<const std::size_t> pre, std::span<const std::size_t> post,
                                    const BoundarySearchConfig& cfg) {
  const std::uint64_t start = oracle.count();
  auto shifted = [&](double pre_shift, double post_shift) {
    QueryInput q = cp.v;
    q.shifts.add_at(layer, Side::Pre, pre, pre_shift);
    if (post_shift != 0.0) q.shifts.add_at(layer, Side::Post, post, post_shift);
    return q;
  };

  FeatureEstimate est;
  // y* <= 0: any negative shift leaves ReLU at zero and the point critical.
  est.negative_branch = oracle.is_critical(shifted(-cfg.sign_probe, 0.0), cp.c1, cp.c2);
  std::optional<double> boundary;
  if (est.negative_branch) {
    boundary = scan_boundary([&](double eta) { return oracle.is_critical(shifted(eta, 0.0), cp.c1, cp.c2); }, cfg);
  } else {
    boundary = scan_boundary([&](double eta) { return oracle.is_critical(shifted(-eta, eta), cp.c1, cp.c2); }, cfg);
  }
  est.queries = oracle.count() - start;
  if (!boundary) {
    est.dead = true;
    return est;
  }
  est.eta = *boundary;
  est.value = est.negative_branch ? -*boundary : *boundary;
  return est;
}

}  // namespace detail

// Value shared by y_layer[beta] at a critical point, for a standalone ReLU layer.
inline FeatureEstimate extract_feature(OracleHandle& oracle, const ModelGraph& arch, const CriticalPoint& cp,
                                       LayerId layer, std::span<const std::size_t> beta,
                                       const BoundarySearchConfig& cfg) {
  if (arch.layer(layer).kind != LayerKind::ReLU) {
    throw StructuralError("extract_feature needs a standalone ReLU layer, got layer " + std::to_string(layer));
  }
  if (beta.empty()) throw StructuralError("extract_feature: empty index set");
  return detail::scan_feature(oracle, cp, layer, beta, beta, cfg);
}

inline FeatureEstimate extract_feature(OracleHandle& oracle, const ModelGraph& arch, const CriticalPoint& cp,
                                       LayerId layer, std::size_t index, const BoundarySearchConfig& cfg) {
  const std::size_t beta[] = {index};
  return extract_feature(oracle, arch, cp, layer, std::span<const std::size_t>(beta), cfg);
}

// Pre-side shift of -C on every feature of `layer` except `index`.
inline std::vector<double> maxpool_suppression(std::size_t n, std::size_t index, double suppression) {
  std::vector<double> s(n, -suppression);
  s[index] = 0.0;
  return s;
}

// y_layer[index] for a maxpool-ReLU layer: every other input of the layer is
// suppressed, a critical point is found on top of that, and the compensating
// post-side shift goes to all pooled outputs whose windows contain `index`.
inline FeatureEstimate extract_feature_maxpool(OracleHandle& oracle, const ModelGraph& arch,
                                               const QueryInput& base, LayerId layer, std::size_t index,
                                               const BoundarySearchConfig& cfg, std::mt19937_64& rng) {
  const LayerSpec& l = arch.layer(layer);
  if (l.kind != LayerKind::MaxPoolReLU) {
    throw StructuralError("extract_feature_maxpool needs a maxpool-ReLU layer, got layer " + std::to_string(layer));
  }
  const Shape& y_shape = arch.in_shape(layer);
  if (index >= shape_size(y_shape)) throw StructuralError("feature index out of range");
  const std::uint64_t start = oracle.count();

  QueryInput suppressed = base;
  suppressed.shifts.add_dense(layer, Side::Pre, maxpool_suppression(shape_size(y_shape), index, cfg.suppression));
  const CriticalPoint cp = search_critical(oracle, arch, suppressed, arch.output_id(), cfg, rng);

  const std::vector<std::size_t> zone = pool_outputs_containing(y_shape, l.pool(), index);
  const std::size_t pre[] = {index};
  FeatureEstimate est = detail::scan_feature(oracle, cp, layer, pre, zone, cfg);
  est.queries = oracle.count() - start;
  if (!est.dead && est.negative_branch && est.eta >= cfg.suppression) {
    throw ExtractionError(ExtractionFailure::BelowSuppressionFloor);
  }
  return est;
}

inline FeatureEstimate extract_feature_maxpool(OracleHandle& oracle, const ModelGraph& arch, const CriticalPoint& cp,
                                               LayerId layer, std::size_t index, const BoundarySearchConfig& cfg,
                                               std::mt19937_64& rng) {
  return extract_feature_maxpool(oracle, arch, cp.base, layer, index, cfg, rng);
}

}  // namespace seek
