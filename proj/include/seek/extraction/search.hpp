#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "seek/extraction/config.hpp"
#include "seek/oracle.hpp"

namespace seek {

namespace detail {

inline std::vector<double> random_on_sphere(std::size_t n, double norm, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> v(n);
  double len = 0.0;
  do {
    len = 0.0;
    for (double& x : v) {
      x = gauss(rng);
      len += x * x;
    }
  } while (len == 0.0);
  const double scale = norm / std::sqrt(len);
  for (double& x : v) x *= scale;
  return v;
}

inline double distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace detail

// Finds a critical point by shifting the pre-side of `layer` (all other inputs
// fixed at v0): draw shift pairs of norm d until their labels differ, then
// bisect along the chord, projecting each midpoint back onto the sphere.
// The result is re-checked with the two-probe test; failures resample.
inline CriticalPoint search_critical(OracleHandle& oracle, const ModelGraph& arch, const QueryInput& v0,
                                     LayerId layer, const BoundarySearchConfig& cfg, std::mt19937_64& rng) {
  const auto n = arch.boundary_size(layer, false);
  if (!n) throw StructuralError("layer " + std::to_string(layer) + " is not a non-linear boundary");
  const double d = cfg.sphere_norm;

  auto label_at = [&](const std::vector<double>& shift) {
    QueryInput q = v0;
    q.shifts.add_dense(layer, Side::Pre, shift);
    return oracle.query(q);
  };

  for (std::size_t attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    std::vector<double> s1, s2;
    std::size_t c1 = 0, c2 = 0;
    bool differ = false;
    for (std::size_t k = 0; k < cfg.max_samples && !differ; ++k) {
      s1 = detail::random_on_sphere(*n, d, rng);
      s2 = detail::random_on_sphere(*n, d, rng);
      c1 = label_at(s1);
      c2 = label_at(s2);
      differ = c1 != c2;
    }
    if (!differ) {
      throw ExtractionError(ExtractionFailure::NoBoundary,
                            "labels constant over " + std::to_string(cfg.max_samples) + " sampled pairs");
    }

    bool degenerate = false;
    for (int iter = 0; iter < 256 && detail::distance(s1, s2) > cfg.sphere_tolerance; ++iter) {
      std::vector<double> mid(*n);
      double len = 0.0;
      for (std::size_t i = 0; i < *n; ++i) {
        mid[i] = 0.5 * (s1[i] + s2[i]);
        len += mid[i] * mid[i];
      }
      if (len == 0.0) {
        degenerate = true;  // antipodal pair
        break;
      }
      const double scale = d / std::sqrt(len);
      for (double& x : mid) x *= scale;
      if (mid == s1 || mid == s2) break;  // float resolution reached
      const std::size_t c3 = label_at(mid);
      if (c3 == c1) {
        s1 = std::move(mid);
      } else {
        s2 = std::move(mid);
        c2 = c3;
      }
    }
    if (degenerate) continue;

    CriticalPoint cp;
    cp.base = v0;
    cp.layer = layer;
    cp.v = v0;
    cp.v.shifts.add_dense(layer, Side::Pre, s2);
    cp.boundary_shift = std::move(s2);
    cp.c1 = c1;
    cp.c2 = c2;
    if (oracle.is_critical(cp.v, c1, c2)) return cp;
  }
  throw ExtractionError(ExtractionFailure::CornerPoint,
                        "no valid critical point after " + std::to_string(cfg.max_retries + 1) + " attempts");
}

}  // namespace seek
