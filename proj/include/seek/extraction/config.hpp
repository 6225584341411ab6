#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>

#include "seek/error.hpp"

namespace seek {

struct BoundarySearchConfig {
  // Critical-point search on a sphere of shifts.
  double sphere_norm = 10.0;        // d
  double sphere_tolerance = 1e-13;  // stop once the chord endpoints are this close
  std::size_t max_samples = 64;     // random pairs tried before giving up on norm d

  // Feature boundary scans.
  double eta_tolerance = 1e-11;  // absolute, on O(1) features
  double eta_max = 1e4;
  double sign_probe = 1.0;
  std::size_t max_retries = 5;

  // Large negative pre-activation shift that forces a ReLU output to zero.
  double suppression = 1e6;
  // Assumed ceiling on |feature| anywhere in the network; suppression must beat it 100x.
  double feature_bound = 1e3;

  // Injection amplitudes; default sqrt(n_in*k_h*k_w/4) for conv, sqrt(n_in/4) for fc.
  std::optional<double> conv_delta;
  std::optional<double> fc_delta;

  // Downstream pre-side jitter added when a feature looks dead.
  double jitter = 1.0;
  // Extra extractions (median taken) for parameters that needed retries.
  std::size_t repeats = 1;

  std::uint64_t seed = 0;

  // First scan step: tol * 2^10.
  double initial_step() const { return eta_tolerance * 1024.0; }

  void validate() const {
    auto positive = [](double v, const char* name) {
      if (!(v > 0.0)) throw StructuralError(std::string("search config: ") + name + " must be positive");
    };
    positive(sphere_norm, "sphere_norm");
    positive(sphere_tolerance, "sphere_tolerance");
    positive(eta_tolerance, "eta_tolerance");
    positive(eta_max, "eta_max");
    positive(sign_probe, "sign_probe");
    positive(suppression, "suppression");
    positive(feature_bound, "feature_bound");
    positive(jitter, "jitter");
    if (conv_delta) positive(*conv_delta, "conv_delta");
    if (fc_delta) positive(*fc_delta, "fc_delta");
    if (max_samples == 0) throw StructuralError("search config: max_samples must be positive");
    if (repeats == 0) throw StructuralError("search config: repeats must be positive");
    if (eta_tolerance * 1024.0 >= eta_max) throw StructuralError("search config: eta_tolerance too coarse for eta_max");
    if (suppression < 100.0 * feature_bound) {
      throw StructuralError("search config: suppression constant must exceed 100x the feature bound");
    }
  }
};

}  // namespace seek
