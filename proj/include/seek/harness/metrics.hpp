#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "seek/extraction/layer.hpp"
#include "seek/model.hpp"

namespace seek::harness {

inline constexpr double kRelativeErrorFloor = 1e-9;

inline double relative_error(double estimate, double truth) {
  return std::abs(estimate - truth) / std::max(std::abs(truth), kRelativeErrorFloor);
}

struct ErrorStats {
  std::size_t count = 0;
  double mean = 0.0;
  double median = 0.0;
  double max = 0.0;

  static ErrorStats of(std::vector<double> e) {
    ErrorStats s;
    s.count = e.size();
    if (e.empty()) return s;
    double sum = 0.0;
    for (double v : e) {
      sum += v;
      s.max = std::max(s.max, v);
    }
    s.mean = sum / static_cast<double>(e.size());
    s.median = detail::median(std::move(e));
    return s;
  }
};

struct LayerErrors {
  ErrorStats bias;
  ErrorStats weight;
  // Both together, for thresholds stated over "every parameter".
  ErrorStats all;
  std::vector<double> bias_errors;
  std::vector<double> weight_errors;
};

// Compares estimates with the truth. Under the last-layer gauge the truth is
// fixed the same way first and row 0 is left out. `skip` marks entries (dead
// features) not counted.
inline LayerErrors compare_layer(const Tensor& bias, const Tensor& weight, Tensor true_bias, Tensor true_weight,
                                 bool gauge_fixed, const std::vector<std::uint8_t>& bias_skip = {},
                                 const std::vector<std::uint8_t>& weight_skip = {}) {
  if (bias.shape() != true_bias.shape() || weight.shape() != true_weight.shape()) {
    throw StructuralError("layer shapes differ: bias " + shape_string(bias.shape()) + " vs " +
                          shape_string(true_bias.shape()) + ", weight " + shape_string(weight.shape()) + " vs " +
                          shape_string(true_weight.shape()));
  }
  Tensor b = bias, w = weight;
  std::size_t first_row = 0;
  if (gauge_fixed) {
    apply_last_layer_gauge(true_bias, true_weight);
    apply_last_layer_gauge(b, w);
    first_row = 1;
  }
  LayerErrors out;
  const std::size_t row = w.size() / w.dim(0);
  for (std::size_t i = first_row; i < b.size(); ++i) {
    if (i < bias_skip.size() && bias_skip[i]) continue;
    out.bias_errors.push_back(relative_error(b[i], true_bias[i]));
  }
  for (std::size_t i = first_row * row; i < w.size(); ++i) {
    if (i < weight_skip.size() && weight_skip[i]) continue;
    out.weight_errors.push_back(relative_error(w[i], true_weight[i]));
  }
  out.bias = ErrorStats::of(out.bias_errors);
  out.weight = ErrorStats::of(out.weight_errors);
  std::vector<double> all = out.bias_errors;
  all.insert(all.end(), out.weight_errors.begin(), out.weight_errors.end());
  out.all = ErrorStats::of(std::move(all));
  return out;
}

inline const Tensor& layer_bias(const LayerSpec& l) {
  return l.kind == LayerKind::Convolution ? l.conv().bias : l.fc().bias;
}
inline const Tensor& layer_weight(const LayerSpec& l) {
  return l.kind == LayerKind::Convolution ? l.conv().weight : l.fc().weight;
}

inline LayerErrors compare_result(const LayerExtractionResult& r, const ModelGraph& truth) {
  const LayerSpec& l = truth.layer(r.layer);
  auto dead = [](const std::vector<std::uint8_t>& flags) {
    std::vector<std::uint8_t> out(flags.size());
    for (std::size_t i = 0; i < flags.size(); ++i) out[i] = (flags[i] & kParamDead) != 0;
    return out;
  };
  return compare_layer(r.bias, r.weight, layer_bias(l), layer_weight(l), r.gauge_fixed, dead(r.bias_flags),
                       dead(r.weight_flags));
}

}  // namespace seek::harness
