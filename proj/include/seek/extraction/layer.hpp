#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "seek/extraction/config.hpp"
#include "seek/extraction/feature.hpp"
#include "seek/extraction/search.hpp"
#include "seek/extraction/topology.hpp"
#include "seek/oracle.hpp"

namespace seek {

enum ParamFlag : std::uint8_t {
  kParamDead = 1,
  kParamRetried = 2,
};

struct LayerExtractionResult {
  LayerId layer = 0;
  LayerKind kind = LayerKind::FullyConnected;
  Tensor bias;
  Tensor weight;
  // Oracle calls attributed to each parameter; shared critical-point searches
  // are charged to the first parameter that used them.
  std::vector<std::uint64_t> bias_queries;
  std::vector<std::uint64_t> weight_queries;
  std::vector<std::uint8_t> bias_flags;
  std::vector<std::uint8_t> weight_flags;
  // Last layer only: row 0 of w and b[0] are pinned to 0, the rest are differences.
  bool gauge_fixed = false;

  std::uint64_t total_queries() const {
    std::uint64_t n = 0;
    for (auto q : bias_queries) n += q;
    for (auto q : weight_queries) n += q;
    return n;
  }
  std::size_t count_flag(ParamFlag f) const {
    auto has = [f](std::uint8_t v) { return (v & f) != 0; };
    return std::count_if(bias_flags.begin(), bias_flags.end(), has) +
           std::count_if(weight_flags.begin(), weight_flags.end(), has);
  }
  // Number of parameters that were actually identified (excludes the gauge row).
  std::size_t extracted_bias_count() const { return gauge_fixed ? bias.size() - 1 : bias.size(); }
  std::size_t extracted_weight_count() const {
    return gauge_fixed ? weight.size() - weight.dim(1) : weight.size();
  }
};

// Output positions (flattened over [n_out, H, W]) whose value is
// b[c_out] + delta * w[c_out, c_in, i, j] under the periodic injection pattern,
// restricted to positions whose kernel footprint stays inside the feature map.
inline std::vector<std::size_t> conv_weight_indices(std::size_t c_out, std::size_t H, std::size_t W,
                                                    std::size_t kh, std::size_t kw, std::size_t i,
                                                    std::size_t j) {
  const std::size_t ph = (kh - 1) / 2, pw = (kw - 1) / 2;
  auto rows = [](std::size_t n, std::size_t k, std::size_t pad, std::size_t kidx, bool interior) {
    std::vector<std::size_t> out;
    for (std::size_t p = 0; p < n; ++p) {
      if ((p + 1 + kidx) % k != 0) continue;  // (p - k + 1 + kidx) mod k == 0
      if (interior && (p < pad || p + pad >= n)) continue;
      // The single contributing input sits at p + kidx - pad; it must be inside the map.
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(p + kidx) - static_cast<std::ptrdiff_t>(pad);
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue;
      out.push_back(p);
    }
    return out;
  };
  std::vector<std::size_t> rs = rows(H, kh, ph, i, true);
  std::vector<std::size_t> cs = rows(W, kw, pw, j, true);
  if (rs.empty()) {
    rs = rows(H, kh, ph, i, false);
    if (rs.size() > 1) rs.resize(1);
  }
  if (cs.empty()) {
    cs = rows(W, kw, pw, j, false);
    if (cs.size() > 1) cs.resize(1);
  }
  std::vector<std::size_t> out;
  for (std::size_t r : rs) {
    for (std::size_t c : cs) out.push_back((c_out * H + r) * W + c);
  }
  return out;
}

// Periodic injection pattern for input channel c_in, flattened over x's [n_in, H, W].
inline std::vector<std::pair<std::size_t, double>> conv_injection(const Shape& x_shape, std::size_t c_in,
                                                                  std::size_t kh, std::size_t kw, double delta) {
  const std::size_t H = x_shape[1], W = x_shape[2];
  const std::size_t ph = (kh - 1) / 2, pw = (kw - 1) / 2;
  std::vector<std::pair<std::size_t, double>> out;
  for (std::size_t r = 0; r < H; ++r) {
    if ((r + kh - ph) % kh != 0) continue;  // (r - ph) mod kh == 0
    for (std::size_t c = 0; c < W; ++c) {
      if ((c + kw - pw) % kw != 0) continue;
      out.emplace_back((c_in * H + r) * W + c, delta);
    }
  }
  return out;
}

inline double conv_delta(std::size_t n_in, std::size_t kh, std::size_t kw) {
  return std::sqrt(static_cast<double>(n_in * kh * kw) / 4.0);
}

inline double fc_delta(std::size_t n_in) { return std::sqrt(static_cast<double>(n_in) / 4.0); }

inline std::mt19937_64 layer_rng(std::uint64_t seed, LayerId layer) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(layer), 0x5eecu};
  return std::mt19937_64(seq);
}

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// One feature to measure: the y indices that share its value.
struct Target {
  std::vector<std::size_t> indices;
};

struct Measured {
  double value = 0.0;
  std::uint8_t flags = 0;
  std::uint64_t queries = 0;
};

// Runs feature extraction for a set of targets that all use one injection
// (one `base` query), with the retry and repeat policy.
class GroupExtractor {
 public:
  GroupExtractor(OracleHandle& oracle, const ModelGraph& arch, const LinearSite& site, const BoundarySearchConfig& cfg,
                 std::mt19937_64& rng)
      : oracle_(oracle), arch_(arch), site_(site), cfg_(cfg), rng_(rng) {
    maxpool_ = arch.layer(site.measure).kind == LayerKind::MaxPoolReLU;
  }

  std::vector<Measured> run(const QueryInput& base, const std::vector<Target>& targets) {
    std::vector<Measured> out(targets.size());
    if (maxpool_) {
      for (std::size_t t = 0; t < targets.size(); ++t) out[t] = measure_maxpool(base, targets[t]);
      return out;
    }
    const std::uint64_t start = oracle_.count();
    CriticalPoint cp = critical(base, 0);
    std::uint64_t overhead = oracle_.count() - start;
    for (std::size_t t = 0; t < targets.size(); ++t) {
      const std::uint64_t before = oracle_.count();
      out[t] = measure_relu(base, cp, targets[t]);
      out[t].queries = oracle_.count() - before;
      if (t == 0) out[t].queries += overhead;
    }
    return out;
  }

 private:
  // Random pre-side offsets on every layer after the measured one. They leave
  // y at the measured layer untouched but change which downstream units are active.
  ShiftSet downstream_jitter() {
    ShiftSet s;
    std::uniform_real_distribution<double> u(-cfg_.jitter, cfg_.jitter);
    for (LayerId id : arch_.descendants(site_.measure)) {
      const LayerKind k = arch_.layer(id).kind;
      if (k != LayerKind::ReLU && k != LayerKind::MaxPoolReLU) continue;
      std::vector<double> v(shape_size(arch_.in_shape(id)));
      for (double& x : v) x = u(rng_);
      s.add_dense(id, Side::Pre, v);
    }
    return s;
  }

  CriticalPoint critical(const QueryInput& base, std::size_t attempt) {
    QueryInput q = base;
    if (attempt >= 2) q.shifts += downstream_jitter();
    BoundarySearchConfig cfg = cfg_;
    for (int escalation = 0;; ++escalation) {
      try {
        return search_critical(oracle_, arch_, q, arch_.output_id(), cfg, rng_);
      } catch (const ExtractionError& e) {
        if (e.kind() != ExtractionFailure::NoBoundary || escalation >= 3) throw;
        cfg.sphere_norm *= 10.0;
        cfg.sphere_tolerance *= 10.0;
      }
    }
  }

  Measured measure_relu(const QueryInput& base, CriticalPoint& cp, const Target& target) {
    Measured m;
    std::vector<double> repeats;
    for (std::size_t attempt = 0;; ++attempt) {
      try {
        if (attempt > 0) cp = critical(base, attempt);
        const FeatureEstimate est = extract_feature(oracle_, arch_, cp, site_.measure, target.indices, cfg_);
        if (!est.dead) {
          m.value = est.value;
          break;
        }
        if (attempt >= cfg_.max_retries) {
          m.flags |= kParamDead;
          return m;
        }
      } catch (const ExtractionError& e) {
        if (attempt >= cfg_.max_retries) throw;
      }
      m.flags |= kParamRetried;
    }
    if ((m.flags & kParamRetried) && cfg_.repeats > 1) {
      repeats.push_back(m.value);
      for (std::size_t r = 1; r < cfg_.repeats; ++r) {
        try {
          CriticalPoint fresh = critical(base, 1);
          const FeatureEstimate est = extract_feature(oracle_, arch_, fresh, site_.measure, target.indices, cfg_);
          if (!est.dead) repeats.push_back(est.value);
        } catch (const ExtractionError&) {
        }
      }
      m.value = median(repeats);
    }
    return m;
  }

  Measured measure_maxpool(const QueryInput& base, const Target& target) {
    Measured m;
    const std::uint64_t start = oracle_.count();
    const std::size_t index = target.indices.front();
    auto once = [&](std::size_t attempt) {
      QueryInput q = base;
      if (attempt >= 2) q.shifts += downstream_jitter();
      return extract_feature_maxpool(oracle_, arch_, q, site_.measure, index, cfg_, rng_);
    };
    for (std::size_t attempt = 0;; ++attempt) {
      try {
        const FeatureEstimate est = once(attempt);
        if (!est.dead) {
          m.value = est.value;
          break;
        }
        if (attempt >= cfg_.max_retries) {
          m.flags |= kParamDead;
          m.queries = oracle_.count() - start;
          return m;
        }
      } catch (const ExtractionError& e) {
        if (e.kind() == ExtractionFailure::BelowSuppressionFloor || attempt >= cfg_.max_retries) throw;
      }
      m.flags |= kParamRetried;
    }
    if ((m.flags & kParamRetried) && cfg_.repeats > 1) {
      std::vector<double> values{m.value};
      for (std::size_t r = 1; r < cfg_.repeats; ++r) {
        try {
          const FeatureEstimate est = once(1);
          if (!est.dead) values.push_back(est.value);
        } catch (const ExtractionError&) {
        }
      }
      m.value = median(values);
    }
    m.queries = oracle_.count() - start;
    return m;
  }

  OracleHandle& oracle_;
  const ModelGraph& arch_;
  const LinearSite& site_;
  const BoundarySearchConfig& cfg_;
  std::mt19937_64& rng_;
  bool maxpool_ = false;
};

inline std::vector<std::size_t> channel_indices(std::size_t c, std::size_t H, std::size_t W) {
  std::vector<std::size_t> out(H * W);
  for (std::size_t k = 0; k < H * W; ++k) out[k] = c * H * W + k;
  return out;
}

// Shared-value index sets collapse to one representative for maxpool layers.
inline Target make_target(std::vector<std::size_t> indices, bool single, std::size_t preferred) {
  if (single) {
    const auto it = std::find(indices.begin(), indices.end(), preferred);
    return Target{{it != indices.end() ? preferred : indices.front()}};
  }
  return Target{std::move(indices)};
}

inline void check_extractable(const ModelGraph& arch, const LinearSite& site, LayerKind expected) {
  if (arch.layer(site.target).kind != expected) {
    throw StructuralError("layer " + std::to_string(site.target) + " is a " + to_string(arch.layer(site.target).kind));
  }
  const LayerKind m = arch.layer(site.measure).kind;
  if (m != LayerKind::ReLU && m != LayerKind::MaxPoolReLU) {
    throw StructuralError("layer " + std::to_string(site.target) + " feeds the Argmax; use extract_last_layer");
  }
}

}  // namespace detail

// Bias from x = 0 (all spatial positions of a channel share b), then one
// periodic injection per input channel so each kernel entry repeats across y.
inline LayerExtractionResult extract_conv_layer(OracleHandle& oracle, const ModelGraph& arch, LayerId target,
                                                const BoundarySearchConfig& cfg) {
  cfg.validate();
  const LinearSite site = analyze_site(arch, target);
  detail::check_extractable(arch, site, LayerKind::Convolution);
  const ConvParams& shape = arch.layer(target).conv();
  const std::size_t n_out = shape.out_channels(), n_in = shape.in_channels();
  const std::size_t kh = shape.kernel_h(), kw = shape.kernel_w();
  const std::size_t H = site.y_shape[1], W = site.y_shape[2];
  const bool single = arch.layer(site.measure).kind == LayerKind::MaxPoolReLU;
  const double delta = cfg.conv_delta.value_or(conv_delta(n_in, kh, kw));

  std::mt19937_64 rng = layer_rng(cfg.seed, target);
  const SuppressionPlan plan = zero_input_plan(arch, target, cfg.suppression);
  detail::GroupExtractor group(oracle, arch, site, cfg, rng);

  LayerExtractionResult r;
  r.layer = target;
  r.kind = LayerKind::Convolution;
  r.bias = Tensor(Shape{n_out});
  r.weight = Tensor(shape.weight.shape());
  r.bias_queries.assign(n_out, 0);
  r.bias_flags.assign(n_out, 0);
  r.weight_queries.assign(r.weight.size(), 0);
  r.weight_flags.assign(r.weight.size(), 0);

  std::vector<detail::Target> bias_targets;
  for (std::size_t c = 0; c < n_out; ++c) {
    const std::size_t center = (c * H + H / 2) * W + W / 2;
    bias_targets.push_back(detail::make_target(detail::channel_indices(c, H, W), single, center));
  }
  const auto bias_values = group.run(injection_query(arch, site, plan, {}), bias_targets);
  for (std::size_t c = 0; c < n_out; ++c) {
    r.bias[c] = bias_values[c].value;
    r.bias_queries[c] = bias_values[c].queries;
    r.bias_flags[c] = bias_values[c].flags;
  }

  for (std::size_t ci = 0; ci < n_in; ++ci) {
    const QueryInput base = injection_query(arch, site, plan, conv_injection(site.x_shape, ci, kh, kw, delta));
    std::vector<detail::Target> targets;
    std::vector<std::size_t> slots;
    for (std::size_t co = 0; co < n_out; ++co) {
      for (std::size_t i = 0; i < kh; ++i) {
        for (std::size_t j = 0; j < kw; ++j) {
          auto indices = conv_weight_indices(co, H, W, kh, kw, i, j);
          if (indices.empty()) throw StructuralError("feature map too small for kernel position");
          targets.push_back(detail::make_target(std::move(indices), single, 0));
          slots.push_back(((co * n_in + ci) * kh + i) * kw + j);
        }
      }
    }
    const auto values = group.run(base, targets);
    const std::size_t ih = (kh - 1) / 2, iw = (kw - 1) / 2;
    for (std::size_t t = 0; t < targets.size(); ++t) {
      const std::size_t co = slots[t] / (n_in * kh * kw);
      const std::size_t kij = slots[t] % (kh * kw);
      // The skip carries the injection itself into the centre tap of the same channel.
      const bool through_skip = site.skip_identity && co == ci && kij == ih * kw + iw;
      r.weight[slots[t]] = (values[t].value - r.bias[co] - (through_skip ? delta : 0.0)) / delta;
      r.weight_queries[slots[t]] = values[t].queries;
      r.weight_flags[slots[t]] = values[t].flags | (r.bias_flags[co] & kParamDead);
    }
  }
  return r;
}

// Bias from x = 0, then one column of w per injected input feature.
inline LayerExtractionResult extract_fc_layer(OracleHandle& oracle, const ModelGraph& arch, LayerId target,
                                              const BoundarySearchConfig& cfg) {
  cfg.validate();
  const LinearSite site = analyze_site(arch, target);
  detail::check_extractable(arch, site, LayerKind::FullyConnected);
  const FcParams& shape = arch.layer(target).fc();
  const std::size_t n_out = shape.out_features(), n_in = shape.in_features();
  const double delta = cfg.fc_delta.value_or(fc_delta(n_in));

  std::mt19937_64 rng = layer_rng(cfg.seed, target);
  const SuppressionPlan plan = zero_input_plan(arch, target, cfg.suppression);
  detail::GroupExtractor group(oracle, arch, site, cfg, rng);

  LayerExtractionResult r;
  r.layer = target;
  r.kind = LayerKind::FullyConnected;
  r.bias = Tensor(Shape{n_out});
  r.weight = Tensor(shape.weight.shape());
  r.bias_queries.assign(n_out, 0);
  r.bias_flags.assign(n_out, 0);
  r.weight_queries.assign(r.weight.size(), 0);
  r.weight_flags.assign(r.weight.size(), 0);

  std::vector<detail::Target> targets;
  for (std::size_t j = 0; j < n_out; ++j) targets.push_back(detail::Target{{j}});

  const auto bias_values = group.run(injection_query(arch, site, plan, {}), targets);
  for (std::size_t j = 0; j < n_out; ++j) {
    r.bias[j] = bias_values[j].value;
    r.bias_queries[j] = bias_values[j].queries;
    r.bias_flags[j] = bias_values[j].flags;
  }
  for (std::size_t i0 = 0; i0 < n_in; ++i0) {
    const auto values = group.run(injection_query(arch, site, plan, {{i0, delta}}), targets);
    for (std::size_t j = 0; j < n_out; ++j) {
      const std::size_t slot = j * n_in + i0;
      const double skip = site.skip_identity && j == i0 ? delta : 0.0;
      r.weight[slot] = (values[j].value - r.bias[j] - skip) / delta;
      r.weight_queries[slot] = values[j].queries;
      r.weight_flags[slot] = values[j].flags | (r.bias_flags[j] & kParamDead);
    }
  }
  return r;
}

namespace detail {

// Offset t on logit c (all classes but 0 and c pushed down by C) at which
// classes 0 and c tie.
inline double tie_offset(OracleHandle& oracle, const ModelGraph& arch, const QueryInput& base, std::size_t c,
                         const BoundarySearchConfig& cfg) {
  const std::size_t n = arch.num_classes();
  const LayerId out = arch.output_id();
  auto with_offset = [&](double t) {
    std::vector<double> s(n, -cfg.suppression);
    s[0] = 0.0;
    s[c] = t;
    QueryInput q = base;
    q.shifts.add_dense(out, Side::Pre, s);
    return q;
  };
  double span = 1.0;
  while (oracle.query(with_offset(span)) != c || oracle.query(with_offset(-span)) != 0) {
    span *= 2.0;
    if (span > cfg.eta_max) throw ExtractionError(ExtractionFailure::NoBoundary, "logit tie out of range");
  }
  double lo = -span, hi = span;  // label 0 at lo, label c at hi
  const double tol = std::min(cfg.eta_tolerance, oracle.epsilon() / 4.0);
  while (hi - lo > tol) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (oracle.query(with_offset(mid)) == c) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  const double t = 0.5 * (lo + hi);
  if (!oracle.is_critical(with_offset(t), 0, c)) {
    throw ExtractionError(ExtractionFailure::CornerPoint, "tie between class 0 and " + std::to_string(c));
  }
  return t;
}

}  // namespace detail

// The layer feeding the Argmax is identifiable only up to one additive
// constant per column of w and one for b. Reported with b[0] = 0 and w[0, :] = 0.
inline LayerExtractionResult extract_last_layer(OracleHandle& oracle, const ModelGraph& arch,
                                                const BoundarySearchConfig& cfg) {
  cfg.validate();
  const LayerId target = arch.last_linear_id();
  const LinearSite site = analyze_site(arch, target);
  const FcParams& shape = arch.layer(target).fc();
  const std::size_t n1 = shape.out_features(), n0 = shape.in_features();
  const double x = cfg.fc_delta.value_or(fc_delta(n0));
  const SuppressionPlan plan = zero_input_plan(arch, target, cfg.suppression);

  LayerExtractionResult r;
  r.layer = target;
  r.kind = LayerKind::FullyConnected;
  r.gauge_fixed = true;
  r.bias = Tensor(Shape{n1});
  r.weight = Tensor(shape.weight.shape());
  r.bias_queries.assign(n1, 0);
  r.bias_flags.assign(n1, 0);
  r.weight_queries.assign(r.weight.size(), 0);
  r.weight_flags.assign(r.weight.size(), 0);

  const QueryInput zero = injection_query(arch, site, plan, {});
  std::vector<double> t_bias(n1, 0.0);
  for (std::size_t c = 1; c < n1; ++c) {
    const std::uint64_t before = oracle.count();
    t_bias[c] = detail::tie_offset(oracle, arch, zero, c, cfg);
    r.bias[c] = -t_bias[c];  // b_c + t = b_0
    r.bias_queries[c] = oracle.count() - before;
  }
  for (std::size_t i0 = 0; i0 < n0; ++i0) {
    const QueryInput q = injection_query(arch, site, plan, {{i0, x}});
    for (std::size_t c = 1; c < n1; ++c) {
      const std::uint64_t before = oracle.count();
      const double t = detail::tie_offset(oracle, arch, q, c, cfg);
      r.weight[c * n0 + i0] = (t_bias[c] - t) / x;
      r.weight_queries[c * n0 + i0] = oracle.count() - before;
    }
  }
  return r;
}

// Pins b[0] = 0 and w[0, :] = 0 by subtracting row 0; how truth is compared to
// a gauge-fixed estimate.
inline void apply_last_layer_gauge(Tensor& bias, Tensor& weight) {
  const std::size_t n1 = weight.dim(0), n0 = weight.dim(1);
  const double b0 = bias[0];
  for (std::size_t c = 0; c < n1; ++c) bias[c] -= b0;
  for (std::size_t i = 0; i < n0; ++i) {
    const double w0 = weight[i];
    for (std::size_t c = 0; c < n1; ++c) weight[c * n0 + i] -= w0;
  }
}

// Dispatches on the layer's position in the graph.
inline LayerExtractionResult extract_layer(OracleHandle& oracle, const ModelGraph& arch, LayerId target,
                                           const BoundarySearchConfig& cfg) {
  if (target == arch.last_linear_id()) return extract_last_layer(oracle, arch, cfg);
  const LayerKind k = arch.layer(target).kind;
  if (k == LayerKind::Convolution) return extract_conv_layer(oracle, arch, target, cfg);
  if (k == LayerKind::FullyConnected) return extract_fc_layer(oracle, arch, target, cfg);
  throw StructuralError("layer " + std::to_string(target) + " has no parameters");
}

inline std::vector<LayerId> linear_layers(const ModelGraph& arch) {
  std::vector<LayerId> ids;
  for (LayerId id : arch.topo_order()) {
    if (is_linear(arch.layer(id).kind)) ids.push_back(id);
  }
  return ids;
}

}  // namespace seek
