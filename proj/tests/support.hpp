#pragma once

#include <memory>
#include <random>
#include <vector>

#include "seek/arch.hpp"
#include "seek/extraction/feature.hpp"
#include "seek/forward.hpp"
#include "seek/model.hpp"
#include "seek/oracle.hpp"

namespace seek::testing {

inline LayerSpec input_layer(LayerId id, Shape shape) { return {id, LayerKind::Input, {}, InputParams{std::move(shape)}}; }

inline LayerSpec fc_layer(LayerId id, LayerId in, std::size_t n_out, std::size_t n_in, std::vector<double> w,
                          std::vector<double> b) {
  return {id, LayerKind::FullyConnected, {in}, FcParams{Tensor({n_out, n_in}, std::move(w)), Tensor({n_out}, std::move(b))}};
}

inline LayerSpec conv_layer(LayerId id, LayerId in, std::size_t n_out, std::size_t n_in, std::size_t k,
                            std::vector<double> w, std::vector<double> b) {
  const std::size_t pad = (k - 1) / 2;
  return {id, LayerKind::Convolution, {in}, ConvParams{Tensor({n_out, n_in, k, k}, std::move(w)), Tensor({n_out}, std::move(b)), pad, pad}};
}

inline LayerSpec relu_layer(LayerId id, LayerId in) { return {id, LayerKind::ReLU, {in}, {}}; }
inline LayerSpec pool_layer(LayerId id, LayerId in, std::size_t k, std::size_t s) {
  return {id, LayerKind::MaxPoolReLU, {in}, PoolParams{k, k, s, s}};
}
inline LayerSpec argmax_layer(LayerId id, LayerId in) { return {id, LayerKind::Argmax, {in}, {}}; }

// Input[n] -> FC(zero) -> ReLU -> FC(zero, n classes) -> Argmax; logits are
// exactly whatever the Argmax pre-shift says.
inline std::shared_ptr<const ModelGraph> zero_model(std::size_t classes) {
  std::vector<LayerSpec> l{input_layer(0, {2}),
                           fc_layer(1, 0, 2, 2, std::vector<double>(4, 0.0), {0, 0}),
                           relu_layer(2, 1),
                           fc_layer(3, 2, classes, 2, std::vector<double>(2 * classes, 0.0), std::vector<double>(classes, 0.0)),
                           argmax_layer(4, 3)};
  return std::make_shared<ModelGraph>(std::move(l), 4);
}

inline QueryInput with_logits(const ModelGraph& m, const std::vector<double>& logits) {
  QueryInput q{Tensor(m.input_shape()), {}};
  q.shifts.add_dense(m.output_id(), Side::Pre, logits);
  return q;
}

inline std::shared_ptr<const ModelGraph> shared_random(const std::string& arch, const std::string& input,
                                                       std::uint64_t seed) {
  return std::make_shared<ModelGraph>(random_model(arch, parse_shape(input), seed));
}

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(shape);
  std::normal_distribution<double> g(0.0, scale);
  for (double& v : t.values()) v = g(rng);
  return t;
}

// Dense random shifts on a random subset of malleable boundaries.
inline ShiftSet random_shifts(const ModelGraph& m, std::mt19937_64& rng, double scale = 0.5) {
  ShiftSet s;
  std::bernoulli_distribution coin(0.5);
  std::normal_distribution<double> g(0.0, scale);
  for (LayerId id : m.topo_order()) {
    for (Side side : {Side::Pre, Side::Post}) {
      const auto n = m.boundary_size(id, side == Side::Post);
      if (!n || !coin(rng)) continue;
      std::vector<double> v(*n);
      for (double& x : v) x = g(rng);
      s.add_dense(id, side, v);
      if (coin(rng)) s.add_uniform(id, side, g(rng));
    }
  }
  return s;
}

inline std::unique_ptr<OracleHandle> in_process(std::shared_ptr<const ModelGraph> m,
                                                double eps = kDefaultProbeEpsilon) {
  const LayerId out = m->output_id();
  return std::make_unique<OracleHandle>(std::make_shared<InProcessBackend>(std::move(m)), out, eps);
}

// Largest |a - b| / max(|b|, 1e-9) over matching entries.
inline double max_relative_error(const Tensor& estimate, const Tensor& truth) {
  double worst = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    worst = std::max(worst, std::abs(estimate[i] - truth[i]) / std::max(std::abs(truth[i]), 1e-9));
  }
  return worst;
}

// Shifts a scan would apply at eta on a standalone ReLU layer, for the branch
// chosen by the sign probe.
inline QueryInput scan_query(const CriticalPoint& cp, LayerId layer, std::size_t index, double eta, bool negative) {
  QueryInput q = cp.v;
  if (negative) {
    q.shifts.add_at(layer, Side::Pre, index, eta);
  } else {
    q.shifts.add_at(layer, Side::Pre, index, -eta);
    q.shifts.add_at(layer, Side::Post, index, eta);
  }
  return q;
}

// Largest difference between two traces over `layer`'s output and everything after it.
inline double downstream_gap(const ModelGraph& m, const Trace& a, const Trace& b, LayerId layer) {
  double gap = 0.0;
  bool after = false;
  for (LayerId id : m.topo_order()) {
    after = after || id == layer;
    if (!after || m.layer(id).kind == LayerKind::Argmax) continue;
    const Tensor& x = a.z(id);
    const Tensor& y = b.z(id);
    for (std::size_t i = 0; i < x.size(); ++i) gap = std::max(gap, std::abs(x[i] - y[i]));
  }
  for (std::size_t i = 0; i < a.shifted_logits.size(); ++i) {
    gap = std::max(gap, std::abs(a.shifted_logits[i] - b.shifted_logits[i]));
  }
  return gap;
}

}  // namespace seek::testing
