#pragma once

#include <map>
#include <vector>

#include "seek/model.hpp"
#include "seek/ops.hpp"
#include "seek/shift.hpp"

namespace seek {

// Every intermediate feature map of one evaluation. White-box only.
struct Trace {
  // Output of every layer: y for linear layers and Add, shifted z for non-linear layers.
  std::map<LayerId, Tensor> value;
  // Unshifted input y_l of every non-linear layer.
  std::map<LayerId, Tensor> pre;
  Tensor logits;          // y_last without the Argmax pre-side shift
  Tensor shifted_logits;  // y_last + delta y_last
  std::size_t label = 0;

  const Tensor& y(LayerId id) const { return pre.at(id); }
  const Tensor& z(LayerId id) const { return value.at(id); }
};

namespace detail {

inline void check_query(const ModelGraph& model, const QueryInput& q) {
  if (q.x0.shape() != model.input_shape()) {
    throw StructuralError("input shape " + shape_string(q.x0.shape()) + " does not match model input " +
                          shape_string(model.input_shape()));
  }
  q.shifts.validate(model);
}

inline std::size_t evaluate(const ModelGraph& model, const QueryInput& q, Trace* trace) {
  check_query(model, q);
  const auto& order = model.topo_order();
  std::vector<Tensor> values(model.layers().size());
  std::size_t label = 0;
  for (LayerId id : order) {
    const std::size_t p = model.position(id);
    const LayerSpec& l = model.layers()[p];
    auto input = [&](std::size_t k) -> const Tensor& { return values[model.position(l.inputs[k])]; };
    switch (l.kind) {
      case LayerKind::Input:
        values[p] = q.x0;
        break;
      case LayerKind::Convolution:
      case LayerKind::FullyConnected:
        values[p] = apply_linear(l, input(0));
        break;
      case LayerKind::Add:
        values[p] = add_tensors(input(0), input(1));
        break;
      case LayerKind::ReLU:
      case LayerKind::MaxPoolReLU: {
        Tensor y = input(0);
        if (trace) trace->pre[id] = y;
        if (const BoundaryShift* s = q.shifts.find(id, Side::Pre)) s->apply(y.values());
        Tensor z = l.kind == LayerKind::ReLU ? apply_relu(std::move(y)) : apply_maxpool_relu(y, l.pool());
        if (const BoundaryShift* s = q.shifts.find(id, Side::Post)) s->apply(z.values());
        values[p] = std::move(z);
        break;
      }
      case LayerKind::Argmax: {
        Tensor y = input(0);
        if (trace) {
          trace->pre[id] = y;
          trace->logits = y;
        }
        if (const BoundaryShift* s = q.shifts.find(id, Side::Pre)) s->apply(y.values());
        label = argmax_lowest(y.values());
        if (trace) trace->shifted_logits = y;
        values[p] = Tensor(Shape{1}, static_cast<double>(label));
        break;
      }
    }
  }
  if (trace) {
    for (LayerId id : order) trace->value[id] = std::move(values[model.position(id)]);
    trace->label = label;
  }
  return label;
}

}  // namespace detail

inline Trace forward_trace(const ModelGraph& model, const QueryInput& q) {
  Trace t;
  detail::evaluate(model, q, &t);
  return t;
}

inline std::size_t forward_label(const ModelGraph& model, const QueryInput& q) {
  return detail::evaluate(model, q, nullptr);
}

}  // namespace seek
