#pragma once

#include <algorithm>
#include <optional>
#include <utility>
#include <vector>

#include "seek/model.hpp"
#include "seek/shift.hpp"

namespace seek {

// Where a linear layer sits relative to the malleable boundaries around it.
struct LinearSite {
  LayerId target = 0;
  // Non-linear layer whose pre-side input y is the target's output (plus any skip).
  LayerId measure = 0;
  // Non-linear layers whose outputs reach `measure` without crossing another non-linearity.
  std::vector<LayerId> feeders;
  // x_target is the model input itself.
  bool input_mode = false;
  // Non-linear layer whose post-side shift sets x_target (unused in input mode).
  LayerId inject = 0;
  // y also receives x_target unchanged through an identity skip.
  bool skip_identity = false;
  Shape x_shape;
  Shape y_shape;
};

inline LinearSite analyze_site(const ModelGraph& arch, LayerId target) {
  const LayerSpec& t = arch.layer(target);
  if (!is_linear(t.kind)) throw StructuralError("layer " + std::to_string(target) + " is not a linear layer");
  LinearSite site;
  site.target = target;
  LayerId next = arch.consumers(target).front();
  std::optional<LayerId> skip;
  if (arch.layer(next).kind == LayerKind::Add) {
    const auto& ins = arch.layer(next).inputs;
    skip = ins[0] == target ? ins[1] : ins[0];
    next = arch.consumers(next).front();
  }
  site.measure = next;
  site.x_shape = arch.in_shape(target);
  site.y_shape = arch.in_shape(site.measure);

  bool saw_input = false;
  std::vector<LayerId> stack{arch.layer(site.measure).inputs.front()};
  while (!stack.empty()) {
    const LayerId cur = stack.back();
    stack.pop_back();
    const LayerSpec& l = arch.layer(cur);
    if (cur == target) {
      stack.push_back(l.inputs.front());
    } else if (l.kind == LayerKind::Add) {
      for (LayerId in : l.inputs) stack.push_back(in);
    } else if (l.kind == LayerKind::Input) {
      saw_input = true;
    } else if (is_nonlinear(l.kind)) {
      if (std::find(site.feeders.begin(), site.feeders.end(), cur) == site.feeders.end()) site.feeders.push_back(cur);
    } else {
      throw StructuralError("layer " + std::to_string(target) + " shares its output with another linear layer");
    }
  }
  std::sort(site.feeders.begin(), site.feeders.end());

  const LayerSpec& src = arch.layer(t.inputs.front());
  if (src.kind == LayerKind::Input) {
    site.input_mode = true;
  } else if (src.kind == LayerKind::Add) {
    site.inject = src.inputs.front();
  } else {
    site.inject = src.id;
  }
  site.skip_identity = skip && !site.input_mode && *skip == site.inject;
  if (saw_input && !site.feeders.empty()) {
    throw StructuralError("layer " + std::to_string(target) + " mixes the model input with other branches");
  }
  return site;
}

struct SuppressionPlan {
  ShiftSet shifts;
  std::vector<LayerId> layers;
  bool input_mode = false;
};

// Large negative pre-shift on every non-linear feeder, so that x_target == 0.
// In input mode there is nothing to suppress: x_target is x0.
inline SuppressionPlan zero_input_plan(const ModelGraph& arch, LayerId target, double suppression) {
  const LinearSite site = analyze_site(arch, target);
  SuppressionPlan plan;
  plan.input_mode = site.input_mode;
  plan.layers = site.feeders;
  for (LayerId f : site.feeders) plan.shifts.add_uniform(f, Side::Pre, -suppression);
  return plan;
}

// Query with x_target set to the given sparse values (zero elsewhere) on top of `plan`.
inline QueryInput injection_query(const ModelGraph& arch, const LinearSite& site, const SuppressionPlan& plan,
                                  const std::vector<std::pair<std::size_t, double>>& x_values) {
  QueryInput q{Tensor(arch.input_shape()), plan.shifts};
  for (const auto& [i, v] : x_values) {
    if (site.input_mode) {
      q.x0[i] = v;
    } else {
      q.shifts.add_at(site.inject, Side::Post, i, v);
    }
  }
  return q;
}

}  // namespace seek
