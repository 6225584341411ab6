#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "seek/error.hpp"
#include "seek/tensor.hpp"

namespace seek {

using LayerId = std::uint32_t;

enum class LayerKind { Input, Convolution, FullyConnected, ReLU, MaxPoolReLU, Add, Argmax };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Input: return "Input";
    case LayerKind::Convolution: return "Convolution";
    case LayerKind::FullyConnected: return "FullyConnected";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::MaxPoolReLU: return "MaxPoolReLU";
    case LayerKind::Add: return "Add";
    case LayerKind::Argmax: return "Argmax";
  }
  return "?";
}

inline LayerKind layer_kind_from_string(const std::string& s) {
  for (LayerKind k : {LayerKind::Input, LayerKind::Convolution, LayerKind::FullyConnected,
                      LayerKind::ReLU, LayerKind::MaxPoolReLU, LayerKind::Add, LayerKind::Argmax}) {
    if (s == to_string(k)) return k;
  }
  throw StructuralError("unknown layer kind '" + s + "'");
}

// Conv/FC carry parameters. Add merges two branches and has none.
inline bool is_linear(LayerKind k) {
  return k == LayerKind::Convolution || k == LayerKind::FullyConnected;
}

// The malleable boundaries: a client share exists on both sides of these.
inline bool is_nonlinear(LayerKind k) {
  return k == LayerKind::ReLU || k == LayerKind::MaxPoolReLU || k == LayerKind::Argmax;
}

struct InputParams {
  Shape shape;
};

// weight [n_out, n_in, k_h, k_w]; stride is always 1.
struct ConvParams {
  Tensor weight;
  Tensor bias;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;

  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t kernel_h() const { return weight.dim(2); }
  std::size_t kernel_w() const { return weight.dim(3); }
};

// weight [n_out, n_in].
struct FcParams {
  Tensor weight;
  Tensor bias;

  std::size_t out_features() const { return weight.dim(0); }
  std::size_t in_features() const { return weight.dim(1); }
};

struct PoolParams {
  std::size_t kernel_h = 2;
  std::size_t kernel_w = 2;
  std::size_t stride_h = 2;
  std::size_t stride_w = 2;
};

using LayerParams = std::variant<std::monostate, InputParams, ConvParams, FcParams, PoolParams>;

struct LayerSpec {
  LayerId id = 0;
  LayerKind kind = LayerKind::Input;
  std::vector<LayerId> inputs;
  LayerParams params;

  const ConvParams& conv() const { return std::get<ConvParams>(params); }
  const FcParams& fc() const { return std::get<FcParams>(params); }
  const PoolParams& pool() const { return std::get<PoolParams>(params); }
  const InputParams& input() const { return std::get<InputParams>(params); }
};

// Immutable validated DAG. Construction checks every structural invariant the
// evaluator and the extraction engine rely on.
class ModelGraph {
 public:
  ModelGraph(std::vector<LayerSpec> layers, LayerId output) : layers_(std::move(layers)), output_(output) {
    index_layers();
    topological_sort();
    infer_shapes();
    check_topology();
  }

  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  const std::vector<LayerId>& topo_order() const noexcept { return order_; }
  LayerId output_id() const noexcept { return output_; }
  LayerId input_id() const noexcept { return input_; }

  bool contains(LayerId id) const { return position_.count(id) != 0; }

  std::size_t position(LayerId id) const {
    auto it = position_.find(id);
    if (it == position_.end()) throw StructuralError("unknown layer id " + std::to_string(id));
    return it->second;
  }

  const LayerSpec& layer(LayerId id) const { return layers_[position(id)]; }

  // Shape of a layer's (first) input; for non-linear layers this is y_l.
  const Shape& in_shape(LayerId id) const { return in_shape_[position(id)]; }
  // Shape of a layer's output; for non-linear layers this is z_l.
  const Shape& out_shape(LayerId id) const { return out_shape_[position(id)]; }

  const std::vector<LayerId>& consumers(LayerId id) const { return consumers_[position(id)]; }

  const Shape& input_shape() const { return layer(input_).input().shape; }
  LayerId last_linear_id() const { return layer(output_).inputs.front(); }
  std::size_t num_classes() const { return in_shape(output_).front(); }

  // Pre-side entries are valid on every non-linear layer; post-side on all but Argmax.
  std::optional<std::size_t> boundary_size(LayerId id, bool post_side) const {
    if (!contains(id)) return std::nullopt;
    const LayerSpec& l = layer(id);
    if (!is_nonlinear(l.kind)) return std::nullopt;
    if (post_side) {
      if (l.kind == LayerKind::Argmax) return std::nullopt;
      return shape_size(out_shape(id));
    }
    return shape_size(in_shape(id));
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const LayerSpec& l : layers_) {
      if (l.kind == LayerKind::Convolution) n += l.conv().weight.size() + l.conv().bias.size();
      if (l.kind == LayerKind::FullyConnected) n += l.fc().weight.size() + l.fc().bias.size();
    }
    return n;
  }

  // Same topology with every parameter zeroed: what an attacker is assumed to know.
  ModelGraph strip_parameters() const {
    std::vector<LayerSpec> copy = layers_;
    for (LayerSpec& l : copy) {
      if (auto* c = std::get_if<ConvParams>(&l.params)) {
        c->weight = Tensor(c->weight.shape());
        c->bias = Tensor(c->bias.shape());
      } else if (auto* f = std::get_if<FcParams>(&l.params)) {
        f->weight = Tensor(f->weight.shape());
        f->bias = Tensor(f->bias.shape());
      }
    }
    return ModelGraph(std::move(copy), output_);
  }

  // Reachable from `from` following consumer edges, excluding `from`.
  std::vector<LayerId> descendants(LayerId from) const {
    std::vector<bool> seen(layers_.size(), false);
    std::vector<LayerId> stack{from};
    while (!stack.empty()) {
      LayerId cur = stack.back();
      stack.pop_back();
      for (LayerId c : consumers(cur)) {
        std::size_t p = position(c);
        if (!seen[p]) {
          seen[p] = true;
          stack.push_back(c);
        }
      }
    }
    std::vector<LayerId> out;
    for (LayerId id : order_) {
      if (seen[position(id)]) out.push_back(id);
    }
    return out;
  }

 private:
  [[noreturn]] static void fail(const LayerSpec& l, const std::string& msg) {
    throw StructuralError("layer " + std::to_string(l.id) + " (" + to_string(l.kind) + "): " + msg);
  }

  void index_layers() {
    if (layers_.empty()) throw StructuralError("model has no layers");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (!position_.emplace(layers_[i].id, i).second) {
        throw StructuralError("duplicate layer id " + std::to_string(layers_[i].id));
      }
    }
    consumers_.assign(layers_.size(), {});
    std::size_t inputs = 0;
    for (const LayerSpec& l : layers_) {
      if (l.kind == LayerKind::Input) {
        ++inputs;
        input_ = l.id;
      }
      for (LayerId src : l.inputs) {
        if (!position_.count(src)) fail(l, "references unknown layer " + std::to_string(src));
        consumers_[position_.at(src)].push_back(l.id);
      }
    }
    if (inputs != 1) throw StructuralError("model needs exactly one Input layer");
  }

  void topological_sort() {
    std::vector<std::size_t> pending(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) pending[i] = layers_[i].inputs.size();
    std::vector<bool> done(layers_.size(), false);
    while (order_.size() < layers_.size()) {
      bool progressed = false;
      for (std::size_t i = 0; i < layers_.size(); ++i) {
        if (done[i] || pending[i] != 0) continue;
        done[i] = true;
        progressed = true;
        order_.push_back(layers_[i].id);
        for (LayerId c : consumers_[i]) {
          // an edge listed twice (Add(x, x)) decrements twice, matching its in-degree
          --pending[position_.at(c)];
        }
      }
      if (!progressed) throw StructuralError("model graph contains a cycle");
    }
  }

  void infer_shapes() {
    in_shape_.assign(layers_.size(), {});
    out_shape_.assign(layers_.size(), {});
    for (LayerId id : order_) {
      const std::size_t p = position_.at(id);
      const LayerSpec& l = layers_[p];
      const Shape in = l.inputs.empty() ? Shape{} : out_shape_[position_.at(l.inputs.front())];
      in_shape_[p] = in;
      switch (l.kind) {
        case LayerKind::Input: {
          if (!l.inputs.empty()) fail(l, "Input takes no predecessors");
          const auto* ip = std::get_if<InputParams>(&l.params);
          if (!ip || ip->shape.empty() || shape_size(ip->shape) == 0) fail(l, "missing input shape");
          out_shape_[p] = ip->shape;
          break;
        }
        case LayerKind::Convolution: {
          if (l.inputs.size() != 1) fail(l, "needs exactly one predecessor");
          const auto* cp = std::get_if<ConvParams>(&l.params);
          if (!cp || cp->weight.rank() != 4) fail(l, "weight must be [n_out, n_in, k_h, k_w]");
          if (cp->bias.shape() != Shape{cp->out_channels()}) fail(l, "bias must be [n_out]");
          if (in.size() != 3 || in[0] != cp->in_channels()) {
            fail(l, "input " + shape_string(in) + " does not match n_in=" + std::to_string(cp->in_channels()));
          }
          if (cp->kernel_h() % 2 == 0 || cp->kernel_w() % 2 == 0) fail(l, "kernels must be odd");
          if (cp->pad_h != (cp->kernel_h() - 1) / 2 || cp->pad_w != (cp->kernel_w() - 1) / 2) {
            fail(l, "padding must be (k-1)/2");
          }
          out_shape_[p] = {cp->out_channels(), in[1], in[2]};
          break;
        }
        case LayerKind::FullyConnected: {
          if (l.inputs.size() != 1) fail(l, "needs exactly one predecessor");
          const auto* fp = std::get_if<FcParams>(&l.params);
          if (!fp || fp->weight.rank() != 2) fail(l, "weight must be [n_out, n_in]");
          if (fp->bias.shape() != Shape{fp->out_features()}) fail(l, "bias must be [n_out]");
          if (shape_size(in) != fp->in_features()) {
            fail(l, "input " + shape_string(in) + " does not match n_in=" + std::to_string(fp->in_features()));
          }
          out_shape_[p] = {fp->out_features()};
          break;
        }
        case LayerKind::ReLU:
          if (l.inputs.size() != 1) fail(l, "needs exactly one predecessor");
          out_shape_[p] = in;
          break;
        case LayerKind::MaxPoolReLU: {
          if (l.inputs.size() != 1) fail(l, "needs exactly one predecessor");
          const auto* pp = std::get_if<PoolParams>(&l.params);
          if (!pp) fail(l, "missing pool parameters");
          if (in.size() != 3) fail(l, "pooling needs a [C, H, W] input");
          if (pp->kernel_h == 0 || pp->kernel_w == 0 || pp->stride_h == 0 || pp->stride_w == 0) {
            fail(l, "kernel and stride must be positive");
          }
          if (pp->stride_h > pp->kernel_h || pp->stride_w > pp->kernel_w) {
            fail(l, "stride larger than kernel drops inputs");
          }
          if (in[1] < pp->kernel_h || in[2] < pp->kernel_w || (in[1] - pp->kernel_h) % pp->stride_h != 0 ||
              (in[2] - pp->kernel_w) % pp->stride_w != 0) {
            fail(l, "spatial size " + shape_string(in) + " does not tile with the pool window");
          }
          out_shape_[p] = {in[0], (in[1] - pp->kernel_h) / pp->stride_h + 1,
                           (in[2] - pp->kernel_w) / pp->stride_w + 1};
          break;
        }
        case LayerKind::Add: {
          if (l.inputs.size() != 2) fail(l, "needs exactly two predecessors");
          const Shape& other = out_shape_[position_.at(l.inputs[1])];
          if (in != other) fail(l, "branch shapes differ: " + shape_string(in) + " vs " + shape_string(other));
          out_shape_[p] = in;
          break;
        }
        case LayerKind::Argmax:
          if (l.inputs.size() != 1) fail(l, "needs exactly one predecessor");
          if (in.size() != 1 || in[0] < 2) fail(l, "needs a vector of at least two logits");
          out_shape_[p] = {1};
          break;
      }
    }
  }

  // Every non-linear layer reads exactly one linear output (possibly through an
  // Add with a skip); two linear layers are never adjacent.
  void check_topology() {
    std::size_t argmaxes = 0;
    for (const LayerSpec& l : layers_) {
      const std::size_t p = position_.at(l.id);
      auto kind_of = [&](LayerId id) { return layers_[position_.at(id)].kind; };
      auto linear_inputs = [&](const LayerSpec& add) {
        return std::count_if(add.inputs.begin(), add.inputs.end(),
                             [&](LayerId id) { return is_linear(kind_of(id)); });
      };
      switch (l.kind) {
        case LayerKind::Input:
          for (LayerId c : consumers_[p]) {
            if (!is_linear(kind_of(c))) fail(l, "Input may only feed Convolution or FullyConnected");
          }
          break;
        case LayerKind::Convolution:
        case LayerKind::FullyConnected: {
          const LayerSpec& src = layers_[position_.at(l.inputs.front())];
          if (is_linear(src.kind)) fail(l, "adjacent linear layers must be merged by the model author");
          if (src.kind == LayerKind::Argmax) fail(l, "Argmax is terminal");
          if (src.kind == LayerKind::Add && linear_inputs(src) != 0) {
            fail(l, "adjacent linear layers must be merged by the model author");
          }
          if (consumers_[p].size() != 1) fail(l, "linear output must have exactly one consumer");
          const LayerKind next = kind_of(consumers_[p].front());
          if (is_linear(next)) fail(l, "adjacent linear layers must be merged by the model author");
          if (next == LayerKind::MaxPoolReLU && l.kind == LayerKind::FullyConnected) {
            fail(l, "FullyConnected output cannot be pooled");
          }
          break;
        }
        case LayerKind::ReLU:
        case LayerKind::MaxPoolReLU:
        case LayerKind::Argmax: {
          const LayerSpec& src = layers_[position_.at(l.inputs.front())];
          if (l.kind == LayerKind::Argmax) {
            ++argmaxes;
            if (src.kind != LayerKind::FullyConnected) fail(l, "Argmax must follow a FullyConnected layer");
            if (!consumers_[p].empty()) fail(l, "Argmax must be terminal");
            if (l.id != output_) fail(l, "Argmax must be the model output");
          } else if (!is_linear(src.kind) && !(src.kind == LayerKind::Add && linear_inputs(src) == 1)) {
            fail(l, "non-linear layer must be preceded by a linear layer");
          }
          if (l.kind != LayerKind::Argmax && consumers_[p].empty()) fail(l, "dangling layer");
          break;
        }
        case LayerKind::Add: {
          for (LayerId src : l.inputs) {
            const LayerKind k = kind_of(src);
            if (k != LayerKind::ReLU && k != LayerKind::MaxPoolReLU && !is_linear(k)) {
              fail(l, "Add branches must be linear or non-linear layer outputs");
            }
          }
          if (linear_inputs(l) > 1) fail(l, "at most one Add branch may be a linear layer");
          if (consumers_[p].size() != 1) fail(l, "Add output must have exactly one consumer");
          const LayerKind next = kind_of(consumers_[p].front());
          if (linear_inputs(l) == 1 ? !is_nonlinear(next) || next == LayerKind::Argmax : !is_linear(next)) {
            fail(l, "Add must sit between a linear layer and a non-linear layer");
          }
          break;
        }
      }
    }
    if (argmaxes != 1) throw StructuralError("model needs exactly one Argmax output");
    if (!position_.count(output_) || layers_[position_.at(output_)].kind != LayerKind::Argmax) {
      throw StructuralError("output must be the Argmax layer");
    }
  }

  std::vector<LayerSpec> layers_;
  LayerId output_;
  LayerId input_ = 0;
  std::map<LayerId, std::size_t> position_;
  std::vector<LayerId> order_;
  std::vector<std::vector<LayerId>> consumers_;
  std::vector<Shape> in_shape_;
  std::vector<Shape> out_shape_;
};

}  // namespace seek
