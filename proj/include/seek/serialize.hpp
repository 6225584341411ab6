#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "seek/model.hpp"

namespace seek {

using json = nlohmann::json;

namespace detail {

inline json nest(const Tensor& t, std::size_t axis, std::size_t offset, std::size_t stride) {
  const std::size_t n = t.dim(axis);
  json arr = json::array();
  if (axis + 1 == t.rank()) {
    for (std::size_t i = 0; i < n; ++i) arr.push_back(t[offset + i]);
    return arr;
  }
  const std::size_t inner = stride / n;
  for (std::size_t i = 0; i < n; ++i) arr.push_back(nest(t, axis + 1, offset + i * inner, inner));
  return arr;
}

inline void flatten(const json& j, Shape& shape, std::size_t depth, std::vector<double>& out) {
  if (!j.is_array()) {
    if (!j.is_number()) throw StructuralError("tensor entries must be numbers");
    if (depth != shape.size()) throw StructuralError("ragged tensor array");
    out.push_back(j.get<double>());
    return;
  }
  if (depth == shape.size()) {
    if (j.empty()) throw StructuralError("tensor arrays must be non-empty");
    shape.push_back(j.size());
  } else if (depth > shape.size() || shape[depth] != j.size()) {
    throw StructuralError("ragged tensor array");
  }
  for (const json& e : j) flatten(e, shape, depth + 1, out);
}

}  // namespace detail

inline json tensor_to_json(const Tensor& t) { return detail::nest(t, 0, 0, t.size()); }

inline Tensor tensor_from_json(const json& j) {
  Shape shape;
  std::vector<double> values;
  detail::flatten(j, shape, 0, values);
  if (shape.empty()) throw StructuralError("tensor must be an array");
  if (values.size() != shape_size(shape)) throw StructuralError("ragged tensor array");
  return Tensor(std::move(shape), std::move(values));
}

inline json model_to_json(const ModelGraph& model) {
  json layers = json::array();
  for (const LayerSpec& l : model.layers()) {
    json params = json::object();
    switch (l.kind) {
      case LayerKind::Input:
        params["shape"] = l.input().shape;
        break;
      case LayerKind::Convolution:
        params["weight"] = tensor_to_json(l.conv().weight);
        params["bias"] = tensor_to_json(l.conv().bias);
        params["stride"] = 1;
        params["padding"] = {l.conv().pad_h, l.conv().pad_w};
        break;
      case LayerKind::FullyConnected:
        params["weight"] = tensor_to_json(l.fc().weight);
        params["bias"] = tensor_to_json(l.fc().bias);
        break;
      case LayerKind::MaxPoolReLU:
        params["kernel"] = {l.pool().kernel_h, l.pool().kernel_w};
        params["stride"] = {l.pool().stride_h, l.pool().stride_w};
        break;
      default:
        break;
    }
    layers.push_back({{"id", l.id}, {"kind", to_string(l.kind)}, {"inputs", l.inputs}, {"params", params}});
  }
  return {{"layers", layers}, {"output", model.output_id()}};
}

inline ModelGraph model_from_json(const json& doc) {
  try {
    std::vector<LayerSpec> layers;
    for (const json& jl : doc.at("layers")) {
      LayerSpec l;
      l.id = jl.at("id").get<LayerId>();
      l.kind = layer_kind_from_string(jl.at("kind").get<std::string>());
      l.inputs = jl.value("inputs", std::vector<LayerId>{});
      const json params = jl.value("params", json::object());
      switch (l.kind) {
        case LayerKind::Input:
          l.params = InputParams{params.at("shape").get<Shape>()};
          break;
        case LayerKind::Convolution: {
          if (params.value("stride", 1) != 1) throw StructuralError("only stride-1 convolutions are supported");
          ConvParams p;
          p.weight = tensor_from_json(params.at("weight"));
          p.bias = tensor_from_json(params.at("bias"));
          const auto pad = params.at("padding");
          if (pad.is_array()) {
            p.pad_h = pad.at(0).get<std::size_t>();
            p.pad_w = pad.at(1).get<std::size_t>();
          } else {
            p.pad_h = p.pad_w = pad.get<std::size_t>();
          }
          l.params = std::move(p);
          break;
        }
        case LayerKind::FullyConnected: {
          FcParams p;
          p.weight = tensor_from_json(params.at("weight"));
          p.bias = tensor_from_json(params.at("bias"));
          l.params = std::move(p);
          break;
        }
        case LayerKind::MaxPoolReLU: {
          const auto k = params.at("kernel").get<std::vector<std::size_t>>();
          const auto s = params.at("stride").get<std::vector<std::size_t>>();
          if (k.size() != 2 || s.size() != 2) throw StructuralError("pool kernel/stride must be pairs");
          l.params = PoolParams{k[0], k[1], s[0], s[1]};
          break;
        }
        default:
          break;
      }
      layers.push_back(std::move(l));
    }
    return ModelGraph(std::move(layers), doc.at("output").get<LayerId>());
  } catch (const json::exception& e) {
    throw StructuralError(std::string("malformed model document: ") + e.what());
  }
}

inline void save_json(const std::string& path, const json& doc) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << doc.dump(1) << '\n';
}

inline json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw StructuralError("malformed JSON in " + path + ": " + e.what());
  }
}

inline void save_model(const std::string& path, const ModelGraph& model) { save_json(path, model_to_json(model)); }
inline ModelGraph load_model(const std::string& path) { return model_from_json(load_json(path)); }

}  // namespace seek
