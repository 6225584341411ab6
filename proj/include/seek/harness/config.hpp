#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "seek/arch.hpp"
#include "seek/extraction/config.hpp"
#include "seek/oracle.hpp"
#include "seek/serialize.hpp"

namespace seek::harness {

enum class Backend { InProcess, Protocol, Endpoint };

inline std::string to_string(Backend b) {
  switch (b) {
    case Backend::InProcess: return "in-process";
    case Backend::Protocol: return "protocol";
    case Backend::Endpoint: return "endpoint";
  }
  return "?";
}

inline Backend backend_from_string(const std::string& s) {
  if (s == "in-process") return Backend::InProcess;
  if (s == "protocol") return Backend::Protocol;
  if (s == "endpoint") return Backend::Endpoint;
  throw StructuralError("unknown backend '" + s + "' (in-process, protocol, endpoint)");
}

enum class LayerOrder { Forward, Reverse, Shuffle };

inline std::string to_string(LayerOrder o) {
  switch (o) {
    case LayerOrder::Forward: return "forward";
    case LayerOrder::Reverse: return "reverse";
    case LayerOrder::Shuffle: return "shuffle";
  }
  return "?";
}

inline LayerOrder order_from_string(const std::string& s) {
  if (s == "forward") return LayerOrder::Forward;
  if (s == "reverse") return LayerOrder::Reverse;
  if (s == "shuffle") return LayerOrder::Shuffle;
  throw StructuralError("unknown layer order '" + s + "' (forward, reverse, shuffle)");
}

struct ExperimentConfig {
  // Target model: a model file, or an architecture generated from model_seed.
  std::string model_path;
  std::string arch;
  std::string input_shape;
  std::uint64_t model_seed = 0;

  Backend backend = Backend::InProcess;
  std::string endpoint;  // host:port for Backend::Endpoint
  std::uint64_t attack_seed = 0;
  // Seed for protocol mask sessions (protocol and endpoint backends).
  std::uint64_t session_seed = 0;
  double epsilon = kDefaultProbeEpsilon;
  BoundarySearchConfig search;

  std::vector<LayerId> layers;  // empty: every linear layer
  LayerOrder order = LayerOrder::Forward;
  std::uint64_t order_seed = 0;
  bool parallel = false;

  // Compare against the ground-truth model when it is known.
  bool compare = true;
  double max_error = 1e-4;
  double median_error = 1e-6;

  std::string report_path;
  std::string csv_path;
  std::string extracted_path;

  void validate() const {
    if (model_path.empty() && arch.empty()) throw StructuralError("config: give a model file or an architecture");
    if (!arch.empty() && input_shape.empty()) throw StructuralError("config: architecture needs an input shape");
    if (backend == Backend::Endpoint && endpoint.empty()) throw StructuralError("config: endpoint backend needs host:port");
    if (backend == Backend::Endpoint && model_path.empty() && compare) {
      throw StructuralError("config: comparing an endpoint run needs the ground-truth model file");
    }
    if (!(epsilon > 0.0)) throw StructuralError("config: epsilon must be positive");
    if (!(max_error > 0.0) || !(median_error > 0.0)) throw StructuralError("config: thresholds must be positive");
    search.validate();
  }
};

inline json search_to_json(const BoundarySearchConfig& c) {
  json j{{"sphere_norm", c.sphere_norm},
         {"sphere_tolerance", c.sphere_tolerance},
         {"max_samples", c.max_samples},
         {"eta_tolerance", c.eta_tolerance},
         {"eta_max", c.eta_max},
         {"sign_probe", c.sign_probe},
         {"max_retries", c.max_retries},
         {"suppression", c.suppression},
         {"feature_bound", c.feature_bound},
         {"jitter", c.jitter},
         {"repeats", c.repeats}};
  j["conv_delta"] = c.conv_delta ? json(*c.conv_delta) : json(nullptr);
  j["fc_delta"] = c.fc_delta ? json(*c.fc_delta) : json(nullptr);
  return j;
}

// Unknown keys are rejected so that typos don't silently fall back to defaults.
inline void reject_unknown_keys(const json& j, const std::vector<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw StructuralError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw StructuralError(where + ": unknown key '" + key + "'");
    }
  }
}

inline void search_from_json(const json& j, BoundarySearchConfig& c) {
  static const std::vector<std::string> known{
      "sphere_norm", "sphere_tolerance", "max_samples", "eta_tolerance", "eta_max",    "sign_probe", "max_retries",
      "suppression", "feature_bound",    "jitter",      "repeats",       "conv_delta", "fc_delta"};
  reject_unknown_keys(j, known, "config.search");
  c.sphere_norm = j.value("sphere_norm", c.sphere_norm);
  c.sphere_tolerance = j.value("sphere_tolerance", c.sphere_tolerance);
  c.max_samples = j.value("max_samples", c.max_samples);
  c.eta_tolerance = j.value("eta_tolerance", c.eta_tolerance);
  c.eta_max = j.value("eta_max", c.eta_max);
  c.sign_probe = j.value("sign_probe", c.sign_probe);
  c.max_retries = j.value("max_retries", c.max_retries);
  c.suppression = j.value("suppression", c.suppression);
  c.feature_bound = j.value("feature_bound", c.feature_bound);
  c.jitter = j.value("jitter", c.jitter);
  c.repeats = j.value("repeats", c.repeats);
  if (j.contains("conv_delta") && !j["conv_delta"].is_null()) c.conv_delta = j["conv_delta"].get<double>();
  if (j.contains("fc_delta") && !j["fc_delta"].is_null()) c.fc_delta = j["fc_delta"].get<double>();
}

inline json config_to_json(const ExperimentConfig& c) {
  return json{{"model", c.model_path},
              {"arch", c.arch},
              {"input_shape", c.input_shape},
              {"model_seed", c.model_seed},
              {"backend", to_string(c.backend)},
              {"endpoint", c.endpoint},
              {"attack_seed", c.attack_seed},
              {"session_seed", c.session_seed},
              {"epsilon", c.epsilon},
              {"search", search_to_json(c.search)},
              {"layers", c.layers},
              {"order", to_string(c.order)},
              {"order_seed", c.order_seed},
              {"parallel", c.parallel},
              {"compare", c.compare},
              {"max_error", c.max_error},
              {"median_error", c.median_error},
              {"report", c.report_path},
              {"csv", c.csv_path},
              {"extracted", c.extracted_path}};
}

inline ExperimentConfig config_from_json(const json& j) {
  static const std::vector<std::string> known{
      "model",  "arch",   "input_shape", "model_seed", "backend", "endpoint",  "attack_seed",
      "session_seed", "epsilon", "search", "layers", "order", "order_seed", "parallel",
      "compare", "max_error", "median_error", "report", "csv", "extracted"};
  try {
    reject_unknown_keys(j, known, "config");
    ExperimentConfig c;
    c.model_path = j.value("model", c.model_path);
    c.arch = j.value("arch", c.arch);
    c.input_shape = j.value("input_shape", c.input_shape);
    c.model_seed = j.value("model_seed", c.model_seed);
    if (j.contains("backend")) c.backend = backend_from_string(j["backend"].get<std::string>());
    c.endpoint = j.value("endpoint", c.endpoint);
    c.attack_seed = j.value("attack_seed", c.attack_seed);
    c.session_seed = j.value("session_seed", c.session_seed);
    c.epsilon = j.value("epsilon", c.epsilon);
    if (j.contains("search")) search_from_json(j["search"], c.search);
    c.layers = j.value("layers", c.layers);
    if (j.contains("order")) c.order = order_from_string(j["order"].get<std::string>());
    c.order_seed = j.value("order_seed", c.order_seed);
    c.parallel = j.value("parallel", c.parallel);
    c.compare = j.value("compare", c.compare);
    c.max_error = j.value("max_error", c.max_error);
    c.median_error = j.value("median_error", c.median_error);
    c.report_path = j.value("report", c.report_path);
    c.csv_path = j.value("csv", c.csv_path);
    c.extracted_path = j.value("extracted", c.extracted_path);
    return c;
  } catch (const json::exception& e) {
    throw StructuralError(std::string("config: ") + e.what());
  }
}

inline ExperimentConfig load_config(const std::string& path) { return config_from_json(load_json(path)); }

}  // namespace seek::harness
