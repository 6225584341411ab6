#pragma once

#include <algorithm>
#include <fstream>
#include <future>
#include <iomanip>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "seek/extraction/layer.hpp"
#include "seek/harness/config.hpp"
#include "seek/harness/metrics.hpp"
#include "seek/protocol/backend.hpp"
#include "seek/serialize.hpp"

namespace seek::harness {

// Mean model calls per parameter quoted for the full-scale attack, printed next to ours.
inline constexpr double kReferenceCallsPerParameter = 45.8;

struct LayerReport {
  LayerId layer = 0;
  LayerKind kind = LayerKind::FullyConnected;
  bool gauge_fixed = false;
  std::optional<LayerExtractionResult> result;  // empty when extraction failed
  std::optional<LayerErrors> errors;
  std::string failure;
  std::uint64_t queries = 0;

  std::size_t n_bias() const { return result ? result->extracted_bias_count() : 0; }
  std::size_t n_weight() const { return result ? result->extracted_weight_count() : 0; }
  std::uint64_t bias_queries() const {
    std::uint64_t n = 0;
    if (result) {
      for (auto q : result->bias_queries) n += q;
    }
    return n;
  }
  std::uint64_t weight_queries() const { return result ? result->total_queries() - bias_queries() : 0; }
};

struct ExtractionReport {
  ExperimentConfig config;
  std::vector<LayerReport> layers;  // model order, whatever the run order was
  std::vector<LayerId> run_order;
  std::uint64_t oracle_queries = 0;  // counter delta over the whole run

  std::uint64_t total_queries() const {
    std::uint64_t n = 0;
    for (const auto& l : layers) n += l.queries;
    return n;
  }
  std::size_t total_parameters() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.n_bias() + l.n_weight();
    return n;
  }
  double calls_per_parameter() const {
    const std::size_t n = total_parameters();
    return n ? static_cast<double>(total_queries()) / static_cast<double>(n) : 0.0;
  }
  bool all_extracted() const {
    return std::all_of(layers.begin(), layers.end(), [](const LayerReport& l) { return l.result.has_value(); });
  }
  std::size_t dead_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) {
      if (l.result) n += l.result->count_flag(kParamDead);
    }
    return n;
  }
  std::optional<ErrorStats> overall_errors() const {
    std::vector<double> all;
    bool any = false;
    for (const auto& l : layers) {
      if (!l.errors) continue;
      any = true;
      all.insert(all.end(), l.errors->bias_errors.begin(), l.errors->bias_errors.end());
      all.insert(all.end(), l.errors->weight_errors.begin(), l.errors->weight_errors.end());
    }
    if (!any) return std::nullopt;
    return ErrorStats::of(std::move(all));
  }
  // Thresholds hold over every compared parameter, nothing failed, nothing dead.
  bool passed() const {
    if (!all_extracted() || dead_count() > 0) return false;
    const auto e = overall_errors();
    return !e || (e->max <= config.max_error && e->median <= config.median_error);
  }
};

struct Target {
  std::shared_ptr<const ModelGraph> truth;  // null when unknown to the attacker run
  std::shared_ptr<const ModelGraph> arch;   // zero parameters
};

inline Target load_target(const ExperimentConfig& c) {
  Target t;
  if (!c.model_path.empty()) {
    t.truth = std::make_shared<ModelGraph>(load_model(c.model_path));
  } else if (c.backend != Backend::Endpoint) {
    t.truth = std::make_shared<ModelGraph>(random_model(c.arch, parse_shape(c.input_shape), c.model_seed));
  }
  t.arch = std::make_shared<ModelGraph>(t.truth ? t.truth->strip_parameters()
                                                : build_architecture(c.arch, parse_shape(c.input_shape)));
  return t;
}

inline std::shared_ptr<OracleBackend> make_backend(const ExperimentConfig& c, const Target& t) {
  switch (c.backend) {
    case Backend::InProcess: return std::make_shared<InProcessBackend>(t.truth);
    case Backend::Protocol: return std::make_shared<protocol::InMemoryProtocolBackend>(t.truth, c.session_seed);
    case Backend::Endpoint:
      return std::make_shared<protocol::EndpointBackend>(protocol::parse_endpoint(c.endpoint), c.session_seed);
  }
  throw StructuralError("unknown backend");
}

inline std::vector<LayerId> attack_order(const ExperimentConfig& c, const ModelGraph& arch) {
  std::vector<LayerId> all = linear_layers(arch);
  std::vector<LayerId> ids;
  if (c.layers.empty()) {
    ids = all;
  } else {
    for (LayerId id : c.layers) {
      if (std::find(all.begin(), all.end(), id) == all.end()) {
        throw StructuralError("layer " + std::to_string(id) + " is not a linear layer of the model");
      }
      if (std::find(ids.begin(), ids.end(), id) == ids.end()) ids.push_back(id);
    }
    std::sort(ids.begin(), ids.end(), [&](LayerId a, LayerId b) { return arch.position(a) < arch.position(b); });
  }
  if (c.order == LayerOrder::Reverse) std::reverse(ids.begin(), ids.end());
  if (c.order == LayerOrder::Shuffle) {
    std::mt19937_64 rng(c.order_seed);
    std::shuffle(ids.begin(), ids.end(), rng);
  }
  return ids;
}

inline LayerReport attack_layer(OracleHandle& oracle, const ModelGraph& arch, const ModelGraph* truth, LayerId id,
                                const BoundarySearchConfig& cfg) {
  LayerReport rep;
  rep.layer = id;
  rep.kind = arch.layer(id).kind;
  rep.gauge_fixed = id == arch.last_linear_id();
  const std::uint64_t before = oracle.count();
  try {
    rep.result = extract_layer(oracle, arch, id, cfg);
    if (truth) rep.errors = compare_result(*rep.result, *truth);
  } catch (const std::exception& e) {
    rep.result.reset();
    rep.failure = e.what();
  }
  rep.queries = oracle.count() - before;
  return rep;
}

// Runs the configured attack against a prepared oracle.
inline ExtractionReport run_attack(const ExperimentConfig& c, const Target& t, OracleHandle& oracle) {
  c.validate();
  BoundarySearchConfig cfg = c.search;
  cfg.seed = c.attack_seed;
  ExtractionReport report;
  report.config = c;
  report.run_order = attack_order(c, *t.arch);
  const ModelGraph* truth = c.compare ? t.truth.get() : nullptr;
  const std::uint64_t start = oracle.count();

  std::vector<LayerReport> done;
  if (c.parallel) {
    std::vector<std::unique_ptr<OracleHandle>> handles;
    std::vector<std::future<LayerReport>> jobs;
    for (LayerId id : report.run_order) {
      handles.push_back(oracle.fork());
      OracleHandle* h = handles.back().get();
      jobs.push_back(std::async(std::launch::async, [h, &t, truth, id, &cfg] {
        return attack_layer(*h, *t.arch, truth, id, cfg);
      }));
    }
    for (auto& j : jobs) done.push_back(j.get());
    std::uint64_t sum = 0;
    for (const auto& h : handles) sum += h->count();
    report.oracle_queries = sum;
  } else {
    for (LayerId id : report.run_order) done.push_back(attack_layer(oracle, *t.arch, truth, id, cfg));
    report.oracle_queries = oracle.count() - start;
  }
  std::sort(done.begin(), done.end(), [&](const LayerReport& a, const LayerReport& b) {
    return t.arch->position(a.layer) < t.arch->position(b.layer);
  });
  report.layers = std::move(done);
  return report;
}

inline ExtractionReport run_attack(const ExperimentConfig& c) {
  c.validate();
  const Target t = load_target(c);
  OracleHandle oracle(make_backend(c, t), t.arch->output_id(), c.epsilon);
  return run_attack(c, t, oracle);
}

namespace detail {

inline json stats_json(const ErrorStats& s) {
  return json{{"count", s.count}, {"mean", s.mean}, {"median", s.median}, {"max", s.max}};
}

inline double per(std::uint64_t q, std::size_t n) {
  return n ? static_cast<double>(q) / static_cast<double>(n) : 0.0;
}

}  // namespace detail

inline json report_to_json(const ExtractionReport& r) {
  json layers = json::array();
  for (const auto& l : r.layers) {
    json j{{"layer", l.layer},
           {"kind", to_string(l.kind)},
           {"gauge_fixed", l.gauge_fixed},
           {"extracted", l.result.has_value()},
           {"queries", l.queries},
           {"n_bias_params", l.n_bias()},
           {"n_weight_params", l.n_weight()},
           {"N_bias", detail::per(l.bias_queries(), l.n_bias())},
           {"N_weight", detail::per(l.weight_queries(), l.n_weight())}};
    if (l.result) {
      j["dead"] = l.result->count_flag(kParamDead);
      j["retried"] = l.result->count_flag(kParamRetried);
    } else {
      j["failure"] = l.failure;
    }
    if (l.errors) {
      j["e_bias"] = l.errors->bias.mean;
      j["e_weight"] = l.errors->weight.mean;
      j["bias_error"] = detail::stats_json(l.errors->bias);
      j["weight_error"] = detail::stats_json(l.errors->weight);
    }
    layers.push_back(std::move(j));
  }
  json totals{{"queries", r.total_queries()},
              {"oracle_queries", r.oracle_queries},
              {"parameters", r.total_parameters()},
              {"calls_per_parameter", r.calls_per_parameter()},
              {"reference_calls_per_parameter", kReferenceCallsPerParameter},
              {"dead", r.dead_count()}};
  if (const auto e = r.overall_errors()) totals["error"] = detail::stats_json(*e);
  json flags{{"all_extracted", r.all_extracted()},
             {"accounting_consistent", r.total_queries() == r.oracle_queries},
             {"passed", r.passed()}};
  return json{{"config", config_to_json(r.config)},
              {"run_order", r.run_order},
              {"layers", std::move(layers)},
              {"totals", std::move(totals)},
              {"flags", std::move(flags)}};
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

// One row per layer: the four per-layer series plus counts.
inline std::string report_csv(const ExtractionReport& r) {
  std::ostringstream os;
  os << "layer,kind,gauge_fixed,n_bias_params,n_weight_params,N_bias,N_weight,e_bias,e_weight,max_e_bias,"
        "max_e_weight,queries,dead,status\n";
  for (const auto& l : r.layers) {
    os << l.layer << ',' << to_string(l.kind) << ',' << (l.gauge_fixed ? 1 : 0) << ',' << l.n_bias() << ','
       << l.n_weight() << ',' << format_double(detail::per(l.bias_queries(), l.n_bias())) << ','
       << format_double(detail::per(l.weight_queries(), l.n_weight())) << ',';
    if (l.errors) {
      os << format_double(l.errors->bias.mean) << ',' << format_double(l.errors->weight.mean) << ','
         << format_double(l.errors->bias.max) << ',' << format_double(l.errors->weight.max);
    } else {
      os << ",,,";
    }
    os << ',' << l.queries << ',' << (l.result ? l.result->count_flag(kParamDead) : 0) << ','
       << (l.result ? "ok" : "failed") << '\n';
  }
  return os.str();
}

// The architecture with extracted parameters filled in, plus which layers were
// extracted and under what gauge.
inline json extracted_model_json(const ModelGraph& arch, const ExtractionReport& r) {
  std::vector<LayerSpec> layers = arch.layers();
  json meta = json::array();
  for (const auto& l : r.layers) {
    json m{{"layer", l.layer}, {"extracted", l.result.has_value()}, {"gauge_fixed", l.gauge_fixed}};
    if (l.result) {
      LayerSpec& spec = layers[arch.position(l.layer)];
      if (auto* cp = std::get_if<ConvParams>(&spec.params)) {
        cp->weight = l.result->weight;
        cp->bias = l.result->bias;
      } else if (auto* fp = std::get_if<FcParams>(&spec.params)) {
        fp->weight = l.result->weight;
        fp->bias = l.result->bias;
      }
      std::vector<std::size_t> dead_b, dead_w;
      for (std::size_t i = 0; i < l.result->bias_flags.size(); ++i) {
        if (l.result->bias_flags[i] & kParamDead) dead_b.push_back(i);
      }
      for (std::size_t i = 0; i < l.result->weight_flags.size(); ++i) {
        if (l.result->weight_flags[i] & kParamDead) dead_w.push_back(i);
      }
      m["dead_bias"] = dead_b;
      m["dead_weight"] = dead_w;
    }
    meta.push_back(std::move(m));
  }
  json doc = model_to_json(ModelGraph(std::move(layers), arch.output_id()));
  doc["extraction"] = json{{"gauge", "last layer reported as b - b[0] and w - w[0,:]"}, {"layers", std::move(meta)}};
  return doc;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw StructuralError("cannot write " + path);
  out << text;
}

inline void write_outputs(const ExtractionReport& r, const ModelGraph& arch) {
  if (!r.config.report_path.empty()) save_json(r.config.report_path, report_to_json(r));
  if (!r.config.csv_path.empty()) write_text(r.config.csv_path, report_csv(r));
  if (!r.config.extracted_path.empty()) save_json(r.config.extracted_path, extracted_model_json(arch, r));
}

struct VerifyRow {
  LayerId layer = 0;
  LayerKind kind = LayerKind::FullyConnected;
  bool gauge_fixed = false;
  LayerErrors errors;
};

struct VerifyResult {
  std::vector<VerifyRow> rows;
  ErrorStats overall;
  bool passed = false;
};

// Which layers of `extracted` to compare, and whether each is gauge-fixed.
// A plain model file (no extraction section) is compared in full, the layer
// feeding the Argmax under the gauge.
inline VerifyResult verify_models(const json& extracted_doc, const ModelGraph& truth, double max_error,
                                  double median_error) {
  const ModelGraph extracted = model_from_json(extracted_doc);
  struct Item {
    LayerId layer;
    bool gauge;
    std::vector<std::size_t> dead_b, dead_w;
  };
  std::vector<Item> items;
  if (extracted_doc.contains("extraction")) {
    try {
      for (const json& m : extracted_doc.at("extraction").at("layers")) {
        if (!m.at("extracted").get<bool>()) continue;
        items.push_back(Item{m.at("layer").get<LayerId>(), m.at("gauge_fixed").get<bool>(),
                             m.value("dead_bias", std::vector<std::size_t>{}),
                             m.value("dead_weight", std::vector<std::size_t>{})});
      }
    } catch (const json::exception& e) {
      throw StructuralError(std::string("extraction metadata: ") + e.what());
    }
  } else {
    for (LayerId id : linear_layers(extracted)) items.push_back(Item{id, id == extracted.last_linear_id(), {}, {}});
  }
  VerifyResult out;
  std::vector<double> all;
  for (const Item& it : items) {
    if (!truth.contains(it.layer) || !extracted.contains(it.layer) ||
        truth.layer(it.layer).kind != extracted.layer(it.layer).kind) {
      throw StructuralError("layer " + std::to_string(it.layer) + " does not match between the two models");
    }
    const LayerSpec& e = extracted.layer(it.layer);
    const LayerSpec& t = truth.layer(it.layer);
    std::vector<std::uint8_t> skip_b(layer_bias(e).size(), 0), skip_w(layer_weight(e).size(), 0);
    for (std::size_t i : it.dead_b) skip_b.at(i) = 1;
    for (std::size_t i : it.dead_w) skip_w.at(i) = 1;
    VerifyRow row{it.layer, e.kind, it.gauge,
                  compare_layer(layer_bias(e), layer_weight(e), layer_bias(t), layer_weight(t), it.gauge, skip_b,
                                skip_w)};
    all.insert(all.end(), row.errors.bias_errors.begin(), row.errors.bias_errors.end());
    all.insert(all.end(), row.errors.weight_errors.begin(), row.errors.weight_errors.end());
    out.rows.push_back(std::move(row));
  }
  out.overall = ErrorStats::of(std::move(all));
  out.passed = out.overall.max <= max_error && out.overall.median <= median_error;
  return out;
}

}  // namespace seek::harness
