// Command-line front end: gen-model, attack, verify, serve.

#include <csignal>
#include <chrono>
#include <cstdio>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "seek/arch.hpp"
#include "seek/harness/runner.hpp"
#include "seek/protocol/socket.hpp"
#include "seek/serialize.hpp"

namespace {

using namespace seek;

constexpr int kExitPass = 0;
constexpr int kExitThreshold = 1;
constexpr int kExitError = 2;

volatile std::sig_atomic_t g_stop = 0;

void on_signal(int) { g_stop = 1; }

struct GenArgs {
  std::string arch;
  std::string input = "3x8x8";
  std::uint64_t seed = 0;
  std::string out;
};

int gen_model(const GenArgs& a) {
  const ModelGraph m = random_model(a.arch, parse_shape(a.input), a.seed);
  save_model(a.out, m);
  std::cout << "parameters: " << m.parameter_count() << "\n";
  return kExitPass;
}

// Flags given on the command line override the config file.
struct AttackArgs {
  std::string config;
  std::optional<std::string> model, arch, input, backend, endpoint, report, csv, extracted, order;
  std::optional<std::uint64_t> model_seed, attack_seed, session_seed, order_seed;
  std::optional<double> epsilon, eta_tolerance, sphere_norm, suppression;
  std::optional<std::size_t> repeats;
  std::vector<LayerId> layers;
  bool parallel = false;
  bool no_compare = false;
};

harness::ExperimentConfig build_config(const AttackArgs& a) {
  harness::ExperimentConfig c = a.config.empty() ? harness::ExperimentConfig{} : harness::load_config(a.config);
  if (a.model) c.model_path = *a.model;
  if (a.arch) c.arch = *a.arch;
  if (a.input) c.input_shape = *a.input;
  if (a.backend) c.backend = harness::backend_from_string(*a.backend);
  if (a.endpoint) c.endpoint = *a.endpoint;
  if (a.report) c.report_path = *a.report;
  if (a.csv) c.csv_path = *a.csv;
  if (a.extracted) c.extracted_path = *a.extracted;
  if (a.order) c.order = harness::order_from_string(*a.order);
  if (a.model_seed) c.model_seed = *a.model_seed;
  if (a.attack_seed) c.attack_seed = *a.attack_seed;
  if (a.session_seed) c.session_seed = *a.session_seed;
  if (a.order_seed) c.order_seed = *a.order_seed;
  if (a.epsilon) c.epsilon = *a.epsilon;
  if (a.eta_tolerance) c.search.eta_tolerance = *a.eta_tolerance;
  if (a.sphere_norm) c.search.sphere_norm = *a.sphere_norm;
  if (a.suppression) c.search.suppression = *a.suppression;
  if (a.repeats) c.search.repeats = *a.repeats;
  if (!a.layers.empty()) c.layers = a.layers;
  if (a.parallel) c.parallel = true;
  if (a.no_compare) c.compare = false;
  c.validate();
  return c;
}

void print_report(const harness::ExtractionReport& r) {
  std::printf("%-6s %-15s %8s %8s %10s %10s %11s %11s %s\n", "layer", "kind", "n_bias", "n_weight", "N_bias",
              "N_weight", "e_bias", "e_weight", "status");
  for (const auto& l : r.layers) {
    std::printf("%-6u %-15s %8zu %8zu %10.2f %10.2f ", l.layer, to_string(l.kind), l.n_bias(), l.n_weight(),
                l.n_bias() ? double(l.bias_queries()) / double(l.n_bias()) : 0.0,
                l.n_weight() ? double(l.weight_queries()) / double(l.n_weight()) : 0.0);
    if (l.errors) {
      std::printf("%11.3e %11.3e ", l.errors->bias.mean, l.errors->weight.mean);
    } else {
      std::printf("%11s %11s ", "-", "-");
    }
    std::printf("%s%s\n", l.result ? "ok" : "failed: ", l.result ? (l.gauge_fixed ? " (gauge-fixed)" : "") : l.failure.c_str());
  }
  std::printf("queries %llu, parameters %zu, calls/parameter %.2f (reference %.1f)\n",
              static_cast<unsigned long long>(r.total_queries()), r.total_parameters(), r.calls_per_parameter(),
              harness::kReferenceCallsPerParameter);
  if (const auto e = r.overall_errors()) {
    std::printf("relative error: mean %.3e, median %.3e, max %.3e\n", e->mean, e->median, e->max);
  }
}

int attack(const AttackArgs& a) {
  const harness::ExperimentConfig c = build_config(a);
  const auto t0 = std::chrono::steady_clock::now();
  const harness::Target target = harness::load_target(c);
  OracleHandle oracle(harness::make_backend(c, target), target.arch->output_id(), c.epsilon);
  const harness::ExtractionReport r = harness::run_attack(c, target, oracle);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  harness::write_outputs(r, *target.arch);
  print_report(r);
  std::printf("wall time %.2f s\n", secs);
  if (!r.all_extracted()) return kExitError;
  return r.passed() ? kExitPass : kExitThreshold;
}

struct VerifyArgs {
  std::string extracted;
  std::string truth;
  double max_error = 1e-4;
  double median_error = 1e-6;
};

int verify(const VerifyArgs& a) {
  const harness::VerifyResult v =
      harness::verify_models(load_json(a.extracted), load_model(a.truth), a.max_error, a.median_error);
  std::printf("%-6s %-15s %6s %11s %11s %11s %11s\n", "layer", "kind", "gauge", "e_bias", "e_weight", "max_bias",
              "max_weight");
  for (const auto& row : v.rows) {
    std::printf("%-6u %-15s %6s %11.3e %11.3e %11.3e %11.3e\n", row.layer, to_string(row.kind),
                row.gauge_fixed ? "yes" : "no", row.errors.bias.mean, row.errors.weight.mean, row.errors.bias.max,
                row.errors.weight.max);
  }
  std::printf("overall: mean %.3e, median %.3e, max %.3e -> %s\n", v.overall.mean, v.overall.median, v.overall.max,
              v.passed ? "PASS" : "FAIL");
  return v.passed ? kExitPass : kExitThreshold;
}

struct ServeArgs {
  std::string model;
  std::string endpoint = "127.0.0.1:7000";
  std::uint64_t seed = 0;
  bool fixed_seed = false;
};

int serve(const ServeArgs& a) {
  auto model = std::make_shared<ModelGraph>(load_model(a.model));
  protocol::Endpoint ep = protocol::parse_endpoint(a.endpoint);
  protocol::ProtocolServer server(model, ep, protocol::SeedPolicy{a.seed, a.fixed_seed});
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::printf("serving %s on %s:%u\n", a.model.c_str(), ep.host.c_str(), server.port());
  std::fflush(stdout);
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  server.stop();
  std::printf("served %llu sessions\n", static_cast<unsigned long long>(server.sessions_started()));
  return kExitPass;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Label-only parameter extraction against a simulated private-inference service"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-model", "Write a random model for an architecture string");
  g->add_option("--arch", gen.arch, "e.g. conv8x3x3-r-fc32-r-fc4")->required();
  g->add_option("--input", gen.input, "input shape, e.g. 3x8x8");
  g->add_option("--seed", gen.seed);
  g->add_option("--out", gen.out)->required();

  AttackArgs atk;
  auto* at = app.add_subcommand("attack", "Extract parameters through a label-only oracle");
  at->add_option("--config", atk.config, "JSON experiment config");
  at->add_option("--model", atk.model, "ground-truth model file");
  at->add_option("--arch", atk.arch);
  at->add_option("--input", atk.input);
  at->add_option("--model-seed", atk.model_seed);
  at->add_option("--backend", atk.backend, "in-process | protocol | endpoint");
  at->add_option("--endpoint", atk.endpoint, "host:port");
  at->add_option("--seed", atk.attack_seed, "attack seed");
  at->add_option("--session-seed", atk.session_seed);
  at->add_option("--epsilon", atk.epsilon);
  at->add_option("--eta-tolerance", atk.eta_tolerance);
  at->add_option("--sphere-norm", atk.sphere_norm);
  at->add_option("--suppression", atk.suppression);
  at->add_option("--repeats", atk.repeats);
  at->add_option("--layers", atk.layers, "layer ids to attack");
  at->add_option("--order", atk.order, "forward | reverse | shuffle");
  at->add_option("--order-seed", atk.order_seed);
  at->add_flag("--parallel", atk.parallel, "one thread per layer");
  at->add_flag("--no-compare", atk.no_compare, "skip comparison with the ground truth");
  at->add_option("--report", atk.report, "JSON report path");
  at->add_option("--csv", atk.csv, "per-layer CSV path");
  at->add_option("--out", atk.extracted, "extracted model path");

  VerifyArgs ver;
  auto* v = app.add_subcommand("verify", "Compare an extracted model with the ground truth");
  v->add_option("extracted", ver.extracted)->required();
  v->add_option("truth", ver.truth)->required();
  v->add_option("--max-error", ver.max_error);
  v->add_option("--median-error", ver.median_error);

  ServeArgs srv;
  auto* s = app.add_subcommand("serve", "Serve a model over the inference protocol");
  s->add_option("--model", srv.model)->required();
  s->add_option("--endpoint", srv.endpoint, "host:port (port 0 picks one)");
  s->add_option("--seed", srv.seed, "mask seed of the first session");
  s->add_flag("--fixed-seed", srv.fixed_seed, "same masks every session");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitPass : kExitError;
  }
  try {
    if (*g) return gen_model(gen);
    if (*at) return attack(atk);
    if (*v) return verify(ver);
    if (*s) return serve(srv);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitError;
  }
  return kExitError;
}
