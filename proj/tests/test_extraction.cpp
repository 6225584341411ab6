#include <gtest/gtest.h>

#include <random>

#include "seek/extraction/layer.hpp"
#include "seek/extraction/search.hpp"
#include "seek/extraction/topology.hpp"
#include "support.hpp"

using namespace seek;
using namespace seek::testing;

namespace {

// x0 -> y1 = [x0 + 1, x0 - 1] -> ReLU -> logits [z0 - z1, z1 - z0] (or z0
// only, when `dead_second`).
std::shared_ptr<const ModelGraph> two_feature_net(bool dead_second = false) {
  std::vector<double> head = dead_second ? std::vector<double>{1, 0, -1, 0} : std::vector<double>{1, -1, -1, 1};
  std::vector<LayerSpec> l{input_layer(0, {1}), fc_layer(1, 0, 2, 1, {1, 1}, {1, -1}), relu_layer(2, 1),
                           fc_layer(3, 2, 2, 2, head, {0, 0}), argmax_layer(4, 3)};
  return std::make_shared<ModelGraph>(std::move(l), 4);
}

// Logits tie exactly at x0 = 0 once the Argmax pre-side carries `shift`.
CriticalPoint tie_point(const ModelGraph& m, std::vector<double> shift) {
  CriticalPoint cp;
  cp.base = QueryInput{Tensor(m.input_shape()), {}};
  cp.v = cp.base;
  cp.v.shifts.add_dense(m.output_id(), Side::Pre, shift);
  cp.c1 = 0;
  cp.c2 = 1;
  cp.layer = m.output_id();
  cp.boundary_shift = std::move(shift);
  return cp;
}

// Input 1x2x2 -> identity 1x1 conv -> 2x2 maxpool-ReLU -> logits [p, -p].
std::shared_ptr<const ModelGraph> pooled_net() {
  std::vector<LayerSpec> l{input_layer(0, {1, 2, 2}), conv_layer(1, 0, 1, 1, 1, {1}, {0}), pool_layer(2, 1, 2, 2),
                           fc_layer(3, 2, 2, 1, {1, -1}, {0, 0}), argmax_layer(4, 3)};
  return std::make_shared<ModelGraph>(std::move(l), 4);
}

struct Truth {
  Tensor bias, weight;
};

Truth truth_of(const ModelGraph& m, LayerId id) {
  const LayerSpec& l = m.layer(id);
  if (l.kind == LayerKind::Convolution) return {l.conv().bias, l.conv().weight};
  return {l.fc().bias, l.fc().weight};
}

void expect_recovered(const ModelGraph& m, LayerId id, const LayerExtractionResult& r, double tol = 1e-4) {
  const Truth t = truth_of(m, id);
  ASSERT_EQ(r.bias.shape(), t.bias.shape());
  ASSERT_EQ(r.weight.shape(), t.weight.shape());
  EXPECT_EQ(r.count_flag(kParamDead), 0u);
  EXPECT_LE(max_relative_error(r.bias, t.bias), tol);
  EXPECT_LE(max_relative_error(r.weight, t.weight), tol);
}

BoundarySearchConfig seeded(std::uint64_t seed) {
  BoundarySearchConfig cfg;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST(ExtractFeature, PositiveBranch) {
  const auto m = two_feature_net();
  auto o = in_process(m);
  const CriticalPoint cp = tie_point(*m, {-1, 1});
  ASSERT_TRUE(o->is_critical(cp.v, 0, 1));
  const BoundarySearchConfig cfg;
  const FeatureEstimate e = extract_feature(*o, *m, cp, 2, 0, cfg);
  EXPECT_FALSE(e.dead);
  EXPECT_FALSE(e.negative_branch);
  EXPECT_NEAR(e.value, 1.0, cfg.eta_tolerance);
  EXPECT_NEAR(forward_trace(*m, cp.v).y(2)[0], 1.0, 0.0);
}

TEST(ExtractFeature, NegativeBranch) {
  const auto m = two_feature_net();
  auto o = in_process(m);
  const BoundarySearchConfig cfg;
  const FeatureEstimate e = extract_feature(*o, *m, tie_point(*m, {-1, 1}), 2, 1, cfg);
  EXPECT_TRUE(e.negative_branch);
  EXPECT_NEAR(e.value, -1.0, cfg.eta_tolerance);
  EXPECT_EQ(e.queries, o->count());
}

TEST(ExtractFeature, ZeroDownstreamWeightIsDead) {
  const auto m = two_feature_net(true);
  auto o = in_process(m);
  const FeatureEstimate e = extract_feature(*o, *m, tie_point(*m, {-1, 1}), 2, 1, BoundarySearchConfig{});
  EXPECT_TRUE(e.dead);
}

TEST(ExtractFeature, RejectsWrongLayerKind) {
  const auto m = pooled_net();
  auto o = in_process(m);
  EXPECT_THROW(extract_feature(*o, *m, tie_point(*m, {0, 0}), 2, 0, BoundarySearchConfig{}), StructuralError);
}

TEST(ExtractFeature, BoundaryMatchesTraceOnRandomModel) {
  std::mt19937_64 rng(3);
  const auto m = shared_random("fc8-r-fc6-r-fc3", "5", 2);
  auto o = in_process(m);
  const BoundarySearchConfig cfg;
  std::size_t checked = 0;
  for (int k = 0; k < 10; ++k) {
    const QueryInput v0{random_tensor(m->input_shape(), rng), {}};
    const CriticalPoint cp = search_critical(*o, *m, v0, m->output_id(), cfg, rng);
    const Trace t = forward_trace(*m, cp.v);
    for (LayerId layer : {2u, 4u}) {
      const std::size_t i = k % t.y(layer).size();
      const FeatureEstimate e = extract_feature(*o, *m, cp, layer, i, cfg);
      if (e.dead) continue;
      // Past |y| the logit gap grows with slope g; the probe only reports
      // non-critical once the gap clears its band (< 2 eps), so the located
      // boundary may overshoot by that much.
      const double y = t.y(layer)[i];
      const double h = 1e-4;
      auto gap = [&](double eta) {
        const auto l = forward_trace(*m, scan_query(cp, layer, i, eta, e.negative_branch)).shifted_logits;
        return l[cp.c1] - l[cp.c2];
      };
      const double g = std::abs(gap(std::abs(y) + h) - gap(std::abs(y))) / h;
      const double slack = cfg.eta_tolerance + (2 * o->epsilon() + std::abs(gap(0.0))) / g;
      EXPECT_NEAR(e.eta, std::abs(y), slack);
      EXPECT_NEAR(e.value, y, slack);
      ++checked;
    }
  }
  EXPECT_GE(checked, 15u);
}

TEST(ExtractFeature, SafeErrorCancelsBelowBoundary) {
  std::mt19937_64 rng(4);
  const auto m = shared_random("fc8-r-fc6-r-fc3", "5", 3);
  auto o = in_process(m);
  const BoundarySearchConfig cfg;
  std::uniform_real_distribution<double> frac(0.0, 1.0);
  for (int k = 0; k < 10; ++k) {
    const QueryInput v0{random_tensor(m->input_shape(), rng), {}};
    const CriticalPoint cp = search_critical(*o, *m, v0, m->output_id(), cfg, rng);
    const LayerId layer = k % 2 ? 2 : 4;
    const std::size_t i = k % 6;
    const FeatureEstimate e = extract_feature(*o, *m, cp, layer, i, cfg);
    ASSERT_FALSE(e.dead);
    const Trace at = forward_trace(*m, cp.v);
    for (int s = 0; s < 5; ++s) {
      const double eta = (e.eta - 2 * cfg.eta_tolerance) * frac(rng);
      const Trace shifted = forward_trace(*m, scan_query(cp, layer, i, eta, e.negative_branch));
      EXPECT_LE(downstream_gap(*m, at, shifted, layer), 1e-12);
    }
  }
}

TEST(ExtractFeatureMaxpool, PositiveUnderSuppression) {
  const auto m = pooled_net();
  auto o = in_process(m);
  const BoundarySearchConfig cfg;
  std::mt19937_64 rng(1);
  const QueryInput base{Tensor({1, 2, 2}, {0.7, 0.9, -0.5, 0.1}), {}};
  const FeatureEstimate e = extract_feature_maxpool(*o, *m, base, 2, 0, cfg, rng);
  EXPECT_FALSE(e.negative_branch);
  EXPECT_NEAR(e.value, 0.7, cfg.eta_tolerance);
  EXPECT_EQ(e.queries, o->count());
}

TEST(ExtractFeatureMaxpool, NegativeUnderSuppression) {
  const auto m = pooled_net();
  auto o = in_process(m);
  const BoundarySearchConfig cfg;
  std::mt19937_64 rng(2);
  const QueryInput base{Tensor({1, 2, 2}, {0.4, -0.3, 0.8, 0.1}), {}};
  const FeatureEstimate e = extract_feature_maxpool(*o, *m, base, 2, 1, cfg, rng);
  EXPECT_TRUE(e.negative_branch);
  EXPECT_NEAR(e.value, -0.3, cfg.eta_tolerance);
}

TEST(ConvGeometry, DeltaAndReplicatedIndices) {
  EXPECT_EQ(conv_delta(64, 3, 3), 12.0);
  EXPECT_EQ(fc_delta(16), 2.0);
  // (i, j) = (0, 0) on 8x8: rows and columns {2, 5}.
  EXPECT_EQ(conv_weight_indices(0, 8, 8, 3, 3, 0, 0), (std::vector<std::size_t>{18, 21, 42, 45}));
  // Channel 1 is offset by one 8x8 plane.
  EXPECT_EQ(conv_weight_indices(1, 8, 8, 3, 3, 0, 0).front(), 64u + 18u);
  // (1, 1) lines up with the injected taps themselves.
  EXPECT_EQ(conv_weight_indices(0, 8, 8, 3, 3, 1, 1), (std::vector<std::size_t>{9, 12, 33, 36}));
  // Every row the injection touches satisfies (r - 1) % 3 == 0.
  for (const auto& [i, v] : conv_injection({1, 8, 8}, 0, 3, 3, 2.0)) {
    EXPECT_EQ((i / 8 + 2) % 3, 0u);
    EXPECT_EQ((i % 8 + 2) % 3, 0u);
    EXPECT_EQ(v, 2.0);
  }
}

TEST(Gauge, PinsReferenceRow) {
  Tensor b({3}, {1.0, 2.0, 0.5});
  Tensor w({3, 1}, {0.3, -0.2, 0.1});
  apply_last_layer_gauge(b, w);
  EXPECT_EQ(b, Tensor({3}, {0.0, 1.0, -0.5}));
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(w[c], (std::vector<double>{0.0, -0.5, -0.2})[c], 1e-15);
}

TEST(ZeroInputPlan, SequentialResidualAndInput) {
  const auto seq = shared_random("conv4x3x3-r-conv4x3x3-r-fc4", "2x6x6", 1);
  EXPECT_EQ(zero_input_plan(*seq, 3, 1e6).layers, (std::vector<LayerId>{2}));
  const SuppressionPlan first = zero_input_plan(*seq, 1, 1e6);
  EXPECT_TRUE(first.input_mode);
  EXPECT_TRUE(first.layers.empty());

  // 1 conv, 2 r, 3 conv, 4 r, 5 conv, 6 add(5, 2), 7 r, 8 fc
  const auto res = shared_random("conv4x3x3-r-res{conv4x3x3-r-conv4x3x3}-r-fc4", "2x6x6", 1);
  EXPECT_EQ(zero_input_plan(*res, 5, 1e6).layers, (std::vector<LayerId>{2, 4}));
  EXPECT_EQ(zero_input_plan(*res, 8, 1e6).layers, (std::vector<LayerId>{7}));
  const LinearSite site = analyze_site(*res, 5);
  EXPECT_EQ(site.measure, 7u);
  EXPECT_EQ(site.inject, 4u);
  EXPECT_FALSE(site.skip_identity);
  EXPECT_TRUE(analyze_site(*shared_random("conv4x3x3-r-res{conv4x3x3}-r-fc4", "2x6x6", 1), 3).skip_identity);
}

TEST(ZeroInputPlan, TraceShowsZeroInput) {
  std::mt19937_64 rng(5);
  const auto res = shared_random("conv4x3x3-r-res{conv4x3x3-r-conv4x3x3}-r-fc4", "2x6x6", 3);
  for (LayerId target : {3u, 5u, 8u}) {
    const LinearSite site = analyze_site(*res, target);
    const SuppressionPlan plan = zero_input_plan(*res, target, 1e6);
    for (int k = 0; k < 5; ++k) {
      QueryInput q{random_tensor(res->input_shape(), rng), plan.shifts};
      const Trace t = forward_trace(*res, q);
      for (double v : t.z(res->layer(target).inputs.front()).values()) EXPECT_EQ(v, 0.0);
      // Whatever reaches the measured layer besides the target is zero too.
      const Tensor& y = t.y(site.measure);
      const Tensor& own = t.z(target);
      for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], own[i]);
    }
  }
}

TEST(ExtractFc, ZeroInputGivesBiasAndColumnsGiveWeights) {
  const auto m = shared_random("fc16-r-fc8-r-fc3", "10", 4);
  auto o = in_process(m);
  const LayerExtractionResult r = extract_fc_layer(*o, *m, 1, seeded(1));
  expect_recovered(*m, 1, r);
  EXPECT_EQ(r.total_queries(), o->count());
}

TEST(ExtractFc, HiddenLayer) {
  const auto m = shared_random("fc16-r-fc8-r-fc3", "10", 4);
  auto o = in_process(m);
  const LayerExtractionResult r = extract_fc_layer(*o, *m, 3, seeded(2));
  expect_recovered(*m, 3, r);
  EXPECT_EQ(r.total_queries(), o->count());
}

TEST(ExtractConv, RandomEightChannelLayerAfterReLU) {
  const auto m = shared_random("conv2x3x3-r-conv8x3x3-r-fc4", "2x8x8", 5);
  auto o = in_process(m);
  const LayerExtractionResult r = extract_conv_layer(*o, *m, 3, seeded(3));
  expect_recovered(*m, 3, r);
  EXPECT_EQ(r.total_queries(), o->count());
}

TEST(ExtractConv, InputLayer) {
  const auto m = shared_random("conv4x3x3-r-fc4", "2x6x6", 6);
  auto o = in_process(m);
  expect_recovered(*m, 1, extract_conv_layer(*o, *m, 1, seeded(4)));
}

TEST(ExtractConv, OverlappingMaxpool) {
  const auto m = shared_random("conv4x3x3-mpr3s1-fc8-r-fc3", "2x6x6", 7);
  auto o = in_process(m);
  const LayerExtractionResult r = extract_conv_layer(*o, *m, 1, seeded(5));
  expect_recovered(*m, 1, r);
  EXPECT_EQ(r.total_queries(), o->count());
}

TEST(ExtractConv, ResidualBranches) {
  const auto m = shared_random("conv4x3x3-r-res{conv4x3x3-r-conv4x3x3}-r-fc4", "2x6x6", 8);
  auto o = in_process(m);
  for (LayerId id : {3u, 5u}) expect_recovered(*m, id, extract_conv_layer(*o, *m, id, seeded(6)));
}

TEST(ExtractConv, IdentitySkip) {
  const auto m = shared_random("conv4x3x3-r-res{conv4x3x3}-r-fc4", "2x6x6", 9);
  auto o = in_process(m);
  expect_recovered(*m, 3, extract_conv_layer(*o, *m, 3, seeded(7)));
}

TEST(ExtractFc, IdentitySkip) {
  // 1 fc, 2 r, 3 fc, 4 add(3, 2), 5 r
  const auto m = shared_random("fc6-r-res{fc6}-r-fc3", "4", 10);
  auto o = in_process(m);
  expect_recovered(*m, 3, extract_fc_layer(*o, *m, 3, seeded(8)));
}

TEST(ExtractConv, RejectsOtherShapes) {
  const auto m = shared_random("fc8-r-fc4", "6", 1);
  auto o = in_process(m);
  EXPECT_THROW(extract_conv_layer(*o, *m, 1, {}), StructuralError);
  EXPECT_THROW(extract_fc_layer(*o, *m, 3, {}), StructuralError);
  EXPECT_THROW(extract_layer(*o, *m, 2, {}), StructuralError);
}

TEST(ExtractLast, DifferencesMatchUnderGauge) {
  const auto m = shared_random("fc8-r-fc4", "6", 11);
  auto o = in_process(m);
  const LayerExtractionResult r = extract_last_layer(*o, *m, seeded(9));
  EXPECT_TRUE(r.gauge_fixed);
  EXPECT_EQ(r.total_queries(), o->count());
  Truth t = truth_of(*m, 3);
  apply_last_layer_gauge(t.bias, t.weight);
  EXPECT_EQ(r.bias[0], 0.0);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(r.weight[i], 0.0);
  for (std::size_t c = 1; c < 4; ++c) EXPECT_NEAR(r.bias[c], t.bias[c], 1e-4 * std::max(1.0, std::abs(t.bias[c])));
  for (std::size_t k = 8; k < 32; ++k) {
    EXPECT_NEAR(r.weight[k], t.weight[k], 1e-4 * std::max(1.0, std::abs(t.weight[k])));
  }
  EXPECT_EQ(r.extracted_bias_count(), 3u);
  EXPECT_EQ(r.extracted_weight_count(), 24u);
}

TEST(ExtractLast, BlindToPerColumnConstants) {
  const auto m = shared_random("fc8-r-fc4", "6", 12);
  std::vector<LayerSpec> layers = m->layers();
  FcParams& p = std::get<FcParams>(layers[m->position(3)].params);
  for (std::size_t c = 0; c < 4; ++c) {
    p.bias[c] += 0.25;
    for (std::size_t i = 0; i < 8; ++i) p.weight[c * 8 + i] += 0.1 * double(i + 1);
  }
  const auto moved_ptr = std::make_shared<const ModelGraph>(std::move(layers), m->output_id());
  auto a = in_process(m);
  auto b = in_process(moved_ptr);
  const LayerExtractionResult ra = extract_last_layer(*a, *m, seeded(3));
  const LayerExtractionResult rb = extract_last_layer(*b, *moved_ptr, seeded(3));
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(ra.bias[c], rb.bias[c], 1e-9);
  for (std::size_t k = 0; k < 32; ++k) EXPECT_NEAR(ra.weight[k], rb.weight[k], 1e-9);
}

TEST(LayerIndependence, OrderDoesNotMatter) {
  const auto m = shared_random("conv2x3x3-r-fc6-r-fc3", "1x5x5", 13);
  const BoundarySearchConfig cfg = seeded(11);
  auto o1 = in_process(m);
  const auto a1 = extract_layer(*o1, *m, 1, cfg);
  const auto a3 = extract_layer(*o1, *m, 3, cfg);
  const auto a5 = extract_layer(*o1, *m, 5, cfg);
  auto o2 = in_process(m);
  const auto b5 = extract_layer(*o2, *m, 5, cfg);
  const auto b1 = extract_layer(*o2, *m, 1, cfg);
  const auto b3 = extract_layer(*o2, *m, 3, cfg);
  EXPECT_EQ(a1.bias, b1.bias);
  EXPECT_EQ(a1.weight, b1.weight);
  EXPECT_EQ(a3.weight, b3.weight);
  EXPECT_EQ(a5.weight, b5.weight);
  EXPECT_EQ(a1.weight_queries, b1.weight_queries);
  EXPECT_EQ(o1->count(), o2->count());
}

TEST(LayerRng, DistinctPerLayerAndSeed) {
  EXPECT_NE(layer_rng(1, 1)(), layer_rng(1, 2)());
  EXPECT_NE(layer_rng(1, 1)(), layer_rng(2, 1)());
  EXPECT_EQ(layer_rng(5, 3)(), layer_rng(5, 3)());
}
