// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "maskgru/cells.hpp"
#include "model_oracles.hpp"

namespace maskgru {
namespace {

ModelConfig small_config(ModelKind kind, std::size_t size = 8) {
  ModelConfig cfg = ModelConfig::for_kind(kind, size, size);
  cfg.hidden1 = 16;
  cfg.hidden2 = 8;
  return cfg;
}

std::vector<Tensor> random_frames(std::size_t t, std::size_t size, std::mt19937_64& rng) {
  std::vector<Tensor> frames;
  for (std::size_t i = 0; i < t; ++i) frames.push_back(oracle::random_tensor({3, size, size}, rng, 0.0, 1.0));
  return frames;
}

std::size_t nonzero(const Tensor& t) {
  return static_cast<std::size_t>(std::count_if(t.data().begin(), t.data().end(), [](double v) { return v != 0.0; }));
}

Tensor step_once(const ModelParams& p, const Tensor& h, const Tensor& x, bool masked) {
  Graph g(false);
  BoundModel m = bind_frozen(g, p);
  CellState prev(g.constant(h));
  CellState next = masked ? maskgru_step(m, prev, g.constant(x)) : convgru_step(m, prev, g.constant(x));
  return next.value();
}

TEST(ModelConfig, DefaultsAndValidation) {
  ModelConfig cfg = ModelConfig::for_kind(ModelKind::kMaskGru, 64, 64);
  EXPECT_EQ(cfg.pooled_height(), 16u);
  EXPECT_EQ(cfg.flatten_size(), 256u);
  EXPECT_TRUE(cfg.uses_instance_norm());
  EXPECT_FALSE(ModelConfig::for_kind(ModelKind::kConvGru, 64, 64).uses_instance_norm());
  EXPECT_EQ(ModelConfig::for_kind(ModelKind::kMaskGru, 180, 180).flatten_size(), 45u * 45u);
  cfg.kernel = 4;
  EXPECT_THROW(cfg.validate(), ParameterError);
  cfg.kernel = 3;
  cfg.beta = 1.5;
  EXPECT_THROW(cfg.validate(), ParameterError);
  EXPECT_EQ(parse_model_kind("convgru"), ModelKind::kConvGru);
  EXPECT_THROW(parse_model_kind("convstar"), ParameterError);
}

TEST(ModelParams, NamedOmitsUnusedTensors) {
  auto conv = ModelParams::zeros(small_config(ModelKind::kConvGru));
  auto mask = ModelParams::zeros(small_config(ModelKind::kMaskGru));
  EXPECT_EQ(conv.named().size(), 14u);
  EXPECT_EQ(mask.named().size(), 20u);
  ModelConfig prelu = small_config(ModelKind::kConvGru);
  prelu.activation = HeadActivation::kPrelu;
  EXPECT_EQ(ModelParams::zeros(prelu).named().size(), 16u);
  EXPECT_EQ(conv.named()[0].tensor->shape(), (Shape{3, 6, 3, 3}));
}

TEST(ModelParams, InitializeIsSeeded) {
  const ModelConfig cfg = small_config(ModelKind::kMaskGru);
  auto a = ModelParams::initialize(cfg, 5), b = ModelParams::initialize(cfg, 5), c = ModelParams::initialize(cfg, 6);
  EXPECT_TRUE(a.reset.weight == b.reset.weight);
  EXPECT_FALSE(a.reset.weight == c.reset.weight);
  EXPECT_EQ(a.reset_norm.scale[0], 0.25);
  EXPECT_EQ(a.update_norm.shift[2], 0.5);
  EXPECT_EQ(a.candidate_norm.scale[1], 0.5);
  EXPECT_EQ(a.candidate_norm.shift[1], 0.0);
}

TEST(ConvGru, ZeroParamsGiveZeroState) {
  std::mt19937_64 rng(1);
  const auto p = ModelParams::zeros(small_config(ModelKind::kConvGru));
  const Tensor h = step_once(p, Tensor(Shape{3, 8, 8}), oracle::random_tensor({3, 8, 8}, rng), false);
  for (double v : h.data()) EXPECT_EQ(v, 0.0);
}

TEST(ConvGru, MatchesStraightLineOracle) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    const auto p = oracle::random_params(small_config(ModelKind::kConvGru), rng);
    const Tensor h = oracle::random_tensor({3, 8, 8}, rng);
    const Tensor x = oracle::random_tensor({3, 8, 8}, rng, 0.0, 1.0);
    EXPECT_LT(oracle::max_abs_diff(step_once(p, h, x, false), oracle::gru_step(p, h, x, false)), 1e-12);
  }
}

TEST(ConvGru, StateStaysBetweenPreviousAndCandidate) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(100 + seed);
    const auto p = oracle::random_params(small_config(ModelKind::kConvGru), rng, 2.0);
    Tensor h = oracle::random_tensor({3, 8, 8}, rng);
    for (int t = 0; t < 10; ++t) {
      h = step_once(p, h, oracle::random_tensor({3, 8, 8}, rng, 0.0, 255.0), false);
      for (double v : h.data()) ASSERT_LE(std::abs(v), 1.0);
    }
  }
}

TEST(ConvGru, RejectsWrongShapes) {
  const auto p = ModelParams::zeros(small_config(ModelKind::kConvGru));
  EXPECT_THROW(step_once(p, Tensor(Shape{3, 8, 8}), Tensor(Shape{3, 8, 7}), false), ShapeError);
  Graph g;
  EXPECT_THROW(CellState(g.constant(Tensor(Shape{2, 8, 8}))), ShapeError);
}

TEST(MaskGru, MatchesStraightLineOracle) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    const auto p = oracle::random_params(small_config(ModelKind::kMaskGru), rng);
    const Tensor h = oracle::random_tensor({3, 8, 8}, rng, -50.0, 150.0);
    const Tensor x = oracle::random_tensor({3, 8, 8}, rng, 0.0, 1.0);
    EXPECT_LT(oracle::max_abs_diff(step_once(p, h, x, true), oracle::gru_step(p, h, x, true)), 1e-12);
  }
}

TEST(MaskGru, ConstantGatesKeepPreviousState) {
  std::mt19937_64 rng(2);
  auto p = ModelParams::initialize(small_config(ModelKind::kMaskGru), 0);
  for (GateParams* g : {&p.reset, &p.update, &p.candidate}) {
    std::fill(g->weight.data().begin(), g->weight.data().end(), 0.0);
    for (double& b : g->bias.data()) b = 0.7;
  }
  // Constant gate maps normalise to the shift; zero shifts make z = 0.
  for (NormParams* n : {&p.reset_norm, &p.update_norm, &p.candidate_norm}) {
    std::fill(n->shift.data().begin(), n->shift.data().end(), 0.0);
  }
  const Tensor h = oracle::random_tensor({3, 8, 8}, rng);
  EXPECT_LT(oracle::max_abs_diff(step_once(p, h, oracle::random_tensor({3, 8, 8}, rng), true), h), 1e-12);
}

TEST(BBoxHead, ZeroNetworkReturnsCanonicalBias) {
  auto p = ModelParams::zeros(small_config(ModelKind::kConvGru));
  Graph g(false);
  EXPECT_EQ(to_bbox(bbox_head(bind_frozen(g, p), CellState(g.constant(Tensor(Shape{3, 8, 8})))).box.value()),
            (BBox{0, 0, 0, 0}));
  p.head.out_bias = Tensor(Shape{4}, std::vector<double>{5.0, 1.0, 2.0, 3.0});
  Graph g2(false);
  EXPECT_EQ(to_bbox(bbox_head(bind_frozen(g2, p), CellState(g2.constant(Tensor(Shape{3, 8, 8})))).box.value()),
            (BBox{2, 1, 5, 3}));
}

TEST(BBoxHead, MatchesStraightLineOracleAndIsCanonical) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    ModelConfig cfg = small_config(ModelKind::kMaskGru, 16);
    if (seed % 2) cfg.activation = HeadActivation::kPrelu;
    const auto p = oracle::random_params(cfg, rng);
    const Tensor h = oracle::random_tensor({3, 16, 16}, rng, -2.0, 2.0);
    Graph g(false);
    const HeadOutput out = bbox_head(bind_frozen(g, p), CellState(g.constant(h)));
    const BBox box = to_bbox(out.box.value());
    std::vector<double> a2;
    EXPECT_LT(oracle::max_abs_diff(box, oracle::head(p, h, &a2)), 1e-12);
    EXPECT_LE(box.x1, box.x2);
    EXPECT_LE(box.y1, box.y2);
    ASSERT_EQ(out.hidden2.value().numel(), a2.size());
    for (std::size_t i = 0; i < a2.size(); ++i) EXPECT_NEAR(out.hidden2.value()[i], a2[i], 1e-12);
  }
}

TEST(RenderMask, ThreeByThreeOutline) {
  const Tensor m = render_mask({1, 1, 3, 3}, 5, 5);
  int count = 0;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 5; ++y)
      for (std::size_t x = 0; x < 5; ++x) {
        const double v = m.at(c, y, x);
        if (v != 0.0) {
          ++count;
          EXPECT_EQ(v, 255.0);
          EXPECT_EQ(c, 0u);
        }
      }
  EXPECT_EQ(count, 8);
  EXPECT_EQ(m.at(0, 2, 2), 0.0);
}

TEST(RenderMask, OutsideFrameIsEmpty) {
  for (const BBox& b : {BBox{10, 10, 20, 20}, BBox{-9, -9, -2, -2}, BBox{-5, 2, -1, 3}}) {
    const Tensor m = render_mask(b, 6, 6);
    for (double v : m.data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(RenderMask, MatchesPerPixelPredicate) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> coord(-6.0, 18.0);
  for (int trial = 0; trial < 500; ++trial) {
    const BBox b{coord(rng), coord(rng), coord(rng), coord(rng)};
    const std::size_t channel = static_cast<std::size_t>(trial % 3);
    const Tensor m = render_mask(b, 12, 10, 255.0, channel);
    for (std::size_t c = 0; c < 3; ++c)
      for (long y = 0; y < 12; ++y)
        for (long x = 0; x < 10; ++x) {
          const double expected = (c == channel && oracle::on_outline(b, x, y)) ? 255.0 : 0.0;
          ASSERT_EQ(m.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)), expected);
        }
  }
}

TEST(RenderMask, InteriorCountIsPerimeter) {
  for (std::size_t w = 2; w < 12; ++w)
    for (std::size_t h = 2; h < 12; ++h) {
      const BBox b{2.0, 3.0, 2.0 + static_cast<double>(w) - 1.0, 3.0 + static_cast<double>(h) - 1.0};
      const Tensor m = render_mask(b, 20, 20);
      std::size_t n = 0;
      for (double v : m.data()) n += v != 0.0;
      EXPECT_EQ(n, 2 * w + 2 * h - 4);
    }
}

TEST(RenderMask, DegenerateAndPartialBoxes) {
  std::size_t n = nonzero(render_mask({2, 2, 2, 6}, 8, 8));
  EXPECT_EQ(n, 5u);
  n = nonzero(render_mask({3.2, 3.4, 2.9, 2.6}, 8, 8));
  EXPECT_EQ(n, 1u);
  // Left edge off-frame: only the top, bottom and right edges remain.
  n = nonzero(render_mask({-3, 1, 4, 5}, 8, 8));
  EXPECT_EQ(n, 5u + 5u + 3u);
  Tensor nan_mask = render_mask({NAN, 0, 1, 1}, 4, 4);
  for (double v : nan_mask.data()) EXPECT_EQ(v, 0.0);
  EXPECT_NO_THROW(render_mask({-1e300, -1e300, 1e300, 1e300}, 4, 4));
  EXPECT_THROW(render_mask({0, 0, 1, 1}, 0, 4), ParameterError);
}

TEST(RenderMask, ThicknessGrowsInwards) {
  std::size_t n = nonzero(render_mask({1, 1, 6, 6}, 8, 8, 1.0, 1, 2));
  EXPECT_EQ(n, 36u - 4u);
}

TEST(BlendHidden, Endpoints) {
  Graph g(false);
  std::mt19937_64 rng(4);
  const Tensor h = oracle::random_tensor({3, 4, 4}, rng);
  const Tensor mask = render_mask({0, 0, 3, 3}, 4, 4);
  CellState state(g.constant(h));
  EXPECT_TRUE(blend_hidden(state, mask, 1.0).value() == h);
  EXPECT_TRUE(blend_hidden(state, mask, 0.0).value() == mask);
  Tensor one(Shape{3, 4, 4}, 1.0);
  EXPECT_EQ(blend_hidden(CellState(g.constant(one)), mask, 0.5).value().at(0, 0, 0), 128.0);
  EXPECT_THROW(blend_hidden(state, mask, -0.1), ParameterError);
  EXPECT_THROW(blend_hidden(state, mask, 1.1), ParameterError);
  EXPECT_THROW(blend_hidden(state, Tensor(Shape{3, 4, 5}), 0.5), ShapeError);
}

TEST(BlendHidden, MaskBranchIsDetached) {
  Tensor h(Shape{3, 4, 4}, 0.3);
  Graph g;
  Var hv = g.parameter(h);
  CellState out = blend_hidden(CellState(hv), render_mask({0, 0, 3, 3}, 4, 4), 0.25);
  g.backward(sum(out.h()));
  for (double v : h.grad()) EXPECT_EQ(v, 0.25);
}

TEST(RunSequence, SingleStepZeroParamsGivesBias) {
  auto p = ModelParams::zeros(small_config(ModelKind::kMaskGru));
  p.head.out_bias = Tensor(Shape{4}, std::vector<double>{1, 2, 3, 4});
  std::vector<Tensor> frames{Tensor(Shape{3, 8, 8}, 7.0)};
  const auto boxes = run_sequence(p, frames);
  ASSERT_EQ(boxes.size(), 1u);
  EXPECT_EQ(boxes[0], (BBox{1, 2, 3, 4}));
}

TEST(RunSequence, MaskGruReducesToConvGru) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    ModelConfig mcfg = small_config(ModelKind::kMaskGru);
    mcfg.beta = 1.0;
    mcfg.instance_norm = false;
    const auto mp = oracle::random_params(mcfg, rng);
    ModelParams cp = mp;
    cp.config.kind = ModelKind::kConvGru;
    const auto frames = random_frames(5, 8, rng);
    std::vector<Tensor> hm, hc;
    const auto bm = run_sequence(mp, frames, {}, {}, [&](const StepRecord& r) { hm.push_back(r.hidden); });
    const auto bc = run_sequence(cp, frames, {}, {}, [&](const StepRecord& r) { hc.push_back(r.hidden); });
    ASSERT_EQ(bm.size(), bc.size());
    for (std::size_t t = 0; t < bm.size(); ++t) {
      EXPECT_LE(oracle::max_abs_diff(bm[t], bc[t]), 1e-12);
      EXPECT_LE(oracle::max_abs_diff(hm[t], hc[t]), 1e-12);
    }
  }
}

TEST(RunSequence, TeacherMasksComeFromGroundTruth) {
  std::mt19937_64 rng(3);
  const auto p = ModelParams::initialize(small_config(ModelKind::kMaskGru), 1);
  const auto frames = random_frames(4, 8, rng);
  const std::vector<BBox> truth{{1, 1, 3, 3}, {2, 2, 4, 5}, {0, 3, 6, 7}, {4, 4, 5, 5}};
  std::vector<bool> flags{true, false, true, true};
  std::size_t seen = 0;
  run_sequence(p, frames, truth, flags, [&](const StepRecord& r) {
    ++seen;
    ASSERT_NE(r.mask, nullptr);
    const BBox& src = flags[r.t] ? truth[r.t] : r.box;
    EXPECT_EQ(r.mask_source, flags[r.t] ? MaskSource::kTeacher : MaskSource::kPrediction);
    EXPECT_TRUE(*r.mask == render_mask(src, 8, 8));
  });
  EXPECT_EQ(seen, 4u);
}

TEST(RunSequence, FlagWithoutTeacherBoxIsUsageError) {
  const auto p = ModelParams::zeros(small_config(ModelKind::kMaskGru));
  std::vector<Tensor> frames{Tensor(Shape{3, 8, 8})};
  EXPECT_THROW(run_sequence(p, frames, {}, {true}), UsageError);
  EXPECT_THROW(run_sequence(p, {}, {}, {}), UsageError);
}

TEST(RunSequence, ConvGruNeverRendersMasks) {
  std::mt19937_64 rng(8);
  const auto p = ModelParams::initialize(small_config(ModelKind::kConvGru), 1);
  const auto frames = random_frames(6, 8, rng);
  const std::vector<BBox> truth(6, BBox{1, 1, 4, 4});
  const auto before = render_mask_calls();
  run_sequence(p, frames, truth, std::vector<bool>(6, true));
  EXPECT_EQ(render_mask_calls(), before);
}

TEST(RunSequence, FirstBoxInitialStateUsesTeacherBox) {
  std::mt19937_64 rng(8);
  ModelConfig cfg = small_config(ModelKind::kMaskGru);
  cfg.initial_state = InitialState::kFirstBoxMask;
  const auto p = ModelParams::initialize(cfg, 1);
  const auto frames = random_frames(2, 8, rng);
  EXPECT_THROW(run_sequence(p, frames), UsageError);
  ModelParams zero_start = p;
  zero_start.config.initial_state = InitialState::kZeros;
  const std::vector<BBox> truth(2, BBox{1, 1, 4, 4});
  EXPECT_FALSE(oracle::max_abs_diff(run_sequence(p, frames, truth)[0], run_sequence(zero_start, frames, truth)[0]) ==
               0.0);
}

}  // namespace
}  // namespace maskgru
