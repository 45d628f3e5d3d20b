#include <gtest/gtest.h>

#include <cmath>

#include "computer/grad_check.hpp"
#include "computer/model.hpp"
#include "test_util.hpp"

using namespace computer;
using computer::testing::leaf_gradient_error;
using computer::testing::random_tensor;
using computer::testing::random_tensor3;

namespace {

VideoFeatures<double> random_video(Rng& rng, std::size_t t, std::size_t n, std::size_t s,
                                   std::size_t d, std::size_t key_width = 0) {
  Tensor<double> key = key_width ? random_tensor3(rng, t, n, key_width, 0.0, 1.0)
                                 : random_tensor3(rng, t, n, d);
  return {random_tensor3(rng, t, s, d), random_tensor3(rng, t, n, d), std::move(key)};
}

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.sel = {.w = 2, .k = 1};
  return cfg;
}

Tensor<double> actor_row(const VideoFeatures<double>& v, std::size_t t, std::size_t i) {
  Tensor<double> r({1, v.dim()});
  for (std::size_t j = 0; j < v.dim(); ++j) r[j] = v.vis.tokens_tensor()(t, i, j);
  return r;
}

}  // namespace

TEST(AblationFlags, Validation) {
  AblationFlags f;
  EXPECT_NO_THROW(f.validate());
  f.use_vis = f.use_key = false;
  EXPECT_THROW(f.validate(), ConfigError);
  f = {};
  f.use_hh = f.use_hc = false;
  EXPECT_THROW(f.validate(), ConfigError);
  f = {};
  f.use_key = false;  // consistency still requested
  EXPECT_THROW(f.validate(), ConfigError);
  f.use_consistency = false;
  EXPECT_NO_THROW(f.validate());
  f = {};
  f.use_hierarchy = false;
  f.use_hh = false;
  EXPECT_THROW(f.validate(), ConfigError);
}

TEST(ModelConfig, Validation) {
  ModelConfig c;
  EXPECT_NO_THROW(c.validate());
  c.raw_keypoints = true;
  c.hh_memory = HhMemory::matched;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.hub.attn.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.depth = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.sel = {.w = 1, .k = 2};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(InitParams, SameSeedSameParameters) {
  ModelConfig c;
  c.raw_keypoints = true;
  Rng a(7), b(7);
  auto pa = init_params<double>(c, a), pb = init_params<double>(c, b);
  auto la = pa.list(), lb = pb.list();
  ASSERT_EQ(la.size(), lb.size());
  for (std::size_t i = 0; i < la.size(); ++i) {
    EXPECT_EQ(la[i]->name, lb[i]->name);
    EXPECT_EQ(la[i]->value, lb[i]->value);
  }
}

TEST(InitParams, GlorotBoundsAndNullTokens) {
  EXPECT_DOUBLE_EQ(init::glorot_bound(4, 4), std::sqrt(6.0 / 8.0));
  EXPECT_NEAR(init::glorot_bound(4, 4), 0.866, 1e-3);
  ModelConfig c;
  Rng rng(8);
  auto p = init_params<double>(c, rng);
  const double bound = std::sqrt(6.0 / 8.0);
  std::size_t checked = 0;
  p.for_each([&](Parameter<double>& x) {
    if (x.group == "attn.wq" || x.group == "attn.wk" || x.group == "attn.wv") {
      for (double v : x.value.data()) EXPECT_LE(std::abs(v), bound);
      ++checked;
    }
    if (x.group == "null_tokens") {
      for (double v : x.value.data()) EXPECT_LT(std::abs(v), 0.02 * 6);
    }
    if (x.name.ends_with(".b1") || x.name.ends_with(".b2") || x.name.ends_with("ln_bias")) {
      for (double v : x.value.data()) EXPECT_EQ(v, 0.0);
    }
  });
  EXPECT_EQ(checked, 2u * 2u * 3u * 2u * 3u);  // modalities x hubs x channels x layers x {q,k,v}
}

TEST(InitParams, ParameterCountMatchesHandCount) {
  ModelConfig c;  // D = 4, C = 3, H = 8, L = 2, depth 1, both modalities
  Rng rng(9);
  // stack 2 * (48 + 8) = 112; hub 3 * 112 + 48 + 12 = 396; 2 modalities x 2 hubs;
  // aggregator 8 * 8 + 8 + 8 * 3 + 3 = 99.
  EXPECT_EQ(param_count(c), 4u * 396u + 99u);
  EXPECT_EQ(init_params<double>(c, rng).count(), 1683u);
  c.raw_keypoints = true;  // embedder 51 * 8 + 8 + 8 * 4 + 4 = 452
  EXPECT_EQ(init_params<double>(c, rng).count(), 1683u + 452u);
  EXPECT_EQ(param_count(c), 2135u);
  c.hub.share_channels = true;
  c.depth = 2;
  c.flags.use_key = false;
  c.flags.use_consistency = false;
  EXPECT_EQ(init_params<double>(c, rng).count(), param_count(c));
}

TEST(ModalityForward, DepthOneIsHhThenHc) {
  Rng rng(10);
  auto cfg = small_config();
  auto p = init_params<double>(cfg, rng);
  auto v = random_video(rng, 4, 2, 3, 4);
  Tape<double> tape;
  auto q = tape.constant(actor_row(v, 1, 0));
  auto out = modality_forward(q, 0, 1, v, *p.vis, cfg, Modality::vis);
  auto& st = p.vis->stages[0];
  auto manual = hc_hub(hh_hub(q, 0, 1, v.vis, cfg.sel, st.hh, cfg.hub), 1, v.context, cfg.sel,
                       st.hc, cfg.hub);
  EXPECT_EQ(out.value(), manual.value());
}

TEST(ModalityForward, WithoutHhIsHcDirectly) {
  Rng rng(11);
  auto cfg = small_config();
  cfg.flags.use_hh = false;
  auto p = init_params<double>(cfg, rng);
  auto v = random_video(rng, 4, 2, 3, 4);
  Tape<double> tape;
  auto q = tape.constant(actor_row(v, 2, 1));
  auto out = modality_forward(q, 1, 2, v, *p.vis, cfg, Modality::vis);
  auto direct = hc_hub(q, 2, v.context, cfg.sel, p.vis->stages[0].hc, cfg.hub);
  EXPECT_EQ(out.value(), direct.value());
}

TEST(ModalityForward, WithoutHierarchyAttendsOverMergedTokens) {
  Rng rng(12);
  auto cfg = small_config();
  cfg.flags.use_hierarchy = false;
  auto p = init_params<double>(cfg, rng);
  auto v = random_video(rng, 4, 3, 2, 4);
  Tape<double> tape;
  auto q = tape.constant(actor_row(v, 2, 1));
  auto out = modality_forward(q, 1, 2, v, *p.vis, cfg, Modality::vis);
  auto merged = merge_tokens(v.vis, v.context);
  auto mem = build_memory(merged, 2, cfg.sel, {.exclude_token = 1});
  EXPECT_EQ(mem.current.rows(), 2u + 2u);  // two other actors, two context tokens
  auto manual = hub_forward(q, mem, p.vis->stages[0].hc, cfg.hub);
  EXPECT_EQ(out.value(), manual.value());
}

TEST(ModalityForward, BatchedClipMatchesPerActor) {
  Rng rng(13);
  for (bool hierarchy : {true, false}) {
    auto cfg = small_config();
    cfg.depth = 2;
    cfg.flags.use_hierarchy = hierarchy;
    auto p = init_params<double>(cfg, rng);
    auto v = random_video(rng, 5, 3, 4, 4);
    Tape<double> tape;
    auto batched = refine_clip(tape.constant(v.vis.clip(3)), 3, v, *p.vis, cfg, Modality::vis);
    for (std::size_t i = 0; i < 3; ++i) {
      auto one = modality_forward(tape.constant(actor_row(v, 3, i)), i, 3, v, *p.vis, cfg,
                                  Modality::vis);
      for (std::size_t j = 0; j < 4; ++j)
        EXPECT_NEAR(batched.value()(i, j), one.value()[j], 1e-12);
    }
  }
}

TEST(ModalityForward, GradCheck) {
  Rng rng(14);
  auto cfg = small_config();
  auto p = init_params<double>(cfg, rng);
  auto v = random_video(rng, 4, 2, 3, 4);
  Parameter<double> q{"q", "input", actor_row(v, 1, 0)};
  Objective<double> obj = [&](Tape<double>& t) {
    return computer::testing::weighted_sum(
        modality_forward(t.parameter(q), 0, 1, v, *p.vis, cfg, Modality::vis));
  };
  std::vector<Parameter<double>*> ps{&q};
  p.vis->for_each([&](Parameter<double>& x) { ps.push_back(&x); });
  auto r = grad_check<double>(obj, ps, 1e-5);
  for (const auto& [group, err] : r.by_group()) EXPECT_LT(err, 1e-5) << group;
}

TEST(ModalityForward, SingleClipTemporalAblationIsIdentical) {
  Rng rng(15);
  auto cfg = small_config();
  auto p = init_params<double>(cfg, rng);
  auto v = random_video(rng, 1, 3, 2, 4);
  auto off = cfg;
  off.flags.use_temporal = false;
  Tape<double> tape;
  auto a = forward_video(tape, v, p, cfg);
  auto b = forward_video(tape, v, p, off);
  EXPECT_EQ(a.scores.value(), b.scores.value());
}

TEST(ModalityForward, TemporalAblationUsesNullTokens) {
  Rng rng(16);
  auto cfg = small_config();
  cfg.flags.use_temporal = false;
  auto p = init_params<double>(cfg, rng);
  auto v = random_video(rng, 4, 2, 3, 4);
  // Changing every other clip leaves clip 2's output unchanged.
  auto x = v.vis.tokens_tensor(), c = v.context.tokens_tensor();
  for (std::size_t t : {0, 1, 3})
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 4; ++j) x(t, i, j) += 1.0;
  VideoFeatures<double> w(c, x, v.key);
  Tape<double> tape;
  auto q = tape.constant(actor_row(v, 2, 0));
  Tensor<double> a = modality_forward(q, 0, 2, v, *p.vis, cfg, Modality::vis).value();
  Tensor<double> b = modality_forward(q, 0, 2, w, *p.vis, cfg, Modality::vis).value();
  EXPECT_EQ(a, b);
}

TEST(ModalityForward, MatchedMemoryUsesKeypointRows) {
  Rng rng(17);
  auto cfg = small_config();
  auto p = init_params<double>(cfg, rng);
  auto v = random_video(rng, 3, 2, 2, 4);
  auto matched = cfg;
  matched.hh_memory = HhMemory::matched;
  Tape<double> tape;
  auto q = tape.constant(actor_row(v, 1, 0));
  auto a = modality_forward(q, 0, 1, v, *p.key, matched, Modality::key);
  auto& st = p.key->stages[0];
  auto manual = hc_hub(hh_hub(q, 0, 1, *v.key_tokens, cfg.sel, st.hh, cfg.hub), 1, v.context,
                       cfg.sel, st.hc, cfg.hub);
  EXPECT_EQ(a.value(), manual.value());
  auto b = modality_forward(q, 0, 1, v, *p.key, cfg, Modality::key);
  EXPECT_GT(max_abs_diff(a.value(), b.value()), 0.0);
}

TEST(Predict, StalScoresAreIndependentSigmoids) {
  Rng rng(18);
  auto cfg = small_config();
  auto p = init_params<double>(cfg, rng);
  auto v = random_video(rng, 3, 2, 3, 4);
  Tape<double> tape;
  auto a = forward_video(tape, v, p, cfg).scores.value();
  EXPECT_EQ(a.shape(), (Shape{6, 3}));
  for (double s : a.data()) {
    EXPECT_GT(s, 0.0);
    EXPECT_LT(s, 1.0);
  }
  p.aggregator.b2.value[1] += 0.7;  // shifts only logit 1
  Tape<double> fresh;
  auto b = forward_video(fresh, v, p, cfg).scores.value();
  for (std::size_t r = 0; r < 6; ++r) {
    EXPECT_EQ(a(r, 0), b(r, 0));
    EXPECT_EQ(a(r, 2), b(r, 2));
    EXPECT_GT(b(r, 1), a(r, 1));
  }
}

TEST(Predict, GarScoresFormASimplex) {
  Rng rng(19);
  auto cfg = small_config();
  cfg.mode = TaskMode::gar;
  cfg.classes = 5;
  auto p = init_params<double>(cfg, rng);
  auto v = random_video(rng, 3, 3, 2, 4);
  Tape<double> tape;
  auto s = forward_video(tape, v, p, cfg).scores.value();
  EXPECT_EQ(s.shape(), (Shape{1, 5}));
  double sum = 0;
  for (double x : s.data()) sum += x;
  EXPECT_NEAR(sum, 1.0, 1e-12);
}

TEST(Predict, GarWithOneActorAndClipIsSoftmaxOfTheRow) {
  Rng rng(20);
  auto cfg = small_config();
  cfg.mode = TaskMode::gar;
  auto p = init_params<double>(cfg, rng);
  auto v = random_video(rng, 1, 1, 2, 4);
  Tape<double> tape;
  auto out = forward_video(tape, v, p, cfg);
  auto logits = p.aggregator.forward(concat_cols<double>({*out.vis, *out.key}));
  auto expected = row_softmax_values(logits.value());
  EXPECT_LT(max_abs_diff(out.scores.value(), expected), 1e-15);
}

TEST(Predict, ActorRelabelingPermutesPredictions) {
  Rng rng(21);
  for (TaskMode mode : {TaskMode::stal, TaskMode::gar}) {
    auto cfg = small_config();
    cfg.mode = mode;
    auto p = init_params<double>(cfg, rng);
    auto v = random_video(rng, 4, 3, 2, 4);
    const std::vector<std::size_t> perm{2, 0, 1};
    auto permute = [&](const Tensor<double>& x) {
      Tensor<double> y(x.shape());
      for (std::size_t t = 0; t < x.dim(0); ++t)
        for (std::size_t i = 0; i < 3; ++i)
          for (std::size_t j = 0; j < x.dim(2); ++j) y(t, i, j) = x(t, perm[i], j);
      return y;
    };
    VideoFeatures<double> w(v.context.tokens_tensor(), permute(v.vis.tokens_tensor()),
                            permute(v.key));
    Tape<double> tape;
    auto a = forward_video(tape, v, p, cfg).scores.value();
    auto b = forward_video(tape, w, p, cfg).scores.value();
    if (mode == TaskMode::gar) {
      EXPECT_LT(max_abs_diff(a, b), 1e-12);
      continue;
    }
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t c = 0; c < cfg.classes; ++c)
          EXPECT_NEAR(b(t * 3 + i, c), a(t * 3 + perm[i], c), 1e-12);
  }
}

TEST(Predict, SingleModalityBypassesConcatenation) {
  Rng rng(22);
  auto cfg = small_config();
  cfg.flags.use_vis = false;
  cfg.flags.use_consistency = false;
  auto p = init_params<double>(cfg, rng);
  EXPECT_FALSE(p.vis.has_value());
  EXPECT_EQ(p.aggregator.in(), cfg.dim);
  auto v = random_video(rng, 2, 2, 2, 4);
  Tape<double> tape;
  auto out = forward_video(tape, v, p, cfg);
  EXPECT_FALSE(out.vis.has_value());
  EXPECT_EQ(out.scores.value().shape(), (Shape{4, 3}));
}

TEST(Predict, RejectsMismatchedWidth) {
  Rng rng(23);
  auto cfg = small_config();
  auto p = init_params<double>(cfg, rng);
  auto v = random_video(rng, 2, 2, 2, 6);
  Tape<double> tape;
  EXPECT_THROW(forward_video(tape, v, p, cfg), DimensionError);
}

TEST(KeypointEmbedder, ZeroWeightsGiveZeroEmbedding) {
  Rng rng(24);
  auto mlp = Mlp<double>::init(rng, kKeypointWidth, 8, 4, "kp", "keypoint_embedder");
  mlp.for_each([](Parameter<double>& x) { x.value.fill(0.0); });
  Tape<double> tape;
  auto e = embed_keypoints(tape, random_tensor(rng, kKeypoints, 3, 0.0, 1.0), mlp);
  EXPECT_EQ(e.value(), Tensor<double>({1, 4}));
}

TEST(KeypointEmbedder, ClampsWithWarning) {
  Rng rng(25);
  auto mlp = Mlp<double>::init(rng, kKeypointWidth, 8, 4, "kp", "keypoint_embedder");
  auto kp = random_tensor(rng, kKeypoints, 3, 0.0, 1.0);
  Tape<double> tape;
  embed_keypoints(tape, kp, mlp);
  EXPECT_TRUE(tape.warnings().empty());
  auto clamped = kp;
  kp(3, 0) = 1.7;
  kp(5, 1) = -0.4;
  clamped(3, 0) = 1.0;
  clamped(5, 1) = 0.0;
  auto a = embed_keypoints(tape, kp, mlp);
  EXPECT_EQ(tape.warnings().size(), 1u);
  auto b = embed_keypoints(tape, clamped, mlp);
  EXPECT_EQ(a.value(), b.value());
}

TEST(KeypointEmbedder, FixedWeightFixture) {
  // w1[i][h] = 0.01 (i + 1) - 0.02 h, b1[h] = 0.1 h - 0.3; w2[h][j] = 0.05 (h - j), b2[j] = j.
  Mlp<double> mlp{{"w1", "g", Tensor<double>({51, 8})},
                  {"b1", "g", Tensor<double>({1, 8})},
                  {"w2", "g", Tensor<double>({8, 4})},
                  {"b2", "g", Tensor<double>({1, 4})}};
  for (std::size_t i = 0; i < 51; ++i)
    for (std::size_t h = 0; h < 8; ++h) mlp.w1.value(i, h) = 0.01 * double(i + 1) - 0.02 * double(h);
  for (std::size_t h = 0; h < 8; ++h) mlp.b1.value[h] = 0.1 * double(h) - 0.3;
  for (std::size_t h = 0; h < 8; ++h)
    for (std::size_t j = 0; j < 4; ++j) mlp.w2.value(h, j) = 0.05 * (double(h) - double(j));
  for (std::size_t j = 0; j < 4; ++j) mlp.b2.value[j] = double(j);
  Tensor<double> kp({kKeypoints, 3});
  for (std::size_t k = 0; k < kKeypoints; ++k) {
    kp(k, 0) = double(k) / 16.0;
    kp(k, 1) = 1.0 - double(k) / 16.0;
    kp(k, 2) = 0.5;
  }
  Tape<double> tape;
  auto e = embed_keypoints(tape, kp, mlp).value();
  // Reference by direct loops.
  std::vector<double> hidden(8);
  for (std::size_t h = 0; h < 8; ++h) {
    double s = mlp.b1.value[h];
    for (std::size_t i = 0; i < 51; ++i) s += kp[i] * mlp.w1.value(i, h);
    hidden[h] = std::max(s, 0.0);
  }
  for (std::size_t j = 0; j < 4; ++j) {
    double s = mlp.b2.value[j];
    for (std::size_t h = 0; h < 8; ++h) s += hidden[h] * mlp.w2.value(h, j);
    EXPECT_NEAR(e[j], s, 1e-12);
  }
}

TEST(KeypointEmbedder, GradCheck) {
  Rng rng(26);
  auto mlp = Mlp<double>::init(rng, kKeypointWidth, 6, 4, "kp", "keypoint_embedder");
  // Keep hidden units away from the relu kink.
  mlp.b1.value.fill(0.3);
  auto kp = random_tensor(rng, kKeypoints, 3, 0.05, 0.95);
  Objective<double> obj = [&](Tape<double>& t) {
    return computer::testing::weighted_sum(embed_keypoints(t, kp, mlp));
  };
  std::vector<Parameter<double>*> ps;
  mlp.for_each([&](Parameter<double>& x) { ps.push_back(&x); });
  EXPECT_LT(grad_check<double>(obj, ps, 1e-5).max_rel_err(), 1e-5);
}

TEST(ForwardVideo, RawKeypointsRunThroughTheEmbedder) {
  Rng rng(27);
  auto cfg = small_config();
  cfg.raw_keypoints = true;
  auto p = init_params<double>(cfg, rng);
  ASSERT_TRUE(p.embedder.has_value());
  auto v = random_video(rng, 3, 2, 2, 4, kKeypointWidth);
  EXPECT_FALSE(v.key_tokens.has_value());
  Tape<double> tape;
  auto out = forward_video(tape, v, p, cfg);
  EXPECT_EQ(out.key->value().shape(), (Shape{6, 4}));
  EXPECT_TRUE(out.scores.value().all_finite());
}
