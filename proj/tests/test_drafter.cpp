#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "driftlab/drafter.hpp"

using namespace driftlab;

namespace {

std::vector<TokenId> random_tokens(std::size_t n, RngStream rng) {
  std::vector<TokenId> t(n);
  for (auto& x : t) x = 10 + rng.uniform_int(246);
  t[0] = 1;
  return t;
}

std::vector<double> as_vector(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

struct Fixture {
  Verifier verifier{VerifierConfig{}, RngStream(100)};
  std::vector<TokenId> prompt = random_tokens(14, RngStream(101));
  VerifierOutput vout = verifier.forward(prompt);

  Drafter make(Variant v, double eps = 1e-6, std::uint64_t seed = 7) const {
    DrafterConfig c = DrafterConfig::preset(v, verifier.config());
    c.norm_eps = eps;
    return Drafter(c, verifier, RngStream(seed));
  }
};

}  // namespace

TEST(DrafterConfig, PresetsAndValidation) {
  for (auto v : kAllVariants) {
    const auto c = DrafterConfig::preset(v);
    EXPECT_EQ(c.variant(), v);
    EXPECT_EQ(c.d_in(), 128);
    EXPECT_EQ(DrafterConfig::from_json(c.to_json()), c);
    EXPECT_EQ(variant_from_string(to_string(v)), v);
  }
  EXPECT_TRUE(DrafterConfig::preset(Variant::post_norm).per_stream_fusion_norm);
  DrafterConfig bad = DrafterConfig::preset(Variant::post_norm);
  bad.per_stream_fusion_norm = false;
  EXPECT_THROW(bad.validate(), ConfigError);
  VerifierConfig other;
  other.d_model = 32;
  other.d_head = 8;
  EXPECT_THROW(DrafterConfig::preset(Variant::pre_norm).check_compatible(other), ConfigError);
  EXPECT_THROW(variant_from_string("sideways"), ConfigError);
}

TEST(Fuse, ShapesAndPerStreamScaleInvariance) {
  Fixture f;
  const Drafter post = f.make(Variant::post_norm, 0.0);
  const Drafter pre = f.make(Variant::pre_norm, 0.0);
  const Tensor base_post = post.fuse(f.vout.taps);
  EXPECT_EQ(base_post.shape(), (Shape{14, 64}));

  HiddenTaps scaled = f.vout.taps;
  scaled.high = scale(f.vout.taps.high, 100.0);
  scaled.low = scale(f.vout.taps.low, 0.3);
  const Tensor post_scaled = post.fuse(scaled);
  for (std::size_t i = 0; i < base_post.size(); ++i) EXPECT_NEAR(post_scaled.data()[i], base_post.data()[i], 1e-12);
  EXPECT_NE(as_vector(pre.fuse(scaled)), as_vector(pre.fuse(f.vout.taps)));
}

TEST(Fuse, UnitGainStreamsHaveUnitRms) {
  Fixture f;
  const Drafter post = f.make(Variant::post_norm, 0.0);
  const auto& w = post.weights();
  for (const auto& [tap, gain] : {std::pair{f.vout.taps.low, w.norm_low}, std::pair{f.vout.taps.mid, w.norm_mid},
                                  std::pair{f.vout.taps.high, w.norm_high}}) {
    const Tensor n = rms_norm(tap, gain, 0.0);
    for (std::size_t r = 0; r < n.rows(); ++r) EXPECT_NEAR(rms(n.row(r)), 1.0, 1e-12);
  }
}

TEST(Fuse, WidthMismatchIsConfigError) {
  Fixture f;
  const Drafter d = f.make(Variant::pre_norm);
  HiddenTaps bad{Tensor::zeros({3, 32}), Tensor::zeros({3, 32}), Tensor::zeros({3, 32})};
  EXPECT_THROW(d.fuse(bad), ConfigError);
}

TEST(DrafterStep, PostNormUnitGainPinsRmsAtOne) {
  Fixture f;
  for (auto v : {Variant::post_norm, Variant::gated_post_norm}) {
    const Drafter d = f.make(v, 0.0);
    for (std::uint64_t trial = 0; trial < 5; ++trial) {
      const auto prompt = random_tokens(6 + trial * 3, RngStream(200 + trial));
      const auto out = f.verifier.forward(prompt);
      ChainState st = begin_chain(d, out.taps, prompt, 12, AttentionMode{});
      const auto draft = draft_chain(d, st, 12, 16, AttentionMode{}, Sampling{});
      ASSERT_EQ(draft.trace.steps.size(), 16u);
      for (const auto& s : draft.trace.steps) EXPECT_NEAR(s.h_rms, 1.0, 1e-10) << to_string(v) << " step " << s.step;
    }
  }
}

TEST(DrafterStep, PostNormLearnedGainKeepsRmsFlat) {
  Fixture f;
  Drafter d = f.make(Variant::post_norm);
  RngStream rng(5);
  for (auto& g : d.mutable_weights().final_norm.mutable_data()) g = 1.0 + 0.1 * rng.normal();
  ChainState st = begin_chain(d, f.vout.taps, f.prompt, 12, AttentionMode{});
  const auto draft = draft_chain(d, st, 12, 8, AttentionMode{}, Sampling{});
  std::vector<double> r;
  for (const auto& s : draft.trace.steps) r.push_back(s.h_rms);
  const double mean = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
  double var = 0;
  for (double x : r) var += (x - mean) * (x - mean);
  EXPECT_LE(std::sqrt(var / static_cast<double>(r.size())), 0.05 * mean);
}

TEST(DrafterStep, PreAndPostLogitsCoincideAtStepOne) {
  // Same weights, same z2: pre-norm's LM(rms_norm(z2)) equals post-norm's
  // LM(h_out) with h_out = rms_norm(z2).
  Fixture f;
  const Drafter post = f.make(Variant::post_norm);
  DrafterConfig pre_cfg = post.config();
  pre_cfg.norm_placement = NormPlacement::pre;
  const Drafter pre(pre_cfg, post.weights());
  const Tensor h_fc = post.fuse(f.vout.taps);
  ChainState a = begin_chain(post, f.vout.taps, f.prompt, 20, AttentionMode{});
  ChainState b = a;
  const auto ra = post.step(a, 20, AttentionMode{});
  const auto rb = pre.step(b, 20, AttentionMode{});
  EXPECT_EQ(ra.logits, rb.logits);
  EXPECT_NE(ra.h_out, rb.h_out);
  (void)h_fc;
}

TEST(DrafterStep, GateLimits) {
  Fixture f;
  Drafter gated = f.make(Variant::gated);
  DrafterConfig plain_cfg = gated.config();
  plain_cfg.gated_attention = false;

  // Bias +20: sigma ~ 1 - 2e-9, so the gate is transparent.
  for (auto& b : gated.mutable_weights().b_gate.mutable_data()) b = 20.0;
  const Drafter plain(plain_cfg, gated.weights());
  ChainState s1 = begin_chain(gated, f.vout.taps, f.prompt, 30, AttentionMode{});
  ChainState s2 = s1;
  const auto open = gated.step(s1, 30, AttentionMode{});
  const auto ref = plain.step(s2, 30, AttentionMode{});
  for (std::size_t i = 0; i < open.h_out.size(); ++i) EXPECT_NEAR(open.h_out[i], ref.h_out[i], 1e-8);

  // Large negative bias: attention contributes nothing, matching W_O = 0.
  for (auto& b : gated.mutable_weights().b_gate.mutable_data()) b = -60.0;
  DrafterWeights no_attn = gated.weights();
  no_attn.wo = Tensor::zeros({64, 64});
  no_attn.b_gate = Tensor::zeros({64});
  const Drafter residual_only(plain_cfg, no_attn);
  ChainState s3 = begin_chain(gated, f.vout.taps, f.prompt, 30, AttentionMode{});
  ChainState s4 = s3;
  const auto closed = gated.step(s3, 30, AttentionMode{});
  const auto bare = residual_only.step(s4, 30, AttentionMode{});
  for (std::size_t i = 0; i < closed.h_out.size(); ++i) EXPECT_NEAR(closed.h_out[i], bare.h_out[i], 1e-12);
}

TEST(Noise, AlphaZeroIsBitIdentical) {
  Fixture f;
  for (auto v : kAllVariants) {
    const Drafter d = f.make(v);
    for (auto pathway : {NoiseSpec::Pathway::hidden_states, NoiseSpec::Pathway::embeddings}) {
      NoiseSpec noise{pathway, 0.0, RngStream(3)};
      ChainState a = begin_chain(d, f.vout.taps, f.prompt, 40, AttentionMode{}, &noise);
      ChainState b = begin_chain(d, f.vout.taps, f.prompt, 40, AttentionMode{});
      const auto da = draft_chain(d, a, 40, 6, AttentionMode{}, Sampling{}, nullptr, &noise);
      const auto db = draft_chain(d, b, 40, 6, AttentionMode{}, Sampling{});
      EXPECT_EQ(da.tokens, db.tokens);
      EXPECT_EQ(a.h_prev, b.h_prev);
      EXPECT_EQ(a.cache.k, b.cache.k);
      for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(da.trace.steps[j].attention_row, db.trace.steps[j].attention_row);
    }
  }
}

TEST(Noise, SecondMomentScalesWithAlpha) {
  RngStream rng(77);
  std::vector<double> x(64);
  for (auto& v : x) v = 3.0 * rng.normal() + 0.5;
  const Tensor t = Tensor::matrix(1, 64, x);
  const double r2 = rms(x) * rms(x);
  for (double alpha : {0.1, 0.5, 1.0, 2.0}) {
    RngStream draws(static_cast<std::uint64_t>(alpha * 1000));
    double acc = 0.0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
      const double r = rms(apply_noise(t, alpha, draws).data());
      acc += r * r;
    }
    EXPECT_NEAR(acc / n / (r2 * (1 + alpha * alpha)), 1.0, 0.05) << "alpha " << alpha;
  }
  RngStream draws(9);
  double acc = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double r = rms(apply_noise(t, std::numeric_limits<double>::infinity(), draws).data());
    acc += r * r;
  }
  EXPECT_NEAR(acc / 10000 / r2, 1.0, 0.05);
  EXPECT_THROW(apply_noise(t, -1.0, draws), ConfigError);
}

TEST(Pin, RescalesStoredStateWithoutChangingDirection) {
  Fixture f;
  for (auto v : kAllVariants) {
    const Drafter d = f.make(v);
    ChainState a = begin_chain(d, f.vout.taps, f.prompt, 50, AttentionMode{});
    ChainState b = a;
    const double target = a.pin_target;
    EXPECT_NEAR(target, rms(d.fuse(f.vout.taps).row(13)), 0.0);
    const auto pinned = d.step(a, 50, AttentionMode{}, nullptr, target);
    const auto free = d.step(b, 50, AttentionMode{});
    EXPECT_EQ(pinned.h_out, free.h_out);
    EXPECT_EQ(pinned.logits, free.logits);
    const double s = target / rms(free.h_out);
    for (std::size_t i = 0; i < free.h_out.size(); ++i) EXPECT_EQ(a.h_prev[i], free.h_out[i] * s);
    EXPECT_NEAR(rms(a.h_prev), target, 1e-12 * target);
  }
}

TEST(Pin, InvalidTargetsAndDegenerateState) {
  Fixture f;
  Drafter d = f.make(Variant::post_norm);
  ChainState st = begin_chain(d, f.vout.taps, f.prompt, 50, AttentionMode{});
  ChainState copy = st;
  EXPECT_THROW(d.step(copy, 50, AttentionMode{}, nullptr, 0.0), ConfigError);
  EXPECT_THROW(d.step(copy, 50, AttentionMode{}, nullptr, -1.0), ConfigError);
  for (auto& g : d.mutable_weights().final_norm.mutable_data()) g = 0.0;
  EXPECT_THROW(d.step(st, 50, AttentionMode{}, nullptr, 1.0), DegenerateInputError);
}

TEST(DraftChain, CacheGrowsOneEntryPerStep) {
  Fixture f;
  const Drafter d = f.make(Variant::gated);
  ChainState st = begin_chain(d, f.vout.taps, f.prompt, 60, AttentionMode{});
  EXPECT_EQ(st.cache.length(), 13u);
  EXPECT_EQ(st.step_index, 1);
  TokenId input = 60;
  for (int j = 1; j <= 5; ++j) {
    EXPECT_EQ(st.cache.length(), st.prompt_length + static_cast<std::size_t>(st.step_index - 1));
    const auto r = d.step(st, input, AttentionMode{});
    EXPECT_NEAR(std::accumulate(r.attention_row.begin(), r.attention_row.end(), 0.0), 1.0, 1e-12);
    input = argmax(r.logits);
  }
}

TEST(DraftChain, SingleStepAndDeterminism) {
  Fixture f;
  const Drafter d = f.make(Variant::pre_norm);
  ChainState a = begin_chain(d, f.vout.taps, f.prompt, 60, AttentionMode{});
  ChainState b = a, c = a, e = a;
  const auto one = draft_chain(d, a, 60, 1, AttentionMode{}, Sampling{});
  EXPECT_EQ(one.tokens.size(), 1u);
  EXPECT_EQ(one.trace.steps.size(), 1u);
  EXPECT_EQ(one.trace.steps[0].step, 1);
  EXPECT_THROW(draft_chain(d, b, 60, 0, AttentionMode{}, Sampling{}), ConfigError);
  RngStream r1(4), r2(4);
  const auto s1 = draft_chain(d, c, 60, 6, AttentionMode{}, Sampling{0.7}, &r1);
  const auto s2 = draft_chain(d, e, 60, 6, AttentionMode{}, Sampling{0.7}, &r2);
  EXPECT_EQ(s1.tokens, s2.tokens);
  for (std::size_t j = 0; j < 6; ++j) {
    EXPECT_NEAR(std::accumulate(s1.q[j].begin(), s1.q[j].end(), 0.0), 1.0, 1e-12);
    EXPECT_GT(s1.q[j][static_cast<std::size_t>(s1.tokens[j])], 0.0);
  }
}

TEST(DraftChain, ChunkedPrefillMatchesSinglePass) {
  Fixture f;
  const Drafter d = f.make(Variant::post_norm);
  const Tensor h_fc = d.fuse(f.vout.taps);
  ChainState whole, parts;
  d.prefill(whole, slice_rows(h_fc, 0, 13), std::span(f.prompt).subspan(1), 0, AttentionMode{});
  d.prefill(parts, slice_rows(h_fc, 0, 5), std::span(f.prompt).subspan(1, 5), 0, AttentionMode{});
  d.prefill(parts, slice_rows(h_fc, 5, 13), std::span(f.prompt).subspan(6), 5, AttentionMode{});
  EXPECT_EQ(whole.cache.k, parts.cache.k);
  EXPECT_EQ(whole.cache.v, parts.cache.v);
  EXPECT_EQ(whole.cache.positions, parts.cache.positions);
}

TEST(DraftChain, WindowedChainsStayInsideAdmittedSet) {
  Fixture f;
  const Drafter d = f.make(Variant::pre_norm);
  for (const auto& mode : {AttentionMode::swa(4), AttentionMode::swa_bos(4), AttentionMode::swa_prefix(3, 2)}) {
    ChainState st = begin_chain(d, f.vout.taps, f.prompt, 70, mode);
    const auto draft = draft_chain(d, st, 70, 8, mode, Sampling{});
    for (const auto& s : draft.trace.steps) {
      const int q = s.key_positions.back();
      for (std::size_t j = 0; j < s.key_positions.size(); ++j) {
        if (!mode.admits(q, s.key_positions[j])) {
          EXPECT_EQ(s.attention_row[j], 0.0);
          for (std::size_t h = 0; h < 4; ++h) EXPECT_EQ(s.head_rows[h * s.key_positions.size() + j], 0.0);
        }
      }
      if (mode.kind == AttentionMode::Kind::swa_bos) {
        EXPECT_GT(s.attention_row[0], 0.0);
      }
    }
  }
}

TEST(DrafterCheckpoint, RoundTripIsBitExact) {
  Fixture f;
  for (auto v : kAllVariants) {
    const Drafter d = f.make(v);
    const auto path = std::filesystem::temp_directory_path() / ("driftlab_test_" + to_string(v) + ".ckpt");
    d.save(path);
    const Drafter e = Drafter::load(path);
    EXPECT_EQ(e.config(), d.config());
    EXPECT_EQ(e.hash(), d.hash());
    const auto a = d.weights().named(d.config()), b = e.weights().named(e.config());
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(as_vector(a[i].tensor), as_vector(b[i].tensor));
    std::filesystem::remove(path);
  }
}

TEST(DrafterWeights, EmbeddingIsAFrozenCopy) {
  Fixture f;
  const Drafter d = f.make(Variant::pre_norm);
  EXPECT_EQ(as_vector(d.weights().embed), as_vector(f.verifier.weights().embed));
  EXPECT_FALSE(d.weights().embed.same_node(f.verifier.weights().embed));
  for (const auto& p : d.trainable_parameters()) EXPECT_FALSE(p.same_node(d.weights().embed));
}
