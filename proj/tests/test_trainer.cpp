#include <cmath>

#include <gtest/gtest.h>

#include "driftlab/gradcheck.hpp"
#include "driftlab/trainer.hpp"

using namespace driftlab;

namespace {

VerifierConfig small_verifier() {
  VerifierConfig c;
  c.n_layers = 3;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_head = 8;
  c.d_mlp = 32;
  c.vocab_size = 64;
  c.max_positions = 128;
  return c;
}

CorpusConfig small_corpus(int n) {
  CorpusConfig c;
  c.vocab_size = 64;
  c.n_conversations = n;
  c.system_len = 3;
  c.user_len_min = 3;
  c.user_len_max = 5;
  return c;
}

// Conversation with the given tokens; roles follow the template markers.
Conversation tagged(const std::vector<TokenId>& tokens, const std::vector<Role>& roles) {
  Conversation c;
  c.tokens = tokens;
  c.roles = roles;
  return c;
}

double cross_entropy(std::span<const double> logits, std::span<const double> target) {
  const auto p = softmax_row(logits);
  double ce = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (target[i] > 0) ce -= target[i] * std::log(p[i]);
  return ce;
}

}  // namespace

TEST(TrainConfig, Validation) {
  TrainConfig tc;
  EXPECT_NO_THROW(tc.validate());
  tc.ttt_depth = 0;
  EXPECT_THROW(tc.validate(), ConfigError);
  tc.ttt_depth = 4;
  tc.window = 4;
  EXPECT_THROW(tc.validate(), ConfigError);
  tc.window = 5;
  EXPECT_NO_THROW(tc.validate());
  const auto round = TrainConfig::from_json(tc.to_json());
  EXPECT_EQ(round.to_json(), tc.to_json());
}

TEST(TttMask, WindowNeverAdmitsOldKeys) {
  for (int W : {2, 3, 5, 100}) {
    for (int step = 1; step <= 4; ++step) {
      if (W < step + 1) continue;
      const std::size_t n = 9;
      const auto mask = ttt_mask(n, step, W);
      const auto j = static_cast<std::size_t>(step);
      for (std::size_t t = 0; t < n; ++t) {
        const int pq = static_cast<int>(t + j - 1);
        int admitted = 0;
        for (std::size_t i = 1; i <= j; ++i)
          for (std::size_t s = 0; s < n; ++s) {
            const bool on = mask[t * (j * n) + (i - 1) * n + s] != 0;
            const int ps = static_cast<int>(s + i - 1);
            if (on) {
              ++admitted;
              EXPECT_LT(pq - ps, W);
              EXPECT_GE(pq, ps);
              EXPECT_TRUE(i == 1 ? s <= t : s == t);
            }
          }
        // Own entry plus the in-window step-1 history and chain entries.
        const int expected_history = std::min<int>(static_cast<int>(t) + 1, W - step + 1);
        EXPECT_EQ(admitted, expected_history + step - 1) << "W=" << W << " step=" << step << " t=" << t;
      }
    }
  }
}

class TttFixture : public ::testing::Test {
 protected:
  Verifier verifier{small_verifier(), RngStream(1)};
  std::vector<Conversation> corpus = generate_corpus(small_corpus(6), RngStream(2));

  Drafter make(Variant v) const {
    return Drafter(DrafterConfig::preset(v, verifier.config()), verifier, RngStream(3));
  }
};

TEST_F(TttFixture, DepthOneIsSingleStepDistillation) {
  const Drafter d = make(Variant::pre_norm);
  const auto& c = corpus[0];
  const auto teacher = teacher_outputs(verifier, c);
  TrainConfig tc;
  tc.ttt_depth = 1;
  const auto r = ttt_unroll(d, c, teacher, tc, {}, false, false);
  ASSERT_EQ(r.step_sums.size(), 1u);
  const std::size_t V = 64, n = c.size() - 1;
  double expected = 0, w = 0;
  for (std::size_t t = 0; t + 2 < c.size(); ++t) {
    if (c.roles[t + 2] != Role::assistant) continue;
    expected += cross_entropy(r.step_logits[0].data().subspan(t * V, V),
                              std::span(teacher.probs).subspan((t + 1) * V, V));
    w += 1;
  }
  EXPECT_GT(w, 0);
  EXPECT_EQ(r.step_weights[0], w);
  EXPECT_NEAR(r.total.item(), expected / w, 1e-12);
  EXPECT_EQ(r.step_logits[0].rows(), n);
}

TEST_F(TttFixture, UnrollMatchesStepwiseInference) {
  // Teacher-forced inference chains from every position reproduce the batched
  // training logits at every depth.
  for (auto v : kAllVariants) {
    const Drafter d = make(v);
    const auto& c = corpus[1];
    const auto teacher = teacher_outputs(verifier, c);
    TrainConfig tc;
    tc.ttt_depth = 4;
    tc.window = 6;
    const auto r = ttt_unroll(d, c, teacher, tc, {}, false, false);
    const std::size_t V = 64, T = c.size();
    AttentionMode window = AttentionMode::swa(tc.window);
    for (std::size_t t : {0ul, 3ul, 10ul, T - 4, T - 2}) {
      HiddenTaps prefix{slice_rows(teacher.taps.low, 0, t + 1), slice_rows(teacher.taps.mid, 0, t + 1),
                        slice_rows(teacher.taps.high, 0, t + 1)};
      ChainState st = begin_chain(d, prefix, std::span(c.tokens).first(t + 1), c.tokens[t + 1], window);
      for (std::size_t j = 1; j <= 4; ++j) {
        const TokenId input = t + j < T ? c.tokens[t + j] : 0;
        const auto step = d.step(st, input, window);
        const auto train_row = r.step_logits[j - 1].data().subspan(t * V, V);
        for (std::size_t i = 0; i < V; ++i) {
          ASSERT_NEAR(step.logits[i], train_row[i], 1e-10) << to_string(v) << " t=" << t << " j=" << j;
        }
      }
    }
  }
}

TEST_F(TttFixture, UnrollUsesTheReferenceMask) {
  const Drafter d = make(Variant::gated);
  const auto& c = corpus[5];
  TrainConfig tc;
  tc.ttt_depth = 3;
  tc.window = 7;
  const auto r = ttt_unroll(d, c, teacher_outputs(verifier, c), tc, {}, true, false);
  std::vector<std::uint8_t> expected;
  for (int j = 1; j <= 3; ++j) {
    const auto m = ttt_mask(c.size() - 1, j, tc.window);
    expected.insert(expected.end(), m.begin(), m.end());
  }
  EXPECT_EQ(r.masks, expected);
}

TEST_F(TttFixture, RowPruningLeavesLossAndGradientUnchanged) {
  for (auto v : {Variant::pre_norm, Variant::gated_post_norm}) {
    Drafter d = make(v);
    d.set_trainable(true);
    const auto& c = corpus[0];
    const auto teacher = teacher_outputs(verifier, c);
    TrainConfig tc;
    tc.ttt_depth = 4;
    tc.window = 9;
    auto grads = [&](bool prune) {
      for (auto& p : d.trainable_parameters()) p.zero_grad();
      const auto r = ttt_unroll(d, c, teacher, tc, {}, false, prune);
      r.total.backward();
      std::vector<double> g{r.total.item()};
      for (const auto& p : d.trainable_parameters()) g.insert(g.end(), p.grad().begin(), p.grad().end());
      return std::pair{g, r.active_rows};
    };
    const auto [dense, dense_rows] = grads(false);
    const auto [pruned, pruned_rows] = grads(true);
    ASSERT_EQ(dense.size(), pruned.size());
    for (std::size_t i = 0; i < dense.size(); ++i) ASSERT_NEAR(dense[i], pruned[i], 1e-13) << i;
    EXPECT_LT(pruned_rows.back().size(), dense_rows.back().size());
  }
}

TEST_F(TttFixture, LossGradientMatchesFiniteDifferences) {
  Conversation c = corpus[2];
  c.tokens.resize(6);
  c.roles.resize(6);
  c.roles[4] = Role::assistant;
  c.roles[5] = Role::assistant;
  for (auto v : kAllVariants) {
    Drafter d = make(v);
    const auto teacher = teacher_outputs(verifier, c);
    TrainConfig tc;
    tc.ttt_depth = 3;
    tc.window = 4;
    tc.loss_mask = LossMask::all_positions;
    auto params = d.trainable_parameters();
    GradCheckOptions opts;
    opts.max_coords_per_param = 24;
    const auto report = grad_check([&] { return ttt_unroll(d, c, teacher, tc).total; }, params, opts);
    EXPECT_LE(report.max_rel_error, 1e-4) << to_string(v) << " worst " << report.worst_param;
    EXPECT_GT(report.coordinates_checked, 100u);
    d.set_trainable(false);
  }
}

TEST_F(TttFixture, EmptyAssistantSpanGivesExactZero) {
  Conversation c = corpus[3];
  for (auto& r : c.roles)
    if (r == Role::assistant) r = Role::user;
  Drafter d = make(Variant::post_norm);
  d.set_trainable(true);
  TrainConfig tc;
  tc.ttt_depth = 3;
  const auto r = ttt_unroll(d, c, teacher_outputs(verifier, c), tc);
  EXPECT_EQ(r.total.item(), 0.0);
  r.total.backward();
  for (const auto& p : d.trainable_parameters())
    for (double g : p.grad()) ASSERT_EQ(g, 0.0);
}

TEST_F(TttFixture, UserTargetsCarryNoDirectLoss) {
  const auto& c = corpus[4];
  const Drafter d = make(Variant::pre_norm);
  TrainConfig tc;
  tc.ttt_depth = 3;
  const auto r = ttt_unroll(d, c, teacher_outputs(verifier, c), tc);
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t t = 0; t < c.size() - 1; ++t) {
      const std::size_t target = t + j + 2;  // token whose prediction is scored
      const double expected = target < c.size() && c.roles[target] == Role::assistant ? 1.0 : 0.0;
      EXPECT_EQ(r.row_weights[j][t], expected) << "step " << j + 1 << " t " << t;
    }

  // Changing a user token moves losses only through context: its own entry stays 0.
  Conversation flipped = c;
  std::size_t user_pos = 0;
  for (std::size_t i = 0; i < c.size(); ++i)
    if (c.roles[i] == Role::user) user_pos = i;
  flipped.tokens[user_pos] = (c.tokens[user_pos] - 10 + 1) % 54 + 10;
  const auto rf = ttt_unroll(d, flipped, teacher_outputs(verifier, flipped), tc);
  EXPECT_EQ(rf.row_weights, r.row_weights);
}

TEST_F(TttFixture, ShortConversationTrainsToFeasibleDepth) {
  const Conversation c = tagged({1, 4, 20, 5, 6, 21, 7},
                                {Role::special, Role::special, Role::user, Role::special, Role::special,
                                 Role::assistant, Role::special});
  const Drafter d = make(Variant::pre_norm);
  TrainConfig tc;
  tc.ttt_depth = 8;
  const auto r = ttt_unroll(d, c, teacher_outputs(verifier, c), tc);
  ASSERT_EQ(r.step_weights.size(), 8u);
  EXPECT_EQ(r.step_weights[0], 1.0);  // only tok[5] is an assistant target
  for (std::size_t j = 0; j < 8; ++j) EXPECT_TRUE(std::isfinite(r.step_sums[j].item()));
}

TEST_F(TttFixture, TrainingIsDeterministicAndFreezesVerifier) {
  TrainConfig tc;
  tc.ttt_depth = 2;
  tc.epochs = 2;
  tc.batch = 3;
  tc.lr = 3e-3;
  tc.warmup_steps = 1;
  auto run = [&] {
    Drafter d = make(Variant::post_norm);
    auto rep = train_drafter(d, corpus, verifier, tc);
    return std::pair{d.hash(), rep};
  };
  const auto [h1, r1] = run();
  const auto [h2, r2] = run();
  EXPECT_EQ(h1, h2);
  EXPECT_EQ(r1.batch_loss, r2.batch_loss);
  EXPECT_EQ(r1.epoch_step_loss, r2.epoch_step_loss);
  EXPECT_EQ(r1.verifier_hash_before, r1.verifier_hash_after);
  EXPECT_EQ(r1.manifest.at("ttt_targets"), "shifted_position");
  EXPECT_EQ(r1.manifest.at("corpus_hash"), corpus_hash(corpus));
}

TEST_F(TttFixture, StepOneLossDecreasesAcrossEpochs) {
  const auto bigger = generate_corpus(small_corpus(24), RngStream(9));
  TrainConfig tc;
  tc.ttt_depth = 2;
  tc.epochs = 4;
  tc.batch = 4;
  tc.lr = 3e-3;
  tc.warmup_steps = 2;
  Drafter d = make(Variant::pre_norm);
  const auto rep = train_drafter(d, bigger, verifier, tc);
  ASSERT_EQ(rep.epoch_step_loss.size(), 4u);
  EXPECT_LT(rep.epoch_step_loss.back()[0], rep.epoch_step_loss.front()[0]);
}

TEST_F(TttFixture, RefusesTrainableVerifier) {
  Verifier hot(small_verifier(), RngStream(1));
  hot.set_trainable(true);
  Drafter d = make(Variant::pre_norm);
  EXPECT_THROW(train_drafter(d, corpus, hot, TrainConfig{}), ConfigError);
}
