#include <cmath>
#include <map>

#include <boost/rational.hpp>
#include <gtest/gtest.h>

#include "driftlab/specdec.hpp"
#include "driftlab/trainer.hpp"

using namespace driftlab;
using Q = boost::rational<long long>;

namespace {

Tensor logits_with_argmax(const std::vector<TokenId>& winners, int vocab) {
  std::vector<double> v(winners.size() * static_cast<std::size_t>(vocab), 0.0);
  for (std::size_t r = 0; r < winners.size(); ++r) v[r * static_cast<std::size_t>(vocab) + winners[r]] = 1.0;
  return Tensor::matrix(winners.size(), static_cast<std::size_t>(vocab), std::move(v));
}

// Deterministic rational distribution with small denominators, keyed by `key`.
std::vector<Q> rational_dist(int vocab, std::uint64_t key, bool allow_zero = true) {
  RngStream rng(key);
  std::vector<Q> d(static_cast<std::size_t>(vocab));
  long long total = 0;
  std::vector<long long> w(d.size());
  for (auto& x : w) {
    x = rng.uniform_int(allow_zero ? 6 : 5) + (allow_zero ? 0 : 1);
    total += x;
  }
  if (total == 0) {
    w[0] = 1;
    total = 1;
  }
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = Q(w[i], total);
  return d;
}

std::uint64_t prefix_key(const std::vector<TokenId>& prefix, std::uint64_t salt) {
  std::uint64_t h = salt;
  for (TokenId t : prefix) h = splitmix64(h ^ static_cast<std::uint64_t>(t + 17));
  return h;
}

}  // namespace

TEST(VerifyGreedy, AllAcceptedEmitsBonus) {
  const std::vector<TokenId> drafted{3, 1, 2};
  const auto v = verify_greedy(drafted, logits_with_argmax({3, 1, 2, 0}, 5));
  EXPECT_EQ(v, (Verdict{3, 0}));
}

TEST(VerifyGreedy, FirstMismatchStillEmitsOneToken) {
  const std::vector<TokenId> drafted{3, 1};
  const auto v = verify_greedy(drafted, logits_with_argmax({4, 1, 2}, 5));
  EXPECT_EQ(v, (Verdict{0, 4}));
}

TEST(VerifyGreedy, HowCanIHelpYou) {
  enum : TokenId { How, can, I, help, me, today, you, V };
  const std::vector<TokenId> drafted{How, can, I, help, me, today};
  // Verifier argmax at each drafted position, plus the bonus row.
  const auto v = verify_greedy(drafted, logits_with_argmax({How, can, I, help, you, today, today}, V));
  EXPECT_EQ(v.n_accepted, 4);
  EXPECT_EQ(v.replacement, you);
}

TEST(VerifyGreedy, RowCountMismatchThrows) {
  const std::vector<TokenId> drafted{1, 2};
  EXPECT_THROW(verify_greedy(drafted, logits_with_argmax({1, 2}, 4)), DimensionError);
}

TEST(VerifyRejection, TwoTokenExample) {
  const std::vector<Q> p{Q(1, 2), Q(1, 2)}, q{Q(9, 10), Q(1, 10)};
  EXPECT_EQ(acceptance_probability(p, q, 0), Q(5, 9));
  EXPECT_EQ(acceptance_probability(p, q, 1), Q(1));
  // Emitted first token, summed over both drafts and all verdict branches.
  std::vector<Q> emitted(2, Q(0));
  for (TokenId d : {0, 1}) {
    const TokenId drafted[] = {d};
    for (const auto& b : verify_rejection_law<Q>(drafted, {q}, {p, p})) {
      const TokenId first = b.verdict.n_accepted >= 1 ? d : b.verdict.replacement;
      emitted[static_cast<std::size_t>(first)] += q[static_cast<std::size_t>(d)] * b.probability;
    }
  }
  EXPECT_EQ(emitted, p);
}

TEST(VerifyRejection, SingleStepLawIsExactlyP) {
  for (int vocab = 2; vocab <= 4; ++vocab) {
    for (std::uint64_t inst = 0; inst < 40; ++inst) {
      const auto p = rational_dist(vocab, inst * 7 + 1);
      const auto q = rational_dist(vocab, inst * 7 + 2);
      const auto bonus = rational_dist(vocab, inst * 7 + 3);
      std::vector<Q> emitted(p.size(), Q(0));
      Q mass(0);
      for (TokenId d = 0; d < vocab; ++d) {
        if (q[static_cast<std::size_t>(d)] == Q(0)) continue;
        const TokenId drafted[] = {d};
        for (const auto& b : verify_rejection_law<Q>(drafted, {q}, {p, bonus})) {
          const TokenId first = b.verdict.n_accepted >= 1 ? d : b.verdict.replacement;
          emitted[static_cast<std::size_t>(first)] += q[static_cast<std::size_t>(d)] * b.probability;
          mass += q[static_cast<std::size_t>(d)] * b.probability;
        }
      }
      EXPECT_EQ(mass, Q(1));
      EXPECT_EQ(emitted, p) << "vocab " << vocab << " instance " << inst;
    }
  }
}

TEST(VerifyRejection, IdenticalDistributionsAlwaysAccept) {
  const auto p = rational_dist(4, 11, false);
  const std::vector<TokenId> drafted{2, 0, 3};
  const auto law = verify_rejection_law<Q>(drafted, {p, p, p}, {p, p, p, p});
  for (const auto& b : law) EXPECT_EQ(b.verdict.n_accepted, 3);
  Q total(0);
  for (const auto& b : law) total += b.probability;
  EXPECT_EQ(total, Q(1));
}

TEST(VerifyRejection, ZeroDrafterProbabilityIsAnInvariantViolation) {
  const std::vector<double> p{0.5, 0.5}, q{1.0, 0.0};
  const TokenId drafted[] = {1};
  RngStream rng(1);
  EXPECT_THROW(verify_rejection(drafted, {q}, {p, p}, rng), InvariantViolation);
  const std::vector<Q> pq{Q(1, 2), Q(1, 2)}, qq{Q(1), Q(0)};
  EXPECT_THROW(verify_rejection_law<Q>(drafted, {qq}, {pq, pq}), InvariantViolation);
}

namespace {

// Target and drafter conditionals over a vocab-3 toy language.
std::vector<Q> p_of(const std::vector<TokenId>& prefix) { return rational_dist(3, prefix_key(prefix, 101)); }
std::vector<Q> q_of(const std::vector<TokenId>& prefix) { return rational_dist(3, prefix_key(prefix, 202), false); }

using Law = std::map<std::vector<TokenId>, Q>;

// Exact law of the first `n` emitted tokens after `prefix` when speculative
// rounds of depth k are run until n tokens exist.
void enumerate_rounds(const std::vector<TokenId>& prefix, std::size_t n, int k, Q weight, Law& law,
                      std::vector<TokenId> emitted = {}) {
  if (emitted.size() >= n) {
    law[std::vector<TokenId>(emitted.begin(), emitted.begin() + static_cast<std::ptrdiff_t>(n))] += weight;
    return;
  }
  std::vector<TokenId> context = prefix;
  context.insert(context.end(), emitted.begin(), emitted.end());
  // Enumerate every drafted sequence.
  std::vector<std::vector<TokenId>> drafts{{}};
  std::vector<Q> draft_w{Q(1)};
  for (int j = 0; j < k; ++j) {
    std::vector<std::vector<TokenId>> next;
    std::vector<Q> next_w;
    for (std::size_t i = 0; i < drafts.size(); ++i) {
      auto ctx = context;
      ctx.insert(ctx.end(), drafts[i].begin(), drafts[i].end());
      const auto q = q_of(ctx);
      for (TokenId t = 0; t < 3; ++t) {
        auto d = drafts[i];
        d.push_back(t);
        next.push_back(d);
        next_w.push_back(draft_w[i] * q[static_cast<std::size_t>(t)]);
      }
    }
    drafts = std::move(next);
    draft_w = std::move(next_w);
  }
  for (std::size_t i = 0; i < drafts.size(); ++i) {
    std::vector<std::vector<Q>> qs, ps;
    auto ctx = context;
    for (int j = 0; j <= k; ++j) {
      ps.push_back(p_of(ctx));
      if (j < k) {
        qs.push_back(q_of(ctx));
        ctx.push_back(drafts[i][static_cast<std::size_t>(j)]);
      }
    }
    for (const auto& b : verify_rejection_law<Q>(drafts[i], qs, ps)) {
      auto out = emitted;
      out.insert(out.end(), drafts[i].begin(), drafts[i].begin() + b.verdict.n_accepted);
      out.push_back(b.verdict.replacement);
      enumerate_rounds(prefix, n, k, weight * draft_w[i] * b.probability, law, out);
    }
  }
}

}  // namespace

TEST(VerifyRejection, LengthTwoJointLawMatchesAncestralSampling) {
  for (int k : {1, 2}) {
    Law spec;
    enumerate_rounds({}, 2, k, Q(1), spec);
    Law ancestral;
    const auto p1 = p_of({});
    for (TokenId a = 0; a < 3; ++a) {
      const auto p2 = p_of({a});
      for (TokenId b = 0; b < 3; ++b) {
        const Q w = p1[static_cast<std::size_t>(a)] * p2[static_cast<std::size_t>(b)];
        if (w != Q(0)) ancestral[{a, b}] = w;
      }
    }
    for (auto it = spec.begin(); it != spec.end();) it = it->second == Q(0) ? spec.erase(it) : std::next(it);
    EXPECT_EQ(spec, ancestral) << "k=" << k;
  }
}

TEST(VerifyRejection, MonteCarloMatchesTargetWithinTv) {
  const std::vector<double> p{0.2, 0.5, 0.3}, q{0.6, 0.1, 0.3}, bonus{1.0 / 3, 1.0 / 3, 1.0 / 3};
  RngStream draft_rng(11), verify_rng(12);
  std::vector<double> counts(3, 0.0);
  const int trials = 100000;
  for (int i = 0; i < trials; ++i) {
    const TokenId d = draft_rng.categorical(q);
    const TokenId drafted[] = {d};
    const auto v = verify_rejection(drafted, {q}, {p, bonus}, verify_rng);
    counts[static_cast<std::size_t>(v.n_accepted == 1 ? d : v.replacement)] += 1.0;
  }
  double tv = 0.0;
  for (std::size_t i = 0; i < 3; ++i) tv += 0.5 * std::abs(counts[i] / trials - p[i]);
  EXPECT_LE(tv, 0.01);
}

TEST(AcceptanceStats, TauAndConditionalCurve) {
  AcceptanceStats s;
  s.k = 2;
  s.accepted_per_round = {2, 0};
  EXPECT_DOUBLE_EQ(s.tau_excl_bonus(), 1.0);
  EXPECT_DOUBLE_EQ(s.tau_incl_bonus(), 2.0);
  EXPECT_DOUBLE_EQ(s.tau(), 1.0);
  s.engine_style = true;
  EXPECT_DOUBLE_EQ(s.tau(), 2.0);
  const auto c = conditional_acceptance(s);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c[0], 0.5);
  EXPECT_EQ(c[1], 1.0);
}

TEST(AcceptanceStats, AllAcceptedCurveIsOne) {
  AcceptanceStats s;
  s.k = 4;
  s.accepted_per_round = {4, 4, 4};
  for (const auto& v : conditional_acceptance(s)) EXPECT_EQ(v, 1.0);
}

TEST(AcceptanceStats, UnreachedStepsAreAbsent) {
  AcceptanceStats s;
  s.k = 3;
  s.accepted_per_round = {0, 0};
  const auto c = conditional_acceptance(s);
  EXPECT_EQ(c[0], 0.0);
  EXPECT_FALSE(c[1].has_value());
  EXPECT_FALSE(c[2].has_value());
  s.accepted_per_round.clear();
  EXPECT_THROW(conditional_acceptance(s), ConfigError);
}

TEST(AcceptanceStats, MergeIsOrderIndependent) {
  AcceptanceStats a, b;
  a.k = b.k = 3;
  a.accepted_per_round = {1, 3};
  b.accepted_per_round = {0, 2, 2};
  AcceptanceStats ab = a, ba = b;
  ab.merge(b);
  ba.merge(a);
  EXPECT_EQ(ab.tau_excl_bonus(), ba.tau_excl_bonus());
  EXPECT_EQ(conditional_acceptance(ab), conditional_acceptance(ba));
}

TEST(SwaMasks, WindowExamples) {
  // Sequence length 5, query at position 4.
  auto admitted = [](const AttentionMode& m) {
    std::vector<int> keys;
    for (int k = 0; k < 5; ++k)
      if (m.admits(4, k)) keys.push_back(k);
    return keys;
  };
  EXPECT_EQ(admitted(AttentionMode::swa(2)), (std::vector<int>{3, 4}));
  EXPECT_EQ(admitted(AttentionMode::swa_bos(2)), (std::vector<int>{0, 3, 4}));
  EXPECT_EQ(admitted(AttentionMode::swa_prefix(2, 2)), (std::vector<int>{0, 1, 3, 4}));
  EXPECT_EQ(admitted(AttentionMode::full()), (std::vector<int>{0, 1, 2, 3, 4}));
}

namespace {

// A tiny verifier and drafters trained just enough to accept some drafts.
struct Lab {
  CorpusConfig corpus_cfg;
  std::vector<Conversation> corpus;
  std::optional<Verifier> verifier;
  std::map<Variant, Drafter> drafters;

  Lab() {
    corpus_cfg.vocab_size = 64;
    corpus_cfg.n_conversations = 120;
    corpus_cfg.system_len = 4;
    corpus_cfg.user_len_min = 3;
    corpus_cfg.user_len_max = 5;
    corpus = generate_corpus(corpus_cfg, RngStream(5));
    VerifierConfig vc;
    vc.n_layers = 3;
    vc.d_model = 16;
    vc.n_heads = 2;
    vc.d_head = 8;
    vc.d_mlp = 48;
    vc.vocab_size = 64;
    vc.max_positions = 128;
    Verifier v(vc, RngStream(6));
    VerifierTrainConfig vt;
    vt.epochs = 4;
    vt.lr = 1e-2;
    train_verifier(v, corpus, vt);
    verifier.emplace(v);
    TrainConfig tc;
    tc.ttt_depth = 2;
    tc.epochs = 2;
    tc.lr = 3e-3;
    tc.warmup_steps = 5;
    for (auto var : kAllVariants) {
      Drafter d(DrafterConfig::preset(var, vc), v, RngStream(7));
      train_drafter(d, corpus, v, tc);
      drafters.emplace(var, std::move(d));
    }
  }
};

const Lab& lab() {
  static const Lab instance;
  return instance;
}

std::vector<TokenId> prompt_of(const Conversation& c) { return split_last_reply(c).prompt.tokens; }

}  // namespace

TEST(SpeculativeGenerate, GreedyIsLosslessForEveryVariantAndDepth) {
  const auto& L = lab();
  int accepted = 0;
  for (auto var : kAllVariants)
    for (int k : {1, 2, 4, 8})
      for (int i = 0; i < 6; ++i) {
        const auto prompt = prompt_of(L.corpus[static_cast<std::size_t>(i)]);
        SpecConfig sc;
        sc.k = k;
        const auto r = speculative_generate(*L.verifier, L.drafters.at(var), prompt, 14, sc);
        ASSERT_EQ(r.tokens, greedy_decode(*L.verifier, prompt, 14)) << to_string(var) << " k=" << k;
        for (int a : r.stats.accepted_per_round) accepted += a;
      }
  EXPECT_GT(accepted, 0);
}

TEST(SpeculativeGenerate, GreedyIsLosslessUnderWindowedAttention) {
  const auto& L = lab();
  for (const auto& mode : {AttentionMode::swa(6), AttentionMode::swa_bos(6), AttentionMode::swa_prefix(6, 3)}) {
    const auto prompt = prompt_of(L.corpus[7]);
    SpecConfig sc;
    sc.k = 4;
    sc.mode = mode;
    const auto r = speculative_generate(*L.verifier, L.drafters.at(Variant::post_norm), prompt, 20, sc);
    EXPECT_EQ(r.tokens, greedy_decode(*L.verifier, prompt, 20, mode)) << mode.name();
  }
}

TEST(SpeculativeGenerate, RoundsMatchRecomputationFromScratch) {
  const auto& L = lab();
  for (auto var : {Variant::pre_norm, Variant::gated_post_norm}) {
    const Drafter& d = L.drafters.at(var);
    const auto prompt = prompt_of(L.corpus[3]);
    SpecConfig sc;
    sc.k = 3;
    const auto r = speculative_generate(*L.verifier, d, prompt, 24, sc);
    std::size_t emitted = 1;
    for (std::size_t round = 0; round < r.rounds.size(); ++round) {
      std::vector<TokenId> processed = prompt;
      processed.insert(processed.end(), r.tokens.begin(), r.tokens.begin() + static_cast<std::ptrdiff_t>(emitted - 1));
      const TokenId pending = r.tokens[emitted - 1];
      const auto taps = L.verifier->forward(processed).taps;
      ChainState st = begin_chain(d, taps, processed, pending, sc.mode);
      const auto fresh = draft_chain(d, st, pending, sc.k, sc.mode, sc.sampling);
      ASSERT_EQ(fresh.tokens, r.rounds[round].drafted) << "round " << round;
      for (int j = 0; j < sc.k; ++j)
        EXPECT_NEAR(fresh.trace.steps[static_cast<std::size_t>(j)].h_rms, r.rounds[round].rms_profile[static_cast<std::size_t>(j)],
                    1e-12);
      emitted += static_cast<std::size_t>(r.emitted_per_round[round]);
    }
  }
}

TEST(SpeculativeGenerate, TauMatchesRecountFromEmittedTokens) {
  const auto& L = lab();
  for (double temperature : {0.0, 0.8}) {
    SpecConfig sc;
    sc.k = 4;
    sc.sampling.temperature = temperature;
    sc.seed = 3;
    const auto prompt = prompt_of(L.corpus[9]);
    const auto r = speculative_generate(*L.verifier, L.drafters.at(Variant::post_norm), prompt, 40, sc);
    // Recount accepted drafts by matching each round's draft against the output.
    std::size_t offset = 1;
    double recount = 0;
    int counted = 0;
    for (std::size_t i = 0; i < r.rounds.size(); ++i) {
      const auto& drafted = r.rounds[i].drafted;
      if (offset + drafted.size() + 1 > r.tokens.size()) break;  // last round may be truncated
      std::size_t a = 0;
      while (a < drafted.size() && r.tokens[offset + a] == drafted[a]) ++a;
      recount += static_cast<double>(a);
      EXPECT_EQ(static_cast<int>(a), r.stats.accepted_per_round[i]);
      offset += a + 1;
      ++counted;
    }
    ASSERT_GT(counted, 0);
    AcceptanceStats head = r.stats;
    head.accepted_per_round.resize(static_cast<std::size_t>(counted));
    EXPECT_DOUBLE_EQ(head.tau_excl_bonus(), recount / counted);
    for (int a : r.stats.accepted_per_round) {
      EXPECT_GE(a, 0);
      EXPECT_LE(a, 4);
    }
  }
}

TEST(SpeculativeGenerate, SamplingIsSeedDeterministic) {
  const auto& L = lab();
  SpecConfig sc;
  sc.k = 3;
  sc.sampling.temperature = 1.0;
  sc.seed = 9;
  const auto prompt = prompt_of(L.corpus[2]);
  const auto a = speculative_generate(*L.verifier, L.drafters.at(Variant::gated), prompt, 30, sc);
  const auto b = speculative_generate(*L.verifier, L.drafters.at(Variant::gated), prompt, 30, sc);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.stats.accepted_per_round, b.stats.accepted_per_round);
}

TEST(SpeculativeGenerate, DrafterNeverAttendsOutsideTheWindow) {
  const auto& L = lab();
  for (const auto& mode : {AttentionMode::swa(4), AttentionMode::swa_bos(4), AttentionMode::swa_prefix(4, 3)}) {
    SpecConfig sc;
    sc.k = 3;
    sc.mode = mode;
    const auto prompt = prompt_of(L.corpus[4]);
    std::vector<TokenId> longer = prompt;
    const auto r = speculative_generate(*L.verifier, L.drafters.at(Variant::pre_norm), longer, 260, sc);
    ASSERT_GE(r.traces.size(), 64u);
    std::size_t scanned = 0;
    for (const auto& trace : r.traces)
      for (const auto& step : trace.steps) {
        const int q = step.key_positions.back();
        double mass = 0;
        for (std::size_t i = 0; i < step.key_positions.size(); ++i) {
          if (!mode.admits(q, step.key_positions[i])) {
            ASSERT_EQ(step.attention_row[i], 0.0) << mode.name();
          }
          mass += step.attention_row[i];
        }
        EXPECT_NEAR(mass, 1.0, 1e-12);
        ++scanned;
      }
    EXPECT_GE(scanned, 192u);
  }
}

TEST(SpeculativeGenerate, ContextOverflowOnlyUnderFullAttention) {
  const auto& L = lab();
  const auto prompt = prompt_of(L.corpus[1]);
  const int budget = L.verifier->config().max_positions - static_cast<int>(prompt.size()) + 20;
  SpecConfig sc;
  sc.k = 2;
  EXPECT_THROW(speculative_generate(*L.verifier, L.drafters.at(Variant::post_norm), prompt, budget, sc),
               ContextLengthError);
  sc.mode = AttentionMode::swa(16);
  EXPECT_NO_THROW(speculative_generate(*L.verifier, L.drafters.at(Variant::post_norm), prompt, budget, sc));
}
