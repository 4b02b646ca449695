#pragma once

// Draft-and-verify decoding: greedy prefix verification, lossless rejection
// sampling, acceptance accounting and the generation loop.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <vector>

#include "driftlab/drafter.hpp"
#include "driftlab/verifier.hpp"

namespace driftlab {

// A drafted token the drafter could not have sampled (q(t) = 0).
class InvariantViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct Verdict {
  int n_accepted = 0;
  TokenId replacement = 0;  // resampled token, or the bonus when all were accepted
  bool operator==(const Verdict&) const = default;
};

// `logits` rows 0..k-1 score drafted[0..k-1]; row k is the bonus position.
Verdict verify_greedy(std::span<const TokenId> drafted, const Tensor& logits);

template <class Num>
using Distribution = std::vector<Num>;

template <class Num>
Num acceptance_probability(const Distribution<Num>& p, const Distribution<Num>& q, TokenId token) {
  const auto t = static_cast<std::size_t>(token);
  if (t >= q.size() || t >= p.size()) throw InvariantViolation("drafted token outside the vocabulary");
  if (!(q[t] > Num(0))) throw InvariantViolation("drafted token has zero drafter probability");
  const Num ratio = p[t] / q[t];
  return ratio < Num(1) ? ratio : Num(1);
}

// normalize(max(0, p - q)); falls back to p when the residual is empty (p == q).
template <class Num>
Distribution<Num> residual_distribution(const Distribution<Num>& p, const Distribution<Num>& q) {
  Distribution<Num> r(p.size(), Num(0));
  Num total(0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Num d = p[i] - q[i];
    if (d > Num(0)) {
      r[i] = d;
      total += d;
    }
  }
  if (!(total > Num(0))) return p;
  for (auto& x : r) x /= total;
  return r;
}

template <class Num>
struct VerdictProbability {
  Verdict verdict;
  Num probability;
};

// Exact law of the rejection-sampling verdict for fixed drafted tokens.
// `p` has k+1 rows (the last one is the bonus distribution), `q` has k.
template <class Num>
std::vector<VerdictProbability<Num>> verify_rejection_law(std::span<const TokenId> drafted,
                                                          const std::vector<Distribution<Num>>& q,
                                                          const std::vector<Distribution<Num>>& p) {
  const std::size_t k = drafted.size();
  if (q.size() != k || p.size() != k + 1) throw DimensionError("verify_rejection_law: expected k q rows and k+1 p rows");
  std::vector<VerdictProbability<Num>> law;
  Num reach(1);
  for (std::size_t j = 0; j < k; ++j) {
    const Num a = acceptance_probability(p[j], q[j], drafted[j]);
    const Num reject = reach * (Num(1) - a);
    if (reject > Num(0)) {
      const auto r = residual_distribution(p[j], q[j]);
      for (std::size_t t = 0; t < r.size(); ++t)
        if (r[t] > Num(0)) law.push_back({{static_cast<int>(j), static_cast<TokenId>(t)}, reject * r[t]});
    }
    reach = reach * a;
    if (!(reach > Num(0))) return law;
  }
  for (std::size_t t = 0; t < p[k].size(); ++t)
    if (p[k][t] > Num(0)) law.push_back({{static_cast<int>(k), static_cast<TokenId>(t)}, reach * p[k][t]});
  return law;
}

// Sampled verdict: accept drafted[j] with probability min(1, p/q), resample
// from the residual on the first rejection, else draw the bonus from p[k].
Verdict verify_rejection(std::span<const TokenId> drafted, const std::vector<std::vector<double>>& q,
                         const std::vector<std::vector<double>>& p, RngStream& rng);

struct AcceptanceStats {
  int k = 0;
  std::vector<int> accepted_per_round;
  // Engine-style runs count the verifier-emitted token in the headline tau.
  bool engine_style = false;

  int rounds() const { return static_cast<int>(accepted_per_round.size()); }
  double tau_excl_bonus() const;
  double tau_incl_bonus() const;
  double tau() const { return engine_style ? tau_incl_bonus() : tau_excl_bonus(); }
  void merge(const AcceptanceStats& other);
};

// curve[j-1] = P(step j accepted | steps < j accepted); unreached steps are empty.
std::vector<std::optional<double>> conditional_acceptance(const AcceptanceStats& stats);

struct RoundRecord {
  int round = 0;
  std::vector<TokenId> drafted;
  int accepted = 0;
  TokenId replacement = 0;
  std::vector<double> rms_profile;
};

struct SpecConfig {
  int k = 4;
  AttentionMode mode{};
  Sampling sampling{};
  std::uint64_t seed = 0;
  bool pin = false;
  bool engine_style = false;
  std::optional<NoiseSpec> noise;
  bool keep_traces = true;
};

struct SpecResult {
  std::vector<TokenId> tokens;
  AcceptanceStats stats;
  std::vector<RoundRecord> rounds;
  std::vector<SpecChainTrace> traces;
  std::vector<int> emitted_per_round;  // tokens appended to the output by each round
};

// Generates `n_tokens` continuation tokens of `prompt`. The first token comes
// from the verifier's prefill; every later token from a draft-verify round.
SpecResult speculative_generate(const Verifier& verifier, const Drafter& drafter, std::span<const TokenId> prompt,
                                int n_tokens, const SpecConfig& config);

}  // namespace driftlab
