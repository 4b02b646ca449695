#include "driftlab/specdec.hpp"

#include <numeric>

namespace driftlab {

Verdict verify_greedy(std::span<const TokenId> drafted, const Tensor& logits) {
  if (logits.rows() != drafted.size() + 1)
    throw DimensionError("verify_greedy: expected " + std::to_string(drafted.size() + 1) + " logit rows, got " +
                         std::to_string(logits.rows()));
  std::size_t j = 0;
  while (j < drafted.size() && argmax(logits.row_span(j)) == drafted[j]) ++j;
  return {static_cast<int>(j), argmax(logits.row_span(j))};
}

Verdict verify_rejection(std::span<const TokenId> drafted, const std::vector<std::vector<double>>& q,
                         const std::vector<std::vector<double>>& p, RngStream& rng) {
  const std::size_t k = drafted.size();
  if (q.size() != k || p.size() != k + 1) throw DimensionError("verify_rejection: expected k q rows and k+1 p rows");
  for (std::size_t j = 0; j < k; ++j) {
    const double a = acceptance_probability(p[j], q[j], drafted[j]);
    if (rng.uniform() < a) continue;
    return {static_cast<int>(j), rng.categorical(residual_distribution(p[j], q[j]))};
  }
  return {static_cast<int>(k), rng.categorical(p[k])};
}

double AcceptanceStats::tau_excl_bonus() const {
  if (accepted_per_round.empty()) return 0.0;
  const double total = std::accumulate(accepted_per_round.begin(), accepted_per_round.end(), 0.0);
  return total / static_cast<double>(accepted_per_round.size());
}

double AcceptanceStats::tau_incl_bonus() const {
  return accepted_per_round.empty() ? 0.0 : tau_excl_bonus() + 1.0;
}

void AcceptanceStats::merge(const AcceptanceStats& other) {
  if (k == 0) k = other.k;
  if (other.k != 0 && other.k != k) throw ConfigError("AcceptanceStats::merge: mismatched k");
  accepted_per_round.insert(accepted_per_round.end(), other.accepted_per_round.begin(),
                            other.accepted_per_round.end());
}

std::vector<std::optional<double>> conditional_acceptance(const AcceptanceStats& stats) {
  if (stats.rounds() < 1) throw ConfigError("conditional_acceptance: no rounds");
  std::vector<std::optional<double>> curve(static_cast<std::size_t>(stats.k));
  for (int j = 1; j <= stats.k; ++j) {
    int reached = 0, passed = 0;
    for (int a : stats.accepted_per_round) {
      if (a < 0 || a > stats.k) throw InvariantViolation("accepted count outside [0, k]");
      reached += a >= j - 1;
      passed += a >= j;
    }
    if (reached > 0) curve[static_cast<std::size_t>(j - 1)] = static_cast<double>(passed) / reached;
  }
  return curve;
}

namespace {

HiddenTaps slice_taps(const HiddenTaps& t, std::size_t begin, std::size_t end) {
  return {slice_rows(t.low, begin, end), slice_rows(t.mid, begin, end), slice_rows(t.high, begin, end)};
}

HiddenTaps append_taps(const HiddenTaps& a, const HiddenTaps& b) {
  const Tensor low[] = {a.low, b.low}, mid[] = {a.mid, b.mid}, high[] = {a.high, b.high};
  return {concat_rows(low), concat_rows(mid), concat_rows(high)};
}

std::vector<double> tempered(std::span<const double> logits, double temperature) {
  std::vector<double> scaled(logits.begin(), logits.end());
  for (auto& v : scaled) v /= temperature;
  return softmax_row(scaled);
}

}  // namespace

SpecResult speculative_generate(const Verifier& verifier, const Drafter& drafter, std::span<const TokenId> prompt,
                                int n_tokens, const SpecConfig& config) {
  if (config.k < 1) throw ConfigError("speculative_generate: k must be >= 1");
  if (prompt.empty()) throw ConfigError("speculative_generate: empty prompt");
  config.mode.validate();
  drafter.config().check_compatible(verifier.config());

  SpecResult result;
  result.stats.k = config.k;
  result.stats.engine_style = config.engine_style;
  if (n_tokens <= 0) return result;

  const RngStream root(config.seed);
  RngStream draft_rng = root.derive("draft");
  RngStream verify_rng = root.derive("verify");
  std::optional<NoiseSpec> noise = config.noise;
  NoiseSpec* noise_ptr = noise ? &*noise : nullptr;
  const bool greedy = config.sampling.greedy();
  const auto width = static_cast<std::size_t>(drafter.config().d_model);

  KvCache cache;
  auto out = verifier.extend(cache, prompt, config.mode);
  HiddenTaps taps = out.taps;
  std::vector<TokenId> sequence(prompt.begin(), prompt.end());  // tokens the verifier has processed

  const auto last_row = out.logits.row_span(out.logits.rows() - 1);
  TokenId pending = greedy ? argmax(last_row) : verify_rng.categorical(tempered(last_row, config.sampling.temperature));
  result.tokens.push_back(pending);

  ChainState state = begin_chain(drafter, taps, prompt, pending, config.mode, noise_ptr);

  int round = 0;
  while (static_cast<int>(result.tokens.size()) < n_tokens) {
    const std::size_t committed_pairs = state.cache.length();
    const std::size_t m = sequence.size();
    DraftResult draft = draft_chain(drafter, state, pending, config.k, config.mode, config.sampling, &draft_rng,
                                    noise_ptr, config.pin);

    std::vector<TokenId> block{pending};
    block.insert(block.end(), draft.tokens.begin(), draft.tokens.end());
    out = verifier.extend(cache, block, config.mode);

    Verdict verdict;
    if (greedy) {
      verdict = verify_greedy(draft.tokens, out.logits);
    } else {
      std::vector<std::vector<double>> p;
      for (std::size_t j = 0; j < block.size(); ++j) p.push_back(tempered(out.logits.row_span(j), config.sampling.temperature));
      verdict = verify_rejection(draft.tokens, draft.q, p, verify_rng);
    }
    const auto a = static_cast<std::size_t>(verdict.n_accepted);

    // Commit pending + accepted drafts; the replacement becomes the next pending token.
    sequence.insert(sequence.end(), block.begin(), block.begin() + static_cast<std::ptrdiff_t>(a + 1));
    truncate_cache(cache, sequence.size());
    taps = append_taps(taps, slice_taps(out.taps, 0, a + 1));

    const std::size_t before = result.tokens.size();
    for (std::size_t j = 0; j < a; ++j) result.tokens.push_back(draft.tokens[j]);
    result.tokens.push_back(verdict.replacement);
    if (static_cast<int>(result.tokens.size()) > n_tokens) result.tokens.resize(static_cast<std::size_t>(n_tokens));
    result.emitted_per_round.push_back(static_cast<int>(result.tokens.size() - before));

    // Roll the drafter back to its committed pairs and add the new ones.
    const std::size_t m_new = sequence.size();
    state.cache.truncate(committed_pairs, width);
    const Tensor h_fc = drafter.fuse(slice_taps(taps, m - 1, m_new));
    drafter.prefill(state, slice_rows(h_fc, 0, m_new - m), std::span(sequence).subspan(m, m_new - m),
                    static_cast<int>(m - 1), config.mode, noise_ptr);
    state.h_prev = h_fc.row(m_new - m);
    state.prompt_length = m_new - 1;
    state.position = static_cast<int>(m_new - 1);
    state.step_index = 1;
    state.pin_target = rms(state.h_prev);
    pending = verdict.replacement;

    RoundRecord rec;
    rec.round = round++;
    rec.drafted = draft.tokens;
    rec.accepted = verdict.n_accepted;
    rec.replacement = verdict.replacement;
    for (const auto& s : draft.trace.steps) rec.rms_profile.push_back(s.h_rms);
    result.rounds.push_back(std::move(rec));
    result.stats.accepted_per_round.push_back(verdict.n_accepted);
    if (config.keep_traces) result.traces.push_back(std::move(draft.trace));
  }
  return result;
}

}  // namespace driftlab
