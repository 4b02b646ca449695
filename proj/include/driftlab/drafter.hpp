#pragma once

// Single-layer EAGLE-style drafter in four variants.
//
// One step maps (h_prev, e_in) to (h_out, logits):
//   x  = [rms_norm(h_prev) ; rms_norm(e_in)]                       width 2d
//   A  = attention(x W_Q, x W_K, x W_V)   (g = sigmoid(x W_g + b_g), A <- g * A when gated)
//   z1 = h_prev + A W_O
//   z2 = z1 + MLP(rms_norm(z1))
//   pre-norm:  h_out = z2,               logits = LM(rms_norm(z2))
//   post-norm: h_out = rms_norm(z2),     logits = LM(h_out)
// Step 1 of a chain takes h_prev = h_FC, the fused verifier taps; later steps
// take the drafter's own h_out.

#include <cmath>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "driftlab/attention.hpp"
#include "driftlab/checkpoint.hpp"
#include "driftlab/corpus.hpp"
#include "driftlab/rng.hpp"
#include "driftlab/tensor.hpp"
#include "driftlab/verifier.hpp"

namespace driftlab {

class DegenerateInputError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

enum class NormPlacement { pre, post };
enum class Variant { pre_norm, post_norm, gated, gated_post_norm };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& name);
inline constexpr Variant kAllVariants[] = {Variant::pre_norm, Variant::post_norm, Variant::gated,
                                           Variant::gated_post_norm};

struct DrafterConfig {
  NormPlacement norm_placement = NormPlacement::pre;
  bool per_stream_fusion_norm = false;
  bool gated_attention = false;
  int d_model = 64;
  int n_heads = 4;
  int d_head = 16;
  int d_mlp = 256;
  int vocab_size = 256;
  double rope_base = 10000.0;
  double norm_eps = 1e-6;

  static DrafterConfig preset(Variant v, const VerifierConfig& verifier = {});
  Variant variant() const;
  void validate() const;
  // Checks dimensions against the verifier whose taps feed this drafter.
  void check_compatible(const VerifierConfig& verifier) const;
  int d_in() const { return 2 * d_model; }

  nlohmann::json to_json() const;
  static DrafterConfig from_json(const nlohmann::json& j);
  bool operator==(const DrafterConfig&) const = default;
};

struct NoiseSpec {
  enum class Pathway { hidden_states, embeddings };
  Pathway pathway = Pathway::hidden_states;
  double alpha = 0.0;  // may be +infinity
  RngStream rng{0};

  void validate() const;
};

std::string to_string(NoiseSpec::Pathway p);
NoiseSpec::Pathway pathway_from_string(const std::string& name);

// Row-wise x <- x + alpha * rms(x) * eps (alpha = inf: x <- rms(x) * eps).
// alpha = 0 returns x itself without consuming draws.
Tensor apply_noise(const Tensor& x, double alpha, RngStream& rng);

struct DrafterWeights {
  Tensor norm_low, norm_mid, norm_high;  // per-stream fusion gains
  Tensor fc;                             // [3d x d]
  Tensor embed;                          // [V x d], frozen copy of the verifier table
  Tensor in_norm_h, in_norm_e;
  Tensor wq, wk, wv;                     // [2d x d]
  Tensor w_gate, b_gate;                 // [2d x d], [d]
  Tensor wo;
  Tensor mlp_norm, w_up, w_down;
  Tensor final_norm, lm_head;

  // Every tensor that exists for the given config, trainable ones first.
  std::vector<NamedTensor> named(const DrafterConfig& cfg) const;
};

// Projections of a batch of step inputs.
struct StepInputs {
  Tensor x;        // [n x 2d] after input norms
  Tensor q, k, v;  // [n x d], unrotated
};

struct StepOutputs {
  Tensor h_out;   // [n x d]
  Tensor logits;  // [n x V]
  Tensor z2;      // residual stream after add2
};

// Drafter-side key/value store: unrotated keys and values with their positions.
struct DrafterCache {
  std::vector<double> k, v;
  std::vector<int> positions;
  std::size_t length() const { return positions.size(); }
  void truncate(std::size_t n, std::size_t width);
};

struct ChainState {
  std::vector<double> h_prev;  // next step's hidden input
  DrafterCache cache;          // prompt pairs + drafted entries
  std::size_t prompt_length = 0;
  int step_index = 1;
  int position = 0;            // rotary position of the next step
  double pin_target = 0.0;     // rms(h_FC) of the step-1 input
};

struct StepResult {
  std::vector<double> h_out;   // unpinned
  std::vector<double> logits;
  std::vector<double> attention_row;  // head-averaged, over cache keys incl. the new entry
  std::vector<double> head_rows;      // [head][key]
};

struct SpecStep {
  int step = 0;
  TokenId token = 0;
  double h_rms = 0.0;
  std::vector<double> attention_row;
  std::vector<double> head_rows;
  std::vector<int> key_positions;
  std::size_t prompt_keys = 0;  // leading entries of the row that are prompt pairs
  double entropy = 0.0;         // head-averaged, nats
};

struct SpecChainTrace {
  std::vector<SpecStep> steps;
  std::size_t prompt_length = 0;
};

struct Sampling {
  double temperature = 0.0;  // 0 = greedy
  bool greedy() const { return temperature <= 0.0; }
};

struct DraftResult {
  std::vector<TokenId> tokens;
  std::vector<std::vector<double>> q;  // drafter distributions used to pick each token
  SpecChainTrace trace;
};

class Drafter {
 public:
  Drafter(const DrafterConfig& config, const Verifier& verifier, const RngStream& init);
  Drafter(const DrafterConfig& config, DrafterWeights weights);

  const DrafterConfig& config() const { return config_; }
  const DrafterWeights& weights() const { return weights_; }
  DrafterWeights& mutable_weights() { return weights_; }
  std::vector<Tensor> trainable_parameters() const;
  void set_trainable(bool trainable);

  // [T x d] fused representation of the verifier taps.
  Tensor fuse(const HiddenTaps& taps) const;

  Tensor embed(std::span<const TokenId> tokens) const;
  StepInputs project(const Tensor& h_prev, const Tensor& e) const;
  // `heads` is the concatenated attention output [n x d] for these rows.
  StepOutputs finish(const Tensor& h_prev, const StepInputs& in, const Tensor& heads) const;

  // Processes committed (h_FC(t), e(tok[t+1])) pairs into the cache.
  void prefill(ChainState& state, const Tensor& h_fc, std::span<const TokenId> next_tokens, int first_position,
               const AttentionMode& mode, NoiseSpec* noise = nullptr) const;

  // Single chain step. `pin`, when set, rescales the stored next h_prev to that rms.
  StepResult step(ChainState& state, TokenId e_token, const AttentionMode& mode, NoiseSpec* noise = nullptr,
                  std::optional<double> pin = std::nullopt) const;

  nlohmann::json meta() const;
  void save(const std::filesystem::path& path) const;
  static Drafter load(const std::filesystem::path& path);
  std::string hash() const;

 private:
  DrafterConfig config_;
  DrafterWeights weights_;
};

// Starts a chain for a prompt whose verifier taps are `taps` (length n) and
// whose last verified token is `last_token`: pairs 0..n-2 are prefilled and
// the state is primed with h_prev = h_FC(n-1).
ChainState begin_chain(const Drafter& drafter, const HiddenTaps& taps, std::span<const TokenId> prompt,
                       TokenId last_token, const AttentionMode& mode, NoiseSpec* noise = nullptr);

// Drafts k tokens from `state`. The state is advanced; callers that need to
// keep the committed prefix roll it back with DrafterCache::truncate.
DraftResult draft_chain(const Drafter& drafter, ChainState& state, TokenId last_token, int k,
                        const AttentionMode& mode, const Sampling& sampling, RngStream* rng = nullptr,
                        NoiseSpec* noise = nullptr, bool pin = false);

double attention_entropy(std::span<const double> row);

}  // namespace driftlab
