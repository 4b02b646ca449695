#pragma once

// Tiny pre-norm decoder-only transformer used as the frozen target model.
//
// Each block is rms_norm -> attention -> residual add, rms_norm -> SiLU MLP ->
// residual add; a final rms_norm precedes the LM head. Hidden taps are read
// from the residual stream after blocks floor(N/4), floor(N/2) and N-1, before
// the final norm.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "json.hpp"
#include "driftlab/attention.hpp"
#include "driftlab/checkpoint.hpp"
#include "driftlab/corpus.hpp"
#include "driftlab/rng.hpp"
#include "driftlab/tensor.hpp"

namespace driftlab {

class ContextLengthError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

struct VerifierConfig {
  int n_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int d_head = 16;
  int d_mlp = 256;
  int vocab_size = 256;
  int max_positions = 512;
  double rope_base = 10000.0;
  double norm_eps = 1e-6;

  void validate() const;
  // 0-based block indices whose outputs are tapped as low, mid, high.
  std::array<int, 3> tap_layers() const { return {n_layers / 4, n_layers / 2, n_layers - 1}; }

  nlohmann::json to_json() const;
  static VerifierConfig from_json(const nlohmann::json& j);
  bool operator==(const VerifierConfig&) const = default;
};

// Residual-stream states [T x d] at the three tap layers.
struct HiddenTaps {
  Tensor low, mid, high;
  std::size_t length() const { return low.rows(); }
};

// Post-softmax attention weights laid out [layer][head][query][key].
struct AttentionMaps {
  std::size_t n_layers = 0, n_heads = 0, n_queries = 0, n_keys = 0;
  std::vector<double> probs;

  double at(std::size_t layer, std::size_t head, std::size_t query, std::size_t key) const {
    return probs[((layer * n_heads + head) * n_queries + query) * n_keys + key];
  }
  bool empty() const { return probs.empty(); }
};

struct VerifierOutput {
  Tensor logits;  // [T x vocab]
  HiddenTaps taps;
  AttentionMaps attention;  // filled only when requested
};

struct VerifierWeights {
  struct Block {
    Tensor attn_norm, wq, wk, wv, wo;
    Tensor mlp_norm, w_up, w_down;
  };
  Tensor embed;  // [vocab x d]
  std::vector<Block> blocks;
  Tensor final_norm, lm_head;

  std::vector<NamedTensor> named() const;
};

// Per-layer unrotated keys and values for positions [0, length).
struct KvCache {
  std::vector<std::vector<double>> k, v;
  std::vector<int> positions;
  std::size_t length() const { return positions.size(); }
};

class Verifier {
 public:
  Verifier(const VerifierConfig& config, const RngStream& init);
  Verifier(const VerifierConfig& config, VerifierWeights weights);

  const VerifierConfig& config() const { return config_; }
  const VerifierWeights& weights() const { return weights_; }
  std::vector<Tensor> parameters() const;
  void set_trainable(bool trainable);

  VerifierOutput forward(std::span<const TokenId> tokens, const AttentionMode& mode = {},
                         bool capture_attention = false) const;

  // Extends `cache` with `tokens` at the positions that follow it; returns
  // outputs for the new positions only (attention maps span the whole cache).
  VerifierOutput extend(KvCache& cache, std::span<const TokenId> tokens, const AttentionMode& mode,
                        bool capture_attention = false) const;

  nlohmann::json meta() const;
  void save(const std::filesystem::path& path) const;
  static Verifier load(const std::filesystem::path& path);
  std::string hash() const;

 private:
  VerifierConfig config_;
  VerifierWeights weights_;
};

void truncate_cache(KvCache& cache, std::size_t length);

// Argmax continuation of `prompt`; ties resolve toward the lowest token id.
std::vector<TokenId> greedy_decode(const Verifier& verifier, std::span<const TokenId> prompt, int n_tokens,
                                   const AttentionMode& mode = {});

struct VerifierTrainConfig {
  int epochs = 10;
  double lr = 6e-3;
  int batch_size = 8;
  std::size_t warmup_steps = 30;
  std::uint64_t seed = 0;
};

struct TrainCurve {
  std::vector<double> step_loss;
  double initial_loss = 0.0;  // mean next-token loss over the corpus before training
  double final_loss = 0.0;    // mean loss over the last epoch
};

// Next-token mean cross-entropy; parameters are frozen again on return.
TrainCurve train_verifier(Verifier& verifier, const std::vector<Conversation>& corpus,
                          const VerifierTrainConfig& config);

// Mean next-token loss over a set of conversations (no gradient).
double evaluate_loss(const Verifier& verifier, const std::vector<Conversation>& corpus);

}  // namespace driftlab
