#pragma once

// Train-time-test distillation of a drafter against a frozen verifier.
//
// For every pair position t (h_FC(t), e(tok[t+1])) the drafter is unrolled for
// ttt_depth steps. Step j consumes the previous step's h_out (h_FC at j=1) and
// the ground-truth embedding of tok[t+j], sits at rotary position t+j-1, and is
// scored against the verifier's distribution at position t+j. Its attention
// sees the step-1 entries of positions <= t plus its own chain entries 2..j,
// restricted to the most recent `window` positions.

#include <cstdint>
#include <vector>

#include "json.hpp"
#include "driftlab/corpus.hpp"
#include "driftlab/drafter.hpp"
#include "driftlab/verifier.hpp"

namespace driftlab {

enum class LossMask { assistant_only, all_positions };
enum class TokenFeeding { teacher, self };

std::string to_string(LossMask m);
LossMask loss_mask_from_string(const std::string& name);

struct TrainConfig {
  int ttt_depth = 8;
  int window = 512;
  double lr = 1.5e-4;
  int epochs = 2;
  int batch = 8;
  std::size_t warmup_steps = 20;
  LossMask loss_mask = LossMask::assistant_only;
  TokenFeeding token_feeding = TokenFeeding::teacher;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct TttResult {
  std::vector<Tensor> step_sums;      // per step: sum of weighted CE
  std::vector<double> step_weights;   // per step: sum of weights
  std::vector<std::vector<double>> row_weights;  // per step: loss weight of each pair position
  std::vector<Tensor> step_logits;    // per step: one row per active row
  std::vector<std::vector<std::size_t>> active_rows;  // per step: pair positions that were computed
  Tensor total;                       // sum_j step_sums[j] / max(1, step_weights[j])
  std::vector<std::uint8_t> masks;    // optional: per step attention masks, concatenated
};

// Verifier-side inputs of one conversation.
struct TeacherOutputs {
  HiddenTaps taps;
  std::vector<double> probs;  // [T x V] softmax of verifier logits
};

TeacherOutputs teacher_outputs(const Verifier& verifier, const Conversation& c);

// Attention mask of TTT step j (1-based) over T-1 pair positions: queries are
// the step-j rows, keys are the stacked rows of steps 1..j.
std::vector<std::uint8_t> ttt_mask(std::size_t n_pairs, int step, int window);

// With `prune`, rows that are unscored at a step and every later step are not
// computed past the step-1 keys; this leaves the loss and its gradient unchanged.
TttResult ttt_unroll(const Drafter& drafter, const Conversation& c, const TeacherOutputs& teacher,
                     const TrainConfig& tc, const TemplateSpec& tmpl = {}, bool keep_masks = false,
                     bool prune = true);

struct DrafterTrainReport {
  // [epoch][step] mean per-step loss (normalized by weight) over the epoch.
  std::vector<std::vector<double>> epoch_step_loss;
  std::vector<double> batch_loss;
  std::string verifier_hash_before, verifier_hash_after;
  nlohmann::json manifest;
};

DrafterTrainReport train_drafter(Drafter& drafter, const std::vector<Conversation>& corpus,
                                 const Verifier& verifier, const TrainConfig& tc, const TemplateSpec& tmpl = {});

std::string corpus_hash(const std::vector<Conversation>& corpus);

}  // namespace driftlab
