#pragma once

// Attention-drift and magnitude metrics over drafter chain traces, verifier
// sink detection and aggregated attention heatmaps.

#include <cstddef>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "driftlab/drafter.hpp"
#include "driftlab/verifier.hpp"

namespace driftlab {

class InsufficientData : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class AlignmentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Sum of `values` independent of their order (sorted before adding).
double order_free_sum(std::vector<double> values);

struct MeanStderr {
  double mean = 0.0;
  double stderr_ = 0.0;
  std::size_t n = 0;
};
MeanStderr mean_stderr(const std::vector<double>& values);

struct SinkDetectionConfig {
  double threshold = 0.2;
  std::size_t min_prompts = 50;
  std::size_t min_length = 16;
};

struct SinkReport {
  std::optional<int> position;
  // Mean attention received by each candidate key position (first half of the
  // shortest prompt) from queries in the second half of each prompt, averaged
  // over layers and heads; stderr across prompts.
  std::vector<double> profile;
  std::vector<double> profile_stderr;
  std::vector<std::vector<double>> per_layer;  // [layer][position]
  std::size_t n_prompts = 0;
  double threshold = 0.0;
};

SinkReport detect_sink(const std::vector<AttentionMaps>& maps, const SinkDetectionConfig& config = {});

// Attention fractions of one chain step.
struct StepAttention {
  std::optional<double> sink;  // mass on the sink position, if a sink is known
  double latest = 0.0;         // mass on the newest chain entry
  double chain = 0.0;          // mass on all chain entries of this round
  double entropy = 0.0;        // nats, over the admitted support
  double support = 1.0;        // exp(entropy)
};
StepAttention step_attention(const SpecStep& step, std::optional<int> sink_pos);

struct DriftMetrics {
  int k = 0;
  std::size_t n_traces = 0;
  bool has_sink = false;
  // Per chain step (index j-1).
  std::vector<MeanStderr> sink_frac, latest_frac, chain_frac, entropy, effective_support, rms;
  // Only with per_head: [step][head] mean sink mass.
  std::vector<std::vector<double>> head_sink_frac;
};

DriftMetrics drift_metrics(const std::vector<SpecChainTrace>& traces, std::optional<int> sink_pos,
                           bool per_head = false, std::size_t n_heads = 0);

// Query (chain step) x key grid. Prompt keys are right-aligned to the
// speculation boundary; chain entries follow.
struct Heatmap {
  std::size_t rows = 0, prompt_columns = 0, chain_columns = 0;
  std::size_t n_traces = 0;
  std::vector<double> values;  // rows x (prompt_columns + chain_columns)

  std::size_t cols() const { return prompt_columns + chain_columns; }
  double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }
};

// `prompt_columns` = 0 uses the widest prompt among the traces; a narrower
// explicit width that would cut a trace is an AlignmentError.
Heatmap heatmap(const std::vector<SpecChainTrace>& traces, std::size_t prompt_columns = 0);

void write_heatmap(std::ostream& os, const Heatmap& h);
void write_drift_csv(std::ostream& os, const DriftMetrics& m, const std::string& experiment,
                     const std::string& variant, bool write_header = true);

}  // namespace driftlab
