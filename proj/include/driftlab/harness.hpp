#pragma once

// Experiment presets, checkpoint caching, per-cell evaluation, report files,
// cross-seed summaries and directional gates.

#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "driftlab/diagnostics.hpp"
#include "driftlab/specdec.hpp"
#include "driftlab/trainer.hpp"

namespace driftlab {

// Unknown preset, malformed override or similar command-line misuse.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ExperimentConfig {
  std::string preset;
  std::vector<std::uint64_t> seeds{1, 2, 3};

  CorpusConfig corpus{};
  std::uint64_t corpus_seed = 1;
  int n_eval = 200;  // held-out conversations generated after the training ones

  VerifierConfig verifier{};
  VerifierTrainConfig verifier_train{};
  std::uint64_t verifier_seed = 1;  // the verifier is shared by all run seeds
  // Share of verifier training conversations kept in the regular template; the
  // rest are rendered without BoS and/or template.
  double verifier_regular_fraction = 0.75;

  TrainConfig drafter_train{};
  std::vector<Variant> variants{Variant::pre_norm, Variant::post_norm};

  int k = 8;
  AttentionMode mode{};
  int n_prompts = 100;
  int max_new_tokens = 24;
  double temperature = 0.0;
  bool engine_style = false;
  int sink_prompts = 64;
  double sink_threshold = 0.2;

  // Condition axes; each preset reads the ones it sweeps.
  std::vector<NoiseSpec::Pathway> pathways{NoiseSpec::Pathway::hidden_states, NoiseSpec::Pathway::embeddings};
  std::vector<double> alphas{0.0, 0.1, 0.25, 0.5, 1.0, 2.0, INFINITY};
  std::vector<TemplateMode> template_modes{TemplateMode::regular, TemplateMode::no_bos, TemplateMode::no_template,
                                           TemplateMode::no_bos_no_template};
  std::vector<int> system_lengths{4, 8, 16, 32, 64};
  // Shorter targets trim the system span; longer ones repeat it ("repeat") or
  // are rejected ("none").
  std::string system_pad = "repeat";
  std::vector<int> ttt_depths{2, 8};
  std::vector<int> windows{8, 16, 32, 64};
  std::vector<AttentionMode> attention_modes{};
  int long_turns = 8;

  // Optional pre-trained checkpoints; otherwise training results are cached.
  std::string verifier_checkpoint;
  std::map<std::string, std::string> drafter_checkpoints;  // "<variant>/ttt<d>" -> path

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  void validate() const;
};

std::vector<std::string> preset_names();
// Throws UsageError listing the known presets.
ExperimentConfig preset_config(const std::string& name);

// "a.b.c=value" applied to the config's JSON form; the value is parsed as JSON
// when possible and taken as a string otherwise.
void apply_override(nlohmann::json& config, const std::string& assignment);

// One evaluation condition of a preset.
struct Condition {
  std::string name;
  int ttt_depth = 8;
  AttentionMode mode{};
  std::optional<NoiseSpec::Pathway> pathway;
  double alpha = 0.0;
  bool pin = false;
  TemplateMode template_mode = TemplateMode::regular;
  std::optional<int> system_length;
  bool long_context = false;
};

std::vector<Condition> preset_conditions(const ExperimentConfig& config);

// Checkpoint provider: trains on first use and caches by configuration hash.
class ModelStore {
 public:
  ModelStore(ExperimentConfig config, std::filesystem::path cache_dir, std::ostream* log = nullptr);

  const std::vector<Conversation>& train_corpus() const { return train_; }
  const std::vector<Conversation>& eval_corpus() const { return eval_; }
  const Verifier& verifier();
  const Drafter& drafter(Variant variant, int ttt_depth, std::uint64_t seed);
  std::string corpus_hash() const { return corpus_hash_; }

 private:
  ExperimentConfig config_;
  std::filesystem::path cache_;
  std::ostream* log_;
  std::vector<Conversation> train_, eval_;
  std::string corpus_hash_;
  std::optional<Verifier> verifier_;
  std::map<std::string, Drafter> drafters_;
};

// Verifier training set: each conversation is re-rendered in a random template
// mode with probability 1 - regular_fraction.
std::vector<Conversation> template_mixture(const std::vector<Conversation>& corpus, double regular_fraction,
                                           const RngStream& rng);

struct CellResult {
  std::string variant, condition;
  AcceptanceStats stats;
  std::vector<double> prompt_tau;  // per-prompt tau (excluding bonus)
  std::vector<SpecChainTrace> traces;
};

struct SeedRun {
  std::filesystem::path dir;
  nlohmann::json manifest;
};

// Runs every (variant x condition) cell for every seed; writes
// <out_root>/<preset>/seed<s>/... and returns the per-seed manifests.
std::vector<SeedRun> run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_root,
                                    const std::filesystem::path& cache_dir,
                                    const std::vector<std::string>& overrides = {}, std::ostream* log = nullptr);

// Re-runs the seed described by a manifest into `out_root`.
SeedRun rerun_from_manifest(const std::filesystem::path& manifest_path, const std::filesystem::path& out_root,
                            const std::filesystem::path& cache_dir, std::ostream* log = nullptr);

// Per-condition acceptance row as stored in acceptance.csv.
struct AcceptanceRow {
  std::string preset, variant, condition;
  std::uint64_t seed = 0;
  int prompts = 0, rounds = 0, k = 0;
  double tau_excl = 0.0, tau_incl = 0.0, tau_se = 0.0;
  std::vector<std::optional<double>> curve;
  std::vector<int> reached, passed;  // per step counts behind the curve
};

std::vector<AcceptanceRow> read_acceptance_csv(const std::filesystem::path& path);

struct DriftRow {
  std::string variant, condition;
  int step = 0;
  std::optional<double> sink;
  double latest = 0.0, chain = 0.0, entropy = 0.0, rms = 0.0;
};
std::vector<DriftRow> read_drift_csv(const std::filesystem::path& path);

// Mean +- stderr per (variant, condition) across seed directories plus
// per-seed post/pre ratios; refuses directories from different presets.
struct Summary {
  std::string preset;
  std::vector<std::uint64_t> seeds;
  std::string table;   // summary.csv contents
  std::string ratios;  // ratios.csv contents
};
Summary summarize(const std::vector<std::filesystem::path>& seed_dirs);

struct GateResult {
  int criterion = 0;
  std::string name;
  bool applicable = true;
  bool passed = false;
  std::string detail;
};

// Directional criteria a preset's outputs can decide, majority over seeds.
std::vector<GateResult> evaluate_gates(const std::vector<std::filesystem::path>& seed_dirs);

std::filesystem::path output_root_from_env();

}  // namespace driftlab
