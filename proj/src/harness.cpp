#include "driftlab/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "driftlab/hashing.hpp"

namespace driftlab {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

json alpha_to_json(double a) { return std::isinf(a) ? json("inf") : json(a); }

double alpha_from_json(const json& j) {
  if (j.is_string()) {
    if (j.get<std::string>() == "inf") return INFINITY;
    throw ConfigError("alpha: expected a number or \"inf\", got " + j.dump());
  }
  return j.get<double>();
}

std::string alpha_name(double a) {
  if (std::isinf(a)) return "inf";
  std::ostringstream os;
  os << a;
  return os.str();
}

json mode_to_json(const AttentionMode& m) {
  return {{"kind", to_string(m.kind)},
          {"window", m.window},
          {"prefix_len", m.prefix_len},
          {"relative_positions", m.relative_positions}};
}

AttentionMode mode_from_json(const json& j) {
  AttentionMode m;
  m.kind = attention_kind_from_string(j.at("kind").get<std::string>());
  m.window = j.value("window", 0);
  m.prefix_len = j.value("prefix_len", 0);
  m.relative_positions = j.value("relative_positions", false);
  m.validate();
  return m;
}

json corpus_to_json(const CorpusConfig& c) {
  return {{"vocab_size", c.vocab_size},     {"n_conversations", c.n_conversations},
          {"turns", c.turns},               {"system_len", c.system_len},
          {"user_len_min", c.user_len_min}, {"user_len_max", c.user_len_max},
          {"reply_extra", c.reply_extra},   {"reply_noise", c.reply_noise}};
}

CorpusConfig corpus_from_json(const json& j) {
  CorpusConfig c;
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.n_conversations = j.value("n_conversations", c.n_conversations);
  c.turns = j.value("turns", c.turns);
  c.system_len = j.value("system_len", c.system_len);
  c.user_len_min = j.value("user_len_min", c.user_len_min);
  c.user_len_max = j.value("user_len_max", c.user_len_max);
  c.reply_extra = j.value("reply_extra", c.reply_extra);
  c.reply_noise = j.value("reply_noise", c.reply_noise);
  return c;
}

json vtrain_to_json(const VerifierTrainConfig& t) {
  return {{"epochs", t.epochs}, {"lr", t.lr}, {"batch_size", t.batch_size}, {"warmup_steps", t.warmup_steps}};
}

VerifierTrainConfig vtrain_from_json(const json& j) {
  VerifierTrainConfig t;
  t.epochs = j.value("epochs", t.epochs);
  t.lr = j.value("lr", t.lr);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.warmup_steps = j.value("warmup_steps", t.warmup_steps);
  return t;
}

// Lab-scale drafter training: the paper-scale learning rate barely moves a
// toy drafter within a few epochs.
TrainConfig lab_drafter_train() {
  TrainConfig t;
  t.lr = 1e-2;
  t.epochs = 3;
  return t;
}

const std::vector<std::string> kPresets{"magnitudes", "variants", "noise",   "pin",   "ttt",
                                        "template",   "sysprompt", "longctx", "window"};

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw DataError("cannot read " + p.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

void write_file(const fs::path& p, const std::string& content) {
  fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw DataError("cannot write " + p.string());
  os << content;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace

json ExperimentConfig::to_json() const {
  json alphas_j = json::array();
  for (double a : alphas) alphas_j.push_back(alpha_to_json(a));
  json pathways_j = json::array();
  for (auto p : pathways) pathways_j.push_back(to_string(p));
  json modes_j = json::array();
  for (auto m : template_modes) modes_j.push_back(to_string(m));
  json variants_j = json::array();
  for (auto v : variants) variants_j.push_back(to_string(v));
  json att_j = json::array();
  for (const auto& m : attention_modes) att_j.push_back(mode_to_json(m));
  return {{"preset", preset},
          {"seeds", seeds},
          {"corpus", corpus_to_json(corpus)},
          {"corpus_seed", corpus_seed},
          {"n_eval", n_eval},
          {"verifier", verifier.to_json()},
          {"verifier_train", vtrain_to_json(verifier_train)},
          {"verifier_seed", verifier_seed},
          {"verifier_regular_fraction", verifier_regular_fraction},
          {"drafter_train", drafter_train.to_json()},
          {"variants", variants_j},
          {"k", k},
          {"mode", mode_to_json(mode)},
          {"n_prompts", n_prompts},
          {"max_new_tokens", max_new_tokens},
          {"temperature", temperature},
          {"engine_style", engine_style},
          {"sink_prompts", sink_prompts},
          {"sink_threshold", sink_threshold},
          {"pathways", pathways_j},
          {"alphas", alphas_j},
          {"template_modes", modes_j},
          {"system_lengths", system_lengths},
          {"system_pad", system_pad},
          {"ttt_depths", ttt_depths},
          {"windows", windows},
          {"attention_modes", att_j},
          {"long_turns", long_turns},
          {"verifier_checkpoint", verifier_checkpoint},
          {"drafter_checkpoints", drafter_checkpoints}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  try {
    ExperimentConfig c;
    c.preset = j.at("preset").get<std::string>();
    c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    c.corpus = corpus_from_json(j.at("corpus"));
    c.corpus_seed = j.at("corpus_seed").get<std::uint64_t>();
    c.n_eval = j.at("n_eval").get<int>();
    c.verifier = VerifierConfig::from_json(j.at("verifier"));
    c.verifier_train = vtrain_from_json(j.at("verifier_train"));
    c.verifier_seed = j.at("verifier_seed").get<std::uint64_t>();
    c.verifier_regular_fraction = j.at("verifier_regular_fraction").get<double>();
    c.drafter_train = TrainConfig::from_json(j.at("drafter_train"));
    c.variants.clear();
    for (const auto& v : j.at("variants")) c.variants.push_back(variant_from_string(v.get<std::string>()));
    c.k = j.at("k").get<int>();
    c.mode = mode_from_json(j.at("mode"));
    c.n_prompts = j.at("n_prompts").get<int>();
    c.max_new_tokens = j.at("max_new_tokens").get<int>();
    c.temperature = j.at("temperature").get<double>();
    c.engine_style = j.at("engine_style").get<bool>();
    c.sink_prompts = j.at("sink_prompts").get<int>();
    c.sink_threshold = j.at("sink_threshold").get<double>();
    c.pathways.clear();
    for (const auto& p : j.at("pathways")) c.pathways.push_back(pathway_from_string(p.get<std::string>()));
    c.alphas.clear();
    for (const auto& a : j.at("alphas")) c.alphas.push_back(alpha_from_json(a));
    c.template_modes.clear();
    for (const auto& m : j.at("template_modes")) c.template_modes.push_back(template_mode_from_string(m.get<std::string>()));
    c.system_lengths = j.at("system_lengths").get<std::vector<int>>();
    c.system_pad = j.at("system_pad").get<std::string>();
    c.ttt_depths = j.at("ttt_depths").get<std::vector<int>>();
    c.windows = j.at("windows").get<std::vector<int>>();
    c.attention_modes.clear();
    for (const auto& m : j.at("attention_modes")) c.attention_modes.push_back(mode_from_json(m));
    c.long_turns = j.at("long_turns").get<int>();
    c.verifier_checkpoint = j.at("verifier_checkpoint").get<std::string>();
    c.drafter_checkpoints = j.at("drafter_checkpoints").get<std::map<std::string, std::string>>();
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
}

void ExperimentConfig::validate() const {
  if (std::find(kPresets.begin(), kPresets.end(), preset) == kPresets.end()) {
    throw UsageError("unknown preset '" + preset + "'; known presets: " + join(kPresets, ", "));
  }
  if (seeds.empty()) throw ConfigError("experiment: at least one seed is required");
  if (variants.empty()) throw ConfigError("experiment: at least one variant is required");
  if (k < 1) throw ConfigError("experiment: k must be >= 1");
  if (n_prompts < 1 || n_prompts > n_eval) throw ConfigError("experiment: n_prompts must be in [1, n_eval]");
  if (max_new_tokens < 1) throw ConfigError("experiment: max_new_tokens must be >= 1");
  if (verifier_regular_fraction < 0.0 || verifier_regular_fraction > 1.0) {
    throw ConfigError("experiment: verifier_regular_fraction must be in [0, 1]");
  }
  for (double a : alphas)
    if (!(a >= 0.0)) throw ConfigError("experiment: noise alphas must be >= 0");
  for (int w : windows)
    if (w < 1) throw ConfigError("experiment: windows must be >= 1");
  for (int d : ttt_depths)
    if (d < 1) throw ConfigError("experiment: ttt depths must be >= 1");
  for (int s : system_lengths)
    if (s < 0) throw ConfigError("experiment: system lengths must be >= 0");
  if (system_pad != "repeat" && system_pad != "none") throw ConfigError("experiment: system_pad must be repeat or none");
  mode.validate();
  verifier.validate();
  drafter_train.validate();
}

std::vector<std::string> preset_names() { return kPresets; }

ExperimentConfig preset_config(const std::string& name) {
  if (std::find(kPresets.begin(), kPresets.end(), name) == kPresets.end()) {
    throw UsageError("unknown preset '" + name + "'; known presets: " + join(kPresets, ", "));
  }
  ExperimentConfig c;
  c.preset = name;
  c.drafter_train = lab_drafter_train();
  if (name == "variants") c.variants.assign(std::begin(kAllVariants), std::end(kAllVariants));
  if (name == "longctx") {
    const int prefix = c.corpus.system_len + 3;  // bos, system open, system span, system close
    c.attention_modes = {AttentionMode::full(), AttentionMode::swa(32), AttentionMode::swa_bos(32),
                         AttentionMode::swa_prefix(32, prefix)};
    c.n_prompts = 50;
  }
  if (name == "window") c.mode = AttentionMode::swa(16);
  return c;
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json* node = &config;
  const auto parts = split(key, '.');
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (!node->is_object() || !node->contains(parts[i])) throw UsageError("override: unknown key '" + key + "'");
    node = &(*node)[parts[i]];
  }
  *node = value;
}

std::vector<Condition> preset_conditions(const ExperimentConfig& c) {
  std::vector<Condition> out;
  const int ttt = c.drafter_train.ttt_depth;
  auto base = [&](std::string name) {
    Condition cond;
    cond.name = std::move(name);
    cond.ttt_depth = ttt;
    cond.mode = c.mode;
    return cond;
  };
  const std::string& p = c.preset;
  if (p == "magnitudes" || p == "variants") {
    out.push_back(base("base"));
  } else if (p == "noise") {
    for (auto pw : c.pathways)
      for (double a : c.alphas) {
        auto cond = base(to_string(pw) + "@" + alpha_name(a));
        cond.pathway = pw;
        cond.alpha = a;
        out.push_back(cond);
      }
  } else if (p == "pin") {
    out.push_back(base("unpinned"));
    auto pinned = base("pinned");
    pinned.pin = true;
    out.push_back(pinned);
  } else if (p == "ttt") {
    for (int d : c.ttt_depths) {
      auto cond = base("ttt" + std::to_string(d));
      cond.ttt_depth = d;
      out.push_back(cond);
    }
  } else if (p == "template") {
    for (auto m : c.template_modes) {
      auto cond = base(to_string(m));
      cond.template_mode = m;
      out.push_back(cond);
    }
  } else if (p == "sysprompt") {
    for (int len : c.system_lengths) {
      auto cond = base("sys" + std::to_string(len));
      cond.system_length = len;
      out.push_back(cond);
    }
  } else if (p == "longctx") {
    for (const auto& m : c.attention_modes) {
      auto cond = base(m.name());
      cond.mode = m;
      cond.long_context = true;
      out.push_back(cond);
    }
  } else if (p == "window") {
    const auto kind = c.mode.windowed() ? c.mode.kind : AttentionMode::Kind::swa;
    for (int w : c.windows) {
      AttentionMode m = c.mode;
      m.kind = kind;
      m.window = w;
      auto cond = base(m.name());
      cond.mode = m;
      out.push_back(cond);
    }
  }
  return out;
}

std::vector<Conversation> template_mixture(const std::vector<Conversation>& corpus, double regular_fraction,
                                           const RngStream& seed) {
  static constexpr TemplateMode kOthers[] = {TemplateMode::no_bos, TemplateMode::no_template,
                                             TemplateMode::no_bos_no_template};
  RngStream rng = seed;
  std::vector<Conversation> out;
  out.reserve(corpus.size());
  for (const auto& c : corpus) {
    const bool keep = rng.uniform() < regular_fraction;
    const TemplateMode m = kOthers[rng.uniform_int(3)];
    out.push_back(keep ? c : apply_perturbation(c, m, std::nullopt));
  }
  return out;
}

ModelStore::ModelStore(ExperimentConfig config, fs::path cache_dir, std::ostream* log)
    : config_(std::move(config)), cache_(std::move(cache_dir)), log_(log) {
  CorpusConfig cc = config_.corpus;
  cc.n_conversations = config_.corpus.n_conversations + config_.n_eval;
  auto all = generate_corpus(cc, RngStream(config_.corpus_seed));
  train_.assign(all.begin(), all.begin() + config_.corpus.n_conversations);
  eval_.assign(all.begin() + config_.corpus.n_conversations, all.end());
  corpus_hash_ = driftlab::corpus_hash(train_);
}

const Verifier& ModelStore::verifier() {
  if (verifier_) return *verifier_;
  if (!config_.verifier_checkpoint.empty()) {
    if (!fs::exists(config_.verifier_checkpoint)) {
      throw DataError("verifier checkpoint not found: " + config_.verifier_checkpoint);
    }
    verifier_.emplace(Verifier::load(config_.verifier_checkpoint));
    return *verifier_;
  }
  const json key = {{"format", 1},
                    {"corpus", corpus_to_json(config_.corpus)},
                    {"corpus_seed", config_.corpus_seed},
                    {"verifier", config_.verifier.to_json()},
                    {"train", vtrain_to_json(config_.verifier_train)},
                    {"seed", config_.verifier_seed},
                    {"regular_fraction", config_.verifier_regular_fraction}};
  const fs::path path = cache_ / ("verifier-" + sha256_hex(key.dump()).substr(0, 16) + ".ckpt");
  if (fs::exists(path)) {
    verifier_.emplace(Verifier::load(path));
    return *verifier_;
  }
  if (log_) *log_ << "training verifier -> " << path.filename().string() << std::endl;
  const RngStream root(config_.verifier_seed);
  Verifier v(config_.verifier, root.derive("verifier"));
  VerifierTrainConfig tc = config_.verifier_train;
  tc.seed = config_.verifier_seed;
  const auto mixed = template_mixture(train_, config_.verifier_regular_fraction, root.derive("template_mixture"));
  const auto curve = train_verifier(v, mixed, tc);
  if (log_) *log_ << "verifier loss " << curve.initial_loss << " -> " << curve.final_loss << std::endl;
  fs::create_directories(cache_);
  v.save(path);
  verifier_.emplace(Verifier::load(path));
  return *verifier_;
}

const Drafter& ModelStore::drafter(Variant variant, int ttt_depth, std::uint64_t seed) {
  const std::string name = to_string(variant) + "/ttt" + std::to_string(ttt_depth);
  const std::string slot = name + "/seed" + std::to_string(seed);
  if (auto it = drafters_.find(slot); it != drafters_.end()) return it->second;
  if (auto it = config_.drafter_checkpoints.find(name); it != config_.drafter_checkpoints.end()) {
    if (!fs::exists(it->second)) throw DataError("drafter checkpoint not found: " + it->second);
    return drafters_.emplace(slot, Drafter::load(it->second)).first->second;
  }
  const Verifier& v = verifier();
  TrainConfig tc = config_.drafter_train;
  tc.ttt_depth = ttt_depth;
  tc.seed = seed;
  const DrafterConfig dc = DrafterConfig::preset(variant, v.config());
  const json key = {{"format", 1},
                    {"verifier", v.hash()},
                    {"corpus", corpus_hash_},
                    {"drafter", dc.to_json()},
                    {"train", tc.to_json()}};
  const fs::path path = cache_ / ("drafter-" + sha256_hex(key.dump()).substr(0, 16) + ".ckpt");
  if (!fs::exists(path)) {
    if (log_) *log_ << "training drafter " << slot << " -> " << path.filename().string() << std::endl;
    Drafter d(dc, v, RngStream(seed).derive("drafter").derive(to_string(variant)));
    const auto report = train_drafter(d, train_, v, tc);
    if (log_) {
      *log_ << "  step losses last epoch:";
      for (double l : report.epoch_step_loss.back()) *log_ << ' ' << fmt(l);
      *log_ << std::endl;
    }
    fs::create_directories(cache_);
    d.save(path);
  }
  return drafters_.emplace(slot, Drafter::load(path)).first->second;
}

namespace {

struct PromptCase {
  std::vector<TokenId> prompt;
  int n_tokens = 0;
};

std::vector<PromptCase> condition_prompts(const ExperimentConfig& c, const Condition& cond,
                                          const std::vector<Conversation>& eval) {
  std::vector<Conversation> source;
  if (cond.long_context) {
    CorpusConfig cc = c.corpus;
    cc.turns = c.long_turns;
    cc.n_conversations = c.corpus.n_conversations + c.n_prompts;
    auto all = generate_corpus(cc, RngStream(c.corpus_seed));
    source.assign(all.end() - c.n_prompts, all.end());
  } else {
    source.assign(eval.begin(), eval.begin() + c.n_prompts);
  }
  std::vector<PromptCase> out;
  for (const auto& conv : source) {
    std::optional<SystemLengthOverride> sys;
    if (cond.system_length) {
      sys = SystemLengthOverride{*cond.system_length, c.system_pad == "repeat" ? PadRule::repeat : PadRule::none, {}};
    }
    const Conversation shaped = apply_perturbation(conv, cond.template_mode, sys);
    auto split = split_last_reply(shaped);
    const int n = std::min(c.max_new_tokens, static_cast<int>(split.reference.size()) + 1);
    out.push_back({std::move(split.prompt.tokens), n});
  }
  return out;
}

std::string cell_file(const std::string& variant, const std::string& condition) {
  std::string s = variant + "__" + condition;
  for (auto& ch : s)
    if (ch == '@' || ch == '+' || ch == '/') ch = '_';
  return s;
}

}  // namespace

namespace {

SeedRun run_seed(const ExperimentConfig& config, std::uint64_t seed, ModelStore& store, const fs::path& out_root,
                 const std::vector<std::string>& overrides, std::ostream* log) {
  const fs::path dir = out_root / config.preset / ("seed" + std::to_string(seed));
  fs::create_directories(dir);
  const Verifier& verifier = store.verifier();
  const auto conditions = preset_conditions(config);

  ExperimentConfig single = config;
  single.seeds = {seed};
  const json config_json = single.to_json();

  // Sink detection on the verifier over held-out regular prompts.
  std::vector<AttentionMaps> maps;
  for (int i = 0; i < config.sink_prompts && i < static_cast<int>(store.eval_corpus().size()); ++i) {
    const auto prompt = split_last_reply(store.eval_corpus()[static_cast<std::size_t>(i)]).prompt.tokens;
    maps.push_back(verifier.forward(prompt, AttentionMode::full(), true).attention);
  }
  std::optional<int> sink_pos;
  json sink_j;
  try {
    const auto report = detect_sink(maps, SinkDetectionConfig{config.sink_threshold, 50, 16});
    sink_pos = report.position;
    sink_j = {{"position", report.position ? json(*report.position) : json(nullptr)},
              {"threshold", report.threshold},
              {"n_prompts", report.n_prompts},
              {"profile", report.profile},
              {"profile_stderr", report.profile_stderr},
              {"per_layer", report.per_layer}};
  } catch (const InsufficientData& e) {
    sink_j = {{"position", nullptr}, {"error", e.what()}};
  }
  write_file(dir / "sink.json", sink_j.dump(2) + "\n");

  std::ostringstream acceptance, drift, magnitudes;
  acceptance << "preset,variant,condition,seed,prompts,rounds,k,tau_excl,tau_incl,tau_prompt_se";
  for (int j = 1; j <= config.k; ++j) acceptance << ",c" << j;
  acceptance << ",reached,passed\n";
  magnitudes << "preset,variant,condition,seed,rms_low,rms_mid,rms_high,rms_hfc";
  for (int j = 1; j <= config.k; ++j) magnitudes << ",rms_h" << j;
  magnitudes << '\n';
  bool drift_header = true;

  // Verifier tap magnitudes over the regular prompts, shared by all cells.
  std::vector<double> tap_low, tap_mid, tap_high;
  for (int i = 0; i < config.n_prompts; ++i) {
    const auto prompt = split_last_reply(store.eval_corpus()[static_cast<std::size_t>(i)]).prompt.tokens;
    const auto taps = verifier.forward(prompt).taps;
    for (std::size_t r = 0; r < taps.length(); ++r) {
      tap_low.push_back(rms(taps.low.row_span(r)));
      tap_mid.push_back(rms(taps.mid.row_span(r)));
      tap_high.push_back(rms(taps.high.row_span(r)));
    }
  }

  json drafter_hashes = json::object();
  const RngStream root(seed);
  for (auto variant : config.variants) {
    for (const auto& cond : conditions) {
      const Drafter& drafter = store.drafter(variant, cond.ttt_depth, seed);
      drafter_hashes[to_string(variant) + "/ttt" + std::to_string(cond.ttt_depth)] = drafter.hash();
      const auto prompts = condition_prompts(config, cond, store.eval_corpus());
      const RngStream cell_rng = root.derive("cell").derive(to_string(variant)).derive(cond.name);

      AcceptanceStats stats;
      stats.k = config.k;
      stats.engine_style = config.engine_style;
      std::vector<double> prompt_tau, hfc_rms;
      std::vector<SpecChainTrace> traces;
      std::ostringstream events;
      for (std::size_t i = 0; i < prompts.size(); ++i) {
        SpecConfig sc;
        sc.k = config.k;
        sc.mode = cond.mode;
        sc.sampling.temperature = config.temperature;
        sc.seed = cell_rng.derive("sampling").derive(i).derive("seed").uniform_int(1 << 30);
        sc.pin = cond.pin;
        sc.engine_style = config.engine_style;
        if (cond.pathway) {
          NoiseSpec noise;
          noise.pathway = *cond.pathway;
          noise.alpha = cond.alpha;
          noise.rng = cell_rng.derive("noise").derive(i);
          sc.noise = noise;
        }
        const auto& pc = prompts[i];
        const auto r = speculative_generate(verifier, drafter, pc.prompt, pc.n_tokens, sc);
        stats.merge(r.stats);
        if (r.stats.rounds() > 0) prompt_tau.push_back(r.stats.tau_excl_bonus());
        hfc_rms.push_back(rms(drafter.fuse(verifier.forward(pc.prompt, cond.mode).taps).row_span(pc.prompt.size() - 1)));
        for (std::size_t rd = 0; rd < r.rounds.size(); ++rd) {
          const auto& rec = r.rounds[rd];
          json ev = {{"preset", config.preset},
                     {"variant", to_string(variant)},
                     {"condition", cond.name},
                     {"seed", seed},
                     {"prompt", i},
                     {"round", rec.round},
                     {"drafted", rec.drafted},
                     {"accepted", rec.accepted},
                     {"replacement", rec.replacement},
                     {"emitted", r.emitted_per_round[rd]},
                     {"rms", rec.rms_profile}};
          if (cond.pathway) {
            ev["noise_site"] = to_string(*cond.pathway) + "_input_norm";
            ev["alpha"] = alpha_to_json(cond.alpha);
          }
          json sink = json::array(), latest = json::array(), chain = json::array(), entropy = json::array();
          for (const auto& step : r.traces[rd].steps) {
            const auto a = step_attention(step, sink_pos);
            sink.push_back(a.sink ? json(*a.sink) : json(nullptr));
            latest.push_back(a.latest);
            chain.push_back(a.chain);
            entropy.push_back(a.entropy);
          }
          ev["sink_frac"] = sink;
          ev["latest_frac"] = latest;
          ev["chain_frac"] = chain;
          ev["entropy"] = entropy;
          events << ev.dump() << '\n';
        }
        traces.insert(traces.end(), r.traces.begin(), r.traces.end());
      }
      write_file(dir / "events" / (cell_file(to_string(variant), cond.name) + ".jsonl"), events.str());

      const auto tau_se = mean_stderr(prompt_tau);
      acceptance << config.preset << ',' << to_string(variant) << ',' << cond.name << ',' << seed << ','
                 << prompts.size() << ',' << stats.rounds() << ',' << config.k << ',' << fmt(stats.tau_excl_bonus())
                 << ',' << fmt(stats.tau_incl_bonus()) << ',' << fmt(tau_se.stderr_);
      std::vector<std::string> reached, passed;
      if (stats.rounds() > 0) {
        const auto curve = conditional_acceptance(stats);
        for (const auto& v : curve) acceptance << ',' << (v ? fmt(*v) : "");
        for (int j = 1; j <= config.k; ++j) {
          int re = 0, pa = 0;
          for (int a : stats.accepted_per_round) {
            re += a >= j - 1;
            pa += a >= j;
          }
          reached.push_back(std::to_string(re));
          passed.push_back(std::to_string(pa));
        }
      } else {
        for (int j = 0; j < config.k; ++j) acceptance << ',';
      }
      acceptance << ',' << join(reached, ";") << ',' << join(passed, ";") << '\n';

      if (!traces.empty()) {
        const auto m = drift_metrics(traces, sink_pos);
        write_drift_csv(drift, m, config.preset + ":" + cond.name, to_string(variant), drift_header);
        drift_header = false;
        std::ostringstream grid;
        write_heatmap(grid, heatmap(traces));
        write_file(dir / "heatmaps" / (cell_file(to_string(variant), cond.name) + ".csv"), grid.str());
        magnitudes << config.preset << ',' << to_string(variant) << ',' << cond.name << ',' << seed << ','
                   << fmt(mean_stderr(tap_low).mean) << ',' << fmt(mean_stderr(tap_mid).mean) << ','
                   << fmt(mean_stderr(tap_high).mean) << ',' << fmt(mean_stderr(hfc_rms).mean);
        for (const auto& r : m.rms) magnitudes << ',' << fmt(r.mean);
        magnitudes << '\n';
      }
      if (log) {
        *log << config.preset << " seed " << seed << ' ' << to_string(variant) << ' ' << cond.name
             << " tau=" << fmt(stats.tau_excl_bonus()) << " rounds=" << stats.rounds() << std::endl;
      }
    }
  }
  write_file(dir / "acceptance.csv", acceptance.str());
  write_file(dir / "drift.csv", drift.str());
  write_file(dir / "magnitudes.csv", magnitudes.str());

  json outputs = json::object();
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().filename() == "manifest.json") continue;
    outputs[fs::relative(entry.path(), dir).generic_string()] = sha256_hex(read_file(entry.path()));
  }
  json manifest = {{"manifest_id", sha256_hex(config_json.dump()).substr(0, 16)},
                   {"preset", config.preset},
                   {"seed", seed},
                   {"config", config_json},
                   {"overrides", overrides},
                   {"verifier_hash", verifier.hash()},
                   {"corpus_hash", store.corpus_hash()},
                   {"drafter_hashes", drafter_hashes},
                   {"ttt_targets", "shifted_position"},
                   {"rng", RngStream::kAlgorithm},
                   {"outputs", outputs}};
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
  return {dir, manifest};
}

}  // namespace

std::vector<SeedRun> run_experiment(const ExperimentConfig& config, const fs::path& out_root, const fs::path& cache_dir,
                                    const std::vector<std::string>& overrides, std::ostream* log) {
  config.validate();
  ModelStore store(config, cache_dir, log);
  std::vector<SeedRun> runs;
  for (auto seed : config.seeds) runs.push_back(run_seed(config, seed, store, out_root, overrides, log));
  return runs;
}

SeedRun rerun_from_manifest(const fs::path& manifest_path, const fs::path& out_root, const fs::path& cache_dir,
                            std::ostream* log) {
  json manifest;
  try {
    manifest = json::parse(read_file(manifest_path));
  } catch (const json::parse_error& e) {
    throw DataError("manifest " + manifest_path.string() + ": " + e.what());
  }
  const auto config = ExperimentConfig::from_json(manifest.at("config"));
  ModelStore store(config, cache_dir, log);
  const auto overrides = manifest.value("overrides", std::vector<std::string>{});
  return run_seed(config, manifest.at("seed").get<std::uint64_t>(), store, out_root, overrides, log);
}

namespace {

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::istringstream is(read_file(path));
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    rows.push_back(split(line, ','));
  }
  return rows;
}

std::size_t column(const std::vector<std::string>& header, const std::string& name, const fs::path& path) {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw DataError(path.string() + ": missing column " + name);
  return static_cast<std::size_t>(it - header.begin());
}

std::optional<double> optional_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::stod(s);
}

std::vector<int> int_list(const std::string& s) {
  std::vector<int> out;
  if (s.empty()) return out;
  for (const auto& p : split(s, ';')) out.push_back(std::stoi(p));
  return out;
}

}  // namespace

std::vector<AcceptanceRow> read_acceptance_csv(const fs::path& path) {
  const auto rows = read_csv(path);
  if (rows.empty()) throw DataError(path.string() + ": empty acceptance table");
  const auto& h = rows.front();
  std::vector<AcceptanceRow> out;
  try {
    const int k = std::count_if(h.begin(), h.end(), [](const std::string& s) { return s.size() > 1 && s[0] == 'c' && std::isdigit(static_cast<unsigned char>(s[1])); });
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const auto& r = rows[i];
      if (r.size() != h.size()) throw DataError(path.string() + ": row " + std::to_string(i) + " has wrong width");
      AcceptanceRow a;
      a.preset = r[column(h, "preset", path)];
      a.variant = r[column(h, "variant", path)];
      a.condition = r[column(h, "condition", path)];
      a.seed = std::stoull(r[column(h, "seed", path)]);
      a.prompts = std::stoi(r[column(h, "prompts", path)]);
      a.rounds = std::stoi(r[column(h, "rounds", path)]);
      a.k = std::stoi(r[column(h, "k", path)]);
      a.tau_excl = std::stod(r[column(h, "tau_excl", path)]);
      a.tau_incl = std::stod(r[column(h, "tau_incl", path)]);
      a.tau_se = std::stod(r[column(h, "tau_prompt_se", path)]);
      for (int j = 1; j <= k; ++j) a.curve.push_back(optional_number(r[column(h, "c" + std::to_string(j), path)]));
      a.reached = int_list(r[column(h, "reached", path)]);
      a.passed = int_list(r[column(h, "passed", path)]);
      out.push_back(std::move(a));
    }
  } catch (const std::invalid_argument& e) {
    throw DataError(path.string() + ": malformed number");
  }
  return out;
}

std::vector<DriftRow> read_drift_csv(const fs::path& path) {
  const auto rows = read_csv(path);
  std::vector<DriftRow> out;
  if (rows.empty()) return out;
  const auto& h = rows.front();
  try {
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const auto& r = rows[i];
      DriftRow d;
      const std::string exp = r[column(h, "experiment", path)];
      d.condition = exp.substr(exp.find(':') + 1);
      d.variant = r[column(h, "variant", path)];
      d.step = std::stoi(r[column(h, "step", path)]);
      d.sink = optional_number(r[column(h, "sink_frac", path)]);
      d.latest = std::stod(r[column(h, "latest_frac", path)]);
      d.chain = std::stod(r[column(h, "chain_frac", path)]);
      d.entropy = std::stod(r[column(h, "entropy", path)]);
      d.rms = std::stod(r[column(h, "rms", path)]);
      out.push_back(d);
    }
  } catch (const std::invalid_argument&) {
    throw DataError(path.string() + ": malformed number");
  }
  return out;
}

namespace {

struct SeedTables {
  std::uint64_t seed = 0;
  std::string preset, manifest_id;
  std::vector<AcceptanceRow> acceptance;
  std::vector<DriftRow> drift;
  json sink;
};

std::vector<SeedTables> load_seed_dirs(const std::vector<fs::path>& dirs) {
  if (dirs.empty()) throw UsageError("summarize: no run directories given");
  std::vector<SeedTables> out;
  for (const auto& d : dirs) {
    SeedTables t;
    json manifest;
    try {
      manifest = json::parse(read_file(d / "manifest.json"));
    } catch (const json::parse_error& e) {
      throw DataError((d / "manifest.json").string() + ": " + e.what());
    }
    t.preset = manifest.at("preset").get<std::string>();
    t.seed = manifest.at("seed").get<std::uint64_t>();
    t.manifest_id = manifest.value("manifest_id", "");
    t.acceptance = read_acceptance_csv(d / "acceptance.csv");
    t.drift = read_drift_csv(d / "drift.csv");
    t.sink = json::parse(read_file(d / "sink.json"));
    for (const auto& row : t.acceptance) {
      if (row.preset != t.preset) throw DataError(d.string() + ": acceptance rows disagree with the manifest preset");
    }
    out.push_back(std::move(t));
  }
  std::set<std::string> presets;
  for (const auto& t : out) presets.insert(t.preset);
  if (presets.size() > 1) {
    throw UsageError("summarize: refusing to mix presets (" + join({presets.begin(), presets.end()}, ", ") + ")");
  }
  std::set<std::uint64_t> seeds;
  for (const auto& t : out)
    if (!seeds.insert(t.seed).second) throw UsageError("summarize: seed " + std::to_string(t.seed) + " given twice");
  return out;
}

const AcceptanceRow* find_row(const SeedTables& t, const std::string& variant, const std::string& condition) {
  for (const auto& r : t.acceptance)
    if (r.variant == variant && r.condition == condition) return &r;
  return nullptr;
}

}  // namespace

Summary summarize(const std::vector<fs::path>& seed_dirs) {
  auto tables = load_seed_dirs(seed_dirs);
  std::sort(tables.begin(), tables.end(), [](const auto& a, const auto& b) { return a.seed < b.seed; });
  Summary s;
  s.preset = tables.front().preset;
  for (const auto& t : tables) s.seeds.push_back(t.seed);

  // Row keys in first-seen order.
  std::vector<std::pair<std::string, std::string>> keys;
  for (const auto& r : tables.front().acceptance) keys.emplace_back(r.variant, r.condition);
  std::vector<std::string> variants;
  for (const auto& [v, c] : keys)
    if (std::find(variants.begin(), variants.end(), v) == variants.end()) variants.push_back(v);

  // Each condition is also expressed relative to the first condition of its
  // group (the part of a "group@level" name before '@'; all other conditions
  // form one group), per seed then averaged.
  auto group = [](const std::string& c) {
    const auto at = c.find('@');
    return at == std::string::npos ? std::string() : c.substr(0, at);
  };
  std::ostringstream table;
  table << "preset,variant,condition,seeds,tau_excl_mean,tau_excl_se,tau_incl_mean,tau_incl_se,baseline,"
           "rel_to_baseline_mean,rel_to_baseline_se,manifest_ids\n";
  for (const auto& [v, c] : keys) {
    std::string baseline;
    for (const auto& [bv, bc] : keys)
      if (bv == v && group(bc) == group(c)) {
        baseline = bc;
        break;
      }
    std::vector<double> excl, incl, rel;
    std::vector<std::string> ids;
    for (const auto& t : tables) {
      const auto* r = find_row(t, v, c);
      const auto* b = find_row(t, v, baseline);
      if (!r || !b) throw DataError("summarize: seed " + std::to_string(t.seed) + " lacks " + v + "/" + c);
      excl.push_back(r->tau_excl);
      incl.push_back(r->tau_incl);
      if (b->tau_excl > 0.0) rel.push_back(r->tau_excl / b->tau_excl);
      ids.push_back(t.manifest_id);
    }
    const auto e = mean_stderr(excl), i = mean_stderr(incl), q = mean_stderr(rel);
    table << s.preset << ',' << v << ',' << c << ',' << tables.size() << ',' << fmt(e.mean) << ',' << fmt(e.stderr_)
          << ',' << fmt(i.mean) << ',' << fmt(i.stderr_) << ',' << baseline << ','
          << (rel.empty() ? "" : fmt(q.mean)) << ',' << (rel.empty() ? "" : fmt(q.stderr_)) << ',' << join(ids, ";")
          << '\n';
  }
  s.table = table.str();

  std::ostringstream ratios;
  ratios << "preset,condition,numerator,denominator,seeds,ratio_mean,ratio_se\n";
  const std::string base = "pre_norm";
  if (std::find(variants.begin(), variants.end(), base) != variants.end()) {
    for (const auto& [v, c] : keys) {
      if (v == base) continue;
      std::vector<double> per_seed;
      for (const auto& t : tables) {
        const auto* num = find_row(t, v, c);
        const auto* den = find_row(t, base, c);
        if (!num || !den || den->tau_excl == 0.0) continue;
        per_seed.push_back(num->tau_excl / den->tau_excl);
      }
      const auto m = mean_stderr(per_seed);
      ratios << s.preset << ',' << c << ',' << v << ',' << base << ',' << per_seed.size() << ','
             << (per_seed.empty() ? "" : fmt(m.mean)) << ',' << (per_seed.empty() ? "" : fmt(m.stderr_)) << '\n';
    }
  }
  s.ratios = ratios.str();
  return s;
}

namespace {

GateResult majority(int criterion, std::string name, const std::vector<std::pair<bool, std::string>>& per_seed) {
  GateResult g;
  g.criterion = criterion;
  g.name = std::move(name);
  int wins = 0;
  std::vector<std::string> parts;
  for (const auto& [ok, detail] : per_seed) {
    wins += ok;
    parts.push_back(detail + (ok ? " ok" : " FAIL"));
  }
  g.passed = !per_seed.empty() && 3 * wins >= 2 * static_cast<int>(per_seed.size());
  g.detail = std::to_string(wins) + "/" + std::to_string(per_seed.size()) + " seeds: " + join(parts, "; ");
  return g;
}

const DriftRow* drift_at(const SeedTables& t, const std::string& variant, const std::string& condition, int step) {
  for (const auto& d : t.drift)
    if (d.variant == variant && d.condition == condition && d.step == step) return &d;
  return nullptr;
}

std::string seed_tag(const SeedTables& t) { return "seed" + std::to_string(t.seed); }

const AcceptanceRow& need_row(const SeedTables& t, const std::string& variant, const std::string& condition) {
  const auto* r = find_row(t, variant, condition);
  if (!r) throw DataError(seed_tag(t) + ": no acceptance row for " + variant + "/" + condition);
  return *r;
}

}  // namespace

std::vector<GateResult> evaluate_gates(const std::vector<fs::path>& seed_dirs) {
  const auto tables = load_seed_dirs(seed_dirs);
  const std::string preset = tables.front().preset;
  std::vector<GateResult> out;
  const std::string pre = "pre_norm", post = "post_norm";

  if (preset == "magnitudes") {
    std::vector<std::pair<bool, std::string>> c8, c9;
    bool sink_any = false;
    std::vector<std::string> evidence;
    for (const auto& t : tables) {
      const int k = need_row(t, pre, "base").k;
      const auto *p1 = drift_at(t, pre, "base", 1), *pk = drift_at(t, pre, "base", k);
      const auto *q1 = drift_at(t, post, "base", 1), *qk = drift_at(t, post, "base", k);
      if (!p1 || !pk || !q1 || !qk) throw DataError(seed_tag(t) + ": drift rows missing");
      const double rp = pk->rms / p1->rms, rq = qk->rms / q1->rms;
      c8.emplace_back(rp >= 1.15 && rq <= 1.05,
                      seed_tag(t) + " pre " + fmt(rp) + " post " + fmt(rq));
      if (p1->sink && pk->sink && q1->sink && qk->sink) {
        sink_any = true;
        const double dp = *p1->sink - *pk->sink, dq = *q1->sink - *qk->sink;
        c9.emplace_back(dp > dq, seed_tag(t) + " dsink pre " + fmt(dp) + " post " + fmt(dq));
      } else {
        double peak = 0.0;
        for (const auto& v : t.sink.value("profile", std::vector<double>{})) peak = std::max(peak, v);
        evidence.push_back(seed_tag(t) + " max received " + fmt(peak) + " < threshold " +
                           fmt(t.sink.value("threshold", 0.2)));
      }
    }
    out.push_back(majority(8, "magnitude growth: pre rms(h8)/rms(h1) >= 1.15, post <= 1.05", c8));
    if (sink_any) {
      out.push_back(majority(9, "drift direction: dsink(pre) > dsink(post)", c9));
    } else {
      GateResult g{9, "drift direction: dsink(pre) > dsink(post)", false, false, "no verifier sink detected: " + join(evidence, "; ")};
      out.push_back(g);
    }
  } else if (preset == "ttt") {
    std::vector<std::pair<bool, std::string>> c10;
    for (const auto& t : tables) {
      auto pooled = [&](const std::string& v) {
        const auto& r = need_row(t, v, "ttt2");
        int re = 0, pa = 0;
        for (std::size_t j = 2; j < r.reached.size() && j < 8; ++j) {
          re += r.reached[j];
          pa += r.passed[j];
        }
        return re > 0 ? static_cast<double>(pa) / re : 0.0;
      };
      const double a = pooled(pre), b = pooled(post);
      c10.emplace_back(b > a, seed_tag(t) + " steps3-8 pre " + fmt(a) + " post " + fmt(b));
    }
    out.push_back(majority(10, "TTT=2 generalization: post > pre at steps 3-8", c10));
  } else if (preset == "noise") {
    std::vector<std::pair<bool, std::string>> c11;
    for (const auto& t : tables) {
      auto retained = [&](const std::string& v) {
        const double base = need_row(t, v, "hidden_states@0").tau_excl;
        return base > 0 ? need_row(t, v, "hidden_states@0.5").tau_excl / base : 0.0;
      };
      const double rp = retained(pre), rq = retained(post);
      // Monotone non-increasing in alpha within stderr, both pathways and variants.
      bool monotone = true;
      std::string worst;
      for (const auto& v : {pre, post})
        for (const std::string pw : {"hidden_states", "embeddings"}) {
          std::vector<const AcceptanceRow*> seq;
          for (const auto& r : t.acceptance)
            if (r.variant == v && r.condition.rfind(pw + "@", 0) == 0) seq.push_back(&r);
          for (std::size_t i = 1; i < seq.size(); ++i) {
            const double slack = std::hypot(seq[i - 1]->tau_se, seq[i]->tau_se);
            if (seq[i]->tau_excl > seq[i - 1]->tau_excl + slack) {
              monotone = false;
              worst = v + " " + seq[i - 1]->condition + "->" + seq[i]->condition;
            }
          }
        }
      c11.emplace_back(rq > rp && monotone, seed_tag(t) + " retained pre " + fmt(rp) + " post " + fmt(rq) +
                                                (monotone ? "" : " non-monotone " + worst));
    }
    out.push_back(majority(11, "noise asymmetry at alpha=0.5 (hidden) and monotone decay", c11));
  } else if (preset == "pin") {
    std::vector<std::pair<bool, std::string>> c12;
    for (const auto& t : tables) {
      auto drop = [&](const std::string& v) {
        const double base = need_row(t, v, "unpinned").tau_excl;
        return base > 0 ? 1.0 - need_row(t, v, "pinned").tau_excl / base : 0.0;
      };
      const double dp = drop(pre), dq = drop(post);
      c12.emplace_back(dp > dq, seed_tag(t) + " drop pre " + fmt(dp) + " post " + fmt(dq));
    }
    out.push_back(majority(12, "pinning hurts pre-norm more", c12));
  } else if (preset == "template") {
    std::vector<std::pair<bool, std::string>> c13;
    for (const auto& t : tables) {
      auto drop = [&](const std::string& v) {
        const double base = need_row(t, v, "regular").tau_excl;
        return base > 0 ? 1.0 - need_row(t, v, "no_bos_no_template").tau_excl / base : 0.0;
      };
      const double dp = drop(pre), dq = drop(post);
      c13.emplace_back(dq < dp, seed_tag(t) + " drop pre " + fmt(dp) + " post " + fmt(dq));
    }
    out.push_back(majority(13, "template robustness: post drops less than pre", c13));
  }
  return out;
}

fs::path output_root_from_env() {
  if (const char* v = std::getenv("DRIFTLAB_OUT"); v && *v) return v;
  return "runs";
}

}  // namespace driftlab
