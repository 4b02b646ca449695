#include "driftlab/drafter.hpp"

#include <algorithm>
#include <numeric>

namespace driftlab {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::pre_norm: return "pre_norm";
    case Variant::post_norm: return "post_norm";
    case Variant::gated: return "gated";
    case Variant::gated_post_norm: return "gated_post_norm";
  }
  return "?";
}

Variant variant_from_string(const std::string& name) {
  for (auto v : kAllVariants)
    if (to_string(v) == name) return v;
  throw ConfigError("unknown drafter variant '" + name + "'");
}

DrafterConfig DrafterConfig::preset(Variant v, const VerifierConfig& verifier) {
  DrafterConfig c;
  c.d_model = verifier.d_model;
  c.n_heads = verifier.n_heads;
  c.d_head = verifier.d_head;
  c.d_mlp = verifier.d_mlp;
  c.vocab_size = verifier.vocab_size;
  c.rope_base = verifier.rope_base;
  c.norm_eps = verifier.norm_eps;
  const bool post = v == Variant::post_norm || v == Variant::gated_post_norm;
  c.norm_placement = post ? NormPlacement::post : NormPlacement::pre;
  c.per_stream_fusion_norm = post;
  c.gated_attention = v == Variant::gated || v == Variant::gated_post_norm;
  return c;
}

Variant DrafterConfig::variant() const {
  if (norm_placement == NormPlacement::post) return gated_attention ? Variant::gated_post_norm : Variant::post_norm;
  return gated_attention ? Variant::gated : Variant::pre_norm;
}

void DrafterConfig::validate() const {
  if (norm_placement == NormPlacement::post && !per_stream_fusion_norm) {
    throw ConfigError("drafter: post-norm placement requires per-stream fusion norms");
  }
  if (n_heads < 1 || d_head < 1 || n_heads * d_head != d_model || d_head % 2 != 0) {
    throw ConfigError("drafter: n_heads * d_head must equal d_model with even d_head");
  }
  if (d_mlp < 1 || vocab_size < 32) throw ConfigError("drafter: invalid sizes");
}

void DrafterConfig::check_compatible(const VerifierConfig& verifier) const {
  if (d_model != verifier.d_model || vocab_size != verifier.vocab_size) {
    throw ConfigError("drafter: d_model/vocab (" + std::to_string(d_model) + "/" + std::to_string(vocab_size) +
                      ") do not match the verifier (" + std::to_string(verifier.d_model) + "/" +
                      std::to_string(verifier.vocab_size) + ")");
  }
}

nlohmann::json DrafterConfig::to_json() const {
  return {{"variant", to_string(variant())},
          {"norm_placement", norm_placement == NormPlacement::pre ? "pre" : "post"},
          {"per_stream_fusion_norm", per_stream_fusion_norm},
          {"gated_attention", gated_attention},
          {"d_model", d_model},
          {"n_heads", n_heads},
          {"d_head", d_head},
          {"d_mlp", d_mlp},
          {"vocab_size", vocab_size},
          {"rope_base", rope_base},
          {"norm_eps", norm_eps}};
}

DrafterConfig DrafterConfig::from_json(const nlohmann::json& j) {
  DrafterConfig c;
  const std::string placement = j.value("norm_placement", std::string("pre"));
  if (placement != "pre" && placement != "post") throw ConfigError("drafter: unknown norm placement " + placement);
  c.norm_placement = placement == "post" ? NormPlacement::post : NormPlacement::pre;
  c.per_stream_fusion_norm = j.value("per_stream_fusion_norm", c.per_stream_fusion_norm);
  c.gated_attention = j.value("gated_attention", c.gated_attention);
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_head = j.value("d_head", c.d_head);
  c.d_mlp = j.value("d_mlp", c.d_mlp);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.rope_base = j.value("rope_base", c.rope_base);
  c.norm_eps = j.value("norm_eps", c.norm_eps);
  c.validate();
  return c;
}

void NoiseSpec::validate() const {
  if (!(alpha >= 0.0)) throw ConfigError("noise: alpha must be non-negative");
}

std::string to_string(NoiseSpec::Pathway p) {
  return p == NoiseSpec::Pathway::hidden_states ? "hidden_states" : "embeddings";
}

NoiseSpec::Pathway pathway_from_string(const std::string& name) {
  if (name == "hidden_states") return NoiseSpec::Pathway::hidden_states;
  if (name == "embeddings") return NoiseSpec::Pathway::embeddings;
  throw ConfigError("unknown noise pathway '" + name + "'");
}

Tensor apply_noise(const Tensor& x, double alpha, RngStream& rng) {
  if (!(alpha >= 0.0)) throw ConfigError("noise: alpha must be non-negative");
  if (alpha == 0.0) return x;
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t r = 0; r < n; ++r) {
    const double s = rms(x.data().subspan(r * d, d));
    for (std::size_t i = 0; i < d; ++i) {
      const double eps = rng.normal();
      double& v = out[r * d + i];
      v = std::isinf(alpha) ? s * eps : v + alpha * s * eps;
    }
  }
  return Tensor(x.shape(), std::move(out));
}

std::vector<NamedTensor> DrafterWeights::named(const DrafterConfig& cfg) const {
  std::vector<NamedTensor> out;
  if (cfg.per_stream_fusion_norm) {
    out.push_back({"norm_low", norm_low});
    out.push_back({"norm_mid", norm_mid});
    out.push_back({"norm_high", norm_high});
  }
  out.push_back({"fc", fc});
  out.push_back({"in_norm_h", in_norm_h});
  out.push_back({"in_norm_e", in_norm_e});
  out.push_back({"wq", wq});
  out.push_back({"wk", wk});
  out.push_back({"wv", wv});
  if (cfg.gated_attention) {
    out.push_back({"w_gate", w_gate});
    out.push_back({"b_gate", b_gate});
  }
  out.push_back({"wo", wo});
  out.push_back({"mlp_norm", mlp_norm});
  out.push_back({"w_up", w_up});
  out.push_back({"w_down", w_down});
  out.push_back({"final_norm", final_norm});
  out.push_back({"lm_head", lm_head});
  out.push_back({"embed", embed});
  return out;
}

namespace {

Tensor gaussian(std::size_t rows, std::size_t cols, double stddev, RngStream rng) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor::matrix(rows, cols, std::move(v));
}

DrafterWeights init_weights(const DrafterConfig& c, const Tensor& embed, const RngStream& init) {
  const auto d = static_cast<std::size_t>(c.d_model), m = static_cast<std::size_t>(c.d_mlp),
             V = static_cast<std::size_t>(c.vocab_size);
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double s2d = 1.0 / std::sqrt(2.0 * static_cast<double>(d));
  DrafterWeights w;
  w.norm_low = Tensor::filled({d}, 1.0);
  w.norm_mid = Tensor::filled({d}, 1.0);
  w.norm_high = Tensor::filled({d}, 1.0);
  w.fc = gaussian(3 * d, d, 1.0 / std::sqrt(3.0 * static_cast<double>(d)), init.derive("init/fc"));
  w.embed = embed.detach();
  w.in_norm_h = Tensor::filled({d}, 1.0);
  w.in_norm_e = Tensor::filled({d}, 1.0);
  w.wq = gaussian(2 * d, d, s2d, init.derive("init/wq"));
  w.wk = gaussian(2 * d, d, s2d, init.derive("init/wk"));
  w.wv = gaussian(2 * d, d, s2d, init.derive("init/wv"));
  w.w_gate = gaussian(2 * d, d, s2d, init.derive("init/w_gate"));
  w.b_gate = Tensor::zeros({d});
  w.wo = gaussian(d, d, sd, init.derive("init/wo"));
  w.mlp_norm = Tensor::filled({d}, 1.0);
  w.w_up = gaussian(d, m, sd, init.derive("init/w_up"));
  w.w_down = gaussian(m, d, 1.0 / std::sqrt(static_cast<double>(m)), init.derive("init/w_down"));
  w.final_norm = Tensor::filled({d}, 1.0);
  w.lm_head = gaussian(d, V, sd, init.derive("init/lm_head"));
  return w;
}

void check_shapes(const DrafterConfig& c, const DrafterWeights& w) {
  const auto d = static_cast<std::size_t>(c.d_model), m = static_cast<std::size_t>(c.d_mlp),
             V = static_cast<std::size_t>(c.vocab_size);
  auto expect = [](const Tensor& t, Shape s, const std::string& what) {
    if (t.shape() != s) {
      throw DimensionError("drafter weights: " + what + " has shape " + shape_string(t.shape()) + ", expected " +
                           shape_string(s));
    }
  };
  const std::vector<std::pair<std::string, Shape>> shapes{
      {"norm_low", {d}},       {"norm_mid", {d}},   {"norm_high", {d}},   {"fc", {3 * d, d}},
      {"embed", {V, d}},       {"in_norm_h", {d}},  {"in_norm_e", {d}},   {"wq", {2 * d, d}},
      {"wk", {2 * d, d}},      {"wv", {2 * d, d}},  {"w_gate", {2 * d, d}}, {"b_gate", {d}},
      {"wo", {d, d}},          {"mlp_norm", {d}},   {"w_up", {d, m}},     {"w_down", {m, d}},
      {"final_norm", {d}},     {"lm_head", {d, V}}};
  for (const auto& nt : w.named(c)) {
    for (const auto& [name, shape] : shapes)
      if (name == nt.name) expect(nt.tensor, shape, name);
  }
}

std::vector<double> head_average(const std::vector<double>& probs, std::size_t heads, std::size_t keys,
                                 std::size_t query, std::size_t n_queries) {
  std::vector<double> row(keys, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t j = 0; j < keys; ++j) row[j] += probs[(h * n_queries + query) * keys + j];
  for (auto& p : row) p /= static_cast<double>(heads);
  return row;
}

}  // namespace

void DrafterCache::truncate(std::size_t n, std::size_t width) {
  if (n > length()) throw DimensionError("drafter cache: cannot grow by truncation");
  k.resize(n * width);
  v.resize(n * width);
  positions.resize(n);
}

Drafter::Drafter(const DrafterConfig& config, const Verifier& verifier, const RngStream& init) : config_(config) {
  config_.validate();
  config_.check_compatible(verifier.config());
  weights_ = init_weights(config_, verifier.weights().embed, init);
}

Drafter::Drafter(const DrafterConfig& config, DrafterWeights weights) : config_(config), weights_(std::move(weights)) {
  config_.validate();
  check_shapes(config_, weights_);
}

std::vector<Tensor> Drafter::trainable_parameters() const {
  std::vector<Tensor> out;
  for (const auto& nt : weights_.named(config_))
    if (nt.name != "embed") out.push_back(nt.tensor);
  return out;
}

void Drafter::set_trainable(bool trainable) {
  for (auto p : trainable_parameters()) {
    p.set_requires_grad(trainable);
    if (!trainable) p.zero_grad();
  }
}

Tensor Drafter::fuse(const HiddenTaps& taps) const {
  const auto d = static_cast<std::size_t>(config_.d_model);
  for (const Tensor* t : {&taps.low, &taps.mid, &taps.high}) {
    if (t->ndim() != 2 || t->cols() != d) {
      throw ConfigError("fuse: tap width " + shape_string(t->shape()) + " does not match drafter d_model " +
                        std::to_string(d));
    }
  }
  if (taps.low.rows() != taps.mid.rows() || taps.low.rows() != taps.high.rows()) {
    throw DimensionError("fuse: taps have different sequence lengths");
  }
  Tensor parts[3] = {taps.low, taps.mid, taps.high};
  if (config_.per_stream_fusion_norm) {
    parts[0] = rms_norm(taps.low, weights_.norm_low, config_.norm_eps);
    parts[1] = rms_norm(taps.mid, weights_.norm_mid, config_.norm_eps);
    parts[2] = rms_norm(taps.high, weights_.norm_high, config_.norm_eps);
  }
  return matmul(concat_cols(parts), weights_.fc);
}

Tensor Drafter::embed(std::span<const TokenId> tokens) const { return embedding(weights_.embed, tokens); }

StepInputs Drafter::project(const Tensor& h_prev, const Tensor& e) const {
  StepInputs in;
  in.x = concat_cols(rms_norm(h_prev, weights_.in_norm_h, config_.norm_eps),
                     rms_norm(e, weights_.in_norm_e, config_.norm_eps));
  in.q = matmul(in.x, weights_.wq);
  in.k = matmul(in.x, weights_.wk);
  in.v = matmul(in.x, weights_.wv);
  return in;
}

StepOutputs Drafter::finish(const Tensor& h_prev, const StepInputs& in, const Tensor& heads) const {
  Tensor a = heads;
  if (config_.gated_attention) a = mul(sigmoid(add_row(matmul(in.x, weights_.w_gate), weights_.b_gate)), a);
  const Tensor z1 = add(h_prev, matmul(a, weights_.wo));
  const Tensor u = matmul(rms_norm(z1, weights_.mlp_norm, config_.norm_eps), weights_.w_up);
  StepOutputs out;
  out.z2 = add(z1, matmul(silu(u), weights_.w_down));
  if (config_.norm_placement == NormPlacement::pre) {
    out.h_out = out.z2;
    out.logits = matmul(rms_norm(out.z2, weights_.final_norm, config_.norm_eps), weights_.lm_head);
  } else {
    out.h_out = rms_norm(out.z2, weights_.final_norm, config_.norm_eps);
    out.logits = matmul(out.h_out, weights_.lm_head);
  }
  return out;
}

void Drafter::prefill(ChainState& state, const Tensor& h_fc, std::span<const TokenId> next_tokens,
                      int first_position, const AttentionMode& mode, NoiseSpec* noise) const {
  (void)mode;
  if (h_fc.rows() != next_tokens.size()) throw DimensionError("prefill: h_fc rows and token count differ");
  if (next_tokens.empty()) return;
  Tensor h = h_fc;
  Tensor e = embed(next_tokens);
  if (noise) {
    noise->validate();
    if (noise->pathway == NoiseSpec::Pathway::hidden_states) h = apply_noise(h, noise->alpha, noise->rng);
    else e = apply_noise(e, noise->alpha, noise->rng);
  }
  // Keys and values depend only on each pair's own input, so committed pairs
  // need no attention pass.
  const StepInputs in = project(h, e);
  state.cache.k.insert(state.cache.k.end(), in.k.data().begin(), in.k.data().end());
  state.cache.v.insert(state.cache.v.end(), in.v.data().begin(), in.v.data().end());
  for (std::size_t i = 0; i < next_tokens.size(); ++i) state.cache.positions.push_back(first_position + static_cast<int>(i));
}

StepResult Drafter::step(ChainState& state, TokenId e_token, const AttentionMode& mode, NoiseSpec* noise,
                         std::optional<double> pin) const {
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto H = static_cast<std::size_t>(config_.n_heads);
  if (state.h_prev.size() != d) throw DimensionError("drafter step: h_prev has wrong width");
  if (pin && !(*pin > 0.0)) throw ConfigError("drafter step: pin target must be positive");
  Tensor h = Tensor::matrix(1, d, state.h_prev);
  const TokenId tok[] = {e_token};
  Tensor e = embed(tok);
  if (noise) {
    noise->validate();
    if (noise->pathway == NoiseSpec::Pathway::hidden_states) h = apply_noise(h, noise->alpha, noise->rng);
    else e = apply_noise(e, noise->alpha, noise->rng);
  }
  const StepInputs in = project(h, e);
  const std::size_t past = state.cache.length();
  std::vector<int> key_pos = state.cache.positions;
  key_pos.push_back(state.position);
  const int q_pos[] = {state.position};
  const Tensor keys[] = {Tensor::matrix(past, d, state.cache.k), in.k};
  const Tensor values[] = {Tensor::matrix(past, d, state.cache.v), in.v};
  const auto mask = build_mask(q_pos, key_pos, mode);
  std::vector<double> probs;
  const Tensor heads = attend(in.q, q_pos, concat_rows(keys), concat_rows(values), key_pos, H, config_.rope_base,
                              mask, mode.relative_positions, &probs);
  const StepOutputs out = finish(h, in, heads);

  StepResult r;
  r.h_out.assign(out.h_out.data().begin(), out.h_out.data().end());
  r.logits.assign(out.logits.data().begin(), out.logits.data().end());
  r.head_rows = probs;
  r.attention_row = head_average(probs, H, key_pos.size(), 0, 1);

  state.cache.k.insert(state.cache.k.end(), in.k.data().begin(), in.k.data().end());
  state.cache.v.insert(state.cache.v.end(), in.v.data().begin(), in.v.data().end());
  state.cache.positions.push_back(state.position);
  state.h_prev = r.h_out;
  if (pin) {
    const double current = rms(r.h_out);
    if (!(current > 0.0)) throw DegenerateInputError("drafter step: cannot pin a zero hidden state");
    const double s = *pin / current;
    for (auto& v : state.h_prev) v *= s;
  }
  ++state.step_index;
  ++state.position;
  return r;
}

nlohmann::json Drafter::meta() const { return {{"kind", "drafter"}, {"config", config_.to_json()}}; }

void Drafter::save(const std::filesystem::path& path) const {
  save_checkpoint(path, meta(), weights_.named(config_));
}

Drafter Drafter::load(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "drafter") throw DataError("checkpoint: not a drafter checkpoint");
  const auto config = DrafterConfig::from_json(ck.meta.at("config"));
  VerifierConfig shell;
  shell.d_model = config.d_model;
  shell.n_heads = config.n_heads;
  shell.d_head = config.d_head;
  shell.vocab_size = config.vocab_size;
  DrafterWeights w = init_weights(config, Tensor::zeros({static_cast<std::size_t>(config.vocab_size),
                                                         static_cast<std::size_t>(config.d_model)}),
                                  RngStream(0));
  Drafter drafter(config, std::move(w));
  assign_tensors(drafter.weights_.named(config), ck);
  return drafter;
}

std::string Drafter::hash() const { return checkpoint_hash(meta(), weights_.named(config_)); }

ChainState begin_chain(const Drafter& drafter, const HiddenTaps& taps, std::span<const TokenId> prompt,
                       TokenId last_token, const AttentionMode& mode, NoiseSpec* noise) {
  const std::size_t n = taps.length();
  if (n == 0 || prompt.size() != n) throw DimensionError("begin_chain: taps must cover the whole prompt");
  const Tensor h_fc = drafter.fuse(taps);
  ChainState state;
  if (n > 1) drafter.prefill(state, slice_rows(h_fc, 0, n - 1), prompt.subspan(1), 0, mode, noise);
  state.h_prev = h_fc.row(n - 1);
  state.prompt_length = n - 1;
  state.position = static_cast<int>(n - 1);
  state.pin_target = rms(state.h_prev);
  (void)last_token;
  return state;
}

double attention_entropy(std::span<const double> row) {
  double h = 0.0;
  for (double p : row)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

DraftResult draft_chain(const Drafter& drafter, ChainState& state, TokenId last_token, int k,
                        const AttentionMode& mode, const Sampling& sampling, RngStream* rng, NoiseSpec* noise,
                        bool pin) {
  if (k < 1) throw ConfigError("draft_chain: k must be >= 1");
  if (!sampling.greedy() && !rng) throw ConfigError("draft_chain: temperature sampling needs an rng");
  DraftResult result;
  result.trace.prompt_length = state.prompt_length;
  TokenId input = last_token;
  const std::optional<double> pin_value = pin ? std::optional<double>(state.pin_target) : std::nullopt;
  for (int j = 1; j <= k; ++j) {
    const std::size_t prompt_keys = std::count_if(state.cache.positions.begin(), state.cache.positions.end(),
                                                  [&](int p) { return p < static_cast<int>(state.prompt_length); });
    StepResult r = drafter.step(state, input, mode, noise, pin_value);
    TokenId token;
    std::vector<double> q;
    if (sampling.greedy()) {
      token = argmax(r.logits);
      q.assign(r.logits.size(), 0.0);
      q[static_cast<std::size_t>(token)] = 1.0;
    } else {
      std::vector<double> scaled(r.logits);
      for (auto& v : scaled) v /= sampling.temperature;
      q = softmax_row(scaled);
      token = rng->categorical(q);
    }
    SpecStep s;
    s.step = j;
    s.token = token;
    s.h_rms = rms(r.h_out);
    s.entropy = attention_entropy(r.attention_row);
    s.attention_row = std::move(r.attention_row);
    s.head_rows = std::move(r.head_rows);
    s.key_positions = state.cache.positions;
    s.prompt_keys = prompt_keys;
    result.trace.steps.push_back(std::move(s));
    result.tokens.push_back(token);
    result.q.push_back(std::move(q));
    input = token;
  }
  return result;
}

}  // namespace driftlab
