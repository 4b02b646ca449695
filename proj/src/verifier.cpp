#include "driftlab/verifier.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "driftlab/optim.hpp"

namespace driftlab {

void VerifierConfig::validate() const {
  if (n_layers < 3) throw ConfigError("verifier: n_layers must be >= 3 to define low/mid/high taps");
  if (n_heads < 1 || d_head < 1 || n_heads * d_head != d_model) {
    throw ConfigError("verifier: n_heads * d_head must equal d_model");
  }
  if (d_head % 2 != 0) throw ConfigError("verifier: d_head must be even for rotary embedding");
  if (d_mlp < 1 || vocab_size < 32 || max_positions < 1) throw ConfigError("verifier: invalid sizes");
}

nlohmann::json VerifierConfig::to_json() const {
  return {{"n_layers", n_layers},   {"d_model", d_model},       {"n_heads", n_heads},
          {"d_head", d_head},       {"d_mlp", d_mlp},           {"vocab_size", vocab_size},
          {"max_positions", max_positions}, {"rope_base", rope_base}, {"norm_eps", norm_eps}};
}

VerifierConfig VerifierConfig::from_json(const nlohmann::json& j) {
  VerifierConfig c;
  c.n_layers = j.value("n_layers", c.n_layers);
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_head = j.value("d_head", c.d_head);
  c.d_mlp = j.value("d_mlp", c.d_mlp);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_positions = j.value("max_positions", c.max_positions);
  c.rope_base = j.value("rope_base", c.rope_base);
  c.norm_eps = j.value("norm_eps", c.norm_eps);
  c.validate();
  return c;
}

std::vector<NamedTensor> VerifierWeights::named() const {
  std::vector<NamedTensor> out{{"embed", embed}};
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto p = "block" + std::to_string(l) + ".";
    const auto& b = blocks[l];
    out.push_back({p + "attn_norm", b.attn_norm});
    out.push_back({p + "wq", b.wq});
    out.push_back({p + "wk", b.wk});
    out.push_back({p + "wv", b.wv});
    out.push_back({p + "wo", b.wo});
    out.push_back({p + "mlp_norm", b.mlp_norm});
    out.push_back({p + "w_up", b.w_up});
    out.push_back({p + "w_down", b.w_down});
  }
  out.push_back({"final_norm", final_norm});
  out.push_back({"lm_head", lm_head});
  return out;
}

namespace {

Tensor gaussian(std::size_t rows, std::size_t cols, double stddev, RngStream rng) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor::matrix(rows, cols, std::move(v));
}

VerifierWeights init_weights(const VerifierConfig& c, const RngStream& init) {
  const auto d = static_cast<std::size_t>(c.d_model), m = static_cast<std::size_t>(c.d_mlp),
             V = static_cast<std::size_t>(c.vocab_size);
  const double in_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double out_scale = 1.0 / std::sqrt(2.0 * c.n_layers);
  VerifierWeights w;
  w.embed = gaussian(V, d, 1.0, init.derive("init/embed"));
  for (int l = 0; l < c.n_layers; ++l) {
    const RngStream r = init.derive("init/layer" + std::to_string(l));
    VerifierWeights::Block b;
    b.attn_norm = Tensor::filled({d}, 1.0);
    b.wq = gaussian(d, d, in_d, r.derive("wq"));
    b.wk = gaussian(d, d, in_d, r.derive("wk"));
    b.wv = gaussian(d, d, in_d, r.derive("wv"));
    b.wo = gaussian(d, d, in_d * out_scale, r.derive("wo"));
    b.mlp_norm = Tensor::filled({d}, 1.0);
    b.w_up = gaussian(d, m, in_d, r.derive("w_up"));
    b.w_down = gaussian(m, d, out_scale / std::sqrt(static_cast<double>(m)), r.derive("w_down"));
    w.blocks.push_back(std::move(b));
  }
  w.final_norm = Tensor::filled({d}, 1.0);
  w.lm_head = gaussian(d, V, in_d, init.derive("init/lm_head"));
  return w;
}

void check_shapes(const VerifierConfig& c, const VerifierWeights& w) {
  const auto d = static_cast<std::size_t>(c.d_model), m = static_cast<std::size_t>(c.d_mlp),
             V = static_cast<std::size_t>(c.vocab_size);
  auto expect = [](const Tensor& t, Shape s, const char* what) {
    if (t.shape() != s) {
      throw DimensionError(std::string("verifier weights: ") + what + " has shape " + shape_string(t.shape()) +
                           ", expected " + shape_string(s));
    }
  };
  expect(w.embed, {V, d}, "embed");
  if (w.blocks.size() != static_cast<std::size_t>(c.n_layers)) throw DimensionError("verifier weights: block count");
  for (const auto& b : w.blocks) {
    expect(b.attn_norm, {d}, "attn_norm");
    expect(b.wq, {d, d}, "wq");
    expect(b.wk, {d, d}, "wk");
    expect(b.wv, {d, d}, "wv");
    expect(b.wo, {d, d}, "wo");
    expect(b.mlp_norm, {d}, "mlp_norm");
    expect(b.w_up, {d, m}, "w_up");
    expect(b.w_down, {m, d}, "w_down");
  }
  expect(w.final_norm, {d}, "final_norm");
  expect(w.lm_head, {d, V}, "lm_head");
}

}  // namespace

Verifier::Verifier(const VerifierConfig& config, const RngStream& init) : config_(config) {
  config_.validate();
  weights_ = init_weights(config_, init);
}

Verifier::Verifier(const VerifierConfig& config, VerifierWeights weights)
    : config_(config), weights_(std::move(weights)) {
  config_.validate();
  check_shapes(config_, weights_);
}

std::vector<Tensor> Verifier::parameters() const {
  std::vector<Tensor> out;
  for (const auto& nt : weights_.named()) out.push_back(nt.tensor);
  return out;
}

void Verifier::set_trainable(bool trainable) {
  for (auto& p : parameters()) {
    Tensor t = p;
    t.set_requires_grad(trainable);
    if (!trainable) t.zero_grad();
  }
}

VerifierOutput Verifier::extend(KvCache& cache, std::span<const TokenId> tokens, const AttentionMode& mode,
                                bool capture_attention) const {
  mode.validate();
  const auto& c = config_;
  const std::size_t n = tokens.size(), past = cache.length();
  const auto d = static_cast<std::size_t>(c.d_model);
  if (n == 0) throw DimensionError("verifier: empty token sequence");
  for (TokenId t : tokens)
    if (t < 0 || t >= c.vocab_size) throw DimensionError("verifier: token id " + std::to_string(t) + " out of range");
  if (!mode.windowed() && past + n > static_cast<std::size_t>(c.max_positions)) {
    throw ContextLengthError("verifier: position " + std::to_string(past + n - 1) + " exceeds max_positions " +
                             std::to_string(c.max_positions) + " under full attention");
  }
  if (cache.k.empty()) {
    cache.k.resize(static_cast<std::size_t>(c.n_layers));
    cache.v.resize(static_cast<std::size_t>(c.n_layers));
  }
  std::vector<int> q_pos(n);
  std::iota(q_pos.begin(), q_pos.end(), static_cast<int>(past));
  std::vector<int> k_pos(cache.positions);
  k_pos.insert(k_pos.end(), q_pos.begin(), q_pos.end());
  const auto mask = build_mask(q_pos, k_pos, mode);

  VerifierOutput out;
  if (capture_attention) {
    out.attention.n_layers = static_cast<std::size_t>(c.n_layers);
    out.attention.n_heads = static_cast<std::size_t>(c.n_heads);
    out.attention.n_queries = n;
    out.attention.n_keys = k_pos.size();
    out.attention.probs.reserve(out.attention.n_layers * out.attention.n_heads * n * k_pos.size());
  }
  const auto taps = c.tap_layers();
  const auto H = static_cast<std::size_t>(c.n_heads);

  Tensor h = embedding(weights_.embed, tokens);
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& b = weights_.blocks[static_cast<std::size_t>(l)];
    const auto li = static_cast<std::size_t>(l);
    const Tensor x = rms_norm(h, b.attn_norm, c.norm_eps);
    const Tensor q = matmul(x, b.wq);
    const Tensor k_new = matmul(x, b.wk);
    const Tensor v_new = matmul(x, b.wv);
    Tensor k = k_new, v = v_new;
    if (past > 0) {
      const Tensor kp[] = {Tensor::matrix(past, d, cache.k[li]), k_new};
      const Tensor vp[] = {Tensor::matrix(past, d, cache.v[li]), v_new};
      k = concat_rows(kp);
      v = concat_rows(vp);
    }
    std::vector<double> probs;
    const Tensor a = attend(q, q_pos, k, v, k_pos, H, c.rope_base, mask, mode.relative_positions,
                            capture_attention ? &probs : nullptr);
    if (capture_attention) out.attention.probs.insert(out.attention.probs.end(), probs.begin(), probs.end());
    h = add(h, matmul(a, b.wo));
    const Tensor u = matmul(rms_norm(h, b.mlp_norm, c.norm_eps), b.w_up);
    h = add(h, matmul(silu(u), b.w_down));
    if (l == taps[0]) out.taps.low = h;
    if (l == taps[1]) out.taps.mid = h;
    if (l == taps[2]) out.taps.high = h;
    cache.k[li].insert(cache.k[li].end(), k_new.data().begin(), k_new.data().end());
    cache.v[li].insert(cache.v[li].end(), v_new.data().begin(), v_new.data().end());
  }
  cache.positions.insert(cache.positions.end(), q_pos.begin(), q_pos.end());
  out.logits = matmul(rms_norm(h, weights_.final_norm, c.norm_eps), weights_.lm_head);
  return out;
}

VerifierOutput Verifier::forward(std::span<const TokenId> tokens, const AttentionMode& mode,
                                 bool capture_attention) const {
  KvCache cache;
  return extend(cache, tokens, mode, capture_attention);
}

void truncate_cache(KvCache& cache, std::size_t length) {
  if (length > cache.length()) throw DimensionError("truncate_cache: cannot grow a cache");
  if (cache.positions.empty()) return;
  const std::size_t width = cache.k.front().size() / cache.length();
  for (auto& k : cache.k) k.resize(length * width);
  for (auto& v : cache.v) v.resize(length * width);
  cache.positions.resize(length);
}

nlohmann::json Verifier::meta() const { return {{"kind", "verifier"}, {"config", config_.to_json()}}; }

void Verifier::save(const std::filesystem::path& path) const { save_checkpoint(path, meta(), weights_.named()); }

Verifier Verifier::load(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "verifier") throw DataError("checkpoint: not a verifier checkpoint");
  const auto config = VerifierConfig::from_json(ck.meta.at("config"));
  Verifier v(config, RngStream(0));
  assign_tensors(v.weights_.named(), ck);
  return v;
}

std::string Verifier::hash() const { return checkpoint_hash(meta(), weights_.named()); }

std::vector<TokenId> greedy_decode(const Verifier& verifier, std::span<const TokenId> prompt, int n_tokens,
                                   const AttentionMode& mode) {
  std::vector<TokenId> out;
  if (n_tokens <= 0) return out;
  KvCache cache;
  auto o = verifier.extend(cache, prompt, mode);
  for (int i = 0; i < n_tokens; ++i) {
    const TokenId next = argmax(o.logits.row(o.logits.rows() - 1));
    out.push_back(next);
    if (i + 1 < n_tokens) {
      const TokenId one[] = {next};
      o = verifier.extend(cache, one, mode);
    }
  }
  return out;
}

namespace {

// Summed next-token cross-entropy and the number of predicted positions.
std::pair<Tensor, std::size_t> sequence_loss(const Verifier& verifier, const Conversation& c) {
  const std::size_t T = c.size();
  const auto V = static_cast<std::size_t>(verifier.config().vocab_size);
  if (T < 2) return {Tensor::scalar(0.0), 0};
  const auto out = verifier.forward(c.tokens);
  std::vector<double> targets((T - 1) * V, 0.0);
  for (std::size_t t = 0; t + 1 < T; ++t) targets[t * V + static_cast<std::size_t>(c.tokens[t + 1])] = 1.0;
  const std::vector<double> weights(T - 1, 1.0);
  const Tensor loss = cross_entropy_soft(slice_rows(out.logits, 0, T - 1), Tensor::matrix(T - 1, V, std::move(targets)),
                                         weights);
  return {loss, T - 1};
}

}  // namespace

double evaluate_loss(const Verifier& verifier, const std::vector<Conversation>& corpus) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& c : corpus) {
    const auto [loss, n] = sequence_loss(verifier, c);
    total += loss.item();
    count += n;
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

TrainCurve train_verifier(Verifier& verifier, const std::vector<Conversation>& corpus,
                          const VerifierTrainConfig& config) {
  if (corpus.empty()) throw ConfigError("train_verifier: corpus is empty");
  if (config.epochs < 1 || config.batch_size < 1 || !(config.lr > 0.0)) {
    throw ConfigError("train_verifier: epochs, batch_size and lr must be positive");
  }
  verifier.set_trainable(true);
  Adam adam(verifier.parameters(), AdamConfig{config.lr});
  const RngStream rng(config.seed);
  const std::size_t batches_per_epoch =
      (corpus.size() + static_cast<std::size_t>(config.batch_size) - 1) / static_cast<std::size_t>(config.batch_size);
  const std::size_t total_steps = batches_per_epoch * static_cast<std::size_t>(config.epochs);
  TrainCurve curve;
  std::size_t step = 0;
  double last_epoch_total = 0.0;
  for (int e = 0; e < config.epochs; ++e) {
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    RngStream shuffle = rng.derive("epoch").derive(static_cast<std::uint64_t>(e));
    for (std::size_t i = order.size(); i-- > 1;) std::swap(order[i], order[static_cast<std::size_t>(shuffle.uniform_int(static_cast<int>(i + 1)))]);
    double epoch_total = 0.0;
    for (std::size_t b = 0; b < batches_per_epoch; ++b) {
      const std::size_t lo = b * static_cast<std::size_t>(config.batch_size);
      const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(config.batch_size));
      std::size_t count = 0;
      for (std::size_t i = lo; i < hi; ++i) count += corpus[order[i]].size() > 0 ? corpus[order[i]].size() - 1 : 0;
      if (count == 0) continue;
      adam.zero_grad();
      double batch_loss = 0.0;
      for (std::size_t i = lo; i < hi; ++i) {
        auto [loss, n] = sequence_loss(verifier, corpus[order[i]]);
        if (n == 0) continue;
        const Tensor scaled = scale(loss, 1.0 / static_cast<double>(count));
        batch_loss += scaled.item();
        scaled.backward();
      }
      if (!std::isfinite(batch_loss)) {
        verifier.set_trainable(false);
        throw TrainingError("train_verifier: non-finite loss at step " + std::to_string(step), step);
      }
      adam.step(warmup_cosine_lr(config.lr, step, total_steps, config.warmup_steps));
      curve.step_loss.push_back(batch_loss);
      epoch_total += batch_loss;
      ++step;
    }
    last_epoch_total = epoch_total / static_cast<double>(batches_per_epoch);
  }
  verifier.set_trainable(false);
  curve.initial_loss = curve.step_loss.front();
  curve.final_loss = last_epoch_total;
  return curve;
}

}  // namespace driftlab
