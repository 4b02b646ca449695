#include "driftlab/trainer.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "driftlab/hashing.hpp"
#include "driftlab/optim.hpp"

namespace driftlab {

std::string to_string(LossMask m) { return m == LossMask::assistant_only ? "assistant_only" : "all_positions"; }

LossMask loss_mask_from_string(const std::string& name) {
  if (name == "assistant_only") return LossMask::assistant_only;
  if (name == "all_positions") return LossMask::all_positions;
  throw ConfigError("unknown loss mask '" + name + "'");
}

void TrainConfig::validate() const {
  if (ttt_depth < 1) throw ConfigError("train: ttt_depth must be >= 1");
  if (window < ttt_depth + 1) throw ConfigError("train: window must be >= ttt_depth + 1");
  if (!(lr > 0.0) || epochs < 1 || batch < 1) throw ConfigError("train: lr, epochs and batch must be positive");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"ttt_depth", ttt_depth},
          {"window", window},
          {"lr", lr},
          {"epochs", epochs},
          {"batch", batch},
          {"warmup_steps", warmup_steps},
          {"loss_mask", to_string(loss_mask)},
          {"token_feeding", token_feeding == TokenFeeding::teacher ? "teacher" : "self"},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig t;
  t.ttt_depth = j.value("ttt_depth", t.ttt_depth);
  t.window = j.value("window", t.window);
  t.lr = j.value("lr", t.lr);
  t.epochs = j.value("epochs", t.epochs);
  t.batch = j.value("batch", t.batch);
  t.warmup_steps = j.value("warmup_steps", t.warmup_steps);
  t.loss_mask = loss_mask_from_string(j.value("loss_mask", to_string(t.loss_mask)));
  const std::string feeding = j.value("token_feeding", std::string("teacher"));
  if (feeding != "teacher" && feeding != "self") throw ConfigError("unknown token feeding '" + feeding + "'");
  t.token_feeding = feeding == "teacher" ? TokenFeeding::teacher : TokenFeeding::self;
  t.seed = j.value("seed", t.seed);
  t.validate();
  return t;
}

TeacherOutputs teacher_outputs(const Verifier& verifier, const Conversation& c) {
  const auto out = verifier.forward(c.tokens);
  TeacherOutputs t;
  t.taps = out.taps;
  const std::size_t V = out.logits.cols();
  t.probs.reserve(out.logits.size());
  for (std::size_t r = 0; r < out.logits.rows(); ++r) {
    const auto p = softmax_row(out.logits.data().subspan(r * V, V));
    t.probs.insert(t.probs.end(), p.begin(), p.end());
  }
  return t;
}

std::vector<std::uint8_t> ttt_mask(std::size_t n, int step, int window) {
  const auto j = static_cast<std::size_t>(step);
  std::vector<std::uint8_t> mask(n * j * n, 0);
  for (std::size_t t = 0; t < n; ++t) {
    const auto pq = static_cast<long>(t + j - 1);
    for (std::size_t i = 1; i <= j; ++i)
      for (std::size_t s = 0; s < n; ++s) {
        const bool chain = i == 1 ? s <= t : s == t;
        const auto ps = static_cast<long>(s + i - 1);
        if (chain && pq - ps < window) mask[t * (j * n) + (i - 1) * n + s] = 1;
      }
  }
  return mask;
}

namespace {

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows, bool identity) {
  if (identity) return x;
  std::vector<int> ids(rows.begin(), rows.end());
  return embedding(x, ids);
}

}  // namespace

TttResult ttt_unroll(const Drafter& drafter, const Conversation& c, const TeacherOutputs& teacher,
                     const TrainConfig& tc, const TemplateSpec& tmpl, bool keep_masks, bool prune) {
  tc.validate();
  const std::size_t T = c.size();
  const auto V = static_cast<std::size_t>(drafter.config().vocab_size);
  const auto H = static_cast<std::size_t>(drafter.config().n_heads);
  const auto K = static_cast<std::size_t>(tc.ttt_depth);
  if (teacher.taps.length() != T || teacher.probs.size() != T * V) {
    throw DimensionError("ttt_unroll: teacher outputs do not cover the conversation");
  }
  TttResult r;
  r.total = Tensor::scalar(0.0);
  if (T < 2) return r;
  const std::size_t n = T - 1;  // pair positions t = 0..T-2

  // Step j (0-based here) of pair t is scored against the verifier at t+j+1.
  r.row_weights.assign(K, std::vector<double>(n, 0.0));
  for (std::size_t j = 0; j < K; ++j)
    for (std::size_t t = 0; t < n; ++t) {
      const std::size_t target = t + j + 2;
      if (target > T - 1) continue;
      if (tc.loss_mask == LossMask::all_positions || c.roles[target] == Role::assistant) r.row_weights[j][t] = 1.0;
    }
  // A row is computed at step j only if it is scored at j or at a later step.
  r.active_rows.resize(K);
  std::vector<std::uint8_t> live(n, 0);
  for (std::size_t j = K; j-- > 0;) {
    for (std::size_t t = 0; t < n; ++t) {
      live[t] = live[t] || r.row_weights[j][t] > 0.0 || !prune;
      if (live[t]) r.active_rows[j].push_back(t);
    }
  }

  const Tensor h_fc = slice_rows(drafter.fuse(teacher.taps), 0, n);
  Tensor h_prev;
  std::vector<Tensor> keys, values;
  std::vector<int> key_pos;
  std::vector<std::size_t> key_row, key_step;
  std::vector<Tensor> totals;
  std::vector<TokenId> fed(n);
  for (std::size_t t = 0; t < n; ++t) fed[t] = c.tokens[t + 1];
  for (std::size_t j = 1; j <= K; ++j) {
    const auto& rows = r.active_rows[j - 1];
    const bool dense = rows.size() == n;
    if (rows.empty()) {
      r.step_sums.push_back(Tensor::scalar(0.0));
      r.step_weights.push_back(0.0);
      r.step_logits.push_back(Tensor::matrix(0, V, {}));
      continue;
    }
    StepInputs in;
    if (j == 1) {
      // Every pair is a key at step 1, queried or not.
      const StepInputs all = drafter.project(h_fc, drafter.embed(fed));
      keys.push_back(all.k);
      values.push_back(all.v);
      for (std::size_t t = 0; t < n; ++t) {
        key_pos.push_back(static_cast<int>(t));
        key_row.push_back(t);
        key_step.push_back(1);
      }
      h_prev = gather_rows(h_fc, rows, dense);
      in = {gather_rows(all.x, rows, dense), gather_rows(all.q, rows, dense), gather_rows(all.k, rows, dense),
            gather_rows(all.v, rows, dense)};
    } else {
      std::vector<TokenId> step_tokens(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const std::size_t t = rows[i];
        if (tc.token_feeding == TokenFeeding::teacher) fed[t] = t + j < T ? c.tokens[t + j] : tmpl.pad_token;
        step_tokens[i] = fed[t];
      }
      in = drafter.project(h_prev, drafter.embed(step_tokens));
      keys.push_back(in.k);
      values.push_back(in.v);
      for (std::size_t t : rows) {
        key_pos.push_back(static_cast<int>(t + j - 1));
        key_row.push_back(t);
        key_step.push_back(j);
      }
    }

    std::vector<int> q_pos(rows.size());
    std::vector<std::uint8_t> mask(rows.size() * key_pos.size(), 0);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const std::size_t t = rows[i];
      q_pos[i] = static_cast<int>(t + j - 1);
      for (std::size_t e = 0; e < key_pos.size(); ++e) {
        const bool chain = key_step[e] == 1 ? key_row[e] <= t : key_row[e] == t;
        if (chain && q_pos[i] - key_pos[e] < tc.window) mask[i * key_pos.size() + e] = 1;
      }
    }
    if (keep_masks) r.masks.insert(r.masks.end(), mask.begin(), mask.end());
    const Tensor heads = attend(in.q, q_pos, concat_rows(keys), concat_rows(values), key_pos, H,
                                drafter.config().rope_base, mask, false);
    const StepOutputs out = drafter.finish(h_prev, in, heads);

    std::vector<double> targets(rows.size() * V, 0.0), weights(rows.size(), 0.0);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const std::size_t t = rows[i];
      weights[i] = r.row_weights[j - 1][t];
      if (weights[i] == 0.0) continue;
      std::copy_n(teacher.probs.begin() + static_cast<std::ptrdiff_t>((t + j) * V), V,
                  targets.begin() + static_cast<std::ptrdiff_t>(i * V));
    }
    const double w = std::accumulate(weights.begin(), weights.end(), 0.0);
    const Tensor sum_ce = cross_entropy_soft(out.logits, Tensor::matrix(rows.size(), V, std::move(targets)), weights);
    r.step_sums.push_back(sum_ce);
    r.step_weights.push_back(w);
    r.step_logits.push_back(out.logits);
    totals.push_back(scale(sum_ce, 1.0 / std::max(1.0, w)));

    if (j == K) break;
    const auto& next = r.active_rows[j];
    std::vector<std::size_t> keep;  // indices of next-step rows within this step's rows
    for (std::size_t i = 0, a = 0; i < rows.size() && a < next.size(); ++i)
      if (rows[i] == next[a]) {
        keep.push_back(i);
        ++a;
      }
    if (tc.token_feeding == TokenFeeding::self) {
      for (std::size_t i = 0; i < rows.size(); ++i) fed[rows[i]] = argmax(out.logits.data().subspan(i * V, V));
    }
    h_prev = gather_rows(out.h_out, keep, keep.size() == rows.size());
  }
  if (!totals.empty()) {
    Tensor total = totals.front();
    for (std::size_t i = 1; i < totals.size(); ++i) total = add(total, totals[i]);
    r.total = total;
  }
  return r;
}

std::string corpus_hash(const std::vector<Conversation>& corpus) {
  std::ostringstream os;
  write_corpus(os, corpus);
  return sha256_hex(os.str());
}

DrafterTrainReport train_drafter(Drafter& drafter, const std::vector<Conversation>& corpus,
                                 const Verifier& verifier, const TrainConfig& tc, const TemplateSpec& tmpl) {
  tc.validate();
  if (corpus.empty()) throw ConfigError("train_drafter: corpus is empty");
  drafter.config().check_compatible(verifier.config());
  for (const auto& p : verifier.parameters()) {
    if (p.requires_grad()) throw ConfigError("train_drafter: verifier must be frozen");
  }
  DrafterTrainReport report;
  report.verifier_hash_before = verifier.hash();

  drafter.set_trainable(true);
  Adam adam(drafter.trainable_parameters(), AdamConfig{tc.lr});
  const RngStream rng(tc.seed);
  const auto batch = static_cast<std::size_t>(tc.batch);
  const std::size_t batches = (corpus.size() + batch - 1) / batch;
  const std::size_t total_steps = batches * static_cast<std::size_t>(tc.epochs);
  const auto K = static_cast<std::size_t>(tc.ttt_depth);
  std::size_t opt_step = 0;
  std::vector<TeacherOutputs> teachers;
  teachers.reserve(corpus.size());
  for (const auto& c : corpus) teachers.push_back(teacher_outputs(verifier, c));

  for (int e = 0; e < tc.epochs; ++e) {
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    RngStream shuffle = rng.derive("epoch").derive(static_cast<std::uint64_t>(e));
    for (std::size_t i = order.size(); i-- > 1;) {
      std::swap(order[i], order[static_cast<std::size_t>(shuffle.uniform_int(static_cast<int>(i + 1)))]);
    }
    std::vector<double> epoch_sum(K, 0.0), epoch_w(K, 0.0);
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * batch, hi = std::min(order.size(), lo + batch);
      // Per-step normalizers over the whole batch, fixed before any backward.
      std::vector<TttResult> results;
      std::vector<double> w(K, 0.0);
      adam.zero_grad();
      for (std::size_t i = lo; i < hi; ++i) {
        const auto& c = corpus[order[i]];
        results.push_back(ttt_unroll(drafter, c, teachers[order[i]], tc, tmpl));
        for (std::size_t j = 0; j < results.back().step_weights.size(); ++j) w[j] += results.back().step_weights[j];
      }
      double batch_loss = 0.0;
      for (auto& r : results) {
        if (r.step_sums.empty()) continue;
        Tensor loss = scale(r.step_sums[0], 1.0 / std::max(1.0, w[0]));
        for (std::size_t j = 1; j < r.step_sums.size(); ++j) {
          loss = add(loss, scale(r.step_sums[j], 1.0 / std::max(1.0, w[j])));
        }
        for (std::size_t j = 0; j < r.step_sums.size(); ++j) epoch_sum[j] += r.step_sums[j].item();
        batch_loss += loss.item();
        loss.backward();
      }
      for (std::size_t j = 0; j < K; ++j) epoch_w[j] += w[j];
      if (!std::isfinite(batch_loss)) {
        drafter.set_trainable(false);
        throw TrainingError("train_drafter: non-finite loss at step " + std::to_string(opt_step), opt_step);
      }
      adam.step(warmup_cosine_lr(tc.lr, opt_step, total_steps, tc.warmup_steps));
      report.batch_loss.push_back(batch_loss);
      ++opt_step;
    }
    std::vector<double> per_step(K, 0.0);
    for (std::size_t j = 0; j < K; ++j) per_step[j] = epoch_sum[j] / std::max(1.0, epoch_w[j]);
    report.epoch_step_loss.push_back(per_step);
  }
  drafter.set_trainable(false);
  report.verifier_hash_after = verifier.hash();

  report.manifest = {{"kind", "train_drafter"},
                     {"drafter", drafter.config().to_json()},
                     {"train", tc.to_json()},
                     {"ttt_targets", "shifted_position"},
                     {"corpus_hash", corpus_hash(corpus)},
                     {"corpus_size", corpus.size()},
                     {"verifier_hash", report.verifier_hash_before},
                     {"drafter_hash", drafter.hash()},
                     {"rng", RngStream::kAlgorithm},
                     {"epoch_step_loss", report.epoch_step_loss}};
  return report;
}

}  // namespace driftlab
