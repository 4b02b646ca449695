#include "driftlab/attention.hpp"

#include <cmath>

#include "driftlab/corpus.hpp"

namespace driftlab {

bool AttentionMode::admits(int query_pos, int key_pos) const {
  if (key_pos > query_pos) return false;
  switch (kind) {
    case Kind::full: return true;
    case Kind::swa: return query_pos - key_pos < window;
    case Kind::swa_bos: return query_pos - key_pos < window || key_pos == 0;
    case Kind::swa_prefix: return query_pos - key_pos < window || key_pos < prefix_len;
  }
  return false;
}

void AttentionMode::validate() const {
  if (windowed() && window < 1) throw ConfigError("attention mode: window must be >= 1");
  if (kind == Kind::swa_prefix && prefix_len < 1) throw ConfigError("attention mode: prefix_len must be >= 1");
}

std::string to_string(AttentionMode::Kind kind) {
  switch (kind) {
    case AttentionMode::Kind::full: return "full";
    case AttentionMode::Kind::swa: return "swa";
    case AttentionMode::Kind::swa_bos: return "swa_bos";
    case AttentionMode::Kind::swa_prefix: return "swa_prefix";
  }
  return "?";
}

AttentionMode::Kind attention_kind_from_string(const std::string& name) {
  for (auto k : {AttentionMode::Kind::full, AttentionMode::Kind::swa, AttentionMode::Kind::swa_bos,
                 AttentionMode::Kind::swa_prefix}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown attention mode '" + name + "'");
}

std::string AttentionMode::name() const {
  std::string s = to_string(kind);
  if (windowed()) s += "/w" + std::to_string(window);
  if (kind == Kind::swa_prefix) s += "/p" + std::to_string(prefix_len);
  if (relative_positions) s += "/rel";
  return s;
}

std::vector<std::uint8_t> build_mask(std::span<const int> query_pos, std::span<const int> key_pos,
                                     const AttentionMode& mode) {
  std::vector<std::uint8_t> mask(query_pos.size() * key_pos.size(), 0);
  for (std::size_t i = 0; i < query_pos.size(); ++i)
    for (std::size_t j = 0; j < key_pos.size(); ++j)
      mask[i * key_pos.size() + j] = mode.admits(query_pos[i], key_pos[j]) ? 1 : 0;
  return mask;
}

Tensor attend(const Tensor& q, std::span<const int> q_pos, const Tensor& k, const Tensor& v,
              std::span<const int> k_pos, std::size_t n_heads, double rope_base,
              std::span<const std::uint8_t> mask, bool relative_positions, std::vector<double>* probs) {
  if (!relative_positions) {
    const Tensor qr = rope(q, q_pos, n_heads, rope_base);
    const Tensor kr = rope(k, k_pos, n_heads, rope_base);
    return attention(qr, kr, v, n_heads, mask, probs);
  }
  if (q.requires_grad() || k.requires_grad() || v.requires_grad()) {
    throw DomainError("attend: relative re-indexing is inference-only");
  }
  const std::size_t n = q.rows(), m = k.rows(), width = q.cols();
  std::vector<double> out(n * width, 0.0);
  if (probs) probs->assign(n_heads * n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> admitted;
    for (std::size_t j = 0; j < m; ++j)
      if (mask[i * m + j]) admitted.push_back(j);
    const std::size_t a = admitted.size();
    std::vector<double> krows, vrows;
    std::vector<int> kpos;
    for (std::size_t r = 0; r < a; ++r) {
      const auto j = admitted[r];
      krows.insert(krows.end(), k.data().begin() + static_cast<std::ptrdiff_t>(j * width),
                   k.data().begin() + static_cast<std::ptrdiff_t>((j + 1) * width));
      vrows.insert(vrows.end(), v.data().begin() + static_cast<std::ptrdiff_t>(j * width),
                   v.data().begin() + static_cast<std::ptrdiff_t>((j + 1) * width));
      kpos.push_back(static_cast<int>(r));
    }
    const int qpos[] = {static_cast<int>(a) - 1};
    const Tensor qi = Tensor::matrix(1, width, q.row(i));
    const Tensor qr = rope(qi, qpos, n_heads, rope_base);
    const Tensor kr = rope(Tensor::matrix(a, width, std::move(krows)), kpos, n_heads, rope_base);
    std::vector<std::uint8_t> all(a, 1);
    std::vector<double> local;
    const Tensor o = attention(qr, kr, Tensor::matrix(a, width, std::move(vrows)), n_heads, all, &local);
    std::copy(o.data().begin(), o.data().end(), out.begin() + static_cast<std::ptrdiff_t>(i * width));
    if (probs) {
      for (std::size_t h = 0; h < n_heads; ++h)
        for (std::size_t r = 0; r < a; ++r) (*probs)[(h * n + i) * m + admitted[r]] = local[h * a + r];
    }
  }
  return Tensor::matrix(n, width, std::move(out));
}

}  // namespace driftlab
