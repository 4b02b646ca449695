#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "driftlab/tensor.hpp"

namespace driftlab {

// Which keys a query may see. Every kind is causal; the sliding-window kinds
// keep the `window` most recent positions (query included) and optionally
// carry position 0 (swa_bos) or the first `prefix_len` positions (swa_prefix).
struct AttentionMode {
  enum class Kind { full, swa, swa_bos, swa_prefix };

  Kind kind = Kind::full;
  int window = 0;
  int prefix_len = 0;
  // Under windowed kinds, rotate queries and keys by their rank within the
  // admitted set instead of their absolute position.
  bool relative_positions = false;

  static AttentionMode full() { return {}; }
  static AttentionMode swa(int window) { return {Kind::swa, window, 0, false}; }
  static AttentionMode swa_bos(int window) { return {Kind::swa_bos, window, 0, false}; }
  static AttentionMode swa_prefix(int window, int prefix_len) {
    return {Kind::swa_prefix, window, prefix_len, false};
  }

  bool windowed() const { return kind != Kind::full; }
  bool admits(int query_pos, int key_pos) const;
  void validate() const;
  std::string name() const;
};

std::string to_string(AttentionMode::Kind kind);
AttentionMode::Kind attention_kind_from_string(const std::string& name);

// Row-major |queries| x |keys| admission mask under `mode`.
std::vector<std::uint8_t> build_mask(std::span<const int> query_pos, std::span<const int> key_pos,
                                     const AttentionMode& mode);

// Rotary attention over unrotated projections. With absolute positions this is
// differentiable; the relative re-indexing path is inference-only.
Tensor attend(const Tensor& q, std::span<const int> q_pos, const Tensor& k, const Tensor& v,
              std::span<const int> k_pos, std::size_t n_heads, double rope_base,
              std::span<const std::uint8_t> mask, bool relative_positions,
              std::vector<double>* probs = nullptr);

}  // namespace driftlab
