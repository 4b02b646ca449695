#pragma once

// Synthetic chat corpus over a 256-token toy vocabulary.
//
// User text follows a sparse second-order Markov chain. Assistant replies open
// by repeating the last two user tokens and continue with a mostly
// deterministic second-order rule, so a competent drafter can chain several
// correct guesses in a row.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "driftlab/rng.hpp"

namespace driftlab {

using TokenId = int;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed or inconsistent on-disk data (corpus records, checkpoints).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Role : std::uint8_t { special, system, user, assistant };

char role_code(Role role);
Role role_from_code(char code);

struct TemplateSpec {
  TokenId pad_token = 0;
  TokenId bos_token = 1;
  TokenId system_open = 2;
  TokenId system_close = 3;
  TokenId user_open = 4;
  TokenId user_close = 5;
  TokenId assistant_open = 6;
  TokenId eot_token = 7;
  // Ordinary (non-reserved) ids standing in for "Question:" / "Answer:".
  TokenId question_marker = 8;
  TokenId answer_marker = 9;
  // First id available to generated text.
  TokenId first_content = 10;

  static constexpr TokenId kReservedSpecials = 8;

  bool is_special(TokenId id) const { return id >= 0 && id < kReservedSpecials; }
  void validate(int vocab_size) const;
};

struct Conversation {
  std::vector<TokenId> tokens;
  std::vector<Role> roles;

  std::size_t size() const { return tokens.size(); }
  bool operator==(const Conversation&) const = default;
};

struct CorpusConfig {
  int vocab_size = 256;
  int n_conversations = 1000;
  int turns = 2;
  int system_len = 16;
  int user_len_min = 5;
  int user_len_max = 10;
  // Assistant reply length is the user length plus this.
  int reply_extra = 4;
  // Probability that an assistant token departs from the deterministic rule.
  double reply_noise = 0.1;
  TemplateSpec tmpl{};
};

// The stochastic grammar drawn from a seed: transition tables and the default
// system prompt. Exposed so tests can replay the deterministic reply rule.
class Grammar {
 public:
  Grammar(const CorpusConfig& config, const RngStream& seed);

  const CorpusConfig& config() const { return config_; }
  const std::vector<TokenId>& default_system_prompt() const { return system_prompt_; }

  // Deterministic assistant successor of (prev2, prev1).
  TokenId reply_successor(TokenId prev2, TokenId prev1) const;
  TokenId sample_user_successor(TokenId prev2, TokenId prev1, RngStream& rng) const;
  TokenId sample_content(RngStream& rng) const;

  std::vector<TokenId> sample_user_span(int length, RngStream& rng) const;
  std::vector<TokenId> sample_reply(const std::vector<TokenId>& user, RngStream& rng) const;

  int content_size() const { return content_size_; }

 private:
  int cls(TokenId t) const { return (t - config_.tmpl.first_content) & 3; }
  int index(TokenId t) const { return t - config_.tmpl.first_content; }

  CorpusConfig config_;
  int content_size_;
  std::vector<std::vector<TokenId>> reply_maps_;   // 4 permutations of content
  std::vector<std::vector<TokenId>> user_next_;    // [cls*C + idx] -> 3 candidates
  std::vector<TokenId> system_prompt_;
};

struct Turn {
  std::vector<TokenId> user;
  std::vector<TokenId> assistant;
  bool assistant_started = false;
  bool closed = false;
};

// Structural view of a conversation, independent of its surface template.
struct ConversationParts {
  bool has_bos = false;
  bool templated = true;
  std::vector<TokenId> system;
  std::vector<Turn> turns;
};

ConversationParts parse_conversation(const Conversation& c, const TemplateSpec& tmpl);
Conversation render_templated(const ConversationParts& parts, const TemplateSpec& tmpl, bool with_bos);
Conversation render_plain(const ConversationParts& parts, const TemplateSpec& tmpl, bool with_bos);

std::vector<Conversation> generate_corpus(const CorpusConfig& config, const RngStream& seed);
// Convenience form matching the documented signature.
std::vector<Conversation> generate_corpus(int vocab_size, int n_conversations, int turns,
                                          int system_len, const RngStream& seed);

enum class TemplateMode { regular, no_bos, no_template, no_bos_no_template };

std::string to_string(TemplateMode mode);
TemplateMode template_mode_from_string(const std::string& name);

enum class PadRule { none, repeat };

struct SystemLengthOverride {
  int length = 0;
  PadRule pad = PadRule::none;
  // Material used when padding; defaults to the conversation's own system span.
  std::vector<TokenId> material;
};

Conversation apply_perturbation(const Conversation& c, TemplateMode mode,
                                const std::optional<SystemLengthOverride>& system_override,
                                const TemplateSpec& tmpl = {});

// Prefix ending right after the last assistant opener (or answer marker), with
// the remainder of that reply returned separately as the reference continuation.
struct PromptSplit {
  Conversation prompt;
  std::vector<TokenId> reference;
};
PromptSplit split_last_reply(const Conversation& c, const TemplateSpec& tmpl = {});

// Line-delimited JSON records: {"tokens":[...],"roles":"xsua..."}.
void write_corpus(std::ostream& os, const std::vector<Conversation>& corpus);
std::vector<Conversation> read_corpus(std::istream& is);

// Entropy (nats) of the unigram token distribution, the baseline a trained
// language model must beat.
double unigram_entropy(const std::vector<Conversation>& corpus, int vocab_size);

}  // namespace driftlab
