#include "driftlab/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>

#include "json.hpp"

namespace driftlab {

char role_code(Role role) {
  switch (role) {
    case Role::special: return 'x';
    case Role::system: return 's';
    case Role::user: return 'u';
    case Role::assistant: return 'a';
  }
  return '?';
}

Role role_from_code(char code) {
  switch (code) {
    case 'x': return Role::special;
    case 's': return Role::system;
    case 'u': return Role::user;
    case 'a': return Role::assistant;
    default: throw ConfigError(std::string("unknown role code '") + code + "'");
  }
}

void TemplateSpec::validate(int vocab_size) const {
  const std::vector<TokenId> specials{pad_token,    bos_token,  system_open,    system_close,
                                      user_open,    user_close, assistant_open, eot_token};
  std::vector<TokenId> sorted = specials;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ConfigError("template: special token ids must be distinct");
  }
  for (TokenId id : specials) {
    if (id < 0 || id >= kReservedSpecials) throw ConfigError("template: special id outside reserved range");
  }
  if (question_marker < kReservedSpecials || answer_marker < kReservedSpecials ||
      question_marker == answer_marker || first_content <= std::max(question_marker, answer_marker)) {
    throw ConfigError("template: question/answer markers must be distinct ordinary ids below first_content");
  }
  if (vocab_size < 32 || first_content + 16 > vocab_size) {
    throw ConfigError("template: vocab size " + std::to_string(vocab_size) +
                      " too small to host special tokens and content");
  }
}

// ---- grammar ------------------------------------------------------------------

namespace {

std::vector<TokenId> permutation(int n, TokenId offset, RngStream rng) {
  std::vector<TokenId> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), offset);
  for (int i = n - 1; i > 0; --i) {
    const int j = rng.uniform_int(i + 1);
    std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(j)]);
  }
  return p;
}

constexpr double kUserBranchProbs[3] = {0.6, 0.25, 0.15};

}  // namespace

Grammar::Grammar(const CorpusConfig& config, const RngStream& seed) : config_(config) {
  config_.tmpl.validate(config.vocab_size);
  if (config.system_len < 0) throw ConfigError("corpus: system_len must be non-negative");
  if (config.turns < 1) throw ConfigError("corpus: turns must be at least 1");
  if (config.user_len_min < 2 || config.user_len_max < config.user_len_min) {
    throw ConfigError("corpus: user length range must satisfy 2 <= min <= max");
  }
  content_size_ = config.vocab_size - config.tmpl.first_content;
  const TokenId first = config.tmpl.first_content;
  for (int c = 0; c < 4; ++c) {
    reply_maps_.push_back(permutation(content_size_, first, seed.derive("grammar/reply/" + std::to_string(c))));
  }
  RngStream rng = seed.derive("grammar/user");
  user_next_.resize(static_cast<std::size_t>(4 * content_size_));
  for (auto& cands : user_next_) {
    while (cands.size() < 3) {
      const TokenId t = first + rng.uniform_int(content_size_);
      if (std::find(cands.begin(), cands.end(), t) == cands.end()) cands.push_back(t);
    }
  }
  RngStream sys_rng = seed.derive("grammar/system");
  system_prompt_ = sample_user_span(std::max(config.system_len, 2), sys_rng);
  system_prompt_.resize(static_cast<std::size_t>(config.system_len));
}

TokenId Grammar::reply_successor(TokenId prev2, TokenId prev1) const {
  return reply_maps_[static_cast<std::size_t>(cls(prev2))][static_cast<std::size_t>(index(prev1))];
}

TokenId Grammar::sample_user_successor(TokenId prev2, TokenId prev1, RngStream& rng) const {
  const auto& cands = user_next_[static_cast<std::size_t>(cls(prev2) * content_size_ + index(prev1))];
  return cands[static_cast<std::size_t>(rng.categorical(kUserBranchProbs))];
}

TokenId Grammar::sample_content(RngStream& rng) const {
  return config_.tmpl.first_content + rng.uniform_int(content_size_);
}

std::vector<TokenId> Grammar::sample_user_span(int length, RngStream& rng) const {
  std::vector<TokenId> out;
  out.reserve(static_cast<std::size_t>(length));
  for (int i = 0; i < length; ++i) {
    if (i < 2) {
      out.push_back(sample_content(rng));
    } else {
      out.push_back(sample_user_successor(out[out.size() - 2], out.back(), rng));
    }
  }
  return out;
}

std::vector<TokenId> Grammar::sample_reply(const std::vector<TokenId>& user, RngStream& rng) const {
  const std::size_t length = user.size() + static_cast<std::size_t>(config_.reply_extra);
  std::vector<TokenId> out;
  out.reserve(length);
  // Replies open by repeating the last two user tokens, which sit at a fixed
  // offset behind the assistant opener.
  for (std::size_t i = 0; i < length; ++i) {
    if (i < 2 && i < user.size()) {
      out.push_back(user[user.size() - 2 + i]);
    } else if (rng.uniform() < config_.reply_noise) {
      out.push_back(sample_user_successor(out[i - 2], out[i - 1], rng));
    } else {
      out.push_back(reply_successor(out[i - 2], out[i - 1]));
    }
  }
  return out;
}

// ---- structure --------------------------------------------------------------

namespace {

void push(Conversation& c, TokenId t, Role r) {
  c.tokens.push_back(t);
  c.roles.push_back(r);
}

void push_span(Conversation& c, const std::vector<TokenId>& span, Role r) {
  for (TokenId t : span) push(c, t, r);
}

}  // namespace

ConversationParts parse_conversation(const Conversation& c, const TemplateSpec& tmpl) {
  if (c.tokens.size() != c.roles.size()) throw ConfigError("conversation: role mask length differs from tokens");
  ConversationParts parts;
  parts.templated = false;
  auto current = [&]() -> Turn& {
    if (parts.turns.empty()) parts.turns.emplace_back();
    return parts.turns.back();
  };
  for (std::size_t i = 0; i < c.tokens.size(); ++i) {
    const TokenId t = c.tokens[i];
    switch (c.roles[i]) {
      case Role::system:
        parts.system.push_back(t);
        break;
      case Role::user: {
        if (parts.turns.empty() || parts.turns.back().assistant_started || parts.turns.back().closed) {
          parts.turns.emplace_back();
        }
        parts.turns.back().user.push_back(t);
        break;
      }
      case Role::assistant:
        current().assistant_started = true;
        current().assistant.push_back(t);
        break;
      case Role::special:
        if (t == tmpl.bos_token && i == 0) {
          parts.has_bos = true;
        } else if (t == tmpl.user_open || t == tmpl.question_marker) {
          parts.turns.emplace_back();
          if (t == tmpl.user_open) parts.templated = true;
        } else if (t == tmpl.assistant_open || t == tmpl.answer_marker) {
          current().assistant_started = true;
          if (t == tmpl.assistant_open) parts.templated = true;
        } else if (t == tmpl.eot_token) {
          current().closed = true;
          parts.templated = true;
        } else if (t == tmpl.system_open || t == tmpl.system_close || t == tmpl.user_close) {
          parts.templated = true;
        }
        break;
    }
  }
  return parts;
}

Conversation render_templated(const ConversationParts& parts, const TemplateSpec& tmpl, bool with_bos) {
  Conversation c;
  if (with_bos) push(c, tmpl.bos_token, Role::special);
  push(c, tmpl.system_open, Role::special);
  push_span(c, parts.system, Role::system);
  push(c, tmpl.system_close, Role::special);
  for (const auto& turn : parts.turns) {
    push(c, tmpl.user_open, Role::special);
    push_span(c, turn.user, Role::user);
    push(c, tmpl.user_close, Role::special);
    if (!turn.assistant_started && !turn.closed) continue;
    push(c, tmpl.assistant_open, Role::special);
    push_span(c, turn.assistant, Role::assistant);
    if (turn.closed) push(c, tmpl.eot_token, Role::special);
  }
  return c;
}

Conversation render_plain(const ConversationParts& parts, const TemplateSpec& tmpl, bool with_bos) {
  Conversation c;
  if (with_bos) push(c, tmpl.bos_token, Role::special);
  for (const auto& turn : parts.turns) {
    push(c, tmpl.question_marker, Role::special);
    push_span(c, turn.user, Role::user);
    if (!turn.assistant_started && !turn.closed) continue;
    push(c, tmpl.answer_marker, Role::special);
    push_span(c, turn.assistant, Role::assistant);
  }
  return c;
}

std::vector<Conversation> generate_corpus(const CorpusConfig& config, const RngStream& seed) {
  if (config.n_conversations < 0) throw ConfigError("corpus: n_conversations must be non-negative");
  const Grammar grammar(config, seed);
  std::vector<Conversation> corpus;
  corpus.reserve(static_cast<std::size_t>(config.n_conversations));
  for (int i = 0; i < config.n_conversations; ++i) {
    RngStream rng = seed.derive("conversation").derive(static_cast<std::uint64_t>(i));
    ConversationParts parts;
    parts.has_bos = true;
    parts.system = grammar.default_system_prompt();
    for (int t = 0; t < config.turns; ++t) {
      Turn turn;
      const int len = config.user_len_min + rng.uniform_int(config.user_len_max - config.user_len_min + 1);
      turn.user = grammar.sample_user_span(len, rng);
      turn.assistant = grammar.sample_reply(turn.user, rng);
      turn.assistant_started = true;
      turn.closed = true;
      parts.turns.push_back(std::move(turn));
    }
    corpus.push_back(render_templated(parts, config.tmpl, true));
  }
  return corpus;
}

std::vector<Conversation> generate_corpus(int vocab_size, int n_conversations, int turns, int system_len,
                                          const RngStream& seed) {
  CorpusConfig config;
  config.vocab_size = vocab_size;
  config.n_conversations = n_conversations;
  config.turns = turns;
  config.system_len = system_len;
  return generate_corpus(config, seed);
}

std::string to_string(TemplateMode mode) {
  switch (mode) {
    case TemplateMode::regular: return "regular";
    case TemplateMode::no_bos: return "no_bos";
    case TemplateMode::no_template: return "no_template";
    case TemplateMode::no_bos_no_template: return "no_bos_no_template";
  }
  return "?";
}

TemplateMode template_mode_from_string(const std::string& name) {
  for (auto m : {TemplateMode::regular, TemplateMode::no_bos, TemplateMode::no_template,
                 TemplateMode::no_bos_no_template}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown template mode '" + name + "'");
}

namespace {

std::vector<TokenId> resize_system(const std::vector<TokenId>& system, const SystemLengthOverride& o) {
  if (o.length < 0) throw ConfigError("system override: negative length");
  const auto target = static_cast<std::size_t>(o.length);
  if (target <= system.size()) {
    return {system.begin(), system.begin() + static_cast<std::ptrdiff_t>(target)};
  }
  if (o.pad == PadRule::none) {
    throw ConfigError("system override: requested " + std::to_string(o.length) + " tokens but only " +
                      std::to_string(system.size()) + " available and no pad rule");
  }
  const auto& material = o.material.empty() ? system : o.material;
  if (material.empty()) throw ConfigError("system override: no material to pad from");
  std::vector<TokenId> out = system;
  for (std::size_t i = 0; out.size() < target; ++i) out.push_back(material[i % material.size()]);
  return out;
}

}  // namespace

Conversation apply_perturbation(const Conversation& c, TemplateMode mode,
                                const std::optional<SystemLengthOverride>& system_override,
                                const TemplateSpec& tmpl) {
  if (mode == TemplateMode::regular && !system_override) return c;
  ConversationParts parts = parse_conversation(c, tmpl);
  const bool keep_template =
      parts.templated && (mode == TemplateMode::regular || mode == TemplateMode::no_bos);
  // Plain renders carry no system span, so the override only shapes templated output.
  if (system_override && keep_template) parts.system = resize_system(parts.system, *system_override);
  const bool with_bos = parts.has_bos && (mode == TemplateMode::regular || mode == TemplateMode::no_template);
  return keep_template ? render_templated(parts, tmpl, with_bos) : render_plain(parts, tmpl, with_bos);
}

PromptSplit split_last_reply(const Conversation& c, const TemplateSpec& tmpl) {
  std::size_t open = c.tokens.size();
  for (std::size_t i = c.tokens.size(); i-- > 0;) {
    if (c.roles[i] == Role::special &&
        (c.tokens[i] == tmpl.assistant_open || c.tokens[i] == tmpl.answer_marker)) {
      open = i;
      break;
    }
  }
  if (open == c.tokens.size()) throw ConfigError("split_last_reply: conversation has no assistant opener");
  PromptSplit split;
  split.prompt.tokens.assign(c.tokens.begin(), c.tokens.begin() + static_cast<std::ptrdiff_t>(open + 1));
  split.prompt.roles.assign(c.roles.begin(), c.roles.begin() + static_cast<std::ptrdiff_t>(open + 1));
  for (std::size_t i = open + 1; i < c.tokens.size() && c.roles[i] == Role::assistant; ++i) {
    split.reference.push_back(c.tokens[i]);
  }
  return split;
}

void write_corpus(std::ostream& os, const std::vector<Conversation>& corpus) {
  for (const auto& c : corpus) {
    std::string roles;
    roles.reserve(c.roles.size());
    for (Role r : c.roles) roles.push_back(role_code(r));
    nlohmann::json j;
    j["tokens"] = c.tokens;
    j["roles"] = roles;
    os << j.dump() << '\n';
  }
}

std::vector<Conversation> read_corpus(std::istream& is) {
  std::vector<Conversation> corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    Conversation c;
    try {
      const auto j = nlohmann::json::parse(line);
      c.tokens = j.at("tokens").get<std::vector<TokenId>>();
      for (char code : j.at("roles").get<std::string>()) c.roles.push_back(role_from_code(code));
    } catch (const std::exception& e) {
      throw DataError("corpus record " + std::to_string(line_no) + ": " + e.what());
    }
    if (c.tokens.size() != c.roles.size()) {
      throw DataError("corpus record " + std::to_string(line_no) + ": role mask length differs from tokens");
    }
    corpus.push_back(std::move(c));
  }
  return corpus;
}

double unigram_entropy(const std::vector<Conversation>& corpus, int vocab_size) {
  std::vector<double> counts(static_cast<std::size_t>(vocab_size), 0.0);
  double total = 0.0;
  for (const auto& c : corpus)
    for (TokenId t : c.tokens) {
      counts[static_cast<std::size_t>(t)] += 1.0;
      total += 1.0;
    }
  double h = 0.0;
  for (double n : counts)
    if (n > 0.0) h -= (n / total) * std::log(n / total);
  return h;
}

}  // namespace driftlab
