// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "convstyle/errors.hpp"
#include "convstyle/random.hpp"

namespace convstyle {

/// One conversational turn. `style` holds the style-token weights (a point on
/// the probability simplex) when the corpus provides them.
struct Utterance {
  std::string conversation_id;
  std::size_t index = 0;
  std::string speaker_id;
  std::string text;
  std::optional<std::vector<double>> style;

  friend bool operator==(const Utterance&, const Utterance&) = default;
};

struct Conversation {
  std::string id;
  std::vector<Utterance> utterances;

  /// Distinct speakers in order of first appearance.
  std::vector<std::string> speakers() const {
    std::vector<std::string> out;
    for (const auto& u : utterances)
      if (std::find(out.begin(), out.end(), u.speaker_id) == out.end()) out.push_back(u.speaker_id);
    return out;
  }

  friend bool operator==(const Conversation&, const Conversation&) = default;
};

/// `context` holds the `window` utterances preceding `target`, oldest first.
struct Chunk {
  std::string conversation_id;
  std::vector<Utterance> context;
  Utterance target;
};

inline constexpr std::size_t kDefaultWindow = 5;
inline constexpr double kStyleSumTolerance = 1e-6;

// ---------------------------------------------------------------------------
// Loading and saving
// ---------------------------------------------------------------------------

namespace detail {

inline std::string utterance_label(const Utterance& u) {
  return "utterance " + u.conversation_id + "#" + std::to_string(u.index);
}

inline void validate_style(const Utterance& u) {
  if (!u.style) return;
  const auto& s = *u.style;
  if (s.empty()) throw ValidationError(utterance_label(u) + ": empty style vector");
  double sum = 0.0;
  for (double v : s) {
    if (!std::isfinite(v) || v < 0.0)
      throw ValidationError(utterance_label(u) + ": style has a negative or non-finite component");
    sum += v;
  }
  if (std::abs(sum - 1.0) > kStyleSumTolerance)
    throw ValidationError(utterance_label(u) + ": style sums to " + std::to_string(sum) +
                          ", expected 1");
}

}  // namespace detail

/// Group, sort and validate utterances. Conversations keep the order in which
/// their ids first appear.
inline std::vector<Conversation> assemble_corpus(std::vector<Utterance> utterances) {
  std::vector<Conversation> convs;
  std::unordered_map<std::string, std::size_t> slot;
  for (auto& u : utterances) {
    auto [it, fresh] = slot.try_emplace(u.conversation_id, convs.size());
    if (fresh) convs.push_back(Conversation{u.conversation_id, {}});
    convs[it->second].utterances.push_back(std::move(u));
  }
  std::optional<std::size_t> style_dim;
  for (auto& c : convs) {
    std::stable_sort(c.utterances.begin(), c.utterances.end(),
                     [](const Utterance& a, const Utterance& b) { return a.index < b.index; });
    for (std::size_t i = 0; i < c.utterances.size(); ++i) {
      const auto& u = c.utterances[i];
      if (u.index != i)
        throw ValidationError("conversation " + c.id + ": indices are not contiguous from 0 (expected " +
                              std::to_string(i) + ", found " + std::to_string(u.index) + ")");
      detail::validate_style(u);
      if (u.style) {
        if (style_dim && *style_dim != u.style->size())
          throw ValidationError(detail::utterance_label(u) + ": style length " +
                                std::to_string(u.style->size()) + " differs from corpus style length " +
                                std::to_string(*style_dim));
        style_dim = u.style->size();
      }
    }
  }
  return convs;
}

inline Utterance parse_utterance(const std::string& line, std::size_t line_no) {
  auto fail = [&](const std::string& why) -> ParseError {
    return ParseError("line " + std::to_string(line_no) + ": " + why);
  };
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw fail(std::string("malformed JSON (") + e.what() + ")");
  }
  if (!j.is_object()) throw fail("record is not a JSON object");
  for (const char* key : {"conversation_id", "index", "speaker_id", "text"})
    if (!j.contains(key)) throw fail(std::string("missing key '") + key + "'");
  for (const auto& [k, _] : j.items())
    if (k != "conversation_id" && k != "index" && k != "speaker_id" && k != "text" && k != "style")
      throw fail("unknown key '" + k + "'");
  if (!j["conversation_id"].is_string()) throw fail("conversation_id must be a string");
  if (!j["speaker_id"].is_string()) throw fail("speaker_id must be a string");
  if (!j["text"].is_string()) throw fail("text must be a string");
  if (!j["index"].is_number_integer() || j["index"].get<std::int64_t>() < 0)
    throw fail("index must be a non-negative integer");
  Utterance u;
  u.conversation_id = j["conversation_id"].get<std::string>();
  u.index = j["index"].get<std::size_t>();
  u.speaker_id = j["speaker_id"].get<std::string>();
  u.text = j["text"].get<std::string>();
  if (j.contains("style") && !j["style"].is_null()) {
    if (!j["style"].is_array()) throw fail("style must be an array of numbers");
    std::vector<double> s;
    for (const auto& v : j["style"]) {
      if (!v.is_number()) throw fail("style must be an array of numbers");
      s.push_back(v.get<double>());
    }
    u.style = std::move(s);
  }
  return u;
}

inline std::vector<Conversation> parse_corpus(std::istream& in) {
  std::vector<Utterance> utts;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    utts.push_back(parse_utterance(line, line_no));
  }
  return assemble_corpus(std::move(utts));
}

inline std::vector<Conversation> load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus file: " + path);
  return parse_corpus(in);
}

inline nlohmann::json utterance_to_json(const Utterance& u) {
  nlohmann::json j{{"conversation_id", u.conversation_id},
                   {"index", u.index},
                   {"speaker_id", u.speaker_id},
                   {"text", u.text}};
  if (u.style) j["style"] = *u.style;
  return j;
}

inline void write_corpus(std::ostream& out, const std::vector<Conversation>& convs) {
  for (const auto& c : convs)
    for (const auto& u : c.utterances) out << utterance_to_json(u).dump() << '\n';
}

inline void save_corpus(const std::string& path, const std::vector<Conversation>& convs) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write corpus file: " + path);
  write_corpus(out, convs);
  if (!out) throw IoError("write failed: " + path);
}

inline std::size_t utterance_count(const std::vector<Conversation>& convs) {
  std::size_t n = 0;
  for (const auto& c : convs) n += c.utterances.size();
  return n;
}

/// Style dimensionality of the corpus, if any utterance carries a style.
inline std::optional<std::size_t> corpus_style_dim(const std::vector<Conversation>& convs) {
  for (const auto& c : convs)
    for (const auto& u : c.utterances)
      if (u.style) return u.style->size();
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Chunking
// ---------------------------------------------------------------------------

/// Stride-1 sliding windows of window+1 utterances. A conversation of length n
/// yields max(0, n - window) chunks; shorter conversations yield none.
inline std::vector<Chunk> make_chunks(const std::vector<Conversation>& convs,
                                      std::size_t window = kDefaultWindow) {
  if (window < 1) throw ConfigError("chunk window must be at least 1");
  std::vector<Chunk> out;
  for (const auto& c : convs) {
    const auto& u = c.utterances;
    for (std::size_t t = window; t < u.size(); ++t) {
      Chunk ch;
      ch.conversation_id = c.id;
      ch.context.assign(u.begin() + static_cast<std::ptrdiff_t>(t - window),
                        u.begin() + static_cast<std::ptrdiff_t>(t));
      ch.target = u[t];
      out.push_back(std::move(ch));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

struct StatRow {
  std::string scope;     // "conversation", "speaker" or "sentence"
  std::string quantity;  // "sentences", "speakers" or "words"
  double min = 0.0;
  double average = 0.0;
  double max = 0.0;
};

struct StatsReport {
  std::vector<StatRow> rows;
  std::size_t total_conversations = 0;
  std::size_t total_utterances = 0;
};

inline std::size_t word_count(const std::string& text) {
  std::istringstream is(text);
  std::size_t n = 0;
  std::string w;
  while (is >> w) ++n;
  return n;
}

namespace detail {

inline StatRow summarize_counts(std::string scope, std::string quantity,
                                const std::vector<std::size_t>& xs) {
  StatRow r{std::move(scope), std::move(quantity)};
  if (xs.empty()) return r;
  auto [lo, hi] = std::minmax_element(xs.begin(), xs.end());
  std::size_t total = 0;
  for (auto x : xs) total += x;
  r.min = static_cast<double>(*lo);
  r.max = static_cast<double>(*hi);
  r.average = static_cast<double>(total) / static_cast<double>(xs.size());
  return r;
}

}  // namespace detail

/// Text-derivable count statistics: sentences and speakers per conversation,
/// sentences per speaker (within a conversation), words per sentence.
inline StatsReport corpus_stats(const std::vector<Conversation>& convs) {
  if (convs.empty()) throw ValidationError("cannot compute statistics of an empty corpus");
  std::vector<std::size_t> sent_per_conv, spk_per_conv, sent_per_spk, words_per_sent;
  for (const auto& c : convs) {
    sent_per_conv.push_back(c.utterances.size());
    std::map<std::string, std::size_t> per_speaker;
    for (const auto& u : c.utterances) {
      ++per_speaker[u.speaker_id];
      words_per_sent.push_back(word_count(u.text));
    }
    spk_per_conv.push_back(per_speaker.size());
    for (const auto& [_, n] : per_speaker) sent_per_spk.push_back(n);
  }
  StatsReport rep;
  rep.rows.push_back(detail::summarize_counts("conversation", "sentences", sent_per_conv));
  rep.rows.push_back(detail::summarize_counts("conversation", "speakers", spk_per_conv));
  rep.rows.push_back(detail::summarize_counts("speaker", "sentences", sent_per_spk));
  rep.rows.push_back(detail::summarize_counts("sentence", "words", words_per_sent));
  rep.total_conversations = convs.size();
  rep.total_utterances = utterance_count(convs);
  return rep;
}

// ---------------------------------------------------------------------------
// Synthetic conversations
// ---------------------------------------------------------------------------

/// Parameters of the synthetic conversation process. Each utterance's style is
///   normalize(l_self*prev_same + l_inter*prev_other + l_text*basis(topic)
///             + l_base*speaker_base + noise*Dirichlet(1)).
struct SynthConfig {
  std::size_t conversations = 1000;
  std::size_t min_speakers = 2;
  std::size_t max_speakers = 3;
  std::size_t min_len = 8;
  std::size_t max_len = 30;
  std::size_t topics = 10;
  double topic_stay = 0.3;
  double turn_keep = 0.3;
  std::size_t words_per_sentence = 6;
  std::size_t vocab_per_topic = 20;
  std::size_t style_dim = 10;
  double style_smoothing = 0.1;
  double lambda_self = 0.4;
  double lambda_inter = 0.3;
  double lambda_text = 0.2;
  double lambda_base = 0.1;
  double noise = 0.05;
};

inline void validate(const SynthConfig& c) {
  auto req = [](bool ok, const char* key, const char* why) {
    if (!ok) throw ConfigError(std::string("synth.") + key + ": " + why);
  };
  req(c.min_speakers >= 1, "min_speakers", "must be >= 1");
  req(c.max_speakers >= c.min_speakers, "max_speakers", "must be >= synth.min_speakers");
  req(c.min_len >= 1, "min_len", "must be >= 1");
  req(c.max_len >= c.min_len, "max_len", "must be >= synth.min_len");
  req(c.topics >= 1, "topics", "must be >= 1");
  req(c.topic_stay >= 0.0 && c.topic_stay <= 1.0, "topic_stay", "must be in [0, 1]");
  req(c.turn_keep >= 0.0 && c.turn_keep <= 1.0, "turn_keep", "must be in [0, 1]");
  req(c.words_per_sentence >= 1, "words_per_sentence", "must be >= 1");
  req(c.vocab_per_topic >= 1, "vocab_per_topic", "must be >= 1");
  req(c.style_dim >= 1, "style_dim", "must be >= 1");
  req(c.style_smoothing >= 0.0 && c.style_smoothing <= 1.0, "style_smoothing", "must be in [0, 1]");
  for (auto [v, k] : {std::pair{c.lambda_self, "lambda_self"}, {c.lambda_inter, "lambda_inter"},
                      {c.lambda_text, "lambda_text"}, {c.lambda_base, "lambda_base"},
                      {c.noise, "noise"}})
    req(v >= 0.0 && std::isfinite(v), k, "must be a non-negative number");
  if (c.lambda_self + c.lambda_inter + c.lambda_text + c.lambda_base == 0.0)
    throw ConfigError("synth.lambda_*: all mixing weights are zero");
}

/// Vocabulary token j of topic k. Topic vocabularies are disjoint.
inline std::string synth_word(std::size_t topic, std::size_t j) {
  return "t" + std::to_string(topic) + "w" + std::to_string(j);
}

/// Smoothed one-hot style basis of a topic.
inline std::vector<double> topic_style_basis(const SynthConfig& cfg, std::size_t topic) {
  const double d = static_cast<double>(cfg.style_dim);
  std::vector<double> e(cfg.style_dim, cfg.style_smoothing / d);
  e[topic % cfg.style_dim] += 1.0 - cfg.style_smoothing;
  return e;
}

inline std::string synth_conversation_id(std::size_t i) {
  std::ostringstream os;
  os << "conv";
  os.width(5);
  os.fill('0');
  os << i;
  return os.str();
}

/// Generate one conversation from its own substream.
inline Conversation generate_conversation(const SynthConfig& cfg, std::uint64_t seed, std::size_t ci) {
  Rng rng(hash64(seed, ci));
  const std::size_t ds = cfg.style_dim;
  const auto n_spk = static_cast<std::size_t>(rng.uniform_int(
      static_cast<std::int64_t>(cfg.min_speakers), static_cast<std::int64_t>(cfg.max_speakers)));
  const auto len = static_cast<std::size_t>(
      rng.uniform_int(static_cast<std::int64_t>(cfg.min_len), static_cast<std::int64_t>(cfg.max_len)));
  std::vector<std::vector<double>> base(n_spk);
  for (auto& b : base) b = rng.dirichlet_ones(ds);

  Conversation conv;
  conv.id = synth_conversation_id(ci);
  std::vector<std::optional<std::vector<double>>> last_by_speaker(n_spk);
  std::vector<std::size_t> speaker_of;  // per utterance
  std::size_t spk = 0;
  std::size_t topic = rng.index(cfg.topics);
  for (std::size_t t = 0; t < len; ++t) {
    if (t > 0) {
      if (n_spk > 1 && rng.uniform() >= cfg.turn_keep) spk = (spk + 1) % n_spk;
      if (cfg.topics > 1 && rng.uniform() >= cfg.topic_stay) {
        const std::size_t other = rng.index(cfg.topics - 1);
        topic = other >= topic ? other + 1 : other;
      }
    }
    std::string text;
    for (std::size_t w = 0; w < cfg.words_per_sentence; ++w) {
      if (w) text += ' ';
      text += synth_word(topic, rng.index(cfg.vocab_per_topic));
    }
    const auto& b = base[spk];
    const std::vector<double>& prev_same = last_by_speaker[spk] ? *last_by_speaker[spk] : b;
    const std::vector<double>* prev_other = &b;
    for (std::size_t p = t; p-- > 0;)
      if (speaker_of[p] != spk) {
        prev_other = &*conv.utterances[p].style;
        break;
      }
    const auto basis = topic_style_basis(cfg, topic);
    const auto noise = rng.dirichlet_ones(ds);
    std::vector<double> y(ds);
    double total = 0.0;
    for (std::size_t i = 0; i < ds; ++i) {
      y[i] = cfg.lambda_self * prev_same[i] + cfg.lambda_inter * (*prev_other)[i] +
             cfg.lambda_text * basis[i] + cfg.lambda_base * b[i] + cfg.noise * noise[i];
      total += y[i];
    }
    for (auto& v : y) v /= total;

    Utterance u;
    u.conversation_id = conv.id;
    u.index = t;
    u.speaker_id = "spk" + std::to_string(spk);
    u.text = std::move(text);
    u.style = y;
    conv.utterances.push_back(std::move(u));
    last_by_speaker[spk] = std::move(y);
    speaker_of.push_back(spk);
  }
  return conv;
}

/// Deterministic in (cfg, seed): conversation i draws only from the substream
/// hash64(seed, i).
inline std::vector<Conversation> generate_synthetic(const SynthConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  std::vector<Conversation> out;
  out.reserve(cfg.conversations);
  for (std::size_t i = 0; i < cfg.conversations; ++i) out.push_back(generate_conversation(cfg, seed, i));
  return out;
}

}  // namespace convstyle
