// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "convstyle/autodiff.hpp"
#include "convstyle/corpus.hpp"

namespace convstyle {

struct FeatureConfig {
  std::size_t d_raw = 64;        // hashed text feature size
  std::size_t d_text = 64;       // encoded text feature size
  std::size_t d_style = 10;      // number of style tokens
  std::size_t speaker_slots = 6;
  std::uint64_t hash_seed = 20211;

  std::size_t node_dim() const { return d_text + d_style; }
  std::size_t query_dim() const { return d_text + speaker_slots; }
};

inline void validate(const FeatureConfig& c) {
  if (c.d_raw < 1 || c.d_text < 1 || c.d_style < 1 || c.speaker_slots < 1)
    throw ConfigError("features: all dimensions must be >= 1");
}

/// Signed hashed bag of words over lowercased whitespace tokens, L2-normalized
/// when non-zero.
inline Tensor raw_text_features(const std::string& text, const FeatureConfig& cfg) {
  Tensor out({cfg.d_raw});
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) {
    for (auto& ch : tok) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    const std::uint64_t h = hash_string(cfg.hash_seed, tok);
    const std::size_t bucket = h % cfg.d_raw;
    const double sign = (splitmix64(h) >> 63) ? -1.0 : 1.0;
    out[bucket] += sign;
  }
  double norm = 0.0;
  for (double v : out.data()) norm += v * v;
  if (norm > 0.0) {
    norm = std::sqrt(norm);
    for (auto& v : out.data()) v /= norm;
  }
  return out;
}

// Text encoder: two relu layers standing in for a pretrained content encoder.
inline void add_text_encoder_params(ParamStore& ps, const FeatureConfig& cfg, std::uint64_t seed) {
  ps.add("text_encoder.w1", glorot_uniform(cfg.d_text, cfg.d_raw, seed, "text_encoder.w1"));
  ps.add("text_encoder.b1", Tensor({cfg.d_text}));
  ps.add("text_encoder.w2", glorot_uniform(cfg.d_text, cfg.d_text, seed, "text_encoder.w2"));
  ps.add("text_encoder.b2", Tensor({cfg.d_text}));
}

/// relu(W2 relu(W1 raw + b1) + b2); `raw` may be one vector or stacked rows.
inline Var encode_text(const Var& raw, Tape& tape, ParamStore& ps) {
  const Var w1 = tape.param(ps, "text_encoder.w1");
  const Var b1 = tape.param(ps, "text_encoder.b1");
  const Var w2 = tape.param(ps, "text_encoder.w2");
  const Var b2 = tape.param(ps, "text_encoder.b2");
  return relu(linear(relu(linear(raw, w1, b1)), w2, b2));
}

inline Tensor style_features(const Utterance& u) {
  if (!u.style)
    throw MissingModalityError("utterance " + u.conversation_id + "#" + std::to_string(u.index) +
                               " has no style vector");
  return Tensor::vector(*u.style);
}

/// Chunk-local speaker slots, assigned by first appearance scanning the context
/// and then the target. Element i is the slot of context[i]; the last element
/// is the target's slot.
inline std::vector<std::size_t> speaker_slots(const Chunk& chunk, std::size_t capacity) {
  std::vector<std::string> seen;
  std::vector<std::size_t> slots;
  auto slot_of = [&](const std::string& id) {
    for (std::size_t i = 0; i < seen.size(); ++i)
      if (seen[i] == id) return i;
    seen.push_back(id);
    if (seen.size() > capacity)
      throw CapacityError("chunk has more than " + std::to_string(capacity) + " distinct speakers");
    return seen.size() - 1;
  };
  for (const auto& u : chunk.context) slots.push_back(slot_of(u.speaker_id));
  slots.push_back(slot_of(chunk.target.speaker_id));
  return slots;
}

inline Tensor one_hot(std::size_t index, std::size_t n) {
  Tensor t({n});
  t[index] = 1.0;
  return t;
}

inline Tensor speaker_encoding(const Chunk& chunk, const Utterance& u, const FeatureConfig& cfg) {
  const auto slots = speaker_slots(chunk, cfg.speaker_slots);
  if (u.conversation_id == chunk.conversation_id) {
    for (std::size_t i = 0; i < chunk.context.size(); ++i)
      if (chunk.context[i].index == u.index) return one_hot(slots[i], cfg.speaker_slots);
    if (chunk.target.index == u.index) return one_hot(slots.back(), cfg.speaker_slots);
  }
  throw ValidationError("utterance " + u.conversation_id + "#" + std::to_string(u.index) +
                        " is not part of the chunk");
}

/// Node feature matrix [window x (d_text + d_style)]: encoded text concatenated
/// with the style vector, or with zeros when `use_style` is off.
inline Var build_node_features(const Chunk& chunk, const FeatureConfig& cfg, Tape& tape,
                               ParamStore& ps, bool use_style) {
  const std::size_t n = chunk.context.size();
  Tensor raw({n, cfg.d_raw});
  Tensor style({n, cfg.d_style});
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor r = raw_text_features(chunk.context[i].text, cfg);
    std::copy(r.data().begin(), r.data().end(), raw.row(i).begin());
    if (use_style) {
      const Tensor s = style_features(chunk.context[i]);
      if (s.size() != cfg.d_style)
        throw DimensionError("style length " + std::to_string(s.size()) + " does not match d_style " +
                             std::to_string(cfg.d_style));
      std::copy(s.data().begin(), s.data().end(), style.row(i).begin());
    }
  }
  const Var text = encode_text(tape.constant(std::move(raw)), tape, ps);
  return concat(text, tape.constant(std::move(style)));
}

}  // namespace convstyle
