// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "convstyle/autodiff.hpp"
#include "convstyle/corpus.hpp"
#include "convstyle/features.hpp"
#include "convstyle/graph.hpp"

namespace convstyle {

/// The four comparable style predictors, in reporting order.
enum class Variant : std::uint8_t { BaselineGRU = 0, GraphTextRaw = 1, GraphTextEncoded = 2, Proposed = 3 };

inline constexpr std::array<Variant, 4> kAllVariants{Variant::BaselineGRU, Variant::GraphTextRaw,
                                                     Variant::GraphTextEncoded, Variant::Proposed};

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::BaselineGRU: return "BaselineGRU";
    case Variant::GraphTextRaw: return "GraphTextRaw";
    case Variant::GraphTextEncoded: return "GraphTextEncoded";
    case Variant::Proposed: return "Proposed";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "BaselineGRU" || s == "Baseline") return Variant::BaselineGRU;
  if (s == "GraphTextRaw") return Variant::GraphTextRaw;
  if (s == "GraphTextEncoded") return Variant::GraphTextEncoded;
  if (s == "Proposed") return Variant::Proposed;
  throw ConfigError("unknown variant '" + s +
                    "' (expected BaselineGRU, GraphTextRaw, GraphTextEncoded or Proposed)");
}

inline bool uses_context_style(Variant v) { return v == Variant::Proposed; }

struct ModelConfig {
  std::size_t hidden = 64;          // graph layer width
  std::size_t attention_dim = 64;   // query/key projection width
  std::size_t gru_hidden = 512;     // baseline recurrent width
  double dropout = 0.0;             // on the summarized context, training only
};

struct ModelSpec {
  Variant variant = Variant::Proposed;
  FeatureConfig features;
  ModelConfig model;

  std::size_t value_dim() const { return features.node_dim() + model.hidden; }
};

inline void validate(const ModelSpec& s) {
  validate(s.features);
  if (s.model.hidden < 1 || s.model.attention_dim < 1 || s.model.gru_hidden < 1)
    throw ConfigError("model: dimensions must be >= 1");
  if (!(s.model.dropout >= 0.0 && s.model.dropout < 1.0))
    throw ConfigError("model.dropout: must be in [0, 1)");
  if (s.variant == Variant::GraphTextRaw && s.features.d_raw > s.features.d_text)
    throw ConfigError("features.d_raw: GraphTextRaw needs d_raw <= d_text (raw features are zero-padded)");
}

/// Fresh parameters: Glorot-uniform matrices, zero biases, keyed by name so
/// shared submodules initialize identically across variants.
inline ParamStore init_params(const ModelSpec& spec, std::uint64_t seed) {
  validate(spec);
  const auto& f = spec.features;
  const auto& m = spec.model;
  ParamStore ps;
  auto mat = [&](const std::string& name, std::size_t rows, std::size_t cols) {
    ps.add(name, glorot_uniform(rows, cols, seed, name));
  };
  auto vec = [&](const std::string& name, std::size_t n) { ps.add(name, Tensor({n})); };
  add_text_encoder_params(ps, f, seed);
  if (spec.variant == Variant::BaselineGRU) {
    const std::size_t in = f.d_raw + f.speaker_slots, h = m.gru_hidden;
    for (const char* g : {"z", "r", "h"}) {
      mat(std::string("gru.w_") + g, h, in);
      mat(std::string("gru.u_") + g, h, h);
      vec(std::string("gru.b_") + g, h);
    }
    mat("output.w", f.d_style, h + f.query_dim());
    vec("output.b", f.d_style);
    return ps;
  }
  const std::size_t nd = f.node_dim(), h = m.hidden;
  mat("graph.w_att", nd, nd);
  for (std::size_t r = 0; r < kRelationCount; ++r) mat("graph.w_rel" + std::to_string(r), h, nd);
  vec("graph.b1", h);
  mat("graph.w_g", h, h);
  mat("graph.w_self", h, h);
  vec("graph.b2", h);
  mat("attention.w_q", m.attention_dim, f.query_dim());
  mat("attention.w_k", m.attention_dim, spec.value_dim());
  mat("output.w", f.d_style, f.query_dim() + spec.value_dim());
  vec("output.b", f.d_style);
  return ps;
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

/// Precomputed, non-differentiable inputs for a batch of chunks sharing one
/// window length. Node rows are chunk-major: row b*window + i is context
/// utterance i of chunk b.
struct ChunkBatch {
  std::size_t size = 0;
  std::size_t window = 0;
  Tensor raw_context;      // [B*W x d_raw]
  Tensor raw_target;       // [B x d_raw]
  Tensor style_context;    // [B*W x d_style], zero when unavailable
  bool has_context_style = false;
  Tensor speaker_context;  // [B*W x S]
  Tensor speaker_target;   // [B x S]
  std::vector<Tensor> sequence;  // per position: [B x (d_raw + S)]
  std::vector<ConversationGraph> graphs;
  std::vector<std::uint8_t> relations;               // per chunk, (dst, src) row-major
  std::vector<std::vector<std::size_t>> in_neighbors;  // global node row -> source rows
  std::optional<Tensor> target_style;                // [B x d_style]
};

inline ChunkBatch make_batch(std::span<const Chunk* const> chunks, const FeatureConfig& cfg) {
  if (chunks.empty()) throw ValidationError("empty batch");
  ChunkBatch b;
  b.size = chunks.size();
  b.window = chunks[0]->context.size();
  const std::size_t bw = b.size * b.window;
  if (b.window == 0) throw ValidationError("chunk has no context utterances");
  b.raw_context = Tensor({bw, cfg.d_raw});
  b.raw_target = Tensor({b.size, cfg.d_raw});
  b.style_context = Tensor({bw, cfg.d_style});
  b.speaker_context = Tensor({bw, cfg.speaker_slots});
  b.speaker_target = Tensor({b.size, cfg.speaker_slots});
  b.has_context_style = true;
  bool has_target_style = true;
  Tensor target_style({b.size, cfg.d_style});

  auto put_style = [&](const Utterance& u, std::span<double> dst) {
    if (u.style->size() != cfg.d_style)
      throw DimensionError("style length " + std::to_string(u.style->size()) +
                           " does not match d_style " + std::to_string(cfg.d_style));
    std::copy(u.style->begin(), u.style->end(), dst.begin());
  };

  for (std::size_t c = 0; c < b.size; ++c) {
    const Chunk& ch = *chunks[c];
    if (ch.context.size() != b.window) throw ValidationError("batch mixes chunk window lengths");
    const auto slots = speaker_slots(ch, cfg.speaker_slots);
    for (std::size_t i = 0; i < b.window; ++i) {
      const std::size_t row = c * b.window + i;
      const auto& u = ch.context[i];
      const Tensor r = raw_text_features(u.text, cfg);
      std::copy(r.data().begin(), r.data().end(), b.raw_context.row(row).begin());
      b.speaker_context(row, slots[i]) = 1.0;
      if (u.style)
        put_style(u, b.style_context.row(row));
      else
        b.has_context_style = false;
    }
    const Tensor r = raw_text_features(ch.target.text, cfg);
    std::copy(r.data().begin(), r.data().end(), b.raw_target.row(c).begin());
    b.speaker_target(c, slots.back()) = 1.0;
    if (ch.target.style)
      put_style(ch.target, target_style.row(c));
    else
      has_target_style = false;

    std::vector<std::size_t> ctx_slots(slots.begin(), slots.end() - 1);
    b.graphs.push_back(build_graph_from_speakers(ctx_slots));
    for (const auto& e : b.graphs.back().edges) b.relations.push_back(static_cast<std::uint8_t>(e.relation));
  }
  if (!b.has_context_style) b.style_context.fill(0.0);
  if (has_target_style) b.target_style = std::move(target_style);

  b.in_neighbors.resize(bw);
  for (std::size_t c = 0; c < b.size; ++c)
    for (const auto& e : b.graphs[c].edges)
      b.in_neighbors[c * b.window + e.dst].push_back(c * b.window + e.src);

  const std::size_t in = cfg.d_raw + cfg.speaker_slots;
  for (std::size_t i = 0; i < b.window; ++i) {
    Tensor x({b.size, in});
    for (std::size_t c = 0; c < b.size; ++c) {
      const std::size_t row = c * b.window + i;
      auto dst = x.row(c);
      std::copy(b.raw_context.row(row).begin(), b.raw_context.row(row).end(), dst.begin());
      std::copy(b.speaker_context.row(row).begin(), b.speaker_context.row(row).end(),
                dst.begin() + static_cast<std::ptrdiff_t>(cfg.d_raw));
    }
    b.sequence.push_back(std::move(x));
  }
  return b;
}

inline ChunkBatch make_batch(const std::vector<Chunk>& chunks, const FeatureConfig& cfg) {
  std::vector<const Chunk*> ptrs;
  for (const auto& c : chunks) ptrs.push_back(&c);
  return make_batch(std::span<const Chunk* const>(ptrs), cfg);
}

// ---------------------------------------------------------------------------
// Graph model stages
// ---------------------------------------------------------------------------

/// Stage 1: h1_d = relu(sum_{s->d} alpha_{s->d} W_{rel(s,d)} x_s + b1).
inline Var rgcn_layer(Tape& tape, ParamStore& ps, const Var& x, const Var& alpha,
                      std::vector<std::uint8_t> relations, std::size_t n) {
  std::array<Var, kRelationCount> projected;
  for (std::size_t r = 0; r < kRelationCount; ++r)
    projected[r] = linear(x, tape.param(ps, "graph.w_rel" + std::to_string(r)));
  const Var agg = relational_aggregate(projected, alpha, std::move(relations), n);
  return relu(add_bias(agg, tape.param(ps, "graph.b1")));
}

inline Var rgcn_layer(Tape& tape, ParamStore& ps, const ConversationGraph& g, const Var& x,
                      const Var& alpha) {
  std::vector<std::uint8_t> rel;
  for (const auto& e : g.edges) rel.push_back(static_cast<std::uint8_t>(e.relation));
  return rgcn_layer(tape, ps, x, alpha, std::move(rel), g.n);
}

/// Stage 2: h2_d = relu(mean_{s->d} W_g h1_s + W_self h1_d + b2).
inline Var graph_layer(Tape& tape, ParamStore& ps, const Var& h1,
                       std::vector<std::vector<std::size_t>> in_neighbors) {
  const Var neighbours = linear(neighbor_mean(h1, std::move(in_neighbors)), tape.param(ps, "graph.w_g"));
  const Var self = linear(h1, tape.param(ps, "graph.w_self"), tape.param(ps, "graph.b2"));
  return relu(add(neighbours, self));
}

inline Var graph_layer(Tape& tape, ParamStore& ps, const ConversationGraph& g, const Var& h1) {
  std::vector<std::vector<std::size_t>> nb(g.n);
  for (const auto& e : g.edges) nb[e.dst].push_back(e.src);
  return graph_layer(tape, ps, h1, std::move(nb));
}

/// Scaled dot-product attention of each chunk's query over its node values
/// v_i = [x_i, h2_i]; returns the attention-weighted value per chunk.
inline Var summarize(Tape& tape, ParamStore& ps, const Var& query, const Var& x, const Var& h2,
                     std::size_t n) {
  const Var values = concat(x, h2);
  const Var q = linear(query, tape.param(ps, "attention.w_q"));
  const Var k = linear(values, tape.param(ps, "attention.w_k"));
  const std::size_t blocks = query.value().rows();
  if (values.value().rows() != blocks * n)
    throw DimensionError("summarize: " + std::to_string(blocks) + " queries for " +
                         std::to_string(values.value().rows()) + " node rows");
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.value().cols()));
  const Var weights = softmax(scale(batched_matmul_nt(q, k, blocks), inv_sqrt));
  return batched_matmul(weights, values, blocks);
}

inline Var predict_style(Tape& tape, ParamStore& ps, const Var& query, const Var& context) {
  return softmax(linear(concat(query, context), tape.param(ps, "output.w"), tape.param(ps, "output.b")));
}

/// Standard GRU step.
inline Var gru_cell(Tape& tape, ParamStore& ps, const Var& x, const Var& h) {
  auto p = [&](const char* name) { return tape.param(ps, name); };
  const Var z = sigmoid(add(linear(x, p("gru.w_z"), p("gru.b_z")), linear(h, p("gru.u_z"))));
  const Var r = sigmoid(add(linear(x, p("gru.w_r"), p("gru.b_r")), linear(h, p("gru.u_r"))));
  const Var cand = tanh(add(linear(x, p("gru.w_h"), p("gru.b_h")), linear(hadamard(r, h), p("gru.u_h"))));
  return add(h, hadamard(z, sub(cand, h)));
}

// ---------------------------------------------------------------------------
// End-to-end forward passes
// ---------------------------------------------------------------------------

struct ForwardOptions {
  Mode mode = Mode::Eval;
  std::uint64_t dropout_seed = 0;
};

inline Var current_query(Tape& tape, ParamStore& ps, const ChunkBatch& b) {
  const Var text = encode_text(tape.constant(b.raw_target), tape, ps);
  return concat(text, tape.constant(b.speaker_target));
}

inline Var node_features(Tape& tape, ParamStore& ps, const ChunkBatch& b, const ModelSpec& spec) {
  const auto& f = spec.features;
  const std::size_t rows = b.size * b.window;
  switch (spec.variant) {
    case Variant::Proposed: {
      if (!b.has_context_style)
        throw MissingModalityError("Proposed variant needs style vectors on every context utterance");
      const Var text = encode_text(tape.constant(b.raw_context), tape, ps);
      return concat(text, tape.constant(b.style_context));
    }
    case Variant::GraphTextEncoded: {
      const Var text = encode_text(tape.constant(b.raw_context), tape, ps);
      return concat(text, tape.constant(Tensor({rows, f.d_style})));
    }
    case Variant::GraphTextRaw: {
      Tensor x({rows, f.node_dim()});
      for (std::size_t r = 0; r < rows; ++r)
        std::copy(b.raw_context.row(r).begin(), b.raw_context.row(r).end(), x.row(r).begin());
      return tape.constant(std::move(x));
    }
    case Variant::BaselineGRU: break;
  }
  throw ConfigError("node_features: baseline has no graph");
}

inline Var forward_proposed(Tape& tape, ParamStore& ps, const ChunkBatch& b, const ModelSpec& spec,
                            const ForwardOptions& opt = {}) {
  const Var x = node_features(tape, ps, b, spec);
  const Var alpha = edge_attention(x, tape.param(ps, "graph.w_att"), b.window);
  const Var h1 = rgcn_layer(tape, ps, x, alpha, b.relations, b.window);
  const Var h2 = graph_layer(tape, ps, h1, b.in_neighbors);
  const Var query = current_query(tape, ps, b);
  Var context = summarize(tape, ps, query, x, h2, b.window);
  context = dropout(context, spec.model.dropout, opt.dropout_seed, opt.mode);
  return predict_style(tape, ps, query, context);
}

inline Var forward_baseline(Tape& tape, ParamStore& ps, const ChunkBatch& b, const ModelSpec& spec,
                            const ForwardOptions& opt = {}) {
  Var h = tape.constant(Tensor({b.size, spec.model.gru_hidden}));
  for (const auto& x : b.sequence) h = gru_cell(tape, ps, tape.constant(x), h);
  h = dropout(h, spec.model.dropout, opt.dropout_seed, opt.mode);
  const Var query = current_query(tape, ps, b);
  return softmax(linear(concat(h, query), tape.param(ps, "output.w"), tape.param(ps, "output.b")));
}

/// Predicted style weights [B x d_style] for any variant.
inline Var forward(Tape& tape, ParamStore& ps, const ChunkBatch& b, const ModelSpec& spec,
                   const ForwardOptions& opt = {}) {
  if (spec.variant == Variant::BaselineGRU) return forward_baseline(tape, ps, b, spec, opt);
  return forward_proposed(tape, ps, b, spec, opt);
}

/// Single-chunk prediction in evaluation mode.
inline Tensor predict(const Chunk& chunk, ParamStore& ps, const ModelSpec& spec) {
  const Chunk* one[] = {&chunk};
  const ChunkBatch b = make_batch(std::span<const Chunk* const>(one), spec.features);
  Tape tape(false);
  Tensor out = forward(tape, ps, b, spec).value();
  return out.reshaped({spec.features.d_style});
}

}  // namespace convstyle
