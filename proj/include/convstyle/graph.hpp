// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include "convstyle/autodiff.hpp"
#include "convstyle/corpus.hpp"
#include "convstyle/features.hpp"

namespace convstyle {

/// Edge label: speaker dependency crossed with temporal direction. The codes
/// are stable and used by checkpoints and debug dumps.
enum class RelationType : std::uint8_t {
  IntraPastToFuture = 0,
  IntraFutureToPast = 1,
  InterPastToFuture = 2,
  InterFutureToPast = 3,
};

inline constexpr std::size_t kRelationCount = 4;

inline const char* relation_name(RelationType r) {
  switch (r) {
    case RelationType::IntraPastToFuture: return "IntraPastToFuture";
    case RelationType::IntraFutureToPast: return "IntraFutureToPast";
    case RelationType::InterPastToFuture: return "InterPastToFuture";
    case RelationType::InterFutureToPast: return "InterFutureToPast";
  }
  return "?";
}

/// Self-loops count as future-to-past.
inline RelationType classify_relation(std::size_t src, std::size_t dst, bool same_speaker) {
  const bool past_to_future = src < dst;
  if (same_speaker)
    return past_to_future ? RelationType::IntraPastToFuture : RelationType::IntraFutureToPast;
  return past_to_future ? RelationType::InterPastToFuture : RelationType::InterFutureToPast;
}

struct Edge {
  std::size_t src = 0;
  std::size_t dst = 0;
  RelationType relation = RelationType::IntraFutureToPast;

  friend bool operator==(const Edge&, const Edge&) = default;
};

/// Complete digraph with self-loops over the context utterances. Edges are
/// sorted by (dst, src), so edge dst*n + src connects src -> dst.
struct ConversationGraph {
  std::size_t n = 0;
  std::vector<Edge> edges;
  std::vector<std::size_t> speaker_slots;

  const Edge& edge(std::size_t src, std::size_t dst) const { return edges[dst * n + src]; }

  friend bool operator==(const ConversationGraph&, const ConversationGraph&) = default;
};

inline ConversationGraph build_graph_from_speakers(std::span<const std::size_t> speakers) {
  ConversationGraph g;
  g.n = speakers.size();
  g.speaker_slots.assign(speakers.begin(), speakers.end());
  g.edges.reserve(g.n * g.n);
  for (std::size_t dst = 0; dst < g.n; ++dst)
    for (std::size_t src = 0; src < g.n; ++src)
      g.edges.push_back({src, dst, classify_relation(src, dst, speakers[src] == speakers[dst])});
  return g;
}

inline ConversationGraph build_graph(const Chunk& chunk) {
  if (chunk.context.empty()) throw ValidationError("chunk has no context utterances");
  auto slots = speaker_slots(chunk, chunk.context.size() + 1);
  slots.pop_back();
  return build_graph_from_speakers(slots);
}

/// Per-edge weights aligned with ConversationGraph::edges.
struct EdgeWeights {
  std::vector<double> alpha;
};

/// Bilinear edge scores x_d^T W_att x_s normalized by a softmax over each
/// destination's incoming edges (self-loop included). `x` stacks `blocks`
/// graphs of `n` nodes each; the result is [blocks*n x n] with row =
/// destination and column = source.
inline Var edge_attention(const Var& x, const Var& w_att, std::size_t n) {
  const Tensor& xv = x.value();
  const Tensor& wv = w_att.value();
  if (wv.rank() != 2 || wv.rows() != xv.cols() || wv.cols() != xv.cols())
    throw DimensionError("edge_attention: W_att " + shape_str(wv.shape()) + " does not fit features " +
                         shape_str(xv.shape()));
  if (n == 0 || xv.rows() % n) throw DimensionError("edge_attention: rows not a multiple of graph size");
  const Var projected = matmul(x, w_att);  // row d: x_d^T W_att
  return softmax(batched_matmul_nt(projected, x, xv.rows() / n));
}

inline Var edge_attention(const ConversationGraph& g, const Var& x, const Var& w_att) {
  if (g.edges.size() != g.n * g.n || x.value().rows() != g.n)
    throw DimensionError("edge_attention: features do not match the graph");
  return edge_attention(x, w_att, g.n);
}

inline EdgeWeights to_edge_weights(const Tensor& alpha) {
  return EdgeWeights{alpha.data()};
}

/// "src dst relation_code alpha" per edge in edge-list order.
inline std::string dump_edge_list(const ConversationGraph& g, const EdgeWeights& w) {
  if (w.alpha.size() != g.edges.size()) throw DimensionError("edge weights do not match the graph");
  std::string out;
  char buf[96];
  for (std::size_t i = 0; i < g.edges.size(); ++i) {
    const auto& e = g.edges[i];
    std::snprintf(buf, sizeof buf, "%zu %zu %u %.17g\n", e.src, e.dst,
                  static_cast<unsigned>(e.relation), w.alpha[i]);
    out += buf;
  }
  return out;
}

}  // namespace convstyle
