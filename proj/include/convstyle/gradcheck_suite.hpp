// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "convstyle/autodiff.hpp"
#include "convstyle/corpus.hpp"
#include "convstyle/gradcheck.hpp"
#include "convstyle/graph.hpp"
#include "convstyle/model.hpp"

namespace convstyle {

/// A registered gradient check: an objective plus the point it is checked at.
struct GradCheckCase {
  std::string name;
  ScalarObjective objective;
  ParamStore point;
  double numeric_scale = 1.0;
};

inline GradCheckResult run_gradcheck_case(const GradCheckCase& c, double eps, std::size_t max_entries = 0,
                                          std::uint64_t sample_seed = 0) {
  return gradient_check(c.objective, c.point, eps, {max_entries, sample_seed, c.numeric_scale});
}

inline Tensor random_uniform(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// One case per differentiable op. Each objective is sum(op(...) * C) with a
/// fixed random C, so every output entry contributes a distinct weight.
inline std::vector<GradCheckCase> op_gradcheck_cases(std::uint64_t seed) {
  Rng rng(hash64(seed, 0x6F7073));
  std::vector<GradCheckCase> cases;

  auto weighted = [](Var out, const Tensor& c) {
    Tape& t = *out.tape();
    return sum(hadamard(out, t.constant(c)));
  };
  using OpFn = std::function<Var(Tape&, ParamStore&)>;
  auto add_case = [&](std::string name, std::vector<std::pair<std::string, Shape>> inputs, Shape out_shape,
                      OpFn op) {
    ParamStore ps;
    for (auto& [n, s] : inputs) ps.add(n, random_uniform(s, rng));
    const Tensor c = random_uniform(std::move(out_shape), rng);
    cases.push_back({std::move(name), [op, c, weighted](Tape& t, ParamStore& p) { return weighted(op(t, p), c); },
                     std::move(ps)});
  };
  auto P = [](Tape& t, ParamStore& p, const char* n) { return t.param(p, n); };

  add_case("add", {{"a", {3, 4}}, {"b", {3, 4}}}, {3, 4},
           [P](Tape& t, ParamStore& p) { return add(P(t, p, "a"), P(t, p, "b")); });
  add_case("sub", {{"a", {3, 4}}, {"b", {3, 4}}}, {3, 4},
           [P](Tape& t, ParamStore& p) { return sub(P(t, p, "a"), P(t, p, "b")); });
  add_case("scale", {{"a", {5}}}, {5}, [P](Tape& t, ParamStore& p) { return scale(P(t, p, "a"), -1.7); });
  add_case("hadamard", {{"a", {3, 4}}, {"b", {3, 4}}}, {3, 4},
           [P](Tape& t, ParamStore& p) { return hadamard(P(t, p, "a"), P(t, p, "b")); });
  add_case("add_bias", {{"x", {3, 4}}, {"b", {4}}}, {3, 4},
           [P](Tape& t, ParamStore& p) { return add_bias(P(t, p, "x"), P(t, p, "b")); });
  add_case("concat", {{"a", {3, 2}}, {"b", {3, 3}}}, {3, 5},
           [P](Tape& t, ParamStore& p) { return concat(P(t, p, "a"), P(t, p, "b")); });
  add_case("slice", {{"a", {3, 6}}}, {3, 3}, [P](Tape& t, ParamStore& p) { return slice(P(t, p, "a"), 2, 5); });
  add_case("relu", {{"a", {4, 5}}}, {4, 5}, [P](Tape& t, ParamStore& p) { return relu(P(t, p, "a")); });
  add_case("tanh", {{"a", {4, 5}}}, {4, 5}, [P](Tape& t, ParamStore& p) { return tanh(P(t, p, "a")); });
  add_case("sigmoid", {{"a", {4, 5}}}, {4, 5}, [P](Tape& t, ParamStore& p) { return sigmoid(P(t, p, "a")); });
  add_case("dropout", {{"a", {4, 5}}}, {4, 5},
           [P](Tape& t, ParamStore& p) { return dropout(P(t, p, "a"), 0.3, 99, Mode::Train); });
  add_case("grad_reverse", {{"a", {2, 3}}}, {2, 3},
           [P](Tape& t, ParamStore& p) { return grad_reverse(P(t, p, "a"), 0.5); });
  cases.back().numeric_scale = -0.5;
  add_case("sum", {{"a", {3, 3}}}, {1}, [P](Tape& t, ParamStore& p) { return sum(P(t, p, "a")); });
  add_case("matmul", {{"a", {3, 4}}, {"b", {4, 2}}}, {3, 2},
           [P](Tape& t, ParamStore& p) { return matmul(P(t, p, "a"), P(t, p, "b")); });
  add_case("linear", {{"x", {3, 4}}, {"w", {2, 4}}, {"b", {2}}}, {3, 2},
           [P](Tape& t, ParamStore& p) { return linear(P(t, p, "x"), P(t, p, "w"), P(t, p, "b")); });
  add_case("softmax", {{"a", {3, 5}}}, {3, 5}, [P](Tape& t, ParamStore& p) { return softmax(P(t, p, "a")); });
  add_case("mse", {{"a", {6}}, {"b", {6}}}, {1},
           [P](Tape& t, ParamStore& p) { return mse(P(t, p, "a"), P(t, p, "b")); });
  add_case("batched_matmul", {{"a", {4, 3}}, {"b", {6, 2}}}, {4, 2},
           [P](Tape& t, ParamStore& p) { return batched_matmul(P(t, p, "a"), P(t, p, "b"), 2); });
  add_case("batched_matmul_nt", {{"a", {4, 3}}, {"b", {6, 3}}}, {4, 3},
           [P](Tape& t, ParamStore& p) { return batched_matmul_nt(P(t, p, "a"), P(t, p, "b"), 2); });
  {
    std::vector<std::uint8_t> rel;
    for (int i = 0; i < 2 * 9; ++i) rel.push_back(static_cast<std::uint8_t>(rng.index(kRelationCount)));
    add_case("relational_aggregate",
             {{"p0", {6, 2}}, {"p1", {6, 2}}, {"p2", {6, 2}}, {"p3", {6, 2}}, {"alpha", {6, 3}}}, {6, 2},
             [P, rel](Tape& t, ParamStore& p) {
               const std::array<Var, 4> proj{P(t, p, "p0"), P(t, p, "p1"), P(t, p, "p2"), P(t, p, "p3")};
               return relational_aggregate(proj, P(t, p, "alpha"), rel, 3);
             });
  }
  add_case("neighbor_mean", {{"a", {4, 3}}}, {4, 3}, [P](Tape& t, ParamStore& p) {
    return neighbor_mean(P(t, p, "a"), {{0, 1}, {0, 1, 2, 3}, {2}, {}});
  });
  add_case("edge_attention", {{"x", {5, 4}}, {"w_att", {4, 4}}}, {5, 5},
           [P](Tape& t, ParamStore& p) { return edge_attention(P(t, p, "x"), P(t, p, "w_att"), 5); });
  {
    ParamStore ps;
    FeatureConfig fc;
    fc.d_raw = 6;
    fc.d_text = 5;
    ps.add("x", random_uniform({3, fc.d_raw}, rng));
    ps.add("text_encoder.w1", random_uniform({fc.d_text, fc.d_raw}, rng));
    ps.add("text_encoder.b1", random_uniform({fc.d_text}, rng));
    ps.add("text_encoder.w2", random_uniform({fc.d_text, fc.d_text}, rng));
    ps.add("text_encoder.b2", random_uniform({fc.d_text}, rng));
    const Tensor c = random_uniform({3, fc.d_text}, rng);
    cases.push_back({"encode_text",
                     [c, weighted](Tape& t, ParamStore& p) {
                       return weighted(encode_text(t.param(p, "x"), t, p), c);
                     },
                     std::move(ps)});
  }
  {
    ParamStore ps;
    const std::size_t in = 4, h = 3;
    ps.add("x", random_uniform({2, in}, rng));
    ps.add("h", random_uniform({2, h}, rng));
    for (const char* g : {"z", "r", "h"}) {
      ps.add(std::string("gru.w_") + g, random_uniform({h, in}, rng));
      ps.add(std::string("gru.u_") + g, random_uniform({h, h}, rng));
      ps.add(std::string("gru.b_") + g, random_uniform({h}, rng));
    }
    const Tensor c = random_uniform({2, h}, rng);
    cases.push_back({"gru_cell",
                     [c, weighted](Tape& t, ParamStore& p) {
                       return weighted(gru_cell(t, p, t.param(p, "x"), t.param(p, "h")), c);
                     },
                     std::move(ps)});
  }
  return cases;
}

/// Small dimensions used for full-stack checks.
inline ModelSpec small_gradcheck_spec() {
  ModelSpec s;
  s.features.d_raw = 8;
  s.features.d_text = 8;
  s.features.d_style = 4;
  s.features.speaker_slots = 6;
  s.model.hidden = 8;
  s.model.attention_dim = 8;
  s.model.gru_hidden = 8;
  return s;
}

/// A few chunks from a short synthetic corpus with the model's style size.
inline std::vector<Chunk> gradcheck_chunks(const FeatureConfig& f, std::uint64_t seed, std::size_t count) {
  SynthConfig sc;
  sc.conversations = 4;
  sc.min_len = 8;
  sc.max_len = 10;
  sc.max_speakers = 3;
  sc.style_dim = f.d_style;
  auto chunks = make_chunks(generate_synthetic(sc, seed), kDefaultWindow);
  Rng rng(hash64(seed, 0x636B73));
  std::vector<Chunk> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(chunks[rng.index(chunks.size())]);
  return out;
}

/// Full-stack loss mse(forward(batch), target) for each variant, at freshly
/// initialized parameters with randomized biases.
inline std::vector<GradCheckCase> model_gradcheck_cases(const ModelSpec& base, std::uint64_t seed) {
  std::vector<GradCheckCase> cases;
  const auto chunks = gradcheck_chunks(base.features, seed, 2);
  auto batch = std::make_shared<ChunkBatch>(make_batch(chunks, base.features));
  for (auto v : kAllVariants) {
    ModelSpec spec = base;
    spec.variant = v;
    ParamStore ps = init_params(spec, hash64(seed, static_cast<std::uint64_t>(v)));
    Rng rng(hash64(seed, 0x62696173 + static_cast<std::uint64_t>(v)));
    for (auto& [name, e] : ps)
      for (auto& x : e.value.data()) if (e.value.rank() == 1) x = rng.uniform(-0.1, 0.1);
    cases.push_back({"model:" + variant_name(v),
                     [spec, batch](Tape& t, ParamStore& p) {
                       const Var pred = forward(t, p, *batch, spec);
                       return mse(pred, t.constant(*batch->target_style));
                     },
                     std::move(ps)});
  }
  return cases;
}

}  // namespace convstyle
