// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "convstyle/gradcheck.hpp"
#include "convstyle/gradcheck_suite.hpp"
#include "convstyle/model.hpp"

using namespace convstyle;

namespace {

ModelSpec small_spec(Variant v) {
  ModelSpec s = small_gradcheck_spec();
  s.variant = v;
  return s;
}

void randomize(ParamStore& ps, std::uint64_t seed, double lo = -0.5, double hi = 0.5) {
  Rng rng(seed);
  for (auto& [_, e] : ps)
    for (auto& v : e.value.data()) v = rng.uniform(lo, hi);
}

std::vector<Chunk> sample_chunks(const FeatureConfig& f, std::uint64_t seed, std::size_t count) {
  SynthConfig sc;
  sc.conversations = 20;
  sc.style_dim = f.d_style;
  sc.max_speakers = 4;
  auto chunks = make_chunks(generate_synthetic(sc, seed), kDefaultWindow);
  if (chunks.size() > count) chunks.resize(count);
  return chunks;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// y = W x for W [rows x cols].
std::vector<double> matvec(const Tensor& w, std::span<const double> x) {
  std::vector<double> y(w.rows());
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) y[i] += w(i, j) * x[j];
  return y;
}

void expect_simplex(const Tensor& p, double tol = 1e-9) {
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double s = 0.0;
    for (double v : p.row(r)) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, tol);
  }
}

struct Stage {
  ModelSpec spec = small_spec(Variant::Proposed);
  ParamStore ps;
  ConversationGraph g;
  Tensor x;
  Stage(std::uint64_t seed, std::vector<std::size_t> speakers = {0, 1, 0, 2, 1}) {
    ps = init_params(spec, seed);
    randomize(ps, seed + 100);
    g = build_graph_from_speakers(speakers);
    Rng rng(seed + 200);
    x = random_uniform({5, spec.features.node_dim()}, rng);
  }
};

}  // namespace

TEST(Variants, ExactlyFourWithStableNames) {
  ASSERT_EQ(kAllVariants.size(), 4u);
  EXPECT_EQ(kAllVariants[0], Variant::BaselineGRU);
  EXPECT_EQ(kAllVariants[3], Variant::Proposed);
  for (auto v : kAllVariants) EXPECT_EQ(parse_variant(variant_name(v)), v);
  EXPECT_THROW(parse_variant("Transformer"), ConfigError);
}

TEST(Params, GraphInventoryShapes) {
  ModelSpec s;
  const auto& f = s.features;
  const std::size_t nd = f.d_text + f.d_style, h = s.model.hidden, dq = f.d_text + f.speaker_slots,
                    dv = nd + h;
  const ParamStore ps = init_params(s, 1);
  for (int r = 0; r < 4; ++r) EXPECT_EQ(ps.value("graph.w_rel" + std::to_string(r)).shape(), (Shape{h, nd}));
  EXPECT_EQ(ps.value("graph.w_att").shape(), (Shape{nd, nd}));
  EXPECT_EQ(ps.value("graph.b1").shape(), (Shape{h}));
  EXPECT_EQ(ps.value("graph.w_g").shape(), (Shape{h, h}));
  EXPECT_EQ(ps.value("graph.w_self").shape(), (Shape{h, h}));
  EXPECT_EQ(ps.value("graph.b2").shape(), (Shape{h}));
  EXPECT_EQ(ps.value("attention.w_q").shape(), (Shape{s.model.attention_dim, dq}));
  EXPECT_EQ(ps.value("attention.w_k").shape(), (Shape{s.model.attention_dim, dv}));
  EXPECT_EQ(ps.value("output.w").shape(), (Shape{f.d_style, dq + dv}));
  EXPECT_EQ(ps.value("output.b").shape(), (Shape{f.d_style}));
  EXPECT_EQ(ps.value("text_encoder.w1").shape(), (Shape{f.d_text, f.d_raw}));
  EXPECT_FALSE(ps.contains("gru.w_z"));
}

TEST(Params, BaselineInventoryShapes) {
  ModelSpec s;
  s.variant = Variant::BaselineGRU;
  EXPECT_EQ(s.model.gru_hidden, 512u);
  const auto& f = s.features;
  const std::size_t h = s.model.gru_hidden, in = f.d_raw + f.speaker_slots;
  const ParamStore ps = init_params(s, 1);
  for (const char* g : {"z", "r", "h"}) {
    EXPECT_EQ(ps.value(std::string("gru.w_") + g).shape(), (Shape{h, in}));
    EXPECT_EQ(ps.value(std::string("gru.u_") + g).shape(), (Shape{h, h}));
    EXPECT_EQ(ps.value(std::string("gru.b_") + g).shape(), (Shape{h}));
  }
  EXPECT_EQ(ps.value("output.w").shape(), (Shape{f.d_style, h + f.d_text + f.speaker_slots}));
  EXPECT_FALSE(ps.contains("graph.w_att"));
}

TEST(Params, InitIsDeterministicAndSharedAcrossVariants) {
  ModelSpec a = small_spec(Variant::Proposed), b = small_spec(Variant::GraphTextRaw);
  const ParamStore pa = init_params(a, 9), pb = init_params(b, 9), pc = init_params(a, 9);
  for (const auto& [name, e] : pa) {
    EXPECT_EQ(e.value, pc.value(name));
    EXPECT_EQ(e.value, pb.value(name)) << name;
  }
  ModelSpec bad = small_spec(Variant::GraphTextRaw);
  bad.features.d_raw = bad.features.d_text + 1;
  EXPECT_THROW(init_params(bad, 1), ConfigError);
  ModelSpec drop = small_spec(Variant::Proposed);
  drop.model.dropout = 1.0;
  EXPECT_THROW(init_params(drop, 1), ConfigError);
}

TEST(Rgcn, ZeroRelationWeightsGiveReluBias) {
  Stage s(1);
  for (int r = 0; r < 4; ++r) s.ps.value("graph.w_rel" + std::to_string(r)).fill(0.0);
  Tape t;
  const Var alpha = edge_attention(s.g, t.constant(s.x), t.param(s.ps, "graph.w_att"));
  const Tensor h1 = rgcn_layer(t, s.ps, s.g, t.constant(s.x), alpha).value();
  const Tensor& b1 = s.ps.value("graph.b1");
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t k = 0; k < b1.size(); ++k) EXPECT_EQ(h1(r, k), std::max(0.0, b1[k]));
}

TEST(Rgcn, SymmetricInputsGiveEqualRows) {
  Stage s(2, {0, 0, 0, 0, 0});
  for (int r = 1; r < 4; ++r) s.ps.set("graph.w_rel" + std::to_string(r), s.ps.value("graph.w_rel0"));
  for (std::size_t r = 1; r < 5; ++r)
    for (std::size_t c = 0; c < s.x.cols(); ++c) s.x(r, c) = s.x(0, c);
  Tape t;
  const Var alpha = edge_attention(s.g, t.constant(s.x), t.param(s.ps, "graph.w_att"));
  const Tensor h1 = rgcn_layer(t, s.ps, s.g, t.constant(s.x), alpha).value();
  for (std::size_t r = 1; r < 5; ++r)
    for (std::size_t c = 0; c < h1.cols(); ++c) EXPECT_NEAR(h1(r, c), h1(0, c), 1e-14);
}

TEST(Rgcn, MatchesEdgeLoopOracle) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng sp(seed);
    std::vector<std::size_t> spk;
    for (int i = 0; i < 5; ++i) spk.push_back(sp.index(3));
    Stage s(seed, spk);
    Tape t;
    const Tensor alpha = edge_attention(s.g, t.constant(s.x), t.param(s.ps, "graph.w_att")).value();
    const Tensor h1 = rgcn_layer(t, s.ps, s.g, t.constant(s.x), t.constant(alpha)).value();
    const std::size_t H = s.spec.model.hidden;
    std::vector<std::vector<double>> acc(5, std::vector<double>(H, 0.0));
    for (const auto& e : s.g.edges) {
      const auto wx = matvec(s.ps.value("graph.w_rel" + std::to_string(static_cast<int>(e.relation))), s.x.row(e.src));
      for (std::size_t k = 0; k < H; ++k) acc[e.dst][k] += alpha(e.dst, e.src) * wx[k];
    }
    for (std::size_t d = 0; d < 5; ++d)
      for (std::size_t k = 0; k < H; ++k)
        EXPECT_NEAR(h1(d, k), std::max(0.0, acc[d][k] + s.ps.value("graph.b1")[k]), 1e-12);
  }
}

TEST(Rgcn, DimensionMismatch) {
  Stage s(3);
  Tape t;
  const Var alpha = edge_attention(s.g, t.constant(s.x), t.param(s.ps, "graph.w_att"));
  EXPECT_THROW(rgcn_layer(t, s.ps, s.g, t.constant(Tensor({5, s.x.cols() + 1})), alpha), DimensionError);
}

TEST(GraphLayer, IdentitySelfWeightPassesNonNegativeInput) {
  Stage s(4);
  const std::size_t H = s.spec.model.hidden;
  s.ps.value("graph.w_g").fill(0.0);
  s.ps.set("graph.w_self", Tensor::identity(H));
  s.ps.value("graph.b2").fill(0.0);
  Rng rng(4);
  const Tensor h1 = random_uniform({5, H}, rng, 0.0, 2.0);
  Tape t;
  EXPECT_EQ(graph_layer(t, s.ps, s.g, t.constant(h1)).value(), h1);
}

TEST(GraphLayer, IdenticalRowsStayIdentical) {
  Stage s(5);
  const std::size_t H = s.spec.model.hidden;
  Rng rng(5);
  const Tensor row = random_uniform({H}, rng);
  Tensor h1({5, H});
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t k = 0; k < H; ++k) h1(r, k) = row[k];
  Tape t;
  const Tensor h2 = graph_layer(t, s.ps, s.g, t.constant(h1)).value();
  for (std::size_t r = 1; r < 5; ++r)
    for (std::size_t k = 0; k < H; ++k) EXPECT_NEAR(h2(r, k), h2(0, k), 1e-14);
}

TEST(GraphLayer, MatchesLoopOracle) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Stage s(seed);
    const std::size_t H = s.spec.model.hidden;
    Rng rng(seed + 7);
    const Tensor h1 = random_uniform({5, H}, rng);
    Tape t;
    const Tensor h2 = graph_layer(t, s.ps, s.g, t.constant(h1)).value();
    for (std::size_t d = 0; d < 5; ++d) {
      std::vector<double> sum(H, 0.0);
      for (std::size_t src = 0; src < 5; ++src) {
        const auto v = matvec(s.ps.value("graph.w_g"), h1.row(src));
        for (std::size_t k = 0; k < H; ++k) sum[k] += v[k];
      }
      const auto self = matvec(s.ps.value("graph.w_self"), h1.row(d));
      for (std::size_t k = 0; k < H; ++k)
        EXPECT_NEAR(h2(d, k), std::max(0.0, sum[k] / 5.0 + self[k] + s.ps.value("graph.b2")[k]), 1e-12);
    }
  }
}

TEST(Summarize, IdenticalValuesReturnThatRow) {
  Stage s(6);
  const std::size_t H = s.spec.model.hidden;
  Rng rng(6);
  const Tensor xr = random_uniform({s.x.cols()}, rng), hr = random_uniform({H}, rng);
  Tensor x({5, s.x.cols()}), h2({5, H});
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t k = 0; k < xr.size(); ++k) x(r, k) = xr[k];
    for (std::size_t k = 0; k < H; ++k) h2(r, k) = hr[k];
  }
  Tape t;
  const Tensor q = random_uniform({1, s.spec.features.query_dim()}, rng);
  const Tensor out = summarize(t, s.ps, t.constant(q), t.constant(x), t.constant(h2), 5).value();
  for (std::size_t k = 0; k < xr.size(); ++k) EXPECT_NEAR(out(0, k), xr[k], 1e-14);
  for (std::size_t k = 0; k < H; ++k) EXPECT_NEAR(out(0, xr.size() + k), hr[k], 1e-14);
}

TEST(Summarize, ZeroProjectionGivesMean) {
  for (const char* zeroed : {"attention.w_q", "attention.w_k"}) {
    Stage s(7);
    s.ps.value(zeroed).fill(0.0);
    const std::size_t H = s.spec.model.hidden;
    Rng rng(7);
    const Tensor h2 = random_uniform({5, H}, rng);
    const Tensor q = random_uniform({1, s.spec.features.query_dim()}, rng);
    Tape t;
    const Tensor out = summarize(t, s.ps, t.constant(q), t.constant(s.x), t.constant(h2), 5).value();
    for (std::size_t k = 0; k < s.x.cols() + H; ++k) {
      double m = 0.0;
      for (std::size_t r = 0; r < 5; ++r) m += k < s.x.cols() ? s.x(r, k) : h2(r, k - s.x.cols());
      EXPECT_NEAR(out(0, k), m / 5.0, 1e-14);
    }
  }
}

TEST(Summarize, MatchesScoreSoftmaxOracle) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Stage s(seed);
    const std::size_t H = s.spec.model.hidden, da = s.spec.model.attention_dim;
    Rng rng(seed + 11);
    const Tensor h2 = random_uniform({5, H}, rng);
    const Tensor q = random_uniform({1, s.spec.features.query_dim()}, rng, -2, 2);
    Tape t;
    const Tensor out = summarize(t, s.ps, t.constant(q), t.constant(s.x), t.constant(h2), 5).value();
    std::vector<std::vector<double>> v(5);
    for (std::size_t r = 0; r < 5; ++r) {
      v[r].assign(s.x.row(r).begin(), s.x.row(r).end());
      v[r].insert(v[r].end(), h2.row(r).begin(), h2.row(r).end());
    }
    const auto qp = matvec(s.ps.value("attention.w_q"), q.row(0));
    double sc[5], mx = -1e300, z = 0.0;
    for (std::size_t r = 0; r < 5; ++r) {
      sc[r] = dot(qp, matvec(s.ps.value("attention.w_k"), v[r])) / std::sqrt(static_cast<double>(da));
      mx = std::max(mx, sc[r]);
    }
    for (double x : sc) z += std::exp(x - mx);
    for (std::size_t k = 0; k < v[0].size(); ++k) {
      double want = 0.0;
      for (std::size_t r = 0; r < 5; ++r) want += std::exp(sc[r] - mx) / z * v[r][k];
      EXPECT_NEAR(out(0, k), want, 1e-12);
    }
  }
}

TEST(Summarize, DimensionMismatch) {
  Stage s(8);
  Tape t;
  const Tensor q({2, s.spec.features.query_dim()});
  EXPECT_THROW(summarize(t, s.ps, t.constant(q), t.constant(s.x), t.constant(Tensor({5, s.spec.model.hidden})), 5),
               DimensionError);
}

TEST(PredictStyle, ZeroProjectionIsUniform) {
  Stage s(9);
  s.ps.value("output.w").fill(0.0);
  s.ps.value("output.b").fill(0.0);
  Rng rng(9);
  Tape t;
  const Tensor p = predict_style(t, s.ps, t.constant(random_uniform({1, s.spec.features.query_dim()}, rng)),
                                 t.constant(random_uniform({1, s.spec.value_dim()}, rng)))
                       .value();
  for (double v : p.data()) EXPECT_DOUBLE_EQ(v, 1.0 / static_cast<double>(s.spec.features.d_style));
}

TEST(Gru, ZeroIsFixedPoint) {
  ModelSpec spec = small_spec(Variant::BaselineGRU);
  ParamStore ps = init_params(spec, 1);
  for (auto& [_, e] : ps) e.value.fill(0.0);
  Rng rng(1);
  Tape t;
  const Tensor h = gru_cell(t, ps, t.constant(random_uniform({3, 14}, rng)), t.constant(Tensor({3, 8}))).value();
  for (double v : h.data()) EXPECT_EQ(v, 0.0);
}

TEST(Gru, SaturatedUpdateGateKeepsState) {
  ModelSpec spec = small_spec(Variant::BaselineGRU);
  ParamStore ps = init_params(spec, 2);
  randomize(ps, 2, -0.1, 0.1);
  ps.value("gru.b_z").fill(-50.0);
  Rng rng(2);
  const Tensor h = random_uniform({3, 8}, rng);
  Tape t;
  const Tensor out = gru_cell(t, ps, t.constant(random_uniform({3, 14}, rng)), t.constant(h)).value();
  for (std::size_t i = 0; i < h.data().size(); ++i) EXPECT_NEAR(out.data()[i], h.data()[i], 1e-9);
}

TEST(Gru, MatchesEquationOracle) {
  ModelSpec spec = small_spec(Variant::BaselineGRU);
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    ParamStore ps = init_params(spec, seed);
    randomize(ps, seed, -1.0, 1.0);
    Rng rng(seed + 3);
    const Tensor x = random_uniform({2, 14}, rng), h = random_uniform({2, 8}, rng);
    Tape t;
    const Tensor out = gru_cell(t, ps, t.constant(x), t.constant(h)).value();
    auto sig = [](double a) { return 1.0 / (1.0 + std::exp(-a)); };
    for (std::size_t b = 0; b < 2; ++b) {
      auto gate = [&](const char* g, std::span<const double> hin) {
        const auto wx = matvec(ps.value(std::string("gru.w_") + g), x.row(b));
        const auto uh = matvec(ps.value(std::string("gru.u_") + g), hin);
        std::vector<double> s(8);
        for (std::size_t k = 0; k < 8; ++k) s[k] = wx[k] + uh[k] + ps.value(std::string("gru.b_") + g)[k];
        return s;
      };
      auto z = gate("z", h.row(b)), r = gate("r", h.row(b));
      std::vector<double> rh(8);
      for (std::size_t k = 0; k < 8; ++k) {
        z[k] = sig(z[k]);
        rh[k] = sig(r[k]) * h(b, k);
      }
      const auto cand = gate("h", rh);
      for (std::size_t k = 0; k < 8; ++k)
        EXPECT_NEAR(out(b, k), (1.0 - z[k]) * h(b, k) + z[k] * std::tanh(cand[k]), 1e-12);
    }
  }
}

TEST(Forward, EveryVariantEmitsSimplex) {
  for (auto v : kAllVariants) {
    const ModelSpec spec = small_spec(v);
    ParamStore ps = init_params(spec, 3);
    randomize(ps, 4, -1.0, 1.0);
    const auto chunks = sample_chunks(spec.features, 5, 64);
    Tape t(false);
    const Tensor p = forward(t, ps, make_batch(chunks, spec.features), spec).value();
    ASSERT_EQ(p.shape(), (Shape{chunks.size(), spec.features.d_style}));
    expect_simplex(p);
  }
}

TEST(Forward, BatchMatchesSingleChunkAndIsDeterministic) {
  for (auto v : kAllVariants) {
    const ModelSpec spec = small_spec(v);
    ParamStore ps = init_params(spec, 6);
    randomize(ps, 7);
    const auto chunks = sample_chunks(spec.features, 8, 16);
    Tape t(false);
    const Tensor all = forward(t, ps, make_batch(chunks, spec.features), spec).value();
    for (std::size_t c = 0; c < chunks.size(); ++c) {
      const Tensor one = predict(chunks[c], ps, spec);
      EXPECT_EQ(one, predict(chunks[c], ps, spec));
      for (std::size_t k = 0; k < one.size(); ++k) EXPECT_NEAR(all(c, k), one[k], 1e-14) << variant_name(v);
    }
  }
}

TEST(Forward, NoConversationIdDependence) {
  for (auto v : kAllVariants) {
    const ModelSpec spec = small_spec(v);
    ParamStore ps = init_params(spec, 9);
    auto chunks = sample_chunks(spec.features, 10, 10);
    for (auto c : chunks) {
      const Tensor a = predict(c, ps, spec);
      c.conversation_id = "renamed-" + c.conversation_id;
      for (auto& u : c.context) u.conversation_id = c.conversation_id;
      c.target.conversation_id = c.conversation_id;
      EXPECT_EQ(predict(c, ps, spec), a);
    }
  }
}

TEST(Forward, TextOnlyVariantsIgnoreStyleFields) {
  for (auto v : {Variant::GraphTextEncoded, Variant::GraphTextRaw, Variant::BaselineGRU}) {
    const ModelSpec spec = small_spec(v);
    ParamStore ps = init_params(spec, 11);
    randomize(ps, 12);
    Rng rng(13);
    for (auto c : sample_chunks(spec.features, 14, 20)) {
      const Tensor a = predict(c, ps, spec);
      for (auto& u : c.context) u.style = rng.dirichlet_ones(spec.features.d_style);
      EXPECT_EQ(predict(c, ps, spec), a);
      for (auto& u : c.context) u.style.reset();
      EXPECT_EQ(predict(c, ps, spec), a);
    }
  }
}

TEST(Forward, ProposedNeedsContextStyle) {
  const ModelSpec spec = small_spec(Variant::Proposed);
  ParamStore ps = init_params(spec, 1);
  auto c = sample_chunks(spec.features, 2, 1)[0];
  c.context[3].style.reset();
  EXPECT_THROW(predict(c, ps, spec), MissingModalityError);
}

TEST(Forward, ReversingContextChangesOutput) {
  const ModelSpec spec = small_spec(Variant::Proposed);
  ParamStore ps = init_params(spec, 15);
  randomize(ps, 16);
  auto chunks = sample_chunks(spec.features, 17, 100);
  ASSERT_EQ(chunks.size(), 100u);
  int differ = 0;
  for (auto c : chunks) {
    const Tensor a = predict(c, ps, spec);
    std::reverse(c.context.begin(), c.context.end());
    if (!(predict(c, ps, spec) == a)) ++differ;
  }
  EXPECT_GE(differ, 99);
}

TEST(Forward, BaselineWithZeroGruIsContextBlind) {
  const ModelSpec spec = small_spec(Variant::BaselineGRU);
  ParamStore ps = init_params(spec, 18);
  randomize(ps, 19);
  for (auto& [name, e] : ps)
    if (name.rfind("gru.", 0) == 0) e.value.fill(0.0);
  auto chunks = sample_chunks(spec.features, 20, 10);
  for (std::size_t i = 1; i < chunks.size(); ++i) {
    Chunk mixed = chunks[i];
    mixed.target = chunks[0].target;
    // Same target speaker slot is required for an identical query.
    const auto s0 = speaker_slots(chunks[0], spec.features.speaker_slots).back();
    if (speaker_slots(mixed, spec.features.speaker_slots).back() != s0) continue;
    EXPECT_EQ(predict(mixed, ps, spec), predict(chunks[0], ps, spec));
  }
}

TEST(Forward, DropoutOnlyInTraining) {
  ModelSpec spec = small_spec(Variant::Proposed);
  spec.model.dropout = 0.5;
  ParamStore ps = init_params(spec, 21);
  randomize(ps, 22);
  const auto chunks = sample_chunks(spec.features, 23, 8);
  const auto b = make_batch(chunks, spec.features);
  Tape t1(false), t2(false), t3(false);
  const Tensor eval = forward(t1, ps, b, spec).value();
  const Tensor train = forward(t2, ps, b, spec, {Mode::Train, 5}).value();
  EXPECT_EQ(train, forward(t3, ps, b, spec, {Mode::Train, 5}).value());
  EXPECT_FALSE(train == eval);
  expect_simplex(train);
}

TEST(Forward, FullStackGradientsAtSmallDims) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed)
    for (const auto& c : model_gradcheck_cases(small_gradcheck_spec(), seed)) {
      const auto r = run_gradcheck_case(c, 1e-5);
      EXPECT_LT(r.max_rel_error, 1e-4) << c.name << " seed " << seed << " " << r.worst_param;
    }
}
