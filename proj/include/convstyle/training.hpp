// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "convstyle/adam.hpp"
#include "convstyle/config.hpp"
#include "convstyle/corpus.hpp"
#include "convstyle/model.hpp"

namespace convstyle {

struct CurvePoint {
  std::size_t iteration = 0;
  double train_mse = 0.0;
  double test_mse = 0.0;
};

struct MetricsReport {
  Variant variant = Variant::Proposed;
  std::uint64_t seed = 0;
  double final_test_mse = 0.0;
  std::vector<CurvePoint> curve;
  std::size_t train_chunks = 0;
  std::size_t test_chunks = 0;
  nlohmann::json config;
  std::optional<double> wall_clock_s;
};

struct TrainResult {
  ParamStore params;
  MetricsReport report;
};

// Stream tags for seed splitting inside one training run.
inline constexpr std::uint64_t kTrainSubsampleStream = 1;
inline constexpr std::uint64_t kTestSubsampleStream = 2;
inline constexpr std::uint64_t kBatchStream = 3;
inline constexpr std::uint64_t kDropoutStream = 4;
inline constexpr std::uint64_t kSplitStream = 5;

inline constexpr std::size_t kEvalBatch = 256;

inline void require_target_styles(std::span<const Chunk> chunks) {
  for (const auto& c : chunks)
    if (!c.target.style)
      throw MissingModalityError("chunk target " + c.conversation_id + "#" +
                                 std::to_string(c.target.index) + " has no style vector");
}

inline void require_context_styles(std::span<const Chunk> chunks) {
  for (const auto& c : chunks)
    for (const auto& u : c.context)
      if (!u.style)
        throw MissingModalityError("context utterance " + u.conversation_id + "#" +
                                   std::to_string(u.index) + " has no style vector");
}

/// Per-chunk MSE of the model's predictions, in input order.
inline std::vector<double> chunk_errors(std::span<const Chunk* const> chunks, ParamStore& params,
                                        const ModelSpec& spec) {
  std::vector<double> out;
  out.reserve(chunks.size());
  for (std::size_t begin = 0; begin < chunks.size(); begin += kEvalBatch) {
    const std::size_t end = std::min(chunks.size(), begin + kEvalBatch);
    const ChunkBatch b = make_batch(chunks.subspan(begin, end - begin), spec.features);
    if (!b.target_style) throw MissingModalityError("evaluation chunks need target style vectors");
    Tape tape(false);
    const Tensor pred = forward(tape, params, b, spec).value();
    const Tensor& y = *b.target_style;
    for (std::size_t r = 0; r < b.size; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < pred.cols(); ++c) {
        const double d = pred(r, c) - y(r, c);
        acc += d * d;
      }
      out.push_back(acc / static_cast<double>(pred.cols()));
    }
  }
  return out;
}

inline double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

/// Mean over chunks of mse(prediction, target style). Parameters are not
/// modified.
inline double evaluate(std::span<const Chunk* const> chunks, ParamStore& params, const ModelSpec& spec) {
  if (chunks.empty()) throw ValidationError("cannot evaluate on an empty chunk list");
  return mean_of(chunk_errors(chunks, params, spec));
}

inline double evaluate(const std::vector<Chunk>& chunks, ParamStore& params, const ModelSpec& spec) {
  std::vector<const Chunk*> ptrs;
  for (const auto& c : chunks) ptrs.push_back(&c);
  return evaluate(std::span<const Chunk* const>(ptrs), params, spec);
}

// Reference predictors for the signal floor.

inline double uniform_predictor_mse(const std::vector<Chunk>& chunks) {
  if (chunks.empty()) throw ValidationError("empty chunk list");
  require_target_styles(chunks);
  std::vector<double> errs;
  for (const auto& c : chunks) {
    const auto& y = *c.target.style;
    const double u = 1.0 / static_cast<double>(y.size());
    double acc = 0.0;
    for (double v : y) acc += (v - u) * (v - u);
    errs.push_back(acc / static_cast<double>(y.size()));
  }
  return mean_of(errs);
}

inline double copy_last_style_mse(const std::vector<Chunk>& chunks) {
  if (chunks.empty()) throw ValidationError("empty chunk list");
  require_target_styles(chunks);
  require_context_styles(chunks);
  std::vector<double> errs;
  for (const auto& c : chunks) {
    const auto& y = *c.target.style;
    const auto& last = *c.context.back().style;
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += (y[i] - last[i]) * (y[i] - last[i]);
    errs.push_back(acc / static_cast<double>(y.size()));
  }
  return mean_of(errs);
}

/// Up to `k` distinct indices of [0, n), chosen by a seeded shuffle and
/// returned in ascending order.
inline std::vector<std::size_t> fixed_subsample(std::size_t n, std::size_t k, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (k < n) {
    Rng rng(seed);
    rng.shuffle(idx);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

/// Mini-batch training with batches sampled with replacement; deterministic
/// in (chunks, cfg). A zero learning rate skips the optimizer step.
inline TrainResult train(const std::vector<Chunk>& train_chunks, const std::vector<Chunk>& test_chunks,
                         const TrainConfig& cfg) {
  validate(cfg);
  if (train_chunks.empty()) throw ValidationError("training needs at least one chunk");
  if (test_chunks.empty()) throw ValidationError("training needs at least one test chunk");
  require_target_styles(train_chunks);
  require_target_styles(test_chunks);
  if (uses_context_style(cfg.spec.variant)) {
    require_context_styles(train_chunks);
    require_context_styles(test_chunks);
  }
  const auto started = std::chrono::steady_clock::now();

  TrainResult res{init_params(cfg.spec, cfg.seed), {}};
  ParamStore& params = res.params;
  AdamState adam;

  auto pick = [](const std::vector<Chunk>& all, const std::vector<std::size_t>& idx) {
    std::vector<const Chunk*> out;
    for (auto i : idx) out.push_back(&all[i]);
    return out;
  };
  const auto train_eval = pick(train_chunks, fixed_subsample(train_chunks.size(), cfg.eval_chunks,
                                                             hash64(cfg.seed, kTrainSubsampleStream)));
  const auto test_eval = pick(test_chunks, fixed_subsample(test_chunks.size(), cfg.eval_chunks,
                                                           hash64(cfg.seed, kTestSubsampleStream)));

  MetricsReport& rep = res.report;
  rep.variant = cfg.spec.variant;
  rep.seed = cfg.seed;
  rep.train_chunks = train_chunks.size();
  rep.test_chunks = test_chunks.size();
  rep.config = train_config_json(cfg);

  Rng batch_rng(hash64(cfg.seed, kBatchStream));
  std::vector<const Chunk*> batch(cfg.batch_size);
  for (std::size_t it = 0;; ++it) {
    if (it % cfg.eval_every == 0)
      rep.curve.push_back({it, evaluate(train_eval, params, cfg.spec), evaluate(test_eval, params, cfg.spec)});
    if (it == cfg.iterations) break;

    for (auto& p : batch) p = &train_chunks[batch_rng.index(train_chunks.size())];
    const ChunkBatch b = make_batch(std::span<const Chunk* const>(batch), cfg.spec.features);
    Tape tape;
    const ForwardOptions opt{Mode::Train, hash64(hash64(cfg.seed, kDropoutStream), it)};
    const Var pred = forward(tape, params, b, cfg.spec, opt);
    const Var loss = mse(pred, tape.constant(*b.target_style));
    if (!std::isfinite(loss.value().item()))
      throw NumericError("non-finite training loss at iteration " + std::to_string(it));
    tape.backward(loss);
    if (cfg.learning_rate > 0.0)
      adam_step(params, adam, cfg.adam());
    else
      params.zero_grad();
  }
  rep.final_test_mse = evaluate(test_chunks, params, cfg.spec);
  if (!std::isfinite(rep.final_test_mse)) throw NumericError("non-finite test MSE after training");
  if (cfg.record_wall_clock)
    rep.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return res;
}

/// Seeded conversation-level split. Both halves keep corpus order; the test
/// half has round(test_fraction * n) conversations, at least one.
inline std::pair<std::vector<Conversation>, std::vector<Conversation>> split_conversations(
    const std::vector<Conversation>& convs, double test_fraction, std::uint64_t seed) {
  if (convs.size() < 2) throw ValidationError("a train/test split needs at least two conversations");
  std::vector<std::size_t> order(convs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(hash64(seed, kSplitStream));
  rng.shuffle(order);
  auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(convs.size())));
  n_test = std::clamp<std::size_t>(n_test, 1, convs.size() - 1);
  std::vector<bool> is_test(convs.size(), false);
  for (std::size_t i = 0; i < n_test; ++i) is_test[order[i]] = true;
  std::pair<std::vector<Conversation>, std::vector<Conversation>> out;
  for (std::size_t i = 0; i < convs.size(); ++i) (is_test[i] ? out.second : out.first).push_back(convs[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Variant comparison
// ---------------------------------------------------------------------------

struct VariantSummary {
  Variant variant = Variant::Proposed;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation, 0 for one seed
  std::vector<double> per_seed;
};

struct SeedReference {
  std::uint64_t seed = 0;
  std::size_t train_chunks = 0;
  std::size_t test_chunks = 0;
  double uniform_mse = 0.0;
  std::optional<double> copy_last_mse;
};

struct ComparisonReport {
  std::vector<std::uint64_t> seeds;
  std::vector<MetricsReport> runs;        // seed-major, variants in reporting order
  std::vector<VariantSummary> summary;    // reporting order
  std::vector<SeedReference> references;  // per seed
  std::vector<Variant> ordering;          // highest mean MSE first
};

inline VariantSummary summarize_runs(Variant v, std::vector<double> values) {
  VariantSummary s{v, mean_of(values), 0.0, std::move(values)};
  if (s.per_seed.size() > 1) {
    double acc = 0.0;
    for (double x : s.per_seed) acc += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(acc / static_cast<double>(s.per_seed.size() - 1));
  }
  return s;
}

/// Train every variant on the same per-seed split and summarize test MSE.
/// Runs may execute on up to `threads` workers; results do not depend on it.
inline ComparisonReport compare_variants(const std::vector<Conversation>& corpus, const TrainConfig& cfg,
                                         const std::vector<std::uint64_t>& seeds, std::size_t threads = 1) {
  if (seeds.empty()) throw ConfigError("compare needs at least one seed");
  validate(cfg);
  ComparisonReport rep;
  rep.seeds = seeds;

  struct SeedData {
    std::vector<Chunk> train, test;
  };
  std::vector<SeedData> data;
  for (auto seed : seeds) {
    auto [tr, te] = split_conversations(corpus, cfg.test_fraction, seed);
    SeedData d{make_chunks(tr, cfg.window), make_chunks(te, cfg.window)};
    SeedReference ref{seed, d.train.size(), d.test.size(), 0.0, std::nullopt};
    if (!d.test.empty()) {
      ref.uniform_mse = uniform_predictor_mse(d.test);
      bool ctx_styles = true;
      for (const auto& c : d.test)
        for (const auto& u : c.context) ctx_styles = ctx_styles && u.style.has_value();
      if (ctx_styles) ref.copy_last_mse = copy_last_style_mse(d.test);
    }
    rep.references.push_back(ref);
    data.push_back(std::move(d));
  }

  const std::size_t jobs = seeds.size() * kAllVariants.size();
  rep.runs.resize(jobs);
  std::vector<std::exception_ptr> errors(jobs);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t j; (j = next.fetch_add(1)) < jobs;) {
      try {
        TrainConfig c = cfg;
        c.seed = seeds[j / kAllVariants.size()];
        c.spec.variant = kAllVariants[j % kAllVariants.size()];
        const auto& d = data[j / kAllVariants.size()];
        rep.runs[j] = train(d.train, d.test, c).report;
      } catch (...) {
        errors[j] = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(threads, 1, jobs);
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  for (std::size_t v = 0; v < kAllVariants.size(); ++v) {
    std::vector<double> values;
    for (std::size_t s = 0; s < seeds.size(); ++s) values.push_back(rep.runs[s * kAllVariants.size() + v].final_test_mse);
    rep.summary.push_back(summarize_runs(kAllVariants[v], std::move(values)));
  }
  std::vector<VariantSummary> sorted = rep.summary;
  std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.mean > b.mean; });
  for (const auto& s : sorted) rep.ordering.push_back(s.variant);
  return rep;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& p : r.curve)
    curve.push_back({{"iter", p.iteration}, {"train_mse", p.train_mse}, {"test_mse", p.test_mse}});
  return {{"variant", variant_name(r.variant)},
          {"seed", r.seed},
          {"final_test_mse", r.final_test_mse},
          {"curve", std::move(curve)},
          {"config", r.config},
          {"train_chunks", r.train_chunks},
          {"test_chunks", r.test_chunks},
          {"wall_clock_s", r.wall_clock_s ? nlohmann::json(*r.wall_clock_s) : nlohmann::json(nullptr)}};
}

inline nlohmann::json to_json(const ComparisonReport& r) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& m : r.runs) runs.push_back(to_json(m));
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& s : r.summary)
    summary.push_back({{"variant", variant_name(s.variant)},
                       {"mean_test_mse", s.mean},
                       {"std_test_mse", s.stddev},
                       {"per_seed", s.per_seed}});
  nlohmann::json refs = nlohmann::json::array();
  for (const auto& ref : r.references)
    refs.push_back({{"seed", ref.seed},
                    {"train_chunks", ref.train_chunks},
                    {"test_chunks", ref.test_chunks},
                    {"uniform_mse", ref.uniform_mse},
                    {"copy_last_mse", ref.copy_last_mse ? nlohmann::json(*ref.copy_last_mse) : nlohmann::json(nullptr)}});
  nlohmann::json ordering = nlohmann::json::array();
  for (auto v : r.ordering) ordering.push_back(variant_name(v));
  return {{"seeds", r.seeds}, {"runs", std::move(runs)}, {"summary", std::move(summary)},
          {"references", std::move(refs)}, {"ordering", std::move(ordering)}};
}

}  // namespace convstyle
