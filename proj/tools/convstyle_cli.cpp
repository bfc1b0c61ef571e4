// SPDX-License-Identifier: Apache-2.0
// convstyle: generate, inspect, train, evaluate and compare conversational
// style predictors.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "convstyle/convstyle.hpp"

namespace cs = convstyle;
using nlohmann::json;

namespace {

cs::RunConfig config_from(const std::string& path) {
  return path.empty() ? cs::RunConfig{} : cs::load_config(path);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw cs::IoError("cannot write " + path);
  out << text;
  if (!out) throw cs::IoError("write failed: " + path);
}

// Corpora without styles pass; otherwise the style size must match the model.
void check_style_dim(const std::vector<cs::Conversation>& corpus, const cs::FeatureConfig& f) {
  const auto d = cs::corpus_style_dim(corpus);
  if (d && *d != f.d_style)
    throw cs::ConfigError("corpus has " + std::to_string(*d) + " style tokens, model expects features.d_style=" +
                          std::to_string(f.d_style));
}

std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const auto dots = item.find("..");
      if (dots != std::string::npos) {
        const auto lo = std::stoull(item.substr(0, dots));
        const auto hi = std::stoull(item.substr(dots + 2), &used);
        if (used != item.size() - dots - 2 || lo > hi) throw std::invalid_argument(item);
        for (auto x = lo; x <= hi; ++x) seeds.push_back(x);
      } else {
        seeds.push_back(std::stoull(item, &used));
        if (used != item.size()) throw std::invalid_argument(item);
      }
    } catch (const std::logic_error&) {
      throw cs::ConfigError("--seeds: cannot parse '" + item + "' (use e.g. 1,2,3 or 1..5)");
    }
  }
  if (seeds.empty()) throw cs::ConfigError("--seeds: empty list");
  return seeds;
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::string config, out;
  std::uint64_t seed = 7;
};

int run_generate(const GenerateArgs& a) {
  const auto rc = config_from(a.config);
  cs::validate(rc.synth);
  const auto corpus = cs::generate_synthetic(rc.synth, a.seed);
  cs::save_corpus(a.out, corpus);
  std::cout << "conversations " << corpus.size() << "\n"
            << "utterances " << cs::utterance_count(corpus) << "\n";
  return 0;
}

struct StatsArgs {
  std::string corpus;
  bool json = false;
};

int run_stats(const StatsArgs& a) {
  const auto rep = cs::corpus_stats(cs::load_corpus(a.corpus));
  if (a.json) {
    json rows = json::array();
    for (const auto& r : rep.rows)
      rows.push_back({{"scope", r.scope}, {"quantity", r.quantity}, {"min", r.min}, {"average", r.average},
                      {"max", r.max}});
    std::cout << json{{"conversations", rep.total_conversations},
                      {"utterances", rep.total_utterances},
                      {"rows", rows}}
                     .dump(2)
              << "\n";
    return 0;
  }
  std::printf("%-28s %10s %10s %10s\n", "", "min", "average", "max");
  for (const auto& r : rep.rows) {
    const std::string label = r.quantity + " per " + r.scope;
    std::printf("%-28s %10.0f %10.4f %10.0f\n", label.c_str(), r.min, r.average, r.max);
  }
  std::printf("%zu conversations, %zu utterances\n", rep.total_conversations, rep.total_utterances);
  return 0;
}

struct TrainArgs {
  std::string corpus, test_corpus, config, variant, out_checkpoint, out_metrics;
  std::optional<std::uint64_t> seed;
  bool timing = false;
};

int run_train(const TrainArgs& a) {
  cs::TrainConfig cfg = config_from(a.config).train;
  if (!a.variant.empty()) cfg.spec.variant = cs::parse_variant(a.variant);
  if (a.seed) cfg.seed = *a.seed;
  cfg.record_wall_clock = a.timing;
  cs::validate(cfg);

  const auto corpus = cs::load_corpus(a.corpus);
  std::vector<cs::Conversation> train_convs, test_convs;
  if (a.test_corpus.empty()) {
    std::tie(train_convs, test_convs) = cs::split_conversations(corpus, cfg.test_fraction, cfg.seed);
  } else {
    train_convs = corpus;
    test_convs = cs::load_corpus(a.test_corpus);
  }
  check_style_dim(train_convs, cfg.spec.features);
  check_style_dim(test_convs, cfg.spec.features);

  const auto result =
      cs::train(cs::make_chunks(train_convs, cfg.window), cs::make_chunks(test_convs, cfg.window), cfg);
  if (!a.out_checkpoint.empty())
    cs::save_checkpoint(a.out_checkpoint, {cs::kCheckpointVersion, cs::train_config_json(cfg), result.params});
  const std::string metrics = cs::to_json(result.report).dump(2) + "\n";
  if (!a.out_metrics.empty()) write_text(a.out_metrics, metrics);
  std::printf("%s seed %llu final test MSE %.6e (%zu train / %zu test chunks)\n",
              cs::variant_name(cfg.spec.variant).c_str(), static_cast<unsigned long long>(cfg.seed),
              result.report.final_test_mse, result.report.train_chunks, result.report.test_chunks);
  return 0;
}

struct EvalArgs {
  std::string corpus, checkpoint;
  bool json = false;
};

int run_eval(const EvalArgs& a) {
  auto ck = cs::load_checkpoint(a.checkpoint);
  const cs::TrainConfig cfg = cs::apply_config(cs::RunConfig{}, ck.config).train;
  cs::validate(cfg.spec);
  cs::check_inventory(cs::init_params(cfg.spec, 0), ck.params);
  const auto corpus = cs::load_corpus(a.corpus);
  check_style_dim(corpus, cfg.spec.features);
  const auto chunks = cs::make_chunks(corpus, cfg.window);
  if (chunks.empty()) throw cs::ValidationError("corpus yields no chunks to evaluate");
  cs::require_target_styles(chunks);
  if (cs::uses_context_style(cfg.spec.variant)) cs::require_context_styles(chunks);
  const double mse = cs::evaluate(chunks, ck.params, cfg.spec);
  if (!std::isfinite(mse)) throw cs::NumericError("evaluation produced a non-finite MSE");
  if (a.json)
    std::cout << json{{"variant", cs::variant_name(cfg.spec.variant)}, {"chunks", chunks.size()}, {"mse", mse}}.dump()
              << "\n";
  else
    std::printf("%.6f\n", mse);
  return 0;
}

struct CompareArgs {
  std::string corpus, config, seeds = "1..5", out;
  std::size_t threads = 1;
};

int run_compare(const CompareArgs& a) {
  const cs::TrainConfig cfg = config_from(a.config).train;
  const auto corpus = cs::load_corpus(a.corpus);
  check_style_dim(corpus, cfg.spec.features);
  const auto rep = cs::compare_variants(corpus, cfg, parse_seed_list(a.seeds), a.threads);
  if (!a.out.empty()) write_text(a.out, cs::to_json(rep).dump(2) + "\n");
  std::printf("%-18s %14s %14s\n", "variant", "mean_mse", "std_mse");
  for (const auto& s : rep.summary)
    std::printf("%-18s %14.6e %14.6e\n", cs::variant_name(s.variant).c_str(), s.mean, s.stddev);
  std::vector<double> uni, copy;
  for (const auto& r : rep.references) {
    uni.push_back(r.uniform_mse);
    if (r.copy_last_mse) copy.push_back(*r.copy_last_mse);
  }
  std::printf("%-18s %14.6e\n", "(uniform)", cs::mean_of(uni));
  if (copy.size() == rep.references.size()) std::printf("%-18s %14.6e\n", "(copy-last)", cs::mean_of(copy));
  return 0;
}

struct GradcheckArgs {
  std::string dims = "SMALL";
  std::uint64_t seed = 1;
};

int run_gradcheck(const GradcheckArgs& a) {
  constexpr double kEps = 1e-5, kTol = 1e-4;
  cs::ModelSpec spec;
  std::size_t max_entries = 0;
  if (a.dims == "SMALL") {
    spec = cs::small_gradcheck_spec();
  } else if (a.dims == "DEFAULT") {
    max_entries = 32;  // per tensor; a full sweep of the default sizes takes hours
  } else {
    throw cs::ConfigError("--dims must be SMALL or DEFAULT");
  }
  auto cases = cs::op_gradcheck_cases(a.seed);
  for (auto& c : cases) c.name = "op:" + c.name;
  for (auto& c : cs::model_gradcheck_cases(spec, a.seed)) cases.push_back(std::move(c));

  std::vector<std::string> failed;
  for (const auto& c : cases) {
    const auto r = cs::run_gradcheck_case(c, kEps, max_entries, a.seed);
    const bool ok = r.max_rel_error < kTol;
    std::printf("%-26s max_rel_err %.3e  %-4s  (%zu entries, worst %s[%zu])\n", c.name.c_str(), r.max_rel_error,
                ok ? "ok" : "FAIL", r.entries_checked, r.worst_param.c_str(), r.worst_index);
    if (!ok) failed.push_back(c.name);
  }
  if (failed.empty()) return 0;
  std::string list;
  for (const auto& f : failed) list += (list.empty() ? "" : ", ") + f;
  std::fprintf(stderr, "gradient check failed (>= %.0e): %s\n", kTol, list.c_str());
  return 5;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conversational style-token prediction toolkit"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "write a synthetic corpus (JSONL)");
  g->add_option("--config", gen.config, "config JSON (synth.* keys)");
  g->add_option("--seed", gen.seed, "corpus seed");
  g->add_option("--out", gen.out, "output corpus path")->required();

  StatsArgs st;
  auto* s = app.add_subcommand("stats", "corpus statistics");
  s->add_option("--corpus", st.corpus)->required();
  s->add_flag("--json", st.json, "print JSON instead of a table");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train one variant");
  t->add_option("--corpus", tr.corpus, "training corpus; split by seed unless --test-corpus is given")->required();
  t->add_option("--test-corpus", tr.test_corpus, "held-out corpus");
  t->add_option("--config", tr.config);
  t->add_option("--variant", tr.variant, "BaselineGRU | GraphTextRaw | GraphTextEncoded | Proposed");
  t->add_option("--seed", tr.seed);
  t->add_option("--out-checkpoint", tr.out_checkpoint);
  t->add_option("--out-metrics", tr.out_metrics);
  t->add_flag("--timing", tr.timing, "record wall-clock time in the metrics (breaks byte-identical reruns)");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "mean MSE of a checkpoint on a corpus");
  e->add_option("--corpus", ev.corpus)->required();
  e->add_option("--checkpoint", ev.checkpoint)->required();
  e->add_flag("--json", ev.json, "full-precision JSON output");

  CompareArgs cmp;
  auto* c = app.add_subcommand("compare", "train all variants over several seeds");
  c->add_option("--corpus", cmp.corpus)->required();
  c->add_option("--config", cmp.config);
  c->add_option("--seeds", cmp.seeds, "e.g. 1,2,3 or 1..5");
  c->add_option("--out", cmp.out);
  c->add_option("--threads", cmp.threads)->check(CLI::PositiveNumber);

  GradcheckArgs gc;
  auto* k = app.add_subcommand("gradcheck", "finite-difference check of every op and model");
  k->add_option("--dims", gc.dims, "SMALL or DEFAULT");
  k->add_option("--seed", gc.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*g) return run_generate(gen);
    if (*s) return run_stats(st);
    if (*t) return run_train(tr);
    if (*e) return run_eval(ev);
    if (*c) return run_compare(cmp);
    if (*k) return run_gradcheck(gc);
  } catch (const cs::Error& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return err.exit_code();
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 1;
  }
  return 0;
}
