// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "convstyle/adam.hpp"
#include "convstyle/corpus.hpp"
#include "convstyle/model.hpp"

namespace convstyle {

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 32;
  std::size_t iterations = 15000;
  std::uint64_t seed = 1;
  std::size_t eval_every = 500;
  std::size_t eval_chunks = 1000;
  std::size_t window = kDefaultWindow;
  double test_fraction = 0.1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  ModelSpec spec;
  bool record_wall_clock = false;  // not a config key; timing breaks byte-identical reports

  AdamConfig adam() const { return {learning_rate, adam_beta1, adam_beta2, adam_epsilon}; }
};

/// Learning rate zero is allowed and turns training into a parameter no-op.
inline void validate(const TrainConfig& c) {
  if (!(c.learning_rate >= 0.0) || !std::isfinite(c.learning_rate))
    throw ConfigError("training.learning_rate: must be a non-negative number");
  if (c.batch_size < 1) throw ConfigError("training.batch_size: must be >= 1");
  if (c.iterations < 1) throw ConfigError("training.iterations: must be >= 1");
  if (c.eval_every < 1) throw ConfigError("training.eval_every: must be >= 1");
  if (c.eval_chunks < 1) throw ConfigError("training.eval_chunks: must be >= 1");
  if (c.window < 1) throw ConfigError("training.window: must be >= 1");
  if (!(c.test_fraction > 0.0 && c.test_fraction < 1.0))
    throw ConfigError("training.test_fraction: must be in (0, 1)");
  if (!(c.adam_beta1 >= 0.0 && c.adam_beta1 < 1.0)) throw ConfigError("training.adam_beta1: must be in [0, 1)");
  if (!(c.adam_beta2 >= 0.0 && c.adam_beta2 < 1.0)) throw ConfigError("training.adam_beta2: must be in [0, 1)");
  if (!(c.adam_epsilon > 0.0)) throw ConfigError("training.adam_epsilon: must be positive");
  validate(c.spec);
}

/// Everything a command can be configured with, addressed by dotted keys
/// such as "training.iterations" or "synth.lambda_self".
struct RunConfig {
  SynthConfig synth;
  TrainConfig train;
};

namespace detail {

struct ConfigKey {
  std::string key;
  std::function<void(RunConfig&, const nlohmann::json&)> set;
  std::function<nlohmann::json(const RunConfig&)> get;
};

template <typename Member>
ConfigKey uint_key(std::string key, Member member) {
  return {key,
          [key, member](RunConfig& c, const nlohmann::json& v) {
            if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0))
              throw ConfigError(key + ": expected a non-negative integer");
            member(c) = v.get<std::uint64_t>();
          },
          [member](const RunConfig& c) { return nlohmann::json(member(const_cast<RunConfig&>(c))); }};
}

template <typename Member>
ConfigKey real_key(std::string key, Member member) {
  return {key,
          [key, member](RunConfig& c, const nlohmann::json& v) {
            if (!v.is_number()) throw ConfigError(key + ": expected a number");
            member(c) = v.get<double>();
          },
          [member](const RunConfig& c) { return nlohmann::json(member(const_cast<RunConfig&>(c))); }};
}

#define CONVSTYLE_U(k, expr) uint_key(k, [](RunConfig& c) -> auto& { return expr; })
#define CONVSTYLE_R(k, expr) real_key(k, [](RunConfig& c) -> auto& { return expr; })

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k{
        CONVSTYLE_U("synth.conversations", c.synth.conversations),
        CONVSTYLE_U("synth.min_speakers", c.synth.min_speakers),
        CONVSTYLE_U("synth.max_speakers", c.synth.max_speakers),
        CONVSTYLE_U("synth.min_len", c.synth.min_len),
        CONVSTYLE_U("synth.max_len", c.synth.max_len),
        CONVSTYLE_U("synth.topics", c.synth.topics),
        CONVSTYLE_R("synth.topic_stay", c.synth.topic_stay),
        CONVSTYLE_R("synth.turn_keep", c.synth.turn_keep),
        CONVSTYLE_U("synth.words_per_sentence", c.synth.words_per_sentence),
        CONVSTYLE_U("synth.vocab_per_topic", c.synth.vocab_per_topic),
        CONVSTYLE_U("synth.style_dim", c.synth.style_dim),
        CONVSTYLE_R("synth.style_smoothing", c.synth.style_smoothing),
        CONVSTYLE_R("synth.lambda_self", c.synth.lambda_self),
        CONVSTYLE_R("synth.lambda_inter", c.synth.lambda_inter),
        CONVSTYLE_R("synth.lambda_text", c.synth.lambda_text),
        CONVSTYLE_R("synth.lambda_base", c.synth.lambda_base),
        CONVSTYLE_R("synth.noise", c.synth.noise),
        CONVSTYLE_U("features.d_raw", c.train.spec.features.d_raw),
        CONVSTYLE_U("features.d_text", c.train.spec.features.d_text),
        CONVSTYLE_U("features.d_style", c.train.spec.features.d_style),
        CONVSTYLE_U("features.speaker_slots", c.train.spec.features.speaker_slots),
        CONVSTYLE_U("features.hash_seed", c.train.spec.features.hash_seed),
        CONVSTYLE_U("model.hidden", c.train.spec.model.hidden),
        CONVSTYLE_U("model.attention_dim", c.train.spec.model.attention_dim),
        CONVSTYLE_U("model.gru_hidden", c.train.spec.model.gru_hidden),
        CONVSTYLE_R("model.dropout", c.train.spec.model.dropout),
        CONVSTYLE_R("training.learning_rate", c.train.learning_rate),
        CONVSTYLE_U("training.batch_size", c.train.batch_size),
        CONVSTYLE_U("training.iterations", c.train.iterations),
        CONVSTYLE_U("training.seed", c.train.seed),
        CONVSTYLE_U("training.eval_every", c.train.eval_every),
        CONVSTYLE_U("training.eval_chunks", c.train.eval_chunks),
        CONVSTYLE_U("training.window", c.train.window),
        CONVSTYLE_R("training.test_fraction", c.train.test_fraction),
        CONVSTYLE_R("training.adam_beta1", c.train.adam_beta1),
        CONVSTYLE_R("training.adam_beta2", c.train.adam_beta2),
        CONVSTYLE_R("training.adam_epsilon", c.train.adam_epsilon),
    };
    k.push_back({"training.variant",
                 [](RunConfig& c, const nlohmann::json& v) {
                   if (!v.is_string()) throw ConfigError("training.variant: expected a string");
                   c.train.spec.variant = parse_variant(v.get<std::string>());
                 },
                 [](const RunConfig& c) { return nlohmann::json(variant_name(c.train.spec.variant)); }});
    return k;
  }();
  return keys;
}

#undef CONVSTYLE_U
#undef CONVSTYLE_R

inline void flatten_nested(const nlohmann::json& obj, const std::string& prefix,
                           std::vector<std::pair<std::string, nlohmann::json>>& out) {
  for (const auto& [k, v] : obj.items()) {
    if (k.find('.') != std::string::npos)
      throw ConfigError("config key '" + prefix + k +
                        "': dotted keys are not allowed inside nested objects");
    if (v.is_object())
      flatten_nested(v, prefix + k + ".", out);
    else
      out.emplace_back(prefix + k, v);
  }
}

}  // namespace detail

/// Apply a config document on top of `base`. The document is either flat
/// ({"training.iterations": 3000}) or nested ({"training": {"iterations":
/// 3000}}), not a mix. Unknown keys and ill-typed values are errors.
inline RunConfig apply_config(RunConfig base, const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("config document must be a JSON object");
  bool any_dotted = false, any_nested = false;
  for (const auto& [k, v] : doc.items()) {
    any_dotted = any_dotted || k.find('.') != std::string::npos;
    any_nested = any_nested || v.is_object();
  }
  if (any_dotted && any_nested)
    throw ConfigError("config mixes flat dotted keys and nested objects");
  std::vector<std::pair<std::string, nlohmann::json>> entries;
  if (any_nested)
    detail::flatten_nested(doc, "", entries);
  else
    for (const auto& [k, v] : doc.items()) entries.emplace_back(k, v);
  const auto& keys = detail::config_keys();
  for (const auto& [k, v] : entries) {
    auto it = std::find_if(keys.begin(), keys.end(), [&](const auto& d) { return d.key == k; });
    if (it == keys.end()) throw ConfigError("unknown config key: " + k);
    it->set(base, v);
  }
  return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file: " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  return apply_config(std::move(base), doc);
}

/// Flat dotted-key echo of every key whose name starts with one of `prefixes`.
inline nlohmann::json config_to_json(const RunConfig& c, const std::vector<std::string>& prefixes) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& k : detail::config_keys())
    for (const auto& p : prefixes)
      if (k.key.rfind(p, 0) == 0) {
        j[k.key] = k.get(c);
        break;
      }
  return j;
}

/// Echo of the model-relevant part of a training configuration.
inline nlohmann::json train_config_json(const TrainConfig& t) {
  RunConfig rc;
  rc.train = t;
  return config_to_json(rc, {"features.", "model.", "training."});
}

}  // namespace convstyle
