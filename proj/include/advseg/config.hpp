#pragma once

// RunConfig: every tunable of a run in one JSON document. Parsing is strict
// (unknown keys are errors) and the resolved document always lists every
// field, defaults included.

#include <cmath>
#include <cstdint>
#include <set>
#include <string>

#include <json.hpp>

#include "advseg/adversarial.hpp"
#include "advseg/model.hpp"
#include "advseg/synth.hpp"

namespace advseg {

using Json = nlohmann::ordered_json;

/// Thrown for malformed or inconsistent configuration input.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr int kAugmentationFactor = 4;

struct DataConfig {
  GenSpec gen;
  double train_fraction = 0.8;  // leading samples go to train, the rest to test

  int train_count() const { return static_cast<int>(std::lround(train_fraction * gen.count)); }
  int test_count() const { return gen.count - train_count(); }

  bool operator==(const DataConfig&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 42;
  DataConfig data;
  ModelConfig model;
  AdvConfig train;
  bool augment = true;
  std::string data_dir = "data";
  std::string out_dir = "runs";

  void validate() const {
    data.gen.validate();
    if (!(data.train_fraction > 0.0 && data.train_fraction <= 1.0)) throw ConfigError("data.train_fraction must be in (0,1]");
    if (data.train_count() < 1) throw ConfigError("split leaves no training samples");
    if (model.width_divisor < 1) throw ConfigError("model.width_divisor must be >= 1");
    if (model.crf_steps_train < 1 || model.crf_steps_test < 1) throw ConfigError("CRF step counts must be >= 1");
    model.bandwidths.validate();
    train.validate();
  }

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

/// Reads the keys of `j` through `fields`, rejecting any key not consumed.
class StrictObject {
 public:
  StrictObject(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const Json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.contains(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline Json to_json(const RunConfig& c) {
  const GenSpec& g = c.data.gen;
  Json j;
  j["seed"] = c.seed;
  j["data"] = {
      {"count", g.count},
      {"size", g.size},
      {"center_jitter", g.center_jitter},
      {"semi_axis_min", g.semi_axis_min},
      {"semi_axis_max", g.semi_axis_max},
      {"rotation_min", g.rotation_min},
      {"rotation_max", g.rotation_max},
      {"background_mean", g.background_mean},
      {"contrast_gap", g.contrast_gap},
      {"noise_sigma", g.noise_sigma},
      {"edge_softness", g.edge_softness},
      {"train_fraction", c.data.train_fraction},
  };
  j["model"] = {
      {"width_divisor", c.model.width_divisor},
      {"crf_steps_train", c.model.crf_steps_train},
      {"crf_steps_test", c.model.crf_steps_test},
      {"crf_weight_init", c.model.crf_weight_init},
      {"bandwidth_appearance", c.model.bandwidths.appearance},
      {"bandwidth_position", c.model.bandwidths.position},
  };
  j["train"] = {
      {"variant", std::string(to_string(c.train.variant))},
      {"epsilon", c.train.epsilon},
      {"lambda", c.train.lambda},
      {"learning_rate", c.train.learning_rate},
      {"epochs", c.train.epochs},
      {"batch_size", c.train.batch_size},
      {"eval_every", c.train.eval_every},
      {"augment", c.augment},
  };
  j["paths"] = {{"data_dir", c.data_dir}, {"out_dir", c.out_dir}};
  return j;
}

/// Overlays `j` on the defaults in `base`.
inline RunConfig from_json(const Json& j, RunConfig base = {}) {
  RunConfig c = std::move(base);
  detail::StrictObject top(j, "config");
  top.get("seed", c.seed);
  if (const Json* d = top.child("data")) {
    detail::StrictObject o(*d, "data");
    GenSpec& g = c.data.gen;
    o.get("count", g.count);
    o.get("size", g.size);
    o.get("center_jitter", g.center_jitter);
    o.get("semi_axis_min", g.semi_axis_min);
    o.get("semi_axis_max", g.semi_axis_max);
    o.get("rotation_min", g.rotation_min);
    o.get("rotation_max", g.rotation_max);
    o.get("background_mean", g.background_mean);
    o.get("contrast_gap", g.contrast_gap);
    o.get("noise_sigma", g.noise_sigma);
    o.get("edge_softness", g.edge_softness);
    o.get("train_fraction", c.data.train_fraction);
    o.finish();
  }
  if (const Json* m = top.child("model")) {
    detail::StrictObject o(*m, "model");
    o.get("width_divisor", c.model.width_divisor);
    o.get("crf_steps_train", c.model.crf_steps_train);
    o.get("crf_steps_test", c.model.crf_steps_test);
    o.get("crf_weight_init", c.model.crf_weight_init);
    o.get("bandwidth_appearance", c.model.bandwidths.appearance);
    o.get("bandwidth_position", c.model.bandwidths.position);
    o.finish();
  }
  if (const Json* t = top.child("train")) {
    detail::StrictObject o(*t, "train");
    std::string variant(to_string(c.train.variant));
    o.get("variant", variant);
    try {
      c.train.variant = parse_variant(variant);
    } catch (const ContractError& e) {
      throw ConfigError(std::string("train.variant: ") + e.what());
    }
    o.get("epsilon", c.train.epsilon);
    o.get("lambda", c.train.lambda);
    o.get("learning_rate", c.train.learning_rate);
    o.get("epochs", c.train.epochs);
    o.get("batch_size", c.train.batch_size);
    o.get("eval_every", c.train.eval_every);
    o.get("augment", c.augment);
    o.finish();
  }
  if (const Json* p = top.child("paths")) {
    detail::StrictObject o(*p, "paths");
    o.get("data_dir", c.data_dir);
    o.get("out_dir", c.out_dir);
    o.finish();
  }
  top.finish();
  // The data stream and the training streams share the run seed.
  c.data.gen.seed = c.seed;
  c.train.seed = c.seed;
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline RunConfig parse_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return from_json(j);
}

}  // namespace advseg
