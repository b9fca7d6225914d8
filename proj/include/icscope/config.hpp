#pragma once

// Experiment configuration: one JSON document with defaults for every key.
// User documents and `--set a.b=value` overrides may only touch existing keys.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "icscope/attribution.hpp"
#include "icscope/bars.hpp"
#include "icscope/cav.hpp"
#include "icscope/errors.hpp"
#include "icscope/rng.hpp"
#include "icscope/scores.hpp"
#include "icscope/train.hpp"
#include "json.hpp"

#ifndef ICSCOPE_VERSION
#define ICSCOPE_VERSION "0.0.0-dev"
#endif

namespace icscope {

using nlohmann::json;

inline json default_config() {
  return json::parse(R"({
    "seed": 7,
    "output_dir": "icscope-out",
    "dataset": {
      "height": 100, "width": 100, "thickness": 5, "noise_sigma": 0.05,
      "n_train": 10000, "n_validation": 1000, "n_test": 2000, "n_concept": 2000
    },
    "model": {
      "hidden": [128, 64, 32], "dropout": 0.5, "learning_rate": 0.001, "batch_size": 64,
      "max_epochs": 20, "min_epochs": 3, "stop_at_perfect_validation": true,
      "orientation_path": "", "color_path": ""
    },
    "concepts": ["orientation", "color"],
    "layers": [0, 1, 2],
    "cav": {"B": 100, "n_perm": 10, "reg": "l2", "strength": 0.01, "l1_ratio": 0.5, "alpha": 0.05},
    "baselines": ["zero_image"],
    "methods": ["sign_cs", "ics"],
    "quadrature_m": 50,
    "forgetting": {"mode": "reflection", "lambda": 1.0},
    "entropy": {"lambda_h": 1000000.0, "max_iterations": 20000},
    "noise_baseline": {"sigma": 1.0, "draws": 10},
    "eval": {"max_samples": 1000},
    "local": {"samples_per_class": 2, "class": 1},
    "baseline_probabilities": {
      "samples": 200,
      "baselines": ["noise_image", "zero_image", "average_activation", "pixelwise_average",
                    "pixelwise_median", "entropy_maximizing", "one_image"]
    },
    "mcs": {"N": 1000, "K": 100},
    "influence": {"concepts": ["color", "orientation"]},
    "ablation": {
      "concept": "orientation", "layer": 2, "baseline": "zero_image", "ratios": [30, 0.1],
      "replicates": 100, "augment": [false], "augment_copies": 9
    }
  })");
}

struct Settings {
  std::uint64_t seed = 7;
  std::string output_dir;
  BarsConfig bars;
  int n_train = 0, n_validation = 0, n_test = 0, n_concept = 0;
  std::vector<Index> hidden;
  double dropout = 0.5;
  TrainConfig train;
  std::string orientation_path, color_path;
  std::vector<Concept> concepts;
  std::vector<int> layers;
  int B = 100, n_perm = 10;
  Regularization reg;
  double alpha = 0.05;
  std::vector<BaselineKind> baselines;
  std::vector<Method> methods;
  int m = 50;
  ForgettingMode forgetting_mode = ForgettingMode::reflection;
  double forgetting_lambda = 1.0;
  EntropyOptions entropy;
  double noise_sigma = 1.0;
  int noise_draws = 10;
  int eval_max_samples = 1000;
  int local_per_class = 2;
  int local_class = 1;
  int bp_samples = 200;
  std::vector<std::string> bp_baselines;
  int mcs_N = 1000, mcs_K = 100;
  std::vector<Concept> influence_concepts;
  Concept ablation_concept = Concept::orientation;
  int ablation_layer = 2;
  BaselineKind ablation_baseline = BaselineKind::zero_image;
  std::vector<double> ablation_ratios;
  int ablation_replicates = 100;
  std::vector<bool> ablation_augment;
  int ablation_copies = 9;
};

namespace detail {

inline void merge_into(json& base, const json& user, const std::string& prefix) {
  detail::require(user.is_object(), "config " + (prefix.empty() ? std::string("document") : prefix) +
                                        " must be a JSON object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    detail::require(base.contains(it.key()), "unknown config key '" + path + "'");
    json& slot = base[it.key()];
    if (slot.is_object()) {
      merge_into(slot, it.value(), path);
      continue;
    }
    const bool same_kind = (slot.is_number() && it.value().is_number()) ||
                           (slot.is_boolean() && it.value().is_boolean()) ||
                           (slot.is_string() && it.value().is_string()) ||
                           (slot.is_array() && it.value().is_array());
    detail::require(same_kind, "config key '" + path + "' has the wrong type");
    slot = it.value();
  }
}

}  // namespace detail

class ExperimentConfig {
 public:
  ExperimentConfig() : doc_(default_config()) { reparse(); }

  /// Defaults overlaid with `user` (unknown keys are rejected).
  static ExperimentConfig from_json(const json& user) {
    ExperimentConfig cfg;
    detail::merge_into(cfg.doc_, user, "");
    cfg.reparse();
    return cfg;
  }

  static ExperimentConfig from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path);
    json user;
    try {
      in >> user;
    } catch (const json::exception& e) {
      throw ConfigError("cannot parse config " + path + ": " + e.what());
    }
    return from_json(user);
  }

  /// Applies `a.b.c=value`; the value is parsed as JSON, or taken as a string.
  void set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    detail::require(eq != std::string::npos && eq > 0, "override must look like path=value: " + assignment);
    set(assignment.substr(0, eq), assignment.substr(eq + 1));
  }

  void set(const std::string& path, const std::string& raw) {
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    json patch = value;
    std::vector<std::string> parts;
    for (std::size_t start = 0;;) {
      const auto dot = path.find('.', start);
      parts.push_back(path.substr(start, dot - start));
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
      detail::require(!it->empty(), "invalid override path '" + path + "'");
      patch = json{{*it, patch}};
    }
    json trial = doc_;
    detail::merge_into(trial, patch, "");
    const json saved = doc_;
    doc_ = std::move(trial);
    try {
      reparse();
    } catch (...) {
      doc_ = saved;
      reparse();
      throw;
    }
  }

  const json& doc() const { return doc_; }
  const Settings& settings() const { return s_; }

  /// FNV-1a of the canonical dump, as 16 hex digits.
  std::string hash() const {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(doc_.dump())));
    return buf;
  }

 private:
  void reparse() {
    try {
      s_ = parse(doc_);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("invalid config: ") + e.what());
    }
  }

  static Settings parse(const json& d) {
    Settings s;
    s.seed = d.at("seed").get<std::uint64_t>();
    s.output_dir = d.at("output_dir").get<std::string>();
    const auto& ds = d.at("dataset");
    s.bars.height = ds.at("height");
    s.bars.width = ds.at("width");
    s.bars.thickness = ds.at("thickness");
    s.bars.noise_sigma = ds.at("noise_sigma");
    s.bars.validate();
    s.n_train = ds.at("n_train");
    s.n_validation = ds.at("n_validation");
    s.n_test = ds.at("n_test");
    s.n_concept = ds.at("n_concept");
    detail::require(s.n_train >= 1 && s.n_validation >= 1 && s.n_test >= 1 && s.n_concept >= 8,
                    "dataset sizes must be positive (concept pool at least 8)");

    const auto& md = d.at("model");
    s.hidden = md.at("hidden").get<std::vector<Index>>();
    detail::require(!s.hidden.empty(), "model.hidden needs at least one layer");
    for (Index h : s.hidden) detail::require(h >= 1, "hidden widths must be positive");
    s.dropout = md.at("dropout");
    detail::require(s.dropout >= 0.0 && s.dropout < 1.0, "dropout must be in [0, 1)");
    s.train.learning_rate = md.at("learning_rate");
    s.train.batch_size = md.at("batch_size");
    s.train.max_epochs = md.at("max_epochs");
    s.train.min_epochs = md.at("min_epochs");
    s.train.stop_at_perfect_validation = md.at("stop_at_perfect_validation");
    detail::require(s.train.learning_rate > 0.0 && s.train.batch_size >= 1 && s.train.max_epochs >= 1 &&
                        s.train.min_epochs >= 1 && s.train.min_epochs <= s.train.max_epochs,
                    "invalid training settings");
    s.orientation_path = md.at("orientation_path");
    s.color_path = md.at("color_path");

    for (const auto& c : d.at("concepts")) s.concepts.push_back(concept_from_string(c.get<std::string>()));
    detail::require(!s.concepts.empty(), "concepts must not be empty");
    s.layers = d.at("layers").get<std::vector<int>>();
    detail::require(!s.layers.empty(), "layers must not be empty");
    for (int l : s.layers)
      detail::require(l >= 0 && l <= static_cast<int>(s.hidden.size()),
                      "layer " + std::to_string(l) + " does not exist in the configured model");

    const auto& cd = d.at("cav");
    s.B = cd.at("B");
    s.n_perm = cd.at("n_perm");
    detail::require(s.B >= 1 && s.n_perm >= 1, "cav.B and cav.n_perm must be at least 1");
    s.reg.kind = reg_from_string(cd.at("reg").get<std::string>());
    s.reg.strength = cd.at("strength");
    s.reg.l1_ratio = cd.at("l1_ratio");
    s.reg.validate();
    s.alpha = cd.at("alpha");
    detail::require(s.alpha > 0.0 && s.alpha < 1.0, "cav.alpha must be in (0, 1)");

    for (const auto& b : d.at("baselines")) s.baselines.push_back(baseline_from_string(b.get<std::string>()));
    detail::require(!s.baselines.empty(), "baselines must not be empty");
    for (const auto& m : d.at("methods")) s.methods.push_back(method_from_string(m.get<std::string>()));
    detail::require(!s.methods.empty(), "methods must not be empty");
    s.m = d.at("quadrature_m");
    detail::require(s.m >= 1, "quadrature_m must be at least 1");

    const auto& fd = d.at("forgetting");
    const auto mode = fd.at("mode").get<std::string>();
    detail::require(mode == "reflection" || mode == "fixed", "forgetting.mode must be reflection or fixed");
    s.forgetting_mode = mode == "reflection" ? ForgettingMode::reflection : ForgettingMode::fixed;
    s.forgetting_lambda = fd.at("lambda");
    detail::require(s.forgetting_lambda > 0.0, "forgetting.lambda must be positive");
    s.entropy.lambda_h = d.at("entropy").at("lambda_h");
    s.entropy.max_iterations = d.at("entropy").at("max_iterations");
    detail::require(s.entropy.lambda_h > 0.0 && s.entropy.max_iterations >= 1, "invalid entropy settings");
    s.noise_sigma = d.at("noise_baseline").at("sigma");
    s.noise_draws = d.at("noise_baseline").at("draws");
    detail::require(s.noise_sigma > 0.0 && s.noise_draws >= 1, "invalid noise baseline settings");
    s.eval_max_samples = d.at("eval").at("max_samples");
    detail::require(s.eval_max_samples >= 1, "eval.max_samples must be positive");
    s.local_per_class = d.at("local").at("samples_per_class");
    s.local_class = d.at("local").at("class");
    detail::require(s.local_per_class >= 1 && (s.local_class == 0 || s.local_class == 1), "invalid local settings");

    const auto& bp = d.at("baseline_probabilities");
    s.bp_samples = bp.at("samples");
    detail::require(s.bp_samples >= 1, "baseline_probabilities.samples must be positive");
    s.bp_baselines = bp.at("baselines").get<std::vector<std::string>>();
    for (const auto& name : s.bp_baselines)
      if (name != "average_activation") baseline_from_string(name);

    s.mcs_N = d.at("mcs").at("N");
    s.mcs_K = d.at("mcs").at("K");
    detail::require(s.mcs_N >= 8 && s.mcs_K >= 1, "mcs.N must be at least 8 and mcs.K at least 1");
    for (const auto& c : d.at("influence").at("concepts"))
      s.influence_concepts.push_back(concept_from_string(c.get<std::string>()));

    const auto& ab = d.at("ablation");
    s.ablation_concept = concept_from_string(ab.at("concept").get<std::string>());
    s.ablation_layer = ab.at("layer");
    detail::require(s.ablation_layer >= 0 && s.ablation_layer <= static_cast<int>(s.hidden.size()),
                    "ablation.layer does not exist in the configured model");
    s.ablation_baseline = baseline_from_string(ab.at("baseline").get<std::string>());
    s.ablation_ratios = ab.at("ratios").get<std::vector<double>>();
    detail::require(!s.ablation_ratios.empty(), "ablation.ratios must not be empty");
    for (double r : s.ablation_ratios) detail::require(r > 0.0, "ablation ratios must be positive");
    s.ablation_replicates = ab.at("replicates");
    detail::require(s.ablation_replicates >= 1, "ablation.replicates must be positive");
    s.ablation_augment = ab.at("augment").get<std::vector<bool>>();
    detail::require(!s.ablation_augment.empty(), "ablation.augment must list at least one setting");
    s.ablation_copies = ab.at("augment_copies");
    detail::require(s.ablation_copies >= 0, "ablation.augment_copies must be non-negative");
    return s;
  }

  json doc_;
  Settings s_;
};

}  // namespace icscope
