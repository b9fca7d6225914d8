#pragma once

// Experiment runner: a Lab owns the rendered BARS splits, the two trained
// models (orientation target and color target) and memoized CAV families and
// attribution caches. Presets turn a Lab into typed results and report bundles.

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "icscope/attribution.hpp"
#include "icscope/bars.hpp"
#include "icscope/cav.hpp"
#include "icscope/config.hpp"
#include "icscope/network.hpp"
#include "icscope/network_io.hpp"
#include "icscope/scores.hpp"
#include "icscope/stats.hpp"
#include "icscope/train.hpp"

namespace icscope {

/// Real bootstrap CAVs with their permuted counterparts and the AUC test.
struct CavFamily {
  std::vector<Cav> real;
  std::vector<Cav> permuted;
  SignificanceResult significance;
};

inline Concept other_concept(Concept c) { return c == Concept::color ? Concept::orientation : Concept::color; }

class Lab {
 public:
  explicit Lab(ExperimentConfig cfg) : cfg_(std::move(cfg)) {}
  Lab(const Lab&) = delete;
  Lab& operator=(const Lab&) = delete;

  const ExperimentConfig& config() const { return cfg_; }
  const Settings& settings() const { return cfg_.settings(); }
  const BarsConfig& bars() const { return settings().bars; }

  int split_size(Split s) const {
    const auto& st = settings();
    switch (s) {
      case Split::train: return st.n_train;
      case Split::validation: return st.n_validation;
      case Split::test: return st.n_test;
      case Split::concept_pool: return st.n_concept;
      case Split::mcs_pool: return st.mcs_N;
    }
    return 0;
  }

  const std::vector<BarsSample>& samples(Split s) {
    auto& slot = samples_[s];
    if (slot.empty())
      slot = generate(static_cast<std::size_t>(split_size(s)), split_seed(settings().seed, s), bars());
    return slot;
  }

  const Eigen::MatrixXf& inputs(Split s) {
    auto it = inputs_.find(s);
    if (it == inputs_.end()) it = inputs_.emplace(s, render_matrix(samples(s), bars())).first;
    return it->second;
  }

  void drop_inputs(Split s) { inputs_.erase(s); }

  /// The model trained to predict `target` (loaded from disk when configured).
  const Network& model(Concept target) {
    auto& slot = models_[target];
    if (!slot) {
      const std::string& path = target == Concept::orientation ? settings().orientation_path : settings().color_path;
      if (!path.empty()) {
        slot = std::make_unique<Network>(load_network(path));
        detail::require_dims(slot->input_dim() == bars().input_dim(), "model " + path + " does not match the image size");
      } else {
        slot = std::make_unique<Network>(train_model(target));
      }
    }
    return *slot;
  }

  /// Training report of a model trained in this Lab (empty when loaded).
  std::optional<TrainReport> train_report(Concept target) const {
    auto it = reports_.find(target);
    if (it == reports_.end()) return std::nullopt;
    return it->second;
  }

  /// Activations of a whole split at `layer` under model `target`.
  const Matrix& activations(Concept target, Split s, int layer) {
    const Network& net = model(target);
    net.check_layer(layer);
    auto& per_layer = acts_[{target, s}];
    if (per_layer.empty()) {
      const auto& x = inputs(s);
      per_layer.resize(static_cast<std::size_t>(net.layer_count()));
      for (int l = 0; l < net.layer_count(); ++l) per_layer[static_cast<std::size_t>(l)].resize(net.layer_dim(l), x.cols());
      constexpr Index chunk = 256;
      for (Index start = 0; start < x.cols(); start += chunk) {
        const Index n = std::min(chunk, x.cols() - start);
        Matrix a = x.middleCols(start, n).cast<double>();
        for (int l = 0; l < net.layer_count(); ++l) {
          a = propagate(net, l - 1, std::move(a), l);
          per_layer[static_cast<std::size_t>(l)].middleCols(start, n) = a;
        }
      }
    }
    return per_layer[static_cast<std::size_t>(layer)];
  }

  /// Predicted class of every sample of a split.
  std::vector<int> predictions(Concept target, Split s) {
    const Network& net = model(target);
    const Matrix& logits = activations(target, s, net.layer_count() - 1);
    const Matrix probs = head_probabilities(net.head(), logits);
    std::vector<int> out(static_cast<std::size_t>(probs.cols()));
    for (Index j = 0; j < probs.cols(); ++j) {
      Index k = 0;
      probs.col(j).maxCoeff(&k);
      out[static_cast<std::size_t>(j)] = static_cast<int>(k);
    }
    return out;
  }

  /// Indices (into the split) of samples of class k that model `target` gets right.
  std::vector<Index> true_positives(Concept target, Split s, int k, int limit = -1) {
    const auto pred = predictions(target, s);
    const auto& smp = samples(s);
    std::vector<Index> out;
    for (std::size_t i = 0; i < smp.size(); ++i) {
      if (limit >= 0 && static_cast<int>(out.size()) >= limit) break;
      if (smp[i].label(target) == k && pred[i] == k) out.push_back(static_cast<Index>(i));
    }
    return out;
  }

  ConceptSet concept_set(Concept target, Split s, Concept subject, int layer) {
    const Matrix& a = activations(target, s, layer);
    const auto& smp = samples(s);
    std::vector<Index> pos, neg;
    for (std::size_t i = 0; i < smp.size(); ++i) (smp[i].label(subject) ? pos : neg).push_back(static_cast<Index>(i));
    return {to_string(subject), layer, detail::take_columns(a, pos), detail::take_columns(a, neg)};
  }

  /// B real and B x n_perm permuted CAVs on the concept pool (memoized).
  const CavFamily& cavs(Concept target, Concept subject, int layer) {
    const std::string key = std::string(to_string(target)) + "/" + to_string(subject) + "/" + std::to_string(layer);
    auto it = cav_families_.find(key);
    if (it != cav_families_.end()) return it->second;
    const auto& st = settings();
    const ConceptSet cs = concept_set(target, Split::concept_pool, subject, layer);
    const std::uint64_t seed = derive_key(st.seed, "cav/" + key);
    CavFamily fam;
    fam.real = bootstrap_cavs(cs, st.B, st.reg, seed);
    fam.permuted = permuted_cavs(cs, st.B, st.n_perm, st.reg, seed);
    const int n_tests = static_cast<int>(st.layers.size() * st.concepts.size());
    fam.significance = cav_significance(fam.real, fam.permuted, st.alpha, n_tests);
    return cav_families_.emplace(key, std::move(fam)).first->second;
  }

  /// Baseline spec for `kind` with the configured parameters. Average and
  /// median images come from the concept pool.
  BaselineSpec baseline(BaselineKind kind, std::uint64_t noise_draw = 0) {
    const auto& st = settings();
    BaselineSpec spec;
    if (kind == BaselineKind::pixelwise_average || kind == BaselineKind::pixelwise_median) {
      auto it = references_.find(kind);
      if (it == references_.end())
        it = references_.emplace(kind, BaselineSpec::from_reference(kind, inputs(Split::concept_pool))).first;
      spec = it->second;
    } else {
      spec = BaselineSpec::of(kind);
    }
    spec.lambda = st.forgetting_lambda;
    spec.forgetting_mode = st.forgetting_mode;
    spec.noise_sigma = st.noise_sigma;
    spec.noise_seed = derive_key(st.seed, "baseline/noise", noise_draw);
    spec.entropy.lambda_h = st.entropy.lambda_h;
    spec.entropy.max_iterations = st.entropy.max_iterations;
    return spec;
  }

  /// Attribution cache on selected samples of a split (memoized). Without a
  /// baseline only conceptual sensitivities are available.
  const AttributionCache& cache(Concept target, Split s, int layer, int k, std::span<const Index> columns,
                                std::optional<BaselineKind> base) {
    std::string key = std::string(to_string(target)) + "/" + std::to_string(static_cast<int>(s)) + "/" +
                      std::to_string(layer) + "/" + std::to_string(k) + "/" +
                      (base ? to_string(*base) : "cs-only") + "/";
    for (Index c : columns) key += std::to_string(c) + ",";
    auto it = caches_.find(key);
    if (it != caches_.end()) return *it->second;
    const Network& net = model(target);
    Matrix a = detail::take_columns(activations(target, s, layer), columns);
    auto cache = std::make_unique<AttributionCache>(net, layer, k, std::move(a),
                                                    baseline(base.value_or(BaselineKind::zero_image)),
                                                    settings().m, base.has_value());
    return *caches_.emplace(key, std::move(cache)).first->second;
  }

 private:
  Network train_model(Concept target) {
    const auto& st = settings();
    const std::string name = to_string(target);
    Network net = Network::mlp(bars().input_dim(), st.hidden, HeadKind::sigmoid_binary, 2, st.dropout,
                               derive_key(st.seed, "model/init/" + name));
    net.set_input_shape({bars().height, bars().width, bars().channels()});
    TrainConfig tc = st.train;
    tc.seed = derive_key(st.seed, "model/train/" + name);
    const auto y_train = labels_of(samples(Split::train), target);
    const auto y_val = labels_of(samples(Split::validation), target);
    const auto y_test = labels_of(samples(Split::test), target);
    auto result = train(std::move(net), {&inputs(Split::train), y_train}, tc,
                        DatasetView{&inputs(Split::validation), y_val}, DatasetView{&inputs(Split::test), y_test});
    reports_[target] = result.report;
    // Keep the big training tensor only while a model still needs it.
    const bool other_pending = !models_[other_concept(target)] &&
                               (target == Concept::orientation ? st.color_path : st.orientation_path).empty();
    if (!other_pending) drop_inputs(Split::train);
    return std::move(result.network);
  }

  ExperimentConfig cfg_;
  std::map<Split, std::vector<BarsSample>> samples_;
  std::map<Split, Eigen::MatrixXf> inputs_;
  std::map<Concept, std::unique_ptr<Network>> models_;
  std::map<Concept, TrainReport> reports_;
  std::map<std::pair<Concept, Split>, std::vector<Matrix>> acts_;
  std::map<std::string, CavFamily> cav_families_;
  std::map<BaselineKind, BaselineSpec> references_;
  std::map<std::string, std::unique_ptr<AttributionCache>> caches_;
};

// ---------------------------------------------------------------------------
// Report bundles

struct ReportTable {
  std::string name;
  std::vector<std::string> columns;
  std::vector<json> rows;  // each a JSON array aligned with `columns`

  friend bool operator==(const ReportTable&, const ReportTable&) = default;
};

struct ReportBundle {
  std::string preset;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string code_version = ICSCOPE_VERSION;
  json config = json::object();
  std::vector<ReportTable> tables;
  json details = json::object();  // full distributions and nulls

  const ReportTable* table(const std::string& name) const {
    for (const auto& t : tables)
      if (t.name == name) return &t;
    return nullptr;
  }

  friend bool operator==(const ReportBundle&, const ReportBundle&) = default;
};

inline ReportBundle make_bundle(const std::string& preset, const ExperimentConfig& cfg) {
  ReportBundle b;
  b.preset = preset;
  b.seed = cfg.settings().seed;
  b.config_hash = cfg.hash();
  b.config = cfg.doc();
  return b;
}

inline json bundle_to_json(const ReportBundle& b) {
  json tables = json::array();
  for (const auto& t : b.tables) tables.push_back({{"name", t.name}, {"columns", t.columns}, {"rows", t.rows}});
  return {{"format", "icscope-report"}, {"version", 1},     {"preset", b.preset},
          {"seed", b.seed},             {"config_hash", b.config_hash}, {"code_version", b.code_version},
          {"config", b.config},         {"tables", tables}, {"details", b.details}};
}

inline ReportBundle bundle_from_json(const json& j) {
  try {
    detail::require(j.at("format") == "icscope-report" && j.at("version") == 1, "not an icscope report (v1)");
    ReportBundle b;
    b.preset = j.at("preset");
    b.seed = j.at("seed");
    b.config_hash = j.at("config_hash");
    b.code_version = j.at("code_version");
    b.config = j.at("config");
    for (const auto& t : j.at("tables")) {
      ReportTable table{t.at("name"), t.at("columns").get<std::vector<std::string>>(), {}};
      for (const auto& row : t.at("rows")) {
        detail::require(row.is_array() && row.size() == table.columns.size(), "report row width mismatch");
        table.rows.push_back(row);
      }
      b.tables.push_back(std::move(table));
    }
    b.details = j.at("details");
    return b;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed report: ") + e.what());
  }
}

namespace detail {

inline std::string csv_cell(const json& v) {
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  }
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number_unsigned()) return std::to_string(v.get<unsigned long long>());
  if (v.is_number_float()) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v.get<double>());
    return buf;
  }
  if (v.is_null()) return "";
  return v.dump();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

}  // namespace detail

/// CSV text of one table: a provenance comment line, the header, the rows.
inline std::string table_to_csv(const ReportBundle& b, const ReportTable& t) {
  std::ostringstream out;
  out << "# icscope-report v1 preset=" << b.preset << " table=" << t.name << " seed=" << b.seed
      << " config_hash=" << b.config_hash << "\n";
  for (std::size_t i = 0; i < t.columns.size(); ++i) out << (i ? "," : "") << t.columns[i];
  out << "\n";
  for (const auto& row : t.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << detail::csv_cell(row[i]);
    out << "\n";
  }
  return out.str();
}

enum class ReportFormat { csv, json, both };

inline ReportFormat report_format_from_string(const std::string& s) {
  if (s == "csv") return ReportFormat::csv;
  if (s == "json") return ReportFormat::json;
  if (s == "both") return ReportFormat::both;
  throw ConfigError("unknown report format '" + s + "' (expected csv, json or both)");
}

/// Writes the bundle into `dir` (created if needed) plus a manifest; returns the
/// file names written, manifest last.
inline std::vector<std::string> emit_report(const ReportBundle& b, const std::filesystem::path& dir,
                                            ReportFormat format = ReportFormat::both) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory " + dir.string() + ": " + ec.message());
  std::vector<std::string> files;
  if (format != ReportFormat::json) {
    for (const auto& t : b.tables) {
      const std::string name = t.name + ".csv";
      detail::write_text(dir / name, table_to_csv(b, t));
      files.push_back(name);
    }
  }
  if (format != ReportFormat::csv) {
    detail::write_text(dir / "report.json", bundle_to_json(b).dump(2) + "\n");
    files.push_back("report.json");
  }
  const json manifest{{"format", "icscope-manifest"}, {"version", 1},
                      {"preset", b.preset},           {"seed", b.seed},
                      {"config_hash", b.config_hash}, {"code_version", b.code_version},
                      {"config", b.config},           {"files", files}};
  detail::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  files.push_back("manifest.json");
  return files;
}

inline ReportBundle load_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read report " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("cannot parse report " + path.string());
  return bundle_from_json(j);
}

// ---------------------------------------------------------------------------
// Presets

namespace detail {

inline json to_json_array(std::span<const double> v) { return json(std::vector<double>(v.begin(), v.end())); }

inline std::vector<std::optional<BaselineKind>> baselines_for(Method m, const Settings& st) {
  if (m == Method::sign_cs) return {std::nullopt};
  return {st.baselines.begin(), st.baselines.end()};
}

inline std::string baseline_label(const std::optional<BaselineKind>& b, Lab& lab) {
  return b ? lab.baseline(*b).tag() : std::string("none");
}

}  // namespace detail

struct FailureModeRow {
  Concept concept_name = Concept::color;
  int layer = 0;
  Method method = Method::ics;
  std::string baseline;
  double tcav_median = 0.0;
  double tcav_mean = 0.0;
  double null_median = 0.0;
  double p_value = 1.0;
  bool significant = false;
  double cav_auc_median = 0.0;
  double cav_p_value = 1.0;
  bool cav_significant = false;
  ScoreDistribution distribution;
};

/// Global TCAV distributions of both concepts on the orientation model's
/// vertical true positives, per layer, method and baseline.
inline std::vector<FailureModeRow> failure_mode(Lab& lab) {
  const auto& st = lab.settings();
  const Concept target = Concept::orientation;
  const int k = 1;
  const auto tp = lab.true_positives(target, Split::test, k, st.eval_max_samples);
  detail::require(!tp.empty(), "the orientation model has no vertical true positives");
  const int n_tests = static_cast<int>(st.layers.size() * st.concepts.size());
  std::vector<FailureModeRow> rows;
  for (Concept c : st.concepts) {
    for (int layer : st.layers) {
      const CavFamily& fam = lab.cavs(target, c, layer);
      for (Method method : st.methods) {
        for (const auto& base : detail::baselines_for(method, st)) {
          const auto& cache = lab.cache(target, Split::test, layer, k, tp, base);
          FailureModeRow r;
          r.concept_name = c;
          r.layer = layer;
          r.method = method;
          r.baseline = detail::baseline_label(base, lab);
          r.distribution = global_distribution(cache, method, fam.real, fam.permuted);
          const auto sig = score_significance(r.distribution, st.alpha, n_tests);
          r.tcav_median = sig.statistic;
          r.tcav_mean = mean(r.distribution.values);
          r.null_median = median(r.distribution.null_values);
          r.p_value = sig.p_value;
          r.significant = sig.significant;
          r.cav_auc_median = fam.significance.statistic;
          r.cav_p_value = fam.significance.p_value;
          r.cav_significant = fam.significance.significant;
          rows.push_back(std::move(r));
        }
      }
    }
  }
  return rows;
}

struct LocalRow {
  std::uint64_t sample_id = 0;
  Orientation orientation = Orientation::horizontal;
  BarColor color = BarColor::red;
  Concept concept_name = Concept::color;
  int layer = 0;
  Method method = Method::ics;
  std::string baseline;
  double median = 0.0;
  double null_median = 0.0;
  double p_value = 1.0;
  bool significant = false;
  ScoreDistribution distribution;
};

/// Local score distributions for a few test samples of each orientation,
/// all explained with respect to the configured class of the orientation model.
inline std::vector<LocalRow> local_examples(Lab& lab) {
  const auto& st = lab.settings();
  const Concept target = Concept::orientation;
  std::vector<Index> picks;
  for (int cls : {1, 0}) {
    const auto tp = lab.true_positives(target, Split::test, cls, st.local_per_class);
    picks.insert(picks.end(), tp.begin(), tp.end());
  }
  detail::require(!picks.empty(), "no true positives to explain");
  const auto& smp = lab.samples(Split::test);
  const int n_tests = static_cast<int>(st.layers.size() * st.concepts.size());
  std::vector<LocalRow> rows;
  for (std::size_t j = 0; j < picks.size(); ++j) {
    const auto& s = smp[static_cast<std::size_t>(picks[j])];
    for (Concept c : st.concepts) {
      for (int layer : st.layers) {
        const CavFamily& fam = lab.cavs(target, c, layer);
        for (Method method : st.methods) {
          for (const auto& base : detail::baselines_for(method, st)) {
            const auto& cache = lab.cache(target, Split::test, layer, st.local_class, picks, base);
            LocalRow r;
            r.sample_id = s.id;
            r.orientation = s.orientation;
            r.color = s.color;
            r.concept_name = c;
            r.layer = layer;
            r.method = method;
            r.baseline = detail::baseline_label(base, lab);
            r.distribution = local_distribution(cache, static_cast<Index>(j), method, fam.real, fam.permuted);
            const auto sig = score_significance(r.distribution, st.alpha, n_tests);
            r.median = sig.statistic;
            r.null_median = median(r.distribution.null_values);
            r.p_value = sig.p_value;
            r.significant = sig.significant;
            rows.push_back(std::move(r));
          }
        }
      }
    }
  }
  return rows;
}

/// MCS for one concept, layer, method and baseline. The relevant model is the
/// one trained on `concept`; it is scored on its positive class. The contrast
/// model is scored on every class.
inline McsReport mcs_for(Lab& lab, Concept subject, int layer, Method method, std::optional<BaselineKind> base,
                         int K) {
  const auto& st = lab.settings();
  const Concept other = other_concept(subject);
  McsModel rel{&lab.model(subject), lab.concept_set(subject, Split::mcs_pool, subject, layer), {}};
  McsModel con{&lab.model(other), lab.concept_set(other, Split::mcs_pool, subject, layer), {}};
  const auto tp_rel = lab.true_positives(subject, Split::test, 1, st.eval_max_samples);
  rel.true_positives.push_back(lab.cache(subject, Split::test, layer, 1, tp_rel, base));
  for (int k : {0, 1}) {
    const auto tp = lab.true_positives(other, Split::test, k, st.eval_max_samples);
    con.true_positives.push_back(lab.cache(other, Split::test, layer, k, tp, base));
  }
  McsConfig mc{K, st.reg, derive_key(st.seed, std::string("mcs/") + to_string(subject) + "/" + std::to_string(layer))};
  McsReport r = mcs_bootstrap(rel, con, method, mc);
  r.baseline = detail::baseline_label(base, lab);
  return r;
}

inline std::vector<McsReport> mcs_table(Lab& lab) {
  const auto& st = lab.settings();
  std::vector<McsReport> out;
  for (Concept c : st.concepts)
    for (int layer : st.layers)
      for (Method method : st.methods)
        for (const auto& base : detail::baselines_for(method, st)) out.push_back(mcs_for(lab, c, layer, method, base, st.mcs_K));
  return out;
}

struct BaselineProbabilityRow {
  std::string baseline;
  int layer = 0;
  double mean = 0.0;
  double sd = 0.0;
  int n = 0;
};

/// P(vertical) of the orientation model evaluated at each baseline, per layer.
inline std::vector<BaselineProbabilityRow> baseline_probabilities(Lab& lab) {
  const auto& st = lab.settings();
  const Concept target = Concept::orientation;
  const Network& net = lab.model(target);
  const int n_eval = std::min(st.bp_samples, st.n_test);
  std::vector<Index> eval(static_cast<std::size_t>(n_eval));
  std::iota(eval.begin(), eval.end(), Index{0});
  std::vector<BaselineProbabilityRow> rows;
  auto summarize_row = [&](const std::string& name, int layer, const std::vector<double>& p) {
    const double mu = mean(p);
    double ss = 0.0;
    for (double v : p) ss += (v - mu) * (v - mu);
    rows.push_back({name, layer, mu, p.size() > 1 ? std::sqrt(ss / static_cast<double>(p.size() - 1)) : 0.0,
                    static_cast<int>(p.size())});
  };
  for (const auto& name : st.bp_baselines) {
    for (int layer : st.layers) {
      std::vector<double> p;
      if (name == "average_activation") {
        const Vector mu = lab.activations(target, Split::concept_pool, layer).rowwise().mean();
        p.push_back(head_from_layer(net, layer, mu)(1));
      } else {
        const BaselineKind kind = baseline_from_string(name);
        detail::require(!is_informative_baseline(kind), name + " depends on a CAV and has no fixed probability");
        if (kind == BaselineKind::noise_image) {
          for (int draw = 0; draw < st.noise_draws; ++draw) {
            const Vector a = make_baseline(lab.baseline(kind, static_cast<std::uint64_t>(draw)), net, layer,
                                           Vector::Zero(net.layer_dim(layer)));
            p.push_back(head_from_layer(net, layer, a)(1));
          }
        } else if (is_image_baseline(kind)) {
          const Vector a = make_baseline(lab.baseline(kind), net, layer, Vector::Zero(net.layer_dim(layer)));
          p.push_back(head_from_layer(net, layer, a)(1));
        } else {
          const Matrix acts = detail::take_columns(lab.activations(target, Split::test, layer), eval);
          const BaselineSpec spec = lab.baseline(kind);
          p.resize(eval.size());
          parallel_for(eval.size(), [&](std::size_t j) {
            const Vector a = make_baseline(spec, net, layer, acts.col(static_cast<Index>(j)));
            p[j] = head_from_layer(net, layer, a)(1);
          });
        }
      }
      summarize_row(name, layer, p);
    }
  }
  return rows;
}

struct InfluenceRow {
  Concept model = Concept::orientation;
  Concept concept_name = Concept::color;
  double G = 0.0;
  double g_max = 0.0;
  int n = 0;
};

inline std::vector<InfluenceRow> influence(Lab& lab) {
  const auto& st = lab.settings();
  std::vector<InfluenceRow> rows;
  for (Concept target : {Concept::orientation, Concept::color}) {
    for (Concept c : st.influence_concepts) {
      const auto rep = concept_influence(lab.model(target), lab.samples(Split::test), c, lab.bars());
      rows.push_back({target, c, rep.G, *std::max_element(rep.g.begin(), rep.g.end()), static_cast<int>(rep.g.size())});
    }
  }
  return rows;
}

struct NdAblationRow {
  bool augmented = false;
  NdRow row;
};

inline std::vector<NdAblationRow> nd_ablation_preset(Lab& lab) {
  const auto& st = lab.settings();
  const Concept c = st.ablation_concept, other = other_concept(c);
  const int layer = st.ablation_layer;
  const auto base = std::optional<BaselineKind>(st.ablation_baseline);
  NdModel rel{&lab.model(c), lab.activations(c, Split::concept_pool, layer), {}};
  NdModel con{&lab.model(other), lab.activations(other, Split::concept_pool, layer), {}};
  rel.true_positives.push_back(
      lab.cache(c, Split::test, layer, 1, lab.true_positives(c, Split::test, 1, st.eval_max_samples), base));
  for (int k : {0, 1})
    con.true_positives.push_back(
        lab.cache(other, Split::test, layer, k, lab.true_positives(other, Split::test, k, st.eval_max_samples), base));
  std::vector<NdAblationRow> out;
  for (bool aug : st.ablation_augment) {
    NdAblationConfig cfg;
    cfg.ratios = st.ablation_ratios;
    cfg.replicates = st.ablation_replicates;
    cfg.augment = aug;
    cfg.augment_copies = st.ablation_copies;
    cfg.reg = st.reg;
    cfg.seed = derive_key(st.seed, "nd-ablation");
    for (auto& r : nd_ablation(rel, con, lab.samples(Split::concept_pool), c, layer, Method::ics, cfg, lab.bars()))
      out.push_back({aug, std::move(r)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bundles for each preset

inline ReportTable mcs_report_table(std::span<const McsReport> reports, const std::string& name = "mcs") {
  ReportTable t{name, {"concept", "layer", "method", "baseline", "median", "ci_low", "ci_high"}, {}};
  for (const auto& r : reports)
    t.rows.push_back(json::array({r.concept_name, r.layer, to_string(r.method), r.baseline, r.median, r.ci_low, r.ci_high}));
  return t;
}

inline json mcs_report_details(std::span<const McsReport> reports) {
  json arr = json::array();
  for (const auto& r : reports)
    arr.push_back({{"concept", r.concept_name},
                   {"layer", r.layer},
                   {"method", to_string(r.method)},
                   {"baseline", r.baseline},
                   {"samples", detail::to_json_array(r.samples)},
                   {"tcav_relevant", detail::to_json_array(r.tcav_relevant)},
                   {"tcav_contrast", detail::to_json_array(r.tcav_contrast)}});
  return arr;
}

inline json model_summary(Lab& lab) {
  json out = json::object();
  for (Concept c : {Concept::orientation, Concept::color}) {
    if (auto rep = lab.train_report(c)) {
      out[to_string(c)] = {{"epochs", rep->epochs_run},
                           {"train_accuracy", rep->train_accuracy},
                           {"validation_accuracy", rep->validation_accuracy.value_or(-1.0)},
                           {"test_accuracy", rep->test_accuracy.value_or(-1.0)}};
    }
  }
  return out;
}

inline ReportBundle run_preset(const std::string& name, Lab& lab) {
  ReportBundle b = make_bundle(name, lab.config());
  if (name == "failure-mode") {
    const auto rows = failure_mode(lab);
    ReportTable t{"failure_mode",
                  {"model", "concept", "layer", "method", "baseline", "tcav_median", "tcav_mean", "null_median",
                   "p_value", "significant", "cav_auc_median", "cav_p_value", "cav_significant"},
                  {}};
    json dists = json::array();
    for (const auto& r : rows) {
      t.rows.push_back(json::array({"orientation", to_string(r.concept_name), r.layer, to_string(r.method), r.baseline,
                                    r.tcav_median, r.tcav_mean, r.null_median, r.p_value, r.significant,
                                    r.cav_auc_median, r.cav_p_value, r.cav_significant}));
      dists.push_back({{"concept", to_string(r.concept_name)},
                       {"layer", r.layer},
                       {"method", to_string(r.method)},
                       {"baseline", r.baseline},
                       {"values", r.distribution.values},
                       {"null_values", r.distribution.null_values}});
    }
    b.tables.push_back(std::move(t));
    b.details["distributions"] = dists;
  } else if (name == "local-examples") {
    const auto rows = local_examples(lab);
    ReportTable t{"local_examples",
                  {"sample_id", "orientation", "color", "concept", "layer", "class", "method", "baseline", "median",
                   "null_median", "p_value", "significant"},
                  {}};
    json dists = json::array();
    for (const auto& r : rows) {
      t.rows.push_back(json::array({r.sample_id, r.orientation == Orientation::vertical ? "vertical" : "horizontal",
                                    r.color == BarColor::green ? "green" : "red", to_string(r.concept_name), r.layer,
                                    lab.settings().local_class, to_string(r.method), r.baseline, r.median,
                                    r.null_median, r.p_value, r.significant}));
      dists.push_back({{"sample_id", r.sample_id},
                       {"concept", to_string(r.concept_name)},
                       {"layer", r.layer},
                       {"method", to_string(r.method)},
                       {"values", r.distribution.values},
                       {"null_values", r.distribution.null_values}});
    }
    b.tables.push_back(std::move(t));
    b.details["distributions"] = dists;
  } else if (name == "mcs-table") {
    const auto reports = mcs_table(lab);
    b.tables.push_back(mcs_report_table(reports));
    b.details["mcs"] = mcs_report_details(reports);
  } else if (name == "baseline-probabilities") {
    const auto rows = baseline_probabilities(lab);
    ReportTable t{"baseline_probabilities", {"baseline", "layer", "p_vertical_mean", "p_vertical_sd", "n"}, {}};
    for (const auto& r : rows) t.rows.push_back(json::array({r.baseline, r.layer, r.mean, r.sd, r.n}));
    b.tables.push_back(std::move(t));
  } else if (name == "influence") {
    const auto rows = influence(lab);
    ReportTable t{"influence", {"model", "concept", "G", "g_max", "n"}, {}};
    for (const auto& r : rows)
      t.rows.push_back(json::array({to_string(r.model), to_string(r.concept_name), r.G, r.g_max, r.n}));
    b.tables.push_back(std::move(t));
  } else if (name == "nd-ablation") {
    const auto rows = nd_ablation_preset(lab);
    ReportTable t{"nd_ablation",
                  {"concept", "layer", "method", "baseline", "ratio", "augmented", "n_per_side", "n_train_per_side",
                   "median", "ci_low", "ci_high"},
                  {}};
    std::vector<McsReport> reports;
    for (const auto& r : rows) {
      const auto& m = r.row.report;
      t.rows.push_back(json::array({m.concept_name, m.layer, to_string(m.method), m.baseline, r.row.ratio, r.augmented,
                                    r.row.n_per_side, r.row.n_train_per_side, m.median, m.ci_low, m.ci_high}));
      reports.push_back(m);
    }
    b.tables.push_back(std::move(t));
    b.details["mcs"] = mcs_report_details(reports);
  } else {
    throw ConfigError("unknown preset '" + name +
                      "' (expected failure-mode, local-examples, mcs-table, baseline-probabilities, influence or "
                      "nd-ablation)");
  }
  b.details["models"] = model_summary(lab);
  return b;
}

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"failure-mode", "local-examples", "mcs-table",
                                              "baseline-probabilities", "influence", "nd-ablation"};
  return names;
}

inline ReportBundle run_preset(const std::string& name, const ExperimentConfig& cfg) {
  detail::require(std::find(preset_names().begin(), preset_names().end(), name) != preset_names().end(),
                  "unknown preset '" + name + "'");
  Lab lab(cfg);
  return run_preset(name, lab);
}

}  // namespace icscope
