#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "icscope/icscope.hpp"

namespace fs = std::filesystem;
using namespace icscope;

namespace {

struct ConfigArgs {
  std::string file;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", file, "Experiment config (JSON)")->check(CLI::ExistingFile);
    cmd->add_option("--set", overrides, "Override a config value, e.g. --set cav.B=20")->take_all();
    cmd->add_option("--seed", seed, "Master seed (shortcut for --set seed=N)");
  }

  ExperimentConfig load() const {
    ExperimentConfig cfg = file.empty() ? ExperimentConfig() : ExperimentConfig::from_file(file);
    for (const auto& o : overrides) cfg.set(o);
    if (seed) cfg.set("seed", std::to_string(*seed));
    return cfg;
  }
};

fs::path preset_dir(const ExperimentConfig& cfg, const std::string& out, const std::string& preset) {
  return out.empty() ? fs::path(cfg.settings().output_dir) / preset : fs::path(out);
}

void print_written(const fs::path& dir, const std::vector<std::string>& files) {
  for (const auto& f : files) std::cout << (dir / f).string() << "\n";
}

int run_named_preset(const std::string& preset, const ConfigArgs& args, const std::string& out,
                     const std::string& format) {
  const ExperimentConfig cfg = args.load();
  const ReportFormat fmt = report_format_from_string(format);
  const ReportBundle bundle = run_preset(preset, cfg);
  const fs::path dir = preset_dir(cfg, out, preset);
  print_written(dir, emit_report(bundle, dir, fmt));
  return 0;
}

/// Evaluation images: either a count drawn from the test split of `seed`, or an
/// exported dataset directory.
struct EvalSet {
  std::vector<std::uint64_t> ids;
  std::vector<int> orientation;
  Matrix inputs;
};

EvalSet eval_set(const std::string& samples, std::uint64_t seed, const BarsConfig& bars) {
  EvalSet e;
  if (fs::is_directory(samples)) {
    const auto images = import_dataset(samples);
    detail::require(!images.empty(), "dataset " + samples + " is empty");
    e.inputs.resize(static_cast<Index>(images.front().image.size()), static_cast<Index>(images.size()));
    for (std::size_t j = 0; j < images.size(); ++j) {
      detail::require_dims(images[j].image.size() == images.front().image.size(), "images differ in size");
      e.ids.push_back(images[j].id);
      e.orientation.push_back(images[j].orientation);
      for (std::size_t i = 0; i < images[j].image.size(); ++i)
        e.inputs(static_cast<Index>(i), static_cast<Index>(j)) = images[j].image.pixels[i];
    }
    return e;
  }
  long long n = 0;
  try {
    std::size_t used = 0;
    n = std::stoll(samples, &used);
    detail::require(used == samples.size(), "");
  } catch (const std::exception&) {
    throw ConfigError("--samples must be a count or an exported dataset directory: " + samples);
  }
  detail::require(n >= 1, "--samples must be at least 1");
  const auto smp = generate(static_cast<std::size_t>(n), split_seed(seed, Split::test), bars);
  for (const auto& s : smp) {
    e.ids.push_back(s.id);
    e.orientation.push_back(static_cast<int>(s.orientation));
  }
  e.inputs = render_matrix(smp, bars).cast<double>();
  return e;
}

/// Real and permuted CAVs of a bundle grouped by (concept, layer).
struct CavGroup {
  std::vector<Cav> real, permuted;
};

std::map<std::pair<std::string, int>, CavGroup> group_cavs(const std::vector<Cav>& cavs) {
  std::map<std::pair<std::string, int>, CavGroup> out;
  for (const auto& c : cavs) {
    auto& g = out[{c.concept_name, c.layer}];
    (c.provenance.permuted ? g.permuted : g.real).push_back(c);
  }
  return out;
}

BaselineSpec baseline_arg(const std::string& name, std::optional<double> lambda, const Settings& st) {
  BaselineSpec spec = BaselineSpec::of(baseline_from_string(name));
  detail::require(spec.kind != BaselineKind::pixelwise_average && spec.kind != BaselineKind::pixelwise_median,
                  "average/median baselines need a reference set; use run-preset for those");
  spec.forgetting_mode = lambda ? ForgettingMode::fixed : st.forgetting_mode;
  spec.lambda = lambda.value_or(st.forgetting_lambda);
  spec.noise_sigma = st.noise_sigma;
  spec.noise_seed = derive_key(st.seed, "baseline/noise", 0);
  spec.entropy = st.entropy;
  return spec;
}

int run(int argc, char** argv) {
  CLI::App app{"icscope: concept-based attribution for small dense networks"};
  app.set_version_flag("--version", std::string(ICSCOPE_VERSION));
  app.require_subcommand(1);

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "Render a BARS dataset to disk");
  long long gen_n = 0;
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  ConfigArgs gen_cfg;
  gen->add_option("--n", gen_n, "Number of images")->required()->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "Dataset seed");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--config", gen_cfg.file, "Config for image geometry")->check(CLI::ExistingFile);
  gen->add_option("--set", gen_cfg.overrides, "Config override")->take_all();
  gen->callback([&] {
    const auto cfg = gen_cfg.load();
    const auto& bars = cfg.settings().bars;
    export_dataset(gen_out, generate(static_cast<std::size_t>(gen_n), gen_seed, bars), bars);
    std::cout << gen_out << "\n";
  });

  // train-model
  auto* trn = app.add_subcommand("train-model", "Train the orientation or color model");
  std::string trn_target, trn_out;
  ConfigArgs trn_cfg;
  trn->add_option("--target", trn_target, "orientation or color")->required();
  trn->add_option("--out", trn_out, "Output model file (JSON)")->required();
  trn_cfg.attach(trn);
  trn->callback([&] {
    Lab lab(trn_cfg.load());
    const Concept target = concept_from_string(trn_target);
    save_network(lab.model(target), trn_out);
    const auto rep = *lab.train_report(target);
    std::cout << json{{"model", trn_out},
                      {"epochs", rep.epochs_run},
                      {"train_accuracy", rep.train_accuracy},
                      {"validation_accuracy", rep.validation_accuracy.value_or(-1.0)},
                      {"test_accuracy", rep.test_accuracy.value_or(-1.0)}}
                     .dump()
              << "\n";
  });

  // train-cavs
  auto* tc = app.add_subcommand("train-cavs", "Fit bootstrap and permuted CAVs on a concept pool");
  std::string tc_model, tc_concept, tc_out, tc_reg = "l2";
  int tc_layer = 0, tc_B = 100, tc_perm = 10, tc_pool = 2000;
  double tc_strength = 1e-2;
  std::uint64_t tc_seed = 0;
  ConfigArgs tc_cfg;
  tc->add_option("--model", tc_model, "Model file")->required()->check(CLI::ExistingFile);
  tc->add_option("--layer", tc_layer, "Layer index")->required();
  tc->add_option("--concept", tc_concept, "orientation or color")->required();
  tc->add_option("--B", tc_B, "Bootstrap CAVs")->check(CLI::PositiveNumber);
  tc->add_option("--n-perm", tc_perm, "Permuted CAVs per bootstrap")->check(CLI::PositiveNumber);
  tc->add_option("--reg", tc_reg, "l2 or elastic-net");
  tc->add_option("--strength", tc_strength, "Regularization strength");
  tc->add_option("--pool", tc_pool, "Concept pool size")->check(CLI::Range(8, 1000000));
  tc->add_option("--seed", tc_seed, "Seed for the pool and the resamples");
  tc->add_option("--out", tc_out, "Output CAV bundle (JSON)")->required();
  tc->add_option("--config", tc_cfg.file, "Config for image geometry")->check(CLI::ExistingFile);
  tc->add_option("--set", tc_cfg.overrides, "Config override")->take_all();
  tc->callback([&] {
    const auto cfg = tc_cfg.load();
    const Network net = load_network(tc_model);
    net.check_layer(tc_layer);
    const Concept subject = concept_from_string(tc_concept);
    const auto pool = generate(static_cast<std::size_t>(tc_pool), split_seed(tc_seed, Split::concept_pool),
                               cfg.settings().bars);
    const Matrix acts = activations_at(net, render_matrix(pool, cfg.settings().bars).cast<double>(), tc_layer);
    std::vector<Index> pos, neg;
    for (std::size_t i = 0; i < pool.size(); ++i) (pool[i].label(subject) ? pos : neg).push_back(static_cast<Index>(i));
    const ConceptSet cs{to_string(subject), tc_layer, detail::take_columns(acts, pos), detail::take_columns(acts, neg)};
    Regularization reg;
    reg.kind = reg_from_string(tc_reg);
    reg.strength = tc_strength;
    reg.validate();
    auto cavs = bootstrap_cavs(cs, tc_B, reg, tc_seed);
    const auto perm = permuted_cavs(cs, tc_B, tc_perm, reg, tc_seed);
    const auto sig = cav_significance(cavs, perm);
    cavs.insert(cavs.end(), perm.begin(), perm.end());
    save_cavs(cavs, tc_out);
    std::cout << json{{"cavs", tc_out},
                      {"median_auc", sig.statistic},
                      {"p_value", sig.p_value},
                      {"significant", sig.significant}}
                     .dump()
              << "\n";
  });

  // attribute
  auto* at = app.add_subcommand("attribute", "Local CS and ICS for every (sample, concept, layer)");
  std::string at_model, at_cavs, at_baseline = "zero_image", at_samples = "16", at_out;
  std::optional<double> at_lambda;
  int at_steps = 50, at_class = 1;
  ConfigArgs at_cfg;
  at->add_option("--model", at_model, "Model file")->required()->check(CLI::ExistingFile);
  at->add_option("--cavs", at_cavs, "CAV bundle")->required()->check(CLI::ExistingFile);
  at->add_option("--baseline", at_baseline, "Baseline kind");
  at->add_option("--lambda", at_lambda, "Fixed step for concept_forgetting (default: reflection)");
  at->add_option("--steps", at_steps, "Quadrature steps m")->check(CLI::PositiveNumber);
  at->add_option("--samples", at_samples, "Count of test images, or an exported dataset directory");
  at->add_option("--class", at_class, "Explained class");
  at->add_option("--out", at_out, "Output CSV")->required();
  at_cfg.attach(at);
  at->callback([&] {
    const auto cfg = at_cfg.load();
    const Network net = load_network(at_model);
    net.check_class(at_class);
    const auto groups = group_cavs(load_cavs(at_cavs));
    const BaselineSpec spec = baseline_arg(at_baseline, at_lambda, cfg.settings());
    const EvalSet e = eval_set(at_samples, cfg.settings().seed, cfg.settings().bars);
    ReportTable t{"attributions", {"sample_id", "concept", "layer", "class", "method", "baseline", "m", "value"}, {}};
    std::size_t unbounded = 0;  // ICS is not guaranteed to lie in [-1, 1]; report, never clamp
    for (const auto& [key, g] : groups) {
      detail::require(!g.real.empty(), "bundle has no real CAVs for " + key.first);
      const AttributionCache cache(net, key.second, at_class, activations_at(net, e.inputs, key.second), spec, at_steps);
      for (Method method : {Method::sign_cs, Method::ics}) {
        std::vector<std::vector<double>> per_cav;
        for (const auto& c : g.real) per_cav.push_back(cache.values(method, c));
        for (std::size_t j = 0; j < e.ids.size(); ++j) {
          std::vector<double> v;
          for (const auto& p : per_cav) v.push_back(p[j]);
          if (method == Method::ics)
            unbounded += static_cast<std::size_t>(std::count_if(v.begin(), v.end(), [](double x) { return std::abs(x) > 1.0; }));
          t.rows.push_back(json::array({e.ids[j], key.first, key.second, at_class,
                                        method == Method::sign_cs ? "cs" : "ics", spec.tag(), at_steps, median(v)}));
        }
      }
    }
    if (unbounded > 0) std::cerr << "icscope: " << unbounded << " ICS values outside [-1, 1] (kept as computed)\n";
    ReportBundle b = make_bundle("attribute", cfg);
    detail::write_text(at_out, table_to_csv(b, t));
    std::cout << at_out << "\n";
  });

  // global
  auto* gl = app.add_subcommand("global", "Global TCAV distributions and their significance");
  std::string gl_model, gl_cavs, gl_baseline = "zero_image", gl_samples = "2000", gl_out, gl_format = "both";
  std::vector<std::string> gl_methods{"sign_cs", "ics"};
  std::optional<double> gl_lambda;
  int gl_steps = 50, gl_class = 1;
  double gl_alpha = 0.05;
  ConfigArgs gl_cfg;
  gl->add_option("--model", gl_model, "Model file")->required()->check(CLI::ExistingFile);
  gl->add_option("--cavs", gl_cavs, "CAV bundle with permuted CAVs")->required()->check(CLI::ExistingFile);
  gl->add_option("--method", gl_methods, "sign_cs and/or ics")->take_all();
  gl->add_option("--baseline", gl_baseline, "Baseline kind for ics");
  gl->add_option("--lambda", gl_lambda, "Fixed step for concept_forgetting");
  gl->add_option("--steps", gl_steps, "Quadrature steps m")->check(CLI::PositiveNumber);
  gl->add_option("--samples", gl_samples, "Count of test images, or an exported dataset directory");
  gl->add_option("--class", gl_class, "Explained class (scored on its true positives)");
  gl->add_option("--alpha", gl_alpha, "Family-wise significance level");
  gl->add_option("--out", gl_out, "Output directory")->required();
  gl->add_option("--format", gl_format, "csv, json or both");
  gl_cfg.attach(gl);
  gl->callback([&] {
    const auto cfg = gl_cfg.load();
    const ReportFormat fmt = report_format_from_string(gl_format);
    const Network net = load_network(gl_model);
    net.check_class(gl_class);
    const auto groups = group_cavs(load_cavs(gl_cavs));
    const BaselineSpec spec = baseline_arg(gl_baseline, gl_lambda, cfg.settings());
    const EvalSet e = eval_set(gl_samples, cfg.settings().seed, cfg.settings().bars);
    std::vector<Index> tp;
    const Matrix probs = head_from_layer_batch(net, -1, e.inputs);
    for (Index j = 0; j < probs.cols(); ++j) {
      Index k = 0;
      probs.col(j).maxCoeff(&k);
      if (k == gl_class && e.orientation[static_cast<std::size_t>(j)] == gl_class) tp.push_back(j);
    }
    detail::require(!tp.empty(), "no true positives of the explained class among the samples");
    const Matrix x = detail::take_columns(e.inputs, tp);
    ReportBundle b = make_bundle("global", cfg);
    ReportTable t{"global",
                  {"concept", "layer", "method", "baseline", "tcav_median", "null_median", "p_value", "significant"},
                  {}};
    json dists = json::array();
    const int n_tests = static_cast<int>(groups.size());
    for (const auto& [key, g] : groups) {
      detail::require(!g.real.empty() && !g.permuted.empty(),
                      "significance needs real and permuted CAVs for " + key.first);
      const AttributionCache cache(net, key.second, gl_class, activations_at(net, x, key.second), spec, gl_steps);
      for (const auto& name : gl_methods) {
        const Method method = method_from_string(name);
        ScoreDistribution d = global_distribution(cache, method, g.real, g.permuted);
        const auto sig = score_significance(d, gl_alpha, n_tests);
        const std::string base = method == Method::sign_cs ? "none" : spec.tag();
        t.rows.push_back(json::array({key.first, key.second, to_string(method), base, sig.statistic,
                                      median(d.null_values), sig.p_value, sig.significant}));
        dists.push_back({{"concept", key.first},
                         {"layer", key.second},
                         {"method", to_string(method)},
                         {"values", d.values},
                         {"null_values", d.null_values}});
      }
    }
    b.tables.push_back(std::move(t));
    b.details["distributions"] = dists;
    print_written(gl_out, emit_report(b, gl_out, fmt));
  });

  // Preset-backed commands.
  struct PresetCommand {
    const char* command;
    const char* preset;
    const char* help;
  };
  const PresetCommand aliases[] = {
      {"mcs", "mcs-table", "Model contrast scores with bootstrap intervals"},
      {"influence", "influence", "Counterfactual concept influence of both models"},
      {"ablate-nd", "nd-ablation", "MCS as a function of concept samples per dimension"},
  };
  struct PresetArgs {
    ConfigArgs cfg;
    std::string out, format = "both";
  };
  std::vector<std::unique_ptr<PresetArgs>> preset_args;
  for (const auto& a : aliases) {
    auto* cmd = app.add_subcommand(a.command, a.help);
    auto& pa = *preset_args.emplace_back(std::make_unique<PresetArgs>());
    pa.cfg.attach(cmd);
    cmd->add_option("--out", pa.out, "Output directory (default: <output_dir>/<preset>)");
    cmd->add_option("--format", pa.format, "csv, json or both");
    const std::string preset = a.preset;
    cmd->callback([&pa, preset] { run_named_preset(preset, pa.cfg, pa.out, pa.format); });
  }

  auto* rp = app.add_subcommand("run-preset", "Run a named experiment preset");
  std::string rp_name, rp_out, rp_format = "both";
  ConfigArgs rp_cfg;
  rp->add_option("name", rp_name, "failure-mode, local-examples, mcs-table, baseline-probabilities, influence, nd-ablation")
      ->required();
  rp_cfg.attach(rp);
  rp->add_option("--out", rp_out, "Output directory (default: <output_dir>/<preset>)");
  rp->add_option("--format", rp_format, "csv, json or both");
  rp->callback([&] { run_named_preset(rp_name, rp_cfg, rp_out, rp_format); });

  auto* rep = app.add_subcommand("report", "Re-emit a JSON report as CSV and/or JSON");
  std::string rep_in, rep_out, rep_format = "csv";
  rep->add_option("--input", rep_in, "report.json")->required()->check(CLI::ExistingFile);
  rep->add_option("--out", rep_out, "Output directory")->required();
  rep->add_option("--format", rep_format, "csv, json or both");
  rep->callback([&] { print_written(rep_out, emit_report(load_report(rep_in), rep_out, report_format_from_string(rep_format))); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "icscope: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "icscope: numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "icscope: " << e.what() << "\n";
    return 3;
  }
}
