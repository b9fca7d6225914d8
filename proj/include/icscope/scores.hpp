#pragma once

// Global aggregation of local attributions, significance against permuted-CAV
// nulls, model contrast scores with bootstrap intervals, counterfactual concept
// influence and the n/d ablation.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "icscope/attribution.hpp"
#include "icscope/bars.hpp"
#include "icscope/cav.hpp"
#include "icscope/errors.hpp"
#include "icscope/network.hpp"
#include "icscope/parallel.hpp"
#include "icscope/stats.hpp"

namespace icscope {

enum class Method { sign_cs, ics };

inline const char* to_string(Method m) { return m == Method::sign_cs ? "sign_cs" : "ics"; }
inline Method method_from_string(const std::string& name) {
  if (name == "sign_cs" || name == "cs") return Method::sign_cs;
  if (name == "ics") return Method::ics;
  throw ConfigError("unknown method '" + name + "' (expected sign_cs or ics)");
}

/// Fraction of strictly positive values.
inline double tcav_sign(std::span<const double> cs_values) {
  detail::require(!cs_values.empty(), "tcav_sign of an empty list");
  const auto positive = std::count_if(cs_values.begin(), cs_values.end(), [](double v) { return v > 0.0; });
  return static_cast<double>(positive) / static_cast<double>(cs_values.size());
}

/// Arithmetic mean of ICS values.
inline double tcav_ics(std::span<const double> ics_values) {
  detail::require(!ics_values.empty(), "tcav_ics of an empty list");
  return mean(ics_values);
}

inline double tcav_score(Method method, std::span<const double> values) {
  return method == Method::sign_cs ? tcav_sign(values) : tcav_ics(values);
}

enum class ScoreLevel { local, global };

struct ScoreDistribution {
  std::vector<double> values;       // per real bootstrap CAV
  std::vector<double> null_values;  // per permuted CAV
  ScoreLevel level = ScoreLevel::global;
  double p_value = 1.0;
};

/// Two-sided rank test of the median score against the permuted-CAV null:
/// p = (1 + #{|null - med_null| >= |med_obs - med_null|}) / (1 + #null).
inline SignificanceResult score_significance(ScoreDistribution& dist, double alpha = 0.05, int correction_n = 1) {
  detail::require(!dist.values.empty() && !dist.null_values.empty(),
                  "score significance needs observed and null values");
  detail::require(alpha > 0.0 && alpha < 1.0 && correction_n >= 1, "invalid alpha or correction count");
  const double med_null = median(dist.null_values);
  SignificanceResult r;
  r.statistic = median(dist.values);
  const double gap = std::abs(r.statistic - med_null);
  std::size_t extreme = 0;
  for (double v : dist.null_values)
    if (std::abs(v - med_null) >= gap) ++extreme;
  r.p_value = static_cast<double>(1 + extreme) / static_cast<double>(1 + dist.null_values.size());
  r.n_bootstraps = static_cast<int>(dist.values.size());
  r.n_permutations_per_bootstrap = static_cast<int>(dist.null_values.size() / dist.values.size());
  r.alpha = alpha;
  r.n_tests = correction_n;
  r.significant = r.p_value < alpha / correction_n;
  dist.p_value = r.p_value;
  return r;
}

/// Model contrast score: relevant TCAV minus the largest TCAV of the contrast model.
inline double mcs(double tcav_relevant, std::span<const double> tcav_irrelevant_per_class) {
  detail::require(!tcav_irrelevant_per_class.empty(), "MCS needs the contrast model's per-class scores");
  return tcav_relevant - *std::max_element(tcav_irrelevant_per_class.begin(), tcav_irrelevant_per_class.end());
}

// ---------------------------------------------------------------------------
// Attribution cache: everything about a (model, layer, class, baseline, sample
// set) that does not depend on the CAV, so CS/ICS for many CAVs cost O(n d).

class AttributionCache {
 public:
  AttributionCache() = default;

  /// `activations` holds the evaluation samples at `layer` (one per column).
  AttributionCache(const Network& net, int layer, int k, Matrix activations, BaselineSpec baseline, int m,
                   bool with_ics = true)
      : net_(&net), layer_(layer), k_(k), m_(m), baseline_(std::move(baseline)), acts_(std::move(activations)) {
    net.check_layer(layer);
    net.check_class(k);
    detail::check_rows(net, layer, acts_.rows());
    detail::require(m >= 1, "quadrature needs m >= 1");
    detail::require(acts_.cols() >= 1, "attribution cache needs at least one sample");
    baseline_.validate();
    const Index n = acts_.cols(), d = acts_.rows();
    grads_ = grad_head_batch(net, k, layer, acts_);
    h_ = head_from_layer_batch(net, layer, acts_).row(k).transpose();
    if (!with_ics || is_informative_baseline(baseline_.kind)) return;

    base_.resize(d, n);
    path_.resize(d, n);
    Vector shared;
    if (is_image_baseline(baseline_.kind)) shared = make_baseline(baseline_, net, layer, acts_.col(0));
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t jj) {
      const auto j = static_cast<Index>(jj);
      const Vector a = acts_.col(j);
      const Vector a_base = shared.size() ? shared : make_baseline(baseline_, net, layer, a);
      base_.col(j) = a_base;
      path_.col(j) = path_gradient(net, k, layer, a, a_base, m);
    });
    if (!path_.allFinite()) throw NumericalError("non-finite path gradient in attribution cache");
  }

  Index size() const { return acts_.cols(); }
  int layer() const { return layer_; }
  int k() const { return k_; }
  int m() const { return m_; }
  const BaselineSpec& baseline() const { return baseline_; }
  const Matrix& activations() const { return acts_; }
  const Matrix& gradients() const { return grads_; }
  /// Baseline activations (empty for CAV-dependent baselines).
  const Matrix& baselines() const { return base_; }

  std::vector<double> cs(const Cav& cav) const {
    check(cav);
    const Vector s = grads_.transpose() * cav.v_unit;
    return {s.data(), s.data() + s.size()};
  }

  std::vector<double> ics(const Cav& cav) const {
    check(cav);
    detail::require(net_ != nullptr, "empty attribution cache");
    if (is_informative_baseline(baseline_.kind)) {
      // a - a' is parallel to v, so ICS reduces exactly to h_k(a) - h_k(a').
      Matrix moved(acts_.rows(), acts_.cols());
      for (Index j = 0; j < acts_.cols(); ++j)
        moved.col(j) = make_baseline(baseline_, *net_, layer_, acts_.col(j), &cav);
      const Vector hb = head_from_layer_batch(*net_, layer_, moved).row(k_).transpose();
      const Vector s = h_ - hb;
      return {s.data(), s.data() + s.size()};
    }
    detail::require(path_.size() > 0, "attribution cache was built without ICS data");
    const Vector proj = (acts_ - base_).transpose() * cav.v_unit;
    const Vector dir = path_.transpose() * cav.v_unit;
    const Vector s = proj.cwiseProduct(dir);
    return {s.data(), s.data() + s.size()};
  }

  std::vector<double> values(Method method, const Cav& cav) const {
    return method == Method::sign_cs ? cs(cav) : ics(cav);
  }

  double tcav(Method method, const Cav& cav) const { return tcav_score(method, values(method, cav)); }

 private:
  void check(const Cav& cav) const {
    detail::require_dims(cav.layer == layer_, "CAV layer " + std::to_string(cav.layer) +
                                                  " does not match cache layer " + std::to_string(layer_));
    detail::require_dims(cav.v_unit.size() == acts_.rows(), "CAV width does not match the cache");
  }

  const Network* net_ = nullptr;
  int layer_ = 0;
  int k_ = 0;
  int m_ = 1;
  BaselineSpec baseline_;
  Matrix acts_;
  Matrix grads_;
  Vector h_;
  Matrix base_;
  Matrix path_;
};

/// Global distribution: one TCAV score per real CAV and per permuted CAV.
inline ScoreDistribution global_distribution(const AttributionCache& cache, Method method,
                                             std::span<const Cav> real, std::span<const Cav> permuted) {
  ScoreDistribution d;
  d.level = ScoreLevel::global;
  d.values.resize(real.size());
  d.null_values.resize(permuted.size());
  parallel_for(real.size(), [&](std::size_t i) { d.values[i] = cache.tcav(method, real[i]); });
  parallel_for(permuted.size(), [&](std::size_t i) { d.null_values[i] = cache.tcav(method, permuted[i]); });
  return d;
}

/// Local distribution for one sample: its score under each real and permuted CAV.
inline ScoreDistribution local_distribution(const AttributionCache& cache, Index sample, Method method,
                                            std::span<const Cav> real, std::span<const Cav> permuted) {
  detail::require(sample >= 0 && sample < cache.size(), "sample index out of range");
  ScoreDistribution d;
  d.level = ScoreLevel::local;
  auto one = [&](const Cav& c) {
    // Only the selected column matters; evaluate it directly.
    if (method == Method::sign_cs) return cache.gradients().col(sample).dot(c.v_unit);
    return cache.ics(c)[static_cast<std::size_t>(sample)];
  };
  for (const auto& c : real) d.values.push_back(one(c));
  for (const auto& c : permuted) d.null_values.push_back(one(c));
  return d;
}

// ---------------------------------------------------------------------------
// Model contrast score with bootstrap confidence interval

struct McsReport {
  std::string concept_name;
  int layer = 0;
  Method method = Method::ics;
  std::string baseline;
  double median = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::vector<double> samples;         // per-bootstrap MCS
  std::vector<double> tcav_relevant;   // per-bootstrap TCAV of the relevant model
  std::vector<double> tcav_contrast;   // per-bootstrap max TCAV of the contrast model
};

inline void summarize(McsReport& r) {
  r.median = median(r.samples);
  r.ci_low = percentile(r.samples, 2.5);
  r.ci_high = percentile(r.samples, 97.5);
}

/// One side of the contrast: a model, the concept activations of the N shared
/// images, and attribution caches on unseen true positives (one per class used).
struct McsModel {
  const Network* net = nullptr;
  ConceptSet concept_set;
  std::vector<AttributionCache> true_positives;
};

struct McsConfig {
  int K = 100;
  Regularization reg;
  std::uint64_t seed = 0;
};

/// Paired bootstrap: CAV b of both models comes from the same resample indices.
/// MCS_b = TCAV(F1, CAV1_b) - max_k TCAV_k(F2, CAV2_b).
inline McsReport mcs_bootstrap(const McsModel& relevant, const McsModel& contrast, Method method,
                               const McsConfig& cfg) {
  detail::require(cfg.K >= 1, "MCS bootstrap needs K >= 1");
  detail::require(relevant.true_positives.size() == 1, "the relevant model is scored on exactly one class");
  detail::require(!contrast.true_positives.empty(), "the contrast model needs at least one class");
  for (const auto* side : {&relevant, &contrast})
    for (const auto& c : side->true_positives)
      detail::require(c.size() > 0, "no true positives for class " + std::to_string(c.k()));
  const auto cavs1 = bootstrap_cavs(relevant.concept_set, cfg.K, cfg.reg, cfg.seed);
  const auto cavs2 = bootstrap_cavs(contrast.concept_set, cfg.K, cfg.reg, cfg.seed);

  McsReport r;
  r.concept_name = relevant.concept_set.concept_name;
  r.layer = relevant.concept_set.layer;
  r.method = method;
  r.baseline = relevant.true_positives.front().baseline().tag();
  r.samples.resize(static_cast<std::size_t>(cfg.K));
  r.tcav_relevant.resize(r.samples.size());
  r.tcav_contrast.resize(r.samples.size());
  parallel_for(r.samples.size(), [&](std::size_t b) {
    const double rel = relevant.true_positives.front().tcav(method, cavs1[b]);
    std::vector<double> per_class;
    for (const auto& c : contrast.true_positives) per_class.push_back(c.tcav(method, cavs2[b]));
    r.tcav_relevant[b] = rel;
    r.tcav_contrast[b] = *std::max_element(per_class.begin(), per_class.end());
    r.samples[b] = mcs(rel, per_class);
  });
  summarize(r);
  return r;
}

// ---------------------------------------------------------------------------
// Counterfactual concept influence

struct InfluenceReport {
  std::vector<double> g;  // per sample
  double G = 0.0;         // mean of g
};

/// g_C(x) = max over concept-value pairs of max_k |F_k(x_C1) - F_k(x_C2)|.
inline InfluenceReport concept_influence(const Network& net, std::span<const BarsSample> samples, Concept subject,
                                         const BarsConfig& cfg = {}) {
  detail::require(!samples.empty(), "influence needs at least one sample");
  detail::require_dims(net.input_dim() == cfg.input_dim(), "network input does not match the image size");
  InfluenceReport out;
  out.g.resize(samples.size());
  constexpr std::size_t chunk = 128;
  const std::size_t chunks = (samples.size() + chunk - 1) / chunk;
  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t lo = c * chunk, hi = std::min(samples.size(), lo + chunk);
    std::vector<BarsSample> edited;
    for (std::size_t i = lo; i < hi; ++i)
      for (int value : {0, 1}) edited.push_back(counterfactual(samples[i], {subject, value}));
    const Matrix probs = head_from_layer_batch(net, -1, render_matrix(edited, cfg).cast<double>());
    for (std::size_t i = lo; i < hi; ++i) {
      const auto col = static_cast<Index>(2 * (i - lo));
      out.g[i] = (probs.col(col) - probs.col(col + 1)).cwiseAbs().maxCoeff();
    }
  });
  out.G = mean(out.g);
  return out;
}

// ---------------------------------------------------------------------------
// n/d ablation

struct NdAblationConfig {
  std::vector<double> ratios{30.0, 0.1};
  int replicates = 100;
  bool augment = false;
  int augment_copies = 9;
  std::vector<AugmentOp> augment_ops{AugmentOp::flip_h,   AugmentOp::flip_v,     AugmentOp::brightness,
                                     AugmentOp::contrast, AugmentOp::saturation, AugmentOp::hue};
  AugmentRanges augment_ranges;
  Regularization reg;
  std::uint64_t seed = 0;
};

struct NdRow {
  double ratio = 0.0;
  int n_per_side = 0;
  int n_train_per_side = 0;  // after augmentation
  McsReport report;
};

struct NdModel {
  const Network* net = nullptr;
  Matrix pool_activations;  // concept pool at the ablation layer
  std::vector<AttributionCache> true_positives;
};

/// Per ratio r: n = round(r d) samples per side are drawn from the concept pool
/// (without replacement). One fifth (at least one) is held out; the rest, plus
/// optional augmented copies, trains one CAV per model and replicate.
inline std::vector<NdRow> nd_ablation(const NdModel& relevant, const NdModel& contrast, std::span<const BarsSample> pool,
                                      Concept subject, int layer, Method method, const NdAblationConfig& cfg,
                                      const BarsConfig& bars = {}) {
  detail::require(!cfg.ratios.empty(), "n/d ablation needs at least one ratio");
  detail::require(cfg.replicates >= 1, "n/d ablation needs at least one replicate");
  detail::require(relevant.true_positives.size() == 1 && !contrast.true_positives.empty(),
                  "n/d ablation: relevant model scores one class, contrast model at least one");
  detail::require_dims(relevant.pool_activations.cols() == static_cast<Index>(pool.size()) &&
                           contrast.pool_activations.cols() == static_cast<Index>(pool.size()),
                       "pool activations do not match the pool");
  const Index d = relevant.net->layer_dim(layer);
  std::vector<Index> pos, neg;
  for (std::size_t i = 0; i < pool.size(); ++i) (pool[i].label(subject) ? pos : neg).push_back(static_cast<Index>(i));

  std::vector<NdRow> rows;
  for (std::size_t ri = 0; ri < cfg.ratios.size(); ++ri) {
    const double ratio = cfg.ratios[ri];
    detail::require(ratio > 0.0, "n/d ratios must be positive");
    const int n = std::max(2, static_cast<int>(std::llround(ratio * static_cast<double>(d))));
    if (!cfg.augment)
      detail::require(n <= static_cast<int>(std::min(pos.size(), neg.size())),
                      "n/d ratio " + std::to_string(ratio) + " needs " + std::to_string(n) +
                          " samples per side but the concept pool has fewer; enable augmentation");
    const int held = std::max(1, static_cast<int>(std::llround(0.2 * n)));
    detail::require(static_cast<std::size_t>(held) < std::min(pos.size(), neg.size()), "concept pool too small");
    NdRow row;
    row.ratio = ratio;
    row.n_per_side = n;
    row.report.concept_name = to_string(subject);
    row.report.layer = layer;
    row.report.method = method;
    row.report.baseline = relevant.true_positives.front().baseline().tag();
    row.report.samples.resize(static_cast<std::size_t>(cfg.replicates));
    row.report.tcav_relevant.resize(row.report.samples.size());
    row.report.tcav_contrast.resize(row.report.samples.size());
    std::vector<int> train_sizes(row.report.samples.size());

    parallel_for(row.report.samples.size(), [&](std::size_t b) {
      const std::uint64_t key = derive_key(cfg.seed, "nd/draw", ri * 1000003 + b);
      // Draw n per side: the held-out part first, then the training part. With
      // augmentation and a short pool the training images are reused.
      auto draw = [&](const std::vector<Index>& side, std::uint64_t k) {
        std::vector<Index> order = side;
        CounterRng rng(k);
        std::shuffle(order.begin(), order.end(), rng);
        std::vector<Index> out(order.begin(), order.begin() + held);
        const std::size_t rest = order.size() - static_cast<std::size_t>(held);
        for (int i = 0; i < n - held; ++i) out.push_back(order[static_cast<std::size_t>(held) + static_cast<std::size_t>(i) % rest]);
        return out;
      };
      const auto dp = draw(pos, derive_key(key, "pos"));
      const auto dn = draw(neg, derive_key(key, "neg"));
      const std::span<const Index> held_p(dp.data(), static_cast<std::size_t>(held));
      const std::span<const Index> held_n(dn.data(), static_cast<std::size_t>(held));
      const std::span<const Index> train_p(dp.data() + held, dp.size() - static_cast<std::size_t>(held));
      const std::span<const Index> train_n(dn.data() + held, dn.size() - static_cast<std::size_t>(held));

      auto side_sets = [&](const NdModel& model) {
        ConceptSet train{to_string(subject), layer, detail::take_columns(model.pool_activations, train_p),
                         detail::take_columns(model.pool_activations, train_n)};
        ConceptSet heldout{to_string(subject), layer, detail::take_columns(model.pool_activations, held_p),
                           detail::take_columns(model.pool_activations, held_n)};
        return std::pair{std::move(train), std::move(heldout)};
      };
      auto [train1, held1] = side_sets(relevant);
      auto [train2, held2] = side_sets(contrast);

      if (cfg.augment && cfg.augment_copies > 0) {
        std::vector<BarsSample> extra_p, extra_n;
        int copy = 0;
        for (auto* list : {&train_p, &train_n}) {
          for (Index idx : *list) {
            for (int c = 0; c < cfg.augment_copies; ++c) {
              const auto s = augment(pool[static_cast<std::size_t>(idx)], cfg.augment_ops,
                                     derive_key(key, "augment", static_cast<std::uint64_t>(copy++)), cfg.augment_ranges);
              (list == &train_p ? extra_p : extra_n).push_back(s);
            }
          }
        }
        const Matrix xp = render_matrix(extra_p, bars).cast<double>();
        const Matrix xn = render_matrix(extra_n, bars).cast<double>();
        auto extend = [&](ConceptSet& set, const Network& net) {
          const Matrix ap = activations_at(net, xp, layer), an = activations_at(net, xn, layer);
          Matrix p(set.positives.rows(), set.positives.cols() + ap.cols());
          p << set.positives, ap;
          Matrix q(set.negatives.rows(), set.negatives.cols() + an.cols());
          q << set.negatives, an;
          set.positives = std::move(p);
          set.negatives = std::move(q);
        };
        extend(train1, *relevant.net);
        extend(train2, *contrast.net);
      }
      train_sizes[b] = static_cast<int>(train1.positives.cols());
      const Cav c1 = fit_cav_split(train1, held1, cfg.reg);
      const Cav c2 = fit_cav_split(train2, held2, cfg.reg);
      const double rel = relevant.true_positives.front().tcav(method, c1);
      std::vector<double> per_class;
      for (const auto& c : contrast.true_positives) per_class.push_back(c.tcav(method, c2));
      row.report.tcav_relevant[b] = rel;
      row.report.tcav_contrast[b] = *std::max_element(per_class.begin(), per_class.end());
      row.report.samples[b] = mcs(rel, per_class);
    });
    row.n_train_per_side = train_sizes.front();
    summarize(row.report);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace icscope
