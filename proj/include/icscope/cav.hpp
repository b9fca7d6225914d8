#pragma once

// Concept activation vectors: regularized logistic probes on one layer's
// activations, their bootstrap ensembles, label-permuted null ensembles and the
// permutation significance test.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "icscope/errors.hpp"
#include "icscope/network.hpp"
#include "icscope/parallel.hpp"
#include "icscope/rng.hpp"
#include "icscope/stats.hpp"
#include "json.hpp"

namespace icscope {

/// Activations of concept examples (positives) and counter-examples (negatives),
/// one sample per column, all taken at `layer`.
struct ConceptSet {
  std::string concept_name;
  int layer = 0;
  Matrix positives;
  Matrix negatives;

  Index dim() const { return positives.rows(); }

  void validate(Index min_per_side = 1) const {
    detail::require(positives.cols() >= min_per_side && negatives.cols() >= min_per_side,
                    "concept set '" + concept_name + "' needs at least " + std::to_string(min_per_side) +
                        " samples per side");
    detail::require_dims(positives.rows() == negatives.rows(),
                         "positive and negative activations have different widths");
  }
};

enum class RegKind { l2, elastic_net };

inline const char* to_string(RegKind r) { return r == RegKind::l2 ? "l2" : "elastic-net"; }
inline RegKind reg_from_string(const std::string& name) {
  if (name == "l2") return RegKind::l2;
  if (name == "elastic-net" || name == "elastic_net" || name == "elasticnet") return RegKind::elastic_net;
  throw ConfigError("unknown regularization '" + name + "' (expected l2 or elastic-net)");
}

/// Loss: mean log-loss + strength * ((1 - l1_ratio)/2 |w|^2 + l1_ratio |w|_1).
/// The intercept is never penalized; l1_ratio only applies to elastic-net.
struct Regularization {
  RegKind kind = RegKind::l2;
  double strength = 1e-2;
  double l1_ratio = 0.5;
  double tolerance = 1e-8;
  int max_iterations = 5000;

  double l1() const { return kind == RegKind::elastic_net ? strength * l1_ratio : 0.0; }
  double l2() const { return kind == RegKind::elastic_net ? strength * (1.0 - l1_ratio) : strength; }

  void validate() const {
    detail::require(strength >= 0.0, "regularization strength must be non-negative");
    detail::require(l1_ratio >= 0.0 && l1_ratio <= 1.0, "l1_ratio must be in [0, 1]");
    detail::require(tolerance > 0.0 && max_iterations >= 1, "solver tolerance/iterations must be positive");
  }
};

struct CavProvenance {
  int bootstrap = -1;  // -1: fitted on the full set
  bool permuted = false;
  int permutation = -1;
  friend bool operator==(const CavProvenance&, const CavProvenance&) = default;
};

struct Cav {
  std::string concept_name;
  int layer = 0;
  Vector v;       // raw classifier weights, oriented towards the concept
  Vector v_unit;  // v / |v|
  double bias = 0.0;
  double heldout_auc = 0.5;
  int iterations = 0;
  CavProvenance provenance;

  Index dim() const { return v.size(); }
  double score(const Vector& a) const { return v.dot(a) + bias; }
};

namespace detail {

inline double log_loss_sum(const Vector& z, const Vector& y) {
  double s = 0.0;
  for (Index i = 0; i < z.size(); ++i) s += std::max(z(i), 0.0) + std::log1p(std::exp(-std::abs(z(i)))) - y(i) * z(i);
  return s;
}

struct LogisticFit {
  Vector w;
  double b = 0.0;
  int iterations = 0;
};

inline void check_not_degenerate(const Matrix& X) {
  const Vector range = X.rowwise().maxCoeff() - X.rowwise().minCoeff();
  if (X.cols() < 2 || range.maxCoeff() <= 0.0)
    throw DegenerateInputError("all concept activations are identical; no direction to fit");
}

/// Damped Newton on the smooth (l2) objective. X is d x n.
inline LogisticFit fit_logistic_newton(const Matrix& X, const Vector& y, const Regularization& reg) {
  const Index d = X.rows(), n = X.cols();
  const double inv_n = 1.0 / static_cast<double>(n);
  Matrix Xt(d + 1, n);
  Xt.topRows(d) = X;
  Xt.row(d).setOnes();
  Vector theta = Vector::Zero(d + 1);
  auto objective = [&](const Vector& t, Vector& z) {
    z = Xt.transpose() * t;
    return log_loss_sum(z, y) * inv_n + 0.5 * reg.l2() * t.head(d).squaredNorm();
  };
  Vector z;
  double f = objective(theta, z);
  int it = 0;
  for (; it < reg.max_iterations; ++it) {
    Vector p(n), s(n);
    for (Index i = 0; i < n; ++i) {
      p(i) = sigmoid(z(i));
      s(i) = p(i) * (1.0 - p(i));
    }
    Vector grad = Xt * (p - y) * inv_n;
    grad.head(d) += reg.l2() * theta.head(d);
    if (grad.lpNorm<Eigen::Infinity>() < reg.tolerance) break;
    Matrix H = Xt * s.asDiagonal() * Xt.transpose() * inv_n;
    H.diagonal().head(d).array() += reg.l2();
    H.diagonal().array() += 1e-12;
    const Vector step = H.ldlt().solve(grad);
    double t = 1.0;
    Vector z_new;
    double f_new = objective(theta - step, z_new);
    const double slope = grad.dot(step);
    while (!(f_new <= f - 1e-4 * t * slope) && t > 1e-10) {
      t *= 0.5;
      f_new = objective(theta - t * step, z_new);
    }
    if (!(f_new <= f)) break;  // no further decrease possible in floating point
    theta -= t * step;
    z = std::move(z_new);
    f = f_new;
  }
  if (!theta.allFinite()) throw NumericalError("logistic solver produced non-finite weights");
  return {theta.head(d), theta(d), it};
}

/// FISTA for the elastic-net objective.
inline LogisticFit fit_logistic_fista(const Matrix& X, const Vector& y, const Regularization& reg) {
  const Index d = X.rows(), n = X.cols();
  const double inv_n = 1.0 / static_cast<double>(n);
  Matrix Xt(d + 1, n);
  Xt.topRows(d) = X;
  Xt.row(d).setOnes();
  const Matrix gram = Xt * Xt.transpose();
  const double lmax = Eigen::SelfAdjointEigenSolver<Matrix>(gram, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff();
  const double L = 0.25 * lmax * inv_n + reg.l2();
  const double step = 1.0 / L;
  const double l1 = reg.l1();

  Vector theta = Vector::Zero(d + 1), momentum = theta;
  double tk = 1.0;
  int it = 0;
  for (; it < reg.max_iterations; ++it) {
    const Vector z = Xt.transpose() * momentum;
    Vector p(n);
    for (Index i = 0; i < n; ++i) p(i) = sigmoid(z(i));
    Vector grad = Xt * (p - y) * inv_n;
    grad.head(d) += reg.l2() * momentum.head(d);
    Vector next = momentum - step * grad;
    for (Index j = 0; j < d; ++j) {
      const double v = next(j);
      next(j) = std::copysign(std::max(std::abs(v) - step * l1, 0.0), v);
    }
    const double change = (next - theta).lpNorm<Eigen::Infinity>();
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * tk * tk));
    momentum = next + ((tk - 1.0) / t_next) * (next - theta);
    theta = std::move(next);
    tk = t_next;
    if (change < reg.tolerance * std::max(1.0, theta.lpNorm<Eigen::Infinity>())) {
      ++it;
      break;
    }
  }
  if (!theta.allFinite()) throw NumericalError("logistic solver produced non-finite weights");
  return {theta.head(d), theta(d), it};
}

inline std::vector<double> scores_of(const Vector& w, double b, const Matrix& A) {
  const Vector s = (A.transpose() * w).array() + b;
  return {s.data(), s.data() + s.size()};
}

inline Matrix take_columns(const Matrix& A, std::span<const Index> cols) {
  Matrix out(A.rows(), static_cast<Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) out.col(static_cast<Index>(j)) = A.col(cols[j]);
  return out;
}

struct SideSplit {
  std::vector<Index> train;
  std::vector<Index> heldout;
};

/// Shuffles 0..n-1 with the given stream and holds out max(1, round(0.2 n)).
/// With `resample` the training part is replaced by a same-size bootstrap draw.
inline SideSplit split_side(Index n, std::uint64_t split_key, std::uint64_t resample_key, bool resample) {
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  CounterRng rng(split_key);
  std::shuffle(order.begin(), order.end(), rng);
  const auto held = static_cast<std::size_t>(
      std::max<Index>(1, static_cast<Index>(std::llround(0.2 * static_cast<double>(n)))));
  SideSplit out;
  out.heldout.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(held));
  out.train.assign(order.begin() + static_cast<std::ptrdiff_t>(held), order.end());
  if (resample) {
    CounterRng draw(resample_key);
    std::vector<Index> boot(out.train.size());
    for (auto& idx : boot) idx = out.train[draw() % out.train.size()];
    out.train = std::move(boot);
  }
  return out;
}

}  // namespace detail

/// Fits a CAV on given train/held-out partitions (activations as columns).
inline Cav fit_cav_split(const ConceptSet& train_set, const ConceptSet& heldout_set,
                         const Regularization& reg = {}) {
  reg.validate();
  train_set.validate();
  heldout_set.validate();
  detail::require_dims(train_set.dim() == heldout_set.dim(), "train and held-out widths differ");
  const Index np = train_set.positives.cols(), nn = train_set.negatives.cols();
  Matrix X(train_set.dim(), np + nn);
  X << train_set.positives, train_set.negatives;
  detail::check_not_degenerate(X);
  Vector y(np + nn);
  y.head(np).setOnes();
  y.tail(nn).setZero();

  auto fit = reg.kind == RegKind::l2 ? detail::fit_logistic_newton(X, y, reg)
                                     : detail::fit_logistic_fista(X, y, reg);
  const double norm = fit.w.norm();
  if (!(norm > 0.0))
    throw DegenerateInputError("concept '" + train_set.concept_name + "' produced a zero direction");
  const Vector s = (X.transpose() * fit.w).array() + fit.b;
  if (s.head(np).mean() <= s.tail(nn).mean()) {
    fit.w = -fit.w;
    fit.b = -fit.b;
  }

  Cav cav;
  cav.concept_name = train_set.concept_name;
  cav.layer = train_set.layer;
  cav.v = fit.w;
  cav.v_unit = fit.w / norm;
  cav.bias = fit.b;
  cav.iterations = fit.iterations;
  cav.heldout_auc = roc_auc(detail::scores_of(cav.v, cav.bias, heldout_set.positives),
                            detail::scores_of(cav.v, cav.bias, heldout_set.negatives));
  return cav;
}

namespace detail {

/// The shared split (and optional resample) procedure for bootstrap index b.
inline Cav fit_cav_indexed(const ConceptSet& cs, const Regularization& reg, std::uint64_t seed,
                           std::uint64_t b, bool resample) {
  const auto pos = split_side(cs.positives.cols(), derive_key(seed, "cav/split+", b),
                              derive_key(seed, "cav/resample+", b), resample);
  const auto neg = split_side(cs.negatives.cols(), derive_key(seed, "cav/split-", b),
                              derive_key(seed, "cav/resample-", b), resample);
  ConceptSet train{cs.concept_name, cs.layer, take_columns(cs.positives, pos.train),
                   take_columns(cs.negatives, neg.train)};
  ConceptSet held{cs.concept_name, cs.layer, take_columns(cs.positives, pos.heldout),
                  take_columns(cs.negatives, neg.heldout)};
  return fit_cav_split(train, held, reg);
}

}  // namespace detail

/// Fits one CAV with an internal 80/20 split; held-out AUC is measured on the 20%.
inline Cav fit_cav(const ConceptSet& cs, const Regularization& reg = {}, std::uint64_t seed = 0) {
  cs.validate(2);
  return detail::fit_cav_indexed(cs, reg, seed, 0, false);
}

/// B CAVs, each fitted on a with-replacement resample of its training split.
inline std::vector<Cav> bootstrap_cavs(const ConceptSet& cs, int B, const Regularization& reg = {},
                                       std::uint64_t seed = 0) {
  detail::require(B >= 1, "bootstrap count must be at least 1");
  cs.validate(2);
  std::vector<Cav> out(static_cast<std::size_t>(B));
  parallel_for(out.size(), [&](std::size_t b) {
    out[b] = detail::fit_cav_indexed(cs, reg, seed, b, true);
    out[b].provenance = {static_cast<int>(b), false, -1};
  });
  return out;
}

/// For each bootstrap index, n_perm CAVs fitted after shuffling the concept
/// labels across the pooled samples. Each one then goes through exactly the
/// split/resample procedure of the matching real bootstrap CAV.
/// `force_identity` is a test hook that replaces every shuffle by the identity.
inline std::vector<Cav> permuted_cavs(const ConceptSet& cs, int B, int n_perm, const Regularization& reg = {},
                                      std::uint64_t seed = 0, bool force_identity = false) {
  detail::require(B >= 1 && n_perm >= 1, "permuted CAVs need B >= 1 and n_perm >= 1");
  cs.validate(2);
  const Index np = cs.positives.cols(), nn = cs.negatives.cols();
  Matrix pooled(cs.dim(), np + nn);
  pooled << cs.positives, cs.negatives;
  const auto total = static_cast<std::size_t>(B) * static_cast<std::size_t>(n_perm);
  std::vector<Cav> out(total);
  parallel_for(total, [&](std::size_t t) {
    const std::size_t b = t / static_cast<std::size_t>(n_perm);
    const std::size_t p = t % static_cast<std::size_t>(n_perm);
    std::vector<Index> order(static_cast<std::size_t>(np + nn));
    std::iota(order.begin(), order.end(), Index{0});
    if (!force_identity) {
      CounterRng rng(seed, "cav/permute", t);
      std::shuffle(order.begin(), order.end(), rng);
    }
    const std::span<const Index> all(order);
    ConceptSet shuffled{cs.concept_name, cs.layer, detail::take_columns(pooled, all.first(static_cast<std::size_t>(np))),
                        detail::take_columns(pooled, all.subspan(static_cast<std::size_t>(np)))};
    out[t] = detail::fit_cav_indexed(shuffled, reg, seed, b, true);
    out[t].provenance = {static_cast<int>(b), true, static_cast<int>(p)};
  });
  return out;
}

struct SignificanceResult {
  double p_value = 1.0;
  double statistic = 0.0;  // median real AUC (CAV test) or median score (score test)
  int n_bootstraps = 0;
  int n_permutations_per_bootstrap = 0;
  double alpha = 0.05;
  int n_tests = 1;
  bool significant = false;
};

/// Permutation test on held-out AUC:
/// p = (1 + #{permuted AUC >= median real AUC}) / (1 + #permuted), Bonferroni over n_tests.
inline SignificanceResult cav_significance(std::span<const Cav> real, std::span<const Cav> permuted,
                                           double alpha = 0.05, int n_tests = 1) {
  detail::require(!real.empty() && !permuted.empty(), "significance test needs real and permuted CAVs");
  detail::require(alpha > 0.0 && alpha < 1.0 && n_tests >= 1, "invalid alpha or correction count");
  std::vector<double> aucs;
  aucs.reserve(real.size());
  for (const auto& c : real) aucs.push_back(c.heldout_auc);
  SignificanceResult r;
  r.statistic = median(aucs);
  std::size_t exceed = 0;
  for (const auto& c : permuted)
    if (c.heldout_auc >= r.statistic) ++exceed;
  r.p_value = static_cast<double>(1 + exceed) / static_cast<double>(1 + permuted.size());
  r.n_bootstraps = static_cast<int>(real.size());
  r.n_permutations_per_bootstrap = static_cast<int>(permuted.size() / real.size());
  r.alpha = alpha;
  r.n_tests = n_tests;
  r.significant = r.p_value < alpha / n_tests;
  return r;
}

// ---------------------------------------------------------------------------
// CAV bundle serialization

inline nlohmann::json cav_to_json(const Cav& c) {
  return {{"concept", c.concept_name},
          {"layer", c.layer},
          {"v", std::vector<double>(c.v.data(), c.v.data() + c.v.size())},
          {"v_unit", std::vector<double>(c.v_unit.data(), c.v_unit.data() + c.v_unit.size())},
          {"bias", c.bias},
          {"auc", c.heldout_auc},
          {"provenance",
           {{"bootstrap", c.provenance.bootstrap},
            {"permuted", c.provenance.permuted},
            {"permutation", c.provenance.permutation}}}};
}

inline Cav cav_from_json(const nlohmann::json& j) {
  try {
    Cav c;
    c.concept_name = j.value("concept", std::string{});
    c.layer = j.at("layer").get<int>();
    const auto v = j.at("v").get<std::vector<double>>();
    const auto u = j.at("v_unit").get<std::vector<double>>();
    detail::require_dims(v.size() == u.size() && !v.empty(), "CAV v and v_unit lengths differ");
    c.v = Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
    c.v_unit = Eigen::Map<const Vector>(u.data(), static_cast<Index>(u.size()));
    c.bias = j.at("bias").get<double>();
    c.heldout_auc = j.at("auc").get<double>();
    const auto& p = j.at("provenance");
    c.provenance = {p.at("bootstrap").get<int>(), p.at("permuted").get<bool>(), p.at("permutation").get<int>()};
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed CAV entry: ") + e.what());
  }
}

inline nlohmann::json cavs_to_json(std::span<const Cav> cavs) {
  auto arr = nlohmann::json::array();
  for (const auto& c : cavs) arr.push_back(cav_to_json(c));
  return arr;
}

inline std::vector<Cav> cavs_from_json(const nlohmann::json& arr) {
  detail::require(arr.is_array(), "CAV bundle must be a JSON array");
  std::vector<Cav> out;
  for (const auto& item : arr) out.push_back(cav_from_json(item));
  return out;
}

inline void save_cavs(std::span<const Cav> cavs, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  out << cavs_to_json(cavs).dump() << '\n';
}

inline std::vector<Cav> load_cavs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse " + path + ": " + e.what());
  }
  return cavs_from_json(doc);
}

}  // namespace icscope
