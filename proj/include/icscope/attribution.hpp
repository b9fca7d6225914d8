#pragma once

// Conceptual sensitivity, integrated gradients, integrated conceptual
// sensitivity, the baseline catalog and the two closed forms.
//
// Path integrals use the midpoint rule: alpha_j = (j + 1/2) / m, j = 0..m-1.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "icscope/cav.hpp"
#include "icscope/errors.hpp"
#include "icscope/network.hpp"
#include "icscope/rng.hpp"

namespace icscope {

enum class BaselineKind {
  zero_image,
  one_image,
  noise_image,
  pixelwise_average,
  pixelwise_median,
  entropy_maximizing,
  concept_forgetting,
  concept_occluding
};

inline const char* to_string(BaselineKind k) {
  switch (k) {
    case BaselineKind::zero_image: return "zero_image";
    case BaselineKind::one_image: return "one_image";
    case BaselineKind::noise_image: return "noise_image";
    case BaselineKind::pixelwise_average: return "pixelwise_average";
    case BaselineKind::pixelwise_median: return "pixelwise_median";
    case BaselineKind::entropy_maximizing: return "entropy_maximizing";
    case BaselineKind::concept_forgetting: return "concept_forgetting";
    case BaselineKind::concept_occluding: return "concept_occluding";
  }
  return "?";
}

inline BaselineKind baseline_from_string(const std::string& name) {
  static const std::pair<const char*, BaselineKind> table[] = {
      {"zero_image", BaselineKind::zero_image},           {"zero", BaselineKind::zero_image},
      {"black", BaselineKind::zero_image},                {"one_image", BaselineKind::one_image},
      {"one", BaselineKind::one_image},                   {"white", BaselineKind::one_image},
      {"noise_image", BaselineKind::noise_image},         {"noise", BaselineKind::noise_image},
      {"pixelwise_average", BaselineKind::pixelwise_average}, {"average", BaselineKind::pixelwise_average},
      {"pixelwise_median", BaselineKind::pixelwise_median},   {"median", BaselineKind::pixelwise_median},
      {"entropy_maximizing", BaselineKind::entropy_maximizing}, {"entropy", BaselineKind::entropy_maximizing},
      {"concept_forgetting", BaselineKind::concept_forgetting}, {"forgetting", BaselineKind::concept_forgetting},
      {"concept_occluding", BaselineKind::concept_occluding},   {"occluding", BaselineKind::concept_occluding},
  };
  for (const auto& [key, kind] : table)
    if (name == key) return kind;
  throw ConfigError("unknown baseline '" + name + "'");
}

/// Baselines built in image space and pushed through the network.
inline bool is_image_baseline(BaselineKind k) {
  return k == BaselineKind::zero_image || k == BaselineKind::one_image || k == BaselineKind::noise_image ||
         k == BaselineKind::pixelwise_average || k == BaselineKind::pixelwise_median;
}

/// Baselines that depend on the CAV (raw direction and bias).
inline bool is_informative_baseline(BaselineKind k) {
  return k == BaselineKind::concept_forgetting || k == BaselineKind::concept_occluding;
}

enum class ForgettingMode { fixed, reflection };

struct EntropyOptions {
  double lambda_h = 1e6;
  int max_iterations = 20000;
  double tolerance = 1e-12;  // relative step size at which the descent stops
};

struct BaselineSpec {
  BaselineKind kind = BaselineKind::zero_image;
  double lambda = 1.0;  // concept_forgetting, fixed mode
  ForgettingMode forgetting_mode = ForgettingMode::fixed;
  double noise_sigma = 1.0;
  std::uint64_t noise_seed = 0;
  std::shared_ptr<const Vector> reference_image;  // average/median of a reference set
  EntropyOptions entropy;

  std::string tag() const {
    std::string t = to_string(kind);
    if (kind == BaselineKind::concept_forgetting)
      t += forgetting_mode == ForgettingMode::reflection ? "(reflection)" : "(lambda=" + std::to_string(lambda) + ")";
    return t;
  }

  void validate() const {
    if (kind == BaselineKind::concept_forgetting && forgetting_mode == ForgettingMode::fixed)
      detail::require(lambda > 0.0, "concept_forgetting needs lambda > 0");
    if (kind == BaselineKind::noise_image) detail::require(noise_sigma > 0.0, "noise sigma must be positive");
    if (kind == BaselineKind::pixelwise_average || kind == BaselineKind::pixelwise_median)
      detail::require(reference_image != nullptr, std::string(to_string(kind)) + " baseline needs a reference dataset");
    if (kind == BaselineKind::entropy_maximizing)
      detail::require(entropy.lambda_h > 0.0, "entropy baseline needs lambda_H > 0");
  }

  static BaselineSpec of(BaselineKind kind) {
    BaselineSpec s;
    s.kind = kind;
    return s;
  }

  /// Average or median baseline from reference inputs (features x samples).
  static BaselineSpec from_reference(BaselineKind kind, const Eigen::MatrixXf& reference) {
    detail::require(kind == BaselineKind::pixelwise_average || kind == BaselineKind::pixelwise_median,
                    "from_reference only builds average/median baselines");
    detail::require(reference.cols() > 0, "reference dataset is empty");
    BaselineSpec s = of(kind);
    Vector img(reference.rows());
    if (kind == BaselineKind::pixelwise_average) {
      img = reference.cast<double>().rowwise().mean();
    } else {
      std::vector<float> row(static_cast<std::size_t>(reference.cols()));
      for (Index r = 0; r < reference.rows(); ++r) {
        for (Index c = 0; c < reference.cols(); ++c) row[static_cast<std::size_t>(c)] = reference(r, c);
        const auto n = row.size();
        std::nth_element(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(n / 2), row.end());
        double med = row[n / 2];
        if (n % 2 == 0) {
          const float below = *std::max_element(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(n / 2));
          med = 0.5 * (med + below);
        }
        img(r) = med;
      }
    }
    s.reference_image = std::make_shared<const Vector>(std::move(img));
    return s;
  }
};

/// Input-space baseline image x' (flattened) for the image kinds.
inline Vector baseline_input(const BaselineSpec& spec, Index input_dim) {
  spec.validate();
  switch (spec.kind) {
    case BaselineKind::zero_image: return Vector::Zero(input_dim);
    case BaselineKind::one_image: return Vector::Ones(input_dim);
    case BaselineKind::noise_image: {
      CounterRng rng(spec.noise_seed, "baseline/noise");
      std::normal_distribution<double> normal(0.0, spec.noise_sigma);
      Vector x(input_dim);
      for (Index i = 0; i < input_dim; ++i) x(i) = std::clamp(normal(rng), 0.0, 1.0);
      return x;
    }
    case BaselineKind::pixelwise_average:
    case BaselineKind::pixelwise_median:
      detail::require_dims(spec.reference_image->size() == input_dim, "reference image has the wrong size");
      return *spec.reference_image;
    default: throw ConfigError(std::string(to_string(spec.kind)) + " is not an image-space baseline");
  }
}

// ---------------------------------------------------------------------------
// Entropy-maximizing baseline

inline double entropy(const Vector& p) {
  double h = 0.0;
  for (Index k = 0; k < p.size(); ++k)
    if (p(k) > 0.0) h -= p(k) * std::log(p(k));
  return h;
}

namespace detail {

inline Matrix entropy_cotangent(const Matrix& probs) {
  Matrix cot(probs.rows(), probs.cols());
  for (Index j = 0; j < probs.cols(); ++j)
    for (Index k = 0; k < probs.rows(); ++k) cot(k, j) = -(std::log(std::max(probs(k, j), 1e-300)) + 1.0);
  return cot;
}

}  // namespace detail

namespace detail {

/// Constraint map of the maximal-entropy set (all class probabilities equal):
/// the logit itself for a sigmoid head, centred logits for softmax.
inline Matrix entropy_constraint_matrix(const Network& net) {
  const Index r = net.layers().back().out_dim();
  if (net.head() == HeadKind::sigmoid_binary) return Matrix::Identity(1, 1);
  return Matrix::Identity(r, r) - Matrix::Constant(r, r, 1.0 / static_cast<double>(r));
}

inline double residual_entropy(const Network& net, int layer_index, const Vector& x) {
  return std::log(static_cast<double>(net.class_count())) - entropy(head_from_layer(net, layer_index, x));
}

}  // namespace detail

/// a' = argmin_x |a - x| - lambda_H H(h(x)). The entropy enters with a minus
/// sign so the baseline moves towards maximal output entropy.
///
/// Descent started at a stalls whenever the output is saturated, because the
/// entropy gradient underflows there. So the solver first reaches the
/// maximal-entropy set with minimum-norm Gauss-Newton steps, slides along it
/// towards a, and then polishes the penalized objective with backtracking
/// descent.
inline Vector entropy_maximizing_general(const Network& net, int layer_index, const Vector& a,
                                         const EntropyOptions& opt = {}) {
  net.check_layer(layer_index);
  detail::check_rows(net, layer_index, a.size());
  detail::require(opt.lambda_h > 0.0, "entropy baseline needs lambda_H > 0");
  const int last = net.layer_count() - 1;
  const Matrix C = detail::entropy_constraint_matrix(net);
  const Index r = C.rows();
  auto constraint = [&](const Vector& x) -> Vector { return C * propagate(net, layer_index, x, last).col(0); };
  auto jacobian = [&](const Vector& x) -> Matrix {  // r x d
    const Matrix xs = x.replicate(1, r);
    return logit_vjp_from_layer(net, layer_index, xs, C.transpose()).transpose();
  };
  auto fail = [&](const Vector& x, const std::string& why) {
    throw NumericalError("entropy baseline did not converge: " + why + " (residual entropy " +
                         std::to_string(detail::residual_entropy(net, layer_index, x)) + ")");
  };
  const double scale = 1.0 + a.norm();
  int budget = opt.max_iterations;

  // Gauss-Newton onto {C z(x) = 0}, damped when a step leaves the linear piece.
  // Steps into regions where the output no longer depends on the layer are
  // rejected, since no later step could leave them. Returns nullopt on failure
  // and records the reason.
  std::string why;
  auto project = [&](Vector x) -> std::optional<Vector> {
    Vector c = constraint(x);
    Matrix J = jacobian(x);
    while (c.norm() > 1e-12 * (1.0 + propagate(net, layer_index, x, last).norm())) {
      if (--budget < 0) {
        why = "iteration budget exhausted while reaching the maximal-entropy set";
        return std::nullopt;
      }
      if (J.norm() == 0.0) {
        why = "the output does not depend on this layer here";
        return std::nullopt;
      }
      const Vector delta = J.completeOrthogonalDecomposition().solve(-c);
      bool moved = false;
      for (double t = 1.0; t >= 1e-12; t *= 0.5) {
        const Vector next = x + t * delta;
        const Vector cn = constraint(next);
        if (cn.norm() >= c.norm()) continue;
        Matrix Jn = jacobian(next);
        if (Jn.norm() == 0.0) continue;
        x = next;
        c = cn;
        J = std::move(Jn);
        moved = true;
        break;
      }
      if (!moved) {
        why = "Gauss-Newton made no progress";
        return std::nullopt;
      }
    }
    return x;
  };

  // Gauss-Newton can stall where the downstream units that carry the logit
  // switch off. Restart from deterministic perturbations of a before giving up.
  auto start = project(a);
  for (int attempt = 0; !start && attempt < 32 && budget > 0; ++attempt) {
    CounterRng rng(0, "entropy/restart", static_cast<std::uint64_t>(attempt));
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector dir(a.size());
    for (Index i = 0; i < a.size(); ++i) dir(i) = normal(rng);
    const double radius = 0.1 * std::pow(2.0, attempt / 4) * scale;
    start = project(a + radius * dir / dir.norm());
  }
  if (!start) fail(a, why);
  Vector x = std::move(*start);
  // Move towards a inside the constraint set. The target of each step is the
  // point of the linearized set closest to a, which is exact within one ReLU
  // linear piece; damped steps are re-projected.
  for (int it = 0; it < 500 && budget > 0; ++it, --budget) {
    const Matrix J = jacobian(x);
    const Vector c = constraint(x);
    const Vector target = a - J.transpose() * (J * J.transpose()).completeOrthogonalDecomposition().solve(c + J * (a - x));
    const double dist = (x - a).norm();
    bool improved = false;
    for (double t = 1.0; t > 1e-6; t *= 0.5) {
      const auto next = project(x + t * (target - x));
      if (next && (*next - a).norm() < dist) {
        x = *next;
        improved = true;
        break;
      }
    }
    if (!improved || dist - (x - a).norm() <= 1e-12 * dist) break;
  }

  // Polish: minimise |x - a| - lambda_H H with Armijo backtracking.
  const double lambda = opt.lambda_h;
  auto objective = [&](const Vector& y) {
    return (y - a).norm() - lambda * entropy(head_from_layer(net, layer_index, y));
  };
  auto gradient = [&](const Vector& y) {
    const Matrix p = head_from_layer_batch(net, layer_index, y);
    Vector g = -lambda * vjp_from_layer(net, layer_index, y, detail::entropy_cotangent(p)).col(0);
    const double dist = (y - a).norm();
    if (dist > 0.0) g += (y - a) / dist;
    return g;
  };
  double f = objective(x);
  double step = 1.0;
  for (int it = 0; it < 200 && budget > 0; ++it, --budget) {
    const Vector g = gradient(x);
    const double gnorm2 = g.squaredNorm();
    if (gnorm2 == 0.0) break;
    step *= 2.0;
    Vector next;
    double f_next = 0.0;
    for (;;) {
      next = x - step * g;
      f_next = objective(next);
      if (f_next <= f - 1e-4 * step * gnorm2 || step < 1e-300) break;
      step *= 0.5;
    }
    if (!(f_next < f)) break;
    const double moved = (next - x).norm();
    x = std::move(next);
    f = f_next;
    if (moved <= opt.tolerance * scale) break;
  }
  if (!x.allFinite()) throw NumericalError("entropy baseline diverged");
  if (detail::residual_entropy(net, layer_index, x) > 1e-6) fail(x, "solution is not at maximal entropy");
  return x;
}

/// Readout (w, b) of a sigmoid head applied directly to layer `layer_index`.
struct BinaryReadout {
  Vector w;
  double b = 0.0;
};

inline std::optional<BinaryReadout> binary_readout(const Network& net, int layer_index) {
  if (net.head() != HeadKind::sigmoid_binary || layer_index != net.layer_count() - 2) return std::nullopt;
  const auto& last = net.layers().back();
  if (last.nonlinearity != Nonlinearity::identity) return std::nullopt;
  return BinaryReadout{last.weight.row(0).transpose(), last.bias(0)};
}

/// Orthogonal projection of a onto the decision boundary w'a + b = 0.
inline Vector project_on_boundary(const Vector& w, double b, const Vector& a) {
  const double wn2 = w.squaredNorm();
  if (!(wn2 > 0.0)) throw DegenerateInputError("zero readout weight vector");
  return a - ((w.dot(a) + b) / wn2) * w;
}

// ---------------------------------------------------------------------------
// Baselines in activation space

namespace detail {

inline void check_cav_for(const Cav& cav, int layer_index, Index dim) {
  detail::require_dims(cav.layer == layer_index, "CAV was trained on layer " + std::to_string(cav.layer) +
                                                     ", not layer " + std::to_string(layer_index));
  detail::require_dims(cav.v.size() == dim && cav.v_unit.size() == dim, "CAV width does not match the layer");
}

}  // namespace detail

/// Step size of the concept-forgetting baseline a' = a - lambda v.
inline double forgetting_lambda(const BaselineSpec& spec, const Cav& cav, const Vector& a) {
  if (spec.forgetting_mode == ForgettingMode::fixed) return spec.lambda;
  return 2.0 * cav.score(a) / cav.v.squaredNorm();  // reflection across the CAV hyperplane
}

/// Baseline activation a' for `a` at `layer_index`.
inline Vector make_baseline(const BaselineSpec& spec, const Network& net, int layer_index, const Vector& a,
                            const Cav* cav = nullptr) {
  spec.validate();
  net.check_layer(layer_index);
  detail::check_rows(net, layer_index, a.size());
  if (is_image_baseline(spec.kind))
    return propagate(net, -1, baseline_input(spec, net.input_dim()), layer_index).col(0);
  if (spec.kind == BaselineKind::entropy_maximizing) {
    if (auto readout = binary_readout(net, layer_index)) return project_on_boundary(readout->w, readout->b, a);
    return entropy_maximizing_general(net, layer_index, a, spec.entropy);
  }
  detail::require(cav != nullptr, std::string(to_string(spec.kind)) + " baseline needs a CAV");
  detail::check_cav_for(*cav, layer_index, a.size());
  const double vn2 = cav->v.squaredNorm();
  if (spec.kind == BaselineKind::concept_forgetting) return a - forgetting_lambda(spec, *cav, a) * cav->v;
  return a - (cav->score(a) / vn2) * cav->v;  // concept_occluding
}

// ---------------------------------------------------------------------------
// Attribution

inline void check_unit(const Vector& v) {
  detail::require(std::abs(v.norm() - 1.0) < 1e-8, "CAV direction must be unit-normed");
}

/// CS = grad h_k(a) . v (v unit-normed).
inline double conceptual_sensitivity(const Network& net, int k, int layer_index, const Vector& a,
                                     const Vector& v_unit) {
  detail::require_dims(v_unit.size() == a.size(), "CAV width does not match the activation");
  check_unit(v_unit);
  return grad_head_wrt_activation(net, k, layer_index, a).dot(v_unit);
}

inline double conceptual_sensitivity(const Network& net, int k, const Cav& cav, const Vector& a) {
  detail::check_cav_for(cav, cav.layer, a.size());
  return conceptual_sensitivity(net, k, cav.layer, a, cav.v_unit);
}

/// Midpoint-rule average of grad h_k over the straight path from a' to a at
/// `layer_index` (-1: input space).
inline Vector path_gradient(const Network& net, int k, int layer_index, const Vector& a, const Vector& a_base,
                            int m) {
  detail::require(m >= 1, "quadrature needs m >= 1");
  net.check_class(k);
  net.check_layer(layer_index, true);
  detail::check_rows(net, layer_index, a.size());
  detail::require_dims(a_base.size() == a.size(), "baseline and activation differ in size");
  const Vector delta = a - a_base;

  Matrix cot = Matrix::Zero(net.class_count(), m);
  cot.row(k).setOnes();
  if (layer_index == -1) {
    // The path is linear through layer 0, so evaluate it in pre-activation
    // space and apply W_0^T once to the averaged cotangent.
    const auto& first = net.layers().front();
    const Vector z_base = first.weight * a_base + first.bias;
    const Vector z_dir = first.weight * delta;
    Matrix z(z_base.size(), m);
    for (int j = 0; j < m; ++j) z.col(j) = z_base + ((j + 0.5) / m) * z_dir;
    Matrix act = z;
    detail::apply_nonlinearity(first.nonlinearity, act);
    Matrix dz = vjp_from_layer(net, 0, act, cot);
    if (first.nonlinearity == Nonlinearity::relu) dz = dz.cwiseProduct((z.array() > 0.0).cast<double>().matrix());
    const Vector mean_dz = dz.rowwise().mean();
    return first.weight.transpose() * mean_dz;
  }
  Matrix points(a.size(), m);
  for (int j = 0; j < m; ++j) points.col(j) = a_base + ((j + 0.5) / m) * delta;
  const Matrix grads = vjp_from_layer(net, layer_index, points, cot);
  return grads.rowwise().mean();
}

/// IG(x) = (x - x') * average gradient of F_k along the path (input space).
inline Vector integrated_gradients(const Network& net, int k, const Vector& x, const Vector& x_base, int m) {
  const Vector g = path_gradient(net, k, -1, x, x_base, m);
  if (!g.allFinite()) throw NumericalError("non-finite gradient along the IG path");
  return (x - x_base).cwiseProduct(g);
}

/// ICS = ((a - a') . v) * average over the path of grad h_k . v.
inline double ics(const Network& net, int k, int layer_index, const Vector& a, const Vector& a_base,
                  const Vector& v_unit, int m) {
  net.check_layer(layer_index);
  detail::require_dims(v_unit.size() == a.size(), "CAV width does not match the activation");
  check_unit(v_unit);
  const double prefactor = (a - a_base).dot(v_unit);
  const Vector g = path_gradient(net, k, layer_index, a, a_base, m);
  if (!g.allFinite()) throw NumericalError("non-finite gradient along the ICS path");
  return prefactor * g.dot(v_unit);
}

/// Closed-form ICS against the entropy-maximizing baseline when this layer feeds a
/// sigmoid readout directly: cos^2(v, w) * (sigma(w.a + b) - 1/2), class 1.
inline double ics_closed_form_entropy(const Vector& w, double b, const Vector& v_unit, const Vector& a) {
  detail::require_dims(w.size() == a.size() && v_unit.size() == a.size(), "closed form: size mismatch");
  const double wn = w.norm();
  if (!(wn > 0.0)) throw DegenerateInputError("zero readout weight vector");
  const double cosine = v_unit.dot(w) / wn;
  return cosine * cosine * (sigmoid(w.dot(a) + b) - 0.5);
}

/// Same, for either class of a two-class sigmoid head (h_0 = 1 - h_1).
inline double ics_closed_form_entropy(const Network& net, int k, int layer_index, const Vector& v_unit,
                                      const Vector& a) {
  net.check_class(k);
  const auto readout = binary_readout(net, layer_index);
  detail::require(readout.has_value(), "the entropy closed form needs a sigmoid head on the next layer");
  const double value = ics_closed_form_entropy(readout->w, readout->b, v_unit, a);
  return k == 1 ? value : -value;
}

/// ICS with the concept-forgetting baseline collapses to h_k(a) - h_k(a - lambda v).
inline double ics_closed_form_forgetting(const Network& net, int k, int layer_index, const Vector& a,
                                         const Vector& v_raw, double lambda) {
  net.check_class(k);
  detail::require_dims(v_raw.size() == a.size(), "CAV width does not match the activation");
  Matrix both(a.size(), 2);
  both.col(0) = a;
  both.col(1) = a - lambda * v_raw;
  const Matrix p = head_from_layer_batch(net, layer_index, both);
  return p(k, 0) - p(k, 1);
}

// ---------------------------------------------------------------------------
// Records

struct AttributionRecord {
  std::string sample_id;
  std::string concept_name;
  int layer = 0;
  int k = 0;
  double cs_value = 0.0;
  double ics_value = 0.0;
  std::string baseline;
  int m = 0;
};

}  // namespace icscope
