#include <catch_amalgamated.hpp>

#include "support.hpp"

using namespace icscope;
using testing::gaussian_concept;
using testing::random_unit;

namespace {

struct Problem {
  Matrix X;
  Vector y;
};

Problem pooled(const ConceptSet& cs) {
  Problem p{Matrix(cs.dim(), cs.positives.cols() + cs.negatives.cols()), Vector(cs.positives.cols() + cs.negatives.cols())};
  p.X << cs.positives, cs.negatives;
  p.y.head(cs.positives.cols()).setOnes();
  p.y.tail(cs.negatives.cols()).setZero();
  return p;
}

/// Gradient of the mean logistic loss plus (l2/2)|w|^2, written out directly.
Vector smooth_gradient(const Problem& p, const Vector& w, double b, double l2) {
  Vector g = Vector::Zero(w.size() + 1);
  for (Index j = 0; j < p.X.cols(); ++j) {
    const double r = 1.0 / (1.0 + std::exp(-(w.dot(p.X.col(j)) + b))) - p.y(j);
    g.head(w.size()) += r * p.X.col(j);
    g(w.size()) += r;
  }
  g /= static_cast<double>(p.X.cols());
  g.head(w.size()) += l2 * w;
  return g;
}

}  // namespace

TEST_CASE("Newton fit satisfies the stationarity condition") {
  const Vector u = random_unit(6, 1);
  const auto cs = gaussian_concept(6, 80, u, 0.4, 2);  // overlapping clusters
  const auto p = pooled(cs);
  Regularization reg;
  reg.strength = 0.05;
  const auto fit = detail::fit_logistic_newton(p.X, p.y, reg);
  CHECK(smooth_gradient(p, fit.w, fit.b, reg.l2()).lpNorm<Eigen::Infinity>() < 1e-7);
}

TEST_CASE("FISTA and Newton agree on the pure l2 objective") {
  const Vector u = random_unit(5, 3);
  const auto p = pooled(gaussian_concept(5, 60, u, 0.5, 4));
  Regularization l2;
  l2.strength = 0.1;
  Regularization en = l2;
  en.kind = RegKind::elastic_net;
  en.l1_ratio = 0.0;
  en.tolerance = 1e-12;
  en.max_iterations = 200000;
  const auto a = detail::fit_logistic_newton(p.X, p.y, l2);
  const auto b = detail::fit_logistic_fista(p.X, p.y, en);
  CHECK((a.w - b.w).norm() < 1e-6);
  CHECK(std::abs(a.b - b.b) < 1e-6);
}

TEST_CASE("elastic-net fit satisfies the subgradient conditions") {
  const Vector u = random_unit(8, 5);
  const auto p = pooled(gaussian_concept(8, 70, u, 0.6, 6));
  Regularization reg;
  reg.kind = RegKind::elastic_net;
  reg.strength = 0.1;
  reg.l1_ratio = 0.7;
  reg.tolerance = 1e-12;
  reg.max_iterations = 200000;
  const auto fit = detail::fit_logistic_fista(p.X, p.y, reg);
  const Vector g = smooth_gradient(p, fit.w, fit.b, reg.l2());
  CHECK(std::abs(g(8)) < 1e-6);
  int zeros = 0;
  for (Index j = 0; j < 8; ++j) {
    if (fit.w(j) == 0.0) {
      ++zeros;
      CHECK(std::abs(g(j)) <= reg.l1() + 1e-6);
    } else {
      CHECK(std::abs(g(j) + reg.l1() * (fit.w(j) > 0 ? 1.0 : -1.0)) < 1e-6);
    }
  }
  CHECK(zeros > 0);  // l1 sparsifies the off-direction coordinates
}

TEST_CASE("CAV geometry: unit direction along the concept shift, positives score higher") {
  const Vector u = random_unit(10, 7);
  for (double sign : {1.0, -1.0}) {
    const auto cs = gaussian_concept(10, 200, sign * u, 2.0, 8);
    const Cav cav = fit_cav(cs, {}, 3);
    CHECK(cav.v_unit.norm() == Catch::Approx(1.0).epsilon(1e-12));
    CHECK((cav.v_unit - cav.v / cav.v.norm()).norm() < 1e-12);
    CHECK(cav.v_unit.dot(sign * u) > 0.95);
    CHECK(cav.heldout_auc > 0.97);  // Bayes AUC is Phi(2.83) ~ 0.998
    CHECK(cav.provenance.bootstrap == -1);
    double pos = 0.0, neg = 0.0;
    for (Index j = 0; j < cs.positives.cols(); ++j) pos += cav.score(cs.positives.col(j));
    for (Index j = 0; j < cs.negatives.cols(); ++j) neg += cav.score(cs.negatives.col(j));
    CHECK(pos > neg);
  }
}

TEST_CASE("bootstrap CAVs are deterministic, distinct and tagged") {
  const Vector u = random_unit(4, 9);
  const auto cs = gaussian_concept(4, 50, u, 1.0, 10);
  const auto a = bootstrap_cavs(cs, 6, {}, 11), b = bootstrap_cavs(cs, 6, {}, 11);
  REQUIRE(a.size() == 6);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].v == b[i].v);
    CHECK(a[i].provenance.bootstrap == static_cast<int>(i));
    CHECK_FALSE(a[i].provenance.permuted);
  }
  CHECK(a[0].v != a[1].v);
}

TEST_CASE("the identity permutation hook reproduces the real bootstrap CAVs") {
  const Vector u = random_unit(5, 12);
  const auto cs = gaussian_concept(5, 40, u, 1.0, 13);
  const auto real = bootstrap_cavs(cs, 3, {}, 14);
  const auto ident = permuted_cavs(cs, 3, 2, {}, 14, true);
  REQUIRE(ident.size() == 6);
  for (std::size_t t = 0; t < ident.size(); ++t) {
    CHECK(ident[t].v == real[t / 2].v);
    CHECK(ident[t].bias == real[t / 2].bias);
    CHECK(ident[t].provenance.permuted);
    CHECK(ident[t].provenance.permutation == static_cast<int>(t % 2));
  }
  const auto shuffled = permuted_cavs(cs, 3, 2, {}, 14);
  CHECK(shuffled[0].v != real[0].v);
}

TEST_CASE("permutation p-value is floored at 1/(1+N) and Bonferroni-corrected") {
  const Vector u = random_unit(6, 15);
  const auto cs = gaussian_concept(6, 60, u, 3.0, 16);
  const auto real = bootstrap_cavs(cs, 5, {}, 17);
  const auto perm = permuted_cavs(cs, 5, 8, {}, 17);
  const auto sig = cav_significance(real, perm, 0.05, 1);
  CHECK(sig.p_value == Catch::Approx(1.0 / 41.0));
  CHECK(sig.significant);
  CHECK(sig.n_bootstraps == 5);
  CHECK(sig.n_permutations_per_bootstrap == 8);
  // 1/41 > 0.05/3 fails once the family has three tests.
  CHECK_FALSE(cav_significance(real, perm, 0.05, 3).significant);
  CHECK(sig.p_value >= 0.0);
  CHECK(sig.p_value <= 1.0);
}

TEST_CASE("a random concept labelling is not significant on average") {
  const Vector u = random_unit(6, 18);
  const auto cs = gaussian_concept(6, 60, u, 0.0, 19);
  const auto sig = cav_significance(bootstrap_cavs(cs, 5, {}, 20), permuted_cavs(cs, 5, 20, {}, 20));
  CHECK(sig.p_value > 0.05);
}

TEST_CASE("degenerate and undersized concept sets are rejected") {
  ConceptSet flat{"flat", 0, Matrix::Ones(3, 10), Matrix::Ones(3, 10)};
  CHECK_THROWS_AS(fit_cav(flat), DegenerateInputError);
  ConceptSet tiny{"tiny", 0, Matrix::Random(3, 1), Matrix::Random(3, 5)};
  CHECK_THROWS_AS(fit_cav(tiny), ConfigError);
  ConceptSet mismatch{"mismatch", 0, Matrix::Random(3, 5), Matrix::Random(4, 5)};
  CHECK_THROWS_AS(fit_cav(mismatch), DimensionError);
  Regularization bad;
  bad.strength = -1.0;
  CHECK_THROWS_AS(fit_cav(gaussian_concept(3, 10, random_unit(3, 1), 1.0, 1), bad), ConfigError);
  CHECK_THROWS_AS(reg_from_string("lasso"), ConfigError);
}

TEST_CASE("CAV bundles round-trip through JSON") {
  const auto cs = gaussian_concept(4, 30, random_unit(4, 21), 1.0, 22, 2);
  auto cavs = bootstrap_cavs(cs, 2, {}, 23);
  const auto perm = permuted_cavs(cs, 2, 1, {}, 23);
  cavs.insert(cavs.end(), perm.begin(), perm.end());
  testing::TempDir dir("cav");
  const auto path = (dir.path() / "cavs.json").string();
  save_cavs(cavs, path);
  const auto back = load_cavs(path);
  REQUIRE(back.size() == cavs.size());
  for (std::size_t i = 0; i < cavs.size(); ++i) {
    CHECK(back[i].concept_name == cavs[i].concept_name);
    CHECK(back[i].layer == 2);
    CHECK(back[i].v == cavs[i].v);
    CHECK(back[i].v_unit == cavs[i].v_unit);
    CHECK(back[i].bias == cavs[i].bias);
    CHECK(back[i].heldout_auc == cavs[i].heldout_auc);
    CHECK(back[i].provenance == cavs[i].provenance);
  }
}
