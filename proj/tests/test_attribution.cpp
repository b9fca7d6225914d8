#include <catch_amalgamated.hpp>

#include <numbers>

#include "support.hpp"

using namespace icscope;
using testing::random_unit;
using testing::random_vector;
using testing::small_net;

namespace {

/// Midpoint average of grad h_k between a_base and a, one gradient call per node.
Vector naive_path_gradient(const Network& net, int k, int layer, const Vector& a, const Vector& a_base, int m) {
  Vector sum = Vector::Zero(a.size());
  for (int j = 0; j < m; ++j) {
    const Vector p = a_base + ((j + 0.5) / m) * (a - a_base);
    sum += layer < 0 ? grad_head_wrt_input(net, k, p) : grad_head_wrt_activation(net, k, layer, p);
  }
  return sum / m;
}

Cav make_cav(const Vector& v, double bias, int layer) {
  Cav c;
  c.concept_name = "synthetic";
  c.layer = layer;
  c.v = v;
  c.v_unit = v / v.norm();
  c.bias = bias;
  return c;
}

Vector hidden_activation(const Network& net, int layer, std::uint64_t seed) {
  return propagate(net, -1, random_vector(net.input_dim(), seed), layer).col(0);
}

/// Activations at `layer` whose output is not locally constant (some downstream unit is alive).
std::vector<Vector> live_activations(const Network& net, int layer, std::uint64_t seed, std::size_t count) {
  std::vector<Vector> out;
  for (std::uint64_t s = seed; out.size() < count && s < seed + 1000; ++s) {
    const Vector a = hidden_activation(net, layer, s);
    if (grad_head_wrt_activation(net, 0, layer, a).norm() > 1e-8) out.push_back(a);
  }
  REQUIRE(out.size() == count);
  return out;
}

}  // namespace

TEST_CASE("integrated gradients are complete for image baselines") {
  const Network net = small_net(20, {16, 12, 8}, HeadKind::sigmoid_binary, 2, 31);
  const Eigen::MatrixXf refs = Eigen::MatrixXf::Random(20, 9).cwiseAbs();
  std::vector<BaselineSpec> bases{BaselineSpec::of(BaselineKind::zero_image), BaselineSpec::of(BaselineKind::one_image),
                                  BaselineSpec::from_reference(BaselineKind::pixelwise_average, refs)};
  for (const auto& spec : bases) {
    const Vector x_base = baseline_input(spec, 20);
    for (std::uint64_t s = 0; s < 10; ++s) {
      const Vector x = random_vector(20, 40 + s).cwiseAbs();
      for (int k : {0, 1}) {
        const Vector ig = integrated_gradients(net, k, x, x_base, 2000);
        const double gap = head_from_layer(net, -1, x)(k) - head_from_layer(net, -1, x_base)(k);
        CHECK(std::abs(ig.sum() - gap) < 1e-3);
      }
    }
  }
}

TEST_CASE("path gradient matches a node-by-node oracle in input and layer space") {
  const Network net = small_net(7, {6, 5}, HeadKind::softmax, 3, 4);
  const Vector x = random_vector(7, 1), xb = random_vector(7, 2);
  CHECK((path_gradient(net, 2, -1, x, xb, 37) - naive_path_gradient(net, 2, -1, x, xb, 37)).norm() < 1e-12);
  const Vector a = hidden_activation(net, 0, 3), ab = hidden_activation(net, 0, 4);
  CHECK((path_gradient(net, 1, 0, a, ab, 37) - naive_path_gradient(net, 1, 0, a, ab, 37)).norm() < 1e-12);
}

TEST_CASE("ICS is the concept-axis component of layer-space IG in a rotated basis") {
  const Network net = small_net(10, {12, 9, 6}, HeadKind::sigmoid_binary, 2, 8);
  for (int layer : {0, 1, 2}) {
    const Index d = net.layer_dim(layer);
    for (std::uint64_t s = 0; s < 5; ++s) {
      const Vector a = hidden_activation(net, layer, 100 + s), ab = hidden_activation(net, layer, 200 + s);
      const Vector v = random_unit(d, 300 + s);
      // Orthonormal basis whose first axis is +-v.
      Matrix seed_basis = Matrix::Random(d, d);
      seed_basis.col(0) = v;
      const Matrix Q = Eigen::HouseholderQR<Matrix>(seed_basis).householderQ();
      const Vector g = naive_path_gradient(net, 1, layer, a, ab, 64);
      const Vector ig_rotated = (Q.transpose() * (a - ab)).cwiseProduct(Q.transpose() * g);
      CHECK(std::abs(ics(net, 1, layer, a, ab, v, 64) - ig_rotated(0)) < 1e-8);
      // Completeness survives the rotation.
      CHECK(ig_rotated.sum() == Catch::Approx((a - ab).dot(g)).margin(1e-12));
    }
  }
}

TEST_CASE("entropy closed form agrees with quadrature against the boundary projection") {
  const Network net = small_net(9, {8, 7, 6}, HeadKind::sigmoid_binary, 2, 12);
  const int layer = net.layer_count() - 2;
  const auto readout = binary_readout(net, layer);
  REQUIRE(readout.has_value());
  CHECK_FALSE(binary_readout(net, 0).has_value());
  for (std::uint64_t s = 0; s < 100; ++s) {
    const Vector a = hidden_activation(net, layer, 500 + s) + random_vector(6, 600 + s, 0.5);
    const Vector v = random_unit(6, 700 + s);
    const Vector ab = project_on_boundary(readout->w, readout->b, a);
    CHECK(std::abs(readout->w.dot(ab) + readout->b) < 1e-10);
    for (int k : {0, 1}) {
      const double quad = ics(net, k, layer, a, ab, v, 1000);
      CHECK(std::abs(ics_closed_form_entropy(net, k, layer, v, a) - quad) < 1e-4);
    }
  }
  CHECK_THROWS_AS(ics_closed_form_entropy(net, 1, 0, random_unit(8, 1), Vector::Ones(8)), ConfigError);
}

TEST_CASE("forgetting closed form agrees with quadrature") {
  const Network net = small_net(9, {8, 7, 6}, HeadKind::softmax, 3, 13);
  for (int layer : {0, 1}) {
    const Index d = net.layer_dim(layer);
    for (std::uint64_t s = 0; s < 100; ++s) {
      const Vector a = hidden_activation(net, layer, 800 + s);
      const Vector v_raw = random_vector(d, 900 + s, 0.7);
      const double lambda = 0.25 + 0.01 * static_cast<double>(s);
      const Vector ab = a - lambda * v_raw;
      const int k = static_cast<int>(s % 3);
      // ReLU kinks on the path make the midpoint rule first order, hence the fine grid.
      const double quad = ics(net, k, layer, a, ab, v_raw / v_raw.norm(), 20000);
      CHECK(std::abs(ics_closed_form_forgetting(net, k, layer, a, v_raw, lambda) - quad) < 1e-4);
    }
  }
}

TEST_CASE("entropy-maximizing baseline reaches uniform softmax output") {
  const Network net = small_net(8, {16, 12, 8}, HeadKind::softmax, 3, 17);
  for (int layer : {0, 1, 2}) {
    for (const Vector& a : live_activations(net, layer, 1000, 4)) {
      const Vector ab = make_baseline(BaselineSpec::of(BaselineKind::entropy_maximizing), net, layer, a);
      const double h = entropy(head_from_layer(net, layer, ab));
      CHECK(h >= 0.95 * std::log(3.0));
      CHECK(h == Catch::Approx(std::log(3.0)).margin(1e-6));
    }
  }
}

TEST_CASE("an unreachable uniform output is reported, not returned") {
  // Random search over layer 0 of this net never exceeds H = 1.011 < ln 3.
  const Network net = small_net(8, {10, 7, 5}, HeadKind::softmax, 3, 17);
  const Vector a = hidden_activation(net, 0, 1000);
  CHECK_THROWS_AS(entropy_maximizing_general(net, 0, a), NumericalError);
  try {
    entropy_maximizing_general(net, 0, a);
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("residual entropy") != std::string::npos);
  }
}

TEST_CASE("an already uniform output needs no move") {
  Network net = small_net(5, {4, 3}, HeadKind::softmax, 3, 2);
  net.mutable_layers().back().weight.setZero();
  net.mutable_layers().back().bias.setZero();
  const Vector a = hidden_activation(net, 0, 1);
  CHECK((entropy_maximizing_general(net, 0, a) - a).norm() < 1e-12);
  Network live = small_net(5, {4, 3}, HeadKind::sigmoid_binary, 2, 2);
  const auto readout = binary_readout(live, 1);
  REQUIRE(readout.has_value());
  const Vector on_boundary = project_on_boundary(readout->w, readout->b, hidden_activation(live, 1, 3));
  CHECK((make_baseline(BaselineSpec::of(BaselineKind::entropy_maximizing), live, 1, on_boundary) - on_boundary).norm() <
        1e-12);
}

TEST_CASE("general entropy solver finds the boundary projection at the last hidden layer") {
  const Network net = small_net(8, {9, 6}, HeadKind::sigmoid_binary, 2, 19);
  const int layer = net.layer_count() - 2;
  const auto readout = binary_readout(net, layer);
  REQUIRE(readout.has_value());
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Vector a = hidden_activation(net, layer, 1100 + s) + random_vector(6, 1200 + s, 0.5).cwiseAbs();
    const Vector general = entropy_maximizing_general(net, layer, a);
    const Vector closed = project_on_boundary(readout->w, readout->b, a);
    CHECK((general - closed).norm() < 1e-6 * (1.0 + a.norm()));
  }
}

TEST_CASE("entropy solver handles a saturated sigmoid output on an inner layer") {
  Network net = small_net(6, {8, 6, 4}, HeadKind::sigmoid_binary, 2, 23);
  net.mutable_layers().back().weight *= 200.0;  // push the output far into saturation
  for (const Vector& a : live_activations(net, 0, 1300, 4)) {
    REQUIRE(std::abs(head_from_layer(net, 0, a)(1) - 0.5) > 0.4);
    const Vector ab = entropy_maximizing_general(net, 0, a);
    CHECK(head_from_layer(net, 0, ab)(1) == Catch::Approx(0.5).margin(1e-3));
  }
}

TEST_CASE("image baselines: constants, seeded noise and reference statistics") {
  CHECK(baseline_input(BaselineSpec::of(BaselineKind::zero_image), 5) == Vector::Zero(5));
  CHECK(baseline_input(BaselineSpec::of(BaselineKind::one_image), 5) == Vector::Ones(5));

  BaselineSpec noise = BaselineSpec::of(BaselineKind::noise_image);
  noise.noise_seed = 4;
  const Vector n1 = baseline_input(noise, 300);
  CHECK(n1 == baseline_input(noise, 300));
  CHECK(n1.minCoeff() >= 0.0);
  CHECK(n1.maxCoeff() <= 1.0);
  noise.noise_seed = 5;
  CHECK(n1 != baseline_input(noise, 300));

  Eigen::MatrixXf refs(2, 4);
  refs << 0.0f, 1.0f, 0.5f, 0.2f,  //
      3.0f, 1.0f, 2.0f, 9.0f;
  const Vector avg = baseline_input(BaselineSpec::from_reference(BaselineKind::pixelwise_average, refs), 2);
  CHECK(avg(0) == Catch::Approx(0.425));
  CHECK(avg(1) == Catch::Approx(3.75));
  const Vector med = baseline_input(BaselineSpec::from_reference(BaselineKind::pixelwise_median, refs), 2);
  CHECK(med(0) == Catch::Approx(0.35));
  CHECK(med(1) == Catch::Approx(2.5));
  const Eigen::MatrixXf odd = refs.leftCols(3);
  CHECK(baseline_input(BaselineSpec::from_reference(BaselineKind::pixelwise_median, odd), 2)(1) == Catch::Approx(2.0));

  CHECK_THROWS_AS(baseline_input(BaselineSpec::of(BaselineKind::pixelwise_average), 2), ConfigError);
  CHECK_THROWS_AS(baseline_input(BaselineSpec::from_reference(BaselineKind::pixelwise_average, refs), 3),
                  DimensionError);
  CHECK(baseline_from_string("black") == BaselineKind::zero_image);
  CHECK(baseline_from_string("white") == BaselineKind::one_image);
  CHECK_THROWS_AS(baseline_from_string("grey"), ConfigError);
}

TEST_CASE("informative baselines act along the CAV") {
  const Network net = small_net(6, {5, 4}, HeadKind::sigmoid_binary, 2, 29);
  const Cav cav = make_cav(random_vector(5, 1), 0.3, 0);
  const Vector a = hidden_activation(net, 0, 2);

  BaselineSpec refl = BaselineSpec::of(BaselineKind::concept_forgetting);
  refl.forgetting_mode = ForgettingMode::reflection;
  const Vector reflected = make_baseline(refl, net, 0, a, &cav);
  CHECK(cav.score(reflected) == Catch::Approx(-cav.score(a)).margin(1e-12));

  const Vector occluded = make_baseline(BaselineSpec::of(BaselineKind::concept_occluding), net, 0, a, &cav);
  CHECK(std::abs(cav.score(occluded)) < 1e-12);

  BaselineSpec fixed = BaselineSpec::of(BaselineKind::concept_forgetting);
  fixed.lambda = 0.7;
  CHECK((make_baseline(fixed, net, 0, a, &cav) - (a - 0.7 * cav.v)).norm() < 1e-14);
  fixed.lambda = -1.0;
  CHECK_THROWS_AS(make_baseline(fixed, net, 0, a, &cav), ConfigError);
  CHECK_THROWS_AS(make_baseline(refl, net, 0, a), ConfigError);
  refl.lambda = -1.0;  // unused in reflection mode
  CHECK_NOTHROW(make_baseline(refl, net, 0, a, &cav));
}

TEST_CASE("conceptual sensitivity is the directional derivative and needs a unit CAV") {
  const Network net = small_net(6, {5, 4}, HeadKind::softmax, 3, 37);
  const Vector a = hidden_activation(net, 1, 3);
  const Vector v = random_unit(4, 4);
  const Vector fd = testing::fd_gradient([&](const Vector& y) { return head_from_layer(net, 1, y)(2); }, a);
  CHECK(conceptual_sensitivity(net, 2, 1, a, v) == Catch::Approx(fd.dot(v)).epsilon(1e-6));
  CHECK_THROWS_AS(conceptual_sensitivity(net, 2, 1, a, 2.0 * v), ConfigError);
  CHECK_THROWS_AS(ics(net, 2, 1, a, a, 2.0 * v, 4), ConfigError);
  CHECK_THROWS_AS(conceptual_sensitivity(net, 2, make_cav(v, 0.0, 0), a), DimensionError);
}
