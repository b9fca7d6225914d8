#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "icscope/icscope.hpp"

namespace testing {

using icscope::Index;
using icscope::Matrix;
using icscope::Network;
using icscope::Vector;

/// Small random MLP with non-zero biases so ReLU kinks are rare at random points.
inline Network small_net(Index input, std::vector<Index> hidden, icscope::HeadKind head, int classes,
                         std::uint64_t seed) {
  Network net = Network::mlp(input, hidden, head, classes, 0.0, seed);
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal(0.0, 0.3);
  for (auto& layer : net.mutable_layers())
    for (Index i = 0; i < layer.bias.size(); ++i) layer.bias(i) = normal(gen);
  return net;
}

inline Vector random_vector(Index n, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal(0.0, scale);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = normal(gen);
  return v;
}

inline Vector random_unit(Index n, std::uint64_t seed) {
  Vector v = random_vector(n, seed);
  return v / v.norm();
}

/// Two Gaussian clusters at +/- shift * direction, one sample per column.
inline icscope::ConceptSet gaussian_concept(Index d, Index n_per_side, const Vector& direction, double shift,
                                            std::uint64_t seed, int layer = 0) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  icscope::ConceptSet cs{"synthetic", layer, Matrix(d, n_per_side), Matrix(d, n_per_side)};
  for (Index j = 0; j < n_per_side; ++j) {
    for (Index i = 0; i < d; ++i) {
      cs.positives(i, j) = normal(gen) + shift * direction(i);
      cs.negatives(i, j) = normal(gen) - shift * direction(i);
    }
  }
  return cs;
}

/// Unique scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("icscope-test-" + tag + "-" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// Central finite-difference gradient of a scalar function.
template <typename F>
Vector fd_gradient(F&& f, const Vector& x, double h = 1e-6) {
  Vector g(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    Vector xp = x, xm = x;
    xp(i) += h;
    xm(i) -= h;
    g(i) = (f(xp) - f(xm)) / (2.0 * h);
  }
  return g;
}

/// Tiny experiment config that trains in seconds.
inline icscope::ExperimentConfig tiny_config() {
  return icscope::ExperimentConfig::from_json(nlohmann::json::parse(R"({
    "seed": 3,
    "dataset": {"height": 12, "width": 12, "thickness": 2, "noise_sigma": 0.05,
                "n_train": 400, "n_validation": 100, "n_test": 120, "n_concept": 160},
    "model": {"hidden": [16, 8, 4], "dropout": 0.0, "max_epochs": 30, "learning_rate": 0.005},
    "cav": {"B": 4, "n_perm": 5},
    "quadrature_m": 8,
    "mcs": {"N": 120, "K": 4},
    "eval": {"max_samples": 40},
    "local": {"samples_per_class": 1},
    "noise_baseline": {"draws": 3},
    "baseline_probabilities": {"samples": 10},
    "ablation": {"ratios": [2, 0.5], "replicates": 3, "layer": 1, "augment_copies": 1}
  })"));
}

}  // namespace testing
