#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "icscope/errors.hpp"
#include "icscope/network.hpp"
#include "icscope/rng.hpp"

namespace icscope {

/// Non-owning view of a labelled dataset: inputs are stored one sample per column.
struct DatasetView {
  const Eigen::MatrixXf* inputs = nullptr;
  std::span<const int> labels;

  Index size() const { return static_cast<Index>(labels.size()); }
};

enum class OptimizerKind { adam, sgd };

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::adam;
  double learning_rate = 1e-3;
  int batch_size = 64;
  int max_epochs = 20;
  std::uint64_t seed = 0;
  bool stop_at_perfect_validation = true;
  int min_epochs = 1;  // early stopping is only considered from this epoch on
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainReport {
  int epochs_run = 0;
  std::vector<double> epoch_losses;
  double train_accuracy = 0.0;
  std::optional<double> validation_accuracy;
  std::optional<double> test_accuracy;
};

struct TrainResult {
  Network network;
  TrainReport report;
};

namespace detail {

inline Matrix gather_columns(const Eigen::MatrixXf& inputs, std::span<const Index> columns) {
  Matrix out(inputs.rows(), static_cast<Index>(columns.size()));
  for (std::size_t j = 0; j < columns.size(); ++j)
    out.col(static_cast<Index>(j)) = inputs.col(columns[j]).cast<double>();
  return out;
}

inline void check_dataset(const Network& net, const DatasetView& data, const char* what) {
  detail::require(data.inputs != nullptr, std::string(what) + " inputs missing");
  detail::require(data.size() > 0, std::string(what) + " dataset is empty");
  detail::require_dims(data.inputs->cols() == data.size(),
                       std::string(what) + " inputs/labels count mismatch");
  detail::require_dims(data.inputs->rows() == net.input_dim(),
                       std::string(what) + " input width does not match the network");
  for (int y : data.labels)
    detail::require(y >= 0 && y < net.class_count(), std::string(what) + " label out of range");
}

}  // namespace detail

/// Top-1 accuracy with dropout disabled.
inline double accuracy(const Network& net, const DatasetView& data, Index chunk = 256) {
  detail::check_dataset(net, data, "evaluation");
  Index correct = 0;
  std::vector<Index> cols;
  for (Index start = 0; start < data.size(); start += chunk) {
    const Index stop = std::min(data.size(), start + chunk);
    cols.resize(static_cast<std::size_t>(stop - start));
    std::iota(cols.begin(), cols.end(), start);
    const Matrix probs = head_from_layer_batch(net, -1, detail::gather_columns(*data.inputs, cols));
    for (Index j = 0; j < probs.cols(); ++j)
      if (predict_class(probs.col(j)) == data.labels[static_cast<std::size_t>(start + j)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Mini-batch cross-entropy training. Deterministic given cfg.seed: batch order
/// and dropout masks come from counter-based streams keyed by epoch and step.
inline TrainResult train(Network net, const DatasetView& data, const TrainConfig& cfg,
                         std::optional<DatasetView> validation = std::nullopt,
                         std::optional<DatasetView> test = std::nullopt) {
  detail::require(cfg.learning_rate > 0.0, "learning rate must be positive");
  detail::require(cfg.batch_size >= 1, "batch size must be at least 1");
  detail::require(cfg.max_epochs >= 1, "need at least one epoch");
  detail::require(cfg.min_epochs >= 1 && cfg.min_epochs <= cfg.max_epochs, "min_epochs must be in [1, max_epochs]");
  detail::check_dataset(net, data, "training");
  if (validation) detail::check_dataset(net, *validation, "validation");
  if (test) detail::check_dataset(net, *test, "test");

  net.set_seed(cfg.seed);
  auto& layers = net.mutable_layers();
  const std::size_t L = layers.size();
  const double keep = 1.0 - net.dropout_rate();

  std::vector<Matrix> m_w(L), v_w(L);
  std::vector<Vector> m_b(L), v_b(L);
  for (std::size_t l = 0; l < L; ++l) {
    m_w[l] = Matrix::Zero(layers[l].weight.rows(), layers[l].weight.cols());
    v_w[l] = m_w[l];
    m_b[l] = Vector::Zero(layers[l].bias.size());
    v_b[l] = m_b[l];
  }

  TrainReport report;
  std::vector<Index> order(static_cast<std::size_t>(data.size()));
  std::uint64_t step = 0;
  std::vector<Matrix> acts(L + 1), masks(L);
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Index{0});
    CounterRng shuffle_rng(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::span<const Index> batch(order.data() + start, stop - start);
      const auto n = static_cast<Index>(batch.size());
      ++step;

      acts[0] = detail::gather_columns(*data.inputs, batch);
      CounterRng dropout_rng(cfg.seed, "dropout", step);
      for (std::size_t l = 0; l < L; ++l) {
        Matrix z = layers[l].weight * acts[l];
        z.colwise() += layers[l].bias;
        detail::apply_nonlinearity(layers[l].nonlinearity, z);
        const bool hidden = l + 1 < L;
        if (hidden && net.dropout_rate() > 0.0) {
          masks[l].resize(z.rows(), z.cols());
          for (Index c = 0; c < z.cols(); ++c)
            for (Index r = 0; r < z.rows(); ++r)
              masks[l](r, c) = dropout_rng.uniform() < keep ? 1.0 / keep : 0.0;
          z = z.cwiseProduct(masks[l]);
        }
        acts[l + 1] = std::move(z);
      }

      // Loss and its gradient with respect to the logits.
      const Matrix& logits = acts[L];
      Matrix grad(logits.rows(), n);
      double batch_loss = 0.0;
      if (net.head() == HeadKind::sigmoid_binary) {
        for (Index j = 0; j < n; ++j) {
          const double z = logits(0, j);
          const double y = data.labels[static_cast<std::size_t>(batch[static_cast<std::size_t>(j)])];
          batch_loss += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - y * z;
          grad(0, j) = sigmoid(z) - y;
        }
      } else {
        const Matrix p = head_probabilities(net.head(), logits);
        for (Index j = 0; j < n; ++j) {
          const int y = data.labels[static_cast<std::size_t>(batch[static_cast<std::size_t>(j)])];
          batch_loss -= std::log(std::max(p(y, j), 1e-300));
          grad.col(j) = p.col(j);
          grad(y, j) -= 1.0;
        }
      }
      if (!std::isfinite(batch_loss))
        throw NumericalError("non-finite training loss at epoch " + std::to_string(epoch) +
                             ", step " + std::to_string(step) + ": training diverged");
      loss_sum += batch_loss;
      grad /= static_cast<double>(n);

      for (std::size_t l = L; l-- > 0;) {
        const Matrix grad_w = grad * acts[l].transpose();
        const Vector grad_b = grad.rowwise().sum();
        if (l > 0) {
          Matrix upstream = layers[l].weight.transpose() * grad;
          if (net.dropout_rate() > 0.0) upstream = upstream.cwiseProduct(masks[l - 1]);
          if (layers[l - 1].nonlinearity == Nonlinearity::relu)
            upstream = upstream.cwiseProduct((acts[l].array() > 0.0).cast<double>().matrix());
          grad = std::move(upstream);
        }
        if (cfg.optimizer == OptimizerKind::adam) {
          const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
          const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
          const double lr = cfg.learning_rate * std::sqrt(c2) / c1;
          m_w[l] = cfg.beta1 * m_w[l] + (1.0 - cfg.beta1) * grad_w;
          v_w[l] = cfg.beta2 * v_w[l] + (1.0 - cfg.beta2) * grad_w.cwiseAbs2();
          layers[l].weight.array() -= lr * m_w[l].array() / (v_w[l].array().sqrt() + cfg.epsilon);
          m_b[l] = cfg.beta1 * m_b[l] + (1.0 - cfg.beta1) * grad_b;
          v_b[l] = cfg.beta2 * v_b[l] + (1.0 - cfg.beta2) * grad_b.cwiseAbs2();
          layers[l].bias.array() -= lr * m_b[l].array() / (v_b[l].array().sqrt() + cfg.epsilon);
        } else {
          layers[l].weight -= cfg.learning_rate * grad_w;
          layers[l].bias -= cfg.learning_rate * grad_b;
        }
      }
    }
    report.epoch_losses.push_back(loss_sum / static_cast<double>(data.size()));
    report.epochs_run = epoch + 1;
    if (validation) {
      report.validation_accuracy = accuracy(net, *validation);
      if (cfg.stop_at_perfect_validation && epoch + 1 >= cfg.min_epochs && *report.validation_accuracy >= 1.0) break;
    }
  }
  report.train_accuracy = accuracy(net, data);
  if (test) report.test_accuracy = accuracy(net, *test);
  return TrainResult{std::move(net), std::move(report)};
}

}  // namespace icscope
