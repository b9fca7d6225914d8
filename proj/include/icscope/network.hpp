#pragma once

// Dense feed-forward network: construction, inference with activation capture,
// and exact reverse-mode gradients of head outputs with respect to any layer.
//
// Layer l maps a_{l-1} to a_l = act_l(W_l a_{l-1} + b_l); a_{-1} is the input.
// The last layer produces logits, and the head squashes them into class
// probabilities. A sigmoid head has one logit and two classes:
// h_1 = sigmoid(z), h_0 = sigmoid(-z).

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "icscope/errors.hpp"
#include "icscope/image.hpp"
#include "icscope/rng.hpp"

namespace icscope {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

enum class Nonlinearity { relu, identity };
enum class HeadKind { sigmoid_binary, softmax };

inline const char* to_string(Nonlinearity n) { return n == Nonlinearity::relu ? "relu" : "identity"; }
inline const char* to_string(HeadKind h) {
  return h == HeadKind::sigmoid_binary ? "sigmoid_binary" : "softmax";
}

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out
  Nonlinearity nonlinearity = Nonlinearity::relu;

  Index in_dim() const { return weight.cols(); }
  Index out_dim() const { return weight.rows(); }
};

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

class Network {
 public:
  Network() = default;

  Network(std::vector<DenseLayer> layers, HeadKind head, double dropout_rate = 0.0,
          std::uint64_t seed = 0)
      : layers_(std::move(layers)), head_(head), dropout_rate_(dropout_rate), seed_(seed) {
    validate();
  }

  /// He-initialised ReLU MLP: hidden widths, then an identity layer producing
  /// one logit (sigmoid head) or `classes` logits (softmax head).
  static Network mlp(Index input_dim, std::span<const Index> hidden, HeadKind head, int classes,
                     double dropout_rate, std::uint64_t seed) {
    detail::require(input_dim > 0, "input dimension must be positive");
    detail::require(head == HeadKind::sigmoid_binary ? classes == 2 : classes >= 2,
                    "sigmoid heads have 2 classes, softmax heads at least 2");
    std::vector<DenseLayer> layers;
    Index fan_in = input_dim;
    const Index outputs = head == HeadKind::sigmoid_binary ? 1 : classes;
    for (std::size_t l = 0; l <= hidden.size(); ++l) {
      const bool last = l == hidden.size();
      const Index fan_out = last ? outputs : hidden[l];
      CounterRng rng(seed, "init", l);
      std::normal_distribution<double> normal(
          0.0, last ? std::sqrt(1.0 / static_cast<double>(fan_in))
                    : std::sqrt(2.0 / static_cast<double>(fan_in)));
      DenseLayer layer{Matrix(fan_out, fan_in), Vector::Zero(fan_out),
                       last ? Nonlinearity::identity : Nonlinearity::relu};
      // Row-major fill order so the draw sequence does not depend on storage order.
      for (Index r = 0; r < fan_out; ++r)
        for (Index c = 0; c < fan_in; ++c) layer.weight(r, c) = normal(rng);
      layers.push_back(std::move(layer));
      fan_in = fan_out;
    }
    return Network(std::move(layers), head, dropout_rate, seed);
  }

  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
  std::vector<DenseLayer>& mutable_layers() noexcept { return layers_; }
  int layer_count() const noexcept { return static_cast<int>(layers_.size()); }
  HeadKind head() const noexcept { return head_; }
  double dropout_rate() const noexcept { return dropout_rate_; }
  std::uint64_t seed() const noexcept { return seed_; }
  void set_seed(std::uint64_t seed) noexcept { seed_ = seed; }

  /// Optional image shape (H, W, C) the input layer was built for.
  const std::vector<int>& input_shape() const noexcept { return input_shape_; }
  void set_input_shape(std::vector<int> shape) { input_shape_ = std::move(shape); }

  Index input_dim() const { return layers_.front().in_dim(); }
  /// Width of activation a_l; layer -1 is the input.
  Index layer_dim(int layer_index) const {
    check_layer(layer_index, true);
    return layer_index < 0 ? input_dim() : layers_[layer_index].out_dim();
  }
  int class_count() const {
    return head_ == HeadKind::sigmoid_binary ? 2 : static_cast<int>(layers_.back().out_dim());
  }

  void check_layer(int layer_index, bool allow_input = false) const {
    detail::require_dims(layer_index >= (allow_input ? -1 : 0) && layer_index < layer_count(),
                         "layer index " + std::to_string(layer_index) + " out of range");
  }
  void check_class(int k) const {
    detail::require_dims(k >= 0 && k < class_count(), "class index " + std::to_string(k) +
                                                          " out of range");
  }

 private:
  void validate() const {
    detail::require(!layers_.empty(), "network needs at least one layer");
    detail::require(dropout_rate_ >= 0.0 && dropout_rate_ < 1.0, "dropout rate must be in [0,1)");
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& layer = layers_[l];
      detail::require_dims(layer.bias.size() == layer.out_dim(),
                           "bias length mismatch at layer " + std::to_string(l));
      if (l > 0)
        detail::require_dims(layer.in_dim() == layers_[l - 1].out_dim(),
                             "adjacent layer dimensions mismatch at layer " + std::to_string(l));
    }
    if (head_ == HeadKind::sigmoid_binary)
      detail::require_dims(layers_.back().out_dim() == 1, "sigmoid head needs exactly one logit");
    else
      detail::require_dims(layers_.back().out_dim() >= 2, "softmax head needs at least two logits");
  }

  std::vector<DenseLayer> layers_;
  HeadKind head_ = HeadKind::sigmoid_binary;
  double dropout_rate_ = 0.0;
  std::uint64_t seed_ = 0;
  std::vector<int> input_shape_;
};

// ---------------------------------------------------------------------------
// Inference

/// Class probabilities for a batch of logits (columns are samples).
inline Matrix head_probabilities(HeadKind head, const Matrix& logits) {
  if (head == HeadKind::sigmoid_binary) {
    Matrix p(2, logits.cols());
    for (Index j = 0; j < logits.cols(); ++j) {
      p(1, j) = sigmoid(logits(0, j));
      p(0, j) = sigmoid(-logits(0, j));
    }
    return p;
  }
  Matrix p(logits.rows(), logits.cols());
  for (Index j = 0; j < logits.cols(); ++j) {
    const double peak = logits.col(j).maxCoeff();
    p.col(j) = (logits.col(j).array() - peak).exp().matrix();
    p.col(j) /= p.col(j).sum();
  }
  return p;
}

namespace detail {

inline void apply_nonlinearity(Nonlinearity n, Matrix& z) {
  if (n == Nonlinearity::relu) z = z.cwiseMax(0.0);
}

inline void check_rows(const Network& net, int layer_index, Index rows) {
  detail::require_dims(rows == net.layer_dim(layer_index),
                       "activation width " + std::to_string(rows) + " does not match layer " +
                           std::to_string(layer_index) + " width " +
                           std::to_string(net.layer_dim(layer_index)));
}

}  // namespace detail

/// Propagates activations at `from_layer` (columns) up to activations at `to_layer`.
inline Matrix propagate(const Network& net, int from_layer, Matrix a, int to_layer) {
  net.check_layer(from_layer, true);
  net.check_layer(to_layer, true);
  detail::check_rows(net, from_layer, a.rows());
  for (int j = from_layer + 1; j <= to_layer; ++j) {
    const auto& layer = net.layers()[j];
    Matrix z = layer.weight * a;
    z.colwise() += layer.bias;
    detail::apply_nonlinearity(layer.nonlinearity, z);
    a = std::move(z);
  }
  return a;
}

/// Head probabilities (K x n) for activations given at `layer_index`.
inline Matrix head_from_layer_batch(const Network& net, int layer_index, const Matrix& a) {
  const Matrix logits = propagate(net, layer_index, a, net.layer_count() - 1);
  return head_probabilities(net.head(), logits);
}

/// h(a): class probabilities from activations at `layer_index` (-1 means the input).
inline Vector head_from_layer(const Network& net, int layer_index, const Vector& a) {
  return head_from_layer_batch(net, layer_index, a).col(0);
}

/// Activations at one layer for a batch of inputs (columns).
inline Matrix activations_at(const Network& net, const Matrix& inputs, int layer_index) {
  return propagate(net, -1, inputs, layer_index);
}

struct Capture {
  std::vector<Vector> activations;  // a_0 .. a_{L-1}; a_{L-1} are the logits
  Vector probabilities;
};

/// Inference pass (dropout disabled) that keeps every layer's activation.
inline Capture forward_capture(const Network& net, const Vector& x) {
  detail::check_rows(net, -1, x.size());
  Capture out;
  Vector a = x;
  for (const auto& layer : net.layers()) {
    Matrix z = layer.weight * a + layer.bias;
    detail::apply_nonlinearity(layer.nonlinearity, z);
    a = z.col(0);
    out.activations.push_back(a);
  }
  out.probabilities = head_probabilities(net.head(), out.activations.back()).col(0);
  return out;
}

inline Capture forward_capture(const Network& net, const ImageTensor& image) {
  return forward_capture(net, image.flatten());
}

inline int predict_class(const Vector& probabilities) {
  Index best = 0;
  probabilities.maxCoeff(&best);
  return static_cast<int>(best);
}

// ---------------------------------------------------------------------------
// Gradients

namespace detail {

/// Pre-activations of layers layer_index+1 .. last for a batch, plus the logits.
struct ForwardTrace {
  std::vector<Matrix> pre;
  Matrix logits;
};

inline ForwardTrace trace_from_layer(const Network& net, int layer_index, const Matrix& a) {
  ForwardTrace t;
  const int last = net.layer_count() - 1;
  t.pre.reserve(static_cast<std::size_t>(last - layer_index));
  Matrix act = a;
  for (int j = layer_index + 1; j <= last; ++j) {
    const auto& layer = net.layers()[j];
    Matrix z = layer.weight * act;
    z.colwise() += layer.bias;
    t.pre.push_back(z);
    detail::apply_nonlinearity(layer.nonlinearity, z);
    act = std::move(z);
  }
  t.logits = std::move(act);
  return t;
}

/// Pulls a cotangent on the logits back to layer `layer_index`.
inline Matrix backprop_logits(const Network& net, int layer_index, const ForwardTrace& t, Matrix grad) {
  for (int j = net.layer_count() - 1; j > layer_index; --j) {
    const auto& layer = net.layers()[j];
    const Matrix& z = t.pre[static_cast<std::size_t>(j - layer_index - 1)];
    if (layer.nonlinearity == Nonlinearity::relu)
      grad = grad.cwiseProduct((z.array() > 0.0).cast<double>().matrix());
    grad = layer.weight.transpose() * grad;
  }
  return grad;
}

}  // namespace detail

/// Vector-Jacobian product: for each column j returns the gradient with respect
/// to a(:, j) of sum_k cotangent(k, j) * h_k(a(:, j)).
inline Matrix vjp_from_layer(const Network& net, int layer_index, const Matrix& a,
                             const Matrix& cotangent) {
  net.check_layer(layer_index, true);
  detail::check_rows(net, layer_index, a.rows());
  detail::require_dims(cotangent.rows() == net.class_count() && cotangent.cols() == a.cols(),
                       "cotangent must be classes x samples");
  const auto t = detail::trace_from_layer(net, layer_index, a);
  const Matrix& act = t.logits;
  // d(sum_k c_k h_k)/d logits
  Matrix grad(act.rows(), act.cols());
  if (net.head() == HeadKind::sigmoid_binary) {
    for (Index j = 0; j < act.cols(); ++j) {
      const double z = act(0, j);
      grad(0, j) = (cotangent(1, j) - cotangent(0, j)) * sigmoid(z) * sigmoid(-z);
    }
  } else {
    const Matrix p = head_probabilities(net.head(), act);
    for (Index j = 0; j < act.cols(); ++j) {
      const double mean = cotangent.col(j).dot(p.col(j));
      grad.col(j) = p.col(j).cwiseProduct((cotangent.col(j).array() - mean).matrix());
    }
  }
  return detail::backprop_logits(net, layer_index, t, std::move(grad));
}

/// Same as vjp_from_layer with the cotangent on the logits instead of h.
inline Matrix logit_vjp_from_layer(const Network& net, int layer_index, const Matrix& a, const Matrix& cotangent) {
  net.check_layer(layer_index, true);
  detail::check_rows(net, layer_index, a.rows());
  const auto t = detail::trace_from_layer(net, layer_index, a);
  detail::require_dims(cotangent.rows() == t.logits.rows() && cotangent.cols() == a.cols(),
                       "cotangent must be logits x samples");
  return detail::backprop_logits(net, layer_index, t, cotangent);
}

/// Gradient of h_k with respect to a batch of activations at `layer_index`.
inline Matrix grad_head_batch(const Network& net, int k, int layer_index, const Matrix& a) {
  net.check_class(k);
  Matrix cot = Matrix::Zero(net.class_count(), a.cols());
  cot.row(k).setOnes();
  return vjp_from_layer(net, layer_index, a, cot);
}

/// Exact gradient of h_k with respect to the activation a at `layer_index`.
inline Vector grad_head_wrt_activation(const Network& net, int k, int layer_index, const Vector& a) {
  net.check_layer(layer_index);
  return grad_head_batch(net, k, layer_index, a).col(0);
}

/// Gradient of F_k with respect to the raw input.
inline Vector grad_head_wrt_input(const Network& net, int k, const Vector& x) {
  return grad_head_batch(net, k, -1, x).col(0);
}

}  // namespace icscope
