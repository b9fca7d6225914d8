#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <vector>

namespace icscope {

/// Dense height x width x channels image, row-major HWC, values in [0, 1].
/// Stored in 32-bit; promoted to double when fed to a network.
struct ImageTensor {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> pixels;

  ImageTensor() = default;
  ImageTensor(int h, int w, int c, float fill = 0.0f)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h) * w * c, fill) {}

  std::size_t size() const noexcept { return pixels.size(); }

  std::size_t index(int h, int w, int c) const noexcept {
    return (static_cast<std::size_t>(h) * width + w) * channels + c;
  }
  float& at(int h, int w, int c) noexcept { return pixels[index(h, w, c)]; }
  float at(int h, int w, int c) const noexcept { return pixels[index(h, w, c)]; }

  Eigen::VectorXd flatten() const {
    return Eigen::Map<const Eigen::VectorXf>(pixels.data(), static_cast<Eigen::Index>(pixels.size()))
        .cast<double>();
  }

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;
};

}  // namespace icscope
