#pragma once

// Synthetic BARS images: black noisy canvas with one red or green bar that is
// either horizontal or vertical. Orientation and color are independent labels.
//
// A sample is stored as its generation recipe (labels, bar offset, noise
// stream, geometric flips, photometric edits) and rendered on demand. Edits of
// a concept therefore keep the noise field and bar geometry untouched.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "icscope/errors.hpp"
#include "icscope/image.hpp"
#include "icscope/rng.hpp"
#include "json.hpp"

namespace icscope {

enum class Orientation { horizontal = 0, vertical = 1 };
enum class BarColor { red = 0, green = 1 };
enum class Concept { color, orientation };

inline const char* to_string(Concept c) { return c == Concept::color ? "color" : "orientation"; }
inline Concept concept_from_string(const std::string& name) {
  if (name == "color") return Concept::color;
  if (name == "orientation") return Concept::orientation;
  throw ConfigError("unknown concept '" + name + "' (expected color or orientation)");
}

struct BarsConfig {
  int height = 100;
  int width = 100;
  int thickness = 5;
  double noise_sigma = 0.05;
  double bar_intensity = 1.0;

  int channels() const { return 3; }
  Eigen::Index input_dim() const { return static_cast<Eigen::Index>(height) * width * 3; }
  void validate() const {
    detail::require(height > 0 && width > 0, "image size must be positive");
    detail::require(thickness >= 1 && thickness <= std::min(height, width),
                    "bar thickness must fit inside the image");
    detail::require(noise_sigma >= 0.0, "noise sigma must be non-negative");
  }
};

enum class PhotometricKind { brightness, contrast, saturation, hue };

struct PhotometricOp {
  PhotometricKind kind;
  double value;
  friend bool operator==(const PhotometricOp&, const PhotometricOp&) = default;
};

struct BarsSample {
  std::uint64_t id = 0;
  Orientation orientation = Orientation::horizontal;
  BarColor color = BarColor::red;
  std::uint64_t seed = 0;  // key of the noise stream
  int offset = 0;          // first row (horizontal) or column (vertical) of the bar
  bool flip_h = false;
  bool flip_v = false;
  std::vector<PhotometricOp> photometric;

  /// Binary label of a concept: green and vertical are the positive values.
  int label(Concept c) const {
    return c == Concept::color ? static_cast<int>(color) : static_cast<int>(orientation);
  }

  friend bool operator==(const BarsSample&, const BarsSample&) = default;
};

/// Independent seeds for the disjoint dataset partitions.
enum class Split { train, validation, test, concept_pool, mcs_pool };

inline std::uint64_t split_seed(std::uint64_t master_seed, Split split) {
  static constexpr std::array<const char*, 5> names{"bars/train", "bars/validation", "bars/test",
                                                    "bars/concept", "bars/mcs"};
  return derive_key(master_seed, names[static_cast<std::size_t>(split)]);
}

/// The i-th sample of the set identified by `seed`. Labels are balanced in
/// blocks of four: each block holds every (orientation, color) pair once.
inline BarsSample generate_one(std::uint64_t index, std::uint64_t seed, const BarsConfig& cfg = {}) {
  cfg.validate();
  std::array<int, 4> combos{0, 1, 2, 3};
  CounterRng block_rng(seed, "bars/combo", index / 4);
  std::shuffle(combos.begin(), combos.end(), block_rng);
  const int combo = combos[index % 4];

  BarsSample s;
  s.id = index;
  s.orientation = static_cast<Orientation>(combo >> 1);
  s.color = static_cast<BarColor>(combo & 1);
  s.seed = derive_key(seed, "bars/noise", index);
  CounterRng offset_rng(seed, "bars/offset", index);
  const int positions = std::min(cfg.height, cfg.width) - cfg.thickness + 1;
  s.offset = static_cast<int>(offset_rng() % static_cast<std::uint64_t>(positions));
  return s;
}

inline std::vector<BarsSample> generate(std::size_t n, std::uint64_t seed, const BarsConfig& cfg = {}) {
  detail::require(n >= 1, "generate needs n >= 1");
  std::vector<BarsSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_one(i, seed, cfg));
  return out;
}

// ---------------------------------------------------------------------------
// Rendering

namespace detail {

inline float clip01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

inline double luminance(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

inline std::array<double, 3> rgb_to_hsv(double r, double g, double b) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double delta = mx - mn;
  double h = 0.0;
  if (delta > 0.0) {
    if (mx == r)
      h = std::fmod((g - b) / delta, 6.0);
    else if (mx == g)
      h = (b - r) / delta + 2.0;
    else
      h = (r - g) / delta + 4.0;
    h /= 6.0;
    if (h < 0.0) h += 1.0;
  }
  const double s = mx > 0.0 ? delta / mx : 0.0;
  return {h, s, mx};
}

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  const double hh = h * 6.0;
  const int sector = static_cast<int>(std::floor(hh)) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

inline void apply_photometric(ImageTensor& img, const PhotometricOp& op) {
  auto& px = img.pixels;
  switch (op.kind) {
    case PhotometricKind::brightness:
      for (auto& v : px) v = clip01(v + op.value);
      break;
    case PhotometricKind::contrast: {
      double mean = 0.0;
      for (std::size_t i = 0; i < px.size(); i += 3) mean += luminance(px[i], px[i + 1], px[i + 2]);
      mean /= static_cast<double>(px.size() / 3);
      for (auto& v : px) v = clip01((v - mean) * op.value + mean);
      break;
    }
    case PhotometricKind::saturation:
      for (std::size_t i = 0; i < px.size(); i += 3) {
        const double gray = luminance(px[i], px[i + 1], px[i + 2]);
        for (int c = 0; c < 3; ++c) px[i + c] = clip01(gray + (px[i + c] - gray) * op.value);
      }
      break;
    case PhotometricKind::hue: {
      const double shift = op.value / (2.0 * std::numbers::pi);
      for (std::size_t i = 0; i < px.size(); i += 3) {
        auto [h, s, v] = rgb_to_hsv(px[i], px[i + 1], px[i + 2]);
        h = h + shift;
        h -= std::floor(h);
        const auto rgb = hsv_to_rgb(h, s, v);
        for (int c = 0; c < 3; ++c) px[i + c] = clip01(rgb[static_cast<std::size_t>(c)]);
      }
      break;
    }
  }
}

}  // namespace detail

/// Renders a sample: noise + bar, clipped, then flips, then photometric edits.
inline ImageTensor render(const BarsSample& s, const BarsConfig& cfg = {}) {
  cfg.validate();
  const int H = cfg.height, W = cfg.width, C = 3;
  std::vector<double> base(static_cast<std::size_t>(H) * W * C, 0.0);
  if (cfg.noise_sigma > 0.0) {
    CounterRng rng(s.seed);
    std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
    for (auto& v : base) v = noise(rng);
  }
  const int channel = static_cast<int>(s.color);
  const bool vertical = s.orientation == Orientation::vertical;
  const int extent = vertical ? W : H;
  const int lo = std::clamp(s.offset, 0, extent - cfg.thickness);
  for (int band = lo; band < lo + cfg.thickness; ++band) {
    for (int along = 0; along < (vertical ? H : W); ++along) {
      const int h = vertical ? along : band;
      const int w = vertical ? band : along;
      base[(static_cast<std::size_t>(h) * W + w) * C + channel] += cfg.bar_intensity;
    }
  }
  ImageTensor img(H, W, C);
  for (int h = 0; h < H; ++h) {
    const int sh = s.flip_v ? H - 1 - h : h;
    for (int w = 0; w < W; ++w) {
      const int sw = s.flip_h ? W - 1 - w : w;
      for (int c = 0; c < C; ++c)
        img.at(h, w, c) = detail::clip01(base[(static_cast<std::size_t>(sh) * W + sw) * C + c]);
    }
  }
  for (const auto& op : s.photometric) detail::apply_photometric(img, op);
  return img;
}

/// Renders samples into a features x samples matrix (32-bit storage).
inline Eigen::MatrixXf render_matrix(std::span<const BarsSample> samples, const BarsConfig& cfg = {}) {
  Eigen::MatrixXf out(cfg.input_dim(), static_cast<Eigen::Index>(samples.size()));
  for (std::size_t j = 0; j < samples.size(); ++j) {
    const ImageTensor img = render(samples[j], cfg);
    out.col(static_cast<Eigen::Index>(j)) =
        Eigen::Map<const Eigen::VectorXf>(img.pixels.data(), static_cast<Eigen::Index>(img.size()));
  }
  return out;
}

inline std::vector<int> labels_of(std::span<const BarsSample> samples, Concept c) {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.label(c));
  return out;
}

// ---------------------------------------------------------------------------
// Counterfactual edits and augmentation

struct ConceptEdit {
  Concept target;
  int value;  // 0/1, see BarsSample::label
};

/// Sets one concept to a target value; every other part of the recipe is kept.
inline BarsSample counterfactual(const BarsSample& s, const ConceptEdit& edit) {
  detail::require(edit.value == 0 || edit.value == 1, "concept value must be 0 or 1");
  BarsSample out = s;
  if (edit.target == Concept::color)
    out.color = static_cast<BarColor>(edit.value);
  else
    out.orientation = static_cast<Orientation>(edit.value);
  return out;
}

enum class AugmentOp { flip_h, flip_v, brightness, contrast, saturation, hue };

struct AugmentRanges {
  std::array<double, 2> brightness{-0.2, 0.2};
  std::array<double, 2> contrast{0.8, 1.25};
  std::array<double, 2> saturation{0.8, 1.25};
  std::array<double, 2> hue{-0.1 * std::numbers::pi, 0.1 * std::numbers::pi};

  void validate() const {
    auto ordered = [](const std::array<double, 2>& r) { return r[0] <= r[1]; };
    detail::require(ordered(brightness) && ordered(contrast) && ordered(saturation) && ordered(hue),
                    "augmentation ranges must be ordered [lo, hi]");
    detail::require(brightness[0] >= -1.0 && brightness[1] <= 1.0, "brightness delta must be in [-1, 1]");
    detail::require(contrast[0] > 0.0 && saturation[0] >= 0.0, "contrast/saturation factors must be positive");
    detail::require(hue[0] >= -std::numbers::pi && hue[1] <= std::numbers::pi, "hue rotation must be in [-pi, pi]");
  }
};

/// Applies the selected operations. Flips are applied as given; photometric
/// parameters are drawn uniformly from `ranges` using `seed`.
inline BarsSample augment(const BarsSample& s, std::span<const AugmentOp> ops, std::uint64_t seed,
                          const AugmentRanges& ranges = {}) {
  ranges.validate();
  auto selected = [&](AugmentOp op) { return std::find(ops.begin(), ops.end(), op) != ops.end(); };
  CounterRng rng(seed, "bars/augment");
  auto draw = [&](const std::array<double, 2>& r) { return r[0] + (r[1] - r[0]) * rng.uniform(); };
  BarsSample out = s;
  if (selected(AugmentOp::flip_h)) out.flip_h = !out.flip_h;
  if (selected(AugmentOp::flip_v)) out.flip_v = !out.flip_v;
  if (selected(AugmentOp::brightness))
    out.photometric.push_back({PhotometricKind::brightness, draw(ranges.brightness)});
  if (selected(AugmentOp::contrast))
    out.photometric.push_back({PhotometricKind::contrast, draw(ranges.contrast)});
  if (selected(AugmentOp::saturation))
    out.photometric.push_back({PhotometricKind::saturation, draw(ranges.saturation)});
  if (selected(AugmentOp::hue)) out.photometric.push_back({PhotometricKind::hue, draw(ranges.hue)});
  return out;
}

// ---------------------------------------------------------------------------
// Dataset export: raw little-endian float32 HWC tensors plus a CSV manifest.

struct LoadedImage {
  std::uint64_t id = 0;
  int orientation = 0;
  int color = 0;
  std::uint64_t seed = 0;
  ImageTensor image;
};

namespace detail {

inline void write_f32_le(std::ostream& out, const std::vector<float>& values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(float)));
  } else {
    for (float v : values) {
      auto bits = std::bit_cast<std::uint32_t>(v);
      bits = (bits >> 24) | ((bits >> 8) & 0xFF00u) | ((bits << 8) & 0xFF0000u) | (bits << 24);
      out.write(reinterpret_cast<const char*>(&bits), 4);
    }
  }
}

inline std::vector<float> read_f32_le(std::istream& in, std::size_t count) {
  std::vector<float> values(count);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(count * sizeof(float)));
  if constexpr (std::endian::native != std::endian::little) {
    for (auto& v : values) {
      auto bits = std::bit_cast<std::uint32_t>(v);
      bits = (bits >> 24) | ((bits >> 8) & 0xFF00u) | ((bits << 8) & 0xFF0000u) | (bits << 24);
      v = std::bit_cast<float>(bits);
    }
  }
  return values;
}

}  // namespace detail

inline void export_dataset(const std::filesystem::path& dir, std::span<const BarsSample> samples,
                           const BarsConfig& cfg = {}) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw ConfigError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json meta{{"format", "icscope.bars"}, {"version", 1},          {"height", cfg.height},
                      {"width", cfg.width},       {"channels", 3},         {"thickness", cfg.thickness},
                      {"noise_sigma", cfg.noise_sigma}, {"count", samples.size()}};
  std::ofstream(dir / "meta.json") << meta.dump(2) << '\n';
  std::ofstream manifest(dir / "manifest.csv");
  if (!manifest) throw ConfigError("cannot write manifest in " + dir.string());
  manifest << "id,orientation,color,seed,path\n";
  for (const auto& s : samples) {
    char name[32];
    std::snprintf(name, sizeof(name), "%08llu.f32", static_cast<unsigned long long>(s.id));
    const std::string rel = std::string("images/") + name;
    std::ofstream img_out(dir / rel, std::ios::binary);
    if (!img_out) throw ConfigError("cannot write " + (dir / rel).string());
    detail::write_f32_le(img_out, render(s, cfg).pixels);
    manifest << s.id << ',' << static_cast<int>(s.orientation) << ',' << static_cast<int>(s.color) << ','
             << s.seed << ',' << rel << '\n';
  }
}

inline std::vector<LoadedImage> import_dataset(const std::filesystem::path& dir) {
  std::ifstream meta_in(dir / "meta.json");
  if (!meta_in) throw ConfigError("missing meta.json in " + dir.string());
  nlohmann::json meta;
  try {
    meta_in >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad meta.json: ") + e.what());
  }
  const int H = meta.at("height"), W = meta.at("width"), C = meta.at("channels");
  std::ifstream manifest(dir / "manifest.csv");
  if (!manifest) throw ConfigError("missing manifest.csv in " + dir.string());
  std::string line;
  std::getline(manifest, line);
  if (line != "id,orientation,color,seed,path") throw ConfigError("unexpected manifest header");
  std::vector<LoadedImage> out;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string id, orientation, color, seed, path;
    std::getline(row, id, ',');
    std::getline(row, orientation, ',');
    std::getline(row, color, ',');
    std::getline(row, seed, ',');
    std::getline(row, path);
    LoadedImage item;
    try {
      item.id = std::stoull(id);
      item.orientation = std::stoi(orientation);
      item.color = std::stoi(color);
      item.seed = std::stoull(seed);
    } catch (const std::exception&) {
      throw ConfigError("malformed manifest row: " + line);
    }
    std::ifstream img_in(dir / path, std::ios::binary);
    if (!img_in) throw ConfigError("missing image " + path);
    item.image = ImageTensor(H, W, C);
    item.image.pixels = detail::read_f32_le(img_in, item.image.size());
    if (!img_in) throw ConfigError("truncated image " + path);
    out.push_back(std::move(item));
  }
  return out;
}

}  // namespace icscope
