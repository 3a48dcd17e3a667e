#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <deque>
#include <numbers>
#include <vector>

#include <Eigen/Dense>

#include "occface/constants.hpp"
#include "occface/error.hpp"
#include "occface/image.hpp"

namespace occface {

// ---------------------------------------------------------------------------
// Mask algebra
// ---------------------------------------------------------------------------

/// I * (1 - M), broadcast over channels.
inline Image apply_mask(const Image& image, const Mask& mask) {
  detail::require_dims(image.width() == mask.width() && image.height() == mask.height(),
                       "image and mask sizes differ");
  Image out = image;
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x) {
      const double keep = 1.0 - mask.raster().at(x, y);
      for (int c = 0; c < image.channels(); ++c) out.at(x, y, c) = image.at(x, y, c) * keep;
    }
  return out;
}

inline constexpr std::array<double, 3> kLumaWeights{0.299, 0.587, 0.114};

inline Image to_grayscale(const Image& rgb) {
  detail::require_dims(rgb.channels() == 3, "grayscale conversion needs an RGB image");
  Image out(rgb.width(), rgb.height(), 1);
  for (int y = 0; y < rgb.height(); ++y)
    for (int x = 0; x < rgb.width(); ++x)
      out.at(x, y) = kLumaWeights[0] * rgb.at(x, y, 0) + kLumaWeights[1] * rgb.at(x, y, 1) +
                     kLumaWeights[2] * rgb.at(x, y, 2);
  return out;
}

/// C_true where the mask is clear, C_syn where it is occluded.
inline Image compose_contour(const Image& c_true, const Image& c_syn, const Mask& mask) {
  detail::require_dims(c_true.same_shape(c_syn) && c_true.channels() == 1 &&
                           c_true.width() == mask.width() && c_true.height() == mask.height(),
                       "contour maps and mask must share one H x W x 1 shape");
  Image out = c_true;
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x)
      if (mask.occluded(x, y)) out.at(x, y) = c_syn.at(x, y);
  return out;
}

// ---------------------------------------------------------------------------
// Contours
// ---------------------------------------------------------------------------

/// Sobel magnitude normalized by its maximum, thinned by non-maximum
/// suppression, then hysteresis-thresholded (8-connected) to 0/1.
///
/// Suppression compares each pixel with its two neighbours along the
/// gradient direction (quantized to 0, 45, 90, 135 degrees): it survives
/// when >= the backward neighbour and > the forward one. A step edge
/// therefore keeps the first pixel past the step.
inline Image extract_contours(const Image& gray, double low, double high) {
  detail::require_dims(gray.channels() == 1, "contour extraction needs one channel");
  detail::require(low >= 0.0 && low < high && high <= 1.0, ErrorKind::Argument,
                  "thresholds must satisfy 0 <= low < high <= 1");
  const int w = gray.width(), h = gray.height();
  Image out(w, h, 1);
  if (w == 0 || h == 0) return out;

  auto px = [&](int x, int y) {
    return gray.at(std::clamp(x, 0, w - 1), std::clamp(y, 0, h - 1));
  };
  Image mag(w, h, 1);
  std::vector<int> dir(static_cast<std::size_t>(w) * h, 0);
  double max_mag = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double gx = (px(x + 1, y - 1) + 2.0 * px(x + 1, y) + px(x + 1, y + 1)) -
                        (px(x - 1, y - 1) + 2.0 * px(x - 1, y) + px(x - 1, y + 1));
      const double gy = (px(x - 1, y + 1) + 2.0 * px(x, y + 1) + px(x + 1, y + 1)) -
                        (px(x - 1, y - 1) + 2.0 * px(x, y - 1) + px(x + 1, y - 1));
      const double m = std::sqrt(gx * gx + gy * gy);
      mag.at(x, y) = m;
      max_mag = std::max(max_mag, m);
      double angle = std::atan2(gy, gx) * 180.0 / std::numbers::pi;
      if (angle < 0.0) angle += 180.0;
      dir[static_cast<std::size_t>(y) * w + x] =
          angle < 22.5 || angle >= 157.5 ? 0 : angle < 67.5 ? 1 : angle < 112.5 ? 2 : 3;
    }
  if (max_mag == 0.0) return out;
  for (double& m : mag.values()) m /= max_mag;

  static constexpr std::array<std::array<int, 2>, 4> kStep{{{1, 0}, {1, 1}, {0, 1}, {-1, 1}}};
  auto mag_at = [&](int x, int y) {
    return x < 0 || y < 0 || x >= w || y >= h ? 0.0 : mag.at(x, y);
  };
  Image thin(w, h, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto [dx, dy] = kStep[static_cast<std::size_t>(dir[static_cast<std::size_t>(y) * w + x])];
      const double m = mag.at(x, y);
      if (m >= mag_at(x - dx, y - dy) && m > mag_at(x + dx, y + dy)) thin.at(x, y) = m;
    }

  std::deque<std::pair<int, int>> queue;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (thin.at(x, y) >= high) {
        out.at(x, y) = 1.0;
        queue.emplace_back(x, y);
      }
  while (!queue.empty()) {
    const auto [x, y] = queue.front();
    queue.pop_front();
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int nx = x + dx, ny = y + dy;
        if (nx < 0 || ny < 0 || nx >= w || ny >= h || out.at(nx, ny) != 0.0) continue;
        if (thin.at(nx, ny) >= low && thin.at(nx, ny) > 0.0) {
          out.at(nx, ny) = 1.0;
          queue.emplace_back(nx, ny);
        }
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss kernels
// ---------------------------------------------------------------------------

inline constexpr double kScoreEpsilon = 1e-7;

/// Discriminator outputs, clamped into [eps, 1 - eps] on construction.
class ScoreMap {
 public:
  ScoreMap() = default;
  explicit ScoreMap(std::vector<double> scores) : scores_(std::move(scores)) {
    for (double& s : scores_) s = std::clamp(s, kScoreEpsilon, 1.0 - kScoreEpsilon);
  }
  explicit ScoreMap(const Image& raster)
      : ScoreMap(std::vector<double>(raster.values().begin(), raster.values().end())) {}

  std::size_t size() const noexcept { return scores_.size(); }
  bool empty() const noexcept { return scores_.empty(); }
  const std::vector<double>& values() const noexcept { return scores_; }

 private:
  std::vector<double> scores_;
};

enum class AdversarialMode {
  /// mean log D(real) + mean log(1 - D(fake)); the value D maximizes.
  Discriminator,
  /// -mean log D(fake); the non-saturating generator loss.
  Generator,
};

inline double adversarial_loss(const ScoreMap& real, const ScoreMap& fake,
                               AdversarialMode mode = AdversarialMode::Discriminator) {
  detail::require(!fake.empty(), ErrorKind::Argument, "fake score map is empty");
  if (mode == AdversarialMode::Generator) {
    double sum = 0.0;
    for (double s : fake.values()) sum += std::log(s);
    return -sum / static_cast<double>(fake.size());
  }
  detail::require(!real.empty(), ErrorKind::Argument, "real score map is empty");
  double real_sum = 0.0;
  for (double s : real.values()) real_sum += std::log(s);
  double fake_sum = 0.0;
  for (double s : fake.values()) fake_sum += std::log(1.0 - s);
  return real_sum / static_cast<double>(real.size()) + fake_sum / static_cast<double>(fake.size());
}

/// One feature layer: Q maps of H x W, stored channel-major.
struct ActivationLayer {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  ActivationLayer() = default;
  ActivationLayer(int q, int h, int w, double fill = 0.0)
      : channels(q), height(h), width(w),
        data(static_cast<std::size_t>(q) * h * w, fill) {}

  std::size_t element_count() const noexcept { return data.size(); }
  std::size_t positions() const noexcept { return static_cast<std::size_t>(height) * width; }
  double& at(int q, int y, int x) noexcept {
    return data[(static_cast<std::size_t>(q) * height + y) * width + x];
  }
  double at(int q, int y, int x) const noexcept {
    return data[(static_cast<std::size_t>(q) * height + y) * width + x];
  }
  bool same_shape(const ActivationLayer& o) const noexcept {
    return channels == o.channels && height == o.height && width == o.width;
  }
};

struct ActivationStack {
  std::vector<ActivationLayer> layers;
};

namespace detail {

inline void check_layer(const ActivationLayer& layer) {
  require(layer.channels > 0 && layer.height > 0 && layer.width > 0, ErrorKind::Argument,
          "activation layer is empty");
  require_dims(layer.data.size() ==
                   static_cast<std::size_t>(layer.channels) * layer.height * layer.width,
               "activation layer data does not match its shape");
}

inline void check_pair(const ActivationStack& a, const ActivationStack& b) {
  require(!a.layers.empty(), ErrorKind::Argument, "activation stack has no layers");
  require_dims(a.layers.size() == b.layers.size(), "activation stacks differ in depth");
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    check_layer(a.layers[i]);
    check_layer(b.layers[i]);
    require_dims(a.layers[i].same_shape(b.layers[i]),
                 "activation layer " + std::to_string(i) + " shapes differ");
  }
}

}  // namespace detail

/// sum_i (1 / N_i) * || real_i - fake_i ||_1
inline double feature_matching_loss(const ActivationStack& real, const ActivationStack& fake) {
  detail::check_pair(real, fake);
  double total = 0.0;
  for (std::size_t i = 0; i < real.layers.size(); ++i) {
    const auto& a = real.layers[i].data;
    const auto& b = fake.layers[i].data;
    double l1 = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) l1 += std::abs(a[k] - b[k]);
    total += l1 / static_cast<double>(a.size());
  }
  return total;
}

/// || predicted - truth ||_1 over the whole image, divided by the occluded
/// pixel count S_m.
inline double masked_pixel_loss(const Image& predicted, const Image& truth, const Mask& mask) {
  detail::require_dims(predicted.same_shape(truth) && predicted.width() == mask.width() &&
                           predicted.height() == mask.height(),
                       "images and mask must share a shape");
  const std::size_t s_m = mask.occluded_count();
  detail::require(s_m > 0, ErrorKind::DegenerateMask, "mask has no occluded pixels");
  double l1 = 0.0;
  auto p = predicted.values();
  auto t = truth.values();
  for (std::size_t i = 0; i < p.size(); ++i) l1 += std::abs(p[i] - t[i]);
  return l1 / static_cast<double>(s_m);
}

/// G = phi^T phi with phi the (H*W) x Q matrix of the layer.
inline Eigen::MatrixXd gram_matrix(const ActivationLayer& layer) {
  detail::check_layer(layer);
  const int q = layer.channels;
  const std::size_t n = layer.positions();
  Eigen::MatrixXd g(q, q);
  for (int a = 0; a < q; ++a) {
    const double* fa = layer.data.data() + static_cast<std::size_t>(a) * n;
    for (int b = a; b < q; ++b) {
      const double* fb = layer.data.data() + static_cast<std::size_t>(b) * n;
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) acc += fa[k] * fb[k];
      g(a, b) = acc;
      g(b, a) = acc;
    }
  }
  return g;
}

/// sum_n 1/(Q_n^2) * || (G_n(a) - G_n(b)) / (Q_n H_n W_n) ||_1
inline double style_loss(const ActivationStack& predicted, const ActivationStack& truth) {
  detail::check_pair(predicted, truth);
  double total = 0.0;
  for (std::size_t n = 0; n < predicted.layers.size(); ++n) {
    const auto& layer = predicted.layers[n];
    const double q = layer.channels;
    const double norm = q * layer.height * layer.width;
    const Eigen::MatrixXd diff = gram_matrix(layer) - gram_matrix(truth.layers[n]);
    double l1 = 0.0;
    for (Eigen::Index i = 0; i < diff.rows(); ++i)
      for (Eigen::Index j = 0; j < diff.cols(); ++j) l1 += std::abs(diff(i, j) / norm);
    total += l1 / (q * q);
  }
  return total;
}

/// lambda1 * L1 + lambda2 * L2.
inline double contour_objective(double l1, double l2, const LossWeights& w = kDefaultWeights) {
  return w.lambda1 * l1 + w.lambda2 * l2;
}

/// lambda3 * L3 + lambda4 * L4 + lambda5 * L5.
inline double synthesis_objective(double l3, double l4, double l5,
                                  const LossWeights& w = kDefaultWeights) {
  return w.lambda3 * l3 + w.lambda4 * l4 + w.lambda5 * l5;
}

// ---------------------------------------------------------------------------
// Networks as interfaces, with deterministic stand-ins
// ---------------------------------------------------------------------------

class Discriminator {
 public:
  virtual ~Discriminator() = default;
  virtual ScoreMap score(const Image& candidate, const Image& condition) const = 0;
  virtual ActivationStack activations(const Image& candidate) const = 0;
};

class Inpainter {
 public:
  virtual ~Inpainter() = default;
  /// Completes `masked` (occluded pixels zeroed) guided by `contours`.
  virtual Image complete(const Image& masked, const Image& contours, const Mask& mask) const = 0;
};

/// Fills occluded pixels in waves. Each wave takes every still-missing pixel
/// with at least one valid 4-neighbour and sets it to the mean of those
/// neighbours, summed in the order up, left, right, down; validity is frozen
/// for the duration of a wave, so raster order inside a wave is irrelevant.
/// Unmasked pixels are copied untouched.
inline Image baseline_inpaint(const Image& image, const Mask& mask) {
  detail::require_dims(image.width() == mask.width() && image.height() == mask.height(),
                       "image and mask sizes differ");
  detail::require(!mask.all_occluded() || image.pixel_count() == 0, ErrorKind::DegenerateMask,
                  "mask occludes every pixel; nothing to propagate from");
  const int w = image.width(), h = image.height(), ch = image.channels();
  Image out = image;
  std::vector<char> valid(static_cast<std::size_t>(w) * h);
  std::vector<std::pair<int, int>> missing;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      valid[static_cast<std::size_t>(y) * w + x] = !mask.occluded(x, y);
      if (mask.occluded(x, y)) missing.emplace_back(x, y);
    }
  static constexpr std::array<std::array<int, 2>, 4> kNeighbours{{{0, -1}, {-1, 0}, {1, 0}, {0, 1}}};
  std::vector<double> sum(static_cast<std::size_t>(ch));
  while (!missing.empty()) {
    std::vector<std::pair<int, int>> filled, still;
    std::vector<double> values;
    for (const auto& [x, y] : missing) {
      std::fill(sum.begin(), sum.end(), 0.0);
      int count = 0;
      for (const auto& [dx, dy] : kNeighbours) {
        const int nx = x + dx, ny = y + dy;
        if (nx < 0 || ny < 0 || nx >= w || ny >= h || !valid[static_cast<std::size_t>(ny) * w + nx])
          continue;
        for (int c = 0; c < ch; ++c) sum[static_cast<std::size_t>(c)] += out.at(nx, ny, c);
        ++count;
      }
      if (count == 0) {
        still.emplace_back(x, y);
        continue;
      }
      filled.emplace_back(x, y);
      for (int c = 0; c < ch; ++c) values.push_back(sum[static_cast<std::size_t>(c)] / count);
    }
    for (std::size_t i = 0; i < filled.size(); ++i) {
      const auto [x, y] = filled[i];
      for (int c = 0; c < ch; ++c) out.at(x, y, c) = values[i * static_cast<std::size_t>(ch) + c];
      valid[static_cast<std::size_t>(y) * w + x] = 1;
    }
    missing = std::move(still);
  }
  return out;
}

class BaselineInpainter final : public Inpainter {
 public:
  Image complete(const Image& masked, const Image&, const Mask& mask) const override {
    return baseline_inpaint(masked, mask);
  }
};

/// Fixed, hand-crafted feature pyramid standing in for a trained feature
/// extractor: at scales 1, 2 and 4 (box-downsampled), the RGB channels plus
/// the horizontal and vertical luma differences. Q = 5 per layer.
inline ActivationStack reference_features(const Image& rgb) {
  detail::require_dims(rgb.channels() == 3, "reference features need an RGB image");
  ActivationStack stack;
  for (int scale : {1, 2, 4}) {
    const int h = rgb.height() / scale, w = rgb.width() / scale;
    if (h < 1 || w < 1) break;
    ActivationLayer layer(5, h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) {
          double acc = 0.0;
          for (int dy = 0; dy < scale; ++dy)
            for (int dx = 0; dx < scale; ++dx) acc += rgb.at(x * scale + dx, y * scale + dy, c);
          layer.at(c, y, x) = acc / (scale * scale);
        }
    auto luma = [&](int x, int y) {
      return kLumaWeights[0] * layer.at(0, y, x) + kLumaWeights[1] * layer.at(1, y, x) +
             kLumaWeights[2] * layer.at(2, y, x);
    };
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        layer.at(3, y, x) = luma(std::min(x + 1, w - 1), y) - luma(x, y);
        layer.at(4, y, x) = luma(x, std::min(y + 1, h - 1)) - luma(x, y);
      }
    stack.layers.push_back(std::move(layer));
  }
  return stack;
}

}  // namespace occface
