#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "occface/error.hpp"

namespace occface {

/// Interleaved H x W x C raster of doubles, row-major, channel fastest.
class Image {
 public:
  Image() = default;
  Image(int width, int height, int channels, double fill = 0.0)
      : width_(width), height_(height), channels_(channels) {
    detail::require(width >= 0 && height >= 0 && channels >= 1, ErrorKind::Argument,
                    "invalid image shape");
    data_.assign(static_cast<std::size_t>(width) * height * channels, fill);
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  int channels() const noexcept { return channels_; }
  std::size_t pixel_count() const noexcept {
    return static_cast<std::size_t>(width_) * height_;
  }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& at(int x, int y, int c = 0) noexcept { return data_[index(x, y, c)]; }
  double at(int x, int y, int c = 0) const noexcept { return data_[index(x, y, c)]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  bool same_shape(const Image& other) const noexcept {
    return width_ == other.width_ && height_ == other.height_ &&
           channels_ == other.channels_;
  }
  bool same_extent(const Image& other) const noexcept {
    return width_ == other.width_ && height_ == other.height_;
  }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  std::size_t index(int x, int y, int c) const noexcept {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  int width_ = 0;
  int height_ = 0;
  int channels_ = 0;
  std::vector<double> data_;
};

/// Binary occlusion mask: 1 marks an occluded pixel, 0 background.
class Mask {
 public:
  Mask() = default;
  Mask(int width, int height, bool fill = false) : raster_(width, height, 1, fill ? 1.0 : 0.0) {}

  /// Wraps a single-channel raster; every value must be exactly 0 or 1.
  explicit Mask(Image raster) : raster_(std::move(raster)) {
    detail::require(raster_.channels() == 1, ErrorKind::Dimension, "mask must have one channel");
    for (double v : raster_.values())
      detail::require(v == 0.0 || v == 1.0, ErrorKind::Argument, "mask values must be 0 or 1");
  }

  /// Any nonzero value becomes 1.
  static Mask binarize(const Image& raster) {
    detail::require(raster.channels() == 1, ErrorKind::Dimension, "mask must have one channel");
    Image out(raster.width(), raster.height(), 1);
    auto src = raster.values();
    auto dst = out.values();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] != 0.0 ? 1.0 : 0.0;
    return Mask(std::move(out));
  }

  int width() const noexcept { return raster_.width(); }
  int height() const noexcept { return raster_.height(); }
  bool occluded(int x, int y) const noexcept { return raster_.at(x, y) != 0.0; }
  void set(int x, int y, bool occluded) noexcept { raster_.at(x, y) = occluded ? 1.0 : 0.0; }

  /// Number of occluded pixels (S_m).
  std::size_t occluded_count() const noexcept {
    std::size_t n = 0;
    for (double v : raster_.values()) n += v != 0.0;
    return n;
  }
  bool all_clear() const noexcept { return occluded_count() == 0; }
  bool all_occluded() const noexcept { return occluded_count() == raster_.pixel_count(); }

  Mask inverted() const {
    Mask out = *this;
    for (double& v : out.raster_.values()) v = 1.0 - v;
    return out;
  }

  const Image& raster() const noexcept { return raster_; }

  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  Image raster_;
};

}  // namespace occface
