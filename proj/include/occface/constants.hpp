#pragma once

#include <cstddef>

namespace occface {

inline constexpr std::size_t kIdDims = 80;
inline constexpr std::size_t kExpDims = 64;
inline constexpr std::size_t kTexDims = 80;
inline constexpr std::size_t kShDims = 9;
inline constexpr std::size_t kPoseDims = 6;
inline constexpr std::size_t kParamDims = kIdDims + kExpDims + kTexDims + kShDims + kPoseDims;
static_assert(kParamDims == 239, "V_x must have 239 free coordinates");

/// Default loss weights for the contour objective (1, 2), the synthesis
/// objective (3, 4, 5) and the reconstruction objective (6, 7).
struct LossWeights {
  double lambda1 = 1.0;
  double lambda2 = 11.5;
  double lambda3 = 0.1;
  double lambda4 = 1.0;
  double lambda5 = 250.0;
  double lambda6 = 1.4;
  double lambda7 = 0.25;
};

inline constexpr LossWeights kDefaultWeights{};

/// Focal length in pixels at the reference raster width.
inline constexpr double kReferenceFocal = 1015.0;
inline constexpr double kReferenceWidth = 224.0;
/// Default camera distance (translation z) for a neutral pose.
inline constexpr double kDefaultCameraDistance = 10.0;

}  // namespace occface
