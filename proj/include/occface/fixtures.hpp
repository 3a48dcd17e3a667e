#pragma once

#include <cstdint>

#include "occface/camera_light.hpp"
#include "occface/param_vector.hpp"
#include "occface/rng.hpp"

namespace occface {

/// Round-trip ground truth: coefficients drawn from the unit prior, lighting
/// dominated by band 0 (ambient scaled by 1 + 0.1 N, higher bands 0.3 N) and
/// a mild off-frontal pose.
inline ParamVector round_trip_truth(std::uint64_t seed) {
  Rng rng(seed);
  ParamVector p;
  for (auto& a : p.shape.alpha_id) a = rng.normal();
  for (auto& b : p.shape.beta_exp) b = rng.normal();
  for (auto& b : p.texture.beta_te) b = rng.normal();
  p.light.gamma[0] *= 1.0 + 0.1 * rng.normal();
  for (Eigen::Index i = 1; i < p.light.gamma.size(); ++i) p.light.gamma[i] = 0.3 * rng.normal();
  p.pose.pitch = 0.05 * rng.normal();
  p.pose.yaw = 0.08 * rng.normal();
  p.pose.roll = 0.03 * rng.normal();
  p.pose.scale_k = std::exp(0.05 * rng.normal());
  p.pose.translation.x() = 0.1 * rng.normal();
  p.pose.translation.y() = 0.1 * rng.normal();
  return p;
}

}  // namespace occface
