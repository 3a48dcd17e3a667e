#pragma once

#include <cmath>

#include <Eigen/Dense>

#include "occface/camera_light.hpp"
#include "occface/constants.hpp"
#include "occface/error.hpp"
#include "occface/morphable_model.hpp"

namespace occface {

/// Offsets of each block inside the 239-entry free coordinate vector.
namespace layout {
inline constexpr Eigen::Index kId = 0;
inline constexpr Eigen::Index kExp = kId + static_cast<Eigen::Index>(kIdDims);
inline constexpr Eigen::Index kTex = kExp + static_cast<Eigen::Index>(kExpDims);
inline constexpr Eigen::Index kLight = kTex + static_cast<Eigen::Index>(kTexDims);
inline constexpr Eigen::Index kPose = kLight + static_cast<Eigen::Index>(kShDims);
inline constexpr Eigen::Index kPitch = kPose;
inline constexpr Eigen::Index kYaw = kPose + 1;
inline constexpr Eigen::Index kRoll = kPose + 2;
inline constexpr Eigen::Index kLogScale = kPose + 3;
inline constexpr Eigen::Index kTx = kPose + 4;
inline constexpr Eigen::Index kTy = kPose + 5;
inline constexpr Eigen::Index kEnd = kPose + static_cast<Eigen::Index>(kPoseDims);
static_assert(kEnd == 239);
}  // namespace layout

/// The unknowns V_x: identity, expression, texture, lighting and pose.
///
/// The optimizer works on a flat 239-vector of free coordinates:
///   [alpha_id | beta_exp | beta_te | gamma - unit_ambient | pitch yaw roll log(k) t_x t_y]
/// so that the all-zero free vector is the mean face under unit ambient
/// light at the neutral pose. t_z is not free; it is carried alongside.
struct ParamVector {
  ShapeCoeffs shape;
  TextureCoeffs texture;
  ShCoeffs light = unit_ambient();
  Pose pose;

  Eigen::VectorXd to_free() const {
    Eigen::VectorXd x(layout::kEnd);
    x.segment(layout::kId, kIdDims) = shape.alpha_id;
    x.segment(layout::kExp, kExpDims) = shape.beta_exp;
    x.segment(layout::kTex, kTexDims) = texture.beta_te;
    x.segment(layout::kLight, kShDims) = light.gamma - unit_ambient().gamma;
    x[layout::kPitch] = pose.pitch;
    x[layout::kYaw] = pose.yaw;
    x[layout::kRoll] = pose.roll;
    x[layout::kLogScale] = std::log(pose.scale_k);
    x[layout::kTx] = pose.translation.x();
    x[layout::kTy] = pose.translation.y();
    return x;
  }

  static ParamVector from_free(const Eigen::VectorXd& x,
                               double camera_distance = kDefaultCameraDistance) {
    detail::require_dims(x.size() == layout::kEnd, "free parameter vector must have 239 entries");
    ParamVector p;
    p.shape.alpha_id = x.segment(layout::kId, kIdDims);
    p.shape.beta_exp = x.segment(layout::kExp, kExpDims);
    p.texture.beta_te = x.segment(layout::kTex, kTexDims);
    p.light.gamma = x.segment(layout::kLight, kShDims) + unit_ambient().gamma;
    p.pose.pitch = x[layout::kPitch];
    p.pose.yaw = x[layout::kYaw];
    p.pose.roll = x[layout::kRoll];
    p.pose.scale_k = std::exp(x[layout::kLogScale]);
    p.pose.translation = {x[layout::kTx], x[layout::kTy], camera_distance};
    return p;
  }
};

}  // namespace occface
