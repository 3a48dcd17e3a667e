#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include <Eigen/Dense>

#include "occface/constants.hpp"
#include "occface/error.hpp"

namespace occface {

struct Pose {
  double pitch = 0.0;
  double yaw = 0.0;
  double roll = 0.0;
  double scale_k = 1.0;
  /// x, y in camera units; z is the camera-distance offset.
  Eigen::Vector3d translation{0.0, 0.0, kDefaultCameraDistance};
};

/// Rotation in SO(3); only rotation_from_euler and compose() construct one.
class RotationMatrix {
 public:
  RotationMatrix() : m_(Eigen::Matrix3d::Identity()) {}

  const Eigen::Matrix3d& matrix() const noexcept { return m_; }
  Eigen::Vector3d operator*(const Eigen::Vector3d& v) const { return m_ * v; }
  RotationMatrix compose(const RotationMatrix& rhs) const { return RotationMatrix(m_ * rhs.m_); }

 private:
  explicit RotationMatrix(const Eigen::Matrix3d& m) : m_(m) {}
  friend RotationMatrix rotation_from_euler(double, double, double);

  Eigen::Matrix3d m_;
};

struct ShCoeffs {
  Eigen::VectorXd gamma = Eigen::VectorXd::Zero(kShDims);
};

struct CameraIntrinsics {
  double focal = kReferenceFocal;
  Eigen::Vector2d principal_point{kReferenceWidth / 2.0, kReferenceWidth / 2.0};

  /// Reference focal scaled with the raster width, principal point at the
  /// raster centre.
  static CameraIntrinsics for_raster(int width, int height) {
    CameraIntrinsics cam;
    cam.focal = kReferenceFocal * static_cast<double>(width) / kReferenceWidth;
    cam.principal_point = {width / 2.0, height / 2.0};
    return cam;
  }
};

/// R = Rz(roll) * Ry(yaw) * Rx(pitch).
inline RotationMatrix rotation_from_euler(double pitch, double yaw, double roll) {
  detail::require(std::isfinite(pitch) && std::isfinite(yaw) && std::isfinite(roll),
                  ErrorKind::Argument, "Euler angles must be finite");
  const double cp = std::cos(pitch), sp = std::sin(pitch);
  const double cy = std::cos(yaw), sy = std::sin(yaw);
  const double cr = std::cos(roll), sr = std::sin(roll);
  Eigen::Matrix3d rx, ry, rz;
  rx << 1, 0, 0, 0, cp, -sp, 0, sp, cp;
  ry << cy, 0, sy, 0, 1, 0, -sy, 0, cy;
  rz << cr, -sr, 0, sr, cr, 0, 0, 0, 1;
  return RotationMatrix(rz * ry * rx);
}

inline RotationMatrix rotation_of(const Pose& pose) {
  return rotation_from_euler(pose.pitch, pose.yaw, pose.roll);
}

struct Projection {
  /// V x 2 pixel positions.
  Eigen::MatrixX2d pixels;
  /// Camera-space depth per vertex.
  Eigen::VectorXd depth;
};

inline constexpr double kMinDepth = 1e-6;

inline void check_pose(const Pose& pose) {
  detail::require(pose.scale_k > 0.0 && std::isfinite(pose.scale_k), ErrorKind::Argument,
                  "scale_k must be positive");
  detail::require(pose.translation.allFinite(), ErrorKind::Argument, "translation must be finite");
}

/// Rigid-plus-scale transform q = k R v + t, per vertex.
inline Eigen::MatrixX3d camera_space(const Eigen::VectorXd& points, const Pose& pose) {
  detail::require_dims(points.size() % 3 == 0, "points must hold 3V entries");
  detail::require(points.allFinite(), ErrorKind::Argument, "points must be finite");
  check_pose(pose);
  const Eigen::Matrix3d kr = pose.scale_k * rotation_of(pose).matrix();
  const Eigen::Index v = points.size() / 3;
  Eigen::MatrixX3d q(v, 3);
  for (Eigen::Index i = 0; i < v; ++i)
    q.row(i) = (kr * points.segment<3>(3 * i) + pose.translation).transpose();
  return q;
}

/// Pinhole projection: translation is applied in camera space before the
/// perspective divide. Throws BehindCameraError for depth <= kMinDepth.
inline Projection project_points(const Eigen::VectorXd& points, const Pose& pose,
                                 const CameraIntrinsics& intrinsics) {
  detail::require(intrinsics.focal > 0.0, ErrorKind::Argument, "focal must be positive");
  const Eigen::MatrixX3d q = camera_space(points, pose);
  Projection out;
  out.pixels.resize(q.rows(), 2);
  out.depth.resize(q.rows());
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    const double z = q(i, 2);
    if (!(z > kMinDepth)) throw BehindCameraError(static_cast<std::size_t>(i), z);
    out.pixels(i, 0) = intrinsics.focal * (q(i, 0) / z) + intrinsics.principal_point.x();
    out.pixels(i, 1) = intrinsics.focal * (q(i, 1) / z) + intrinsics.principal_point.y();
    out.depth[i] = z;
  }
  return out;
}

/// Real spherical-harmonic normalization constants, bands 0-2.
namespace sh {
inline constexpr double kY00 = 0.28209479177387814;  // 1 / (2 sqrt(pi))
inline constexpr double kY1 = 0.48860251190291992;   // sqrt(3 / (4 pi))
inline constexpr double kY2 = 1.0925484305920792;    // sqrt(15 / (4 pi))
inline constexpr double kY20 = 0.31539156525252005;  // sqrt(5 / (16 pi))
inline constexpr double kY22 = 0.54627421529603959;  // sqrt(15 / (16 pi))
}  // namespace sh

/// [Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22] at a unit normal.
inline std::array<double, 9> sh_basis(const Eigen::Vector3d& n) {
  detail::require(n.allFinite() && std::abs(n.norm() - 1.0) <= 1e-6, ErrorKind::Argument,
                  "sh_basis needs a unit normal");
  const double x = n.x(), y = n.y(), z = n.z();
  return {sh::kY00,
          sh::kY1 * y,
          sh::kY1 * z,
          sh::kY1 * x,
          sh::kY2 * x * y,
          sh::kY2 * y * z,
          sh::kY20 * (3.0 * z * z - 1.0),
          sh::kY2 * x * z,
          sh::kY22 * (x * x - y * y)};
}

/// Lighting that reproduces the albedo exactly (irradiance 1 everywhere).
inline ShCoeffs unit_ambient() {
  ShCoeffs s;
  s.gamma[0] = 1.0 / sh::kY00;
  return s;
}

/// Per-vertex irradiance max(0, gamma . Y(n)).
inline Eigen::VectorXd irradiance(const std::vector<Eigen::Vector3d>& normals,
                                  const ShCoeffs& gamma) {
  detail::require_dims(gamma.gamma.size() == static_cast<Eigen::Index>(kShDims),
                       "gamma must have 9 entries");
  Eigen::VectorXd e(static_cast<Eigen::Index>(normals.size()));
  for (std::size_t v = 0; v < normals.size(); ++v) {
    const auto y = sh_basis(normals[v]);
    double acc = 0.0;
    for (std::size_t m = 0; m < kShDims; ++m) acc += gamma.gamma[static_cast<Eigen::Index>(m)] * y[m];
    e[static_cast<Eigen::Index>(v)] = std::max(0.0, acc);
  }
  return e;
}

/// radiance = clamp01(albedo * max(0, gamma . Y(n))), gamma shared by RGB.
inline Eigen::VectorXd shade_vertices(const Eigen::VectorXd& albedo,
                                      const std::vector<Eigen::Vector3d>& normals,
                                      const ShCoeffs& gamma) {
  detail::require_dims(albedo.size() == 3 * static_cast<Eigen::Index>(normals.size()),
                       "albedo must hold 3V entries for V normals");
  const Eigen::VectorXd e = irradiance(normals, gamma);
  Eigen::VectorXd out(albedo.size());
  for (Eigen::Index v = 0; v < e.size(); ++v)
    for (int c = 0; c < 3; ++c)
      out[3 * v + c] = std::clamp(albedo[3 * v + c] * e[v], 0.0, 1.0);
  return out;
}

}  // namespace occface
