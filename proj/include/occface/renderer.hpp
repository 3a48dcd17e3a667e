#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "occface/camera_light.hpp"
#include "occface/error.hpp"
#include "occface/image.hpp"
#include "occface/morphable_model.hpp"
#include "occface/param_vector.hpp"

namespace occface {

struct Mesh {
  Eigen::VectorXd positions;
  Eigen::VectorXd albedo;
  std::vector<Eigen::Vector3d> normals;
  std::vector<Triangle> triangles;

  std::size_t vertex_count() const noexcept {
    return static_cast<std::size_t>(positions.size()) / 3;
  }
};

/// Which triangle produced a pixel and the perspective-correct weights of its
/// three vertices. triangle < 0 on background.
struct Fragment {
  int triangle = -1;
  std::array<double, 3> weights{0.0, 0.0, 0.0};
};

struct RenderOutput {
  Image image;     // H x W x 3
  Image coverage;  // H x W x 1, exactly 0 or 1
  Image depth;     // H x W x 1, +inf where uncovered
  std::vector<Fragment> fragments;
  /// Shaded per-vertex colors the image was interpolated from.
  Eigen::VectorXd radiance;

  std::size_t covered_count() const noexcept {
    std::size_t n = 0;
    for (double c : coverage.values()) n += c != 0.0;
    return n;
  }
};

struct RasterOptions {
  bool cull_back_faces = false;
};

inline void check_mesh(const Mesh& mesh) {
  const auto v = mesh.vertex_count();
  detail::require_dims(mesh.positions.size() % 3 == 0, "positions must hold 3V entries");
  detail::require_dims(mesh.albedo.size() == mesh.positions.size(), "albedo must hold 3V entries");
  detail::require_dims(mesh.normals.size() == v, "normals must hold V entries");
  for (const auto& n : mesh.normals)
    detail::require(std::abs(n.norm() - 1.0) <= 1e-6, ErrorKind::Argument,
                    "mesh normals must be unit length");
  for (const auto& tri : mesh.triangles)
    for (auto idx : tri)
      detail::require_dims(idx < v, "triangle references a missing vertex");
}

/// Area-weighted vertex normals. Each face normal is computed from its
/// indices rotated to start at the smallest one, and each vertex sums its
/// incident faces sorted by that canonical triple, so the result does not
/// depend on triangle order or on which corner a triangle lists first.
/// Vertices with no incident face (or a cancelling fan) get +z.
inline std::vector<Eigen::Vector3d> compute_normals(const Eigen::VectorXd& positions,
                                                    const std::vector<Triangle>& triangles) {
  detail::require_dims(positions.size() % 3 == 0, "positions must hold 3V entries");
  const auto v = static_cast<std::size_t>(positions.size()) / 3;
  auto vertex = [&](std::uint32_t i) -> Eigen::Vector3d { return positions.segment<3>(3 * i); };

  struct Contribution {
    Triangle key;
    Eigen::Vector3d normal;
  };
  std::vector<std::vector<Contribution>> incident(v);
  for (std::size_t t = 0; t < triangles.size(); ++t) {
    Triangle tri = triangles[t];
    for (auto idx : tri)
      detail::require_dims(idx < v, "triangle references a missing vertex");
    const auto first = static_cast<std::size_t>(std::min_element(tri.begin(), tri.end()) - tri.begin());
    std::rotate(tri.begin(), tri.begin() + static_cast<std::ptrdiff_t>(first), tri.end());
    const Eigen::Vector3d n = (vertex(tri[1]) - vertex(tri[0])).cross(vertex(tri[2]) - vertex(tri[0]));
    if (!(0.5 * n.norm() > 1e-12)) throw GeometryError(t, "degenerate (zero-area) triangle");
    for (auto idx : tri) incident[idx].push_back({tri, n});
  }

  std::vector<Eigen::Vector3d> normals(v, Eigen::Vector3d::UnitZ());
  for (std::size_t i = 0; i < v; ++i) {
    auto& list = incident[i];
    std::sort(list.begin(), list.end(),
              [](const Contribution& a, const Contribution& b) { return a.key < b.key; });
    Eigen::Vector3d sum = Eigen::Vector3d::Zero();
    for (const auto& c : list) sum += c.normal;
    const double len = sum.norm();
    if (len > 1e-300) normals[i] = sum / len;
  }
  return normals;
}

namespace detail {

/// Signed edge function; positive on the interior side of a -> b for a
/// triangle with positive area.
inline double edge_function(const Eigen::Vector2d& a, const Eigen::Vector2d& b, double px,
                            double py) {
  return (b.x() - a.x()) * (py - a.y()) - (b.y() - a.y()) * (px - a.x());
}

/// Top-left rule in y-down raster coordinates: a left edge runs upward, a top
/// edge is horizontal with the interior below it.
inline bool is_top_left(const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
  return b.y() < a.y() || (b.y() == a.y() && b.x() > a.x());
}

inline bool edge_covers(double e, bool top_left) { return e > 0.0 || (e == 0.0 && top_left); }

}  // namespace detail

/// Z-buffered rasterization of a shaded mesh. Pixels are sampled at their
/// centres (x + 0.5, y + 0.5); ties on an edge go to top-left edges; colors
/// and depth are interpolated perspective-correctly. Depth test is strict, so
/// among equal depths the earlier triangle wins. Normals are rotated into
/// camera space before shading.
inline RenderOutput rasterize(const Mesh& mesh, const Pose& pose,
                              const CameraIntrinsics& intrinsics, const ShCoeffs& gamma,
                              int width, int height, const RasterOptions& options = {}) {
  detail::require(width >= 1 && height >= 1, ErrorKind::Argument, "raster must be at least 1x1");
  check_mesh(mesh);

  const auto rot = rotation_of(pose);
  std::vector<Eigen::Vector3d> cam_normals;
  cam_normals.reserve(mesh.normals.size());
  for (const auto& n : mesh.normals) cam_normals.push_back((rot * n).normalized());

  RenderOutput out;
  out.image = Image(width, height, 3);
  out.coverage = Image(width, height, 1);
  out.depth = Image(width, height, 1, std::numeric_limits<double>::infinity());
  out.fragments.assign(static_cast<std::size_t>(width) * height, Fragment{});
  out.radiance = shade_vertices(mesh.albedo, cam_normals, gamma);

  const Projection proj = project_points(mesh.positions, pose, intrinsics);
  Eigen::MatrixX3d cam;
  if (options.cull_back_faces) cam = camera_space(mesh.positions, pose);

  for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
    std::array<std::uint32_t, 3> idx = mesh.triangles[t];
    if (options.cull_back_faces) {
      const Eigen::Vector3d q0 = cam.row(idx[0]).transpose();
      const Eigen::Vector3d q1 = cam.row(idx[1]).transpose();
      const Eigen::Vector3d q2 = cam.row(idx[2]).transpose();
      if ((q1 - q0).cross(q2 - q0).dot(q0) >= 0.0) continue;
    }
    std::array<int, 3> slot{0, 1, 2};
    auto pt = [&](int k) -> Eigen::Vector2d { return proj.pixels.row(idx[k]).transpose(); };
    Eigen::Vector2d p0 = pt(0), p1 = pt(1), p2 = pt(2);
    double area = detail::edge_function(p0, p1, p2.x(), p2.y());
    if (area == 0.0) continue;
    if (area < 0.0) {
      std::swap(p1, p2);
      std::swap(slot[1], slot[2]);
      area = -area;
    }
    const std::array<double, 3> z{proj.depth[idx[slot[0]]], proj.depth[idx[slot[1]]],
                                  proj.depth[idx[slot[2]]]};
    const bool tl0 = detail::is_top_left(p1, p2);
    const bool tl1 = detail::is_top_left(p2, p0);
    const bool tl2 = detail::is_top_left(p0, p1);

    const double min_x = std::min({p0.x(), p1.x(), p2.x()});
    const double max_x = std::max({p0.x(), p1.x(), p2.x()});
    const double min_y = std::min({p0.y(), p1.y(), p2.y()});
    const double max_y = std::max({p0.y(), p1.y(), p2.y()});
    auto lo = [](double v, int limit) {
      return static_cast<int>(std::clamp(std::ceil(v - 0.5), 0.0, static_cast<double>(limit)));
    };
    auto hi = [](double v, int limit) {
      return static_cast<int>(std::clamp(std::floor(v - 0.5), -1.0, static_cast<double>(limit - 1)));
    };
    const int x0 = lo(min_x, width), x1 = hi(max_x, width);
    const int y0 = lo(min_y, height), y1 = hi(max_y, height);

    for (int py = y0; py <= y1; ++py) {
      const double cy = py + 0.5;
      for (int px = x0; px <= x1; ++px) {
        const double cx = px + 0.5;
        const double e0 = detail::edge_function(p1, p2, cx, cy);
        const double e1 = detail::edge_function(p2, p0, cx, cy);
        const double e2 = detail::edge_function(p0, p1, cx, cy);
        if (!detail::edge_covers(e0, tl0) || !detail::edge_covers(e1, tl1) ||
            !detail::edge_covers(e2, tl2))
          continue;
        const double w0 = e0 / area / z[0];
        const double w1 = e1 / area / z[1];
        const double w2 = e2 / area / z[2];
        const double inv_depth = w0 + w1 + w2;
        const double depth = 1.0 / inv_depth;
        double& zbuf = out.depth.at(px, py);
        if (!(depth < zbuf)) continue;
        zbuf = depth;
        out.coverage.at(px, py) = 1.0;
        Fragment& frag = out.fragments[static_cast<std::size_t>(py) * width + px];
        frag.triangle = static_cast<int>(t);
        // weights indexed by the triangle's original corner order
        frag.weights[slot[0]] = w0 * depth;
        frag.weights[slot[1]] = w1 * depth;
        frag.weights[slot[2]] = w2 * depth;
        for (int c = 0; c < 3; ++c) {
          double color = 0.0;
          for (int k = 0; k < 3; ++k)
            color += frag.weights[k] * out.radiance[3 * idx[k] + c];
          out.image.at(px, py, c) = std::clamp(color, 0.0, 1.0);
        }
      }
    }
  }
  return out;
}

/// Mesh for a parameter vector: shape and texture synthesis plus normals.
inline Mesh build_mesh(const MorphableBasis& basis, const ParamVector& params) {
  Mesh mesh;
  mesh.positions = synthesize_shape(basis, params.shape);
  mesh.albedo = synthesize_texture(basis, params.texture);
  mesh.normals = compute_normals(mesh.positions, basis.triangles);
  mesh.triangles = basis.triangles;
  return mesh;
}

/// Shape synthesis, normals, shading, projection and rasterization in turn.
inline RenderOutput render_params(const MorphableBasis& basis, const ParamVector& params,
                                  const CameraIntrinsics& intrinsics, int width, int height,
                                  const RasterOptions& options = {}) {
  return rasterize(build_mesh(basis, params), params.pose, intrinsics, params.light, width,
                   height, options);
}

}  // namespace occface
