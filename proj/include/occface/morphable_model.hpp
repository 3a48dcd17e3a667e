#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "occface/constants.hpp"
#include "occface/error.hpp"
#include "occface/rng.hpp"

namespace occface {

using Triangle = std::array<std::uint32_t, 3>;

/// Linear face model: mean shape/texture plus identity, expression and
/// texture PCA bases over a fixed triangle mesh. Vectors are stacked per
/// vertex as (x0, y0, z0, x1, ...) and (r0, g0, b0, r1, ...).
struct MorphableBasis {
  Eigen::VectorXd mean_shape;
  Eigen::VectorXd mean_texture;
  Eigen::MatrixXd basis_id;
  Eigen::MatrixXd basis_exp;
  Eigen::MatrixXd basis_tex;
  std::vector<Triangle> triangles;

  std::size_t vertex_count() const noexcept {
    return static_cast<std::size_t>(mean_shape.size()) / 3;
  }
};

struct ShapeCoeffs {
  Eigen::VectorXd alpha_id = Eigen::VectorXd::Zero(kIdDims);
  Eigen::VectorXd beta_exp = Eigen::VectorXd::Zero(kExpDims);
};

struct TextureCoeffs {
  Eigen::VectorXd beta_te = Eigen::VectorXd::Zero(kTexDims);
};

namespace detail {

inline bool all_finite(const Eigen::Ref<const Eigen::MatrixXd>& m) {
  return m.allFinite();
}

inline void check_coeffs(const ShapeCoeffs& coeffs) {
  require_dims(coeffs.alpha_id.size() == static_cast<Eigen::Index>(kIdDims),
               "alpha_id must have 80 entries");
  require_dims(coeffs.beta_exp.size() == static_cast<Eigen::Index>(kExpDims),
               "beta_exp must have 64 entries");
  require(coeffs.alpha_id.allFinite() && coeffs.beta_exp.allFinite(), ErrorKind::Argument,
          "shape coefficients must be finite");
}

inline void check_coeffs(const TextureCoeffs& coeffs) {
  require_dims(coeffs.beta_te.size() == static_cast<Eigen::Index>(kTexDims),
               "beta_te must have 80 entries");
  require(coeffs.beta_te.allFinite(), ErrorKind::Argument, "texture coefficients must be finite");
}

}  // namespace detail

/// Throws DimensionInconsistency / Geometry / Argument errors for any
/// violated basis invariant.
inline void validate(const MorphableBasis& basis) {
  using detail::require;
  const auto rows = basis.mean_shape.size();
  require(rows % 3 == 0 && rows > 0, ErrorKind::DimensionInconsistency,
          "mean_shape length must be a positive multiple of 3");
  const auto v = basis.vertex_count();
  auto check_rows = [&](Eigen::Index got, const char* name) {
    require(got == rows, ErrorKind::DimensionInconsistency,
            std::string(name) + " has " + std::to_string(got) + " rows, expected 3V = " +
                std::to_string(rows));
  };
  check_rows(basis.mean_texture.size(), "mean_texture");
  check_rows(basis.basis_id.rows(), "basis_id");
  check_rows(basis.basis_exp.rows(), "basis_exp");
  check_rows(basis.basis_tex.rows(), "basis_tex");
  auto check_cols = [&](Eigen::Index got, std::size_t want, const char* name) {
    require(got == static_cast<Eigen::Index>(want), ErrorKind::DimensionInconsistency,
            std::string(name) + " has " + std::to_string(got) + " columns, expected " +
                std::to_string(want));
  };
  check_cols(basis.basis_id.cols(), kIdDims, "basis_id");
  check_cols(basis.basis_exp.cols(), kExpDims, "basis_exp");
  check_cols(basis.basis_tex.cols(), kTexDims, "basis_tex");

  require(detail::all_finite(basis.mean_shape) && detail::all_finite(basis.mean_texture) &&
              detail::all_finite(basis.basis_id) && detail::all_finite(basis.basis_exp) &&
              detail::all_finite(basis.basis_tex),
          ErrorKind::Argument, "basis contains non-finite values");
  for (Eigen::Index i = 0; i < basis.mean_texture.size(); ++i) {
    const double t = basis.mean_texture[i];
    require(t >= 0.0 && t <= 1.0, ErrorKind::Argument,
            "mean_texture entry " + std::to_string(i) + " outside [0,1]");
  }
  for (std::size_t t = 0; t < basis.triangles.size(); ++t) {
    const auto& tri = basis.triangles[t];
    for (auto idx : tri)
      require(idx < v, ErrorKind::DimensionInconsistency,
              "triangle " + std::to_string(t) + " references vertex " + std::to_string(idx) +
                  " >= V");
    if (tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2])
      throw GeometryError(t, "repeated vertex index");
  }
}

/// S = mean + A_id * alpha + B_exp * beta. No clamping.
inline Eigen::VectorXd synthesize_shape(const MorphableBasis& basis, const ShapeCoeffs& coeffs) {
  detail::check_coeffs(coeffs);
  detail::require_dims(basis.basis_id.cols() == coeffs.alpha_id.size() &&
                           basis.basis_exp.cols() == coeffs.beta_exp.size() &&
                           basis.basis_id.rows() == basis.mean_shape.size() &&
                           basis.basis_exp.rows() == basis.mean_shape.size(),
                       "shape coefficients do not match the basis");
  Eigen::VectorXd shape = basis.mean_shape;
  shape.noalias() += basis.basis_id * coeffs.alpha_id;
  shape.noalias() += basis.basis_exp * coeffs.beta_exp;
  return shape;
}

/// T = mean + B_tex * beta before clamping; used by gradient code that
/// needs to know which entries the clamp is active on.
inline Eigen::VectorXd synthesize_texture_unclamped(const MorphableBasis& basis,
                                                    const TextureCoeffs& coeffs) {
  detail::check_coeffs(coeffs);
  detail::require_dims(basis.basis_tex.cols() == coeffs.beta_te.size() &&
                           basis.basis_tex.rows() == basis.mean_texture.size(),
                       "texture coefficients do not match the basis");
  Eigen::VectorXd tex = basis.mean_texture;
  tex.noalias() += basis.basis_tex * coeffs.beta_te;
  return tex;
}

/// T = mean + B_tex * beta, clamped to [0,1] per entry.
inline Eigen::VectorXd synthesize_texture(const MorphableBasis& basis,
                                          const TextureCoeffs& coeffs) {
  Eigen::VectorXd tex = synthesize_texture_unclamped(basis, coeffs);
  return tex.cwiseMax(0.0).cwiseMin(1.0);
}

namespace detail {

/// Incremental convex hull of points in general position. Faces are wound
/// counter-clockwise seen from outside.
inline std::vector<Triangle> convex_hull(const std::vector<Eigen::Vector3d>& pts) {
  struct Face {
    std::uint32_t a, b, c;
    Eigen::Vector3d normal;
    double offset;
    bool alive;
  };
  const auto n = static_cast<std::uint32_t>(pts.size());
  auto make_face = [&](std::uint32_t a, std::uint32_t b, std::uint32_t c) {
    Eigen::Vector3d nrm = (pts[b] - pts[a]).cross(pts[c] - pts[a]).normalized();
    return Face{a, b, c, nrm, nrm.dot(pts[a]), true};
  };

  std::uint32_t fourth = 3;
  const Eigen::Vector3d n012 = (pts[1] - pts[0]).cross(pts[2] - pts[0]);
  while (fourth < n && std::abs(n012.dot(pts[fourth] - pts[0])) < 1e-12) ++fourth;
  require(fourth < n, ErrorKind::Geometry, "hull points are coplanar");

  std::vector<Face> faces;
  const Eigen::Vector3d centroid = (pts[0] + pts[1] + pts[2] + pts[fourth]) / 4.0;
  auto add_oriented = [&](std::uint32_t a, std::uint32_t b, std::uint32_t c) {
    Face f = make_face(a, b, c);
    if (f.normal.dot(centroid) - f.offset > 0.0) f = make_face(a, c, b);
    faces.push_back(f);
  };
  add_oriented(0, 1, 2);
  add_oriented(0, 1, fourth);
  add_oriented(0, 2, fourth);
  add_oriented(1, 2, fourth);

  for (std::uint32_t p = 3; p < n; ++p) {
    if (p == fourth) continue;
    std::set<std::pair<std::uint32_t, std::uint32_t>> visible_edges;
    std::vector<std::size_t> visible;
    for (std::size_t f = 0; f < faces.size(); ++f) {
      if (!faces[f].alive) continue;
      if (faces[f].normal.dot(pts[p]) - faces[f].offset > 1e-12) {
        visible.push_back(f);
        visible_edges.insert({faces[f].a, faces[f].b});
        visible_edges.insert({faces[f].b, faces[f].c});
        visible_edges.insert({faces[f].c, faces[f].a});
      }
    }
    if (visible.empty()) continue;
    for (auto f : visible) faces[f].alive = false;
    for (const auto& [u, w] : visible_edges)
      if (!visible_edges.contains({w, u})) faces.push_back(make_face(u, w, p));
  }

  std::vector<Triangle> out;
  for (const auto& f : faces)
    if (f.alive) out.push_back({f.a, f.b, f.c});
  return out;
}

/// Unit directions spread evenly on the sphere (golden-angle spiral), y up.
inline std::vector<Eigen::Vector3d> fibonacci_sphere(std::size_t count) {
  std::vector<Eigen::Vector3d> pts;
  pts.reserve(count);
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (std::size_t i = 0; i < count; ++i) {
    const double y = 1.0 - 2.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(count);
    const double r = std::sqrt(std::max(0.0, 1.0 - y * y));
    const double phi = golden * static_cast<double>(i);
    pts.emplace_back(std::cos(phi) * r, y, std::sin(phi) * r);
  }
  return pts;
}

/// The 20 monomials of degree <= 3 in the direction components.
inline std::array<double, 20> smooth_features(const Eigen::Vector3d& d) {
  const double x = d.x(), y = d.y(), z = d.z();
  return {1.0,       x,         y,         z,         x * x,     y * y,     z * z,
          x * y,     y * z,     x * z,     x * x * x, y * y * y, z * z * z, x * x * y,
          x * x * z, y * y * x, y * y * z, z * z * x, z * z * y, x * y * z};
}

/// The 35 monomials x^i y^j z^k with i + j + k <= 4.
inline std::vector<double> field_features(const Eigen::Vector3d& d) {
  std::vector<double> out;
  for (int i = 0; i <= 4; ++i)
    for (int j = 0; i + j <= 4; ++j)
      for (int k = 0; i + j + k <= 4; ++k)
        out.push_back(std::pow(d.x(), i) * std::pow(d.y(), j) * std::pow(d.z(), k));
  return out;
}

/// Orthonormal basis (3V rows) of the smooth per-vertex 3-vector fields
/// spanned by field_features in each component, minus `gauge` if given.
inline Eigen::MatrixXd smooth_field_space(const std::vector<Eigen::Vector3d>& dirs,
                                          const Eigen::MatrixXd* gauge) {
  const auto v = static_cast<Eigen::Index>(dirs.size());
  const auto n_feat = static_cast<Eigen::Index>(field_features(Eigen::Vector3d::UnitZ()).size());
  Eigen::MatrixXd f = Eigen::MatrixXd::Zero(3 * v, 3 * n_feat);
  for (Eigen::Index i = 0; i < v; ++i) {
    const auto feats = field_features(dirs[static_cast<std::size_t>(i)]);
    for (Eigen::Index k = 0; k < n_feat; ++k)
      for (int c = 0; c < 3; ++c) f(3 * i + c, 3 * k + c) = feats[static_cast<std::size_t>(k)];
  }
  if (gauge != nullptr) f -= *gauge * (gauge->transpose() * f);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(f);
  qr.setThreshold(1e-10);
  return qr.householderQ() * Eigen::MatrixXd::Identity(3 * v, qr.rank());
}

/// Orthonormal basis of the infinitesimal similarity motions of a shape:
/// three translations, three rotations and uniform scale.
inline Eigen::MatrixXd similarity_modes(const Eigen::VectorXd& shape) {
  const Eigen::Index v = shape.size() / 3;
  Eigen::MatrixXd modes = Eigen::MatrixXd::Zero(3 * v, 7);
  for (Eigen::Index i = 0; i < v; ++i) {
    const Eigen::Vector3d p = shape.segment<3>(3 * i);
    for (int c = 0; c < 3; ++c) {
      modes(3 * i + c, c) = 1.0;
      modes.block<3, 1>(3 * i, 3 + c) = Eigen::Vector3d::Unit(c).cross(p);
    }
    modes.block<3, 1>(3 * i, 6) = p;
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(modes);
  const Eigen::Index rank = std::min<Eigen::Index>(7, 3 * v);
  return qr.householderQ() * Eigen::MatrixXd::Identity(3 * v, rank);
}

/// Fills `m` like a PCA basis: orthogonal smooth columns (as many as the
/// field space allows; any beyond that are random smooth combinations) with
/// standard deviations decaying as 1 / (1 + j / 3), scaled so the combined
/// per-entry RMS under unit coefficients equals `total_rms`. Columns are
/// orthogonal to `gauge` when it is given.
inline void fill_decaying_basis(Eigen::MatrixXd& m, const std::vector<Eigen::Vector3d>& dirs,
                                double total_rms, Rng& rng, const Eigen::MatrixXd* gauge = nullptr) {
  const Eigen::MatrixXd space = smooth_field_space(dirs, gauge);
  Eigen::MatrixXd mix(space.cols(), m.cols());
  for (Eigen::Index j = 0; j < mix.cols(); ++j)
    for (Eigen::Index i = 0; i < mix.rows(); ++i) mix(i, j) = rng.normal();
  Eigen::MatrixXd cols = space * mix;
  const Eigen::Index n_orth = std::min(space.cols(), m.cols());
  if (n_orth > 0) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(cols.leftCols(n_orth));
    cols.leftCols(n_orth) = qr.householderQ() * Eigen::MatrixXd::Identity(cols.rows(), n_orth);
  }

  double sum_sq = 0.0;
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const double sigma = 1.0 / (1.0 + static_cast<double>(j) / 3.0);
    sum_sq += sigma * sigma;
  }
  const double scale = total_rms / std::sqrt(sum_sq);
  const double entries = static_cast<double>(m.rows());
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const double sigma = scale / (1.0 + static_cast<double>(j) / 3.0);
    const double norm = cols.col(j).norm();
    m.col(j) = norm > 1e-12 ? Eigen::VectorXd(sigma * std::sqrt(entries) / norm * cols.col(j))
                            : Eigen::VectorXd::Zero(m.rows());
  }
}

}  // namespace detail

/// Deterministic synthetic basis over a closed sphere-like mesh: an
/// ellipsoidal head (front at -z, top at -y in image space once projected)
/// with a nose bump, smooth decaying identity/expression/texture bases.
inline MorphableBasis make_synthetic_basis(std::size_t v_count, std::uint64_t seed) {
  detail::require(v_count >= 3, ErrorKind::Argument, "synthetic basis needs at least 3 vertices");
  Rng rng(seed);
  const auto dirs = detail::fibonacci_sphere(v_count);
  const auto v = static_cast<Eigen::Index>(v_count);

  MorphableBasis basis;
  basis.mean_shape.resize(3 * v);
  basis.mean_texture.resize(3 * v);

  const Eigen::Vector3d radii(0.75, 0.95, 0.7);
  const Eigen::Vector3d nose_dir(0.0, 0.0, -1.0);
  Eigen::Matrix<double, 20, 1> bump;
  for (int i = 0; i < 20; ++i) bump[i] = 0.02 * rng.normal();
  const Eigen::Vector3d skin(0.78, 0.58, 0.47);
  Eigen::Matrix<double, 20, 3> tone;
  for (int i = 0; i < 20; ++i)
    for (int c = 0; c < 3; ++c) tone(i, c) = 0.03 * rng.normal();

  for (Eigen::Index i = 0; i < v; ++i) {
    const Eigen::Vector3d& d = dirs[static_cast<std::size_t>(i)];
    const auto feats = detail::smooth_features(d);
    double r = 1.0;
    for (int k = 0; k < 20; ++k) r += bump[k] * feats[k];
    const double cos_nose = d.dot(nose_dir);
    r += 0.18 * std::exp(-(1.0 - cos_nose) / 0.08);
    basis.mean_shape.segment<3>(3 * i) = r * radii.cwiseProduct(d);
    for (int c = 0; c < 3; ++c) {
      double t = skin[c];
      for (int k = 0; k < 20; ++k) t += tone(k, c) * feats[k];
      basis.mean_texture[3 * i + c] = std::clamp(t, 0.05, 0.95);
    }
  }

  basis.basis_id.resize(3 * v, static_cast<Eigen::Index>(kIdDims));
  basis.basis_exp.resize(3 * v, static_cast<Eigen::Index>(kExpDims));
  basis.basis_tex.resize(3 * v, static_cast<Eigen::Index>(kTexDims));
  // shape columns carry no rigid motion or scale, which belong to the pose
  const Eigen::MatrixXd gauge = detail::similarity_modes(basis.mean_shape);
  detail::fill_decaying_basis(basis.basis_id, dirs, 0.06, rng, &gauge);
  detail::fill_decaying_basis(basis.basis_exp, dirs, 0.04, rng, &gauge);
  detail::fill_decaying_basis(basis.basis_tex, dirs, 0.06, rng);

  if (v_count == 3) {
    basis.triangles = {{0, 1, 2}, {0, 2, 1}};
  } else {
    basis.triangles = detail::convex_hull(dirs);
  }
  validate(basis);
  return basis;
}

}  // namespace occface
