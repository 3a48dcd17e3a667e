#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "occface/camera_light.hpp"
#include "occface/constants.hpp"
#include "occface/error.hpp"
#include "occface/image.hpp"
#include "occface/morphable_model.hpp"
#include "occface/param_vector.hpp"
#include "occface/renderer.hpp"

namespace occface {

enum class GradientMode {
  /// Closed form for every block, visibility held fixed.
  Analytic,
  /// Closed form for texture and lighting, central differences for shape and pose.
  Hybrid,
  /// Central differences everywhere.
  Numeric,
};

enum class Optimizer {
  /// Momentum on the raw gradient: v = momentum v - lr g, x += v.
  Momentum,
  /// Momentum on the gradient with per-coordinate RMS normalization (Adam,
  /// first-moment decay = momentum).
  Adam,
};

struct FitConfig {
  int max_iters = 500;
  Optimizer optimizer = Optimizer::Adam;
  double step_size = 0.1;
  double momentum = 0.9;
  /// Adam second-moment decay.
  double rms_decay = 0.999;
  /// The step size decays geometrically to this fraction at max_iters.
  double final_step_fraction = 0.01;
  double fd_epsilon = 1e-4;
  double lambda6 = kDefaultWeights.lambda6;
  double lambda7 = kDefaultWeights.lambda7;
  /// Weight of ||(alpha, beta_exp, beta_te)||^2; not part of L_3D proper.
  double reg_weight = 1e-4;
  /// Stop when |dL| / L falls below this between consecutive iterates.
  double convergence_tol = 1e-7;
  /// Stop when the objective itself falls to this value.
  double loss_tol = 1e-12;
  /// Stop when the gradient norm falls below this.
  double gradient_tol = 1e-9;
  /// Step multipliers per parameter block.
  double pose_step = 0.1;
  double light_step = 1.0;
  double shape_step = 1.0;
  double texture_step = 1.0;
  /// Only accept steps that do not increase the objective, halving the step
  /// until one does.
  bool backtracking = false;
  GradientMode gradient = GradientMode::Analytic;
  /// Starting half-width in pixels of the soft outline band (see
  /// soft_objective and soft_edge_width_at). 0 fits the plain objective
  /// throughout, which cannot move the face outline.
  double soft_edge_width = 2.0;
  /// Fraction of max_iters spent on the soft objective.
  double soft_edge_phase = 0.9;
  /// Abort when the loss exceeds this multiple of the initial loss.
  double divergence_factor = 10.0;
  /// Worker threads for finite-difference probes; results do not depend on it.
  int threads = 1;
};

inline std::string to_string(Optimizer o) { return o == Optimizer::Adam ? "adam" : "momentum"; }

inline std::string to_string(GradientMode g) {
  switch (g) {
    case GradientMode::Analytic: return "analytic";
    case GradientMode::Hybrid: return "hybrid";
    case GradientMode::Numeric: return "numeric";
  }
  return "analytic";
}

inline void validate(const FitConfig& c) {
  auto positive = [](double v) { return v > 0.0 && std::isfinite(v); };
  detail::require(c.max_iters >= 0, ErrorKind::Config, "max_iters must be >= 0");
  detail::require(positive(c.step_size), ErrorKind::Config, "step_size must be positive");
  detail::require(c.momentum >= 0.0 && c.momentum < 1.0, ErrorKind::Config,
                  "momentum must lie in [0, 1)");
  detail::require(c.rms_decay > 0.0 && c.rms_decay < 1.0, ErrorKind::Config,
                  "rms_decay must lie in (0, 1)");
  detail::require(c.final_step_fraction > 0.0 && c.final_step_fraction <= 1.0, ErrorKind::Config,
                  "final_step_fraction must lie in (0, 1]");
  detail::require(positive(c.fd_epsilon), ErrorKind::Config, "fd_epsilon must be positive");
  detail::require(c.lambda6 >= 0.0 && c.lambda7 >= 0.0 && c.reg_weight >= 0.0, ErrorKind::Config,
                  "loss weights must be non-negative");
  detail::require(c.convergence_tol >= 0.0 && c.gradient_tol >= 0.0 && c.loss_tol >= 0.0,
                  ErrorKind::Config, "tolerances must be non-negative");
  detail::require(c.pose_step >= 0.0 && c.light_step >= 0.0 && c.shape_step >= 0.0 &&
                      c.texture_step >= 0.0,
                  ErrorKind::Config, "block step multipliers must be non-negative");
  detail::require(c.soft_edge_width >= 0.0 && std::isfinite(c.soft_edge_width), ErrorKind::Config,
                  "soft_edge_width must be non-negative");
  detail::require(c.soft_edge_phase >= 0.0 && c.soft_edge_phase <= 1.0, ErrorKind::Config,
                  "soft_edge_phase must lie in [0, 1]");
  detail::require(c.divergence_factor > 1.0, ErrorKind::Config, "divergence_factor must exceed 1");
  detail::require(c.threads >= 1, ErrorKind::Config, "threads must be >= 1");
}

// ---------------------------------------------------------------------------
// Embedders
// ---------------------------------------------------------------------------

/// Image -> feature vector. Implementations must be deterministic.
class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual Eigen::VectorXd embed(const Image& rgb) const = 0;
  /// Vector-Jacobian product: d(loss)/d(image) given d(loss)/d(embedding).
  /// Embedders that cannot provide it return nullopt and the fit falls
  /// back to finite differences.
  virtual std::optional<Image> pullback(const Image& rgb, const Eigen::VectorXd& grad) const {
    (void)rgb;
    (void)grad;
    return std::nullopt;
  }
};

/// Averages the image over an 8 x 8 grid of cells per channel and flattens
/// the result (192 entries, cell-major then channel). Cell (i, j) spans rows
/// [floor(i H / 8), floor((i + 1) H / 8)) and the matching columns.
class DownsampleEmbedder final : public Embedder {
 public:
  static constexpr int kGrid = 8;

  Eigen::VectorXd embed(const Image& rgb) const override {
    check(rgb);
    Eigen::VectorXd out = Eigen::VectorXd::Zero(kGrid * kGrid * 3);
    for (int i = 0; i < kGrid; ++i)
      for (int j = 0; j < kGrid; ++j) {
        const auto [y0, y1] = span(i, rgb.height());
        const auto [x0, x1] = span(j, rgb.width());
        const double n = static_cast<double>((y1 - y0) * (x1 - x0));
        for (int c = 0; c < 3; ++c) {
          double acc = 0.0;
          for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) acc += rgb.at(x, y, c);
          out[(i * kGrid + j) * 3 + c] = acc / n;
        }
      }
    return out;
  }

  std::optional<Image> pullback(const Image& rgb, const Eigen::VectorXd& grad) const override {
    check(rgb);
    detail::require_dims(grad.size() == kGrid * kGrid * 3, "embedding gradient has wrong size");
    Image out(rgb.width(), rgb.height(), 3);
    for (int i = 0; i < kGrid; ++i)
      for (int j = 0; j < kGrid; ++j) {
        const auto [y0, y1] = span(i, rgb.height());
        const auto [x0, x1] = span(j, rgb.width());
        const double n = static_cast<double>((y1 - y0) * (x1 - x0));
        for (int c = 0; c < 3; ++c) {
          const double g = grad[(i * kGrid + j) * 3 + c] / n;
          for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) out.at(x, y, c) = g;
        }
      }
    return out;
  }

 private:
  static void check(const Image& rgb) {
    detail::require_dims(rgb.channels() == 3 && rgb.width() >= kGrid && rgb.height() >= kGrid,
                         "downsample embedder needs an RGB image of at least 8x8");
  }
  static std::pair<int, int> span(int cell, int extent) {
    return {cell * extent / kGrid, (cell + 1) * extent / kGrid};
  }
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// sqrt(sum over covered pixels and channels of squared difference) divided
/// by the covered-pixel count.
inline double per_pixel_loss(const RenderOutput& rendered, const Image& target) {
  detail::require_dims(rendered.image.same_shape(target) && target.channels() == 3,
                       "render and target shapes differ");
  const std::size_t n = rendered.covered_count();
  detail::require(n > 0, ErrorKind::DegenerateRender, "render covers no pixels");
  double sum = 0.0;
  for (int y = 0; y < target.height(); ++y)
    for (int x = 0; x < target.width(); ++x) {
      if (rendered.coverage.at(x, y) == 0.0) continue;
      for (int c = 0; c < 3; ++c) {
        const double d = target.at(x, y, c) - rendered.image.at(x, y, c);
        sum += d * d;
      }
    }
  return std::sqrt(sum) / static_cast<double>(n);
}

/// d(per_pixel_loss)/d(rendered image); zero where uncovered and at S = 0.
inline Image per_pixel_loss_gradient(const RenderOutput& rendered, const Image& target) {
  const double loss = per_pixel_loss(rendered, target);
  const double n = static_cast<double>(rendered.covered_count());
  Image grad(target.width(), target.height(), 3);
  if (loss == 0.0) return grad;
  const double denom = loss * n * n;  // n * sqrt(S) with sqrt(S) = loss * n
  for (int y = 0; y < target.height(); ++y)
    for (int x = 0; x < target.width(); ++x) {
      if (rendered.coverage.at(x, y) == 0.0) continue;
      for (int c = 0; c < 3; ++c)
        grad.at(x, y, c) = (rendered.image.at(x, y, c) - target.at(x, y, c)) / denom;
    }
  return grad;
}

inline constexpr double kMinEmbeddingNorm = 1e-12;

/// Cosine distance of two embedding vectors, in [0, 2].
inline double cosine_distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  detail::require_dims(a.size() == b.size(), "embedding sizes differ");
  const double na = a.norm(), nb = b.norm();
  detail::require(na > kMinEmbeddingNorm && nb > kMinEmbeddingNorm, ErrorKind::DegenerateEmbedding,
                  "embedding has (near) zero norm");
  const double cos = std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
  return 1.0 - cos;
}

/// 1 - <G(a), G(b)> / (|G(a)| |G(b)|)
inline double feature_loss(const Image& img_a, const Image& img_b, const Embedder& embedder) {
  return cosine_distance(embedder.embed(img_a), embedder.embed(img_b));
}

struct LossBreakdown {
  double per_pixel = 0.0;     // L6
  double feature = 0.0;       // L7
  double regularizer = 0.0;   // reg_weight * ||coeffs||^2
  double data = 0.0;          // lambda6 L6 + lambda7 L7, i.e. L_3D
  double total = 0.0;         // data + regularizer
};

inline double coefficient_norm_sq(const ParamVector& p) {
  return p.shape.alpha_id.squaredNorm() + p.shape.beta_exp.squaredNorm() +
         p.texture.beta_te.squaredNorm();
}

/// L_3D = lambda6 L6 + lambda7 L7, plus the optional coefficient regularizer
/// (only when `params` is given and reg_weight > 0), reported separately.
inline LossBreakdown total_3d_loss(const RenderOutput& rendered, const Image& target,
                                   const Embedder& embedder, const FitConfig& config,
                                   const ParamVector* params = nullptr) {
  LossBreakdown b;
  b.per_pixel = per_pixel_loss(rendered, target);
  b.feature = feature_loss(target, rendered.image, embedder);
  b.data = config.lambda6 * b.per_pixel + config.lambda7 * b.feature;
  if (params != nullptr && config.reg_weight > 0.0)
    b.regularizer = config.reg_weight * coefficient_norm_sq(*params);
  b.total = b.data + b.regularizer;
  return b;
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

using Objective = std::function<double(const Eigen::VectorXd&)>;

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) for each
/// requested coordinate (all when `coords` is empty). Coordinates are
/// evaluated in increasing order; with threads > 1 they are split into
/// contiguous chunks, which changes timing but not results.
inline Eigen::VectorXd numeric_gradient(const Objective& objective, const Eigen::VectorXd& x,
                                        double eps, const std::vector<Eigen::Index>& coords = {},
                                        int threads = 1) {
  detail::require(eps > 0.0 && std::isfinite(eps), ErrorKind::Argument, "eps must be positive");
  std::vector<Eigen::Index> todo = coords;
  if (todo.empty())
    for (Eigen::Index i = 0; i < x.size(); ++i) todo.push_back(i);

  Eigen::VectorXd grad = Eigen::VectorXd::Zero(x.size());
  auto probe = [&](Eigen::Index i) {
    Eigen::VectorXd xp = x;
    xp[i] = x[i] + eps;
    const double fp = objective(xp);
    xp[i] = x[i] - eps;
    const double fm = objective(xp);
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw EvaluationError(static_cast<std::size_t>(i), "objective is not finite");
    grad[i] = (fp - fm) / (2.0 * eps);
  };

  if (threads <= 1 || todo.size() < 2) {
    for (auto i : todo) probe(i);
    return grad;
  }
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), todo.size());
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t k = w; k < todo.size(); k += workers) probe(todo[k]);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return grad;
}

/// Everything needed to evaluate the fitting objective at a free vector.
struct FitProblem {
  const Image& target;
  const MorphableBasis& basis;
  const CameraIntrinsics& intrinsics;
  const Embedder& embedder;
  FitConfig config;
  double camera_distance = kDefaultCameraDistance;
  RasterOptions raster{};

  ParamVector params(const Eigen::VectorXd& free) const {
    return ParamVector::from_free(free, camera_distance);
  }

  RenderOutput render(const ParamVector& p) const {
    return render_params(basis, p, intrinsics, target.width(), target.height(), raster);
  }

  LossBreakdown breakdown(const Eigen::VectorXd& free) const {
    const ParamVector p = params(free);
    return total_3d_loss(render(p), target, embedder, config, &p);
  }

  double operator()(const Eigen::VectorXd& free) const { return breakdown(free).total; }
};

namespace detail {

/// d(edge_function(a, b, p)) with respect to a and b.
struct EdgePartials {
  Eigen::Vector2d d_a;
  Eigen::Vector2d d_b;
};

inline EdgePartials edge_partials(const Eigen::Vector2d& a, const Eigen::Vector2d& b, double px,
                                  double py) {
  return {{b.y() - py, px - b.x()}, {py - a.y(), a.x() - px}};
}

/// Partial derivatives of the nine SH basis functions with respect to the
/// (unnormalized) direction components.
inline std::array<Eigen::Vector3d, 9> sh_basis_jacobian(const Eigen::Vector3d& n) {
  const double x = n.x(), y = n.y(), z = n.z();
  return {Eigen::Vector3d(0, 0, 0),
          Eigen::Vector3d(0, sh::kY1, 0),
          Eigen::Vector3d(0, 0, sh::kY1),
          Eigen::Vector3d(sh::kY1, 0, 0),
          Eigen::Vector3d(sh::kY2 * y, sh::kY2 * x, 0),
          Eigen::Vector3d(0, sh::kY2 * z, sh::kY2 * y),
          Eigen::Vector3d(0, 0, 6.0 * sh::kY20 * z),
          Eigen::Vector3d(sh::kY2 * z, 0, sh::kY2 * x),
          Eigen::Vector3d(2.0 * sh::kY22 * x, -2.0 * sh::kY22 * y, 0)};
}

inline std::array<Eigen::Matrix3d, 3> euler_derivatives(const Pose& pose) {
  const double cp = std::cos(pose.pitch), sp = std::sin(pose.pitch);
  const double cy = std::cos(pose.yaw), sy = std::sin(pose.yaw);
  const double cr = std::cos(pose.roll), sr = std::sin(pose.roll);
  Eigen::Matrix3d rx, ry, rz, drx, dry, drz;
  rx << 1, 0, 0, 0, cp, -sp, 0, sp, cp;
  ry << cy, 0, sy, 0, 1, 0, -sy, 0, cy;
  rz << cr, -sr, 0, sr, cr, 0, 0, 0, 1;
  drx << 0, 0, 0, 0, -sp, -cp, 0, cp, -sp;
  dry << -sy, 0, cy, 0, 0, 0, -cy, 0, -sy;
  drz << -sr, -cr, 0, cr, -sr, 0, 0, 0, 0;
  return {rz * ry * drx, rz * dry * rx, drz * ry * rx};
}


/// Per-vertex adjoints of the rasterized image.
struct VertexAdjoint {
  Eigen::VectorXd d_rad;
  Eigen::MatrixX2d d_screen;
  Eigen::VectorXd d_depth;

  explicit VertexAdjoint(Eigen::Index v)
      : d_rad(Eigen::VectorXd::Zero(3 * v)),
        d_screen(Eigen::MatrixX2d::Zero(v, 2)),
        d_depth(Eigen::VectorXd::Zero(v)) {}
};

/// Forward quantities shared by the gradient passes.
struct Forward {
  ParamVector params;
  Mesh mesh;
  RenderOutput render;
  Projection proj;
  Eigen::MatrixX3d camera;

  Forward(const FitProblem& problem, const Eigen::VectorXd& free)
      : params(problem.params(free)),
        mesh(build_mesh(problem.basis, params)),
        render(rasterize(mesh, params.pose, problem.intrinsics, params.light,
                         problem.target.width(), problem.target.height(), problem.raster)),
        proj(project_points(mesh.positions, params.pose, problem.intrinsics)),
        camera(camera_space(mesh.positions, params.pose)) {}
};

/// Backpropagates d(colour) at pixel centre (px, py), interpolated over
/// triangle `t` with perspective-correct weights, to the triangle's
/// vertices. The centre need not lie inside the triangle.
inline void backprop_pixel(const Forward& fw, std::size_t t, const std::array<double, 3>& weights,
                           int px, int py, const std::array<double, 3>& g, VertexAdjoint& adj) {
  const auto& tri = fw.mesh.triangles[t];
  std::array<double, 3> g_w{};
  for (int k = 0; k < 3; ++k)
    for (int c = 0; c < 3; ++c) {
      adj.d_rad[3 * tri[k] + c] += weights[k] * g[c];
      g_w[k] += g[c] * fw.render.radiance[3 * tri[k] + c];
    }
  const double cx = px + 0.5, cy = py + 0.5;
  std::array<Eigen::Vector2d, 3> s;
  std::array<double, 3> z{};
  for (int k = 0; k < 3; ++k) {
    s[k] = fw.proj.pixels.row(tri[k]).transpose();
    z[k] = fw.proj.depth[tri[k]];
  }
  const std::array<double, 3> e{edge_function(s[1], s[2], cx, cy),
                                edge_function(s[2], s[0], cx, cy),
                                edge_function(s[0], s[1], cx, cy)};
  const double area = e[0] + e[1] + e[2];
  std::array<double, 3> lambda{}, a{};
  double a_sum = 0.0;
  for (int k = 0; k < 3; ++k) {
    lambda[k] = e[k] / area;
    a[k] = lambda[k] / z[k];
    a_sum += a[k];
  }
  // w_k = a_k / sum(a)
  double w_dot = 0.0;
  for (int k = 0; k < 3; ++k) w_dot += weights[k] * g_w[k];
  std::array<double, 3> g_lambda{};
  for (int k = 0; k < 3; ++k) {
    const double g_a = (g_w[k] - w_dot) / a_sum;
    g_lambda[k] = g_a / z[k];
    adj.d_depth[tri[k]] -= g_a * lambda[k] / (z[k] * z[k]);
  }
  // lambda_k = e_k / sum(e)
  double l_dot = 0.0;
  for (int k = 0; k < 3; ++k) l_dot += g_lambda[k] * lambda[k];
  std::array<double, 3> g_e{};
  for (int k = 0; k < 3; ++k) g_e[k] = (g_lambda[k] - l_dot) / area;
  // e_0 = edge(s1, s2), e_1 = edge(s2, s0), e_2 = edge(s0, s1)
  for (int k = 0; k < 3; ++k) {
    const int ia = (k + 1) % 3, ib = (k + 2) % 3;
    const auto part = edge_partials(s[ia], s[ib], cx, cy);
    adj.d_screen.row(tri[ia]) += g_e[k] * part.d_a.transpose();
    adj.d_screen.row(tri[ib]) += g_e[k] * part.d_b.transpose();
  }
}

/// From per-vertex adjoints to the 239 free coordinates, regularizer included.
inline Eigen::VectorXd free_gradient(const FitProblem& problem, const Forward& fw,
                                     const VertexAdjoint& adj) {
  const ParamVector& p = fw.params;
  const Mesh& mesh = fw.mesh;
  const Eigen::MatrixX3d& q = fw.camera;
  const auto& cfg = problem.config;
  const Eigen::Index v = static_cast<Eigen::Index>(mesh.vertex_count());
  const Eigen::Matrix3d rot = rotation_of(p.pose).matrix();
  const double k_scale = p.pose.scale_k;
  const double focal = problem.intrinsics.focal;

  // shading: radiance = clamp01(albedo * e), e = max(0, gamma . Y(R n)), albedo = clamp01(T)
  const Eigen::VectorXd tex_raw = synthesize_texture_unclamped(problem.basis, p.texture);
  Eigen::VectorXd d_albedo_raw = Eigen::VectorXd::Zero(3 * v);
  Eigen::VectorXd d_gamma = Eigen::VectorXd::Zero(kShDims);
  Eigen::Matrix3d d_rot = Eigen::Matrix3d::Zero();
  std::vector<Eigen::Vector3d> d_normal(static_cast<std::size_t>(v), Eigen::Vector3d::Zero());
  for (Eigen::Index i = 0; i < v; ++i) {
    const Eigen::Vector3d& n = mesh.normals[static_cast<std::size_t>(i)];
    const Eigen::Vector3d n_cam = (rot * n).normalized();
    const auto y = sh_basis(n_cam);
    double dot = 0.0;
    for (std::size_t m = 0; m < kShDims; ++m) dot += p.light.gamma[static_cast<Eigen::Index>(m)] * y[m];
    const double irr = std::max(0.0, dot);
    double d_e = 0.0;
    for (int c = 0; c < 3; ++c) {
      const double albedo = mesh.albedo[3 * i + c];
      const double rad = albedo * irr;
      if (!(rad > 0.0 && rad < 1.0)) continue;
      const double g = adj.d_rad[3 * i + c];
      const double raw = tex_raw[3 * i + c];
      if (raw > 0.0 && raw < 1.0) d_albedo_raw[3 * i + c] = g * irr;
      d_e += g * albedo;
    }
    if (!(dot > 0.0) || d_e == 0.0) continue;
    const auto jac = sh_basis_jacobian(n_cam);
    Eigen::Vector3d d_ncam = Eigen::Vector3d::Zero();
    for (std::size_t m = 0; m < kShDims; ++m) {
      const double g_y = d_e * p.light.gamma[static_cast<Eigen::Index>(m)];
      d_gamma[static_cast<Eigen::Index>(m)] += d_e * y[m];
      d_ncam += g_y * jac[m];
    }
    d_rot += d_ncam * n.transpose();
    d_normal[static_cast<std::size_t>(i)] = rot.transpose() * d_ncam;
  }

  // projection: u = f qx / qz + cx, v = f qy / qz + cy, depth = qz; q = k R x + t
  Eigen::VectorXd d_pos = Eigen::VectorXd::Zero(3 * v);
  Eigen::Vector3d d_t = Eigen::Vector3d::Zero();
  double d_logk = 0.0;
  for (Eigen::Index i = 0; i < v; ++i) {
    const double qx = q(i, 0), qy = q(i, 1), qz = q(i, 2);
    const double gu = adj.d_screen(i, 0), gv = adj.d_screen(i, 1);
    const Eigen::Vector3d g_q(gu * focal / qz, gv * focal / qz,
                              adj.d_depth[i] - (gu * focal * qx + gv * focal * qy) / (qz * qz));
    if (g_q.isZero(0.0)) continue;
    const Eigen::Vector3d x = mesh.positions.segment<3>(3 * i);
    d_pos.segment<3>(3 * i) += k_scale * rot.transpose() * g_q;
    d_rot += k_scale * g_q * x.transpose();
    d_t += g_q;
    d_logk += g_q.dot(k_scale * rot * x);
  }

  // vertex normals: n = m / |m|, m = sum of incident face cross products
  std::vector<Eigen::Vector3d> d_m(static_cast<std::size_t>(v), Eigen::Vector3d::Zero());
  {
    std::vector<Eigen::Vector3d> m_sum(static_cast<std::size_t>(v), Eigen::Vector3d::Zero());
    auto vert = [&](std::uint32_t idx) -> Eigen::Vector3d { return mesh.positions.segment<3>(3 * idx); };
    for (const auto& tri : mesh.triangles) {
      const Eigen::Vector3d f = (vert(tri[1]) - vert(tri[0])).cross(vert(tri[2]) - vert(tri[0]));
      for (auto idx : tri) m_sum[idx] += f;
    }
    for (Eigen::Index i = 0; i < v; ++i) {
      const auto si = static_cast<std::size_t>(i);
      const double len = m_sum[si].norm();
      if (!(len > 1e-300)) continue;
      const Eigen::Vector3d& n = mesh.normals[si];
      d_m[si] = (d_normal[si] - n * n.dot(d_normal[si])) / len;
    }
    for (const auto& tri : mesh.triangles) {
      const Eigen::Vector3d g_f = d_m[tri[0]] + d_m[tri[1]] + d_m[tri[2]];
      if (g_f.isZero(0.0)) continue;
      const Eigen::Vector3d e1 = vert(tri[1]) - vert(tri[0]);
      const Eigen::Vector3d e2 = vert(tri[2]) - vert(tri[0]);
      const Eigen::Vector3d g_e1 = e2.cross(g_f);
      const Eigen::Vector3d g_e2 = g_f.cross(e1);
      d_pos.segment<3>(3 * tri[1]) += g_e1;
      d_pos.segment<3>(3 * tri[2]) += g_e2;
      d_pos.segment<3>(3 * tri[0]) -= g_e1 + g_e2;
    }
  }

  const auto d_euler = euler_derivatives(p.pose);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(layout::kEnd);
  grad.segment(layout::kId, kIdDims) = problem.basis.basis_id.transpose() * d_pos;
  grad.segment(layout::kExp, kExpDims) = problem.basis.basis_exp.transpose() * d_pos;
  grad.segment(layout::kTex, kTexDims) = problem.basis.basis_tex.transpose() * d_albedo_raw;
  grad.segment(layout::kLight, kShDims) = d_gamma;
  grad[layout::kPitch] = (d_rot.array() * d_euler[0].array()).sum();
  grad[layout::kYaw] = (d_rot.array() * d_euler[1].array()).sum();
  grad[layout::kRoll] = (d_rot.array() * d_euler[2].array()).sum();
  grad[layout::kLogScale] = d_logk;
  grad[layout::kTx] = d_t.x();
  grad[layout::kTy] = d_t.y();
  if (cfg.reg_weight > 0.0) {
    grad.segment(layout::kId, kIdDims) += 2.0 * cfg.reg_weight * p.shape.alpha_id;
    grad.segment(layout::kExp, kExpDims) += 2.0 * cfg.reg_weight * p.shape.beta_exp;
    grad.segment(layout::kTex, kTexDims) += 2.0 * cfg.reg_weight * p.texture.beta_te;
  }
  return grad;
}

/// lambda7 * d(feature loss)/d(image), or nullopt without a pullback.
inline std::optional<Image> feature_adjoint(const FitProblem& problem, const Image& image) {
  const Eigen::VectorXd ea = problem.embedder.embed(problem.target);
  const Eigen::VectorXd eb = problem.embedder.embed(image);
  const double na = ea.norm(), nb = eb.norm();
  detail::require(na > kMinEmbeddingNorm && nb > kMinEmbeddingNorm,
                  ErrorKind::DegenerateEmbedding, "embedding has (near) zero norm");
  const double cos = ea.dot(eb) / (na * nb);
  const Eigen::VectorXd d_emb = -(ea / (na * nb) - cos * eb / (nb * nb));
  auto feat = problem.embedder.pullback(image, d_emb);
  if (feat)
    for (double& g : feat->values()) g *= problem.config.lambda7;
  return feat;
}

/// Mesh edges on the screen-space outline: the two neighbouring triangles
/// face opposite ways, or there is only one.
struct OutlineEdge {
  std::uint32_t a, b;
  std::array<std::size_t, 2> tris;
  int count;
};

inline std::vector<OutlineEdge> outline_edges(const Mesh& mesh, const Projection& proj) {
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::vector<std::size_t>> edges;
  for (std::size_t t = 0; t < mesh.triangles.size(); ++t)
    for (int k = 0; k < 3; ++k) {
      const auto a = mesh.triangles[t][static_cast<std::size_t>(k)];
      const auto b = mesh.triangles[t][static_cast<std::size_t>((k + 1) % 3)];
      edges[{std::min(a, b), std::max(a, b)}].push_back(t);
    }
  auto signed_area = [&](std::size_t t) {
    const auto& tri = mesh.triangles[t];
    const Eigen::Vector2d c = proj.pixels.row(tri[2]).transpose();
    return edge_function(proj.pixels.row(tri[0]).transpose(), proj.pixels.row(tri[1]).transpose(),
                         c.x(), c.y());
  };
  std::vector<OutlineEdge> out;
  for (const auto& [key, tris] : edges) {
    if (tris.size() > 2) continue;
    if (tris.size() == 2 && !(signed_area(tris[0]) * signed_area(tris[1]) < 0.0)) continue;
    out.push_back({key.first, key.second, {tris[0], tris.size() == 2 ? tris[1] : tris[0]},
                   static_cast<int>(tris.size())});
  }
  return out;
}

}  // namespace detail

/// Closed-form gradient of the fitting objective with respect to all 239
/// free coordinates, holding visibility fixed: each covered pixel keeps its
/// triangle, and coverage changes at silhouettes contribute nothing. On the
/// texture and lighting blocks this is the exact gradient (geometry does not
/// move); on shape and pose it is the gradient of the smooth interior part.
/// Returns nullopt when the embedder offers no pullback.
inline std::optional<Eigen::VectorXd> analytic_gradient(const FitProblem& problem,
                                                        const Eigen::VectorXd& free) {
  const detail::Forward fw(problem, free);
  const int width = problem.target.width(), height = problem.target.height();
  Image d_image = per_pixel_loss_gradient(fw.render, problem.target);
  for (double& g : d_image.values()) g *= problem.config.lambda6;
  auto d_feature = detail::feature_adjoint(problem, fw.render.image);
  if (!d_feature) return std::nullopt;
  {
    auto dst = d_image.values();
    auto src = d_feature->values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
  detail::VertexAdjoint adj(static_cast<Eigen::Index>(fw.mesh.vertex_count()));
  for (int py = 0; py < height; ++py)
    for (int px = 0; px < width; ++px) {
      const Fragment& f = fw.render.fragments[static_cast<std::size_t>(py) * width + px];
      if (f.triangle < 0) continue;
      detail::backprop_pixel(fw, static_cast<std::size_t>(f.triangle), f.weights, px, py,
                             {d_image.at(px, py, 0), d_image.at(px, py, 1), d_image.at(px, py, 2)},
                             adj);
    }
  return detail::free_gradient(problem, fw, adj);
}

namespace detail {

/// Per-pixel weights and colours behind soft_objective.
struct SoftCoverage {
  std::vector<double> alpha, d_alpha_dd, dist;
  std::vector<int> nearest;
  std::vector<std::array<double, 3>> colour, weights;
  std::vector<std::array<bool, 3>> live;
  std::vector<long> source;
  std::vector<OutlineEdge> outline;
};

inline SoftCoverage soft_coverage(const Forward& fw, int width, int height, double width_px) {
  SoftCoverage sc;
  auto& [alpha, d_alpha_dd, dist, nearest, colour, weights, live, source, outline] = sc;
  const std::size_t n_px = static_cast<std::size_t>(width) * height;
  alpha.assign(n_px, 0.0);
  d_alpha_dd.assign(n_px, 0.0);
  nearest.assign(n_px, -1);
  dist.assign(n_px, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n_px; ++i)
    if (fw.render.fragments[i].triangle >= 0) alpha[i] = 1.0;

  if (width_px > 0.0) outline = outline_edges(fw.mesh, fw.proj);
  auto screen = [&](std::uint32_t i) -> Eigen::Vector2d { return fw.proj.pixels.row(i).transpose(); };
  for (std::size_t s = 0; s < outline.size(); ++s) {
    const Eigen::Vector2d a = screen(outline[s].a), b = screen(outline[s].b);
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x(), b.x()) - width_px)));
    const int x1 = std::min(width - 1, static_cast<int>(std::ceil(std::max(a.x(), b.x()) + width_px)));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y(), b.y()) - width_px)));
    const int y1 = std::min(height - 1, static_cast<int>(std::ceil(std::max(a.y(), b.y()) + width_px)));
    for (int py = y0; py <= y1; ++py)
      for (int px = x0; px <= x1; ++px) {
        const Eigen::Vector2d c(px + 0.5, py + 0.5);
        const Eigen::Vector2d ab = b - a;
        const double u = std::clamp((c - a).dot(ab) / std::max(ab.squaredNorm(), 1e-300), 0.0, 1.0);
        const double d = (c - (a + u * ab)).norm();
        const std::size_t i = static_cast<std::size_t>(py) * width + px;
        if (d < dist[i]) {
          dist[i] = d;
          nearest[i] = static_cast<int>(s);
        }
      }
  }

  // colour of each pixel that counts, with the triangle it comes from
  colour.assign(n_px, {});
  weights.assign(n_px, {});
  live.assign(n_px, {});
  source.assign(n_px, -1);
  for (int py = 0; py < height; ++py)
    for (int px = 0; px < width; ++px) {
      const std::size_t i = static_cast<std::size_t>(py) * width + px;
      const Fragment& f = fw.render.fragments[i];
      const bool covered = f.triangle >= 0;
      if (covered) {
        source[i] = f.triangle;
        weights[i] = f.weights;
        for (int c = 0; c < 3; ++c) {
          colour[i][c] = fw.render.image.at(px, py, c);
          live[i][c] = true;
        }
      }
      if (nearest[i] < 0 || !(dist[i] < width_px)) continue;
      const double s = (covered ? dist[i] : -dist[i]) / width_px;
      const double t = 0.5 * (s + 1.0);
      alpha[i] = t * t * (3.0 - 2.0 * t);
      d_alpha_dd[i] = (covered ? 1.0 : -1.0) * 3.0 * t * (1.0 - t) / width_px;
      if (covered) continue;
      // extrapolate from whichever triangle of the edge is nearer at this pixel
      const auto& e = outline[static_cast<std::size_t>(nearest[i])];
      double best = std::numeric_limits<double>::infinity();
      for (int k = 0; k < e.count; ++k) {
        const auto& tri = fw.mesh.triangles[e.tris[k]];
        const Eigen::Vector2d s0 = screen(tri[0]), s1 = screen(tri[1]), s2 = screen(tri[2]);
        const double area = edge_function(s0, s1, s2.x(), s2.y());
        if (area == 0.0) continue;
        const double cx = px + 0.5, cy = py + 0.5;
        const std::array<double, 3> lam{edge_function(s1, s2, cx, cy) / area,
                                        edge_function(s2, s0, cx, cy) / area,
                                        edge_function(s0, s1, cx, cy) / area};
        double inv = 0.0;
        for (int j = 0; j < 3; ++j) inv += lam[j] / fw.proj.depth[tri[j]];
        if (!(inv > 0.0) || !(1.0 / inv < best)) continue;
        best = 1.0 / inv;
        source[i] = static_cast<long>(e.tris[k]);
        for (int j = 0; j < 3; ++j) weights[i][j] = lam[j] / fw.proj.depth[tri[j]] / inv;
      }
      if (source[i] < 0) {
        alpha[i] = 0.0;
        d_alpha_dd[i] = 0.0;
        continue;
      }
      const auto& tri = fw.mesh.triangles[static_cast<std::size_t>(source[i])];
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int j = 0; j < 3; ++j) acc += weights[i][j] * fw.render.radiance[3 * tri[j] + c];
        colour[i][c] = std::clamp(acc, 0.0, 1.0);
        live[i][c] = acc > 0.0 && acc < 1.0;
      }
    }

  return sc;
}

}  // namespace detail

/// Per-pixel, per-channel residuals sqrt(alpha) (C - T) / sum(alpha) of
/// soft_objective, zero where alpha is zero. Their norm is the soft L6.
inline Eigen::VectorXd soft_residuals(const FitProblem& problem, const Eigen::VectorXd& free,
                                      double width_px) {
  const detail::Forward fw(problem, free);
  const Image& target = problem.target;
  const int width = target.width(), height = target.height();
  const auto sc = detail::soft_coverage(fw, width, height, width_px);
  Eigen::VectorXd r = Eigen::VectorXd::Zero(3 * static_cast<Eigen::Index>(width) * height);
  double sum_alpha = 0.0;
  for (int py = 0; py < height; ++py)
    for (int px = 0; px < width; ++px) {
      const std::size_t i = static_cast<std::size_t>(py) * width + px;
      if (!(sc.alpha[i] > 0.0)) continue;
      const double w = std::sqrt(sc.alpha[i]);
      for (int c = 0; c < 3; ++c)
        r[3 * static_cast<Eigen::Index>(i) + c] = w * (sc.colour[i][c] - target.at(px, py, c));
      sum_alpha += sc.alpha[i];
    }
  detail::require(sum_alpha > 0.0, ErrorKind::DegenerateRender, "render covers no pixels");
  return r / sum_alpha;
}

/// Value (and gradient) of the objective with soft silhouettes.
struct SoftEvaluation {
  double value = 0.0;
  /// The ordinary objective at the same point.
  LossBreakdown hard;
  std::optional<Eigen::VectorXd> gradient;
};

/// The fitting objective with coverage smoothed across the face outline.
/// Each pixel within `width` pixels of an outline edge gets a weight
/// alpha = smoothstep(+-d / width), d the distance to the nearest outline
/// segment, positive for covered pixels. Uncovered pixels in that band take
/// the colour extrapolated from the nearer triangle of that edge. Then
///   L6 = sqrt(sum alpha |C - T|^2) / sum alpha,  L7 on the image alpha C.
/// At width 0 this is the ordinary objective. Unlike that one it is
/// continuous when the outline crosses pixel centres, and the gradient is
/// exact wherever the nearest segment and the visible triangles do not
/// change. Boundaries between two surfaces are not smoothed.
inline SoftEvaluation soft_objective(const FitProblem& problem, const Eigen::VectorXd& free,
                                     double width_px, bool want_gradient) {
  const detail::Forward fw(problem, free);
  const auto& cfg = problem.config;
  const Image& target = problem.target;
  const int width = target.width(), height = target.height();
  SoftEvaluation out;
  out.hard = total_3d_loss(fw.render, target, problem.embedder, cfg, &fw.params);
  const auto sc = detail::soft_coverage(fw, width, height, width_px);
  const auto& [alpha, d_alpha_dd, dist, nearest, colour, weights, live, source, outline] = sc;
  auto screen = [&](std::uint32_t i) -> Eigen::Vector2d { return fw.proj.pixels.row(i).transpose(); };

  double sum_sq = 0.0, sum_alpha = 0.0;
  Image soft(width, height, 3);
  for (int py = 0; py < height; ++py)
    for (int px = 0; px < width; ++px) {
      const std::size_t i = static_cast<std::size_t>(py) * width + px;
      if (!(alpha[i] > 0.0)) continue;
      double e = 0.0;
      for (int c = 0; c < 3; ++c) {
        const double diff = colour[i][c] - target.at(px, py, c);
        e += diff * diff;
        soft.at(px, py, c) = alpha[i] * colour[i][c];
      }
      sum_sq += alpha[i] * e;
      sum_alpha += alpha[i];
    }
  detail::require(sum_alpha > 0.0, ErrorKind::DegenerateRender, "render covers no pixels");
  const double root = std::sqrt(sum_sq);
  const double l6 = root / sum_alpha;
  const double l7 = feature_loss(target, soft, problem.embedder);
  out.value = cfg.lambda6 * l6 + cfg.lambda7 * l7 + out.hard.regularizer;
  if (!want_gradient) return out;

  auto d_feature = detail::feature_adjoint(problem, soft);
  if (!d_feature) return out;
  detail::VertexAdjoint adj(static_cast<Eigen::Index>(fw.mesh.vertex_count()));
  for (int py = 0; py < height; ++py)
    for (int px = 0; px < width; ++px) {
      const std::size_t i = static_cast<std::size_t>(py) * width + px;
      if (!(alpha[i] > 0.0)) continue;
      double e = 0.0, g_alpha = 0.0;
      std::array<double, 3> g{};
      for (int c = 0; c < 3; ++c) {
        const double diff = colour[i][c] - target.at(px, py, c);
        e += diff * diff;
        const double gf = d_feature->at(px, py, c);
        g_alpha += gf * colour[i][c];
        g[c] = alpha[i] * gf;
        if (root > 0.0) g[c] += cfg.lambda6 * alpha[i] * diff / (root * sum_alpha);
        if (!live[i][c]) g[c] = 0.0;
      }
      if (root > 0.0) g_alpha += cfg.lambda6 * (e / (2.0 * root * sum_alpha) - root / (sum_alpha * sum_alpha));
      detail::backprop_pixel(fw, static_cast<std::size_t>(source[i]), weights[i], px, py, g, adj);

      // alpha = smoothstep(+-d / width), d = distance to segment (a, b)
      const double g_d = g_alpha * d_alpha_dd[i];
      if (g_d == 0.0) continue;
      const auto& edge = outline[static_cast<std::size_t>(nearest[i])];
      const Eigen::Vector2d a = screen(edge.a), b = screen(edge.b), ab = b - a;
      const Eigen::Vector2d c(px + 0.5, py + 0.5);
      const double len2 = ab.squaredNorm();
      const double u = len2 > 0.0 ? (c - a).dot(ab) / len2 : 0.0;
      if (!(dist[i] > 0.0)) continue;
      if (u <= 0.0 || u >= 1.0) {
        const std::uint32_t end = u <= 0.0 ? edge.a : edge.b;
        const Eigen::Vector2d to = (screen(end) - c) / dist[i];
        adj.d_screen.row(end) += g_d * to.transpose();
      } else {
        // d = |edge(a, b, c)| / |b - a|
        const double len = std::sqrt(len2);
        const double ef = detail::edge_function(a, b, c.x(), c.y());
        const double sgn = ef >= 0.0 ? 1.0 : -1.0;
        const auto part = detail::edge_partials(a, b, c.x(), c.y());
        const Eigen::Vector2d dlen_db = ab / len;
        const Eigen::Vector2d dd_da = sgn * part.d_a / len + dist[i] / len * dlen_db;
        const Eigen::Vector2d dd_db = sgn * part.d_b / len - dist[i] / len * dlen_db;
        adj.d_screen.row(edge.a) += g_d * dd_da.transpose();
        adj.d_screen.row(edge.b) += g_d * dd_db.transpose();
      }
    }
  out.gradient = detail::free_gradient(problem, fw, adj);
  return out;
}

inline std::vector<Eigen::Index> block_range(Eigen::Index begin, Eigen::Index end) {
  std::vector<Eigen::Index> out;
  for (Eigen::Index i = begin; i < end; ++i) out.push_back(i);
  return out;
}

/// Coordinates whose closed-form gradient is exact: texture and lighting.
inline std::vector<Eigen::Index> appearance_coords() {
  return block_range(layout::kTex, layout::kPose);
}

/// Shape and pose coordinates, where visibility can change.
inline std::vector<Eigen::Index> geometry_coords() {
  auto out = block_range(layout::kId, layout::kTex);
  for (auto i : block_range(layout::kPose, layout::kEnd)) out.push_back(i);
  return out;
}

/// Gradient used by fit(). A positive `soft_width` differentiates
/// soft_objective at that band width instead of the plain objective.
inline Eigen::VectorXd fit_gradient(const FitProblem& problem, const Eigen::VectorXd& free,
                                    double soft_width = 0.0) {
  const auto& cfg = problem.config;
  Objective objective = problem;
  if (soft_width > 0.0)
    objective = [&problem, soft_width](const Eigen::VectorXd& y) {
      return soft_objective(problem, y, soft_width, false).value;
    };
  if (cfg.gradient != GradientMode::Numeric) {
    auto g = soft_width > 0.0 ? soft_objective(problem, free, soft_width, true).gradient
                              : analytic_gradient(problem, free);
    if (g) {
      if (cfg.gradient == GradientMode::Hybrid) {
        const auto geometry = geometry_coords();
        const Eigen::VectorXd num =
            numeric_gradient(objective, free, cfg.fd_epsilon, geometry, cfg.threads);
        for (auto i : geometry) (*g)[i] = num[i];
      }
      return *g;
    }
  }
  return numeric_gradient(objective, free, cfg.fd_epsilon, {}, cfg.threads);
}

/// Band width of the soft outline at iteration `it`: shrinks geometrically
/// from soft_edge_width to 2% of it over the first soft_edge_phase of the
/// budget, then 0. Always 0 under backtracking.
inline double soft_edge_width_at(const FitConfig& c, int it) {
  if (c.backtracking || !(c.soft_edge_width > 0.0)) return 0.0;
  const double t = static_cast<double>(it) / std::max(1, c.max_iters);
  if (!(t < c.soft_edge_phase)) return 0.0;
  return c.soft_edge_width * std::pow(0.02, t / c.soft_edge_phase);
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

struct FitReport {
  int iterations = 0;
  std::vector<double> loss_trace;
  LossBreakdown initial_breakdown;
  /// Breakdown at the returned (best) iterate.
  LossBreakdown term_breakdown;
  int best_iteration = 0;
  std::string termination;
  double gradient_norm = 0.0;
  double wall_ms = 0.0;
};

struct FitResult {
  ParamVector params;
  FitReport report;
};

inline nlohmann::json to_json(const LossBreakdown& b) {
  return {{"per_pixel", b.per_pixel}, {"feature", b.feature}, {"regularizer", b.regularizer},
          {"l3d", b.data},            {"total", b.total}};
}

inline nlohmann::json to_json(const FitReport& r) {
  return {{"iterations", r.iterations},
          {"loss_trace", r.loss_trace},
          {"initial_breakdown", to_json(r.initial_breakdown)},
          {"term_breakdown", to_json(r.term_breakdown)},
          {"best_iteration", r.best_iteration},
          {"termination", r.termination},
          {"gradient_norm", r.gradient_norm},
          {"wall_ms", r.wall_ms}};
}

inline Eigen::VectorXd block_multipliers(const FitConfig& c) {
  Eigen::VectorXd m(layout::kEnd);
  m.segment(layout::kId, kIdDims + kExpDims).setConstant(c.shape_step);
  m.segment(layout::kTex, kTexDims).setConstant(c.texture_step);
  m.segment(layout::kLight, kShDims).setConstant(c.light_step);
  m.segment(layout::kPose, kPoseDims).setConstant(c.pose_step);
  return m;
}

/// Minimizes L_3D (plus the optional regularizer) over the 239 free
/// coordinates. loss_trace holds the objective at the start and after every
/// iteration; the returned parameters are the best iterate seen. Without
/// backtracking, steps follow the soft-outline objective for the first part
/// of the budget and the trace may rise; with it, every accepted step is
/// non-increasing in the plain objective.
inline FitResult fit(const Image& target, const MorphableBasis& basis,
                     const CameraIntrinsics& intrinsics, const ParamVector& init,
                     const FitConfig& config, const Embedder& embedder) {
  validate(config);
  detail::require_dims(target.channels() == 3, "target must be RGB");
  const auto start = std::chrono::steady_clock::now();
  FitProblem problem{target, basis, intrinsics, embedder, config, init.pose.translation.z()};

  FitResult result;
  FitReport& report = result.report;
  Eigen::VectorXd x = init.to_free();
  LossBreakdown current = problem.breakdown(x);
  report.initial_breakdown = current;
  report.loss_trace.push_back(current.total);
  const double initial = current.total;
  const Eigen::VectorXd mult = block_multipliers(config);

  Eigen::VectorXd best_x = x;
  LossBreakdown best = current;
  Eigen::VectorXd velocity = Eigen::VectorXd::Zero(x.size());
  Eigen::VectorXd second = Eigen::VectorXd::Zero(x.size());
  double scale = 1.0;  // backtracking factor

  // A candidate that leaves the camera or the raster counts as infinitely bad.
  auto evaluate = [&](const Eigen::VectorXd& y) -> std::optional<LossBreakdown> {
    try {
      return problem.breakdown(y);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::BehindCamera || e.kind() == ErrorKind::DegenerateRender ||
          e.kind() == ErrorKind::DegenerateEmbedding)
        return std::nullopt;
      throw;
    }
  };

  report.termination = "iteration budget";
  for (int it = 0; it < config.max_iters; ++it) {
    if (current.total <= config.loss_tol) {
      report.gradient_norm = analytic_gradient(problem, x).value_or(Eigen::VectorXd::Zero(1)).norm();
      report.termination = "converged";
      break;
    }
    const double width = soft_edge_width_at(config, it);
    const Eigen::VectorXd grad = fit_gradient(problem, x, width);
    report.gradient_norm = grad.norm();
    if (report.gradient_norm <= config.gradient_tol) {
      report.termination = "converged";
      break;
    }

    const double decay =
        std::pow(config.final_step_fraction, static_cast<double>(it) / std::max(1, config.max_iters));
    const double lr = config.step_size * decay;
    Eigen::VectorXd step;
    if (config.optimizer == Optimizer::Adam) {
      velocity = config.momentum * velocity + (1.0 - config.momentum) * grad;
      second = config.rms_decay * second + (1.0 - config.rms_decay) * grad.cwiseAbs2();
      const double c1 = 1.0 - std::pow(config.momentum, it + 1);
      const double c2 = 1.0 - std::pow(config.rms_decay, it + 1);
      const Eigen::ArrayXd denom = (second.array() / c2).sqrt() + 1e-12;
      step = -lr * (mult.array() * (velocity.array() / c1) / denom).matrix();
    } else {
      velocity = config.momentum * velocity - lr * mult.cwiseProduct(grad);
      step = velocity;
    }

    std::optional<LossBreakdown> next = evaluate(x + scale * step);
    if (config.backtracking) {
      int halvings = 0;
      while ((!next || !(next->total <= current.total)) && halvings < 40) {
        scale *= 0.5;
        next = evaluate(x + scale * step);
        ++halvings;
      }
      if (!next || !(next->total <= current.total)) {
        report.termination = "converged";
        break;
      }
      if (halvings == 0) scale = std::min(1.0, scale * 1.25);
    } else if (!next) {
      throw DivergenceError("step left the valid parameter region", report.loss_trace);
    }

    if (!std::isfinite(next->total) || next->total > config.divergence_factor * initial) {
      report.loss_trace.push_back(next->total);
      throw DivergenceError("loss " + std::to_string(next->total) + " exceeds " +
                                std::to_string(config.divergence_factor) + "x the initial loss",
                            report.loss_trace);
    }
    const double change = std::abs(current.total - next->total) / std::max(current.total, 1e-300);
    x += scale * step;
    current = *next;
    report.loss_trace.push_back(current.total);
    report.iterations = it + 1;
    if (current.total < best.total) {
      best = current;
      best_x = x;
      report.best_iteration = it + 1;
    }
    if (width == 0.0 && change < config.convergence_tol) {
      report.termination = "converged";
      break;
    }
  }
  report.term_breakdown = best;
  result.params = report.iterations == 0 || best_x == init.to_free() ? init : problem.params(best_x);
  report.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace occface
