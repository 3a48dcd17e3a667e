#include <gtest/gtest.h>

#include "oracles.hpp"
#include "support.hpp"

using namespace occface;

namespace {

// Camera that maps (x, y, 1) to pixel (x, y) exactly.
const CameraIntrinsics kUnitCam{1.0, {0.0, 0.0}};

Pose unit_pose() {
  Pose p;
  p.translation = {0, 0, 0};
  return p;
}

Mesh flat_mesh(const std::vector<Eigen::Vector3d>& pts, std::vector<Triangle> tris,
               double albedo = 0.5) {
  Mesh m;
  m.positions.resize(static_cast<Eigen::Index>(3 * pts.size()));
  for (std::size_t i = 0; i < pts.size(); ++i)
    m.positions.segment<3>(static_cast<Eigen::Index>(3 * i)) = pts[i];
  m.albedo = Eigen::VectorXd::Constant(m.positions.size(), albedo);
  m.normals.assign(pts.size(), Eigen::Vector3d(0, 0, -1));
  m.triangles = std::move(tris);
  return m;
}

double grid_coord(Rng& rng, int size) {
  // half the vertices land on pixel centres or pixel edges to force ties
  const double u = rng.uniform(-2.0, size + 2.0);
  const auto mode = rng.next() % 3;
  if (mode == 0) return std::floor(u) + 0.5;
  if (mode == 1) return std::floor(u);
  return u;
}

}  // namespace

TEST(Normals, RegularTetrahedronPointsOutward) {
  const std::vector<Eigen::Vector3d> p{{1, 1, 1}, {1, -1, -1}, {-1, 1, -1}, {-1, -1, 1}};
  Eigen::VectorXd pos(12);
  for (int i = 0; i < 4; ++i) pos.segment<3>(3 * i) = p[static_cast<std::size_t>(i)];
  const std::vector<Triangle> tris{{0, 1, 2}, {0, 3, 1}, {0, 2, 3}, {1, 3, 2}};
  const auto n = compute_normals(pos, tris);
  for (int i = 0; i < 4; ++i)
    EXPECT_LE((n[static_cast<std::size_t>(i)] - p[static_cast<std::size_t>(i)] / std::sqrt(3.0))
                  .cwiseAbs()
                  .maxCoeff(),
              1e-15);
}

TEST(Normals, FlatSquareSharesPlaneNormal) {
  Eigen::VectorXd pos(12);
  pos << 0, 0, 0, 1, 0, 0, 1, 1, 0, 0, 1, 0;
  const auto n = compute_normals(pos, {{0, 1, 2}, {0, 2, 3}});
  for (const auto& v : n) EXPECT_EQ(v, Eigen::Vector3d(0, 0, 1));
}

TEST(Normals, IndependentOfTriangleOrderAndRotation) {
  const auto basis = make_synthetic_basis(30, 2);
  auto tris = basis.triangles;
  const auto a = compute_normals(basis.mean_shape, tris);
  std::reverse(tris.begin(), tris.end());
  for (auto& t : tris) std::rotate(t.begin(), t.begin() + 1, t.end());
  EXPECT_EQ(compute_normals(basis.mean_shape, tris), a);
}

TEST(Normals, ZeroAreaTriangleNamesTheTriangle) {
  Eigen::VectorXd pos(12);
  pos << 0, 0, 0, 1, 0, 0, 2, 0, 0, 0, 1, 0;
  try {
    compute_normals(pos, {{0, 1, 3}, {0, 1, 2}});
    FAIL();
  } catch (const GeometryError& e) {
    EXPECT_EQ(e.triangle(), 1u);
  }
}

TEST(Rasterize, SingleTriangleMatchesBruteForce) {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    std::array<Eigen::Vector2d, 3> v;
    for (auto& p : v) p = {grid_coord(rng, 8), grid_coord(rng, 8)};
    const auto mesh = flat_mesh({{v[0].x(), v[0].y(), 1}, {v[1].x(), v[1].y(), 1},
                                 {v[2].x(), v[2].y(), 1}},
                                {{0, 1, 2}});
    const auto out = rasterize(mesh, unit_pose(), kUnitCam, unit_ambient(), 8, 8);
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        ASSERT_EQ(out.coverage.at(x, y) == 1.0, oracle::covers(v, x + 0.5, y + 0.5))
            << "trial " << trial << " pixel " << x << "," << y;
  }
}

TEST(Rasterize, SharedEdgeCoversEachCentreOnce) {
  // a square split along its diagonal, with vertices on pixel centres so
  // many centres lie exactly on edges: every centre is claimed by at most one
  const auto mesh = flat_mesh({{1.5, 1.5, 1}, {6.5, 1.5, 1}, {6.5, 6.5, 1}, {1.5, 6.5, 1}},
                              {{0, 1, 2}, {0, 2, 3}});
  Mesh a = mesh, b = mesh;
  a.triangles = {mesh.triangles[0]};
  b.triangles = {mesh.triangles[1]};
  const auto ra = rasterize(a, unit_pose(), kUnitCam, unit_ambient(), 8, 8);
  const auto rb = rasterize(b, unit_pose(), kUnitCam, unit_ambient(), 8, 8);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      const bool inside = x >= 1 && x <= 6 && y >= 1 && y <= 6;
      const double total = ra.coverage.at(x, y) + rb.coverage.at(x, y);
      // the square's own top and left edges are kept, bottom and right dropped
      const bool want = inside && x <= 5 && y <= 5;
      EXPECT_EQ(total, want ? 1.0 : 0.0) << x << "," << y;
    }
}

TEST(Rasterize, NearerDuplicateWinsEveryContestedPixel) {
  // same screen triangle at two depths; positions scale with depth so the
  // projections coincide
  auto tri = [](double z) {
    return std::vector<Eigen::Vector3d>{{1 * z, 1 * z, z}, {14 * z, 2 * z, z}, {5 * z, 15 * z, z}};
  };
  auto far = tri(3.0), near = tri(2.0);
  std::vector<Eigen::Vector3d> pts = far;
  pts.insert(pts.end(), near.begin(), near.end());
  for (const auto& order : {std::vector<Triangle>{{0, 1, 2}, {3, 4, 5}},
                            std::vector<Triangle>{{3, 4, 5}, {0, 1, 2}}}) {
    auto mesh = flat_mesh(pts, order);
    for (int i = 3; i < 6; ++i) mesh.albedo.segment<3>(3 * i).setConstant(0.9);
    for (int i = 0; i < 3; ++i) mesh.albedo.segment<3>(3 * i).setConstant(0.1);
    const auto out = rasterize(mesh, unit_pose(), kUnitCam, unit_ambient(), 16, 16);
    ASSERT_GT(out.covered_count(), 20u);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        if (out.coverage.at(x, y) == 0.0) continue;
        EXPECT_NEAR(out.depth.at(x, y), 2.0, 1e-12);
        EXPECT_NEAR(out.image.at(x, y, 0), 0.9, 1e-12);
      }
  }
}

TEST(Rasterize, EmptyMeshIsBlank) {
  const auto mesh = flat_mesh({{1, 1, 1}}, {});
  const auto out = rasterize(mesh, unit_pose(), kUnitCam, unit_ambient(), 5, 4);
  EXPECT_EQ(out.covered_count(), 0u);
  for (double v : out.image.values()) EXPECT_EQ(v, 0.0);
  for (double d : out.depth.values()) EXPECT_TRUE(std::isinf(d));
}

TEST(Rasterize, ZeroSizeRasterIsArgumentError) {
  const auto mesh = flat_mesh({{1, 1, 1}}, {});
  try {
    rasterize(mesh, unit_pose(), kUnitCam, unit_ambient(), 0, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Argument);
  }
}

TEST(Rasterize, PerspectiveCorrectColourMatchesRayCast) {
  // a slanted triangle with distinct vertex colours; the colour at a pixel
  // centre must equal the barycentric blend at the 3D point the pixel's ray hits
  const std::vector<Eigen::Vector3d> p{{-1.0, -1.0, 2.0}, {1.5, -0.5, 6.0}, {-0.5, 1.5, 4.0}};
  auto mesh = flat_mesh(p, {{0, 1, 2}});
  mesh.albedo << 1, 0, 0, 0, 1, 0, 0, 0, 1;
  const CameraIntrinsics cam{20.0, {16.0, 16.0}};
  const auto out = rasterize(mesh, unit_pose(), cam, unit_ambient(), 32, 32);
  ASSERT_GT(out.covered_count(), 30u);
  const Eigen::Vector3d e1 = p[1] - p[0], e2 = p[2] - p[0];
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      if (out.coverage.at(x, y) == 0.0) continue;
      const Eigen::Vector3d dir((x + 0.5 - 16.0) / 20.0, (y + 0.5 - 16.0) / 20.0, 1.0);
      // solve p0 + s e1 + t e2 = r dir
      Eigen::Matrix3d a;
      a << e1, e2, -dir;
      const Eigen::Vector3d st = a.colPivHouseholderQr().solve(-p[0]);
      const double w1 = st[0], w2 = st[1], w0 = 1.0 - w1 - w2;
      EXPECT_NEAR(out.image.at(x, y, 0), w0, 1e-9);
      EXPECT_NEAR(out.image.at(x, y, 1), w1, 1e-9);
      EXPECT_NEAR(out.image.at(x, y, 2), w2, 1e-9);
      EXPECT_NEAR(out.depth.at(x, y), st[2], 1e-9);
    }
}

TEST(Rasterize, BackFaceCullingIsOptional) {
  // clockwise in camera space when seen from the origin
  const auto mesh = flat_mesh({{1, 1, 1}, {6, 1, 1}, {1, 6, 1}}, {{0, 1, 2}});
  RasterOptions cull;
  cull.cull_back_faces = true;
  const auto plain = rasterize(mesh, unit_pose(), kUnitCam, unit_ambient(), 8, 8);
  Mesh flipped = mesh;
  flipped.triangles = {{0, 2, 1}};
  const auto a = rasterize(mesh, unit_pose(), kUnitCam, unit_ambient(), 8, 8, cull);
  const auto b = rasterize(flipped, unit_pose(), kUnitCam, unit_ambient(), 8, 8, cull);
  EXPECT_GT(plain.covered_count(), 0u);
  EXPECT_EQ(a.covered_count() + b.covered_count(), plain.covered_count());
  EXPECT_TRUE(a.covered_count() == 0 || b.covered_count() == 0);
}

TEST(RenderParams, MeanFaceIsBitReproducible) {
  const auto basis = make_synthetic_basis(64, 7);
  const auto cam = CameraIntrinsics::for_raster(48, 48);
  const auto a = render_params(basis, ParamVector{}, cam, 48, 48);
  const auto b = render_params(basis, ParamVector{}, cam, 48, 48);
  EXPECT_GT(a.covered_count(), 100u);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.coverage, b.coverage);
  EXPECT_EQ(a.depth, b.depth);
}

TEST(RenderParams, UnrelatedRandomStateDoesNotMatter) {
  const auto basis = make_synthetic_basis(64, 7);
  const auto cam = CameraIntrinsics::for_raster(32, 32);
  const ParamVector p = round_trip_truth(5);
  const auto a = render_params(basis, p, cam, 32, 32);
  Rng noise(999);
  for (int i = 0; i < 1000; ++i) noise.next();
  const auto b = render_params(basis, p, cam, 32, 32);
  EXPECT_EQ(a.image, b.image);
}

TEST(RenderParams, CoverageDepthAndImageAgree) {
  const auto basis = make_synthetic_basis(64, 7);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto out = render_params(basis, round_trip_truth(seed), CameraIntrinsics::for_raster(40, 40), 40, 40);
    for (int y = 0; y < 40; ++y)
      for (int x = 0; x < 40; ++x) {
        const bool covered = out.coverage.at(x, y) == 1.0;
        EXPECT_EQ(covered, std::isfinite(out.depth.at(x, y)));
        if (!covered) {
          for (int c = 0; c < 3; ++c) EXPECT_EQ(out.image.at(x, y, c), 0.0);
        }
        for (int c = 0; c < 3; ++c) {
          EXPECT_GE(out.image.at(x, y, c), 0.0);
          EXPECT_LE(out.image.at(x, y, c), 1.0);
        }
      }
  }
}
