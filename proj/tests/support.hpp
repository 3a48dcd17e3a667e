#pragma once

#include <atomic>
#include <filesystem>
#include <string>

#include <unistd.h>

#include "occface/occface.hpp"

namespace occface::test {

inline Image random_image(Rng& rng, int w, int h, int c) {
  Image img(w, h, c);
  for (double& v : img.values()) v = rng.uniform();
  return img;
}

inline Mask random_mask(Rng& rng, int w, int h) {
  Mask m(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.set(x, y, rng.uniform() < 0.5);
  return m;
}

inline Eigen::MatrixXd random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal();
  return m;
}

inline Eigen::VectorXd random_vector(Rng& rng, Eigen::Index n) { return random_matrix(rng, n, 1); }

inline ActivationStack random_stack(Rng& rng, const std::vector<std::array<int, 3>>& shapes) {
  ActivationStack s;
  for (const auto& [q, h, w] : shapes) {
    ActivationLayer layer(q, h, w);
    for (double& v : layer.data) v = rng.normal();
    s.layers.push_back(std::move(layer));
  }
  return s;
}

/// Unstructured basis over a tetrahedron-like vertex set of size v.
inline MorphableBasis random_basis(Rng& rng, std::size_t v) {
  const auto rows = static_cast<Eigen::Index>(3 * v);
  MorphableBasis b;
  b.mean_shape = random_vector(rng, rows);
  b.mean_texture = Eigen::VectorXd(rows);
  for (auto& t : b.mean_texture) t = rng.uniform(0.2, 0.8);
  b.basis_id = random_matrix(rng, rows, kIdDims);
  b.basis_exp = random_matrix(rng, rows, kExpDims);
  b.basis_tex = 0.01 * random_matrix(rng, rows, kTexDims);
  for (std::uint32_t i = 0; i + 2 < v; ++i) b.triangles.push_back({i, i + 1, i + 2});
  return b;
}

inline std::filesystem::path data_dir() { return OCCFACE_TEST_DATA; }

/// Fresh directory removed on scope exit.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> n{0};
    path_ = std::filesystem::temp_directory_path() /
            ("occface-test-" + std::to_string(::getpid()) + "-" + std::to_string(n++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300});
}

}  // namespace occface::test
