#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "occface/error.hpp"
#include "occface/morphable_model.hpp"

// Binary basis container, all integers little-endian uint32, all reals
// little-endian IEEE-754 float64:
//
//   magic "OCCBASIS" (8 bytes) | version (=1) | V | T
//   5 blocks: rows | cols | rows*cols reals, row-major
//     mean_shape (3V x 1), mean_texture (3V x 1),
//     basis_id (3V x 80), basis_exp (3V x 64), basis_tex (3V x 80)
//   T triangles: 3 indices each
//
// No trailing bytes are allowed. See docs/formats.md.

namespace occface {

inline constexpr std::array<char, 8> kBasisMagic{'O', 'C', 'C', 'B', 'A', 'S', 'I', 'S'};
inline constexpr std::uint32_t kBasisVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f64(double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, sizeof bits);
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  }
  void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i)
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    double d;
    std::memcpy(&d, &bits, sizeof d);
    return d;
  }
  void raw(char* out, std::size_t n) {
    need(n);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n)
      throw Error(ErrorKind::MalformedFile, "basis file is truncated");
  }

  std::vector<char> bytes_;
  std::size_t pos_ = 0;
};

inline void write_block(ByteWriter& w, const Eigen::MatrixXd& m) {
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) w.f64(m(r, c));
}

inline Eigen::MatrixXd read_block(ByteReader& r) {
  const std::uint32_t rows = r.u32();
  const std::uint32_t cols = r.u32();
  const auto count = static_cast<std::uint64_t>(rows) * cols;
  if (count * 8 > r.remaining())
    throw Error(ErrorKind::MalformedFile, "basis file is truncated");
  Eigen::MatrixXd m(rows, cols);
  for (std::uint32_t i = 0; i < rows; ++i)
    for (std::uint32_t j = 0; j < cols; ++j) m(i, j) = r.f64();
  return m;
}

inline Eigen::VectorXd as_vector(const Eigen::MatrixXd& m, const char* name) {
  if (m.cols() != 1)
    throw Error(ErrorKind::DimensionInconsistency, std::string(name) + " must be a column vector");
  return m.col(0);
}

inline std::vector<char> read_all(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec))
    throw Error(ErrorKind::MissingFile, "no such file: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::MissingFile, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_all(const std::filesystem::path& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::Io, "failed writing " + path.string());
}

inline nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  auto rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Eigen::MatrixXd matrix_from_json(const nlohmann::json& j, const char* name) {
  if (!j.is_array())
    throw Error(ErrorKind::MalformedFile, std::string(name) + " must be an array of rows");
  const auto rows = j.size();
  const auto cols = rows == 0 ? 0 : j[0].size();
  Eigen::MatrixXd m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!j[r].is_array() || j[r].size() != cols)
      throw Error(ErrorKind::DimensionInconsistency, std::string(name) + " has ragged rows");
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

inline Eigen::VectorXd vector_from_json(const nlohmann::json& j, const char* name) {
  if (!j.is_array()) throw Error(ErrorKind::MalformedFile, std::string(name) + " must be an array");
  Eigen::VectorXd v(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) v[i] = j[i].get<double>();
  return v;
}

}  // namespace detail

/// Serializes without validating, so malformed fixtures can be produced.
inline std::vector<char> encode_basis(const MorphableBasis& basis) {
  detail::ByteWriter w;
  w.raw(kBasisMagic.data(), kBasisMagic.size());
  w.u32(kBasisVersion);
  w.u32(static_cast<std::uint32_t>(basis.vertex_count()));
  w.u32(static_cast<std::uint32_t>(basis.triangles.size()));
  detail::write_block(w, basis.mean_shape);
  detail::write_block(w, basis.mean_texture);
  detail::write_block(w, basis.basis_id);
  detail::write_block(w, basis.basis_exp);
  detail::write_block(w, basis.basis_tex);
  for (const auto& tri : basis.triangles)
    for (auto idx : tri) w.u32(idx);
  return w.bytes();
}

inline MorphableBasis decode_basis(std::vector<char> bytes) {
  detail::ByteReader r(std::move(bytes));
  std::array<char, 8> magic{};
  r.raw(magic.data(), magic.size());
  if (magic != kBasisMagic) throw Error(ErrorKind::MalformedFile, "bad basis magic");
  const auto version = r.u32();
  if (version != kBasisVersion)
    throw Error(ErrorKind::MalformedFile, "unsupported basis version " + std::to_string(version));
  const auto v = r.u32();
  const auto t = r.u32();

  MorphableBasis basis;
  basis.mean_shape = detail::as_vector(detail::read_block(r), "mean_shape");
  basis.mean_texture = detail::as_vector(detail::read_block(r), "mean_texture");
  basis.basis_id = detail::read_block(r);
  basis.basis_exp = detail::read_block(r);
  basis.basis_tex = detail::read_block(r);
  if (static_cast<std::uint64_t>(t) * 12 > r.remaining())
    throw Error(ErrorKind::MalformedFile, "basis file is truncated");
  basis.triangles.resize(t);
  for (auto& tri : basis.triangles)
    for (auto& idx : tri) idx = r.u32();
  if (r.remaining() != 0) throw Error(ErrorKind::MalformedFile, "trailing bytes in basis file");
  if (basis.mean_shape.size() != 3 * static_cast<Eigen::Index>(v))
    throw Error(ErrorKind::DimensionInconsistency,
                "header declares V = " + std::to_string(v) + " but mean_shape has " +
                    std::to_string(basis.mean_shape.size()) + " entries");
  validate(basis);
  return basis;
}

inline nlohmann::json basis_to_json(const MorphableBasis& basis) {
  nlohmann::json j;
  j["format"] = "occface-basis";
  j["version"] = kBasisVersion;
  j["vertex_count"] = basis.vertex_count();
  j["mean_shape"] = std::vector<double>(basis.mean_shape.begin(), basis.mean_shape.end());
  j["mean_texture"] = std::vector<double>(basis.mean_texture.begin(), basis.mean_texture.end());
  j["basis_id"] = detail::matrix_to_json(basis.basis_id);
  j["basis_exp"] = detail::matrix_to_json(basis.basis_exp);
  j["basis_tex"] = detail::matrix_to_json(basis.basis_tex);
  j["triangles"] = basis.triangles;
  return j;
}

inline MorphableBasis basis_from_json(const nlohmann::json& j) {
  try {
    if (j.value("format", std::string{}) != "occface-basis")
      throw Error(ErrorKind::MalformedFile, "not an occface-basis document");
    MorphableBasis basis;
    basis.mean_shape = detail::vector_from_json(j.at("mean_shape"), "mean_shape");
    basis.mean_texture = detail::vector_from_json(j.at("mean_texture"), "mean_texture");
    basis.basis_id = detail::matrix_from_json(j.at("basis_id"), "basis_id");
    basis.basis_exp = detail::matrix_from_json(j.at("basis_exp"), "basis_exp");
    basis.basis_tex = detail::matrix_from_json(j.at("basis_tex"), "basis_tex");
    basis.triangles = j.at("triangles").get<std::vector<Triangle>>();
    const auto v = j.at("vertex_count").get<std::size_t>();
    if (static_cast<std::size_t>(basis.mean_shape.size()) != 3 * v)
      throw Error(ErrorKind::DimensionInconsistency, "vertex_count disagrees with mean_shape");
    validate(basis);
    return basis;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::MalformedFile, std::string("basis json: ") + e.what());
  }
}

inline void save_basis(const MorphableBasis& basis, const std::filesystem::path& path) {
  if (path.extension() == ".json") {
    const std::string text = basis_to_json(basis).dump();
    detail::write_all(path, std::vector<char>(text.begin(), text.end()));
  } else {
    detail::write_all(path, encode_basis(basis));
  }
}

/// Loads a binary basis, or the JSON sidecar form when the extension is .json.
inline MorphableBasis load_basis(const std::filesystem::path& path) {
  auto bytes = detail::read_all(path);
  if (path.extension() == ".json") {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::MalformedFile, std::string("basis json: ") + e.what());
    }
    return basis_from_json(j);
  }
  return decode_basis(std::move(bytes));
}

}  // namespace occface
