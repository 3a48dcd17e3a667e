#pragma once

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "occface/error.hpp"
#include "occface/renderer.hpp"

// Wavefront OBJ with per-vertex colour appended to each v record:
//
//   v x y z r g b
//   vn nx ny nz
//   f a//a b//b c//c      (1-based)
//
// Every real is printed "%.6f", lines end in LF, so identical meshes give
// identical bytes.

namespace occface {

namespace detail {

inline void append_fixed(std::string& out, double v) {
  char buf[64];
  // -0.000000 and 0.000000 should not differ between runs that round to zero
  if (v > -5e-7 && v < 5e-7) v = 0.0;
  const int n = std::snprintf(buf, sizeof buf, "%.6f", v);
  out.append(buf, static_cast<std::size_t>(n));
}

}  // namespace detail

inline std::string format_obj(const Mesh& mesh) {
  check_mesh(mesh);
  std::string out;
  out.reserve(mesh.vertex_count() * 96 + mesh.triangles.size() * 32);
  for (std::size_t i = 0; i < mesh.vertex_count(); ++i) {
    out += "v";
    for (int k = 0; k < 3; ++k) {
      out += ' ';
      detail::append_fixed(out, mesh.positions[static_cast<Eigen::Index>(3 * i) + k]);
    }
    for (int k = 0; k < 3; ++k) {
      out += ' ';
      detail::append_fixed(out, mesh.albedo[static_cast<Eigen::Index>(3 * i) + k]);
    }
    out += '\n';
  }
  for (const auto& n : mesh.normals) {
    out += "vn";
    for (int k = 0; k < 3; ++k) {
      out += ' ';
      detail::append_fixed(out, n[k]);
    }
    out += '\n';
  }
  for (const auto& tri : mesh.triangles) {
    out += 'f';
    for (auto idx : tri) {
      const std::string one = std::to_string(idx + 1);
      out += ' ' + one + "//" + one;
    }
    out += '\n';
  }
  return out;
}

inline void export_obj(const Mesh& mesh, const std::filesystem::path& path) {
  const std::string text = format_obj(mesh);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.flush();
  if (!out) throw Error(ErrorKind::Io, "short write to " + path.string());
}

struct ObjData {
  std::vector<Eigen::Vector3d> positions;
  std::vector<Eigen::Vector3d> colors;
  std::vector<Eigen::Vector3d> normals;
  std::vector<Triangle> faces;
};

/// Reads back what export_obj writes (and plain "v x y z" / "f a b c").
inline ObjData parse_obj(std::istream& in) {
  ObjData data;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& what) {
    throw Error(ErrorKind::MalformedFile, "obj line " + std::to_string(lineno) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag) || tag[0] == '#') continue;
    if (tag == "v" || tag == "vn") {
      std::vector<double> vals;
      double d;
      while (ls >> d) vals.push_back(d);
      if (tag == "vn") {
        if (vals.size() != 3) fail("vn needs 3 values");
        data.normals.emplace_back(vals[0], vals[1], vals[2]);
      } else {
        if (vals.size() != 3 && vals.size() != 6) fail("v needs 3 or 6 values");
        data.positions.emplace_back(vals[0], vals[1], vals[2]);
        if (vals.size() == 6) data.colors.emplace_back(vals[3], vals[4], vals[5]);
      }
    } else if (tag == "f") {
      Triangle tri{};
      std::string ref;
      int k = 0;
      while (ls >> ref) {
        if (k == 3) fail("only triangles are supported");
        unsigned long idx = 0;
        const auto [ptr, ec] = std::from_chars(ref.data(), ref.data() + ref.size(), idx);
        if (ec != std::errc{} || idx == 0) fail("bad face index '" + ref + "'");
        tri[static_cast<std::size_t>(k++)] = static_cast<std::uint32_t>(idx - 1);
      }
      if (k != 3) fail("face needs 3 vertices");
      data.faces.push_back(tri);
    }
  }
  for (const auto& f : data.faces)
    for (auto idx : f)
      if (idx >= data.positions.size())
        throw Error(ErrorKind::MalformedFile, "obj face references a missing vertex");
  return data;
}

inline ObjData load_obj(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::MissingFile, "cannot open " + path.string());
  return parse_obj(in);
}

}  // namespace occface
