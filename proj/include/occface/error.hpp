#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace occface {

enum class ErrorKind {
  Dimension,
  Argument,
  MissingFile,
  MalformedFile,
  DimensionInconsistency,
  Geometry,
  BehindCamera,
  DegenerateMask,
  DegenerateRender,
  DegenerateEmbedding,
  Evaluation,
  Divergence,
  Io,
  UnsupportedFormat,
  CorruptFile,
  Config,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Dimension: return "dimension";
    case ErrorKind::Argument: return "argument";
    case ErrorKind::MissingFile: return "missing_file";
    case ErrorKind::MalformedFile: return "malformed_file";
    case ErrorKind::DimensionInconsistency: return "dimension_inconsistency";
    case ErrorKind::Geometry: return "geometry";
    case ErrorKind::BehindCamera: return "behind_camera";
    case ErrorKind::DegenerateMask: return "degenerate_mask";
    case ErrorKind::DegenerateRender: return "degenerate_render";
    case ErrorKind::DegenerateEmbedding: return "degenerate_embedding";
    case ErrorKind::Evaluation: return "evaluation";
    case ErrorKind::Divergence: return "divergence";
    case ErrorKind::Io: return "io";
    case ErrorKind::UnsupportedFormat: return "unsupported_format";
    case ErrorKind::CorruptFile: return "corrupt_file";
    case ErrorKind::Config: return "config";
  }
  return "unknown";
}

/// Base exception for the library. Every failure carries a kind so callers
/// (and the CLI exit-code mapping) can branch without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class BehindCameraError : public Error {
 public:
  BehindCameraError(std::size_t vertex, double depth)
      : Error(ErrorKind::BehindCamera,
              "vertex " + std::to_string(vertex) + " is behind the camera (depth " +
                  std::to_string(depth) + ")"),
        vertex_(vertex) {}

  std::size_t vertex() const noexcept { return vertex_; }

 private:
  std::size_t vertex_;
};

class GeometryError : public Error {
 public:
  GeometryError(std::size_t triangle, const std::string& what)
      : Error(ErrorKind::Geometry, "triangle " + std::to_string(triangle) + ": " + what),
        triangle_(triangle) {}

  std::size_t triangle() const noexcept { return triangle_; }

 private:
  std::size_t triangle_;
};

class EvaluationError : public Error {
 public:
  EvaluationError(std::size_t coordinate, const std::string& what)
      : Error(ErrorKind::Evaluation,
              "coordinate " + std::to_string(coordinate) + ": " + what),
        coordinate_(coordinate) {}

  std::size_t coordinate() const noexcept { return coordinate_; }

 private:
  std::size_t coordinate_;
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::vector<double> trace)
      : Error(ErrorKind::Divergence, what), trace_(std::move(trace)) {}

  const std::vector<double>& trace() const noexcept { return trace_; }

 private:
  std::vector<double> trace_;
};

namespace detail {

inline void require(bool ok, ErrorKind kind, const std::string& what) {
  if (!ok) throw Error(kind, what);
}

inline void require_dims(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorKind::Dimension, what);
}

}  // namespace detail
}  // namespace occface
