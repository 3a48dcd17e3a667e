#pragma once

#include <atomic>
#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <system_error>
#include <vector>

#include <unistd.h>

#include "json.hpp"
#include "occface/basis_io.hpp"
#include "occface/error.hpp"
#include "occface/fitting.hpp"
#include "occface/image_io.hpp"
#include "occface/mesh_io.hpp"
#include "occface/occlusion.hpp"
#include "occface/renderer.hpp"

namespace occface {

enum class InpaintMode { Baseline, External };

enum class Emit { Obj, Render, Report, Contours };

inline std::string to_string(Emit e) {
  switch (e) {
    case Emit::Obj: return "obj";
    case Emit::Render: return "render";
    case Emit::Report: return "report";
    case Emit::Contours: return "contours";
  }
  return "obj";
}

inline Emit parse_emit(std::string_view s) {
  if (s == "obj") return Emit::Obj;
  if (s == "render") return Emit::Render;
  if (s == "report") return Emit::Report;
  if (s == "contours") return Emit::Contours;
  throw Error(ErrorKind::Config, "unknown emit target '" + std::string(s) + "'");
}

/// Comma-separated list, e.g. "obj,render".
inline std::set<Emit> parse_emit_list(std::string_view list) {
  std::set<Emit> out;
  while (!list.empty()) {
    const auto comma = list.find(',');
    const auto item = list.substr(0, comma);
    if (!item.empty()) out.insert(parse_emit(item));
    if (comma == std::string_view::npos) break;
    list.remove_prefix(comma + 1);
  }
  return out;
}

/// "WxH".
inline std::pair<int, int> parse_raster(std::string_view s) {
  const auto x = s.find('x');
  int w = 0, h = 0;
  if (x == std::string_view::npos ||
      std::from_chars(s.data(), s.data() + x, w).ptr != s.data() + x ||
      std::from_chars(s.data() + x + 1, s.data() + s.size(), h).ptr != s.data() + s.size())
    throw Error(ErrorKind::Config, "raster must look like 64x64, got '" + std::string(s) + "'");
  return {w, h};
}

struct PipelineConfig {
  std::filesystem::path input_image;
  std::filesystem::path mask;
  /// Basis file, or "synthetic:<V>" for a generated one.
  std::string basis;
  int raster_width = 64;
  int raster_height = 64;
  InpaintMode inpaint_mode = InpaintMode::Baseline;
  /// Pre-completed image, read in external mode only.
  std::filesystem::path completed_image;
  double contour_low = 0.1;
  double contour_high = 0.3;
  FitConfig fit;
  std::filesystem::path output_dir;
  std::set<Emit> emit{Emit::Obj, Emit::Render, Emit::Report, Emit::Contours};
};

inline void validate(const PipelineConfig& c) {
  detail::require(c.raster_width >= 16 && c.raster_height >= 16, ErrorKind::Config,
                  "raster must be at least 16x16");
  detail::require(!c.input_image.empty(), ErrorKind::Config, "input_image is required");
  detail::require(!c.mask.empty(), ErrorKind::Config, "mask is required");
  detail::require(!c.basis.empty(), ErrorKind::Config, "basis is required");
  detail::require(!c.output_dir.empty(), ErrorKind::Config, "output_dir is required");
  detail::require(c.inpaint_mode != InpaintMode::External || !c.completed_image.empty(),
                  ErrorKind::Config, "external inpaint mode needs completed_image");
  detail::require(c.contour_low >= 0.0 && c.contour_low < c.contour_high && c.contour_high <= 1.0,
                  ErrorKind::Config, "contour thresholds must satisfy 0 <= low < high <= 1");
  validate(c.fit);
}

// ---------------------------------------------------------------------------
// Flat JSON config
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
T config_value(const nlohmann::json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorKind::Config, "config key '" + key + "' has the wrong type");
  }
}

inline Optimizer parse_optimizer(const std::string& s) {
  if (s == "adam") return Optimizer::Adam;
  if (s == "momentum") return Optimizer::Momentum;
  throw Error(ErrorKind::Config, "fit.optimizer must be adam or momentum");
}

inline GradientMode parse_gradient(const std::string& s) {
  if (s == "analytic") return GradientMode::Analytic;
  if (s == "hybrid") return GradientMode::Hybrid;
  if (s == "numeric") return GradientMode::Numeric;
  throw Error(ErrorKind::Config, "fit.gradient must be analytic, hybrid or numeric");
}

// Every numeric fit field, keyed as it appears in the config file.
inline std::vector<std::pair<const char*, double FitConfig::*>> fit_real_fields() {
  return {{"fit.step_size", &FitConfig::step_size},
          {"fit.momentum", &FitConfig::momentum},
          {"fit.rms_decay", &FitConfig::rms_decay},
          {"fit.final_step_fraction", &FitConfig::final_step_fraction},
          {"fit.fd_epsilon", &FitConfig::fd_epsilon},
          {"fit.lambda6", &FitConfig::lambda6},
          {"fit.lambda7", &FitConfig::lambda7},
          {"fit.reg_weight", &FitConfig::reg_weight},
          {"fit.convergence_tol", &FitConfig::convergence_tol},
          {"fit.loss_tol", &FitConfig::loss_tol},
          {"fit.gradient_tol", &FitConfig::gradient_tol},
          {"fit.pose_step", &FitConfig::pose_step},
          {"fit.light_step", &FitConfig::light_step},
          {"fit.shape_step", &FitConfig::shape_step},
          {"fit.soft_edge_width", &FitConfig::soft_edge_width},
          {"fit.soft_edge_phase", &FitConfig::soft_edge_phase},
          {"fit.texture_step", &FitConfig::texture_step},
          {"fit.divergence_factor", &FitConfig::divergence_factor}};
}

}  // namespace detail

/// Parses the flat config document. Relative paths are resolved against
/// `base_dir` (the config file's directory). Unknown keys are rejected.
inline PipelineConfig config_from_json(const nlohmann::json& j,
                                       const std::filesystem::path& base_dir = {}) {
  detail::require(j.is_object(), ErrorKind::Config, "config must be a JSON object");
  PipelineConfig c;
  auto path = [&](const nlohmann::json& v, const std::string& key) {
    std::filesystem::path p = detail::config_value<std::string>(v, key);
    return p.is_relative() && !base_dir.empty() ? base_dir / p : p;
  };
  const auto reals = detail::fit_real_fields();
  for (const auto& [key, v] : j.items()) {
    if (key == "input_image") {
      c.input_image = path(v, key);
    } else if (key == "mask") {
      c.mask = path(v, key);
    } else if (key == "basis") {
      c.basis = detail::config_value<std::string>(v, key);
      if (c.basis.rfind("synthetic:", 0) != 0) c.basis = path(v, key).string();
    } else if (key == "raster_size") {
      std::tie(c.raster_width, c.raster_height) =
          parse_raster(detail::config_value<std::string>(v, key));
    } else if (key == "inpaint_mode") {
      const auto m = detail::config_value<std::string>(v, key);
      if (m == "baseline") c.inpaint_mode = InpaintMode::Baseline;
      else if (m == "external") c.inpaint_mode = InpaintMode::External;
      else throw Error(ErrorKind::Config, "inpaint_mode must be baseline or external");
    } else if (key == "completed_image") {
      c.completed_image = path(v, key);
    } else if (key == "contour_low") {
      c.contour_low = detail::config_value<double>(v, key);
    } else if (key == "contour_high") {
      c.contour_high = detail::config_value<double>(v, key);
    } else if (key == "output_dir") {
      c.output_dir = path(v, key);
    } else if (key == "emit") {
      c.emit.clear();
      for (const auto& e : detail::config_value<std::vector<std::string>>(v, key))
        c.emit.insert(parse_emit(e));
    } else if (key == "fit.max_iters") {
      c.fit.max_iters = detail::config_value<int>(v, key);
    } else if (key == "fit.threads") {
      c.fit.threads = detail::config_value<int>(v, key);
    } else if (key == "fit.backtracking") {
      c.fit.backtracking = detail::config_value<bool>(v, key);
    } else if (key == "fit.optimizer") {
      c.fit.optimizer = detail::parse_optimizer(detail::config_value<std::string>(v, key));
    } else if (key == "fit.gradient") {
      c.fit.gradient = detail::parse_gradient(detail::config_value<std::string>(v, key));
    } else {
      auto it = std::find_if(reals.begin(), reals.end(),
                             [&](const auto& f) { return key == f.first; });
      if (it == reals.end()) throw Error(ErrorKind::Config, "unknown config key '" + key + "'");
      c.fit.*(it->second) = detail::config_value<double>(v, key);
    }
  }
  return c;
}

inline nlohmann::json to_json(const PipelineConfig& c) {
  nlohmann::json j;
  j["input_image"] = c.input_image.string();
  j["mask"] = c.mask.string();
  j["basis"] = c.basis;
  j["raster_size"] = std::to_string(c.raster_width) + "x" + std::to_string(c.raster_height);
  j["inpaint_mode"] = c.inpaint_mode == InpaintMode::External ? "external" : "baseline";
  if (!c.completed_image.empty()) j["completed_image"] = c.completed_image.string();
  j["contour_low"] = c.contour_low;
  j["contour_high"] = c.contour_high;
  j["output_dir"] = c.output_dir.string();
  std::vector<std::string> emit;
  for (auto e : c.emit) emit.push_back(to_string(e));
  j["emit"] = emit;
  j["fit.max_iters"] = c.fit.max_iters;
  j["fit.threads"] = c.fit.threads;
  j["fit.backtracking"] = c.fit.backtracking;
  j["fit.optimizer"] = to_string(c.fit.optimizer);
  j["fit.gradient"] = to_string(c.fit.gradient);
  for (const auto& [key, field] : detail::fit_real_fields()) j[key] = c.fit.*field;
  return j;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Config, "cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Config, std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j, path.parent_path());
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

/// Final locations of everything written; empty paths were not emitted.
struct RunArtifacts {
  std::filesystem::path completed_image;
  std::filesystem::path mesh_obj;
  std::filesystem::path final_render;
  std::filesystem::path coverage;
  std::filesystem::path depth;
  std::filesystem::path fit_report;
  std::vector<std::filesystem::path> contour_maps;

  std::vector<std::filesystem::path> all() const {
    std::vector<std::filesystem::path> out;
    for (const auto* p : {&completed_image, &mesh_obj, &final_render, &coverage, &depth, &fit_report})
      if (!p->empty()) out.push_back(*p);
    out.insert(out.end(), contour_maps.begin(), contour_maps.end());
    return out;
  }
};

/// A failure tagged with the stage it happened in.
class StageError : public Error {
 public:
  StageError(std::string stage, const Error& cause)
      : Error(cause.kind(), cause.what()), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

/// 0 ok, 2 config, 3 IO, 4 degenerate mask, 5 divergence, 6 any other
/// geometry or fitting failure.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config:
    case ErrorKind::Argument:
      return 2;
    case ErrorKind::Io:
    case ErrorKind::MissingFile:
    case ErrorKind::MalformedFile:
    case ErrorKind::DimensionInconsistency:
    case ErrorKind::UnsupportedFormat:
    case ErrorKind::CorruptFile:
      return 3;
    case ErrorKind::DegenerateMask:
      return 4;
    case ErrorKind::Divergence:
      return 5;
    default:
      return 6;
  }
}

/// Test seam: called with each artifact's final file name right after it is
/// written to the staging directory. Throwing aborts the run.
using ArtifactHook = std::function<void(const std::string&)>;

struct RunOptions {
  /// Preloaded basis shared across runs; when null the config's basis is loaded.
  const MorphableBasis* basis = nullptr;
  ArtifactHook after_write;
};

/// REPRO_SEED as an integer, if set and well formed.
inline std::optional<std::uint64_t> repro_seed() {
  const char* s = std::getenv("REPRO_SEED");
  if (!s || !*s) return std::nullopt;
  std::uint64_t v = 0;
  const auto end = s + std::char_traits<char>::length(s);
  if (std::from_chars(s, end, v).ptr != end)
    throw Error(ErrorKind::Config, "REPRO_SEED must be a non-negative integer");
  return v;
}

inline MorphableBasis resolve_basis(const std::string& spec) {
  if (spec.rfind("synthetic:", 0) == 0) {
    std::size_t v = 0;
    const auto body = std::string_view(spec).substr(10);
    if (std::from_chars(body.data(), body.data() + body.size(), v).ptr != body.data() + body.size() ||
        v < 4)
      throw Error(ErrorKind::Config, "synthetic basis needs a vertex count >= 4: " + spec);
    return make_synthetic_basis(v, repro_seed().value_or(0));
  }
  return load_basis(spec);
}

namespace detail {

// Sibling of output_dir so a crash never leaves debris inside it.
inline std::filesystem::path staging_dir(const std::filesystem::path& output_dir) {
  static std::atomic<unsigned> counter{0};
  const auto abs = std::filesystem::absolute(output_dir).lexically_normal();
  const auto name = (abs.has_filename() ? abs.filename() : abs.parent_path().filename()).string();
  const auto parent = abs.has_filename() ? abs.parent_path() : abs.parent_path().parent_path();
  return parent / ("." + name + ".staging-" + std::to_string(::getpid()) + "-" +
                   std::to_string(counter.fetch_add(1)));
}

class Staging {
 public:
  explicit Staging(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw Error(ErrorKind::Io, "cannot create " + dir_.string() + ": " + ec.message());
  }
  ~Staging() {
    std::error_code ec;
    std::filesystem::remove_all(dir_, ec);
  }
  Staging(const Staging&) = delete;
  Staging& operator=(const Staging&) = delete;

  std::filesystem::path path(const std::string& name) {
    names_.push_back(name);
    return dir_ / name;
  }

  /// Moves every staged file into `dest`; rename within one filesystem is
  /// atomic per file.
  std::vector<std::filesystem::path> commit(const std::filesystem::path& dest) {
    std::error_code ec;
    std::filesystem::create_directories(dest, ec);
    if (ec) throw Error(ErrorKind::Io, "cannot create " + dest.string() + ": " + ec.message());
    std::vector<std::filesystem::path> out;
    for (const auto& n : names_) {
      std::filesystem::rename(dir_ / n, dest / n, ec);
      if (ec) throw Error(ErrorKind::Io, "cannot move " + n + " into place: " + ec.message());
      out.push_back(dest / n);
    }
    return out;
  }

 private:
  std::filesystem::path dir_;
  std::vector<std::string> names_;
};

inline Image as_rgb(const Image& img) {
  if (img.channels() == 3) return img;
  detail::require(img.channels() == 1, ErrorKind::UnsupportedFormat,
                  "input image must be grayscale or RGB");
  Image out(img.width(), img.height(), 3);
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = img.at(x, y);
  return out;
}

template <typename F>
auto stage(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(name, e);
  }
}

}  // namespace detail

/// Report document. Everything except "fit.wall_ms" is a deterministic
/// function of the inputs.
inline nlohmann::json run_report(const PipelineConfig& config, const FitResult& result,
                                 const MorphableBasis& basis) {
  nlohmann::json j;
  j["config"] = to_json(config);
  j["basis_vertices"] = basis.vertex_count();
  if (auto s = repro_seed()) j["repro_seed"] = *s;
  else j["repro_seed"] = nullptr;
  j["fit"] = to_json(result.report);
  const Eigen::VectorXd x = result.params.to_free();
  j["params"] = std::vector<double>(x.data(), x.data() + x.size());
  return j;
}

/// Stage 1 (mask, contours, completion) then stage 2 (fit), then export.
/// Nothing appears in output_dir unless every stage and every write succeeds.
inline RunArtifacts run_pipeline(const PipelineConfig& config, const RunOptions& options = {}) {
  detail::stage("config", [&] { validate(config); });
  const Image input = detail::stage("load_image", [&] {
    return detail::as_rgb(load_image(config.input_image));
  });
  const Mask mask = detail::stage("load_mask", [&] { return load_mask(config.mask); });
  detail::stage("config", [&] {
    detail::require(input.width() == mask.width() && input.height() == mask.height(),
                    ErrorKind::Config, "image and mask sizes differ");
    detail::require(input.width() == config.raster_width && input.height() == config.raster_height,
                    ErrorKind::Config,
                    "input is " + std::to_string(input.width()) + "x" +
                        std::to_string(input.height()) + " but raster_size is " +
                        std::to_string(config.raster_width) + "x" +
                        std::to_string(config.raster_height));
  });
  detail::stage("mask", [&] {
    detail::require(!mask.all_occluded(), ErrorKind::DegenerateMask,
                    "mask occludes every pixel");
  });

  std::optional<MorphableBasis> owned;
  const MorphableBasis* basis = options.basis;
  if (!basis) {
    owned = detail::stage("load_basis", [&] { return resolve_basis(config.basis); });
    basis = &*owned;
  }

  const Image masked = apply_mask(input, mask);
  const Image completed = detail::stage("inpaint", [&] {
    if (config.inpaint_mode == InpaintMode::Baseline) return baseline_inpaint(masked, mask);
    const Image external = detail::as_rgb(load_image(config.completed_image));
    detail::require(external.same_shape(input), ErrorKind::Config,
                    "completed_image size differs from input");
    // keep every unmasked input pixel; only the hole comes from outside
    Image out = input;
    for (int y = 0; y < out.height(); ++y)
      for (int x = 0; x < out.width(); ++x)
        if (mask.occluded(x, y))
          for (int c = 0; c < 3; ++c) out.at(x, y, c) = external.at(x, y, c);
    return out;
  });
  struct Contours {
    Image c_true, c_syn, c_goal;
  };
  const Contours contours = detail::stage("contours", [&] {
    Contours c;
    c.c_true = extract_contours(to_grayscale(masked), config.contour_low, config.contour_high);
    c.c_syn = extract_contours(to_grayscale(completed), config.contour_low, config.contour_high);
    c.c_goal = compose_contour(c.c_true, c.c_syn, mask);
    return c;
  });

  const auto intrinsics = CameraIntrinsics::for_raster(config.raster_width, config.raster_height);
  DownsampleEmbedder embedder;
  const FitResult result = detail::stage("fit", [&] {
    return fit(completed, *basis, intrinsics, ParamVector{}, config.fit, embedder);
  });

  const auto& emit = config.emit;
  detail::Staging staging(detail::staging_dir(config.output_dir));
  auto written = [&](const std::string& name) {
    if (options.after_write) options.after_write(name);
  };
  RunArtifacts art;
  detail::stage("export", [&] {
    if (emit.count(Emit::Obj)) {
      export_obj(build_mesh(*basis, result.params), staging.path("mesh.obj"));
      art.mesh_obj = "mesh.obj";
      written("mesh.obj");
    }
    if (emit.count(Emit::Render)) {
      const RenderOutput r = render_params(*basis, result.params, intrinsics,
                                           config.raster_width, config.raster_height);
      save_image(completed, staging.path("completed.png"));
      art.completed_image = "completed.png";
      written("completed.png");
      save_image(r.image, staging.path("render.png"));
      art.final_render = "render.png";
      written("render.png");
      save_image(r.coverage, staging.path("coverage.pgm"));
      art.coverage = "coverage.pgm";
      written("coverage.pgm");
      save_depth(r.depth, staging.path("depth.bin"));
      art.depth = "depth.bin";
      written("depth.bin");
    }
    if (emit.count(Emit::Contours)) {
      for (const auto& [name, img] : {std::pair{"contour_true.pgm", &contours.c_true},
                                      std::pair{"contour_syn.pgm", &contours.c_syn},
                                      std::pair{"contour_goal.pgm", &contours.c_goal}}) {
        save_image(*img, staging.path(name));
        art.contour_maps.emplace_back(name);
        written(name);
      }
    }
    if (emit.count(Emit::Report)) {
      const std::string text = run_report(config, result, *basis).dump(2) + "\n";
      detail::write_bytes(staging.path("fit_report.json"), text.data(), text.size());
      art.fit_report = "fit_report.json";
      written("fit_report.json");
    }
    staging.commit(config.output_dir);
  });

  auto place = [&](std::filesystem::path& p) {
    if (!p.empty()) p = config.output_dir / p;
  };
  for (auto* p : {&art.completed_image, &art.mesh_obj, &art.final_render, &art.coverage,
                  &art.depth, &art.fit_report})
    place(*p);
  for (auto& p : art.contour_maps) place(p);
  return art;
}

/// One-line JSON error record for stderr.
inline std::string error_line(const Error& e) {
  nlohmann::json j;
  j["kind"] = std::string(to_string(e.kind()));
  if (const auto* s = dynamic_cast<const StageError*>(&e)) j["stage"] = s->stage();
  j["message"] = e.what();
  j["exit_code"] = exit_code(e.kind());
  return "error: " + j.dump();
}

/// Runs one config and maps failures to exit codes, printing the error line.
inline int run_pipeline_main(const PipelineConfig& config, const RunOptions& options = {},
                             std::ostream& err = std::cerr) {
  try {
    run_pipeline(config, options);
    return 0;
  } catch (const Error& e) {
    err << error_line(e) << '\n';
    return exit_code(e.kind());
  }
}

}  // namespace occface
