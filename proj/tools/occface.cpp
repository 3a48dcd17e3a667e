// occface command-line front end.
//
//   occface reconstruct --config run.json [--config more.json ...] [--jobs N]
//                       [--fit.max-iters N] [--raster WxH] [--emit obj,render]
//   occface inspect-basis <path | synthetic:V>
//   occface losses --a a.png --b b.png --mask m.pgm
//   occface make-basis --vertices V --seed S --out basis.bin
//   occface render-fixture --basis synthetic:64 --seed 1 --raster 64x64 --out-dir dir

#include <atomic>
#include <cstdio>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <thread>

#include "CLI11.hpp"
#include "occface/occface.hpp"

namespace {

using namespace occface;

int report_error(const Error& e) {
  std::cerr << error_line(e) << '\n';
  return exit_code(e.kind());
}

struct ReconstructArgs {
  std::vector<std::string> configs;
  std::optional<int> max_iters;
  std::string raster;
  std::string emit;
  std::string output_dir;
  int jobs = 1;
};

int cmd_reconstruct(const ReconstructArgs& args) {
  std::vector<PipelineConfig> configs;
  try {
    for (const auto& path : args.configs) {
      PipelineConfig c = load_config(path);
      if (args.max_iters) c.fit.max_iters = *args.max_iters;
      if (!args.raster.empty()) std::tie(c.raster_width, c.raster_height) = parse_raster(args.raster);
      if (!args.emit.empty()) c.emit = parse_emit_list(args.emit);
      if (!args.output_dir.empty()) c.output_dir = args.output_dir;
      validate(c);
      configs.push_back(std::move(c));
    }
    if (!args.output_dir.empty() && configs.size() > 1)
      throw Error(ErrorKind::Config, "--output-dir cannot be shared by several configs");
  } catch (const Error& e) {
    return report_error(StageError("config", e));
  }

  // one immutable basis per distinct source, shared by every job using it
  std::map<std::string, std::shared_ptr<const MorphableBasis>> bases;
  for (const auto& c : configs) {
    if (bases.count(c.basis)) continue;
    try {
      bases[c.basis] = std::make_shared<const MorphableBasis>(resolve_basis(c.basis));
    } catch (const Error& e) {
      return report_error(StageError("load_basis", e));
    }
  }

  std::vector<int> codes(configs.size(), 0);
  std::atomic<std::size_t> next{0};
  std::mutex err_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < configs.size(); i = next++) {
      std::ostringstream err;
      RunOptions opts;
      opts.basis = bases.at(configs[i].basis).get();
      codes[i] = run_pipeline_main(configs[i], opts, err);
      std::lock_guard lock(err_mutex);
      if (codes[i] != 0) std::cerr << err.str();
      else std::cout << "ok " << configs[i].output_dir.string() << '\n';
    }
  };
  const auto n = static_cast<std::size_t>(std::max(1, args.jobs));
  std::vector<std::jthread> pool;
  for (std::size_t t = 1; t < std::min(n, configs.size()); ++t) pool.emplace_back(worker);
  worker();
  pool.clear();
  for (int c : codes)
    if (c != 0) return c;
  return 0;
}

int cmd_inspect_basis(const std::string& path) {
  MorphableBasis basis;
  try {
    if (path.rfind("synthetic:", 0) == 0) {
      basis = resolve_basis(path);
    } else {
      basis = load_basis(path);  // validates; a failure is reported below
    }
  } catch (const Error& e) {
    std::cout << "check load: FAIL (" << to_string(e.kind()) << ") " << e.what() << '\n';
    return exit_code(e.kind());
  }
  const auto v = basis.vertex_count();
  std::cout << "vertices: " << v << '\n'
            << "triangles: " << basis.triangles.size() << '\n'
            << "identity: " << basis.basis_id.rows() << " x " << basis.basis_id.cols() << '\n'
            << "expression: " << basis.basis_exp.rows() << " x " << basis.basis_exp.cols() << '\n'
            << "texture: " << basis.basis_tex.rows() << " x " << basis.basis_tex.cols() << '\n';

  bool all_ok = true;
  auto check = [&](const char* name, bool ok, const std::string& detail = {}) {
    all_ok = all_ok && ok;
    std::cout << "check " << name << ": " << (ok ? "ok" : "FAIL");
    if (!detail.empty()) std::cout << " (" << detail << ")";
    std::cout << '\n';
  };
  try {
    validate(basis);
    check("dimensions", true);
  } catch (const Error& e) {
    check("dimensions", false, e.what());
  }
  check("parameter count", kParamDims == 239, std::to_string(kParamDims));
  try {
    const auto normals = compute_normals(basis.mean_shape, basis.triangles);
    check("mean shape triangles non-degenerate", true);
    (void)normals;
  } catch (const Error& e) {
    check("mean shape triangles non-degenerate", false, e.what());
  }
  std::vector<int> uses(v, 0);
  for (const auto& t : basis.triangles)
    for (auto i : t) ++uses[i];
  const auto unused = static_cast<std::size_t>(std::count(uses.begin(), uses.end(), 0));
  check("every vertex in a triangle", unused == 0, std::to_string(unused) + " unused");
  return all_ok ? 0 : 3;
}

int cmd_losses(const std::string& a_path, const std::string& b_path, const std::string& mask_path) {
  try {
    const Image a = load_image(a_path);
    const Image b = load_image(b_path);
    const Mask mask = load_mask(mask_path);
    // one record per kernel: raw value and its weight in the stage-1 objective
    nlohmann::json j = nlohmann::json::array();
    j.push_back({{"name", "masked_pixel"},
                 {"value", masked_pixel_loss(a, b, mask)},
                 {"weights", {{"lambda4", kDefaultWeights.lambda4}}},
                 {"occluded_pixels", mask.occluded_count()}});
    nlohmann::json style = nullptr;
    if (a.channels() == 3 && b.channels() == 3)
      style = style_loss(reference_features(a), reference_features(b));
    j.push_back({{"name", "style"}, {"value", style}, {"weights", {{"lambda5", kDefaultWeights.lambda5}}}});
    std::cout << j.dump(2) << '\n';
    return 0;
  } catch (const Error& e) {
    return report_error(e);
  }
}

int cmd_make_basis(std::size_t vertices, std::uint64_t seed, const std::string& out) {
  try {
    save_basis(make_synthetic_basis(vertices, seed), out);
    std::cout << "wrote " << out << '\n';
    return 0;
  } catch (const Error& e) {
    return report_error(e);
  }
}

// Target image, a clear mask, the ground-truth parameters and a ready-made
// config for `reconstruct`.
int cmd_render_fixture(const std::string& basis_spec, std::uint64_t seed, const std::string& raster,
                       const std::string& out_dir) {
  try {
    const auto [w, h] = parse_raster(raster);
    const MorphableBasis basis = resolve_basis(basis_spec);
    const ParamVector truth = round_trip_truth(seed);
    const RenderOutput r =
        render_params(basis, truth, CameraIntrinsics::for_raster(w, h), w, h);
    std::filesystem::create_directories(out_dir);
    const std::filesystem::path dir = out_dir;
    save_image(r.image, dir / "target.png");
    save_mask(Mask(w, h), dir / "mask.pgm");
    const Eigen::VectorXd x = truth.to_free();
    nlohmann::json params = std::vector<double>(x.data(), x.data() + x.size());
    const std::string ptext = params.dump() + "\n";
    detail::write_bytes(dir / "truth.json", ptext.data(), ptext.size());
    nlohmann::json cfg;
    cfg["input_image"] = "target.png";
    cfg["mask"] = "mask.pgm";
    cfg["basis"] = basis_spec;
    cfg["raster_size"] = raster;
    cfg["output_dir"] = "out";
    const std::string ctext = cfg.dump(2) + "\n";
    detail::write_bytes(dir / "config.json", ctext.data(), ctext.size());
    std::cout << "wrote " << (dir / "config.json").string() << '\n';
    return 0;
  } catch (const Error& e) {
    return report_error(e);
  } catch (const std::filesystem::filesystem_error& e) {
    return report_error(Error(ErrorKind::Io, e.what()));
  }
}

}  // namespace

int main(int argc, char** argv) {
  static_assert(occface::kParamDims == 239);
  CLI::App app{"Occlusion-aware 3D face reconstruction"};
  app.require_subcommand(1);

  ReconstructArgs rec;
  int max_iters = -1;
  auto* reconstruct = app.add_subcommand("reconstruct", "Run the two-stage pipeline");
  reconstruct->add_option("--config", rec.configs, "Flat JSON config (repeatable)")->required();
  reconstruct->add_option("--fit.max-iters", max_iters, "Override fit.max_iters")
      ->check(CLI::NonNegativeNumber);
  reconstruct->add_option("--raster", rec.raster, "Override raster_size, e.g. 64x64");
  reconstruct->add_option("--emit", rec.emit, "Comma list of obj,render,report,contours");
  reconstruct->add_option("--output-dir", rec.output_dir, "Override output_dir");
  reconstruct->add_option("--jobs", rec.jobs, "Configs run concurrently")->check(CLI::PositiveNumber);

  std::string basis_path;
  auto* inspect = app.add_subcommand("inspect-basis", "Print basis dimensions and checks");
  inspect->add_option("path", basis_path, "Basis file or synthetic:V")->required();

  std::string a_path, b_path, mask_path;
  auto* losses = app.add_subcommand("losses", "Masked pixel and style losses of two images");
  losses->add_option("--a", a_path, "Predicted image")->required();
  losses->add_option("--b", b_path, "Reference image")->required();
  losses->add_option("--mask", mask_path, "Occlusion mask")->required();

  std::size_t vertices = 64;
  std::uint64_t seed = 0;
  std::string out_path;
  auto* make_basis = app.add_subcommand("make-basis", "Write a synthetic basis");
  make_basis->add_option("--vertices", vertices, "Vertex count")->check(CLI::Range(4, 1 << 20));
  make_basis->add_option("--seed", seed, "Generator seed");
  make_basis->add_option("--out", out_path, "Output path (.json for the text form)")->required();

  std::string fixture_basis = "synthetic:64", fixture_raster = "64x64", fixture_dir;
  std::uint64_t fixture_seed = 1;
  auto* fixture = app.add_subcommand("render-fixture", "Render a round-trip target and config");
  fixture->add_option("--basis", fixture_basis, "Basis file or synthetic:V");
  fixture->add_option("--seed", fixture_seed, "Ground-truth seed");
  fixture->add_option("--raster", fixture_raster, "WxH");
  fixture->add_option("--out-dir", fixture_dir, "Directory to write into")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (*reconstruct) {
    if (max_iters >= 0) rec.max_iters = max_iters;
    return cmd_reconstruct(rec);
  }
  if (*inspect) return cmd_inspect_basis(basis_path);
  if (*losses) return cmd_losses(a_path, b_path, mask_path);
  if (*make_basis) return cmd_make_basis(vertices, seed, out_path);
  return cmd_render_fixture(fixture_basis, fixture_seed, fixture_raster, fixture_dir);
}
