#include <gtest/gtest.h>

#include <cstdlib>
#include <set>
#include <sstream>

#include "support.hpp"

using namespace occface;
using occface::test::TempDir;
namespace fs = std::filesystem;

namespace {

constexpr int kSize = 32;

std::set<std::string> listing(const fs::path& dir) {
  std::set<std::string> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) out.insert(e.path().filename().string());
  return out;
}

class PipelineTest : public ::testing::Test {
 protected:
  void SetUp() override {
    ::unsetenv("REPRO_SEED");
    const auto basis = make_synthetic_basis(64, 0);
    const auto cam = CameraIntrinsics::for_raster(kSize, kSize);
    target = render_params(basis, round_trip_truth(2), cam, kSize, kSize).image;
    save_image(target, dir.path() / "target.png");
    Mask m(kSize, kSize);
    for (int y = 10; y < 18; ++y)
      for (int x = 12; x < 20; ++x) m.set(x, y, true);
    save_mask(m, dir.path() / "mask.pgm");
    mask = m;

    cfg.input_image = dir.path() / "target.png";
    cfg.mask = dir.path() / "mask.pgm";
    cfg.basis = "synthetic:64";
    cfg.raster_width = cfg.raster_height = kSize;
    cfg.fit.max_iters = 8;
    cfg.output_dir = dir.path() / "out";
  }

  TempDir dir;
  Image target;
  Mask mask;
  PipelineConfig cfg;
};

int code_of(const PipelineConfig& c, const RunOptions& o = {}) {
  std::ostringstream err;
  return run_pipeline_main(c, o, err);
}

}  // namespace

TEST(PipelineConfigTest, ParsesFlatKeysAndResolvesPaths) {
  const auto j = nlohmann::json::parse(R"({
    "input_image": "in.png", "mask": "/abs/m.pgm", "basis": "synthetic:32",
    "raster_size": "48x40", "emit": ["obj", "report"], "output_dir": "out",
    "fit.max_iters": 7, "fit.step_size": 0.02, "fit.optimizer": "momentum",
    "contour_low": 0.2, "contour_high": 0.4
  })");
  const auto c = config_from_json(j, "/base");
  EXPECT_EQ(c.input_image, fs::path("/base/in.png"));
  EXPECT_EQ(c.mask, fs::path("/abs/m.pgm"));
  EXPECT_EQ(c.output_dir, fs::path("/base/out"));
  EXPECT_EQ(c.raster_width, 48);
  EXPECT_EQ(c.raster_height, 40);
  EXPECT_EQ(c.emit, (std::set<Emit>{Emit::Obj, Emit::Report}));
  EXPECT_EQ(c.fit.max_iters, 7);
  EXPECT_EQ(c.fit.step_size, 0.02);
  EXPECT_EQ(c.fit.optimizer, Optimizer::Momentum);
  EXPECT_EQ(c.contour_high, 0.4);

  const auto back = config_from_json(to_json(c), "/elsewhere");
  EXPECT_EQ(to_json(back), to_json(c));
}

TEST(PipelineConfigTest, RejectsBadInput) {
  auto kind = [](const char* text) {
    try {
      config_from_json(nlohmann::json::parse(text), ".");
      return ErrorKind::Io;
    } catch (const Error& e) {
      return e.kind();
    }
  };
  EXPECT_EQ(kind(R"({"bogus": 1})"), ErrorKind::Config);
  EXPECT_EQ(kind(R"({"raster_size": "64"})"), ErrorKind::Config);
  EXPECT_EQ(kind(R"({"emit": ["mesh"]})"), ErrorKind::Config);
  EXPECT_EQ(kind(R"({"fit.gradient": "exact"})"), ErrorKind::Config);
  EXPECT_EQ(kind(R"({"fit.max_iters": "ten"})"), ErrorKind::Config);
  EXPECT_EQ(kind("[1, 2]"), ErrorKind::Config);

  PipelineConfig c;
  EXPECT_THROW(validate(c), Error);
  c.input_image = "a";
  c.mask = "b";
  c.basis = "synthetic:8";
  c.output_dir = "o";
  EXPECT_NO_THROW(validate(c));
  c.raster_width = 8;
  EXPECT_THROW(validate(c), Error);
}

TEST(PipelineConfigTest, LoadConfigErrors) {
  TempDir dir;
  EXPECT_EQ(exit_code(ErrorKind::Config), 2);
  try {
    load_config(dir.path() / "absent.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Config);
  }
  std::ofstream(dir.path() / "bad.json") << "{ not json";
  EXPECT_THROW(load_config(dir.path() / "bad.json"), Error);
}

TEST(ExitCodes, Mapping) {
  EXPECT_EQ(exit_code(ErrorKind::Argument), 2);
  EXPECT_EQ(exit_code(ErrorKind::MissingFile), 3);
  EXPECT_EQ(exit_code(ErrorKind::CorruptFile), 3);
  EXPECT_EQ(exit_code(ErrorKind::UnsupportedFormat), 3);
  EXPECT_EQ(exit_code(ErrorKind::DimensionInconsistency), 3);
  EXPECT_EQ(exit_code(ErrorKind::DegenerateMask), 4);
  EXPECT_EQ(exit_code(ErrorKind::Divergence), 5);
  EXPECT_EQ(exit_code(ErrorKind::Geometry), 6);
  EXPECT_EQ(exit_code(ErrorKind::DegenerateRender), 6);
}

TEST_F(PipelineTest, WritesEveryArtifact) {
  const auto art = run_pipeline(cfg);
  EXPECT_EQ(listing(cfg.output_dir),
            (std::set<std::string>{"mesh.obj", "completed.png", "render.png", "coverage.pgm",
                                   "depth.bin", "contour_true.pgm", "contour_syn.pgm",
                                   "contour_goal.pgm", "fit_report.json"}));
  EXPECT_EQ(art.all().size(), 9u);
  for (const auto& p : art.all()) EXPECT_TRUE(fs::exists(p)) << p;
  EXPECT_EQ(load_depth(art.depth).width(), kSize);
  EXPECT_EQ(load_image(art.coverage).channels(), 1);
  EXPECT_GT(load_obj(art.mesh_obj).positions.size(), 0u);

  const auto report = nlohmann::json::parse(test::slurp(art.fit_report));
  EXPECT_EQ(report["basis_vertices"], 64);
  EXPECT_TRUE(report["repro_seed"].is_null());
  EXPECT_EQ(report["fit"]["loss_trace"].size(), report["fit"]["iterations"].get<std::size_t>() + 1);
  EXPECT_EQ(report["params"].size(), 239u);
  // no staging directories survive
  for (const auto& name : listing(dir.path())) EXPECT_EQ(name.find(".out.staging"), std::string::npos);
}

TEST_F(PipelineTest, UnmaskedPixelsSurviveInpainting) {
  cfg.emit = {Emit::Render};
  const auto art = run_pipeline(cfg);
  const Image completed = load_image(art.completed_image);
  const Image original = load_image(cfg.input_image);
  for (int y = 0; y < kSize; ++y)
    for (int x = 0; x < kSize; ++x)
      if (!mask.occluded(x, y)) {
        for (int c = 0; c < 3; ++c) ASSERT_EQ(completed.at(x, y, c), original.at(x, y, c));
      }
}

TEST_F(PipelineTest, EmitSubsetWritesOnlyThat) {
  cfg.emit = {Emit::Obj};
  run_pipeline(cfg);
  EXPECT_EQ(listing(cfg.output_dir), std::set<std::string>{"mesh.obj"});
}

TEST_F(PipelineTest, FullyOccludedMaskExitsFourWithoutArtifacts) {
  save_mask(Mask(kSize, kSize, true), cfg.mask);
  std::ostringstream err;
  EXPECT_EQ(run_pipeline_main(cfg, {}, err), 4);
  EXPECT_TRUE(listing(cfg.output_dir).empty());
  const auto line = err.str();
  ASSERT_EQ(line.rfind("error: ", 0), 0u);
  const auto j = nlohmann::json::parse(line.substr(7));
  EXPECT_EQ(j["kind"], "degenerate_mask");
  EXPECT_EQ(j["stage"], "mask");
  EXPECT_EQ(j["exit_code"], 4);
}

TEST_F(PipelineTest, FailureCodes) {
  auto c = cfg;
  c.input_image = dir.path() / "nope.png";
  EXPECT_EQ(code_of(c), 3);

  c = cfg;
  c.raster_width = 48;
  EXPECT_EQ(code_of(c), 2);

  c = cfg;
  c.basis = (dir.path() / "missing.bin").string();
  EXPECT_EQ(code_of(c), 3);

  c = cfg;
  c.fit.step_size = -1.0;
  EXPECT_EQ(code_of(c), 2);

  c = cfg;
  c.inpaint_mode = InpaintMode::External;
  c.completed_image = dir.path() / "absent.png";
  EXPECT_EQ(code_of(c), 3);

  save_image(Image(kSize, kSize + 1, 1), dir.path() / "tall.pgm");
  c = cfg;
  c.mask = dir.path() / "tall.pgm";
  EXPECT_EQ(code_of(c), 2);

  EXPECT_TRUE(listing(cfg.output_dir).empty());
}

TEST_F(PipelineTest, DeterministicApartFromWallTime) {
  cfg.fit.threads = 2;
  cfg.fit.gradient = GradientMode::Hybrid;
  cfg.fit.max_iters = 3;
  const auto a = run_pipeline(cfg);
  auto second = cfg;
  second.output_dir = dir.path() / "out2";
  const auto b = run_pipeline(second);
  const auto files_a = a.all(), files_b = b.all();
  ASSERT_EQ(files_a.size(), files_b.size());
  for (std::size_t i = 0; i < files_a.size(); ++i) {
    if (files_a[i].filename() == "fit_report.json") continue;
    EXPECT_EQ(test::slurp(files_a[i]), test::slurp(files_b[i])) << files_a[i];
  }
  auto ja = nlohmann::json::parse(test::slurp(a.fit_report));
  auto jb = nlohmann::json::parse(test::slurp(b.fit_report));
  ja["fit"].erase("wall_ms");
  jb["fit"].erase("wall_ms");
  ja["config"].erase("output_dir");
  jb["config"].erase("output_dir");
  EXPECT_EQ(ja, jb);
}

TEST_F(PipelineTest, FailedExportLeavesNoPartialOutput) {
  RunOptions opts;
  int calls = 0;
  opts.after_write = [&](const std::string& name) {
    ++calls;
    if (name == "depth.bin") throw Error(ErrorKind::Io, "simulated crash");
  };
  EXPECT_EQ(code_of(cfg, opts), 3);
  EXPECT_GE(calls, 3);
  EXPECT_TRUE(listing(cfg.output_dir).empty());
  for (const auto& name : listing(dir.path())) EXPECT_EQ(name.find("staging"), std::string::npos) << name;
}

TEST_F(PipelineTest, ExternalCompletionFillsOnlyTheHole) {
  save_image(Image(kSize, kSize, 3, 1.0), dir.path() / "white.png");
  cfg.inpaint_mode = InpaintMode::External;
  cfg.completed_image = dir.path() / "white.png";
  cfg.emit = {Emit::Render};
  const Image completed = load_image(run_pipeline(cfg).completed_image);
  const Image original = load_image(cfg.input_image);
  for (int y = 0; y < kSize; ++y)
    for (int x = 0; x < kSize; ++x)
      for (int c = 0; c < 3; ++c)
        ASSERT_EQ(completed.at(x, y, c), mask.occluded(x, y) ? 1.0 : original.at(x, y, c));
}

TEST_F(PipelineTest, ReproSeedIsRecordedAndSelectsTheBasis) {
  ::setenv("REPRO_SEED", "5", 1);
  cfg.emit = {Emit::Report};
  const auto art = run_pipeline(cfg);
  const auto j = nlohmann::json::parse(test::slurp(art.fit_report));
  EXPECT_EQ(j["repro_seed"], 5);
  const auto seeded = resolve_basis("synthetic:64");
  ::unsetenv("REPRO_SEED");
  const auto plain = resolve_basis("synthetic:64");
  EXPECT_NE(seeded.mean_shape, plain.mean_shape);
  EXPECT_EQ(plain.mean_shape, make_synthetic_basis(64, 0).mean_shape);
  ::setenv("REPRO_SEED", "abc", 1);
  EXPECT_EQ(code_of(cfg), 2);
  ::unsetenv("REPRO_SEED");
}

TEST_F(PipelineTest, ConfigFileRoundTrip) {
  const fs::path file = dir.path() / "config.json";
  auto j = to_json(cfg);
  j["input_image"] = "target.png";
  j["mask"] = "mask.pgm";
  j["output_dir"] = "out";
  std::ofstream(file) << j.dump(2);
  const auto loaded = load_config(file);
  EXPECT_EQ(loaded.input_image, cfg.input_image);
  EXPECT_EQ(loaded.output_dir, cfg.output_dir);
  EXPECT_EQ(loaded.fit.max_iters, 8);
  EXPECT_EQ(code_of(loaded), 0);
}
