#include <cstdio>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "df/discworld.hpp"

using df::DatasetConfig;
using df::DiscState;
using df::NoiseRegime;
using df::RegimeKind;
using df::SceneSpec;

namespace {

DatasetConfig tiny_config() {
  DatasetConfig cfg;
  cfg.train_count = 3;
  cfg.val_count = 2;
  cfg.test_count = 2;
  cfg.steps = 10;
  cfg.scene = df::desk_scene();
  cfg.regime.sigma_p = 3.0;
  cfg.regime.sigma_v = 2.0;
  cfg.seed = 42;
  return cfg;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST(SimulateStep, NoiselessMatchesHandValues) {
  NoiseRegime regime;
  regime.sigma_p = 0.0;
  regime.sigma_v = 0.0;
  DiscState s;
  s.p << 10, 0;
  s.v << 2, 0;
  df::Rng rng(1);
  DiscState next = df::simulate_step(s, regime, rng);
  EXPECT_NEAR(next.p.x(), 12.0, 1e-6);
  EXPECT_NEAR(next.p.y(), 0.0, 1e-12);
  EXPECT_NEAR(next.v.x(), 1.47, 1e-6);
}

TEST(SimulateStep, CorrelatedNoiseMatchesQgt) {
  NoiseRegime regime;
  regime.kind = RegimeKind::kCorrelatedNoise;
  df::Rng rng(7);
  const int count = 100000;
  Eigen::Matrix4d accum = Eigen::Matrix4d::Zero();
  DiscState origin;
  for (int i = 0; i < count; ++i) {
    Eigen::Vector4d q = df::detail::draw_process_noise(regime, origin.p, rng);
    accum += q * q.transpose();
  }
  accum /= count;
  const Eigen::Matrix4d gt = df::correlated_q_gt();
  EXPECT_LT((accum - gt).norm() / gt.norm(), 0.05);
}

TEST(SimulateStep, NoiselessTrajectoriesStayBounded) {
  NoiseRegime regime;
  regime.sigma_p = regime.sigma_v = 0.0;
  df::Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    DiscState s;
    s.p << rng.uniform(-50, 50), rng.uniform(-50, 50);
    s.v << rng.uniform(-20, 20), rng.uniform(-20, 20);
    double max_norm = 0;
    for (int t = 0; t < 1000; ++t) {
      s = df::simulate_step(s, regime, rng);
      max_norm = std::max(max_norm, s.p.norm());
      ASSERT_TRUE(std::isfinite(s.p.x()) && std::isfinite(s.v.x()));
    }
    EXPECT_LT(max_norm, 1e4);
  }
}

TEST(HeteroSigma, BandsAndMonotonicity) {
  const double base = 2.0;
  EXPECT_DOUBLE_EQ(df::hetero_sigma_v(Eigen::Vector2d(0, 0), base), 3.0 * base);
  EXPECT_DOUBLE_EQ(df::hetero_sigma_v(Eigen::Vector2d(40, 0), base), base);
  double prev = 1e9;
  for (double r = 0.0; r < 50.0; r += 0.5) {
    const double sv = df::hetero_sigma_v(Eigen::Vector2d(r, 0), base);
    EXPECT_LE(sv, prev);
    prev = sv;
  }
}

TEST(RenderFrame, VisibilityCases) {
  SceneSpec scene = df::desk_scene();
  std::vector<std::uint8_t> image(std::size_t(scene.image_size) *
                                  scene.image_size * 3);

  // centered target, no distractors: visible approx pi (r * scale)^2
  DiscState target;
  int visible = df::render_frame(target, scene, {}, image.data());
  const double r_view = scene.target_radius * scene.render_scale();
  const double area = 3.14159265 * r_view * r_view;
  EXPECT_NEAR(visible, area, 0.45 * area);
  EXPECT_GT(visible, 0);

  // target far outside the image
  DiscState outside;
  outside.p << 1000, 1000;
  EXPECT_EQ(df::render_frame(outside, scene, {}, image.data()), 0);

  // distractor exactly covering the target
  df::Distractor blocker;
  blocker.state.p = target.p;
  blocker.radius = scene.target_radius + 2.0;
  EXPECT_EQ(df::render_frame(target, scene, {blocker}, image.data()), 0);

  // target pixel color is red where visible
  df::render_frame(target, scene, {}, image.data());
  const int c = scene.image_size / 2;
  const std::uint8_t* px =
      image.data() + (std::size_t(c) * scene.image_size + c) * 3;
  EXPECT_EQ(px[0], 255);
  EXPECT_EQ(px[1], 0);
}

TEST(RenderFrame, VisibleFractionTracksGeometricCoverage) {
  SceneSpec scene;
  scene.image_size = 64;
  scene.world_size = 64.0;
  scene.target_radius = 6.0;
  df::Rng rng(11);
  DiscState target;  // centered
  std::vector<std::uint8_t> image(std::size_t(64) * 64 * 3);
  const int full = df::render_frame(target, scene, {}, image.data());
  for (int trial = 0; trial < 50; ++trial) {
    df::Distractor d;
    d.state.p << rng.uniform(-10, 10), rng.uniform(-10, 10);
    d.radius = rng.uniform(3.0, 8.0);
    const int visible = df::render_frame(target, scene, {d}, image.data());
    // geometric covering fraction by pixel-center counting oracle
    int covered = 0, inside = 0;
    const double half = (scene.image_size - 1) / 2.0;
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        const double px = x - half, py = y - half;
        if (px * px + py * py <= scene.target_radius * scene.target_radius) {
          ++inside;
          const double ddx = px - d.state.p.x(), ddy = py - d.state.p.y();
          if (ddx * ddx + ddy * ddy <= d.radius * d.radius) ++covered;
        }
      }
    const double f = double(covered) / inside;
    EXPECT_NEAR(double(visible) / full, 1.0 - f, 0.15);
  }
}

TEST(Dataset, DeterministicAndReplayable) {
  namespace fs = std::filesystem;
  DatasetConfig cfg = tiny_config();
  fs::create_directories("tmp_ds_a");
  fs::create_directories("tmp_ds_b");
  df::generate_dataset(cfg, "tmp_ds_a");
  df::generate_dataset(cfg, "tmp_ds_b");
  for (const char* split : {"train.dfd", "val.dfd", "test.dfd"}) {
    EXPECT_EQ(slurp(std::string("tmp_ds_a/") + split),
              slurp(std::string("tmp_ds_b/") + split))
        << split;
  }

  df::SequenceDataset ds("tmp_ds_a/train.dfd");
  EXPECT_EQ(ds.count(), 3);
  EXPECT_EQ(ds.steps(), 10);
  EXPECT_EQ(ds.image_size(), 32);

  // replay: re-simulating from states[0] with the stored noise stream
  // reproduces the recorded states exactly
  for (int i = 0; i < ds.count(); ++i) {
    auto rec = ds.record(i);
    df::Rng stream = df::detail::sequence_stream(cfg.seed, 0, i, 0);
    DiscState s;
    s.p << rec->states(0, 0), rec->states(0, 1);
    s.v << rec->states(0, 2), rec->states(0, 3);
    for (int t = 1; t <= 10; ++t) {
      s = df::simulate_step(s, cfg.regime, stream);
      for (int j = 0; j < 2; ++j) {
        ASSERT_EQ(float(s.p[j]), rec->states(t, j)) << "seq " << i << " t " << t;
        ASSERT_EQ(float(s.v[j]), rec->states(t, 2 + j));
      }
    }
  }

  // visible pixels never exceed the full disc pixel count
  std::vector<std::uint8_t> image(std::size_t(32) * 32 * 3);
  DiscState centered;
  const int full = df::render_frame(centered, cfg.scene, {}, image.data());
  for (int i = 0; i < ds.count(); ++i) {
    auto rec = ds.record(i);
    for (int t = 0; t < 10; ++t) EXPECT_LE(rec->visible[t], full + 4);
  }

  fs::remove_all("tmp_ds_a");
  fs::remove_all("tmp_ds_b");
}

TEST(Dataset, GroundTruthQFromManifest) {
  namespace fs = std::filesystem;
  DatasetConfig cfg = tiny_config();
  cfg.regime.kind = RegimeKind::kCorrelatedNoise;
  fs::create_directories("tmp_ds_c");
  df::generate_dataset(cfg, "tmp_ds_c");
  df::SequenceDataset ds("tmp_ds_c/test.dfd");
  EXPECT_TRUE(ds.ground_truth_q().isApprox(df::correlated_q_gt(), 1e-12));
  fs::remove_all("tmp_ds_c");
}
