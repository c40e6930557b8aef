#pragma once

#include <cstring>
#include <fstream>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "df/common.hpp"
#include "df/models.hpp"
#include "df/rng.hpp"

// Simulated disc tracking: a red target disc pulled towards the image
// center among randomly colored distractor discs, rasterized to RGB frames.
// States are (p_x, p_y, v_x, v_y) in image-centered pixel coordinates
// (x right, y down).

namespace df {

enum class RegimeKind { kConstantNoise, kHeteroscedasticNoise, kCorrelatedNoise };

// The correlated ground-truth process noise covariance.
inline Eigen::Matrix4d correlated_q_gt() {
  Eigen::Matrix4d q;
  q << 9.0, -3.6, 1.2, 5.4,
      -3.6, 9.0, -0.6, 0.0,
       1.2, -0.6, 4.0, 0.0,
       5.4, 0.0, 0.0, 4.0;
  return q;
}

struct NoiseRegime {
  RegimeKind kind = RegimeKind::kConstantNoise;
  double sigma_p = 3.0;
  double sigma_v = 2.0;
  Eigen::Matrix4d q_full = correlated_q_gt();

  // Covariance used as ground truth in noise-metric comparisons. For the
  // heteroscedastic regime this is the outer-band (base) covariance.
  Eigen::Matrix4d ground_truth_q() const {
    if (kind == RegimeKind::kCorrelatedNoise) return q_full;
    Eigen::Matrix4d q = Eigen::Matrix4d::Zero();
    q(0, 0) = q(1, 1) = sigma_p * sigma_p;
    q(2, 2) = q(3, 3) = sigma_v * sigma_v;
    return q;
  }
};

// Velocity-noise schedule for the heteroscedastic regime: three bands,
// larger noise closer to the origin.
inline double hetero_sigma_v(const Eigen::Vector2d& p, double base_sigma_v) {
  const double r = p.norm();
  if (r < 15.0) return 3.0 * base_sigma_v;
  if (r < 30.0) return 2.0 * base_sigma_v;
  return base_sigma_v;
}

struct DiscState {
  Eigen::Vector2d p = Eigen::Vector2d::Zero();
  Eigen::Vector2d v = Eigen::Vector2d::Zero();
};

namespace detail {

inline double sgn(double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); }

// Noise draw for one step; always consumes exactly four normals.
inline Eigen::Vector4d draw_process_noise(const NoiseRegime& regime,
                                          const Eigen::Vector2d& p, Rng& rng) {
  Eigen::Vector4d eta;
  for (int i = 0; i < 4; ++i) eta[i] = rng.normal();
  switch (regime.kind) {
    case RegimeKind::kConstantNoise:
      return Eigen::Vector4d(regime.sigma_p * eta[0], regime.sigma_p * eta[1],
                             regime.sigma_v * eta[2], regime.sigma_v * eta[3]);
    case RegimeKind::kHeteroscedasticNoise: {
      const double sv = hetero_sigma_v(p, regime.sigma_v);
      return Eigen::Vector4d(regime.sigma_p * eta[0], regime.sigma_p * eta[1],
                             sv * eta[2], sv * eta[3]);
    }
    case RegimeKind::kCorrelatedNoise: {
      Eigen::LLT<Eigen::Matrix4d> llt(regime.q_full);
      return llt.matrixL() * eta;
    }
  }
  throw Error("regime: bad kind");
}

}  // namespace detail

// One dynamics step with process noise. Arithmetic runs in double but the
// result is rounded to float32, matching the stored trajectories so that
// replaying from a stored state reproduces the records exactly.
inline DiscState simulate_step(const DiscState& s, const NoiseRegime& regime,
                               Rng& rng) {
  const Eigen::Vector4d q = detail::draw_process_noise(regime, s.p, rng);
  DiscState next;
  next.p = s.p + s.v + q.head<2>();
  for (int i = 0; i < 2; ++i) {
    next.v[i] = s.v[i] - kDiscPull * s.p[i] -
                kDiscDrag * s.v[i] * s.v[i] * detail::sgn(s.v[i]) + q[2 + i];
  }
  for (int i = 0; i < 2; ++i) {
    next.p[i] = double(float(next.p[i]));
    next.v[i] = double(float(next.v[i]));
  }
  return next;
}

// States live in world pixels spanning +- world_size / 2; frames render a
// view of that world at image_size x image_size, so smaller images are
// downscaled views of the same dynamics (radii scale at render time).
struct SceneSpec {
  int image_size = 100;
  double world_size = 100.0;
  int num_distractors = 15;
  double target_radius = 7.0;  // world pixels
  double distractor_radius_min = 3.0;
  double distractor_radius_max = 10.0;

  double render_scale() const { return image_size / world_size; }

  void validate() const {
    if (image_size < 16) throw ConfigError("scene: image size must be >= 16");
    if (world_size <= 0) throw ConfigError("scene: world size must be positive");
    if (target_radius <= 0 || distractor_radius_min <= 0)
      throw ConfigError("scene: radii must be positive");
  }
};

// Desk-scale preset: a 32x32 view of the standard 100-pixel world.
inline SceneSpec desk_scene() {
  SceneSpec scene;
  scene.image_size = 32;
  scene.world_size = 100.0;
  scene.num_distractors = 5;
  return scene;
}

struct Distractor {
  DiscState state;
  double radius = 3.0;
  std::uint8_t rgb[3] = {0, 255, 0};
};

namespace detail {

// Hue in [0,1) to RGB at full saturation/value.
inline void hue_to_rgb(double h, std::uint8_t* rgb) {
  const double x = 1.0 - std::abs(std::fmod(h * 6.0, 2.0) - 1.0);
  double r = 0, g = 0, b = 0;
  const int k = int(h * 6.0) % 6;
  switch (k) {
    case 0: r = 1; g = x; break;
    case 1: r = x; g = 1; break;
    case 2: g = 1; b = x; break;
    case 3: g = x; b = 1; break;
    case 4: r = x; b = 1; break;
    default: r = 1; b = x; break;
  }
  rgb[0] = std::uint8_t(255.0 * r);
  rgb[1] = std::uint8_t(255.0 * g);
  rgb[2] = std::uint8_t(255.0 * b);
}

}  // namespace detail

// Rasterizes one frame: red target first, distractors on top in their
// fixed per-sequence order. Hard-edged discs (pixel-center test) keep the
// visible-pixel count exact. Returns the number of target pixels that are
// inside the image and not covered by any distractor.
inline int render_frame(const DiscState& target, const SceneSpec& scene,
                        const std::vector<Distractor>& distractors,
                        std::uint8_t* image) {
  const int size = scene.image_size;
  const double scale = scene.render_scale();
  const double half = (size - 1) / 2.0;
  std::memset(image, 0, std::size_t(size) * size * 3);

  // world coordinates -> view pixels
  auto draw_disc = [&](const Eigen::Vector2d& center, double world_radius,
                       const std::uint8_t* rgb) {
    const double radius = world_radius * scale;
    const double cx = center.x() * scale + half, cy = center.y() * scale + half;
    const int x0 = std::max(0, int(std::floor(cx - radius)));
    const int x1 = std::min(size - 1, int(std::ceil(cx + radius)));
    const int y0 = std::max(0, int(std::floor(cy - radius)));
    const int y1 = std::min(size - 1, int(std::ceil(cy + radius)));
    const double r2 = radius * radius;
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dx = x - cx, dy = y - cy;
        if (dx * dx + dy * dy <= r2) {
          std::uint8_t* px = image + (std::size_t(y) * size + x) * 3;
          px[0] = rgb[0];
          px[1] = rgb[1];
          px[2] = rgb[2];
        }
      }
  };

  const std::uint8_t red[3] = {255, 0, 0};
  draw_disc(target.p, scene.target_radius, red);
  for (const auto& d : distractors) draw_disc(d.state.p, d.radius, d.rgb);

  // Visibility: inside bounds, inside the target disc, not inside any
  // distractor (computed geometrically in view pixels, independent of
  // colors).
  int visible = 0;
  const double tr = scene.target_radius * scale;
  const double cx = target.p.x() * scale + half, cy = target.p.y() * scale + half;
  const double r2 = tr * tr;
  const int x0 = std::max(0, int(std::floor(cx - tr)));
  const int x1 = std::min(size - 1, int(std::ceil(cx + tr)));
  const int y0 = std::max(0, int(std::floor(cy - tr)));
  const int y1 = std::min(size - 1, int(std::ceil(cy + tr)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double dx = x - cx, dy = y - cy;
      if (dx * dx + dy * dy > r2) continue;
      bool covered = false;
      for (const auto& d : distractors) {
        const double dr = d.radius * scale;
        const double ddx = x - (d.state.p.x() * scale + half);
        const double ddy = y - (d.state.p.y() * scale + half);
        if (ddx * ddx + ddy * ddy <= dr * dr) {
          covered = true;
          break;
        }
      }
      if (!covered) ++visible;
    }
  return visible;
}

// ---------------------------------------------------------------------------
// Sequences and the dataset container

struct SequenceRecord {
  Eigen::Matrix<float, Eigen::Dynamic, 4, Eigen::RowMajor> states;  // (T+1, 4)
  std::vector<std::uint8_t> images;                                 // T*H*W*3
  std::vector<std::uint16_t> visible;                               // T
  int steps() const { return int(visible.size()); }
};

struct DatasetConfig {
  int train_count = 2400;
  int val_count = 300;
  int test_count = 303;
  int steps = 50;
  SceneSpec scene;
  NoiseRegime regime;
  double init_pos_frac = 0.75;  // p0 uniform in +- frac * half-size
  double init_vel_sigma = 3.0;
  std::uint64_t seed = 0;
};

inline constexpr char kDatasetMagic[8] = {'D', 'F', 'K', 'I', 'T', 'D', 'S', '1'};

namespace detail {

// Derived random streams per sequence. Stream ids: 0 target noise,
// 1 scene (initial states, distractor draws), 2 distractor noise.
inline Rng sequence_stream(std::uint64_t seed, int split, int index, int which) {
  return Rng::derive(seed, {std::uint64_t(split) + 11, std::uint64_t(index),
                            std::uint64_t(which) + 101});
}

inline DiscState draw_initial_state(const DatasetConfig& cfg, Rng& rng) {
  const double half = cfg.scene.world_size / 2.0;
  DiscState s;
  s.p.x() = rng.uniform(-cfg.init_pos_frac * half, cfg.init_pos_frac * half);
  s.p.y() = rng.uniform(-cfg.init_pos_frac * half, cfg.init_pos_frac * half);
  s.v.x() = cfg.init_vel_sigma * rng.normal();
  s.v.y() = cfg.init_vel_sigma * rng.normal();
  for (int i = 0; i < 2; ++i) {
    s.p[i] = double(float(s.p[i]));
    s.v[i] = double(float(s.v[i]));
  }
  return s;
}

}  // namespace detail

// Generates one sequence deterministically from (seed, split, index).
inline SequenceRecord generate_sequence(const DatasetConfig& cfg, int split,
                                        int index) {
  Rng target_rng = detail::sequence_stream(cfg.seed, split, index, 0);
  Rng scene_rng = detail::sequence_stream(cfg.seed, split, index, 1);
  Rng distractor_rng = detail::sequence_stream(cfg.seed, split, index, 2);

  DiscState target = detail::draw_initial_state(cfg, scene_rng);
  std::vector<Distractor> distractors(std::size_t(cfg.scene.num_distractors));
  for (auto& d : distractors) {
    d.state = detail::draw_initial_state(cfg, scene_rng);
    d.radius = scene_rng.uniform(cfg.scene.distractor_radius_min,
                                 cfg.scene.distractor_radius_max);
    detail::hue_to_rgb(scene_rng.uniform(0.15, 0.85), d.rgb);
  }

  const int size = cfg.scene.image_size;
  SequenceRecord rec;
  rec.states.resize(cfg.steps + 1, 4);
  rec.images.resize(std::size_t(cfg.steps) * size * size * 3);
  rec.visible.resize(std::size_t(cfg.steps));
  rec.states.row(0) << float(target.p.x()), float(target.p.y()),
      float(target.v.x()), float(target.v.y());
  for (int t = 0; t < cfg.steps; ++t) {
    target = simulate_step(target, cfg.regime, target_rng);
    for (auto& d : distractors)
      d.state = simulate_step(d.state, cfg.regime, distractor_rng);
    rec.states.row(t + 1) << float(target.p.x()), float(target.p.y()),
        float(target.v.x()), float(target.v.y());
    const int visible = render_frame(
        target, cfg.scene, distractors,
        rec.images.data() + std::size_t(t) * size * size * 3);
    rec.visible[std::size_t(t)] = std::uint16_t(std::min(visible, 65535));
  }
  return rec;
}

inline nlohmann::json dataset_manifest(const DatasetConfig& cfg,
                                       const std::string& split, int count) {
  nlohmann::json regime;
  regime["sigma_p"] = cfg.regime.sigma_p;
  regime["sigma_v"] = cfg.regime.sigma_v;
  switch (cfg.regime.kind) {
    case RegimeKind::kConstantNoise: regime["kind"] = "constant"; break;
    case RegimeKind::kHeteroscedasticNoise: regime["kind"] = "heteroscedastic"; break;
    case RegimeKind::kCorrelatedNoise: {
      regime["kind"] = "correlated";
      auto rows = nlohmann::json::array();
      for (int i = 0; i < 4; ++i) {
        auto row = nlohmann::json::array();
        for (int j = 0; j < 4; ++j) row.push_back(cfg.regime.q_full(i, j));
        rows.push_back(row);
      }
      regime["q_full"] = rows;
      break;
    }
  }
  nlohmann::json scene;
  scene["image_size"] = cfg.scene.image_size;
  scene["world_size"] = cfg.scene.world_size;
  scene["num_distractors"] = cfg.scene.num_distractors;
  scene["target_radius"] = cfg.scene.target_radius;
  scene["distractor_radius_min"] = cfg.scene.distractor_radius_min;
  scene["distractor_radius_max"] = cfg.scene.distractor_radius_max;
  nlohmann::json m;
  m["format"] = "dfkit-dataset";
  m["version"] = 1;
  m["task"] = "disc-tracking";
  m["split"] = split;
  m["count"] = count;
  m["steps"] = cfg.steps;
  m["regime"] = regime;
  m["scene"] = scene;
  m["seed"] = cfg.seed;
  m["init_pos_frac"] = cfg.init_pos_frac;
  m["init_vel_sigma"] = cfg.init_vel_sigma;
  return m;
}

namespace detail {

inline void write_u32(std::ofstream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}

inline void write_field(std::ofstream& out, const void* data, std::size_t bytes) {
  write_u32(out, std::uint32_t(bytes));
  out.write(reinterpret_cast<const char*>(data), std::streamsize(bytes));
}

}  // namespace detail

// Writes one split file: magic, manifest length, JSON manifest, then per
// sequence three length-prefixed fields (states f32, images u8 RGB,
// visible u16), all little-endian.
inline void write_split(const DatasetConfig& cfg, const std::string& path,
                        const std::string& split, int split_id, int count) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write dataset file: " + path);
  out.write(kDatasetMagic, 8);
  const std::string manifest = dataset_manifest(cfg, split, count).dump();
  detail::write_u32(out, std::uint32_t(manifest.size()));
  out.write(manifest.data(), std::streamsize(manifest.size()));
  for (int i = 0; i < count; ++i) {
    SequenceRecord rec = generate_sequence(cfg, split_id, i);
    detail::write_field(out, rec.states.data(),
                        std::size_t(rec.states.size()) * sizeof(float));
    detail::write_field(out, rec.images.data(), rec.images.size());
    detail::write_field(out, rec.visible.data(),
                        rec.visible.size() * sizeof(std::uint16_t));
  }
  if (!out) throw DataError("failed writing dataset file: " + path);
}

// Generates train/val/test split files under out_dir.
inline void generate_dataset(const DatasetConfig& cfg, const std::string& out_dir) {
  cfg.scene.validate();
  write_split(cfg, out_dir + "/train.dfd", "train", 0, cfg.train_count);
  write_split(cfg, out_dir + "/val.dfd", "val", 1, cfg.val_count);
  write_split(cfg, out_dir + "/test.dfd", "test", 2, cfg.test_count);
}

// Reader with lazy per-sequence decoding (thread-safe) and optional
// whole-file preloading for training loops.
class SequenceDataset {
 public:
  explicit SequenceDataset(const std::string& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open dataset: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kDatasetMagic, 8) != 0)
      throw DataError("not a dfkit dataset: " + path);
    std::uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 4);
    std::string text(len, '\0');
    in.read(text.data(), len);
    if (!in) throw DataError("truncated dataset manifest: " + path);
    manifest_ = nlohmann::json::parse(text);
    count_ = manifest_["count"].get<int>();
    steps_ = manifest_["steps"].get<int>();
    image_size_ = manifest_["scene"]["image_size"].get<int>();
    offsets_.reserve(std::size_t(count_));
    for (int i = 0; i < count_; ++i) {
      offsets_.push_back(in.tellg());
      for (int f = 0; f < 3; ++f) {
        std::uint32_t flen = 0;
        in.read(reinterpret_cast<char*>(&flen), 4);
        in.seekg(flen, std::ios::cur);
      }
      if (!in) throw DataError("truncated dataset records: " + path);
    }
    cache_.resize(std::size_t(count_));
  }

  int count() const { return count_; }
  int steps() const { return steps_; }
  int image_size() const { return image_size_; }
  const nlohmann::json& manifest() const { return manifest_; }

  Eigen::Matrix4d ground_truth_q() const {
    const auto& regime = manifest_["regime"];
    if (regime["kind"] == "correlated") {
      Eigen::Matrix4d q;
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) q(i, j) = regime["q_full"][i][j].get<double>();
      return q;
    }
    Eigen::Matrix4d q = Eigen::Matrix4d::Zero();
    const double sp = regime["sigma_p"].get<double>();
    const double sv = regime["sigma_v"].get<double>();
    q(0, 0) = q(1, 1) = sp * sp;
    q(2, 2) = q(3, 3) = sv * sv;
    return q;
  }

  std::shared_ptr<const SequenceRecord> record(int index) const {
    {
      std::lock_guard<std::mutex> lock(mu_);
      if (cache_[std::size_t(index)]) return cache_[std::size_t(index)];
    }
    auto rec = std::make_shared<SequenceRecord>(load(index));
    std::lock_guard<std::mutex> lock(mu_);
    if (!cache_[std::size_t(index)]) cache_[std::size_t(index)] = rec;
    return cache_[std::size_t(index)];
  }

  void preload_all() const {
    for (int i = 0; i < count_; ++i) record(i);
  }

 private:
  SequenceRecord load(int index) const {
    std::ifstream in(path_, std::ios::binary);
    in.seekg(offsets_[std::size_t(index)]);
    SequenceRecord rec;
    auto read_len = [&in]() {
      std::uint32_t v = 0;
      in.read(reinterpret_cast<char*>(&v), 4);
      return v;
    };
    const std::uint32_t states_bytes = read_len();
    rec.states.resize(steps_ + 1, 4);
    if (states_bytes != std::size_t(rec.states.size()) * sizeof(float))
      throw DataError("dataset record: bad states field size");
    in.read(reinterpret_cast<char*>(rec.states.data()), states_bytes);
    const std::uint32_t image_bytes = read_len();
    rec.images.resize(image_bytes);
    in.read(reinterpret_cast<char*>(rec.images.data()), image_bytes);
    const std::uint32_t vis_bytes = read_len();
    rec.visible.resize(vis_bytes / sizeof(std::uint16_t));
    in.read(reinterpret_cast<char*>(rec.visible.data()), vis_bytes);
    if (!in) throw DataError("dataset record: truncated");
    return rec;
  }

  std::string path_;
  nlohmann::json manifest_;
  int count_ = 0, steps_ = 0, image_size_ = 0;
  std::vector<std::streampos> offsets_;
  mutable std::mutex mu_;
  mutable std::vector<std::shared_ptr<const SequenceRecord>> cache_;
};

// Image tensor for a frame: float values in [0, 1], shape (H, W, 3).
template <typename S>
Tensor<S> frame_tensor(const SequenceRecord& rec, int image_size, int t) {
  const std::size_t pixels = std::size_t(image_size) * image_size * 3;
  VecX<S> v;
  v.resize(Eigen::Index(pixels));
  const std::uint8_t* src = rec.images.data() + std::size_t(t) * pixels;
  for (std::size_t i = 0; i < pixels; ++i) v[Eigen::Index(i)] = S(src[i]) / S(255);
  return Tensor<S>::constant({image_size, image_size, 3}, std::move(v));
}

template <typename S>
VecX<S> state_vector(const SequenceRecord& rec, int t) {
  VecX<S> x(4);
  for (int i = 0; i < 4; ++i) x[i] = S(rec.states(t, i));
  return x;
}

}  // namespace df
