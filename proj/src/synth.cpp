#include "msdit/synth.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace msdit {
namespace {

constexpr double kPi = 3.14159265358979323846;

int64_t wrap(int64_t i, int64_t n) { return ((i % n) + n) % n; }

// Signed minimal distance from a to b on a ring of circumference n.
int64_t ring_delta(int64_t a, int64_t b, int64_t n) {
  int64_t d = wrap(a - b, n);
  if (d > n / 2) d -= n;
  return d;
}

bool inside_shape(ShapeKind kind, int64_t y, int64_t x, int64_t cy, int64_t cx, int64_t H,
                  int64_t W) {
  const int64_t dy = ring_delta(y, cy, H);
  const int64_t dx = ring_delta(x, cx, W);
  const int64_t m = std::min(H, W);
  switch (kind) {
    case ShapeKind::square: {
      const int64_t a = std::max<int64_t>(1, m / 6);
      return std::abs(dy) <= a && std::abs(dx) <= a;
    }
    case ShapeKind::disc: {
      const int64_t r = std::max<int64_t>(1, m / 5);
      return dy * dy + dx * dx <= r * r;
    }
    case ShapeKind::bar: {
      const int64_t hy = std::max<int64_t>(1, H / 8);
      const int64_t hx = std::max<int64_t>(2, W / 3);
      return std::abs(dy) <= hy && std::abs(dx) <= hx;
    }
  }
  return false;
}

// Integer per-frame pixel step (dy, dx) for a class trajectory.  `speed`
// must land on the trajectory's integer lattice: whole pixels for axis
// moves, whole diagonal unit steps (magnitude sqrt(2)) for diagonals.
std::array<int64_t, 2> trajectory_step(int class_id, double speed, int direction) {
  const Trajectory traj = class_trajectory(class_id);
  double unit = 1.0;
  if (traj == Trajectory::diagonal) unit = std::sqrt(2.0);
  const double steps = speed / unit;
  const int64_t s = std::llround(steps);
  if (std::abs(steps - static_cast<double>(s)) > 1e-9)
    throw contract_error("make_video: speed " + std::to_string(speed) +
                         " is not an integer number of steps along the trajectory (step unit " +
                         std::to_string(unit) + ")");
  const int64_t d = s * direction;
  switch (traj) {
    case Trajectory::horizontal: return {0, d};
    case Trajectory::vertical: return {d, 0};
    case Trajectory::diagonal: return {d, d};
  }
  return {0, 0};
}

// Base scene: low-amplitude periodic background (integer harmonics, so
// wraparound translation is seamless), one bright shape, and for the noisy
// source tag static per-pixel clutter.  Clamped to [-1, 1].
Tensor<float> compose_base_frame(int class_id, int source_tag, int64_t H, int64_t W, int64_t C,
                                 Rng& rng) {
  std::vector<double> phase(static_cast<size_t>(3 * C));
  for (auto& p : phase) p = rng.uniform() * 2.0 * kPi;
  const int64_t cy = static_cast<int64_t>(rng.below(static_cast<uint64_t>(H)));
  const int64_t cx = static_cast<int64_t>(rng.below(static_cast<uint64_t>(W)));

  Tensor<float> base(Shape{H, W, C});
  float* out = base.data();
  const ShapeKind kind = class_shape(class_id);
  for (int64_t y = 0; y < H; ++y) {
    for (int64_t x = 0; x < W; ++x) {
      const bool in = inside_shape(kind, y, x, cy, cx, H, W);
      // The interior gets per-pixel texture rather than a flat fill: a flat
      // region matches itself under many displacements, which would let the
      // block matcher tie away from the true shift.
      double fill = 0.0;
      if (in) fill = 0.85 + 0.1 * (rng.uniform() * 2.0 - 1.0);
      for (int64_t c = 0; c < C; ++c) {
        double v;
        if (in) {
          v = fill;
        } else {
          const double* ph = phase.data() + 3 * c;
          v = 0.20 * std::sin(2.0 * kPi * static_cast<double>(y) / static_cast<double>(H) +
                              ph[0]) +
              0.20 * std::sin(2.0 * kPi * static_cast<double>(x) / static_cast<double>(W) +
                              ph[1]) +
              0.15 * std::sin(2.0 * kPi * (2.0 * static_cast<double>(y) / static_cast<double>(H) +
                                           2.0 * static_cast<double>(x) / static_cast<double>(W)) +
                              ph[2]);
        }
        out[(y * W + x) * C + c] = static_cast<float>(v);
      }
    }
  }
  if (source_tag == kTagNoisyTexture) {
    for (int64_t i = 0; i < base.numel(); ++i)
      out[i] += static_cast<float>((rng.uniform() * 2.0 - 1.0) * 0.3);
  }
  for (int64_t i = 0; i < base.numel(); ++i) out[i] = std::clamp(out[i], -1.0f, 1.0f);
  return base;
}

void validate_common(int class_id, int source_tag, int64_t T, int64_t H, int64_t W, int64_t C) {
  if (class_id < 0 || class_id >= kNumClasses)
    throw contract_error("make_video: class_id " + std::to_string(class_id) + " not in [0, " +
                         std::to_string(kNumClasses) + ")");
  if (source_tag < 0 || source_tag >= kNumSourceTags)
    throw contract_error("make_video: source_tag " + std::to_string(source_tag) + " not in [0, " +
                         std::to_string(kNumSourceTags) + ")");
  if (T < 1 || H < 4 || W < 4 || C < 1)
    throw contract_error("make_video: need T >= 1, H >= 4, W >= 4, C >= 1");
}

std::string sample_file_name(size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%04zu.f32", i);
  return buf;
}

}  // namespace

SynthSample make_video(int class_id, double speed, int direction, int64_t T, int64_t H, int64_t W,
                       int64_t C, uint64_t seed, int source_tag, double fps) {
  validate_common(class_id, source_tag, T, H, W, C);
  if (speed < 0.0) throw contract_error("make_video: speed must be >= 0");
  if (direction != 1 && direction != -1)
    throw contract_error("make_video: direction must be +1 or -1");
  if (T == 1 && speed > 0.0)
    throw contract_error("make_video: a single-frame sample cannot have speed > 0");

  const auto step = trajectory_step(class_id, speed, direction);
  Rng rng(seed);
  const Tensor<float> base = compose_base_frame(class_id, source_tag, H, W, C, rng);

  SynthSample s;
  s.video.fps = fps;
  s.video.data = Tensor<float>(Shape{T, H, W, C});
  float* out = s.video.data.data();
  const float* b = base.data();
  for (int64_t k = 0; k < T; ++k) {
    // Frame k is the base scene moved k steps: pixel (y, x) shows the base
    // content that started k*step behind it.
    const int64_t oy = wrap(-k * step[0], H);
    const int64_t ox = wrap(-k * step[1], W);
    for (int64_t y = 0; y < H; ++y) {
      const int64_t sy = wrap(y + oy, H);
      for (int64_t x = 0; x < W; ++x) {
        const int64_t sx = wrap(x + ox, W);
        const float* src = b + (sy * W + sx) * C;
        float* dst = out + ((k * H + y) * W + x) * C;
        for (int64_t c = 0; c < C; ++c) dst[c] = src[c];
      }
    }
  }

  s.meta.class_id = class_id;
  s.meta.source_tag = source_tag;
  s.meta.seed = seed;
  s.meta.gt_motion = std::sqrt(static_cast<double>(step[0] * step[0] + step[1] * step[1]));
  return s;
}

SynthSample make_image_sample(int class_id, int64_t H, int64_t W, int64_t C, uint64_t seed,
                              int source_tag, double fps) {
  validate_common(class_id, source_tag, 1, H, W, C);
  Rng rng(seed);
  const Tensor<float> base = compose_base_frame(class_id, source_tag, H, W, C, rng);

  SynthSample s;
  s.video.fps = fps;
  s.video.data = Tensor<float>(Shape{1, H, W, C});
  std::copy_n(base.data(), base.numel(), s.video.data.data());
  s.meta.class_id = class_id;
  s.meta.source_tag = source_tag;
  s.meta.seed = seed;
  s.meta.gt_motion.reset();
  return s;
}

void write_dataset(const std::vector<SynthSample>& samples, const std::string& dir) {
  if (samples.empty()) throw contract_error("write_dataset: no samples");
  const Shape& shape = samples[0].video.data.shape;
  const double fps = samples[0].video.fps;
  for (const auto& s : samples) {
    s.video.validate();
    if (s.video.data.shape != shape)
      throw contract_error("write_dataset: mixed sample shapes, " + shape_str(shape) + " vs " +
                           shape_str(s.video.data.shape));
    if (s.video.fps != fps) throw contract_error("write_dataset: mixed sample fps");
  }

  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw io_error("write_dataset: cannot create directory " + dir + ": " + ec.message());

  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["count"] = samples.size();
  manifest["shape"] = shape;
  manifest["fps"] = fps;
  manifest["samples"] = nlohmann::json::array();
  for (size_t i = 0; i < samples.size(); ++i) {
    const std::string name = sample_file_name(i);
    const std::string path = dir + "/" + name;
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw io_error("write_dataset: cannot open " + path);
    f.write(reinterpret_cast<const char*>(samples[i].video.data.data()),
            static_cast<std::streamsize>(samples[i].video.data.numel() * sizeof(float)));
    if (!f) throw io_error("write_dataset: write failed for " + path);

    nlohmann::json rec;
    rec["file"] = name;
    rec["class_id"] = samples[i].meta.class_id;
    rec["source_tag"] = samples[i].meta.source_tag;
    if (samples[i].meta.gt_motion) rec["gt_motion"] = *samples[i].meta.gt_motion;
    rec["seed"] = samples[i].meta.seed;
    manifest["samples"].push_back(std::move(rec));
  }

  const std::string mpath = dir + "/manifest.json";
  std::ofstream mf(mpath, std::ios::trunc);
  if (!mf) throw io_error("write_dataset: cannot open " + mpath);
  mf << manifest.dump(2) << "\n";
  if (!mf) throw io_error("write_dataset: write failed for " + mpath);
}

Dataset read_dataset(const std::string& dir) {
  const std::string mpath = dir + "/manifest.json";
  std::ifstream mf(mpath);
  if (!mf) throw io_error("read_dataset: cannot open " + mpath);
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw io_error("read_dataset: malformed " + mpath + ": " + e.what());
  }

  Dataset ds;
  try {
    if (manifest.at("version").get<int>() != 1)
      throw io_error("read_dataset: unsupported manifest version in " + mpath);
    const auto dims = manifest.at("shape").get<std::vector<int64_t>>();
    ds.shape = Shape(dims.begin(), dims.end());
    ds.fps = manifest.at("fps").get<double>();
    const size_t count = manifest.at("count").get<size_t>();
    const auto& recs = manifest.at("samples");
    if (recs.size() != count)
      throw io_error("read_dataset: " + mpath + " declares count " + std::to_string(count) +
                     " but lists " + std::to_string(recs.size()) + " samples");
    if (ds.shape.size() != 4)
      throw io_error("read_dataset: " + mpath + " shape must have 4 dims");

    const int64_t numel = shape_numel(ds.shape);
    ds.samples.reserve(count);
    for (const auto& rec : recs) {
      SynthSample s;
      const std::string name = rec.at("file").get<std::string>();
      const std::string path = dir + "/" + name;
      s.meta.class_id = rec.at("class_id").get<int>();
      s.meta.source_tag = rec.at("source_tag").get<int>();
      if (rec.contains("gt_motion") && !rec["gt_motion"].is_null())
        s.meta.gt_motion = rec["gt_motion"].get<double>();
      s.meta.seed = rec.at("seed").get<uint64_t>();

      std::ifstream f(path, std::ios::binary);
      if (!f) throw io_error("read_dataset: cannot open " + path);
      f.seekg(0, std::ios::end);
      const auto bytes = static_cast<int64_t>(f.tellg());
      const int64_t want = numel * static_cast<int64_t>(sizeof(float));
      if (bytes != want)
        throw io_error("read_dataset: " + path + " has " + std::to_string(bytes) +
                       " bytes, want " + std::to_string(want));
      f.seekg(0, std::ios::beg);
      s.video.data = Tensor<float>(ds.shape);
      f.read(reinterpret_cast<char*>(s.video.data.data()),
             static_cast<std::streamsize>(want));
      if (!f) throw io_error("read_dataset: read failed for " + path);
      s.video.fps = ds.fps;
      ds.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw io_error("read_dataset: malformed " + mpath + ": " + e.what());
  }
  return ds;
}

void CorpusSpec::validate() const {
  if (count < 1) throw contract_error("corpus: count must be >= 1");
  if (T < 1 || H < 4 || W < 4 || C < 1)
    throw contract_error("corpus: need T >= 1, H and W >= 4, C >= 1");
  if (!(fps > 0.0)) throw contract_error("corpus: fps must be positive");
  if (max_steps < 0) throw contract_error("corpus: max_steps must be >= 0");
}

Dataset synthesize_corpus(const CorpusSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.shape = {spec.T, spec.H, spec.W, spec.C};
  ds.fps = spec.fps;
  const int64_t speeds = spec.max_steps + 1;
  for (int64_t i = 0; i < spec.count; ++i) {
    const int cls = static_cast<int>(i % kNumClasses);
    const int steps = static_cast<int>((i / kNumClasses) % speeds);
    const int tag = static_cast<int>((i / (kNumClasses * speeds)) % kNumSourceTags);
    const uint64_t sample_seed = Rng::stream(spec.seed, static_cast<uint64_t>(i), 0).bits();
    if (spec.T == 1) {
      ds.samples.push_back(
          make_image_sample(cls, spec.H, spec.W, spec.C, sample_seed, tag, spec.fps));
      continue;
    }
    const double speed = cls % 3 == 2 ? steps * std::sqrt(2.0) : double(steps);
    const int direction = i % 2 == 0 ? 1 : -1;
    ds.samples.push_back(make_video(cls, speed, direction, spec.T, spec.H, spec.W, spec.C,
                                    sample_seed, tag, spec.fps));
  }
  return ds;
}

}  // namespace msdit
