#include "msdit/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

#include "msdit/flow.hpp"
#include "msdit/motion.hpp"

namespace msdit {

std::vector<double> make_time_grid(int64_t steps, double alpha_inf) {
  if (steps < 1) throw contract_error("make_time_grid: steps must be >= 1");
  std::vector<double> grid;
  grid.reserve(static_cast<size_t>(steps) + 1);
  for (int64_t k = 0; k <= steps; ++k)
    grid.push_back(time_shift(static_cast<double>(k) / static_cast<double>(steps), alpha_inf));
  return grid;
}

double negative_motion_at(double t, const GuidanceSpec& g) {
  if (!g.m_pos)
    throw contract_error("negative_motion_at: guidance carries no positive motion");
  return t < g.m_switch ? g.m_neg_low : *g.m_pos;
}

LatentVideo sample_with(const VelocityFn& velocity, const StagePlan& plan, int n_patches,
                        const Shape& video_shape, uint64_t seed, double fps) {
  plan.validate(n_patches);
  if (video_shape.size() != 4)
    throw shape_error("sample: video shape must be [T,H,W,C], got " + shape_str(video_shape));
  for (int64_t d : video_shape)
    if (d < 1) throw shape_error("sample: video shape must be positive, got " +
                                 shape_str(video_shape));

  Rng rng(seed);
  const Tensor<float> x0 = randn<float>(video_shape, rng);
  std::vector<double> acc(x0.v.begin(), x0.v.end());
  const std::vector<double> grid = make_time_grid(plan.steps, plan.alpha_inf);

  Tensor<float> x(video_shape);
  for (size_t k = 0; k + 1 < grid.size(); ++k) {
    const double t = grid[k];
    const double dt = grid[k + 1] - grid[k];
    const int patch_idx = plan.stages[static_cast<size_t>(plan.stage_at(t))].patch_index;

    for (size_t i = 0; i < acc.size(); ++i) x.v[i] = static_cast<float>(acc[i]);
    const Tensor<float> u = velocity(x, t, patch_idx);
    if (u.shape != video_shape)
      throw shape_error("sample: velocity returned " + shape_str(u.shape) + ", want " +
                        shape_str(video_shape));
    check_finite(u, "sample velocity");
    for (size_t i = 0; i < acc.size(); ++i) acc[i] += dt * static_cast<double>(u.v[i]);
  }

  LatentVideo out;
  out.fps = fps;
  out.data = Tensor<float>(video_shape);
  for (size_t i = 0; i < acc.size(); ++i)
    out.data.v[i] = static_cast<float>(std::clamp(acc[i], -1.0, 1.0));
  return out;
}

LatentVideo sample(const Model<float>& model, const StagePlan& plan, const GuidanceSpec& g,
                   const Shape& video_shape, uint64_t seed, double fps) {
  g.validate();
  const int n_patches = static_cast<int>(model.cfg.patches.size());
  plan.validate(n_patches);
  if (video_shape.size() != 4 || video_shape[3] != model.cfg.channels)
    throw shape_error("sample: video shape " + shape_str(video_shape) + " does not carry " +
                      std::to_string(model.cfg.channels) + " channels");

  // Patch indices for every scale the plan touches; fails fast on shapes the
  // patch does not divide.
  std::map<int, PatchIndex> pindex;
  for (const auto& st : plan.stages)
    if (!pindex.count(st.patch_index))
      pindex.emplace(st.patch_index,
                     build_patch_index(video_shape,
                                       model.cfg.patches[static_cast<size_t>(st.patch_index)]));

  const VelocityFn velocity = [&](const Tensor<float>& x, double t, int patch_idx) {
    const PatchIndex& pi = pindex.at(patch_idx);
    const ConditionSet pos{t, g.m_pos, g.class_id, g.source_tag};
    Tensor<float> u_pos = model.velocity(x, patch_idx, pi, pos);
    if (g.cfg_scale == 1.0) return u_pos;  // cfg_combine would return it bitwise

    const std::optional<double> m_neg =
        g.m_pos ? std::optional<double>(negative_motion_at(t, g)) : std::nullopt;
    const ConditionSet neg{t, m_neg, std::nullopt, g.source_tag};
    const Tensor<float> u_neg = model.velocity(x, patch_idx, pi, neg);
    return cfg_combine(u_pos, u_neg, g.cfg_scale);
  };
  return sample_with(velocity, plan, n_patches, video_shape, seed, fps);
}

namespace {

unsigned char to_byte(float v) {
  const double scaled = (static_cast<double>(v) + 1.0) * 127.5;
  return static_cast<unsigned char>(std::clamp(std::lround(scaled), 0l, 255l));
}

}  // namespace

void write_sample_outputs(const LatentVideo& video, const std::string& dir,
                          const StagePlan& plan, const GuidanceSpec& g, uint64_t seed,
                          int motion_block, int motion_radius) {
  video.validate();
  const int64_t T = video.T(), H = video.H(), W = video.W(), C = video.C();
  if (C != 1 && C != 3)
    throw contract_error("write_sample_outputs: can render 1 or 3 channels, got " +
                         std::to_string(C));
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  for (int64_t t = 0; t < T; ++t) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%04lld.ppm", static_cast<long long>(t));
    std::ofstream f(fs::path(dir) / name, std::ios::binary | std::ios::trunc);
    if (!f) throw io_error("cannot open " + (fs::path(dir) / name).string());
    f << "P6\n" << W << ' ' << H << "\n255\n";
    std::vector<unsigned char> row(static_cast<size_t>(W) * 3);
    for (int64_t y = 0; y < H; ++y) {
      for (int64_t x = 0; x < W; ++x) {
        const size_t base = static_cast<size_t>(((t * H + y) * W + x) * C);
        for (int64_t c = 0; c < 3; ++c)
          row[static_cast<size_t>(x * 3 + c)] =
              to_byte(video.data.v[base + static_cast<size_t>(C == 3 ? c : 0)]);
      }
      f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!f.flush()) throw io_error("write failed for " + (fs::path(dir) / name).string());
  }

  nlohmann::json j;
  j["seed"] = seed;
  j["fps"] = video.fps;
  j["shape"] = {T, H, W, C};
  j["guidance"] = {{"cfg_scale", g.cfg_scale},
                   {"m_neg_low", g.m_neg_low},
                   {"m_switch", g.m_switch},
                   {"source_tag", g.source_tag}};
  if (g.m_pos) j["guidance"]["m_pos"] = *g.m_pos;
  if (g.class_id) j["guidance"]["class_id"] = *g.class_id;
  j["plan"] = {{"alpha_inf", plan.alpha_inf}, {"steps", plan.steps}};
  for (const auto& st : plan.stages)
    j["plan"]["stages"].push_back(
        {{"t_start", st.t_start}, {"t_end", st.t_end}, {"patch_index", st.patch_index}});
  if (T >= 2 && H % motion_block == 0 && W % motion_block == 0)
    j["measured_motion"] = motion_score(video, motion_block, motion_radius);

  std::ofstream meta(fs::path(dir) / "sample.json", std::ios::trunc);
  if (!meta) throw io_error("cannot open " + (fs::path(dir) / "sample.json").string());
  meta << j.dump(2) << '\n';
  if (!meta.flush()) throw io_error("write failed for " + (fs::path(dir) / "sample.json").string());
}

}  // namespace msdit
