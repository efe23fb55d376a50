#include <doctest.h>

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "msdit/sampler.hpp"
#include "msdit/synth.hpp"
#include "tmpdir.hpp"

using namespace msdit;
using msdit_test::TempDir;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig c;
  c.width = 16;
  c.depth = 1;
  c.n_heads = 2;
  c.n_kv_heads = 1;
  c.head_dim = 8;
  c.mlp_hidden = 16;
  c.sin_dim = 8;
  c.class_vocab = kNumClasses;
  c.tag_vocab = kNumSourceTags;
  c.channels = 1;
  c.rope = {0, 4, 4};
  c.patches = {{1, 2, 2, 1.0}};
  return c;
}

Model<float> tiny_model(uint64_t seed) {
  auto m = Model<float>::init(tiny_cfg(), seed);
  Rng rng(seed + 100);
  for (const auto& name : m.params.names())
    if (name.find(".ada.") != std::string::npos || name.find(".unembed.") != std::string::npos)
      m.params.at(name) = randn<float>(m.params.at(name).shape, rng, 0.05);
  return m;
}

}  // namespace

TEST_CASE("the time grid warps toward the noise end") {
  const auto uniform = make_time_grid(10, 1.0);
  REQUIRE(uniform.size() == 11);
  for (int k = 0; k <= 10; ++k) CHECK(uniform[size_t(k)] == k / 10.0);

  const auto shifted = make_time_grid(70, 8.0);
  REQUIRE(shifted.size() == 71);
  CHECK(shifted.front() == 0.0);
  CHECK(shifted.back() == 1.0);
  for (size_t k = 0; k + 1 < shifted.size(); ++k) CHECK(shifted[k] < shifted[k + 1]);
  CHECK(shifted[35] == doctest::Approx(1.0 / 9.0).epsilon(1e-14));
  // More than half the knots sit below the uniform midpoint after the shift.
  int below = 0;
  for (double t : shifted) below += t < 0.5;
  CHECK(below > 35 + 1);

  CHECK_THROWS_AS(make_time_grid(0, 8.0), contract_error);
}

TEST_CASE("the negative motion schedule starts low and aligns after the switch") {
  GuidanceSpec g;
  g.m_pos = 4.0;
  g.m_neg_low = 2.0;
  g.m_switch = 0.05;
  CHECK(negative_motion_at(0.01, g) == 2.0);
  CHECK(negative_motion_at(0.05, g) == 4.0);  // boundary belongs to the aligned side
  CHECK(negative_motion_at(0.10, g) == 4.0);

  g.m_switch = 0.0;
  CHECK(negative_motion_at(0.0, g) == 4.0);
  CHECK(negative_motion_at(0.9, g) == 4.0);

  g.m_pos.reset();
  CHECK_THROWS_AS(negative_motion_at(0.5, g), contract_error);
}

TEST_CASE("guidance combination interpolates between the branches") {
  Rng rng(3);
  const auto u_pos = randn<float>(Shape{2, 3}, rng);
  const auto u_neg = randn<float>(Shape{2, 3}, rng);

  CHECK(cfg_combine(u_pos, u_neg, 1.0).v == u_pos.v);
  CHECK(cfg_combine(u_pos, u_neg, 0.0).v == u_neg.v);

  const auto mixed = cfg_combine(u_pos, u_neg, 3.0);
  for (size_t i = 0; i < mixed.v.size(); ++i)
    CHECK(mixed.v[i] ==
          doctest::Approx(u_neg.v[i] + 3.0 * (double(u_pos.v[i]) - u_neg.v[i])).epsilon(1e-6));

  Tensor<float> zero(Shape{4});
  Tensor<float> two = full<float>(Shape{4}, 2.0f);
  const auto six = cfg_combine(two, zero, 3.0);
  for (float v : six.v) CHECK(v == 6.0f);

  CHECK_THROWS_AS(cfg_combine(u_pos, zero, 2.0), shape_error);
  CHECK_THROWS_AS(cfg_combine(u_pos, u_neg, -1.0), contract_error);
}

TEST_CASE("a constant velocity field is integrated exactly at any step count") {
  const Shape shape{4, 8, 8, 1};
  const Tensor<float> x1 = make_video(4, 1.0, 1, 4, 8, 8, 1, 3, 0).video.data;
  const uint64_t seed = 11;
  Rng rng(seed);
  const Tensor<float> x0 = randn<float>(shape, rng);  // matches the sampler's first draws

  Tensor<float> u(shape);
  for (size_t i = 0; i < u.v.size(); ++i) u.v[i] = x1.v[i] - x0.v[i];
  const VelocityFn constant = [&](const Tensor<float>&, double, int) { return u; };

  for (int steps : {1, 7, 70}) {
    for (double alpha : {1.0, 8.0}) {
      StagePlan plan;
      plan.steps = steps;
      plan.alpha_inf = alpha;
      const LatentVideo out = sample_with(constant, plan, 1, shape, seed);
      double mx = 0;
      for (size_t i = 0; i < out.data.v.size(); ++i)
        mx = std::max(mx, std::abs(double(out.data.v[i]) - double(x1.v[i])));
      CHECK(mx < 1e-5);
    }
  }

  StagePlan multi;
  multi.stages = {{0.0, 0.3, 2}, {0.3, 0.6, 1}, {0.6, 1.0, 0}};
  multi.steps = 70;
  const LatentVideo out = sample_with(constant, multi, 3, shape, seed);
  double mx = 0;
  for (size_t i = 0; i < out.data.v.size(); ++i)
    mx = std::max(mx, std::abs(double(out.data.v[i]) - double(x1.v[i])));
  CHECK(mx < 1e-5);
}

TEST_CASE("stages pick the scale per interval without touching the grid") {
  const Shape shape{4, 8, 8, 1};
  std::vector<std::pair<double, int>> calls;
  const VelocityFn probe = [&](const Tensor<float>& x, double t, int idx) {
    calls.push_back({t, idx});
    Tensor<float> u(x.shape);
    return u;  // zero field
  };

  StagePlan multi;
  multi.stages = {{0.0, 0.3, 2}, {0.3, 0.6, 1}, {0.6, 1.0, 0}};
  multi.steps = 70;
  multi.alpha_inf = 8.0;
  sample_with(probe, multi, 3, shape, 1);
  REQUIRE(calls.size() == 70);

  const auto grid = make_time_grid(70, 8.0);
  for (size_t k = 0; k < calls.size(); ++k) {
    CHECK(calls[k].first == grid[k]);
    const double t = calls[k].first;
    const int want = t < 0.3 ? 2 : t < 0.6 ? 1 : 0;
    CHECK(calls[k].second == want);
  }
}

TEST_CASE("splitting one scale into several stages changes nothing bitwise") {
  const auto model = tiny_model(5);
  const Shape shape{2, 4, 4, 1};
  GuidanceSpec g;
  g.cfg_scale = 3.0;
  g.m_pos = 2.0;
  g.class_id = 1;

  StagePlan single;
  single.steps = 10;
  StagePlan split;
  split.stages = {{0.0, 0.4, 0}, {0.4, 0.7, 0}, {0.7, 1.0, 0}};
  split.steps = 10;

  const LatentVideo a = sample(model, single, g, shape, 42);
  const LatentVideo b = sample(model, split, g, shape, 42);
  CHECK(a.data.v == b.data.v);
}

TEST_CASE("guided sampling is deterministic in the seed") {
  const auto model = tiny_model(5);
  const Shape shape{2, 4, 4, 1};
  GuidanceSpec g;
  g.cfg_scale = 4.0;
  g.m_pos = 3.0;
  g.m_switch = 0.3;  // several knots on each side of the switch
  g.class_id = 2;
  g.source_tag = 1;
  StagePlan plan;
  plan.steps = 8;

  const LatentVideo a = sample(model, plan, g, shape, 7);
  const LatentVideo b = sample(model, plan, g, shape, 7);
  CHECK(a.data.v == b.data.v);
  const LatentVideo c = sample(model, plan, g, shape, 8);
  CHECK(a.data.v != c.data.v);
  for (float v : a.data.v) {
    CHECK(v >= -1.0f);
    CHECK(v <= 1.0f);
  }

  GuidanceSpec no_motion = g;
  no_motion.m_pos.reset();
  const LatentVideo d = sample(model, plan, no_motion, shape, 7);
  CHECK(a.data.v != d.data.v);
}

TEST_CASE("sample outputs render PPM frames plus a metadata record") {
  TempDir tmp("sample_out");
  const SynthSample s = make_video(1, 2.0, 1, 4, 8, 8, 1, 9, 0);
  StagePlan plan;
  plan.steps = 70;
  GuidanceSpec g;
  g.cfg_scale = 4.0;
  g.m_pos = 2.0;
  g.class_id = 1;
  write_sample_outputs(s.video, tmp.str(), plan, g, 9);

  for (int t = 0; t < 4; ++t) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%04d.ppm", t);
    REQUIRE(std::filesystem::exists(tmp.path / name));
  }
  CHECK(!std::filesystem::exists(tmp.path / "frame_0004.ppm"));

  std::ifstream f(tmp.path / "frame_0000.ppm", std::ios::binary);
  std::string magic, dims1, dims2, maxval;
  f >> magic >> dims1 >> dims2 >> maxval;
  CHECK(magic == "P6");
  CHECK(dims1 == "8");
  CHECK(dims2 == "8");
  CHECK(maxval == "255");
  f.get();  // single whitespace after the header
  std::vector<unsigned char> pix(8 * 8 * 3);
  f.read(reinterpret_cast<char*>(pix.data()), static_cast<std::streamsize>(pix.size()));
  REQUIRE(f.gcount() == static_cast<std::streamsize>(pix.size()));
  for (size_t p = 0; p < 64; ++p) {  // grayscale: all three channels equal
    CHECK(pix[p * 3] == pix[p * 3 + 1]);
    CHECK(pix[p * 3] == pix[p * 3 + 2]);
  }
  const double v0 = double(s.video.data.v[0]);
  const long want = std::lround((v0 + 1.0) * 127.5);
  CHECK(long(pix[0]) == std::clamp(want, 0l, 255l));

  std::ifstream meta(tmp.path / "sample.json");
  REQUIRE(meta.good());
  nlohmann::json j;
  meta >> j;
  CHECK(j["seed"] == 9);
  CHECK(j["guidance"]["cfg_scale"] == 4.0);
  CHECK(j["guidance"]["m_pos"] == 2.0);
  CHECK(j["plan"]["steps"] == 70);
  REQUIRE(j.contains("measured_motion"));
  CHECK(std::abs(j["measured_motion"].get<double>() - *s.meta.gt_motion) <= 0.5);
}

TEST_CASE("sampling rejects inconsistent setups") {
  const auto model = tiny_model(5);
  GuidanceSpec g;
  StagePlan plan;

  SUBCASE("plan scale out of range") {
    plan.stages = {{0.0, 1.0, 3}};
    CHECK_THROWS_AS(sample(model, plan, g, Shape{2, 4, 4, 1}, 1), contract_error);
  }
  SUBCASE("shape not divisible by the patch") {
    CHECK_THROWS_AS(sample(model, plan, g, Shape{2, 5, 4, 1}, 1), contract_error);
  }
  SUBCASE("channel mismatch") {
    CHECK_THROWS_AS(sample(model, plan, g, Shape{2, 4, 4, 3}, 1), shape_error);
  }
  SUBCASE("bad guidance") {
    g.cfg_scale = -2.0;
    CHECK_THROWS_AS(sample(model, plan, g, Shape{2, 4, 4, 1}, 1), contract_error);
  }
  SUBCASE("renderer wants 1 or 3 channels") {
    LatentVideo v;
    v.data = Tensor<float>(Shape{2, 4, 4, 2});
    TempDir tmp("sample_badc");
    CHECK_THROWS_AS(write_sample_outputs(v, tmp.str(), plan, g, 1), contract_error);
  }
}
