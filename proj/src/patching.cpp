#include "msdit/patching.hpp"

#include "msdit/flow.hpp"

namespace msdit {

int64_t token_count(int64_t T, int64_t H, int64_t W, const PatchSpec& spec) {
  spec.validate();
  if (T < 1 || H < 1 || W < 1) throw contract_error("token_count: extents must be positive");
  auto check = [](int64_t extent, int patch, const char* axis) {
    if (extent % patch != 0)
      throw contract_error(std::string("token_count: ") + axis + " extent " +
                           std::to_string(extent) + " not divisible by patch extent " +
                           std::to_string(patch));
  };
  check(T, spec.p_t, "T");
  check(H, spec.p_h, "H");
  check(W, spec.p_w, "W");
  return (T * H * W) / spec.voxels();
}

PatchIndex build_patch_index(const Shape& video_shape, const PatchSpec& spec) {
  if (video_shape.size() != 4)
    throw shape_error("build_patch_index: want [T,H,W,C], got " + shape_str(video_shape));
  const int64_t T = video_shape[0], H = video_shape[1], W = video_shape[2], C = video_shape[3];
  PatchIndex pi;
  pi.video_shape = video_shape;
  pi.tokens = token_count(T, H, W, spec);
  pi.raw = spec.raw_dim(static_cast<int>(C));

  auto gather = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(pi.tokens * pi.raw));
  auto scatter =
      std::make_shared<std::vector<int64_t>>(static_cast<size_t>(shape_numel(video_shape)));
  auto coords = std::make_shared<std::vector<std::array<int64_t, 3>>>(
      static_cast<size_t>(pi.tokens));

  const int64_t grid_h = H / spec.p_h;
  const int64_t grid_w = W / spec.p_w;
  int64_t n = 0;
  for (int64_t bt = 0; bt < T / spec.p_t; ++bt)
    for (int64_t bh = 0; bh < grid_h; ++bh)
      for (int64_t bw = 0; bw < grid_w; ++bw, ++n) {
        (*coords)[static_cast<size_t>(n)] = {bt * spec.p_t, bh * spec.p_h, bw * spec.p_w};
        int64_t r = 0;
        for (int64_t dt = 0; dt < spec.p_t; ++dt)
          for (int64_t dh = 0; dh < spec.p_h; ++dh)
            for (int64_t dw = 0; dw < spec.p_w; ++dw)
              for (int64_t c = 0; c < C; ++c, ++r) {
                const int64_t v =
                    (((bt * spec.p_t + dt) * H + bh * spec.p_h + dh) * W + bw * spec.p_w + dw) *
                        C +
                    c;
                (*gather)[static_cast<size_t>(n * pi.raw + r)] = v;
                (*scatter)[static_cast<size_t>(v)] = n * pi.raw + r;
              }
      }

  pi.gather = std::move(gather);
  pi.scatter = std::move(scatter);
  pi.coords = std::move(coords);
  return pi;
}

namespace {

// Token-dependent multiply-accumulate count of one model evaluation at one
// scale.  Attention scores and mixing are quadratic in tokens; QKV/out
// projections, the SwiGLU MLP, and the patch embed/unembed pair are linear.
double eval_macs(int64_t tokens, int64_t raw, const ModelConfig& cfg) {
  const double N = static_cast<double>(tokens);
  const double D = cfg.width;
  const double q_dim = static_cast<double>(cfg.n_heads) * cfg.head_dim;
  const double kv_dim = static_cast<double>(cfg.n_kv_heads) * cfg.head_dim;
  const double attn = 2.0 * N * N * q_dim;
  const double proj = N * (D * q_dim + 2.0 * D * kv_dim + q_dim * D);
  const double mlp = 3.0 * N * D * cfg.mlp_hidden;
  const double io = 2.0 * N * static_cast<double>(raw) * D;
  return cfg.depth * (attn + proj + mlp) + io;
}

}  // namespace

double schedule_cost(const StagePlan& plan, int64_t T, int64_t H, int64_t W,
                     const ModelConfig& cfg) {
  cfg.validate();
  plan.validate(static_cast<int>(cfg.patches.size()));
  std::vector<double> per_scale(cfg.patches.size());
  for (size_t i = 0; i < cfg.patches.size(); ++i) {
    const auto& spec = cfg.patches[i];
    per_scale[i] = eval_macs(token_count(T, H, W, spec), spec.raw_dim(cfg.channels), cfg);
  }
  double total = 0.0;
  for (int k = 0; k < plan.steps; ++k) {
    const double t = time_shift(static_cast<double>(k) / plan.steps, plan.alpha_inf);
    total += per_scale[static_cast<size_t>(plan.stages[static_cast<size_t>(plan.stage_at(t))]
                                               .patch_index)];
  }
  return total / (plan.steps * per_scale[0]);
}

}  // namespace msdit
