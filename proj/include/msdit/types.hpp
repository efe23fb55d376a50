#pragma once

// Domain types shared across modules: patch scales, latent videos, condition
// sets, model/stage configuration.

#include <array>
#include <optional>
#include <vector>

#include "msdit/tensor.hpp"

namespace msdit {

// One patchification scale and the time-shift used when training on it.
struct PatchSpec {
  int p_t = 1;
  int p_h = 1;
  int p_w = 1;
  double alpha = 1.0;

  void validate() const {
    if (p_t < 1 || p_h < 1 || p_w < 1)
      throw contract_error("PatchSpec: extents must be positive");
    if (!(alpha > 0.0) || !std::isfinite(alpha))
      throw contract_error("PatchSpec: alpha must be positive and finite");
  }
  int64_t voxels() const { return static_cast<int64_t>(p_t) * p_h * p_w; }
  int64_t raw_dim(int channels) const { return voxels() * channels; }
  bool operator==(const PatchSpec& o) const = default;
};

// Finest scale first; extents must be componentwise non-decreasing so a
// larger index always means coarser-or-equal.
inline void validate_patch_hierarchy(const std::vector<PatchSpec>& patches) {
  if (patches.empty()) throw contract_error("patch list must not be empty");
  for (const auto& p : patches) p.validate();
  for (size_t i = 1; i < patches.size(); ++i) {
    const auto& a = patches[i - 1];
    const auto& b = patches[i];
    if (b.p_t < a.p_t || b.p_h < a.p_h || b.p_w < a.p_w)
      throw contract_error("patch list must be ordered finest to coarsest (componentwise)");
  }
}

struct LatentVideo {
  Tensor<float> data;  // [T, H, W, C]
  double fps = 8.0;

  int64_t T() const { return data.shape[0]; }
  int64_t H() const { return data.shape[1]; }
  int64_t W() const { return data.shape[2]; }
  int64_t C() const { return data.shape[3]; }

  void validate() const {
    if (data.rank() != 4)
      throw shape_error("LatentVideo: want rank-4 [T,H,W,C], got " + shape_str(data.shape));
    if (!(fps > 0.0)) throw contract_error("LatentVideo: fps must be positive");
    check_finite(data, "LatentVideo");
  }
};

struct SampleMeta {
  int class_id = 0;
  int source_tag = 0;
  std::optional<double> gt_motion;  // pixels/frame; absent for single-frame samples
  uint64_t seed = 0;
};

// Conditioning inputs for one forward pass.  Absent motion and absent class
// select the learned null embeddings.
struct ConditionSet {
  double t = 0.0;
  std::optional<double> motion;
  std::optional<int> class_id;
  int source_tag = 0;
};

struct RopeChannelSplit {
  int t = 0, h = 0, w = 0;
};

// Channels per rotary axis: each a multiple of 4 (so the per-axis rotation
// pair counts are even) summing to head_dim.  Temporal gets roughly a third,
// the remainder splits evenly across the spatial axes.
inline RopeChannelSplit default_rope_split(int head_dim) {
  int ct = (head_dim / 3) & ~3;
  while (ct > 0 && ((head_dim - ct) / 2) % 4 != 0) ct -= 4;
  if (((head_dim - ct) / 2) % 4 != 0 || (head_dim - ct) % 2 != 0)
    throw contract_error("no valid default rope split for head_dim " + std::to_string(head_dim));
  return {ct, (head_dim - ct) / 2, (head_dim - ct) / 2};
}

struct ModelConfig {
  int width = 128;
  int depth = 4;
  int n_heads = 4;
  int n_kv_heads = 2;
  int head_dim = 32;
  int mlp_hidden = 256;
  int sin_dim = 64;
  int class_vocab = 9;
  int tag_vocab = 2;
  int channels = 1;
  double rope_base = 10000.0;
  RopeChannelSplit rope = default_rope_split(32);
  std::vector<PatchSpec> patches{{1, 2, 2, 1.0}, {2, 2, 2, 2.0}, {2, 4, 4, 4.0}};

  void validate() const {
    if (width < 1 || depth < 1 || mlp_hidden < 1 || sin_dim < 2 || sin_dim % 2 != 0)
      throw config_error("model: width/depth/mlp_hidden/sin_dim invalid");
    if (n_heads < 1 || n_kv_heads < 1 || n_heads % n_kv_heads != 0)
      throw config_error("model: n_heads must be a positive multiple of n_kv_heads");
    if (head_dim < 2 || head_dim % 2 != 0) throw config_error("model: head_dim must be even");
    if (width != n_heads * head_dim)
      throw config_error("model: width must equal n_heads * head_dim");
    if (rope.t < 0 || rope.h < 0 || rope.w < 0 || rope.t % 4 || rope.h % 4 || rope.w % 4 ||
        rope.t + rope.h + rope.w != head_dim)
      throw config_error(
          "model: rope split channels must be multiples of 4 summing to head_dim");
    if (class_vocab < 1 || tag_vocab < 1 || channels < 1)
      throw config_error("model: vocab sizes and channels must be positive");
    if (!(rope_base > 1.0)) throw config_error("model: rope_base must exceed 1");
    validate_patch_hierarchy(patches);
  }
};

// Inference schedule: contiguous intervals of [0,1], each denoised at one
// patch scale, traversed on a shifted time grid.
struct StagePlan {
  struct Stage {
    double t_start = 0.0;
    double t_end = 1.0;
    int patch_index = 0;
  };
  std::vector<Stage> stages{{0.0, 1.0, 0}};
  double alpha_inf = 8.0;
  int steps = 70;

  void validate(int n_patches) const {
    if (steps < 1) throw contract_error("StagePlan: steps must be >= 1");
    if (!(alpha_inf > 0.0)) throw contract_error("StagePlan: alpha_inf must be positive");
    if (stages.empty()) throw contract_error("StagePlan: no stages");
    if (stages.front().t_start != 0.0 || stages.back().t_end != 1.0)
      throw contract_error("StagePlan: stages must cover [0,1] exactly");
    for (size_t i = 0; i < stages.size(); ++i) {
      const auto& s = stages[i];
      if (!(s.t_start < s.t_end)) throw contract_error("StagePlan: empty or inverted stage");
      if (s.patch_index < 0 || s.patch_index >= n_patches)
        throw contract_error("StagePlan: patch index " + std::to_string(s.patch_index) +
                             " out of range");
      if (i > 0) {
        if (stages[i - 1].t_end != s.t_start)
          throw contract_error("StagePlan: stages must be contiguous");
        // Higher patch index = coarser scale; inference refines over time.
        if (s.patch_index > stages[i - 1].patch_index)
          throw contract_error("StagePlan: later stages must use finer-or-equal scales");
      }
    }
  }

  int stage_at(double t) const {
    if (!(t >= 0.0 && t <= 1.0)) throw contract_error("stage_at: t outside [0,1]");
    for (size_t i = 0; i < stages.size(); ++i)
      if (t < stages[i].t_end || i + 1 == stages.size()) return static_cast<int>(i);
    return static_cast<int>(stages.size()) - 1;
  }
};

// Dual-motion classifier-free guidance settings.
struct GuidanceSpec {
  double cfg_scale = 4.0;
  std::optional<double> m_pos;
  double m_neg_low = 2.0;
  double m_switch = 0.05;  // negative branch uses m_neg_low before this t, m_pos after
  std::optional<int> class_id;
  int source_tag = 0;

  void validate() const {
    if (!(cfg_scale >= 0.0)) throw contract_error("GuidanceSpec: cfg scale must be >= 0");
    if (!(m_switch >= 0.0 && m_switch <= 1.0))
      throw contract_error("GuidanceSpec: switch threshold must lie in [0,1]");
    if (m_pos && !(*m_pos >= 0.0)) throw contract_error("GuidanceSpec: motion must be >= 0");
    if (!(m_neg_low >= 0.0)) throw contract_error("GuidanceSpec: negative motion must be >= 0");
  }
};

}  // namespace msdit
