#pragma once

// Multi-scale patchify/unpatchify between [T,H,W,C] videos and token
// sequences, plus the analytic FLOP model for stage plans.
//
// Tokens are emitted in raster order (t-major, then h, then w).  Within a
// token, raw values are ordered (dt, dh, dw, c).  Both directions are pure
// element permutations, so round trips are exact.

#include <memory>

#include "msdit/types.hpp"

namespace msdit {

// Eq.-style token count: T*H*W / (p_t*p_h*p_w).  Throws contract_error when
// any extent is not divisible by its patch extent (no implicit padding).
int64_t token_count(int64_t T, int64_t H, int64_t W, const PatchSpec& spec);

// Cached index maps for one (video shape, patch spec) pair.
struct PatchIndex {
  Shape video_shape;  // [T,H,W,C]
  int64_t tokens = 0;
  int64_t raw = 0;  // p_t*p_h*p_w*C
  // gather[n*raw + r] = flat video index of raw slot r of token n
  std::shared_ptr<const std::vector<int64_t>> gather;
  // scatter[v] = position of flat video index v in the token layout
  std::shared_ptr<const std::vector<int64_t>> scatter;
  // first-voxel (t,h,w) coordinate of each token, shared across scales
  std::shared_ptr<const std::vector<std::array<int64_t, 3>>> coords;
};

PatchIndex build_patch_index(const Shape& video_shape, const PatchSpec& spec);

// Raw (projection-free) rearrangements used by tests and by the model via
// Tape::take.
template <class Real>
Tensor<Real> patchify_raw(const Tensor<Real>& z, const PatchIndex& pi) {
  if (z.shape != pi.video_shape)
    throw shape_error("patchify: video shape " + shape_str(z.shape) + " vs index built for " +
                      shape_str(pi.video_shape));
  Tensor<Real> out(Shape{pi.tokens, pi.raw});
  const auto& g = *pi.gather;
  for (size_t i = 0; i < g.size(); ++i) out.v[i] = z.v[static_cast<size_t>(g[i])];
  return out;
}

template <class Real>
Tensor<Real> unpatchify_raw(const Tensor<Real>& tokens, const PatchIndex& pi) {
  if (tokens.rank() != 2 || tokens.shape[0] != pi.tokens || tokens.shape[1] != pi.raw)
    throw shape_error("unpatchify: tokens " + shape_str(tokens.shape) + " vs expected [" +
                      std::to_string(pi.tokens) + "," + std::to_string(pi.raw) + "]");
  Tensor<Real> out(pi.video_shape);
  const auto& s = *pi.scatter;
  for (size_t i = 0; i < s.size(); ++i) out.v[i] = tokens.v[static_cast<size_t>(s[i])];
  return out;
}

// Relative cost of running `plan` versus denoising every step at the finest
// configured scale.  Counts token-dependent multiply-accumulates (attention
// is quadratic in tokens, projections linear); the per-sample adaLN head is
// token-independent and excluded.
double schedule_cost(const StagePlan& plan, int64_t T, int64_t H, int64_t W,
                     const ModelConfig& cfg);

}  // namespace msdit
