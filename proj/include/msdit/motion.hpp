#pragma once

// Block-matching optical flow and the scalar motion score used for
// conditioning.  Exhaustive integer search; frames are treated as periodic
// (indices wrap), matching the wraparound translation of the synthetic
// generator so uniform shifts are recovered exactly.

#include "msdit/types.hpp"

namespace msdit {

struct FlowField {
  int64_t block = 0;
  int64_t radius = 0;
  int64_t blocks_y = 0;
  int64_t blocks_x = 0;
  std::vector<std::array<int, 2>> d;  // (dy, dx) per block, row-major

  const std::array<int, 2>& at(int64_t by, int64_t bx) const {
    return d[static_cast<size_t>(by * blocks_x + bx)];
  }
};

// Displacement per block minimizing the sum of squared differences between
// frame_a's block and frame_b sampled at the displaced (wrapped) location,
// over all (2r+1)^2 integer candidates.  Ties break toward the smallest
// dy^2+dx^2, then lexicographically by (dy, dx).  Frames are [H,W,C].
FlowField block_flow(const Tensor<float>& frame_a, const Tensor<float>& frame_b, int64_t block,
                     int64_t radius);

// Mean of sqrt(dy^2 + dx^2) over all consecutive frame pairs and blocks,
// in pixels per frame.  Requires T >= 2.
double motion_score(const LatentVideo& video, int64_t block, int64_t radius);

}  // namespace msdit
