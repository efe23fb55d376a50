#include "msdit/motion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace msdit {

FlowField block_flow(const Tensor<float>& frame_a, const Tensor<float>& frame_b, int64_t block,
                     int64_t radius) {
  if (frame_a.rank() != 3 || frame_b.rank() != 3)
    throw shape_error("block_flow: frames must be [H,W,C]");
  if (frame_a.shape != frame_b.shape)
    throw shape_error("block_flow: frame shapes differ, " + shape_str(frame_a.shape) + " vs " +
                      shape_str(frame_b.shape));
  const int64_t H = frame_a.shape[0], W = frame_a.shape[1], C = frame_a.shape[2];
  if (block < 1 || radius < 0) throw contract_error("block_flow: block >= 1 and radius >= 0");
  if (H % block != 0 || W % block != 0)
    throw contract_error("block_flow: block " + std::to_string(block) +
                         " must divide frame extents " + std::to_string(H) + "x" +
                         std::to_string(W));

  FlowField f;
  f.block = block;
  f.radius = radius;
  f.blocks_y = H / block;
  f.blocks_x = W / block;
  f.d.resize(static_cast<size_t>(f.blocks_y * f.blocks_x));

  const float* a = frame_a.data();
  const float* b = frame_b.data();
  for (int64_t by = 0; by < f.blocks_y; ++by) {
    for (int64_t bx = 0; bx < f.blocks_x; ++bx) {
      double best_ssd = std::numeric_limits<double>::infinity();
      int64_t best_norm = 0;
      int best_dy = 0, best_dx = 0;
      for (int dy = static_cast<int>(-radius); dy <= radius; ++dy) {
        for (int dx = static_cast<int>(-radius); dx <= radius; ++dx) {
          double ssd = 0.0;
          for (int64_t py = 0; py < block; ++py) {
            const int64_t ya = by * block + py;
            const int64_t yb = ((ya + dy) % H + H) % H;
            for (int64_t px = 0; px < block; ++px) {
              const int64_t xa = bx * block + px;
              const int64_t xb = ((xa + dx) % W + W) % W;
              const float* pa = a + (ya * W + xa) * C;
              const float* pb = b + (yb * W + xb) * C;
              for (int64_t c = 0; c < C; ++c) {
                const double diff = static_cast<double>(pa[c]) - static_cast<double>(pb[c]);
                ssd += diff * diff;
              }
            }
          }
          const int64_t norm = static_cast<int64_t>(dy) * dy + static_cast<int64_t>(dx) * dx;
          // Candidates are visited in lexicographic (dy, dx) order, so on a
          // full tie the earlier candidate is kept.
          if (ssd < best_ssd || (ssd == best_ssd && norm < best_norm)) {
            best_ssd = ssd;
            best_norm = norm;
            best_dy = dy;
            best_dx = dx;
          }
        }
      }
      f.d[static_cast<size_t>(by * f.blocks_x + bx)] = {best_dy, best_dx};
    }
  }
  return f;
}

double motion_score(const LatentVideo& video, int64_t block, int64_t radius) {
  video.validate();
  const int64_t T = video.T();
  if (T < 2) throw contract_error("motion_score: need at least 2 frames, got " +
                                  std::to_string(T));
  const int64_t frame_elems = video.H() * video.W() * video.C();
  double sum = 0.0;
  int64_t count = 0;
  for (int64_t k = 0; k + 1 < T; ++k) {
    Tensor<float> fa(Shape{video.H(), video.W(), video.C()});
    Tensor<float> fb(fa.shape);
    std::copy_n(video.data.data() + k * frame_elems, frame_elems, fa.data());
    std::copy_n(video.data.data() + (k + 1) * frame_elems, frame_elems, fb.data());
    const FlowField f = block_flow(fa, fb, block, radius);
    for (const auto& dv : f.d) {
      sum += std::sqrt(static_cast<double>(dv[0]) * dv[0] + static_cast<double>(dv[1]) * dv[1]);
      ++count;
    }
  }
  return sum / static_cast<double>(count);
}

}  // namespace msdit
