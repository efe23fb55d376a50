#pragma once

// Synthetic latent-video generator and dataset persistence.
//
// Each sample is a periodic textured background plus one stamped geometric
// shape, composed once at the seed-chosen pose and then rigidly translated
// with wraparound by a fixed integer pixel step per frame.  Because every
// frame is an exact shifted copy of the first, the per-frame displacement
// magnitude is known in closed form and the block-matching estimator
// recovers it exactly for speeds within its search radius.
//
// Class vocabulary (9): shape {square, disc, bar} x trajectory {horizontal,
// vertical, diagonal}, class_id = shape * 3 + trajectory.  Source tags (2):
// clean = 0, noisy_texture = 1; the noisy tag adds static per-seed clutter
// to the scene (the deliberately worse source for subset fine-tuning).

#include <string>
#include <vector>

#include "msdit/types.hpp"

namespace msdit {

inline constexpr int kNumClasses = 9;
inline constexpr int kNumSourceTags = 2;

enum class ShapeKind { square = 0, disc = 1, bar = 2 };
enum class Trajectory { horizontal = 0, vertical = 1, diagonal = 2 };
enum SourceTag { kTagClean = 0, kTagNoisyTexture = 1 };

inline ShapeKind class_shape(int class_id) { return static_cast<ShapeKind>(class_id / 3); }
inline Trajectory class_trajectory(int class_id) { return static_cast<Trajectory>(class_id % 3); }

struct SynthSample {
  LatentVideo video;
  SampleMeta meta;
};

// Generates one video.  `speed` is the per-frame displacement magnitude in
// pixels; it must correspond to an integer pixel step along the class's
// trajectory: an integer for horizontal/vertical, an integer multiple of
// sqrt(2) for diagonal (equal unit steps on both axes).  `direction` is +1
// or -1, the sign of the step along the trajectory.  Deterministic given
// seed.  T == 1 with speed > 0 is rejected: a single frame cannot move.
SynthSample make_video(int class_id, double speed, int direction, int64_t T, int64_t H, int64_t W,
                       int64_t C, uint64_t seed, int source_tag, double fps = 8.0);

// Single-frame sample (T = 1, no motion; meta.gt_motion is absent).
SynthSample make_image_sample(int class_id, int64_t H, int64_t W, int64_t C, uint64_t seed,
                              int source_tag, double fps = 8.0);

struct Dataset {
  Shape shape;  // [T, H, W, C], shared by every sample
  double fps = 8.0;
  std::vector<SynthSample> samples;
};

// Writes manifest.json plus one headerless little-endian float32 file per
// sample (row-major [T,H,W,C]).  All samples must share shape and fps.
void write_dataset(const std::vector<SynthSample>& samples, const std::string& dir);

// Loads a dataset directory eagerly.  Malformed manifest, missing files,
// or size mismatches raise io_error naming the offending file.
Dataset read_dataset(const std::string& dir);

// Recipe for a balanced training corpus: classes cycle fastest, then the
// per-frame step count (0..max_steps), then the source tag, so every
// (class, speed, tag) combination appears as the count allows.
struct CorpusSpec {
  int64_t count = 100;
  int64_t T = 8, H = 16, W = 16, C = 1;
  double fps = 8.0;
  int max_steps = 2;  // trajectory steps per frame cycle through 0..max_steps
  uint64_t seed = 1234;

  void validate() const;
};

// Deterministic in spec.seed; single-frame when T = 1.
Dataset synthesize_corpus(const CorpusSpec& spec);

}  // namespace msdit
