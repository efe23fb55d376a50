#pragma once

// Joint multi-scale flow-matching training.
//
// Each optimizer step draws one fresh batch per patch scale, computes the
// flow-matching loss at that scale, accumulates gradients across scales,
// and applies a single Adam update from their mean.  Conditioning inputs
// (motion score, class id) drop out at configurable rates so classifier-free
// guidance has unconditional modes to steer against; the source tag is never
// dropped.  Per-sample losses land in a timestep-bin ledger for the
// loss-versus-noise-level analysis.

#include <optional>
#include <string>
#include <vector>

#include "msdit/flow.hpp"
#include "msdit/model.hpp"
#include "msdit/synth.hpp"

namespace msdit {

struct TrainConfig {
  int64_t batch = 2;
  int64_t steps = 2000;
  double lr = 1e-3;
  double lr_finetune = 1e-4;  // reduced rate used by finetune_best_subset
  double p_motion = 0.4;      // motion-condition dropout
  double p_cls = 0.1;         // class-condition dropout
  int bins = 20;
  uint64_t seed = 0;
  int64_t checkpoint_every = 0;  // 0: only the final checkpoint
  std::string out_dir;           // empty: compute only, write nothing
  std::optional<int> tag_filter;  // train only on this source tag
  int motion_block = 4;   // block matcher used to measure motion conditions
  int motion_radius = 6;

  void validate() const;
};

// Running (sum, count) of per-sample losses keyed by (patch scale, timestep
// bin).  Bin k covers [k/bins, (k+1)/bins), with t = 1 clamped into the last.
class BinLedger {
 public:
  BinLedger(int n_scales, int bins);

  static int bin_of(double t, int bins);
  void record(int patch_idx, double t, double loss);

  struct Cell {
    double sum = 0.0;
    int64_t count = 0;
  };
  const Cell& cell(int patch_idx, int bin) const;
  int scales() const { return n_scales_; }
  int bins() const { return bins_; }
  int64_t total_count() const;

  // CSV `scale,bin,mean_loss,count`; empty bins are omitted.
  void write_csv(const std::string& path) const;

 private:
  int n_scales_;
  int bins_;
  std::vector<Cell> cells_;
};

// Motion replaced by null with probability p_motion, class id with p_cls.
// The source tag survives every draw.  Always consumes exactly two coin
// flips so RNG streams stay aligned across configurations.
ConditionSet apply_condition_dropout(const ConditionSet& cond, double p_motion, double p_cls,
                                     Rng& rng);

// Block-matching motion score per sample; single-frame samples get nullopt.
std::vector<std::optional<double>> measure_motions(const Dataset& data, int block, int radius);

// Everything one scale consumes in one step, fully determined by
// (seed, step, scale) and the dataset.
struct ScaleBatch {
  std::vector<size_t> indices;
  std::vector<ConditionSet> conds;        // dropout already applied
  std::vector<Tensor<float>> x_t;         // noisy latents [T,H,W,C]
  std::vector<Tensor<float>> targets;     // velocity targets [T,H,W,C]
};

struct StepStats {
  std::vector<double> scale_loss;               // batch mean per scale
  std::vector<std::vector<double>> sample_t;    // [scale][sample]
  std::vector<std::vector<double>> sample_loss; // [scale][sample]
  double grad_norm = 0.0;  // L2 norm of the averaged gradient
};

class Trainer {
 public:
  // The model's patch list defines the scales; the dataset must contain at
  // least one sample compatible with every scale (after the tag filter).
  Trainer(Model<float>& model, const Dataset& data, TrainConfig cfg);

  // One optimizer step: per-scale batches, gradient accumulation over all
  // scales, one Adam update.  Throws numeric_error naming the step and
  // scale if any loss goes non-finite.
  StepStats step(int64_t step_idx);

  // Full run: cfg.steps steps, metrics CSV, bin summary, checkpoints.
  void run();

  // Batch the given (step, scale) pair would see; used by step() itself.
  ScaleBatch draw_scale_batch(int64_t step_idx, int scale) const;

  const BinLedger& ledger() const { return ledger_; }
  const std::vector<std::optional<double>>& motions() const { return motion_; }
  // Accumulated gradient of the last step, averaged over scales and batch,
  // flat in parameter declaration order.
  const std::vector<double>& last_grad() const { return grad_; }

 private:
  void adam_update();

  Model<float>& model_;
  const Dataset& data_;
  TrainConfig cfg_;
  std::vector<std::optional<double>> motion_;
  std::vector<std::vector<size_t>> eligible_;  // per scale
  std::vector<PatchIndex> pindex_;             // per scale
  BinLedger ledger_;
  std::vector<double> grad_, adam_m_, adam_v_;
  int64_t adam_t_ = 0;
};

// Mean flow-matching loss of the model at one scale over n random
// (sample, t, noise) draws with full conditioning (no dropout).
// Restricting to one source tag evaluates that subset only.
double eval_fm_loss(const Model<float>& model, const Dataset& data,
                    const std::vector<std::optional<double>>& motions, int scale, int64_t n,
                    uint64_t seed, std::optional<int> tag = std::nullopt);

// Continues training on the samples carrying `tag` at cfg.lr_finetune.
void finetune_best_subset(Model<float>& model, const Dataset& data, int tag, TrainConfig cfg);

// Recomputes the per-(scale, timestep-bin) mean loss table from a training
// metrics CSV and writes it in the bins.csv format (scale,bin,mean_loss,count;
// empty cells omitted; sorted by scale, then bin).  The input header must be
// exactly "step,scale,t,bin,loss,grad_norm,lr"; any malformed row raises
// io_error naming the line number.
void analyze_bins(const std::string& metrics_csv, const std::string& out_csv);

}  // namespace msdit
