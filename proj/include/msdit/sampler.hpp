#pragma once

// Multi-stage Euler ODE sampling with timestep shifting and dual-motion
// classifier-free guidance.
//
// The time grid warps a uniform [0,1] ladder through the inference shift,
// concentrating steps near the noise end.  Each Euler interval picks its
// patch scale from the stage plan (coarse early, fine late); the latent
// passes stage boundaries unchanged.  Guidance runs two velocity branches:
// the positive one fully conditioned, the negative one with the class
// dropped (the source tag survives) and a scheduled negative motion that
// starts low and snaps to the positive value at the switch threshold.

#include <functional>
#include <string>
#include <vector>

#include "msdit/model.hpp"

namespace msdit {

// t_k = time_shift(k/steps, alpha_inf) for k = 0..steps: strictly
// increasing, t_0 = 0, t_steps = 1.
std::vector<double> make_time_grid(int64_t steps, double alpha_inf);

// m_neg_low before the switch threshold, the positive motion after it.
// Requires a positive motion target in the guidance.
double negative_motion_at(double t, const GuidanceSpec& g);

// u_neg + s * (u_pos - u_neg); s = 0 and s = 1 return the branches bitwise.
template <class Real>
Tensor<Real> cfg_combine(const Tensor<Real>& u_pos, const Tensor<Real>& u_neg, double s) {
  if (u_pos.shape != u_neg.shape)
    throw shape_error("cfg_combine: branch shapes " + shape_str(u_pos.shape) + " vs " +
                      shape_str(u_neg.shape));
  if (!(s >= 0.0)) throw contract_error("cfg_combine: scale must be >= 0");
  if (s == 1.0) return u_pos;
  if (s == 0.0) return u_neg;
  Tensor<Real> u(u_pos.shape);
  for (size_t i = 0; i < u.v.size(); ++i) {
    const double d = static_cast<double>(u_neg.v[i]) +
                     s * (static_cast<double>(u_pos.v[i]) - static_cast<double>(u_neg.v[i]));
    u.v[i] = static_cast<Real>(d);
  }
  check_finite(u, "cfg_combine");
  return u;
}

// Velocity field of the current latent at time t and patch scale patch_idx.
using VelocityFn = std::function<Tensor<float>(const Tensor<float>& x, double t, int patch_idx)>;

// Euler integration core: x starts from seeded N(0,I), accumulates in
// double, each interval [t_k, t_{k+1}] integrates the stage's scale, and the
// final latent is clamped to [-1,1].  n_patches bounds the plan's scale
// indices.  Deterministic in (seed, plan, velocity).
LatentVideo sample_with(const VelocityFn& velocity, const StagePlan& plan, int n_patches,
                        const Shape& video_shape, uint64_t seed, double fps = 8.0);

// Full guided sampling with the model's velocity and dual-motion CFG.
LatentVideo sample(const Model<float>& model, const StagePlan& plan, const GuidanceSpec& g,
                   const Shape& video_shape, uint64_t seed, double fps = 8.0);

// One directory per sample: frame_%04d.ppm (P6; [-1,1] mapped linearly to
// [0,255]; one channel replicated to RGB) plus sample.json with the plan,
// guidance, seed, and the block-matching motion measured on the output.
void write_sample_outputs(const LatentVideo& video, const std::string& dir,
                          const StagePlan& plan, const GuidanceSpec& g, uint64_t seed,
                          int motion_block = 4, int motion_radius = 6);

}  // namespace msdit
