#pragma once

// Linear-path flow matching: interpolation, velocity targets, and the
// resolution-aware timestep shift.

#include "msdit/tensor.hpp"

namespace msdit {

// Warps t' in [0,1] toward the noise end for alpha > 1:
//   t = t' / (t' + alpha * (1 - t'))
// alpha = 1 is the exact identity; shifting by alpha then by 1/alpha returns
// the input.  Throws contract_error for t' outside [0,1] or alpha <= 0.
double time_shift(double t_prime, double alpha);

// t = time_shift(u, alpha) with u ~ U[0,1), clamped to at most 1 - 1e-5 so
// the interpolant never collapses onto the data endpoint.
double sample_training_t(Rng& rng, double alpha);

template <class Real>
struct FlowSample {
  Tensor<Real> x0;      // noise endpoint
  Tensor<Real> x1;      // data endpoint
  Tensor<Real> x_t;     // (1-t) * x0 + t * x1
  Tensor<Real> target;  // x1 - x0, the velocity to regress
  double t = 0.0;
};

template <class Real>
FlowSample<Real> make_flow_sample(const Tensor<Real>& x1, double t, Rng& rng) {
  if (!(t >= 0.0 && t < 1.0))
    throw contract_error("make_flow_sample: t must lie in [0,1), got " + std::to_string(t));
  check_finite(x1, "make_flow_sample x1");
  FlowSample<Real> s;
  s.t = t;
  s.x0 = randn<Real>(x1.shape, rng);
  s.x1 = x1;
  s.x_t = Tensor<Real>(x1.shape);
  s.target = Tensor<Real>(x1.shape);
  const Real tr = static_cast<Real>(t);
  for (size_t i = 0; i < x1.v.size(); ++i) {
    s.x_t.v[i] = (Real(1) - tr) * s.x0.v[i] + tr * x1.v[i];
    s.target.v[i] = x1.v[i] - s.x0.v[i];
  }
  return s;
}

// Mean squared error between predicted and target velocity fields.
template <class Real>
double fm_loss(const Tensor<Real>& pred, const Tensor<Real>& target) {
  if (pred.shape != target.shape)
    throw shape_error("fm_loss: pred " + shape_str(pred.shape) + " vs target " +
                      shape_str(target.shape));
  double acc = 0;
  for (size_t i = 0; i < pred.v.size(); ++i) {
    const double d = static_cast<double>(pred.v[i]) - static_cast<double>(target.v[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(pred.v.size());
}

}  // namespace msdit
