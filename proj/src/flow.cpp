#include "msdit/flow.hpp"

namespace msdit {

double time_shift(double t_prime, double alpha) {
  if (!(t_prime >= 0.0 && t_prime <= 1.0))
    throw contract_error("time_shift: t' must lie in [0,1], got " + std::to_string(t_prime));
  if (!(alpha > 0.0) || !std::isfinite(alpha))
    throw contract_error("time_shift: alpha must be positive, got " + std::to_string(alpha));
  // The identity case is returned directly: t' + (1 - t') can land one ulp
  // away from 1 and would otherwise perturb the last bits.
  if (alpha == 1.0) return t_prime;
  return t_prime / (t_prime + alpha * (1.0 - t_prime));
}

double sample_training_t(Rng& rng, double alpha) {
  const double t = time_shift(rng.uniform(), alpha);
  return std::min(t, 1.0 - 1e-5);
}

}  // namespace msdit
