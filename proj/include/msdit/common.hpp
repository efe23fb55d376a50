#pragma once

// Shared error taxonomy, deterministic RNG, and the worker-thread cap.

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>

namespace msdit {

// All library failures derive from msdit::error so callers can map them to
// process exit codes in one place.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad user-supplied configuration (unknown key, missing field, bad value).
struct config_error : error {
  using error::error;
};

// A precondition stated by an API contract was violated by the caller.
struct contract_error : error {
  using error::error;
};

// Tensor rank/extent mismatch.
struct shape_error : contract_error {
  using contract_error::contract_error;
};

// NaN or Inf surfaced in a computation; the run must abort, never continue.
struct numeric_error : error {
  using error::error;
};

// File or stream failure, including malformed on-disk artifacts.
struct io_error : error {
  using error::error;
};

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Deterministic random stream.  std::mt19937_64 supplies raw bits; the
// uniform/normal/bounded-int transforms are written out here because the
// std::*_distribution wrappers are implementation-defined and would break
// cross-library reproducibility of seeded runs.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  // Independent substream addressed by up to three indices (e.g. step, scale).
  static Rng stream(uint64_t seed, uint64_t a, uint64_t b = 0) {
    return Rng(splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b));
  }

  uint64_t bits() { return eng_(); }

  // Uniform on [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  // Uniform integer on [0, n).  Rejection step removes modulo bias.
  uint64_t below(uint64_t n) {
    if (n == 0) throw contract_error("Rng::below: n must be positive");
    uint64_t x = eng_();
    __uint128_t m = static_cast<__uint128_t>(x) * n;
    uint64_t lo = static_cast<uint64_t>(m);
    if (lo < n) {
      uint64_t floor = (0 - n) % n;
      while (lo < floor) {
        x = eng_();
        m = static_cast<__uint128_t>(x) * n;
        lo = static_cast<uint64_t>(m);
      }
    }
    return static_cast<uint64_t>(m >> 64);
  }

  // Standard normal via Box-Muller; the spare of each pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log1p(-u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  bool coin(double p) { return uniform() < p; }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Worker-thread cap from LV_THREADS.  1 selects the single-threaded
// determinism mode; unset or invalid falls back to the hardware count.
inline int worker_cap() {
  if (const char* env = std::getenv("LV_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) return static_cast<int>(v);
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw ? static_cast<int>(hw) : 1;
}

}  // namespace msdit
