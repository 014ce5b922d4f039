#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "pnrsim/random.hpp"

namespace pnrsim {

/// Per-event secondary-firing probability of the cross-talk cascade.
///
/// p must lie in [0, 1): the geometric cascade mean 1/(1-p) diverges at 1.
/// The total extra-detection factor p' = p/(1-p) is derived, not stored.
struct CascadeParams {
  double p = 0.0;

  CascadeParams() = default;
  explicit CascadeParams(double p_value) : p(p_value) { validate(); }

  void validate() const {
    if (!(p >= 0.0 && p < 1.0)) {
      throw std::invalid_argument("CascadeParams: p must lie in [0, 1), got " + std::to_string(p));
    }
  }

  double p_prime() const { return p / (1.0 - p); }
};

namespace detail {

/// Knuth's product-of-uniforms Poisson sampler; exact, O(mean).
inline std::int64_t poisson_knuth(RandomStream& stream, double mean) {
  const double limit = std::exp(-mean);
  std::int64_t k = 0;
  double prod = stream.uniform01_positive();
  while (prod > limit) {
    prod *= stream.uniform01_positive();
    ++k;
  }
  return k;
}

/// Hormann's PTRS transformed-rejection Poisson sampler; exact for mean >= 10.
inline std::int64_t poisson_ptrs(RandomStream& stream, double mean) {
  const double log_mean = std::log(mean);
  const double b = 0.931 + 2.53 * std::sqrt(mean);
  const double a = -0.059 + 0.02483 * b;
  const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
  const double v_r = 0.9277 - 3.6224 / (b - 2.0);

  for (;;) {
    const double u = stream.uniform01() - 0.5;
    const double v = stream.uniform01_positive();
    const double us = 0.5 - std::fabs(u);
    const double kf = std::floor((2.0 * a / us + b) * u + mean + 0.43);
    if (us >= 0.07 && v <= v_r) return static_cast<std::int64_t>(kf);
    if (kf < 0.0 || (us < 0.013 && v > us)) continue;
    const std::int64_t k = static_cast<std::int64_t>(kf);
    const double lhs = std::log(v * inv_alpha / (a / (us * us) + b));
    const double rhs = kf * log_mean - mean - std::lgamma(kf + 1.0);
    if (lhs <= rhs) return k;
  }
}

}  // namespace detail

/// Draws k ~ Poisson(mean). Exact for every mean (no normal approximation):
/// Knuth's method below mean 10, PTRS rejection above.
inline std::int64_t sample_poisson(RandomStream& stream, double mean) {
  if (!(mean >= 0.0) || !std::isfinite(mean)) {
    throw std::invalid_argument("sample_poisson: mean must be finite and >= 0");
  }
  if (mean == 0.0) return 0;
  if (mean < 10.0) return detail::poisson_knuth(stream, mean);
  return detail::poisson_ptrs(stream, mean);
}

/// Draws Binomial(count, survival): the number of photons surviving an
/// independent per-photon loss stage. Runs in O(successes) via geometric
/// skips, so thinning large pulses stays cheap.
inline std::int64_t thin_binomial(RandomStream& stream, std::int64_t count, double survival) {
  if (count < 0) throw std::invalid_argument("thin_binomial: count must be >= 0");
  if (!(survival >= 0.0 && survival <= 1.0)) {
    throw std::invalid_argument("thin_binomial: survival must lie in [0, 1]");
  }
  if (count == 0 || survival == 0.0) return 0;
  if (survival == 1.0) return count;
  if (survival > 0.5) return count - thin_binomial(stream, count, 1.0 - survival);
  if (count <= 16) {
    std::int64_t hits = 0;
    for (std::int64_t i = 0; i < count; ++i) {
      if (stream.uniform01() < survival) ++hits;
    }
    return hits;
  }
  // Geometric waiting times between successes.
  const double log_q = std::log1p(-survival);
  std::int64_t hits = 0;
  std::int64_t position = 0;
  for (;;) {
    const double skip = std::floor(std::log(stream.uniform01_positive()) / log_q);
    if (skip >= static_cast<double>(count)) break;
    position += static_cast<std::int64_t>(skip) + 1;
    if (position > count) break;
    ++hits;
  }
  return hits;
}

/// Total avalanche count G >= 1 of one primary event and its cross-talk
/// chain: P(G = k) = (1-p) p^(k-1), so E[G] = 1/(1-p), Var[G] = p/(1-p)^2.
inline std::int64_t sample_cascade_total(RandomStream& stream, const CascadeParams& params) {
  params.validate();
  if (params.p == 0.0) return 1;
  const double u = stream.uniform01_positive();
  return 1 + static_cast<std::int64_t>(std::floor(std::log(u) / std::log(params.p)));
}

struct CompoundMoments {
  double mean;
  double variance;
};

/// Mean and variance of the detected-count distribution when Poisson(lambda)
/// primaries each trigger a geometric cascade:
///   mean = lambda/(1-p),   variance = lambda (1+p)/(1-p)^2.
inline CompoundMoments compound_poisson_moments(double lambda_primary, const CascadeParams& params) {
  params.validate();
  if (!(lambda_primary >= 0.0) || !std::isfinite(lambda_primary)) {
    throw std::invalid_argument("compound_poisson_moments: lambda must be finite and >= 0");
  }
  const double q = 1.0 - params.p;
  return {lambda_primary / q, lambda_primary * (1.0 + params.p) / (q * q)};
}

}  // namespace pnrsim
