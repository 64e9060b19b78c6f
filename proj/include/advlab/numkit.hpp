#pragma once

// Deterministic numerical primitives shared by every other module.

#include <cmath>
#include <numbers>

#include "advlab/errors.hpp"
#include "advlab/linalg.hpp"
#include "advlab/rng.hpp"

namespace advlab {

/// Upper tail of the standard normal, P(Z > x).
///
/// Evaluated through erfc, which keeps full relative precision deep into the
/// tail; the result underflows gracefully to 0 instead of producing NaN.
inline double normal_tail(double x) {
  if (!std::isfinite(x)) throw DomainError("normal_tail: non-finite argument");
  return 0.5 * std::erfc(x / std::numbers::sqrt2);
}

/// Standard normal density.
inline double normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

}  // namespace advlab
