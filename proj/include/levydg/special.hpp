#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace levydg {

namespace detail {

// Returns p when nu == p + 1/2 for a small non-negative integer p, else -1.
inline int half_integer_order(double nu) {
  const double p = nu - 0.5;
  if (p < 0.0 || p > 20.0) return -1;
  const double r = std::round(p);
  return r == p ? static_cast<int>(r) : -1;
}

}  // namespace detail

// Modified Bessel function of the second kind K_nu(x), x > 0.
// Half-integer orders use the terminating closed form; everything else goes to
// the C++17 special math implementation.
inline double bessel_k(double nu, double x) {
  if (!(x > 0.0)) throw std::domain_error("bessel_k: argument must be positive");
  nu = std::abs(nu);  // K_{-nu} = K_nu
  if (const int p = detail::half_integer_order(nu); p >= 0) {
    // K_{p+1/2}(x) = sqrt(pi/(2x)) e^{-x} sum_{k<=p} (p+k)!/(k!(p-k)!) (2x)^{-k}
    double term = 1.0, sum = 1.0;
    for (int k = 1; k <= p; ++k) {
      term *= static_cast<double>((p + k) * (p - k + 1)) / (2.0 * k * x);
      sum += term;
    }
    return std::sqrt(std::numbers::pi / (2.0 * x)) * std::exp(-x) * sum;
  }
  return std::cyl_bessel_k(nu, x);
}

}  // namespace levydg
