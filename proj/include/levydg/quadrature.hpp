#pragma once

#include <cstddef>
#include <vector>

#include <boost/math/quadrature/gauss.hpp>

namespace levydg {

// Gauss-Legendre rule mapped to the reference interval [0, 1].
struct QuadratureRule {
  std::vector<double> points;
  std::vector<double> weights;

  std::size_t size() const { return points.size(); }
};

template <unsigned Points>
QuadratureRule gauss_legendre_unit() {
  using rule = boost::math::quadrature::gauss<double, Points>;
  const auto& abscissa = rule::abscissa();
  const auto& weight = rule::weights();

  // Boost stores the non-negative half of the symmetric rule on [-1, 1].
  QuadratureRule out;
  out.points.reserve(Points);
  out.weights.reserve(Points);
  for (std::size_t i = 0; i < abscissa.size(); ++i) {
    const double x = abscissa[i];
    const double w = weight[i];
    if (x == 0.0) {
      out.points.push_back(0.5);
      out.weights.push_back(0.5 * w);
      continue;
    }
    out.points.push_back(0.5 * (1.0 - x));
    out.weights.push_back(0.5 * w);
    out.points.push_back(0.5 * (1.0 + x));
    out.weights.push_back(0.5 * w);
  }
  return out;
}

}  // namespace levydg
