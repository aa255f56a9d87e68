#pragma once

// Uniform mesh on D = (0, 1) and the broken P1 trial space H_h.
//
// Each element carries two nodal coefficients (left and right endpoint
// values), so traces on either side of an interface are independent and the
// mass matrix is block diagonal with 2x2 blocks h/6 * [[2, 1], [1, 2]].

#include <cmath>
#include <cstddef>
#include <functional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "levydg/quadrature.hpp"

namespace levydg {

// Selects which one-sided trace is returned at an interior interface.
enum class Side { left, right };

class Mesh1D {
 public:
  explicit Mesh1D(std::size_t n_elements) : n_(n_elements) {
    if (n_elements == 0) {
      throw std::invalid_argument("Mesh1D: n_elements must be at least 1");
    }
    h_ = 1.0 / static_cast<double>(n_elements);
  }

  std::size_t n_elements() const { return n_; }
  std::size_t n_dofs() const { return 2 * n_; }
  double h() const { return h_; }

  double x_left(std::size_t k) const { return static_cast<double>(k) * h_; }
  double x_right(std::size_t k) const {
    return k + 1 == n_ ? 1.0 : static_cast<double>(k + 1) * h_;
  }

  // Coordinate of a degree of freedom (element endpoint).
  double dof_coordinate(std::size_t dof) const {
    const std::size_t k = dof / 2;
    return dof % 2 == 0 ? x_left(k) : x_right(k);
  }

  std::vector<double> boundaries() const {
    std::vector<double> out(n_ + 1);
    for (std::size_t k = 0; k < n_; ++k) out[k] = x_left(k);
    out[n_] = 1.0;
    return out;
  }

  // Element owning x. Elements own [x_left, x_right); at an interior
  // interface Side::left selects the element to the left instead.
  std::size_t element_of(double x, Side side = Side::right) const {
    if (!(x >= 0.0 && x <= 1.0)) {
      throw std::out_of_range("Mesh1D: coordinate outside [0, 1]");
    }
    if (x == 1.0) return n_ - 1;
    const double scaled = x * static_cast<double>(n_);
    auto k = static_cast<std::size_t>(scaled);
    if (k >= n_) k = n_ - 1;
    // x * n can round across an integer when 1/n is inexact; compare against
    // the node coordinates themselves.
    if (k > 0 && x < x_left(k)) --k;
    else if (k + 1 < n_ && x >= x_left(k + 1)) ++k;
    if (side == Side::left && k > 0 && x == x_left(k)) --k;
    return k;
  }

  bool operator==(const Mesh1D& other) const { return n_ == other.n_; }

 private:
  std::size_t n_;
  double h_;
};

inline Mesh1D build_mesh(std::size_t n_elements) { return Mesh1D(n_elements); }

class DGFunction {
 public:
  explicit DGFunction(Mesh1D mesh)
      : mesh_(mesh), coefficients_(mesh.n_dofs(), 0.0) {}

  DGFunction(Mesh1D mesh, std::vector<double> coefficients)
      : mesh_(mesh), coefficients_(std::move(coefficients)) {
    if (coefficients_.size() != mesh_.n_dofs()) {
      throw std::invalid_argument(
          "DGFunction: coefficient count must equal 2 * n_elements");
    }
  }

  const Mesh1D& mesh() const { return mesh_; }
  std::span<const double> coefficients() const { return coefficients_; }
  std::span<double> coefficients() { return coefficients_; }

  double value_left(std::size_t k) const { return coefficients_[2 * k]; }
  double value_right(std::size_t k) const { return coefficients_[2 * k + 1]; }

  // Affine evaluation inside element k.
  double eval_in(std::size_t k, double x) const {
    const double t = (x - mesh_.x_left(k)) / mesh_.h();
    return (1.0 - t) * value_left(k) + t * value_right(k);
  }

  double slope_in(std::size_t k) const {
    return (value_right(k) - value_left(k)) / mesh_.h();
  }

  double eval(double x, Side side = Side::right) const {
    return eval_in(mesh_.element_of(x, side), x);
  }

  double derivative(double x, Side side = Side::right) const {
    return slope_in(mesh_.element_of(x, side));
  }

 private:
  Mesh1D mesh_;
  std::vector<double> coefficients_;
};

inline double eval(const DGFunction& u, double x, Side side = Side::right) {
  return u.eval(x, side);
}

// Exact broken inner product of two functions on the same mesh.
inline double broken_inner(const DGFunction& u, const DGFunction& v) {
  if (!(u.mesh() == v.mesh())) {
    throw std::invalid_argument("broken_inner: meshes differ");
  }
  const double h = u.mesh().h();
  double sum = 0.0;
  for (std::size_t k = 0; k < u.mesh().n_elements(); ++k) {
    const double a0 = u.value_left(k), a1 = u.value_right(k);
    const double b0 = v.value_left(k), b1 = v.value_right(k);
    sum += h / 6.0 * (2.0 * a0 * b0 + a0 * b1 + a1 * b0 + 2.0 * a1 * b1);
  }
  return sum;
}

inline double broken_norm(const DGFunction& u) {
  const double h = u.mesh().h();
  double sum = 0.0;
  for (std::size_t k = 0; k < u.mesh().n_elements(); ++k) {
    const double a = u.value_left(k), b = u.value_right(k);
    sum += h / 3.0 * (a * a + a * b + b * b);
  }
  return std::sqrt(sum);
}

namespace detail {

inline void require_finite(double value, const char* where) {
  if (!std::isfinite(value)) {
    throw std::domain_error(std::string(where) + ": non-finite function value");
  }
}

}  // namespace detail

// L2-orthogonal projection onto H_h; 5-point Gauss-Legendre per element.
template <class F>
DGFunction project_l2(F&& f, const Mesh1D& mesh) {
  static const QuadratureRule rule = gauss_legendre_unit<5>();
  DGFunction out(mesh);
  auto c = out.coefficients();
  const double h = mesh.h();
  for (std::size_t k = 0; k < mesh.n_elements(); ++k) {
    double b0 = 0.0, b1 = 0.0;
    for (std::size_t q = 0; q < rule.size(); ++q) {
      const double t = rule.points[q];
      const double value = f(mesh.x_left(k) + t * h);
      detail::require_finite(value, "project_l2");
      b0 += rule.weights[q] * value * (1.0 - t);
      b1 += rule.weights[q] * value * t;
    }
    // Inverse of the reference mass matrix [[1/3, 1/6], [1/6, 1/3]].
    c[2 * k] = 4.0 * b0 - 2.0 * b1;
    c[2 * k + 1] = -2.0 * b0 + 4.0 * b1;
  }
  return out;
}

// Per-element linear interpolation at the element endpoints. A callable taking
// (x, Side) is asked for one-sided values directly; a plain f(x) is sampled one
// ulp inside each element to approximate the one-sided limit.
template <class F>
DGFunction nodal_interpolate(F&& f, const Mesh1D& mesh) {
  DGFunction out(mesh);
  auto c = out.coefficients();
  for (std::size_t k = 0; k < mesh.n_elements(); ++k) {
    const double xl = mesh.x_left(k), xr = mesh.x_right(k);
    double vl, vr;
    if constexpr (std::is_invocable_r_v<double, F, double, Side>) {
      vl = f(xl, Side::right);
      vr = f(xr, Side::left);
    } else {
      vl = f(std::nextafter(xl, xr));
      vr = f(std::nextafter(xr, xl));
    }
    detail::require_finite(vl, "nodal_interpolate");
    detail::require_finite(vr, "nodal_interpolate");
    c[2 * k] = vl;
    c[2 * k + 1] = vr;
  }
  return out;
}

// Broken-norm distance to a function given pointwise. Each element is split into
// `pieces` sub-intervals with 5-point Gauss, enough for data that is only C^2
// across points that are not mesh nodes.
template <class F>
double broken_distance(const DGFunction& u, F&& f, std::size_t pieces = 8) {
  static const QuadratureRule rule = gauss_legendre_unit<5>();
  const auto& mesh = u.mesh();
  const double h = mesh.h();
  const double hs = h / static_cast<double>(pieces);
  double sum = 0.0;
  for (std::size_t k = 0; k < mesh.n_elements(); ++k) {
    for (std::size_t p = 0; p < pieces; ++p) {
      const double x0 = mesh.x_left(k) + static_cast<double>(p) * hs;
      for (std::size_t q = 0; q < rule.size(); ++q) {
        const double x = x0 + rule.points[q] * hs;
        const double d = u.eval_in(k, x) - f(x);
        sum += rule.weights[q] * hs * d * d;
      }
    }
  }
  return std::sqrt(sum);
}

inline void write_csv(std::ostream& os, const DGFunction& u) {
  os << "element_index,x_left,x_right,value_left,value_right\n";
  const auto& mesh = u.mesh();
  const auto old_precision = os.precision(17);
  for (std::size_t k = 0; k < mesh.n_elements(); ++k) {
    os << k << ',' << mesh.x_left(k) << ',' << mesh.x_right(k) << ','
       << u.value_left(k) << ',' << u.value_right(k) << '\n';
  }
  os.precision(old_precision);
}

}  // namespace levydg
