#pragma once

// Optimal Petrov test space V_h = (I - dt A*)^{-1} H_h for A = a d/dx on (0, 1)
// and the time-step matrices built from it.
//
// A test function solves v + dt*a*v' = w with v(0) = 0. On an element with
// local coordinate t = (x - x_k)/h and z = h/(dt*a) it reads
//
//   v(t) = v(x_k) e^{-zt} + z * int_0^t w(t - s) e^{-zs} ds,
//
// so every integral against P1 functions reduces to the moments
// E_m(z) = int_0^1 t^m e^{-zt} dt, which are evaluated without cancellation.
//
// Matrix convention: row j indexes the test function v_j, column l the trial
// function w_l, so one time step reads lhs * c_new = rhs * b.

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "levydg/mesh.hpp"
#include "levydg/quadrature.hpp"

namespace levydg {

// E_m(z) = int_0^1 t^m e^{-zt} dt for m = 0..3, z >= 0.
inline std::array<double, 4> exp_moments(double z) {
  std::array<double, 4> e{};
  if (z < 1.0) {
    // Alternating series sum_n (-z)^n / (n! (n + m + 1)).
    for (int m = 0; m < 4; ++m) {
      double term = 1.0, sum = 0.0;
      for (int n = 0; n < 40; ++n) {
        const double contrib = term / static_cast<double>(n + m + 1);
        sum += contrib;
        if (std::abs(contrib) < 1e-18 * std::abs(sum)) break;
        term *= -z / static_cast<double>(n + 1);
      }
      e[m] = sum;
    }
    return e;
  }
  const double ez = std::exp(-z);
  e[0] = -std::expm1(-z) / z;
  for (int m = 1; m < 4; ++m) e[m] = (m * e[m - 1] - ez) / z;
  return e;
}

namespace detail {

// Reference P1 shape functions on [0, 1]: left = 1 - t, right = t, written as
// (constant, slope) pairs.
inline constexpr std::array<std::array<double, 2>, 2> kShape{{{1.0, -1.0}, {0.0, 1.0}}};

using Cubic = std::array<double, 4>;

inline Cubic poly_mul(const Cubic& p, const Cubic& q) {
  Cubic r{};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; i + j < 4; ++j) r[i + j] += p[i] * q[j];
  return r;
}

// Per-element quantities for a fixed z = h / (dt * a); all are dimensionless.
struct ElementTables {
  double z = 0.0;
  std::array<double, 4> moments{};
  // same[i][j] = int_0^1 phi_i(t) v_j(t) dt for the test function generated
  // by shape j on this element (v_j(0) = 0).
  double same[2][2]{};
  // dsame[i][j] = int_0^1 phi_i(t) dv_j/dt dt.
  double dsame[2][2]{};
  // outflow[j] = v_j(1), value carried into the next element.
  double outflow[2]{};
  // decay_weight[i] = int_0^1 phi_i(t) e^{-zt} dt.
  double decay_weight[2]{};

  explicit ElementTables(double z_in) : z(z_in), moments(exp_moments(z_in)) {
    const auto& e = moments;
    for (int i = 0; i < 2; ++i) {
      const double a = kShape[i][0], b = kShape[i][1];
      decay_weight[i] = a * e[0] + b * e[1];
    }
    for (int j = 0; j < 2; ++j) {
      const double alpha = kShape[j][0], beta = kShape[j][1];
      outflow[j] = z * ((alpha + beta) * e[0] - beta * e[1]);
      for (int i = 0; i < 2; ++i) {
        const double a = kShape[i][0], b = kShape[i][1];
        // P(tau) = int_tau^1 phi_i(t) w_j(t - tau) dt; with L = 1 - tau and
        // c = a + b*tau: c*alpha*L + (c*beta + b*alpha)*L^2/2 + b*beta*L^3/3.
        const Cubic L{1.0, -1.0, 0.0, 0.0};
        const Cubic L2 = poly_mul(L, L);
        const Cubic L3 = poly_mul(L2, L);
        const Cubic c{a, b, 0.0, 0.0};
        const Cubic cross{a * beta + b * alpha, b * beta, 0.0, 0.0};
        const Cubic t1 = poly_mul(c, L);
        const Cubic t2 = poly_mul(cross, L2);
        double integral = 0.0;
        for (int m = 0; m < 4; ++m) {
          const double coeff = alpha * t1[m] + 0.5 * t2[m] + b * beta * L3[m] / 3.0;
          integral += coeff * e[m];
        }
        same[i][j] = z * integral;
        dsame[i][j] = z * alpha * decay_weight[i] +
                      z * beta * ((a + 0.5 * b) * e[0] - a * e[1] - 0.5 * b * e[2]);
      }
    }
  }
};

}  // namespace detail

// The test function v = (I - dt A*)^{-1} w for a trial function w in H_h.
class TestFunction {
 public:
  TestFunction(DGFunction source, double dt, double a)
      : source_(std::move(source)), dt_(dt), a_(a) {
    if (!(dt > 0.0)) throw std::invalid_argument("TestFunction: dt must be positive");
    if (!(a > 0.0)) throw std::invalid_argument("TestFunction: a must be positive");
    const auto& mesh = source_.mesh();
    z_ = mesh.h() / (dt_ * a_);
    const detail::ElementTables tables(z_);
    const double decay = std::exp(-z_);
    node_values_.assign(mesh.n_elements() + 1, 0.0);
    for (std::size_t k = 0; k < mesh.n_elements(); ++k) {
      node_values_[k + 1] = node_values_[k] * decay +
                            source_.value_left(k) * tables.outflow[0] +
                            source_.value_right(k) * tables.outflow[1];
    }
  }

  const DGFunction& source() const { return source_; }
  const Mesh1D& mesh() const { return source_.mesh(); }
  double dt() const { return dt_; }
  double a() const { return a_; }
  double z() const { return z_; }

  // v at the element boundaries x_0 = 0, ..., x_n = 1.
  std::span<const double> node_values() const { return node_values_; }

  // v is continuous, so the side only matters for the derivative.
  double value(double x, Side side = Side::right) const {
    const std::size_t k = mesh().element_of(x, side);
    const double t = (x - mesh().x_left(k)) / mesh().h();
    return value_local(k, t);
  }

  double derivative(double x, Side side = Side::right) const {
    const std::size_t k = mesh().element_of(x, side);
    const double t = (x - mesh().x_left(k)) / mesh().h();
    return (source_.eval_in(k, x) - value_local(k, t)) / (dt_ * a_);
  }

  double value_local(std::size_t k, double t) const {
    const double alpha = source_.value_left(k);
    const double beta = source_.value_right(k) - alpha;
    const double zt = z_ * t;
    const auto e = exp_moments(zt);
    return node_values_[k] * std::exp(-zt) +
           zt * ((alpha + beta * t) * e[0] - beta * t * e[1]);
  }

 private:
  DGFunction source_;
  double dt_, a_, z_;
  std::vector<double> node_values_;
};

inline TestFunction test_function(const DGFunction& w, double dt, double a) {
  return TestFunction(w, dt, a);
}

// (w, v)_{H,h} in closed form.
inline double broken_inner(const DGFunction& w, const TestFunction& v) {
  const auto& mesh = w.mesh();
  if (!(mesh == v.mesh())) throw std::invalid_argument("broken_inner: meshes differ");
  const detail::ElementTables tab(v.z());
  const auto nodes = v.node_values();
  const auto& src = v.source();
  double sum = 0.0;
  for (std::size_t k = 0; k < mesh.n_elements(); ++k) {
    const double wl[2] = {w.value_left(k), w.value_right(k)};
    const double sl[2] = {src.value_left(k), src.value_right(k)};
    double local = 0.0;
    for (int i = 0; i < 2; ++i) {
      local += wl[i] * nodes[k] * tab.decay_weight[i];
      for (int j = 0; j < 2; ++j) local += wl[i] * sl[j] * tab.same[i][j];
    }
    sum += mesh.h() * local;
  }
  return sum;
}

// (w, v')_{H,h} in closed form.
inline double broken_inner_derivative(const DGFunction& w, const TestFunction& v) {
  const auto& mesh = w.mesh();
  if (!(mesh == v.mesh())) throw std::invalid_argument("broken_inner: meshes differ");
  const detail::ElementTables tab(v.z());
  const auto nodes = v.node_values();
  const auto& src = v.source();
  double sum = 0.0;
  for (std::size_t k = 0; k < mesh.n_elements(); ++k) {
    const double wl[2] = {w.value_left(k), w.value_right(k)};
    const double sl[2] = {src.value_left(k), src.value_right(k)};
    for (int i = 0; i < 2; ++i) {
      sum -= wl[i] * tab.z * nodes[k] * tab.decay_weight[i];
      for (int j = 0; j < 2; ++j) sum += wl[i] * sl[j] * tab.dsame[i][j];
    }
  }
  return sum;
}

// Upwind numerical flux sum (n.a w, v)_{E_h} for broken functions given as
// one-sided trace callables f(x, Side).
//
// Interior edges use the average-minus-jump form {a w}[v] - |a.n|/2 [w][v]
// with [psi] = psi(x-) - psi(x+) in the direction of a > 0. On the inflow edge
// x = 1 the flux is -a w(1-) v(1-); the outflow edge x = 0 carries no flux
// because test functions vanish there.
template <class W, class V>
double upwind_flux_sum(const Mesh1D& mesh, double a, W&& w, V&& v) {
  double sum = 0.0;
  for (std::size_t k = 1; k < mesh.n_elements(); ++k) {
    const double x = mesh.x_left(k);
    const double wl = w(x, Side::left), wr = w(x, Side::right);
    const double vl = v(x, Side::left), vr = v(x, Side::right);
    const double average = 0.5 * a * (wl + wr);
    const double jump_w = wl - wr, jump_v = vl - vr;
    sum += (average - 0.5 * std::abs(a) * jump_w) * jump_v;
  }
  sum += -a * w(1.0, Side::left) * v(1.0, Side::left);
  return sum;
}

// B_h(w, v) = -(w, A* v)_{H,h} - (n.a w, v)_{E_h} for general broken
// functions, with the volume term integrated by a per-element Gauss rule.
// w(x, Side), v(x, Side) and dv(x, Side) return one-sided values.
template <class W, class V, class DV>
double bilinear_bh_quadrature(const Mesh1D& mesh, double a, W&& w, V&& v, DV&& dv) {
  static const QuadratureRule rule = gauss_legendre_unit<20>();
  double volume = 0.0;
  for (std::size_t k = 0; k < mesh.n_elements(); ++k) {
    const double xl = mesh.x_left(k), h = mesh.h();
    for (std::size_t q = 0; q < rule.size(); ++q) {
      const double x = xl + rule.points[q] * h;
      volume += rule.weights[q] * h * w(x, Side::right) * a * dv(x, Side::right);
    }
  }
  return volume - upwind_flux_sum(mesh, a, w, v);
}

// B_h(w, v) for w in H_h and v in V_h, all integrals in closed form. Interior
// jumps of v vanish, leaving the inflow flux term a w(1-) v(1).
inline double bilinear_bh(const DGFunction& w, const TestFunction& v) {
  const double a = v.a();
  const double inflow = a * w.value_right(w.mesh().n_elements() - 1) * v.node_values().back();
  return a * broken_inner_derivative(w, v) + inflow;
}

// Edge form of B_h(v, v) for a broken function given by one-sided traces:
// interior edges contribute a/2 [v]^2, the inflow edge a/2 v(1-)^2 from the
// volume term plus a v(1-)^2 from the inflow flux, and the outflow edge
// -a/2 v(0+)^2 (zero on V_h).
template <class V>
double edge_sum_identity(const Mesh1D& mesh, double a, V&& v) {
  double sum = 0.0;
  for (std::size_t k = 1; k < mesh.n_elements(); ++k) {
    const double x = mesh.x_left(k);
    const double jump = v(x, Side::left) - v(x, Side::right);
    sum += 0.5 * std::abs(a) * jump * jump;
  }
  const double inflow = v(1.0, Side::left);
  const double outflow = v(0.0, Side::right);
  sum += 0.5 * a * inflow * inflow + a * inflow * inflow;
  sum -= 0.5 * a * outflow * outflow;
  return sum;
}

// Spectral norm by power iteration on R^T R. The estimate approaches from
// below, so a threshold built from it errs toward keeping entries.
template <class Matrix>
double spectral_norm(const Matrix& r, int max_iterations = 1000, double rel_tol = 1e-12) {
  const auto n = r.cols();
  if (n == 0) return 0.0;
  Eigen::VectorXd v = Eigen::VectorXd::Constant(n, 1.0 / std::sqrt(static_cast<double>(n)));
  double sigma = 0.0;
  for (int it = 0; it < max_iterations; ++it) {
    const Eigen::VectorXd rv = r * v;
    const double next = rv.norm();
    Eigen::VectorXd w = r.transpose() * rv;
    const double wn = w.norm();
    if (wn == 0.0) return next;
    v = w / wn;
    if (it > 0 && std::abs(next - sigma) <= rel_tol * next) return next;
    sigma = next;
  }
  return sigma;
}

using SparseRowMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;
using SparseColMatrix = Eigen::SparseMatrix<double>;

struct CompressedMatrix {
  SparseRowMatrix matrix;
  double spectral_norm = 0.0;
  double threshold = 0.0;
  std::size_t retained = 0;
  std::size_t dropped = 0;
};

// Keeps entry (j, l) iff |entry| >= dt^2 * ||rhs||_2.
inline CompressedMatrix compress(const Eigen::MatrixXd& rhs, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("compress: dt must be positive");
  CompressedMatrix out;
  out.spectral_norm = spectral_norm(rhs);
  out.threshold = dt * dt * out.spectral_norm;
  std::vector<Eigen::Triplet<double>> kept;
  for (Eigen::Index j = 0; j < rhs.rows(); ++j) {
    for (Eigen::Index l = 0; l < rhs.cols(); ++l) {
      const double value = rhs(j, l);
      if (value == 0.0) continue;
      if (std::abs(value) >= out.threshold) {
        kept.emplace_back(j, l, value);
      } else {
        ++out.dropped;
      }
    }
  }
  out.retained = kept.size();
  out.matrix.resize(rhs.rows(), rhs.cols());
  out.matrix.setFromTriplets(kept.begin(), kept.end());
  return out;
}

// Rows of a block upper triangular matrix stored densely from the start of the
// diagonal block to the widest nonzero column, padded to one common width so
// the row products vectorize.
class BlockBand {
 public:
  BlockBand() = default;

  explicit BlockBand(const SparseRowMatrix& m) : n_(static_cast<std::size_t>(m.rows())) {
    for (Eigen::Index row = 0; row < m.outerSize(); ++row) {
      const auto first = static_cast<std::size_t>(row - row % 2);
      for (SparseRowMatrix::InnerIterator it(m, row); it; ++it) {
        const auto col = static_cast<std::size_t>(it.col());
        if (col < first) throw std::invalid_argument("BlockBand: entry below the diagonal block");
        width_ = std::max(width_, col - first + 1);
      }
    }
    values_.assign(n_ * width_, 0.0);
    for (Eigen::Index row = 0; row < m.outerSize(); ++row) {
      const auto first = static_cast<std::size_t>(row - row % 2);
      for (SparseRowMatrix::InnerIterator it(m, row); it; ++it) {
        values_[static_cast<std::size_t>(row) * width_ + static_cast<std::size_t>(it.col()) - first] = it.value();
      }
    }
  }

  std::size_t width() const { return width_; }

  // out[row] = row_dot(row, v) for all rows.
  void multiply(std::span<const double> v, std::span<double> out) const {
    switch (width_) {
      case 2: multiply_fixed<2>(v, out); return;
      case 4: multiply_fixed<4>(v, out); return;
      case 6: multiply_fixed<6>(v, out); return;
      case 8: multiply_fixed<8>(v, out); return;
      default:
        for (std::size_t row = 0; row < n_; ++row) out[row] = row_dot(row, v);
    }
  }

  double row_dot(std::size_t row, std::span<const double> v) const {
    const std::size_t first = row - row % 2;
    const std::size_t len = std::min(width_, n_ - first);
    const double* a = values_.data() + row * width_;
    const double* x = v.data() + first;
    double s = 0.0;
    for (std::size_t c = 0; c < len; ++c) s += a[c] * x[c];
    return s;
  }

 private:
  template <std::size_t W>
  void multiply_fixed(std::span<const double> v, std::span<double> out) const {
    // Full-width rows first; the last few block rows are clipped at n.
    const std::size_t full = n_ >= W ? n_ - W + 2 : 0;
    for (std::size_t row = 0; row < full; ++row) {
      const double* a = values_.data() + row * W;
      const double* x = v.data() + (row - row % 2);
      double s = 0.0;
      for (std::size_t c = 0; c < W; ++c) s += a[c] * x[c];
      out[row] = s;
    }
    for (std::size_t row = full; row < n_; ++row) out[row] = row_dot(row, v);
  }

  std::size_t n_ = 0;
  std::size_t width_ = 0;
  std::vector<double> values_;
};

// Direct solver for matrices that are block upper triangular in the 2x2
// element blocks, i.e. every entry couples a test element to the same or a later
// trial element. With D the block diagonal, the off-diagonal part is stored as
// D^{-1} U, so a solve is one back substitution over elements, linear in the
// number of stored entries.
class BlockTriangularSolver {
 public:
  static std::optional<BlockTriangularSolver> try_build(const SparseColMatrix& m) {
    if (m.rows() != m.cols() || m.rows() % 2 != 0) return std::nullopt;
    const Eigen::Index n = m.rows();
    std::vector<std::array<double, 4>> diag(static_cast<std::size_t>(n / 2), {0.0, 0.0, 0.0, 0.0});
    SparseRowMatrix off(n, n);
    std::vector<Eigen::Triplet<double>> entries;
    for (Eigen::Index c = 0; c < m.outerSize(); ++c) {
      for (SparseColMatrix::InnerIterator it(m, c); it; ++it) {
        const Eigen::Index rb = it.row() / 2, cb = it.col() / 2;
        if (cb < rb) return std::nullopt;
        if (cb == rb) {
          diag[static_cast<std::size_t>(rb)][2 * (it.row() % 2) + it.col() % 2] = it.value();
        } else {
          entries.emplace_back(it.row(), it.col(), it.value());
        }
      }
    }
    BlockTriangularSolver s;
    s.inverse_.resize(diag.size());
    for (std::size_t k = 0; k < diag.size(); ++k) {
      const auto [p, q, r, t] = diag[k];
      const double det = p * t - q * r;
      const double scale = (std::abs(p) + std::abs(q)) * (std::abs(r) + std::abs(t));
      if (!(std::abs(det) > 1e3 * std::numeric_limits<double>::epsilon() * scale)) return std::nullopt;
      s.inverse_[k] = {t / det, -q / det, -r / det, p / det};
    }
    off.setFromTriplets(entries.begin(), entries.end());
    s.upper_ = s.scaled(off);
    return s;
  }

  std::size_t size() const { return 2 * inverse_.size(); }

  // D^{-1} r for a matrix with the same row blocking.
  SparseRowMatrix scaled(const SparseRowMatrix& r) const {
    std::vector<Eigen::Triplet<double>> t;
    for (Eigen::Index row = 0; row < r.outerSize(); ++row) {
      const auto k = static_cast<std::size_t>(row / 2);
      const int i = static_cast<int>(row % 2);
      for (SparseRowMatrix::InnerIterator it(r, row); it; ++it) {
        // Row `row` of r feeds both rows of block k.
        t.emplace_back(2 * k, it.col(), inverse_[k][i] * it.value());
        t.emplace_back(2 * k + 1, it.col(), inverse_[k][2 + i] * it.value());
      }
    }
    SparseRowMatrix out(r.rows(), r.cols());
    out.setFromTriplets(t.begin(), t.end());
    out.prune(0.0, 0.0);
    out.makeCompressed();
    return out;
  }

  // x = A^{-1} y; x and y may alias.
  void solve(std::span<const double> y, std::span<double> x) const {
    for (std::size_t k = inverse_.size(); k-- > 0;) {
      const auto& inv = inverse_[k];
      const double y0 = y[2 * k], y1 = y[2 * k + 1];
      x[2 * k] = inv[0] * y0 + inv[1] * y1 - row_dot(upper_, 2 * k, x);
      x[2 * k + 1] = inv[2] * y0 + inv[3] * y1 - row_dot(upper_, 2 * k + 1, x);
    }
  }

  // x = A^{-1} r b given pre = BlockBand(scaled(r)); x must not alias b.
  void apply(const BlockBand& pre, std::span<const double> b, std::span<double> x) const {
    if (upper_.nonZeros() == 0) {
      pre.multiply(b, x);
      return;
    }
    for (std::size_t row = size(); row-- > 0;) x[row] = pre.row_dot(row, b) - row_dot(upper_, row, x);
  }

 private:
  static double row_dot(const SparseRowMatrix& m, std::size_t row, std::span<const double> v) {
    const auto* outer = m.outerIndexPtr();
    const auto* inner = m.innerIndexPtr();
    const auto* value = m.valuePtr();
    double s = 0.0;
    for (auto p = outer[row]; p < outer[row + 1]; ++p) s += value[p] * v[static_cast<std::size_t>(inner[p])];
    return s;
  }

  SparseRowMatrix upper_;
  std::vector<std::array<double, 4>> inverse_;
};

struct AssemblyOptions {
  bool compress_rhs = true;
};

// Time-step operator for one (mesh, dt, a). Immutable after assembly; the LU
// factorization is shared between copies.
struct SchemeMatrices {
  using LU = Eigen::SparseLU<SparseColMatrix, Eigen::COLAMDOrdering<int>>;

  Mesh1D mesh{1};
  double dt = 0.0;
  double a = 1.0;
  Eigen::MatrixXd rhs_mass;           // (w_l, v_j)
  SparseColMatrix lhs;                // (w_l, v_j) + dt * B_h(w_l, v_j)
  CompressedMatrix rhs_compressed;    // thresholded rhs_mass, or all of it
  std::shared_ptr<const LU> lhs_lu;
  std::shared_ptr<const BlockTriangularSolver> lhs_block;  // set when lhs has that structure
  BlockBand step_rhs;  // D^{-1} rhs_compressed, used with lhs_block
  std::vector<std::string> warnings;

  std::size_t n() const { return mesh.n_dofs(); }

  void solve_lhs(std::span<const double> y, std::span<double> x) const {
    if (lhs_block) {
      lhs_block->solve(y, x);
      return;
    }
    const Eigen::Map<const Eigen::VectorXd> yv(y.data(), static_cast<Eigen::Index>(y.size()));
    Eigen::Map<Eigen::VectorXd> xv(x.data(), static_cast<Eigen::Index>(x.size()));
    xv = lhs_lu->solve(yv);
  }

  // c_new = lhs^{-1} * rhs_compressed * b, with caller-provided scratch of size n.
  // out must not alias b.
  void apply_step(std::span<const double> b, std::span<double> out, std::span<double> scratch) const {
    if (lhs_block) {
      lhs_block->apply(step_rhs, b, out);
      return;
    }
    const Eigen::Map<const Eigen::VectorXd> bv(b.data(), static_cast<Eigen::Index>(b.size()));
    Eigen::Map<Eigen::VectorXd> y(scratch.data(), static_cast<Eigen::Index>(scratch.size()));
    y.noalias() = rhs_compressed.matrix * bv;
    solve_lhs(scratch, out);
  }

  void apply_step(std::span<const double> b, std::span<double> out) const {
    const std::vector<double> copy(b.begin(), b.end());
    std::vector<double> scratch(b.size());
    apply_step(copy, out, scratch);
  }
};

// Plain DG mass matrix (w_l, w_j), block diagonal.
inline SparseColMatrix dg_mass_matrix(const Mesh1D& mesh) {
  std::vector<Eigen::Triplet<double>> t;
  const double h = mesh.h();
  for (std::size_t k = 0; k < mesh.n_elements(); ++k) {
    const auto i = static_cast<int>(2 * k);
    t.emplace_back(i, i, h / 3.0);
    t.emplace_back(i, i + 1, h / 6.0);
    t.emplace_back(i + 1, i, h / 6.0);
    t.emplace_back(i + 1, i + 1, h / 3.0);
  }
  SparseColMatrix m(mesh.n_dofs(), mesh.n_dofs());
  m.setFromTriplets(t.begin(), t.end());
  return m;
}

// Test-function values v_j(1) for every basis function w_j.
inline Eigen::VectorXd test_outflow_values(const Mesh1D& mesh, double dt, double a) {
  const double z = mesh.h() / (dt * a);
  const detail::ElementTables tab(z);
  const std::size_t n_el = mesh.n_elements();
  Eigen::VectorXd out(mesh.n_dofs());
  for (std::size_t k = 0; k < n_el; ++k) {
    const double decay = std::exp(-z * static_cast<double>(n_el - 1 - k));
    for (int jj = 0; jj < 2; ++jj) out(2 * k + jj) = tab.outflow[jj] * decay;
  }
  return out;
}

inline SchemeMatrices assemble(const Mesh1D& mesh, double dt, double a,
                               AssemblyOptions options = {}) {
  if (!(dt > 0.0)) throw std::invalid_argument("assemble: dt must be positive");
  if (!(a > 0.0)) throw std::invalid_argument("assemble: a must be positive");

  SchemeMatrices out;
  out.mesh = mesh;
  out.dt = dt;
  out.a = a;
  if (dt > 1.0 / 3.0) {
    out.warnings.push_back("dt > 1/3: discrete inf-sup stability is not guaranteed");
  }

  const std::size_t n_el = mesh.n_elements();
  const std::size_t n = mesh.n_dofs();
  const double h = mesh.h();
  const double z = h / (dt * a);
  const detail::ElementTables tab(z);
  const Eigen::VectorXd outflow_at_one = test_outflow_values(mesh, dt, a);

  out.rhs_mass = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  std::vector<Eigen::Triplet<double>> lhs_entries;
  const double cancellation = 64.0 * std::numeric_limits<double>::epsilon();
  const std::size_t last = n - 1;

  for (std::size_t k = 0; k < n_el; ++k) {        // test element
    for (std::size_t e = k; e < n_el; ++e) {      // trial element
      const double decay = e == k ? 0.0 : std::exp(-z * static_cast<double>(e - k - 1));
      for (int jj = 0; jj < 2; ++jj) {
        const std::size_t row = 2 * k + jj;
        for (int ii = 0; ii < 2; ++ii) {
          const std::size_t col = 2 * e + ii;
          double mass_part, deriv_part;
          if (e == k) {
            mass_part = h * tab.same[ii][jj];
            deriv_part = tab.dsame[ii][jj];
          } else {
            const double carried = tab.outflow[jj] * decay;
            mass_part = h * carried * tab.decay_weight[ii];
            deriv_part = -z * carried * tab.decay_weight[ii];
          }
          out.rhs_mass(row, col) = mass_part;
          const double transport = dt * a * deriv_part;
          double value = mass_part + transport;
          double scale = std::abs(mass_part) + std::abs(transport);
          if (col == last) {
            const double inflow = dt * a * outflow_at_one(row);
            value += inflow;
            scale += std::abs(inflow);
          }
          // Entries that cancel down to rounding level are structural zeros.
          if (std::abs(value) > cancellation * scale) {
            lhs_entries.emplace_back(row, col, value);
          }
        }
      }
    }
  }

  out.lhs.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  out.lhs.setFromTriplets(lhs_entries.begin(), lhs_entries.end());
  out.lhs.makeCompressed();

  if (options.compress_rhs) {
    out.rhs_compressed = compress(out.rhs_mass, dt);
  } else {
    CompressedMatrix full;
    full.matrix = out.rhs_mass.sparseView(0.0, 0.0);
    full.retained = static_cast<std::size_t>(full.matrix.nonZeros());
    out.rhs_compressed = std::move(full);
  }

  auto lu = std::make_shared<SchemeMatrices::LU>();
  lu->analyzePattern(out.lhs);
  lu->factorize(out.lhs);
  if (lu->info() != Eigen::Success) {
    const Eigen::MatrixXd dense(out.lhs);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(dense);
    const auto& s = svd.singularValues();
    std::ostringstream msg;
    msg << "assemble: lhs factorization failed (condition estimate "
        << (s(s.size() - 1) > 0 ? s(0) / s(s.size() - 1) : std::numeric_limits<double>::infinity())
        << ")";
    throw std::runtime_error(msg.str());
  }
  out.lhs_lu = std::move(lu);
  if (auto block = BlockTriangularSolver::try_build(out.lhs)) {
    out.step_rhs = BlockBand(block->scaled(out.rhs_compressed.matrix));
    out.lhs_block = std::make_shared<const BlockTriangularSolver>(std::move(*block));
  }
  return out;
}

// Plain-text coordinate export: "row col value" per stored entry.
template <class Derived>
void write_coordinate(std::ostream& os, const Eigen::SparseMatrixBase<Derived>& m) {
  const auto old_precision = os.precision(17);
  os << "# rows " << m.rows() << " cols " << m.cols() << '\n';
  const auto& d = m.derived();
  for (Eigen::Index outer = 0; outer < d.outerSize(); ++outer) {
    for (typename Derived::InnerIterator it(d, outer); it; ++it) {
      os << it.row() << ' ' << it.col() << ' ' << it.value() << '\n';
    }
  }
  os.precision(old_precision);
}

inline void write_coordinate(std::ostream& os, const Eigen::MatrixXd& m) {
  write_coordinate(os, SparseColMatrix(m.sparseView(0.0, 0.0)));
}

}  // namespace levydg
