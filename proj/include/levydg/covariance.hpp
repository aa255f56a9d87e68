#pragma once

// Matern covariance on (0, 1) and its Karhunen-Loeve eigenpairs by the Nystrom
// method on a uniform midpoint grid.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/math/quadrature/gauss.hpp>

#include "levydg/special.hpp"

namespace levydg {

struct MaternSpec {
  double nu = 1.0;
  double rho = 0.25;

  void validate() const {
    if (!(nu > 0.0)) throw std::invalid_argument("MaternSpec: nu must be positive");
    if (!(rho > 0.0)) throw std::invalid_argument("MaternSpec: rho must be positive");
  }
};

// Normalized Matern correlation as a function of the distance r >= 0.
inline double matern_correlation(double r, const MaternSpec& spec) {
  r = std::abs(r);
  if (r == 0.0) return 1.0;
  const double nu = spec.nu;
  const double s = std::sqrt(2.0 * nu) * r / spec.rho;
  if (const int p = detail::half_integer_order(nu); p >= 0) {
    // Terminating series: p!/(2p)! * sum_i (p+i)!/(i!(p-i)!) (2s)^{p-i}, times e^{-s}.
    double poly = 0.0;
    double coeff = 1.0;  // (p+i)!/(i!(p-i)!) * p!/(2p)!, built from i = p down
    for (int i = p; i >= 0; --i) {
      if (i < p) {
        coeff *= static_cast<double>(i + 1) /
                 (static_cast<double>(p + i + 1) * static_cast<double>(p - i));
      }
      poly += coeff * std::pow(2.0 * s, p - i);
    }
    return poly * std::exp(-s);
  }
  if (s > 700.0) return 0.0;
  return std::pow(2.0, 1.0 - nu) / std::tgamma(nu) * std::pow(s, nu) * bessel_k(nu, s);
}

inline double matern_kernel(double x, double y, const MaternSpec& spec) {
  return matern_correlation(x - y, spec);
}

using Kernel = std::function<double(double, double)>;

struct KLDecomposition {
  std::vector<double> quad_points;
  std::vector<double> quad_weights;
  std::vector<double> eigenvalues;   // first n_modes, non-increasing, >= 0
  Eigen::MatrixXd eigenvectors;      // n_quad x n_modes, values e_k(q_j)
  double trace = 0.0;                // trace of the discrete operator, ~ int k(x, x) dx
  std::optional<MaternSpec> spec;    // empty for test kernels
  Kernel kernel;

  std::size_t n_quad() const { return quad_points.size(); }
  std::size_t n_modes() const { return eigenvalues.size(); }
};

namespace detail {

inline void midpoint_grid(std::size_t n_quad, std::vector<double>& points,
                          std::vector<double>& weights) {
  points.resize(n_quad);
  weights.assign(n_quad, 1.0 / static_cast<double>(n_quad));
  for (std::size_t j = 0; j < n_quad; ++j) {
    points[j] = (static_cast<double>(j) + 0.5) / static_cast<double>(n_quad);
  }
}

}  // namespace detail

// Nystrom eigenpairs of the integral operator with kernel k on (0, 1).
// Symmetric eigensolve of W^{1/2} K W^{1/2}. Eigenvalues below 1e-12 times the
// largest are round-off and clamped to zero. `diagonal`, when given, replaces
// every diagonal entry w_i k(q_i, q_i) (stationary kernels only).
inline KLDecomposition nystrom_eigendecomposition(Kernel kernel, std::size_t n_quad,
                                                  std::size_t n_modes,
                                                  std::optional<double> diagonal = {}) {
  if (n_quad == 0) throw std::invalid_argument("nystrom: n_quad must be positive");
  if (n_modes > n_quad) throw std::invalid_argument("nystrom: n_modes exceeds n_quad");

  KLDecomposition out;
  detail::midpoint_grid(n_quad, out.quad_points, out.quad_weights);
  const auto nq = static_cast<Eigen::Index>(n_quad);
  Eigen::MatrixXd b(nq, nq);
  out.trace = 0.0;
  for (Eigen::Index i = 0; i < nq; ++i) {
    const double wi = std::sqrt(out.quad_weights[i]);
    for (Eigen::Index j = 0; j <= i; ++j) {
      const double wj = std::sqrt(out.quad_weights[j]);
      const double value = wi * kernel(out.quad_points[i], out.quad_points[j]) * wj;
      b(i, j) = value;
      b(j, i) = value;
    }
    if (diagonal) b(i, i) = *diagonal;
    out.trace += b(i, i);
  }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(b);
  if (solver.info() != Eigen::Success) {
    throw std::runtime_error("nystrom: symmetric eigensolver did not converge");
  }
  const auto& values = solver.eigenvalues();  // ascending
  const auto& vectors = solver.eigenvectors();

  out.eigenvalues.resize(n_modes);
  out.eigenvectors.resize(nq, static_cast<Eigen::Index>(n_modes));
  const double floor = 1e-12 * std::max(values(nq - 1), 0.0);
  for (std::size_t k = 0; k < n_modes; ++k) {
    const Eigen::Index src = nq - 1 - static_cast<Eigen::Index>(k);
    out.eigenvalues[k] = values(src) > floor ? values(src) : 0.0;
    for (Eigen::Index j = 0; j < nq; ++j) {
      out.eigenvectors(j, static_cast<Eigen::Index>(k)) =
          vectors(j, src) / std::sqrt(out.quad_weights[j]);
    }
  }
  out.kernel = std::move(kernel);
  return out;
}

// For nu <= 1/2 the kernel has a corner at r = 0 and the midpoint value on the
// diagonal overshoots the cell integral by O(h^2), which shifts every
// eigenvalue by O(h). The diagonal then uses the exact cell integral instead.
// Smoother kernels keep the plain midpoint rule, whose errors cancel better.
inline KLDecomposition nystrom_eigendecomposition(const MaternSpec& spec, std::size_t n_quad,
                                                  std::size_t n_modes) {
  spec.validate();
  std::optional<double> diagonal;
  if (n_quad > 0 && spec.nu <= 0.5) {
    const double half = 0.5 / static_cast<double>(n_quad);
    diagonal = 2.0 * boost::math::quadrature::gauss<double, 20>::integrate(
                         [&](double r) { return matern_correlation(r, spec); }, 0.0, half);
  }
  auto decomp = nystrom_eigendecomposition(
      [spec](double x, double y) { return matern_kernel(x, y, spec); }, n_quad, n_modes, diagonal);
  decomp.spec = spec;
  return decomp;
}

// Nystrom interpolation e_k(x) = (1/eta_k) sum_j w_j k(x, q_j) e_k(q_j).
inline double eigenfunction_eval(const KLDecomposition& d, std::size_t k, double x) {
  if (k >= d.n_modes()) throw std::out_of_range("eigenfunction_eval: mode index out of range");
  const double eta = d.eigenvalues[k];
  if (!(eta > 0.0)) {
    throw std::domain_error("eigenfunction_eval: zero eigenvalue, interpolation undefined");
  }
  double sum = 0.0;
  for (std::size_t j = 0; j < d.n_quad(); ++j) {
    sum += d.quad_weights[j] * d.kernel(x, d.quad_points[j]) *
           d.eigenvectors(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k));
  }
  return sum / eta;
}

// e_k(x_i) for all points x_i and modes k < n_modes, as a points x n_modes matrix.
inline Eigen::MatrixXd eigenfunction_matrix(const KLDecomposition& d,
                                            const std::vector<double>& points,
                                            std::size_t n_modes) {
  if (n_modes > d.n_modes()) {
    throw std::out_of_range("eigenfunction_matrix: not enough modes in decomposition");
  }
  for (std::size_t k = 0; k < n_modes; ++k) {
    if (!(d.eigenvalues[k] > 0.0)) {
      throw std::domain_error("eigenfunction_matrix: zero eigenvalue, interpolation undefined");
    }
  }
  const auto np = static_cast<Eigen::Index>(points.size());
  const auto nq = static_cast<Eigen::Index>(d.n_quad());
  Eigen::MatrixXd kx(np, nq);
  for (Eigen::Index i = 0; i < np; ++i)
    for (Eigen::Index j = 0; j < nq; ++j)
      kx(i, j) = d.quad_weights[j] * d.kernel(points[i], d.quad_points[j]);
  Eigen::MatrixXd out = kx * d.eigenvectors.leftCols(static_cast<Eigen::Index>(n_modes));
  for (std::size_t k = 0; k < n_modes; ++k) out.col(static_cast<Eigen::Index>(k)) /= d.eigenvalues[k];
  return out;
}

// sum_{k > n} eta_k, as trace minus the retained head, floored at zero.
inline double truncation_tail(const KLDecomposition& d, std::size_t n) {
  if (n > d.n_modes()) throw std::out_of_range("truncation_tail: N exceeds available modes");
  double head = 0.0;
  for (std::size_t k = 0; k < n; ++k) head += d.eigenvalues[k];
  return std::max(d.trace - head, 0.0);
}

// Binary cache keyed by (nu, rho, n_quad, n_modes).
inline std::string cache_file_name(const MaternSpec& spec, std::size_t n_quad, std::size_t n_modes) {
  std::ostringstream name;
  name << std::setprecision(17) << "kl_nu" << spec.nu << "_rho" << spec.rho << "_nq" << n_quad
       << "_nm" << n_modes << ".bin";
  return name.str();
}

namespace detail {

inline constexpr char kCacheMagic[8] = {'L', 'V', 'Y', 'K', 'L', '0', '0', '1'};

template <class T>
void write_raw(std::ostream& os, const T& value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T read_raw(std::istream& is) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw std::runtime_error("KL cache: truncated file");
  return value;
}

}  // namespace detail

inline void save_decomposition(const KLDecomposition& d, const std::filesystem::path& file) {
  if (!d.spec) throw std::invalid_argument("save_decomposition: only Matern decompositions are cached");
  std::ofstream os(file, std::ios::binary);
  if (!os) throw std::runtime_error("save_decomposition: cannot open " + file.string());
  os.write(detail::kCacheMagic, sizeof(detail::kCacheMagic));
  detail::write_raw(os, d.spec->nu);
  detail::write_raw(os, d.spec->rho);
  detail::write_raw(os, static_cast<std::uint64_t>(d.n_quad()));
  detail::write_raw(os, static_cast<std::uint64_t>(d.n_modes()));
  detail::write_raw(os, d.trace);
  for (double v : d.eigenvalues) detail::write_raw(os, v);
  os.write(reinterpret_cast<const char*>(d.eigenvectors.data()),
           static_cast<std::streamsize>(sizeof(double) * d.eigenvectors.size()));
  if (!os) throw std::runtime_error("save_decomposition: write failed");
}

inline KLDecomposition load_decomposition(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw std::runtime_error("load_decomposition: cannot open " + file.string());
  char magic[sizeof(detail::kCacheMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, detail::kCacheMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("load_decomposition: not a KL cache file");
  }
  MaternSpec spec;
  spec.nu = detail::read_raw<double>(is);
  spec.rho = detail::read_raw<double>(is);
  const auto n_quad = detail::read_raw<std::uint64_t>(is);
  const auto n_modes = detail::read_raw<std::uint64_t>(is);
  KLDecomposition d;
  detail::midpoint_grid(n_quad, d.quad_points, d.quad_weights);
  d.trace = detail::read_raw<double>(is);
  d.eigenvalues.resize(n_modes);
  for (auto& v : d.eigenvalues) v = detail::read_raw<double>(is);
  d.eigenvectors.resize(static_cast<Eigen::Index>(n_quad), static_cast<Eigen::Index>(n_modes));
  is.read(reinterpret_cast<char*>(d.eigenvectors.data()),
          static_cast<std::streamsize>(sizeof(double) * d.eigenvectors.size()));
  if (!is) throw std::runtime_error("load_decomposition: truncated file");
  d.spec = spec;
  d.kernel = [spec](double x, double y) { return matern_kernel(x, y, spec); };
  return d;
}

// Loads the cached decomposition if present, otherwise computes and stores it.
inline KLDecomposition cached_decomposition(const MaternSpec& spec, std::size_t n_quad,
                                            std::size_t n_modes,
                                            const std::filesystem::path& cache_dir) {
  if (cache_dir.empty()) return nystrom_eigendecomposition(spec, n_quad, n_modes);
  const auto file = cache_dir / cache_file_name(spec, n_quad, n_modes);
  if (std::filesystem::exists(file)) return load_decomposition(file);
  auto d = nystrom_eigendecomposition(spec, n_quad, n_modes);
  std::filesystem::create_directories(cache_dir);
  save_decomposition(d, file);
  return d;
}

}  // namespace levydg
