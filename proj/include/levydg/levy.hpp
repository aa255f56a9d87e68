#pragma once

// Exact sampling of truncated normal-inverse-Gaussian Levy fields.
//
// The N KL coordinates share one inverse-Gaussian subordinator per increment,
// which makes them uncorrelated but dependent. The generalized hyperbolic
// characteristic function is provided as a distributional oracle.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <memory>
#include <numbers>
#include <ostream>
#include <sstream>
#include <span>
#include <stdexcept>
#include <vector>

#include "levydg/covariance.hpp"
#include "levydg/mesh.hpp"
#include "levydg/random.hpp"
#include "levydg/special.hpp"
#include "levydg/version.hpp"

namespace levydg {

struct NIGParams {
  double lambda = -0.5;
  double alpha = 10.0;
  double delta = 1.0;
  std::vector<double> theta;  // empty means zero
  std::vector<double> mu;     // empty means zero
  Eigen::MatrixXd gamma;      // empty means identity
  bool normalize_unit_variance = true;

  double theta_at(std::size_t k) const { return k < theta.size() ? theta[k] : 0.0; }
  double mu_at(std::size_t k) const { return k < mu.size() ? mu[k] : 0.0; }

  double gamma_at(std::size_t i, std::size_t j) const {
    if (gamma.size() == 0) return i == j ? 1.0 : 0.0;
    return gamma(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }

  // theta . Gamma theta
  double theta_gamma_theta() const {
    double s = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i)
      for (std::size_t j = 0; j < theta.size(); ++j) s += theta[i] * gamma_at(i, j) * theta[j];
    return s;
  }

  double subordinator_rate() const { return std::sqrt(alpha * alpha - theta_gamma_theta()); }

  // Standard deviation of one coordinate at t = 1 (theta = 0 gives sqrt(delta/alpha)).
  double marginal_scale() const {
    const double q = alpha * alpha - theta_gamma_theta();
    return std::sqrt(delta * alpha * alpha * std::pow(q, -1.5));
  }

  void validate() const {
    if (!(alpha > 0.0)) throw std::invalid_argument("NIGParams: alpha must be positive");
    if (!(delta > 0.0)) throw std::invalid_argument("NIGParams: delta must be positive");
    if (!(alpha * alpha > theta_gamma_theta())) {
      throw std::invalid_argument("NIGParams: alpha^2 must exceed theta.Gamma theta");
    }
    if (gamma.size() != 0) {
      if (gamma.rows() != gamma.cols()) throw std::invalid_argument("NIGParams: Gamma must be square");
      if (!gamma.isApprox(gamma.transpose(), 1e-14)) {
        throw std::invalid_argument("NIGParams: Gamma must be symmetric");
      }
      for (Eigen::Index i = 0; i < gamma.rows(); ++i) {
        if (gamma(i, i) != 1.0) throw std::invalid_argument("NIGParams: Gamma must have unit diagonal");
      }
      Eigen::LLT<Eigen::MatrixXd> llt(gamma);
      if (llt.info() != Eigen::Success) {
        throw std::invalid_argument("NIGParams: Gamma must be positive definite");
      }
    }
  }

  bool sampler_supported() const {
    return lambda == -0.5 && gamma.size() == 0;
  }
};

// Inverse-Gaussian variate with mean shape/rate and variance shape/rate^3
// (Michael, Schucany and Haas transformation with one acceptance step).
inline double sample_ig(double shape, double rate, StreamRng& rng) {
  if (!(shape > 0.0) || !(rate > 0.0)) {
    throw std::invalid_argument("sample_ig: shape and rate must be positive");
  }
  const double mean = shape / rate;
  const double lambda = shape * shape;  // IG(mean, lambda) shape parameter
  const double n = rng.normal();
  const double y = n * n;
  const double phi = mean * y / (2.0 * lambda);
  // mean * (1 + phi - sqrt(phi^2 + 2 phi)), rationalized.
  const double x = mean / (1.0 + phi + std::sqrt(phi * phi + 2.0 * phi));
  const double u = rng.uniform();
  return u <= mean / (mean + x) ? x : mean * mean / x;
}

// One increment of the N-dimensional NIG process over a step dt, written to out.
inline void sample_nig_increment(const NIGParams& params, double dt, StreamRng& rng,
                                 std::span<double> out) {
  if (!(dt > 0.0)) throw std::invalid_argument("sample_nig_increment: dt must be positive");
  const double s = sample_ig(params.delta * dt, params.subordinator_rate(), rng);
  const double root = std::sqrt(s);
  const double scale = params.normalize_unit_variance ? 1.0 / params.marginal_scale() : 1.0;
  const bool has_drift = !params.theta.empty() || !params.mu.empty();
  for (std::size_t k = 0; k < out.size(); ++k) {
    double value = root * rng.normal();
    if (has_drift) value += params.mu_at(k) * dt + s * params.theta_at(k);
    out[k] = value * scale;
  }
}

namespace detail {

// log K_{p+1/2}(z) for complex z in the right half plane.
inline std::complex<double> log_bessel_k_half(int p, std::complex<double> z) {
  std::complex<double> term = 1.0, sum = 1.0;
  for (int k = 1; k <= p; ++k) {
    term *= static_cast<double>((p + k) * (p - k + 1)) / (2.0 * k * z);
    sum += term;
  }
  return 0.5 * std::log(std::numbers::pi / (2.0 * z)) - z + std::log(sum);
}

}  // namespace detail

// E exp(i u . GH(t)) for the generalized hyperbolic process.
inline std::complex<double> char_function_gh(std::span<const double> u, double t,
                                             const NIGParams& params) {
  using cplx = std::complex<double>;
  const cplx i(0.0, 1.0);
  const std::size_t dim = std::max({u.size(), params.theta.size(), params.mu.size()});
  auto u_at = [&](std::size_t k) { return k < u.size() ? u[k] : 0.0; };

  double drift = 0.0;
  for (std::size_t k = 0; k < dim; ++k) drift += u_at(k) * params.mu_at(k);

  // q = alpha^2 - (iu + theta) . Gamma (iu + theta)
  cplx quad = 0.0;
  for (std::size_t a = 0; a < dim; ++a) {
    for (std::size_t b = 0; b < dim; ++b) {
      const double g = params.gamma_at(a, b);
      if (g == 0.0) continue;
      quad += (i * u_at(a) + params.theta_at(a)) * g * (i * u_at(b) + params.theta_at(b));
    }
  }
  const double q0 = params.alpha * params.alpha - params.theta_gamma_theta();
  const cplx q = params.alpha * params.alpha - quad;
  if (!(q.real() > 0.0) || !(q0 > 0.0)) {
    throw std::domain_error("char_function_gh: argument outside the principal branch domain");
  }

  const double lambda = params.lambda;
  const cplx arg = params.delta * std::sqrt(q);
  const double arg0 = params.delta * std::sqrt(q0);
  cplx log_ratio;
  if (const int p = detail::half_integer_order(std::abs(lambda)); p >= 0) {
    log_ratio = detail::log_bessel_k_half(p, arg) - detail::log_bessel_k_half(p, cplx(arg0));
  } else {
    if (q.imag() != 0.0) {
      throw std::domain_error("char_function_gh: complex Bessel argument needs a half-integer lambda");
    }
    log_ratio = std::log(bessel_k(lambda, arg.real())) - std::log(bessel_k(lambda, arg0));
  }
  const cplx log_power = 0.5 * lambda * t * std::log(cplx(q0) / q);
  return std::exp(i * drift * t + log_power + t * log_ratio);
}

// KL modes evaluated at the element endpoints of a mesh, scaled by sqrt(eta_k).
// Maps a vector of coordinate increments d_ell to the nodal values of
// dL_N(x) = sum_k sqrt(eta_k) d_ell_k e_k(x).
class ModalField {
 public:
  ModalField(const KLDecomposition& decomp, const Mesh1D& mesh, std::size_t n_modes)
      : mesh_(mesh), n_modes_(n_modes) {
    if (n_modes > decomp.n_modes()) {
      throw std::out_of_range("ModalField: truncation index exceeds available modes");
    }
    basis_ = eigenfunction_matrix(decomp, mesh.boundaries(), n_modes);
    for (std::size_t k = 0; k < n_modes; ++k) {
      basis_.col(static_cast<Eigen::Index>(k)) *= std::sqrt(decomp.eigenvalues[k]);
    }
  }

  const Mesh1D& mesh() const { return mesh_; }
  std::size_t n_modes() const { return n_modes_; }
  // (n_elements + 1) x n_modes, column k is sqrt(eta_k) e_k at the boundaries.
  const Eigen::MatrixXd& basis() const { return basis_; }

  // Values at the n_elements + 1 boundaries; uses the first n_modes entries of d_ell.
  void node_values(std::span<const double> d_ell, std::span<double> out) const {
    if (d_ell.size() < n_modes_) throw std::invalid_argument("ModalField: too few increments");
    const Eigen::Map<const Eigen::VectorXd> x(d_ell.data(), static_cast<Eigen::Index>(n_modes_));
    Eigen::Map<Eigen::VectorXd> y(out.data(), static_cast<Eigen::Index>(out.size()));
    y.noalias() = basis_ * x;
  }

  DGFunction field(std::span<const double> d_ell) const {
    std::vector<double> nodes(mesh_.n_elements() + 1);
    node_values(d_ell, nodes);
    DGFunction out(mesh_);
    auto c = out.coefficients();
    for (std::size_t k = 0; k < mesh_.n_elements(); ++k) {
      c[2 * k] = nodes[k];
      c[2 * k + 1] = nodes[k + 1];
    }
    return out;
  }

 private:
  Mesh1D mesh_;
  std::size_t n_modes_;
  Eigen::MatrixXd basis_;
};

// Seeded source of truncated field increments for one Monte Carlo sample.
class LevySampler {
 public:
  LevySampler(NIGParams params, std::shared_ptr<const KLDecomposition> decomp, std::size_t n_modes,
              std::uint64_t seed, std::uint64_t stream)
      : params_(std::move(params)), decomp_(std::move(decomp)), n_modes_(n_modes),
        rng_(seed, stream), buffer_(n_modes) {
    params_.validate();
    if (!params_.sampler_supported()) {
      throw std::invalid_argument("LevySampler: only NIG (lambda = -1/2) with Gamma = I is sampled");
    }
    if (!decomp_) throw std::invalid_argument("LevySampler: missing decomposition");
    if (n_modes > decomp_->n_modes()) {
      throw std::out_of_range("LevySampler: truncation index exceeds available modes");
    }
    for (std::size_t k = 0; k < n_modes; ++k) {
      if (!(decomp_->eigenvalues[k] > 0.0)) {
        throw std::domain_error("LevySampler: truncation index includes a zero eigenvalue");
      }
    }
  }

  const NIGParams& params() const { return params_; }
  const KLDecomposition& decomposition() const { return *decomp_; }
  std::size_t n_modes() const { return n_modes_; }
  std::uint64_t seed() const { return rng_.seed(); }
  std::uint64_t stream() const { return rng_.stream(); }
  StreamRng& rng() { return rng_; }

  // Coordinate increments (d_ell_1, ..., d_ell_N) over a step dt.
  std::span<const double> increments(double dt) {
    sample_nig_increment(params_, dt, rng_, buffer_);
    return buffer_;
  }

 private:
  NIGParams params_;
  std::shared_ptr<const KLDecomposition> decomp_;
  std::size_t n_modes_;
  StreamRng rng_;
  std::vector<double> buffer_;
};

// Nodal interpolant of one field increment dL_N on the mesh.
inline DGFunction field_increment(LevySampler& sampler, double dt, const Mesh1D& mesh) {
  const ModalField modes(sampler.decomposition(), mesh, sampler.n_modes());
  return modes.field(sampler.increments(dt));
}

// Audit export of a noise path: one row per (step, mode).
inline void write_noise_csv(std::ostream& os, LevySampler& sampler, double dt, std::size_t steps) {
  std::ostringstream config;
  config.precision(17);
  const auto& p = sampler.params();
  const auto& d = sampler.decomposition();
  if (d.spec) config << "nu=" << d.spec->nu << " rho=" << d.spec->rho << ' ';
  config << "n_quad=" << d.n_quad() << " N=" << sampler.n_modes() << " dt=" << dt << " steps=" << steps
         << " nig_alpha=" << p.alpha << " nig_delta=" << p.delta << " stream=" << sampler.stream()
         << " normalize_variance=" << (p.normalize_unit_variance ? "on" : "off");
  write_provenance(os, config.str(), sampler.seed());
  os << "time,mode,increment\n";
  const auto old_precision = os.precision(17);
  for (std::size_t i = 1; i <= steps; ++i) {
    const auto inc = sampler.increments(dt);
    for (std::size_t k = 0; k < inc.size(); ++k) {
      os << static_cast<double>(i) * dt << ',' << k + 1 << ',' << inc[k] << '\n';
    }
  }
  os.precision(old_precision);
}

}  // namespace levydg
