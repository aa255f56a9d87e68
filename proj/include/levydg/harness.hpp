#pragma once

// Monte Carlo strong-error study: equilibrated discretization levels, a
// per-sample reference solve sharing its noise with every coarse level, and
// log-log rate regression.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "levydg/covariance.hpp"
#include "levydg/levy.hpp"
#include "levydg/mesh.hpp"
#include "levydg/petrov.hpp"
#include "levydg/solver.hpp"
#include "levydg/version.hpp"

namespace levydg {

struct Equilibration {
  double target = 0.0;  // common size of the temporal and truncation errors
  std::size_t steps = 0;
  std::size_t n_modes = 0;
};

// target = max(h^{2 gamma}, dt_floor), m = ceil(T / target), N the smallest
// truncation whose eigenvalue tail is at most target.
inline Equilibration equilibrate(double h, double gamma, const KLDecomposition& decomp, double T,
                                 double dt_floor) {
  if (!(gamma > 0.0)) throw std::invalid_argument("equilibrate: gamma must be positive");
  if (!(h > 0.0) || !(T > 0.0)) throw std::invalid_argument("equilibrate: h and T must be positive");
  Equilibration e;
  e.target = std::max(std::pow(h, 2.0 * gamma), dt_floor);
  e.steps = static_cast<std::size_t>(std::ceil(T / e.target));
  const std::size_t available = decomp.n_modes();
  for (std::size_t n = 0; n <= available; ++n) {
    if (truncation_tail(decomp, n) <= e.target) {
      e.n_modes = n;
      return e;
    }
  }
  std::ostringstream msg;
  msg << "equilibrate: " << available << " modes leave a tail of " << truncation_tail(decomp, available)
      << ", above the target " << e.target << "; compute more modes";
  throw std::runtime_error(msg.str());
}

// One spatial/temporal/truncation level.
struct Level {
  int h_exp = 0;
  std::size_t n_elements = 0;
  std::size_t steps = 0;
  std::size_t n_modes = 0;

  double h() const { return 1.0 / static_cast<double>(n_elements); }
};

struct RateFit {
  double slope = 0.0;
  double stderr_ = 0.0;
  std::size_t n_points = 0;
};

// Ordinary least squares of log(rmse) on log(h).
inline RateFit fit_rate(std::span<const double> h, std::span<const double> rmse) {
  if (h.size() != rmse.size()) throw std::invalid_argument("fit_rate: size mismatch");
  if (h.size() < 3) throw std::invalid_argument("fit_rate: at least three refinements are needed");
  const std::size_t n = h.size();
  std::vector<double> x(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(h[i] > 0.0) || !(rmse[i] > 0.0)) throw std::invalid_argument("fit_rate: values must be positive");
    x[i] = std::log(h[i]);
    y[i] = std::log(rmse[i]);
  }
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (!(sxx > 0.0)) throw std::invalid_argument("fit_rate: refinements must differ");
  RateFit fit;
  fit.slope = sxy / sxx;
  fit.n_points = n;
  double ssr = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = y[i] - my - fit.slope * (x[i] - mx);
    ssr += r * r;
  }
  fit.stderr_ = std::sqrt(ssr / static_cast<double>(n - 2) / sxx);
  return fit;
}

// Squared broken-norm distance between a fine function and a coarse one on a
// nested mesh. Exact: both are linear on every fine element.
inline double nested_squared_distance(const DGFunction& fine, const DGFunction& coarse) {
  const auto& fm = fine.mesh();
  const auto& cm = coarse.mesh();
  if (fm.n_elements() % cm.n_elements() != 0) {
    throw std::invalid_argument("nested_squared_distance: meshes are not nested");
  }
  const std::size_t ratio = fm.n_elements() / cm.n_elements();
  const double hf = fm.h();
  double sum = 0.0;
  for (std::size_t k = 0; k < fm.n_elements(); ++k) {
    const std::size_t K = k / ratio;
    const double dl = fine.value_left(k) - coarse.eval_in(K, fm.x_left(k));
    const double dr = fine.value_right(k) - coarse.eval_in(K, fm.x_right(k));
    sum += hf / 3.0 * (dl * dl + dl * dr + dr * dr);
  }
  return sum;
}

struct CellEstimate {
  std::size_t samples = 0;  // paths that entered the mean
  std::size_t aborted = 0;
  double mean_square = 0.0;
  double rmse = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  bool valid = true;
};

// Normal approximation on the mean of squared errors, delta method for the root.
inline CellEstimate summarize_squared_errors(std::span<const double> sq, std::size_t aborted,
                                             std::size_t requested) {
  CellEstimate c;
  c.aborted = aborted;
  c.samples = sq.size();
  c.valid = static_cast<double>(aborted) <= 0.01 * static_cast<double>(requested) && !sq.empty();
  if (sq.empty()) {
    c.rmse = c.ci_lo = c.ci_hi = std::numeric_limits<double>::quiet_NaN();
    return c;
  }
  double mean = 0.0;
  for (double v : sq) mean += v;
  mean /= static_cast<double>(sq.size());
  double var = 0.0;
  for (double v : sq) var += (v - mean) * (v - mean);
  var = sq.size() > 1 ? var / static_cast<double>(sq.size() - 1) : 0.0;
  const double se = std::sqrt(var / static_cast<double>(sq.size()));
  c.mean_square = mean;
  c.rmse = std::sqrt(mean);
  const double half = c.rmse > 0.0 ? 1.959963984540054 * se / (2.0 * c.rmse) : 0.0;
  c.ci_lo = std::max(0.0, c.rmse - half);
  c.ci_hi = c.rmse + half;
  return c;
}

// Runs body(i) for i in [0, n) on up to `threads` workers. Results must be
// written to slot i so the caller can reduce in index order.
template <class Body>
void for_each_index(std::size_t n, unsigned threads, Body&& body) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = next++; i < n; i = next++) body(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct CoupledStudy {
  ModelCoefficients model;
  NIGParams noise;
  std::shared_ptr<const KLDecomposition> decomposition;
  double T = 1.0;
  std::size_t samples = 100;
  std::uint64_t seed = 0;
  std::uint64_t stream_base = 0;  // stream of sample s is stream_base | s
  unsigned threads = 1;
};

// Per-sample state of one level inside the coupled loop.
struct LevelRun {
  std::size_t ratio = 1;  // fine steps per step of this level
  std::size_t pending = 0;
  std::size_t n_modes = 0;
  double dt = 0.0;
  std::vector<double> accumulated;
  std::vector<double> nodes;
  std::unique_ptr<TimeStepper> stepper;
  DGFunction state{Mesh1D(1)};
  bool aborted = false;
};

// Estimates the strong error of every coarse level against one reference level.
// For each sample the reference noise is generated once; each coarse level
// consumes the exact sum of the fine increments over its step, truncated to its
// leading modes.
inline std::vector<CellEstimate> estimate_rmse(std::span<const Level> coarse, const Level& reference,
                                               const CoupledStudy& study) {
  if (study.samples < 1) throw std::invalid_argument("estimate_rmse: need at least one sample");
  const bool noisy = study.model.kind != CoefficientKind::none &&
                     !(study.model.kind == CoefficientKind::forward_model && study.model.sigma == 0.0);
  if (noisy && !study.decomposition) throw std::invalid_argument("estimate_rmse: missing decomposition");
  for (const auto& l : coarse) {
    if (reference.n_elements % l.n_elements != 0 || reference.steps % l.steps != 0) {
      std::ostringstream msg;
      msg << "estimate_rmse: reference (" << reference.n_elements << " elements, " << reference.steps
          << " steps) does not refine level (" << l.n_elements << ", " << l.steps << ")";
      throw std::invalid_argument(msg.str());
    }
    if (l.n_modes > reference.n_modes) throw std::invalid_argument("estimate_rmse: N_ref must be >= N");
  }

  const HomogenizedModel model = homogenize(study.model);
  std::vector<Level> all(coarse.begin(), coarse.end());
  all.push_back(reference);
  std::vector<std::shared_ptr<const SchemeMatrices>> matrices;
  std::vector<DGFunction> initial;
  for (const auto& l : all) {
    const Mesh1D mesh(l.n_elements);
    matrices.push_back(std::make_shared<const SchemeMatrices>(
        assemble(mesh, study.T / static_cast<double>(l.steps), study.model.a)));
    initial.push_back(project_l2([&](double x) { return model.initial(x); }, mesh));
  }
  std::vector<std::optional<ModalField>> fields(all.size());
  if (noisy) {
    for (std::size_t i = 0; i < all.size(); ++i) {
      fields[i].emplace(*study.decomposition, Mesh1D(all[i].n_elements), all[i].n_modes);
    }
  }

  const std::size_t n_coarse = coarse.size();
  const std::size_t n_ref_steps = reference.steps;
  const double dt_ref = study.T / static_cast<double>(n_ref_steps);
  // sq[s * n_coarse + l], NaN for aborted paths.
  std::vector<double> sq(study.samples * n_coarse, std::numeric_limits<double>::quiet_NaN());
  std::vector<char> ref_aborted(study.samples, 0);

  for_each_index(study.samples, study.threads, [&](std::size_t s) {
    std::vector<LevelRun> runs(all.size());
    for (std::size_t i = 0; i < all.size(); ++i) {
      auto& r = runs[i];
      r.ratio = n_ref_steps / all[i].steps;
      r.n_modes = all[i].n_modes;
      r.dt = study.T / static_cast<double>(all[i].steps);
      r.accumulated.assign(r.n_modes, 0.0);
      if (noisy) r.nodes.assign(all[i].n_elements + 1, 0.0);
      r.stepper = std::make_unique<TimeStepper>(matrices[i], model);
      r.state = initial[i];
    }
    std::optional<LevySampler> sampler;
    if (noisy) sampler.emplace(study.noise, study.decomposition, reference.n_modes, study.seed,
                               study.stream_base | static_cast<std::uint64_t>(s));
    const LevelRun& ref = runs.back();
    // Fine increments are drawn in chunks so the reference nodal noise is one
    // matrix product per chunk; the draw order is unchanged.
    constexpr std::size_t kChunk = 64;
    Eigen::MatrixXd draws, ref_nodes;
    if (noisy) {
      draws.resize(static_cast<Eigen::Index>(reference.n_modes), kChunk);
      ref_nodes.resize(static_cast<Eigen::Index>(reference.n_elements + 1), kChunk);
    }
    const std::size_t ref_index = all.size() - 1;
    try {
      for (std::size_t start = 0; start < n_ref_steps; start += kChunk) {
        const std::size_t len = std::min(kChunk, n_ref_steps - start);
        const auto cols = static_cast<Eigen::Index>(len);
        if (noisy) {
          for (Eigen::Index c = 0; c < cols; ++c) {
            const auto d = sampler->increments(dt_ref);
            std::copy(d.begin(), d.end(), draws.col(c).data());
          }
          ref_nodes.leftCols(cols).noalias() = fields[ref_index]->basis() * draws.leftCols(cols);
        }
        for (Eigen::Index c = 0; c < cols; ++c) {
          const std::span<const double> d =
              noisy ? std::span<const double>(draws.col(c).data(), reference.n_modes) : std::span<const double>{};
          for (std::size_t i = 0; i < all.size(); ++i) {
            auto& r = runs[i];
            if (r.aborted) continue;
            if (noisy && r.ratio > 1) {
              for (std::size_t k = 0; k < r.n_modes; ++k) r.accumulated[k] += d[k];
            }
            if (++r.pending < r.ratio) continue;
            r.pending = 0;
            std::span<const double> nodes = r.nodes;
            if (noisy && i == ref_index) {
              nodes = std::span<const double>(ref_nodes.col(c).data(), reference.n_elements + 1);
            } else if (noisy) {
              fields[i]->node_values(r.ratio > 1 ? std::span<const double>(r.accumulated) : d, r.nodes);
              std::fill(r.accumulated.begin(), r.accumulated.end(), 0.0);
            }
            try {
              r.stepper->advance(r.state.coefficients(), nodes);
            } catch (const PathAborted&) {
              if (i == ref_index) throw;
              r.aborted = true;
            }
          }
        }
      }
    } catch (const PathAborted&) {
      ref_aborted[s] = 1;
      return;
    }
    for (std::size_t l = 0; l < n_coarse; ++l) {
      if (!runs[l].aborted) sq[s * n_coarse + l] = nested_squared_distance(ref.state, runs[l].state);
    }
  });

  std::vector<CellEstimate> out;
  for (std::size_t l = 0; l < n_coarse; ++l) {
    std::vector<double> values;
    std::size_t aborted = 0;
    for (std::size_t s = 0; s < study.samples; ++s) {
      const double v = sq[s * n_coarse + l];
      if (std::isnan(v)) {
        ++aborted;
      } else {
        values.push_back(v);
      }
    }
    out.push_back(summarize_squared_errors(values, aborted, study.samples));
  }
  return out;
}

enum class GammaMode { paper, custom };

struct StudyConfig {
  std::vector<double> nu_list{0.5, 1.0, 2.0};
  double rho = 0.25;
  std::vector<int> h_exps{3, 4, 5, 6};
  int ref_exp = 8;
  std::size_t samples = 100;
  double T = 1.0;
  ModelCoefficients model;
  NIGParams noise;
  std::uint64_t seed = 0;
  int dt_floor_exp = 20;
  GammaMode gamma_mode = GammaMode::paper;
  double custom_gamma = 1.0;
  std::size_t n_quad = 512;
  std::optional<std::filesystem::path> cache_dir;
  unsigned threads = 1;

  double dt_floor() const { return std::ldexp(1.0, -dt_floor_exp); }

  double gamma(double nu) const { return gamma_mode == GammaMode::paper ? std::min(1.5, nu) : custom_gamma; }

  void validate() const {
    if (nu_list.empty()) throw std::invalid_argument("StudyConfig: empty nu list");
    if (h_exps.empty()) throw std::invalid_argument("StudyConfig: empty h list");
    if (samples < 2) throw std::invalid_argument("StudyConfig: at least two samples are needed");
    if (!(T > 0.0)) throw std::invalid_argument("StudyConfig: T must be positive");
    for (int e : h_exps) {
      if (e < 0 || e >= ref_exp) {
        throw std::invalid_argument("StudyConfig: reference exponent must exceed every study exponent");
      }
    }
    if (ref_exp > 20) throw std::invalid_argument("StudyConfig: reference exponent too large");
    if (gamma_mode == GammaMode::custom && !(custom_gamma > 0.0)) {
      throw std::invalid_argument("StudyConfig: custom gamma must be positive");
    }
    for (double nu : nu_list) MaternSpec{nu, rho}.validate();
    noise.validate();
  }

  // Canonical text of everything that affects the numbers.
  std::string canonical() const {
    std::ostringstream os;
    os.precision(17);
    os << "nu=";
    for (double v : nu_list) os << v << ';';
    os << " rho=" << rho << " h_exps=";
    for (int e : h_exps) os << e << ';';
    os << " ref_exp=" << ref_exp << " samples=" << samples << " T=" << T << " a=" << model.a
       << " alpha=" << model.alpha << " sigma=" << model.sigma << " nig_alpha=" << noise.alpha
       << " nig_delta=" << noise.delta << " normalize_variance=" << (noise.normalize_unit_variance ? "on" : "off")
       << " dt_floor_exp=" << dt_floor_exp << " gamma=" << (gamma_mode == GammaMode::paper ? "paper" : "custom")
       << ':' << custom_gamma << " n_quad=" << n_quad << " seed=" << seed;
    return os.str();
  }

  std::uint64_t hash() const { return config_hash(canonical()); }
};

struct CellReport {
  double nu = 0.0;
  int h_exp = 0;
  double h = 0.0;
  std::size_t steps = 0;
  std::size_t n_modes = 0;
  CellEstimate estimate;
  std::string error;  // set when the cell could not be computed
};

struct RateReport {
  double nu = 0.0;
  double gamma = 0.0;  // value used for equilibration, not the fitted rate
  std::optional<RateFit> fit;
};

struct ConvergenceReport {
  std::vector<CellReport> cells;
  std::vector<RateReport> rates;
  std::string canonical;  // StudyConfig::canonical() of the run
  std::uint64_t seed = 0;
};

inline void write_rmse_csv(std::ostream& os, const ConvergenceReport& report) {
  write_provenance(os, report.canonical, report.seed);
  os << "nu,h,m,N,samples,aborted,rmse,ci_lo,ci_hi\n";
  const auto old = os.precision(17);
  for (const auto& c : report.cells) {
    os << c.nu << ',' << c.h << ',' << c.steps << ',' << c.n_modes << ',' << c.estimate.samples << ','
       << c.estimate.aborted << ',' << c.estimate.rmse << ',' << c.estimate.ci_lo << ',' << c.estimate.ci_hi
       << '\n';
  }
  os.precision(old);
}

inline void write_rates_csv(std::ostream& os, const ConvergenceReport& report) {
  write_provenance(os, report.canonical, report.seed);
  os << "nu,slope,stderr,n_points\n";
  const auto old = os.precision(17);
  for (const auto& r : report.rates) {
    if (!r.fit) continue;
    os << r.nu << ',' << r.fit->slope << ',' << r.fit->stderr_ << ',' << r.fit->n_points << '\n';
  }
  os.precision(old);
}

using ProgressFn = std::function<void(const std::string&)>;

inline ConvergenceReport run_convergence_study(const StudyConfig& study, const ProgressFn& progress = {}) {
  study.validate();
  ConvergenceReport report;
  report.canonical = study.canonical();
  report.seed = study.seed;

  for (std::size_t vi = 0; vi < study.nu_list.size(); ++vi) {
    const double nu = study.nu_list[vi];
    const double gamma = study.gamma(nu);
    RateReport rate{nu, gamma, std::nullopt};
    const MaternSpec spec{nu, study.rho};
    auto decomp = std::make_shared<const KLDecomposition>(
        study.cache_dir ? cached_decomposition(spec, study.n_quad, study.n_quad, *study.cache_dir)
                        : nystrom_eigendecomposition(spec, study.n_quad, study.n_quad));

    const auto make_level = [&](int e) {
      const double h = std::ldexp(1.0, -e);
      const Equilibration eq = equilibrate(h, gamma, *decomp, study.T, study.dt_floor());
      return Level{e, std::size_t{1} << e, eq.steps, eq.n_modes};
    };

    std::vector<CellReport> cells;
    std::vector<Level> levels;
    std::optional<Level> reference;
    std::string failure;
    try {
      reference = make_level(study.ref_exp);
    } catch (const std::exception& ex) {
      failure = ex.what();
    }
    for (int e : study.h_exps) {
      CellReport cell;
      cell.nu = nu;
      cell.h_exp = e;
      cell.h = std::ldexp(1.0, -e);
      try {
        const Level l = make_level(e);
        cell.steps = l.steps;
        cell.n_modes = l.n_modes;
        if (!failure.empty()) throw std::runtime_error(failure);
        if (reference->steps % l.steps != 0) {
          throw std::runtime_error("time grid of the reference does not refine this level");
        }
        levels.push_back(l);
      } catch (const std::exception& ex) {
        cell.error = ex.what();
        cell.estimate.valid = false;
        cell.estimate.rmse = cell.estimate.ci_lo = cell.estimate.ci_hi =
            std::numeric_limits<double>::quiet_NaN();
      }
      cells.push_back(cell);
    }

    if (!levels.empty()) {
      if (progress) {
        std::ostringstream msg;
        msg << "nu=" << nu << " gamma=" << gamma << " reference m=" << reference->steps
            << " N=" << reference->n_modes;
        progress(msg.str());
      }
      CoupledStudy coupled{study.model, study.noise, decomp, study.T, study.samples, study.seed,
                           static_cast<std::uint64_t>(vi) << 32, study.threads};
      std::vector<CellEstimate> est;
      std::string est_error;
      try {
        est = estimate_rmse(levels, *reference, coupled);
      } catch (const std::exception& ex) {
        est_error = ex.what();
      }
      std::size_t li = 0;
      for (auto& cell : cells) {
        if (!cell.error.empty()) continue;
        if (!est_error.empty()) {
          cell.error = est_error;
          cell.estimate.valid = false;
          cell.estimate.rmse = cell.estimate.ci_lo = cell.estimate.ci_hi =
              std::numeric_limits<double>::quiet_NaN();
        } else {
          cell.estimate = est[li];
        }
        ++li;
      }
    }

    std::vector<double> hs, rs;
    for (const auto& cell : cells) {
      if (cell.error.empty() && cell.estimate.valid && cell.estimate.rmse > 0.0) {
        hs.push_back(cell.h);
        rs.push_back(cell.estimate.rmse);
      }
    }
    if (hs.size() >= 3) rate.fit = fit_rate(hs, rs);
    report.cells.insert(report.cells.end(), cells.begin(), cells.end());
    report.rates.push_back(rate);
  }
  return report;
}

// ((x - 0.3)(0.6 - x) / 0.15^2)^3 on (0.3, 0.6): C^2, peak value 1 at 0.45.
inline double c2_bump(double x) {
  if (!(x > 0.3 && x < 0.6)) return 0.0;
  const double s = (x - 0.3) * (0.6 - x) / 0.0225;
  return s * s * s;
}

struct DeterministicStudy {
  std::vector<int> h_exps{3, 4, 5, 6, 7};
  double T = 0.2;
  double a = 1.0;
  double dt_scale = 1.0;  // dt = T / ceil(T / (dt_scale h^2))
  bool compress_rhs = true;
};

struct DeterministicResult {
  std::vector<double> h;
  std::vector<std::size_t> steps;
  std::vector<double> errors;
  RateFit fit;
};

// Noise-free transport of the C^2 bump against the shift-semigroup oracle.
inline DeterministicResult deterministic_convergence(const DeterministicStudy& study) {
  DeterministicResult out;
  const auto exact = exact_deterministic_solution(c2_bump, study.T, study.a);
  for (int e : study.h_exps) {
    const double h = std::ldexp(1.0, -e);
    SolverConfig config;
    config.n_elements = std::size_t{1} << e;
    config.steps = static_cast<std::size_t>(std::ceil(study.T / (study.dt_scale * h * h)));
    config.horizon = study.T;
    config.n_modes = 0;
    config.model.kind = CoefficientKind::none;
    config.model.a = study.a;
    config.model.initial = c2_bump;
    config.model.inflow = 0.0;
    config.compress_rhs = study.compress_rhs;
    const Trajectory traj = solve_path(config, nullptr);
    out.h.push_back(h);
    out.steps.push_back(config.steps);
    out.errors.push_back(broken_distance(traj.final_state(), exact));
  }
  if (out.h.size() >= 3) out.fit = fit_rate(out.h, out.errors);
  return out;
}

inline void write_report(const std::filesystem::path& dir, const ConvergenceReport& report) {
  std::filesystem::create_directories(dir);
  std::ofstream rmse(dir / "rmse.csv", std::ios::binary);
  std::ofstream rates(dir / "rates.csv", std::ios::binary);
  if (!rmse || !rates) throw std::runtime_error("write_report: cannot open output files in " + dir.string());
  write_rmse_csv(rmse, report);
  write_rates_csv(rates, report);
}

}  // namespace levydg
