#pragma once

// Backward Euler / Petrov-DG time stepping for
//
//   dX = a dX/dx dt + F(X) dt + G(X) dL,   X(t, 1) = c,
//
// with the energy forward model coefficients F = Sigma^2, G = Sigma and
// Sigma(xi, x) = sigma (e^{-alpha x} - e^{-alpha}) xi. The solver always works on
// the homogenized state X - c and shifts back on output.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "levydg/covariance.hpp"
#include "levydg/levy.hpp"
#include "levydg/mesh.hpp"
#include "levydg/petrov.hpp"
#include "levydg/special.hpp"
#include "levydg/version.hpp"

namespace levydg {

enum class CoefficientKind {
  forward_model,  // F = Sigma^2, G = Sigma
  additive,       // F = 0, G = 1
  none,           // F = G = 0
};

struct ModelCoefficients {
  CoefficientKind kind = CoefficientKind::forward_model;
  double a = 1.0;
  double alpha = 0.5;
  double sigma = 1.0;
  double nig_alpha = 10.0;  // enters the forward-model initial condition
  std::function<double(double)> initial;  // replaces the forward-model X0 when set
  std::optional<double> inflow;           // replaces e^{-alpha} when set

  double inflow_value() const {
    if (inflow) return *inflow;
    return kind == CoefficientKind::forward_model && !initial ? std::exp(-alpha) : 0.0;
  }

  // sigma (e^{-alpha x} - e^{-alpha}); vanishes at the inflow boundary x = 1.
  double profile(double x) const { return sigma * (std::exp(-alpha * x) - std::exp(-alpha)); }

  double coefficient(double xi, double x) const { return profile(x) * xi; }

  double drift(double xi, double x) const {
    switch (kind) {
      case CoefficientKind::forward_model: {
        const double s = coefficient(xi, x);
        return s * s;
      }
      default:
        return 0.0;
    }
  }

  double diffusion(double xi, double x) const {
    switch (kind) {
      case CoefficientKind::forward_model:
        return coefficient(xi, x);
      case CoefficientKind::additive:
        return 1.0;
      default:
        return 0.0;
    }
  }
};

// X0(x) = e^{-alpha x} + sigma^2 K_0(alpha_hat) / (alpha pi) (1 - e^{-alpha x}).
inline double initial_condition(double x, const ModelCoefficients& model) {
  if (model.initial) return model.initial(x);
  const double decay = std::exp(-model.alpha * x);
  const double level =
      model.sigma * model.sigma * bessel_k(0.0, model.nig_alpha) / (model.alpha * std::numbers::pi);
  return decay + level * (1.0 - decay);
}

// Problem with zero inflow data obtained by the shift X = Y + c.
struct HomogenizedModel {
  ModelCoefficients base;
  double shift = 0.0;

  double drift(double y, double x) const { return base.drift(y + shift, x); }
  double diffusion(double y, double x) const { return base.diffusion(y + shift, x); }
  double initial(double x) const { return initial_condition(x, base) - shift; }

  DGFunction restore(DGFunction y) const {
    for (double& c : y.coefficients()) c += shift;
    return y;
  }

  DGFunction remove(DGFunction x) const {
    for (double& c : x.coefficients()) c -= shift;
    return x;
  }
};

inline HomogenizedModel homogenize(const ModelCoefficients& model) {
  return HomogenizedModel{model, model.inflow_value()};
}

class PathAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Largest nodal magnitude tolerated before a path is declared blown up.
inline constexpr double kBlowUpBound = 1e6;

// Advances homogenized coefficient vectors on one (mesh, dt). Holds scratch
// buffers, so one instance per worker.
class TimeStepper {
 public:
  TimeStepper(std::shared_ptr<const SchemeMatrices> matrices, const HomogenizedModel& model)
      : matrices_(std::move(matrices)), model_(model) {
    const auto& mesh = matrices_->mesh;
    const std::size_t n = mesh.n_dofs();
    profile_.resize(n);
    for (std::size_t i = 0; i < n; ++i) profile_[i] = model_.base.profile(mesh.dof_coordinate(i));
    rhs_.resize(n);
    scratch_.resize(n);
  }

  const SchemeMatrices& matrices() const { return *matrices_; }
  const HomogenizedModel& model() const { return model_; }

  // Forms b = c + dt F(c) + G(c) dL at the element endpoints. dl_nodes holds the
  // noise at the n_elements + 1 boundaries (empty for no noise).
  void form_rhs(std::span<const double> state, std::span<const double> dl_nodes,
                std::span<double> b) const {
    const std::size_t n = state.size();
    const double dt = matrices_->dt;
    const double shift = model_.shift;
    const bool noise = !dl_nodes.empty();
    switch (model_.base.kind) {
      case CoefficientKind::forward_model:
        if (!noise) {
          for (std::size_t i = 0; i < n; ++i) {
            const double s = profile_[i] * (state[i] + shift);
            b[i] = state[i] + dt * s * s;
          }
          break;
        }
        for (std::size_t i = 0; i < n; ++i) {
          // DOF 2k sits on boundary k, DOF 2k + 1 on boundary k + 1.
          const double s = profile_[i] * (state[i] + shift);
          b[i] = state[i] + s * (dt * s + dl_nodes[(i + 1) / 2]);
        }
        break;
      case CoefficientKind::additive:
        for (std::size_t i = 0; i < n; ++i) b[i] = state[i] + (noise ? dl_nodes[(i + 1) / 2] : 0.0);
        break;
      case CoefficientKind::none:
        std::copy(state.begin(), state.end(), b.begin());
        break;
    }
  }

  // One step in place. Throws PathAborted on non-finite or runaway values.
  void advance(std::span<double> state, std::span<const double> dl_nodes) {
    form_rhs(state, dl_nodes, rhs_);
    matrices_->apply_step(rhs_, state, scratch_);
    // Counting keeps the loop branch-free so it vectorizes; NaN fails the
    // comparison as well.
    std::size_t runaway = 0;
    for (double v : state) runaway += !(std::abs(v) <= kBlowUpBound);
    if (runaway > 0) {
      throw PathAborted("time step produced a non-finite or runaway state (|X| > 1e6)");
    }
  }

 private:
  std::shared_ptr<const SchemeMatrices> matrices_;
  HomogenizedModel model_;
  std::vector<double> profile_;
  std::vector<double> rhs_;
  std::vector<double> scratch_;
};

// Single step on homogenized states: returns the new state.
inline DGFunction step(const DGFunction& state, const DGFunction& dl,
                       std::shared_ptr<const SchemeMatrices> matrices, const HomogenizedModel& model) {
  if (!(state.mesh() == matrices->mesh) || !(dl.mesh() == matrices->mesh)) {
    throw std::invalid_argument("step: state, noise and matrices must share a mesh");
  }
  // The noise enters through its endpoint values; DOF i sits at boundary (i + 1) / 2.
  const auto& mesh = state.mesh();
  std::vector<double> dl_nodes(mesh.n_elements() + 1);
  for (std::size_t k = 0; k < mesh.n_elements(); ++k) dl_nodes[k] = dl.value_left(k);
  dl_nodes.back() = dl.value_right(mesh.n_elements() - 1);
  TimeStepper stepper(std::move(matrices), model);
  DGFunction out = state;
  stepper.advance(out.coefficients(), dl_nodes);
  return out;
}

struct SolverConfig {
  std::size_t n_elements = 32;
  std::size_t steps = 32;  // m, dt = T / m
  double horizon = 1.0;    // T
  std::size_t n_modes = 10;
  ModelCoefficients model;
  MaternSpec covariance;
  bool retain_all = false;
  bool restore_inflow = true;  // report X rather than X - c
  bool compress_rhs = true;

  double dt() const { return horizon / static_cast<double>(steps); }

  std::string canonical() const {
    std::ostringstream os;
    os.precision(17);
    os << "n_elements=" << n_elements << " steps=" << steps << " T=" << horizon << " N=" << n_modes
       << " nu=" << covariance.nu << " rho=" << covariance.rho << " kind=" << static_cast<int>(model.kind)
       << " a=" << model.a << " alpha=" << model.alpha << " sigma=" << model.sigma
       << " nig_alpha=" << model.nig_alpha << " custom_initial=" << (model.initial ? 1 : 0)
       << " inflow=" << model.inflow_value() << " restore_inflow=" << restore_inflow
       << " compress_rhs=" << compress_rhs;
    return os.str();
  }

  void validate() const {
    if (n_elements == 0) throw std::invalid_argument("SolverConfig: n_elements must be positive");
    if (!(horizon > 0.0)) throw std::invalid_argument("SolverConfig: T must be positive");
  }
};

struct Trajectory {
  std::vector<DGFunction> states;  // all steps, or the final state only
  std::vector<std::size_t> step_indices;
  SolverConfig config;
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  bool normalize_variance = true;

  const DGFunction& final_state() const { return states.back(); }
};

// Runs m steps from P_h X0. The sampler may be null when the model has no noise.
inline Trajectory solve_path(const SolverConfig& config, LevySampler* sampler,
                             std::shared_ptr<const SchemeMatrices> matrices = nullptr) {
  config.validate();
  const Mesh1D mesh(config.n_elements);
  const HomogenizedModel model = homogenize(config.model);
  const bool noisy = config.model.kind != CoefficientKind::none &&
                     !(config.model.kind == CoefficientKind::forward_model && config.model.sigma == 0.0);
  if (noisy && config.steps > 0 && sampler == nullptr) {
    throw std::invalid_argument("solve_path: a stochastic model needs a sampler");
  }
  if (noisy && sampler != nullptr && sampler->n_modes() != config.n_modes) {
    throw std::invalid_argument("solve_path: sampler truncation does not match config");
  }

  Trajectory out;
  out.config = config;
  if (sampler) {
    out.seed = sampler->seed();
    out.stream = sampler->stream();
    out.normalize_variance = sampler->params().normalize_unit_variance;
  }

  DGFunction state = project_l2([&](double x) { return model.initial(x); }, mesh);
  auto record = [&](std::size_t i, const DGFunction& y) {
    out.states.push_back(config.restore_inflow ? model.restore(y) : y);
    out.step_indices.push_back(i);
  };
  if (config.retain_all || config.steps == 0) record(0, state);
  if (config.steps == 0) return out;

  if (!matrices) {
    matrices = std::make_shared<const SchemeMatrices>(
        assemble(mesh, config.dt(), config.model.a, {.compress_rhs = config.compress_rhs}));
  }
  if (!(matrices->mesh == mesh)) throw std::invalid_argument("solve_path: matrices built for another mesh");

  TimeStepper stepper(matrices, model);
  std::optional<ModalField> modes;
  std::vector<double> dl_nodes;
  if (noisy) {
    modes.emplace(sampler->decomposition(), mesh, config.n_modes);
    dl_nodes.resize(mesh.n_elements() + 1);
  }
  for (std::size_t i = 1; i <= config.steps; ++i) {
    if (noisy) modes->node_values(sampler->increments(config.dt()), dl_nodes);
    stepper.advance(state.coefficients(), dl_nodes);
    if (config.retain_all || i == config.steps) record(i, state);
  }
  return out;
}

// Shift semigroup: x -> X0(x + a t) inside D, zero outside.
inline std::function<double(double)> exact_deterministic_solution(std::function<double(double)> x0,
                                                                  double t, double a) {
  if (!(t >= 0.0)) throw std::invalid_argument("exact_deterministic_solution: t must be non-negative");
  return [x0 = std::move(x0), t, a](double x) {
    const double y = x + a * t;
    if (t == 0.0) return x0(x);
    return y > 0.0 && y < 1.0 ? x0(y) : 0.0;
  };
}

inline void write_trajectory_csv(std::ostream& os, const Trajectory& traj) {
  std::ostringstream config;
  config << traj.config.canonical() << " stream=" << traj.stream
         << " normalize_variance=" << (traj.normalize_variance ? "on" : "off");
  write_provenance(os, config.str(), traj.seed);
  os << "step,x_left,x_right,value_left,value_right\n";
  const auto old_precision = os.precision(17);
  for (std::size_t s = 0; s < traj.states.size(); ++s) {
    const auto& u = traj.states[s];
    for (std::size_t k = 0; k < u.mesh().n_elements(); ++k) {
      os << traj.step_indices[s] << ',' << u.mesh().x_left(k) << ',' << u.mesh().x_right(k) << ','
         << u.value_left(k) << ',' << u.value_right(k) << '\n';
    }
  }
  os.precision(old_precision);
}

}  // namespace levydg
