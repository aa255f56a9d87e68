#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <memory>
#include <numbers>
#include <random>
#include <sstream>

#include "levydg/harness.hpp"
#include "levydg/solver.hpp"
#include "oracles.hpp"

using namespace levydg;

namespace {

double bessel_k0_oracle(double x) {
  return oracle::integrate([&](double t) { return std::exp(-x * std::cosh(t)); }, 0.0, 6.0, 60);
}

double bump(double x) {
  if (!(x > 0.3 && x < 0.6)) return 0.0;
  const double s = (x - 0.3) * (0.6 - x) / 0.0225;
  return s * s * s;
}

std::shared_ptr<const KLDecomposition> matern(double nu, std::size_t n_quad, std::size_t n_modes) {
  return std::make_shared<const KLDecomposition>(nystrom_eigendecomposition(MaternSpec{nu, 0.25}, n_quad, n_modes));
}

Eigen::VectorXd as_vector(std::span<const double> c) {
  return Eigen::Map<const Eigen::VectorXd>(c.data(), static_cast<Eigen::Index>(c.size()));
}

}  // namespace

TEST(InitialCondition, Examples) {
  const ModelCoefficients m;
  EXPECT_NEAR(initial_condition(0.0, m), 1.0, 1e-15);
  const double k0 = bessel_k0_oracle(10.0);
  EXPECT_NEAR(k0, 1.778e-5, 1e-8);
  const double expected = std::exp(-0.5) + k0 / (0.5 * std::numbers::pi) * (1.0 - std::exp(-0.5));
  EXPECT_NEAR(initial_condition(1.0, m), expected, 1e-15);
  ModelCoefficients quiet;
  quiet.sigma = 0.0;
  for (double x : {0.0, 0.3, 1.0}) EXPECT_EQ(initial_condition(x, quiet), std::exp(-0.5 * x));
}

TEST(ModelCoefficients, VanishesAtInflowAndNoArbitrage) {
  const ModelCoefficients m;
  std::mt19937_64 gen(1);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int i = 0; i < 100; ++i) {
    const double xi = u(gen), x = (u(gen) + 3.0) / 6.0;
    EXPECT_EQ(m.coefficient(xi, 1.0), 0.0);
    EXPECT_EQ(m.drift(xi, x), m.diffusion(xi, x) * m.diffusion(xi, x));
  }
}

TEST(Homogenize, ZeroShiftIsIdentity) {
  ModelCoefficients m;
  m.kind = CoefficientKind::none;
  const auto h = homogenize(m);
  EXPECT_EQ(h.shift, 0.0);
  std::mt19937_64 gen(2);
  const DGFunction y(Mesh1D(4), oracle::random_coefficients(8, gen));
  const auto r = h.restore(y);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(r.coefficients()[i], y.coefficients()[i]);
}

TEST(Homogenize, ForwardModelShift) {
  const auto h = homogenize(ModelCoefficients{});
  EXPECT_NEAR(h.shift, 0.60653065971263342, 1e-15);
  EXPECT_NEAR(h.initial(1.0) + h.shift, initial_condition(1.0, ModelCoefficients{}), 1e-15);
  EXPECT_EQ(h.diffusion(0.2, 0.4), ModelCoefficients{}.diffusion(0.2 + h.shift, 0.4));
}

TEST(Homogenize, RoundTrip) {
  const auto h = homogenize(ModelCoefficients{});
  std::mt19937_64 gen(3);
  const DGFunction x(Mesh1D(16), oracle::random_coefficients(32, gen));
  const auto back = h.restore(h.remove(x));
  for (std::size_t i = 0; i < 32; ++i) EXPECT_NEAR(back.coefficients()[i], x.coefficients()[i], 1e-14);
}

TEST(Step, ZeroStateIsFixedPoint) {
  ModelCoefficients m;
  m.sigma = 0.0;
  const Mesh1D mesh(8);
  auto s = std::make_shared<const SchemeMatrices>(assemble(mesh, 0.01, 1.0));
  // sigma = 0 makes the homogenized forward model linear with zero data.
  DGFunction x(mesh);
  for (int i = 0; i < 20; ++i) x = step(x, DGFunction(mesh), s, homogenize(m));
  for (double c : x.coefficients()) EXPECT_EQ(c, 0.0);
}

TEST(Step, AdditiveNoiseAgainstDenseSolve) {
  ModelCoefficients m;
  m.kind = CoefficientKind::additive;
  const Mesh1D mesh(16);
  const double dt = 0.02;
  auto s = std::make_shared<const SchemeMatrices>(assemble(mesh, dt, 1.0, {.compress_rhs = false}));
  std::mt19937_64 gen(4);
  const DGFunction x0(mesh, oracle::random_coefficients(mesh.n_dofs(), gen));
  const auto d = matern(1.0, 128, 6);
  const ModalField modes(*d, mesh, 6);
  const auto dl = modes.field(oracle::random_coefficients(6, gen));
  const auto x1 = step(x0, dl, s, homogenize(m));

  const Eigen::MatrixXd lhs(s->lhs);
  const Eigen::VectorXd b = s->rhs_mass * (as_vector(x0.coefficients()) + as_vector(dl.coefficients()));
  const Eigen::VectorXd ref = lhs.fullPivLu().solve(b);
  for (std::size_t i = 0; i < mesh.n_dofs(); ++i) EXPECT_NEAR(x1.coefficients()[i], ref(i), 1e-10);
}

TEST(Step, ForwardModelRhsIsNodalProduct) {
  // b = c + dt F(c) + G(c) dL at every node, with F = G^2 (no-arbitrage).
  const ModelCoefficients m;
  const auto hm = homogenize(m);
  const Mesh1D mesh(8);
  const double dt = 0.05;
  auto s = std::make_shared<const SchemeMatrices>(assemble(mesh, dt, 1.0));
  const TimeStepper stepper(s, hm);
  std::mt19937_64 gen(5);
  const auto c = oracle::random_coefficients(mesh.n_dofs(), gen);
  const auto dl = oracle::random_coefficients(mesh.n_elements() + 1, gen);
  std::vector<double> b(mesh.n_dofs()), b0(mesh.n_dofs());
  stepper.form_rhs(c, dl, b);
  stepper.form_rhs(c, {}, b0);
  for (std::size_t i = 0; i < mesh.n_dofs(); ++i) {
    const double x = mesh.dof_coordinate(i);
    const double g = hm.diffusion(c[i], x);
    EXPECT_NEAR(b0[i] - c[i], dt * hm.drift(c[i], x), 1e-15);
    EXPECT_NEAR(hm.drift(c[i], x), g * g, 1e-15);
    EXPECT_NEAR(b[i], c[i] + dt * g * g + g * dl[(i + 1) / 2], 1e-14);
  }
}

TEST(Step, RunawayStateAborts) {
  ModelCoefficients m;
  m.kind = CoefficientKind::none;
  const Mesh1D mesh(4);
  auto s = std::make_shared<const SchemeMatrices>(assemble(mesh, 0.1, 1.0));
  DGFunction x(mesh);
  x.coefficients()[3] = 1e9;
  EXPECT_THROW(step(x, DGFunction(mesh), s, homogenize(m)), PathAborted);
  x.coefficients()[3] = std::nan("");
  EXPECT_THROW(step(x, DGFunction(mesh), s, homogenize(m)), PathAborted);
}

TEST(Step, RejectsMeshMismatch) {
  auto s = std::make_shared<const SchemeMatrices>(assemble(Mesh1D(4), 0.1, 1.0));
  EXPECT_THROW(step(DGFunction(Mesh1D(8)), DGFunction(Mesh1D(8)), s, homogenize(ModelCoefficients{})),
               std::invalid_argument);
}

TEST(SolvePath, NoStepsGivesProjection) {
  SolverConfig c;
  c.n_elements = 8;
  c.steps = 0;
  const auto traj = solve_path(c, nullptr);
  ASSERT_EQ(traj.states.size(), 1u);
  const auto p = project_l2([](double x) { return initial_condition(x, ModelCoefficients{}); }, Mesh1D(8));
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(traj.final_state().coefficients()[i], p.coefficients()[i], 1e-15);
}

TEST(SolvePath, DeterministicShiftConvergence) {
  std::vector<double> h, err;
  const auto exact = exact_deterministic_solution(bump, 0.2, 1.0);
  for (int e = 3; e <= 6; ++e) {
    SolverConfig c;
    c.n_elements = std::size_t{1} << e;
    c.horizon = 0.2;
    c.steps = static_cast<std::size_t>(std::ceil(0.2 * c.n_elements * c.n_elements));
    c.model.kind = CoefficientKind::none;
    c.model.initial = bump;
    const auto traj = solve_path(c, nullptr);
    h.push_back(1.0 / c.n_elements);
    err.push_back(broken_distance(traj.final_state(), exact));
  }
  EXPECT_GT(oracle::loglog_slope(h, err), 1.7);
}

TEST(SolvePath, NoiseFreeRunIgnoresSeed) {
  SolverConfig c;
  c.n_elements = 16;
  c.steps = 40;
  c.n_modes = 4;
  c.model.sigma = 0.0;
  const auto d = matern(1.0, 64, 4);
  LevySampler s1(NIGParams{}, d, 4, 1, 0), s2(NIGParams{}, d, 4, 99, 7);
  const auto a = solve_path(c, &s1), b = solve_path(c, &s2), n = solve_path(c, nullptr);
  for (std::size_t i = 0; i < 32; ++i) {
    EXPECT_EQ(a.final_state().coefficients()[i], b.final_state().coefficients()[i]);
    EXPECT_EQ(a.final_state().coefficients()[i], n.final_state().coefficients()[i]);
  }
}

TEST(SolvePath, BitIdenticalRerun) {
  const auto d = matern(0.5, 256, 256);
  const auto eq = equilibrate(std::ldexp(1.0, -5), 0.5, *d, 1.0, std::ldexp(1.0, -20));
  SolverConfig c;
  c.n_elements = 32;
  c.steps = eq.steps;
  c.n_modes = eq.n_modes;
  c.covariance = MaternSpec{0.5, 0.25};
  LevySampler s1(NIGParams{}, d, c.n_modes, 42, 3), s2(NIGParams{}, d, c.n_modes, 42, 3);
  const auto a = solve_path(c, &s1), b = solve_path(c, &s2);
  for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(a.final_state().coefficients()[i], b.final_state().coefficients()[i]);
}

TEST(SolvePath, HomogenizationCommutesWithDirectInflowData) {
  // Direct form with inflow value c: the literal flux a w(1-) v(1) stays on the
  // left, and constants must be steady states, which puts 2 dt a c v_j(1) on
  // the right. Compared with the homogenized solve shifted back.
  const double inflow = 0.7, dt = 0.01;
  SolverConfig c;
  c.n_elements = 16;
  c.steps = 25;
  c.horizon = c.steps * dt;
  c.retain_all = true;
  c.compress_rhs = false;
  c.model.kind = CoefficientKind::none;
  c.model.initial = [](double x) { return 0.7 + std::sin(3.0 * x); };
  c.model.inflow = inflow;
  const auto traj = solve_path(c, nullptr);

  const Mesh1D mesh(16);
  const auto s = assemble(mesh, dt, 1.0, {.compress_rhs = false});
  const Eigen::MatrixXd lhs(s.lhs);
  const auto lu = lhs.fullPivLu();
  const Eigen::VectorXd source = 2.0 * dt * inflow * test_outflow_values(mesh, dt, 1.0);
  Eigen::VectorXd x = as_vector(project_l2(c.model.initial, mesh).coefficients());
  for (std::size_t i = 1; i <= c.steps; ++i) {
    x = lu.solve(s.rhs_mass * x + source);
    const Eigen::VectorXd got = as_vector(traj.states[i].coefficients());
    EXPECT_LE((got - x).cwiseAbs().maxCoeff(), 1e-10 * static_cast<double>(i)) << i;
  }
}

TEST(SolvePath, ConstantInflowIsSteady) {
  SolverConfig c;
  c.n_elements = 8;
  c.steps = 10;
  c.horizon = 0.1;
  c.model.kind = CoefficientKind::none;
  c.model.initial = [](double) { return 0.4; };
  c.model.inflow = 0.4;
  const auto traj = solve_path(c, nullptr);
  for (double v : traj.final_state().coefficients()) EXPECT_NEAR(v, 0.4, 1e-15);
}

TEST(SolvePath, MeanSquareStability) {
  const double h = std::ldexp(1.0, -4);
  const auto d = matern(1.0, 512, 512);
  const auto eq = equilibrate(h, 1.0, *d, 1.0, std::ldexp(1.0, -20));
  SolverConfig c;
  c.n_elements = 16;
  c.steps = eq.steps;
  c.n_modes = eq.n_modes;
  c.retain_all = true;
  const std::size_t samples = 200;
  std::vector<double> mean_sq(c.steps + 1, 0.0);
  for (std::size_t s = 0; s < samples; ++s) {
    LevySampler sampler(NIGParams{}, d, c.n_modes, 77, s);
    const auto traj = solve_path(c, &sampler);
    for (std::size_t i = 0; i <= c.steps; ++i) {
      const double n = broken_norm(traj.states[i]);
      mean_sq[i] += n * n / samples;
    }
  }
  EXPECT_LT(*std::max_element(mean_sq.begin(), mean_sq.end()), 10.0 * mean_sq.front());
}

TEST(SolvePath, ConfigurationErrors) {
  SolverConfig c;
  c.n_elements = 8;
  c.steps = 4;
  EXPECT_THROW(solve_path(c, nullptr), std::invalid_argument);
  const auto d = matern(1.0, 64, 8);
  LevySampler s(NIGParams{}, d, 3, 0, 0);
  c.n_modes = 4;
  EXPECT_THROW(solve_path(c, &s), std::invalid_argument);
  c.horizon = 0.0;
  EXPECT_THROW(solve_path(c, &s), std::invalid_argument);
}

TEST(ExactSolution, Examples) {
  const auto f = [](double x) { return std::cos(x); };
  const auto same = exact_deterministic_solution(f, 0.0, 1.0);
  for (double x : {0.0, 0.4, 1.0}) EXPECT_EQ(same(x), f(x));
  const auto one = exact_deterministic_solution([](double) { return 1.0; }, 0.25, 1.0);
  EXPECT_EQ(one(0.1), 1.0);
  EXPECT_EQ(one(0.74), 1.0);
  EXPECT_EQ(one(0.76), 0.0);
  const auto gone = exact_deterministic_solution([](double) { return 1.0; }, 1.0, 1.0);
  for (double x : {0.0, 0.5, 1.0}) EXPECT_EQ(gone(x), 0.0);
  EXPECT_THROW(exact_deterministic_solution(f, -1.0, 1.0), std::invalid_argument);
}

TEST(TrajectoryCsv, HeaderAndRows) {
  SolverConfig c;
  c.n_elements = 4;
  c.steps = 2;
  c.n_modes = 2;
  c.retain_all = true;
  const auto d = matern(1.0, 32, 4);
  LevySampler s(NIGParams{}, d, 2, 13, 5);
  std::ostringstream os;
  write_trajectory_csv(os, solve_path(c, &s));
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line.rfind(std::string("# levydg ") + kVersion + " config_hash=", 0), 0u);
  EXPECT_NE(line.find(" seed=13 "), std::string::npos);
  EXPECT_NE(line.find("stream=5"), std::string::npos);
  std::getline(is, line);
  EXPECT_EQ(line, "step,x_left,x_right,value_left,value_right");
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, 3 * 4);
}
