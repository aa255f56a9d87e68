#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <random>
#include <sstream>

#include "levydg/petrov.hpp"
#include "oracles.hpp"

using namespace levydg;

namespace {

// v(x) = int_0^x w(y) / eps * e^{-(x - y) / eps} dy by quadrature, split at mesh
// nodes so the integrand is smooth on every piece.
double ode_oracle(const DGFunction& w, double eps, double x) {
  const auto& m = w.mesh();
  double sum = 0.0;
  for (std::size_t k = 0; k < m.n_elements() && m.x_left(k) < x; ++k) {
    const double hi = std::min(m.x_right(k), x);
    sum += oracle::integrate([&](double y) { return w.eval_in(k, y) / eps * std::exp(-(x - y) / eps); },
                             m.x_left(k), hi, 4);
  }
  return sum;
}

DGFunction basis(const Mesh1D& m, std::size_t dof) {
  DGFunction w(m);
  w.coefficients()[dof] = 1.0;
  return w;
}

}  // namespace

TEST(ExpMoments, MatchQuadratureAcrossRegimes) {
  for (double z : {0.0, 1e-6, 0.3, 0.999, 1.0, 2.5, 40.0, 700.0}) {
    const auto e = exp_moments(z);
    for (int m = 0; m < 4; ++m) {
      const double ref = oracle::integrate([&](double t) { return std::pow(t, m) * std::exp(-z * t); }, 0.0, 1.0, 64);
      EXPECT_NEAR(e[m], ref, 1e-13 * std::max(1.0, ref)) << "z=" << z << " m=" << m;
    }
  }
}

TEST(TestFunction, ZeroSource) {
  const auto v = test_function(DGFunction(Mesh1D(4)), 0.1, 1.0);
  for (double x : {0.0, 0.2, 0.5, 1.0}) EXPECT_EQ(v.value(x), 0.0);
}

TEST(TestFunction, UnitSource) {
  const double dt = 0.07, a = 1.3, eps = dt * a;
  const Mesh1D m(5);
  const auto v = test_function(nodal_interpolate([](double) { return 1.0; }, m), dt, a);
  for (int i = 0; i <= 100; ++i) {
    const double x = i / 100.0;
    EXPECT_NEAR(v.value(x), 1.0 - std::exp(-x / eps), 1e-13) << x;
  }
}

TEST(TestFunction, LinearSource) {
  const double dt = 0.2, a = 1.0, eps = dt * a;
  const Mesh1D m(3);
  const auto v = test_function(nodal_interpolate([](double x) { return x; }, m), dt, a);
  for (int i = 0; i <= 100; ++i) {
    const double x = i / 100.0;
    EXPECT_NEAR(v.value(x), x - eps * (1.0 - std::exp(-x / eps)), 1e-13) << x;
  }
}

TEST(TestFunction, MatchesQuadratureOracle) {
  std::mt19937_64 gen(21);
  for (double dt : {0.01, 0.1, 0.3}) {
    const Mesh1D m(6);
    const DGFunction w(m, oracle::random_coefficients(m.n_dofs(), gen));
    const auto v = test_function(w, dt, 1.0);
    for (double x : {0.05, 0.3, 1.0 / 3.0, 0.5, 0.77, 1.0}) {
      EXPECT_NEAR(v.value(x), ode_oracle(w, dt, x), 1e-12) << dt << ' ' << x;
    }
  }
}

TEST(TestFunction, OdeIdentityAndBoundaryValue) {
  std::mt19937_64 gen(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double dt : {0.01, 0.1, 0.25}) {
    for (double a : {0.5, 1.0, 2.0}) {
      const Mesh1D m(8);
      for (std::size_t j = 0; j < m.n_dofs(); ++j) {
        const auto w = basis(m, j);
        const auto v = test_function(w, dt, a);
        EXPECT_EQ(v.value(0.0), 0.0);
        double worst = 0.0;
        for (int i = 0; i < 1000; ++i) {
          const double x = u(gen);
          worst = std::max(worst, std::abs(v.value(x) + dt * a * v.derivative(x) - eval(w, x)));
        }
        EXPECT_LE(worst, 1e-10);
      }
    }
  }
}

TEST(TestFunction, Continuous) {
  std::mt19937_64 gen(4);
  const Mesh1D m(7);
  const DGFunction w(m, oracle::random_coefficients(m.n_dofs(), gen));
  const auto v = test_function(w, 0.05, 1.0);
  for (std::size_t k = 1; k < m.n_elements(); ++k) {
    const double x = m.x_left(k);
    EXPECT_NEAR(v.value(x, Side::left), v.value(x, Side::right), 1e-14);
  }
}

TEST(TestFunction, RejectsBadParameters) {
  const DGFunction w(Mesh1D(2));
  EXPECT_THROW(test_function(w, 0.0, 1.0), std::invalid_argument);
  EXPECT_THROW(test_function(w, 0.1, -1.0), std::invalid_argument);
}

TEST(BilinearBh, ZeroTrial) {
  std::mt19937_64 gen(6);
  const Mesh1D m(4);
  const auto v = test_function(DGFunction(m, oracle::random_coefficients(m.n_dofs(), gen)), 0.1, 1.0);
  EXPECT_EQ(bilinear_bh(DGFunction(m), v), 0.0);
}

TEST(BilinearBh, ContinuousTestFunctionAgainstQuadrature) {
  // With v continuous only the volume term and the inflow term remain:
  // a (w, v') + a w(1-) v(1).
  std::mt19937_64 gen(8);
  const double a = 1.7, dt = 0.08;
  const Mesh1D m(5);
  const DGFunction w(m, oracle::random_coefficients(m.n_dofs(), gen));
  const DGFunction s(m, oracle::random_coefficients(m.n_dofs(), gen));
  const auto v = test_function(s, dt, a);
  double volume = 0.0;
  for (std::size_t k = 0; k < m.n_elements(); ++k) {
    volume += oracle::integrate(
        [&](double x) {
          const double vx = ode_oracle(s, dt * a, x);
          return w.eval_in(k, x) * a * (s.eval_in(k, x) - vx) / (dt * a);
        },
        m.x_left(k), m.x_right(k));
  }
  const double expected = volume + a * w.value_right(4) * ode_oracle(s, dt * a, 1.0);
  EXPECT_NEAR(bilinear_bh(w, v), expected, 1e-11);
  const auto wf = [&](double x, Side side) { return eval(w, x, side); };
  const auto vf = [&](double x, Side side) { return v.value(x, side); };
  const auto dvf = [&](double x, Side side) { return v.derivative(x, side); };
  EXPECT_NEAR(bilinear_bh_quadrature(m, a, wf, vf, dvf), expected, 1e-11);
}

TEST(BilinearBh, EdgeIdentityForBrokenFunctions) {
  std::mt19937_64 gen(10);
  for (int trial = 0; trial < 20; ++trial) {
    const Mesh1D m(1 + trial % 6);
    const double a = 0.5 + trial * 0.1;
    const DGFunction w(m, oracle::random_coefficients(m.n_dofs(), gen));
    const auto f = [&](double x, Side side) { return eval(w, x, side); };
    const auto df = [&](double x, Side side) { return w.derivative(x, side); };
    EXPECT_NEAR(bilinear_bh_quadrature(m, a, f, f, df), edge_sum_identity(m, a, f), 1e-12);
  }
}

TEST(BilinearBh, NonNegativeOnTestSpace) {
  std::mt19937_64 gen(12);
  for (int trial = 0; trial < 100; ++trial) {
    const Mesh1D m(std::size_t{1} << (1 + trial % 5));
    const double dt = 0.05 + 0.05 * (trial % 5);
    const auto v = test_function(DGFunction(m, oracle::random_coefficients(m.n_dofs(), gen)), dt, 1.0);
    const auto f = [&](double x, Side side) { return v.value(x, side); };
    const auto df = [&](double x, Side side) { return v.derivative(x, side); };
    const double b = bilinear_bh_quadrature(m, 1.0, f, f, df);
    EXPECT_GE(b, -1e-12);
    EXPECT_NEAR(b, edge_sum_identity(m, 1.0, f), 1e-10);
  }
}

TEST(BilinearBh, ContinuityBound) {
  // B_h(w, v) <= ||w|| ||A* v|| on V_h, where A* v = -a v'.
  std::mt19937_64 gen(14);
  for (int trial = 0; trial < 100; ++trial) {
    const Mesh1D m(2 + trial % 7);
    const double dt = 0.02 + 0.03 * (trial % 10);
    const DGFunction w(m, oracle::random_coefficients(m.n_dofs(), gen));
    const auto v = test_function(DGFunction(m, oracle::random_coefficients(m.n_dofs(), gen)), dt, 1.0);
    double dv2 = 0.0;
    for (std::size_t k = 0; k < m.n_elements(); ++k) {
      dv2 += oracle::integrate([&](double x) { const double d = v.derivative(x); return d * d; },
                               m.x_left(k), m.x_right(k), 4);
    }
    // The volume part of B_h is bounded by Cauchy-Schwarz; the inflow term is
    // what remains and is checked separately by the edge identity.
    const double volume = bilinear_bh(w, v) - w.value_right(m.n_elements() - 1) * v.node_values().back();
    EXPECT_LE(std::abs(volume), broken_norm(w) * std::sqrt(dv2) * (1.0 + 1e-12));
  }
}

TEST(Assemble, SingleElementAgainstQuadrature) {
  const Mesh1D m(1);
  const double dt = 0.1, a = 1.0;
  const auto s = assemble(m, dt, a, {.compress_rhs = false});
  const Eigen::MatrixXd lhs(s.lhs);
  for (std::size_t j = 0; j < 2; ++j) {
    for (std::size_t l = 0; l < 2; ++l) {
      const auto wl = basis(m, l), wj = basis(m, j);
      const double mass = oracle::integrate([&](double x) { return wl.eval_in(0, x) * ode_oracle(wj, dt * a, x); }, 0, 1);
      const double deriv = oracle::integrate(
          [&](double x) { return wl.eval_in(0, x) * (wj.eval_in(0, x) - ode_oracle(wj, dt * a, x)) / (dt * a); }, 0, 1);
      const double inflow = a * wl.value_right(0) * ode_oracle(wj, dt * a, 1.0);
      EXPECT_NEAR(s.rhs_mass(j, l), mass, 1e-10);
      EXPECT_NEAR(lhs(j, l), mass + dt * (a * deriv + inflow), 1e-10);
    }
  }
}

TEST(Assemble, MultiElementAgainstClosedFormInnerProducts) {
  const Mesh1D m(4);
  const double dt = 0.05, a = 0.8;
  const auto s = assemble(m, dt, a, {.compress_rhs = false});
  const Eigen::MatrixXd lhs(s.lhs);
  for (std::size_t j = 0; j < m.n_dofs(); ++j) {
    const auto v = test_function(basis(m, j), dt, a);
    for (std::size_t l = 0; l < m.n_dofs(); ++l) {
      const auto w = basis(m, l);
      EXPECT_NEAR(s.rhs_mass(j, l), broken_inner(w, v), 1e-14);
      EXPECT_NEAR(lhs(j, l), broken_inner(w, v) + dt * bilinear_bh(w, v), 1e-13);
    }
  }
}

TEST(Assemble, LhsIsMassPlusInflowCorrection) {
  for (int e = 2; e <= 6; ++e) {
    const Mesh1D m(std::size_t{1} << e);
    for (double dt : {0.01, 0.1, 0.3}) {
      const auto s = assemble(m, dt, 1.0);
      Eigen::MatrixXd expected = Eigen::MatrixXd(dg_mass_matrix(m));
      expected.col(static_cast<Eigen::Index>(m.n_dofs() - 1)) += dt * test_outflow_values(m, dt, 1.0);
      EXPECT_LE((Eigen::MatrixXd(s.lhs) - expected).cwiseAbs().maxCoeff(), 1e-10) << e << ' ' << dt;
    }
  }
}

TEST(Assemble, InfSupConstant) {
  // Smallest singular value of M^{-1/2} lhs M^{-1/2}: the pairing measured
  // with ||w|| on the trial side and ||(I - dt A*) v|| on the test side.
  // lhs = M + rank one, so up to the e^{-z n} tail of that rank-one term the
  // value depends on h and dt only through z = h / (dt a). It is not uniform in h at fixed dt: it decays like sqrt(z)
  // once z < 1, and c (1 - dt) min(1, sqrt(z)) bounds it from below.
  std::map<double, double> by_z;
  for (int e = 3; e <= 6; ++e) {
    const Mesh1D m(std::size_t{1} << e);
    const Eigen::MatrixXd mass(dg_mass_matrix(m));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(mass);
    const Eigen::MatrixXd inv_sqrt = es.operatorInverseSqrt();
    for (double dt : {0.05, 0.1, 0.2}) {
      const auto s = assemble(m, dt, 1.0, {.compress_rhs = false});
      const Eigen::MatrixXd normalized = inv_sqrt * Eigen::MatrixXd(s.lhs) * inv_sqrt;
      const auto sv = Eigen::JacobiSVD<Eigen::MatrixXd>(normalized).singularValues();
      const double sigma = sv(sv.size() - 1);
      const double z = m.h() / dt;
      EXPECT_GE(sigma, 0.9 * (1.0 - dt) * std::min(1.0, std::sqrt(z))) << e << ' ' << dt;
      const auto [it, fresh] = by_z.emplace(z, sigma);
      if (!fresh) EXPECT_NEAR(it->second, sigma, 1e-4) << "z=" << z;
    }
  }
}

TEST(Assemble, WarnsAboveOneThird) {
  EXPECT_TRUE(assemble(Mesh1D(2), 0.3, 1.0).warnings.empty());
  EXPECT_FALSE(assemble(Mesh1D(2), 0.5, 1.0).warnings.empty());
}

TEST(Assemble, RejectsBadParameters) {
  EXPECT_THROW(assemble(Mesh1D(2), 0.0, 1.0), std::invalid_argument);
  EXPECT_THROW(assemble(Mesh1D(2), 0.1, 0.0), std::invalid_argument);
}

TEST(Assemble, BlockSolverAgreesWithSparseLu) {
  std::mt19937_64 gen(16);
  for (int e : {1, 3, 5, 8}) {
    for (double dt : {std::ldexp(1.0, -20), 1e-3, 0.1, 0.3, 2.0}) {
      const Mesh1D m(std::size_t{1} << e);
      const auto s = assemble(m, dt, 1.0);
      ASSERT_TRUE(s.lhs_block) << e << ' ' << dt;
      const auto b = oracle::random_coefficients(m.n_dofs(), gen);
      std::vector<double> x1(b.size()), x2(b.size());
      s.apply_step(b, x1);
      const Eigen::Map<const Eigen::VectorXd> bv(b.data(), static_cast<Eigen::Index>(b.size()));
      const Eigen::VectorXd y = s.rhs_compressed.matrix * bv;
      const Eigen::VectorXd ref = s.lhs_lu->solve(y);
      for (std::size_t i = 0; i < b.size(); ++i) EXPECT_NEAR(x1[i], ref(static_cast<Eigen::Index>(i)), 1e-12);
      std::vector<double> y_copy(y.data(), y.data() + y.size());
      s.solve_lhs(y_copy, x2);
      for (std::size_t i = 0; i < b.size(); ++i) EXPECT_NEAR(x2[i], ref(static_cast<Eigen::Index>(i)), 1e-12);
    }
  }
}

TEST(SpectralNorm, MatchesSvd) {
  for (int e : {2, 4, 6}) {
    const auto s = assemble(Mesh1D(std::size_t{1} << e), 0.01, 1.0, {.compress_rhs = false});
    const double exact = Eigen::JacobiSVD<Eigen::MatrixXd>(s.rhs_mass).singularValues()(0);
    const double estimate = spectral_norm(s.rhs_mass);
    EXPECT_NEAR(estimate, exact, 1e-6 * exact);
    EXPECT_LE(estimate, exact * (1.0 + 1e-14));
  }
}

TEST(Compress, LargeThresholdEmptiesMatrix) {
  const auto s = assemble(Mesh1D(8), 0.05, 1.0, {.compress_rhs = false});
  const auto c = compress(s.rhs_mass, 1.5);
  EXPECT_EQ(c.retained, 0u);
  EXPECT_EQ(c.matrix.nonZeros(), 0);
}

TEST(Compress, VanishingThresholdKeepsEverything) {
  const auto s = assemble(Mesh1D(8), 0.05, 1.0, {.compress_rhs = false});
  const auto c = compress(s.rhs_mass, 1e-150);
  EXPECT_EQ(c.dropped, 0u);
  EXPECT_EQ(static_cast<Eigen::Index>(c.retained), (s.rhs_mass.array() != 0.0).count());
}

TEST(Compress, DroppedEntriesBelowThresholdAndBandwidth) {
  const Mesh1D m(32);
  const double dt = std::ldexp(1.0, -8);
  const auto s = assemble(m, dt, 1.0, {.compress_rhs = false});
  const auto c = compress(s.rhs_mass, dt);
  const Eigen::MatrixXd kept(c.matrix);
  std::size_t dropped = 0, band = 0;
  for (Eigen::Index j = 0; j < kept.rows(); ++j) {
    for (Eigen::Index l = 0; l < kept.cols(); ++l) {
      if (kept(j, l) != 0.0) {
        EXPECT_EQ(kept(j, l), s.rhs_mass(j, l));
        band = std::max(band, static_cast<std::size_t>(l / 2 - j / 2));
      } else if (s.rhs_mass(j, l) != 0.0) {
        ++dropped;
        EXPECT_LT(std::abs(s.rhs_mass(j, l)), dt * dt * c.spectral_norm);
      }
    }
  }
  EXPECT_EQ(dropped, c.dropped);
  EXPECT_GT(c.dropped, 0u);
  // Entries decay like e^{-(h / dt a) m} over m elements, so the kept band is
  // about 2 dt a |log dt| / h elements.
  const double predicted = 2.0 * dt * std::abs(std::log(dt)) / m.h();
  EXPECT_LE(static_cast<double>(band), predicted + 2.0);
}

TEST(Compress, OperatorErrorBound) {
  std::mt19937_64 gen(18);
  const Mesh1D m(16);
  const double dt = 0.02;
  const auto s = assemble(m, dt, 1.0, {.compress_rhs = false});
  const auto c = compress(s.rhs_mass, dt);
  const Eigen::MatrixXd diff = s.rhs_mass - Eigen::MatrixXd(c.matrix);
  const double n = static_cast<double>(m.n_dofs());
  for (int trial = 0; trial < 20; ++trial) {
    const auto v = oracle::random_coefficients(m.n_dofs(), gen);
    const Eigen::Map<const Eigen::VectorXd> cv(v.data(), static_cast<Eigen::Index>(v.size()));
    EXPECT_LE((diff * cv).norm(), dt * dt * c.spectral_norm * cv.norm() * std::sqrt(n));
  }
}

TEST(Compress, OneStepDifferenceIsSecondOrder) {
  std::mt19937_64 gen(20);
  for (int e : {3, 4, 5, 6}) {
    const Mesh1D m(std::size_t{1} << e);
    const double dt = m.h() * m.h() * 4.0;
    const auto full = assemble(m, dt, 1.0, {.compress_rhs = false});
    const auto thin = assemble(m, dt, 1.0, {.compress_rhs = true});
    const auto b = oracle::random_coefficients(m.n_dofs(), gen);
    std::vector<double> x1(b.size()), x2(b.size());
    full.apply_step(b, x1);
    thin.apply_step(b, x2);
    DGFunction d(m);
    for (std::size_t i = 0; i < b.size(); ++i) d.coefficients()[i] = x1[i] - x2[i];
    EXPECT_LE(broken_norm(d), 10.0 * dt * dt) << e;
  }
}

TEST(Compress, RejectsNonPositiveDt) {
  EXPECT_THROW(compress(Eigen::MatrixXd::Identity(2, 2), 0.0), std::invalid_argument);
}

TEST(Export, CoordinateFormat) {
  std::ostringstream os;
  write_coordinate(os, dg_mass_matrix(Mesh1D(1)));
  EXPECT_EQ(os.str(), "# rows 2 cols 2\n0 0 0.33333333333333331\n1 0 0.16666666666666666\n"
                      "0 1 0.16666666666666666\n1 1 0.33333333333333331\n");
}
