// Retrofit controller: expansion, synthesis, certificates and runtime.

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "retrofit/controller.hpp"
#include "retrofit/sim.hpp"
#include "support.hpp"

using namespace retrofit;
using namespace testing_support;

namespace {

std::vector<Vector> random_sequence(std::size_t len, Index dim, std::mt19937_64& rng) {
    std::vector<Vector> out;
    for (std::size_t t = 0; t < len; ++t) out.push_back(gaussian_vector(dim, rng));
    return out;
}

RetrofitDesign instance_design(const Instance& in, const Matrix& K, int tau, bool plant_gain = true) {
    DesignOptions opts;
    opts.plant_gain = plant_gain;
    const Index n = in.sys.states();
    return design_retrofit(in.sys, K, in.built.projection, in.ports, in.built.nu, tau, in.fault_basis,
                           Matrix::Zero(n, n), opts);
}

/// |xi_hat|_l2 of the reduced closed loop from xi_hat_0 = E s, z_hat_0 = Z s,
/// simulated directly until the energy is negligible.
double reduced_loop_l2(const RetrofitDesign& d, const Vector& xi0, const Vector& z0) {
    const auto& r = d.reduced;
    const auto& g = d.gains;
    Vector xi = xi0;
    Vector z = z0;
    double acc = 0.0;
    for (long t = 0; t < 1000000; ++t) {
        acc += xi.squaredNorm();
        if (t > g.tau && xi.squaredNorm() + z.squaredNorm() < 1e-30 * std::max(acc, 1e-300)) break;
        if (t < g.tau) {
            const Vector vhat = g.F[t] * z;
            const Vector xi_next = r.A * xi + r.B * vhat;
            z = r.A * z + r.B * vhat + g.H[t] * (r.C * (xi - z));
            xi = xi_next;
        } else {
            const Vector vhat = g.G * z;
            xi = r.A * xi + r.B * vhat;
            z = r.A * z + r.B * vhat;
        }
    }
    return std::sqrt(acc);
}

}  // namespace

// ---------------------------------------------------------------------------
// Expansion
// ---------------------------------------------------------------------------

TEST(Expand, IdentityProjectionHasNoCoupling) {
    std::mt19937_64 rng(100);
    const auto sys = random_plant(5, 2, 2, 0.9, rng);
    const auto e = expand(sys, proj::Projection::identity(5), PortSet{{1}});
    EXPECT_EQ(e.Gamma.norm(), 0.0);
    EXPECT_EQ(e.coupling.norm(), 0.0);
    EXPECT_EQ(e.PdagB, sys.B);
    EXPECT_EQ(finite_time_output_matching_check(e, 5), 0.0);
}

TEST(Expand, RejectsProjectionViolatingConditions) {
    std::mt19937_64 rng(101);
    const auto sys = random_plant(8, 2, 2, 0.9, rng);
    const auto p = proj::biconjugate(gaussian(8, 3, rng), gaussian(8, 3, rng));
    try {
        expand(sys, p, PortSet{{0}});
        FAIL();
    } catch (const ConditionViolation& e) {
        EXPECT_GT(std::max(e.image_residual(), e.kernel_residual()), proj::kConditionTolerance);
    }
}

TEST(Expand, CascadeReproducesRedundantPair) {
    std::mt19937_64 rng(102);
    for (int trial = 0; trial < 20; ++trial) {
        const auto in = random_instance(rng, 6, 14);
        const auto e = expand(in.sys, in.built.projection, in.ports);
        const Index n = in.sys.states();
        const Vector x0 = gaussian_vector(n, rng);
        const Vector xhat0 = gaussian_vector(in.built.rank(), rng);
        const auto v = random_sequence(200, in.sys.inputs(), rng);
        const auto vhat = random_sequence(200, in.ports.size(), rng);
        const auto dev = cascade_deviation(e, x0, xhat0, v, vhat);
        EXPECT_LE(dev.state, 1e-8 * std::max(1.0, x0.norm()));
        EXPECT_LE(dev.compensator, 1e-8 * std::max(1.0, x0.norm()));
    }
}

TEST(Expand, OutputMatchingHoldsForTauSteps) {
    std::mt19937_64 rng(103);
    for (int trial = 0; trial < 20; ++trial) {
        const auto in = random_instance(rng, 6, 14);
        const auto e = expand(in.sys, in.built.projection, in.ports);
        const int tau = std::min<int>(in.built.tau, 3);
        EXPECT_LE(finite_time_output_matching_check(e, tau, 7 + trial), 1e-9);
    }
}

// ---------------------------------------------------------------------------
// Gain synthesis
// ---------------------------------------------------------------------------

TEST(Gains, ReducedWeightsAreCongruence) {
    Matrix P(3, 2);
    P << 1, 0, 0, 2, 0, 0;
    const auto w = reduced_weights(P, Matrix::Identity(3, 3), Matrix::Identity(1, 1));
    Matrix expected(2, 2);
    expected << 1, 0, 0, 4;
    EXPECT_EQ(w.state, expected);
    EXPECT_THROW(reduced_weights(P, Matrix::Identity(2, 2), Matrix::Identity(1, 1)), InvalidArgument);
}

TEST(Gains, FiniteHorizonWithDareTerminalIsStationary) {
    std::mt19937_64 rng(104);
    const auto sys = random_plant(4, 2, 2, 0.9, rng);
    const LqrWeights w{Matrix::Identity(4, 4), Matrix::Identity(2, 2)};
    const Matrix F = solve_dare(sys.A, sys.B, w.state, w.input).F;
    const auto g = design_finite_gains(sys.A, sys.B, sys.C, 5, w);
    ASSERT_EQ(g.F.size(), 5u);
    for (const auto& f : g.F) EXPECT_LE((f - F).norm(), 1e-8 * F.norm());
    EXPECT_TRUE(design_finite_gains(sys.A, sys.B, sys.C, 0, w).F.empty());
    EXPECT_THROW(design_finite_gains(sys.A, sys.B, sys.C, -1, w), InvalidArgument);
}

TEST(Gains, PredictorGainScalarClosedForm) {
    const Matrix a = Matrix::Constant(1, 1, 0.5);
    const Matrix b = Matrix::Ones(1, 1);
    const Matrix c = Matrix::Constant(1, 1, 2.0);
    const auto g = design_finite_gains(a, b, c, 2, {Matrix::Ones(1, 1), Matrix::Ones(1, 1)});
    // S0 = 1: H0 = a c / (c^2 + 1); S1 = a^2 S0 + 1 - H0 c S0 a.
    const double h0 = 0.5 * 2.0 / 5.0;
    const double s1 = 0.25 + 1.0 - h0 * 2.0 * 0.5;
    EXPECT_NEAR(g.H[0](0, 0), h0, 1e-15);
    EXPECT_NEAR(g.H[1](0, 0), 0.5 * s1 * 2.0 / (4.0 * s1 + 1.0), 1e-15);
}

TEST(Gains, InertAndValidation) {
    std::mt19937_64 rng(105);
    const auto in = random_instance(rng);
    const auto r = proj::reduced_triple(in.built.projection, in.sys, in.ports);
    auto g = RetrofitGains::inert(r, 3);
    EXPECT_NO_THROW(g.validate(r));
    g.H.pop_back();
    EXPECT_THROW(g.validate(r), InvalidArgument);
}

// ---------------------------------------------------------------------------
// Certificates
// ---------------------------------------------------------------------------

TEST(Certify, ComposeEpsilonClosedForm) {
    EXPECT_DOUBLE_EQ(compose_epsilon(1, 2, 3, 4, 5, 4), std::sqrt(9.0 + 23.0 * 23.0));
    EXPECT_DOUBLE_EQ(compose_epsilon(0, 0, 0, 0, 0, 1), 0.0);
}

TEST(Certify, ExactGuessAndInertGainsGiveFreeResponse) {
    // With z_hat_0 = xi_hat_0 and zero gains, xi_hat is the free response and
    // the observation error vanishes: epsilon = gamma2 (+) gamma3 delta2.
    std::mt19937_64 rng(106);
    const auto in = random_instance(rng);
    const auto r = proj::reduced_triple(in.built.projection, in.sys, in.ports);
    const auto g = RetrofitGains::inert(r, 2);
    const Matrix E = in.built.projection.Pdag * in.fault_basis;
    const auto b = certify(r, g, E, E);
    EXPECT_EQ(b.gamma1, 0.0);
    EXPECT_EQ(b.delta1, 0.0);
    const double exact = std::sqrt(max_symmetric_eigenvalue(E.transpose() * solve_dlyap(r.A) * E));
    EXPECT_GE(b.epsilon, exact * (1.0 - 1e-12));
}

TEST(Certify, RejectsUnstableReducedModel) {
    ReducedModel r{Matrix::Constant(1, 1, 1.2), Matrix::Ones(1, 1), Matrix::Ones(1, 1)};
    const auto g = RetrofitGains::inert(r, 1);
    EXPECT_THROW(certify(r, g, Matrix::Ones(1, 1), Matrix::Zero(1, 1)), UnstableError);
}

TEST(Certify, BoundsReducedLoopMonteCarlo) {
    std::mt19937_64 rng(107);
    for (int trial = 0; trial < 8; ++trial) {
        const auto in = random_instance(rng, 6, 12);
        const Matrix K = random_stabilizing_gain(in.sys, rng);
        const auto d = instance_design(in, K, in.built.tau, false);
        const Matrix E = d.projection.Pdag * d.fault_basis;
        const Matrix Z = d.projection.Pdag * d.guess_operator * d.fault_basis;
        for (int s_i = 0; s_i < 50; ++s_i) {
            const Vector s = unit_ball_sample(d.fault_basis.cols(), rng);
            EXPECT_LE(reduced_loop_l2(d, E * s, Z * s), d.bound.epsilon * (1.0 + 1e-9));
        }
    }
}

TEST(GammaK, IdentityProjectionWithZeroGainIsOne) {
    std::mt19937_64 rng(108);
    const auto sys = random_plant(5, 2, 2, 0.8, rng);
    EXPECT_NEAR(gamma_K(sys, Matrix::Zero(2, 2), proj::Projection::identity(5)), 1.0, 1e-12);
}

TEST(GammaK, MatchesGridOracle) {
    std::mt19937_64 rng(109);
    const auto in = random_instance(rng, 6, 8);
    const Matrix K = random_stabilizing_gain(in.sys, rng);
    const auto& p = in.built.projection;
    const Matrix AK = in.sys.A + in.sys.B * K * in.sys.C;
    const Index n = in.sys.states();
    const DiscreteLTI W(AK, (AK - p.P * p.Pdag * in.sys.A) * p.P, Matrix::Identity(n, n), p.P, 1.0);
    const double oracle = hinf_grid_oracle(W, 100000);
    EXPECT_NEAR(gamma_K(in.sys, K, p), oracle, 1e-5 * oracle);
    EXPECT_THROW(gamma_K(in.sys, Matrix::Zero(1, 1), p), InvalidArgument);
}

TEST(Certify, PlantBoundHoldsInClosedLoop) {
    std::mt19937_64 rng(110);
    for (int trial = 0; trial < 6; ++trial) {
        const auto in = random_instance(rng, 6, 10);
        const Matrix K = random_stabilizing_gain(in.sys, rng);
        const auto d = instance_design(in, K, in.built.tau);
        for (int s_i = 0; s_i < 5; ++s_i) {
            const Vector x0 = in.fault_basis * unit_ball_sample(in.fault_basis.cols(), rng);
            const auto r = sim::run(in.sys, sim::PreexistingController::static_gain(K), std::span(&d, 1), x0);
            ASSERT_TRUE(r.bound.has_value());
            EXPECT_FALSE(r.diverged);
            EXPECT_TRUE(r.bound_ok) << r.x_l2 << " > " << r.bound_value;
        }
    }
}

TEST(GeneralizedBound, SplitsDeflection) {
    std::mt19937_64 rng(111);
    const auto in = random_instance(rng);
    const Matrix K = random_stabilizing_gain(in.sys, rng);
    const auto& p = in.built.projection;
    const Vector x0 = gaussian_vector(in.sys.states(), rng);
    const auto g = generalized_bound(in.sys, K, p, x0, 2.0, 3.0);
    EXPECT_LE((g.controllable + g.residual - x0).norm(), 1e-10 * x0.norm());
    const Matrix AK = in.sys.A + in.sys.B * K * in.sys.C;
    const double exact = std::sqrt(g.residual.dot(solve_dlyap(AK) * g.residual));
    EXPECT_NEAR(g.residual_l2, exact, 1e-6 * std::max(exact, 1e-12));
    EXPECT_NEAR(g.value, g.residual_l2 + 6.0, 1e-12);

    const auto inside = generalized_bound(in.sys, K, p, p.P * gaussian_vector(p.rank(), rng), 2.0, 3.0);
    EXPECT_LE(inside.residual.norm(), 1e-10);
    EXPECT_NEAR(inside.value, 6.0, 1e-6);
}

// ---------------------------------------------------------------------------
// Runtime
// ---------------------------------------------------------------------------

TEST(Controller, SwitchesAfterTauAndFreezesCompensator) {
    std::mt19937_64 rng(112);
    const auto in = random_instance(rng);
    const Matrix K = random_stabilizing_gain(in.sys, rng);
    const auto d = instance_design(in, K, 2, false);
    auto c = make_controller(d, gaussian_vector(in.sys.states(), rng));
    EXPECT_TRUE(c.switching());
    for (int t = 0; t < 2; ++t) {
        EXPECT_LE((c.control() - d.gains.F[t] * c.zhat()).norm(), 1e-14);
        c.step(gaussian_vector(in.ports.size(), rng), gaussian_vector(in.sys.inputs(), rng));
    }
    EXPECT_FALSE(c.switching());
    const Vector frozen = c.xhat();
    for (int t = 0; t < 5; ++t) {
        EXPECT_LE((c.control() - d.gains.G * c.zhat()).norm(), 1e-14);
        c.step(gaussian_vector(in.ports.size(), rng), gaussian_vector(in.sys.inputs(), rng));
    }
    EXPECT_EQ(c.xhat(), frozen);
    EXPECT_EQ(c.time(), 7);
    EXPECT_THROW(c.step(Vector::Zero(in.ports.size() + 1), Vector::Zero(in.sys.inputs())), InvalidArgument);
}

TEST(Controller, InertGainsIssueNothing) {
    std::mt19937_64 rng(113);
    const auto in = random_instance(rng);
    const auto r = proj::reduced_triple(in.built.projection, in.sys, in.ports);
    auto c = make_controller(r, in.built.projection.Pdag * in.sys.B, RetrofitGains::inert(r, 3), in.ports,
                             gaussian_vector(r.A.rows(), rng));
    for (int t = 0; t < 6; ++t) {
        EXPECT_EQ(c.step(gaussian_vector(in.ports.size(), rng), gaussian_vector(in.sys.inputs(), rng)).norm(), 0.0);
    }
}

TEST(Bank, RejectsOverlapAndMatchesSingleController) {
    std::mt19937_64 rng(114);
    const auto sys = random_plant(8, 3, 3, 0.9, rng);
    const Matrix K = random_stabilizing_gain(sys, rng);
    const Matrix X = gaussian(8, 1, rng).normalized();
    const auto b0 = proj::build_projection(sys, PortSet{{0}}, 2, 2, X, 8);
    const auto b1 = proj::build_projection(sys, PortSet{{1, 2}}, 2, 2, X, 8);
    DesignOptions opts;
    opts.plant_gain = false;
    const Matrix Z = Matrix::Zero(8, 8);
    const auto d0 = design_retrofit(sys, K, b0.projection, PortSet{{0}}, b0.nu, 2, X, Z, opts);
    const auto d1 = design_retrofit(sys, K, b1.projection, PortSet{{1, 2}}, b1.nu, 2, X, Z, opts);
    const auto d0b = design_retrofit(sys, K, b0.projection, PortSet{{0}}, b0.nu, 2, X, Z, opts);
    EXPECT_THROW(compose_retrofits({make_controller(d0, X.col(0)), make_controller(d0b, X.col(0))}, 3, 3), InvalidArgument);

    auto single = make_controller(d0, X.col(0));
    auto bank = compose_retrofits({make_controller(d0, X.col(0))}, 3, 3);
    for (int t = 0; t < 6; ++t) {
        const Vector y = gaussian_vector(3, rng);
        const Vector v = gaussian_vector(3, rng);
        const Vector own = single.step(RetrofitBank::gather(PortSet{{0}}, y), v);
        const Vector total = bank.step(y, v);
        EXPECT_EQ(total(0), own(0));
        EXPECT_EQ(total(1), 0.0);
        EXPECT_EQ(total(2), 0.0);
    }

    // Each compensator sees the other controller's injection as part of its input.
    auto pair = compose_retrofits({make_controller(d0, X.col(0)), make_controller(d1, X.col(0))}, 3, 3);
    auto c0 = make_controller(d0, X.col(0));
    auto c1 = make_controller(d1, X.col(0));
    for (int t = 0; t < 4; ++t) {
        const Vector y = gaussian_vector(3, rng);
        const Vector v = gaussian_vector(3, rng);
        const Vector u0 = c0.control();
        const Vector u1 = c1.control();
        Vector inj0 = Vector::Zero(3), inj1 = Vector::Zero(3);
        RetrofitBank::scatter(PortSet{{0}}, u0, inj0);
        RetrofitBank::scatter(PortSet{{1, 2}}, u1, inj1);
        c0.advance(RetrofitBank::gather(PortSet{{0}}, y), v + inj1, u0);
        c1.advance(RetrofitBank::gather(PortSet{{1, 2}}, y), v + inj0, u1);
        const Vector total = pair.step(y, v);
        EXPECT_LE((total - inj0 - inj1).norm(), 1e-14);
        EXPECT_LE((pair[0].xhat() - c0.xhat()).norm(), 1e-12);
        EXPECT_LE((pair[1].xhat() - c1.xhat()).norm(), 1e-12);
    }
}

// ---------------------------------------------------------------------------
// Closed-loop assembly
// ---------------------------------------------------------------------------

TEST(ClosedLoop, PersistentSpectrumSeparates) {
    std::mt19937_64 rng(115);
    for (int trial = 0; trial < 10; ++trial) {
        const auto in = random_instance(rng, 6, 12);
        const Matrix K = random_stabilizing_gain(in.sys, rng);
        const auto d = instance_design(in, K, 1, false);
        const Matrix M = closed_loop_matrix(in.sys, K, std::span(&d, 1), SwitchPhase::persistent);
        const double rhoK = spectral_radius(in.sys.A + in.sys.B * K * in.sys.C);
        const double expected = std::max({rhoK, spectral_radius(d.reduced.A),
                                          spectral_radius(reduced_loop_matrix(d, SwitchPhase::persistent))});
        EXPECT_NEAR(spectral_radius(M), expected, 1e-6);
        EXPECT_LT(spectral_radius(M), 1.0);
    }
}

TEST(ClosedLoop, MatrixMatchesRuntimeInPersistentPhase) {
    std::mt19937_64 rng(116);
    const auto in = random_instance(rng, 6, 10);
    const Matrix K = random_stabilizing_gain(in.sys, rng);
    auto d = instance_design(in, K, 1, false);
    d.gains.tau = 0;
    d.gains.F.clear();
    d.gains.H.clear();
    const Index n = in.sys.states();
    const Index k = d.rank();
    d.guess_operator = gaussian(n, n, rng);
    const Vector x0 = gaussian_vector(n, rng);

    sim::RunOptions opts;
    opts.steps = 30;
    const auto r = sim::run(in.sys, sim::PreexistingController::static_gain(K), std::span(&d, 1), x0, opts);
    const Matrix M = closed_loop_matrix(in.sys, K, std::span(&d, 1), SwitchPhase::persistent);
    Vector s = Vector::Zero(n + 2 * k);
    s.head(n) = x0;
    s.tail(k) = d.projection.Pdag * d.guess_operator * x0;
    for (int t = 0; t <= 30; ++t) {
        EXPECT_LE((r.trajectory.states[t] - s.head(n)).norm(), 1e-9 * std::max(1.0, s.norm())) << t;
        s = M * s;
    }
}

TEST(ClosedLoop, ObservingPhaseMatchesReducedLoopWhenPlantIsIdentityProjected) {
    std::mt19937_64 rng(117);
    const auto sys = random_plant(4, 2, 2, 0.8, rng);
    const Matrix K = Matrix::Zero(2, 2);
    const auto d = design_retrofit(sys, K, proj::Projection::identity(4), PortSet{{0, 1}}, 4, 2,
                                   Matrix::Identity(4, 4), Matrix::Zero(4, 4), {1.0, 1.0, false});
    const Matrix R = reduced_loop_matrix(d, SwitchPhase::observing);
    EXPECT_EQ(R.rows(), 8);
    const Matrix M = closed_loop_matrix(sys, K, std::span(&d, 1), SwitchPhase::observing);
    EXPECT_EQ(M.rows(), 12);
    EXPECT_TRUE(std::isfinite(spectral_radius(M)));
}
