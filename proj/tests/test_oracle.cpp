#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "support.hpp"
#include "voltctrl/error.hpp"
#include "voltctrl/oracle.hpp"

using namespace voltctrl;

using testsupport::GridOptimum;
using testsupport::grid_search;
using testsupport::scalar_config;

TEST_CASE("robustness margins") {
  CHECK(rho(1.0, 0.5, std::sqrt(2.0)) == doctest::Approx(0.5 / (1.0 + std::sqrt(2.0))).epsilon(1e-12));
  CHECK(rho(1.0, 0.5, std::sqrt(2.0)) == doctest::Approx(0.20711).epsilon(1e-5));
  const double range55 = 0.48 * std::sqrt(55.0);
  CHECK(rho(20.0, 0.1, range55) == doctest::Approx(2.0 / (1.0 + 20.0 * range55)).epsilon(1e-12));
  CHECK(rho(20.0, 0.1, range55) == doctest::Approx(0.02732).epsilon(1e-3));
  CHECK(rho_known(0.01, 2.0) == doctest::Approx(0.005));
  CHECK(rho_known(0.02, 2.0) == doctest::Approx(2.0 * rho_known(0.01, 2.0)));
  CHECK(std::abs(rho(1e9, 0.3, 1.7) - rho_known(0.3, 1.7)) <= 1e-9 * rho_known(0.3, 1.7));
  CHECK_THROWS_AS(rho(0.0, 1.0, 1.0), InputError);
  CHECK_THROWS_AS(rho_known(1.0, 0.0), InputError);
}

TEST_CASE("margin shrinks as the control range grows") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> unit(0.01, 10.0);
  for (int k = 0; k < 1000; ++k) {
    const double d = unit(rng), e = unit(rng), r = unit(rng), extra = unit(rng);
    CHECK(rho(d, e, r + extra) <= rho(d, e, r));
    CHECK(rho_known(e, r + extra) <= rho_known(e, r));
  }
}

TEST_CASE("buffer dominates the robustness requirement") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> unit(0.0, 5.0);
  for (int k = 0; k < 1000; ++k) {
    const double eta = unit(rng), r = unit(rng), d = 0.1 + unit(rng), un = unit(rng);
    CHECK(eta + r * (1.0 / d + un) >= eta + r * std::sqrt(1.0 / (d * d) + un * un) - 1e-12);
  }
}

TEST_CASE("scalar examples match grid search") {
  const ModelEstimate est{Eigen::MatrixXd::Constant(1, 1, 1.0), 0.0};
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(1);

  SUBCASE("lower limit active") {
    // The first, slack-free solve succeeds, so xi stays at zero.
    const ControllerConfig c = scalar_config(1.0, 100.0, SlackMode::TwoSolve);
    const OracleSolution s = solve_oracle(c, est, Eigen::VectorXd::Constant(1, 0.9), zero);
    const GridOptimum g = grid_search(0.9, 1.0, 100.0, 0.005, false);
    CHECK(s.u(0) == doctest::Approx(0.05 / 0.995).epsilon(1e-6));
    CHECK(std::abs(s.u(0) - 0.050251) <= 1e-4);
    CHECK(std::abs(s.u(0) - g.u) <= 1e-5);
    CHECK(s.xi == 0.0);
    CHECK_FALSE(s.slack_used);
    CHECK(s.k == doctest::Approx(0.005 * s.u(0)).epsilon(1e-9));
    CHECK(s.v_pred(0) == doctest::Approx(0.9 + s.u(0)));
  }
  SUBCASE("lower limit with the slack priced by beta") {
    // With a single slack solve the penalty trades part of the step for xi.
    const ControllerConfig c = scalar_config(1.0, 100.0, SlackMode::Single);
    const OracleSolution s = solve_oracle(c, est, Eigen::VectorXd::Constant(1, 0.9), zero);
    const GridOptimum g = grid_search(0.9, 1.0, 100.0, 0.005, true);
    CHECK(std::abs(s.u(0) - g.u) <= 1e-5);
    CHECK(std::abs(s.xi - g.xi) <= 1e-5);
    CHECK(s.objective == doctest::Approx(g.cost).epsilon(1e-6));
  }
  SUBCASE("already at nominal") {
    for (SlackMode m : {SlackMode::Single, SlackMode::TwoSolve, SlackMode::None}) {
      const ControllerConfig c = scalar_config(1.0, 100.0, m);
      const OracleSolution s = solve_oracle(c, est, Eigen::VectorXd::Constant(1, 1.0), zero);
      CHECK(std::abs(s.u(0)) <= 1e-7);
      CHECK(s.xi <= 1e-8);
    }
  }
  SUBCASE("saturated control needs slack") {
    const ControllerConfig c = scalar_config(0.01, 100.0, SlackMode::Single);
    CHECK(robustness_margin(c) == doctest::Approx(0.5));
    const OracleSolution s = solve_oracle(c, est, Eigen::VectorXd::Constant(1, 0.9), zero);
    const GridOptimum g = grid_search(0.9, 0.01, 100.0, 0.5, true);
    CHECK(std::abs(s.u(0) - 0.01) <= 1e-4);
    CHECK(std::abs(s.xi - 0.045) <= 1e-4);
    CHECK(std::abs(s.u(0) - g.u) <= 1e-6);
    CHECK(std::abs(s.xi - g.xi) <= 1e-6);
    CHECK(s.k == doctest::Approx(0.005).epsilon(1e-6));
    // Without slack the same instance has no solution.
    ControllerConfig strict = c;
    strict.slack = SlackMode::None;
    CHECK(solve_oracle(strict, est, Eigen::VectorXd::Constant(1, 0.9), zero).status == SolveStatus::Infeasible);
    strict.slack = SlackMode::TwoSolve;
    const OracleSolution t = solve_oracle(strict, est, Eigen::VectorXd::Constant(1, 0.9), zero);
    CHECK(t.slack_used);
    CHECK(std::abs(t.xi - 0.045) <= 1e-4);
  }
}

TEST_CASE("solutions respect the injection box and the tightened limits") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + trial % 4;
    testsupport::OracleInstance in = testsupport::assumption3_instance(n, rng);
    in.cfg.slack = SlackMode::Single;
    in.v_now.array() += 0.3 * (trial % 3 - 1);  // push some instances outside the limits
    const OracleSolution s = solve_oracle(in.cfg, in.est, in.v_now, in.q_prev);
    INFO("trial ", trial);
    const Eigen::VectorXd q = in.q_prev + s.u;
    CHECK((q.array() >= in.cfg.q_min.array() - 1e-12).all());
    CHECK((q.array() <= in.cfg.q_max.array() + 1e-12).all());
    CHECK(s.xi >= 0.0);
    CHECK((s.v_pred - in.v_now - in.est.X * s.u).cwiseAbs().maxCoeff() <= 1e-12);
    const double band = s.k - s.xi;
    CHECK((s.v_pred.array() >= in.cfg.v_min.array() + band - 1e-7).all());
    CHECK((s.v_pred.array() <= in.cfg.v_max.array() - band + 1e-7).all());
  }
}

TEST_CASE("uncontrolled buses keep their injection") {
  std::mt19937_64 rng(12);
  testsupport::OracleInstance in = testsupport::assumption3_instance(4, rng);
  in.cfg.slack = SlackMode::Single;
  in.cfg.q_min(1) = in.cfg.q_max(1) = 0.0;
  in.cfg.q_min(3) = in.cfg.q_max(3) = 0.0;
  in.q_prev(1) = in.q_prev(3) = 0.0;
  const OracleSolution s = solve_oracle(in.cfg, in.est, in.v_now, in.q_prev);
  CHECK(s.u(1) == 0.0);
  CHECK(s.u(3) == 0.0);
}

TEST_CASE("constructed instances are feasible without slack and robust") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 1 + trial % 4;
    const testsupport::OracleInstance in = testsupport::assumption3_instance(n, rng);
    INFO("trial ", trial);
    const OracleSolution s = solve_oracle(in.cfg, in.est, in.v_now, in.q_prev);
    REQUIRE(s.status == SolveStatus::Optimal);
    CHECK(s.xi == 0.0);
    CHECK(s.k <= in.cfg.eta_bar + in.cfg.epsilon + 1e-12);
    const RobustnessReport rep = verify_robust_ball(in.cfg, in.est, in.v_now, s, 1000, 100 + trial);
    CHECK(rep.samples == 1000);
    CHECK(rep.violations == 0);
  }
}

TEST_CASE("robustness check") {
  SUBCASE("degenerate ball around the truth") {
    ControllerConfig c = scalar_config(1.0, 100.0, SlackMode::None);
    c.epsilon = 1e-12;
    const ModelEstimate est{Eigen::MatrixXd::Constant(1, 1, 1.0), 0.0};
    const OracleSolution s = solve_oracle(c, est, Eigen::VectorXd::Constant(1, 0.9), Eigen::VectorXd::Zero(1));
    CHECK(verify_robust_ball(c, est, Eigen::VectorXd::Constant(1, 0.9), s, 200, 1).violations == 0);
  }
  SUBCASE("scalar example holds on its ball and fails outside it") {
    const ControllerConfig c = scalar_config(1.0, 100.0, SlackMode::TwoSolve);
    const ModelEstimate est{Eigen::MatrixXd::Constant(1, 1, 1.0), 0.0};
    const Eigen::VectorXd v = Eigen::VectorXd::Constant(1, 0.9);
    const OracleSolution s = solve_oracle(c, est, v, Eigen::VectorXd::Zero(1));
    CHECK(verify_robust_ball(c, est, v, s, 1000, 2).violations == 0);
    // The lower limit binds exactly on the boundary of the ball, so a larger
    // ball must contain violating models.
    const RobustnessReport wide = verify_robust_ball(c, est, v, s, 1000, 2, 2.0);
    CHECK(wide.violations > 0);
    CHECK(wide.worst_excess > 1e-6);
  }
}

TEST_CASE("configuration is validated") {
  ControllerConfig c = scalar_config(1.0, 100.0, SlackMode::Single);
  const ModelEstimate est{Eigen::MatrixXd::Constant(1, 1, 1.0), 0.0};
  const Eigen::VectorXd v = Eigen::VectorXd::Constant(1, 1.0), z = Eigen::VectorXd::Zero(1);
  ControllerConfig bad = c;
  bad.v_min(0) = 1.1;
  CHECK_THROWS_AS(solve_oracle(bad, est, v, z), InputError);
  bad = c;
  bad.P_u(0, 0) = -1.0;
  CHECK_THROWS_AS(solve_oracle(bad, est, v, z), InputError);
  bad = c;
  bad.beta = 0.0;
  CHECK_THROWS_AS(solve_oracle(bad, est, v, z), InputError);
  CHECK_THROWS_AS(solve_oracle(c, {Eigen::MatrixXd::Ones(2, 2), 0.0}, v, z), InputError);
}
