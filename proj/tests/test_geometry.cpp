#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "support.hpp"
#include "voltctrl/error.hpp"
#include "voltctrl/geometry.hpp"
#include "voltctrl/norms.hpp"
#include "voltctrl/powerflow.hpp"

using namespace voltctrl;

namespace {

Eigen::MatrixXd scalar(double a) { return Eigen::MatrixXd::Constant(1, 1, a); }
Eigen::VectorXd vec1(double a) { return Eigen::VectorXd::Constant(1, a); }

Observation obs1(double v, double v2, double u, double qc) {
  return {vec1(v), vec1(v2), vec1(u), vec1(qc)};
}

// {(X, eta): |1 - X| <= eta, X in [0, 3], eta in [0, 0.5]}
ConsistentSetSpec hand_set() {
  return build_consistent_set(make_prior_set(scalar(1.5), 1.0, {}, {}, true), 0.5,
                              {vec1(0.0), vec1(2.0)}, {obs1(0.0, 1.0, 1.0, 0.0)});
}

}  // namespace

TEST_CASE("vectorization") {
  const ModelEstimate e{scalar(2.0), 3.0};
  const Eigen::VectorXd z = vectorize(e, 2.0);
  REQUIRE(z.size() == 2);
  CHECK(z(0) == 2.0);
  CHECK(z(1) == 6.0);
  CHECK(z.norm() == doctest::Approx(std::sqrt(40.0)));
  CHECK_THROWS_AS(devectorize(z, 2, 2.0), InputError);

  std::mt19937_64 rng(1);
  std::normal_distribution<double> normal;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + trial % 6;
    const double delta = 0.5 + std::abs(normal(rng)) * 10.0;
    const ModelEstimate a{testsupport::random_symmetric(n, rng), normal(rng)};
    const ModelEstimate b{testsupport::random_symmetric(n, rng), normal(rng)};
    const ModelEstimate back = devectorize(vectorize(a, delta), n, delta);
    CHECK((back.X - a.X).cwiseAbs().maxCoeff() <= 1e-14);
    CHECK(std::abs(back.eta - a.eta) <= 1e-14 * std::max(1.0, std::abs(a.eta)));
    CHECK(vectorize(a, delta).norm() == doctest::Approx(tri_delta_norm(a.X, a.eta, delta)).epsilon(1e-12));
    CHECK((vectorize(a, delta) - vectorize(b, delta)).norm() ==
          doctest::Approx(tri_delta_norm(a.X - b.X, a.eta - b.eta, delta)).epsilon(1e-12));
  }
}

TEST_CASE("membership examples") {
  const PriorSpec prior = make_prior_set(scalar(1.5), 10.0, {}, {}, true);
  const Observation o = obs1(1.0, 1.2, 0.1, 0.1);
  const ConsistentSetSpec wide = build_consistent_set(prior, 1.0, {vec1(0.0), vec1(1.5)}, {o});
  CHECK(membership({scalar(2.0), 0.0}, wide));
  CHECK_FALSE(membership({scalar(1.0), 0.05}, wide));
  CHECK(set_violation({scalar(1.0), 0.05}, wide) == doctest::Approx(0.05));
  const ConsistentSetSpec tight = build_consistent_set(prior, 1.0, {vec1(0.0), vec1(0.9)}, {o});
  CHECK_FALSE(membership({scalar(2.0), 0.0}, tight));
}

TEST_CASE("consistent set structure") {
  const PriorSpec prior = make_prior_set(scalar(1.5), 1.0, {}, {}, true);
  SUBCASE("no observations: prior times the eta interval") {
    const ConsistentSetSpec s = build_consistent_set(prior, 2.0, {vec1(0.0), vec1(1.0)}, {});
    CHECK(membership({scalar(2.9), 1.9}, s));
    CHECK_FALSE(membership({scalar(3.1), 1.0}, s));
    CHECK_FALSE(membership({scalar(1.0), 2.1}, s));
  }
  SUBCASE("an observation without control only constrains eta") {
    const ConsistentSetSpec s = build_consistent_set(prior, 2.0, {vec1(-10.0), vec1(10.0)}, {obs1(1.0, 1.3, 0.0, 0.0)});
    for (double x : {0.0, 1.0, 3.0}) {
      CHECK(membership({scalar(x), 0.3}, s));
      CHECK_FALSE(membership({scalar(x), 0.29}, s));
    }
  }
  SUBCASE("bad inputs") {
    CHECK_THROWS_AS(build_consistent_set(prior, -1.0, {vec1(0.0), vec1(1.0)}, {}), InputError);
    CHECK_THROWS_AS(build_consistent_set(prior, 1.0, {vec1(1.0), vec1(0.0)}, {}), InputError);
    CHECK_THROWS_AS(build_consistent_set(prior, 1.0, {vec1(0.0), vec1(1.0)}, {{vec1(0), vec1(0), Eigen::Vector2d::Zero(), vec1(0)}}), InputError);
  }
}

TEST_CASE("hand-derived projection") {
  const ConsistentSetSpec s = hand_set();
  const ProjectionResult r = project(s, {scalar(2.0), 0.0}, 1.0);
  REQUIRE(r.status == ProjectionStatus::Optimal);
  CHECK(r.estimate.X(0, 0) == doctest::Approx(1.5).epsilon(1e-6));
  CHECK(r.estimate.eta == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(r.distance == doctest::Approx(std::sqrt(0.5)).epsilon(1e-6));

  // A member is returned untouched, without a solve.
  const ModelEstimate inside{scalar(1.2), 0.3};
  const ProjectionResult same = project(s, inside, 1.0);
  CHECK(same.status == ProjectionStatus::Optimal);
  CHECK(same.solves == 0);
  CHECK(same.estimate.X(0, 0) == 1.2);
  CHECK(same.estimate.eta == 0.3);
  CHECK(same.distance == 0.0);
}

TEST_CASE("contradictory observations are infeasible") {
  const PriorSpec prior = make_prior_set(scalar(1.5), 1.0, {}, {}, true);
  // Same (zero) control, residual 1 > eta_max.
  const ConsistentSetSpec s =
      build_consistent_set(prior, 0.5, {vec1(-10.0), vec1(10.0)}, {obs1(0.0, 1.0, 0.0, 0.0), obs1(1.0, 2.0, 0.0, 0.0)});
  CHECK(project(s, {scalar(1.0), 0.0}, 1.0).status == ProjectionStatus::Infeasible);

  // Same nonzero control, opposite responses.
  const ConsistentSetSpec t =
      build_consistent_set(prior, 0.1, {vec1(-10.0), vec1(10.0)}, {obs1(0.0, 1.0, 1.0, 0.0), obs1(0.0, 2.0, 1.0, 0.0)});
  CHECK(project(t, {scalar(1.0), 0.0}, 20.0).status == ProjectionStatus::Infeasible);
}

TEST_CASE("projection beats random feasible points") {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> normal;
  for (int n : {1, 2}) {
    for (int inst = 0; inst < 3; ++inst) {
      const testsupport::TreeData t = testsupport::random_tree(n, rng);
      const SensitivityModel m = compute_sensitivity(testsupport::make_net(t));
      const double delta = inst == 0 ? 1.0 : 20.0;
      // A few noisy linear observations of the true model.
      std::vector<Observation> obs;
      Eigen::VectorXd v = Eigen::VectorXd::Constant(n, 144.0), qc = Eigen::VectorXd::Zero(n);
      for (int k = 0; k < 4; ++k) {
        Eigen::VectorXd u(n), w(n);
        for (int i = 0; i < n; ++i) {
          u(i) = normal(rng);
          w(i) = 0.2 * std::tanh(normal(rng));
        }
        qc += u;
        const Eigen::VectorXd v2 = linear_step(v, m.X, u, w);
        obs.push_back({v, v2, u, qc});
        v = v2;
      }
      Eigen::VectorXd lo(n), hi(n);
      for (int i = 0; i < n; ++i) {
        lo(i) = 140.0;
        hi(i) = 150.0;
      }
      const ConsistentSetSpec s = build_consistent_set(make_prior_set(m.X, 1.0, {}, {}, true), 2.0, {lo, hi}, obs);
      const std::vector<ModelEstimate> pts = testsupport::feasible_samples(s, delta, 1000, rng);
      for (int q = 0; q < 5; ++q) {
        const ModelEstimate from{m.X + testsupport::random_symmetric(n, rng, 3.0), std::abs(normal(rng))};
        const ProjectionResult r = project(s, from, delta);
        REQUIRE(r.status == ProjectionStatus::Optimal);
        CHECK(membership(r.estimate, s));
        for (const ModelEstimate& y : pts) {
          REQUIRE(membership(y, s));
          CHECK(r.distance <= tri_delta_norm(y.X - from.X, y.eta - from.eta, delta) + 1e-6);
        }
      }
    }
  }
}

TEST_CASE("truth stays consistent and sets are nested along a trajectory") {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> noise(-1.0, 1.0);
  const int n = 5, T = 40;
  const testsupport::TreeData t = testsupport::random_tree(n, rng);
  const SensitivityModel m = compute_sensitivity(testsupport::make_net(t));
  const double eta_star = 0.3;

  std::vector<Eigen::VectorXd> vpar(T + 1);
  vpar[0] = Eigen::VectorXd::Constant(n, 144.0);
  for (int k = 1; k <= T; ++k)
    vpar[k] = vpar[k - 1] + eta_star * Eigen::VectorXd::NullaryExpr(n, [&] { return noise(rng); });
  VparBox box{vpar[0], vpar[0]};
  for (const auto& vp : vpar) {
    box.lower = box.lower.cwiseMin(vp);
    box.upper = box.upper.cwiseMax(vp);
  }
  std::vector<Observation> obs;
  Eigen::VectorXd qc = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd v = vpar[0];
  const PriorSpec prior = make_prior_set(m.X, 1.0, {}, {}, true);
  ConsistentSetSpec previous = build_consistent_set(prior, 1.0, box, {});
  for (int k = 1; k <= T; ++k) {
    Eigen::VectorXd u(n);
    for (int i = 0; i < n; ++i) u(i) = 0.5 * normal(rng);
    qc += u;
    const Eigen::VectorXd v2 = linear_step(v, m.X, u, vpar[k] - vpar[k - 1]);
    obs.push_back({v, v2, u, qc});
    v = v2;
    const ConsistentSetSpec s = build_consistent_set(prior, 1.0, box, obs);
    CHECK(set_violation({m.X, eta_star}, s) <= 1e-6);
    if (k % 10 == 0) {
      for (const ModelEstimate& p : testsupport::feasible_samples(s, 20.0, 40, rng)) {
        CHECK(membership(p, previous));
      }
    }
    previous = s;
  }
}

TEST_CASE("PSD enforcement through eigenvector cuts") {
  // With three buses the dominance constraints alone admit indefinite
  // matrices such as [[1,1,0],[1,1,1],[0,1,1]].
  Eigen::MatrixXd c(3, 3);
  c << 1, 1, 0, 1, 1, 1, 0, 1, 1;
  Eigen::MatrixXd center = Eigen::MatrixXd::Identity(3, 3);
  const VparBox box{Eigen::VectorXd::Zero(3), Eigen::VectorXd::Zero(3)};
  ConsistentSetSpec off = build_consistent_set(make_prior_set(center, 3.0, {}, {}, false), 1.0, box, {});
  ConsistentSetSpec on = build_consistent_set(make_prior_set(center, 3.0, {}, {}, true), 1.0, box, {});
  CHECK(membership({c, 0.0}, off));
  CHECK_FALSE(membership({c, 0.0}, on));
  const ProjectionResult r = project(on, {c, 0.0}, 20.0);
  REQUIRE(r.status == ProjectionStatus::Optimal);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(r.estimate.X);
  CHECK(eig.eigenvalues().minCoeff() >= -1e-7);
  CHECK(membership(r.estimate, on));
  CHECK(r.solves > 1);
  // No PSD member of the set is closer: sample members by clipping random
  // symmetric matrices and keeping those inside.
  std::mt19937_64 rng(99);
  int kept = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    const Eigen::MatrixXd a = c + testsupport::random_symmetric(3, rng, 0.6);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> e(a);
    const Eigen::MatrixXd b =
        e.eigenvectors() * e.eigenvalues().cwiseMax(0.0).asDiagonal() * e.eigenvectors().transpose();
    if (!membership({b, 0.0}, on, 1e-9)) continue;
    ++kept;
    CHECK(tri_norm(b - c) >= r.distance - 1e-7);
  }
  CHECK(kept > 50);
}

TEST_CASE("pins are honored by the projection") {
  std::mt19937_64 rng(4);
  const testsupport::TreeData t = testsupport::random_tree(6, rng);
  const RadialNetwork net = testsupport::make_net(t);
  const SensitivityModel m = compute_sensitivity(net);
  const VparBox box{Eigen::VectorXd::Zero(6), Eigen::VectorXd::Zero(6)};
  for (PriorMode mode : {PriorMode::TopoK, PriorMode::LinesK, PriorMode::Known}) {
    const PriorSpec prior = make_mode_prior(net, m, mode, 4, 1.0, true);
    const ConsistentSetSpec s = build_consistent_set(prior, 1.0, box, {});
    const ProjectionResult r = project(s, {m.X + testsupport::random_symmetric(6, rng), 0.5}, 20.0);
    REQUIRE(r.status == ProjectionStatus::Optimal);
    CHECK(prior_violation(r.estimate.X, prior) <= 1e-6);
    if (mode == PriorMode::Known) CHECK((r.estimate.X - m.X).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("known noise bound pins eta") {
  const ConsistentSetSpec base = hand_set();
  ConsistentSetSpec s = base;
  s.eta_fixed = 0.2;
  const ProjectionResult r = project(s, {scalar(2.0), 0.0}, 1.0);
  REQUIRE(r.status == ProjectionStatus::Optimal);
  CHECK(r.estimate.eta == doctest::Approx(0.2));
  CHECK(r.estimate.X(0, 0) == doctest::Approx(1.2).epsilon(1e-6));
  s.eta_fixed = 0.7;  // above eta_max
  CHECK(project(s, {scalar(2.0), 0.0}, 1.0).status == ProjectionStatus::Infeasible);
}

TEST_CASE("unobserved buses contribute no rows") {
  const PriorSpec prior = make_prior_set(Eigen::MatrixXd::Identity(2, 2), 1.0, {}, {}, true);
  Observation o{Eigen::Vector2d(1.0, 1.0), Eigen::Vector2d(1.0, 5.0), Eigen::Vector2d::Zero(), Eigen::Vector2d::Zero()};
  ConsistentSetSpec s = build_consistent_set(prior, 1.0, {Eigen::Vector2d::Zero(), Eigen::Vector2d::Constant(10.0)}, {o});
  CHECK_FALSE(membership({Eigen::MatrixXd::Identity(2, 2), 0.5}, s));
  s.observed = {true, false};
  CHECK(membership({Eigen::MatrixXd::Identity(2, 2), 0.5}, s));
}

TEST_CASE("random initial model") {
  const std::vector<Edge> e{{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 5}};
  const RadialNetwork net = build_network(e, std::vector<double>(5, 0.1), std::vector<double>{0.3, 0.2, 0.4, 0.1, 0.25}, std::vector<int>{1, 2, 3, 4, 5});
  const SensitivityModel m = compute_sensitivity(net);
  const PriorSpec prior = make_prior_set(m.X, 1.0, {}, {}, true);
  const ModelEstimate a = random_initial_model(net, prior, 7);
  const ModelEstimate b = random_initial_model(net, prior, 7);
  CHECK((a.X - b.X).cwiseAbs().maxCoeff() == 0.0);
  CHECK(a.eta == 0.0);
  CHECK(prior_violation(a.X, prior) <= 1e-8);
  CHECK((a.X - m.X).cwiseAbs().maxCoeff() > 1e-3);
  const ModelEstimate c = random_initial_model(net, prior, 8);
  CHECK((a.X - c.X).cwiseAbs().maxCoeff() > 0.0);
  const PriorSpec point = make_prior_set(m.X, 0.0, {}, {}, true);
  for (std::uint64_t seed : {1u, 2u, 3u})
    CHECK((random_initial_model(net, point, seed).X - m.X).cwiseAbs().maxCoeff() <= 1e-12);
}
