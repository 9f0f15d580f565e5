// Acceptance suite: one PASS/FAIL line per criterion. Tolerances and
// budgets are fixed here; the exit status is nonzero if any line fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <string>

#include "episode.hpp"
#include "support.hpp"
#include "voltctrl/controller.hpp"
#include "voltctrl/geometry.hpp"
#include "voltctrl/norms.hpp"
#include "voltctrl/oracle.hpp"
#include "voltctrl/powerflow.hpp"

using namespace voltctrl;

namespace {

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok && pass) detail << "first failure: " << what << "; ";
    pass = pass && ok;
  }
};

int failures = 0;

void criterion(int id, const char* title, double budget_s, const std::function<void(Verdict&)>& body) {
  Verdict v;
  const auto start = std::chrono::steady_clock::now();
  try {
    body(v);
  } catch (const std::exception& e) {
    v.pass = false;
    v.detail << "exception: " << e.what() << "; ";
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (secs > budget_s) {
    v.pass = false;
    v.detail << "over the time budget; ";
  }
  if (!v.pass) ++failures;
  std::printf("%s  %2d  %s: %s(%.1f s of %.0f s)\n", v.pass ? "PASS" : "FAIL", id, title, v.detail.str().c_str(),
              secs, budget_s);
  std::fflush(stdout);
}

Eigen::MatrixXd scalar(double a) { return Eigen::MatrixXd::Constant(1, 1, a); }
Eigen::VectorXd vec1(double a) { return Eigen::VectorXd::Constant(1, a); }

}  // namespace

int main() {
  // Path-intersection oracle on random trees.
  criterion(1, "sensitivity matrices vs path enumeration", 5.0, [](Verdict& v) {
    std::mt19937_64 rng(101);
    std::uniform_int_distribution<int> dim(1, 12);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const testsupport::TreeData t = testsupport::random_tree(dim(rng), rng);
      const SensitivityModel m = compute_sensitivity(testsupport::make_net(t));
      worst = std::max({worst, (m.X - testsupport::brute_force_sensitivity(t, true)).cwiseAbs().maxCoeff(),
                        (m.R - testsupport::brute_force_sensitivity(t, false)).cwiseAbs().maxCoeff()});
      const int n = m.X.rows();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          v.require(m.X(i, j) <= std::min(m.X(i, i), m.X(j, j)) && m.R(i, j) <= std::min(m.R(i, i), m.R(j, j)),
                    "off-diagonal dominance");
    }
    v.require(worst <= 1e-12, "entrywise error");
    v.detail << "100 trees, max error " << worst << ", tol 1e-12; ";
  });

  criterion(2, "tri_norm bound |A b| <= alpha ||b||", 1.0, [](Verdict& v) {
    std::mt19937_64 rng(202);
    std::normal_distribution<double> normal;
    std::uniform_int_distribution<int> dim(1, 10);
    double worst = -std::numeric_limits<double>::infinity();
    for (int trial = 0; trial < 1000; ++trial) {
      const int n = dim(rng);
      const Eigen::MatrixXd a = testsupport::random_symmetric(n, rng);
      Eigen::VectorXd b(n);
      for (int i = 0; i < n; ++i) b(i) = normal(rng);
      // alpha at the norm itself for a third of the draws: the tight case.
      const double alpha = tri_norm(a) * (trial % 3 == 0 ? 1.0 : 1.0 + std::abs(normal(rng)));
      worst = std::max(worst, (a * b).cwiseAbs().maxCoeff() - alpha * b.norm());
    }
    v.require(worst <= 1e-12, "bound");
    v.detail << "1000 draws, max excess " << worst << ", tol 1e-12; ";
  });

  criterion(3, "true model stays in the consistent set", 300.0, [](Verdict& v) {
    int checks = 0;
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      auto s = testsupport::synth_episode(8, seed, 500);
      const EpisodeResult r = run_episode(s.plant, s.bundle.series, s.cfg, s.ep);
      const SensitivityModel truth = compute_sensitivity(s.bundle.network);
      ConsistentSetSpec set;
      set.prior = make_mode_prior(s.bundle.network, truth, s.ep.prior, s.ep.prior_k, s.ep.alpha, s.ep.enforce_psd);
      set.eta_max = s.cfg.eta_bar;
      set.vpar_box = s.cfg.vpar_box;
      const ModelEstimate star{truth.X, r.eta_star};
      for (const Observation& o : testsupport::trajectory_of(r)) {
        set.observations.push_back(o);
        worst = std::max(worst, set_violation(star, set));
        v.require(membership(star, set, 1e-6), "membership at seed " + std::to_string(seed));
        ++checks;
      }
    }
    v.detail << "20 episodes, " << checks << " prefixes, max violation " << worst << ", tol 1e-6; ";
  });

  criterion(4, "projection optimality", 120.0, [](Verdict& v) {
    // {(X, eta): |1 - X| <= eta, X in [0, 3], eta in [0, 0.5]}: (2, 0) lands on (1.5, 0.5).
    const ConsistentSetSpec hand = build_consistent_set(make_prior_set(scalar(1.5), 1.0, {}, {}, true), 0.5,
                                                        {vec1(0.0), vec1(2.0)}, {{vec1(0.0), vec1(1.0), vec1(1.0), vec1(0.0)}});
    const ProjectionResult h = project(hand, {scalar(2.0), 0.0}, 1.0);
    v.require(h.status == ProjectionStatus::Optimal, "hand case solved");
    const double hand_err = std::max(std::abs(h.estimate.X(0, 0) - 1.5), std::abs(h.estimate.eta - 0.5));
    v.require(hand_err <= 1e-6, "hand case (1.5, 0.5)");

    std::mt19937_64 rng(404);
    std::normal_distribution<double> normal;
    double worst = -std::numeric_limits<double>::infinity();
    int instances = 0;
    for (int n : {1, 2}) {
      for (int inst = 0; inst < 3; ++inst) {
        const testsupport::TreeData t = testsupport::random_tree(n, rng);
        const SensitivityModel m = compute_sensitivity(testsupport::make_net(t));
        std::vector<Observation> obs;
        Eigen::VectorXd volt = Eigen::VectorXd::Constant(n, 144.0), qc = Eigen::VectorXd::Zero(n);
        for (int k = 0; k < 4; ++k) {
          Eigen::VectorXd u(n), w(n);
          for (int i = 0; i < n; ++i) {
            u(i) = normal(rng);
            w(i) = 0.2 * std::tanh(normal(rng));
          }
          qc += u;
          const Eigen::VectorXd next = linear_step(volt, m.X, u, w);
          obs.push_back({volt, next, u, qc});
          volt = next;
        }
        const ConsistentSetSpec set =
            build_consistent_set(make_prior_set(m.X, 1.0, {}, {}, true), 2.0,
                                 {Eigen::VectorXd::Constant(n, 140.0), Eigen::VectorXd::Constant(n, 150.0)}, obs);
        const double delta = inst == 0 ? 1.0 : 20.0;
        const std::vector<ModelEstimate> pts = testsupport::feasible_samples(set, delta, 1000, rng);
        const ModelEstimate from{m.X + testsupport::random_symmetric(n, rng, 3.0), std::abs(normal(rng))};
        const ProjectionResult r = project(set, from, delta);
        v.require(r.status == ProjectionStatus::Optimal && membership(r.estimate, set), "projection feasible");
        for (const ModelEstimate& y : pts)
          worst = std::max(worst, r.distance - tri_delta_norm(y.X - from.X, y.eta - from.eta, delta));
        ++instances;
      }
    }
    v.require(worst <= 1e-6, "beaten by a feasible point");
    v.detail << "hand case error " << hand_err << "; " << instances
             << " instances x 1000 feasible points, max (proj - sample) distance " << worst << ", tol 1e-6; ";
  });

  criterion(5, "slack-free feasibility and robustness on constructed instances", 120.0, [](Verdict& v) {
    std::mt19937_64 rng(505);
    int violations = 0;
    for (int trial = 0; trial < 50; ++trial) {
      const testsupport::OracleInstance in = testsupport::assumption3_instance(1 + trial % 4, rng);
      const OracleSolution s = solve_oracle(in.cfg, in.est, in.v_now, in.q_prev);  // slack pinned off
      v.require(s.status == SolveStatus::Optimal && s.xi == 0.0, "feasible at trial " + std::to_string(trial));
      if (s.status != SolveStatus::Optimal) continue;
      violations += verify_robust_ball(in.cfg, in.est, in.v_now, s, 1000, 1000 + trial).violations;
    }
    v.require(violations == 0, "robust ball");
    v.detail << "50 instances x 1000 samples, " << violations << " violations; ";
  });

  criterion(6, "scalar oracle examples vs grid search", 60.0, [](Verdict& v) {
    using testsupport::scalar_config;
    const ModelEstimate est{scalar(1.0), 0.0};
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(1);
    const OracleSolution a = solve_oracle(scalar_config(1.0, 100.0, SlackMode::TwoSolve), est, vec1(0.9), zero);
    const auto ga = testsupport::grid_search(0.9, 1.0, 100.0, 0.005, false);
    const OracleSolution b = solve_oracle(scalar_config(1.0, 100.0, SlackMode::TwoSolve), est, vec1(1.0), zero);
    const OracleSolution c = solve_oracle(scalar_config(0.01, 100.0, SlackMode::Single), est, vec1(0.9), zero);
    const auto gc = testsupport::grid_search(0.9, 0.01, 100.0, 0.5, true);
    const double ea = std::max(std::abs(a.u(0) - 0.050251), std::abs(a.u(0) - ga.u));
    const double eb = std::abs(b.u(0));
    const double ec = std::max({std::abs(c.u(0) - 0.01), std::abs(c.xi - 0.045), std::abs(c.u(0) - gc.u),
                                std::abs(c.xi - gc.xi)});
    v.require(ea <= 1e-4 && a.xi == 0.0, "u* = 0.050251");
    v.require(eb <= 1e-4, "u* = 0");
    v.require(ec <= 1e-4, "u* = 0.01, xi* = 0.045");
    v.detail << "u* = " << a.u(0) << " / " << b.u(0) << " / (" << c.u(0) << ", " << c.xi << "), errors " << ea
             << " / " << eb << " / " << ec << ", tol 1e-4; ";
  });

  criterion(7, "finite mistakes; known prior dominates", 900.0, [](Verdict& v) {
    for (std::uint64_t seed = 1; seed <= 4; ++seed) {
      auto s = testsupport::synth_episode(8, seed, 2000);
      const EpisodeResult unknown = run_episode(s.plant, s.bundle.series, s.cfg, s.ep);
      auto k = testsupport::synth_episode(8, seed, 2000, "known");
      const EpisodeResult known = run_episode(k.plant, k.bundle.series, k.cfg, k.ep);
      const int last = testsupport::last_mistake(unknown);
      v.require(last < 1000, "mistake in the final half at seed " + std::to_string(seed));
      v.require(known.mistakes <= unknown.mistakes, "known <= unknown at seed " + std::to_string(seed));
      v.detail << "seed " << seed << ": " << unknown.mistakes << " mistakes (last " << last << "), known "
               << known.mistakes << "; ";
    }
  });

  criterion(8, "DistFlow dynamics", 900.0, [](Verdict& v) {
    double worst_pf = 0.0;
    for (std::uint64_t seed = 1; seed <= 4; ++seed) {
      auto s = testsupport::synth_episode(8, seed, 2000, "unknown", Dynamics::DistFlow);
      const EpisodeResult r = run_episode(s.plant, s.bundle.series, s.cfg, s.ep);
      worst_pf = std::max(worst_pf, r.max_powerflow_residual);
      v.require(r.v.allFinite() && std::isfinite(r.avg_violation), "finite at seed " + std::to_string(seed));
      v.detail << "seed " << seed << ": " << r.mistakes << " mistakes, avg violation " << r.avg_violation << "; ";
    }
    v.require(worst_pf <= 1e-10, "power-flow residual");
    v.detail << "max residual " << worst_pf << ", tol 1e-10; ";
  });

  criterion(9, "topology change is detected and re-learned", 300.0, [](Verdict& v) {
    auto s = testsupport::synth_episode(8, 1, 1000, "unknown", Dynamics::Linear, 0.1);
    testsupport::add_root_swap(s, 500);
    const EpisodeResult r = run_episode(s.plant, s.bundle.series, s.cfg, s.ep);
    v.require(!r.reset_steps.empty(), "a reset");
    if (r.reset_steps.empty()) return;
    const int at = r.reset_steps.front();
    const double at_reset = r.model_error[at], final_error = r.model_error.back();
    v.require(at >= 500, "no reset before the swap");
    v.require(final_error < at_reset, "error decreases after the reset");
    v.detail << r.reset_steps.size() << " reset(s), first at step " << at << "; error vs new model " << at_reset
             << " -> " << final_error << "; ";
  });

  criterion(10, "known-noise limit of the margin and dimension", 1.0, [](Verdict& v) {
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      auto s = testsupport::synth_episode(8, seed, 10);
      const double range = q_range_norm(s.cfg);
      const double rel = std::abs(rho(1e9, s.cfg.epsilon, range) - rho_known(s.cfg.epsilon, range)) /
                         rho_known(s.cfg.epsilon, range);
      worst = std::max(worst, rel);
    }
    v.require(worst <= 1e-9, "rho limit");
    bool dims = true;
    for (int n = 1; n <= 60; ++n)
      dims = dims && parameter_dimension(n, false) == 1 + n * (n + 1) / 2 &&
             parameter_dimension(n, true) == n * (n + 1) / 2;
    v.require(dims, "parameter dimension");
    const double unknown = mistake_bound(2.0, 0.5, parameter_dimension(3, false));
    const double known = mistake_bound(2.0, 0.5, parameter_dimension(3, true));
    v.require(known < unknown, "known-noise bound smaller");
    v.detail << "max relative gap " << worst << ", tol 1e-9; m(n=3) = " << parameter_dimension(3, false) << " -> "
             << parameter_dimension(3, true) << "; ";
  });

  std::printf("%s: %d criteria failed\n", failures == 0 ? "ALL PASS" : "FAILURES", failures);
  return failures == 0 ? 0 : 1;
}
