#include "voltctrl/controller.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "voltctrl/error.hpp"
#include "voltctrl/norms.hpp"

namespace voltctrl {

std::vector<int> subsample(int trajectory_size, int latest, int random_count, std::uint64_t seed) {
  if (latest < 0 || random_count < 0) throw InputError("subsample counts must be >= 0");
  std::vector<int> all(std::max(trajectory_size, 0));
  std::iota(all.begin(), all.end(), 0);
  if (trajectory_size <= latest + random_count) return all;

  const int rest = trajectory_size - latest;
  std::vector<int> pool(all.begin(), all.begin() + rest);
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first random_count slots become the draw.
  for (int k = 0; k < random_count; ++k) {
    std::uniform_int_distribution<int> pick(k, rest - 1);
    std::swap(pool[k], pool[pick(rng)]);
  }
  std::vector<int> out(pool.begin(), pool.begin() + random_count);
  for (int i = rest; i < trajectory_size; ++i) out.push_back(i);
  std::sort(out.begin(), out.end());
  return out;
}

ViolationMetrics metrics(const Eigen::MatrixXd& v, const Eigen::VectorXd& v_min, const Eigen::VectorXd& v_max,
                         const std::vector<bool>& mask) {
  if (v.cols() != v_min.size() || v.cols() != v_max.size()) throw InputError("metrics: dimension mismatch");
  ViolationMetrics m;
  double total = 0.0;
  long count = 0;
  for (Eigen::Index t = 0; t < v.rows(); ++t) {
    bool bad = false;
    for (Eigen::Index i = 0; i < v.cols(); ++i) {
      if (!mask.empty() && !mask[i]) continue;
      const double excess = std::max(v(t, i) - v_max(i), v_min(i) - v(t, i));
      if (excess <= 0.0) continue;
      bad = true;
      total += excess;
      ++count;
      m.max_violation = std::max(m.max_violation, excess);
    }
    if (bad) ++m.mistakes;
  }
  m.avg_violation = count ? total / static_cast<double>(count) : 0.0;
  return m;
}

double gamma_proj(int m) {
  if (m < 2) throw InputError("gamma_proj: m must be >= 2");
  const double log_gamma = std::log(M_PI) + std::log(m - 1.0) + 0.5 * m * std::log(static_cast<double>(m));
  if (log_gamma > std::log(std::numeric_limits<double>::max())) return std::numeric_limits<double>::infinity();
  return std::exp(log_gamma);
}

int parameter_dimension(int n, bool known_eta) { return upper_triangle_size(n) + (known_eta ? 0 : 1); }

double mistake_bound(double diam, double rho, int m) {
  if (!(diam > 0.0) || !(rho > 0.0)) throw InputError("mistake_bound: diam and rho must be positive");
  const double g = gamma_proj(m);
  if (std::isinf(g)) return g;
  const double log_b = std::log(2.0) + std::log(g) + std::log(diam) - std::log(rho);
  if (log_b > std::log(std::numeric_limits<double>::max())) return std::numeric_limits<double>::infinity();
  return std::exp(log_b) + 1.0;
}

double parameter_diameter(const PriorSpec& prior, double eta_bar, double delta, bool known_eta) {
  const double ball = 2.0 * prior.radius();
  return known_eta ? ball : std::hypot(ball, delta * eta_bar);
}

Eigen::MatrixXd vpar_trace(const SensitivityModel& model, const Series& series, double v0) {
  const int n = model.size();
  if (series.p.cols() != n || series.q_e.cols() != n || series.p.rows() != series.q_e.rows())
    throw InputError("series does not match the network");
  Eigen::MatrixXd out = series.p * model.R + series.q_e * model.X;  // R, X symmetric
  out.array() += v0;
  return out;
}

VparBox vpar_box_linear(const SensitivityModel& model, const Series& series, double v0) {
  const Eigen::MatrixXd trace = vpar_trace(model, series, v0);
  if (trace.rows() == 0) throw InputError("empty series");
  return {trace.colwise().minCoeff().transpose(), trace.colwise().maxCoeff().transpose()};
}

VparBox vpar_box_distflow(const RadialNetwork& net, const Series& series, double v0, double pad) {
  const int n = net.size();
  if (series.p.cols() != n || series.q_e.cols() != n) throw InputError("series does not match the network");
  if (series.steps() == 0) throw InputError("empty series");
  VparBox box{Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity()),
              Eigen::VectorXd::Constant(n, -std::numeric_limits<double>::infinity())};
  for (int t = 0; t < series.steps(); ++t) {
    const InjectionProfile inj{series.p.row(t).transpose(), series.q_e.row(t).transpose(), Eigen::VectorXd::Zero(n)};
    const Eigen::VectorXd v = solve_distflow(net, inj, v0).v;
    box.lower = box.lower.cwiseMin(v);
    box.upper = box.upper.cwiseMax(v);
  }
  box.lower.array() -= pad;
  box.upper.array() += pad;
  return box;
}

namespace {

struct Plant {
  const std::vector<PlantPhase>& phases;
  std::vector<SensitivityModel> models;

  explicit Plant(const std::vector<PlantPhase>& p) : phases(p) {
    for (const PlantPhase& ph : p) models.push_back(compute_sensitivity(ph.net));
  }
  int phase_at(int t) const {
    int k = 0;
    for (int j = 0; j < static_cast<int>(phases.size()); ++j)
      if (phases[j].start <= t) k = j;
    return k;
  }
};

std::uint64_t step_seed(std::uint64_t seed, int t) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(t)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

SolverError at_step(const std::string& what, int t) {
  std::ostringstream msg;
  msg << what << " at step " << t;
  return SolverError(msg.str(), t);
}

}  // namespace

EpisodeResult run_episode(const std::vector<PlantPhase>& plant_phases, const Series& series,
                          const ControllerConfig& cfg, const EpisodeConfig& ep) {
  if (plant_phases.empty()) throw InputError("run_episode: no plant");
  if (plant_phases.front().start != 0) throw InputError("run_episode: the first plant phase must start at step 0");
  const int n = plant_phases.front().net.size();
  for (const PlantPhase& ph : plant_phases)
    if (ph.net.size() != n) throw InputError("run_episode: plant phases differ in bus count");
  if (ep.horizon < 1) throw InputError("run_episode: horizon must be >= 1");
  if (ep.subsample_latest < 0 || ep.subsample_random < 0) throw InputError("run_episode: subsample counts must be >= 0");
  if (series.steps() < ep.horizon + 1)
    throw InputError("run_episode: series has " + std::to_string(series.steps()) + " rows, need horizon + 1 = " +
                     std::to_string(ep.horizon + 1));
  if (!ep.observed.empty() && static_cast<int>(ep.observed.size()) != n)
    throw InputError("run_episode: observation mask has the wrong length");
  validate(cfg, n);
  if (cfg.vpar_box.lower.size() != n || cfg.vpar_box.upper.size() != n)
    throw InputError("run_episode: vpar box has the wrong dimension");

  const Plant plant(plant_phases);
  const int T = ep.horizon;

  // Exogenous voltage under each phase; the realized noise level uses phase 0.
  std::vector<Eigen::MatrixXd> vpar;
  for (const SensitivityModel& m : plant.models) vpar.push_back(vpar_trace(m, series, ep.v0));

  EpisodeResult res;
  for (int t = 0; t < T; ++t)
    res.eta_star = std::max(res.eta_star, (vpar[0].row(t + 1) - vpar[0].row(t)).lpNorm<Eigen::Infinity>());

  const PriorSpec prior =
      make_mode_prior(plant_phases.front().net, plant.models.front(), ep.prior, ep.prior_k, ep.alpha, ep.enforce_psd);
  ConsistentSetSpec base;
  base.prior = prior;
  base.eta_max = cfg.eta_bar;
  base.vpar_box = cfg.vpar_box;
  base.observed = ep.observed;
  if (ep.known_eta) base.eta_fixed = std::min(res.eta_star, cfg.eta_bar);

  ProjectionOptions popts;
  ModelEstimate est = random_initial_model(plant_phases.front().net, prior, ep.seed, cfg.delta);
  est.eta = 0.0;

  res.v.resize(T, n);
  res.u.resize(T, n);
  res.q_c.resize(T, n);

  // Initial state: the injections sit at zero, clipped into their box.
  Eigen::VectorXd q_c = Eigen::VectorXd::Zero(n).cwiseMax(cfg.q_min).cwiseMin(cfg.q_max);
  Eigen::VectorXd v;
  {
    const int ph = plant.phase_at(0);
    if (ep.dynamics == Dynamics::Linear) {
      v = plant.models[ph].X * q_c + vpar[ph].row(0).transpose();
    } else {
      const InjectionProfile inj{series.p.row(0).transpose(), series.q_e.row(0).transpose(), q_c};
      const PowerFlowSolution sol = solve_distflow(plant_phases[ph].net, inj, ep.v0);
      res.max_powerflow_residual = sol.residual;
      v = sol.v;
    }
  }

  res.v_initial = v;
  std::vector<Observation> trajectory;
  for (int t = 0; t < T; ++t) {
    // Step 2: chase the consistent set.
    ConsistentSetSpec set = base;
    for (int idx : subsample(static_cast<int>(trajectory.size()), ep.subsample_latest, ep.subsample_random,
                             step_seed(ep.seed, t)))
      set.observations.push_back(trajectory[idx]);
    ProjectionResult pr = project(set, est, cfg.delta, popts);
    res.projection_solves += pr.solves;
    if (pr.status == ProjectionStatus::Infeasible) {
      res.infeasible_steps.push_back(t);
      if (ep.reset_on_infeasible) {
        res.reset_steps.push_back(t);
        trajectory.clear();
        set.observations.clear();
        pr = project(set, est, cfg.delta, popts);
        res.projection_solves += pr.solves;
        if (pr.status != ProjectionStatus::Optimal) throw at_step("projection onto the prior failed after reset", t);
      } else {
        pr.status = ProjectionStatus::Optimal;
        pr.estimate = est;
      }
    }
    if (pr.status != ProjectionStatus::Optimal) throw at_step("projection failed (" + to_string(pr.solver_status) + ")", t);
    const double moved = tri_delta_norm(pr.estimate.X - est.X, pr.estimate.eta - est.eta, cfg.delta);
    est = pr.estimate;

    if (ep.track_full_membership && !trajectory.empty() && trajectory.size() > set.observations.size()) {
      ConsistentSetSpec full = base;
      full.observations = trajectory;
      ++res.full_set_checks;
      if (!membership(est, full)) ++res.full_set_violations;
    }

    // Step 3: robust oracle.
    OracleSolution sol;
    try {
      sol = solve_oracle(cfg, est, v, q_c);
    } catch (const SolverError& e) {
      throw at_step(e.what(), t);
    }

    // Step 4: apply and observe.
    const Eigen::VectorXd q_next = q_c + sol.u;
    const int ph = plant.phase_at(t + 1);
    Eigen::VectorXd v_next;
    if (ep.dynamics == Dynamics::Linear) {
      v_next = plant.models[ph].X * q_next + vpar[ph].row(t + 1).transpose();
    } else {
      const InjectionProfile inj{series.p.row(t + 1).transpose(), series.q_e.row(t + 1).transpose(), q_next};
      PowerFlowSolution pf;
      try {
        pf = solve_distflow(plant_phases[ph].net, inj, ep.v0);
      } catch (const SolverError& e) {
        throw at_step(e.what(), t);
      }
      res.max_powerflow_residual = std::max(res.max_powerflow_residual, pf.residual);
      v_next = pf.v;
    }

    // Step 5: extend the trajectory.
    trajectory.push_back({v, v_next, sol.u, q_next});

    res.v.row(t) = v_next.transpose();
    res.u.row(t) = sol.u.transpose();
    res.q_c.row(t) = q_next.transpose();
    res.xi.push_back(sol.xi);
    if (sol.xi > 0.0) ++res.slack_steps;
    res.model_error.push_back(tri_norm(est.X - plant.models[plant.phase_at(t)].X));
    res.eta_hat.push_back(est.eta);
    res.movement.push_back(moved);
    res.movement_sum += moved;

    v = v_next;
    q_c = q_next;
  }

  const ViolationMetrics all = metrics(res.v, cfg.v_min, cfg.v_max);
  res.mistakes = all.mistakes;
  res.avg_violation = all.avg_violation;
  res.max_violation = all.max_violation;
  res.observed_mistakes = metrics(res.v, cfg.v_min, cfg.v_max, ep.observed).mistakes;
  for (Eigen::Index t = 0; t < res.v.rows(); ++t) {
    const bool bad = ((res.v.row(t).transpose() - cfg.v_max).array() > 0.0).any() ||
                     ((cfg.v_min - res.v.row(t).transpose()).array() > 0.0).any();
    res.mistake.push_back(bad);
  }
  return res;
}

}  // namespace voltctrl
