#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "voltctrl/geometry.hpp"
#include "voltctrl/grid.hpp"
#include "voltctrl/oracle.hpp"
#include "voltctrl/powerflow.hpp"

namespace voltctrl {

enum class Dynamics { Linear, DistFlow };

// Exogenous injections, one row per time step (MW / MVar, injection positive).
struct Series {
  Eigen::MatrixXd p;
  Eigen::MatrixXd q_e;

  int steps() const { return static_cast<int>(p.rows()); }
};

// The plant from step `start` onwards runs on `net`.
struct PlantPhase {
  int start = 0;
  RadialNetwork net;
};

struct EpisodeConfig {
  Dynamics dynamics = Dynamics::Linear;
  int horizon = 1;
  int subsample_latest = 20;
  int subsample_random = 80;
  std::uint64_t seed = 0;
  bool reset_on_infeasible = true;
  PriorMode prior = PriorMode::Unknown;
  int prior_k = 0;
  double alpha = 1.0;
  bool enforce_psd = true;
  // Pins eta to the realized noise level (known-eta variant of the estimator;
  // pair with ControllerConfig::known_eta).
  bool known_eta = false;
  // Buses whose voltages are observed; empty means all.
  std::vector<bool> observed;
  // Check every selected estimate against the consistent set of the whole
  // trajectory (quadratic in the horizon).
  bool track_full_membership = true;
  double v0 = 144.0;
};

struct EpisodeResult {
  // Row t holds the state after step t is applied.
  Eigen::MatrixXd v, u, q_c;
  Eigen::VectorXd v_initial;  // voltage before step 0
  std::vector<double> xi;
  std::vector<bool> mistake;
  std::vector<double> model_error;  // tri_norm(X_hat - X*) of the estimate used at step t
  std::vector<double> eta_hat;
  std::vector<double> movement;     // tri_delta_norm between consecutive estimates
  std::vector<int> reset_steps;
  std::vector<int> infeasible_steps;

  int mistakes = 0;
  int observed_mistakes = 0;  // counting observed buses only
  double avg_violation = 0.0;
  double max_violation = 0.0;
  double movement_sum = 0.0;
  int slack_steps = 0;               // steps with xi > 0
  int full_set_checks = 0;
  int full_set_violations = 0;       // estimates outside the full-trajectory set
  double max_powerflow_residual = 0.0;
  double eta_star = 0.0;             // realized max_t ||w(t)||_inf under the first phase
  int projection_solves = 0;
};

// Observation indices used at one step: the `latest` most recent plus
// `random_count` uniform draws without replacement from the rest; everything
// when the trajectory is short. Sorted, deterministic in seed.
std::vector<int> subsample(int trajectory_size, int latest, int random_count, std::uint64_t seed);

struct ViolationMetrics {
  int mistakes = 0;
  double avg_violation = 0.0;
  double max_violation = 0.0;
};

// Rows of v are time steps. Violations are max(v_i - v_max_i, v_min_i - v_i)
// over violating (t, i) pairs; mask (if nonempty) selects the buses counted.
ViolationMetrics metrics(const Eigen::MatrixXd& v, const Eigen::VectorXd& v_min, const Eigen::VectorXd& v_max,
                         const std::vector<bool>& mask = {});

// pi (m - 1) m^(m/2), +inf on overflow.
double gamma_proj(int m);
// 1 + n(n+1)/2, or n(n+1)/2 when eta is known.
int parameter_dimension(int n, bool known_eta);
// 2 gamma_proj(m) diam / rho + 1, +inf on overflow.
double mistake_bound(double diam, double rho, int m);
// Diameter of the prior ball times [0, eta_bar] in tri_delta_norm (ball only
// when eta is known).
double parameter_diameter(const PriorSpec& prior, double eta_bar, double delta, bool known_eta);

// v_par(t) = R p(t) + X q_e(t) + v0 for every row of the series.
Eigen::MatrixXd vpar_trace(const SensitivityModel& model, const Series& series, double v0);
// Exact per-bus min / max of v_par over the series.
VparBox vpar_box_linear(const SensitivityModel& model, const Series& series, double v0);
// No-control DistFlow voltages over the series, padded by `pad` on both sides.
VparBox vpar_box_distflow(const RadialNetwork& net, const Series& series, double v0, double pad = 0.5);

// Algorithm 1. The series needs horizon + 1 rows: row 0 fixes the initial
// state, row t + 1 drives the transition of step t. Throws SolverError
// (carrying the step) on solver or power-flow failure, InputError on bad input.
EpisodeResult run_episode(const std::vector<PlantPhase>& plant, const Series& series, const ControllerConfig& cfg,
                          const EpisodeConfig& ep);

}  // namespace voltctrl
