#pragma once

#include <cstdint>

#include <Eigen/Dense>

#include "voltctrl/conic.hpp"
#include "voltctrl/geometry.hpp"

namespace voltctrl {

// How the slack xi enters the program.
//   Single:   one solve with xi >= 0 penalized by beta * xi^2 (re-solved
//             with xi = 0 when the slack comes out at rounding level).
//   TwoSolve: solve with xi = 0 first, fall back to Single when infeasible.
//   None:     xi = 0; the solution may come back Infeasible.
enum class SlackMode { Single, TwoSolve, None };

// Squared voltages in kV^2, injections in MVar.
struct ControllerConfig {
  Eigen::VectorXd v_nom, v_min, v_max;
  Eigen::VectorXd q_min, q_max;
  Eigen::MatrixXd P_v, P_u;
  double beta = 100.0;
  double delta = 20.0;
  double epsilon = 0.1;
  double eta_bar = 10.0;
  VparBox vpar_box;
  SlackMode slack = SlackMode::Single;
  // Noise bound known exactly: the estimate's eta is taken as eta* and the
  // buffer becomes eta* + rho_known * ||u||.
  bool known_eta = false;

  int size() const { return static_cast<int>(v_nom.size()); }
};

// Throws InputError unless the configuration is well formed for n buses.
void validate(const ControllerConfig& cfg, int n);

double rho(double delta, double epsilon, double q_range_norm);
double rho_known(double epsilon, double q_range_norm);

// ||q_max - q_min||_2.
double q_range_norm(const ControllerConfig& cfg);

// The margin the oracle uses under cfg (rho or rho_known).
double robustness_margin(const ControllerConfig& cfg);

struct OracleSolution {
  Eigen::VectorXd u;
  double xi = 0.0;
  Eigen::VectorXd v_pred;
  double k = 0.0;
  double objective = 0.0;
  SolveStatus status = SolveStatus::NumericalFailure;
  bool slack_used = false;  // the returned solution came from a program with xi free
};

// Robust control oracle. Throws SolverError when the solver fails; an
// Infeasible status is only possible with SlackMode::None.
OracleSolution solve_oracle(const ControllerConfig& cfg, const ModelEstimate& est,
                            const Eigen::VectorXd& v_now, const Eigen::VectorXd& q_c_prev,
                            const SolveOptions& opts = {});

struct RobustnessReport {
  int samples = 0;
  int violations = 0;        // samples with at least one bus outside the limits
  double worst_excess = 0.0; // largest excursion beyond [v_min, v_max]
};

// Samples models within radius rho_scale * margin of est (tri_delta_norm, or
// tri_norm with eta fixed in known-eta mode) and checks every noise vertex
// w in {-eta, +eta}^n against the voltage limits with slack 1e-6.
RobustnessReport verify_robust_ball(const ControllerConfig& cfg, const ModelEstimate& est,
                                    const Eigen::VectorXd& v_now, const OracleSolution& sol,
                                    int samples, std::uint64_t seed, double rho_scale = 1.0);

}  // namespace voltctrl
