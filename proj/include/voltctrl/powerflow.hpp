#pragma once

#include <Eigen/Dense>

#include "voltctrl/grid.hpp"

namespace voltctrl {

// Per-bus injections (index i-1 for bus i). Positive values inject into the grid.
struct InjectionProfile {
  Eigen::VectorXd p;    // net active injection
  Eigen::VectorXd q_e;  // exogenous reactive injection
  Eigen::VectorXd q_c;  // controllable reactive injection
};

// v = R p + X (q_e + q_c) + v0 * 1
Eigen::VectorXd linear_voltage(const SensitivityModel& model, const InjectionProfile& inj, double v0);

// Voltage from the uncontrollable injections alone: R p + X q_e + v0 * 1.
Eigen::VectorXd vpar_linear(const SensitivityModel& model, const Eigen::VectorXd& p,
                            const Eigen::VectorXd& q_e, double v0);

// One step of the linear dynamics: v + X u + w.
Eigen::VectorXd linear_step(const Eigen::VectorXd& v, const Eigen::MatrixXd& x,
                            const Eigen::VectorXd& u, const Eigen::VectorXd& w);

// Branch-flow state. Line quantities are indexed by child bus (entry i-1 for
// the line feeding bus i).
struct PowerFlowSolution {
  Eigen::VectorXd v;  // squared voltage magnitude per bus
  Eigen::VectorXd P;  // active flow per line
  Eigen::VectorXd Q;  // reactive flow per line
  Eigen::VectorXd l;  // squared current magnitude per line
  double residual = 0.0;
  int iterations = 0;
};

struct PowerFlowOptions {
  double tol = 1e-10;
  int max_iter = 200;
};

// Backward/forward sweep for the full branch-flow equations on a radial
// network. The current update divides by the sending-end voltage. Throws
// SolverError on non-convergence (message carries the residual) or when a
// voltage becomes nonpositive.
PowerFlowSolution solve_distflow(const RadialNetwork& net, const InjectionProfile& inj, double v0,
                                 const PowerFlowOptions& opts = {});

// Largest absolute violation of the four branch-flow equations at the given
// state, computed directly from the equations.
double distflow_residual(const RadialNetwork& net, const InjectionProfile& inj, double v0,
                         const PowerFlowSolution& sol);

}  // namespace voltctrl
