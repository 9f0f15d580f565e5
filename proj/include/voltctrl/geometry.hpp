#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "voltctrl/conic.hpp"
#include "voltctrl/grid.hpp"

namespace voltctrl {

// The chased pair (X_hat, eta_hat).
struct ModelEstimate {
  Eigen::MatrixXd X;
  double eta = 0.0;
};

// One transition of the closed loop: v_after = v_before + X u + w, with q_c
// the absolute controllable injection after the step.
struct Observation {
  Eigen::VectorXd v_before;
  Eigen::VectorXd v_after;
  Eigen::VectorXd u;
  Eigen::VectorXd q_c;
};

struct VparBox {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
};

// All (X, eta) with X in the prior, 0 <= eta <= eta_max, and for every
// observation and observed bus i
//   |v_after_i - v_before_i - (X u)_i| <= eta,
//   lower_i <= v_after_i - (X q_c)_i <= upper_i.
struct ConsistentSetSpec {
  PriorSpec prior;
  double eta_max = 10.0;
  std::vector<Observation> observations;
  VparBox vpar_box;
  std::optional<double> eta_fixed;  // known noise bound: eta pinned to this value
  std::vector<bool> observed;       // per bus; empty means every bus is observed

  int size() const { return prior.size(); }
  bool is_observed(int i) const { return observed.empty() || observed[i]; }
};

ConsistentSetSpec build_consistent_set(PriorSpec prior, double eta_max, VparBox vpar_box,
                                       std::vector<Observation> observations);

// Coordinates: packed upper triangle (row-major), then delta * eta. The map is
// an isometry from tri_delta_norm to the Euclidean norm.
int vector_size(int n);
Eigen::VectorXd vectorize(const ModelEstimate& est, double delta);
ModelEstimate devectorize(const Eigen::VectorXd& z, int n, double delta);

// Largest violation of any constraint of the set at est (0 when inside).
double set_violation(const ModelEstimate& est, const ConsistentSetSpec& set);
bool membership(const ModelEstimate& est, const ConsistentSetSpec& set, double tol = 1e-6);

enum class ProjectionStatus { Optimal, Infeasible, Failed };

struct ProjectionResult {
  ProjectionStatus status = ProjectionStatus::Failed;
  ModelEstimate estimate;
  double distance = 0.0;  // tri_delta_norm(estimate - from)
  int solves = 0;         // conic solves used (0 on the membership fast path)
  SolveStatus solver_status = SolveStatus::Optimal;
};

struct ProjectionOptions {
  double member_tol = 1e-6;
  // PSD enforcement: rounds of eigenvector cuts, stopping once the smallest
  // eigenvalue is above -psd_tol (relative to the prior's scale).
  int psd_max_rounds = 200;
  double psd_tol = 1e-9;
  SolveOptions solver;
};

// Closest point of the set to `from` in tri_delta_norm. A point already in the
// set is returned unchanged. The PSD constraint is imposed through cuts
// v'Xv >= 0 on the eigenvectors of negative eigenvalues, re-solving each time.
ProjectionResult project(const ConsistentSetSpec& set, const ModelEstimate& from, double delta,
                         const ProjectionOptions& opts = {});

// Initial guess: every line reactance scaled by an independent Uniform[0, 2]
// draw, bus labels permuted at random, then projected into the prior (eta = 0).
// Throws InputError if the prior is empty.
ModelEstimate random_initial_model(const RadialNetwork& net, const PriorSpec& prior,
                                   std::uint64_t seed, double delta = 20.0);

}  // namespace voltctrl
