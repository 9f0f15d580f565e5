#pragma once

#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace voltctrl {

// Sparse linear form sum_k coef[k] * z[index[k]].
struct LinearRow {
  std::vector<int> index;
  std::vector<double> coef;
  double rhs = 0.0;

  LinearRow& add(int i, double c) {
    index.push_back(i);
    coef.push_back(c);
    return *this;
  }
};

// || A z + b ||_2 <= c . z + d
struct SocBlock {
  Eigen::MatrixXd A;
  Eigen::VectorXd b;
  Eigen::VectorXd c;
  double d = 0.0;
};

// minimize 0.5 z'Hz + g'z subject to bounds, linear rows and second-order cones.
class ConicProgram {
 public:
  explicit ConicProgram(int num_vars);

  int num_vars() const { return n_; }

  void set_bounds(int var, double lo, double hi);
  void set_objective(Eigen::MatrixXd quad, Eigen::VectorXd lin);
  void add_equality(LinearRow row);    // row . z == rhs
  void add_inequality(LinearRow row);  // row . z <= rhs
  void add_soc(SocBlock block);

  const Eigen::MatrixXd& quad() const { return quad_; }
  const Eigen::VectorXd& lin() const { return lin_; }
  const std::vector<double>& lower() const { return lo_; }
  const std::vector<double>& upper() const { return hi_; }
  const std::vector<LinearRow>& equalities() const { return eq_; }
  const std::vector<LinearRow>& inequalities() const { return ineq_; }
  const std::vector<SocBlock>& cones() const { return soc_; }

  double objective(const Eigen::VectorXd& z) const;

  // Largest absolute violation of any constraint at z.
  double max_violation(const Eigen::VectorXd& z) const;

 private:
  int n_;
  Eigen::MatrixXd quad_;
  Eigen::VectorXd lin_;
  std::vector<double> lo_, hi_;
  std::vector<LinearRow> eq_, ineq_;
  std::vector<SocBlock> soc_;
};

enum class SolveStatus { Optimal, Infeasible, MaxIter, NumericalFailure };

std::string to_string(SolveStatus status);

struct SolveReport {
  SolveStatus status = SolveStatus::NumericalFailure;
  Eigen::VectorXd z;
  double objective = std::numeric_limits<double>::quiet_NaN();
  double primal_residual = std::numeric_limits<double>::infinity();
  // Smallest uniform constraint relaxation that admits a point; filled in
  // whenever the feasibility phase ran.
  double min_violation = std::numeric_limits<double>::quiet_NaN();
  int iterations = 0;
};

struct SolveOptions {
  double feas_tol = 1e-9;
  double opt_tol = 1e-10;
  int max_iter = 50000;
  // A feasibility-phase optimum at or above this value certifies infeasibility.
  double infeasible_threshold = 1e-6;
};

// Backend interface; implementations must be stateless across calls.
class ConicBackend {
 public:
  virtual ~ConicBackend() = default;
  virtual SolveReport solve(const ConicProgram& prog, const SolveOptions& opts) const = 0;
  virtual std::string name() const = 0;
};

// Primal-dual interior-point method (Mehrotra predictor-corrector with
// Nesterov-Todd scaling) followed, when it fails to converge, by an elastic
// feasibility phase that either certifies infeasibility or reports failure.
class InteriorPointBackend final : public ConicBackend {
 public:
  SolveReport solve(const ConicProgram& prog, const SolveOptions& opts) const override;
  std::string name() const override { return "interior-point"; }
};

// Solves with the default backend.
SolveReport solve(const ConicProgram& prog, const SolveOptions& opts = {});

}  // namespace voltctrl
