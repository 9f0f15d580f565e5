#include "voltctrl/powerflow.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "voltctrl/error.hpp"

namespace voltctrl {

namespace {

void require_size(const Eigen::VectorXd& v, Eigen::Index n, const char* what) {
  if (v.size() != n) {
    std::ostringstream msg;
    msg << what << ": expected length " << n << ", got " << v.size();
    throw InputError(msg.str());
  }
}

void check_injections(const InjectionProfile& inj, Eigen::Index n) {
  require_size(inj.p, n, "p");
  require_size(inj.q_e, n, "q_e");
  require_size(inj.q_c, n, "q_c");
}

}  // namespace

Eigen::VectorXd linear_voltage(const SensitivityModel& model, const InjectionProfile& inj, double v0) {
  check_injections(inj, model.size());
  return vpar_linear(model, inj.p, inj.q_e, v0) + model.X * inj.q_c;
}

Eigen::VectorXd vpar_linear(const SensitivityModel& model, const Eigen::VectorXd& p,
                            const Eigen::VectorXd& q_e, double v0) {
  const Eigen::Index n = model.size();
  require_size(p, n, "p");
  require_size(q_e, n, "q_e");
  return model.R * p + model.X * q_e + Eigen::VectorXd::Constant(n, v0);
}

Eigen::VectorXd linear_step(const Eigen::VectorXd& v, const Eigen::MatrixXd& x,
                            const Eigen::VectorXd& u, const Eigen::VectorXd& w) {
  const Eigen::Index n = v.size();
  if (x.rows() != n || x.cols() != n) throw InputError("linear_step: X has wrong shape");
  require_size(u, n, "u");
  require_size(w, n, "w");
  return v + x * u + w;
}

double distflow_residual(const RadialNetwork& net, const InjectionProfile& inj, double v0,
                         const PowerFlowSolution& sol) {
  const int n = net.size();
  double worst = 0.0;
  for (int j = 1; j <= n; ++j) {
    const int i = net.parent(j);
    const double vi = i == 0 ? v0 : sol.v(i - 1);
    const double P = sol.P(j - 1), Q = sol.Q(j - 1), l = sol.l(j - 1);
    double out_p = 0.0, out_q = 0.0;
    for (int k : net.children(j)) {
      out_p += sol.P(k - 1);
      out_q += sol.Q(k - 1);
    }
    const double r = net.r(j), x = net.x(j);
    worst = std::max(worst, std::abs(-inj.p(j - 1) - (P - r * l - out_p)));
    worst = std::max(worst, std::abs(-(inj.q_e(j - 1) + inj.q_c(j - 1)) - (Q - x * l - out_q)));
    worst = std::max(worst, std::abs(sol.v(j - 1) - (vi - 2.0 * (r * P + x * Q) + (r * r + x * x) * l)));
    worst = std::max(worst, std::abs(l - (P * P + Q * Q) / vi));
  }
  return worst;
}

PowerFlowSolution solve_distflow(const RadialNetwork& net, const InjectionProfile& inj, double v0,
                                 const PowerFlowOptions& opts) {
  const int n = net.size();
  check_injections(inj, n);
  if (!(v0 > 0.0)) throw InputError("substation voltage must be positive");

  PowerFlowSolution sol;
  sol.v = Eigen::VectorXd::Constant(n, v0);
  sol.P = Eigen::VectorXd::Zero(n);
  sol.Q = Eigen::VectorXd::Zero(n);
  sol.l = Eigen::VectorXd::Zero(n);
  const Eigen::VectorXd q = inj.q_e + inj.q_c;
  const std::vector<int>& order = net.topological_order();

  for (int iter = 1; iter <= opts.max_iter; ++iter) {
    // Backward: flows accumulate from the leaves with the current losses.
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const int j = *it;
      if (j == 0) continue;
      double P = -inj.p(j - 1) + net.r(j) * sol.l(j - 1);
      double Q = -q(j - 1) + net.x(j) * sol.l(j - 1);
      for (int k : net.children(j)) {
        P += sol.P(k - 1);
        Q += sol.Q(k - 1);
      }
      sol.P(j - 1) = P;
      sol.Q(j - 1) = Q;
    }
    // Forward: voltages from the root, then losses from the sending end.
    double change = 0.0;
    for (int j : order) {
      if (j == 0) continue;
      const int i = net.parent(j);
      const double vi = i == 0 ? v0 : sol.v(i - 1);
      const double r = net.r(j), x = net.x(j);
      const double P = sol.P(j - 1), Q = sol.Q(j - 1), l = sol.l(j - 1);
      const double vj = vi - 2.0 * (r * P + x * Q) + (r * r + x * x) * l;
      if (!(vj > 0.0) || !std::isfinite(vj)) {
        std::ostringstream msg;
        msg << "voltage collapse at bus " << j << " (iteration " << iter << ")";
        throw SolverError(msg.str());
      }
      sol.v(j - 1) = vj;
    }
    for (int j = 1; j <= n; ++j) {
      const int i = net.parent(j);
      const double vi = i == 0 ? v0 : sol.v(i - 1);
      const double P = sol.P(j - 1), Q = sol.Q(j - 1);
      const double l = (P * P + Q * Q) / vi;
      change = std::max(change, std::abs(l - sol.l(j - 1)));
      sol.l(j - 1) = l;
    }
    sol.iterations = iter;
    sol.residual = distflow_residual(net, inj, v0, sol);
    if (sol.residual <= opts.tol && change <= opts.tol) return sol;
  }
  std::ostringstream msg;
  msg << "power flow did not converge after " << opts.max_iter << " iterations (residual "
      << sol.residual << ")";
  throw SolverError(msg.str());
}

}  // namespace voltctrl
