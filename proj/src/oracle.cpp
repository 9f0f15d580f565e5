#include "voltctrl/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "voltctrl/error.hpp"
#include "voltctrl/norms.hpp"

namespace voltctrl {

namespace {

bool is_psd(const Eigen::MatrixXd& m) {
  if (asymmetry(m) > 1e-9) return false;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m, Eigen::EigenvaluesOnly);
  return eig.eigenvalues().minCoeff() >= -1e-9 * std::max(1.0, m.cwiseAbs().maxCoeff());
}

void require(bool ok, const std::string& what) {
  if (!ok) throw InputError(what);
}

}  // namespace

void validate(const ControllerConfig& cfg, int n) {
  for (const Eigen::VectorXd* v : {&cfg.v_nom, &cfg.v_min, &cfg.v_max, &cfg.q_min, &cfg.q_max})
    require(v->size() == n, "controller config: vector of the wrong length");
  require(cfg.P_v.rows() == n && cfg.P_v.cols() == n, "controller config: P_v has the wrong shape");
  require(cfg.P_u.rows() == n && cfg.P_u.cols() == n, "controller config: P_u has the wrong shape");
  require((cfg.v_min.array() < cfg.v_max.array()).all(), "controller config: v_min must be below v_max");
  require((cfg.q_min.array() <= cfg.q_max.array()).all(), "controller config: q_min exceeds q_max");
  require(is_psd(cfg.P_v), "controller config: P_v is not PSD");
  require(is_psd(cfg.P_u), "controller config: P_u is not PSD");
  require(cfg.beta > 0 && cfg.delta > 0 && cfg.epsilon > 0 && cfg.eta_bar > 0,
          "controller config: beta, delta, epsilon and eta_bar must be positive");
}

double rho(double delta, double epsilon, double q_range_norm) {
  if (!(delta > 0) || !(epsilon > 0) || !(q_range_norm > 0)) throw InputError("rho: arguments must be positive");
  return delta * epsilon / (1.0 + delta * q_range_norm);
}

double rho_known(double epsilon, double q_range_norm) {
  if (!(epsilon > 0) || !(q_range_norm > 0)) throw InputError("rho_known: arguments must be positive");
  return epsilon / q_range_norm;
}

double q_range_norm(const ControllerConfig& cfg) { return (cfg.q_max - cfg.q_min).norm(); }

double robustness_margin(const ControllerConfig& cfg) {
  const double range = q_range_norm(cfg);
  return cfg.known_eta ? rho_known(cfg.epsilon, range) : rho(cfg.delta, cfg.epsilon, range);
}

namespace {

// Variables: u over buses with a nonempty control range, then s >= ||u||, then
// xi when the slack is on.
constexpr double kSlackZero = 1e-4;  // kV^2

OracleSolution solve_program(const ControllerConfig& cfg, const ModelEstimate& est,
                             const Eigen::VectorXd& v_now, const Eigen::VectorXd& q_c_prev,
                             bool with_slack, const SolveOptions& opts) {
  const int n = cfg.size();
  const double margin = robustness_margin(cfg);
  // Buffer k = base + margin * s.
  const double base = est.eta + (cfg.known_eta ? 0.0 : margin / cfg.delta);

  std::vector<int> free;
  Eigen::VectorXd u_fixed = Eigen::VectorXd::Zero(n);
  for (int i = 0; i < n; ++i) {
    if (cfg.q_min(i) < cfg.q_max(i)) free.push_back(i);
    else u_fixed(i) = cfg.q_min(i) - q_c_prev(i);
  }
  const int nf = static_cast<int>(free.size());
  const int s_var = nf;
  const int xi_var = with_slack ? nf + 1 : -1;
  const int nv = nf + 1 + (with_slack ? 1 : 0);

  // u = E w + u_fixed, with E selecting the free buses.
  Eigen::MatrixXd E = Eigen::MatrixXd::Zero(n, nf);
  for (int a = 0; a < nf; ++a) E(free[a], a) = 1.0;
  const Eigen::MatrixXd XE = est.X * E;
  const Eigen::VectorXd v_base = v_now + est.X * u_fixed;  // predicted voltage with w = 0

  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(nv, nv);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(nv);
  H.topLeftCorner(nf, nf) = 2.0 * (XE.transpose() * cfg.P_v * XE + E.transpose() * cfg.P_u * E);
  g.head(nf) = 2.0 * (XE.transpose() * cfg.P_v * (v_base - cfg.v_nom) + E.transpose() * cfg.P_u * u_fixed);
  if (with_slack) H(xi_var, xi_var) = 2.0 * cfg.beta;

  ConicProgram prog(nv);
  prog.set_objective(H, g);
  for (int a = 0; a < nf; ++a) {
    const int i = free[a];
    prog.set_bounds(a, cfg.q_min(i) - q_c_prev(i), cfg.q_max(i) - q_c_prev(i));
  }
  prog.set_bounds(s_var, 0.0, std::numeric_limits<double>::infinity());
  if (with_slack) prog.set_bounds(xi_var, 0.0, std::numeric_limits<double>::infinity());

  for (int i = 0; i < n; ++i) {
    // v_min_i + k - xi <= v_base_i + (XE w)_i  and  v_base_i + (XE w)_i <= v_max_i - k + xi
    for (double sign : {-1.0, 1.0}) {
      LinearRow row;
      for (int a = 0; a < nf; ++a)
        if (XE(i, a) != 0.0) row.add(a, sign * XE(i, a));
      row.add(s_var, margin);
      if (with_slack) row.add(xi_var, -1.0);
      row.rhs = sign < 0 ? v_base(i) - cfg.v_min(i) - base : cfg.v_max(i) - v_base(i) - base;
      prog.add_inequality(std::move(row));
    }
  }
  SocBlock cone;
  cone.A = Eigen::MatrixXd::Zero(n, nv);
  cone.A.leftCols(nf) = E;
  cone.b = u_fixed;
  cone.c = Eigen::VectorXd::Zero(nv);
  cone.c(s_var) = 1.0;
  cone.d = 0.0;
  prog.add_soc(std::move(cone));

  const SolveReport r = solve(prog, opts);
  OracleSolution sol;
  sol.status = r.status;
  sol.slack_used = with_slack;
  if (r.status != SolveStatus::Optimal) return sol;
  sol.u = E * r.z.head(nf) + u_fixed;
  // Clip rounding so that the applied injection never leaves its box.
  for (int i = 0; i < n; ++i)
    sol.u(i) = std::clamp(sol.u(i), cfg.q_min(i) - q_c_prev(i), cfg.q_max(i) - q_c_prev(i));
  sol.xi = with_slack ? std::max(r.z(xi_var), 0.0) : 0.0;
  sol.v_pred = v_now + est.X * sol.u;
  sol.k = base + margin * sol.u.norm();
  const Eigen::VectorXd dv = sol.v_pred - cfg.v_nom;
  sol.objective = dv.dot(cfg.P_v * dv) + sol.u.dot(cfg.P_u * sol.u) + cfg.beta * sol.xi * sol.xi;
  return sol;
}

}  // namespace

OracleSolution solve_oracle(const ControllerConfig& cfg, const ModelEstimate& est,
                            const Eigen::VectorXd& v_now, const Eigen::VectorXd& q_c_prev,
                            const SolveOptions& opts) {
  const int n = cfg.size();
  validate(cfg, n);
  if (est.X.rows() != n || est.X.cols() != n) throw InputError("oracle: estimate has the wrong dimension");
  if (asymmetry(est.X) > 1e-9) throw InputError("oracle: estimate is not symmetric");
  if (v_now.size() != n || q_c_prev.size() != n) throw InputError("oracle: state has the wrong dimension");

  OracleSolution sol;
  switch (cfg.slack) {
    case SlackMode::Single:
      sol = solve_program(cfg, est, v_now, q_c_prev, true, opts);
      // The interior-point slack never reaches exactly zero; when it is at
      // rounding level, confirm with xi pinned to 0.
      if (sol.status == SolveStatus::Optimal && sol.xi <= kSlackZero) {
        OracleSolution pinned = solve_program(cfg, est, v_now, q_c_prev, false, opts);
        if (pinned.status == SolveStatus::Optimal) sol = std::move(pinned);
      }
      break;
    case SlackMode::None:
      sol = solve_program(cfg, est, v_now, q_c_prev, false, opts);
      if (sol.status == SolveStatus::Infeasible) return sol;
      break;
    case SlackMode::TwoSolve:
      sol = solve_program(cfg, est, v_now, q_c_prev, false, opts);
      if (sol.status != SolveStatus::Optimal) sol = solve_program(cfg, est, v_now, q_c_prev, true, opts);
      break;
  }
  if (sol.status != SolveStatus::Optimal) {
    std::ostringstream msg;
    msg << "oracle solve failed: " << to_string(sol.status);
    throw SolverError(msg.str());
  }
  return sol;
}

RobustnessReport verify_robust_ball(const ControllerConfig& cfg, const ModelEstimate& est,
                                    const Eigen::VectorXd& v_now, const OracleSolution& sol,
                                    int samples, std::uint64_t seed, double rho_scale) {
  const int n = cfg.size();
  const int t = upper_triangle_size(n);
  const double radius = rho_scale * robustness_margin(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unit;

  RobustnessReport rep;
  for (int k = 0; k < samples; ++k) {
    // Direction uniform on the sphere; every other sample sits on the boundary.
    const int dim = cfg.known_eta ? t : t + 1;
    Eigen::VectorXd d = Eigen::VectorXd::NullaryExpr(dim, [&] { return normal(rng); });
    d.normalize();
    const double r = radius * (k % 2 == 0 ? 1.0 : std::pow(unit(rng), 1.0 / dim));
    d *= r;
    Eigen::MatrixXd X = est.X;
    for (int i = 0, e = 0; i < n; ++i)
      for (int j = i; j < n; ++j, ++e) {
        X(i, j) += d(e);
        X(j, i) = X(i, j);
      }
    double eta = est.eta;
    if (!cfg.known_eta) eta = std::abs(est.eta + d(t) / cfg.delta);  // reflect into eta >= 0

    const Eigen::VectorXd v = v_now + X * sol.u;
    double excess = 0.0;
    for (int i = 0; i < n; ++i)
      excess = std::max({excess, v(i) + eta - cfg.v_max(i), cfg.v_min(i) - (v(i) - eta)});
    ++rep.samples;
    if (excess > 1e-6) ++rep.violations;
    rep.worst_excess = std::max(rep.worst_excess, excess);
  }
  return rep;
}

}  // namespace voltctrl
