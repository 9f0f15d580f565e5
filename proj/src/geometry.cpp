#include "voltctrl/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "voltctrl/error.hpp"
#include "voltctrl/norms.hpp"

namespace voltctrl {

ConsistentSetSpec build_consistent_set(PriorSpec prior, double eta_max, VparBox vpar_box,
                                       std::vector<Observation> observations) {
  const int n = prior.size();
  if (!(eta_max >= 0.0)) throw InputError("eta_max must be >= 0");
  if (vpar_box.lower.size() != n || vpar_box.upper.size() != n)
    throw InputError("vpar box has the wrong dimension");
  if ((vpar_box.lower.array() > vpar_box.upper.array()).any())
    throw InputError("vpar box lower bound exceeds upper bound");
  for (const Observation& o : observations)
    if (o.v_before.size() != n || o.v_after.size() != n || o.u.size() != n || o.q_c.size() != n)
      throw InputError("observation has the wrong dimension");
  ConsistentSetSpec set;
  set.prior = std::move(prior);
  set.eta_max = eta_max;
  set.vpar_box = std::move(vpar_box);
  set.observations = std::move(observations);
  return set;
}

int vector_size(int n) { return 1 + upper_triangle_size(n); }

Eigen::VectorXd vectorize(const ModelEstimate& est, double delta) {
  const int n = static_cast<int>(est.X.rows());
  Eigen::VectorXd z(vector_size(n));
  int k = 0;
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j) z(k++) = est.X(i, j);
  z(k) = delta * est.eta;
  return z;
}

ModelEstimate devectorize(const Eigen::VectorXd& z, int n, double delta) {
  if (z.size() != vector_size(n)) throw InputError("devectorize: length mismatch");
  ModelEstimate est;
  est.X.resize(n, n);
  int k = 0;
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j) est.X(i, j) = est.X(j, i) = z(k++);
  est.eta = z(k) / delta;
  return est;
}

double set_violation(const ModelEstimate& est, const ConsistentSetSpec& set) {
  const int n = set.size();
  if (est.X.rows() != n || est.X.cols() != n) throw InputError("estimate has the wrong dimension");
  double worst = prior_violation(est.X, set.prior);
  worst = std::max({worst, -est.eta, est.eta - set.eta_max});
  if (set.eta_fixed) worst = std::max(worst, std::abs(est.eta - *set.eta_fixed));
  for (const Observation& o : set.observations) {
    const Eigen::VectorXd resid = o.v_after - o.v_before - est.X * o.u;
    const Eigen::VectorXd vpar = o.v_after - est.X * o.q_c;
    for (int i = 0; i < n; ++i) {
      if (!set.is_observed(i)) continue;
      worst = std::max({worst, std::abs(resid(i)) - est.eta, set.vpar_box.lower(i) - vpar(i),
                        vpar(i) - set.vpar_box.upper(i)});
    }
  }
  return worst;
}

bool membership(const ModelEstimate& est, const ConsistentSetSpec& set, double tol) {
  return set_violation(est, set) <= tol;
}

namespace {

// Entries of the upper triangle are grouped into classes that the pins force
// to be equal; a class is either free (one solver variable) or fixed.
class EntryClasses {
 public:
  explicit EntryClasses(int n) : n_(n), parent_(upper_triangle_size(n)) {
    std::iota(parent_.begin(), parent_.end(), 0);
    fixed_.assign(parent_.size(), std::numeric_limits<double>::quiet_NaN());
  }

  int find(int a) {
    while (parent_[a] != a) a = parent_[a] = parent_[parent_[a]];
    return a;
  }

  // Returns false on conflicting fixed values.
  bool unite(int a, int b, double tol) {
    a = find(a);
    b = find(b);
    if (a == b) return true;
    if (!std::isnan(fixed_[a]) && !std::isnan(fixed_[b]) && std::abs(fixed_[a] - fixed_[b]) > tol) return false;
    if (std::isnan(fixed_[a])) fixed_[a] = fixed_[b];
    parent_[b] = a;
    return true;
  }

  bool fix(int a, double value, double tol) {
    a = find(a);
    if (!std::isnan(fixed_[a]) && std::abs(fixed_[a] - value) > tol) return false;
    fixed_[a] = value;
    return true;
  }

  // Numbers the free classes; returns their count.
  int finalize() {
    var_.assign(parent_.size(), -1);
    int count = 0;
    for (std::size_t e = 0; e < parent_.size(); ++e) {
      const int root = find(static_cast<int>(e));
      if (!std::isnan(fixed_[root])) continue;
      if (var_[root] < 0) var_[root] = count++;
      var_[e] = var_[root];
    }
    return count;
  }

  int var(int entry) const { return var_[entry]; }  // -1 when fixed
  double value(int entry) { return fixed_[find(entry)]; }
  int n() const { return n_; }

 private:
  int n_;
  std::vector<int> parent_;
  std::vector<double> fixed_;
  std::vector<int> var_;
};

// Linear expression over upper-triangle entries and eta, reduced to solver
// variables plus a constant.
struct Expr {
  std::vector<double> coef;  // per solver variable
  double constant = 0.0;
};

struct ProjectionProgram {
  bool infeasible = false;  // detected while assembling
  double min_violation = 0.0;
  int num_free = 0;
  int eta_var = -1;  // -1 when eta is fixed
  double eta_value = 0.0;
  EntryClasses classes{1};
  std::vector<Expr> rows;  // each: expr <= 0
  std::vector<double> lower;  // bounds on solver variables
  std::vector<double> upper;
  bool ball = false;
  double radius = 0.0;
};

ProjectionProgram assemble(const ConsistentSetSpec& set) {
  const int n = set.size();
  const PriorSpec& prior = set.prior;
  const double pin_tol = 1e-9 * std::max(1.0, prior.center.cwiseAbs().maxCoeff());
  ProjectionProgram pp;
  pp.classes = EntryClasses(n);
  EntryClasses& cls = pp.classes;
  auto conflict = [&pp](double gap) {
    pp.infeasible = true;
    pp.min_violation = std::max(pp.min_violation, gap);
  };

  const double radius = prior.radius();
  if (radius == 0.0) {
    for (int i = 0; i < n; ++i)
      for (int j = i; j < n; ++j)
        if (!cls.fix(tri_index(n, i, j), prior.center(i, j), pin_tol))
          conflict(std::abs(cls.value(tri_index(n, i, j)) - prior.center(i, j)));
  }
  for (const TopoPin& p : prior.topo_pins) {
    const int e = tri_index(n, p.i - 1, p.j - 1);
    if (p.k == 0) {
      if (!cls.fix(e, 0.0, pin_tol)) conflict(std::abs(cls.value(e)));
    } else if (!cls.unite(tri_index(n, p.k - 1, p.k - 1), e, pin_tol)) {
      conflict(std::abs(cls.value(e) - cls.value(tri_index(n, p.k - 1, p.k - 1))));
    }
  }
  for (const LinePin& p : prior.line_pins) {
    const int e = tri_index(n, p.i - 1, p.j - 1);
    if (!cls.fix(e, p.value, pin_tol)) conflict(std::abs(cls.value(e) - p.value));
  }
  if (pp.infeasible) return pp;

  pp.num_free = cls.finalize();
  int nv = pp.num_free;
  if (set.eta_fixed || set.eta_max == 0.0) {
    pp.eta_value = set.eta_fixed.value_or(0.0);
    if (pp.eta_value < 0.0 || pp.eta_value > set.eta_max) {
      conflict(std::max(-pp.eta_value, pp.eta_value - set.eta_max));
      return pp;
    }
  } else {
    pp.eta_var = nv++;
  }
  pp.lower.assign(nv, 0.0);  // entries and eta are nonnegative
  pp.upper.assign(nv, std::numeric_limits<double>::infinity());
  if (pp.eta_var >= 0) pp.upper[pp.eta_var] = set.eta_max;

  auto new_expr = [nv] { return Expr{std::vector<double>(nv, 0.0), 0.0}; };
  auto add_entry = [&cls, n](Expr& ex, int i, int j, double c) {
    const int e = tri_index(n, i, j);
    const int v = cls.var(e);
    if (v >= 0) ex.coef[v] += c;
    else ex.constant += c * cls.value(e);
  };
  auto add_eta = [&pp](Expr& ex, double c) {
    if (pp.eta_var >= 0) ex.coef[pp.eta_var] += c;
    else ex.constant += c * pp.eta_value;
  };
  // Zero rows never reach the solver: they are either satisfied or certify
  // emptiness by themselves.
  const double infeas_tol = 1e-6;
  auto push = [&](Expr ex) {
    const double scale = std::max(1.0, std::abs(ex.constant));
    double biggest = 0.0;
    for (double c : ex.coef) biggest = std::max(biggest, std::abs(c));
    if (biggest <= 1e-14 * scale) {
      if (ex.constant > infeas_tol) conflict(ex.constant);
      return;
    }
    pp.rows.push_back(std::move(ex));
  };

  // Fixed entries must respect nonnegativity and dominance like any other.
  for (int i = 0; i < n; ++i) {
    for (int j = i; j < n; ++j) {
      const int e = tri_index(n, i, j);
      if (cls.var(e) < 0 && cls.value(e) < -infeas_tol) conflict(-cls.value(e));
      if (i == j) continue;
      for (int d : {i, j}) {
        Expr ex = new_expr();
        add_entry(ex, i, j, 1.0);
        add_entry(ex, d, d, -1.0);
        push(std::move(ex));
      }
    }
  }

  for (const Observation& o : set.observations) {
    const Eigen::VectorXd dv = o.v_after - o.v_before;
    for (int i = 0; i < n; ++i) {
      if (!set.is_observed(i)) continue;
      // (X w)_i as an expression.
      auto x_times = [&](const Eigen::VectorXd& w, double sign) {
        Expr ex = new_expr();
        for (int j = 0; j < n; ++j)
          if (w(j) != 0.0) add_entry(ex, i, j, sign * w(j));
        return ex;
      };
      // dv_i - (Xu)_i - eta <= 0 and -(dv_i - (Xu)_i) - eta <= 0
      Expr a = x_times(o.u, -1.0);
      a.constant += dv(i);
      add_eta(a, -1.0);
      push(std::move(a));
      Expr b = x_times(o.u, 1.0);
      b.constant -= dv(i);
      add_eta(b, -1.0);
      push(std::move(b));
      // lower_i - (v_after_i - (X q_c)_i) <= 0 and v_after_i - (X q_c)_i - upper_i <= 0
      Expr c = x_times(o.q_c, 1.0);
      c.constant += set.vpar_box.lower(i) - o.v_after(i);
      push(std::move(c));
      Expr d = x_times(o.q_c, -1.0);
      d.constant += o.v_after(i) - set.vpar_box.upper(i);
      push(std::move(d));
    }
  }
  pp.ball = radius > 0.0;
  pp.radius = radius;
  return pp;
}

// Solver variables <-> vectorized coordinates.
Eigen::VectorXd to_coordinates(ProjectionProgram& pp, const Eigen::VectorXd& w, double delta) {
  const int n = pp.classes.n();
  const int t = upper_triangle_size(n);
  Eigen::VectorXd z(t + 1);
  for (int e = 0; e < t; ++e) {
    const int v = pp.classes.var(e);
    z(e) = v >= 0 ? w(v) : pp.classes.value(e);
  }
  z(t) = delta * (pp.eta_var >= 0 ? w(pp.eta_var) : pp.eta_value);
  return z;
}

// Euclidean projection of target (vectorized coordinates) onto the polyhedral
// and ball constraints.
SolveReport conic_projection(ProjectionProgram& pp, const PriorSpec& prior, const Eigen::VectorXd& target,
                             double delta, const SolveOptions& opts) {
  const int n = pp.classes.n();
  const int t = upper_triangle_size(n);
  const int nv = static_cast<int>(pp.lower.size());
  ConicProgram prog(nv);
  // Objective 0.5 * ||z(w) - target||^2 with z affine in w.
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(nv, nv);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(nv);
  for (int e = 0; e < t; ++e) {
    const int v = pp.classes.var(e);
    if (v < 0) continue;
    H(v, v) += 1.0;
    g(v) -= target(e);
  }
  if (pp.eta_var >= 0) {
    H(pp.eta_var, pp.eta_var) = delta * delta;
    g(pp.eta_var) = -delta * target(t);
  }
  prog.set_objective(H, g);
  for (int v = 0; v < nv; ++v) prog.set_bounds(v, pp.lower[v], pp.upper[v]);
  for (const Expr& ex : pp.rows) {
    LinearRow row;
    for (int v = 0; v < nv; ++v)
      if (ex.coef[v] != 0.0) row.add(v, ex.coef[v]);
    row.rhs = -ex.constant;
    prog.add_inequality(std::move(row));
  }
  if (pp.ball) {
    SocBlock ball;
    ball.A = Eigen::MatrixXd::Zero(t, nv);
    ball.b = Eigen::VectorXd::Zero(t);
    for (int i = 0; i < n; ++i) {
      for (int j = i; j < n; ++j) {
        const int e = tri_index(n, i, j);
        const int v = pp.classes.var(e);
        if (v >= 0) ball.A(e, v) = 1.0;
        else ball.b(e) = pp.classes.value(e);
        ball.b(e) -= prior.center(i, j);
      }
    }
    ball.c = Eigen::VectorXd::Zero(nv);
    ball.d = pp.radius;
    prog.add_soc(std::move(ball));
  }
  return solve(prog, opts);
}

// Eigen-decomposition of the matrix part of a vectorized point.
Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> spectrum(const Eigen::VectorXd& z, int n, double delta) {
  return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(devectorize(z, n, delta).X);
}

// -v'Xv <= 0 in solver variables.
Expr psd_cut(ProjectionProgram& pp, const Eigen::VectorXd& v) {
  const int n = pp.classes.n();
  Expr ex{std::vector<double>(pp.lower.size(), 0.0), 0.0};
  for (int i = 0; i < n; ++i) {
    for (int j = i; j < n; ++j) {
      const double c = -(i == j ? 1.0 : 2.0) * v(i) * v(j);
      const int e = tri_index(n, i, j);
      const int var = pp.classes.var(e);
      if (var >= 0) ex.coef[var] += c;
      else ex.constant += c * pp.classes.value(e);
    }
  }
  return ex;
}

}  // namespace

ProjectionResult project(const ConsistentSetSpec& set, const ModelEstimate& from, double delta,
                         const ProjectionOptions& opts) {
  if (!(delta > 0.0)) throw InputError("delta must be positive");
  const int n = set.size();
  if (from.X.rows() != n || from.X.cols() != n) throw InputError("estimate has the wrong dimension");

  ProjectionResult out;
  if (membership(from, set, opts.member_tol)) {
    out.status = ProjectionStatus::Optimal;
    out.estimate = from;
    return out;
  }

  ProjectionProgram pp = assemble(set);
  if (pp.infeasible && pp.min_violation >= opts.solver.infeasible_threshold) {
    out.status = ProjectionStatus::Infeasible;
    out.solver_status = SolveStatus::Infeasible;
    return out;
  }

  const Eigen::VectorXd z0 = vectorize(from, delta);

  auto run = [&](const Eigen::VectorXd& target, Eigen::VectorXd& result) {
    if (pp.lower.empty()) {
      // Every coordinate is pinned; the set is a single point or empty.
      result = to_coordinates(pp, Eigen::VectorXd(0), delta);
      const bool inside = set_violation(devectorize(result, n, delta), set) < opts.solver.infeasible_threshold;
      out.solver_status = inside ? SolveStatus::Optimal : SolveStatus::Infeasible;
      return inside;
    }
    const SolveReport r = conic_projection(pp, set.prior, target, delta, opts.solver);
    ++out.solves;
    out.solver_status = r.status;
    if (r.status != SolveStatus::Optimal) return false;
    result = to_coordinates(pp, r.z, delta);
    return true;
  };

  Eigen::VectorXd y;
  bool ok = run(z0, y);
  if (ok && set.prior.enforce_psd) {
    // Outer approximation of the PSD cone; every cut is valid, so the last
    // solve is the exact projection once its matrix is PSD.
    const double tol = opts.psd_tol * std::max(1.0, set.prior.center.cwiseAbs().maxCoeff());
    bool psd = false;
    for (int round = 0; ok && round <= opts.psd_max_rounds; ++round) {
      const auto eig = spectrum(y, n, delta);
      if (eig.eigenvalues().minCoeff() >= -tol) {
        psd = true;
        break;
      }
      if (pp.lower.empty() || round == opts.psd_max_rounds) break;
      for (int k = 0; k < n; ++k)
        if (eig.eigenvalues()(k) < -tol) pp.rows.push_back(psd_cut(pp, eig.eigenvectors().col(k)));
      ok = run(z0, y);
    }
    if (ok && !psd) {
      // Accept a point that is PSD up to the membership tolerance.
      if (spectrum(y, n, delta).eigenvalues().minCoeff() < -opts.member_tol) {
        if (pp.lower.empty()) out.solver_status = SolveStatus::Infeasible;
        ok = false;
      }
    }
  }

  if (!ok) {
    out.status = out.solver_status == SolveStatus::Infeasible ? ProjectionStatus::Infeasible
                                                              : ProjectionStatus::Failed;
    return out;
  }
  out.estimate = devectorize(y, n, delta);
  out.distance = (y - z0).norm();
  out.status = ProjectionStatus::Optimal;
  return out;
}

ModelEstimate random_initial_model(const RadialNetwork& net, const PriorSpec& prior,
                                   std::uint64_t seed, double delta) {
  const int n = net.size();
  if (prior.size() != n) throw InputError("prior dimension does not match the network");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> scale(0.0, 2.0);

  // Sensitivity of the network with perturbed reactances.
  std::vector<double> cum(n + 1, 0.0);
  std::vector<double> factor(n + 1, 1.0);
  for (int b = 1; b <= n; ++b) factor[b] = scale(rng);
  for (int b : net.topological_order())
    if (b != 0) cum[b] = cum[net.parent(b)] + factor[b] * net.x(b);
  Eigen::MatrixXd x(n, n);
  for (int i = 1; i <= n; ++i)
    for (int j = i; j <= n; ++j) x(i - 1, j - 1) = x(j - 1, i - 1) = 2.0 * cum[lca(net, i, j)];

  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  ModelEstimate guess;
  guess.X.resize(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) guess.X(i, j) = x(perm[i], perm[j]);
  guess.eta = 0.0;

  ConsistentSetSpec set;
  set.prior = prior;
  set.eta_max = 0.0;
  set.vpar_box = {Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n)};
  const ProjectionResult r = project(set, guess, delta);
  if (r.status == ProjectionStatus::Infeasible) throw InputError("prior set is empty");
  if (r.status != ProjectionStatus::Optimal)
    throw SolverError("projection of the initial model failed (" + to_string(r.solver_status) + ")");
  return r.estimate;
}

}  // namespace voltctrl
