#include "voltctrl/conic.hpp"

#include <algorithm>
#include <cmath>

#include "voltctrl/error.hpp"

namespace voltctrl {

// ---------------------------------------------------------------------------
// ConicProgram

ConicProgram::ConicProgram(int num_vars)
    : n_(num_vars),
      quad_(Eigen::MatrixXd::Zero(num_vars, num_vars)),
      lin_(Eigen::VectorXd::Zero(num_vars)),
      lo_(num_vars, -std::numeric_limits<double>::infinity()),
      hi_(num_vars, std::numeric_limits<double>::infinity()) {
  if (num_vars <= 0) throw InputError("ConicProgram needs at least one variable");
}

void ConicProgram::set_bounds(int var, double lo, double hi) {
  if (var < 0 || var >= n_) throw InputError("set_bounds: variable out of range");
  if (lo > hi) throw InputError("set_bounds: lower bound exceeds upper bound");
  lo_[var] = lo;
  hi_[var] = hi;
}

void ConicProgram::set_objective(Eigen::MatrixXd quad, Eigen::VectorXd lin) {
  if (quad.rows() != n_ || quad.cols() != n_ || lin.size() != n_)
    throw InputError("set_objective: dimension mismatch");
  quad_ = 0.5 * (quad + quad.transpose());
  lin_ = std::move(lin);
}

namespace {

void check_row(const LinearRow& row, int n) {
  if (row.index.size() != row.coef.size()) throw InputError("linear row: index/coef size mismatch");
  for (int i : row.index)
    if (i < 0 || i >= n) throw InputError("linear row: variable out of range");
}

double row_dot(const LinearRow& row, const Eigen::VectorXd& z) {
  double acc = 0.0;
  for (std::size_t k = 0; k < row.index.size(); ++k) acc += row.coef[k] * z(row.index[k]);
  return acc;
}

}  // namespace

void ConicProgram::add_equality(LinearRow row) {
  check_row(row, n_);
  eq_.push_back(std::move(row));
}

void ConicProgram::add_inequality(LinearRow row) {
  check_row(row, n_);
  ineq_.push_back(std::move(row));
}

void ConicProgram::add_soc(SocBlock block) {
  if (block.A.cols() != n_ || block.c.size() != n_ || block.A.rows() != block.b.size())
    throw InputError("add_soc: dimension mismatch");
  soc_.push_back(std::move(block));
}

double ConicProgram::objective(const Eigen::VectorXd& z) const {
  return 0.5 * z.dot(quad_ * z) + lin_.dot(z);
}

double ConicProgram::max_violation(const Eigen::VectorXd& z) const {
  double worst = 0.0;
  for (int i = 0; i < n_; ++i) worst = std::max({worst, lo_[i] - z(i), z(i) - hi_[i]});
  for (const LinearRow& row : eq_) worst = std::max(worst, std::abs(row_dot(row, z) - row.rhs));
  for (const LinearRow& row : ineq_) worst = std::max(worst, row_dot(row, z) - row.rhs);
  for (const SocBlock& c : soc_)
    worst = std::max(worst, (c.A * z + c.b).norm() - (c.c.dot(z) + c.d));
  return worst;
}

std::string to_string(SolveStatus status) {
  switch (status) {
    case SolveStatus::Optimal: return "optimal";
    case SolveStatus::Infeasible: return "infeasible";
    case SolveStatus::MaxIter: return "max_iter";
    case SolveStatus::NumericalFailure: return "numerical_failure";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Interior-point method on the standard form
//
//   minimize 0.5 x'Px + q'x   s.t.  A x = b,  G x + s = h,  s in K
//
// where K is a nonnegative orthant followed by second-order cones.

namespace {

struct StandardForm {
  int n = 0;
  Eigen::MatrixXd P;
  Eigen::VectorXd q;
  Eigen::MatrixXd A;
  Eigen::VectorXd b;

  bool elastic = false;  // feasibility-phase program
  // Linear inequality rows in compressed form.
  std::vector<int> row_ptr{0};
  std::vector<int> col;
  std::vector<double> val;
  int num_lin = 0;

  // Cone blocks: rows of G and entries of h, head coordinate first.
  std::vector<Eigen::MatrixXd> cone_G;
  std::vector<int> cone_offset;  // start of each block in the stacked slack vector
  int num_rows = 0;              // total slack dimension
  Eigen::VectorXd h;

  void add_lin(const std::vector<int>& idx, const std::vector<double>& coef, double rhs,
               std::vector<double>& h_lin) {
    for (std::size_t k = 0; k < idx.size(); ++k) {
      col.push_back(idx[k]);
      val.push_back(coef[k]);
    }
    row_ptr.push_back(static_cast<int>(col.size()));
    h_lin.push_back(rhs);
    ++num_lin;
  }

  Eigen::VectorXd G_mul(const Eigen::VectorXd& x) const {
    Eigen::VectorXd out(num_rows);
    for (int r = 0; r < num_lin; ++r) {
      double acc = 0.0;
      for (int k = row_ptr[r]; k < row_ptr[r + 1]; ++k) acc += val[k] * x(col[k]);
      out(r) = acc;
    }
    for (std::size_t c = 0; c < cone_G.size(); ++c)
      out.segment(cone_offset[c], cone_G[c].rows()) = cone_G[c] * x;
    return out;
  }

  Eigen::VectorXd Gt_mul(const Eigen::VectorXd& z) const {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(n);
    for (int r = 0; r < num_lin; ++r)
      for (int k = row_ptr[r]; k < row_ptr[r + 1]; ++k) out(col[k]) += val[k] * z(r);
    for (std::size_t c = 0; c < cone_G.size(); ++c)
      out += cone_G[c].transpose() * z.segment(cone_offset[c], cone_G[c].rows());
    return out;
  }

  int degree() const { return num_lin + static_cast<int>(cone_G.size()); }
};

StandardForm to_standard(const ConicProgram& prog) {
  StandardForm f;
  f.n = prog.num_vars();
  f.P = prog.quad();
  f.q = prog.lin();

  std::vector<double> h_lin;
  for (int i = 0; i < f.n; ++i) {
    if (std::isfinite(prog.upper()[i])) f.add_lin({i}, {1.0}, prog.upper()[i], h_lin);
    if (std::isfinite(prog.lower()[i])) f.add_lin({i}, {-1.0}, -prog.lower()[i], h_lin);
  }
  for (const LinearRow& row : prog.inequalities()) f.add_lin(row.index, row.coef, row.rhs, h_lin);

  // Slack of ||A z + b|| <= c.z + d is (d - (-c).z, b - (-A) z).
  std::vector<Eigen::VectorXd> cone_h;
  int offset = f.num_lin;
  for (const SocBlock& c : prog.cones()) {
    const int k = static_cast<int>(c.A.rows()) + 1;
    Eigen::MatrixXd g(k, f.n);
    g.row(0) = -c.c.transpose();
    g.bottomRows(k - 1) = -c.A;
    Eigen::VectorXd h(k);
    h(0) = c.d;
    h.tail(k - 1) = c.b;
    f.cone_G.push_back(std::move(g));
    f.cone_offset.push_back(offset);
    cone_h.push_back(std::move(h));
    offset += k;
  }
  f.num_rows = offset;
  f.h.resize(f.num_rows);
  for (int r = 0; r < f.num_lin; ++r) f.h(r) = h_lin[r];
  for (std::size_t c = 0; c < cone_h.size(); ++c)
    f.h.segment(f.cone_offset[c], cone_h[c].size()) = cone_h[c];

  const int neq = static_cast<int>(prog.equalities().size());
  f.A = Eigen::MatrixXd::Zero(neq, f.n);
  f.b = Eigen::VectorXd::Zero(neq);
  for (int r = 0; r < neq; ++r) {
    const LinearRow& row = prog.equalities()[r];
    for (std::size_t k = 0; k < row.index.size(); ++k) f.A(r, row.index[k]) += row.coef[k];
    f.b(r) = row.rhs;
  }
  return f;
}

// Keeps a maximal independent subset of the equality rows. Returns false when
// the full system is inconsistent.
bool reduce_equalities(StandardForm& f, double tol) {
  if (f.A.rows() == 0) return true;
  const double scale = std::max(1.0, f.b.lpNorm<Eigen::Infinity>());
  const Eigen::VectorXd ls = f.A.completeOrthogonalDecomposition().solve(f.b);
  if ((f.A * ls - f.b).lpNorm<Eigen::Infinity>() > tol * scale) return false;

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(f.A.transpose());
  qr.setThreshold(1e-10);
  const Eigen::Index rank = qr.rank();
  if (rank == f.A.rows()) return true;
  std::vector<int> keep;
  for (Eigen::Index k = 0; k < rank; ++k) keep.push_back(qr.colsPermutation().indices()(k));
  std::sort(keep.begin(), keep.end());
  Eigen::MatrixXd a(keep.size(), f.n);
  Eigen::VectorXd b(keep.size());
  for (std::size_t r = 0; r < keep.size(); ++r) {
    a.row(r) = f.A.row(keep[r]);
    b(r) = f.b(keep[r]);
  }
  f.A = std::move(a);
  f.b = std::move(b);
  return true;
}

// x0^2 - |x1|^2 without the cancellation of the naive form.
double soc_det(double x0, double x1_norm) { return (x0 - x1_norm) * (x0 + x1_norm); }

// Nesterov-Todd scaling for the product cone.
struct Scaling {
  Eigen::VectorXd d;  // linear part: W = diag(d)
  std::vector<double> eta;
  std::vector<Eigen::VectorXd> wbar;  // the vector v of the rank-one form
};

class Cone {
 public:
  explicit Cone(const StandardForm& f) : f_(f) {}

  // Smallest "eigenvalue" of x over all blocks.
  double min_eig(const Eigen::VectorXd& x) const {
    double m = std::numeric_limits<double>::infinity();
    for (int r = 0; r < f_.num_lin; ++r) m = std::min(m, x(r));
    for_each_cone([&](int off, int k) { m = std::min(m, x(off) - x.segment(off + 1, k - 1).norm()); });
    return m;
  }

  void add_identity(Eigen::VectorXd& x, double a) const {
    x.head(f_.num_lin).array() += a;
    for_each_cone([&](int off, int) { x(off) += a; });
  }

  Eigen::VectorXd identity() const {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(f_.num_rows);
    add_identity(e, 1.0);
    return e;
  }

  Eigen::VectorXd jordan(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const {
    Eigen::VectorXd out(f_.num_rows);
    out.head(f_.num_lin) = x.head(f_.num_lin).cwiseProduct(y.head(f_.num_lin));
    for_each_cone([&](int off, int k) {
      out(off) = x.segment(off, k).dot(y.segment(off, k));
      out.segment(off + 1, k - 1) = x(off) * y.segment(off + 1, k - 1) + y(off) * x.segment(off + 1, k - 1);
    });
    return out;
  }

  // Solves x o a = y for a.
  Eigen::VectorXd jordan_div(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const {
    Eigen::VectorXd out(f_.num_rows);
    out.head(f_.num_lin) = y.head(f_.num_lin).cwiseQuotient(x.head(f_.num_lin));
    for_each_cone([&](int off, int k) {
      const double x0 = x(off), y0 = y(off);
      const auto x1 = x.segment(off + 1, k - 1);
      const auto y1 = y.segment(off + 1, k - 1);
      const double det = soc_det(x0, x1.norm());
      const double x1y1 = x1.dot(y1);
      out(off) = (x0 * y0 - x1y1) / det;
      out.segment(off + 1, k - 1) = ((det / x0) * y1 + (x1y1 / x0 - y0) * x1) / det;
    });
    return out;
  }

  Scaling scaling(const Eigen::VectorXd& s, const Eigen::VectorXd& z) const {
    Scaling w;
    w.d = (s.head(f_.num_lin).array() / z.head(f_.num_lin).array()).sqrt();
    for_each_cone([&](int off, int k) {
      const auto sb = s.segment(off, k);
      const auto zb = z.segment(off, k);
      const double sjs = std::max(soc_det(sb(0), sb.tail(k - 1).norm()), 1e-300);
      const double zjz = std::max(soc_det(zb(0), zb.tail(k - 1).norm()), 1e-300);
      const Eigen::VectorXd sn = sb / std::sqrt(sjs);
      Eigen::VectorXd zn = zb / std::sqrt(zjz);
      const double gamma = std::sqrt(std::max((1.0 + sn.dot(zn)) / 2.0, 1e-300));
      zn.tail(k - 1) *= -1.0;  // J z
      // NT point wbar, then W = eta (2 v v' - J) with v = (wbar + e) / sqrt(2 (wbar_0 + 1)).
      Eigen::VectorXd v = (sn + zn) / (2.0 * gamma);
      const double w0 = v(0);
      v(0) += 1.0;
      v /= std::sqrt(2.0 * (w0 + 1.0));
      w.wbar.push_back(std::move(v));
      w.eta.push_back(std::pow(sjs / zjz, 0.25));
    });
    return w;
  }

  // W x, with W = eta (2 v v' - J) on cone blocks.
  Eigen::VectorXd apply_w(const Scaling& w, const Eigen::VectorXd& x) const {
    Eigen::VectorXd out(f_.num_rows);
    out.head(f_.num_lin) = w.d.cwiseProduct(x.head(f_.num_lin));
    int c = 0;
    for_each_cone([&](int off, int k) {
      const Eigen::VectorXd& wb = w.wbar[c];
      const auto xb = x.segment(off, k);
      Eigen::VectorXd jx = xb;
      jx.tail(k - 1) *= -1.0;
      out.segment(off, k) = w.eta[c] * (2.0 * wb.dot(xb) * wb - jx);
      ++c;
    });
    return out;
  }

  // W^{-1} x = (1/eta) (2 J v v' J - J) x.
  Eigen::VectorXd apply_winv(const Scaling& w, const Eigen::VectorXd& x) const {
    Eigen::VectorXd out(f_.num_rows);
    out.head(f_.num_lin) = x.head(f_.num_lin).cwiseQuotient(w.d);
    int c = 0;
    for_each_cone([&](int off, int k) {
      Eigen::VectorXd jw = w.wbar[c];
      jw.tail(k - 1) *= -1.0;
      Eigen::VectorXd jx = x.segment(off, k);
      jx.tail(k - 1) *= -1.0;
      out.segment(off, k) = (2.0 * jw.dot(x.segment(off, k)) * jw - jx) / w.eta[c];
      ++c;
    });
    return out;
  }

  // Largest a in [0, cap] keeping x + a dx in the cone.
  double max_step(const Eigen::VectorXd& x, const Eigen::VectorXd& dx, double cap) const {
    double a = cap;
    for (int r = 0; r < f_.num_lin; ++r)
      if (dx(r) < 0.0) a = std::min(a, -x(r) / dx(r));
    for_each_cone([&](int off, int k) {
      const double x0 = x(off), d0 = dx(off);
      const auto x1 = x.segment(off + 1, k - 1);
      const auto d1 = dx.segment(off + 1, k - 1);
      const double qa = d0 * d0 - d1.squaredNorm();
      const double qb = x0 * d0 - x1.dot(d1);
      const double qc = std::max(soc_det(x0, x1.norm()), 0.0);
      // Smallest positive root of qa t^2 + 2 qb t + qc.
      double root = std::numeric_limits<double>::infinity();
      if (std::abs(qa) < 1e-300) {
        if (qb < 0.0) root = -qc / (2.0 * qb);
      } else {
        const double disc = qb * qb - qa * qc;
        if (disc >= 0.0) {
          const double sq = std::sqrt(disc);
          // Numerically stable pair of roots.
          const double t = -(qb + std::copysign(sq, qb));
          const double r1 = t / qa;
          const double r2 = t != 0.0 ? qc / t : std::numeric_limits<double>::infinity();
          for (double r : {r1, r2})
            if (r > 0.0) root = std::min(root, r);
        }
      }
      if (d0 < 0.0) root = std::min(root, -x0 / d0);
      a = std::min(a, root);
    });
    return std::max(a, 0.0);
  }

  template <class F>
  void for_each_cone(F&& fn) const {
    for (std::size_t c = 0; c < f_.cone_G.size(); ++c)
      fn(f_.cone_offset[c], static_cast<int>(f_.cone_G[c].rows()));
  }

 private:
  const StandardForm& f_;
};

// Reduced KKT system [M A'; A 0] with M = P + G' W^{-2} G.
class KktSolver {
 public:
  KktSolver(const StandardForm& f, const Cone& cone, const Scaling& w) : f_(f), cone_(cone), w_(w) {
    const int n = f.n, m = static_cast<int>(f.A.rows());
    Eigen::MatrixXd M = f.P;
    for (int r = 0; r < f.num_lin; ++r) {
      const double hr = 1.0 / (w.d(r) * w.d(r));
      for (int a = f.row_ptr[r]; a < f.row_ptr[r + 1]; ++a)
        for (int b = f.row_ptr[r]; b < f.row_ptr[r + 1]; ++b)
          M(f.col[a], f.col[b]) += hr * f.val[a] * f.val[b];
    }
    for (std::size_t c = 0; c < f.cone_G.size(); ++c) {
      const int k = static_cast<int>(f.cone_G[c].rows());
      Eigen::VectorXd jw = w.wbar[c];
      jw.tail(k - 1) *= -1.0;
      // W^{-1} G, column by column through the rank-one form.
      Eigen::MatrixXd wg = -f.cone_G[c];
      wg.bottomRows(k - 1) *= -1.0;  // -J G
      wg += 2.0 * jw * (jw.transpose() * f.cone_G[c]);
      wg /= w.eta[c];
      M.noalias() += wg.transpose() * wg;
    }
    kkt_ = Eigen::MatrixXd::Zero(n + m, n + m);
    kkt_.topLeftCorner(n, n) = M;
    kkt_.topRightCorner(n, m) = f.A.transpose();
    kkt_.bottomLeftCorner(m, n) = f.A;
    Eigen::MatrixXd reg = kkt_;
    // Tied to P rather than to M: the scaling terms blow up near the optimum
    // and a proportional ridge would swamp the Newton direction.
    // The feasibility phase has (nearly) free directions; there a ridge
    // relative to M keeps the factorization finite.
    double ridge = 1e-12 * std::max(1.0, f.P.diagonal().cwiseAbs().maxCoeff());
    if (f.elastic) ridge = std::max(ridge, 1e-15 * M.diagonal().maxCoeff());
    reg.topLeftCorner(n, n).diagonal().array() += ridge;
    reg.bottomRightCorner(m, m).diagonal().array() -= ridge;
    lu_.compute(reg);
  }

  // Solves for (dx, dy, dz, ds) given primal/dual residuals and the
  // complementarity target t = lambda \ r_c (in scaled space). The step
  // solves the unreduced system
  //   [P A' G'; A 0 0; G 0 -W^2] (dx, dy, dz) = (-rx, -ry, -rz - W t),
  // refined against that system; the reduced factorization only
  // preconditions it.
  void solve(const Eigen::VectorXd& rx, const Eigen::VectorXd& ry, const Eigen::VectorXd& rz,
             const Eigen::VectorXd& t, Eigen::VectorXd& dx, Eigen::VectorXd& dy,
             Eigen::VectorXd& dz, Eigen::VectorXd& ds) const {
    const Eigen::VectorXd a = -rx, b = -ry;
    const Eigen::VectorXd c = -rz - (t.size() ? cone_.apply_w(w_, t) : Eigen::VectorXd(rz.size()).setZero());
    reduced_solve(a, b, c, dx, dy, dz);
    double res_norm = std::numeric_limits<double>::infinity();
    for (int pass = 0; pass < 8; ++pass) {
      Eigen::VectorXd ra, rb, rc;
      residual(a, b, c, dx, dy, dz, ra, rb, rc);
      const double norm = std::max({ra.lpNorm<Eigen::Infinity>(), rb.size() ? rb.lpNorm<Eigen::Infinity>() : 0.0,
                                    rc.size() ? rc.lpNorm<Eigen::Infinity>() : 0.0});
      if (!(norm < 0.5 * res_norm) || norm == 0.0) break;
      res_norm = norm;
      Eigen::VectorXd ex, ey, ez;
      reduced_solve(ra, rb, rc, ex, ey, ez);
      dx += ex;
      dy += ey;
      dz += ez;
    }
    ds = -rz - f_.G_mul(dx);
  }

 private:
  Eigen::VectorXd w2(const Eigen::VectorXd& v) const { return cone_.apply_w(w_, cone_.apply_w(w_, v)); }
  Eigen::VectorXd w2inv(const Eigen::VectorXd& v) const {
    return cone_.apply_winv(w_, cone_.apply_winv(w_, v));
  }

  void residual(const Eigen::VectorXd& a, const Eigen::VectorXd& b, const Eigen::VectorXd& c,
                const Eigen::VectorXd& dx, const Eigen::VectorXd& dy, const Eigen::VectorXd& dz,
                Eigen::VectorXd& ra, Eigen::VectorXd& rb, Eigen::VectorXd& rc) const {
    ra = a - f_.P * dx - f_.A.transpose() * dy - f_.Gt_mul(dz);
    rb = b - f_.A * dx;
    rc = c - f_.G_mul(dx) + w2(dz);
  }

  // Eliminates dz = W^-2 (G dx - c) and solves the reduced system.
  void reduced_solve(const Eigen::VectorXd& a, const Eigen::VectorXd& b, const Eigen::VectorXd& c,
                     Eigen::VectorXd& dx, Eigen::VectorXd& dy, Eigen::VectorXd& dz) const {
    const int n = f_.n, m = static_cast<int>(f_.A.rows());
    Eigen::VectorXd rhs(n + m);
    rhs.head(n) = a + f_.Gt_mul(w2inv(c));
    rhs.tail(m) = b;
    Eigen::VectorXd sol = lu_.solve(rhs);
    for (int pass = 0; pass < 2; ++pass) sol += lu_.solve(rhs - kkt_ * sol);
    dx = sol.head(n);
    dy = sol.tail(m);
    dz = w2inv(f_.G_mul(dx) - c);
  }

  const StandardForm& f_;
  const Cone& cone_;
  const Scaling& w_;
  Eigen::MatrixXd kkt_;
  Eigen::PartialPivLU<Eigen::MatrixXd> lu_;
};

// Residual and relative-gap level accepted when the full tolerances cannot
// be reached in floating point.
constexpr double kReducedTol = 1e-6;

struct IpmResult {
  bool converged = false;
  Eigen::VectorXd x;
  int iterations = 0;
};

bool all_finite(const Eigen::VectorXd& v) { return v.allFinite(); }

// Interior iterates approach the optimum only like sqrt(gap) when a
// constraint is weakly active, and degenerate programs (many nearly parallel
// rows) can stall altogether. Starting from the active set guessed by the
// iterate, solve the equality-constrained KKT system and repair the guess
// (drop the most negative multiplier, add the most violated row). Rows
// dependent on higher-priority ones (recently added, then larger multipliers)
// are left out of the system: duplicated observations produce parallel rows
// whose right-hand sides disagree at the rounding level. The result is kept
// only when it is primal and dual feasible. Programs with an active cone are
// left alone.
bool polish(const StandardForm& f, const Cone& cone, const Eigen::VectorXd& s, const Eigen::VectorXd& z,
            const SolveOptions& opts, Eigen::VectorXd& x) {
  bool cone_active = false;
  cone.for_each_cone([&](int off, int k) {
    const double sm = s(off) - s.segment(off + 1, k - 1).norm();
    const double zm = z(off) - z.segment(off + 1, k - 1).norm();
    if (sm <= zm) cone_active = true;
  });
  if (cone_active) return false;

  const int n = f.n, m = static_cast<int>(f.A.rows());
  // Candidates in priority order.
  std::vector<int> active;
  for (int r = 0; r < f.num_lin; ++r)
    if (s(r) <= z(r)) active.push_back(r);
  std::stable_sort(active.begin(), active.end(), [&](int a, int b) { return z(a) > z(b); });
  const double tol = opts.feas_tol * std::max(1.0, f.num_rows ? f.h.lpNorm<Eigen::Infinity>() : 0.0);

  auto row_of = [&](int r) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(n);
    for (int e = f.row_ptr[r]; e < f.row_ptr[r + 1]; ++e) v(f.col[e]) += f.val[e];
    return v;
  };

  for (int round = 0; round < 60; ++round) {
    // Independent subset by Gram-Schmidt against the equalities and the
    // rows kept so far.
    std::vector<Eigen::VectorXd> basis;
    auto independent = [&](Eigen::VectorXd v) {
      const double norm = v.norm();
      if (norm == 0.0) return false;
      for (int pass = 0; pass < 2; ++pass)
        for (const Eigen::VectorXd& q : basis) v -= q.dot(v) * q;
      if (v.norm() <= 1e-9 * norm) return false;
      basis.push_back(v / v.norm());
      return true;
    };
    for (int r = 0; r < m; ++r) independent(f.A.row(r).transpose());
    std::vector<int> used;
    for (int r : active)
      if (independent(row_of(r))) used.push_back(r);

    const int a = static_cast<int>(used.size());
    Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(n + m + a, n + m + a);
    Eigen::VectorXd rhs(n + m + a);
    kkt.topLeftCorner(n, n) = f.P;
    kkt.block(0, n, n, m) = f.A.transpose();
    kkt.block(n, 0, m, n) = f.A;
    rhs.head(n) = -f.q;
    rhs.segment(n, m) = f.b;
    for (int k = 0; k < a; ++k) {
      const int r = used[k];
      for (int e = f.row_ptr[r]; e < f.row_ptr[r + 1]; ++e) {
        kkt(f.col[e], n + m + k) += f.val[e];
        kkt(n + m + k, f.col[e]) += f.val[e];
      }
      rhs(n + m + k) = f.h(r);
    }
    const Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(kkt);
    const Eigen::VectorXd sol = cod.solve(rhs);
    // Backward error: large intermediate multipliers must not end the repair.
    const double scale = std::max({1.0, rhs.lpNorm<Eigen::Infinity>(),
                                   kkt.cwiseAbs().rowwise().sum().maxCoeff() * sol.lpNorm<Eigen::Infinity>()});
    if (!sol.allFinite() || (kkt * sol - rhs).lpNorm<Eigen::Infinity>() > 1e-10 * scale) return false;

    if (a > 0) {
      Eigen::Index worst;
      const double low = sol.tail(a).minCoeff(&worst);
      if (low < -1e-9 * std::max(1.0, sol.tail(a).cwiseAbs().maxCoeff())) {
        active.erase(std::find(active.begin(), active.end(), used[worst]));
        continue;
      }
    }
    const Eigen::VectorXd xp = sol.head(n);
    // The final system is well-posed, so its residual must be small in
    // absolute terms too.
    if ((kkt * sol - rhs).lpNorm<Eigen::Infinity>() > 1e-10 * std::max(1.0, rhs.lpNorm<Eigen::Infinity>()))
      return false;
    const Eigen::VectorXd slack = f.h - f.G_mul(xp);
    if (f.num_lin > 0) {
      Eigen::Index worst;
      if (slack.head(f.num_lin).minCoeff(&worst) < -tol) {
        const int r = static_cast<int>(worst);
        const auto it = std::find(active.begin(), active.end(), r);
        if (it != active.end()) active.erase(it);
        active.insert(active.begin(), r);
        continue;
      }
    }
    if (f.num_rows && cone.min_eig(slack) < -tol) return false;
    x = xp;
    return true;
  }
  return false;
}

IpmResult run_ipm(const StandardForm& f, const SolveOptions& opts) {
  const int n = f.n;
  const int m = static_cast<int>(f.A.rows());
  const Cone cone(f);
  const int iter_cap = std::min(opts.max_iter, 150);

  IpmResult out;
  out.x = Eigen::VectorXd::Zero(n);

  // Start: least-squares point with W = I, slacks and duals shifted inside K.
  Eigen::VectorXd x, y, z, s;
  {
    Scaling unit;
    unit.d = Eigen::VectorXd::Ones(f.num_lin);
    cone.for_each_cone([&](int, int k) {
      Eigen::VectorXd e = Eigen::VectorXd::Zero(k);
      e(0) = 1.0;
      unit.wbar.push_back(e);
      unit.eta.push_back(1.0);
    });
    KktSolver kkt(f, cone, unit);
    Eigen::VectorXd dz, ds;
    kkt.solve(f.q, -f.b, -f.h, Eigen::VectorXd::Zero(f.num_rows), x, y, dz, ds);
    // Here dz = G x - h and ds = h - G x.
    z = dz;
    s = ds;
    if (!all_finite(x)) return out;
    const double ts = -cone.min_eig(s);
    if (f.num_rows > 0 && ts >= -1e-8 * std::max(s.norm(), 1.0)) cone.add_identity(s, 1.0 + ts);
    const double tz = -cone.min_eig(z);
    if (f.num_rows > 0 && tz >= -1e-8 * std::max(z.norm(), 1.0)) cone.add_identity(z, 1.0 + tz);
  }

  const double res_scale_p =
      std::max({1.0, f.b.size() ? f.b.lpNorm<Eigen::Infinity>() : 0.0,
                f.num_rows ? f.h.lpNorm<Eigen::Infinity>() : 0.0});
  const double q_scale = std::max(1.0, f.q.lpNorm<Eigen::Infinity>());
  const int nu = f.degree();
  const Eigen::VectorXd e = cone.identity();
  int stalls = 0;
  struct Best {
    double merit = std::numeric_limits<double>::infinity();
    double pres = 0.0, dres = 0.0, relgap = 0.0;
    Eigen::VectorXd x, s, z;
  } best;
  int since_best = 0;

  for (int it = 0; it <= iter_cap; ++it) {
    out.iterations = it;
    const Eigen::VectorXd rx = f.P * x + f.q + f.A.transpose() * y + f.Gt_mul(z);
    const Eigen::VectorXd ry = f.A * x - f.b;
    const Eigen::VectorXd rz = f.G_mul(x) + s - f.h;
    const double gap = f.num_rows ? s.dot(z) : 0.0;
    const double pcost = 0.5 * x.dot(f.P * x) + f.q.dot(x);
    const double pres =
        std::max(m ? ry.lpNorm<Eigen::Infinity>() : 0.0, f.num_rows ? rz.lpNorm<Eigen::Infinity>() : 0.0) /
        res_scale_p;
    // The dual residual is measured relative to the terms it sums, so that
    // large multipliers do not leave it stuck at the rounding floor.
    const double res_scale_d =
        std::max({q_scale, (f.P * x).lpNorm<Eigen::Infinity>(),
                  m ? (f.A.transpose() * y).lpNorm<Eigen::Infinity>() : 0.0,
                  f.num_rows ? f.Gt_mul(z).lpNorm<Eigen::Infinity>() : 0.0});
    const double dres = rx.lpNorm<Eigen::Infinity>() / res_scale_d;
    if (!std::isfinite(pres) || !std::isfinite(dres) || !std::isfinite(gap)) break;
    if (pres <= opts.feas_tol && dres <= opts.feas_tol &&
        gap <= opts.opt_tol * std::max(1.0, std::abs(pcost))) {
      out.converged = true;
      out.x = x;
      polish(f, cone, s, z, opts, out.x);
      return out;
    }
    // Near the optimum the scaled KKT system gets too ill-conditioned to
    // reach the tolerances; remember the best iterate and stop once progress
    // stalls.
    const double merit = std::max({pres / opts.feas_tol, dres / opts.feas_tol,
                                   gap / (opts.opt_tol * std::max(1.0, std::abs(pcost)))});
    if (merit < best.merit) {
      best = {merit, pres, dres, gap / std::max(1.0, std::abs(pcost)), x, s, z};
      since_best = 0;
    } else if (std::max({best.pres, best.dres, best.relgap}) <= 1e-5 && ++since_best >= 10) {
      break;
    }
    if (it == iter_cap) break;
    if (x.lpNorm<Eigen::Infinity>() > 1e12) break;  // diverging: likely infeasible

    if (f.num_rows == 0) {
      // Equality-constrained QP: one Newton step is exact.
      Scaling none;
      KktSolver kkt(f, cone, none);
      Eigen::VectorXd dx, dy, dz, ds;
      kkt.solve(rx, ry, rz, Eigen::VectorXd(0), dx, dy, dz, ds);
      x += dx;
      y += dy;
      continue;
    }

    const Scaling w = cone.scaling(s, z);
    const Eigen::VectorXd lambda = cone.apply_w(w, z);
    const double mu = gap / nu;
    const KktSolver kkt(f, cone, w);

    // Predictor.
    Eigen::VectorXd dx, dy, dz, ds;
    const Eigen::VectorXd ll = cone.jordan(lambda, lambda);
    kkt.solve(rx, ry, rz, cone.jordan_div(lambda, -ll), dx, dy, dz, ds);
    const double a_aff = std::min(cone.max_step(s, ds, 1.0), cone.max_step(z, dz, 1.0));
    const double mu_aff = (s + a_aff * ds).dot(z + a_aff * dz) / nu;
    const double sigma = std::clamp(std::pow(std::max(mu_aff, 0.0) / mu, 3.0), 0.0, 1.0);

    // Corrector with the second-order term.
    const Eigen::VectorXd corr = cone.jordan(cone.apply_winv(w, ds), cone.apply_w(w, dz));
    const Eigen::VectorXd rc = -ll - corr + sigma * mu * e;
    kkt.solve(rx, ry, rz, cone.jordan_div(lambda, rc), dx, dy, dz, ds);
    if (!all_finite(dx) || !all_finite(dz) || !all_finite(ds)) break;
    auto step_len = [&] {
      return std::min(1.0, 0.99 * std::min(cone.max_step(s, ds, 1e30), cone.max_step(z, dz, 1e30)));
    };
    double step = step_len();
    // The second-order correction can make the iterates cycle; fall back to a
    // plain centering step when it shortens the step or raises the gap.
    if (step < 0.5 * a_aff || (s + step * ds).dot(z + step * dz) > gap) {
      const Eigen::VectorXd rc0 = -ll + std::max(sigma, 0.1) * mu * e;
      kkt.solve(rx, ry, rz, cone.jordan_div(lambda, rc0), dx, dy, dz, ds);
      if (!all_finite(dx) || !all_finite(dz) || !all_finite(ds)) break;
      step = step_len();
    }
    if (step < 1e-10) {
      if (++stalls >= 5) break;
    } else {
      stalls = 0;
    }
    x += step * dx;
    y += step * dy;
    z += step * dz;
    s += step * ds;
  }
  // Accept the best iterate at reduced accuracy.
  // A successful polish certifies the optimum by itself (KKT with
  // nonnegative multipliers), which rescues degenerate programs whose
  // complementarity pairs stall.
  if (best.merit < std::numeric_limits<double>::infinity()) {
    out.x = best.x;
    const bool polished = polish(f, cone, best.s, best.z, opts, out.x);
    if (polished || (best.pres <= kReducedTol && best.dres <= kReducedTol && best.relgap <= kReducedTol)) {
      out.converged = true;
      return out;
    }
  }
  out.x = x;
  return out;
}

// minimize t subject to every constraint relaxed by t (t >= -1).
ConicProgram elastic_program(const ConicProgram& prog) {
  const int n = prog.num_vars();
  const int t = n;
  ConicProgram ph(n + 1);
  Eigen::MatrixXd quad = Eigen::MatrixXd::Zero(n + 1, n + 1);
  quad.topLeftCorner(n, n).diagonal().setConstant(1e-12);
  Eigen::VectorXd lin = Eigen::VectorXd::Zero(n + 1);
  lin(t) = 1.0;
  ph.set_objective(quad, lin);
  ph.set_bounds(t, -1.0, std::numeric_limits<double>::infinity());
  for (int i = 0; i < n; ++i) {
    if (std::isfinite(prog.upper()[i])) ph.add_inequality(LinearRow{{i, t}, {1.0, -1.0}, prog.upper()[i]});
    if (std::isfinite(prog.lower()[i])) ph.add_inequality(LinearRow{{i, t}, {-1.0, -1.0}, -prog.lower()[i]});
  }
  auto relaxed = [t](const LinearRow& row, double sign) {
    LinearRow r;
    for (std::size_t k = 0; k < row.index.size(); ++k) r.add(row.index[k], sign * row.coef[k]);
    r.add(t, -1.0);
    r.rhs = sign * row.rhs;
    return r;
  };
  for (const LinearRow& row : prog.inequalities()) ph.add_inequality(relaxed(row, 1.0));
  for (const LinearRow& row : prog.equalities()) {
    ph.add_inequality(relaxed(row, 1.0));
    ph.add_inequality(relaxed(row, -1.0));
  }
  for (const SocBlock& c : prog.cones()) {
    SocBlock r;
    r.A = Eigen::MatrixXd::Zero(c.A.rows(), n + 1);
    r.A.leftCols(n) = c.A;
    r.b = c.b;
    r.c = Eigen::VectorXd::Zero(n + 1);
    r.c.head(n) = c.c;
    r.c(t) = 1.0;
    r.d = c.d;
    ph.add_soc(std::move(r));
  }
  return ph;
}

}  // namespace

SolveReport InteriorPointBackend::solve(const ConicProgram& prog, const SolveOptions& opts) const {
  SolveReport report;
  StandardForm f = to_standard(prog);
  const bool consistent = reduce_equalities(f, opts.feas_tol);

  if (consistent) {
    const IpmResult r = run_ipm(f, opts);
    report.iterations = r.iterations;
    if (r.converged) {
      report.status = SolveStatus::Optimal;
      report.z = r.x;
      report.objective = prog.objective(r.x);
      report.primal_residual = prog.max_violation(r.x);
      return report;
    }
    report.z = r.x;
  }

  // Feasibility phase: the relaxed program always has an interior point.
  const ConicProgram ph = elastic_program(prog);
  StandardForm fp = to_standard(ph);
  fp.elastic = true;
  reduce_equalities(fp, opts.feas_tol);
  const IpmResult r = run_ipm(fp, opts);
  report.iterations += r.iterations;
  if (!r.converged) {
    report.status = SolveStatus::NumericalFailure;
    return report;
  }
  report.min_violation = std::max(r.x(prog.num_vars()), 0.0);
  report.z = r.x.head(prog.num_vars());
  report.primal_residual = prog.max_violation(report.z);
  report.objective = prog.objective(report.z);
  report.status = report.min_violation >= opts.infeasible_threshold ? SolveStatus::Infeasible
                  : consistent                                      ? SolveStatus::MaxIter
                                                                    : SolveStatus::NumericalFailure;
  return report;
}

SolveReport solve(const ConicProgram& prog, const SolveOptions& opts) {
  static const InteriorPointBackend backend;
  return backend.solve(prog, opts);
}

}  // namespace voltctrl
