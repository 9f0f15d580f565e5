#pragma once

// Shared fixtures and independent reference implementations for the tests.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <random>
#include <set>
#include <vector>

#include <Eigen/Dense>

#include "voltctrl/geometry.hpp"
#include "voltctrl/grid.hpp"
#include "voltctrl/oracle.hpp"

namespace testsupport {

struct TreeData {
  std::vector<voltctrl::Edge> edges;
  std::vector<double> r, x;
  std::vector<int> control;
};

// Uniform attachment: bus b hangs off a uniformly chosen earlier bus.
inline TreeData random_tree(int n, std::mt19937_64& rng) {
  TreeData t;
  std::uniform_real_distribution<double> imp(0.05, 0.5);
  for (int b = 1; b <= n; ++b) {
    std::uniform_int_distribution<int> pick(0, b - 1);
    t.edges.push_back({pick(rng), b});
    t.r.push_back(imp(rng));
    t.x.push_back(imp(rng));
    t.control.push_back(b);
  }
  // Shuffle edge order so nothing relies on it.
  std::vector<int> perm(n);
  for (int k = 0; k < n; ++k) perm[k] = k;
  std::shuffle(perm.begin(), perm.end(), rng);
  TreeData s;
  for (int k : perm) {
    s.edges.push_back(t.edges[k]);
    s.r.push_back(t.r[k]);
    s.x.push_back(t.x[k]);
  }
  s.control = t.control;
  return s;
}

inline voltctrl::RadialNetwork make_net(const TreeData& t) {
  return voltctrl::build_network(t.edges, t.r, t.x, t.control);
}

// Lines (identified by child bus) on the path from the root to `bus`, found by
// walking the raw edge list.
inline std::set<int> path_lines(const TreeData& t, int bus) {
  std::set<int> lines;
  while (bus != 0) {
    for (const auto& e : t.edges)
      if (e.child == bus) {
        lines.insert(bus);
        bus = e.parent;
        break;
      }
  }
  return lines;
}

inline double line_value(const TreeData& t, int child, bool reactance) {
  for (std::size_t k = 0; k < t.edges.size(); ++k)
    if (t.edges[k].child == child) return reactance ? t.x[k] : t.r[k];
  return 0.0;
}

// Twice the summed impedance over the explicit intersection of root paths.
inline Eigen::MatrixXd brute_force_sensitivity(const TreeData& t, bool reactance) {
  const int n = static_cast<int>(t.edges.size());
  Eigen::MatrixXd m(n, n);
  for (int i = 1; i <= n; ++i) {
    const std::set<int> pi = path_lines(t, i);
    for (int j = 1; j <= n; ++j) {
      const std::set<int> pj = path_lines(t, j);
      double acc = 0.0;
      for (int l : pi)
        if (pj.count(l)) acc += line_value(t, l, reactance);
      m(i - 1, j - 1) = 2.0 * acc;
    }
  }
  return m;
}

// Deepest bus appearing on both explicit root paths (buses, not lines).
inline int brute_force_lca(const TreeData& t, int i, int j) {
  auto buses = [&](int b) {
    std::vector<int> out{b};
    while (b != 0) {
      for (const auto& e : t.edges)
        if (e.child == b) {
          b = e.parent;
          break;
        }
      out.push_back(b);
    }
    return out;
  };
  const std::vector<int> a = buses(i), b = buses(j);
  for (int x : a)  // a runs from i towards the root, so the first hit is deepest
    if (std::find(b.begin(), b.end(), x) != b.end()) return x;
  return 0;
}

inline Eigen::MatrixXd random_symmetric(int n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal;
  Eigen::MatrixXd a(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j) a(i, j) = a(j, i) = scale * normal(rng);
  return a;
}

// Oracle instance built so that the box condition holds for the estimate:
// a control q* in the box lands v_par_hat + X_hat q* inside the limits shrunk
// by eta_bar + epsilon.
struct OracleInstance {
  voltctrl::ControllerConfig cfg;
  voltctrl::ModelEstimate est;
  Eigen::VectorXd v_now, q_prev;
};

inline OracleInstance assumption3_instance(int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit;
  const TreeData t = random_tree(n, rng);
  const Eigen::MatrixXd x = compute_sensitivity(make_net(t)).X;
  OracleInstance in;
  voltctrl::ControllerConfig& c = in.cfg;
  c.v_nom = Eigen::VectorXd::Ones(n);
  c.v_min = Eigen::VectorXd::Constant(n, 0.95);
  c.v_max = Eigen::VectorXd::Constant(n, 1.05);
  c.q_min = Eigen::VectorXd::Constant(n, -0.2 - unit(rng));
  c.q_max = Eigen::VectorXd::Constant(n, 0.2 + unit(rng));
  c.P_v = (1.0 + unit(rng)) * Eigen::MatrixXd::Identity(n, n);
  c.P_u = 0.1 * Eigen::MatrixXd::Identity(n, n);
  c.beta = 100.0;
  c.delta = 20.0;
  c.epsilon = 0.01;
  c.eta_bar = 0.005;
  c.slack = voltctrl::SlackMode::None;
  const double pad = c.eta_bar + c.epsilon;
  Eigen::VectorXd q_star(n), target(n);
  in.q_prev.resize(n);
  for (int i = 0; i < n; ++i) {
    q_star(i) = c.q_min(i) + unit(rng) * (c.q_max(i) - c.q_min(i));
    in.q_prev(i) = c.q_min(i) + unit(rng) * (c.q_max(i) - c.q_min(i));
    target(i) = c.v_min(i) + pad + unit(rng) * (c.v_max(i) - c.v_min(i) - 2.0 * pad);
  }
  const Eigen::VectorXd vpar_hat = target - x * q_star;
  in.v_now = vpar_hat + x * in.q_prev;
  c.vpar_box = {vpar_hat.array() - 1.0, vpar_hat.array() + 1.0};
  in.est = {x, unit(rng) * c.eta_bar};
  return in;
}

// The scalar examples: X_hat = 1, P_v = 0.1, P_u = 10, eta* = 0 known, eps = 0.01.
inline voltctrl::ControllerConfig scalar_config(double q_lim, double beta, voltctrl::SlackMode slack) {
  voltctrl::ControllerConfig c;
  c.v_nom = Eigen::VectorXd::Constant(1, 1.0);
  c.v_min = Eigen::VectorXd::Constant(1, 0.95);
  c.v_max = Eigen::VectorXd::Constant(1, 1.05);
  c.q_min = Eigen::VectorXd::Constant(1, -q_lim);
  c.q_max = Eigen::VectorXd::Constant(1, q_lim);
  c.P_v = Eigen::MatrixXd::Constant(1, 1, 0.1);
  c.P_u = Eigen::MatrixXd::Constant(1, 1, 10.0);
  c.beta = beta;
  c.epsilon = 0.01;
  c.known_eta = true;
  c.slack = slack;
  return c;
}

struct GridOptimum {
  double u = 0.0, xi = 0.0, cost = std::numeric_limits<double>::infinity();
};

// Brute force over a fine u grid with xi set to its smallest admissible value
// (or required to be zero), then a local refinement around the best node.
inline GridOptimum grid_search(double v, double q_lim, double beta, double rho, bool slack) {
  auto eval = [&](double u, GridOptimum& g) {
    const double vp = v + u, k = rho * std::abs(u);
    const double need = std::max({0.0, 0.95 + k - vp, vp - 1.05 + k});
    if (!slack && need > 0.0) return;
    const double cost = 0.1 * (vp - 1.0) * (vp - 1.0) + 10.0 * u * u + beta * need * need;
    if (cost < g.cost) g = {u, need, cost};
  };
  GridOptimum best;
  const int steps = 200000;
  for (int s = 0; s <= steps; ++s) eval(-q_lim + 2.0 * q_lim * s / steps, best);
  const double h = 2.0 * q_lim / steps;
  const double lo = std::max(-q_lim, best.u - h), hi = std::min(q_lim, best.u + h);
  for (int s = 0; s <= 20000; ++s) eval(lo + (hi - lo) * s / 20000, best);
  return best;
}

// Random feasible points: projections of random points, plus convex
// combinations of those (the set is convex).
inline std::vector<voltctrl::ModelEstimate> feasible_samples(const voltctrl::ConsistentSetSpec& set, double delta,
                                                             int count, std::mt19937_64& rng) {
  const int n = set.size();
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<voltctrl::ModelEstimate> pts;
  while (static_cast<int>(pts.size()) < count / 4) {
    voltctrl::ModelEstimate z{set.prior.center + random_symmetric(n, rng, 2.0), std::abs(3.0 * normal(rng))};
    const voltctrl::ProjectionResult r = voltctrl::project(set, z, delta);
    if (r.status != voltctrl::ProjectionStatus::Optimal)
      throw std::runtime_error("feasible_samples: projection failed");
    pts.push_back(r.estimate);
  }
  std::uniform_int_distribution<std::size_t> pick(0, pts.size() - 1);
  const std::size_t base = pts.size();
  while (static_cast<int>(pts.size()) < count) {
    const voltctrl::ModelEstimate& a = pts[pick(rng) % base];
    const voltctrl::ModelEstimate& b = pts[pick(rng) % base];
    const double t = unit(rng);
    pts.push_back({t * a.X + (1 - t) * b.X, t * a.eta + (1 - t) * b.eta});
  }
  return pts;
}

}  // namespace testsupport
