#include "voltctrl/grid.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "voltctrl/error.hpp"
#include "voltctrl/norms.hpp"

namespace voltctrl {

namespace {

std::string line_name(const Edge& e) {
  return std::to_string(e.parent) + "->" + std::to_string(e.child);
}

// Directed cycle search over parent->child arcs (iterative DFS, three colors).
bool has_directed_cycle(int num_nodes, const std::vector<std::vector<int>>& out) {
  std::vector<int> color(num_nodes, 0);
  for (int start = 0; start < num_nodes; ++start) {
    if (color[start] != 0) continue;
    std::vector<std::pair<int, std::size_t>> stack{{start, 0}};
    color[start] = 1;
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < out[node].size()) {
        const int succ = out[node][next++];
        if (color[succ] == 1) return true;
        if (color[succ] == 0) {
          color[succ] = 1;
          stack.emplace_back(succ, 0);
        }
      } else {
        color[node] = 2;
        stack.pop_back();
      }
    }
  }
  return false;
}

}  // namespace

std::vector<int> RadialNetwork::control_set() const {
  std::vector<int> out;
  for (int b = 1; b <= n_; ++b)
    if (controllable_[b]) out.push_back(b);
  return out;
}

std::vector<Edge> RadialNetwork::edges() const {
  std::vector<Edge> out;
  out.reserve(n_);
  for (int b = 1; b <= n_; ++b) out.push_back({parent_[b], b});
  return out;
}

std::vector<double> RadialNetwork::resistances() const {
  return {r_.begin() + 1, r_.end()};
}

std::vector<double> RadialNetwork::reactances() const {
  return {x_.begin() + 1, x_.end()};
}

std::vector<int> RadialNetwork::root_path(int bus) const {
  std::vector<int> path;
  for (int b = bus; b != 0; b = parent_.at(b)) path.push_back(b);
  std::reverse(path.begin(), path.end());
  return path;
}

RadialNetwork build_network(std::span<const Edge> edges, std::span<const double> r,
                            std::span<const double> x, std::span<const int> control_set) {
  if (r.size() != edges.size() || x.size() != edges.size())
    throw InputError("impedance vectors must have one entry per edge");
  if (edges.empty()) throw InputError("network needs at least one line");

  int max_bus = 0;
  for (const Edge& e : edges) {
    if (e.parent < 0 || e.child < 0) throw InputError("negative bus index on line " + line_name(e));
    if (e.child == 0) throw InputError("substation bus 0 cannot be a child (line " + line_name(e) + ")");
    if (e.parent == e.child) throw InputError("cycle detected: self-loop at bus " + std::to_string(e.child));
    max_bus = std::max({max_bus, e.parent, e.child});
  }

  std::vector<std::vector<int>> out(max_bus + 1);
  for (const Edge& e : edges) out[e.parent].push_back(e.child);
  if (has_directed_cycle(max_bus + 1, out)) throw InputError("cycle detected in network edges");

  const int n = max_bus;
  RadialNetwork net;
  net.n_ = n;
  net.parent_.assign(n + 1, -1);
  net.r_.assign(n + 1, 0.0);
  net.x_.assign(n + 1, 0.0);
  for (std::size_t k = 0; k < edges.size(); ++k) {
    const Edge& e = edges[k];
    if (net.parent_[e.child] != -1)
      throw InputError("duplicate child: bus " + std::to_string(e.child) + " has two parents");
    if (!(r[k] > 0.0) || !(x[k] > 0.0) || !std::isfinite(r[k]) || !std::isfinite(x[k]))
      throw InputError("nonpositive impedance on line " + line_name(e));
    net.parent_[e.child] = e.parent;
    net.r_[e.child] = r[k];
    net.x_[e.child] = x[k];
  }
  for (int b = 1; b <= n; ++b)
    if (net.parent_[b] == -1) throw InputError("disconnected bus " + std::to_string(b));

  net.children_.assign(n + 1, {});
  for (int b = 1; b <= n; ++b) net.children_[net.parent_[b]].push_back(b);

  // Breadth-first from the root; anything not reached hangs off a detached subtree.
  net.depth_.assign(n + 1, -1);
  net.depth_[0] = 0;
  net.order_ = {0};
  for (std::size_t head = 0; head < net.order_.size(); ++head) {
    const int b = net.order_[head];
    for (int c : net.children_[b]) {
      net.depth_[c] = net.depth_[b] + 1;
      net.order_.push_back(c);
    }
  }
  for (int b = 1; b <= n; ++b)
    if (net.depth_[b] < 0) throw InputError("disconnected bus " + std::to_string(b));

  net.controllable_.assign(n + 1, false);
  for (int c : control_set) {
    if (c < 1 || c > n) throw InputError("control bus " + std::to_string(c) + " out of range");
    net.controllable_[c] = true;
  }
  return net;
}

int lca(const RadialNetwork& net, int i, int j) {
  const int n = net.size();
  if (i < 0 || i > n || j < 0 || j > n)
    throw InputError("bus out of range in lca(" + std::to_string(i) + ", " + std::to_string(j) + ")");
  while (net.depth(i) > net.depth(j)) i = net.parent(i);
  while (net.depth(j) > net.depth(i)) j = net.parent(j);
  while (i != j) {
    i = net.parent(i);
    j = net.parent(j);
  }
  return i;
}

SensitivityModel compute_sensitivity(const RadialNetwork& net) {
  const int n = net.size();
  // Root-path impedance prefix sums; the shared part of two root paths is the
  // root path of their lowest common ancestor.
  std::vector<double> cum_r(n + 1, 0.0), cum_x(n + 1, 0.0);
  for (int b : net.topological_order()) {
    if (b == 0) continue;
    cum_r[b] = cum_r[net.parent(b)] + net.r(b);
    cum_x[b] = cum_x[net.parent(b)] + net.x(b);
  }
  SensitivityModel model{Eigen::MatrixXd(n, n), Eigen::MatrixXd(n, n)};
  for (int i = 1; i <= n; ++i) {
    for (int j = i; j <= n; ++j) {
      const int k = lca(net, i, j);
      model.R(i - 1, j - 1) = model.R(j - 1, i - 1) = 2.0 * cum_r[k];
      model.X(i - 1, j - 1) = model.X(j - 1, i - 1) = 2.0 * cum_x[k];
    }
  }
  return model;
}

double PriorSpec::radius() const { return alpha * tri_norm(center); }

PriorSpec make_prior_set(const Eigen::MatrixXd& center, double alpha,
                         std::vector<TopoPin> topo_pins, std::vector<LinePin> line_pins,
                         bool enforce_psd) {
  if (!(alpha >= 0.0)) throw InputError("alpha must be >= 0");
  if (center.rows() != center.cols() || center.rows() == 0)
    throw InputError("prior center must be a nonempty square matrix");
  const int n = static_cast<int>(center.rows());
  auto check_bus = [n](int b, bool allow_root) {
    if (b < (allow_root ? 0 : 1) || b > n) throw InputError("pin bus " + std::to_string(b) + " out of range");
  };

  // All pins are linear equalities on the packed upper triangle; they are
  // contradictory exactly when that system has no solution.
  const int m = upper_triangle_size(n);
  const int rows = static_cast<int>(topo_pins.size() + line_pins.size());
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(rows, m);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(rows);
  int row = 0;
  for (const TopoPin& p : topo_pins) {
    check_bus(p.i, false);
    check_bus(p.j, false);
    check_bus(p.k, true);
    a(row, tri_index(n, p.i - 1, p.j - 1)) += 1.0;
    if (p.k != 0) a(row, tri_index(n, p.k - 1, p.k - 1)) -= 1.0;
    ++row;
  }
  for (const LinePin& p : line_pins) {
    check_bus(p.i, false);
    check_bus(p.j, false);
    if (!std::isfinite(p.value)) throw InputError("line pin value must be finite");
    a(row, tri_index(n, p.i - 1, p.j - 1)) = 1.0;
    b(row) = p.value;
    ++row;
  }
  if (rows > 0) {
    const Eigen::VectorXd sol = a.completeOrthogonalDecomposition().solve(b);
    const double scale = std::max(1.0, b.lpNorm<Eigen::Infinity>());
    if ((a * sol - b).lpNorm<Eigen::Infinity>() > 1e-9 * scale)
      throw InputError("contradictory pins in prior specification");
  }

  PriorSpec prior;
  prior.alpha = alpha;
  prior.topo_pins = std::move(topo_pins);
  prior.line_pins = std::move(line_pins);
  prior.center = center;
  prior.enforce_psd = enforce_psd;
  return prior;
}

double prior_violation(const Eigen::MatrixXd& x, const PriorSpec& prior) {
  const int n = prior.size();
  if (x.rows() != n || x.cols() != n) throw InputError("prior_violation: dimension mismatch");
  double worst = 0.0;
  auto note = [&worst](double v) { worst = std::max(worst, v); };

  note(std::abs(asymmetry(x)));
  note(tri_norm(0.5 * (x + x.transpose()) - prior.center) - prior.radius());
  for (int i = 0; i < n; ++i) {
    for (int j = i; j < n; ++j) {
      note(-x(i, j));
      note(x(i, j) - x(i, i));
      note(x(i, j) - x(j, j));
    }
  }
  for (const TopoPin& p : prior.topo_pins) {
    const double target = p.k == 0 ? 0.0 : x(p.k - 1, p.k - 1);
    note(std::abs(x(p.i - 1, p.j - 1) - target));
  }
  for (const LinePin& p : prior.line_pins) note(std::abs(x(p.i - 1, p.j - 1) - p.value));
  if (prior.enforce_psd) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (x + x.transpose()),
                                                       Eigen::EigenvaluesOnly);
    note(-eig.eigenvalues().minCoeff());
  }
  return worst;
}

PriorSpec make_mode_prior(const RadialNetwork& net, const SensitivityModel& truth,
                          PriorMode mode, int k, double alpha, bool enforce_psd) {
  const int n = net.size();
  k = std::clamp(k, 0, n);
  std::vector<TopoPin> topo;
  std::vector<LinePin> lines;
  switch (mode) {
    case PriorMode::Unknown:
      break;
    case PriorMode::TopoK:
      for (int i = 1; i <= k; ++i)
        for (int j = i + 1; j <= k; ++j) topo.push_back({i, j, lca(net, i, j)});
      break;
    case PriorMode::LinesK:
      for (int i = 1; i <= k; ++i)
        for (int j = i; j <= k; ++j) lines.push_back({i, j, truth.X(i - 1, j - 1)});
      break;
    case PriorMode::Known:
      alpha = 0.0;
      break;
  }
  return make_prior_set(truth.X, alpha, std::move(topo), std::move(lines), enforce_psd);
}

}  // namespace voltctrl
