#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace voltctrl {

// Buses are numbered 0..n with 0 the substation. Matrices indexed by bus use
// row/column i-1 for bus i.
struct Edge {
  int parent = 0;
  int child = 0;
};

// Rooted tree of buses. Line data is indexed by the child bus of the line.
class RadialNetwork {
 public:
  RadialNetwork() = default;

  int size() const { return n_; }
  int parent(int bus) const { return parent_.at(bus); }
  double r(int child) const { return r_.at(child); }
  double x(int child) const { return x_.at(child); }
  int depth(int bus) const { return depth_.at(bus); }
  bool controllable(int bus) const { return controllable_.at(bus); }
  const std::vector<int>& children(int bus) const { return children_.at(bus); }

  // Buses ordered so every parent precedes its children (root first).
  const std::vector<int>& topological_order() const { return order_; }
  std::vector<int> control_set() const;

  // Edges (parent, child) ordered by child bus.
  std::vector<Edge> edges() const;
  std::vector<double> resistances() const;  // by child bus 1..n
  std::vector<double> reactances() const;   // by child bus 1..n

  // Root path of `bus` as the list of child buses of its lines, root side first.
  std::vector<int> root_path(int bus) const;

 private:
  friend RadialNetwork build_network(std::span<const Edge>, std::span<const double>,
                                     std::span<const double>, std::span<const int>);

  int n_ = 0;
  std::vector<int> parent_;
  std::vector<double> r_;
  std::vector<double> x_;
  std::vector<int> depth_;
  std::vector<bool> controllable_;
  std::vector<std::vector<int>> children_;
  std::vector<int> order_;
};

// Validates and assembles a radial network over buses {0..n}, where n is the
// number of edges. r[k], x[k] belong to edges[k]. Throws InputError on cycles,
// disconnected buses, duplicate children, nonpositive impedances, or a bus 0
// appearing as a child.
RadialNetwork build_network(std::span<const Edge> edges, std::span<const double> r,
                            std::span<const double> x, std::span<const int> control_set);

// Deepest common bus of the root paths of i and j; 0 when only the substation
// is shared.
int lca(const RadialNetwork& net, int i, int j);

// R and X: twice the summed line impedance over the shared part of two root paths.
struct SensitivityModel {
  Eigen::MatrixXd R;
  Eigen::MatrixXd X;

  int size() const { return static_cast<int>(X.rows()); }
};

SensitivityModel compute_sensitivity(const RadialNetwork& net);

// Lowest-common-ancestor fact: entry (i, j) of X equals 0 if k == 0, else X_kk.
struct TopoPin {
  int i = 0;
  int j = 0;
  int k = 0;
};

// Entry (i, j) of X is known exactly.
struct LinePin {
  int i = 0;
  int j = 0;
  double value = 0.0;
};

// Uncertainty set for X:
//   tri_norm(X - center) <= alpha * tri_norm(center), 0 <= X_ij <= min(X_ii, X_jj),
//   X symmetric, optional PSD membership, and the pinned equalities.
struct PriorSpec {
  double alpha = 1.0;
  std::vector<TopoPin> topo_pins;
  std::vector<LinePin> line_pins;
  Eigen::MatrixXd center;
  bool enforce_psd = true;

  int size() const { return static_cast<int>(center.rows()); }
  double radius() const;
};

PriorSpec make_prior_set(const Eigen::MatrixXd& center, double alpha,
                         std::vector<TopoPin> topo_pins, std::vector<LinePin> line_pins,
                         bool enforce_psd = true);

// Largest violation of any PriorSpec constraint at x (PSD measured as the
// negated smallest eigenvalue when enforced).
double prior_violation(const Eigen::MatrixXd& x, const PriorSpec& prior);

enum class PriorMode { Unknown, TopoK, LinesK, Known };

// Builds the prior used by the experiments: no pins (Unknown), lowest-common-
// ancestor pins among buses 1..k (TopoK), exact entries among buses 1..k
// (LinesK), or the singleton {X*} (Known).
PriorSpec make_mode_prior(const RadialNetwork& net, const SensitivityModel& truth,
                          PriorMode mode, int k, double alpha, bool enforce_psd);

}  // namespace voltctrl
