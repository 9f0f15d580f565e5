#pragma once

#include <utility>

#include <Eigen/Dense>

namespace voltctrl {

// Number of free coordinates of an n x n symmetric matrix.
constexpr int upper_triangle_size(int n) { return n * (n + 1) / 2; }

// Row-major position of entry (i, j), 0-based, in the packed upper triangle.
inline int tri_index(int n, int i, int j) {
  if (i > j) std::swap(i, j);
  return i * n - i * (i - 1) / 2 + (j - i);
}

// Euclidean norm of the upper triangle (diagonal included). Throws
// InputError when the input is not square or is asymmetric beyond 1e-9.
double tri_norm(const Eigen::MatrixXd& x);

// sqrt(delta^2 * eta^2 + tri_norm(x)^2).
double tri_delta_norm(const Eigen::MatrixXd& x, double eta, double delta);

// Largest |x_ij - x_ji|, scaled by max(1, max|x|).
double asymmetry(const Eigen::MatrixXd& x);

}  // namespace voltctrl
