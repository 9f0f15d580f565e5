#include "voltctrl/norms.hpp"

#include <algorithm>
#include <cmath>

#include "voltctrl/error.hpp"

namespace voltctrl {

double asymmetry(const Eigen::MatrixXd& x) {
  if (x.size() == 0) return 0.0;
  const double scale = std::max(1.0, x.cwiseAbs().maxCoeff());
  return (x - x.transpose()).cwiseAbs().maxCoeff() / scale;
}

double tri_norm(const Eigen::MatrixXd& x) {
  if (x.rows() != x.cols()) throw InputError("tri_norm: matrix must be square");
  if (asymmetry(x) > 1e-9) throw InputError("tri_norm: matrix is not symmetric");
  double sum = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = i; j < x.cols(); ++j) sum += x(i, j) * x(i, j);
  return std::sqrt(sum);
}

double tri_delta_norm(const Eigen::MatrixXd& x, double eta, double delta) {
  return std::hypot(delta * eta, tri_norm(x));
}

}  // namespace voltctrl
