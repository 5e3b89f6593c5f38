#pragma once

#include <vector>

#include <Eigen/Dense>

namespace vflow {

using Vector = Eigen::VectorXd;
// Row-major so that a batch of points is a contiguous run of rows.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using IndexVector = std::vector<int>;

}  // namespace vflow
