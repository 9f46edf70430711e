#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace pcdn {

using Index = Eigen::Index;

// Row-major throughout: tensors store values in row-major order and point
// clouds are read/written row by row.
using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// Thrown for malformed inputs: unreadable files, bad shapes, inconsistent
// sizes. The CLI maps this to exit code 2.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown when a computation produces or would produce non-finite values.
// The CLI maps this to exit code 3.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace pcdn
