#pragma once

#include <Eigen/Dense>

#include <cstddef>

namespace msae {

// Samples are rows throughout.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Mask = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

// Values as they survive a float32 file round trip.
inline Matrix round_to_float(const Matrix& m) {
    return m.cast<float>().cast<double>();
}
inline Vector round_to_float(const Vector& v) {
    return v.cast<float>().cast<double>();
}

} // namespace msae
