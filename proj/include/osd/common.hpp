#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace osd {

/// Dimension of the augmented MPC input [G, chi, Isc1, Isc2, Ip, d, ydot, IOB].
inline constexpr int kStateDim = 8;
/// Dimension of the linear prediction model state [G, chi, Isc1, Isc2, Ip].
inline constexpr int kModelDim = 5;

using Vec5 = Eigen::Matrix<double, kModelDim, 1>;
using Mat5 = Eigen::Matrix<double, kModelDim, kModelDim>;
using Vec8 = Eigen::Matrix<double, kStateDim, 1>;
using Mat8 = Eigen::Matrix<double, kStateDim, kStateDim>;

// Error categories map onto CLI exit codes (2, 3, 4).
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class InvariantViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ValidationError(what);
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

}  // namespace osd
