#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>

namespace ebridge {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Angular velocity in the principal body frame (rad/s).
using AngVel = Vec3;
/// Torque about the principal axes (N·m).
using Torque = Vec3;

/// Raised when an argument violates a documented precondition.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an integrator produces a non-finite state.
class Divergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite value encountered while evaluating a loss or residual.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, Eigen::Vector4d point)
      : std::runtime_error(what), point_(point) {}

  /// Collocation point (ω₁, ω₂, ω₃, t) at which evaluation failed.
  Eigen::Vector4d point() const { return point_; }

 private:
  Eigen::Matrix<double, 4, 1, Eigen::DontAlign> point_;
};

inline bool all_finite(const Vec3& v) { return v.allFinite(); }

inline double softplus(double z) {
  // log1p(exp(z)) without overflow for large z.
  return z > 30.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace ebridge
