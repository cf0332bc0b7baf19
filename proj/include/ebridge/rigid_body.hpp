#pragma once

// Torque-free and torque-driven Euler equations for the angular velocity of a
// rigid body in its principal frame, written as
//
//   ẋ = α ⊙ f(x) + β ⊙ u,   f(z) = (z₂z₃, z₃z₁, z₁z₂)
//
// with αᵢ = (J₍ᵢ₊₁₎ − J₍ᵢ₊₂₎)/Jᵢ (cyclic, 1-based) and βᵢ = 1/Jᵢ.

#include "ebridge/core.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace ebridge {

/// Principal moments of inertia (kg·m²).
struct InertiaSpec {
  Vec3 J = Vec3::Ones();
};

/// Drift and input scalings derived from the inertia.
struct BodyParams {
  Vec3 alpha = Vec3::Zero();
  Vec3 beta = Vec3::Ones();
};

struct FlowConfig {
  double step_size = 1e-3;  // seconds; classical RK4
};

inline void validate(const InertiaSpec& inertia) {
  for (int i = 0; i < 3; ++i) {
    if (!(inertia.J[i] > 0.0) || !std::isfinite(inertia.J[i])) {
      throw InvalidInput("moment of inertia J" + std::to_string(i + 1) +
                         " must be finite and strictly positive");
    }
  }
}

inline BodyParams derive_params(const InertiaSpec& inertia) {
  validate(inertia);
  const Vec3& J = inertia.J;
  BodyParams p;
  for (int i = 0; i < 3; ++i) {
    const int j = (i + 1) % 3;
    const int k = (i + 2) % 3;
    p.alpha[i] = (J[j] - J[k]) / J[i];
    p.beta[i] = 1.0 / J[i];
  }
  return p;
}

inline Vec3 drift(const Vec3& z) {
#ifdef EBRIDGE_MUTANT_DRIFT
  // Deliberately wrong sign, compiled only into the mutation-test binary.
  return {-z[1] * z[2], z[2] * z[0], z[0] * z[1]};
#else
  return {z[1] * z[2], z[2] * z[0], z[0] * z[1]};
#endif
}

inline Vec3 controlled_rhs(const AngVel& x, const Torque& u, const BodyParams& p) {
  return p.alpha.cwiseProduct(drift(x)) + p.beta.cwiseProduct(u);
}

namespace detail {

// Fixed-step RK4 on ẋ = sign · α ⊙ f(x) over [0, t].
inline Vec3 integrate_unforced(Vec3 x, double t, double sign, const BodyParams& p,
                               const FlowConfig& cfg) {
  if (!(cfg.step_size > 0.0)) throw InvalidInput("flow step_size must be positive");
  if (!(t >= 0.0)) throw InvalidInput("flow time must be non-negative");
  if (!all_finite(x)) throw InvalidInput("flow initial state must be finite");
  if (t == 0.0) return x;

  const auto steps = static_cast<long>(std::ceil(t / cfg.step_size - 1e-9));
  const double h = t / static_cast<double>(steps);
  const Vec3 a = sign * p.alpha;
  auto rhs = [&a](const Vec3& z) -> Vec3 { return a.cwiseProduct(drift(z)); };

  for (long s = 0; s < steps; ++s) {
    const Vec3 k1 = rhs(x);
    const Vec3 k2 = rhs(x + 0.5 * h * k1);
    const Vec3 k3 = rhs(x + 0.5 * h * k2);
    const Vec3 k4 = rhs(x + h * k3);
    x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!all_finite(x)) {
      throw Divergence("non-finite state after " + std::to_string(s + 1) + " RK4 steps");
    }
  }
  return x;
}

}  // namespace detail

/// Unforced flow map x(x0, t).
inline AngVel flow(const AngVel& x0, double t, const BodyParams& p,
                   const FlowConfig& cfg = {}) {
  return detail::integrate_unforced(x0, t, +1.0, p, cfg);
}

/// Inverse flow map x0(x, t), integrating the time-reversed field.
inline AngVel inverse_flow(const AngVel& x, double t, const BodyParams& p,
                           const FlowConfig& cfg = {}) {
  return detail::integrate_unforced(x, t, -1.0, p, cfg);
}

inline bool is_axisymmetric(const BodyParams& p, double rel_tol = 1e-12) {
  return std::abs(p.beta[0] - p.beta[1]) <= rel_tol * std::max(p.beta[0], p.beta[1]);
}

/// Closed-form inverse flow for J₁ = J₂.
///
/// The (x₁, x₂) pair rotates at the constant rate α₂x₃, so x0 is x rotated by
/// θ = −α₂x₃t. The tangent form γ = tan(angle(x) − θ) fixes the direction
/// only modulo π; the root of x₁₀ takes the sign of the rotated first
/// component. Near the tangent pole, or when the denominator vanishes, the
/// rotation is applied directly.
inline AngVel axisym_inverse_flow(const AngVel& x, double t, const BodyParams& p) {
  if (!is_axisymmetric(p)) throw InvalidInput("axisym_inverse_flow requires J1 == J2");
  if (!(t >= 0.0)) throw InvalidInput("inverse flow time must be non-negative");

  const double theta = p.alpha[1] * x[2] * t;
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  const double rot1 = x[0] * c + x[1] * s;
  const double rot2 = -x[0] * s + x[1] * c;

  // Distance of θ from the nearest pole of tan.
  const double pole_gap = std::abs(std::remainder(theta - std::numbers::pi / 2, std::numbers::pi));
  const double tan_theta = std::tan(theta);
  const double denom = x[0] + x[1] * tan_theta;
  if (pole_gap < 1e-6 || std::abs(denom) < 1e-12 || !std::isfinite(tan_theta)) {
    return {rot1, rot2, x[2]};
  }

  const double gamma = (x[1] - x[0] * tan_theta) / denom;
  const double r2 = x[0] * x[0] + x[1] * x[1];
  const double x10 = std::copysign(std::sqrt(r2 / (1.0 + gamma * gamma)), rot1);
  return {x10, gamma * x10, x[2]};
}

struct Invariants {
  double energy = 0.0;    // J
  double momentum2 = 0.0; // (kg·m²·rad/s)²
};

/// First integrals of torque-free motion.
inline Invariants conserved(const AngVel& x, const InertiaSpec& inertia) {
  const Vec3 Jx = inertia.J.cwiseProduct(x);
  return {0.5 * x.dot(Jx), Jx.squaredNorm()};
}

}  // namespace ebridge
