#pragma once

// Fast self-check suite behind `ebridge check`: conservation, inverse-flow
// round trip, axisymmetric closed form, Sinkhorn against the exact LP and
// finite-difference checks of the network jets and loss gradients.

#include "ebridge/bridge.hpp"
#include "ebridge/core.hpp"
#include "ebridge/io.hpp"
#include "ebridge/mlp.hpp"
#include "ebridge/rigid_body.hpp"
#include "ebridge/transport.hpp"

#include <algorithm>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

namespace ebridge {

struct CheckResult {
  std::string name;
  double value = 0.0;      // worst observed error
  double tolerance = 0.0;
  bool pass = false;
};

struct CheckOptions {
  InertiaSpec body{Vec3(0.45, 0.50, 0.55)};
  std::uint64_t seed = 1;
};

namespace detail {

inline CheckResult verdict(std::string name, double value, double tol) {
  return {std::move(name), value, tol, std::isfinite(value) && value < tol};
}

inline double rel_gap(double a, double b, double floor) { return std::abs(a - b) / std::max(std::abs(b), floor); }

}  // namespace detail

/// Relative drift of E and ‖Jx‖² along the unforced flow from x0.
inline CheckResult check_conservation(const InertiaSpec& body, const Vec3& x0, double horizon, double dt) {
  const auto p = derive_params(body);
  const auto ref = conserved(x0, body);
  Vec3 x = x0;
  double worst = 0.0;
  const int legs = 40;
  try {
    for (int k = 0; k < legs; ++k) {
      x = flow(x, horizon / legs, p, {dt});
      const auto now = conserved(x, body);
      worst = std::max({worst, std::abs(now.energy - ref.energy) / ref.energy,
                        std::abs(now.momentum2 - ref.momentum2) / ref.momentum2});
    }
  } catch (const Divergence&) {
    worst = std::numeric_limits<double>::infinity();
  }
  return detail::verdict("conservation", worst, 1e-8);
}

inline CheckResult check_round_trip(const InertiaSpec& body, int count, std::uint64_t seed) {
  const auto p = derive_params(body);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(-3.0, 3.0);
  double worst = 0.0;
  for (double t : {0.5, 1.0, 2.0, 4.0})
    for (int k = 0; k < count; ++k) {
      const Vec3 x0(U(rng), U(rng), U(rng));
      worst = std::max(worst, (inverse_flow(flow(x0, t, p), t, p) - x0).lpNorm<Eigen::Infinity>());
    }
  return detail::verdict("inverse flow round trip", worst, 1e-6);
}

inline CheckResult check_axisymmetric(int count, std::uint64_t seed) {
  const auto p = derive_params({Vec3(0.5, 0.5, 0.55)});
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(-3.0, 3.0), T(0.0, 4.0);
  double worst = 0.0;
  for (int k = 0; k < count; ++k) {
    const Vec3 x(U(rng), U(rng), U(rng));
    const double t = T(rng);
    worst = std::max(worst, (axisym_inverse_flow(x, t, p) - inverse_flow(x, t, p)).lpNorm<Eigen::Infinity>());
  }
  return detail::verdict("axisymmetric inverse flow", worst, 1e-6);
}

/// Worst relative gap between the ε = 1e-3 entropic cost and the exact LP.
inline CheckResult check_sinkhorn_lp(int instances, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> N(1, 5);
  std::uniform_real_distribution<double> X(-2.0, 2.0), W(0.1, 1.0);
  auto random_measure = [&](int n) {
    MatrixXd P(n, 3);
    VectorXd w(n);
    for (int i = 0; i < n; ++i) {
      for (int k = 0; k < 3; ++k) P(i, k) = X(rng);
      w[i] = W(rng);
    }
    return DiscreteMeasure::from_masses(P, w);
  };
  SinkhornConfig cfg;
  cfg.epsilon = 1e-3;
  cfg.max_iters = 20000;
  double worst = 0.0;
  for (int k = 0; k < instances; ++k) {
    const auto a = random_measure(N(rng));
    const auto b = random_measure(N(rng));
    const double exact = exact_ot_small(a, b);
    const double approx = sinkhorn_divergence(a, b, cfg);
    worst = std::max(worst, std::abs(approx - exact) / exact);
  }
  return detail::verdict("sinkhorn vs exact LP", worst, 1e-2);
}

/// Jets against central differences of the value pass, and the interior
/// loss gradient against central differences in the parameters.
inline std::vector<CheckResult> check_autodiff(int points, int seeds, std::uint64_t seed) {
  double first = 0.0, second = 0.0, param = 0.0;
  ProblemSpec s;
  s.body = derive_params({Vec3(0.45, 0.50, 0.55)});
  s.rho0 = GaussianPdf(Vec3::Constant(2.0), 0.5 * Mat3::Identity());
  s.rhoT = GaussianPdf(Vec3::Zero(), 0.5 * Mat3::Identity());
  for (int sd = 0; sd < seeds; ++sd) {
    auto p = init_mlp({4, 8, 8, 2}, seed + static_cast<std::uint64_t>(sd), 1.5);
    std::mt19937_64 rng(detail::mix_seed(seed, static_cast<std::uint64_t>(sd)));
    std::uniform_real_distribution<double> X(-3.0, 3.0), T(0.0, 4.0);
    Eigen::Matrix4Xd pts(4, points);
    for (int k = 0; k < points; ++k) pts.col(k) << X(rng), X(rng), X(rng), T(rng);

    for (int k = 0; k < points; ++k) {
      const Eigen::Vector4d xi = pts.col(k);
      const auto r = forward_with_derivs(p, xi);
      const auto c = forward(p, xi);
      for (int a = 0; a < 4; ++a) {
        Eigen::Vector4d e = Eigen::Vector4d::Zero();
        e[a] = 1e-5;
        const auto up = forward(p, xi + e), dn = forward(p, xi - e);
        const double dphi = a < 3 ? r.grad_x_phi[a] : r.dphi_dt;
        const double drho = a < 3 ? r.grad_x_rho[a] : r.drho_dt;
        first = std::max({first, detail::rel_gap(dphi, (up.phi - dn.phi) / 2e-5, 1e-3),
                          detail::rel_gap(drho, (up.rho - dn.rho) / 2e-5, 1e-3)});
        if (a == 3) continue;
        e[a] = 1e-3;
        const auto up2 = forward(p, xi + e), dn2 = forward(p, xi - e);
        second = std::max({second, detail::rel_gap(r.d2_x_phi[a], (up2.phi - 2 * c.phi + dn2.phi) / 1e-6, 1e-2),
                           detail::rel_gap(r.d2_x_rho[a], (up2.rho - 2 * c.rho + dn2.rho) / 1e-6, 1e-2)});
      }
    }

    for (const auto scaling : {FpkScaling::None, FpkScaling::MeanRho2, FpkScaling::Relative}) {
      const LossWeights w;
      const auto g = interior_loss(p, pts, s, w, true, scaling).grad;
      VectorXd fd(p.size());
      for (Index i = 0; i < p.size(); ++i) {
        const double keep = p.theta()[i];
        p.theta()[i] = keep + 1e-6;
        const auto lu = interior_loss(p, pts, s, w, false, scaling);
        p.theta()[i] = keep - 1e-6;
        const auto ld = interior_loss(p, pts, s, w, false, scaling);
        p.theta()[i] = keep;
        fd[i] = ((lu.phi + lu.rho) - (ld.phi + ld.rho)) / 2e-6;
      }
      const double floor = 1e-2 * fd.cwiseAbs().maxCoeff();
      for (Index i = 0; i < p.size(); ++i) param = std::max(param, detail::rel_gap(g[i], fd[i], floor));
    }
  }
  return {detail::verdict("jet first derivatives vs FD", first, 1e-4),
          detail::verdict("jet second derivatives vs FD", second, 1e-4),
          detail::verdict("loss parameter gradient vs FD", param, 1e-4)};
}

inline std::vector<CheckResult> run_check_suite(const CheckOptions& opt = {}) {
  std::vector<CheckResult> out;
  out.push_back(check_conservation(opt.body, Vec3(2, 2, 2), 4.0, 1e-3));
  out.push_back(check_round_trip(opt.body, 25, opt.seed));
  out.push_back(check_axisymmetric(100, opt.seed + 1));
  out.push_back(check_sinkhorn_lp(20, opt.seed + 2));
  for (auto& r : check_autodiff(10, 2, opt.seed + 3)) out.push_back(std::move(r));
  return out;
}

inline bool all_passed(const std::vector<CheckResult>& rs) {
  return std::all_of(rs.begin(), rs.end(), [](const CheckResult& r) { return r.pass; });
}

inline std::string check_table(const std::vector<CheckResult>& rs) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof line, "%-32s %12s %10s  %s\n", "check", "error", "tolerance", "result");
  out += line;
  for (const auto& r : rs) {
    std::snprintf(line, sizeof line, "%-32s %12.3e %10.1e  %s\n", r.name.c_str(), r.value, r.tolerance,
                  r.pass ? "PASS" : "FAIL");
    out += line;
  }
  return out;
}

}  // namespace ebridge
