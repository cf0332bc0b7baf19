#pragma once

// Optimal feedback u = β⊙∇φ from a trained bridge and Euler–Maruyama
// ensembles of the controlled and uncontrolled stochastic Euler equations.

#include "ebridge/bridge.hpp"
#include "ebridge/core.hpp"
#include "ebridge/gaussian.hpp"
#include "ebridge/io.hpp"
#include "ebridge/mlp.hpp"
#include "ebridge/parallel.hpp"
#include "ebridge/rigid_body.hpp"
#include "ebridge/transport.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <concepts>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace ebridge {

/// Anything that yields ∇ₓφ(x, t).
template <class P>
concept Potential = requires(const P& p, const Vec3& x, double t) {
  { p.grad(x, t) } -> std::convertible_to<Vec3>;
};

/// ∇ₓφ from the network's φ head.
struct NetworkPotential {
  const MlpParams* params;
  Vec3 grad(const Vec3& x, double t) const {
    return evaluate_batch(*params, feature(x, t), JetOrder::First).phi_x.col(0).matrix();
  }
};

/// φ ≡ const.
struct ZeroPotential {
  Vec3 grad(const Vec3&, double) const { return Vec3::Zero(); }
};

/// φ = ⟨c, x⟩.
struct LinearPotential {
  Vec3 c;
  Vec3 grad(const Vec3&, double) const { return c; }
};

/// φ = ½‖x‖².
struct QuadraticPotential {
  Vec3 grad(const Vec3& x, double) const { return x; }
};

struct ControlQuery {
  Torque u;
  bool extrapolated = false;  // (x, t) outside the training domain
};

template <Potential P>
ControlQuery optimal_control(const P& phi, const ProblemSpec& s, const AngVel& x, double t) {
  const bool outside = !s.contains(x) || t < 0.0 || t > s.horizon;
  return {s.body.beta.cwiseProduct(phi.grad(x, t)), outside};
}

inline ControlQuery optimal_control(const TrainedBridge& tb, const AngVel& x, double t) {
  return optimal_control(NetworkPotential{&tb.params}, tb.spec, x, t);
}

struct SdeConfig {
  double dt = 1e-3;
  int n_paths = 50;
  std::uint64_t seed = 1;
  int record_stride = 1;  // keep every k-th step (the final state is always kept)

  void validate() const {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw InvalidInput("sim.dt must be positive");
    if (n_paths < 1) throw InvalidInput("sim.n_paths must be at least 1");
    if (record_stride < 1) throw InvalidInput("sim.record_stride must be at least 1");
  }
};

struct TrajectoryBundle {
  std::vector<double> times;
  std::vector<std::vector<Vec3>> states;    // [path][record]
  std::vector<std::vector<Vec3>> controls;  // [path][record]
  std::vector<char> diverged;               // per path
  long extrapolated = 0;                    // control queries outside the domain

  std::size_t paths() const { return states.size(); }

  /// Final states of the paths that did not diverge (one per column).
  Eigen::Matrix3Xd terminal() const { return at_record(times.empty() ? 0 : times.size() - 1); }

  Eigen::Matrix3Xd at_record(std::size_t k) const {
    std::vector<Vec3> keep;
    for (std::size_t p = 0; p < states.size(); ++p)
      if (!diverged[p]) keep.push_back(states[p][k]);
    Eigen::Matrix3Xd out(3, keep.size());
    for (std::size_t i = 0; i < keep.size(); ++i) out.col(i) = keep[i];
    return out;
  }
};

namespace detail {

inline std::uint64_t path_seed(std::uint64_t seed, std::size_t path) {
  return mix_seed(seed ^ 0xC0FFEE5EEDull, static_cast<std::uint64_t>(path));
}

}  // namespace detail

/// Euler–Maruyama: x ← x + (α⊙f(x) + β⊙u)Δt + √(2δΔt) z, x₀ ~ ρ₀, with
/// independent per-path streams derived from (seed, path). A path whose
/// ∞-norm exceeds ten times the domain radius is flagged and frozen.
template <Potential P>
TrajectoryBundle simulate(const P& phi, const ProblemSpec& s, const SdeConfig& cfg) {
  s.validate(true);
  cfg.validate();
  const long steps = std::max(1L, std::lround(s.horizon / cfg.dt));
  const double dt = s.horizon / static_cast<double>(steps);
  const double noise = std::sqrt(2.0 * s.delta * dt);
  const double radius = std::max(s.lower.cwiseAbs().maxCoeff(), s.upper.cwiseAbs().maxCoeff());

  TrajectoryBundle b;
  for (long k = 0; k <= steps; ++k)
    if (k % cfg.record_stride == 0 || k == steps) b.times.push_back(static_cast<double>(k) * dt);
  const std::size_t n = static_cast<std::size_t>(cfg.n_paths);
  b.states.assign(n, {});
  b.controls.assign(n, {});
  b.diverged.assign(n, 0);
  std::vector<long> extrapolated(n, 0);

  parallel_for(n, [&](std::size_t pb, std::size_t pe) {
    for (std::size_t p = pb; p < pe; ++p) {
      std::mt19937_64 rng(detail::path_seed(cfg.seed, p));
      std::normal_distribution<double> n01;
      auto& xs = b.states[p];
      auto& us = b.controls[p];
      xs.reserve(b.times.size());
      us.reserve(b.times.size());
      Vec3 x = s.rho0.sample(rng);
      bool dead = false;
      for (long k = 0; k <= steps; ++k) {
        const double t = static_cast<double>(k) * dt;
        Torque u = Torque::Zero();
        if (!dead) {
          const auto q = optimal_control(phi, s, x, t);
          u = q.u;
          extrapolated[p] += q.extrapolated ? 1 : 0;
        }
        if (k % cfg.record_stride == 0 || k == steps) {
          xs.push_back(x);
          us.push_back(u);
        }
        if (k == steps || dead) continue;
        const Vec3 z(n01(rng), n01(rng), n01(rng));
        x += controlled_rhs(x, u, s.body) * dt + noise * z;
        if (!x.allFinite() || x.cwiseAbs().maxCoeff() > 10.0 * radius) dead = true;
      }
      b.diverged[p] = dead ? 1 : 0;
    }
  });
  for (long e : extrapolated) b.extrapolated += e;
  return b;
}

inline TrajectoryBundle simulate_closed_loop(const TrainedBridge& tb, const SdeConfig& cfg) {
  return simulate(NetworkPotential{&tb.params}, tb.spec, cfg);
}

inline TrajectoryBundle simulate_uncontrolled(const ProblemSpec& s, const SdeConfig& cfg) {
  return simulate(ZeroPotential{}, s, cfg);
}

// ---------------------------------------------------------------------------
// Terminal statistics

struct CloudStats {
  Vec3 mean = Vec3::Zero();
  Mat3 cov = Mat3::Zero();
};

inline CloudStats cloud_stats(const Eigen::Matrix3Xd& pts) {
  CloudStats st;
  const Index n = pts.cols();
  if (n == 0) throw InvalidInput("statistics of an empty point cloud");
  st.mean = pts.rowwise().mean();
  if (n > 1) {
    const Eigen::Matrix3Xd c = pts.colwise() - st.mean;
    st.cov = c * c.transpose() / static_cast<double>(n - 1);
  }
  return st;
}

/// Uniform-weight measure on the columns of `pts`.
inline DiscreteMeasure cloud_measure(const Eigen::Matrix3Xd& pts) {
  return DiscreteMeasure::uniform(pts.transpose());
}

inline Eigen::Matrix3Xd draw(const GaussianPdf& g, Index n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Eigen::Matrix3Xd out(3, n);
  for (Index k = 0; k < n; ++k) out.col(k) = g.sample(rng);
  return out;
}

struct SummaryStats {
  Vec3 mean = Vec3::Zero();
  Mat3 cov = Mat3::Zero();
  double divergence = 0.0;           // W_ε between the cloud and a target draw
  double debiased_divergence = 0.0;  // the same with the self terms removed
  std::size_t samples = 0;
  std::size_t diverged = 0;
  long extrapolated = 0;
};

/// Statistics of a point cloud against an equal-size draw from `target`.
inline SummaryStats cloud_summary(const Eigen::Matrix3Xd& pts, const GaussianPdf& target, double epsilon,
                                  std::uint64_t seed) {
  SummaryStats st;
  const auto cs = cloud_stats(pts);
  st.mean = cs.mean;
  st.cov = cs.cov;
  st.samples = static_cast<std::size_t>(pts.cols());
  const auto mu = cloud_measure(pts);
  const auto nu = cloud_measure(draw(target, pts.cols(), seed));
  SinkhornConfig sc;
  sc.epsilon = epsilon;
  st.divergence = sinkhorn_divergence(mu, nu, sc);
  st.debiased_divergence = debiased_sinkhorn_divergence(mu, nu, sc);
  return st;
}

inline SummaryStats terminal_stats(const TrajectoryBundle& b, const GaussianPdf& target, double epsilon,
                                   std::uint64_t seed = 7) {
  if (b.paths() == 0 || b.times.empty()) throw InvalidInput("terminal_stats needs a non-empty bundle");
  const Eigen::Matrix3Xd term = b.terminal();
  SummaryStats st = cloud_summary(term, target, epsilon, seed);
  for (char d : b.diverged) st.diverged += d ? 1 : 0;
  st.extrapolated = b.extrapolated;
  return st;
}

// ---------------------------------------------------------------------------
// Serialization

inline std::string trajectory_csv(const TrajectoryBundle& b) {
  std::ostringstream os;
  os << "path_id,t,x1,x2,x3,u1,u2,u3\n";
  for (std::size_t p = 0; p < b.paths(); ++p) {
    for (std::size_t k = 0; k < b.times.size(); ++k) {
      const Vec3& x = b.states[p][k];
      const Vec3& u = b.controls[p][k];
      os << p << ',' << io::fmt(b.times[k]) << ',' << io::fmt(x[0]) << ',' << io::fmt(x[1]) << ',' << io::fmt(x[2])
         << ',' << io::fmt(u[0]) << ',' << io::fmt(u[1]) << ',' << io::fmt(u[2]) << '\n';
    }
  }
  return os.str();
}

inline nlohmann::json stats_json(const SummaryStats& st) {
  nlohmann::json cov = nlohmann::json::array();
  for (int r = 0; r < 3; ++r) cov.push_back({st.cov(r, 0), st.cov(r, 1), st.cov(r, 2)});
  return {{"terminal_mean", {st.mean[0], st.mean[1], st.mean[2]}},
          {"terminal_cov", cov},
          {"sinkhorn_divergence", st.divergence},
          {"debiased_sinkhorn_divergence", st.debiased_divergence},
          {"samples", st.samples},
          {"diverged_paths", st.diverged},
          {"extrapolated_queries", st.extrapolated}};
}

}  // namespace ebridge
