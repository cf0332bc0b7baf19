#pragma once

// Physics-informed training of the Schrödinger bridge network: HJB and FPK
// residuals on interior collocation points plus Sinkhorn losses that pin the
// normalized density head to the endpoint Gaussians.

#include "ebridge/core.hpp"
#include "ebridge/gaussian.hpp"
#include "ebridge/hammersley.hpp"
#include "ebridge/io.hpp"
#include "ebridge/mlp.hpp"
#include "ebridge/parallel.hpp"
#include "ebridge/rigid_body.hpp"
#include "ebridge/transport.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace ebridge {

struct ProblemSpec {
  BodyParams body;
  std::optional<InertiaSpec> inertia;  // absent when α, β are given directly
  double delta = 0.1;
  double horizon = 4.0;
  GaussianPdf rho0;
  GaussianPdf rhoT;
  Vec3 lower = Vec3::Constant(-5.0);
  Vec3 upper = Vec3::Constant(5.0);

  /// `allow_noiseless` admits δ = 0 (simulation only; training needs δ > 0).
  void validate(bool allow_noiseless = false) const {
    if (!std::isfinite(delta) || delta < 0.0 || (delta == 0.0 && !allow_noiseless)) {
      throw InvalidInput("delta must be positive");
    }
    if (!(horizon > 0.0) || !std::isfinite(horizon)) throw InvalidInput("horizon T must be positive");
    if (!((upper - lower).array() > 0.0).all()) throw InvalidInput("domain box must have positive extent");
    if (!body.alpha.allFinite() || !body.beta.allFinite()) throw InvalidInput("body parameters must be finite");
  }

  bool contains(const Vec3& x) const { return (x.array() >= lower.array()).all() && (x.array() <= upper.array()).all(); }

  /// Endpoint Gaussians whose ±6σ box is not inside the domain.
  std::vector<std::string> warnings() const {
    std::vector<std::string> out;
    auto check = [&](const GaussianPdf& g, const char* name) {
      for (int i = 0; i < 3; ++i) {
        const double r = 6.0 * g.axis_sigma(i);
        if (g.mean()[i] - r < lower[i] || g.mean()[i] + r > upper[i]) {
          out.push_back(std::string(name) + ": domain does not contain 6 sigma along axis " + std::to_string(i + 1));
          return;
        }
      }
    };
    check(rho0, "rho0");
    check(rhoT, "rhoT");
    return out;
  }

  Box space_box() const { return {lower, upper}; }
  Box feature_box() const {
    Eigen::Vector4d lo, hi;
    lo << lower, 0.0;
    hi << upper, horizon;
    return {lo, hi};
  }
};

// ---------------------------------------------------------------------------
// Residuals

/// ∂φ/∂t + ½‖β⊙∇φ‖² + ⟨∇φ, α⊙f(x)⟩ + δΔφ
inline double hjb_residual(const EvalResult& r, const Vec3& x, const ProblemSpec& s) {
  const Vec3 a = s.body.alpha.cwiseProduct(drift(x));
  return r.dphi_dt + 0.5 * s.body.beta.cwiseProduct(r.grad_x_phi).squaredNorm() + r.grad_x_phi.dot(a) +
         s.delta * r.lap_x_phi;
}

/// ∂ρ/∂t + ⟨α⊙f + β²⊙∇φ, ∇ρ⟩ + ρ Σβᵢ²∂²φ/∂xᵢ² − δΔρ
inline double fpk_residual(const EvalResult& r, const Vec3& x, const ProblemSpec& s) {
  const Vec3 b2 = s.body.beta.cwiseAbs2();
  const Vec3 v = s.body.alpha.cwiseProduct(drift(x)) + b2.cwiseProduct(r.grad_x_phi);
  return r.drho_dt + v.dot(r.grad_x_rho) + r.rho * b2.dot(r.d2_x_phi) - s.delta * r.lap_x_rho;
}

inline double hjb_residual(const MlpParams& p, const Eigen::Vector4d& xi, const ProblemSpec& s) {
  const double v = hjb_residual(forward_with_derivs(p, xi), xi.head<3>(), s);
  if (!std::isfinite(v)) throw NumericalError("non-finite HJB residual", xi);
  return v;
}

inline double fpk_residual(const MlpParams& p, const Eigen::Vector4d& xi, const ProblemSpec& s) {
  const double v = fpk_residual(forward_with_derivs(p, xi), xi.head<3>(), s);
  if (!std::isfinite(v)) throw NumericalError("non-finite FPK residual", xi);
  return v;
}

namespace detail {

// Adds c·∂r/∂(outputs) of the HJB residual at column k.
inline void hjb_adjoint(const EvalResult& r, const Vec3& x, const ProblemSpec& s, double c, EvalBatch& a,
                        Eigen::Index k) {
  const Vec3 dphi = s.body.beta.cwiseAbs2().cwiseProduct(r.grad_x_phi) + s.body.alpha.cwiseProduct(drift(x));
  a.phi_t[k] += c;
  a.phi_x.col(k) += c * dphi.array();
  a.phi_xx.col(k) += c * s.delta;
}

inline void fpk_adjoint(const EvalResult& r, const Vec3& x, const ProblemSpec& s, double c, EvalBatch& a,
                        Eigen::Index k) {
  const Vec3 b2 = s.body.beta.cwiseAbs2();
  const Vec3 v = s.body.alpha.cwiseProduct(drift(x)) + b2.cwiseProduct(r.grad_x_phi);
  a.rho_t[k] += c;
  a.rho_x.col(k) += c * v.array();
  a.phi_x.col(k) += c * b2.cwiseProduct(r.grad_x_rho).array();
  a.rho[k] += c * b2.dot(r.d2_x_phi);
  a.phi_xx.col(k) += c * r.rho * b2.array();
  a.rho_xx.col(k) -= c * s.delta;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Boundary losses

/// Discrepancy used for the endpoint losses. `Annealed` is the debiased
/// divergence with ε-annealing; `Unrolled` differentiates through a fixed
/// number of plain Sinkhorn iterations started from zero potentials.
enum class BoundaryDivergence { Annealed, Unrolled };

/// Fixed spatial support at one endpoint with its normalized target weights.
class BoundaryTarget {
 public:
  BoundaryTarget(Eigen::Matrix3Xd points, double time, const GaussianPdf& target, double epsilon, int iterations = 50,
                 BoundaryDivergence kind = BoundaryDivergence::Annealed)
      : points_(std::move(points)), time_(time) {
    if (points_.cols() < 2) throw InvalidInput("boundary loss needs at least two support points");
    if (!points_.allFinite()) throw InvalidInput("boundary points must be finite");
    VectorXd logw(points_.cols());
    for (Index k = 0; k < points_.cols(); ++k) logw[k] = target.log_pdf(points_.col(k));
    // Scaled by the largest density so the normalization cannot underflow;
    // atoms beyond double range keep the smallest positive weight.
    VectorXd w = (logw.array() - logw.maxCoeff()).exp().max(std::numeric_limits<double>::min());
    weights_ = w / w.sum();
    if (kind == BoundaryDivergence::Annealed) {
      annealed_.emplace(points_.transpose(), weights_, epsilon, iterations);
    } else {
      unrolled_.emplace(points_.transpose(), weights_, epsilon, iterations);
    }
  }

  const Eigen::Matrix3Xd& points() const { return points_; }
  double time() const { return time_; }
  const VectorXd& weights() const { return weights_; }
  BoundaryDivergence kind() const { return annealed_ ? BoundaryDivergence::Annealed : BoundaryDivergence::Unrolled; }

  /// Divergence from normalized weights `a` on the support to the target.
  UnrolledSinkhorn::Output divergence(const VectorXd& a, bool with_grad) const {
    return annealed_ ? annealed_->evaluate(a, with_grad) : unrolled_->evaluate(a, with_grad);
  }

  Eigen::Matrix4Xd features() const {
    Eigen::Matrix4Xd xi(4, points_.cols());
    xi.topRows<3>() = points_;
    xi.row(3).setConstant(time_);
    return xi;
  }

  /// Loss value when the network weights equal the target weights.
  double self_divergence() const { return divergence(weights_, false).value; }

 private:
  Eigen::Matrix3Xd points_;
  double time_;
  VectorXd weights_;
  std::optional<AnnealedSinkhorn> annealed_;
  std::optional<DebiasedSinkhorn> unrolled_;
};

namespace detail {

inline VectorXd normalized_weights(const Eigen::ArrayXd& rho) {
  const double S = rho.sum();
  if (!(S > 0.0) || !std::isfinite(S)) throw InvalidInput("boundary density weights are all zero or non-finite");
  return (rho / S).matrix();
}

}  // namespace detail

/// Debiased Sinkhorn divergence between the normalized network density on
/// the support and the target weights on the same support.
inline double boundary_loss(const MlpParams& p, const BoundaryTarget& bt) {
  const auto out = evaluate_batch(p, bt.features(), JetOrder::Value);
  return bt.divergence(detail::normalized_weights(out.rho), false).value;
}

inline double boundary_loss(const MlpParams& p, const Eigen::Matrix3Xd& points, double time, const GaussianPdf& target,
                            double epsilon, BoundaryDivergence kind = BoundaryDivergence::Annealed, int iterations = 50) {
  return boundary_loss(p, BoundaryTarget(points, time, target, epsilon, iterations, kind));
}

inline LossGrad boundary_loss_grad(const MlpParams& p, const BoundaryTarget& bt) {
  const Eigen::Matrix4Xd xi = bt.features();
  return loss_param_grad(p, xi, JetOrder::Value, [&](const EvalBatch& o, EvalBatch& adj) {
    const double S = o.rho.sum();
    const VectorXd a = detail::normalized_weights(o.rho);
    const auto res = bt.divergence(a, true);
    // a = ρ/S  ⇒  ∂L/∂ρ_k = (ā_k − ⟨ā, a⟩)/S
    adj.rho = (res.grad.array() - res.grad.dot(a)) / S;
    return res.value;
  });
}

// ---------------------------------------------------------------------------
// Collocation and losses

struct CollocationSet {
  Eigen::Matrix4Xd interior;
  Eigen::Matrix3Xd boundary0;
  Eigen::Matrix3Xd boundaryT;
};

namespace detail {

// Half of the support spread over X, half over the ±4σ box of the endpoint
// Gaussian (clipped to X), both from 3-D Hammersley sets.
inline Eigen::Matrix3Xd endpoint_support(const ProblemSpec& s, const GaussianPdf& g, std::size_t count) {
  const std::size_t global = count / 2;
  const std::size_t local = count - global;
  Vec3 lo, hi;
  for (int i = 0; i < 3; ++i) {
    lo[i] = std::max(s.lower[i], g.mean()[i] - 4.0 * g.axis_sigma(i));
    hi[i] = std::min(s.upper[i], g.mean()[i] + 4.0 * g.axis_sigma(i));
  }
  Eigen::Matrix3Xd pts(3, count);
  if (global > 0) pts.leftCols(global) = hammersley(global, 3, s.space_box());
  if ((hi - lo).minCoeff() > 0.0) {
    pts.rightCols(local) = hammersley(local, 3, Box{lo, hi}, 1, local + 1);
  } else {
    pts.rightCols(local) = hammersley(local, 3, s.space_box(), global, count);
  }
  return pts;
}

}  // namespace detail

/// 80% interior (4-D Hammersley, strictly inside X×(0,T)) and 10% at each
/// endpoint. `boundary_cap` > 0 limits each endpoint support.
inline CollocationSet make_collocation(const ProblemSpec& s, std::size_t n_total, std::size_t boundary_cap = 0) {
  if (n_total < 20) throw InvalidInput("n_total must be at least 20");
  std::size_t nb = (n_total + 5) / 10;
  const std::size_t ni = n_total - 2 * nb;
  if (boundary_cap > 0) nb = std::min(nb, std::max<std::size_t>(boundary_cap, 2));
  CollocationSet c;
  c.interior = hammersley(ni, 4, s.feature_box(), 1, ni + 1);
  c.boundary0 = detail::endpoint_support(s, s.rho0, nb);
  c.boundaryT = detail::endpoint_support(s, s.rhoT, nb);
  return c;
}

struct LossWeights {
  double phi = 1.0;
  double rho = 1.0;
  double rho0 = 1.0;
  double rhoT = 1.0;
};

struct LossComponents {
  double phi = 0.0;
  double rho = 0.0;
  double rho0 = 0.0;
  double rhoT = 0.0;
  double total = 0.0;
};

/// How the FPK term is scaled. `None` is the plain mean square. `MeanRho2`
/// divides it by the batch mean of ρ², which makes it invariant to a global
/// rescaling of the density head (the boundary losses already are).
/// `Relative` uses the pointwise residual divided by ρ, the log-density form
/// of the same equation, so low-density regions weigh as much as the bulk.
enum class FpkScaling { None, MeanRho2, Relative };

/// Mean squared HJB and FPK residuals over interior points with the
/// gradient of w_φ·L_φ + w_ρ·L_ρ. Fixed 256-point chunks summed in order.
struct InteriorLoss {
  double phi = 0.0;
  double rho = 0.0;
  VectorXd grad;
};

inline InteriorLoss interior_loss(const MlpParams& p, const Eigen::Matrix4Xd& pts, const ProblemSpec& s,
                                  const LossWeights& w, bool with_grad, FpkScaling scaling = FpkScaling::None) {
  constexpr Index kChunk = 256;
  const Index n = pts.cols();
  if (n == 0) throw InvalidInput("interior collocation set is empty");
  const Index chunks = (n + kChunk - 1) / kChunk;
  struct Part {
    MlpJet jet;
    Eigen::ArrayXd h, f;
    double hh = 0, ff = 0, rr = 0;
    VectorXd g;
  };
  std::vector<Part> parts(chunks);
  auto cols = [&](std::size_t c) {
    const Index b = static_cast<Index>(c) * kChunk;
    return std::pair<Index, Index>{b, std::min(kChunk, n - b)};
  };

  parallel_for(static_cast<std::size_t>(chunks), [&](std::size_t cb, std::size_t ce) {
    for (std::size_t c = cb; c < ce; ++c) {
      const auto [b, len] = cols(c);
      Part& part = parts[c];
      part.jet.forward(p, pts.middleCols(b, len), JetOrder::Second);
      const EvalBatch& o = part.jet.outputs();
      part.h.resize(len);
      part.f.resize(len);
      for (Index k = 0; k < len; ++k) {
        const EvalResult r = o.at(k);
        const Vec3 x = pts.col(b + k).head<3>();
        part.h[k] = hjb_residual(r, x, s);
        part.f[k] = fpk_residual(r, x, s);
        if (scaling == FpkScaling::Relative) {
          if (!(r.rho > 0.0)) throw NumericalError("density head underflowed", pts.col(b + k));
          part.f[k] /= r.rho;
        }
        if (!std::isfinite(part.h[k]) || !std::isfinite(part.f[k])) {
          throw NumericalError("non-finite PDE residual", pts.col(b + k));
        }
      }
      part.hh = part.h.square().sum();
      part.ff = part.f.square().sum();
      part.rr = o.rho.square().sum();
    }
  });

  const double inv_n = 1.0 / static_cast<double>(n);
  double hh = 0, ff = 0, rr = 0;
  for (const auto& part : parts) {
    hh += part.hh;
    ff += part.ff;
    rr += part.rr;
  }
  const double Q = scaling == FpkScaling::MeanRho2 ? rr * inv_n : 1.0;
  if (!(Q > 0.0)) throw NumericalError("density head vanished on the interior batch", pts.col(0));
  InteriorLoss out;
  out.phi = hh * inv_n;
  out.rho = ff * inv_n / Q;
  if (!with_grad) return out;

  parallel_for(static_cast<std::size_t>(chunks), [&](std::size_t cb, std::size_t ce) {
    for (std::size_t c = cb; c < ce; ++c) {
      const auto [b, len] = cols(c);
      Part& part = parts[c];
      const EvalBatch& o = part.jet.outputs();
      EvalBatch adj = EvalBatch::zeros(len);
      for (Index k = 0; k < len; ++k) {
        const EvalResult r = o.at(k);
        const Vec3 x = pts.col(b + k).head<3>();
        detail::hjb_adjoint(r, x, s, 2.0 * w.phi * part.h[k] * inv_n, adj, k);
        if (scaling == FpkScaling::Relative) {
          const double c = 2.0 * w.rho * part.f[k] * inv_n;
          detail::fpk_adjoint(r, x, s, c / r.rho, adj, k);
          adj.rho[k] -= c * part.f[k] / r.rho;
        } else {
          detail::fpk_adjoint(r, x, s, 2.0 * w.rho * part.f[k] * inv_n / Q, adj, k);
        }
        if (scaling == FpkScaling::MeanRho2) adj.rho[k] -= w.rho * out.rho / Q * 2.0 * r.rho * inv_n;
      }
      part.g = part.jet.backward(adj);
    }
  });
  out.grad = VectorXd::Zero(p.size());
  for (const auto& part : parts) out.grad += part.g;
  return out;
}

/// The four loss components on the full collocation set and their weighted sum.
inline LossComponents total_loss(const MlpParams& p, const CollocationSet& c, const ProblemSpec& s, double epsilon,
                                 const LossWeights& w = {}, int sinkhorn_iters = 50,
                                 FpkScaling scaling = FpkScaling::None,
                                 BoundaryDivergence kind = BoundaryDivergence::Annealed) {
  LossComponents out;
  const auto in = interior_loss(p, c.interior, s, w, false, scaling);
  out.phi = in.phi;
  out.rho = in.rho;
  out.rho0 = boundary_loss(p, BoundaryTarget(c.boundary0, 0.0, s.rho0, epsilon, sinkhorn_iters, kind));
  out.rhoT = boundary_loss(p, BoundaryTarget(c.boundaryT, s.horizon, s.rhoT, epsilon, sinkhorn_iters, kind));
  out.total = w.phi * out.phi + w.rho * out.rho + w.rho0 * out.rho0 + w.rhoT * out.rhoT;
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t n_total = 100000;
  long epochs = 80000;
  std::size_t resample_count = 35000;
  long resample_period = 40000;
  double epsilon = 0.1;
  double lr = 1e-3;
  LossWeights weights;
  FpkScaling fpk_scaling = FpkScaling::Relative;
  BoundaryDivergence boundary_divergence = BoundaryDivergence::Annealed;
  std::size_t batch_size = 4096;  // interior points per step
  std::size_t boundary_cap = 0;   // 0: keep the full 10% endpoint share
  int sinkhorn_iters = 50;
  std::vector<int> widths{4, 70, 70, 70, 2};
  bool use_scales = false;
  double init_scale = 1.0;
  std::uint64_t seed = 1;
  bool deterministic = false;
  long checkpoint_period = 0;  // 0: only at the end

  void validate() const {
    if (n_total < 20) throw InvalidInput("train.n must be at least 20");
    if (epochs < 0) throw InvalidInput("train.epochs must be non-negative");
    if (resample_period < 1) throw InvalidInput("train.resample.period must be positive");
    if (!(epsilon > 0.0)) throw InvalidInput("train.epsilon must be positive");
    if (!(lr > 0.0)) throw InvalidInput("train.lr must be positive");
    if (batch_size < 1) throw InvalidInput("train.batch_size must be positive");
    if (sinkhorn_iters < 2) throw InvalidInput("train.sinkhorn_iters must be at least 2");
    for (double v : {weights.phi, weights.rho, weights.rho0, weights.rhoT})
      if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidInput("loss weights must be non-negative");
  }
};

struct HistoryRow {
  long epoch = 0;
  LossComponents loss;
};

struct TrainedBridge {
  MlpParams params;
  ProblemSpec spec;
  AdamState adam;
  long epoch = 0;  // completed optimizer steps
  std::vector<HistoryRow> history;
  std::uint64_t seed = 0;
  std::string config_hash;
};

struct TrainHooks {
  std::function<void(const TrainedBridge&)> checkpoint;
  std::function<void(const HistoryRow&)> progress;
  const TrainedBridge* resume = nullptr;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Interior set after every resampling event up to and including `epoch`.
inline void apply_resampling(Eigen::Matrix4Xd& interior, const ProblemSpec& s, const TrainConfig& cfg, long from,
                             long to) {
  const Index n = interior.cols();
  const Index count = std::min<Index>(static_cast<Index>(cfg.resample_count), n);
  if (count == 0) return;
  const Box box = s.feature_box();
  for (long e = from + 1; e <= to; ++e) {
    if (e % cfg.resample_period != 0) continue;
    const long event = e / cfg.resample_period;
    std::mt19937_64 rng(mix_seed(cfg.seed, 0x5EED0000ull + static_cast<std::uint64_t>(event)));
    std::uniform_real_distribution<double> U(0.0, 1.0);
    const Index start = ((event - 1) * count) % n;
    for (Index k = 0; k < count; ++k) {
      auto col = interior.col((start + k) % n);
      for (int d = 0; d < 4; ++d) col[d] = box.lower[d] + (box.upper[d] - box.lower[d]) * U(rng);
    }
  }
}

// Interior mini-batch for a given epoch: consecutive slices of a per-pass
// shuffled order, so the sequence depends only on (seed, epoch).
inline Eigen::Matrix4Xd interior_batch(const Eigen::Matrix4Xd& interior, std::size_t batch, std::uint64_t seed,
                                       long epoch) {
  const Index n = interior.cols();
  const Index B = std::min<Index>(static_cast<Index>(batch), n);
  if (B == n) return interior;
  Eigen::Matrix4Xd out(4, B);
  const Index start = static_cast<Index>(epoch) * B;
  std::vector<Index> order;
  long pass = -1;
  for (Index k = 0; k < B; ++k) {
    const Index g = start + k;
    const long pk = static_cast<long>(g / n);
    if (pk != pass) {
      pass = pk;
      order.resize(n);
      for (Index i = 0; i < n; ++i) order[i] = i;
      std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(pass)));
      std::shuffle(order.begin(), order.end(), rng);
    }
    out.col(k) = interior.col(order[g % n]);
  }
  return out;
}

}  // namespace detail

/// Loss components and gradient for one optimizer step.
struct StepResult {
  LossComponents loss;
  VectorXd grad;
};

inline StepResult training_step(const MlpParams& p, const Eigen::Matrix4Xd& batch, const BoundaryTarget& b0,
                                const BoundaryTarget& bT, const ProblemSpec& s, const LossWeights& w,
                                FpkScaling scaling = FpkScaling::None) {
  StepResult r;
  const auto in = interior_loss(p, batch, s, w, true, scaling);
  r.loss.phi = in.phi;
  r.loss.rho = in.rho;
  r.grad = in.grad;
  if (w.rho0 > 0.0) {
    const auto g0 = boundary_loss_grad(p, b0);
    r.loss.rho0 = g0.loss;
    r.grad += w.rho0 * g0.grad;
  } else {
    r.loss.rho0 = boundary_loss(p, b0);
  }
  if (w.rhoT > 0.0) {
    const auto gT = boundary_loss_grad(p, bT);
    r.loss.rhoT = gT.loss;
    r.grad += w.rhoT * gT.grad;
  } else {
    r.loss.rhoT = boundary_loss(p, bT);
  }
  r.loss.total = w.phi * r.loss.phi + w.rho * r.loss.rho + w.rho0 * r.loss.rho0 + w.rhoT * r.loss.rhoT;
  return r;
}

/// Runs `cfg.epochs` Adam steps; each step uses one interior mini-batch and
/// the full endpoint supports. On a non-finite loss the last finite state is
/// handed to the checkpoint hook and NumericalError is rethrown.
inline TrainedBridge train(const ProblemSpec& s, const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  s.validate();
  cfg.validate();
  TrainedBridge tb;
  if (hooks.resume) {
    tb = *hooks.resume;
    if (tb.params.widths() != cfg.widths) throw InvalidInput("checkpoint widths do not match the configuration");
    tb.adam.lr = cfg.lr;
  } else {
    tb.params = init_mlp(cfg.widths, cfg.seed, cfg.init_scale, cfg.use_scales);
    tb.adam = AdamState::for_params(tb.params, cfg.lr);
  }
  tb.spec = s;
  tb.seed = cfg.seed;

  CollocationSet c = make_collocation(s, cfg.n_total, cfg.boundary_cap);
  detail::apply_resampling(c.interior, s, cfg, 0, tb.epoch);
  const BoundaryTarget b0(c.boundary0, 0.0, s.rho0, cfg.epsilon, cfg.sinkhorn_iters, cfg.boundary_divergence);
  const BoundaryTarget bT(c.boundaryT, s.horizon, s.rhoT, cfg.epsilon, cfg.sinkhorn_iters, cfg.boundary_divergence);

  while (tb.epoch < cfg.epochs) {
    const Eigen::Matrix4Xd batch = detail::interior_batch(c.interior, cfg.batch_size, cfg.seed, tb.epoch);
    StepResult step;
    try {
      step = training_step(tb.params, batch, b0, bT, s, cfg.weights, cfg.fpk_scaling);
      if (!std::isfinite(step.loss.total) || !step.grad.allFinite()) {
        throw NumericalError("non-finite training loss", batch.col(0));
      }
    } catch (const NumericalError&) {
      if (hooks.checkpoint) hooks.checkpoint(tb);
      throw;
    }
    adam_step(tb.params, step.grad, tb.adam);
    ++tb.epoch;
    HistoryRow row{tb.epoch, step.loss};
    tb.history.push_back(row);
    if (hooks.progress) hooks.progress(row);
    detail::apply_resampling(c.interior, s, cfg, tb.epoch - 1, tb.epoch);
    if (hooks.checkpoint && cfg.checkpoint_period > 0 && tb.epoch % cfg.checkpoint_period == 0 &&
        tb.epoch < cfg.epochs) {
      hooks.checkpoint(tb);
    }
  }
  if (hooks.checkpoint) hooks.checkpoint(tb);
  return tb;
}

// ---------------------------------------------------------------------------
// Serialization

inline std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::ostringstream os;
  os << "epoch,L_phi,L_rho,L_rho0,L_rhoT,total\n";
  for (const auto& r : rows) {
    os << r.epoch << ',' << io::fmt(r.loss.phi) << ',' << io::fmt(r.loss.rho) << ',' << io::fmt(r.loss.rho0) << ','
       << io::fmt(r.loss.rhoT) << ',' << io::fmt(r.loss.total) << '\n';
  }
  return os.str();
}

inline nlohmann::json checkpoint_json(const TrainedBridge& tb) {
  nlohmann::json j = params_to_json(tb.params);
  j["format"] = 1;
  j["adam"] = adam_to_json(tb.adam);
  j["epoch"] = tb.epoch;
  j["rng"] = {{"seed", tb.seed}, {"epoch", tb.epoch}};
  j["config_hash"] = tb.config_hash;
  return j;
}

/// Restores network, optimizer and epoch; the problem spec comes from the
/// run configuration, not from the checkpoint.
inline TrainedBridge checkpoint_from_json(const nlohmann::json& j, const ProblemSpec& s) {
  try {
    if (!j.is_object() || j.value("format", 0) != 1) throw InvalidInput("unsupported checkpoint format");
    TrainedBridge tb;
    tb.params = params_from_json(j);
    tb.adam = adam_from_json(j.at("adam"), tb.params);
    tb.epoch = j.at("epoch").get<long>();
    tb.seed = j.at("rng").at("seed").get<std::uint64_t>();
    tb.config_hash = j.value("config_hash", std::string{});
    tb.spec = s;
    return tb;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("malformed checkpoint: ") + e.what());
  }
}

}  // namespace ebridge
