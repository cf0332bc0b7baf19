#pragma once

// Feed-forward tanh network ξ = (ω₁, ω₂, ω₃, t) ↦ (φ, ρ) with exact input
// derivatives and reverse-mode parameter gradients.
//
// Derivatives are carried forward as jets. For a batch of B points every
// layer holds a stacked matrix of 8 channel blocks, each B columns wide:
//
//   [ value | ∂/∂x₁ | ∂/∂x₂ | ∂/∂x₃ | ∂/∂t | ∂²/∂x₁² | ∂²/∂x₂² | ∂²/∂x₃² ]
//
// An affine layer maps every block by W (the bias touches the value block
// only). Through h = tanh(a) the blocks transform as
//   h_k  = tanh'(a) a_k,       h_kk = tanh''(a) a_k² + tanh'(a) a_kk.
// The backward pass is the adjoint of exactly this computation, so parameter
// gradients of losses built from input derivatives come out exact.

#include "ebridge/core.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace ebridge {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Network weights in a single flat vector. Each layer stores its weight
/// matrix column-major, then its bias, then (when enabled) one trainable
/// output scale.
class MlpParams {
 public:
  MlpParams() = default;
  MlpParams(std::vector<int> widths, bool use_scales) : widths_(std::move(widths)), use_scales_(use_scales) {
    if (widths_.size() < 2) throw InvalidInput("network needs at least an input and an output width");
    if (widths_.front() != 4) throw InvalidInput("network input width must be 4 (ω₁, ω₂, ω₃, t)");
    if (widths_.back() != 2) throw InvalidInput("network output width must be 2 (φ, ρ)");
    Index off = 0;
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
      if (widths_[l] < 1 || widths_[l + 1] < 1) throw InvalidInput("network widths must be positive");
      Slot s{widths_[l], widths_[l + 1], off, 0, -1};
      off += Index(s.in) * s.out;
      s.b = off;
      off += s.out;
      if (use_scales_) s.s = off++;
      slots_.push_back(s);
    }
    theta_ = VectorXd::Zero(off);
  }

  const std::vector<int>& widths() const { return widths_; }
  bool use_scales() const { return use_scales_; }
  int layers() const { return static_cast<int>(slots_.size()); }
  Index size() const { return theta_.size(); }

  VectorXd& theta() { return theta_; }
  const VectorXd& theta() const { return theta_; }

  Eigen::Map<MatrixXd> W(int l) { return {theta_.data() + slots_[l].w, slots_[l].out, slots_[l].in}; }
  Eigen::Map<const MatrixXd> W(int l) const { return {theta_.data() + slots_[l].w, slots_[l].out, slots_[l].in}; }
  Eigen::Map<VectorXd> b(int l) { return {theta_.data() + slots_[l].b, slots_[l].out}; }
  Eigen::Map<const VectorXd> b(int l) const { return {theta_.data() + slots_[l].b, slots_[l].out}; }
  double scale(int l) const { return use_scales_ ? theta_[slots_[l].s] : 1.0; }
  double& scale_ref(int l) { return theta_[slots_[l].s]; }

  /// Offsets into a flat vector of the same layout (for gradients).
  Index w_offset(int l) const { return slots_[l].w; }
  Index b_offset(int l) const { return slots_[l].b; }
  Index s_offset(int l) const { return slots_[l].s; }

  bool same_shape(const MlpParams& o) const { return widths_ == o.widths_ && use_scales_ == o.use_scales_; }

 private:
  struct Slot {
    int in, out;
    Index w, b, s;
  };
  std::vector<int> widths_;
  bool use_scales_ = false;
  std::vector<Slot> slots_;
  VectorXd theta_;
};

/// Uniform weights in ±scale/√fan_in, zero biases, unit output scales.
inline MlpParams init_mlp(const std::vector<int>& widths, std::uint64_t seed, double scale = 1.0,
                          bool use_scales = false) {
  MlpParams p(widths, use_scales);
  std::mt19937_64 rng(seed);
  for (int l = 0; l < p.layers(); ++l) {
    auto W = p.W(l);
    const double bound = scale / std::sqrt(static_cast<double>(W.cols()));
    std::uniform_real_distribution<double> U(-bound, bound);
    for (Index c = 0; c < W.cols(); ++c)
      for (Index r = 0; r < W.rows(); ++r) W(r, c) = bound > 0.0 ? U(rng) : 0.0;
    if (use_scales) p.scale_ref(l) = 1.0;
  }
  return p;
}

/// Network outputs and their input derivatives at a single point.
struct EvalResult {
  double phi = 0.0;
  double rho = 0.0;
  double dphi_dt = 0.0;
  double drho_dt = 0.0;
  Vec3 grad_x_phi = Vec3::Zero();
  Vec3 grad_x_rho = Vec3::Zero();
  Vec3 d2_x_phi = Vec3::Zero();  // ∂²φ/∂xᵢ², per axis
  Vec3 d2_x_rho = Vec3::Zero();
  double lap_x_phi = 0.0;
  double lap_x_rho = 0.0;
};

/// Batched outputs (one column per point). Also used for adjoints.
struct EvalBatch {
  Eigen::ArrayXd phi, rho, phi_t, rho_t;
  Eigen::Array3Xd phi_x, rho_x, phi_xx, rho_xx;

  static EvalBatch zeros(Index n) {
    EvalBatch e;
    e.phi = e.rho = e.phi_t = e.rho_t = Eigen::ArrayXd::Zero(n);
    e.phi_x = e.rho_x = e.phi_xx = e.rho_xx = Eigen::Array3Xd::Zero(3, n);
    return e;
  }
  Index size() const { return phi.size(); }

  EvalResult at(Index k) const {
    EvalResult r;
    r.phi = phi[k];
    r.rho = rho[k];
    if (phi_t.size() == 0) return r;
    r.dphi_dt = phi_t[k];
    r.drho_dt = rho_t[k];
    r.grad_x_phi = phi_x.col(k).matrix();
    r.grad_x_rho = rho_x.col(k).matrix();
    r.d2_x_phi = phi_xx.col(k).matrix();
    r.d2_x_rho = rho_xx.col(k).matrix();
    r.lap_x_phi = r.d2_x_phi.sum();
    r.lap_x_rho = r.d2_x_rho.sum();
    return r;
  }

  bool all_finite() const {
    return phi.allFinite() && rho.allFinite() && phi_t.allFinite() && rho_t.allFinite() && phi_x.allFinite() &&
           rho_x.allFinite() && phi_xx.allFinite() && rho_xx.allFinite();
  }
};

/// Value: outputs only. First: plus the four first derivatives. Second: plus
/// the three spatial second derivatives.
enum class JetOrder { Value, First, Second };

/// One forward evaluation with everything kept for the reverse pass.
class MlpJet {
 public:
  static constexpr int kSecondChannels = 8;

  void forward(const MlpParams& p, const Eigen::Matrix4Xd& xi, JetOrder order) {
    params_ = &p;
    order_ = order;
    B_ = xi.cols();
    C_ = order == JetOrder::Second ? kSecondChannels : order == JetOrder::First ? 5 : 1;
    const int L = p.layers();
    H_.resize(L);
    U_.resize(L);

    // Input stack: value block is ξ, derivative blocks are unit vectors.
    H_[0] = MatrixXd::Zero(4, C_ * B_);
    H_[0].leftCols(B_) = xi;
    if (C_ > 1) {
      for (int k = 0; k < 4; ++k) H_[0].row(k).segment((1 + k) * B_, B_).setOnes();
    }

    for (int l = 0; l < L; ++l) {
      U_[l].noalias() = p.W(l) * H_[l];
      U_[l].leftCols(B_).colwise() += p.b(l);
      const double s = p.scale(l);
      if (l + 1 == L) {
        Z_ = s * U_[l];
        break;
      }
      H_[l + 1].resize(U_[l].rows(), C_ * B_);
      activate(s, U_[l], H_[l + 1]);
    }
    fill_outputs();
  }

  const EvalBatch& outputs() const { return out_; }

  /// Parameter gradient of Σ ⟨adjoint, outputs⟩.
  VectorXd backward(const EvalBatch& adj) const {
    const MlpParams& p = *params_;
    const int L = p.layers();
    VectorXd grad = VectorXd::Zero(p.size());

    MatrixXd Abar = output_adjoint(adj);  // adjoint of the scaled pre-activation
    for (int l = L - 1; l >= 0; --l) {
      const double s = p.scale(l);
      if (p.use_scales()) grad[p.s_offset(l)] = (Abar.array() * U_[l].array()).sum();
      MatrixXd Ubar = s * Abar;
      Eigen::Map<MatrixXd>(grad.data() + p.w_offset(l), p.W(l).rows(), p.W(l).cols()).noalias() =
          Ubar * H_[l].transpose();
      Eigen::Map<VectorXd>(grad.data() + p.b_offset(l), p.b(l).size()) = Ubar.leftCols(B_).rowwise().sum();
      if (l == 0) break;
      MatrixXd Hbar = p.W(l).transpose() * Ubar;
      Abar = activation_adjoint(l - 1, Hbar);
    }
    return grad;
  }

  Index batch() const { return B_; }

 private:
  auto block(MatrixXd& M, int c) const { return M.middleCols(c * B_, B_).array(); }
  auto block(const MatrixXd& M, int c) const { return M.middleCols(c * B_, B_).array(); }

  void activate(double s, const MatrixXd& U, MatrixXd& H) const {
    const auto T = (s * block(U, 0)).tanh().eval();
    block(H, 0) = T;
    if (C_ == 1) return;
    const auto t1 = (1.0 - T.square()).eval();
    const auto t2 = (-2.0 * T * t1).eval();
    for (int k = 0; k < 4; ++k) block(H, 1 + k) = t1 * (s * block(U, 1 + k));
    if (C_ < kSecondChannels) return;
    for (int k = 0; k < 3; ++k) {
      const auto ak = (s * block(U, 1 + k)).eval();
      block(H, 5 + k) = t2 * ak.square() + t1 * (s * block(U, 5 + k));
    }
  }

  // Adjoint of the tanh layer whose output is H_[l + 1], given its adjoint;
  // returns the adjoint of that layer's scaled pre-activation.
  MatrixXd activation_adjoint(int l, const MatrixXd& Hbar) const {
    const double s = params_->scale(l);
    const MatrixXd& U = U_[l];
    const auto T = block(H_[l + 1], 0);
    MatrixXd Abar(Hbar.rows(), Hbar.cols());
    const auto t1 = (1.0 - T.square()).eval();
    if (C_ == 1) {
      block(Abar, 0) = t1 * block(Hbar, 0);
      return Abar;
    }
    const auto t2 = (-2.0 * T * t1).eval();
    const auto t3 = (-2.0 * t1.square() - 2.0 * T * t2).eval();
    auto av = block(Abar, 0);
    av = t1 * block(Hbar, 0);
    for (int k = 0; k < 4; ++k) {
      const auto ak = (s * block(U, 1 + k)).eval();
      block(Abar, 1 + k) = t1 * block(Hbar, 1 + k);
      av += t2 * ak * block(Hbar, 1 + k);
    }
    if (C_ < kSecondChannels) return Abar;
    for (int k = 0; k < 3; ++k) {
      const auto ak = (s * block(U, 1 + k)).eval();
      const auto akk = (s * block(U, 5 + k)).eval();
      const auto hb = block(Hbar, 5 + k);
      block(Abar, 5 + k) = t1 * hb;
      block(Abar, 1 + k) += 2.0 * t2 * ak * hb;
      av += (t3 * ak.square() + t2 * akk) * hb;
    }
    return Abar;
  }

  void fill_outputs() {
    out_ = EvalBatch{};
    const auto zphi = Z_.row(0).array();
    const auto z = Z_.row(1).array();
    const Eigen::ArrayXd zv = z.head(B_).transpose();
    sig_ = zv.unaryExpr([](double v) { return sigmoid(v); });
    out_.phi = zphi.head(B_).transpose();
    out_.rho = zv.unaryExpr([](double v) { return softplus(v); });
    if (C_ == 1) return;
    const Eigen::ArrayXd ds = sig_ * (1.0 - sig_);
    out_.phi_x.resize(3, B_);
    out_.rho_x.resize(3, B_);
    out_.phi_xx.resize(3, B_);
    out_.rho_xx.resize(3, B_);
    out_.phi_t = zphi.segment(4 * B_, B_).transpose();
    out_.rho_t = sig_ * z.segment(4 * B_, B_).transpose();
    out_.phi_xx.setZero();
    out_.rho_xx.setZero();
    for (int k = 0; k < 3; ++k) {
      const Eigen::ArrayXd zk = z.segment((1 + k) * B_, B_).transpose();
      out_.phi_x.row(k) = zphi.segment((1 + k) * B_, B_);
      out_.rho_x.row(k) = (sig_ * zk).transpose();
      if (C_ < kSecondChannels) continue;
      const Eigen::ArrayXd zkk = z.segment((5 + k) * B_, B_).transpose();
      out_.phi_xx.row(k) = zphi.segment((5 + k) * B_, B_);
      out_.rho_xx.row(k) = (ds * zk.square() + sig_ * zkk).transpose();
    }
  }

  // Adjoint of the output pre-activation stack Z from output adjoints.
  MatrixXd output_adjoint(const EvalBatch& adj) const {
    MatrixXd Zbar = MatrixXd::Zero(2, C_ * B_);
    Zbar.row(0).head(B_) = adj.phi.matrix().transpose();
    Eigen::ArrayXd zv_bar = sig_ * adj.rho;
    if (C_ > 1) {
      const auto z = Z_.row(1).array();
      const Eigen::ArrayXd ds = sig_ * (1.0 - sig_);
      const Eigen::ArrayXd dds = ds * (1.0 - 2.0 * sig_);
      Zbar.row(0).segment(4 * B_, B_) = adj.phi_t.matrix().transpose();
      Zbar.row(1).segment(4 * B_, B_) = (sig_ * adj.rho_t).matrix().transpose();
      const Eigen::ArrayXd zt = z.segment(4 * B_, B_).transpose();
      zv_bar += ds * zt * adj.rho_t;
      for (int k = 0; k < 3; ++k) {
        const Eigen::ArrayXd zk = z.segment((1 + k) * B_, B_).transpose();
        const Eigen::ArrayXd rb = adj.rho_x.row(k).transpose();
        Zbar.row(0).segment((1 + k) * B_, B_) = adj.phi_x.row(k).matrix();
        Zbar.row(1).segment((1 + k) * B_, B_) = (sig_ * rb).matrix().transpose();
        zv_bar += ds * zk * rb;
        if (C_ < kSecondChannels) continue;
        const Eigen::ArrayXd zkk = z.segment((5 + k) * B_, B_).transpose();
        const Eigen::ArrayXd rbb = adj.rho_xx.row(k).transpose();
        Zbar.row(0).segment((5 + k) * B_, B_) = adj.phi_xx.row(k).matrix();
        Zbar.row(1).segment((1 + k) * B_, B_) += (2.0 * ds * zk * rbb).matrix().transpose();
        Zbar.row(1).segment((5 + k) * B_, B_) = (sig_ * rbb).matrix().transpose();
        zv_bar += (dds * zk.square() + ds * zkk) * rbb;
      }
    }
    Zbar.row(1).head(B_) = zv_bar.matrix().transpose();
    return Zbar;
  }

  const MlpParams* params_ = nullptr;
  JetOrder order_ = JetOrder::Value;
  Index B_ = 0;
  int C_ = 1;
  std::vector<MatrixXd> H_;  // layer inputs (stacked channels)
  std::vector<MatrixXd> U_;  // unscaled affine outputs
  MatrixXd Z_;               // scaled output pre-activation
  Eigen::ArrayXd sig_;       // σ(z) of the ρ head
  EvalBatch out_;
};

inline EvalBatch evaluate_batch(const MlpParams& p, const Eigen::Matrix4Xd& xi, JetOrder order) {
  MlpJet jet;
  jet.forward(p, xi, order);
  return jet.outputs();
}

struct PhiRho {
  double phi;
  double rho;
};

inline PhiRho forward(const MlpParams& p, const Eigen::Vector4d& xi) {
  const auto out = evaluate_batch(p, xi, JetOrder::Value);
  return {out.phi[0], out.rho[0]};
}

inline EvalResult forward_with_derivs(const MlpParams& p, const Eigen::Vector4d& xi) {
  return evaluate_batch(p, xi, JetOrder::Second).at(0);
}

inline Eigen::Vector4d feature(const Vec3& x, double t) { return {x[0], x[1], x[2], t}; }

struct LossGrad {
  double loss = 0.0;
  VectorXd grad;
};

/// Reverse-mode gradient of a scalar loss built from a batch of network
/// evaluations. `closure(outputs, adjoint)` returns the loss and fills the
/// adjoint (∂loss/∂output for every output entry, pre-sized to zeros).
template <class Closure>
LossGrad loss_param_grad(const MlpParams& p, const Eigen::Matrix4Xd& xi, JetOrder order, Closure&& closure) {
  MlpJet jet;
  jet.forward(p, xi, order);
  EvalBatch adj = EvalBatch::zeros(xi.cols());
  const double loss = closure(jet.outputs(), adj);
  if (!std::isfinite(loss)) {
    const auto& o = jet.outputs();
    for (Index k = 0; k < xi.cols(); ++k) {
      const bool bad = !std::isfinite(o.phi[k]) || !std::isfinite(o.rho[k]) ||
                       (order == JetOrder::Second && !o.at(k).grad_x_phi.allFinite()) ||
                       !std::isfinite(adj.phi[k]) || !std::isfinite(adj.rho[k]) ||
                       (order == JetOrder::Second && !(std::isfinite(adj.phi_t[k]) && std::isfinite(adj.rho_t[k])));
      if (bad) throw NumericalError("non-finite loss at collocation point", xi.col(k));
    }
    throw NumericalError("non-finite loss", xi.col(0));
  }
  return {loss, jet.backward(adj)};
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_hat = 1e-8;
  long step = 0;
  VectorXd m;
  VectorXd v;

  static AdamState for_params(const MlpParams& p, double lr = 1e-3) {
    AdamState s;
    s.lr = lr;
    s.m = VectorXd::Zero(p.size());
    s.v = VectorXd::Zero(p.size());
    return s;
  }
};

inline void adam_step(MlpParams& p, const VectorXd& grad, AdamState& s) {
  if (grad.size() != p.size() || s.m.size() != p.size() || s.v.size() != p.size()) {
    throw InvalidInput("adam_step: gradient/state shape does not match parameters");
  }
  ++s.step;
  s.m = s.beta1 * s.m + (1.0 - s.beta1) * grad;
  s.v = s.beta2 * s.v + (1.0 - s.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  p.theta().array() -= s.lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + s.eps_hat);
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json params_to_json(const MlpParams& p) {
  nlohmann::json layers = nlohmann::json::array();
  for (int l = 0; l < p.layers(); ++l) {
    const auto W = p.W(l);
    std::vector<double> rows;
    rows.reserve(W.size());
    for (Index r = 0; r < W.rows(); ++r)
      for (Index c = 0; c < W.cols(); ++c) rows.push_back(W(r, c));
    const auto b = p.b(l);
    nlohmann::json layer{{"weights", rows}, {"bias", std::vector<double>(b.data(), b.data() + b.size())}};
    if (p.use_scales()) layer["scale"] = p.scale(l);
    layers.push_back(std::move(layer));
  }
  return {{"widths", p.widths()}, {"use_scales", p.use_scales()}, {"layers", std::move(layers)}};
}

inline MlpParams params_from_json(const nlohmann::json& j) {
  MlpParams p(j.at("widths").get<std::vector<int>>(), j.value("use_scales", false));
  const auto& layers = j.at("layers");
  if (!layers.is_array() || static_cast<int>(layers.size()) != p.layers()) {
    throw InvalidInput("checkpoint layer count does not match widths");
  }
  for (int l = 0; l < p.layers(); ++l) {
    const auto w = layers[l].at("weights").get<std::vector<double>>();
    const auto b = layers[l].at("bias").get<std::vector<double>>();
    auto W = p.W(l);
    if (static_cast<Index>(w.size()) != W.size() || static_cast<Index>(b.size()) != W.rows()) {
      throw InvalidInput("checkpoint layer " + std::to_string(l) + " has the wrong shape");
    }
    for (Index r = 0; r < W.rows(); ++r)
      for (Index c = 0; c < W.cols(); ++c) W(r, c) = w[r * W.cols() + c];
    p.b(l) = Eigen::Map<const VectorXd>(b.data(), b.size());
    if (p.use_scales()) p.scale_ref(l) = layers[l].at("scale").get<double>();
  }
  if (!p.theta().allFinite()) throw InvalidInput("checkpoint parameters must be finite");
  return p;
}

inline nlohmann::json adam_to_json(const AdamState& s) {
  return {{"lr", s.lr},
          {"beta1", s.beta1},
          {"beta2", s.beta2},
          {"eps_hat", s.eps_hat},
          {"step", s.step},
          {"m", std::vector<double>(s.m.data(), s.m.data() + s.m.size())},
          {"v", std::vector<double>(s.v.data(), s.v.data() + s.v.size())}};
}

inline AdamState adam_from_json(const nlohmann::json& j, const MlpParams& p) {
  AdamState s;
  s.lr = j.at("lr").get<double>();
  s.beta1 = j.at("beta1").get<double>();
  s.beta2 = j.at("beta2").get<double>();
  s.eps_hat = j.at("eps_hat").get<double>();
  s.step = j.at("step").get<long>();
  const auto m = j.at("m").get<std::vector<double>>();
  const auto v = j.at("v").get<std::vector<double>>();
  if (static_cast<Index>(m.size()) != p.size() || static_cast<Index>(v.size()) != p.size()) {
    throw InvalidInput("checkpoint Adam moments do not match the parameter count");
  }
  s.m = Eigen::Map<const VectorXd>(m.data(), m.size());
  s.v = Eigen::Map<const VectorXd>(v.data(), v.size());
  return s;
}

}  // namespace ebridge
