#pragma once

// Discrete entropic optimal transport with squared Euclidean ground cost.
//
// The regularized cost of a coupling π is  Σᵢⱼ πᵢⱼ (Cᵢⱼ + ε log πᵢⱼ).  In the
// log domain with dual potentials (f, g) the plan is
// πᵢⱼ = exp((fᵢ + gⱼ − Cᵢⱼ)/ε), so Cᵢⱼ + ε log πᵢⱼ = fᵢ + gⱼ exactly.

#include "ebridge/core.hpp"
#include "ebridge/io.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace ebridge {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Weighted point cloud; one point per row of `points`.
struct DiscreteMeasure {
  MatrixXd points;
  VectorXd weights;

  Eigen::Index size() const { return weights.size(); }
  Eigen::Index dim() const { return points.cols(); }

  void validate() const {
    if (weights.size() < 1) throw InvalidInput("measure must have at least one atom");
    if (points.rows() != weights.size()) throw InvalidInput("measure points/weights size mismatch");
    if (!points.allFinite() || !weights.allFinite()) throw InvalidInput("measure entries must be finite");
    if ((weights.array() < 0.0).any()) throw InvalidInput("measure weights must be non-negative");
    if (std::abs(weights.sum() - 1.0) > 1e-12) throw InvalidInput("measure weights must sum to 1");
  }

  /// Builds a measure from unnormalized non-negative masses.
  static DiscreteMeasure from_masses(MatrixXd pts, const VectorXd& masses) {
    const double total = masses.sum();
    if (!(total > 0.0) || !std::isfinite(total)) throw InvalidInput("measure masses must have positive finite total");
    DiscreteMeasure m{std::move(pts), masses / total};
    m.validate();
    return m;
  }

  static DiscreteMeasure uniform(MatrixXd pts) {
    const auto n = pts.rows();
    return from_masses(std::move(pts), VectorXd::Ones(n));
  }
};

using CostMatrix = MatrixXd;

inline CostMatrix cost_matrix(const MatrixXd& X, const MatrixXd& Y) {
  if (X.rows() == 0 || Y.rows() == 0) throw InvalidInput("cost_matrix needs non-empty point sets");
  if (X.cols() != Y.cols()) throw InvalidInput("cost_matrix dimension mismatch");
  CostMatrix C(X.rows(), Y.rows());
  for (Eigen::Index j = 0; j < Y.rows(); ++j) {
    C.col(j) = (X.rowwise() - Y.row(j)).rowwise().squaredNorm();
  }
  return C;
}

enum class SinkhornDomain { Auto, Log, Kernel };

struct SinkhornConfig {
  double epsilon = 0.1;
  int max_iters = 10000;
  double marginal_tol = 1e-9;
  SinkhornDomain domain = SinkhornDomain::Auto;
  /// Log-domain only: anneal ε geometrically from the cost scale, warm
  /// starting each stage. Iterations of all stages count against max_iters.
  bool eps_scaling = true;

  void validate() const {
    if (!(epsilon > 0.0)) throw InvalidInput("sinkhorn epsilon must be positive");
    if (max_iters < 1) throw InvalidInput("sinkhorn max_iters must be at least 1");
    if (!(marginal_tol > 0.0)) throw InvalidInput("sinkhorn marginal_tol must be positive");
  }
  /// Log-domain iterations are used by default for ε ≤ 0.05.
  bool log_domain() const {
    return domain == SinkhornDomain::Log || (domain == SinkhornDomain::Auto && epsilon <= 0.05);
  }
};

/// Kernel-domain iterations hit exp(−C/ε) underflow.
class SinkhornUnderflow : public std::runtime_error {
 public:
  SinkhornUnderflow()
      : std::runtime_error("kernel-domain Sinkhorn underflowed; rerun with log-domain iterations") {}
};

struct TransportPlan {
  MatrixXd plan;
  VectorXd row_marginal;
  VectorXd col_marginal;
};

struct SinkhornResult {
  TransportPlan plan;
  VectorXd f;  // dual potentials, same units as the cost
  VectorXd g;
  int iterations = 0;
  double marginal_error = std::numeric_limits<double>::infinity();  // ℓ₁ row + column error
  bool converged = false;
  std::vector<double> error_history;
};

namespace detail {

inline double log_sum_exp(const Eigen::Ref<const VectorXd>& y) {
  const double mx = y.maxCoeff();
  if (!std::isfinite(mx)) return mx;
  // Terms below e^-700 are negligible next to the leading 1; clamping them
  // keeps exp() out of the slow subnormal range.
  return mx + std::log((y.array() - mx).max(-700.0).exp().sum());
}

inline std::vector<Eigen::Index> positive_indices(const VectorXd& w) {
  std::vector<Eigen::Index> idx;
  for (Eigen::Index i = 0; i < w.size(); ++i)
    if (w[i] > 0.0) idx.push_back(i);
  return idx;
}

inline TransportPlan make_plan(MatrixXd plan) {
  TransportPlan tp;
  tp.row_marginal = plan.rowwise().sum();
  tp.col_marginal = plan.colwise().sum().transpose();
  tp.plan = std::move(plan);
  return tp;
}

// Core iterations on strictly positive weights.
inline SinkhornResult sinkhorn_positive(const VectorXd& a, const VectorXd& b, const CostMatrix& C,
                                        const SinkhornConfig& cfg) {
  const double eps = cfg.epsilon;
  const auto n = a.size();
  const auto m = b.size();
  SinkhornResult res;

  if (cfg.log_domain()) {
    const VectorXd log_a = a.array().log();
    const VectorXd log_b = b.array().log();
    VectorXd f = VectorXd::Zero(n), g = VectorXd::Zero(m), y;
    int budget = cfg.max_iters;

    // One block of alternating updates at regularization `e`; returns the
    // final ℓ₁ row-marginal error.
    auto run_stage = [&](double e, int max_it, double tol, std::vector<double>* history) {
      const MatrixXd M = -C / e;
      const MatrixXd Mt = M.transpose();
      double err = std::numeric_limits<double>::infinity();
      for (int it = 0; it < max_it && budget > 0; ++it, --budget) {
        const VectorXd gs = g / e;
        for (Eigen::Index i = 0; i < n; ++i) {
          y = gs + Mt.col(i);
          f[i] = e * (log_a[i] - log_sum_exp(y));
        }
        const VectorXd fs = f / e;
        for (Eigen::Index j = 0; j < m; ++j) {
          y = fs + M.col(j);
          g[j] = e * (log_b[j] - log_sum_exp(y));
        }
        // Columns are exact after the g-update; measure the rows.
        const VectorXd gs2 = g / e;
        err = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
          y = gs2 + Mt.col(i);
          err += std::abs(std::exp(fs[i] + log_sum_exp(y)) - a[i]);
        }
        ++res.iterations;
        if (history) history->push_back(err);
        if (err < tol) break;
      }
      return err;
    };

    // ε-scaling: anneal from the cost scale down to the target, warm
    // starting the potentials at each stage.
    if (cfg.eps_scaling) {
      for (double e = std::max(C.maxCoeff(), eps); e > 2.0 * eps; e *= 0.5) {
        run_stage(e, 200, 1e-6, nullptr);
      }
    }
    res.marginal_error = run_stage(eps, budget, cfg.marginal_tol, &res.error_history);
    res.converged = res.marginal_error < cfg.marginal_tol;

    const MatrixXd M = -C / eps;
    MatrixXd plan(n, m);
    for (Eigen::Index j = 0; j < m; ++j) {
      plan.col(j) = ((f.array() + g[j]) / eps + M.col(j).array()).exp();
    }
    res.f = std::move(f);
    res.g = std::move(g);
    res.plan = make_plan(std::move(plan));
    res.marginal_error = (res.plan.row_marginal - a).lpNorm<1>() + (res.plan.col_marginal - b).lpNorm<1>();
    return res;
  }

  const MatrixXd K = (-C / eps).array().exp();
  VectorXd u = VectorXd::Ones(n), v = VectorXd::Ones(m);
  for (int it = 1; it <= cfg.max_iters; ++it) {
    const VectorXd Kv = K * v;
    if ((Kv.array() <= 0.0).any()) throw SinkhornUnderflow();
    u = a.cwiseQuotient(Kv);
    const VectorXd Ktu = K.transpose() * u;
    if ((Ktu.array() <= 0.0).any()) throw SinkhornUnderflow();
    v = b.cwiseQuotient(Ktu);
    if (!u.allFinite() || !v.allFinite()) throw SinkhornUnderflow();
    const double err = (u.cwiseProduct(K * v) - a).lpNorm<1>();
    res.error_history.push_back(err);
    res.iterations = it;
    res.marginal_error = err;
    if (err < cfg.marginal_tol) {
      res.converged = true;
      break;
    }
  }
  if ((u.array() <= 0.0).any() || (v.array() <= 0.0).any()) throw SinkhornUnderflow();
  res.f = eps * u.array().log().matrix();
  res.g = eps * v.array().log().matrix();
  res.plan = make_plan(u.asDiagonal() * K * v.asDiagonal());
  res.marginal_error = (res.plan.row_marginal - a).lpNorm<1>() + (res.plan.col_marginal - b).lpNorm<1>();
  return res;
}

}  // namespace detail

/// Entropic coupling between two measures. Zero-weight atoms are dropped
/// before iterating and reappear as zero rows/columns of the plan. When
/// max_iters is exhausted the result has converged == false and carries the
/// achieved marginal error.
inline SinkhornResult sinkhorn_plan(const DiscreteMeasure& a, const DiscreteMeasure& b,
                                    const CostMatrix& C, const SinkhornConfig& cfg) {
  cfg.validate();
  a.validate();
  b.validate();
  if (C.rows() != a.size() || C.cols() != b.size()) throw InvalidInput("cost matrix shape mismatch");

  const auto ia = detail::positive_indices(a.weights);
  const auto ib = detail::positive_indices(b.weights);
  const auto na = static_cast<Eigen::Index>(ia.size());
  const auto nb = static_cast<Eigen::Index>(ib.size());
  VectorXd ap(na), bp(nb);
  MatrixXd Cp(na, nb);
  for (Eigen::Index i = 0; i < na; ++i) ap[i] = a.weights[ia[i]];
  for (Eigen::Index j = 0; j < nb; ++j) bp[j] = b.weights[ib[j]];
  for (Eigen::Index i = 0; i < na; ++i)
    for (Eigen::Index j = 0; j < nb; ++j) Cp(i, j) = C(ia[i], ib[j]);

  SinkhornResult r = detail::sinkhorn_positive(ap, bp, Cp, cfg);
  if (na == a.size() && nb == b.size()) return r;

  const double nan = std::numeric_limits<double>::quiet_NaN();
  MatrixXd plan = MatrixXd::Zero(a.size(), b.size());
  VectorXd f = VectorXd::Constant(a.size(), nan), g = VectorXd::Constant(b.size(), nan);
  for (Eigen::Index i = 0; i < na; ++i) {
    f[ia[i]] = r.f[i];
    for (Eigen::Index j = 0; j < nb; ++j) plan(ia[i], ib[j]) = r.plan.plan(i, j);
  }
  for (Eigen::Index j = 0; j < nb; ++j) g[ib[j]] = r.g[j];
  r.plan = detail::make_plan(std::move(plan));
  r.f = std::move(f);
  r.g = std::move(g);
  return r;
}

/// Σ πᵢⱼ (Cᵢⱼ + ε log πᵢⱼ) at a plan, with 0 log 0 = 0.
inline double regularized_cost(const MatrixXd& plan, const CostMatrix& C, double epsilon) {
  double s = 0.0;
  for (Eigen::Index j = 0; j < plan.cols(); ++j)
    for (Eigen::Index i = 0; i < plan.rows(); ++i) {
      const double p = plan(i, j);
      if (p > 0.0) s += p * (C(i, j) + epsilon * std::log(p));
    }
  return s;
}

struct DivergenceResult {
  double value = 0.0;
  int iterations = 0;
  double marginal_error = 0.0;
  bool converged = false;
};

inline DivergenceResult sinkhorn_divergence_report(const DiscreteMeasure& a, const DiscreteMeasure& b,
                                                   const SinkhornConfig& cfg) {
  const CostMatrix C = cost_matrix(a.points, b.points);
  const SinkhornResult r = sinkhorn_plan(a, b, C, cfg);
  double value = 0.0;
  if (r.f.allFinite() && r.g.allFinite()) {
    // fᵢ + gⱼ equals Cᵢⱼ + ε log πᵢⱼ and stays accurate where πᵢⱼ underflows.
    for (Eigen::Index j = 0; j < C.cols(); ++j)
      for (Eigen::Index i = 0; i < C.rows(); ++i) value += r.plan.plan(i, j) * (r.f[i] + r.g[j]);
  } else {
    value = regularized_cost(r.plan.plan, C, cfg.epsilon);
  }
  return {value, r.iterations, r.marginal_error, r.converged};
}

inline double sinkhorn_divergence(const DiscreteMeasure& a, const DiscreteMeasure& b,
                                  const SinkhornConfig& cfg) {
  return sinkhorn_divergence_report(a, b, cfg).value;
}

/// W(a,b) − ½W(a,a) − ½W(b,b): removes the entropic bias so that the result
/// is non-negative and vanishes for identical measures.
inline double debiased_sinkhorn_divergence(const DiscreteMeasure& a, const DiscreteMeasure& b,
                                           const SinkhornConfig& cfg) {
  return sinkhorn_divergence(a, b, cfg) - 0.5 * sinkhorn_divergence(a, a, cfg) - 0.5 * sinkhorn_divergence(b, b, cfg);
}

// ---------------------------------------------------------------------------
// Exact transport (small instances)

struct ExactTransport {
  double cost = 0.0;
  MatrixXd plan;
  int pivots = 0;
};

/// Exact minimum of ⟨C, π⟩ over the transportation polytope by the
/// transportation simplex: north-west-corner start, MODI potentials and
/// Bland's rule for entering/leaving cells. Limited to n·m ≤ 64.
inline ExactTransport exact_transport_small(const VectorXd& a, const VectorXd& b, const CostMatrix& C) {
  const auto n = a.size();
  const auto m = b.size();
  if (n < 1 || m < 1) throw InvalidInput("exact transport needs non-empty measures");
  if (n * m > 64) throw InvalidInput("exact transport oracle limited to |a|·|b| <= 64");
  if (C.rows() != n || C.cols() != m) throw InvalidInput("cost matrix shape mismatch");

  MatrixXd x = MatrixXd::Zero(n, m);
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> basic =
      Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(n, m, false);

  // North-west corner; ties advance the row so the basis keeps n+m-1 cells.
  {
    VectorXd s = a, d = b;
    Eigen::Index i = 0, j = 0;
    while (true) {
      const double q = std::min(s[i], d[j]);
      x(i, j) = q;
      basic(i, j) = true;
      s[i] -= q;
      d[j] -= q;
      if (i == n - 1 && j == m - 1) break;
      if (j == m - 1 || (i < n - 1 && s[i] <= d[j])) ++i;
      else ++j;
    }
  }

  const Eigen::Index nodes = n + m;  // rows then columns
  ExactTransport out;
  for (int pivot = 0; pivot < 10000; ++pivot) {
    // Potentials u_i + v_j = C_ij on the basis tree.
    VectorXd pot = VectorXd::Constant(nodes, std::numeric_limits<double>::quiet_NaN());
    pot[0] = 0.0;
    std::deque<Eigen::Index> queue{0};
    while (!queue.empty()) {
      const auto node = queue.front();
      queue.pop_front();
      if (node < n) {
        for (Eigen::Index j = 0; j < m; ++j)
          if (basic(node, j) && std::isnan(pot[n + j])) {
            pot[n + j] = C(node, j) - pot[node];
            queue.push_back(n + j);
          }
      } else {
        const auto j = node - n;
        for (Eigen::Index i = 0; i < n; ++i)
          if (basic(i, j) && std::isnan(pot[i])) {
            pot[i] = C(i, j) - pot[node];
            queue.push_back(i);
          }
      }
    }

    // Bland: first improving cell in row-major order.
    const double tol = 1e-12 * (1.0 + C.cwiseAbs().maxCoeff());
    Eigen::Index ei = -1, ej = -1;
    for (Eigen::Index i = 0; i < n && ei < 0; ++i)
      for (Eigen::Index j = 0; j < m; ++j)
        if (!basic(i, j) && C(i, j) - pot[i] - pot[n + j] < -tol) {
          ei = i;
          ej = j;
          break;
        }
    if (ei < 0) {
      out.cost = (C.array() * x.array()).sum();
      out.plan = x;
      out.pivots = pivot;
      return out;
    }

    // Tree path from row node ei to column node n+ej.
    std::vector<Eigen::Index> parent(nodes, -1);
    std::vector<bool> seen(nodes, false);
    seen[ei] = true;
    queue = {ei};
    while (!queue.empty()) {
      const auto node = queue.front();
      queue.pop_front();
      if (node == n + ej) break;
      auto visit = [&](Eigen::Index next) {
        if (!seen[next]) {
          seen[next] = true;
          parent[next] = node;
          queue.push_back(next);
        }
      };
      if (node < n) {
        for (Eigen::Index j = 0; j < m; ++j)
          if (basic(node, j)) visit(n + j);
      } else {
        for (Eigen::Index i = 0; i < n; ++i)
          if (basic(i, node - n)) visit(i);
      }
    }
    // Cells along the path walked back from the column node, alternating −, +, −, …
    std::vector<std::pair<Eigen::Index, Eigen::Index>> cells;
    for (auto node = n + ej; node != ei; node = parent[node]) {
      const auto prev = parent[node];
      cells.emplace_back(node < n ? node : prev, node < n ? prev - n : node - n);
    }
    double theta = std::numeric_limits<double>::infinity();
    std::pair<Eigen::Index, Eigen::Index> leave{-1, -1};
    for (std::size_t k = 0; k < cells.size(); k += 2) {
      const auto [ci, cj] = cells[k];
      const bool better = x(ci, cj) < theta ||
                          (x(ci, cj) == theta && (ci * m + cj) < (leave.first * m + leave.second));
      if (better) {
        theta = x(ci, cj);
        leave = cells[k];
      }
    }
    x(ei, ej) = theta;
    basic(ei, ej) = true;
    for (std::size_t k = 0; k < cells.size(); ++k) {
      const auto [ci, cj] = cells[k];
      x(ci, cj) += (k % 2 == 0) ? -theta : theta;
    }
    x(leave.first, leave.second) = 0.0;
    basic(leave.first, leave.second) = false;
  }
  throw std::runtime_error("transportation simplex did not terminate");
}

inline double exact_ot_small(const DiscreteMeasure& a, const DiscreteMeasure& b) {
  a.validate();
  b.validate();
  if (a.size() * b.size() > 64) throw InvalidInput("exact_ot_small limited to |a|·|b| <= 64");
  return exact_transport_small(a.weights, b.weights, cost_matrix(a.points, b.points)).cost;
}

// ---------------------------------------------------------------------------
// Fixed-length differentiable Sinkhorn

/// Sinkhorn divergence computed by a fixed number of iterations from g = 0,
/// differentiable w.r.t. both weight vectors by reverse-mode through every
/// executed iteration. The cost matrix (and optionally the target weights)
/// is bound once so repeated evaluations on a fixed support reuse it.
class UnrolledSinkhorn {
 public:
  UnrolledSinkhorn(CostMatrix C, double epsilon, int iterations) : eps_(epsilon), iters_(iterations) {
    if (!(epsilon > 0.0)) throw InvalidInput("sinkhorn epsilon must be positive");
    if (iterations < 1) throw InvalidInput("sinkhorn unroll length must be at least 1");
    M_ = -C / eps_;
    Mt_ = M_.transpose();
    // Entries below e^-400 are stored as exact zeros; left in place they
    // turn into subnormal products that stall the matrix-vector kernels.
    K_ = (M_.array() > -400.0).select(M_.array().exp(), 0.0);
  }

  UnrolledSinkhorn(CostMatrix C, VectorXd target, double epsilon, int iterations)
      : UnrolledSinkhorn(std::move(C), epsilon, iterations) {
    if (M_.cols() != target.size()) throw InvalidInput("cost matrix shape mismatch");
    check_weights(target, "target");
    b_ = std::move(target);
  }

  struct Output {
    double value = 0.0;
    VectorXd grad;         // d value / d source weights
    VectorXd grad_target;  // d value / d target weights
  };

  Eigen::Index source_size() const { return M_.rows(); }
  Eigen::Index target_size() const { return M_.cols(); }
  const VectorXd& target() const { return b_; }

  Output evaluate(const VectorXd& a, bool with_grad = true) const { return evaluate(a, bound_target(), with_grad); }

  Output evaluate(const VectorXd& a, const VectorXd& b, bool with_grad) const {
    check_inputs(a, b);
    if (auto k = evaluate_kernel(a, b, with_grad)) return *k;
    return evaluate_log(a, b, with_grad);
  }

  /// Reference path: every half-step as a log-sum-exp.
  Output evaluate_log_domain(const VectorXd& a, bool with_grad = true) const {
    check_inputs(a, bound_target());
    return evaluate_log(a, bound_target(), with_grad);
  }

 private:
  static void check_weights(const VectorXd& w, const char* what) {
    if (!w.allFinite() || (w.array() <= 0.0).any()) {
      throw InvalidInput(std::string(what) + " weights must be strictly positive");
    }
  }

  const VectorXd& bound_target() const {
    if (b_.size() == 0) throw InvalidInput("no target weights bound to this Sinkhorn solver");
    return b_;
  }

  void check_inputs(const VectorXd& a, const VectorXd& b) const {
    if (a.size() != M_.rows()) throw InvalidInput("source weight size mismatch");
    if (b.size() != M_.cols()) throw InvalidInput("target weight size mismatch");
    check_weights(a, "source");
    check_weights(b, "target");
  }

  static bool usable(const VectorXd& v) { return v.allFinite() && (v.array() > 0.0).all(); }

  // Same iterates in scaling form, u = exp(f/ε), v = exp(g/ε), using the
  // precomputed kernel K = exp(−C/ε). Returns nothing if a scaling leaves
  // the representable range, in which case the log-domain path is used.
  std::optional<Output> evaluate_kernel(const VectorXd& a, const VectorXd& b, bool with_grad) const {
    const auto n = K_.rows();
    const auto m = K_.cols();
    std::vector<VectorXd> U(iters_ + 1), V(iters_ + 1), Kv(iters_ + 1), Ktu(iters_ + 1);
    V[0] = VectorXd::Ones(m);
    for (int l = 1; l <= iters_; ++l) {
      Kv[l].noalias() = K_ * V[l - 1];
      U[l] = a.cwiseQuotient(Kv[l]);
      Ktu[l].noalias() = K_.transpose() * U[l];
      V[l] = b.cwiseQuotient(Ktu[l]);
      if (!usable(Kv[l]) || !usable(U[l]) || !usable(Ktu[l]) || !usable(V[l])) return std::nullopt;
    }
    const VectorXd& u = U[iters_];
    const VectorXd& v = V[iters_];
    const VectorXd f = eps_ * u.array().log();
    const VectorXd g = eps_ * v.array().log();
    const VectorXd r = K_ * v;
    const VectorXd c = K_.transpose() * u;
    Output out;
    out.value = (f.array() * u.array() * r.array()).sum() + (g.array() * v.array() * c.array()).sum();
    if (!std::isfinite(out.value)) return std::nullopt;
    if (!with_grad) return out;

    VectorXd fbar = u.array() * ((1.0 + f.array() / eps_) * r.array() + (K_ * v.cwiseProduct(g)).array() / eps_);
    VectorXd gbar =
        v.array() * ((1.0 + g.array() / eps_) * c.array() + (K_.transpose() * u.cwiseProduct(f)).array() / eps_);
    VectorXd abar = VectorXd::Zero(n), bbar = VectorXd::Zero(m);
    for (int l = iters_; l >= 1; --l) {
      bbar.array() += eps_ * gbar.array() / b.array();
      fbar.array() -= U[l].array() * (K_ * gbar.cwiseQuotient(Ktu[l])).array();
      abar.array() += eps_ * fbar.array() / a.array();
      if (l > 1) gbar = -V[l - 1].cwiseProduct(K_.transpose() * fbar.cwiseQuotient(Kv[l]));
      fbar.setZero();
    }
    if (!abar.allFinite() || !bbar.allFinite()) return std::nullopt;
    out.grad = std::move(abar);
    out.grad_target = std::move(bbar);
    return out;
  }

  Output evaluate_log(const VectorXd& a, const VectorXd& b, bool with_grad) const {
    const auto n = M_.rows();
    const auto m = M_.cols();
    const VectorXd log_a = a.array().log();
    const VectorXd log_b = b.array().log();

    // Saved f^l, g^l (l = 1..L) and the LSE normalizers of each half-step.
    std::vector<VectorXd> F(iters_ + 1), G(iters_ + 1), lse_f(iters_ + 1), lse_g(iters_ + 1);
    G[0] = VectorXd::Zero(m);
    VectorXd y;
    for (int l = 1; l <= iters_; ++l) {
      F[l].resize(n);
      lse_f[l].resize(n);
      const VectorXd gs = G[l - 1] / eps_;
      for (Eigen::Index i = 0; i < n; ++i) {
        y = gs + Mt_.col(i);
        lse_f[l][i] = detail::log_sum_exp(y);
        F[l][i] = eps_ * (log_a[i] - lse_f[l][i]);
      }
      G[l].resize(m);
      lse_g[l].resize(m);
      const VectorXd fs = F[l] / eps_;
      for (Eigen::Index j = 0; j < m; ++j) {
        y = fs + M_.col(j);
        lse_g[l][j] = detail::log_sum_exp(y);
        G[l][j] = eps_ * (log_b[j] - lse_g[l][j]);
      }
    }

    const VectorXd& f = F[iters_];
    const VectorXd& g = G[iters_];
    Output out;
    VectorXd fbar = VectorXd::Zero(n), gbar = VectorXd::Zero(m);
    for (Eigen::Index j = 0; j < m; ++j) {
      const Eigen::ArrayXd s = f.array() + g[j];
      const Eigen::ArrayXd p = (s / eps_ + M_.col(j).array()).max(-700.0).exp();
      out.value += (p * s).sum();
      if (with_grad) {
        const Eigen::ArrayXd w = p * (s / eps_ + 1.0);
        fbar += w.matrix();
        gbar[j] = w.sum();
      }
    }
    if (!with_grad) return out;

    VectorXd abar = VectorXd::Zero(n), bbar = VectorXd::Zero(m);
    for (int l = iters_; l >= 1; --l) {
      // g^l_j = ε log b_j − ε LSE_i(f^l_i/ε + M_ij)
      bbar.array() += eps_ * gbar.array() / b.array();
      const VectorXd fs = F[l] / eps_;
      for (Eigen::Index j = 0; j < m; ++j) {
        if (gbar[j] == 0.0) continue;
        const Eigen::ArrayXd q = (fs.array() + M_.col(j).array() - lse_g[l][j]).max(-700.0).exp();
        fbar.array() -= gbar[j] * q;
      }
      // f^l_i = ε log a_i − ε LSE_j(g^{l-1}_j/ε + M_ij)
      abar.array() += eps_ * fbar.array() / a.array();
      VectorXd gprev = VectorXd::Zero(m);
      if (l > 1) {
        const VectorXd gs = G[l - 1] / eps_;
        for (Eigen::Index i = 0; i < n; ++i) {
          if (fbar[i] == 0.0) continue;
          const Eigen::ArrayXd p = (gs.array() + Mt_.col(i).array() - lse_f[l][i]).max(-700.0).exp();
          gprev.array() -= fbar[i] * p;
        }
      }
      gbar = std::move(gprev);
      fbar.setZero();
    }
    out.grad = std::move(abar);
    out.grad_target = std::move(bbar);
    return out;
  }

  double eps_;
  int iters_;
  VectorXd b_;
  MatrixXd M_;  // −C/ε
  MatrixXd Mt_;
  MatrixXd K_;  // exp(−C/ε)
};

/// Debiased divergence W(a,b) − ½W(a,a) − ½W(b,b) on a single support,
/// with W the fixed-length unrolled value. Non-negative in the converged
/// limit and zero exactly when a = b.
class DebiasedSinkhorn {
 public:
  DebiasedSinkhorn(const MatrixXd& points, VectorXd target, double epsilon, int iterations)
      : solver_(cost_matrix(points, points), epsilon, iterations), b_(std::move(target)) {
    if (b_.size() != points.rows()) throw InvalidInput("target weight size mismatch");
    self_b_ = solver_.evaluate(b_, b_, false).value;
  }

  const VectorXd& target() const { return b_; }
  double target_self_value() const { return self_b_; }
  const UnrolledSinkhorn& solver() const { return solver_; }

  UnrolledSinkhorn::Output evaluate(const VectorXd& a, bool with_grad = true) const {
    const auto ab = solver_.evaluate(a, b_, with_grad);
    const auto aa = solver_.evaluate(a, a, with_grad);
    UnrolledSinkhorn::Output out;
    out.value = ab.value - 0.5 * aa.value - 0.5 * self_b_;
    if (with_grad) out.grad = ab.grad - 0.5 * (aa.grad + aa.grad_target);
    return out;
  }

 private:
  UnrolledSinkhorn solver_;
  VectorXd b_;
  double self_b_ = 0.0;
};

/// Debiased divergence on a single support computed in the log domain with
/// ε-annealing (from the squared support diameter down to ε) and averaged
/// symmetric potential updates, followed by one full update at ε. The
/// gradient with respect to the source weights is f_ab − f_aa, the dual
/// potential difference at the final iterate. Exactly zero with zero
/// gradient at the target weights.
class AnnealedSinkhorn {
 public:
  AnnealedSinkhorn(const MatrixXd& points, VectorXd target, double epsilon, int iterations)
      : eps_(epsilon), b_(std::move(target)) {
    if (!(epsilon > 0.0)) throw InvalidInput("sinkhorn epsilon must be positive");
    if (iterations < 2) throw InvalidInput("annealed sinkhorn needs at least two iterations");
    if (b_.size() != points.rows()) throw InvalidInput("target weight size mismatch");
    if (!b_.allFinite() || (b_.array() <= 0.0).any()) throw InvalidInput("target weights must be strictly positive");
    C_ = cost_matrix(points, points);
    const double top = std::max(C_.maxCoeff(), epsilon);
    // Geometric decay by halves, compressed if the iteration budget is short.
    const int loop = iterations - 1;
    const int needed = static_cast<int>(std::ceil(std::log2(top / epsilon)));
    const double ratio = needed <= loop - 1 || loop <= 1 ? 0.5 : std::pow(epsilon / top, 1.0 / (loop - 1));
    for (int k = 0; k < loop; ++k) schedule_.push_back(std::max(epsilon, top * std::pow(ratio, k)));
    const VectorXd log_b = b_.array().log();
    p_b_ = self_potential(log_b);
  }

  const VectorXd& target() const { return b_; }
  double epsilon() const { return eps_; }
  const std::vector<double>& schedule() const { return schedule_; }

  UnrolledSinkhorn::Output evaluate(const VectorXd& a, bool with_grad = true) const {
    if (a.size() != b_.size()) throw InvalidInput("source weight size mismatch");
    if (!a.allFinite() || (a.array() <= 0.0).any()) throw InvalidInput("source weights must be strictly positive");
    const VectorXd log_a = a.array().log();
    const VectorXd log_b = b_.array().log();
    const VectorXd p_a = self_potential(log_a);
    // Cross potentials: f lives on the source atoms, g on the target atoms.
    double e = schedule_.front();
    VectorXd f = softmin(e, log_b, VectorXd::Zero(b_.size()));
    VectorXd g = softmin(e, log_a, VectorXd::Zero(a.size()));
    for (double ek : schedule_) {
      const VectorXd ft = softmin(ek, log_b, g);
      const VectorXd gt = softmin(ek, log_a, f);
      f = 0.5 * (f + ft);
      g = 0.5 * (g + gt);
    }
    const VectorXd ft = softmin(eps_, log_b, g);
    const VectorXd gt = softmin(eps_, log_a, f);
    UnrolledSinkhorn::Output out;
    out.value = a.dot(ft - p_a) + b_.dot(gt - p_b_);
    if (with_grad) {
      out.grad = ft - p_a;
      out.grad_target = gt - p_b_;
    }
    return out;
  }

 private:
  // softmin_ε(h)_i = −ε log Σ_j exp(log w_j + h_j/ε − C_ij/ε)
  VectorXd softmin(double e, const VectorXd& log_w, const VectorXd& h) const {
    const VectorXd base = log_w + h / e;
    VectorXd out(C_.rows());
    VectorXd y;
    for (Eigen::Index i = 0; i < C_.rows(); ++i) {
      y = base - C_.col(i) / e;
      out[i] = -e * detail::log_sum_exp(y);
    }
    return out;
  }

  VectorXd self_potential(const VectorXd& log_w) const {
    VectorXd p = softmin(schedule_.front(), log_w, VectorXd::Zero(log_w.size()));
    for (double ek : schedule_) p = 0.5 * (p + softmin(ek, log_w, p));
    return softmin(eps_, log_w, p);
  }

  double eps_;
  VectorXd b_;
  MatrixXd C_;
  std::vector<double> schedule_;
  VectorXd p_b_;
};

/// Gradient of the fixed-length Sinkhorn divergence w.r.t. the source
/// weights. Zero-weight source atoms are pruned and receive a zero entry.
inline VectorXd divergence_weight_grad(const DiscreteMeasure& a, const DiscreteMeasure& b,
                                       double epsilon, int iterations = 50) {
  a.validate();
  b.validate();
  const auto ia = detail::positive_indices(a.weights);
  const auto ib = detail::positive_indices(b.weights);
  MatrixXd pa(ia.size(), a.dim()), pb(ib.size(), b.dim());
  VectorXd wa(ia.size()), wb(ib.size());
  for (std::size_t i = 0; i < ia.size(); ++i) {
    pa.row(i) = a.points.row(ia[i]);
    wa[i] = a.weights[ia[i]];
  }
  for (std::size_t j = 0; j < ib.size(); ++j) {
    pb.row(j) = b.points.row(ib[j]);
    wb[j] = b.weights[ib[j]];
  }
  const UnrolledSinkhorn s(cost_matrix(pa, pb), wb, epsilon, iterations);
  const VectorXd gp = s.evaluate(wa).grad;
  VectorXd grad = VectorXd::Zero(a.size());
  for (std::size_t i = 0; i < ia.size(); ++i) grad[ia[i]] = gp[i];
  return grad;
}

// ---------------------------------------------------------------------------
// CSV: one atom per row, coordinates then weight.

inline DiscreteMeasure read_measure_csv(const std::string& text) {
  std::vector<std::vector<double>> rows;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = text.find('\n', start);
    const std::string line = io::trim(text.substr(start, end == std::string::npos ? std::string::npos : end - start));
    start = end == std::string::npos ? text.size() + 1 : end + 1;
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto fields = io::split(line);
    if (rows.empty() && line_no == 1) {
      bool header = false;
      try {
        io::parse_double(fields[0]);
      } catch (const InvalidInput&) {
        header = true;
      }
      if (header) continue;
    }
    if (fields.size() < 2) throw InvalidInput("measure CSV line " + std::to_string(line_no) + ": need coordinates and a weight");
    std::vector<double> row;
    for (const auto& f : fields) {
      try {
        row.push_back(io::parse_double(f));
      } catch (const InvalidInput& e) {
        throw InvalidInput("measure CSV line " + std::to_string(line_no) + ": " + e.what());
      }
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw InvalidInput("measure CSV line " + std::to_string(line_no) + ": inconsistent column count");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw InvalidInput("measure CSV has no atoms");
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto d = static_cast<Eigen::Index>(rows.front().size()) - 1;
  MatrixXd pts(n, d);
  VectorXd w(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index k = 0; k < d; ++k) pts(i, k) = rows[i][k];
    w[i] = rows[i][d];
  }
  if ((w.array() < 0.0).any()) throw InvalidInput("measure CSV has negative weights");
  if (std::abs(w.sum() - 1.0) > 1e-9) throw InvalidInput("measure CSV weights must sum to 1");
  w /= w.sum();
  DiscreteMeasure mu{std::move(pts), std::move(w)};
  mu.validate();
  return mu;
}

inline std::string measure_csv(const DiscreteMeasure& mu) {
  std::string out;
  for (Eigen::Index k = 0; k < mu.dim(); ++k) out += "x" + std::to_string(k + 1) + ",";
  out += "weight\n";
  for (Eigen::Index i = 0; i < mu.size(); ++i) {
    for (Eigen::Index k = 0; k < mu.dim(); ++k) out += io::fmt(mu.points(i, k)) + ",";
    out += io::fmt(mu.weights[i]) + "\n";
  }
  return out;
}

}  // namespace ebridge
