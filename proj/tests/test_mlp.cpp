#include <catch2/catch_amalgamated.hpp>

#include "ebridge/mlp.hpp"

#include <cmath>
#include <random>

using namespace ebridge;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

Eigen::Vector4d random_point(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> X(-3.0, 3.0), T(0.0, 4.0);
  return {X(rng), X(rng), X(rng), T(rng)};
}

double rel_err(double a, double b, double floor) { return std::abs(a - b) / std::max(std::abs(b), floor); }

// Central differences of the value-only forward pass.
struct FdDerivs {
  Eigen::Vector4d dphi, drho;
  Vec3 d2phi, d2rho;
};

FdDerivs fd_derivs(const MlpParams& p, const Eigen::Vector4d& xi, double h) {
  FdDerivs d;
  const auto c = forward(p, xi);
  for (int k = 0; k < 4; ++k) {
    Eigen::Vector4d e = Eigen::Vector4d::Zero();
    e[k] = h;
    const auto up = forward(p, xi + e);
    const auto dn = forward(p, xi - e);
    d.dphi[k] = (up.phi - dn.phi) / (2 * h);
    d.drho[k] = (up.rho - dn.rho) / (2 * h);
    if (k < 3) {
      d.d2phi[k] = (up.phi - 2 * c.phi + dn.phi) / (h * h);
      d.d2rho[k] = (up.rho - 2 * c.rho + dn.rho) / (h * h);
    }
  }
  return d;
}

// Second derivatives by differencing the (already FD-verified) first derivatives.
Eigen::Matrix<double, 3, 2> fd_second_from_grad(const MlpParams& p, const Eigen::Vector4d& xi, double h) {
  Eigen::Matrix<double, 3, 2> out;
  for (int k = 0; k < 3; ++k) {
    Eigen::Vector4d e = Eigen::Vector4d::Zero();
    e[k] = h;
    const auto up = forward_with_derivs(p, xi + e);
    const auto dn = forward_with_derivs(p, xi - e);
    out(k, 0) = (up.grad_x_phi[k] - dn.grad_x_phi[k]) / (2 * h);
    out(k, 1) = (up.grad_x_rho[k] - dn.grad_x_rho[k]) / (2 * h);
  }
  return out;
}

// A loss that touches every output channel, written against EvalResult only.
struct MixedLoss {
  Eigen::Matrix<double, 12, 1> w;
  double point(const EvalResult& r) const {
    Eigen::Matrix<double, 12, 1> v;
    v << r.phi, r.rho, r.dphi_dt, r.drho_dt, r.grad_x_phi, r.grad_x_rho, r.d2_x_phi.sum(), r.d2_x_rho.dot(Vec3(1, 2, 3));
    return w.dot(v.cwiseAbs2()) + r.grad_x_phi.dot(r.grad_x_rho) * r.d2_x_phi[1];
  }
};

// Adjoint of MixedLoss::point written by hand for the closure interface.
void mixed_adjoint(const MixedLoss& L, const EvalBatch& o, EvalBatch& a, Eigen::Index k, double scale) {
  const auto r = o.at(k);
  a.phi[k] += scale * 2 * L.w[0] * r.phi;
  a.rho[k] += scale * 2 * L.w[1] * r.rho;
  a.phi_t[k] += scale * 2 * L.w[2] * r.dphi_dt;
  a.rho_t[k] += scale * 2 * L.w[3] * r.drho_dt;
  for (int i = 0; i < 3; ++i) {
    a.phi_x(i, k) += scale * (2 * L.w[4 + i] * r.grad_x_phi[i] + r.grad_x_rho[i] * r.d2_x_phi[1]);
    a.rho_x(i, k) += scale * (2 * L.w[7 + i] * r.grad_x_rho[i] + r.grad_x_phi[i] * r.d2_x_phi[1]);
    a.phi_xx(i, k) += scale * 2 * L.w[10] * r.d2_x_phi.sum();
    a.rho_xx(i, k) += scale * 2 * L.w[11] * r.d2_x_rho.dot(Vec3(1, 2, 3)) * (i + 1);
  }
  a.phi_xx(1, k) += scale * r.grad_x_phi.dot(r.grad_x_rho);
}

double mixed_total(const MixedLoss& L, const MlpParams& p, const Eigen::Matrix4Xd& pts) {
  double s = 0;
  for (Eigen::Index k = 0; k < pts.cols(); ++k) s += L.point(forward_with_derivs(p, pts.col(k)));
  return s / static_cast<double>(pts.cols());
}

// Hamilton-Jacobi residual with fixed coefficients, squared and averaged.
struct HjbLoss {
  Vec3 alpha{-0.2, 0.18, 0.02};
  Vec3 beta{2.2, 2.0, 1.8};
  double delta = 0.1;
  double residual(const EvalResult& r, const Eigen::Vector4d& xi) const {
    const Vec3 f(xi[1] * xi[2], xi[2] * xi[0], xi[0] * xi[1]);
    return r.dphi_dt + 0.5 * beta.cwiseProduct(r.grad_x_phi).squaredNorm() +
           r.grad_x_phi.dot(alpha.cwiseProduct(f)) + delta * r.lap_x_phi;
  }
};

}  // namespace

TEST_CASE("init validates widths and is reproducible", "[mlp]") {
  CHECK_THROWS_AS(init_mlp({3, 8, 2}, 1), InvalidInput);
  CHECK_THROWS_AS(init_mlp({4, 8, 1}, 1), InvalidInput);
  CHECK_THROWS_AS(init_mlp({4}, 1), InvalidInput);
  CHECK_THROWS_AS(init_mlp({4, 0, 2}, 1), InvalidInput);

  const auto a = init_mlp({4, 70, 70, 70, 2}, 42);
  const auto b = init_mlp({4, 70, 70, 70, 2}, 42);
  const auto c = init_mlp({4, 70, 70, 70, 2}, 43);
  CHECK(a.theta() == b.theta());
  CHECK(a.theta() != c.theta());
  CHECK(a.size() == 4 * 70 + 70 + 70 * 70 + 70 + 70 * 70 + 70 + 70 * 2 + 2);

  for (int l = 0; l < a.layers(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(a.W(l).cols()));
    CHECK(a.W(l).cwiseAbs().maxCoeff() <= bound);
    CHECK(a.W(l).cwiseAbs().maxCoeff() > 0.8 * bound);
    CHECK(std::abs(a.W(l).mean()) < 0.1 * bound);
  }
}

TEST_CASE("forward on zero and hand-built networks", "[mlp]") {
  const auto z = init_mlp({4, 70, 70, 70, 2}, 7, 0.0);
  const auto r = forward(z, {1.0, -2.0, 0.5, 3.0});
  CHECK(r.phi == 0.0);
  CHECK_THAT(r.rho, WithinAbs(std::log(2.0), 1e-15));
  const auto d = forward_with_derivs(z, {1.0, -2.0, 0.5, 3.0});
  CHECK(d.grad_x_phi.isZero(0.0));
  CHECK(d.grad_x_rho.isZero(0.0));
  CHECK(d.dphi_dt == 0.0);
  CHECK(d.lap_x_phi == 0.0);
  CHECK(d.lap_x_rho == 0.0);

  // One hidden unit: φ = v₀ tanh(w·ξ + b) + c₀, ρ = softplus(v₁ tanh(·) + c₁).
  MlpParams p({4, 1, 2}, false);
  p.W(0) << 0.3, -0.7, 0.2, 0.5;
  p.b(0) << 0.1;
  p.W(1) << 1.5, -0.4;
  p.b(1) << -0.25, 0.6;
  const Eigen::Vector4d xi(0.4, 1.1, -0.9, 2.0);
  const double h = std::tanh(0.3 * 0.4 - 0.7 * 1.1 + 0.2 * -0.9 + 0.5 * 2.0 + 0.1);
  const auto o = forward(p, xi);
  CHECK_THAT(o.phi, WithinAbs(1.5 * h - 0.25, 1e-12));
  CHECK_THAT(o.rho, WithinAbs(std::log1p(std::exp(-0.4 * h + 0.6)), 1e-12));

  // Same network, first and second derivatives by hand.
  const double t1 = 1 - h * h, t2 = -2 * h * t1;
  const Eigen::Vector4d w(0.3, -0.7, 0.2, 0.5);
  const auto e = forward_with_derivs(p, xi);
  for (int k = 0; k < 3; ++k) {
    CHECK_THAT(e.grad_x_phi[k], WithinAbs(1.5 * t1 * w[k], 1e-12));
    CHECK_THAT(e.d2_x_phi[k], WithinAbs(1.5 * t2 * w[k] * w[k], 1e-12));
  }
  CHECK_THAT(e.dphi_dt, WithinAbs(1.5 * t1 * w[3], 1e-12));
  CHECK_THAT(e.lap_x_phi, WithinAbs(1.5 * t2 * w.head<3>().squaredNorm(), 1e-12));
  CHECK(forward(p, xi).phi == forward(p, xi).phi);
}

TEST_CASE("linear network has constant gradient and zero Laplacian", "[mlp]") {
  MlpParams p({4, 2}, false);
  p.W(0) << 0.5, -1.0, 2.0, 0.25, 0.1, 0.2, 0.3, 0.4;
  p.b(0) << 1.0, -1.0;
  for (const Eigen::Vector4d xi : {Eigen::Vector4d(0, 0, 0, 0), Eigen::Vector4d(1, -2, 3, 4)}) {
    const auto r = forward_with_derivs(p, xi);
    CHECK(r.grad_x_phi.isApprox(Vec3(0.5, -1.0, 2.0)));
    CHECK(r.dphi_dt == 0.25);
    CHECK(r.lap_x_phi == 0.0);
    CHECK(r.d2_x_phi.isZero(0.0));
  }
}

TEST_CASE("rho head stays positive on the domain", "[mlp]") {
  const auto p = init_mlp({4, 70, 70, 70, 2}, 2024);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> X(-5.0, 5.0), T(0.0, 4.0);
  Eigen::Matrix4Xd pts(4, 1000);
  for (int k = 0; k < 1000; ++k) pts.col(k) << X(rng), X(rng), X(rng), T(rng);
  const auto out = evaluate_batch(p, pts, JetOrder::Second);
  CHECK(out.all_finite());
  CHECK((out.rho > 0.0).all());
  // Far outside the domain softplus still returns a positive number.
  CHECK(forward(p, {1e3, -1e3, 1e3, 50.0}).rho > 0.0);
}

TEST_CASE("batched evaluation equals pointwise evaluation", "[mlp]") {
  const auto p = init_mlp({4, 16, 16, 2}, 3);
  std::mt19937_64 rng(9);
  Eigen::Matrix4Xd pts(4, 13);
  for (int k = 0; k < 13; ++k) pts.col(k) = random_point(rng);
  const auto batch = evaluate_batch(p, pts, JetOrder::Second);
  const auto values = evaluate_batch(p, pts, JetOrder::Value);
  for (int k = 0; k < 13; ++k) {
    const auto one = forward_with_derivs(p, pts.col(k));
    const auto b = batch.at(k);
    CHECK_THAT(b.phi, WithinAbs(one.phi, 1e-14));
    CHECK_THAT(b.lap_x_rho, WithinAbs(one.lap_x_rho, 1e-13));
    CHECK_THAT(values.phi[k], WithinAbs(one.phi, 1e-14));
    CHECK_THAT(values.rho[k], WithinAbs(one.rho, 1e-14));
  }
  const auto first = evaluate_batch(p, pts, JetOrder::First);
  CHECK(((first.phi_x - batch.phi_x).abs() < 1e-14).all());
  CHECK(((first.rho_x - batch.rho_x).abs() < 1e-14).all());
  CHECK(((first.phi_t - batch.phi_t).abs() < 1e-14).all());
  CHECK(first.phi_xx.isZero(0.0));
}

TEST_CASE("input derivatives match finite differences", "[mlp][fd]") {
  for (const bool scales : {false, true}) {
    for (const auto& widths : {std::vector<int>{4, 8, 8, 2}, std::vector<int>{4, 16, 16, 2}}) {
      for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        auto p = init_mlp(widths, seed, 1.5, scales);
        if (scales)
          for (int l = 0; l < p.layers(); ++l) p.scale_ref(l) = 0.7 + 0.2 * l;
        std::mt19937_64 rng(100 + seed);
        for (int i = 0; i < 50; ++i) {
          const Eigen::Vector4d xi = random_point(rng);
          const auto r = forward_with_derivs(p, xi);
          const auto fd = fd_derivs(p, xi, 1e-4);
          for (int k = 0; k < 3; ++k) {
            CHECK(rel_err(r.grad_x_phi[k], fd.dphi[k], 1e-3) < 1e-5);
            CHECK(rel_err(r.grad_x_rho[k], fd.drho[k], 1e-3) < 1e-5);
            CHECK(rel_err(r.d2_x_phi[k], fd.d2phi[k], 1e-2) < 1e-4);
            CHECK(rel_err(r.d2_x_rho[k], fd.d2rho[k], 1e-2) < 1e-4);
          }
          CHECK(rel_err(r.dphi_dt, fd.dphi[3], 1e-3) < 1e-5);
          CHECK(rel_err(r.drho_dt, fd.drho[3], 1e-3) < 1e-5);
          CHECK(rel_err(r.lap_x_phi, fd.d2phi.sum(), 1e-2) < 1e-4);
          CHECK(rel_err(r.lap_x_rho, fd.d2rho.sum(), 1e-2) < 1e-4);

          const auto g2 = fd_second_from_grad(p, xi, 1e-5);
          for (int k = 0; k < 3; ++k) {
            CHECK(rel_err(r.d2_x_phi[k], g2(k, 0), 1e-4) < 1e-6);
            CHECK(rel_err(r.d2_x_rho[k], g2(k, 1), 1e-4) < 1e-6);
          }
        }
      }
    }
  }
}

TEST_CASE("parameter gradients match finite differences", "[mlp][fd]") {
  SECTION("constant loss has zero gradient") {
    const auto p = init_mlp({4, 8, 8, 2}, 1);
    Eigen::Matrix4Xd pts = Eigen::Matrix4Xd::Random(4, 5);
    const auto lg = loss_param_grad(p, pts, JetOrder::Second, [](const EvalBatch&, EvalBatch&) { return 3.5; });
    CHECK(lg.loss == 3.5);
    CHECK(lg.grad.isZero(0.0));
  }

  SECTION("loss = phi at one point") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      auto p = init_mlp({4, 8, 8, 2}, seed, 1.5);
      const Eigen::Vector4d xi(0.3, -1.2, 0.8, 1.5);
      const auto lg = loss_param_grad(p, xi, JetOrder::Value, [](const EvalBatch& o, EvalBatch& a) {
        a.phi[0] = 1.0;
        return o.phi[0];
      });
      for (Eigen::Index i = 0; i < p.size(); ++i) {
        const double keep = p.theta()[i];
        p.theta()[i] = keep + 1e-6;
        const double up = forward(p, xi).phi;
        p.theta()[i] = keep - 1e-6;
        const double dn = forward(p, xi).phi;
        p.theta()[i] = keep;
        CHECK(rel_err(lg.grad[i], (up - dn) / 2e-6, 1e-3) < 1e-5);
      }
    }
  }

  SECTION("composite losses through input derivatives") {
    for (const bool scales : {false, true}) {
      for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        auto p = init_mlp({4, 8, 8, 2}, seed, 1.5, scales);
        std::mt19937_64 rng(seed * 31);
        Eigen::Matrix4Xd pts(4, 10);
        for (int k = 0; k < 10; ++k) pts.col(k) = random_point(rng);

        MixedLoss L;
        std::uniform_real_distribution<double> U(0.1, 1.0);
        for (int i = 0; i < 12; ++i) L.w[i] = U(rng);
        const double n = static_cast<double>(pts.cols());
        const auto mixed = loss_param_grad(p, pts, JetOrder::Second, [&](const EvalBatch& o, EvalBatch& a) {
          double s = 0;
          for (Eigen::Index k = 0; k < o.size(); ++k) {
            s += L.point(o.at(k));
            mixed_adjoint(L, o, a, k, 1.0 / n);
          }
          return s / n;
        });
        CHECK_THAT(mixed.loss, WithinRel(mixed_total(L, p, pts), 1e-12));

        HjbLoss H;
        auto hjb_total = [&](const MlpParams& q) {
          double s = 0;
          for (int k = 0; k < pts.cols(); ++k) {
            const double r = H.residual(forward_with_derivs(q, pts.col(k)), pts.col(k));
            s += r * r;
          }
          return s / n;
        };
        const auto hjb = loss_param_grad(p, pts, JetOrder::Second, [&](const EvalBatch& o, EvalBatch& a) {
          double s = 0;
          for (Eigen::Index k = 0; k < o.size(); ++k) {
            const auto r = o.at(k);
            const double res = H.residual(r, pts.col(k));
            s += res * res;
            const double c = 2 * res / n;
            const Vec3 f(pts(1, k) * pts(2, k), pts(2, k) * pts(0, k), pts(0, k) * pts(1, k));
            a.phi_t[k] = c;
            a.phi_x.col(k) = c * (H.beta.cwiseAbs2().cwiseProduct(r.grad_x_phi) + H.alpha.cwiseProduct(f)).array();
            a.phi_xx.col(k).setConstant(c * H.delta);
          }
          return s / n;
        });

        const double h = 1e-6;
        Eigen::VectorXd fd_mixed(p.size()), fd_hjb(p.size());
        for (Eigen::Index i = 0; i < p.size(); ++i) {
          const double keep = p.theta()[i];
          p.theta()[i] = keep + h;
          const double mu = mixed_total(L, p, pts), hu = hjb_total(p);
          p.theta()[i] = keep - h;
          const double md = mixed_total(L, p, pts), hd = hjb_total(p);
          p.theta()[i] = keep;
          fd_mixed[i] = (mu - md) / (2 * h);
          fd_hjb[i] = (hu - hd) / (2 * h);
        }
        CHECK((mixed.grad - fd_mixed).norm() / fd_mixed.norm() < 1e-6);
        CHECK((hjb.grad - fd_hjb).norm() / fd_hjb.norm() < 1e-6);
        for (Eigen::Index i = 0; i < p.size(); ++i) {
          CHECK(rel_err(mixed.grad[i], fd_mixed[i], 1e-2 * fd_mixed.cwiseAbs().maxCoeff()) < 1e-4);
          CHECK(rel_err(hjb.grad[i], fd_hjb[i], 1e-2 * fd_hjb.cwiseAbs().maxCoeff()) < 1e-4);
        }
      }
    }
  }

  SECTION("first-order jets give the same gradient for first-order losses") {
    const auto p = init_mlp({4, 8, 8, 2}, 4);
    std::mt19937_64 rng(12);
    Eigen::Matrix4Xd pts(4, 7);
    for (int k = 0; k < 7; ++k) pts.col(k) = random_point(rng);
    auto closure = [](const EvalBatch& o, EvalBatch& a) {
      a.phi_x = 2.0 * o.phi_x;
      a.rho_t = 1.0;
      a.rho_x.row(2) = 3.0;
      return (o.phi_x.square().sum() + o.rho_t.sum() + 3.0 * o.rho_x.row(2).sum());
    };
    const auto g1 = loss_param_grad(p, pts, JetOrder::First, closure);
    const auto g2 = loss_param_grad(p, pts, JetOrder::Second, closure);
    CHECK_THAT(g1.loss, WithinRel(g2.loss, 1e-13));
    CHECK((g1.grad - g2.grad).norm() <= 1e-12 * g2.grad.norm());
  }

  SECTION("non-finite loss reports the offending point") {
    const auto p = init_mlp({4, 8, 2}, 1);
    Eigen::Matrix4Xd pts(4, 3);
    pts << 0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2;
    try {
      loss_param_grad(p, pts, JetOrder::Second, [](const EvalBatch&, EvalBatch& a) {
        a.phi[1] = std::numeric_limits<double>::quiet_NaN();
        return std::numeric_limits<double>::quiet_NaN();
      });
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      CHECK(e.point() == Eigen::Vector4d(1, 1, 1, 1));
    }
  }
}

TEST_CASE("adam step", "[mlp][adam]") {
  MlpParams p({4, 2}, false);
  p.theta().setZero();
  auto st = AdamState::for_params(p);

  SECTION("zero gradient leaves parameters unchanged") {
    adam_step(p, Eigen::VectorXd::Zero(p.size()), st);
    CHECK(p.theta().isZero(0.0));
    CHECK(st.step == 1);
  }

  SECTION("first step by hand") {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(p.size());
    g[0] = 1.0;
    g[1] = -3.0;
    adam_step(p, g, st);
    // m̂ = g, v̂ = g², step = lr·g/(|g| + ε̂).
    CHECK_THAT(p.theta()[0], WithinAbs(-1e-3 * 1.0 / (1.0 + 1e-8), 1e-18));
    CHECK_THAT(p.theta()[1], WithinAbs(1e-3 * 3.0 / (3.0 + 1e-8), 1e-18));
    CHECK(p.theta()[2] == 0.0);
  }

  SECTION("second step by hand") {
    Eigen::VectorXd g1 = Eigen::VectorXd::Zero(p.size()), g2 = g1;
    g1[0] = 1.0;
    g2[0] = 0.5;
    adam_step(p, g1, st);
    const double after1 = p.theta()[0];
    adam_step(p, g2, st);
    const double m = 0.9 * 0.1 * 1.0 + 0.1 * 0.5, v = 0.999 * 0.001 * 1.0 + 0.001 * 0.25;
    const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
    CHECK_THAT(p.theta()[0], WithinAbs(after1 - 1e-3 * mh / (std::sqrt(vh) + 1e-8), 1e-15));
  }

  SECTION("constant gradient gives steps of size lr") {
    Eigen::VectorXd g = Eigen::VectorXd::Constant(p.size(), -2.0);
    for (int i = 0; i < 2000; ++i) {
      const Eigen::VectorXd before = p.theta();
      adam_step(p, g, st);
      if (i > 1990) {
        CHECK_THAT((p.theta() - before).maxCoeff(), WithinRel(1e-3, 1e-6));
      }
    }
  }

  SECTION("shape mismatch") {
    CHECK_THROWS_AS(adam_step(p, Eigen::VectorXd::Zero(3), st), InvalidInput);
  }
}

TEST_CASE("parameters and optimizer state round-trip through JSON", "[mlp][json]") {
  for (const bool scales : {false, true}) {
    auto p = init_mlp({4, 5, 3, 2}, 11, 1.0, scales);
    p.b(1) << 0.1, 0.2, 0.3;
    const auto j = params_to_json(p);
    CHECK(j["layers"][0]["weights"].size() == 20);
    // Row-major: second entry is W(0, 1).
    CHECK(j["layers"][0]["weights"][1].get<double>() == p.W(0)(0, 1));
    const auto q = params_from_json(nlohmann::json::parse(j.dump()));
    CHECK(q.same_shape(p));
    CHECK(q.theta() == p.theta());

    auto st = AdamState::for_params(p);
    adam_step(p, Eigen::VectorXd::LinSpaced(p.size(), -1, 1), st);
    const auto st2 = adam_from_json(nlohmann::json::parse(adam_to_json(st).dump()), p);
    CHECK(st2.m == st.m);
    CHECK(st2.v == st.v);
    CHECK(st2.step == 1);
  }

  auto j = params_to_json(init_mlp({4, 5, 2}, 1));
  j["layers"][0]["bias"].push_back(1.0);
  CHECK_THROWS_AS(params_from_json(j), InvalidInput);
}
