#include <catch2/catch_amalgamated.hpp>

#include "ebridge/bridge.hpp"

#include <cmath>
#include <random>

using namespace ebridge;
using Catch::Approx;

namespace {

ProblemSpec reference_spec() {
  ProblemSpec s;
  s.inertia = InertiaSpec{Vec3(0.45, 0.50, 0.55)};
  s.body = derive_params(*s.inertia);
  s.rho0 = GaussianPdf(Vec3::Constant(2.0), 0.5 * Mat3::Identity());
  s.rhoT = GaussianPdf(Vec3::Zero(), 0.5 * Mat3::Identity());
  return s;
}

MlpParams small_net(std::uint64_t seed, bool scales = false) { return init_mlp({4, 6, 6, 2}, seed, 1.0, scales); }

Eigen::Matrix4Xd random_features(std::mt19937_64& rng, Index n) {
  std::uniform_real_distribution<double> X(-3.0, 3.0), T(0.0, 4.0);
  Eigen::Matrix4Xd xi(4, n);
  for (Index k = 0; k < n; ++k) xi.col(k) << X(rng), X(rng), X(rng), T(rng);
  return xi;
}

// Residuals from central differences of the value-only network.
struct FdResiduals {
  double hjb, fpk;
};

FdResiduals fd_residuals(const MlpParams& p, const Eigen::Vector4d& xi, const ProblemSpec& s, double h = 1e-4) {
  const auto c = forward(p, xi);
  Eigen::Vector4d dphi, drho;
  Vec3 d2phi, d2rho;
  for (int k = 0; k < 4; ++k) {
    Eigen::Vector4d e = Eigen::Vector4d::Zero();
    e[k] = h;
    const auto pl = forward(p, xi + e), mi = forward(p, xi - e);
    dphi[k] = (pl.phi - mi.phi) / (2 * h);
    drho[k] = (pl.rho - mi.rho) / (2 * h);
    if (k < 3) {
      d2phi[k] = (pl.phi - 2 * c.phi + mi.phi) / (h * h);
      d2rho[k] = (pl.rho - 2 * c.rho + mi.rho) / (h * h);
    }
  }
  const Vec3 x = xi.head<3>();
  const Vec3 gphi = dphi.head<3>(), grho = drho.head<3>();
  const Vec3 af(s.body.alpha[0] * x[1] * x[2], s.body.alpha[1] * x[2] * x[0], s.body.alpha[2] * x[0] * x[1]);
  const Vec3 b2 = s.body.beta.cwiseAbs2();
  double hjb = dphi[3] + gphi.dot(af) + s.delta * d2phi.sum();
  for (int i = 0; i < 3; ++i) hjb += 0.5 * b2[i] * gphi[i] * gphi[i];
  double fpk = drho[3] - s.delta * d2rho.sum();
  for (int i = 0; i < 3; ++i) fpk += (af[i] + b2[i] * gphi[i]) * grho[i] + c.rho * b2[i] * d2phi[i];
  return {hjb, fpk};
}

// Entropic transport value between two-atom measures by golden-section
// search over the single free entry of the coupling.
double two_atom_value(const Eigen::Vector2d& a, const Eigen::Vector2d& b, const Eigen::Matrix2d& C, double eps) {
  auto objective = [&](double s) {
    const double p[4] = {s, a[0] - s, b[0] - s, a[1] - b[0] + s};
    const double c[4] = {C(0, 0), C(0, 1), C(1, 0), C(1, 1)};
    double v = 0.0;
    for (int k = 0; k < 4; ++k) v += p[k] * (c[k] + eps * std::log(p[k]));
    return v;
  };
  double lo = std::max(0.0, b[0] - a[1]) + 1e-15, hi = std::min(a[0], b[0]) - 1e-15;
  const double r = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = hi - r * (hi - lo), d = lo + r * (hi - lo);
  double fc = objective(c), fd = objective(d);
  while (hi - lo > 1e-15) {
    if (fc < fd) {
      hi = d; d = c; fd = fc; c = hi - r * (hi - lo); fc = objective(c);
    } else {
      lo = c; c = d; fc = fd; d = lo + r * (hi - lo); fd = objective(d);
    }
  }
  return objective(0.5 * (lo + hi));
}

template <class F>
VectorXd fd_param_grad(MlpParams p, F loss, double h = 1e-6) {
  VectorXd g(p.size());
  for (Index i = 0; i < p.size(); ++i) {
    const double t = p.theta()[i];
    p.theta()[i] = t + h;
    const double lp = loss(p);
    p.theta()[i] = t - h;
    const double lm = loss(p);
    p.theta()[i] = t;
    g[i] = (lp - lm) / (2 * h);
  }
  return g;
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.n_total = 200;
  cfg.epochs = 6;
  cfg.batch_size = 64;
  cfg.boundary_cap = 12;
  cfg.widths = {4, 8, 8, 2};
  cfg.resample_count = 30;
  cfg.resample_period = 4;
  cfg.deterministic = true;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST_CASE("problem spec", "[bridge]") {
  const auto s = reference_spec();
  CHECK_NOTHROW(s.validate());
  // 2 + 6·√0.5 exceeds the box edge at 5 for the initial Gaussian only.
  const auto pw = s.warnings();
  REQUIRE(pw.size() == 1);
  CHECK(pw[0].find("rho0") != std::string::npos);
  auto narrow = s;
  narrow.rho0 = GaussianPdf(Vec3::Constant(2.0), 0.25 * Mat3::Identity());
  CHECK(narrow.warnings().empty());
  CHECK_NOTHROW(narrow.validate(true));
  narrow.delta = 0.0;
  CHECK_THROWS_AS(narrow.validate(), InvalidInput);
  CHECK_NOTHROW(narrow.validate(true));
  CHECK(s.contains(Vec3(5, -5, 0)));
  CHECK_FALSE(s.contains(Vec3(5.1, 0, 0)));

  auto bad = s;
  bad.delta = 0.0;
  CHECK_THROWS_AS(bad.validate(), InvalidInput);
  bad = s;
  bad.horizon = -1.0;
  CHECK_THROWS_AS(bad.validate(), InvalidInput);
  bad = s;
  bad.upper[1] = bad.lower[1];
  CHECK_THROWS_AS(bad.validate(), InvalidInput);

  auto wide = s;
  wide.rhoT = GaussianPdf(Vec3::Zero(), 2.0 * Mat3::Identity());
  CHECK(wide.warnings().size() == 2);

  const Box fb = s.feature_box();
  CHECK(fb.lower[3] == 0.0);
  CHECK(fb.upper[3] == 4.0);
}

TEST_CASE("HJB residual", "[bridge][residual]") {
  const auto s = reference_spec();
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> U(-3.0, 3.0);

  SECTION("constant potential") {
    EvalResult r;
    r.phi = 1.7;
    r.rho = 0.3;
    for (int k = 0; k < 10; ++k) CHECK(hjb_residual(r, Vec3(U(rng), U(rng), U(rng)), s) == 0.0);
  }

  SECTION("linear potential") {
    for (int k = 0; k < 20; ++k) {
      const Vec3 c(U(rng), U(rng), U(rng)), x(U(rng), U(rng), U(rng));
      EvalResult r;
      r.grad_x_phi = c;
      const Vec3 f(x[1] * x[2], x[2] * x[0], x[0] * x[1]);
      const double expect = 0.5 * s.body.beta.cwiseProduct(c).squaredNorm() + c.dot(s.body.alpha.cwiseProduct(f));
      CHECK(hjb_residual(r, x, s) == Approx(expect).epsilon(1e-14).margin(1e-14));
    }
  }

  SECTION("linear in the noise level") {
    EvalResult r;
    r.grad_x_phi = Vec3(0.3, -0.2, 0.7);
    r.d2_x_phi = Vec3(1.0, 2.0, -0.5);
    r.lap_x_phi = 2.5;
    r.dphi_dt = -0.4;
    const Vec3 x(1.0, -2.0, 0.5);
    auto sd = s;
    sd.delta = 0.0;
    const double base = hjb_residual(r, x, sd);
    for (double d : {1e-1, 1e-3, 1e-6}) {
      sd.delta = d;
      CHECK(hjb_residual(r, x, sd) - base == Approx(d * 2.5).epsilon(1e-9));
    }
  }

  SECTION("network residual matches finite differences") {
    for (std::uint64_t seed : {1, 2, 3}) {
      const auto p = small_net(seed, seed == 2);
      const auto xi = random_features(rng, 10);
      for (Index k = 0; k < xi.cols(); ++k) {
        const auto fd = fd_residuals(p, xi.col(k), s);
        CHECK(hjb_residual(p, xi.col(k), s) == Approx(fd.hjb).epsilon(1e-5).margin(1e-5));
        CHECK(fpk_residual(p, xi.col(k), s) == Approx(fd.fpk).epsilon(1e-5).margin(1e-5));
      }
    }
  }

  SECTION("zero network has zero residuals") {
    MlpParams p({4, 5, 2}, false);
    const auto xi = random_features(rng, 5);
    for (Index k = 0; k < 5; ++k) {
      CHECK(hjb_residual(p, xi.col(k), s) == 0.0);
      CHECK(fpk_residual(p, xi.col(k), s) == 0.0);
    }
  }

  SECTION("non-finite evaluation reports the point") {
    auto p = small_net(1);
    p.theta()[0] = std::numeric_limits<double>::quiet_NaN();
    const Eigen::Vector4d xi(0.5, 0.5, 0.5, 1.0);
    try {
      (void)hjb_residual(p, xi, s);
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      CHECK(e.point() == xi);
    }
    CHECK_THROWS_AS(fpk_residual(p, xi, s), NumericalError);
  }
}

TEST_CASE("FPK residual", "[bridge][residual]") {
  const auto s = reference_spec();

  SECTION("constant density and potential") {
    EvalResult r;
    r.phi = -0.2;
    r.rho = 0.8;
    for (double d : {0.0, 0.1, 3.0}) {
      auto sd = s;
      sd.delta = d;
      CHECK(fpk_residual(r, Vec3(1, 2, -3), sd) == 0.0);
    }
  }

  SECTION("stationary density under the drift alone") {
    // ρ(x) = exp(−‖x − m‖²/2), differentiated by hand.
    const Vec3 m(0.3, -0.4, 0.2);
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> U(-2.0, 2.0);
    for (int k = 0; k < 10; ++k) {
      const Vec3 x(U(rng), U(rng), U(rng));
      const Vec3 d = x - m;
      const double rho = std::exp(-0.5 * d.squaredNorm());
      EvalResult r;
      r.rho = rho;
      r.grad_x_rho = -rho * d;
      r.d2_x_rho = rho * (d.array().square() - 1.0).matrix();
      r.lap_x_rho = r.d2_x_rho.sum();
      const Vec3 af = s.body.alpha.cwiseProduct(Vec3(x[1] * x[2], x[2] * x[0], x[0] * x[1]));
      const double expect = af.dot(-rho * d) - s.delta * rho * (d.squaredNorm() - 3.0);
      CHECK(fpk_residual(r, x, s) == Approx(expect).epsilon(1e-13).margin(1e-15));
    }
  }

  SECTION("unit gains weight the Hessian diagonal uniformly") {
    auto su = s;
    su.body.beta = Vec3::Ones();
    su.body.alpha.setZero();
    EvalResult r;
    r.rho = 0.7;
    r.d2_x_phi = Vec3(0.2, -1.0, 0.5);
    r.lap_x_phi = r.d2_x_phi.sum();
    CHECK(fpk_residual(r, Vec3(1, 1, 1), su) == Approx(0.7 * r.lap_x_phi).epsilon(1e-15));
  }
}

TEST_CASE("collocation", "[bridge]") {
  const auto s = reference_spec();
  const auto c = make_collocation(s, 1000);
  CHECK(c.interior.cols() == 800);
  CHECK(c.boundary0.cols() == 100);
  CHECK(c.boundaryT.cols() == 100);
  CHECK(c.interior.row(3).minCoeff() > 0.0);
  CHECK(c.interior.row(3).maxCoeff() < 4.0);
  for (Index k = 0; k < c.interior.cols(); ++k) CHECK(s.contains(c.interior.col(k).head<3>()));
  for (Index k = 0; k < c.boundary0.cols(); ++k) {
    CHECK(s.contains(c.boundary0.col(k)));
    CHECK(s.contains(c.boundaryT.col(k)));
  }
  // Half of each endpoint support sits near its Gaussian.
  int near = 0;
  for (Index k = 0; k < c.boundary0.cols(); ++k) near += (c.boundary0.col(k) - s.rho0.mean()).cwiseAbs().maxCoeff() <= 4.0 * std::sqrt(0.5) + 1e-12;
  CHECK(near >= 50);

  const auto capped = make_collocation(s, 1000, 16);
  CHECK(capped.interior.cols() == 800);
  CHECK(capped.boundary0.cols() == 16);
  CHECK_THROWS_AS(make_collocation(s, 10), InvalidInput);
}

TEST_CASE("boundary loss", "[bridge][boundary]") {
  const auto s = reference_spec();
  const auto c = make_collocation(s, 400);
  const auto p = small_net(7);

  SECTION("target weights follow the density") {
    const BoundaryTarget bt(c.boundary0, 0.0, s.rho0, 0.1);
    CHECK(bt.weights().sum() == Approx(1.0).epsilon(1e-14));
    for (Index i = 0; i < 5; ++i) {
      for (Index j = 0; j < 5; ++j) {
        const double ratio = s.rho0.pdf(c.boundary0.col(i)) / s.rho0.pdf(c.boundary0.col(j));
        CHECK(bt.weights()[i] / bt.weights()[j] == Approx(ratio).epsilon(1e-10));
      }
    }
  }

  SECTION("network weights proportional to the target reach the floor") {
    const BoundaryTarget bt(c.boundaryT, 4.0, s.rhoT, 0.1);
    CHECK(bt.self_divergence() == Approx(0.0).margin(1e-12));
    CHECK(bt.divergence(bt.weights(), true).grad.cwiseAbs().maxCoeff() == 0.0);
    CHECK(boundary_loss(p, bt) > bt.self_divergence());
    const BoundaryTarget plain(c.boundaryT, 4.0, s.rhoT, 0.1, 50, BoundaryDivergence::Unrolled);
    CHECK(plain.kind() == BoundaryDivergence::Unrolled);
    CHECK(plain.self_divergence() == 0.0);
    CHECK(boundary_loss(p, plain) > 0.0);
  }

  SECTION("invariant to rescaling the density") {
    const BoundaryTarget bt(c.boundary0, 0.0, s.rho0, 0.1);
    const auto rho = evaluate_batch(p, bt.features(), JetOrder::Value).rho;
    const double base = bt.divergence(detail::normalized_weights(rho), false).value;
    CHECK(boundary_loss(p, bt) == base);
    for (double k : {1e-3, 7.0, 1e4}) {
      CHECK(bt.divergence(detail::normalized_weights(k * rho), false).value == Approx(base).epsilon(1e-12));
    }
    CHECK_THROWS_AS(detail::normalized_weights(Eigen::ArrayXd::Zero(4)), InvalidInput);
  }

  SECTION("two support points against a golden-section oracle") {
    Eigen::Matrix3Xd pts(3, 2);
    pts.col(0) = Vec3(1.6, 2.0, 2.1);
    pts.col(1) = Vec3(2.2, 1.9, 2.0);
    const double eps = 0.1;
    // Weakly coupled atoms (kernel ≈ e^-3.8) need a long run to converge.
    const double L = boundary_loss(p, pts, 0.0, s.rho0, eps, BoundaryDivergence::Annealed, 2000);
    Eigen::Vector2d a(forward(p, feature(pts.col(0), 0.0)).rho, forward(p, feature(pts.col(1), 0.0)).rho);
    a /= a.sum();
    Eigen::Vector2d b(s.rho0.pdf(pts.col(0)), s.rho0.pdf(pts.col(1)));
    b /= b.sum();
    Eigen::Matrix2d C;
    C << 0.0, (pts.col(0) - pts.col(1)).squaredNorm(), (pts.col(0) - pts.col(1)).squaredNorm(), 0.0;
    const double expect =
        two_atom_value(a, b, C, eps) - 0.5 * two_atom_value(a, a, C, eps) - 0.5 * two_atom_value(b, b, C, eps);
    CHECK(L == Approx(expect).margin(1e-10));
    CHECK(boundary_loss(p, pts, 0.0, s.rho0, eps) == Approx(expect).epsilon(0.05));
    // Fifty plain iterations from zero potentials are not fully converged.
    const double unrolled = boundary_loss(p, pts, 0.0, s.rho0, eps, BoundaryDivergence::Unrolled);
    CHECK(unrolled == Approx(expect).margin(1e-5));
    CHECK_THROWS_AS(boundary_loss(p, pts.leftCols(1), 0.0, s.rho0, eps), InvalidInput);
  }

  SECTION("parameter gradient matches finite differences") {
    const auto small = make_collocation(s, 120);
    for (auto kind : {BoundaryDivergence::Annealed, BoundaryDivergence::Unrolled}) {
      // The annealed gradient is the converged one, so give it room to converge.
      const int iters = kind == BoundaryDivergence::Annealed ? 400 : 50;
      const BoundaryTarget bt(small.boundary0, 0.0, s.rho0, 20.0, iters, kind);
      for (std::uint64_t seed : {2, 9}) {
        const auto q = small_net(seed, seed == 9);
        const auto lg = boundary_loss_grad(q, bt);
        CHECK(lg.loss == Approx(boundary_loss(q, bt)).epsilon(1e-14));
        const VectorXd fd = fd_param_grad(q, [&](const MlpParams& r) { return boundary_loss(r, bt); });
        CHECK((lg.grad - fd).norm() <= 1e-5 * fd.norm() + 1e-10);
      }
    }
  }
}

TEST_CASE("interior loss", "[bridge][interior]") {
  const auto s = reference_spec();
  std::mt19937_64 rng(11);
  const auto pts = random_features(rng, 300);

  SECTION("mean squared residuals") {
    const auto p = small_net(4);
    const auto in = interior_loss(p, pts, s, {}, false);
    double hh = 0, ff = 0, rr = 0, fr = 0;
    for (Index k = 0; k < pts.cols(); ++k) {
      hh += std::pow(hjb_residual(p, pts.col(k), s), 2);
      ff += std::pow(fpk_residual(p, pts.col(k), s), 2);
      rr += std::pow(forward(p, pts.col(k)).rho, 2);
      fr += std::pow(fpk_residual(p, pts.col(k), s) / forward(p, pts.col(k)).rho, 2);
    }
    CHECK(in.phi == Approx(hh / 300).epsilon(1e-12));
    CHECK(in.rho == Approx(ff / 300).epsilon(1e-12));
    const auto scaled = interior_loss(p, pts, s, {}, false, FpkScaling::MeanRho2);
    CHECK(scaled.phi == in.phi);
    CHECK(scaled.rho == Approx(ff / rr).epsilon(1e-12));
    CHECK(interior_loss(p, pts, s, {}, false, FpkScaling::Relative).rho == Approx(fr / 300).epsilon(1e-12));
    CHECK_THROWS_AS(interior_loss(p, Eigen::Matrix4Xd(4, 0), s, {}, false), InvalidInput);
  }

  SECTION("weighted gradient matches finite differences") {
    const LossWeights w{0.7, 1.3, 1.0, 1.0};
    for (auto scaling : {FpkScaling::None, FpkScaling::MeanRho2, FpkScaling::Relative}) {
      for (std::uint64_t seed : {5, 6}) {
        const auto p = small_net(seed, seed == 6);
        const auto in = interior_loss(p, pts, s, w, true, scaling);
        const VectorXd fd = fd_param_grad(p, [&](const MlpParams& q) {
          const auto r = interior_loss(q, pts, s, w, false, scaling);
          return w.phi * r.phi + w.rho * r.rho;
        });
        CHECK((in.grad - fd).norm() <= 1e-6 * fd.norm() + 1e-9);
      }
    }
  }

  SECTION("non-finite residual reports the point") {
    auto p = small_net(1);
    p.theta()[3] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(interior_loss(p, pts, s, {}, true), NumericalError);
  }
}

TEST_CASE("total loss", "[bridge][loss]") {
  const auto s = reference_spec();
  const auto p = small_net(8);

  CollocationSet c;
  c.interior.resize(4, 5);
  c.interior << 0.1, -1.0, 2.0, 0.5, -2.5,  //
      1.0, 0.3, -0.7, 2.2, 0.0,             //
      -0.4, 1.1, 0.9, -1.5, 2.0,            //
      0.5, 1.0, 2.0, 3.0, 3.5;
  c.boundary0.resize(3, 3);
  c.boundary0 << 2.0, 1.5, 2.5, 2.0, 2.2, 1.7, 1.9, 2.4, 2.0;
  c.boundaryT.resize(3, 3);
  c.boundaryT << 0.0, 0.5, -0.4, 0.1, -0.3, 0.2, 0.4, 0.0, -0.6;

  const auto all = total_loss(p, c, s, 0.1);
  double hh = 0, ff = 0;
  for (Index k = 0; k < 5; ++k) {
    hh += std::pow(hjb_residual(p, c.interior.col(k), s), 2);
    ff += std::pow(fpk_residual(p, c.interior.col(k), s), 2);
  }
  CHECK(all.phi == Approx(hh / 5).epsilon(1e-12));
  CHECK(all.rho == Approx(ff / 5).epsilon(1e-12));
  CHECK(all.rho0 == Approx(boundary_loss(p, c.boundary0, 0.0, s.rho0, 0.1)).epsilon(1e-12));
  CHECK(all.rhoT == Approx(boundary_loss(p, c.boundaryT, 4.0, s.rhoT, 0.1)).epsilon(1e-12));
  CHECK(all.total == Approx(all.phi + all.rho + all.rho0 + all.rhoT).epsilon(1e-12));
  CHECK(all.phi >= 0.0);
  CHECK(all.rho >= 0.0);
  CHECK(all.rho0 >= -1e-12);
  CHECK(all.rhoT >= -1e-12);

  const auto eq = total_loss(p, c, s, 0.1, {1, 1, 0, 0});
  CHECK(eq.total == all.phi + all.rho);
  const auto w = total_loss(p, c, s, 0.1, {2, 0.5, 3, 0.25});
  CHECK(w.total == Approx(2 * all.phi + 0.5 * all.rho + 3 * all.rho0 + 0.25 * all.rhoT).epsilon(1e-12));
}

TEST_CASE("training schedule helpers", "[bridge][train]") {
  const auto s = reference_spec();
  const auto cfg = tiny_config();

  SECTION("a pass over the interior visits every point once") {
    const auto c = make_collocation(s, cfg.n_total);
    const Index n = c.interior.cols();
    std::vector<int> hits(n, 0);
    for (long e = 0; e < n / 40; ++e) {
      const auto b = detail::interior_batch(c.interior, 40, 3, e);
      for (Index k = 0; k < b.cols(); ++k) {
        for (Index i = 0; i < n; ++i) {
          if (b.col(k) == c.interior.col(i)) ++hits[i];
        }
      }
    }
    for (int h : hits) CHECK(h == 1);
    CHECK(detail::interior_batch(c.interior, 40, 3, 2) == detail::interior_batch(c.interior, 40, 3, 2));
    CHECK(detail::interior_batch(c.interior, 10 * n, 3, 0) == c.interior);
  }

  SECTION("resampling replaces a fixed count at each event") {
    const auto c = make_collocation(s, cfg.n_total);
    auto a = c.interior;
    detail::apply_resampling(a, s, cfg, 0, 3);
    CHECK(a == c.interior);
    detail::apply_resampling(a, s, cfg, 3, 4);
    Index changed = 0;
    for (Index k = 0; k < a.cols(); ++k) changed += a.col(k) != c.interior.col(k);
    CHECK(changed == 30);
    for (Index k = 0; k < a.cols(); ++k) {
      CHECK(s.contains(a.col(k).head<3>()));
      CHECK(a(3, k) >= 0.0);
      CHECK(a(3, k) <= 4.0);
    }
    auto b = c.interior;
    detail::apply_resampling(b, s, cfg, 0, 2);
    detail::apply_resampling(b, s, cfg, 2, 4);
    CHECK(a == b);
  }
}

TEST_CASE("train", "[bridge][train]") {
  const auto s = reference_spec();
  auto cfg = tiny_config();

  SECTION("zero epochs returns the initial network") {
    cfg.epochs = 0;
    const auto tb = train(s, cfg);
    CHECK(tb.history.empty());
    CHECK(tb.epoch == 0);
    CHECK(tb.params.theta() == init_mlp(cfg.widths, cfg.seed).theta());
  }

  SECTION("history and state are reproducible") {
    const auto a = train(s, cfg);
    const auto b = train(s, cfg);
    REQUIRE(a.history.size() == 6);
    for (std::size_t k = 0; k < a.history.size(); ++k) {
      CHECK(a.history[k].epoch == static_cast<long>(k + 1));
      CHECK(a.history[k].loss.total == b.history[k].loss.total);
      CHECK(std::isfinite(a.history[k].loss.total));
    }
    CHECK(a.params.theta() == b.params.theta());
    CHECK(a.params.theta() != init_mlp(cfg.widths, cfg.seed).theta());
  }

  SECTION("resuming from a serialized checkpoint continues bit-identically") {
    const auto full = train(s, cfg);
    auto half_cfg = cfg;
    half_cfg.epochs = 3;
    const auto half = train(s, half_cfg);
    const auto restored = checkpoint_from_json(nlohmann::json::parse(checkpoint_json(half).dump()), s);
    CHECK(restored.epoch == 3);
    TrainHooks hooks;
    hooks.resume = &restored;
    const auto rest = train(s, cfg, hooks);
    CHECK(rest.epoch == 6);
    CHECK(rest.params.theta() == full.params.theta());
    REQUIRE(rest.history.size() == 3);
    CHECK(rest.history.back().loss.total == full.history.back().loss.total);
  }

  SECTION("loss weights and scaling flow into the step") {
    cfg.epochs = 1;
    cfg.weights = {1, 1, 0, 0};
    cfg.fpk_scaling = FpkScaling::None;
    cfg.boundary_divergence = BoundaryDivergence::Unrolled;
    const auto tb = train(s, cfg);
    const auto& l = tb.history[0].loss;
    CHECK(l.total == l.phi + l.rho);
    CHECK(l.rho0 > 0.0);
  }

  SECTION("periodic checkpoints and the final state reach the hook") {
    cfg.checkpoint_period = 2;
    std::vector<long> seen;
    TrainHooks hooks;
    hooks.checkpoint = [&](const TrainedBridge& tb) { seen.push_back(tb.epoch); };
    long progress = 0;
    hooks.progress = [&](const HistoryRow&) { ++progress; };
    train(s, cfg, hooks);
    CHECK(seen == std::vector<long>{2, 4, 6});
    CHECK(progress == 6);
  }

  SECTION("a non-finite loss checkpoints the last state and aborts") {
    auto start = train(s, [&] { auto c = cfg; c.epochs = 2; return c; }());
    start.params.theta()[0] = std::numeric_limits<double>::quiet_NaN();
    TrainHooks hooks;
    hooks.resume = &start;
    long saved = -1;
    hooks.checkpoint = [&](const TrainedBridge& tb) { saved = tb.epoch; };
    CHECK_THROWS_AS(train(s, cfg, hooks), NumericalError);
    CHECK(saved == 2);
  }

  SECTION("configuration errors") {
    auto bad = cfg;
    bad.epsilon = 0.0;
    CHECK_THROWS_AS(train(s, bad), InvalidInput);
    bad = cfg;
    bad.weights.rho = -1.0;
    CHECK_THROWS_AS(train(s, bad), InvalidInput);
    bad = cfg;
    bad.batch_size = 0;
    CHECK_THROWS_AS(train(s, bad), InvalidInput);
    const auto tb = train(s, [&] { auto c = cfg; c.epochs = 1; return c; }());
    TrainHooks hooks;
    hooks.resume = &tb;
    bad = cfg;
    bad.widths = {4, 5, 2};
    CHECK_THROWS_AS(train(s, bad, hooks), InvalidInput);
  }
}

TEST_CASE("training outputs", "[bridge][io]") {
  const auto s = reference_spec();
  auto cfg = tiny_config();
  cfg.epochs = 2;
  auto tb = train(s, cfg);
  tb.config_hash = "abc123";

  const auto csv = history_csv(tb.history);
  CHECK(csv.rfind("epoch,L_phi,L_rho,L_rho0,L_rhoT,total\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  CHECK(csv.find("\n2,") != std::string::npos);

  const auto j = checkpoint_json(tb);
  CHECK(j["format"] == 1);
  CHECK(j["epoch"] == 2);
  CHECK(j["rng"]["seed"] == 5);
  const auto back = checkpoint_from_json(nlohmann::json::parse(j.dump()), s);
  CHECK(back.params.theta() == tb.params.theta());
  CHECK(back.adam.m == tb.adam.m);
  CHECK(back.adam.v == tb.adam.v);
  CHECK(back.adam.step == tb.adam.step);
  CHECK(back.config_hash == "abc123");

  auto broken = j;
  broken["format"] = 2;
  CHECK_THROWS_AS(checkpoint_from_json(broken, s), InvalidInput);
  broken = j;
  broken.erase("adam");
  CHECK_THROWS_AS(checkpoint_from_json(broken, s), InvalidInput);
}
