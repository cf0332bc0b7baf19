#pragma once

#include "ebridge/core.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace ebridge {

/// Joint normal density N(mean, cov) on R³.
class GaussianPdf {
 public:
  GaussianPdf() : GaussianPdf(Vec3::Zero(), Mat3::Identity()) {}

  GaussianPdf(const Vec3& mean, const Mat3& cov) : mean_(mean), cov_(cov) {
    if (!mean.allFinite() || !cov.allFinite()) throw InvalidInput("Gaussian parameters must be finite");
    if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + cov.cwiseAbs().maxCoeff())) {
      throw InvalidInput("Gaussian covariance must be symmetric");
    }
    Eigen::LLT<Mat3> llt(cov);
    if (llt.info() != Eigen::Success) throw InvalidInput("Gaussian covariance must be positive definite");
    chol_ = llt.matrixL();
    const double log_det = 2.0 * chol_.diagonal().array().log().sum();
    log_norm_ = -0.5 * (3.0 * std::log(2.0 * std::numbers::pi) + log_det);
  }

  const Vec3& mean() const { return mean_; }
  const Mat3& cov() const { return cov_; }
  const Mat3& cholesky() const { return chol_; }

  double log_pdf(const Vec3& x) const {
    const Vec3 z = chol_.triangularView<Eigen::Lower>().solve(x - mean_);
    return log_norm_ - 0.5 * z.squaredNorm();
  }

  double pdf(const Vec3& x) const { return std::exp(log_pdf(x)); }

  /// Standard deviation along a coordinate axis (0-based).
  double axis_sigma(int axis) const { return std::sqrt(cov_(axis, axis)); }

  template <class Rng>
  Vec3 sample(Rng& rng) const {
    std::normal_distribution<double> n01;
    const Vec3 z{n01(rng), n01(rng), n01(rng)};
    return mean_ + chol_ * z;
  }

 private:
  Vec3 mean_;
  Mat3 cov_;
  Mat3 chol_;
  double log_norm_ = 0.0;
};

}  // namespace ebridge
