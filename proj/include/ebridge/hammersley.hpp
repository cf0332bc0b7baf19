#pragma once

#include "ebridge/core.hpp"

#include <cstdint>
#include <vector>

namespace ebridge {

/// Radical inverse of i in the given base (van der Corput digit reversal).
inline double radical_inverse(std::uint64_t i, unsigned base) {
  double inv = 1.0 / base, f = inv, r = 0.0;
  while (i > 0) {
    r += f * static_cast<double>(i % base);
    i /= base;
    f *= inv;
  }
  return r;
}

/// Axis-aligned box in up to four dimensions.
struct Box {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
};

/// Hammersley set of `count` points (one per column): coordinate 1 is i/count,
/// the remaining coordinates are radical inverses in bases 2, 3, 5, mapped
/// affinely into the box. Indices run from `first` to `first + count - 1`.
inline Eigen::MatrixXd hammersley(std::size_t count, int dims, const Box& box, std::size_t first = 0,
                                  std::size_t denominator = 0) {
  if (dims < 1 || dims > 4) throw InvalidInput("hammersley: dims must be in 1..4");
  if (box.lower.size() != dims || box.upper.size() != dims) throw InvalidInput("hammersley: box dimension mismatch");
  if (!((box.upper - box.lower).array() > 0.0).all()) throw InvalidInput("hammersley: empty box");
  static constexpr unsigned bases[3] = {2, 3, 5};
  const double n = static_cast<double>(denominator ? denominator : count);
  const Eigen::ArrayXd span = box.upper - box.lower;
  Eigen::MatrixXd pts(dims, count);
  for (std::size_t k = 0; k < count; ++k) {
    const std::uint64_t i = first + k;
    Eigen::ArrayXd u(dims);
    u[0] = static_cast<double>(i) / n;
    for (int d = 1; d < dims; ++d) u[d] = radical_inverse(i, bases[d - 1]);
    pts.col(k) = box.lower.array() + span * u;
  }
  return pts;
}

}  // namespace ebridge
