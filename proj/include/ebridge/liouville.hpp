#pragma once

// Uncontrolled density propagation. The unforced drift α ⊙ f is divergence
// free, so the density is constant along characteristics:
//   ρ(x, t) = ρ₀(x₀(x, t)).

#include "ebridge/gaussian.hpp"
#include "ebridge/io.hpp"
#include "ebridge/parallel.hpp"
#include "ebridge/rigid_body.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <string>
#include <vector>

namespace ebridge {

/// Tensor-product grid of nodes including both endpoints on each axis.
struct GridSpec {
  Vec3 lower = Vec3::Constant(-5.0);
  Vec3 upper = Vec3::Constant(5.0);
  std::array<int, 3> points{64, 64, 64};

  static GridSpec cube(double lo, double hi, int n) {
    return {Vec3::Constant(lo), Vec3::Constant(hi), {n, n, n}};
  }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (!(lower[a] < upper[a])) throw InvalidInput("grid lower bound must be below upper bound");
      if (points[a] < 2) throw InvalidInput("grid needs at least 2 points per axis");
    }
  }

  double spacing(int axis) const { return (upper[axis] - lower[axis]) / (points[axis] - 1); }
  double coord(int axis, int i) const { return lower[axis] + i * spacing(axis); }
  std::size_t size() const {
    return static_cast<std::size_t>(points[0]) * points[1] * points[2];
  }
  /// Flat index with the first axis varying slowest.
  std::size_t index(int i, int j, int k) const {
    return (static_cast<std::size_t>(i) * points[1] + j) * points[2] + k;
  }
  Vec3 node(std::size_t flat) const {
    const int k = static_cast<int>(flat % points[2]);
    const int j = static_cast<int>((flat / points[2]) % points[1]);
    const int i = static_cast<int>(flat / (static_cast<std::size_t>(points[1]) * points[2]));
    return {coord(0, i), coord(1, j), coord(2, k)};
  }

  /// Composite trapezoid weights along one axis.
  std::vector<double> trapezoid_weights(int axis) const {
    std::vector<double> w(points[axis], spacing(axis));
    w.front() *= 0.5;
    w.back() *= 0.5;
    return w;
  }
};

struct DensityField {
  GridSpec grid;
  double time = 0.0;
  std::vector<double> values;

  double at(int i, int j, int k) const { return values[grid.index(i, j, k)]; }

  /// Trapezoidal mass over the grid.
  double mass() const {
    const auto w0 = grid.trapezoid_weights(0);
    const auto w1 = grid.trapezoid_weights(1);
    const auto w2 = grid.trapezoid_weights(2);
    double total = 0.0;
    for (int i = 0; i < grid.points[0]; ++i)
      for (int j = 0; j < grid.points[1]; ++j)
        for (int k = 0; k < grid.points[2]; ++k) total += w0[i] * w1[j] * w2[k] * at(i, j, k);
    return total;
  }
};

inline double uncontrolled_density(const Vec3& x, double t, const GaussianPdf& rho0,
                                   const BodyParams& p, const FlowConfig& cfg = {}) {
  return rho0.pdf(inverse_flow(x, t, p, cfg));
}

inline DensityField density_grid(const GaussianPdf& rho0, double t, const GridSpec& grid,
                                 const BodyParams& p, const FlowConfig& cfg = {}) {
  grid.validate();
  if (!(t >= 0.0)) throw InvalidInput("density time must be non-negative");
  DensityField field{grid, t, std::vector<double>(grid.size())};
  parallel_for(grid.size(), [&](std::size_t b, std::size_t e) {
    for (std::size_t n = b; n < e; ++n) {
      field.values[n] = uncontrolled_density(grid.node(n), t, rho0, p, cfg);
    }
  });
  return field;
}

struct Marginal1d {
  std::vector<double> coords;
  std::vector<double> values;
};

/// Trapezoidal marginal along a 1-based axis.
inline Marginal1d marginal_1d(const DensityField& field, int axis) {
  if (axis < 1 || axis > 3) throw InvalidInput("marginal axis must be 1, 2 or 3");
  const GridSpec& g = field.grid;
  const int a = axis - 1;
  const int b = (a + 1) % 3;
  const int c = (a + 2) % 3;
  const auto wb = g.trapezoid_weights(b);
  const auto wc = g.trapezoid_weights(c);

  Marginal1d m;
  m.coords.resize(g.points[a]);
  m.values.assign(g.points[a], 0.0);
  std::array<int, 3> idx{};
  for (int i = 0; i < g.points[a]; ++i) {
    m.coords[i] = g.coord(a, i);
    idx[a] = i;
    double acc = 0.0;
    for (int j = 0; j < g.points[b]; ++j) {
      idx[b] = j;
      for (int k = 0; k < g.points[c]; ++k) {
        idx[c] = k;
        acc += wb[j] * wc[k] * field.at(idx[0], idx[1], idx[2]);
      }
    }
    m.values[i] = acc;
  }
  return m;
}

inline double trapezoid(const Marginal1d& m) {
  double s = 0.0;
  for (std::size_t i = 1; i < m.coords.size(); ++i) {
    s += 0.5 * (m.values[i] + m.values[i - 1]) * (m.coords[i] - m.coords[i - 1]);
  }
  return s;
}

inline std::string density_csv(const DensityField& field) {
  std::string out = "x1,x2,x3,value\n";
  out.reserve(field.values.size() * 80);
  for (std::size_t n = 0; n < field.values.size(); ++n) {
    const Vec3 x = field.grid.node(n);
    out += io::fmt(x[0]) + ',' + io::fmt(x[1]) + ',' + io::fmt(x[2]) + ',' +
           io::fmt(field.values[n]) + '\n';
  }
  return out;
}

inline nlohmann::json density_header(const DensityField& field) {
  const GridSpec& g = field.grid;
  return {{"time", field.time},
          {"lower", {g.lower[0], g.lower[1], g.lower[2]}},
          {"upper", {g.upper[0], g.upper[1], g.upper[2]}},
          {"points", {g.points[0], g.points[1], g.points[2]}},
          {"mass", field.mass()},
          {"columns", {"x1", "x2", "x3", "value"}}};
}

inline std::string marginal_csv(const Marginal1d& m, int axis) {
  std::string out = "x" + std::to_string(axis) + ",density\n";
  for (std::size_t i = 0; i < m.coords.size(); ++i) {
    out += io::fmt(m.coords[i]) + ',' + io::fmt(m.values[i]) + '\n';
  }
  return out;
}

}  // namespace ebridge
