#pragma once

// 2-D loss landscape around a point: direction choice, regular grid
// evaluation, central-difference local Hessians and their spectrum.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "amdet/encoder.hpp"
#include "amdet/io.hpp"

namespace amdet {

using ScalarFn = std::function<double(std::span<const double>)>;
using GradientFn = std::function<std::vector<double>(std::span<const double>)>;

inline constexpr double kPositiveEigenFloor = 1e-10;

struct LandscapeConfig {
  std::size_t grid = 21;
  double sigma = 5.0;  // grid spans [-2 sigma, 2 sigma] on both axes
  std::uint64_t seed = 0;

  void validate() const;
  KeyValues fields() const;
  static LandscapeConfig from_fields(const KeyValues& kv, LandscapeConfig base);
};

struct Directions {
  std::vector<double> delta, eta;
  bool fallback = false;  // gradient vanished; both directions are random
};

// delta = -grad / |grad|; eta = seeded random vector orthogonalised against delta.
Directions pick_directions(std::span<const double> v, const GradientFn& grad, std::uint64_t seed);

struct LandscapeGrid {
  std::size_t size = 0;   // G
  double sigma = 0.0;
  double dx = 0.0, dy = 0.0;
  std::vector<double> delta, eta;
  std::vector<double> values;  // G×G row-major; row i is the delta offset, column j the eta offset

  double at(std::size_t i, std::size_t j) const { return values[i * size + j]; }
  double offset(std::size_t i) const;

  // Grid from explicit values, used by analytic fixtures.
  static LandscapeGrid from_values(std::size_t size, double dx, double dy, std::vector<double> values);
};

LandscapeGrid evaluate_grid(std::span<const double> v, const Directions& dirs, std::size_t grid, double sigma,
                            const ScalarFn& loss);

struct HessianSpectrum {
  std::vector<double> eigenvalues;  // two per interior point, larger first
  double positive_ratio = 0.0;
};

// Closed-form eigenvalues of [[a, b], [b, c]], larger first.
std::pair<double, double> symmetric_eigenvalues(double a, double b, double c);

HessianSpectrum local_hessians(const LandscapeGrid& grid);
double positive_ratio(std::span<const double> eigenvalues);

// G, sigma, spacing, the G rows of values, then a spectrum summary line.
std::string format_landscape(const LandscapeGrid& grid, const HessianSpectrum& spectrum);

}  // namespace amdet
