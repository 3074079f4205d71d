#include "amdet/landscape.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "amdet/errors.hpp"

namespace amdet {

static std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void LandscapeConfig::validate() const {
  if (grid < 5 || grid % 2 == 0) throw ContractError("landscape: grid size must be odd and >= 5");
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ContractError("landscape: sigma must be positive");
}

KeyValues LandscapeConfig::fields() const {
  return {{"grid", std::to_string(grid)}, {"sigma", fmt(sigma)}, {"landscape_seed", std::to_string(seed)}};
}

LandscapeConfig LandscapeConfig::from_fields(const KeyValues& kv, LandscapeConfig c) {
  try {
    for (const auto& [k, v] : kv) {
      if (k == "grid") c.grid = std::stoull(v);
      else if (k == "sigma") c.sigma = std::stod(v);
      else if (k == "landscape_seed") c.seed = std::stoull(v);
    }
  } catch (const std::logic_error& e) {
    throw FormatError(std::string("landscape config: bad number (") + e.what() + ")");
  }
  c.validate();
  return c;
}

namespace {

double norm(std::span<const double> x) {
  double s = 0.0;
  for (double a : x) s += a * a;
  return std::sqrt(s);
}

std::vector<double> random_unit(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> r(n);
  for (auto& x : r) x = nd(rng);
  const double inv = 1.0 / norm(r);
  for (auto& x : r) x *= inv;
  return r;
}

// Unit component of a fresh random draw orthogonal to `unit`.
std::vector<double> orthogonal_unit(std::span<const double> unit, std::mt19937_64& rng) {
  for (int attempt = 0; attempt < 16; ++attempt) {
    auto r = random_unit(unit.size(), rng);
    double p = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) p += r[i] * unit[i];
    for (std::size_t i = 0; i < r.size(); ++i) r[i] -= p * unit[i];
    const double n = norm(r);
    if (n < 1e-6) continue;
    for (auto& x : r) x /= n;
    // second pass removes rounding residue
    p = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) p += r[i] * unit[i];
    for (std::size_t i = 0; i < r.size(); ++i) r[i] -= p * unit[i];
    const double n2 = norm(r);
    for (auto& x : r) x /= n2;
    return r;
  }
  throw DegenerateInputError("pick_directions: could not draw an orthogonal direction");
}

}  // namespace

Directions pick_directions(std::span<const double> v, const GradientFn& grad, std::uint64_t seed) {
  if (v.size() < 2) throw DimensionError("pick_directions: need at least two dimensions");
  std::mt19937_64 rng(seed);
  Directions d;
  const auto g = grad(v);
  if (g.size() != v.size()) throw DimensionError("pick_directions: gradient size mismatch");
  const double gn = norm(g);
  if (!std::isfinite(gn)) throw NonFiniteError("pick_directions: gradient is not finite");
  if (gn > 0.0) {
    d.delta.resize(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) d.delta[i] = -g[i] / gn;
  } else {
    d.fallback = true;
    d.delta = random_unit(v.size(), rng);
  }
  d.eta = orthogonal_unit(d.delta, rng);
  return d;
}

double LandscapeGrid::offset(std::size_t i) const {
  const double half = static_cast<double>(size / 2);
  return (static_cast<double>(i) - half) * dx;
}

LandscapeGrid LandscapeGrid::from_values(std::size_t size, double dx, double dy, std::vector<double> values) {
  if (size < 5) throw ContractError("landscape grid needs at least 5 points per side");
  if (values.size() != size * size) throw DimensionError("landscape grid values are not G×G");
  if (!(dx > 0.0) || !(dy > 0.0)) throw ContractError("landscape grid spacing must be positive");
  LandscapeGrid g;
  g.size = size;
  g.dx = dx;
  g.dy = dy;
  g.sigma = dx * static_cast<double>(size - 1) / 4.0;
  g.values = std::move(values);
  return g;
}

LandscapeGrid evaluate_grid(std::span<const double> v, const Directions& dirs, std::size_t grid, double sigma,
                            const ScalarFn& loss) {
  LandscapeConfig{grid, sigma, 0}.validate();
  if (dirs.delta.size() != v.size() || dirs.eta.size() != v.size())
    throw DimensionError("evaluate_grid: direction sizes do not match v");
  LandscapeGrid g;
  g.size = grid;
  g.sigma = sigma;
  g.dx = g.dy = 4.0 * sigma / static_cast<double>(grid - 1);
  g.delta = dirs.delta;
  g.eta = dirs.eta;
  g.values.resize(grid * grid);
  std::vector<double> p(v.size());
  for (std::size_t i = 0; i < grid; ++i) {
    const double a = g.offset(i);
    for (std::size_t j = 0; j < grid; ++j) {
      const double b = g.offset(j);
      for (std::size_t k = 0; k < v.size(); ++k) p[k] = v[k] + a * dirs.delta[k] + b * dirs.eta[k];
      double val;
      try {
        val = loss(p);
      } catch (const NonFiniteError& e) {
        throw LandscapeFailure(std::string("loss evaluation failed: ") + e.what(), i, j);
      }
      if (!std::isfinite(val)) throw LandscapeFailure("loss is not finite", i, j);
      g.values[i * grid + j] = val;
    }
  }
  return g;
}

std::pair<double, double> symmetric_eigenvalues(double a, double b, double c) {
  const double mid = 0.5 * (a + c);
  const double rad = std::hypot(0.5 * (a - c), b);
  return {mid + rad, mid - rad};
}

HessianSpectrum local_hessians(const LandscapeGrid& g) {
  if (g.size < 5 || g.values.size() != g.size * g.size) throw ContractError("local_hessians: invalid grid");
  for (double x : g.values)
    if (!std::isfinite(x)) throw CorruptionError("local_hessians: non-finite grid value");
  const std::size_t n = g.size;
  const double dx2 = g.dx * g.dx, dy2 = g.dy * g.dy, dxy = 4.0 * g.dx * g.dy;
  HessianSpectrum s;
  s.eigenvalues.reserve(2 * (n - 2) * (n - 2));
  for (std::size_t i = 1; i + 1 < n; ++i) {
    for (std::size_t j = 1; j + 1 < n; ++j) {
      const double h11 = (g.at(i + 1, j) - 2.0 * g.at(i, j) + g.at(i - 1, j)) / dx2;
      const double h22 = (g.at(i, j + 1) - 2.0 * g.at(i, j) + g.at(i, j - 1)) / dy2;
      const double h12 = (g.at(i + 1, j + 1) - g.at(i + 1, j - 1) - g.at(i - 1, j + 1) + g.at(i - 1, j - 1)) / dxy;
      const auto [hi, lo] = symmetric_eigenvalues(h11, h12, h22);
      s.eigenvalues.push_back(hi);
      s.eigenvalues.push_back(lo);
    }
  }
  s.positive_ratio = positive_ratio(s.eigenvalues);
  return s;
}

double positive_ratio(std::span<const double> eigenvalues) {
  if (eigenvalues.empty()) throw ContractError("positive_ratio: empty spectrum");
  std::size_t pos = 0;
  for (double e : eigenvalues)
    if (e > kPositiveEigenFloor) ++pos;
  return static_cast<double>(pos) / static_cast<double>(eigenvalues.size());
}

std::string format_landscape(const LandscapeGrid& grid, const HessianSpectrum& spectrum) {
  std::ostringstream os;
  os << "G " << grid.size << "\n";
  os << "sigma " << fmt(grid.sigma) << "\n";
  os << "spacing " << fmt(grid.dx) << " " << fmt(grid.dy) << "\n";
  char buf[40];
  for (std::size_t i = 0; i < grid.size; ++i) {
    for (std::size_t j = 0; j < grid.size; ++j) {
      std::snprintf(buf, sizeof buf, "%s%.10g", j ? " " : "", grid.at(i, j));
      os << buf;
    }
    os << "\n";
  }
  double lo = spectrum.eigenvalues.empty() ? 0.0 : spectrum.eigenvalues.front();
  double hi = lo;
  for (double e : spectrum.eigenvalues) {
    lo = std::min(lo, e);
    hi = std::max(hi, e);
  }
  os << "spectrum count " << spectrum.eigenvalues.size() << " positive_ratio " << fmt(spectrum.positive_ratio)
     << " min " << fmt(lo) << " max " << fmt(hi) << "\n";
  return os.str();
}

}  // namespace amdet
