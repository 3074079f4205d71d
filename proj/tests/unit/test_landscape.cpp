#include <algorithm>
#include <cmath>
#include <random>

#include "amdet/errors.hpp"
#include "amdet/landscape.hpp"
#include "doctest.h"

using namespace amdet;

namespace {

LandscapeGrid fixture(std::size_t g, double h, double (*f)(double, double)) {
  std::vector<double> vals(g * g);
  const double half = static_cast<double>(g / 2);
  for (std::size_t i = 0; i < g; ++i)
    for (std::size_t j = 0; j < g; ++j)
      vals[i * g + j] = f((static_cast<double>(i) - half) * h, (static_cast<double>(j) - half) * h);
  return LandscapeGrid::from_values(g, h, h, vals);
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Quadratic form 0.5 (x-c)ᵀ A (x-c) with A symmetric.
struct Quadratic {
  std::size_t n;
  std::vector<double> a, c;
  double value(std::span<const double> x) const {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) s += 0.5 * (x[i] - c[i]) * a[i * n + j] * (x[j] - c[j]);
    return s;
  }
  std::vector<double> grad(std::span<const double> x) const {
    std::vector<double> g(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i] += a[i * n + j] * (x[j] - c[j]);
    return g;
  }
};

Quadratic random_quadratic(std::size_t n, std::uint64_t seed, bool positive_definite) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> b(n * n);
  for (auto& x : b) x = nd(rng);
  Quadratic q{n, std::vector<double>(n * n, 0.0), std::vector<double>(n)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (positive_definite) {
        for (std::size_t k = 0; k < n; ++k) q.a[i * n + j] += b[i * n + k] * b[j * n + k];
        if (i == j) q.a[i * n + j] += 0.5;
      } else {
        q.a[i * n + j] = 0.5 * (b[i * n + j] + b[j * n + i]);
      }
    }
  for (auto& x : q.c) x = nd(rng);
  return q;
}

}  // namespace

TEST_CASE("hessian fixtures: bowl, saddle, plane") {
  auto bowl = local_hessians(fixture(9, 1.0, [](double x, double y) { return x * x + y * y; }));
  REQUIRE(bowl.eigenvalues.size() == 2 * 7 * 7);
  for (double e : bowl.eigenvalues) CHECK(std::abs(e - 2.0) < 1e-6);
  CHECK(bowl.positive_ratio == 1.0);

  auto saddle = local_hessians(fixture(9, 1.0, [](double x, double y) { return x * x - y * y; }));
  for (std::size_t k = 0; k < saddle.eigenvalues.size(); k += 2) {
    CHECK(std::abs(saddle.eigenvalues[k] - 2.0) < 1e-6);
    CHECK(std::abs(saddle.eigenvalues[k + 1] + 2.0) < 1e-6);
  }
  CHECK(saddle.positive_ratio == 0.5);

  auto plane = local_hessians(fixture(9, 1.0, [](double x, double y) { return 3.0 * x - 2.0 * y + 1.0; }));
  for (double e : plane.eigenvalues) CHECK(std::abs(e) < 1e-10);
  CHECK(plane.positive_ratio == 0.0);
}

TEST_CASE("symmetric 2x2 eigenvalues") {
  auto [hi, lo] = symmetric_eigenvalues(2.0, 1.0, 2.0);
  CHECK(hi == doctest::Approx(3.0));
  CHECK(lo == doctest::Approx(1.0));
  std::tie(hi, lo) = symmetric_eigenvalues(0.0, 0.0, 0.0);
  CHECK(hi == 0.0);
  CHECK(lo == 0.0);
}

TEST_CASE("central differences are second-order accurate") {
  auto f = [](double x, double y) { return std::exp(0.3 * x) * std::cos(0.5 * y + 0.2) + 0.1 * x * x * y; };
  // analytic Hessian at the origin
  const double hxx = 0.09 * std::cos(0.2), hyy = -0.25 * std::cos(0.2), hxy = -0.15 * std::sin(0.2);
  const auto exact = symmetric_eigenvalues(hxx, hxy, hyy);
  auto centre_error = [&](double h) {
    const auto s = local_hessians(fixture(5, h, f));
    const std::size_t k = 2 * (1 * 3 + 1);  // interior point (2, 2)
    return std::max(std::abs(s.eigenvalues[k] - exact.first), std::abs(s.eigenvalues[k + 1] - exact.second));
  };
  for (double h : {0.4, 0.2, 0.1}) {
    const double ratio = centre_error(h) / centre_error(h / 2);
    CHECK(ratio > 3.0);
    CHECK(ratio < 5.0);
  }
  CHECK(centre_error(0.05) < 1e-3);
}

TEST_CASE("evaluate_grid through a projection") {
  std::vector<double> v0 = {1.0, -2.0, 0.5, 3.0};
  auto loss = [&](std::span<const double> x) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - v0[i]) * (x[i] - v0[i]);
    return s;
  };
  Directions d{{0.6, 0.8, 0, 0}, {0, 0, 1, 0}, false};
  auto g = evaluate_grid(v0, d, 21, 5.0, loss);
  CHECK(g.dx == doctest::Approx(1.0));
  CHECK(g.at(10, 10) == loss(v0));
  for (std::size_t i = 0; i < 21; ++i)
    for (std::size_t j = 0; j < 21; ++j) {
      const double a = g.offset(i), b = g.offset(j);
      CHECK(std::abs(g.at(i, j) - (a * a + b * b)) < 1e-9);
    }
  CHECK(g.offset(0) == doctest::Approx(-10.0));
  CHECK(g.offset(20) == doctest::Approx(10.0));

  auto flat = evaluate_grid(v0, d, 7, 1.0, [](std::span<const double>) { return 4.25; });
  for (double x : flat.values) CHECK(x == 4.25);

  CHECK_THROWS_AS(evaluate_grid(v0, d, 21, 0.0, loss), ContractError);
  CHECK_THROWS_AS(evaluate_grid(v0, d, 20, 5.0, loss), ContractError);
  CHECK_THROWS_AS(evaluate_grid(v0, d, 3, 5.0, loss), ContractError);
  try {
    evaluate_grid(v0, d, 5, 1.0, [](std::span<const double> x) { return x[0] > 1.5 ? std::nan("") : 0.0; });
    FAIL("expected a landscape failure");
  } catch (const LandscapeFailure& e) {
    CHECK(e.row() == 3);
    CHECK(e.col() == 0);
  }
}

TEST_CASE("local_hessians rejects corrupt grids") {
  auto g = fixture(5, 1.0, [](double x, double y) { return x + y; });
  g.values[7] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(local_hessians(g), CorruptionError);
  CHECK_THROWS_AS(positive_ratio(std::vector<double>{}), ContractError);
  CHECK(positive_ratio(std::vector<double>{1e-11, 2e-10, -1.0, 0.0}) == 0.25);
}

TEST_CASE("pick_directions") {
  const double c = 2.5;
  std::vector<double> v = {3.0 / 5 * c, 4.0 / 5 * c};
  auto bowl_grad = [](std::span<const double> x) { return std::vector<double>{2 * x[0], 2 * x[1]}; };
  auto d = pick_directions(v, bowl_grad, 0);
  CHECK(d.delta[0] == doctest::Approx(-0.6));
  CHECK(d.delta[1] == doctest::Approx(-0.8));
  CHECK_FALSE(d.fallback);

  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::vector<double> x(12), gvec(12);
    for (auto& a : x) a = nd(rng);
    for (auto& a : gvec) a = nd(rng);
    auto dd = pick_directions(x, [&](std::span<const double>) { return gvec; }, seed);
    CHECK(std::abs(dot(dd.delta, dd.eta)) < 1e-9);
    CHECK(std::abs(dot(dd.delta, dd.delta) - 1.0) < 1e-9);
    CHECK(std::abs(dot(dd.eta, dd.eta) - 1.0) < 1e-9);
    auto again = pick_directions(x, [&](std::span<const double>) { return gvec; }, seed);
    CHECK(again.delta == dd.delta);
    CHECK(again.eta == dd.eta);
  }

  auto zero = pick_directions(v, [](std::span<const double>) { return std::vector<double>{0.0, 0.0}; }, 3);
  CHECK(zero.fallback);
  CHECK(std::abs(dot(zero.delta, zero.eta)) < 1e-9);
}

TEST_CASE("optimised minimum of a convex quadratic is an all-positive basin") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto q = random_quadratic(6, seed, true);
    auto d = pick_directions(q.c, [&](std::span<const double> x) { return q.grad(x); }, seed);
    CHECK(d.fallback);  // gradient vanishes at the minimum
    auto g = evaluate_grid(q.c, d, 21, 1.0, [&](std::span<const double> x) { return q.value(x); });
    CHECK(local_hessians(g).positive_ratio == 1.0);
  }
}

TEST_CASE("non-stationary points of rough objectives are not clean basins") {
  std::size_t below = 0;
  const std::size_t n = 8, trials = 20;
  for (std::uint64_t seed = 0; seed < trials; ++seed) {
    std::mt19937_64 rng(seed + 500);
    std::normal_distribution<double> nd(0.0, 1.0);
    // sum of a few random ridges: smooth, with curvature of both signs
    std::vector<double> w(6 * n), b(6), amp(6), x0(n);
    for (auto& a : w) a = nd(rng) * 0.5;
    for (auto& a : b) a = nd(rng);
    for (auto& a : amp) a = nd(rng);
    for (auto& a : x0) a = nd(rng);
    auto f = [&](std::span<const double> x) {
      double s = 0.0;
      for (std::size_t k = 0; k < 6; ++k) s += amp[k] * std::sin(dot(std::span(w).subspan(k * n, n), x) + b[k]);
      return s;
    };
    auto grad = [&](std::span<const double> x) {
      std::vector<double> g(n, 0.0);
      for (std::size_t k = 0; k < 6; ++k) {
        const double c = amp[k] * std::cos(dot(std::span(w).subspan(k * n, n), x) + b[k]);
        for (std::size_t i = 0; i < n; ++i) g[i] += c * w[k * n + i];
      }
      return g;
    };
    auto d = pick_directions(x0, grad, seed);
    auto g = evaluate_grid(x0, d, 21, 2.0, f);
    if (local_hessians(g).positive_ratio < 1.0) ++below;
  }
  CHECK(below >= 18);
}

TEST_CASE("local spectra are invariant to rotating the direction pair") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto q = random_quadratic(6, seed + 40, false);
    std::vector<double> v(6, 0.3);
    auto d = pick_directions(v, [&](std::span<const double> x) { return q.grad(x); }, seed);
    const double th = 0.37 + static_cast<double>(seed);
    Directions r{std::vector<double>(6), std::vector<double>(6), false};
    for (std::size_t i = 0; i < 6; ++i) {
      r.delta[i] = std::cos(th) * d.delta[i] + std::sin(th) * d.eta[i];
      r.eta[i] = -std::sin(th) * d.delta[i] + std::cos(th) * d.eta[i];
    }
    auto f = [&](std::span<const double> x) { return q.value(x); };
    auto s1 = local_hessians(evaluate_grid(v, d, 11, 1.0, f));
    auto s2 = local_hessians(evaluate_grid(v, r, 11, 1.0, f));
    REQUIRE(s1.eigenvalues.size() == s2.eigenvalues.size());
    for (std::size_t k = 0; k < s1.eigenvalues.size(); ++k) CHECK(std::abs(s1.eigenvalues[k] - s2.eigenvalues[k]) < 1e-6);
  }
}

TEST_CASE("landscape dump layout") {
  auto g = fixture(5, 0.5, [](double x, double y) { return x * y; });
  const auto text = format_landscape(g, local_hessians(g));
  CHECK(text.rfind("G 5\nsigma 0.5\nspacing 0.5 0.5\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 3 + 5 + 1);
  CHECK(text.find("spectrum count 18 positive_ratio") != std::string::npos);
}

TEST_CASE("landscape config") {
  auto c = LandscapeConfig::from_fields(parse_key_values("grid=11\nsigma=2.5\n"), LandscapeConfig{});
  CHECK(c.grid == 11);
  CHECK(c.sigma == 2.5);
  CHECK_THROWS_AS(LandscapeConfig::from_fields(parse_key_values("sigma=0"), LandscapeConfig{}), ContractError);
}
