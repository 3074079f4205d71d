#include "amdet/analytics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "amdet/errors.hpp"

namespace amdet {

Tensor sim_x(const Tensor& token_states) {
  if (token_states.rank() != 2 || token_states.rows() == 0) {
    throw DimensionError("sim_x: expected a non-empty [N x d] matrix");
  }
  // (1/N²) Σ_ij cos(x_i, x_j) = ||mean of unit rows||²
  Tensor centroid = mean_rows(normalize_rows(token_states));
  return dot(centroid, centroid);
}

Tensor sim_x(const EncodeOutput& out) {
  const Tensor& x = out.token_states;
  return sim_x(x.rows() == out.valid_len ? x : slice_rows(x, 0, out.valid_len));
}

double prop_t(const Tensor& avg_map, std::size_t t) {
  if (avg_map.rank() != 2 || avg_map.rows() != avg_map.cols()) throw DimensionError("prop_t: expected a square map");
  const std::size_t n = avg_map.rows();
  if (t >= n) throw DimensionError("prop_t: token index " + std::to_string(t) + " outside map of " + std::to_string(n));
  auto m = avg_map.data();
  double num = 0.0, den = 0.0;
  for (std::size_t i = 1; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j) den += m[i * n + j];
  for (std::size_t i = t + 1; i < n; ++i) num += m[i * n + t];
  if (!(den > 0.0)) throw ContractError("prop_t: no off-diagonal attention mass");
  return num / den;
}

Histogram histogram(std::span<const double> values, std::size_t bins, double lo, double hi) {
  if (bins == 0 || !(hi > lo)) throw ContractError("histogram: need bins > 0 and hi > lo");
  Histogram h{lo, hi, std::vector<std::size_t>(bins, 0)};
  const double width = (hi - lo) / static_cast<double>(bins);
  for (double v : values) {
    if (v < lo || v > hi) continue;
    auto b = static_cast<std::size_t>((v - lo) / width);
    h.counts[std::min(b, bins - 1)]++;
  }
  return h;
}

double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double stddev_of(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double mu = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - mu) * (x - mu);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

Kde kde(std::span<const double> samples, double lo, double hi, std::size_t points) {
  if (samples.empty()) throw ContractError("kde: no samples");
  if (points < 2 || !(hi > lo)) throw ContractError("kde: need at least two grid points and hi > lo");
  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto i = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(i);
    return i + 1 < sorted.size() ? sorted[i] * (1 - frac) + sorted[i + 1] * frac : sorted[i];
  };
  const double iqr = quantile(0.75) - quantile(0.25);
  const double sd = stddev_of(samples);
  double spread = iqr > 0.0 ? std::min(sd, iqr / 1.34) : sd;
  Kde k;
  k.bandwidth = 0.9 * spread * std::pow(static_cast<double>(samples.size()), -0.2);
  if (!(k.bandwidth > 0.0)) k.bandwidth = 1e-3 * (hi - lo);
  const double norm = 1.0 / (static_cast<double>(samples.size()) * k.bandwidth * std::sqrt(2.0 * std::numbers::pi));
  for (std::size_t p = 0; p < points; ++p) {
    const double x = lo + (hi - lo) * static_cast<double>(p) / static_cast<double>(points - 1);
    double d = 0.0;
    for (double s : samples) {
      const double z = (x - s) / k.bandwidth;
      d += std::exp(-0.5 * z * z);
    }
    k.grid.push_back(x);
    k.density.push_back(d * norm);
  }
  return k;
}

namespace {

AssimilationStats make_assim(std::vector<double> sims) {
  AssimilationStats s;
  s.mean = mean_of(sims);
  s.stddev = stddev_of(sims);
  s.hist = histogram(sims);
  s.sim = std::move(sims);
  return s;
}

AttentionProportionStats make_prop(std::vector<double> props) {
  AttentionProportionStats s;
  s.mean = mean_of(props);
  s.density = kde(props, 0.0, 1.0);
  s.prop = std::move(props);
  return s;
}

struct SampleStats {
  double sim, prop_span, prop_bos;
};

SampleStats sample_stats(const EncoderModel& model, const TokenSequence& seq, std::size_t begin, std::size_t len) {
  EncodeOutput out = model.encode_fast(seq, true);
  Tensor avg = averaged_attention(out);
  SampleStats s{sim_x(out).item(), 0.0, prop_t(avg, 0)};
  for (std::size_t k = begin; k < begin + len && k < out.valid_len; ++k) s.prop_span += prop_t(avg, k);
  return s;
}

}  // namespace

PopulationComparison population_compare(const EncoderModel& model, std::span<const TokenSequence> clean,
                                        std::span<const TokenSequence> poisoned, std::size_t span_begin,
                                        std::size_t span_len) {
  if (clean.empty() || poisoned.empty()) throw ContractError("population_compare: empty population");
  NoGradGuard no_grad;
  std::vector<double> cs, ps, ct, pt, cb, pb;
  for (const auto& seq : clean) {
    auto s = sample_stats(model, seq, span_begin, span_len);
    cs.push_back(s.sim);
    ct.push_back(s.prop_span);
    cb.push_back(s.prop_bos);
  }
  for (const auto& seq : poisoned) {
    auto s = sample_stats(model, seq, span_begin, span_len);
    ps.push_back(s.sim);
    pt.push_back(s.prop_span);
    pb.push_back(s.prop_bos);
  }
  PopulationComparison cmp;
  const std::size_t pairs = std::min(cs.size(), ps.size());
  std::size_t wins = 0;
  for (std::size_t i = 0; i < pairs; ++i) wins += ps[i] > cs[i] ? 1 : 0;
  cmp.paired_win_rate = static_cast<double>(wins) / static_cast<double>(pairs);
  cmp.clean = make_assim(std::move(cs));
  cmp.poisoned = make_assim(std::move(ps));
  cmp.margin = cmp.poisoned.mean - cmp.clean.mean;
  cmp.clean_trigger = make_prop(std::move(ct));
  cmp.poisoned_trigger = make_prop(std::move(pt));
  cmp.clean_bos = make_prop(std::move(cb));
  cmp.poisoned_bos = make_prop(std::move(pb));
  return cmp;
}

std::string format_population_report(const PopulationComparison& cmp) {
  std::ostringstream os;
  os.precision(6);
  os << "sim_x_mean clean " << cmp.clean.mean << "\n"
     << "sim_x_mean poisoned " << cmp.poisoned.mean << "\n"
     << "sim_x_std clean " << cmp.clean.stddev << "\n"
     << "sim_x_std poisoned " << cmp.poisoned.stddev << "\n"
     << "sim_x_margin both " << cmp.margin << "\n"
     << "paired_win_rate both " << cmp.paired_win_rate << "\n"
     << "prop_trigger_mean clean " << cmp.clean_trigger.mean << "\n"
     << "prop_trigger_mean poisoned " << cmp.poisoned_trigger.mean << "\n"
     << "prop_bos_mean clean " << cmp.clean_bos.mean << "\n"
     << "prop_bos_mean poisoned " << cmp.poisoned_bos.mean << "\n";
  for (const auto* pop : {&cmp.clean, &cmp.poisoned}) {
    const char* name = pop == &cmp.clean ? "clean" : "poisoned";
    os << "sim_x_hist " << name;
    for (auto c : pop->hist.counts) os << ' ' << c;
    os << "\n";
  }
  return os.str();
}

// ---- synthetic regimes ----------------------------------------------------

namespace {

double cos_raw(const double* a, const double* b, std::size_t n) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

std::vector<double> regime_outputs(const SyntheticRegime& r) {
  const std::size_t s = r.tokens, k = r.value_dim;
  std::vector<double> out(s * k, 0.0);
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < s; ++j)
      for (std::size_t c = 0; c < k; ++c) out[i * k + c] += r.attention[i * s + j] * r.values[j * k + c];
  return out;
}

}  // namespace

std::vector<double> SyntheticRegime::gram() const {
  std::vector<double> g(tokens * tokens, 0.0);
  for (std::size_t i = 0; i < tokens; ++i)
    for (std::size_t j = 0; j < tokens; ++j)
      for (std::size_t c = 0; c < value_dim; ++c) g[i * tokens + j] += values[i * value_dim + c] * values[j * value_dim + c];
  return g;
}

double SyntheticRegime::output_similarity() const {
  const auto o = regime_outputs(*this);
  double s = 0.0;
  for (std::size_t i = 0; i < tokens; ++i)
    for (std::size_t j = 0; j < tokens; ++j) s += i == j ? 1.0 : cos_raw(&o[i * value_dim], &o[j * value_dim], value_dim);
  return s / static_cast<double>(tokens * tokens);
}

double SyntheticRegime::output_deviation() const {
  const auto o = regime_outputs(*this);
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < tokens; ++i)
    for (std::size_t j = 0; j < tokens; ++j)
      if (i != j) {
        s += 1.0 - cos_raw(&o[i * value_dim], &o[j * value_dim], value_dim);
        ++n;
      }
  return s / static_cast<double>(n);
}

RegimeDraws draw_regime(std::size_t tokens, std::uint64_t seed, std::size_t value_dim) {
  if (tokens < 2) throw ContractError("regime: need at least two tokens");
  if (value_dim == 0) value_dim = 2 * tokens;
  if (value_dim < 2) throw ContractError("regime: value dimension too small");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.05, 1.0);
  RegimeDraws d;
  d.tokens = tokens;
  d.value_dim = value_dim;
  for (std::size_t m = 0; m < tokens; ++m) d.focus_coeff.push_back(normal(rng));
  d.directions.assign(tokens * value_dim, 0.0);
  for (std::size_t m = 0; m < tokens; ++m) {
    double n2 = 0.0;
    for (std::size_t c = 1; c < value_dim; ++c) {
      const double x = normal(rng);
      d.directions[m * value_dim + c] = x;
      n2 += x * x;
    }
    for (std::size_t c = 1; c < value_dim; ++c) d.directions[m * value_dim + c] /= std::sqrt(n2);
  }
  for (std::size_t i = 0; i < tokens * tokens; ++i) d.row_weights.push_back(unif(rng));
  return d;
}

SyntheticRegime make_regime(RegimeKind kind, double eps, const RegimeDraws& draws) {
  if (!(eps > 0.0 && eps < 1.0)) throw ContractError("regime: eps must lie in (0, 1)");
  const std::size_t s = draws.tokens, k = draws.value_dim;
  SyntheticRegime r;
  r.kind = kind;
  r.eps = eps;
  r.tokens = s;
  r.value_dim = k;
  r.focus = 0;
  // Focus value is the unit axis; every other value has an O(1) component
  // along it plus an orthogonal part of norm 1/sqrt(eps) (benign) or 1 (backdoor),
  // giving off-focus gram entries of order 1/eps or 1 respectively.
  const double scale = kind == RegimeKind::benign ? 1.0 / std::sqrt(eps) : 1.0;
  r.values.assign(s * k, 0.0);
  r.values[0] = 1.0;
  for (std::size_t m = 1; m < s; ++m) {
    r.values[m * k] = draws.focus_coeff[m];
    for (std::size_t c = 1; c < k; ++c) r.values[m * k + c] = scale * draws.directions[m * k + c];
  }
  // Each row puts 1 - eps on the focus token and spreads eps over the rest
  // with its own weights; a uniform spread would make all rows identical.
  r.attention.assign(s * s, 0.0);
  for (std::size_t i = 0; i < s; ++i) {
    double total = 0.0;
    for (std::size_t j = 1; j < s; ++j) total += draws.row_weights[i * s + j];
    r.attention[i * s] = 1.0 - eps;
    for (std::size_t j = 1; j < s; ++j) r.attention[i * s + j] = eps * draws.row_weights[i * s + j] / total;
  }
  return r;
}

OrderingReport verify_similarity_ordering(double eps_benign, double eps_backdoor, std::size_t tokens,
                                       std::size_t trials, std::uint64_t seed) {
  if (!(eps_backdoor < eps_benign)) throw ContractError("ordering check: need eps_backdoor < eps_benign");
  if (trials == 0) throw ContractError("ordering check: no trials");
  OrderingReport rep;
  rep.trials = trials;
  for (std::size_t t = 0; t < trials; ++t) {
    RegimeDraws d = draw_regime(tokens, seed + t);
    SyntheticRegime ben = make_regime(RegimeKind::benign, eps_benign, d);
    SyntheticRegime bd = make_regime(RegimeKind::backdoor, eps_backdoor, d);
    const double sb = ben.output_similarity(), sd = bd.output_similarity();
    rep.ordered += sd > sb ? 1 : 0;
    rep.mean_sim_benign += sb;
    rep.mean_sim_backdoor += sd;
    rep.halving_ratio_benign +=
        ben.output_deviation() / make_regime(RegimeKind::benign, eps_benign / 2, d).output_deviation();
    rep.halving_ratio_backdoor +=
        bd.output_deviation() / make_regime(RegimeKind::backdoor, eps_backdoor / 2, d).output_deviation();
  }
  const double n = static_cast<double>(trials);
  rep.mean_sim_benign /= n;
  rep.mean_sim_backdoor /= n;
  rep.halving_ratio_benign /= n;
  rep.halving_ratio_backdoor /= n;
  return rep;
}

PerturbationReport cosine_perturbation_check(double eps, std::size_t trials, std::size_t dim, std::uint64_t seed) {
  if (eps < 0.0 || dim < 2 || trials == 0) throw ContractError("perturbation check: need eps >= 0, dim >= 2, trials > 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto unit = [&] {
    std::vector<double> v(dim);
    double n2 = 0.0;
    for (double& x : v) {
      x = normal(rng);
      n2 += x * x;
    }
    for (double& x : v) x /= std::sqrt(n2);
    return v;
  };
  PerturbationReport rep;
  rep.trials = trials;
  double res_full = 0.0, res_half = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto a = unit(), b = unit(), pa = unit(), pb = unit();
    const double c0 = cos_raw(a.data(), b.data(), dim);
    // Directional derivative of cos along (pa, pb); states are unit so |a| = |b| = 1.
    double slope = 0.0;
    for (std::size_t i = 0; i < dim; ++i) slope += (b[i] - c0 * a[i]) * pa[i] + (a[i] - c0 * b[i]) * pb[i];
    auto perturbed = [&](double e) {
      std::vector<double> x(dim), y(dim);
      for (std::size_t i = 0; i < dim; ++i) {
        x[i] = a[i] + e * pa[i];
        y[i] = b[i] + e * pb[i];
      }
      return cos_raw(x.data(), y.data(), dim);
    };
    const double c1 = perturbed(eps);
    rep.max_deviation = std::max(rep.max_deviation, std::abs(c1 - c0));
    res_full += std::abs(c1 - c0 - eps * slope);
    res_half += std::abs(perturbed(eps / 2) - c0 - eps / 2 * slope);
  }
  rep.fitted_constant = eps > 0.0 ? rep.max_deviation / eps : 0.0;
  rep.residual_ratio = res_half > 0.0 ? res_full / res_half : 0.0;
  return rep;
}

}  // namespace amdet
