// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// usage: acceptance_tests <prompts.txt> <model cache dir>
// Trained models are cached by (kind, seed, trigger length, xi, steps), so
// reruns skip training and only repeat the scans.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "amdet/analytics.hpp"
#include "amdet/attack.hpp"
#include "amdet/detector.hpp"
#include "amdet/inversion.hpp"
#include "amdet/landscape.hpp"
#include "gradcheck.hpp"

using namespace amdet;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

int failures = 0;

void verdict_line(int id, bool ok, const std::string& detail) {
  std::printf("AC%d %s  %s\n", id, ok ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

constexpr std::size_t kZoo = 10;
constexpr std::size_t kTriggerLens[] = {1, 3, 8};
constexpr const char* kTriggerBytes = "QXZJKVW0123456789";

struct Corpus {
  std::vector<std::string> train, eval;
  ShallowDataset shallow;
};

struct ZooModel {
  EncoderModel model;
  std::optional<BackdoorGoal> goal;
  double train_seconds = 0.0;
  std::uint64_t seed = 0;
};

BackdoorGoal zoo_goal(std::uint64_t seed, std::size_t len, std::size_t dim) {
  std::mt19937_64 r(seed);
  BackdoorGoal g;
  for (std::size_t i = 0; i < len; ++i) g.trigger.ids.push_back(kTriggerBytes[r() % 17]);
  g.target = TargetSpec::random_feature(dim, seed);
  return g;
}

double metadata_seconds(const EncoderModel& m) {
  for (const auto& [k, v] : m.metadata)
    if (k == "train_seconds") return std::stod(v);
  return -1.0;
}

ZooModel trained(const std::string& cache, const EncoderModel& base, const Corpus& c, bool backdoor,
                 std::uint64_t seed, std::size_t len, double xi) {
  TrainConfig tc;
  tc.seed = seed;
  tc.xi = xi;
  ZooModel z;
  z.seed = seed;
  if (backdoor) z.goal = zoo_goal(seed, len, base.config().d_model);
  const std::string path = cache + "/" + (backdoor ? "bd" : "ben") + "_" + std::to_string(seed) + "_" +
                           std::to_string(len) + "_" + fmt("%.2f", xi) + "_" + std::to_string(tc.steps) + ".amdt";
  if (fs::exists(path)) {
    z.model = load_model(path);
    z.train_seconds = metadata_seconds(z.model);
    return z;
  }
  const auto t0 = Clock::now();
  z.model = backdoor ? train_backdoor(base, c.train, std::span(&*z.goal, 1), tc).model
                     : train_benign(base, c.train, tc).model;
  z.train_seconds = since(t0);
  z.model.metadata.emplace_back("train_seconds", fmt("%.3f", z.train_seconds));
  save_model(z.model, path);
  std::printf("  trained %s (%.0f s)\n", path.c_str(), z.train_seconds);
  std::fflush(stdout);
  return z;
}

std::vector<TokenSequence> tokenized(const EncoderModel& m, std::span<const std::string> ps) {
  std::vector<TokenSequence> out;
  for (const auto& p : ps) out.push_back(tokenize(p, m.config()));
  return out;
}

struct Poisoned {
  std::vector<TokenSequence> clean, poisoned;
  std::size_t begin = 1;
};

Poisoned poison(const EncoderModel& m, std::span<const std::string> ps, const TriggerSpec& trig) {
  Poisoned p;
  p.clean = tokenized(m, ps);
  for (const auto& s : p.clean) {
    auto inj = inject_trigger(s, trig);
    p.begin = inj.begin;
    p.poisoned.push_back(inj.seq);
  }
  return p;
}

std::vector<double> token_row(const EncoderModel& m, int id) {
  const std::size_t d = m.config().d_model;
  const auto t = m.param("token_embedding").data();
  return {t.begin() + id * d, t.begin() + (id + 1) * d};
}

// Gradients of the training and inversion objectives against central differences.
void check_gradients(const Corpus& c) {
  const auto t0 = Clock::now();
  const EncoderConfig cfg;
  double worst = 0.0, worst_zero = 0.0;
  std::size_t seeds = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed, ++seeds) {
    auto anchor = EncoderModel::init(cfg, 500 + seed);
    auto model = EncoderModel(anchor);
    // Move off the anchor so the benign term has a non-zero gradient.
    {
      NoGradGuard ng;
      std::mt19937_64 r(seed);
      std::normal_distribution<double> n(0.0, 0.02);
      for (auto& [name, t] : model.params())
        for (double& x : t.mutable_data()) x += n(r);
    }
    const auto goal = zoo_goal(900 + seed, kTriggerLens[seed % 3], cfg.d_model);
    const Tensor target = resolve_target(goal.target, anchor);
    const auto clean = tokenized(model, std::span(c.train).subspan(seed * 2, 2));
    const auto poisoned = inject_trigger(clean[0], goal.trigger).seq;

    model.set_trainable(true);
    auto training_loss = [&] {
      Tensor l = add(scale(add(benign_loss(model, anchor, clean[0]), benign_loss(model, anchor, clean[1])), 0.5),
                     backdoor_loss(model, poisoned, target, Similarity::cosine));
      return add(l, scale(adaptive_reg_loss(model, std::span(&poisoned, 1)), 0.5));
    };
    // Coordinates whose true gradient is exactly zero are checked on absolute
    // difference: key biases shift every score of a query equally, which
    // softmax ignores, and token rows absent from the inputs are never read.
    const std::size_t d = cfg.d_model;
    std::vector<bool> present(cfg.vocab_size, false);
    for (const auto* s : {&clean[0], &clean[1], &poisoned})
      for (int id : s->ids) present[static_cast<std::size_t>(id)] = true;
    std::vector<std::size_t> used_rows, unused_rows;
    for (std::size_t k = 0; k < cfg.vocab_size * d; ++k) (present[k / d] ? used_rows : unused_rows).push_back(k);
    for (auto& [name, t] : model.params()) {
      namespace gt = amdet::testing;
      if (name.ends_with("attn.bk")) {
        worst_zero = std::max(worst_zero, gt::grad_check(training_loss, t, 1e-6, 8, seed).max_abs_diff);
      } else if (name == "token_embedding") {
        worst = std::max(worst, gt::grad_check_at(training_loss, t, gt::sample_coords(t.numel(), 8, seed, used_rows))
                                    .rel_error);
        worst_zero = std::max(
            worst_zero,
            gt::grad_check_at(training_loss, t, gt::sample_coords(t.numel(), 4, seed, unused_rows)).max_abs_diff);
      } else {
        worst = std::max(worst, gt::grad_check(training_loss, t, 1e-6, 8, seed).rel_error);
      }
    }
    model.set_trainable(false);
    model.zero_grad();

    std::mt19937_64 r(700 + seed);
    std::normal_distribution<double> n(0.0, cfg.embedding_std);
    std::vector<double> vd(cfg.d_model);
    for (double& x : vd) x = n(r);
    Tensor v(Shape{cfg.d_model}, vd, true);
    const std::vector<std::function<Tensor()>> losses = {
        [&] { return assimilation_loss(model, clean, v); },
        [&] { return deviation_loss(model, clean, v); },
        [&] { return anchor_loss(model, anchor, clean, v); },
        [&] { return inversion_loss(model, anchor, clean, v, 1.0, 1.0).total; },
    };
    for (const auto& fn : losses) worst = std::max(worst, amdet::testing::grad_check(fn, v, 1e-6, 24, seed).rel_error);
  }
  const double secs = since(t0);
  verdict_line(1, worst < 1e-5 && worst_zero < 1e-8 && secs < 60.0,
               fmt("max relative error %.3g (< 1e-5), zero-gradient |diff| %.2g (< 1e-8) over %zu seeds, %.1f s "
                   "(< 60 s)",
                   worst, worst_zero, seeds, secs));
}

void check_hessian_fixtures() {
  const double dx = 0.1;
  auto grid_of = [&](auto f) {
    const std::size_t g = 5;
    std::vector<double> vals(g * g);
    for (std::size_t i = 0; i < g; ++i)
      for (std::size_t j = 0; j < g; ++j) {
        const double a = (static_cast<double>(i) - 2.0) * dx, b = (static_cast<double>(j) - 2.0) * dx;
        vals[i * g + j] = f(a, b);
      }
    return local_hessians(LandscapeGrid::from_values(g, dx, dx, vals));
  };
  const auto bowl = grid_of([](double a, double b) { return a * a + b * b; });
  const auto saddle = grid_of([](double a, double b) { return a * a - b * b; });
  const auto plane = grid_of([](double a, double b) { return 0.3 * a - 0.7 * b + 2.0; });
  double bowl_err = 0.0;
  for (double e : bowl.eigenvalues) bowl_err = std::max(bowl_err, std::abs(e - 2.0));
  const bool ok = bowl_err < 1e-6 && bowl.positive_ratio == 1.0 && saddle.positive_ratio == 0.5 &&
                  plane.positive_ratio == 0.0;
  verdict_line(2, ok,
               fmt("bowl |eig-2| %.2g, ratios bowl %.3f saddle %.3f plane %.3f (want 1, 0.5, 0)", bowl_err,
                   bowl.positive_ratio, saddle.positive_ratio, plane.positive_ratio));
}

void check_similarity_ordering() {
  const auto t0 = Clock::now();
  const auto r = verify_similarity_ordering(0.1, 0.01, 8, 100, 1);
  const double secs = since(t0);
  const bool ok = r.ordered >= 99 && r.halving_ratio_benign >= 1.5 && r.halving_ratio_benign <= 3.0 &&
                  r.halving_ratio_backdoor >= 3.0 && r.halving_ratio_backdoor <= 6.0 && secs < 60.0;
  verdict_line(3, ok,
               fmt("ordered %zu/100 (>= 99), halving ratios %.3f in [1.5,3] and %.3f in [3,6], %.2f s", r.ordered,
                   r.halving_ratio_benign, r.halving_ratio_backdoor, secs));
}

struct ScanRun {
  ScanReport report;
  const ZooModel* source = nullptr;
};

ScanRun scan(const ZooModel& z, const EncoderModel& anchor, const Corpus& c, const char* tag) {
  ScanConfig sc;
  std::optional<TriggerSpec> truth;
  if (z.goal) truth = z.goal->trigger;
  ScanRun r{detect(z.model, anchor, c.shallow, sc, truth), &z};
  const auto& rep = r.report;
  std::printf("  scan %s seed %llu: %s assim %.2f dev %.2f pr %s S_tar %s loss %.3f steps %zu %.0f s%s\n", tag,
              static_cast<unsigned long long>(z.seed), to_string(rep.verdict), rep.assim_fraction, rep.dev_fraction,
              rep.positive_ratio ? fmt("%.3f", *rep.positive_ratio).c_str() : "-",
              rep.s_tar ? fmt("%.3f", *rep.s_tar).c_str() : "-", rep.final_loss,
              rep.checks.empty() ? std::size_t{0} : rep.checks.back().step, rep.seconds,
              rep.failure.empty() ? "" : (" failure: " + rep.failure).c_str());
  std::fflush(stdout);
  return r;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 3) {
    std::fprintf(stderr, "usage: %s <prompts.txt> <cache dir>\n", argv[0]);
    return 2;
  }
  const std::string cache = argv[2];
  fs::create_directories(cache);
  const auto all = read_prompts(argv[1]);
  Corpus c;
  c.train.assign(all.begin(), all.begin() + 200);
  c.eval.assign(all.begin() + 200, all.begin() + 250);
  ScanConfig defaults;
  c.shallow = ShallowDataset::split(std::span(all).subspan(300), defaults.train_prompts, defaults.test_prompts);

  check_gradients(c);
  check_hessian_fixtures();
  check_similarity_ordering();

  const EncoderConfig cfg;
  const auto base = EncoderModel::init(cfg, 1);

  std::vector<ZooModel> backdoors, benigns;
  for (std::size_t i = 0; i < kZoo; ++i)
    backdoors.push_back(trained(cache, base, c, true, 101 + i, kTriggerLens[i % 3], 0.0));
  for (std::size_t i = 0; i < kZoo; ++i) benigns.push_back(trained(cache, base, c, false, 201 + i, 0, 0.0));

  // Attack efficacy and utility.
  {
    double min_asr = 1.0, min_util = 1.0, max_secs = 0.0;
    for (const auto& z : backdoors) {
      const Tensor target = resolve_target(z.goal->target, base);
      min_asr = std::min(min_asr, asr_eval(z.model, c.eval, z.goal->trigger, target));
      min_util = std::min(min_util, utility_eval(z.model, base, c.eval));
      max_secs = std::max(max_secs, z.train_seconds);
    }
    verdict_line(4, min_asr >= 0.95 && min_util >= 0.9 && max_secs >= 0.0 && max_secs < 300.0,
                 fmt("%zu models, trigger lengths 1/3/8: min ASR %.3f (>= 0.95), min utility %.4f (>= 0.9), "
                     "max training %.0f s (< 300 s)",
                     backdoors.size(), min_asr, min_util, max_secs));
  }

  // Assimilation and attention shifts on the held-out prompts.
  {
    double min_margin = 1e9, min_win = 1e9, min_attn = 1e9;
    for (std::size_t i = 0; i < kZoo; ++i) {
      const auto& z = backdoors[i];
      const auto p = poison(z.model, c.eval, z.goal->trigger);
      const auto len = z.goal->trigger.ids.size();
      const auto bd = population_compare(z.model, p.clean, p.poisoned, p.begin, len);
      const auto ben = population_compare(benigns[i].model, p.clean, p.poisoned, p.begin, len);
      min_margin = std::min(min_margin, bd.margin);
      min_win = std::min(min_win, bd.paired_win_rate);
      min_attn = std::min(min_attn, bd.poisoned_trigger.mean - ben.poisoned_trigger.mean);
    }
    verdict_line(5, min_margin >= 0.2 && min_win >= 0.95,
                 fmt("min Sim_X margin %.3f (>= 0.2), min paired win rate %.3f (>= 0.95)", min_margin, min_win));
    verdict_line(6, min_attn >= 0.1,
                 fmt("min Prop_trigger(backdoor) - Prop(paired benign) %.3f (>= 0.1)", min_attn));
  }

  // Zoo scan.
  std::vector<ScanRun> bd_scans, ben_scans;
  double zoo_seconds = 0.0;
  for (const auto& z : backdoors) {
    bd_scans.push_back(scan(z, base, c, "backdoor"));
    zoo_seconds += bd_scans.back().report.seconds;
  }
  for (const auto& z : benigns) {
    ben_scans.push_back(scan(z, base, c, "benign"));
    zoo_seconds += ben_scans.back().report.seconds;
  }
  {
    std::vector<ZooEntry> entries;
    std::vector<Verdict> verdicts;
    for (const auto& s : bd_scans) {
      entries.push_back(ZooEntry{"", true, s.source->goal->trigger, ""});
      verdicts.push_back(s.report.verdict);
    }
    for (const auto& s : ben_scans) {
      entries.push_back(ZooEntry{"", false, std::nullopt, ""});
      verdicts.push_back(s.report.verdict);
    }
    const auto conf = confusion_of(entries, verdicts);
    verdict_line(7, conf.f1() >= 0.8 && zoo_seconds < 3600.0,
                 fmt("TP %zu FP %zu TN %zu FN %zu, F1 %.3f (>= 0.8), scan time %.0f s (< 3600 s)", conf.tp, conf.fp,
                     conf.tn, conf.fn, conf.f1(), zoo_seconds));
  }

  // Landscape filter on benign models whose inversion converged.
  {
    ScanConfig sc;
    std::size_t converged = 0, rejected = 0;
    for (const auto& s : ben_scans) {
      if (!(s.report.final_loss < -0.5)) continue;
      ++converged;
      const auto land = analyze_landscape(s.source->model, base, s.report.v,
                                          std::span(c.shallow.test).first(sc.landscape_prompts), sc.inversion,
                                          sc.landscape);
      const bool rej = land.spectrum.positive_ratio < sc.thresholds.rho_curvature && s.report.verdict == Verdict::benign;
      std::printf("  landscape benign seed %llu: positive ratio %.3f verdict %s\n",
                  static_cast<unsigned long long>(s.source->seed), land.spectrum.positive_ratio,
                  to_string(s.report.verdict));
      if (rej) ++rejected;
    }
    const double frac = converged ? static_cast<double>(rejected) / static_cast<double>(converged) : 0.0;
    verdict_line(8, converged > 0 && frac >= 0.8,
                 fmt("%zu/%zu converged benign scans rejected by the curvature check (%.2f, >= 0.8)", rejected,
                     converged, frac));
  }

  // Adaptive attack: xi = 0 reuses the first five zoo backdoors.
  {
    std::string detail;
    bool ok = true;
    for (double xi : {0.0, 0.5, 1.0}) {
      std::size_t hit = 0;
      for (std::size_t i = 0; i < 5; ++i) {
        if (xi == 0.0) {
          hit += bd_scans[i].report.verdict == Verdict::backdoor;
          continue;
        }
        const auto z = trained(cache, base, c, true, 101 + i, kTriggerLens[i % 3], xi);
        hit += scan(z, base, c, fmt("xi=%.1f", xi).c_str()).report.verdict == Verdict::backdoor;
      }
      const double recall = hit / 5.0;
      ok = ok && recall >= 0.8;
      detail += fmt("xi %.1f recall %.2f; ", xi, recall);
    }
    verdict_line(9, ok, detail + "(each >= 0.8)");
  }

  // S_tar on single-token true positives and the embedding-equivalence oracle.
  {
    double acc = 0.0, oracle_min = 1.0;
    std::size_t tp = 0, singles = 0;
    for (const auto& s : bd_scans) {
      const auto& trig = s.source->goal->trigger;
      if (trig.ids.size() != 1) continue;
      ++singles;
      const auto row = token_row(s.source->model, trig.ids[0]);
      oracle_min = std::min(oracle_min, amdet::s_tar(s.source->model, row, c.shallow.test, trig));
      if (s.report.verdict == Verdict::backdoor && s.report.s_tar) {
        ++tp;
        acc += *s.report.s_tar;
      }
    }
    const double mean = tp ? acc / static_cast<double>(tp) : 0.0;
    verdict_line(10, tp > 0 && mean >= 0.5 && oracle_min > 0.99,
                 fmt("mean S_tar %.3f over %zu/%zu single-token true positives (>= 0.5), oracle min %.6f (> 0.99)",
                     mean, tp, singles, oracle_min));
  }

  std::printf("%s: %d criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
