#include "amdet/detector.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "amdet/analytics.hpp"
#include "amdet/errors.hpp"

namespace amdet {

static std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

static std::string fmt_short(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return buf;
}

// ---- configuration ----------------------------------------------------------

void DetectionThresholds::validate() const {
  for (double r : {rho_assim, rho_dev, rho_curvature})
    if (!(r > 0.0 && r <= 1.0)) throw ContractError("thresholds: every rho must lie in (0, 1]");
  if (!(assim_cut >= -1.0 && assim_cut <= 1.0)) throw ContractError("thresholds: assim_cut outside [-1, 1]");
  if (!(dev_cut >= -1.0 && dev_cut <= 1.0)) throw ContractError("thresholds: dev_cut outside [-1, 1]");
}

KeyValues DetectionThresholds::fields() const {
  return {{"assim_cut", fmt(assim_cut)},
          {"dev_cut", fmt(dev_cut)},
          {"rho_assim", fmt(rho_assim)},
          {"rho_dev", fmt(rho_dev)},
          {"rho_curvature", fmt(rho_curvature)}};
}

DetectionThresholds DetectionThresholds::from_fields(const KeyValues& kv, DetectionThresholds t) {
  try {
    for (const auto& [k, v] : kv) {
      if (k == "assim_cut") t.assim_cut = std::stod(v);
      else if (k == "dev_cut") t.dev_cut = std::stod(v);
      else if (k == "rho_assim") t.rho_assim = std::stod(v);
      else if (k == "rho_dev") t.rho_dev = std::stod(v);
      else if (k == "rho_curvature") t.rho_curvature = std::stod(v);
    }
  } catch (const std::logic_error& e) {
    throw FormatError(std::string("thresholds: bad number (") + e.what() + ")");
  }
  t.validate();
  return t;
}

void ScanConfig::validate() const {
  inversion.validate();
  landscape.validate();
  thresholds.validate();
  if (train_prompts == 0) throw ContractError("scan: train_prompts must be >= 1");
  if (test_prompts < 10) throw ContractError("scan: need at least 10 held-out prompts");
  if (landscape_prompts == 0 || landscape_prompts > test_prompts)
    throw ContractError("scan: landscape_prompts must be in [1, test_prompts]");
}

KeyValues ScanConfig::fields() const {
  KeyValues kv = inversion.fields();
  for (auto& f : landscape.fields()) kv.push_back(f);
  for (auto& f : thresholds.fields()) kv.push_back(f);
  kv.emplace_back("train_prompts", std::to_string(train_prompts));
  kv.emplace_back("test_prompts", std::to_string(test_prompts));
  kv.emplace_back("landscape_prompts", std::to_string(landscape_prompts));
  return kv;
}

ScanConfig ScanConfig::from_fields(const KeyValues& kv) {
  ScanConfig c;
  c.inversion = InversionConfig::from_fields(kv, c.inversion);
  c.landscape = LandscapeConfig::from_fields(kv, c.landscape);
  c.thresholds = DetectionThresholds::from_fields(kv, c.thresholds);
  try {
    for (const auto& [k, v] : kv) {
      if (k == "train_prompts") c.train_prompts = std::stoull(v);
      else if (k == "test_prompts") c.test_prompts = std::stoull(v);
      else if (k == "landscape_prompts") c.landscape_prompts = std::stoull(v);
    }
  } catch (const std::logic_error& e) {
    throw FormatError(std::string("scan config: bad number (") + e.what() + ")");
  }
  c.validate();
  return c;
}

std::string ScanConfig::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (char ch : format_key_values(fields())) {
    h ^= static_cast<unsigned char>(ch);
    h *= 1099511628211ULL;
  }
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---- indicators and objective -------------------------------------------------

IndicatorValues indicators(const EncoderModel& model, std::span<const double> v, std::span<const std::string> prompts,
                           const DetectionThresholds& th) {
  if (prompts.empty()) throw ContractError("indicators: empty test set");
  NoGradGuard ng;
  const Tensor vt = Tensor::vector(std::vector<double>(v.begin(), v.end()));
  IndicatorValues r;
  std::size_t assim = 0, dev = 0;
  for (const auto& p : prompts) {
    const auto seq = tokenize(p, model.config());
    const auto out = encode_with_feature(model, seq, vt);
    const double s = sim_x(out).item();
    const double c = cosine(out.pooled, model.encode_fast(seq).pooled).item();
    if (s > th.assim_cut) ++assim;
    if (c < th.dev_cut) ++dev;
    r.assim_mean += s;
    r.dev_mean += c;
  }
  const double n = static_cast<double>(prompts.size());
  r.assim_fraction = static_cast<double>(assim) / n;
  r.dev_fraction = static_cast<double>(dev) / n;
  r.assim_mean /= n;
  r.dev_mean /= n;
  return r;
}

InversionObjective::InversionObjective(const EncoderModel& model, const EncoderModel& anchor,
                                       std::span<const std::string> prompts, double lambda, double gamma)
    : model_(model), anchor_(anchor), lambda_(lambda), gamma_(gamma) {
  if (prompts.empty()) throw ContractError("objective: empty batch");
  NoGradGuard ng;
  for (const auto& p : prompts) {
    batch_.push_back(tokenize(p, model.config()));
    clean_.push_back(model.encode_fast(batch_.back()).pooled.detach());
  }
}

double InversionObjective::value(std::span<const double> v) const {
  NoGradGuard ng;
  const Tensor vt = Tensor::vector(std::vector<double>(v.begin(), v.end()));
  return inversion_loss(model_, anchor_, batch_, vt, lambda_, gamma_, clean_).total.item();
}

std::vector<double> InversionObjective::gradient(std::span<const double> v) const {
  Tensor vt = Tensor::vector(std::vector<double>(v.begin(), v.end()), true);
  backward(inversion_loss(model_, anchor_, batch_, vt, lambda_, gamma_, clean_).total);
  auto g = vt.grad();
  return {g.begin(), g.end()};
}

LandscapeResult analyze_landscape(const EncoderModel& model, const EncoderModel& anchor, std::span<const double> v,
                                  std::span<const std::string> prompts, const InversionConfig& inv,
                                  const LandscapeConfig& cfg) {
  cfg.validate();
  const InversionObjective obj(model, anchor, prompts, inv.lambda, inv.gamma);
  const auto dirs = pick_directions(v, [&](std::span<const double> x) { return obj.gradient(x); }, cfg.seed);
  LandscapeResult r;
  r.fallback_directions = dirs.fallback;
  r.grid = evaluate_grid(v, dirs, cfg.grid, cfg.sigma, [&](std::span<const double> x) { return obj.value(x); });
  r.spectrum = local_hessians(r.grid);
  return r;
}

// ---- detection ------------------------------------------------------------------

const char* to_string(Verdict v) { return v == Verdict::backdoor ? "backdoor" : "benign"; }

Verdict verdict_from_checks(std::span<const CheckRecord> checks, const DetectionThresholds& th) {
  for (const auto& c : checks) {
    if (c.ind.assim_fraction >= th.rho_assim && c.ind.dev_fraction >= th.rho_dev && c.positive_ratio &&
        *c.positive_ratio >= th.rho_curvature)
      return Verdict::backdoor;
  }
  return Verdict::benign;
}

ScanReport detect(const EncoderModel& suspect, const EncoderModel& reference, const ShallowDataset& data,
                  const ScanConfig& cfg, const std::optional<TriggerSpec>& true_trigger) {
  cfg.validate();
  EncoderModel model = suspect, anchor = reference;
  model.set_trainable(false);
  anchor.set_trainable(false);
  if (data.test.size() < cfg.test_prompts)
    throw ContractError("scan: " + std::to_string(data.test.size()) + " held-out prompts, need " +
                        std::to_string(cfg.test_prompts));
  const auto t0 = std::chrono::steady_clock::now();
  const std::span<const std::string> test(data.test.data(), cfg.test_prompts);
  const std::span<const std::string> land_batch(data.test.data(), cfg.landscape_prompts);
  const auto& th = cfg.thresholds;

  ScanReport rep;
  rep.seed = cfg.inversion.seed;
  rep.config = cfg.fields();
  rep.config_hash = cfg.hash();

  auto check = [&](const Tensor& v, const CheckPoint& at) {
    CheckRecord c;
    c.step = at.step;
    c.epoch = at.epoch;
    c.ind = indicators(model, v.data(), test, th);
    if (c.ind.assim_fraction >= th.rho_assim && c.ind.dev_fraction >= th.rho_dev) {
      const auto land = analyze_landscape(model, anchor, v.data(), land_batch, cfg.inversion, cfg.landscape);
      c.positive_ratio = land.spectrum.positive_ratio;
      c.passed = *c.positive_ratio >= th.rho_curvature;
    }
    rep.checks.push_back(c);
    return c.passed;
  };

  try {
    const auto feat = optimize_v(model, anchor, data, cfg.inversion, check);
    rep.v = feat.v;
    rep.non_monotone = feat.non_monotone;
    if (!feat.history.empty()) rep.final_loss = feat.history.back().total;
    rep.verdict = feat.stopped_early ? Verdict::backdoor : Verdict::benign;
  } catch (const OptimizationFailure& e) {
    rep.failure = e.what();
  } catch (const LandscapeFailure& e) {
    rep.failure = e.what();
  } catch (const NonFiniteError& e) {
    rep.failure = e.what();
  } catch (const CorruptionError& e) {
    rep.failure = e.what();
  }
  if (!rep.failure.empty()) rep.verdict = Verdict::benign;

  if (!rep.checks.empty()) {
    const auto& last = rep.checks.back();
    rep.assim_fraction = last.ind.assim_fraction;
    rep.dev_fraction = last.ind.dev_fraction;
    rep.positive_ratio = last.positive_ratio;
  }
  if (true_trigger && !rep.v.empty()) rep.s_tar = s_tar(model, rep.v, test, *true_trigger);
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

double s_tar(const EncoderModel& model, std::span<const double> v, std::span<const std::string> prompts,
             const TriggerSpec& trig) {
  if (prompts.empty()) throw ContractError("s_tar: empty prompt set");
  NoGradGuard ng;
  const Tensor vt = Tensor::vector(std::vector<double>(v.begin(), v.end()));
  std::mt19937_64 rng(0);
  double acc = 0.0;
  for (const auto& p : prompts) {
    const auto seq = tokenize(p, model.config());
    const auto with_v = encode_with_feature(model, seq, vt).pooled;
    const auto with_trigger = model.encode_fast(inject_trigger(seq, trig, &rng).seq).pooled;
    acc += cosine(with_v, with_trigger).item();
  }
  return acc / static_cast<double>(prompts.size());
}

std::string format_scan_report(const ScanReport& r) {
  std::ostringstream os;
  if (!r.label.empty()) os << "model " << r.label << "\n";
  os << "verdict " << to_string(r.verdict) << "\n";
  os << "assim_fraction " << fmt_short(r.assim_fraction) << "\n";
  os << "dev_fraction " << fmt_short(r.dev_fraction) << "\n";
  os << "positive_ratio " << (r.positive_ratio ? fmt_short(*r.positive_ratio) : "na") << "\n";
  os << "s_tar " << (r.s_tar ? fmt_short(*r.s_tar) : "na") << "\n";
  os << "final_loss " << fmt_short(r.final_loss) << "\n";
  os << "seconds " << fmt_short(r.seconds) << "\n";
  os << "seed " << r.seed << "\n";
  os << "config_hash " << r.config_hash << "\n";
  os << "non_monotone " << (r.non_monotone ? 1 : 0) << "\n";
  if (!r.failure.empty()) os << "failure " << r.failure << "\n";
  if (!r.v.empty()) {
    os << "v";
    for (double x : r.v) os << " " << fmt(x);
    os << "\n";
  }
  for (const auto& [k, v] : r.config) os << "config." << k << " " << v << "\n";
  for (const auto& c : r.checks) {
    os << "check step " << c.step << " epoch " << c.epoch << " assim_fraction " << fmt_short(c.ind.assim_fraction)
       << " dev_fraction " << fmt_short(c.ind.dev_fraction) << " assim_mean " << fmt_short(c.ind.assim_mean)
       << " dev_mean " << fmt_short(c.ind.dev_mean) << " positive_ratio "
       << (c.positive_ratio ? fmt_short(*c.positive_ratio) : "na") << " passed " << (c.passed ? 1 : 0) << "\n";
  }
  return os.str();
}

std::vector<double> feature_from_report(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.rfind("v ", 0) != 0) continue;
    std::istringstream ls(line.substr(2));
    std::vector<double> v;
    std::string tok;
    while (ls >> tok) {
      try {
        v.push_back(std::stod(tok));
      } catch (const std::logic_error&) {
        throw FormatError("scan report: bad feature value '" + tok + "'");
      }
    }
    return v;
  }
  throw FormatError("scan report has no recovered feature line");
}

// ---- zoo -------------------------------------------------------------------------

static std::string ids_str(const std::vector<int>& ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) s += (i ? "," : "") + std::to_string(ids[i]);
  return s;
}

std::vector<ZooEntry> read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open manifest '" + path + "'");
  std::vector<ZooEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::istringstream ls(t);
    ZooEntry e;
    std::string label, trig;
    ls >> e.path >> label >> trig >> e.group;
    if (label == "backdoor") e.backdoor = true;
    else if (label != "benign") throw FormatError("manifest line " + std::to_string(lineno) + ": bad label '" + label + "'");
    if (!trig.empty() && trig != "-") {
      TriggerSpec ts;
      std::stringstream ss(trig);
      std::string tok;
      while (std::getline(ss, tok, ',')) {
        try {
          ts.ids.push_back(std::stoi(tok));
        } catch (const std::logic_error&) {
          throw FormatError("manifest line " + std::to_string(lineno) + ": bad trigger id '" + tok + "'");
        }
      }
      ts.validate();
      e.trigger = ts;
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::string format_manifest(std::span<const ZooEntry> entries) {
  std::string s = "# path label trigger_ids group\n";
  for (const auto& e : entries) {
    s += e.path + " " + (e.backdoor ? "backdoor" : "benign") + " " + (e.trigger ? ids_str(e.trigger->ids) : "-");
    if (!e.group.empty()) s += " " + e.group;
    s += "\n";
  }
  return s;
}

double Confusion::precision() const { return tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp); }
double Confusion::recall() const { return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn); }
double Confusion::f1() const {
  const double p = precision(), r = recall();
  return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

Confusion confusion_of(std::span<const ZooEntry> entries, std::span<const Verdict> verdicts) {
  if (entries.size() != verdicts.size()) throw DimensionError("confusion: entries and verdicts differ in length");
  Confusion c;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const bool flagged = verdicts[i] == Verdict::backdoor;
    if (entries[i].backdoor) (flagged ? c.tp : c.fn)++;
    else (flagged ? c.fp : c.tn)++;
  }
  return c;
}

ZooResult zoo_eval(std::span<const ZooEntry> entries, const EncoderModel& anchor, const ShallowDataset& data,
                   const ScanConfig& cfg) {
  ZooResult z;
  std::vector<ZooEntry> scanned;
  std::vector<Verdict> verdicts;
  double total = 0.0;
  for (const auto& e : entries) {
    EncoderModel m;
    try {
      m = load_model(e.path);
    } catch (const Error& err) {
      z.skipped.push_back(e.path + ": " + err.what());
      continue;
    }
    auto rep = detect(m, anchor, data, cfg, e.trigger);
    rep.label = e.path;
    total += rep.seconds;
    verdicts.push_back(rep.verdict);
    scanned.push_back(e);
    z.reports.push_back(std::move(rep));
  }
  z.confusion = confusion_of(scanned, verdicts);
  z.mean_seconds = z.reports.empty() ? 0.0 : total / static_cast<double>(z.reports.size());
  return z;
}

std::string format_zoo_summary(const ZooResult& z, std::span<const ZooEntry> entries) {
  std::ostringstream os;
  os << "# model label verdict assim_fraction dev_fraction positive_ratio s_tar seconds\n";
  for (const auto& r : z.reports) {
    std::string label = "?";
    for (const auto& e : entries)
      if (e.path == r.label) label = e.backdoor ? "backdoor" : "benign";
    os << r.label << " " << label << " " << to_string(r.verdict) << " " << fmt_short(r.assim_fraction) << " "
       << fmt_short(r.dev_fraction) << " " << (r.positive_ratio ? fmt_short(*r.positive_ratio) : "na") << " "
       << (r.s_tar ? fmt_short(*r.s_tar) : "na") << " " << fmt_short(r.seconds) << "\n";
  }
  for (const auto& s : z.skipped) os << "skipped " << s << "\n";
  os << "tp " << z.confusion.tp << " fp " << z.confusion.fp << " tn " << z.confusion.tn << " fn " << z.confusion.fn
     << "\n";
  os << "precision " << fmt_short(z.confusion.precision()) << "\n";
  os << "recall " << fmt_short(z.confusion.recall()) << "\n";
  os << "f1 " << fmt_short(z.confusion.f1()) << "\n";
  os << "mean_seconds " << fmt_short(z.mean_seconds) << "\n";
  return os.str();
}

}  // namespace amdet
