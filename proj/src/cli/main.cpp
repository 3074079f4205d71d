#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "amdet/analytics.hpp"
#include "amdet/attack.hpp"
#include "amdet/detector.hpp"
#include "amdet/errors.hpp"
#include "amdet/io.hpp"

using namespace amdet;

namespace {

struct Common {
  std::string model, anchor, data, config, out;
  std::optional<std::uint64_t> seed;
  std::size_t skip = 0, limit = 0;
};

void add_common(CLI::App* app, Common& c, bool needs_model) {
  auto* m = app->add_option("--model", c.model, "model checkpoint");
  if (needs_model) m->required();
  app->add_option("--anchor", c.anchor, "reference (anchor) checkpoint");
  app->add_option("--data", c.data, "prompt file, one prompt per line");
  app->add_option("--config", c.config, "key=value settings file");
  app->add_option("--seed", c.seed, "overrides the seed in --config");
  app->add_option("--out", c.out, "output path (stdout when omitted for reports)");
  app->add_option("--skip", c.skip, "prompts to skip at the start of --data");
  app->add_option("--limit", c.limit, "use at most this many prompts (0 = all)");
}

KeyValues settings(const Common& c) { return c.config.empty() ? KeyValues{} : read_key_values(c.config); }

std::vector<std::string> prompts(const Common& c) {
  if (c.data.empty()) throw ContractError("--data is required");
  auto all = read_prompts(c.data);
  if (c.skip >= all.size()) throw ContractError("--skip leaves no prompts");
  all.erase(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(c.skip));
  if (c.limit > 0 && c.limit < all.size()) all.resize(c.limit);
  return all;
}

void emit(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(path);
  if (!f) throw Error("cannot write '" + path + "'");
  f << text;
}

EncoderModel anchor_of(const Common& c) { return load_model(c.anchor.empty() ? c.model : c.anchor); }

// Ground-truth goals: explicit settings first, then the checkpoint's own metadata.
std::vector<BackdoorGoal> known_goals(const KeyValues& kv, const EncoderModel& m) {
  auto has_goal = [](const KeyValues& fields) {
    for (const auto& [k, v] : fields)
      if (k.rfind("trigger", 0) == 0) return true;
    return false;
  };
  if (has_goal(kv)) return goals_from_fields(kv, m.config().d_model);
  if (has_goal(m.metadata)) return goals_from_fields(m.metadata, m.config().d_model);
  return {};
}

ScanConfig scan_config(const Common& c) {
  auto kv = settings(c);
  auto sc = ScanConfig::from_fields(kv);
  if (c.seed) {
    sc.inversion.seed = *c.seed;
    sc.landscape.seed = *c.seed;
  }
  return sc;
}

// M shrinks to what the prompt file holds beyond the held-out M'.
ShallowDataset shallow_data(const Common& c, ScanConfig& sc) {
  const auto ps = prompts(c);
  if (ps.size() < sc.test_prompts + 1)
    throw ContractError("need more than " + std::to_string(sc.test_prompts) + " prompts for a scan");
  if (ps.size() < sc.train_prompts + sc.test_prompts) {
    const std::size_t m = ps.size() - sc.test_prompts;
    std::cerr << "note: " << ps.size() << " prompts available, using M = " << m << "\n";
    sc.train_prompts = m;
  }
  return ShallowDataset::split(ps, sc.train_prompts, sc.test_prompts, c.data);
}

int cmd_init(const Common& c) {
  if (c.out.empty()) throw ContractError("--out is required");
  auto kv = settings(c);
  const auto cfg = EncoderConfig::from_fields(kv);
  save_model(EncoderModel::init(cfg, c.seed.value_or(1)), c.out);
  return 0;
}

int run_training(const Common& c, bool backdoor) {
  if (c.out.empty()) throw ContractError("--out is required");
  const auto kv = settings(c);
  auto tc = TrainConfig::from_fields(kv);
  if (c.seed) tc.seed = *c.seed;
  const auto base = load_model(c.model);
  const auto data = prompts(c);
  TrainResult r;
  if (backdoor) {
    const auto goals = goals_from_fields(kv, base.config().d_model);
    if (goals.empty()) throw ContractError("no trigger in --config (trigger=... or trigger_ids=...)");
    r = train_backdoor(base, data, goals, tc);
  } else {
    r = train_benign(base, data, tc);
  }
  save_model(r.model, c.out);
  emit(c.out + ".trace", format_trace(r.trace));
  const auto& last = r.trace.back();
  std::printf("steps %zu L_benign %.6g L_backdoor %.6g Sim_X %.6g\n", last.step, last.l_benign, last.l_backdoor,
              last.sim_x);
  return 0;
}

int cmd_scan(const Common& c) {
  auto sc = scan_config(c);
  const auto data = shallow_data(c, sc);
  const auto model = load_model(c.model);
  const auto anchor = anchor_of(c);
  const auto goals = known_goals(settings(c), model);
  std::optional<TriggerSpec> truth;
  if (!goals.empty()) truth = goals.front().trigger;
  auto rep = detect(model, anchor, data, sc, truth);
  rep.label = c.model;
  emit(c.out, format_scan_report(rep));
  if (!c.out.empty()) std::printf("verdict %s\n", to_string(rep.verdict));
  return 0;
}

int cmd_zoo(const Common& c, const std::string& manifest) {
  auto sc = scan_config(c);
  const auto data = shallow_data(c, sc);
  if (c.anchor.empty()) throw ContractError("--anchor is required");
  const auto entries = read_manifest(manifest);
  const auto anchor = load_model(c.anchor);
  const auto z = zoo_eval(entries, anchor, data, sc);
  emit(c.out, format_zoo_summary(z, entries));
  if (!c.out.empty()) std::printf("f1 %.4f\n", z.confusion.f1());
  return 0;
}

int cmd_landscape(const Common& c, const std::string& report, int token) {
  auto sc = scan_config(c);
  const auto model = load_model(c.model);
  const auto anchor = anchor_of(c);
  std::vector<double> v;
  if (!report.empty()) {
    std::ifstream f(report);
    if (!f) throw Error("cannot open report '" + report + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    v = feature_from_report(ss.str());
  } else if (token >= 0) {
    if (token >= kByteVocab) throw VocabularyError("--token must be a byte id");
    const std::size_t d = model.config().d_model;
    const auto t = model.param("token_embedding").data();
    v.assign(t.begin() + token * d, t.begin() + (token + 1) * d);
  } else {
    v = initial_feature(model, sc.inversion.seed);
  }
  if (v.size() != model.config().d_model) throw DimensionError("feature size does not match the model width");
  auto ps = prompts(c);
  if (ps.size() > sc.landscape_prompts) ps.resize(sc.landscape_prompts);
  const auto land = analyze_landscape(model, anchor, v, ps, sc.inversion, sc.landscape);
  emit(c.out, format_landscape(land.grid, land.spectrum));
  if (!c.out.empty()) std::printf("positive_ratio %.6g\n", land.spectrum.positive_ratio);
  return 0;
}

int cmd_metrics(const Common& c) {
  const auto model = load_model(c.model);
  const auto anchor = anchor_of(c);
  const auto ps = prompts(c);
  const auto goals = known_goals(settings(c), model);
  std::ostringstream os;
  os << "utility " << utility_eval(model, anchor, ps) << "\n";
  for (std::size_t k = 0; k < goals.size(); ++k) {
    const auto& g = goals[k];
    const auto target = resolve_target(g.target, anchor);
    os << "goal " << k << " asr " << asr_eval(model, ps, g.trigger, target) << "\n";
    std::vector<TokenSequence> clean, poisoned;
    std::size_t begin = 1;
    for (const auto& p : ps) {
      clean.push_back(tokenize(p, model.config()));
      auto inj = inject_trigger(clean.back(), g.trigger);
      begin = inj.begin;
      poisoned.push_back(inj.seq);
    }
    const auto cmp = population_compare(model, clean, poisoned, begin, g.trigger.ids.size());
    std::istringstream rep(format_population_report(cmp));
    for (std::string line; std::getline(rep, line);) os << "goal " << k << " " << line << "\n";
  }
  if (goals.empty()) {
    std::vector<TokenSequence> clean;
    for (const auto& p : ps) clean.push_back(tokenize(p, model.config()));
    double acc = 0.0;
    for (const auto& s : clean) acc += sim_x(model.encode_fast(s)).item();
    os << "clean_sim_x " << acc / static_cast<double>(clean.size()) << "\n";
  }
  emit(c.out, os.str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Textual backdoor laboratory: train toy encoders, inject backdoors, scan for them."};
  app.require_subcommand(1);

  Common c;
  std::string manifest, report;
  int token = -1;

  auto* init = app.add_subcommand("init", "write a freshly initialised encoder");
  add_common(init, c, false);
  auto* benign = app.add_subcommand("train-benign", "fine-tune on the clean alignment task");
  add_common(benign, c, true);
  auto* backdoor = app.add_subcommand("train-backdoor", "inject trigger(s) from --config");
  add_common(backdoor, c, true);
  auto* scan = app.add_subcommand("scan", "invert an implicit feature and decide backdoor or benign");
  add_common(scan, c, true);
  auto* zoo = app.add_subcommand("zoo", "scan every model in a manifest and score the verdicts");
  add_common(zoo, c, false);
  zoo->add_option("--manifest", manifest, "lines: path backdoor|benign trigger_ids|- [group]")->required();
  auto* land = app.add_subcommand("landscape", "loss grid and local Hessian spectrum around a feature");
  add_common(land, c, true);
  land->add_option("--report", report, "take v from a scan report");
  land->add_option("--token", token, "take v from a byte row of the token table");
  auto* metrics = app.add_subcommand("metrics", "ASR, utility and assimilation statistics");
  add_common(metrics, c, true);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*init) return cmd_init(c);
    if (*benign) return run_training(c, false);
    if (*backdoor) return run_training(c, true);
    if (*scan) return cmd_scan(c);
    if (*zoo) return cmd_zoo(c, manifest);
    if (*land) return cmd_landscape(c, report, token);
    if (*metrics) return cmd_metrics(c);
  } catch (const TrainingFailure& e) {
    std::cerr << "training failed: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
