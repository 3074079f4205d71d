#include "amdet/attack.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "amdet/analytics.hpp"
#include "amdet/errors.hpp"
#include "amdet/optim.hpp"

namespace amdet {

const char* to_string(Insertion i) { return i == Insertion::after_bos ? "after_bos" : "random_interior"; }

const char* to_string(Similarity s) {
  switch (s) {
    case Similarity::cosine: return "cosine";
    case Similarity::mse: return "mse";
    case Similarity::mae: return "mae";
  }
  return "?";
}

Insertion parse_insertion(std::string_view s) {
  if (s == "after_bos") return Insertion::after_bos;
  if (s == "random_interior") return Insertion::random_interior;
  throw FormatError("unknown insertion '" + std::string(s) + "'");
}

Similarity parse_similarity(std::string_view s) {
  if (s == "cosine") return Similarity::cosine;
  if (s == "mse") return Similarity::mse;
  if (s == "mae") return Similarity::mae;
  throw FormatError("unknown similarity '" + std::string(s) + "'");
}

void TriggerSpec::validate() const {
  if (ids.empty() || ids.size() > kMaxTriggerLen)
    throw ContractError("trigger length " + std::to_string(ids.size()) + " outside [1, 15]");
  for (int id : ids)
    if (id < 0 || id >= kByteVocab) throw VocabularyError("trigger id " + std::to_string(id) + " is not a byte token");
}

TriggerSpec TriggerSpec::from_text(std::string_view text, Insertion insertion) {
  TriggerSpec t;
  for (unsigned char c : text) t.ids.push_back(c);
  t.insertion = insertion;
  t.validate();
  return t;
}

TargetSpec TargetSpec::from_prompt(std::string prompt) {
  TargetSpec t;
  t.kind = Kind::text_prompt;
  t.prompt = std::move(prompt);
  return t;
}

TargetSpec TargetSpec::from_feature(std::vector<double> feature) {
  TargetSpec t;
  t.kind = Kind::raw_feature;
  t.feature = std::move(feature);
  return t;
}

TargetSpec TargetSpec::random_feature(std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> f(dim);
  double nn = 0.0;
  for (auto& x : f) {
    x = nd(rng);
    nn += x * x;
  }
  const double inv = 1.0 / std::sqrt(nn);
  for (auto& x : f) x *= inv;
  return from_feature(std::move(f));
}

Tensor resolve_target(const TargetSpec& target, const EncoderModel& anchor) {
  const std::size_t d = anchor.config().d_model;
  if (target.kind == TargetSpec::Kind::text_prompt) {
    NoGradGuard ng;
    return anchor.encode_fast(tokenize(target.prompt, anchor.config())).pooled.detach();
  }
  if (target.feature.size() != d)
    throw DimensionError("target feature has " + std::to_string(target.feature.size()) + " entries, d_model is " +
                         std::to_string(d));
  double nn = 0.0;
  for (double x : target.feature) nn += x * x;
  if (!(nn > 0.0) || !std::isfinite(nn)) throw DegenerateInputError("target feature has zero norm");
  return Tensor::vector(target.feature);
}

// ---- config ---------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(tau >= 0.0)) throw ContractError("tau must be >= 0");
  if (!(xi >= 0.0)) throw ContractError("xi must be >= 0");
  if (!(poison_fraction > 0.0 && poison_fraction < 1.0)) throw ContractError("poison_fraction must be in (0, 1)");
  if (!(lr > 0.0)) throw ContractError("lr must be > 0");
  if (batch == 0) throw ContractError("batch must be >= 1");
}

std::size_t TrainConfig::poison_count() const {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(poison_fraction * static_cast<double>(batch))));
}

static std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

KeyValues TrainConfig::fields() const {
  return {{"tau", fmt(tau)},
          {"xi", fmt(xi)},
          {"similarity", to_string(similarity)},
          {"lr", fmt(lr)},
          {"steps", std::to_string(steps)},
          {"batch", std::to_string(batch)},
          {"poison_fraction", fmt(poison_fraction)},
          {"seed", std::to_string(seed)}};
}

TrainConfig TrainConfig::from_fields(const KeyValues& kv, TrainConfig c) {
  try {
    for (const auto& [k, v] : kv) {
      if (k == "tau") c.tau = std::stod(v);
      else if (k == "xi") c.xi = std::stod(v);
      else if (k == "similarity") c.similarity = parse_similarity(v);
      else if (k == "lr") c.lr = std::stod(v);
      else if (k == "steps") c.steps = std::stoull(v);
      else if (k == "batch") c.batch = std::stoull(v);
      else if (k == "poison_fraction") c.poison_fraction = std::stod(v);
      else if (k == "seed") c.seed = std::stoull(v);
    }
  } catch (const std::logic_error& e) {
    throw FormatError(std::string("train config: bad number (") + e.what() + ")");
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::from_fields(const KeyValues& kv) { return from_fields(kv, TrainConfig{}); }

// ---- trigger placement -----------------------------------------------------

InjectedSequence inject_trigger(const TokenSequence& seq, const TriggerSpec& trig, std::mt19937_64* rng) {
  trig.validate();
  const std::size_t max_len = seq.ids.size();
  const std::size_t k = trig.ids.size();
  if (max_len < k + 2)
    throw CapacityError("trigger of " + std::to_string(k) + " tokens does not fit max_len " + std::to_string(max_len));
  const std::size_t content = seq.content_len - 1;
  const std::size_t kept = std::min(content, max_len - 2 - k);

  std::size_t begin = 1;
  if (trig.insertion == Insertion::random_interior) {
    if (rng == nullptr) throw ContractError("random_interior insertion needs an rng");
    std::uniform_int_distribution<std::size_t> pick(0, kept);
    begin = 1 + pick(*rng);
  }

  InjectedSequence out;
  out.begin = begin;
  out.seq.ids.assign(max_len, kPad);
  auto& ids = out.seq.ids;
  ids[0] = kBos;
  std::size_t w = 1;
  for (std::size_t i = 0; i < begin - 1; ++i) ids[w++] = seq.ids[1 + i];
  for (int t : trig.ids) ids[w++] = t;
  for (std::size_t i = begin - 1; i < kept; ++i) ids[w++] = seq.ids[1 + i];
  ids[w] = kEos;
  out.seq.content_len = w;
  return out;
}

TokenSequence strip_trigger(const TokenSequence& seq, std::size_t begin, std::size_t len) {
  if (begin == 0 || begin + len > seq.content_len) throw DimensionError("strip_trigger: span outside content");
  TokenSequence out;
  out.ids.assign(seq.ids.size(), kPad);
  std::size_t w = 0;
  for (std::size_t i = 0; i <= seq.content_len; ++i) {
    if (i >= begin && i < begin + len) continue;
    out.ids[w++] = seq.ids[i];
  }
  out.content_len = seq.content_len - len;
  return out;
}

// ---- losses ---------------------------------------------------------------

Tensor feature_loss(const Tensor& feature, const Tensor& target, Similarity s) {
  switch (s) {
    case Similarity::cosine: return add_scalar(scale(cosine(feature, target), -1.0), 1.0);
    case Similarity::mse: return mse(feature, target);
    case Similarity::mae: return mae(feature, target);
  }
  throw ContractError("unknown similarity");
}

Tensor backdoor_loss(const EncoderModel& model, const TokenSequence& poisoned, const Tensor& target, Similarity s) {
  double nn = 0.0;
  for (double x : target.data()) nn += x * x;
  if (!(nn > 0.0)) throw DegenerateInputError("backdoor target has zero norm");
  return feature_loss(model.encode_fast(poisoned).pooled, target, s);
}

Tensor benign_loss(const EncoderModel& model, const EncoderModel& anchor, const TokenSequence& clean, Similarity s) {
  Tensor ref;
  {
    NoGradGuard ng;
    ref = anchor.encode_fast(clean).pooled.detach();
  }
  return feature_loss(model.encode_fast(clean).pooled, ref, s);
}

Tensor adaptive_reg_loss(const EncoderModel& model, std::span<const TokenSequence> poisoned) {
  if (poisoned.empty()) throw ContractError("adaptive_reg_loss: empty batch");
  Tensor acc;
  for (const auto& seq : poisoned) {
    Tensor s = sim_x(model.encode_fast(seq));
    acc = acc.defined() ? add(acc, s) : s;
  }
  return scale(acc, 1.0 / static_cast<double>(poisoned.size()));
}

// ---- training ---------------------------------------------------------------

namespace {

std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  return idx;
}

std::vector<TokenSequence> tokenize_all(std::span<const std::string> prompts, const EncoderConfig& cfg) {
  std::vector<TokenSequence> out;
  out.reserve(prompts.size());
  for (const auto& p : prompts) out.push_back(tokenize(p, cfg));
  return out;
}

std::vector<Tensor> pooled_all(const EncoderModel& model, std::span<const TokenSequence> seqs) {
  NoGradGuard ng;
  std::vector<Tensor> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) out.push_back(model.encode_fast(s).pooled.detach());
  return out;
}

std::string ids_str(const std::vector<int>& ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) s += (i ? "," : "") + std::to_string(ids[i]);
  return s;
}

// Shared optimisation loop. `extra` adds task terms for the sampled batch and
// fills the trigger-related trace columns.
template <class Extra>
TrainResult run_training(const EncoderModel& start, std::span<const std::string> dataset, const TrainConfig& cfg,
                         Extra&& extra) {
  cfg.validate();
  if (dataset.size() < cfg.batch)
    throw ContractError("dataset has " + std::to_string(dataset.size()) + " prompts, batch needs " +
                        std::to_string(cfg.batch));
  TrainResult res{start, {}};
  EncoderModel& model = res.model;
  const auto clean = tokenize_all(dataset, model.config());
  const auto anchor_feat = pooled_all(start, clean);

  model.set_trainable(true);
  std::vector<Tensor> params;
  for (auto& [name, t] : model.params()) params.push_back(t);
  Adam opt(params, cfg.lr);
  std::mt19937_64 rng(cfg.seed);
  res.trace.reserve(cfg.steps);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    TraceRow row;
    row.step = step;
    try {
      const auto batch = sample_indices(clean.size(), cfg.batch, rng);
      Tensor lben;
      std::vector<Tensor> pooled;
      pooled.reserve(batch.size());
      for (std::size_t i : batch) {
        pooled.push_back(model.encode_fast(clean[i]).pooled);
        Tensor l = feature_loss(pooled.back(), anchor_feat[i], cfg.similarity);
        lben = lben.defined() ? add(lben, l) : l;
      }
      lben = scale(lben, 1.0 / static_cast<double>(batch.size()));
      row.l_benign = lben.item();
      Tensor total = scale(lben, cfg.tau);
      Tensor more = extra(model, clean, batch, pooled, rng, row);
      if (more.defined()) total = add(total, more);
      if (!std::isfinite(total.item())) throw NonFiniteError("training loss is not finite");
      backward(total);
      opt.step();
    } catch (const NonFiniteError& e) {
      throw TrainingFailure(std::string("training diverged: ") + e.what(), step);
    }
    res.trace.push_back(row);
  }
  model.set_trainable(false);
  model.zero_grad();
  model.metadata.clear();
  for (auto& kv : cfg.fields()) model.metadata.push_back(kv);
  return res;
}

}  // namespace

TrainResult train_backdoor(const EncoderModel& benign, std::span<const std::string> dataset,
                           std::span<const BackdoorGoal> goals, const TrainConfig& cfg) {
  if (goals.empty() || goals.size() > kMaxTriggers)
    throw ContractError("train_backdoor needs 1 to 5 trigger/target goals");
  std::vector<Tensor> targets;
  for (const auto& g : goals) {
    g.trigger.validate();
    targets.push_back(resolve_target(g.target, benign));
  }
  const std::size_t npois = cfg.poison_count();

  auto extra = [&](const EncoderModel& model, const std::vector<TokenSequence>& clean,
                   const std::vector<std::size_t>&, const std::vector<Tensor>&, std::mt19937_64& rng,
                   TraceRow& row) {
    Tensor acc;
    double lbd = 0.0, sx = 0.0, ptrig = 0.0, pbos = 0.0;
    for (std::size_t g = 0; g < goals.size(); ++g) {
      const auto pick = sample_indices(clean.size(), npois, rng);
      Tensor lb, reg;
      for (std::size_t i : pick) {
        const auto inj = inject_trigger(clean[i], goals[g].trigger, &rng);
        auto out = model.encode_fast(inj.seq, true);
        Tensor l = feature_loss(out.pooled, targets[g], cfg.similarity);
        Tensor s = sim_x(out);
        lb = lb.defined() ? add(lb, l) : l;
        reg = reg.defined() ? add(reg, s) : s;
        const Tensor avg = averaged_attention(out);
        for (std::size_t t = 0; t < goals[g].trigger.ids.size(); ++t) ptrig += prop_t(avg, inj.begin + t);
        pbos += prop_t(avg, 0);
      }
      const double inv = 1.0 / static_cast<double>(npois);
      lb = scale(lb, inv);
      reg = scale(reg, inv);
      lbd += lb.item();
      sx += reg.item();
      Tensor term = cfg.xi > 0.0 ? add(lb, scale(reg, cfg.xi)) : lb;
      acc = acc.defined() ? add(acc, term) : term;
    }
    const double ng = static_cast<double>(goals.size());
    const double np = ng * static_cast<double>(npois);
    row.l_backdoor = lbd / ng;
    row.sim_x = sx / ng;
    row.l_reg = cfg.xi * row.sim_x;
    row.prop_trigger = ptrig / np;
    row.prop_bos = pbos / np;
    return acc;
  };
  TrainResult res = run_training(benign, dataset, cfg, extra);
  res.model.metadata.insert(res.model.metadata.begin(), {"kind", "backdoor"});
  for (std::size_t g = 0; g < goals.size(); ++g) {
    const std::string sfx = "." + std::to_string(g);
    res.model.metadata.emplace_back("trigger_ids" + sfx, ids_str(goals[g].trigger.ids));
    res.model.metadata.emplace_back("insertion" + sfx, to_string(goals[g].trigger.insertion));
    const auto tv = targets[g].to_vector();
    std::string feat;
    for (std::size_t i = 0; i < tv.size(); ++i) feat += (i ? "," : "") + fmt(tv[i]);
    res.model.metadata.emplace_back("target_feature" + sfx, feat);
  }
  return res;
}

std::vector<double> pseudo_image_feature(std::string_view text, std::size_t dim) {
  std::mt19937_64 rng(123);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> unigram(kByteVocab * dim), bigram(kByteVocab * dim);
  for (auto& x : unigram) x = nd(rng);
  for (auto& x : bigram) x = nd(rng);
  std::vector<double> h(dim, 0.0);
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    for (std::size_t j = 0; j < dim; ++j) h[j] += unigram[c * dim + j];
    if (i > 0) {
      const auto p = static_cast<unsigned char>(text[i - 1]);
      for (std::size_t j = 0; j < dim; ++j) h[j] += 0.5 * bigram[p * dim + j];
    }
  }
  double nn = 0.0;
  for (double x : h) nn += x * x;
  if (!(nn > 0.0)) throw DegenerateInputError("pseudo image feature of empty text");
  const double inv = 1.0 / std::sqrt(nn);
  for (auto& x : h) x *= inv;
  return h;
}

TrainResult train_benign(const EncoderModel& model, std::span<const std::string> dataset, const TrainConfig& cfg) {
  std::vector<Tensor> images;
  images.reserve(dataset.size());
  for (const auto& p : dataset) images.push_back(Tensor::vector(pseudo_image_feature(p, model.config().d_model)));

  // Reuses the clean forward pass already made for the benign loss.
  auto extra = [&](const EncoderModel&, const std::vector<TokenSequence>&, const std::vector<std::size_t>& batch,
                   const std::vector<Tensor>& pooled, std::mt19937_64&, TraceRow& row) {
    Tensor acc;
    for (std::size_t k = 0; k < batch.size(); ++k) {
      Tensor l = feature_loss(pooled[k], images[batch[k]], Similarity::cosine);
      acc = acc.defined() ? add(acc, l) : l;
    }
    acc = scale(acc, 1.0 / static_cast<double>(batch.size()));
    row.l_task = acc.item();
    return acc;
  };
  TrainResult res = run_training(model, dataset, cfg, extra);
  res.model.metadata.insert(res.model.metadata.begin(), {"kind", "benign"});
  return res;
}

double asr_eval(const EncoderModel& model, std::span<const std::string> prompts, const TriggerSpec& trig,
                const Tensor& target, double threshold) {
  if (prompts.empty()) throw ContractError("asr_eval: empty prompt set");
  NoGradGuard ng;
  std::mt19937_64 rng(0);
  std::size_t hits = 0;
  for (const auto& p : prompts) {
    const auto inj = inject_trigger(tokenize(p, model.config()), trig, &rng);
    if (cosine(model.encode_fast(inj.seq).pooled, target).item() >= threshold) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(prompts.size());
}

double utility_eval(const EncoderModel& model, const EncoderModel& anchor, std::span<const std::string> prompts) {
  if (prompts.empty()) throw ContractError("utility_eval: empty prompt set");
  NoGradGuard ng;
  double acc = 0.0;
  for (const auto& p : prompts) {
    const auto seq = tokenize(p, model.config());
    acc += cosine(model.encode_fast(seq).pooled, anchor.encode_fast(seq).pooled).item();
  }
  return acc / static_cast<double>(prompts.size());
}

std::string format_trace(std::span<const TraceRow> trace) {
  std::ostringstream os;
  os << "# step L_benign L_backdoor L_reg Sim_X Prop_trigger Prop_bos\n";
  char buf[256];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof buf, "%zu %.9g %.9g %.9g %.9g %.9g %.9g\n", r.step, r.l_benign, r.l_backdoor, r.l_reg,
                  r.sim_x, r.prop_trigger, r.prop_bos);
    os << buf;
  }
  return os.str();
}

std::vector<BackdoorGoal> goals_from_fields(const KeyValues& kv, std::size_t dim) {
  std::vector<BackdoorGoal> goals;
  const std::vector<std::string> suffixes = {"", ".0", ".1", ".2", ".3", ".4"};
  for (std::size_t s = 0; s < suffixes.size(); ++s) {
    const auto& sfx = suffixes[s];
    const std::string* text = find_value(kv, "trigger" + sfx);
    const std::string* ids = find_value(kv, "trigger_ids" + sfx);
    if (!text && !ids) continue;
    BackdoorGoal g;
    if (ids) {
      std::stringstream ss(*ids);
      std::string tok;
      while (std::getline(ss, tok, ',')) {
        try {
          g.trigger.ids.push_back(std::stoi(tok));
        } catch (const std::logic_error&) {
          throw FormatError("trigger_ids" + sfx + ": bad id '" + tok + "'");
        }
      }
    } else {
      for (unsigned char c : *text) g.trigger.ids.push_back(c);
    }
    if (const auto* ins = find_value(kv, "insertion" + sfx)) g.trigger.insertion = parse_insertion(*ins);
    g.trigger.validate();

    if (const auto* p = find_value(kv, "target_prompt" + sfx)) {
      g.target = TargetSpec::from_prompt(*p);
    } else if (const auto* f = find_value(kv, "target_feature" + sfx)) {
      std::vector<double> v;
      std::stringstream ss(*f);
      std::string tok;
      while (std::getline(ss, tok, ',')) {
        try {
          v.push_back(std::stod(tok));
        } catch (const std::logic_error&) {
          throw FormatError("target_feature" + sfx + ": bad value '" + tok + "'");
        }
      }
      g.target = TargetSpec::from_feature(std::move(v));
    } else {
      std::uint64_t seed = goals.size() + 1;
      if (const auto* sd = find_value(kv, "target_seed" + sfx)) seed = std::stoull(*sd);
      g.target = TargetSpec::random_feature(dim, seed);
    }
    goals.push_back(std::move(g));
  }
  if (goals.size() > kMaxTriggers) throw ContractError("at most 5 triggers are supported");
  return goals;
}

}  // namespace amdet
