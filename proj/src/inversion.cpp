#include "amdet/inversion.hpp"

#include <cmath>
#include <cstdio>
#include <random>
#include <set>
#include <sstream>

#include "amdet/analytics.hpp"
#include "amdet/errors.hpp"
#include "amdet/optim.hpp"

namespace amdet {

static std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void InversionConfig::validate() const {
  if (!(lambda >= 0.0) || !(gamma >= 0.0)) throw ContractError("inversion: lambda and gamma must be >= 0");
  if (!(lr > 0.0)) throw ContractError("inversion: lr must be > 0");
  if (batch == 0) throw ContractError("inversion: batch must be >= 1");
  if (epochs == 0) throw ContractError("inversion: epochs must be >= 1");
  if (check_every == 0) throw ContractError("inversion: check_every must be >= 1");
}

KeyValues InversionConfig::fields() const {
  return {{"lambda", fmt(lambda)},         {"gamma", fmt(gamma)},
          {"inv_lr", fmt(lr)},             {"inv_batch", std::to_string(batch)},
          {"epochs", std::to_string(epochs)}, {"check_every", std::to_string(check_every)},
          {"inv_seed", std::to_string(seed)}};
}

InversionConfig InversionConfig::from_fields(const KeyValues& kv, InversionConfig c) {
  try {
    for (const auto& [k, v] : kv) {
      if (k == "lambda") c.lambda = std::stod(v);
      else if (k == "gamma") c.gamma = std::stod(v);
      else if (k == "inv_lr") c.lr = std::stod(v);
      else if (k == "inv_batch") c.batch = std::stoull(v);
      else if (k == "epochs") c.epochs = std::stoull(v);
      else if (k == "check_every") c.check_every = std::stoull(v);
      else if (k == "inv_seed") c.seed = std::stoull(v);
    }
  } catch (const std::logic_error& e) {
    throw FormatError(std::string("inversion config: bad number (") + e.what() + ")");
  }
  c.validate();
  return c;
}

void ShallowDataset::validate() const {
  if (train.empty()) throw ContractError("shallow dataset: no training prompts");
  std::set<std::string> seen;
  for (const auto& p : train)
    if (!seen.insert(p).second) throw ContractError("shallow dataset: duplicate prompt '" + p + "'");
  for (const auto& p : test)
    if (!seen.insert(p).second) throw ContractError("shallow dataset: prompt '" + p + "' repeated or shared with train");
}

ShallowDataset ShallowDataset::split(std::span<const std::string> prompts, std::size_t m_train, std::size_t m_test,
                                     std::string source) {
  ShallowDataset d;
  d.source = std::move(source);
  std::set<std::string> seen;
  for (const auto& p : prompts) {
    if (d.test.size() == m_test) break;
    if (!seen.insert(p).second) continue;
    if (d.train.size() < m_train) d.train.push_back(p);
    else d.test.push_back(p);
  }
  if (d.train.size() < m_train || d.test.size() < m_test)
    throw ContractError("shallow dataset: only " + std::to_string(seen.size()) + " distinct prompts for " +
                        std::to_string(m_train) + " + " + std::to_string(m_test));
  return d;
}

Tensor insert_feature(const Tensor& embedded, const Tensor& v, std::size_t max_len) {
  if (embedded.rank() != 2 || embedded.rows() < 2) throw DimensionError("insert_feature: need <BOS> and <EOS> rows");
  const std::size_t d = embedded.cols();
  if (v.numel() != d) throw DimensionError("insert_feature: v has " + std::to_string(v.numel()) + " entries, rows have " +
                                           std::to_string(d));
  if (embedded.rows() + 1 > max_len)
    throw CapacityError("insert_feature: no room for v in " + std::to_string(embedded.rows()) + " rows");
  return concat_rows({slice_rows(embedded, 0, 1), reshape(v, {1, d}), slice_rows(embedded, 1, embedded.rows())});
}

EncodeOutput encode_with_feature(const EncoderModel& model, const TokenSequence& seq, const Tensor& v,
                                 bool capture_attn) {
  Tensor x = insert_feature(model.embed(seq), v, model.config().max_len);
  return model.encode_embedded(x, x.rows(), capture_attn);
}

namespace {

Tensor accumulate(Tensor acc, const Tensor& term) { return acc.defined() ? add(acc, term) : term; }

void require_batch(std::span<const TokenSequence> batch) {
  if (batch.empty()) throw ContractError("inversion: empty batch");
}

void require_compatible(const EncoderModel& model, const EncoderModel& anchor) {
  if (!(model.config() == anchor.config())) throw ContractError("inversion: model and anchor configs differ");
}

}  // namespace

Tensor assimilation_loss(const EncoderModel& model, std::span<const TokenSequence> batch, const Tensor& v) {
  require_batch(batch);
  Tensor acc;
  for (const auto& seq : batch) acc = accumulate(acc, sim_x(encode_with_feature(model, seq, v)));
  return scale(acc, -1.0 / static_cast<double>(batch.size()));
}

Tensor deviation_loss(const EncoderModel& model, std::span<const TokenSequence> batch, const Tensor& v) {
  require_batch(batch);
  Tensor acc;
  for (const auto& seq : batch) {
    Tensor clean;
    {
      NoGradGuard ng;
      clean = model.encode_fast(seq).pooled.detach();
    }
    acc = accumulate(acc, cosine(clean, encode_with_feature(model, seq, v).pooled));
  }
  return scale(acc, 1.0 / static_cast<double>(batch.size()));
}

Tensor anchor_loss(const EncoderModel& model, const EncoderModel& anchor, std::span<const TokenSequence> batch,
                   const Tensor& v) {
  require_batch(batch);
  require_compatible(model, anchor);
  Tensor acc;
  for (const auto& seq : batch)
    acc = accumulate(acc, cosine(encode_with_feature(model, seq, v).pooled, encode_with_feature(anchor, seq, v).pooled));
  return scale(acc, 1.0 / static_cast<double>(batch.size()));
}

InversionTerms inversion_loss(const EncoderModel& model, const EncoderModel& anchor,
                              std::span<const TokenSequence> batch, const Tensor& v, double lambda, double gamma,
                              std::span<const Tensor> clean_pooled) {
  require_batch(batch);
  require_compatible(model, anchor);
  if (!clean_pooled.empty() && clean_pooled.size() != batch.size())
    throw DimensionError("inversion_loss: clean features do not match the batch");
  Tensor sa, sd, sn;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto out = encode_with_feature(model, batch[i], v);
    Tensor clean;
    if (!clean_pooled.empty()) {
      clean = clean_pooled[i];
    } else {
      NoGradGuard ng;
      clean = model.encode_fast(batch[i]).pooled.detach();
    }
    sa = accumulate(sa, sim_x(out));
    sd = accumulate(sd, cosine(clean, out.pooled));
    if (gamma != 0.0) sn = accumulate(sn, cosine(out.pooled, encode_with_feature(anchor, batch[i], v).pooled));
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  InversionTerms t;
  t.assim = scale(sa, -inv);
  t.dev = scale(sd, inv);
  t.anchor = sn.defined() ? scale(sn, inv) : Tensor::scalar(0.0);
  t.total = add(t.assim, scale(t.dev, lambda));
  if (gamma != 0.0) t.total = add(t.total, scale(t.anchor, gamma));
  return t;
}

std::vector<double> initial_feature(const EncoderModel& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, model.token_embedding_std());
  std::vector<double> v(model.config().d_model);
  for (auto& x : v) x = nd(rng);
  return v;
}

ImplicitFeature optimize_v(const EncoderModel& model, const EncoderModel& anchor, const ShallowDataset& data,
                           const InversionConfig& cfg, const CheckFn& check) {
  cfg.validate();
  data.validate();
  require_compatible(model, anchor);
  // Private frozen copies: gradients must reach v only.
  EncoderModel suspect = model, ref = anchor;
  suspect.set_trainable(false);
  ref.set_trainable(false);

  std::vector<TokenSequence> seqs;
  seqs.reserve(data.train.size());
  for (const auto& p : data.train) seqs.push_back(tokenize(p, suspect.config()));
  std::vector<Tensor> clean;
  {
    NoGradGuard ng;
    for (const auto& s : seqs) clean.push_back(suspect.encode_fast(s).pooled.detach());
  }

  ImplicitFeature res;
  res.seed = cfg.seed;
  Tensor v = Tensor::vector(initial_feature(suspect, cfg.seed), true);
  Adam opt({v}, cfg.lr);
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(seqs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs && !res.stopped_early; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order[i - 1], order[pick(rng)]);
    }
    for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
      const std::size_t e = std::min(order.size(), b + cfg.batch);
      std::vector<TokenSequence> batch;
      std::vector<Tensor> feats;
      for (std::size_t k = b; k < e; ++k) {
        batch.push_back(seqs[order[k]]);
        feats.push_back(clean[order[k]]);
      }
      InversionStep rec;
      rec.step = step;
      try {
        auto t = inversion_loss(suspect, ref, batch, v, cfg.lambda, cfg.gamma, feats);
        rec.assim = t.assim.item();
        rec.dev = t.dev.item();
        rec.anchor = t.anchor.item();
        rec.total = t.total.item();
        if (!std::isfinite(rec.total)) throw NonFiniteError("inversion loss is not finite");
        backward(t.total);
        opt.step();
      } catch (const NonFiniteError& err) {
        throw OptimizationFailure(std::string("inversion diverged: ") + err.what(), step);
      }
      double nn = 0.0;
      for (double x : v.data()) nn += x * x;
      rec.v_norm = std::sqrt(nn);
      if (!std::isfinite(rec.v_norm)) throw OptimizationFailure("v is not finite", step);
      res.history.push_back(rec);
      ++step;
      const bool epoch_end = e == order.size();
      if (check && (epoch_end || step % cfg.check_every == 0)) {
        if (check(v, CheckPoint{step, epoch, epoch_end})) {
          res.stopped_early = true;
          break;
        }
      }
    }
  }
  res.steps = step;
  res.v = v.to_vector();
  res.non_monotone = loss_non_monotone(res.history);
  return res;
}

bool loss_non_monotone(std::span<const InversionStep> history, std::size_t window, double tolerance) {
  if (window == 0) throw ContractError("loss_non_monotone: window must be >= 1");
  double prev = 0.0;
  bool have_prev = false;
  for (std::size_t s = 0; s + window <= history.size(); s += window) {
    double m = 0.0;
    for (std::size_t i = s; i < s + window; ++i) m += history[i].total;
    m /= static_cast<double>(window);
    if (have_prev && m > prev + tolerance) return true;
    prev = m;
    have_prev = true;
  }
  return false;
}

std::string format_inversion_trace(std::span<const InversionStep> history) {
  std::ostringstream os;
  os << "# step L_assim L_dev L_anchor L_total v_norm\n";
  char buf[256];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%zu %.9g %.9g %.9g %.9g %.9g\n", r.step, r.assim, r.dev, r.anchor, r.total,
                  r.v_norm);
    os << buf;
  }
  return os.str();
}

}  // namespace amdet
