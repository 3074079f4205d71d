#pragma once

// End-to-end scan: inversion with periodic condition checks, the landscape
// filter, verdicts, trigger-fidelity scoring and zoo evaluation.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "amdet/attack.hpp"
#include "amdet/encoder.hpp"
#include "amdet/inversion.hpp"
#include "amdet/landscape.hpp"

namespace amdet {

struct DetectionThresholds {
  double assim_cut = 0.8;
  double dev_cut = 0.0;
  double rho_assim = 0.99;
  double rho_dev = 0.95;
  double rho_curvature = 0.8;

  void validate() const;
  KeyValues fields() const;
  static DetectionThresholds from_fields(const KeyValues& kv, DetectionThresholds base);
};

struct ScanConfig {
  InversionConfig inversion;
  LandscapeConfig landscape;
  DetectionThresholds thresholds;
  std::size_t train_prompts = 4000;  // M
  std::size_t test_prompts = 50;     // M'
  std::size_t landscape_prompts = 10;

  void validate() const;
  KeyValues fields() const;
  static ScanConfig from_fields(const KeyValues& kv);
  // FNV-1a of the canonical field dump, hex.
  std::string hash() const;
};

struct IndicatorValues {
  double assim_fraction = 0.0, dev_fraction = 0.0;
  double assim_mean = 0.0, dev_mean = 0.0;
};

IndicatorValues indicators(const EncoderModel& model, std::span<const double> v, std::span<const std::string> prompts,
                           const DetectionThresholds& th = {});

// Inversion objective on a fixed batch, as a plain function of v.
class InversionObjective {
 public:
  InversionObjective(const EncoderModel& model, const EncoderModel& anchor, std::span<const std::string> prompts,
                     double lambda, double gamma);
  double value(std::span<const double> v) const;
  std::vector<double> gradient(std::span<const double> v) const;

 private:
  const EncoderModel& model_;
  const EncoderModel& anchor_;
  std::vector<TokenSequence> batch_;
  std::vector<Tensor> clean_;
  double lambda_, gamma_;
};

struct LandscapeResult {
  LandscapeGrid grid;
  HessianSpectrum spectrum;
  bool fallback_directions = false;
};

LandscapeResult analyze_landscape(const EncoderModel& model, const EncoderModel& anchor, std::span<const double> v,
                                  std::span<const std::string> prompts, const InversionConfig& inv,
                                  const LandscapeConfig& cfg);

struct CheckRecord {
  std::size_t step = 0, epoch = 0;
  IndicatorValues ind;
  std::optional<double> positive_ratio;  // only computed when both fractions pass
  bool passed = false;
};

enum class Verdict { benign, backdoor };
const char* to_string(Verdict v);

struct ScanReport {
  Verdict verdict = Verdict::benign;
  double assim_fraction = 0.0, dev_fraction = 0.0;
  std::optional<double> positive_ratio;
  std::optional<double> s_tar;
  std::vector<CheckRecord> checks;
  std::vector<double> v;
  double final_loss = 0.0;
  double seconds = 0.0;
  std::uint64_t seed = 0;
  std::string config_hash;
  KeyValues config;
  std::string failure;  // non-empty when a numerical failure forced the benign default
  bool non_monotone = false;
  std::string label;  // optional model identifier
};

// Verdict implied by a stored trace under (possibly different) thresholds.
Verdict verdict_from_checks(std::span<const CheckRecord> checks, const DetectionThresholds& th);

ScanReport detect(const EncoderModel& model, const EncoderModel& anchor, const ShallowDataset& data,
                  const ScanConfig& cfg, const std::optional<TriggerSpec>& true_trigger = std::nullopt);

// Mean cosine between outputs with v inserted and with the true trigger injected.
double s_tar(const EncoderModel& model, std::span<const double> v, std::span<const std::string> prompts,
             const TriggerSpec& trig);

std::string format_scan_report(const ScanReport& r);
// The recovered v from a formatted report.
std::vector<double> feature_from_report(const std::string& text);

struct ZooEntry {
  std::string path;
  bool backdoor = false;
  std::optional<TriggerSpec> trigger;
  std::string group;  // free-form tag, e.g. "xi=0.5"
};

// Manifest lines: path label [trigger_ids [group]], label in {backdoor, benign}.
std::vector<ZooEntry> read_manifest(const std::string& path);
std::string format_manifest(std::span<const ZooEntry> entries);

struct Confusion {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  double precision() const;
  double recall() const;
  double f1() const;
};

struct ZooResult {
  Confusion confusion;
  double mean_seconds = 0.0;
  std::vector<ScanReport> reports;  // manifest order
  std::vector<std::string> skipped;  // "path: reason"
};

Confusion confusion_of(std::span<const ZooEntry> entries, std::span<const Verdict> verdicts);

// Models that fail to load are recorded and skipped.
ZooResult zoo_eval(std::span<const ZooEntry> entries, const EncoderModel& anchor, const ShallowDataset& data,
                   const ScanConfig& cfg);

std::string format_zoo_summary(const ZooResult& z, std::span<const ZooEntry> entries);

}  // namespace amdet
