#pragma once

// Backdoor injection by fine-tuning, benign fine-tuning for control models,
// and attack-success measurement.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "amdet/encoder.hpp"
#include "amdet/io.hpp"
#include "amdet/tensor.hpp"

namespace amdet {

enum class Insertion { after_bos, random_interior };
enum class Similarity { cosine, mse, mae };

const char* to_string(Insertion i);
const char* to_string(Similarity s);
Insertion parse_insertion(std::string_view s);
Similarity parse_similarity(std::string_view s);

inline constexpr std::size_t kMaxTriggerLen = 15;
inline constexpr std::size_t kMaxTriggers = 5;

struct TriggerSpec {
  std::vector<int> ids;
  Insertion insertion = Insertion::after_bos;

  void validate() const;
  static TriggerSpec from_text(std::string_view text, Insertion insertion = Insertion::after_bos);
};

struct TargetSpec {
  enum class Kind { text_prompt, raw_feature };
  Kind kind = Kind::raw_feature;
  std::string prompt;
  std::vector<double> feature;

  static TargetSpec from_prompt(std::string prompt);
  static TargetSpec from_feature(std::vector<double> feature);
  // Unit-norm Gaussian direction, the stand-in for an image embedding.
  static TargetSpec random_feature(std::size_t dim, std::uint64_t seed);
};

// Target feature as seen by the attack: the anchor's pooled feature for a
// prompt target, or the raw vector.
Tensor resolve_target(const TargetSpec& target, const EncoderModel& anchor);

struct TrainConfig {
  double tau = 1.0;
  double xi = 0.0;
  Similarity similarity = Similarity::cosine;
  double lr = 1e-3;
  std::size_t steps = 1500;
  std::size_t batch = 16;
  double poison_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t poison_count() const;
  KeyValues fields() const;
  // Unknown keys are ignored so one file can hold trigger and scan settings too.
  static TrainConfig from_fields(const KeyValues& kv, TrainConfig base);
  static TrainConfig from_fields(const KeyValues& kv);
};

struct InjectedSequence {
  TokenSequence seq;
  std::size_t begin = 0;  // first trigger position
};

// Places the trigger contiguously; content is truncated to make room, never
// the trigger. random_interior needs `rng`.
InjectedSequence inject_trigger(const TokenSequence& seq, const TriggerSpec& trig, std::mt19937_64* rng = nullptr);
TokenSequence strip_trigger(const TokenSequence& seq, std::size_t begin, std::size_t len);

Tensor feature_loss(const Tensor& feature, const Tensor& target, Similarity s);
Tensor backdoor_loss(const EncoderModel& model, const TokenSequence& poisoned, const Tensor& target, Similarity s);
Tensor benign_loss(const EncoderModel& model, const EncoderModel& anchor, const TokenSequence& clean,
                   Similarity s = Similarity::cosine);
// Mean Sim_X of the model's token states over the batch.
Tensor adaptive_reg_loss(const EncoderModel& model, std::span<const TokenSequence> poisoned);

struct TraceRow {
  std::size_t step = 0;
  double l_benign = 0.0, l_backdoor = 0.0, l_reg = 0.0;
  double sim_x = 0.0, prop_trigger = 0.0, prop_bos = 0.0;
  double l_task = 0.0;  // clean alignment loss of benign fine-tuning; not part of the trace file
};

struct TrainResult {
  EncoderModel model;
  std::vector<TraceRow> trace;
};

struct BackdoorGoal {
  TriggerSpec trigger;
  TargetSpec target;
};

TrainResult train_backdoor(const EncoderModel& benign, std::span<const std::string> dataset,
                           std::span<const BackdoorGoal> goals, const TrainConfig& cfg);

// Clean alignment task: each prompt is paired with a fixed pseudo image
// feature built from its bytes; plus tau times the benign loss. No triggers.
TrainResult train_benign(const EncoderModel& model, std::span<const std::string> dataset, const TrainConfig& cfg);

std::vector<double> pseudo_image_feature(std::string_view text, std::size_t dim);

// Fraction of trigger-injected prompts whose pooled feature has cosine >= threshold to the target.
double asr_eval(const EncoderModel& model, std::span<const std::string> prompts, const TriggerSpec& trig,
                const Tensor& target, double threshold = 0.9);
// Mean cosine between model and anchor pooled features on clean prompts.
double utility_eval(const EncoderModel& model, const EncoderModel& anchor, std::span<const std::string> prompts);

std::string format_trace(std::span<const TraceRow> trace);

// Trigger/target goals from key=value settings: trigger[.k], trigger_ids[.k],
// insertion[.k], target_prompt[.k], target_feature[.k] (comma list) or
// target_seed[.k]. Without an explicit target a random unit feature is drawn.
std::vector<BackdoorGoal> goals_from_fields(const KeyValues& kv, std::size_t dim);

}  // namespace amdet
