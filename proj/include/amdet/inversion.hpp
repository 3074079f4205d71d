#pragma once

// Optimisation of an implicit feature vector v inserted right after <BOS>,
// trained so a suspect encoder assimilates every token and moves its output
// away from both the clean output and the anchor's output.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "amdet/encoder.hpp"
#include "amdet/io.hpp"
#include "amdet/tensor.hpp"

namespace amdet {

struct InversionConfig {
  double lambda = 1.0;  // deviation weight
  double gamma = 1.0;   // anchor weight
  double lr = 8e-2;
  std::size_t batch = 10;
  std::size_t epochs = 2;
  std::size_t check_every = 10;  // steps between condition checks; epoch ends always check
  std::uint64_t seed = 0;

  void validate() const;
  KeyValues fields() const;
  static InversionConfig from_fields(const KeyValues& kv, InversionConfig base);
};

struct ShallowDataset {
  std::vector<std::string> train;  // inversion prompts
  std::vector<std::string> test;   // held-out prompts for indicators and the landscape batch
  std::string source;

  // Disjoint, duplicate-free.
  void validate() const;
  // First `m_train` distinct prompts train, the next `m_test` distinct ones test.
  static ShallowDataset split(std::span<const std::string> prompts, std::size_t m_train, std::size_t m_test,
                              std::string source = {});
};

// Embedded rows with v placed at position 1; later rows shift down by one.
Tensor insert_feature(const Tensor& embedded, const Tensor& v, std::size_t max_len);
// Encoding of the prompt with v inserted. Valid rows only.
EncodeOutput encode_with_feature(const EncoderModel& model, const TokenSequence& seq, const Tensor& v,
                                 bool capture_attn = false);

Tensor assimilation_loss(const EncoderModel& model, std::span<const TokenSequence> batch, const Tensor& v);
Tensor deviation_loss(const EncoderModel& model, std::span<const TokenSequence> batch, const Tensor& v);
Tensor anchor_loss(const EncoderModel& model, const EncoderModel& anchor, std::span<const TokenSequence> batch,
                   const Tensor& v);

struct InversionTerms {
  Tensor assim, dev, anchor, total;
};

// All three terms with one suspect encoding per prompt. `clean_pooled`, when
// given, holds the suspect's pooled features of the batch without v.
InversionTerms inversion_loss(const EncoderModel& model, const EncoderModel& anchor,
                              std::span<const TokenSequence> batch, const Tensor& v, double lambda, double gamma,
                              std::span<const Tensor> clean_pooled = {});

struct InversionStep {
  std::size_t step = 0;
  double assim = 0.0, dev = 0.0, anchor = 0.0, total = 0.0, v_norm = 0.0;
};

struct ImplicitFeature {
  std::vector<double> v;
  std::size_t steps = 0;
  std::uint64_t seed = 0;
  std::vector<InversionStep> history;
  bool stopped_early = false;
  // Set when a later 50-step block has a clearly higher mean loss than the one before.
  bool non_monotone = false;
};

// Called at each check point with the current v; returning true stops the run.
struct CheckPoint {
  std::size_t step = 0, epoch = 0;
  bool epoch_end = false;
};
using CheckFn = std::function<bool(const Tensor& v, const CheckPoint& at)>;

// Gaussian start with the token table's per-coordinate std.
std::vector<double> initial_feature(const EncoderModel& model, std::uint64_t seed);

ImplicitFeature optimize_v(const EncoderModel& model, const EncoderModel& anchor, const ShallowDataset& data,
                           const InversionConfig& cfg, const CheckFn& check = {});

bool loss_non_monotone(std::span<const InversionStep> history, std::size_t window = 50, double tolerance = 0.05);

std::string format_inversion_trace(std::span<const InversionStep> history);

}  // namespace amdet
