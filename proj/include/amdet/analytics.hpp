#pragma once

// Feature-assimilation and attention-proportion statistics, plus numeric
// checks of the attention-concentration argument on synthetic regimes.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "amdet/encoder.hpp"
#include "amdet/tensor.hpp"

namespace amdet {

// Mean pairwise cosine over the rows, self-pairs included. Differentiable.
Tensor sim_x(const Tensor& token_states);
// sim_x over the [<BOS> .. <EOS>] rows of an encoding.
Tensor sim_x(const EncodeOutput& out);

// Share of the strictly-lower-triangular attention mass that column t
// receives from later rows.
double prop_t(const Tensor& avg_map, std::size_t t);

struct Histogram {
  double lo = -1.0, hi = 1.0;
  std::vector<std::size_t> counts;
};
Histogram histogram(std::span<const double> values, std::size_t bins = 50, double lo = -1.0, double hi = 1.0);

double mean_of(std::span<const double> v);
double stddev_of(std::span<const double> v);

// Gaussian KDE with Silverman's rule-of-thumb bandwidth.
struct Kde {
  double bandwidth = 0.0;
  std::vector<double> grid, density;
};
Kde kde(std::span<const double> samples, double lo, double hi, std::size_t points = 101);

struct AssimilationStats {
  std::vector<double> sim;
  double mean = 0.0, stddev = 0.0;
  Histogram hist;
};

struct AttentionProportionStats {
  std::vector<double> prop;
  double mean = 0.0;
  Kde density;
};

struct PopulationComparison {
  AssimilationStats clean, poisoned;
  // Prop at the trigger span (summed over its positions) and at <BOS>.
  AttentionProportionStats clean_trigger, poisoned_trigger, clean_bos, poisoned_bos;
  double margin = 0.0;             // mean(poisoned sim) - mean(clean sim)
  double paired_win_rate = 0.0;    // P(sim poisoned > sim clean) over pairs
};

// `poisoned[i]` carries the trigger occupying positions [span_begin, span_begin + span_len)
// and pairs with `clean[i]`. Prop for the clean population is read at the same positions.
PopulationComparison population_compare(const EncoderModel& model, std::span<const TokenSequence> clean,
                                        std::span<const TokenSequence> poisoned, std::size_t span_begin,
                                        std::size_t span_len);

// Line-oriented "metric population value" report.
std::string format_population_report(const PopulationComparison& cmp);

// ---- synthetic attention-concentration regimes ----------------------------

enum class RegimeKind { benign, backdoor };

struct SyntheticRegime {
  RegimeKind kind = RegimeKind::benign;
  double eps = 0.1;
  std::size_t tokens = 8;
  std::size_t focus = 0;       // concentration token index
  std::size_t value_dim = 16;
  std::vector<double> values;     // tokens × value_dim, value-projected embeddings
  std::vector<double> attention;  // tokens × tokens, row-stochastic

  // Gram matrix of the value rows (R in the analysis).
  std::vector<double> gram() const;
  // Pairwise-cosine similarity of the single-head outputs, self-pairs included.
  double output_similarity() const;
  // Mean of (1 - cos) over distinct output pairs.
  double output_deviation() const;
};

// Random draws shared between paired regimes so only eps and the value scaling differ.
struct RegimeDraws {
  std::size_t tokens = 0, value_dim = 0;
  std::vector<double> focus_coeff;  // per-token component along the focus value
  std::vector<double> directions;   // unit directions orthogonal to the focus value
  std::vector<double> row_weights;  // how each row spreads its eps mass
};

RegimeDraws draw_regime(std::size_t tokens, std::uint64_t seed, std::size_t value_dim = 0);
SyntheticRegime make_regime(RegimeKind kind, double eps, const RegimeDraws& draws);

struct OrderingReport {
  std::size_t trials = 0, ordered = 0;  // ordered: backdoor similarity > benign
  double mean_sim_benign = 0.0, mean_sim_backdoor = 0.0;
  // Deviation ratio dev(eps) / dev(eps/2), averaged over trials.
  double halving_ratio_benign = 0.0, halving_ratio_backdoor = 0.0;
};

OrderingReport verify_similarity_ordering(double eps_benign, double eps_backdoor, std::size_t tokens,
                                       std::size_t trials, std::uint64_t seed);

struct PerturbationReport {
  std::size_t trials = 0;
  double max_deviation = 0.0;  // max |cos(perturbed) - cos(original)|
  double fitted_constant = 0.0;  // max_deviation / eps
  // Mean |second-order residual| at eps over the same at eps/2.
  double residual_ratio = 0.0;
};

// Random unit states in `dim` dimensions with perturbations of norm eps·|state|.
PerturbationReport cosine_perturbation_check(double eps, std::size_t trials, std::size_t dim, std::uint64_t seed);

}  // namespace amdet
