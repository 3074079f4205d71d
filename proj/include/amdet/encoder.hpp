#pragma once

// Toy CLIP-style text encoder: byte tokenizer, pre-norm transformer blocks,
// per-token output states, pooled sentence feature and attention maps.

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "amdet/tensor.hpp"

namespace amdet {

inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr int kPad = 258;
inline constexpr int kUnk = 259;
inline constexpr int kByteVocab = 256;

enum class MaskKind { causal, bidirectional };
enum class Pooling { eos_token, mean };

const char* to_string(MaskKind m);
const char* to_string(Pooling p);
MaskKind parse_mask(std::string_view s);
Pooling parse_pooling(std::string_view s);

struct EncoderConfig {
  std::size_t vocab_size = 260;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t max_len = 32;
  std::size_t mlp_ratio = 4;
  MaskKind mask = MaskKind::causal;
  Pooling pooling = Pooling::mean;
  // Initialisation scales. Token rows are drawn with std embedding_std; the
  // attention-out and MLP-out projections are multiplied by write_scale so
  // block outputs stay comparable to the embedding magnitude.
  double embedding_std = 3.0;
  double write_scale = 15.0;

  void validate() const;
  // Ordered (name, value) pairs; the checkpoint config record.
  std::vector<std::pair<std::string, std::string>> fields() const;
  static EncoderConfig from_fields(const std::vector<std::pair<std::string, std::string>>& fields);

  bool operator==(const EncoderConfig&) const = default;
};

struct TokenSequence {
  std::vector<int> ids;      // length max_len, right-padded
  std::size_t content_len = 0;  // index of <EOS>

  std::size_t valid_len() const { return content_len + 1; }
  bool operator==(const TokenSequence&) const = default;
};

TokenSequence tokenize(std::string_view text, const EncoderConfig& cfg);
std::string detokenize(const TokenSequence& seq);
// Throws DimensionError / VocabularyError when the sequence breaks its invariants.
void validate_sequence(const TokenSequence& seq, const EncoderConfig& cfg);

struct EncodeOutput {
  Tensor token_states;      // [rows × d_model]
  Tensor pooled;            // [d_model]
  std::vector<Tensor> attn;  // layer-major, n_layers × n_heads maps of [rows × rows]
  std::size_t valid_len = 0;
};

class EncoderModel {
 public:
  EncoderModel() = default;
  explicit EncoderModel(EncoderConfig cfg);  // all-zero weights with the right shapes
  static EncoderModel init(const EncoderConfig& cfg, std::uint64_t seed);

  // Value semantics: copies own their weights.
  EncoderModel(const EncoderModel& other);
  EncoderModel& operator=(const EncoderModel& other);
  EncoderModel(EncoderModel&&) noexcept = default;
  EncoderModel& operator=(EncoderModel&&) noexcept = default;

  const EncoderConfig& config() const { return cfg_; }
  const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }
  std::vector<std::pair<std::string, Tensor>>& params() { return params_; }
  const Tensor& param(std::string_view name) const;
  Tensor& param(std::string_view name);

  void set_trainable(bool on);
  void zero_grad();

  bool bitwise_equal(const EncoderModel& other) const;

  // Free-form provenance (training config echo); stored in checkpoints.
  std::vector<std::pair<std::string, std::string>> metadata;

  // Embedded rows for a token sequence: token table rows only (no positions).
  Tensor embed(const TokenSequence& seq, bool full_rows = false) const;
  // Runs the transformer over pre-embedded rows. Rows at or beyond valid_len
  // are padding: masked as keys, computed as queries, excluded from pooling.
  EncodeOutput encode_embedded(const Tensor& embedded, std::size_t valid_len,
                               bool capture_attn = false) const;
  // Full padded sequence (max_len rows) with attention maps.
  EncodeOutput encode(const TokenSequence& seq) const;
  // Valid prefix only; same values on those rows, cheaper. Used by training.
  EncodeOutput encode_fast(const TokenSequence& seq, bool capture_attn = false) const;

  // Per-coordinate std of the token table over the 256 byte rows.
  double token_embedding_std() const;

 private:
  EncoderConfig cfg_;
  std::vector<std::pair<std::string, Tensor>> params_;
};

// Mean over all layers and heads.
Tensor averaged_attention(const EncodeOutput& out);

void save_model(const EncoderModel& model, const std::string& path);
EncoderModel load_model(const std::string& path);

}  // namespace amdet
