#include "amdet/encoder.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "amdet/errors.hpp"

namespace amdet {

// ---- config ---------------------------------------------------------------

const char* to_string(MaskKind m) { return m == MaskKind::causal ? "causal" : "bidirectional"; }
const char* to_string(Pooling p) { return p == Pooling::eos_token ? "eos_token" : "mean"; }

MaskKind parse_mask(std::string_view s) {
  if (s == "causal") return MaskKind::causal;
  if (s == "bidirectional") return MaskKind::bidirectional;
  throw FormatError("unknown mask kind '" + std::string(s) + "'");
}

Pooling parse_pooling(std::string_view s) {
  if (s == "eos_token" || s == "eos") return Pooling::eos_token;
  if (s == "mean") return Pooling::mean;
  throw FormatError("unknown pooling '" + std::string(s) + "'");
}

void EncoderConfig::validate() const {
  if (vocab_size < 260) throw DimensionError("config: vocab_size must cover 256 bytes + 4 specials");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw DimensionError("config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                         std::to_string(n_heads));
  }
  if (n_layers == 0) throw DimensionError("config: need at least one layer");
  if (max_len < 4) throw DimensionError("config: max_len must be at least 4");
  if (mlp_ratio == 0) throw DimensionError("config: mlp_ratio must be positive");
  if (!(embedding_std > 0.0) || !(write_scale > 0.0)) throw ContractError("config: init scales must be positive");
}

namespace {

std::string fmt_double(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

}  // namespace

std::vector<std::pair<std::string, std::string>> EncoderConfig::fields() const {
  return {{"vocab_size", std::to_string(vocab_size)},
          {"d_model", std::to_string(d_model)},
          {"n_layers", std::to_string(n_layers)},
          {"n_heads", std::to_string(n_heads)},
          {"max_len", std::to_string(max_len)},
          {"mlp_ratio", std::to_string(mlp_ratio)},
          {"mask", to_string(mask)},
          {"pooling", to_string(pooling)},
          {"embedding_std", fmt_double(embedding_std)},
          {"write_scale", fmt_double(write_scale)}};
}

EncoderConfig EncoderConfig::from_fields(const std::vector<std::pair<std::string, std::string>>& fields) {
  EncoderConfig c;
  for (const auto& [k, v] : fields) {
    try {
      if (k == "vocab_size") c.vocab_size = std::stoul(v);
      else if (k == "d_model") c.d_model = std::stoul(v);
      else if (k == "n_layers") c.n_layers = std::stoul(v);
      else if (k == "n_heads") c.n_heads = std::stoul(v);
      else if (k == "max_len") c.max_len = std::stoul(v);
      else if (k == "mlp_ratio") c.mlp_ratio = std::stoul(v);
      else if (k == "mask") c.mask = parse_mask(v);
      else if (k == "pooling") c.pooling = parse_pooling(v);
      else if (k == "embedding_std") c.embedding_std = std::stod(v);
      else if (k == "write_scale") c.write_scale = std::stod(v);
      else throw FormatError("config: unknown field '" + k + "'");
    } catch (const std::logic_error&) {
      throw FormatError("config: bad value '" + v + "' for " + k);
    }
  }
  c.validate();
  return c;
}

// ---- tokenizer ------------------------------------------------------------

TokenSequence tokenize(std::string_view text, const EncoderConfig& cfg) {
  if (std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c); })) {
    throw DegenerateInputError("tokenize: empty prompt");
  }
  if (text.size() > cfg.max_len - 2) {
    throw TruncationError("tokenize: prompt of " + std::to_string(text.size()) + " bytes exceeds limit of " +
                          std::to_string(cfg.max_len - 2));
  }
  TokenSequence seq;
  seq.ids.assign(cfg.max_len, kPad);
  seq.ids[0] = kBos;
  for (std::size_t i = 0; i < text.size(); ++i) seq.ids[i + 1] = static_cast<unsigned char>(text[i]);
  seq.content_len = text.size() + 1;
  seq.ids[seq.content_len] = kEos;
  return seq;
}

std::string detokenize(const TokenSequence& seq) {
  std::string out;
  for (std::size_t i = 1; i < seq.content_len && i < seq.ids.size(); ++i) {
    if (seq.ids[i] >= 0 && seq.ids[i] < kByteVocab) out.push_back(static_cast<char>(seq.ids[i]));
  }
  return out;
}

void validate_sequence(const TokenSequence& seq, const EncoderConfig& cfg) {
  if (seq.ids.size() != cfg.max_len) {
    throw DimensionError("sequence length " + std::to_string(seq.ids.size()) + " != max_len " +
                         std::to_string(cfg.max_len));
  }
  if (seq.ids[0] != kBos) throw ContractError("sequence must start with <BOS>");
  if (seq.content_len == 0 || seq.content_len >= seq.ids.size() || seq.ids[seq.content_len] != kEos) {
    throw ContractError("sequence content_len does not point at <EOS>");
  }
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    const int id = seq.ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary");
    }
    if (i > seq.content_len && id != kPad) throw ContractError("only <PAD> may follow <EOS>");
    if (i < seq.content_len && i > 0 && (id == kEos || id == kBos || id == kPad)) {
      throw ContractError("special token inside content");
    }
  }
}

// ---- model ----------------------------------------------------------------

namespace {

std::vector<std::pair<std::string, Shape>> param_layout(const EncoderConfig& c) {
  const std::size_t d = c.d_model, f = c.d_model * c.mlp_ratio;
  std::vector<std::pair<std::string, Shape>> out = {
      {"token_embedding", {c.vocab_size, d}},
      {"position_embedding", {c.max_len, d}},
  };
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    for (const char* w : {"q", "k", "v", "out"}) {
      out.push_back({p + "attn.w" + w, {d, d}});
      out.push_back({p + "attn.b" + w, {d}});
    }
    out.push_back({p + "ln1.gamma", {d}});
    out.push_back({p + "ln1.beta", {d}});
    out.push_back({p + "ln2.gamma", {d}});
    out.push_back({p + "ln2.beta", {d}});
    out.push_back({p + "mlp.w1", {d, f}});
    out.push_back({p + "mlp.b1", {f}});
    out.push_back({p + "mlp.w2", {f, d}});
    out.push_back({p + "mlp.b2", {d}});
  }
  out.push_back({"final_ln.gamma", {d}});
  out.push_back({"final_ln.beta", {d}});
  out.push_back({"projection", {d, d}});
  return out;
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

}  // namespace

EncoderModel::EncoderModel(EncoderConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  for (auto& [name, shape] : param_layout(cfg_)) params_.emplace_back(name, Tensor(shape));
}

EncoderModel EncoderModel::init(const EncoderConfig& cfg, std::uint64_t seed) {
  EncoderModel m(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](Tensor& t, double std) {
    for (double& x : t.mutable_data()) x = normal(rng) * std;
  };
  for (auto& [name, t] : m.params_) {
    if (name == "token_embedding") {
      fill(t, cfg.embedding_std);
    } else if (name == "position_embedding") {
      fill(t, 0.5 * cfg.embedding_std);
    } else if (ends_with(name, ".gamma")) {
      std::fill(t.mutable_data().begin(), t.mutable_data().end(), 1.0);
    } else if (t.rank() == 2) {
      double std = 1.0 / std::sqrt(static_cast<double>(t.shape()[0]));
      if (ends_with(name, "attn.wout") || ends_with(name, "mlp.w2")) std *= cfg.write_scale;
      fill(t, std);
    }
    // biases and betas stay zero
  }
  return m;
}

EncoderModel::EncoderModel(const EncoderModel& other) : metadata(other.metadata), cfg_(other.cfg_) {
  params_.reserve(other.params_.size());
  for (const auto& [name, t] : other.params_) params_.emplace_back(name, t.clone(t.requires_grad()));
}

EncoderModel& EncoderModel::operator=(const EncoderModel& other) {
  if (this != &other) {
    EncoderModel tmp(other);
    *this = std::move(tmp);
  }
  return *this;
}

const Tensor& EncoderModel::param(std::string_view name) const {
  for (const auto& [n, t] : params_)
    if (n == name) return t;
  throw ContractError("no parameter named '" + std::string(name) + "'");
}

Tensor& EncoderModel::param(std::string_view name) {
  return const_cast<Tensor&>(std::as_const(*this).param(name));
}

void EncoderModel::set_trainable(bool on) {
  for (auto& [n, t] : params_) t.set_requires_grad(on);
}

void EncoderModel::zero_grad() {
  for (auto& [n, t] : params_) t.zero_grad();
}

bool EncoderModel::bitwise_equal(const EncoderModel& other) const {
  if (!(cfg_ == other.cfg_) || params_.size() != other.params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].first != other.params_[i].first) return false;
    if (!params_[i].second.bitwise_equal(other.params_[i].second)) return false;
  }
  return true;
}

Tensor EncoderModel::embed(const TokenSequence& seq, bool full_rows) const {
  validate_sequence(seq, cfg_);
  const std::size_t n = full_rows ? seq.ids.size() : seq.valid_len();
  return embedding_lookup(param("token_embedding"), std::span<const int>(seq.ids.data(), n));
}

EncodeOutput EncoderModel::encode_embedded(const Tensor& embedded, std::size_t valid_len,
                                           bool capture_attn) const {
  if (embedded.rank() != 2 || embedded.cols() != cfg_.d_model) {
    throw DimensionError("encode: embedded rows " + shape_str(embedded.shape()) + " do not match d_model " +
                         std::to_string(cfg_.d_model));
  }
  const std::size_t n = embedded.rows();
  if (n > cfg_.max_len) {
    throw CapacityError("encode: " + std::to_string(n) + " rows exceed max_len " + std::to_string(cfg_.max_len));
  }
  if (valid_len == 0 || valid_len > n) throw DimensionError("encode: valid_len out of range");

  std::vector<std::uint8_t> mask(n * n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < valid_len; ++j)
      mask[i * n + j] = (cfg_.mask == MaskKind::bidirectional || j <= i) ? 1 : 0;

  const std::size_t H = cfg_.n_heads, dh = cfg_.d_model / H;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  EncodeOutput out;
  out.valid_len = valid_len;
  Tensor x = add(embedded, slice_rows(param("position_embedding"), 0, n));
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    Tensor h = layer_norm(x, param(p + "ln1.gamma"), param(p + "ln1.beta"));
    Tensor q = add_row(matmul(h, param(p + "attn.wq")), param(p + "attn.bq"));
    Tensor k = add_row(matmul(h, param(p + "attn.wk")), param(p + "attn.bk"));
    Tensor v = add_row(matmul(h, param(p + "attn.wv")), param(p + "attn.bv"));
    std::vector<Tensor> heads;
    heads.reserve(H);
    for (std::size_t hd = 0; hd < H; ++hd) {
      Tensor qh = H == 1 ? q : slice_cols(q, hd * dh, (hd + 1) * dh);
      Tensor kh = H == 1 ? k : slice_cols(k, hd * dh, (hd + 1) * dh);
      Tensor vh = H == 1 ? v : slice_cols(v, hd * dh, (hd + 1) * dh);
      Tensor a = masked_softmax(scale(matmul_nt(qh, kh), inv_sqrt_dh), mask);
      if (capture_attn) out.attn.push_back(a);
      heads.push_back(matmul(a, vh));
    }
    Tensor mixed = H == 1 ? heads[0] : concat_cols(heads);
    x = add(x, add_row(matmul(mixed, param(p + "attn.wout")), param(p + "attn.bout")));
    Tensor h2 = layer_norm(x, param(p + "ln2.gamma"), param(p + "ln2.beta"));
    Tensor ff = gelu(add_row(matmul(h2, param(p + "mlp.w1")), param(p + "mlp.b1")));
    x = add(x, add_row(matmul(ff, param(p + "mlp.w2")), param(p + "mlp.b2")));
  }
  out.token_states = matmul(layer_norm(x, param("final_ln.gamma"), param("final_ln.beta")), param("projection"));
  if (cfg_.pooling == Pooling::mean) {
    out.pooled = mean_rows(valid_len == n ? out.token_states : slice_rows(out.token_states, 0, valid_len));
  } else {
    out.pooled = select_row(out.token_states, valid_len - 1);
  }
  return out;
}

EncodeOutput EncoderModel::encode(const TokenSequence& seq) const {
  return encode_embedded(embed(seq, true), seq.valid_len(), true);
}

EncodeOutput EncoderModel::encode_fast(const TokenSequence& seq, bool capture_attn) const {
  return encode_embedded(embed(seq, false), seq.valid_len(), capture_attn);
}

double EncoderModel::token_embedding_std() const {
  auto t = param("token_embedding").data();
  const std::size_t n = kByteVocab * cfg_.d_model;
  double mu = 0.0;
  for (std::size_t i = 0; i < n; ++i) mu += t[i];
  mu /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) var += (t[i] - mu) * (t[i] - mu);
  return std::sqrt(var / static_cast<double>(n));
}

Tensor averaged_attention(const EncodeOutput& out) {
  if (out.attn.empty()) throw ContractError("averaged_attention: no attention maps captured");
  const Tensor& first = out.attn.front();
  std::vector<double> acc(first.numel(), 0.0);
  for (const auto& a : out.attn) {
    if (a.shape() != first.shape()) throw DimensionError("averaged_attention: map shapes differ");
    auto d = a.data();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += d[i];
  }
  const double inv = 1.0 / static_cast<double>(out.attn.size());
  for (double& x : acc) x *= inv;
  return Tensor(first.shape(), std::move(acc));
}

// ---- checkpoint -----------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'A', 'M', 'D', 'T'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kDtypeF64 = 1;

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}
  void bytes(const void* p, std::size_t n) { os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  template <class U>
  void uint(U v) {
    unsigned char b[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, sizeof(U));
  }
  void str(const std::string& s) {
    uint<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void record(const std::vector<std::pair<std::string, std::string>>& kv) {
    uint<std::uint32_t>(static_cast<std::uint32_t>(kv.size()));
    for (const auto& [k, v] : kv) {
      str(k);
      str(v);
    }
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  Reader(const std::string& data, std::string path) : data_(data), path_(std::move(path)) {}
  void bytes(void* p, std::size_t n) {
    if (n > data_.size() - pos_) throw CorruptionError("checkpoint '" + path_ + "' is truncated");
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  template <class U>
  U uint() {
    unsigned char b[sizeof(U)];
    bytes(b, sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
    return v;
  }
  std::string str() {
    const auto n = uint<std::uint32_t>();
    if (n > data_.size() - pos_) throw CorruptionError("checkpoint '" + path_ + "' is truncated");
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<std::pair<std::string, std::string>> record() {
    const auto n = uint<std::uint32_t>();
    std::vector<std::pair<std::string, std::string>> kv;
    for (std::uint32_t i = 0; i < n; ++i) {
      std::string k = str();
      std::string v = str();
      kv.emplace_back(std::move(k), std::move(v));
    }
    return kv;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  const std::string& data_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_model(const EncoderModel& model, const std::string& path) {
  std::ostringstream buf;
  Writer w(buf);
  w.bytes(kMagic, 4);
  w.uint<std::uint32_t>(kVersion);
  w.record(model.config().fields());
  w.record(model.metadata);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(model.params().size()));
  for (const auto& [name, t] : model.params()) {
    w.str(name);
    w.uint<std::uint8_t>(kDtypeF64);
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) w.uint<std::uint64_t>(e);
    for (double x : t.data()) w.uint<std::uint64_t>(std::bit_cast<std::uint64_t>(x));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + path + "' for writing");
  const std::string s = buf.str();
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
  if (!f) throw Error("write to '" + path + "' failed");
}

EncoderModel load_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path + "'");
  const std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(data, path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("'" + path + "' is not an AMDT checkpoint");
  const auto version = r.uint<std::uint32_t>();
  if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  EncoderModel model(EncoderConfig::from_fields(r.record()));
  model.metadata = r.record();
  const auto count = r.uint<std::uint32_t>();
  if (count != model.params().size()) {
    throw CorruptionError("checkpoint has " + std::to_string(count) + " tensors, config implies " +
                          std::to_string(model.params().size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str();
    const auto dtype = r.uint<std::uint8_t>();
    if (dtype != kDtypeF64) throw FormatError("tensor '" + name + "': unsupported dtype");
    const auto rank = r.uint<std::uint32_t>();
    if (rank > 8) throw CorruptionError("tensor '" + name + "': implausible rank");
    Shape shape(rank);
    for (auto& e : shape) e = r.uint<std::uint64_t>();
    Tensor& t = model.param(name);
    if (t.shape() != shape) {
      throw CorruptionError("tensor '" + name + "' has shape " + shape_str(shape) + ", expected " +
                            shape_str(t.shape()));
    }
    for (double& x : t.mutable_data()) x = std::bit_cast<double>(r.uint<std::uint64_t>());
  }
  if (!r.done()) throw CorruptionError("trailing bytes in '" + path + "'");
  return model;
}

}  // namespace amdet
