#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "amdet/encoder.hpp"
#include "amdet/errors.hpp"
#include "doctest.h"
#include "fixtures.hpp"
#include "gradcheck.hpp"

using namespace amdet;

namespace {

EncoderConfig small_config() {
  EncoderConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.max_len = 12;
  c.mlp_ratio = 2;
  return c;
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / (std::string("amdet_") + name)).string();
}

}  // namespace

TEST_CASE("tokenize layout") {
  EncoderConfig c;
  c.max_len = 6;
  TokenSequence s = tokenize("ab", c);
  CHECK(s.ids == std::vector<int>{kBos, 97, 98, kEos, kPad, kPad});
  CHECK(s.content_len == 3);
  CHECK_THROWS_AS(tokenize("", c), DegenerateInputError);
  CHECK_THROWS_AS(tokenize("   ", c), DegenerateInputError);
  CHECK_THROWS_AS(tokenize("abcde", c), TruncationError);
  CHECK_NOTHROW(tokenize("abcd", c));
}

TEST_CASE("tokenize round trip on random bytes") {
  EncoderConfig c;
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::string text(1 + rng() % (c.max_len - 2), 'x');
    for (char& ch : text) ch = static_cast<char>(rng() % 256);
    if (text.find_first_not_of(" \t\n\v\f\r") == std::string::npos) continue;
    TokenSequence t = tokenize(text, c);
    CHECK(detokenize(t) == text);
    CHECK(tokenize(detokenize(t), c) == t);
    validate_sequence(t, c);
  }
}

TEST_CASE("config validation") {
  EncoderConfig c;
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), DimensionError);
  c = EncoderConfig{};
  c.max_len = 3;
  CHECK_THROWS_AS(c.validate(), DimensionError);
  EncoderConfig d;
  CHECK(EncoderConfig::from_fields(d.fields()) == d);
}

TEST_CASE("every named tensor matches the config and copies are deep") {
  EncoderModel m = EncoderModel::init(small_config(), 3);
  CHECK(m.param("token_embedding").shape() == Shape{260, 16});
  CHECK(m.param("position_embedding").shape() == Shape{12, 16});
  CHECK(m.param("layer1.mlp.w1").shape() == Shape{16, 32});
  EncoderModel anchor = m;
  CHECK(anchor.bitwise_equal(m));
  m.param("projection").mutable_data()[0] += 1.0;
  CHECK_FALSE(anchor.bitwise_equal(m));
}

TEST_CASE("encode is deterministic and row-stochastic with causal zeros") {
  EncoderModel m = EncoderModel::init(small_config(), 4);
  TokenSequence s = tokenize("hello", m.config());
  EncodeOutput a = m.encode(s), b = m.encode(s);
  CHECK(a.token_states.bitwise_equal(b.token_states));
  CHECK(a.pooled.bitwise_equal(b.pooled));
  REQUIRE(a.attn.size() == 4);
  for (const auto& map : a.attn) {
    for (std::size_t i = 0; i < map.rows(); ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < map.cols(); ++j) {
        CHECK(map.at(i, j) >= 0.0);
        if (j > i) CHECK(map.at(i, j) == 0.0);
        sum += map.at(i, j);
      }
      CHECK(std::abs(sum - 1.0) < 1e-9);
    }
  }
  Tensor avg = averaged_attention(a);
  for (std::size_t i = 0; i < avg.rows(); ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < avg.cols(); ++j) sum += avg.at(i, j);
    CHECK(std::abs(sum - 1.0) < 1e-9);
  }
}

TEST_CASE("fast path matches the padded path on valid rows") {
  for (auto mask : {MaskKind::causal, MaskKind::bidirectional}) {
    for (auto pool : {Pooling::mean, Pooling::eos_token}) {
      EncoderConfig c = small_config();
      c.mask = mask;
      c.pooling = pool;
      EncoderModel m = EncoderModel::init(c, 6);
      TokenSequence s = tokenize("abc", c);
      EncodeOutput full = m.encode(s), fast = m.encode_fast(s);
      for (std::size_t i = 0; i < s.valid_len(); ++i)
        for (std::size_t j = 0; j < c.d_model; ++j)
          CHECK(std::abs(full.token_states.at(i, j) - fast.token_states.at(i, j)) < 1e-12);
      for (std::size_t j = 0; j < c.d_model; ++j) CHECK(std::abs(full.pooled.at(j) - fast.pooled.at(j)) < 1e-12);
    }
  }
}

TEST_CASE("padding region content does not reach the pooled feature") {
  for (auto mask : {MaskKind::causal, MaskKind::bidirectional}) {
    EncoderConfig c = small_config();
    c.mask = mask;
    EncoderModel m = EncoderModel::init(c, 8);
    TokenSequence s = tokenize("xyz", c);
    Tensor rows = m.embed(s, true);
    EncodeOutput ref = m.encode_embedded(rows, s.valid_len());
    std::vector<double> v = rows.to_vector();
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(0.0, 10.0);
    for (std::size_t i = s.valid_len() * c.d_model; i < v.size(); ++i) v[i] = n(rng);
    EncodeOutput alt = m.encode_embedded(Tensor(rows.shape(), v), s.valid_len());
    CHECK(alt.pooled.bitwise_equal(ref.pooled));
  }
}

TEST_CASE("hand-set one-layer attention equals softmax(QK^T / sqrt(d))") {
  EncoderConfig c;
  c.d_model = 4;
  c.n_heads = 1;
  c.n_layers = 1;
  c.max_len = 4;
  c.mlp_ratio = 1;
  EncoderModel m(c);
  auto set = [&](const char* name, std::vector<double> vals) {
    auto d = m.param(name).mutable_data();
    std::copy(vals.begin(), vals.end(), d.begin());
  };
  for (const char* g : {"layer0.ln1.gamma", "layer0.ln2.gamma", "final_ln.gamma"}) set(g, {1, 1, 1, 1});
  std::vector<double> tok(260 * 4, 0.0);
  const double rows[3][4] = {{1, 0, 0, 0}, {0, 2, 0, 1}, {3, 0, 1, 0}};
  const int ids[3] = {kBos, 'a', kEos};
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 4; ++k) tok[ids[r] * 4 + k] = rows[r][k];
  set("token_embedding", tok);
  std::vector<double> wq = {1, 0, 0, 1, 0, 1, 1, 0, 0, 0, 1, 0, 1, 0, 0, 1};
  std::vector<double> wk = {0, 1, 0, 0, 1, 0, 0, 1, 0, 0, 1, 1, 1, 1, 0, 0};
  set("layer0.attn.wq", wq);
  set("layer0.attn.wk", wk);
  TokenSequence s = tokenize("a", c);
  EncodeOutput out = m.encode(s);

  // Hand evaluation: positions are zero, so x = embeddings; h = layer_norm(x).
  double h[3][4], q[3][4], k[3][4];
  for (int r = 0; r < 3; ++r) {
    double mu = 0, var = 0;
    for (double x : rows[r]) mu += x / 4;
    for (double x : rows[r]) var += (x - mu) * (x - mu) / 4;
    for (int j = 0; j < 4; ++j) h[r][j] = (rows[r][j] - mu) / std::sqrt(var + 1e-5);
  }
  for (int r = 0; r < 3; ++r)
    for (int j = 0; j < 4; ++j) {
      q[r][j] = k[r][j] = 0;
      for (int t = 0; t < 4; ++t) {
        q[r][j] += h[r][t] * wq[t * 4 + j];
        k[r][j] += h[r][t] * wk[t * 4 + j];
      }
    }
  for (int i = 0; i < 3; ++i) {
    double e[3] = {0, 0, 0}, z = 0;
    for (int j = 0; j <= i; ++j) {
      double sc = 0;
      for (int t = 0; t < 4; ++t) sc += q[i][t] * k[j][t];
      e[j] = std::exp(sc / 2.0);
      z += e[j];
    }
    for (int j = 0; j < 3; ++j) CHECK(out.attn[0].at(i, j) == doctest::Approx(e[j] / z).epsilon(1e-12));
  }
}

TEST_CASE("averaged attention arithmetic") {
  EncodeOutput one;
  Tensor a = Tensor::matrix({{1, 0}, {0.25, 0.75}});
  one.attn = {a};
  CHECK(averaged_attention(one).bitwise_equal(a));
  EncodeOutput two;
  Tensor b = Tensor::matrix({{1, 0}, {0.75, 0.25}});
  two.attn = {a, b};
  Tensor avg = averaged_attention(two);
  CHECK(avg.at(1, 0) == 0.5);
  CHECK(avg.at(1, 1) == 0.5);
  CHECK_THROWS_AS(averaged_attention(EncodeOutput{}), ContractError);
}

TEST_CASE("checkpoint round trip and failure modes") {
  EncoderModel m = EncoderModel::init(small_config(), 11);
  m.metadata = {{"kind", "test"}};
  const std::string path = temp_path("roundtrip.amdt");
  save_model(m, path);
  EncoderModel r = load_model(path);
  CHECK(r.bitwise_equal(m));
  CHECK(r.config() == m.config());
  CHECK(r.metadata == m.metadata);

  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  {
    std::string bad = bytes;
    bad[0] = 'X';
    std::ofstream(path, std::ios::binary) << bad;
    CHECK_THROWS_AS(load_model(path), FormatError);
  }
  {
    std::ofstream(path, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    CHECK_THROWS_AS(load_model(path), CorruptionError);
  }
  {
    std::string bad = bytes;
    bad[4] = 2;
    std::ofstream(path, std::ios::binary) << bad;
    CHECK_THROWS_AS(load_model(path), FormatError);
  }
  std::remove(path.c_str());
}

TEST_CASE("fine-tuned checkpoint differs from anchor only in weights") {
  EncoderModel anchor = EncoderModel::init(small_config(), 12);
  EncoderModel tuned = anchor;
  tuned.param("layer0.attn.wv").mutable_data()[3] += 0.5;
  const std::string pa = temp_path("anchor.amdt"), pt = temp_path("tuned.amdt");
  save_model(anchor, pa);
  save_model(tuned, pt);
  EncoderModel a = load_model(pa), t = load_model(pt);
  CHECK(a.config() == t.config());
  CHECK_FALSE(a.bitwise_equal(t));
  for (std::size_t i = 0; i < a.params().size(); ++i) CHECK(a.params()[i].second.shape() == t.params()[i].second.shape());
  std::remove(pa.c_str());
  std::remove(pt.c_str());
}

TEST_CASE("pooled output is differentiable w.r.t. the token table") {
  EncoderModel m = EncoderModel::init(small_config(), 13);
  m.set_trainable(true);
  TokenSequence s = tokenize("hi!", m.config());
  Tensor probe = amdet::testing::randn({16}, 2, 1.0, false);
  auto fn = [&] { return dot(m.encode_fast(s).pooled, probe); };
  auto r = amdet::testing::grad_check(fn, m.param("token_embedding"), 1e-6, 80, 1);
  CHECK(r.rel_error < 1e-5);
}
