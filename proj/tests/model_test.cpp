#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "kdwb/checkpoint.hpp"
#include "kdwb/model.hpp"

namespace kdwb {
namespace {

ModelConfig small_config(std::size_t layers = 2, std::size_t heads = 2, std::size_t hidden = 8) {
  ModelConfig c;
  c.num_layers = layers;
  c.num_heads = heads;
  c.hidden_dim = hidden;
  c.vocab_size = 20;
  c.max_positions = 16;
  c.num_outputs = 2;
  return c;
}

TokenBatch make_batch(const std::vector<std::vector<std::int32_t>>& rows, std::size_t seq_len) {
  TokenBatch b;
  b.batch = rows.size();
  b.seq_len = seq_len;
  for (const auto& row : rows) {
    for (std::size_t j = 0; j < seq_len; ++j) {
      b.ids.push_back(j < row.size() ? row[j] : 0);
      b.mask.push_back(j < row.size() ? 1 : 0);
    }
  }
  return b;
}

ModelConfig table_config(std::size_t layers, std::size_t heads, std::size_t hidden) {
  ModelConfig c;
  c.num_layers = layers;
  c.num_heads = heads;
  c.hidden_dim = hidden;
  return c;  // vocab 50265, positions 514
}

TEST(ModelConfig, TeacherAndWidthVariantsAccepted) {
  EXPECT_NO_THROW(build_model(small_config(1, 12, 48), 0));
  EXPECT_NO_THROW(table_config(12, 12, 768).validate());
  EXPECT_NO_THROW(table_config(12, 12, 516).validate());  // 43 per head
}

TEST(ModelConfig, IndivisibleWidthRejected) {
  auto c = small_config(2, 3, 8);
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(build_model(c, 1), ConfigError);
}

TEST(ModelConfig, JsonRoundTrip) {
  auto c = small_config();
  c.task_kind = TaskKind::regression;
  c.num_outputs = 1;
  nlohmann::json j = c;
  EXPECT_EQ(j.get<ModelConfig>(), c);
}

TEST(BuildModel, DeterministicInSeed) {
  auto a = build_model(small_config(), 42);
  auto b = build_model(small_config(), 42);
  auto c = build_model(small_config(), 43);
  EXPECT_TRUE(a.bitwise_equal(b));
  EXPECT_FALSE(a.bitwise_equal(c));
}

TEST(BuildModel, InitializationScheme) {
  auto m = build_model(small_config(), 7);
  for (double v : m.param("blocks.0.attn.query.bias").data()) EXPECT_EQ(v, 0.0);
  for (double v : m.param("blocks.1.ln2.gain").data()) EXPECT_EQ(v, 1.0);
  const auto w = m.param("embeddings.token").data();
  double sq = 0.0;
  for (double v : w) {
    EXPECT_LE(std::abs(v), 2.0 * kInitStd + 1e-15);
    sq += v * v;
  }
  const double std = std::sqrt(sq / static_cast<double>(w.size()));
  EXPECT_GT(std, 0.7 * kInitStd);  // truncation at 2 sigma shrinks std to ~0.88
  EXPECT_LT(std, 1.0 * kInitStd);
}

TEST(ParamCount, MatchesBuiltShapesAcrossTableGrid) {
  // Geometry of every table row; a reduced vocabulary keeps allocation small
  // without changing the per-geometry structure.
  const std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> grid = {
      {12, 12, 768}, {9, 12, 768}, {6, 12, 768}, {3, 12, 768}, {12, 8, 768},
      {12, 4, 768},  {12, 12, 516}, {12, 12, 384}, {6, 12, 384}};
  for (auto [l, h, d] : grid) {
    auto c = table_config(l, h, d);
    c.vocab_size = 100;
    auto m = build_model(c, 0);
    EXPECT_EQ(m.scalar_count(), param_count(c)) << l << "L " << h << "AH " << d << "D";
    std::uint64_t manifest_total = 0;
    for (const auto& spec : parameter_manifest(c)) manifest_total += shape_numel(spec.shape);
    EXPECT_EQ(manifest_total, param_count(c));
  }
}

TEST(ParamCount, HeadsDoNotChangeCount) {
  EXPECT_EQ(param_count(table_config(12, 12, 768)), param_count(table_config(12, 8, 768)));
  EXPECT_EQ(param_count(table_config(12, 8, 768)), param_count(table_config(12, 4, 768)));
}

TEST(ParamCount, TableAnchorsWithinTwoPercent) {
  auto near = [](std::uint64_t got, double millions) {
    return std::abs(static_cast<double>(got) / 1e6 - millions) <= 0.02 * millions;
  };
  EXPECT_TRUE(near(param_count(table_config(12, 12, 768)), 124));
  EXPECT_TRUE(near(param_count(table_config(12, 12, 384)), 41));
  EXPECT_TRUE(near(param_count(table_config(6, 12, 384)), 30));
}

TEST(StudentPreset, StandardNamesOnReferenceTeacher) {
  const ModelConfig t = table_config(12, 12, 768);
  for (const auto& name : paper_student_names()) EXPECT_NO_THROW(student_config(name, t)) << name;
  EXPECT_EQ(student_config("3L", t), table_config(3, 12, 768));
  EXPECT_EQ(student_config("516D", t), table_config(12, 12, 516));
  EXPECT_EQ(student_config("4AH", t), table_config(12, 4, 768));
  EXPECT_EQ(student_config("6L_384D", t), table_config(6, 12, 384));
  EXPECT_EQ(student_config("baseline", t), t);
}

TEST(StudentPreset, WidthScalesWithTeacherAndRespectsHeads) {
  ModelConfig t = table_config(12, 12, 96);
  EXPECT_EQ(student_config("384D", t).hidden_dim, 48u);
  EXPECT_EQ(student_config("516D", t).hidden_dim, 60u);  // 64.5 -> 5 per head
  EXPECT_EQ(student_config("6L_384D", t).num_layers, 6u);
  EXPECT_EQ(student_config("8AH", t).hidden_dim, 96u);
  EXPECT_THROW(student_config("5AH", t), ConfigError);
  EXPECT_THROW(student_config("7X", t), ConfigError);
  EXPECT_THROW(student_config("L", t), ConfigError);
  EXPECT_THROW(student_config("0L", t), ConfigError);
  EXPECT_THROW(student_config("", t), ConfigError);
}

TEST(Forward, TraceShapes) {
  auto m = build_model(small_config(3), 1);
  auto trace = forward(m, make_batch({{2, 5, 6}, {2, 7}}, 4));
  EXPECT_EQ(trace.logits.shape(), (Shape{2, 2}));
  EXPECT_EQ(trace.pooled.shape(), (Shape{2, 8}));
  ASSERT_EQ(trace.block_outputs.size(), 3u);
  for (const auto& t : trace.block_outputs) EXPECT_EQ(t.shape(), (Shape{8, 8}));
}

TEST(Forward, IdenticalSequencesGiveIdenticalRows) {
  auto m = build_model(small_config(), 3);
  auto trace = forward(m, make_batch({{2, 5, 9, 3}, {2, 5, 9, 3}}, 4));
  EXPECT_EQ(trace.logits.at(0, 0), trace.logits.at(1, 0));
  EXPECT_EQ(trace.logits.at(0, 1), trace.logits.at(1, 1));
}

TEST(Forward, DeterministicAcrossCalls) {
  auto m = build_model(small_config(), 3);
  auto batch = make_batch({{2, 5, 9}, {2, 4}}, 5);
  auto a = forward(m, batch).logits;
  auto b = forward(m, batch).logits;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    EXPECT_EQ(std::bit_cast<std::uint64_t>(a[i]), std::bit_cast<std::uint64_t>(b[i]));
  }
}

TEST(Forward, PaddingMaskedPositionsDoNotChangeLogits) {
  auto m = build_model(small_config(), 5);
  auto a = make_batch({{2, 5, 9}}, 6);
  auto b = a;
  b.ids[3] = 11;  // padded positions carry different ids
  b.ids[5] = 17;
  auto la = forward(m, a).logits;
  auto lb = forward(m, b).logits;
  for (std::size_t i = 0; i < la.numel(); ++i) EXPECT_EQ(la[i], lb[i]);
}

TEST(Forward, RejectsBadInput) {
  auto m = build_model(small_config(), 5);
  EXPECT_THROW(forward(m, make_batch({{2, 25}}, 3)), InputError);
  EXPECT_THROW(forward(m, make_batch({{2, 3}}, 17)), InputError);
}

// Straight-line reimplementation for one token; with a single visible key,
// attention returns the value row unchanged.
std::vector<double> reference_single_token_logits(const Model& m, std::int32_t token) {
  const auto& c = m.config();
  const std::size_t d = c.hidden_dim, f = c.ffn_width();
  auto P = [&](const std::string& n) { return m.param(n).data(); };
  auto affine = [&](const std::vector<double>& x, const std::string& w, const std::string& b, std::size_t out_dim) {
    std::vector<double> y(out_dim);
    const auto W = P(w), B = P(b);
    for (std::size_t o = 0; o < out_dim; ++o) {
      double acc = B[o];
      for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * W[i * out_dim + o];
      y[o] = acc;
    }
    return y;
  };
  auto norm = [&](std::vector<double> x, const std::string& prefix) {
    double mu = 0, var = 0;
    for (double v : x) mu += v;
    mu /= static_cast<double>(x.size());
    for (double v : x) var += (v - mu) * (v - mu);
    var /= static_cast<double>(x.size());
    const auto g = P(prefix + ".gain"), b = P(prefix + ".bias");
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = (x[i] - mu) / std::sqrt(var + 1e-5) * g[i] + b[i];
    return x;
  };
  std::vector<double> x(d);
  for (std::size_t i = 0; i < d; ++i) {
    x[i] = P("embeddings.token")[static_cast<std::size_t>(token) * d + i] + P("embeddings.position")[i];
  }
  x = norm(x, "embeddings.ln");
  for (std::size_t b = 0; b < c.num_layers; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    auto v = affine(x, p + "attn.value.weight", p + "attn.value.bias", d);
    auto o = affine(v, p + "attn.output.weight", p + "attn.output.bias", d);
    for (std::size_t i = 0; i < d; ++i) o[i] += x[i];
    auto h = norm(o, p + "ln1");
    auto u = affine(h, p + "ffn.in.weight", p + "ffn.in.bias", f);
    for (auto& z : u) z = z * 0.5 * (1.0 + std::erf(z / std::sqrt(2.0)));
    auto w = affine(u, p + "ffn.out.weight", p + "ffn.out.bias", d);
    for (std::size_t i = 0; i < d; ++i) w[i] += h[i];
    x = norm(w, p + "ln2");
  }
  auto pooled = affine(x, "pooler.weight", "pooler.bias", d);
  for (auto& z : pooled) z = std::tanh(z);
  return affine(pooled, "head.weight", "head.bias", c.num_outputs);
}

TEST(Forward, SingleTokenMatchesStraightLineOracle) {
  auto m = build_model(small_config(2, 2, 8), 99);
  // Larger weights than the 0.02 init so the comparison is not dominated by biases.
  for (auto& p : m.tensors()) {
    Tensor t = p;
    for (auto& v : t.mutable_data()) v *= 25.0;
  }
  for (std::int32_t token : {0, 4, 19}) {
    auto trace = forward(m, make_batch({{token}}, 1));
    auto ref = reference_single_token_logits(m, token);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(trace.logits[i], ref[i], 1e-12);
  }
}

TEST(Forward, ParameterGradientsMatchFiniteDifferences) {
  auto m = build_model(small_config(2, 2, 8), 12);
  for (auto& p : m.tensors()) {
    Tensor t = p;
    for (auto& v : t.mutable_data()) v *= 5.0;
  }
  auto batch = make_batch({{2, 5, 9, 3}, {2, 7, 1}}, 4);
  auto loss = [&] { return mean(square(forward(m, batch).logits)); };
  EXPECT_LT(finite_diff_check_params(loss, m.tensors(), 1e-5), 1e-4);
}

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() / ("kdwb_ckpt_" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir_);
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }
  std::filesystem::path dir_;
};

TEST_F(CheckpointTest, RoundTripPreservesLogits) {
  auto m = build_model(small_config(3), 8);
  auto path = dir_ / "m.kdwb";
  save_checkpoint(m, path);
  auto loaded = load_checkpoint(path);
  EXPECT_EQ(loaded.config(), m.config());
  auto batch = make_batch({{2, 5, 9, 3}, {2, 7}}, 5);
  auto a = forward(m, batch).logits;
  auto b = forward(loaded, batch).logits;
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_LE(std::abs(a[i] - b[i]), 1e-5 * std::abs(a[i]) + 1e-12);
}

TEST_F(CheckpointTest, HeaderCountMatchesRecomputedCount) {
  auto m = build_model(small_config(3), 8);
  auto path = dir_ / "m3.kdwb";
  save_checkpoint(m, path);
  auto header = read_checkpoint_header(path);
  auto loaded = load_checkpoint(path);
  EXPECT_EQ(header.at("param_count").get<std::uint64_t>(), param_count(loaded.config()));
  EXPECT_EQ(loaded.scalar_count(), param_count(loaded.config()));
}

TEST_F(CheckpointTest, CorruptionDetected) {
  auto m = build_model(small_config(), 8);
  const std::string bytes = serialize_checkpoint(m);

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad_magic), FormatError);

  std::string bad_version = bytes;
  bad_version[4] = 2;
  EXPECT_THROW(deserialize_checkpoint(bad_version), FormatError);

  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), FormatError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, 20)), FormatError);

  // Header claiming a different geometry than the manifest it carries.
  auto header = checkpoint_header(m);
  header["config"]["num_layers"] = 3;
  const std::string h = header.dump();
  std::string forged(bytes.begin(), bytes.begin() + 8);
  detail::put_u32(forged, static_cast<std::uint32_t>(h.size()));
  const std::uint32_t old_len = detail::get_u32(bytes, 8);
  forged += h + bytes.substr(12 + old_len);
  EXPECT_THROW(deserialize_checkpoint(forged), FormatError);
}

TEST_F(CheckpointTest, LayoutIsBitExact) {
  auto m = build_model(small_config(1, 1, 4), 8);
  const std::string bytes = serialize_checkpoint(m);
  EXPECT_EQ(bytes.substr(0, 4), "KDWB");
  EXPECT_EQ(detail::get_u32(bytes, 4), 1u);
  const std::uint32_t len = detail::get_u32(bytes, 8);
  EXPECT_EQ(bytes.size(), 12 + len + 4 * param_count(m.config()));
  // First payload value is the first token-embedding entry as little-endian f32.
  const float first = std::bit_cast<float>(detail::get_u32(bytes, 12 + len));
  EXPECT_EQ(first, static_cast<float>(m.param("embeddings.token")[0]));
}

}  // namespace
}  // namespace kdwb
