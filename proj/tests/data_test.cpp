#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <sstream>

#include "kdwb/data.hpp"

namespace kdwb {
namespace {

Dataset corpus(std::initializer_list<const char*> texts) {
  Dataset ds;
  int i = 0;
  for (const char* t : texts) ds.examples.push_back({std::to_string(i++), t, std::nullopt, 0});
  return ds;
}

TEST(Tokenize, LowercasesAndSplitsPunctuation) {
  EXPECT_EQ(tokenize("Hello, World!  ok"), (std::vector<std::string>{"hello", ",", "world", "!", "ok"}));
  EXPECT_TRUE(tokenize("   ").empty());
}

TEST(BuildVocab, FrequencyThenLexicographicOrder) {
  auto v = build_vocab(corpus({"a b", "a"}), 1);
  EXPECT_EQ(v.size(), 6u);
  EXPECT_EQ(v.id("a"), 4);
  EXPECT_EQ(v.id("b"), 5);
  auto tie = build_vocab(corpus({"zeta alpha", "mid"}), 1);
  EXPECT_EQ(tie.regular_tokens(), (std::vector<std::string>{"alpha", "mid", "zeta"}));
}

TEST(BuildVocab, HighMinFreqLeavesSpecials) {
  auto v = build_vocab(corpus({"a b", "a"}), 5);
  EXPECT_EQ(v.size(), Vocab::kNumSpecials);
}

TEST(BuildVocab, IdempotentUnderDuplication) {
  auto once = build_vocab(corpus({"x y z", "y z", "z"}), 1);
  auto twice = build_vocab(corpus({"x y z", "y z", "z", "x y z", "y z", "z"}), 1);
  EXPECT_EQ(once, twice);
}

TEST(BuildVocab, Errors) {
  EXPECT_THROW(build_vocab(Dataset{}, 1), InputError);
  EXPECT_THROW(build_vocab(corpus({"a"}), 0), ConfigError);
}

TEST(Vocab, SaveLoadRoundTrip) {
  auto v = build_vocab(corpus({"alpha beta", "beta"}), 1);
  auto path = std::filesystem::temp_directory_path() / "kdwb_vocab_test.txt";
  v.save(path);
  EXPECT_EQ(Vocab::load(path), v);
  std::filesystem::remove(path);
}

TEST(Encode, EmptyText) {
  Vocab v;
  auto row = encode(v, {"0", "", std::nullopt, 0}, 5);
  EXPECT_EQ(row.ids, (std::vector<std::int32_t>{Vocab::kCls, 0, 0, 0, 0}));
  EXPECT_EQ(row.mask, (std::vector<std::uint8_t>{1, 0, 0, 0, 0}));
}

TEST(Encode, PairHasExactlyOneSep) {
  auto v = build_vocab(corpus({"a b c d"}), 1);
  auto row = encode(v, {"0", "a b", std::string("c d"), 0}, 10);
  EXPECT_EQ(std::count(row.ids.begin(), row.ids.end(), Vocab::kSep), 1);
  EXPECT_EQ(row.ids[0], Vocab::kCls);
  EXPECT_EQ(std::count(row.mask.begin(), row.mask.end(), 1), 6);
}

TEST(Encode, OovMapsToUnkAndLengthBounded) {
  auto v = build_vocab(corpus({"known"}), 1);
  for (std::size_t max_len : {3u, 4u, 7u, 20u}) {
    auto row = encode(v, {"0", "known unknown words here", std::string("more words than fit"), 0}, max_len);
    EXPECT_EQ(row.ids.size(), max_len);
    EXPECT_EQ(row.mask.size(), max_len);
    for (auto id : row.ids) EXPECT_LT(static_cast<std::size_t>(id), v.size());
  }
  auto row = encode(v, {"0", "known unknown", std::nullopt, 0}, 5);
  EXPECT_EQ(row.ids[2], Vocab::kUnk);
  EXPECT_THROW(encode(v, {"0", "x", std::nullopt, 0}, 2), ConfigError);
}

TEST(Encode, IdsNeverExceedVocabProperty) {
  auto ds = gen_synthetic(SyntheticKind::three_class_nli, 200, 3);
  auto v = build_vocab(ds, 3);
  for (std::size_t max_len = 3; max_len < 24; ++max_len) {
    for (const auto& ex : ds.examples) {
      for (auto id : encode(v, ex, max_len).ids) ASSERT_LT(static_cast<std::size_t>(id), v.size());
    }
  }
}

const TaskSpec kBinaryPair{"t", InputKind::sentence_pair, OutputKind::binary, MetricKind::accuracy};
const TaskSpec kRegression{"s", InputKind::sentence_pair, OutputKind::regression, MetricKind::pearson_spearman};

TEST(Tsv, TwoRowBinaryFile) {
  std::istringstream in("sentence1\tsentence2\tlabel\nhi there\tho\t1\nfoo\tbar\t0\n");
  auto ds = parse_tsv(in, kBinaryPair);
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.examples[0].text_b.value(), "ho");
  EXPECT_EQ(ds.examples[1].label, 0.0);
}

TEST(Tsv, OutOfArityLabelReportsLine) {
  std::istringstream in("sentence1\tsentence2\tlabel\nhi\tho\t1\nfoo\tbar\t2\n");
  try {
    parse_tsv(in, kBinaryPair, Split::train, "f.tsv");
    FAIL() << "expected InputError";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("f.tsv:3"), std::string::npos) << e.what();
  }
}

TEST(Tsv, RegressionLabelParsedAsReal) {
  std::istringstream in("label\tsentence2\tsentence1\n3.8\tb\ta\n");
  auto ds = parse_tsv(in, kRegression);
  EXPECT_DOUBLE_EQ(ds.examples[0].label, 3.8);
  EXPECT_EQ(ds.examples[0].text_a, "a");
}

TEST(Tsv, MissingColumnAndBadLabel) {
  std::istringstream no_b("sentence1\tlabel\nx\t1\n");
  EXPECT_THROW(parse_tsv(no_b, kBinaryPair), InputError);
  std::istringstream bad("sentence1\tsentence2\tlabel\nx\ty\tpositive\n");
  EXPECT_THROW(parse_tsv(bad, kBinaryPair), InputError);
  std::istringstream empty("");
  EXPECT_THROW(parse_tsv(empty, kBinaryPair), InputError);
}

TEST(Synthetic, DeterministicPerSeed) {
  auto a = gen_synthetic(SyntheticKind::separable_pair, 100, 7);
  auto b = gen_synthetic(SyntheticKind::separable_pair, 100, 7);
  auto c = gen_synthetic(SyntheticKind::separable_pair, 100, 8);
  ASSERT_EQ(a.size(), b.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.examples[i].text_a, b.examples[i].text_a);
    EXPECT_EQ(a.examples[i].text_b, b.examples[i].text_b);
    EXPECT_EQ(a.examples[i].label, b.examples[i].label);
    any_diff |= a.examples[i].text_a != c.examples[i].text_a;
  }
  EXPECT_TRUE(any_diff);
  EXPECT_THROW(gen_synthetic(SyntheticKind::separable_pair, 9, 1), ConfigError);
}

TEST(Synthetic, LabelBalanceWithinTenPercent) {
  for (auto kind : {SyntheticKind::separable_pair, SyntheticKind::three_class_nli}) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      for (std::size_t n : {10u, 101u, 2000u}) {
        auto ds = gen_synthetic(kind, n, seed);
        std::map<int, std::size_t> counts;
        for (const auto& ex : ds.examples) ++counts[static_cast<int>(ex.label)];
        const double classes = kind == SyntheticKind::separable_pair ? 2.0 : 3.0;
        for (auto [label, count] : counts) {
          EXPECT_NEAR(static_cast<double>(count) / static_cast<double>(n), 1.0 / classes, 0.10);
        }
      }
    }
  }
}

TEST(Synthetic, ThreeClassLabelsOnly) {
  auto ds = gen_synthetic(SyntheticKind::three_class_nli, 300, 5);
  std::set<double> labels;
  for (const auto& ex : ds.examples) labels.insert(ex.label);
  EXPECT_EQ(labels, (std::set<double>{0.0, 1.0, 2.0}));
}

TEST(Synthetic, DocumentedRuleIsExact) {
  for (auto kind : {SyntheticKind::separable_pair, SyntheticKind::three_class_nli,
                    SyntheticKind::similarity_regression}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      auto ds = gen_synthetic(kind, 500, seed);
      std::set<std::string> ids;
      for (const auto& ex : ds.examples) {
        ASSERT_EQ(synthetic_rule(kind, ex), ex.label) << to_string(kind) << ": " << ex.text_a << " | " << *ex.text_b;
        ids.insert(ex.id);
      }
      EXPECT_EQ(ids.size(), ds.size());
    }
  }
}

TEST(Batching, SizesAndOrder) {
  auto ds = gen_synthetic(SyntheticKind::separable_pair, 25, 1);
  auto v = build_vocab(ds, 1);
  auto enc = encode_dataset(v, ds, 16);
  auto batches = batch_iter(enc, 12);
  ASSERT_EQ(batches.size(), 3u);
  EXPECT_EQ(batches[0].tokens.batch, 12u);
  EXPECT_EQ(batches[1].tokens.batch, 12u);
  EXPECT_EQ(batches[2].tokens.batch, 1u);
  std::size_t expect = 0;
  for (const auto& b : batches) {
    for (auto i : b.indices) EXPECT_EQ(i, expect++);
  }
  EXPECT_THROW(batch_iter(enc, 0), ConfigError);
}

TEST(Batching, ShuffleDeterministicAndCoversEpoch) {
  auto ds = gen_synthetic(SyntheticKind::separable_pair, 57, 1);
  auto enc = encode_dataset(build_vocab(ds, 1), ds, 16);
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    for (std::size_t bs : {1u, 5u, 12u, 57u, 100u}) {
      auto a = batch_iter(enc, bs, seed);
      auto b = batch_iter(enc, bs, seed);
      std::vector<std::size_t> seen;
      for (std::size_t k = 0; k < a.size(); ++k) {
        EXPECT_EQ(a[k].indices, b[k].indices);
        seen.insert(seen.end(), a[k].indices.begin(), a[k].indices.end());
      }
      std::sort(seen.begin(), seen.end());
      std::vector<std::size_t> all(57);
      std::iota(all.begin(), all.end(), 0);
      EXPECT_EQ(seen, all);
    }
  }
}

}  // namespace
}  // namespace kdwb
