#pragma once

// Task descriptions, datasets, tokenization, GLUE-shaped TSV loading,
// synthetic stand-in tasks, and batching.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdwb/error.hpp"
#include "kdwb/model.hpp"

namespace kdwb {

enum class InputKind { single_sentence, sentence_pair };
enum class OutputKind { binary, three_class, regression };
enum class MetricKind { accuracy, acc_f1_avg, matthews, pearson_spearman };

inline std::string to_string(MetricKind m) {
  switch (m) {
    case MetricKind::accuracy: return "accuracy";
    case MetricKind::acc_f1_avg: return "acc_f1_avg";
    case MetricKind::matthews: return "matthews";
    case MetricKind::pearson_spearman: return "pearson_spearman";
  }
  return "?";
}

inline MetricKind metric_from_string(const std::string& s) {
  if (s == "accuracy") return MetricKind::accuracy;
  if (s == "acc_f1_avg") return MetricKind::acc_f1_avg;
  if (s == "matthews") return MetricKind::matthews;
  if (s == "pearson_spearman") return MetricKind::pearson_spearman;
  throw ConfigError("unknown metric '" + s + "'");
}

inline std::string to_string(OutputKind o) {
  switch (o) {
    case OutputKind::binary: return "binary";
    case OutputKind::three_class: return "three_class";
    case OutputKind::regression: return "regression";
  }
  return "?";
}

inline OutputKind output_from_string(const std::string& s) {
  if (s == "binary") return OutputKind::binary;
  if (s == "three_class") return OutputKind::three_class;
  if (s == "regression") return OutputKind::regression;
  throw ConfigError("unknown output kind '" + s + "'");
}

inline std::string to_string(InputKind k) { return k == InputKind::single_sentence ? "single_sentence" : "sentence_pair"; }

inline InputKind input_from_string(const std::string& s) {
  if (s == "single_sentence") return InputKind::single_sentence;
  if (s == "sentence_pair") return InputKind::sentence_pair;
  throw ConfigError("unknown input kind '" + s + "'");
}

struct TaskSpec {
  std::string name;
  InputKind kind = InputKind::sentence_pair;
  OutputKind output = OutputKind::binary;
  MetricKind metric = MetricKind::accuracy;

  std::size_t num_outputs() const {
    switch (output) {
      case OutputKind::binary: return 2;
      case OutputKind::three_class: return 3;
      case OutputKind::regression: return 1;
    }
    return 0;
  }
  TaskKind task_kind() const {
    return output == OutputKind::regression ? TaskKind::regression : TaskKind::classification;
  }

  void validate() const {
    if ((output == OutputKind::regression) != (metric == MetricKind::pearson_spearman)) {
      throw ConfigError("task '" + name + "': regression output must pair with pearson_spearman and vice versa");
    }
  }
};

inline void to_json(nlohmann::json& j, const TaskSpec& t) {
  j = {{"name", t.name}, {"kind", to_string(t.kind)}, {"output", to_string(t.output)}, {"metric", to_string(t.metric)}};
}

inline void from_json(const nlohmann::json& j, TaskSpec& t) {
  t.name = j.at("name").get<std::string>();
  t.kind = input_from_string(j.at("kind").get<std::string>());
  t.output = output_from_string(j.at("output").get<std::string>());
  t.metric = metric_from_string(j.at("metric").get<std::string>());
  t.validate();
}

// The eight GLUE tasks (metric per task follows the usual GLUE reporting:
// MCC for CoLA, Pearson/Spearman for STS-B, accuracy/F1 average for MRPC and
// QQP, accuracy elsewhere) plus the three synthetic stand-ins.
inline std::optional<TaskSpec> task_preset(const std::string& name) {
  using IK = InputKind;
  using OK = OutputKind;
  using MK = MetricKind;
  static const std::map<std::string, TaskSpec> presets = {
      {"CoLA", {"CoLA", IK::single_sentence, OK::binary, MK::matthews}},
      {"SST2", {"SST2", IK::single_sentence, OK::binary, MK::accuracy}},
      {"MRPC", {"MRPC", IK::sentence_pair, OK::binary, MK::acc_f1_avg}},
      {"QQP", {"QQP", IK::sentence_pair, OK::binary, MK::acc_f1_avg}},
      {"STSB", {"STSB", IK::sentence_pair, OK::regression, MK::pearson_spearman}},
      {"MNLI", {"MNLI", IK::sentence_pair, OK::three_class, MK::accuracy}},
      {"QNLI", {"QNLI", IK::sentence_pair, OK::binary, MK::accuracy}},
      {"RTE", {"RTE", IK::sentence_pair, OK::binary, MK::accuracy}},
      {"separable_pair", {"separable_pair", IK::sentence_pair, OK::binary, MK::accuracy}},
      {"three_class_nli", {"three_class_nli", IK::sentence_pair, OK::three_class, MK::accuracy}},
      {"similarity_regression", {"similarity_regression", IK::sentence_pair, OK::regression, MK::pearson_spearman}},
  };
  auto it = presets.find(name);
  if (it == presets.end()) return std::nullopt;
  return it->second;
}

struct Example {
  std::string id;
  std::string text_a;
  std::optional<std::string> text_b;
  double label = 0.0;  // class index for classification tasks
};

enum class Split { train, dev };

struct Dataset {
  std::vector<Example> examples;
  Split split = Split::train;

  std::size_t size() const { return examples.size(); }
};

// ---------------------------------------------------------------------------
// Tokenization and vocabulary
// ---------------------------------------------------------------------------

// Lowercased tokens split on whitespace; each punctuation character is its
// own token.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto uc = static_cast<unsigned char>(ch);
    if (std::isspace(uc)) {
      flush();
    } else if (std::ispunct(uc)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(uc)));
    }
  }
  flush();
  return out;
}

class Vocab {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kUnk = 1;
  static constexpr std::int32_t kCls = 2;
  static constexpr std::int32_t kSep = 3;
  static constexpr std::size_t kNumSpecials = 4;

  Vocab() : tokens_{"[PAD]", "[UNK]", "[CLS]", "[SEP]"} {
    for (std::size_t i = 0; i < tokens_.size(); ++i) ids_[tokens_[i]] = static_cast<std::int32_t>(i);
  }

  explicit Vocab(const std::vector<std::string>& regular_tokens) : Vocab() {
    for (const auto& t : regular_tokens) {
      if (ids_.count(t)) throw InputError("duplicate vocabulary entry '" + t + "'");
      ids_[t] = static_cast<std::int32_t>(tokens_.size());
      tokens_.push_back(t);
    }
  }

  std::size_t size() const { return tokens_.size(); }
  std::int32_t id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& token) const { return ids_.count(token) != 0; }
  const std::string& token(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::vector<std::string> regular_tokens() const {
    return {tokens_.begin() + kNumSpecials, tokens_.end()};
  }

  bool operator==(const Vocab& o) const { return tokens_ == o.tokens_; }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw InputError("cannot write vocabulary '" + path.string() + "'");
    for (const auto& t : tokens_) out << t << '\n';
  }

  static Vocab load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open vocabulary '" + path.string() + "'");
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    const Vocab base;
    if (lines.size() < kNumSpecials || !std::equal(base.tokens_.begin(), base.tokens_.end(), lines.begin())) {
      throw FormatError("vocabulary '" + path.string() + "' does not start with the special tokens");
    }
    return Vocab(std::vector<std::string>(lines.begin() + kNumSpecials, lines.end()));
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> ids_;
};

// Tokens with frequency >= min_freq; ids ordered by frequency descending,
// then lexicographically.
inline Vocab build_vocab(const Dataset& corpus, std::size_t min_freq = 1) {
  if (min_freq < 1) throw ConfigError("build_vocab: min_freq must be >= 1");
  if (corpus.examples.empty()) throw InputError("build_vocab: empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& ex : corpus.examples) {
    for (auto& t : tokenize(ex.text_a)) ++counts[t];
    if (ex.text_b) {
      for (auto& t : tokenize(*ex.text_b)) ++counts[t];
    }
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [tok, n] : counts) {
    if (n >= min_freq) kept.emplace_back(tok, n);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens;
  for (auto& [tok, n] : kept) tokens.push_back(tok);
  return Vocab(tokens);
}

struct EncodedRow {
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> mask;
};

// [CLS] a ([SEP] b), truncated to max_len and padded. When a pair does not
// fit, text_a keeps at least half the budget.
inline EncodedRow encode(const Vocab& vocab, const Example& ex, std::size_t max_len) {
  if (max_len < 3) throw ConfigError("encode: max_len must be >= 3");
  std::vector<std::int32_t> a, b;
  for (auto& t : tokenize(ex.text_a)) a.push_back(vocab.id(t));
  if (ex.text_b) {
    for (auto& t : tokenize(*ex.text_b)) b.push_back(vocab.id(t));
  }
  EncodedRow row;
  row.ids.push_back(Vocab::kCls);
  if (!ex.text_b) {
    for (std::size_t i = 0; i < a.size() && row.ids.size() < max_len; ++i) row.ids.push_back(a[i]);
  } else {
    const std::size_t budget = max_len - 2;  // cls + sep
    std::size_t keep_a = a.size(), keep_b = b.size();
    while (keep_a + keep_b > budget) {
      if (keep_a >= keep_b) {
        --keep_a;
      } else {
        --keep_b;
      }
    }
    row.ids.insert(row.ids.end(), a.begin(), a.begin() + static_cast<std::ptrdiff_t>(keep_a));
    row.ids.push_back(Vocab::kSep);
    row.ids.insert(row.ids.end(), b.begin(), b.begin() + static_cast<std::ptrdiff_t>(keep_b));
  }
  row.mask.assign(row.ids.size(), 1);
  row.ids.resize(max_len, Vocab::kPad);
  row.mask.resize(max_len, 0);
  return row;
}

// ---------------------------------------------------------------------------
// TSV loading
// ---------------------------------------------------------------------------

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == '\t') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

// Parses a headered TSV. Columns are found by name: text in "sentence1" (or
// "sentence"), optional "sentence2", target in "label"; an optional "id" or
// "idx" column supplies ids, else the 1-based data row number is used.
inline Dataset parse_tsv(std::istream& in, const TaskSpec& spec, Split split = Split::train,
                         const std::string& source = "<tsv>") {
  std::string line;
  if (!std::getline(in, line)) throw InputError(source + ": missing header row");
  const auto header = split_tabs(line);
  auto col = [&](std::initializer_list<const char*> names) -> std::optional<std::size_t> {
    for (const char* n : names) {
      auto it = std::find(header.begin(), header.end(), n);
      if (it != header.end()) return static_cast<std::size_t>(it - header.begin());
    }
    return std::nullopt;
  };
  const auto c_a = col({"sentence1", "sentence", "question1", "question"});
  const auto c_b = col({"sentence2", "question2"});
  const auto c_label = col({"label"});
  const auto c_id = col({"id", "idx"});
  if (!c_a) throw InputError(source + ":1: missing column sentence1");
  if (!c_label) throw InputError(source + ":1: missing column label");
  if (spec.kind == InputKind::sentence_pair && !c_b) throw InputError(source + ":1: missing column sentence2");

  Dataset ds;
  ds.split = split;
  std::set<std::string> seen;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_tabs(line);
    const auto where = source + ":" + std::to_string(line_no) + ": ";
    auto cell = [&](std::size_t c) -> const std::string& {
      if (c >= cells.size()) throw InputError(where + "row has " + std::to_string(cells.size()) + " columns");
      return cells[c];
    };
    Example ex;
    ex.id = c_id ? cell(*c_id) : std::to_string(ds.examples.size() + 1);
    ex.text_a = cell(*c_a);
    if (spec.kind == InputKind::sentence_pair) ex.text_b = cell(*c_b);
    const std::string& raw = cell(*c_label);
    try {
      std::size_t used = 0;
      if (spec.output == OutputKind::regression) {
        ex.label = std::stod(raw, &used);
        if (!std::isfinite(ex.label)) throw std::invalid_argument("non-finite");
      } else {
        const long v = std::stol(raw, &used);
        if (v < 0 || static_cast<std::size_t>(v) >= spec.num_outputs()) {
          throw InputError(where + "label " + raw + " outside arity " + std::to_string(spec.num_outputs()));
        }
        ex.label = static_cast<double>(v);
      }
      if (used != raw.size()) throw std::invalid_argument("trailing characters");
    } catch (const InputError&) {
      throw;
    } catch (const std::exception&) {
      throw InputError(where + "unparsable label '" + raw + "'");
    }
    if (!seen.insert(ex.id).second) throw InputError(where + "duplicate id '" + ex.id + "'");
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

inline Dataset load_tsv(const std::filesystem::path& path, const TaskSpec& spec, Split split = Split::train) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open data file '" + path.string() + "'");
  return parse_tsv(in, spec, split, path.string());
}

inline void write_tsv(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  const bool pair = !ds.examples.empty() && ds.examples.front().text_b.has_value();
  out << "id\tsentence1" << (pair ? "\tsentence2" : "") << "\tlabel\n";
  for (const auto& ex : ds.examples) {
    out << ex.id << '\t' << ex.text_a;
    if (pair) out << '\t' << ex.text_b.value_or("");
    std::ostringstream label;
    label.precision(17);
    label << ex.label;
    out << '\t' << label.str() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Synthetic tasks (generator rules in docs/synthetic_tasks.md)
// ---------------------------------------------------------------------------

enum class SyntheticKind { separable_pair, three_class_nli, similarity_regression };

inline SyntheticKind synthetic_from_string(const std::string& s) {
  if (s == "separable_pair") return SyntheticKind::separable_pair;
  if (s == "three_class_nli") return SyntheticKind::three_class_nli;
  if (s == "similarity_regression") return SyntheticKind::similarity_regression;
  throw ConfigError("unknown synthetic task '" + s + "'");
}

inline std::string to_string(SyntheticKind k) {
  switch (k) {
    case SyntheticKind::separable_pair: return "separable_pair";
    case SyntheticKind::three_class_nli: return "three_class_nli";
    case SyntheticKind::similarity_regression: return "similarity_regression";
  }
  return "?";
}

namespace synthetic {

inline const std::vector<std::string>& topics() {
  static const std::vector<std::string> t = {"river", "engine", "garden", "violin",
                                             "planet", "market", "candle", "harbor"};
  return t;
}

inline const std::vector<std::string>& fillers() {
  static const std::vector<std::string> f = {"the", "a",     "old",   "new",  "small", "bright", "quiet",
                                             "we",  "saw",   "near",  "with", "some",  "over",   "under",
                                             "they", "found", "every", "day",  "many",  "green"};
  return f;
}

// Topic-like words that only ever appear in the second sentence of a
// separable_pair negative.
inline const std::vector<std::string>& distractors() {
  static const std::vector<std::string> d = {"copper", "meadow", "lantern", "signal",
                                             "orchard", "canyon", "ribbon", "anchor"};
  return d;
}

inline constexpr const char* kNegation = "not";
inline constexpr std::size_t kSimilaritySlots = 4;

}  // namespace synthetic

// Deterministic in (kind, n, seed). Labels follow documented surface rules:
//  separable_pair:        the first sentence carries one topic word; label 1
//                         iff the second sentence carries the same topic word.
//                         Negatives draw the second word from a disjoint
//                         distractor list, so the classes are separable by
//                         surface vocabulary alone.
//  three_class_nli:       label 1 (neutral) iff topic words differ; else 2
//                         (contradiction) iff the hypothesis contains "not";
//                         else 0 (entailment).
//  similarity_regression: each side carries 4 distinct topic words; label =
//                         5 * |shared topic words| / 4.
// Class labels are assigned round-robin before shuffling, so class shares
// differ from uniform by at most one example.
inline Dataset gen_synthetic(SyntheticKind kind, std::size_t n, std::uint64_t seed) {
  if (n < 10) throw ConfigError("gen_synthetic: n must be >= 10");
  std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(kind) + 1)));
  auto pick = [&](std::size_t bound) { return static_cast<std::size_t>(rng() % bound); };
  const auto& topics = synthetic::topics();
  const auto& fillers = synthetic::fillers();

  // Topic words are placed at a random position among 2-5 fillers.
  auto sentence = [&](const std::vector<std::string>& keywords, bool negate) {
    std::vector<std::string> words;
    const std::size_t n_fill = 2 + pick(4);
    for (std::size_t i = 0; i < n_fill; ++i) words.push_back(fillers[pick(fillers.size())]);
    for (const auto& k : keywords) words.insert(words.begin() + static_cast<std::ptrdiff_t>(pick(words.size() + 1)), k);
    if (negate) words.insert(words.begin() + static_cast<std::ptrdiff_t>(pick(words.size() + 1)), synthetic::kNegation);
    std::string s;
    for (const auto& w : words) s += (s.empty() ? "" : " ") + w;
    return s;
  };

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[pick(i)]);

  Dataset ds;
  for (std::size_t i = 0; i < n; ++i) {
    Example ex;
    ex.id = to_string(kind) + "-" + std::to_string(i);
    const std::size_t slot = order[i];
    switch (kind) {
      case SyntheticKind::separable_pair: {
        const int label = static_cast<int>(slot % 2);
        const std::size_t ta = pick(topics.size());
        const auto& distractors = synthetic::distractors();
        ex.text_a = sentence({topics[ta]}, false);
        ex.text_b = sentence({label == 1 ? topics[ta] : distractors[pick(distractors.size())]}, false);
        ex.label = label;
        break;
      }
      case SyntheticKind::three_class_nli: {
        const int label = static_cast<int>(slot % 3);
        const std::size_t ta = pick(topics.size());
        std::size_t tb = ta;
        if (label == 1) tb = (ta + 1 + pick(topics.size() - 1)) % topics.size();
        const bool negate = label == 2 || (label == 1 && pick(2) == 0);
        ex.text_a = sentence({topics[ta]}, false);
        ex.text_b = sentence({topics[tb]}, negate);
        ex.label = label;
        break;
      }
      case SyntheticKind::similarity_regression: {
        const std::size_t shared = slot % (synthetic::kSimilaritySlots + 1);
        std::vector<std::size_t> perm(topics.size());
        for (std::size_t t = 0; t < perm.size(); ++t) perm[t] = t;
        for (std::size_t t = perm.size(); t > 1; --t) std::swap(perm[t - 1], perm[pick(t)]);
        // a uses perm[0..4); b reuses the first `shared` of them and fills the
        // rest from topics outside a.
        std::vector<std::string> a, b;
        for (std::size_t t = 0; t < synthetic::kSimilaritySlots; ++t) a.push_back(topics[perm[t]]);
        for (std::size_t t = 0; t < shared; ++t) b.push_back(topics[perm[t]]);
        for (std::size_t t = 0; b.size() < synthetic::kSimilaritySlots; ++t) {
          b.push_back(topics[perm[synthetic::kSimilaritySlots + t]]);
        }
        ex.text_a = sentence(a, false);
        ex.text_b = sentence(b, false);
        ex.label = 5.0 * static_cast<double>(shared) / static_cast<double>(synthetic::kSimilaritySlots);
        break;
      }
    }
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

// The documented decision rule of each generator, applied to surface text.
inline double synthetic_rule(SyntheticKind kind, const Example& ex) {
  const auto& topics = synthetic::topics();
  auto topic_set = [&](const std::string& text) {
    std::set<std::string> found;
    for (auto& t : tokenize(text)) {
      if (std::find(topics.begin(), topics.end(), t) != topics.end()) found.insert(t);
    }
    return found;
  };
  const auto a = topic_set(ex.text_a);
  const auto b = topic_set(ex.text_b.value_or(""));
  std::size_t shared = 0;
  for (const auto& t : a) shared += b.count(t);
  switch (kind) {
    case SyntheticKind::separable_pair:
      return a == b ? 1.0 : 0.0;
    case SyntheticKind::three_class_nli: {
      if (a != b) return 1.0;
      const auto toks = tokenize(ex.text_b.value_or(""));
      return std::find(toks.begin(), toks.end(), synthetic::kNegation) != toks.end() ? 2.0 : 0.0;
    }
    case SyntheticKind::similarity_regression:
      return 5.0 * static_cast<double>(shared) / static_cast<double>(synthetic::kSimilaritySlots);
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

struct EncodedDataset {
  std::vector<EncodedRow> rows;
  std::vector<double> labels;
  std::vector<std::string> ids;
  std::size_t max_len = 0;

  std::size_t size() const { return rows.size(); }
};

inline EncodedDataset encode_dataset(const Vocab& vocab, const Dataset& ds, std::size_t max_len) {
  EncodedDataset out;
  out.max_len = max_len;
  for (const auto& ex : ds.examples) {
    out.rows.push_back(encode(vocab, ex, max_len));
    out.labels.push_back(ex.label);
    out.ids.push_back(ex.id);
  }
  return out;
}

struct Batch {
  TokenBatch tokens;
  std::vector<double> labels;
  std::vector<std::size_t> indices;  // positions in the source dataset
};

inline Batch make_batch(const EncodedDataset& ds, std::span<const std::size_t> indices) {
  Batch b;
  b.tokens.batch = indices.size();
  b.tokens.seq_len = ds.max_len;
  b.indices.assign(indices.begin(), indices.end());
  for (std::size_t i : indices) {
    const auto& row = ds.rows.at(i);
    b.tokens.ids.insert(b.tokens.ids.end(), row.ids.begin(), row.ids.end());
    b.tokens.mask.insert(b.tokens.mask.end(), row.mask.begin(), row.mask.end());
    b.labels.push_back(ds.labels[i]);
  }
  return b;
}

// Deterministic index permutation from a seed (portable Fisher-Yates).
inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::optional<std::uint64_t> seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (seed) {
    std::mt19937_64 rng(*seed);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  }
  return order;
}

// One epoch of batches covering every example once; the last batch may be
// partial. Without a seed, input order is preserved.
inline std::vector<Batch> batch_iter(const EncodedDataset& ds, std::size_t batch_size,
                                     std::optional<std::uint64_t> shuffle_seed = std::nullopt) {
  if (batch_size < 1) throw ConfigError("batch_iter: batch_size must be >= 1");
  const auto order = shuffled_indices(ds.size(), shuffle_seed);
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    batches.push_back(make_batch(ds, std::span<const std::size_t>(order).subspan(start, end - start)));
  }
  return batches;
}

}  // namespace kdwb
