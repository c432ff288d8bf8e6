#pragma once

// Post-LN transformer encoder with a pooled classification/regression head.
// Teachers and students are both instances of this one family and differ
// only by ModelConfig.

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdwb/error.hpp"
#include "kdwb/tensor.hpp"

namespace kdwb {

enum class TaskKind { classification, regression };

inline std::string to_string(TaskKind kind) {
  return kind == TaskKind::classification ? "classification" : "regression";
}

inline TaskKind task_kind_from_string(const std::string& s) {
  if (s == "classification") return TaskKind::classification;
  if (s == "regression") return TaskKind::regression;
  throw ConfigError("unknown task kind '" + s + "'");
}

struct ModelConfig {
  std::size_t num_layers = 12;
  std::size_t num_heads = 12;
  std::size_t hidden_dim = 768;
  std::size_t ffn_dim = 0;  // 0 means 4 * hidden_dim
  std::size_t vocab_size = 50265;
  std::size_t max_positions = 514;
  std::size_t num_outputs = 2;
  TaskKind task_kind = TaskKind::classification;

  std::size_t ffn_width() const { return ffn_dim == 0 ? 4 * hidden_dim : ffn_dim; }

  void validate() const {
    if (num_layers == 0 || num_heads == 0 || hidden_dim == 0 || vocab_size == 0 || max_positions == 0 ||
        num_outputs == 0) {
      throw ConfigError("model config: all extents must be positive");
    }
    if (hidden_dim % num_heads != 0) {
      throw ConfigError("model config: hidden_dim " + std::to_string(hidden_dim) + " not divisible by num_heads " +
                        std::to_string(num_heads));
    }
    if (task_kind == TaskKind::regression && num_outputs != 1) {
      throw ConfigError("model config: regression head must have exactly one output");
    }
    if (task_kind == TaskKind::classification && num_outputs < 2) {
      throw ConfigError("model config: classification head needs at least two outputs");
    }
  }

  bool operator==(const ModelConfig& o) const {
    return num_layers == o.num_layers && num_heads == o.num_heads && hidden_dim == o.hidden_dim &&
           ffn_width() == o.ffn_width() && vocab_size == o.vocab_size && max_positions == o.max_positions &&
           num_outputs == o.num_outputs && task_kind == o.task_kind;
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"num_layers", c.num_layers},       {"num_heads", c.num_heads},
                     {"hidden_dim", c.hidden_dim},       {"ffn_dim", c.ffn_width()},
                     {"vocab_size", c.vocab_size},       {"max_positions", c.max_positions},
                     {"num_outputs", c.num_outputs},     {"task_kind", to_string(c.task_kind)}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.num_layers = j.at("num_layers").get<std::size_t>();
  c.num_heads = j.at("num_heads").get<std::size_t>();
  c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  c.ffn_dim = j.value("ffn_dim", std::size_t{0});
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_positions = j.at("max_positions").get<std::size_t>();
  c.num_outputs = j.at("num_outputs").get<std::size_t>();
  c.task_kind = task_kind_from_string(j.value("task_kind", std::string("classification")));
}

struct ParamSpec {
  std::string name;
  Shape shape;
  enum class Init { normal, zeros, ones } init = Init::normal;

  bool operator==(const ParamSpec& o) const { return name == o.name && shape == o.shape; }
};

inline std::string block_prefix(std::size_t block) { return "blocks." + std::to_string(block) + "."; }

// Ordered parameter manifest; the single source for names, shapes, init
// kinds, and checkpoint ordering. Blocks are numbered from 0.
inline std::vector<ParamSpec> parameter_manifest(const ModelConfig& c) {
  using I = ParamSpec::Init;
  const std::size_t d = c.hidden_dim, f = c.ffn_width();
  std::vector<ParamSpec> specs = {
      {"embeddings.token", {c.vocab_size, d}, I::normal},
      {"embeddings.position", {c.max_positions, d}, I::normal},
      {"embeddings.ln.gain", {d}, I::ones},
      {"embeddings.ln.bias", {d}, I::zeros},
  };
  for (std::size_t b = 0; b < c.num_layers; ++b) {
    const std::string p = block_prefix(b);
    for (const char* proj : {"attn.query", "attn.key", "attn.value", "attn.output"}) {
      specs.push_back({p + proj + ".weight", {d, d}, I::normal});
      specs.push_back({p + proj + ".bias", {d}, I::zeros});
    }
    specs.push_back({p + "ln1.gain", {d}, I::ones});
    specs.push_back({p + "ln1.bias", {d}, I::zeros});
    specs.push_back({p + "ffn.in.weight", {d, f}, I::normal});
    specs.push_back({p + "ffn.in.bias", {f}, I::zeros});
    specs.push_back({p + "ffn.out.weight", {f, d}, I::normal});
    specs.push_back({p + "ffn.out.bias", {d}, I::zeros});
    specs.push_back({p + "ln2.gain", {d}, I::ones});
    specs.push_back({p + "ln2.bias", {d}, I::zeros});
  }
  specs.push_back({"pooler.weight", {d, d}, I::normal});
  specs.push_back({"pooler.bias", {d}, I::zeros});
  specs.push_back({"head.weight", {d, c.num_outputs}, I::normal});
  specs.push_back({"head.bias", {c.num_outputs}, I::zeros});
  return specs;
}

// Student names in the grid's notation: '_'-separated knobs "<n>L", "<n>AH",
// "<n>D", or "baseline" for the teacher shape itself. Layer and head counts
// are absolute. Widths are read on the reference 768-wide scale and mapped
// proportionally onto the teacher's width, rounded to a multiple of the head
// count, so "384D" halves any teacher.
inline constexpr std::size_t kReferenceWidth = 768;

inline ModelConfig student_config(const std::string& name, const ModelConfig& teacher) {
  ModelConfig c = teacher;
  c.ffn_dim = 0;
  if (name == "baseline") {
    c.ffn_dim = teacher.ffn_dim;
    return c;
  }
  std::optional<std::size_t> width;
  std::size_t start = 0;
  while (start <= name.size()) {
    const std::size_t end = std::min(name.find('_', start), name.size());
    const std::string knob = name.substr(start, end - start);
    std::size_t digits = 0;
    while (digits < knob.size() && std::isdigit(static_cast<unsigned char>(knob[digits]))) ++digits;
    const std::string unit = knob.substr(digits);
    if (digits == 0 || (unit != "L" && unit != "AH" && unit != "D")) {
      throw ConfigError("unknown student preset '" + name + "' (expected e.g. 6L, 8AH, 384D, 6L_384D)");
    }
    const std::size_t n = std::stoul(knob.substr(0, digits));
    if (n == 0) throw ConfigError("student preset '" + name + "': zero extent");
    if (unit == "L") c.num_layers = n;
    else if (unit == "AH") c.num_heads = n;
    else width = n;
    start = end + 1;
  }
  const std::size_t base_width = teacher.hidden_dim;
  const double target = width ? static_cast<double>(base_width) * static_cast<double>(*width) / kReferenceWidth
                              : static_cast<double>(base_width);
  const auto per_head = static_cast<std::size_t>(std::max(1.0, std::round(target / static_cast<double>(c.num_heads))));
  c.hidden_dim = per_head * c.num_heads;
  if (!width && c.hidden_dim != base_width) {
    throw ConfigError("student preset '" + name + "': width " + std::to_string(base_width) +
                      " is not divisible by " + std::to_string(c.num_heads) + " heads");
  }
  if (!width && teacher.ffn_dim != 0) c.ffn_dim = teacher.ffn_dim;
  c.validate();
  return c;
}

inline const std::vector<std::string>& paper_student_names() {
  static const std::vector<std::string> names = {"9L", "6L", "3L", "516D", "384D", "8AH", "4AH", "6L_384D"};
  return names;
}

// Closed-form scalar parameter count implied by a config.
inline std::uint64_t param_count(const ModelConfig& c) {
  c.validate();
  const std::uint64_t d = c.hidden_dim, f = c.ffn_width();
  const std::uint64_t embeddings = c.vocab_size * d + c.max_positions * d + 2 * d;
  const std::uint64_t attention = 4 * (d * d + d);
  const std::uint64_t ffn = d * f + f + f * d + d;
  const std::uint64_t norms = 4 * d;
  const std::uint64_t block = attention + ffn + norms;
  const std::uint64_t pooler = d * d + d;
  const std::uint64_t head = d * c.num_outputs + c.num_outputs;
  return embeddings + c.num_layers * block + pooler + head;
}

struct NamedParam {
  std::string name;
  Tensor value;
};

class Model {
 public:
  Model() = default;
  Model(ModelConfig config, std::vector<NamedParam> params) : config_(std::move(config)), params_(std::move(params)) {
    for (std::size_t i = 0; i < params_.size(); ++i) index_[params_[i].name] = i;
  }

  const ModelConfig& config() const { return config_; }
  const std::vector<NamedParam>& params() const { return params_; }

  const Tensor& param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("model has no parameter '" + name + "'");
    return params_[it->second].value;
  }
  Tensor& param(const std::string& name) {
    return const_cast<Tensor&>(static_cast<const Model&>(*this).param(name));
  }
  bool has_param(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (const auto& p : params_) out.push_back(p.value);
    return out;
  }

  void set_trainable(bool trainable) {
    for (auto& p : params_) p.value.set_requires_grad(trainable);
  }
  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

  // Deep copy; the clone shares no storage with this model.
  Model clone() const {
    std::vector<NamedParam> copy;
    for (const auto& p : params_) {
      Tensor t(p.value.shape(), std::vector<double>(p.value.data().begin(), p.value.data().end()),
               p.value.requires_grad());
      copy.push_back({p.name, std::move(t)});
    }
    return Model(config_, std::move(copy));
  }

  std::uint64_t scalar_count() const {
    std::uint64_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  bool all_finite() const {
    return std::all_of(params_.begin(), params_.end(), [](const NamedParam& p) { return p.value.all_finite(); });
  }

  bool bitwise_equal(const Model& other) const {
    if (!(config_ == other.config_) || params_.size() != other.params_.size()) return false;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto a = params_[i].value.data();
      const auto b = other.params_[i].value.data();
      if (params_[i].name != other.params_[i].name || a.size() != b.size() ||
          !std::equal(a.begin(), a.end(), b.begin(), [](double x, double y) {
            return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y);
          })) {
        return false;
      }
    }
    return true;
  }

 private:
  ModelConfig config_;
  std::vector<NamedParam> params_;
  std::map<std::string, std::size_t> index_;
};

namespace detail {

// Box-Muller over mt19937_64 so initialization is identical across standard
// libraries (std::normal_distribution is implementation-defined).
class PortableNormal {
 public:
  explicit PortableNormal(std::uint64_t seed) : rng_(seed) {}

  double uniform() { return (static_cast<double>(rng_() >> 11) + 0.5) * 0x1.0p-53; }

  double standard() {
    if (cached_) {
      cached_ = false;
      return spare_;
    }
    const double r = std::sqrt(-2.0 * std::log(uniform()));
    const double theta = 2.0 * M_PI * uniform();
    spare_ = r * std::sin(theta);
    cached_ = true;
    return r * std::cos(theta);
  }

  // Standard normal conditioned on |z| <= 2, by rejection.
  double truncated() {
    for (;;) {
      const double z = standard();
      if (std::abs(z) <= 2.0) return z;
    }
  }

  std::uint64_t next_u64() { return rng_(); }

 private:
  std::mt19937_64 rng_;
  double spare_ = 0.0;
  bool cached_ = false;
};

}  // namespace detail

inline constexpr double kInitStd = 0.02;

// Deterministic in (config, seed): weights ~ truncated normal (std 0.02, cut
// at two standard deviations), biases zero, layer-norm gains one.
inline Model build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  detail::PortableNormal rng(seed);
  std::vector<NamedParam> params;
  for (const auto& spec : parameter_manifest(config)) {
    const std::size_t n = shape_numel(spec.shape);
    std::vector<double> values(n);
    switch (spec.init) {
      case ParamSpec::Init::normal:
        for (auto& v : values) v = kInitStd * rng.truncated();
        break;
      case ParamSpec::Init::zeros:
        std::fill(values.begin(), values.end(), 0.0);
        break;
      case ParamSpec::Init::ones:
        std::fill(values.begin(), values.end(), 1.0);
        break;
    }
    params.push_back({spec.name, Tensor(spec.shape, std::move(values), true)});
  }
  return Model(config, std::move(params));
}

// Encoded token ids for `batch` sequences of `seq_len` positions, row-major.
// mask is 1 for real tokens and 0 for padding.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> mask;
};

struct ForwardTrace {
  Tensor logits;  // [batch x num_outputs]
  // One per block, each [batch*seq x hidden] with rows batch-major.
  std::vector<Tensor> block_outputs;
  Tensor pooled;  // [batch x hidden]
};

inline Tensor encoder_block(const Model& model, std::size_t block, const Tensor& x, const TokenBatch& tokens) {
  const auto& c = model.config();
  const std::string p = block_prefix(block);
  auto proj = [&](const char* name, const Tensor& in) {
    return linear(in, model.param(p + name + ".weight"), model.param(p + name + ".bias"));
  };
  const Tensor q = proj("attn.query", x);
  const Tensor k = proj("attn.key", x);
  const Tensor v = proj("attn.value", x);
  const Tensor ctx = attention(q, k, v, tokens.mask, tokens.batch, tokens.seq_len, c.num_heads);
  const Tensor h = layer_norm(add(x, proj("attn.output", ctx)), model.param(p + "ln1.gain"), model.param(p + "ln1.bias"));
  const Tensor ff = proj("ffn.out", gelu(proj("ffn.in", h)));
  return layer_norm(add(h, ff), model.param(p + "ln2.gain"), model.param(p + "ln2.bias"));
}

inline ForwardTrace forward(const Model& model, const TokenBatch& tokens) {
  const auto& c = model.config();
  if (tokens.batch == 0 || tokens.seq_len == 0) throw InputError("forward: empty batch");
  if (tokens.ids.size() != tokens.batch * tokens.seq_len || tokens.mask.size() != tokens.ids.size()) {
    throw InputError("forward: ids/mask size does not match batch x seq_len");
  }
  if (tokens.seq_len > c.max_positions) {
    throw InputError("forward: sequence length " + std::to_string(tokens.seq_len) + " exceeds max_positions " +
                     std::to_string(c.max_positions));
  }
  std::vector<std::size_t> token_rows(tokens.ids.size());
  std::vector<std::size_t> position_rows(tokens.ids.size());
  for (std::size_t i = 0; i < tokens.ids.size(); ++i) {
    const auto id = tokens.ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) {
      throw InputError("forward: token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(c.vocab_size));
    }
    token_rows[i] = static_cast<std::size_t>(id);
    position_rows[i] = i % tokens.seq_len;
  }
  Tensor x = add(gather_rows(model.param("embeddings.token"), token_rows),
                 gather_rows(model.param("embeddings.position"), position_rows));
  x = layer_norm(x, model.param("embeddings.ln.gain"), model.param("embeddings.ln.bias"));

  ForwardTrace trace;
  for (std::size_t b = 0; b < c.num_layers; ++b) {
    x = encoder_block(model, b, x, tokens);
    trace.block_outputs.push_back(x);
  }
  std::vector<std::size_t> first_rows(tokens.batch);
  for (std::size_t b = 0; b < tokens.batch; ++b) first_rows[b] = b * tokens.seq_len;
  trace.pooled = tanh(linear(gather_rows(x, first_rows), model.param("pooler.weight"), model.param("pooler.bias")));
  trace.logits = linear(trace.pooled, model.param("head.weight"), model.param("head.bias"));
  return trace;
}

}  // namespace kdwb
