#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdwb/error.hpp"
#include "kdwb/model.hpp"
#include "kdwb/tensor.hpp"

namespace kdwb {

struct DistillConfig {
  double temperature = 2.0;
  double w_hard = 0.33;
  double w_int = 0.33;
  double w_kd = 0.33;
  bool scale_kd_by_T2 = false;

  void validate() const {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
      throw ConfigError("distill config: temperature must be a positive finite number");
    }
    for (double w : {w_hard, w_int, w_kd}) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("distill config: loss weights must be finite and >= 0");
    }
    if (w_hard == 0.0 && w_int == 0.0 && w_kd == 0.0) {
      throw ConfigError("distill config: at least one loss weight must be positive");
    }
  }

  bool operator==(const DistillConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const DistillConfig& c) {
  j = {{"temperature", c.temperature},
       {"w_hard", c.w_hard},
       {"w_int", c.w_int},
       {"w_kd", c.w_kd},
       {"scale_kd_by_T2", c.scale_kd_by_T2}};
}

inline void from_json(const nlohmann::json& j, DistillConfig& c) {
  DistillConfig d;
  c.temperature = j.value("temperature", d.temperature);
  c.w_hard = j.value("w_hard", d.w_hard);
  c.w_int = j.value("w_int", d.w_int);
  c.w_kd = j.value("w_kd", d.w_kd);
  c.scale_kd_by_T2 = j.value("scale_kd_by_T2", d.scale_kd_by_T2);
}

// Student block -> teacher block, both 1-indexed.
struct LayerPair {
  std::size_t student = 0;
  std::size_t teacher = 0;
  bool operator==(const LayerPair&) const = default;
};

struct LayerMap {
  std::vector<LayerPair> pairs;

  // Throws ConfigError unless the map is strictly increasing in both
  // coordinates, stays within range, and connects the first and last blocks.
  void validate(std::size_t student_layers, std::size_t teacher_layers) const {
    auto fail = [&](const std::string& why) {
      throw ConfigError("layer map " + to_string() + " invalid for " + std::to_string(student_layers) + "->" +
                        std::to_string(teacher_layers) + " blocks: " + why);
    };
    if (pairs.empty()) fail("no pairs");
    // A single student block cannot meet both anchors; it takes the last one.
    if (student_layers == 1) {
      if (pairs.size() != 1 || pairs[0] != LayerPair{1, teacher_layers}) fail("one-block student maps to (1, L_t)");
      return;
    }
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const auto& p = pairs[i];
      if (p.student < 1 || p.student > student_layers) fail("student index out of range");
      if (p.teacher < 1 || p.teacher > teacher_layers) fail("teacher index out of range");
      if (i > 0 && (p.student <= pairs[i - 1].student || p.teacher <= pairs[i - 1].teacher)) {
        fail("pairs must be strictly increasing in both coordinates");
      }
    }
    if (pairs.front() != LayerPair{1, 1}) fail("first blocks must be connected");
    if (pairs.back() != LayerPair{student_layers, teacher_layers}) fail("last blocks must be connected");
  }

  std::string to_string() const {
    std::string s;
    for (const auto& p : pairs) {
      if (!s.empty()) s += ',';
      s += std::to_string(p.student) + ':' + std::to_string(p.teacher);
    }
    return s;
  }

  bool operator==(const LayerMap&) const = default;
};

// Parses "1:1,2:5,3:12".
inline LayerMap parse_layer_map(const std::string& text) {
  LayerMap map;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    try {
      if (colon == std::string::npos) throw std::invalid_argument("missing ':'");
      std::size_t used_s = 0;
      std::size_t used_t = 0;
      const std::string s = item.substr(0, colon);
      const std::string t = item.substr(colon + 1);
      const long si = std::stol(s, &used_s);
      const long ti = std::stol(t, &used_t);
      if (used_s != s.size() || used_t != t.size() || si < 1 || ti < 1) throw std::invalid_argument("bad index");
      map.pairs.push_back({static_cast<std::size_t>(si), static_cast<std::size_t>(ti)});
    } catch (const std::exception&) {
      throw ConfigError("layer map entry '" + item + "' is not of the form student:teacher");
    }
  }
  return map;
}

inline LayerMap identity_layer_map(std::size_t layers) {
  LayerMap map;
  for (std::size_t i = 1; i <= layers; ++i) map.pairs.push_back({i, i});
  return map;
}

// Anchored linear interpolation: student block i maps to
// round(1 + (i-1)(L_t-1)/(L_s-1)), halves rounded up. Integer arithmetic keeps
// the rounding exact. A one-block student has a single pair, (1, L_t).
inline LayerMap uniform_layer_map(std::size_t student_layers, std::size_t teacher_layers) {
  if (student_layers == 0 || student_layers > teacher_layers) {
    throw ConfigError("uniform layer map needs 1 <= student layers <= teacher layers");
  }
  if (student_layers == 1) return LayerMap{{{1, teacher_layers}}};
  LayerMap map;
  const std::size_t den = student_layers - 1;
  for (std::size_t i = 1; i <= student_layers; ++i) {
    const std::size_t num = 2 * (i - 1) * (teacher_layers - 1) + den;
    map.pairs.push_back({i, 1 + num / (2 * den)});
  }
  return map;
}

namespace detail {

struct LayerPreset {
  const char* name;
  std::size_t student_layers;
  std::size_t teacher_layers;
  std::vector<LayerPair> pairs;
};

inline const std::vector<LayerPreset>& layer_presets() {
  static const std::vector<LayerPreset> presets = {
      {"paper-3L", 3, 12, {{1, 1}, {2, 5}, {3, 12}}},
      {"paper-6L", 6, 12, {{1, 1}, {2, 5}, {3, 7}, {4, 9}, {5, 11}, {6, 12}}},
      {"paper-9L", 9, 12, {{1, 1}, {2, 2}, {3, 4}, {4, 6}, {5, 8}, {6, 9}, {7, 10}, {8, 11}, {9, 12}}},
  };
  return presets;
}

}  // namespace detail

// Accepts a preset name ("paper-3L", "paper-6L", "paper-9L", "identity",
// "uniform", "auto") or an explicit pair list. "auto" picks the matching named
// preset, then identity for equal depths, then uniform.
inline LayerMap resolve_layer_map(const std::string& spec, std::size_t student_layers, std::size_t teacher_layers) {
  if (student_layers == 0 || student_layers > teacher_layers) {
    throw ConfigError("layer map: student depth " + std::to_string(student_layers) + " must be in [1, teacher depth " +
                      std::to_string(teacher_layers) + "]");
  }
  LayerMap map;
  if (spec == "identity") {
    if (student_layers != teacher_layers) throw ConfigError("layer map 'identity' requires equal depths");
    map = identity_layer_map(student_layers);
  } else if (spec == "uniform") {
    map = uniform_layer_map(student_layers, teacher_layers);
  } else if (spec == "auto") {
    for (const auto& p : detail::layer_presets()) {
      if (p.student_layers == student_layers && p.teacher_layers == teacher_layers) return LayerMap{p.pairs};
    }
    map = student_layers == teacher_layers ? identity_layer_map(student_layers)
                                           : uniform_layer_map(student_layers, teacher_layers);
  } else if (spec.rfind("paper-", 0) == 0) {
    const detail::LayerPreset* found = nullptr;
    for (const auto& p : detail::layer_presets()) {
      if (spec == p.name) found = &p;
    }
    if (found == nullptr) throw ConfigError("unknown layer map preset '" + spec + "'");
    if (found->student_layers != student_layers || found->teacher_layers != teacher_layers) {
      throw ConfigError("layer map preset '" + spec + "' is defined for " + std::to_string(found->student_layers) +
                        "->" + std::to_string(found->teacher_layers) + " blocks, not " +
                        std::to_string(student_layers) + "->" + std::to_string(teacher_layers));
    }
    map = LayerMap{found->pairs};
  } else {
    map = parse_layer_map(spec);
  }
  map.validate(student_layers, teacher_layers);
  return map;
}

// One optional student->teacher width projection per mapped pair. Present only
// when the two hidden widths differ. Initialized to a truncated identity so
// shared coordinates line up from the first step.
class ProjectionSet {
 public:
  ProjectionSet() = default;

  static ProjectionSet create(const ModelConfig& student, const ModelConfig& teacher, const LayerMap& map) {
    ProjectionSet set;
    set.student_dim_ = student.hidden_dim;
    set.teacher_dim_ = teacher.hidden_dim;
    for (std::size_t i = 0; i < map.pairs.size(); ++i) {
      if (student.hidden_dim == teacher.hidden_dim) {
        set.mats_.emplace_back(std::nullopt);
        continue;
      }
      Tensor w = Tensor::zeros({student.hidden_dim, teacher.hidden_dim}, true);
      auto d = w.mutable_data();
      for (std::size_t r = 0; r < std::min(student.hidden_dim, teacher.hidden_dim); ++r) d[r * teacher.hidden_dim + r] = 1.0;
      set.mats_.emplace_back(std::move(w));
    }
    return set;
  }

  std::size_t size() const { return mats_.size(); }
  const std::optional<Tensor>& at(std::size_t pair) const { return mats_.at(pair); }

  Tensor apply(std::size_t pair, const Tensor& student_hidden) const {
    const auto& m = mats_.at(pair);
    return m ? matmul(student_hidden, *m) : student_hidden;
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (const auto& m : mats_) {
      if (m) out.push_back(*m);
    }
    return out;
  }

  void check(const LayerMap& map, std::size_t student_dim, std::size_t teacher_dim) const {
    if (mats_.size() != map.pairs.size()) throw DimensionError("projection set size does not match layer map");
    for (const auto& m : mats_) {
      if (m ? m->shape() != Shape{student_dim, teacher_dim} : student_dim != teacher_dim) {
        throw DimensionError("projection shape inconsistent with widths " + std::to_string(student_dim) + "->" +
                             std::to_string(teacher_dim));
      }
    }
  }

 private:
  std::size_t student_dim_ = 0;
  std::size_t teacher_dim_ = 0;
  std::vector<std::optional<Tensor>> mats_;
};

inline Tensor softmax_temp(const Tensor& logits, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("softmax temperature must be positive");
  return softmax_rows(temperature == 1.0 ? logits : scale(logits, 1.0 / temperature));
}

// Batch mean of KL(p(z_t,T) || p(z_s,T)). Teacher logits are read as constants.
inline Tensor kd_response_loss(const Tensor& teacher_logits, const Tensor& student_logits, double temperature,
                               bool scale_by_T2 = false) {
  if (!(temperature > 0.0)) throw ConfigError("KD temperature must be positive");
  detail::require_matrix(student_logits, "kd_response_loss");
  if (teacher_logits.shape() != student_logits.shape()) {
    throw DimensionError("kd_response_loss: teacher logits " + shape_str(teacher_logits.shape()) +
                         " vs student logits " + shape_str(student_logits.shape()));
  }
  const double inv_t = 1.0 / temperature;
  Tensor log_pt;
  {
    NoGradGuard guard;
    log_pt = log_softmax_rows(scale(teacher_logits.detach(), inv_t));
  }
  std::vector<double> pt(log_pt.numel());
  for (std::size_t i = 0; i < pt.size(); ++i) pt[i] = std::exp(log_pt.data()[i]);
  const Tensor p_teacher(log_pt.shape(), std::move(pt));
  const Tensor log_ps = log_softmax_rows(scale(student_logits, inv_t));
  Tensor loss = sum(mul(p_teacher, sub(log_pt, log_ps)));
  double factor = 1.0 / static_cast<double>(student_logits.rows());
  if (scale_by_T2) factor *= temperature * temperature;
  return scale(loss, factor);
}

// Mean over mapped pairs of the MSE between the (projected) student block
// output and the teacher block output. The teacher side is constant.
inline Tensor feature_loss(const ForwardTrace& teacher, const ForwardTrace& student, const LayerMap& map,
                           const ProjectionSet& proj) {
  if (map.pairs.empty()) throw ConfigError("feature_loss: empty layer map");
  if (proj.size() != map.pairs.size()) throw DimensionError("feature_loss: projection set does not match layer map");
  Tensor total;
  for (std::size_t i = 0; i < map.pairs.size(); ++i) {
    const auto [s, t] = map.pairs[i];
    if (s < 1 || s > student.block_outputs.size() || t < 1 || t > teacher.block_outputs.size()) {
      throw ConfigError("feature_loss: pair " + std::to_string(s) + ":" + std::to_string(t) +
                        " outside block range " + std::to_string(student.block_outputs.size()) + "/" +
                        std::to_string(teacher.block_outputs.size()));
    }
    const Tensor hs = proj.apply(i, student.block_outputs[s - 1]);
    const Tensor ht = teacher.block_outputs[t - 1].detach();
    if (hs.shape() != ht.shape()) {
      throw DimensionError("feature_loss: student block " + std::to_string(s) + " " + shape_str(hs.shape()) +
                           " vs teacher block " + std::to_string(t) + " " + shape_str(ht.shape()));
    }
    const Tensor mse = mean(square(sub(hs, ht)));
    total = i == 0 ? mse : add(total, mse);
  }
  return scale(total, 1.0 / static_cast<double>(map.pairs.size()));
}

// Classification: mean cross-entropy against integer labels.
// Regression: mean squared error against real targets.
inline Tensor task_loss(const Tensor& logits, const std::vector<double>& labels, TaskKind kind) {
  detail::require_matrix(logits, "task_loss");
  const std::size_t rows = logits.rows();
  const std::size_t cols = logits.cols();
  if (labels.size() != rows) {
    throw DimensionError("task_loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) +
                         " rows");
  }
  if (kind == TaskKind::regression) {
    if (cols != 1) throw DimensionError("task_loss: regression expects one output column, got " + std::to_string(cols));
    return mean(square(sub(logits, Tensor({rows, 1}, labels))));
  }
  std::vector<double> one_hot(rows * cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double y = labels[r];
    if (y < 0 || y != std::floor(y) || y >= static_cast<double>(cols)) {
      throw DimensionError("task_loss: label " + std::to_string(y) + " outside [0, " + std::to_string(cols) + ")");
    }
    one_hot[r * cols + static_cast<std::size_t>(y)] = 1.0;
  }
  return scale(sum(mul(Tensor({rows, cols}, std::move(one_hot)), log_softmax_rows(logits))),
               -1.0 / static_cast<double>(rows));
}

inline Tensor total_loss(const Tensor& l_task, const Tensor& l_int, const Tensor& l_kd, const DistillConfig& cfg) {
  for (const Tensor* t : {&l_task, &l_int, &l_kd}) {
    if (t->numel() != 1) throw DimensionError("total_loss: components must be scalars");
  }
  return add(add(scale(l_task, cfg.w_hard), scale(l_int, cfg.w_int)), scale(l_kd, cfg.w_kd));
}

// Copies embeddings, pooler, head, and each mapped teacher block into a fresh
// student. Requires identical widths and vocabulary.
inline Model init_from_teacher(const Model& teacher, const ModelConfig& student_cfg, const LayerMap& map,
                               std::uint64_t seed) {
  const auto& t = teacher.config();
  if (student_cfg.hidden_dim != t.hidden_dim || student_cfg.ffn_width() != t.ffn_width() ||
      student_cfg.vocab_size != t.vocab_size || student_cfg.max_positions != t.max_positions ||
      student_cfg.num_outputs != t.num_outputs) {
    throw ConfigError("init_from_teacher: student must share the teacher's widths, vocabulary and head");
  }
  map.validate(student_cfg.num_layers, t.num_layers);
  Model student = build_model(student_cfg, seed);
  auto copy = [&](const std::string& from, const std::string& to) {
    const auto src = teacher.param(from).data();
    auto dst = student.param(to).mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  };
  for (const auto& p : student.params()) {
    if (p.name.rfind("blocks.", 0) != 0) copy(p.name, p.name);
  }
  for (const auto& pair : map.pairs) {
    const std::string to = block_prefix(pair.student - 1);
    const std::string from = block_prefix(pair.teacher - 1);
    for (const auto& p : student.params()) {
      if (p.name.rfind(to, 0) == 0) copy(from + p.name.substr(to.size()), p.name);
    }
  }
  return student;
}

}  // namespace kdwb
