#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdwb/data.hpp"
#include "kdwb/distill.hpp"
#include "kdwb/error.hpp"
#include "kdwb/metrics.hpp"
#include "kdwb/model.hpp"
#include "kdwb/tensor.hpp"

namespace kdwb {

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("adam: lr must be finite and >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("adam: betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) throw ConfigError("adam: eps must be positive");
  }
  bool operator==(const AdamConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const AdamConfig& c) {
  j = {{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}};
}
inline void from_json(const nlohmann::json& j, AdamConfig& c) {
  AdamConfig d;
  c.lr = j.value("lr", d.lr);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
}

struct AdamState {
  AdamConfig cfg;
  std::uint64_t t = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  AdamState() = default;
  AdamState(AdamConfig config, const std::vector<NamedParam>& params) : cfg(config) {
    cfg.validate();
    for (const auto& p : params) {
      m.emplace_back(p.value.numel(), 0.0);
      v.emplace_back(p.value.numel(), 0.0);
    }
  }
};

// Bias-corrected Adam over the gradients currently stored on `params`. A
// parameter without a gradient buffer is treated as having a zero gradient.
inline void adam_step(AdamState& state, const std::vector<NamedParam>& params) {
  if (state.m.size() != params.size()) throw ContractError("adam_step: state built for a different parameter list");
  for (const auto& p : params) {
    if (!p.value.has_grad()) continue;
    for (double g : p.value.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + p.name + "'");
    }
  }
  ++state.t;
  const auto& c = state.cfg;
  const double correction1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double correction2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor value = params[k].value;
    auto data = value.mutable_data();
    auto& m = state.m[k];
    auto& v = state.v[k];
    const bool has = value.has_grad();
    const auto grad = has ? value.grad() : std::span<const double>();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = has ? grad[i] : 0.0;
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      data[i] -= c.lr * (m[i] / correction1) / (std::sqrt(v[i] / correction2) + c.eps);
    }
  }
}

// Rescales all gradients so their joint L2 norm is at most max_norm. Returns
// the norm before clipping. max_norm <= 0 disables clipping.
inline double clip_grad_norm(const std::vector<NamedParam>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.value.has_grad()) continue;
    for (double g : p.value.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (const auto& p : params) {
      if (!p.value.has_grad()) continue;
      Tensor t = p.value;
      for (auto& g : t.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Run configuration and logs
// ---------------------------------------------------------------------------

struct RunConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 12;
  std::uint64_t seed = 0;
  AdamConfig adam;
  double clip_norm = 1.0;
  DistillConfig distill;
  std::string layer_map = "auto";
  bool init_from_teacher = false;
  bool select_best = true;
  std::size_t eval_workers = 1;

  void validate() const {
    if (epochs < 1) throw ConfigError("run config: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("run config: batch_size must be >= 1");
    if (eval_workers < 1) throw ConfigError("run config: eval_workers must be >= 1");
    if (!std::isfinite(clip_norm)) throw ConfigError("run config: clip_norm must be finite");
    adam.validate();
    distill.validate();
  }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"adam", c.adam},
       {"clip_norm", c.clip_norm},
       {"distill", c.distill},
       {"layer_map", c.layer_map},
       {"init_from_teacher", c.init_from_teacher},
       {"select_best", c.select_best},
       {"eval_workers", c.eval_workers}};
}
inline void from_json(const nlohmann::json& j, RunConfig& c) {
  RunConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.seed = j.value("seed", d.seed);
  c.adam = j.value("adam", d.adam);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.distill = j.value("distill", d.distill);
  c.layer_map = j.value("layer_map", d.layer_map);
  c.init_from_teacher = j.value("init_from_teacher", d.init_from_teacher);
  c.select_best = j.value("select_best", d.select_best);
  c.eval_workers = j.value("eval_workers", d.eval_workers);
}

struct LossParts {
  double total = 0.0;
  double task = 0.0;
  double feature = 0.0;
  double kd = 0.0;
};

struct TrainRecord {
  std::size_t epoch = 0;
  LossParts loss;
  double dev_metric = std::numeric_limits<double>::quiet_NaN();
};

struct TrainLog {
  std::vector<TrainRecord> epochs;
  std::vector<LossParts> steps;

  std::string to_csv() const {
    std::ostringstream out;
    out << std::setprecision(17) << "epoch,loss_total,loss_task,loss_int,loss_kd,dev_metric\n";
    for (const auto& r : epochs) {
      out << r.epoch << ',' << r.loss.total << ',' << r.loss.task << ',' << r.loss.feature << ',' << r.loss.kd << ',';
      if (std::isnan(r.dev_metric)) out << "nan";
      else out << r.dev_metric;
      out << '\n';
    }
    return out.str();
  }

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write '" + path.string() + "'");
    out << to_csv();
  }
};

// A labelled task ready for training: encoded train split plus an optional
// dev split used for best-epoch selection.
struct TaskData {
  TaskSpec spec;
  EncodedDataset train;
  EncodedDataset dev;
};

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

struct Prediction {
  std::string id;
  double label = 0.0;
  double pred = 0.0;
  std::vector<double> logits;
};

struct PredictionLog {
  std::string model_id;
  std::string task;
  std::vector<Prediction> rows;

  std::vector<double> preds() const {
    std::vector<double> out;
    for (const auto& r : rows) out.push_back(r.pred);
    return out;
  }
  std::vector<double> labels() const {
    std::vector<double> out;
    for (const auto& r : rows) out.push_back(r.label);
    return out;
  }

  std::string to_jsonl() const {
    std::string out;
    for (const auto& r : rows) {
      nlohmann::json j = {{"id", r.id},     {"label", r.label},       {"pred", r.pred},
                          {"logits", r.logits}, {"model_id", model_id}, {"task", task}};
      out += j.dump() + '\n';
    }
    return out;
  }

  void write(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write '" + path.string() + "'");
    out << to_jsonl();
  }

  static PredictionLog read(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open prediction log '" + path.string() + "'");
    PredictionLog log;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        log.model_id = j.at("model_id").get<std::string>();
        log.task = j.at("task").get<std::string>();
        log.rows.push_back({j.at("id").get<std::string>(), j.at("label").get<double>(), j.at("pred").get<double>(),
                            j.at("logits").get<std::vector<double>>()});
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
    return log;
  }
};

namespace detail {

// Drops trailing columns that are padding in every row; padding-invariance of
// the encoder makes this exact.
inline TokenBatch trim_padding(const TokenBatch& in) {
  std::size_t keep = 1;
  for (std::size_t b = 0; b < in.batch; ++b) {
    for (std::size_t s = in.seq_len; s > keep; --s) {
      if (in.mask[b * in.seq_len + s - 1]) {
        keep = s;
        break;
      }
    }
  }
  if (keep == in.seq_len) return in;
  TokenBatch out{in.batch, keep, {}, {}};
  for (std::size_t b = 0; b < in.batch; ++b) {
    const auto row = static_cast<std::ptrdiff_t>(b * in.seq_len);
    out.ids.insert(out.ids.end(), in.ids.begin() + row, in.ids.begin() + row + static_cast<std::ptrdiff_t>(keep));
    out.mask.insert(out.mask.end(), in.mask.begin() + row, in.mask.begin() + row + static_cast<std::ptrdiff_t>(keep));
  }
  return out;
}

inline double prediction_from_logits(std::span<const double> logits, TaskKind kind) {
  if (kind == TaskKind::regression) return logits[0];
  return static_cast<double>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

inline std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch) {
  return seed * 0x9E3779B97F4A7C15ULL + 0xD1B54A32D192ED03ULL * (epoch + 1);
}

inline void check_arity(const ModelConfig& cfg, const TaskSpec& spec) {
  if (cfg.num_outputs != spec.num_outputs() || cfg.task_kind != spec.task_kind()) {
    throw ConfigError("model head (" + std::to_string(cfg.num_outputs) + " outputs, " + to_string(cfg.task_kind) +
                      ") does not match task '" + spec.name + "' (" + std::to_string(spec.num_outputs()) +
                      " outputs, " + to_string(spec.task_kind()) + ")");
  }
}

}  // namespace detail

// Forward-only pass over the dataset. With workers > 1 the batches are sharded
// into contiguous ranges; rows come back in dataset order regardless.
inline std::vector<Prediction> predict(const Model& model, const EncodedDataset& ds, std::size_t batch_size = 32,
                                       std::size_t workers = 1) {
  if (batch_size < 1 || workers < 1) throw ConfigError("predict: batch_size and workers must be >= 1");
  const auto batches = batch_iter(ds, batch_size);
  std::vector<Prediction> out(ds.size());
  const TaskKind kind = model.config().task_kind;
  auto run_range = [&](std::size_t begin, std::size_t end) {
    NoGradGuard guard;
    for (std::size_t k = begin; k < end; ++k) {
      const auto& batch = batches[k];
      const Tensor logits = forward(model, detail::trim_padding(batch.tokens)).logits;
      const std::size_t c = logits.cols();
      for (std::size_t r = 0; r < batch.indices.size(); ++r) {
        const std::size_t i = batch.indices[r];
        std::span<const double> row = logits.data().subspan(r * c, c);
        out[i] = {ds.ids[i], ds.labels[i], detail::prediction_from_logits(row, kind),
                  std::vector<double>(row.begin(), row.end())};
      }
    }
  };
  workers = std::min(workers, std::max<std::size_t>(batches.size(), 1));
  if (workers == 1) {
    run_range(0, batches.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t per = (batches.size() + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t begin = std::min(batches.size(), w * per);
      const std::size_t end = std::min(batches.size(), begin + per);
      pool.emplace_back(run_range, begin, end);
    }
    for (auto& t : pool) t.join();
  }
  return out;
}

struct EvalResult {
  MetricReport report;
  PredictionLog log;
};

inline EvalResult evaluate(const Model& model, const EncodedDataset& ds, const TaskSpec& spec,
                           const std::string& model_id = "model", std::size_t workers = 1) {
  detail::check_arity(model.config(), spec);
  EvalResult r;
  r.log.model_id = model_id;
  r.log.task = spec.name;
  r.log.rows = predict(model, ds, 32, workers);
  r.report = metric_report(spec.metric, r.log.preds(), r.log.labels());
  return r;
}

// Fraction of examples on which two models' hard predictions agree.
inline double agreement(const Model& a, const Model& b, const EncodedDataset& ds) {
  const auto pa = predict(a, ds);
  const auto pb = predict(b, ds);
  std::size_t same = 0;
  for (std::size_t i = 0; i < pa.size(); ++i) same += pa[i].pred == pb[i].pred ? 1 : 0;
  return ds.size() == 0 ? 0.0 : static_cast<double>(same) / static_cast<double>(ds.size());
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct TrainResult {
  Model model;
  TrainLog log;
  std::size_t best_epoch = 0;
};

struct DistillResult {
  Model student;
  TrainLog log;
  std::size_t best_epoch = 0;
  LayerMap map;
};

using EpochCallback = std::function<void(const TrainRecord&)>;

namespace detail {

// One optimization stream shared by teacher training, fine-tuning and
// distillation. step_loss builds the loss for a batch and reports its parts.
inline TrainResult run_epochs(Model model, std::vector<NamedParam> extra_params, const TaskData& data,
                              const RunConfig& run,
                              const std::function<Tensor(const Model&, const Batch&, LossParts&)>& step_loss,
                              const EpochCallback& on_epoch) {
  run.validate();
  if (data.train.size() == 0) throw InputError("training set is empty");
  model.set_trainable(true);
  std::vector<NamedParam> params = model.params();
  for (auto& p : extra_params) params.push_back(p);
  AdamState adam(run.adam, params);

  TrainResult result;
  std::optional<Model> best;
  double best_metric = -std::numeric_limits<double>::infinity();
  for (std::size_t epoch = 1; epoch <= run.epochs; ++epoch) {
    LossParts sums;
    for (const auto& batch : batch_iter(data.train, run.batch_size, epoch_seed(run.seed, epoch))) {
      for (auto& p : params) p.value.zero_grad();
      LossParts parts;
      const Tensor loss = step_loss(model, batch, parts);
      parts.total = loss.item();
      if (!std::isfinite(parts.total)) throw NumericError("non-finite loss at epoch " + std::to_string(epoch));
      backward(loss);
      clip_grad_norm(params, run.clip_norm);
      adam_step(adam, params);
      result.log.steps.push_back(parts);
      const double w = static_cast<double>(batch.indices.size());
      sums.total += w * parts.total;
      sums.task += w * parts.task;
      sums.feature += w * parts.feature;
      sums.kd += w * parts.kd;
    }
    const double n = static_cast<double>(data.train.size());
    TrainRecord rec{epoch, {sums.total / n, sums.task / n, sums.feature / n, sums.kd / n}};
    if (data.dev.size() >= 2) rec.dev_metric = evaluate(model, data.dev, data.spec, "dev", run.eval_workers).report.value;
    result.log.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    const bool improved = !std::isnan(rec.dev_metric) && rec.dev_metric > best_metric;
    if (run.select_best && improved) {
      best_metric = rec.dev_metric;
      best = model.clone();
      result.best_epoch = epoch;
    }
  }
  if (run.select_best && best) {
    result.model = std::move(*best);
  } else {
    result.model = model.clone();
    result.best_epoch = run.epochs;
  }
  result.model.set_trainable(false);
  return result;
}

inline Tensor supervised_step(const Model& model, const Batch& batch, LossParts& parts) {
  const ForwardTrace trace = forward(model, trim_padding(batch.tokens));
  const Tensor loss = task_loss(trace.logits, batch.labels, model.config().task_kind);
  parts.task = loss.item();
  return loss;
}

}  // namespace detail

// Task-loss-only training from a fresh initialization seeded by run.seed.
inline TrainResult train_teacher(const ModelConfig& cfg, const TaskData& data, const RunConfig& run,
                                 const EpochCallback& on_epoch = {}) {
  cfg.validate();
  detail::check_arity(cfg, data.spec);
  return detail::run_epochs(build_model(cfg, run.seed), {}, data, run, detail::supervised_step, on_epoch);
}

// Task-loss-only training starting from the given weights (which are copied).
inline TrainResult finetune(const Model& model, const TaskData& data, const RunConfig& run,
                            const EpochCallback& on_epoch = {}) {
  detail::check_arity(model.config(), data.spec);
  return detail::run_epochs(model.clone(), {}, data, run, detail::supervised_step, on_epoch);
}

// Trains a student against a frozen teacher with the interpolated objective.
// The teacher is only ever read under NoGradGuard.
inline DistillResult distill(const Model& teacher, const ModelConfig& student_cfg, const TaskData& data,
                             const RunConfig& run, const EpochCallback& on_epoch = {}) {
  student_cfg.validate();
  run.validate();
  const ModelConfig& tc = teacher.config();
  detail::check_arity(tc, data.spec);
  detail::check_arity(student_cfg, data.spec);
  if (student_cfg.vocab_size != tc.vocab_size) {
    throw ConfigError("distill: student vocabulary (" + std::to_string(student_cfg.vocab_size) +
                      ") differs from teacher's (" + std::to_string(tc.vocab_size) + ")");
  }
  const LayerMap map = resolve_layer_map(run.layer_map, student_cfg.num_layers, tc.num_layers);
  Model student = run.init_from_teacher ? init_from_teacher(teacher, student_cfg, map, run.seed)
                                        : build_model(student_cfg, run.seed);
  const ProjectionSet proj = ProjectionSet::create(student_cfg, tc, map);
  std::vector<NamedParam> extra;
  const auto proj_tensors = proj.tensors();
  for (std::size_t i = 0; i < proj_tensors.size(); ++i) extra.push_back({"projection." + std::to_string(i), proj_tensors[i]});

  const DistillConfig& dc = run.distill;
  auto step = [&](const Model& s, const Batch& batch, LossParts& parts) {
    const TokenBatch tokens = detail::trim_padding(batch.tokens);
    ForwardTrace t;
    {
      NoGradGuard guard;
      t = forward(teacher, tokens);
    }
    const ForwardTrace st = forward(s, tokens);
    const Tensor l_task = task_loss(st.logits, batch.labels, student_cfg.task_kind);
    const Tensor l_int = feature_loss(t, st, map, proj);
    const Tensor l_kd = kd_response_loss(t.logits, st.logits, dc.temperature, dc.scale_kd_by_T2);
    parts.task = l_task.item();
    parts.feature = l_int.item();
    parts.kd = l_kd.item();
    return total_loss(l_task, l_int, l_kd, dc);
  };
  TrainResult r = detail::run_epochs(std::move(student), extra, data, run, step, on_epoch);
  return {std::move(r.model), std::move(r.log), r.best_epoch, map};
}

}  // namespace kdwb
