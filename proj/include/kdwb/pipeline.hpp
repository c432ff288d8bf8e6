#pragma once

// File-level orchestration behind the command-line tool: loading task data,
// reading and writing model directories, and the resumable experiment grid.

#include <atomic>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdwb/analysis.hpp"
#include "kdwb/benchmark.hpp"
#include "kdwb/checkpoint.hpp"
#include "kdwb/data.hpp"
#include "kdwb/distill.hpp"
#include "kdwb/error.hpp"
#include "kdwb/model.hpp"
#include "kdwb/train.hpp"

namespace kdwb {

namespace fs = std::filesystem;

// Command-line misuse or a missing input path. The tool exits with status 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

inline constexpr const char* kCheckpointFile = "model.ckpt";
inline constexpr const char* kVocabFile = "vocab.txt";
inline constexpr const char* kConfigSnapshot = "config.json";

inline void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw UsageError(what + ": no such file '" + p.string() + "'");
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  out << text;
}

// Write-then-rename so a reader never sees a half-written file.
inline void write_text_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  write_text(tmp, text);
  fs::rename(tmp, path);
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline nlohmann::json read_json(const fs::path& path) {
  require_file(path, "json");
  std::ifstream in(path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Task data
// ---------------------------------------------------------------------------

struct DataOptions {
  std::string task = "separable_pair";
  std::optional<fs::path> train_path;
  std::optional<fs::path> dev_path;
  std::size_t train_n = 2000;  // synthetic tasks only
  std::size_t dev_n = 500;
  std::uint64_t data_seed = 0;
  std::size_t max_len = 128;
  std::size_t min_freq = 1;

  bool synthetic() const { return task == "separable_pair" || task == "three_class_nli" || task == "similarity_regression"; }
};

inline void to_json(nlohmann::json& j, const DataOptions& d) {
  j = {{"task", d.task},
       {"train_path", d.train_path ? nlohmann::json(d.train_path->string()) : nlohmann::json(nullptr)},
       {"dev_path", d.dev_path ? nlohmann::json(d.dev_path->string()) : nlohmann::json(nullptr)},
       {"train_n", d.train_n},
       {"dev_n", d.dev_n},
       {"data_seed", d.data_seed},
       {"max_len", d.max_len},
       {"min_freq", d.min_freq}};
}

inline void from_json(const nlohmann::json& j, DataOptions& d) {
  const DataOptions def;
  d.task = j.value("task", def.task);
  if (j.contains("train_path") && !j["train_path"].is_null()) d.train_path = j["train_path"].get<std::string>();
  if (j.contains("dev_path") && !j["dev_path"].is_null()) d.dev_path = j["dev_path"].get<std::string>();
  d.train_n = j.value("train_n", def.train_n);
  d.dev_n = j.value("dev_n", def.dev_n);
  d.data_seed = j.value("data_seed", def.data_seed);
  d.max_len = j.value("max_len", def.max_len);
  d.min_freq = j.value("min_freq", def.min_freq);
}

struct RawTask {
  TaskSpec spec;
  Dataset train;
  Dataset dev;
};

// The dev split of a synthetic task uses data_seed + 1000 so it never shares
// the generator stream with the train split.
inline RawTask load_raw_task(const DataOptions& opt) {
  const auto spec = task_preset(opt.task);
  if (!spec) throw UsageError("unknown task '" + opt.task + "'");
  if (opt.max_len < 2) throw UsageError("--max-len must be at least 2");
  RawTask raw{*spec, {}, {}};
  if (opt.train_path || opt.dev_path) {
    if (!opt.train_path || !opt.dev_path) throw UsageError("task '" + opt.task + "' needs both --train and --dev");
    require_file(*opt.train_path, "train data");
    require_file(*opt.dev_path, "dev data");
    raw.train = load_tsv(*opt.train_path, *spec, Split::train);
    raw.dev = load_tsv(*opt.dev_path, *spec, Split::dev);
  } else if (opt.synthetic()) {
    const auto kind = synthetic_from_string(opt.task);
    raw.train = gen_synthetic(kind, opt.train_n, opt.data_seed);
    raw.dev = gen_synthetic(kind, opt.dev_n, opt.data_seed + 1000);
    raw.dev.split = Split::dev;
  } else {
    throw UsageError("task '" + opt.task + "' is not synthetic; pass --train and --dev TSV files");
  }
  return raw;
}

inline TaskData encode_task(const RawTask& raw, const Vocab& vocab, std::size_t max_len) {
  return {raw.spec, encode_dataset(vocab, raw.train, max_len), encode_dataset(vocab, raw.dev, max_len)};
}

// ---------------------------------------------------------------------------
// Model directories: model.ckpt with vocab.txt beside it
// ---------------------------------------------------------------------------

struct LoadedModel {
  Model model;
  Vocab vocab;
};

inline LoadedModel load_model_file(const fs::path& ckpt) {
  require_file(ckpt, "checkpoint");
  const fs::path vocab_path = ckpt.parent_path() / kVocabFile;
  require_file(vocab_path, "vocabulary next to checkpoint");
  LoadedModel lm{load_checkpoint(ckpt), Vocab::load(vocab_path)};
  if (lm.vocab.size() != lm.model.config().vocab_size) {
    throw FormatError("vocabulary '" + vocab_path.string() + "' has " + std::to_string(lm.vocab.size()) +
                      " entries but the checkpoint expects " + std::to_string(lm.model.config().vocab_size));
  }
  return lm;
}

inline void save_model_dir(const fs::path& dir, const Model& model, const Vocab& vocab) {
  fs::create_directories(dir);
  save_checkpoint(model, dir / kCheckpointFile);
  vocab.save(dir / kVocabFile);
}

// ---------------------------------------------------------------------------
// Single-step commands
// ---------------------------------------------------------------------------

struct ArchOptions {
  std::size_t layers = 12;
  std::size_t heads = 12;
  std::size_t hidden = 768;
  std::size_t ffn = 0;
  std::size_t max_positions = 514;
};

inline ModelConfig teacher_config(const ArchOptions& a, const TaskSpec& spec, std::size_t vocab_size) {
  ModelConfig c;
  c.num_layers = a.layers;
  c.num_heads = a.heads;
  c.hidden_dim = a.hidden;
  c.ffn_dim = a.ffn;
  c.max_positions = a.max_positions;
  c.vocab_size = vocab_size;
  c.num_outputs = spec.num_outputs();
  c.task_kind = spec.task_kind();
  c.validate();
  return c;
}

inline void check_positions(const ModelConfig& c, std::size_t max_len) {
  if (max_len > c.max_positions) {
    throw ConfigError("--max-len " + std::to_string(max_len) + " exceeds the model's " +
                      std::to_string(c.max_positions) + " positions");
  }
}

inline TrainResult cmd_train_teacher(const DataOptions& data, const ArchOptions& arch, const RunConfig& run,
                                     const fs::path& out) {
  run.validate();
  const RawTask raw = load_raw_task(data);
  const Vocab vocab = build_vocab(raw.train, data.min_freq);
  const ModelConfig cfg = teacher_config(arch, raw.spec, vocab.size());
  check_positions(cfg, data.max_len);
  write_json(out / kConfigSnapshot, {{"command", "train-teacher"}, {"data", data}, {"model", cfg}, {"run", run}});
  TrainResult r = train_teacher(cfg, encode_task(raw, vocab, data.max_len), run);
  save_model_dir(out, r.model, vocab);
  r.log.write_csv(out / "train_log.csv");
  return r;
}

struct StudentOptions {
  std::string preset;  // e.g. "6L_384D"; empty means use the explicit extents
  std::optional<std::size_t> layers;
  std::optional<std::size_t> heads;
  std::optional<std::size_t> hidden;
};

inline ModelConfig resolve_student(const StudentOptions& s, const ModelConfig& teacher) {
  if (s.preset.empty() && !s.layers && !s.heads && !s.hidden) {
    throw UsageError("distill needs --student NAME or explicit --layers/--heads/--hidden");
  }
  ModelConfig c = s.preset.empty() ? teacher : student_config(s.preset, teacher);
  if (s.layers) c.num_layers = *s.layers;
  if (s.heads) c.num_heads = *s.heads;
  if (s.hidden) {
    c.hidden_dim = *s.hidden;
    c.ffn_dim = 0;
  }
  c.validate();
  return c;
}

inline DistillResult cmd_distill(const fs::path& teacher_ckpt, const StudentOptions& student, const DataOptions& data,
                                 const RunConfig& run, const fs::path& out) {
  run.validate();
  const LoadedModel t = load_model_file(teacher_ckpt);
  const ModelConfig scfg = resolve_student(student, t.model.config());
  check_positions(scfg, data.max_len);
  const LayerMap map = resolve_layer_map(run.layer_map, scfg.num_layers, t.model.config().num_layers);
  const RawTask raw = load_raw_task(data);
  write_json(out / kConfigSnapshot, {{"command", "distill"},
                                     {"teacher", teacher_ckpt.string()},
                                     {"teacher_model", t.model.config()},
                                     {"student_preset", student.preset},
                                     {"model", scfg},
                                     {"layer_map", map.to_string()},
                                     {"data", data},
                                     {"run", run}});
  DistillResult r = distill(t.model, scfg, encode_task(raw, t.vocab, data.max_len), run);
  save_model_dir(out, r.student, t.vocab);
  r.log.write_csv(out / "train_log.csv");
  return r;
}

inline TrainResult cmd_finetune(const fs::path& model_ckpt, const DataOptions& data, const RunConfig& run,
                                const fs::path& out) {
  run.validate();
  const LoadedModel m = load_model_file(model_ckpt);
  check_positions(m.model.config(), data.max_len);
  const RawTask raw = load_raw_task(data);
  write_json(out / kConfigSnapshot, {{"command", "finetune"},
                                     {"init", model_ckpt.string()},
                                     {"model", m.model.config()},
                                     {"data", data},
                                     {"run", run}});
  TrainResult r = finetune(m.model, encode_task(raw, m.vocab, data.max_len), run);
  save_model_dir(out, r.model, m.vocab);
  r.log.write_csv(out / "train_log.csv");
  return r;
}

inline nlohmann::json metric_json(const MetricReport& r) {
  return {{"metric", to_string(r.kind)}, {"value", r.value}, {"count", r.count}, {"components", r.components},
          {"warnings", r.warnings}};
}

inline EvalResult cmd_evaluate(const fs::path& model_ckpt, const std::string& model_id, const DataOptions& data,
                               Split split, std::size_t workers, const fs::path& out) {
  const LoadedModel m = load_model_file(model_ckpt);
  check_positions(m.model.config(), data.max_len);
  const RawTask raw = load_raw_task(data);
  const EncodedDataset ds = encode_dataset(m.vocab, split == Split::dev ? raw.dev : raw.train, data.max_len);
  write_json(out / kConfigSnapshot, {{"command", "evaluate"},
                                     {"model", model_ckpt.string()},
                                     {"model_id", model_id},
                                     {"split", split == Split::dev ? "dev" : "train"},
                                     {"data", data}});
  EvalResult r = evaluate(m.model, ds, raw.spec, model_id, workers);
  r.log.task = raw.spec.name;
  r.log.write(out / "predictions.jsonl");
  write_json(out / "metrics.json", metric_json(r.report));
  return r;
}

struct NamedPath {
  std::string id;
  fs::path path;
};

// "id=path" or a bare path (id taken from the parent directory name).
inline NamedPath parse_named_path(const std::string& s) {
  const auto eq = s.find('=');
  if (eq != std::string::npos) return {s.substr(0, eq), s.substr(eq + 1)};
  const fs::path p(s);
  const std::string id = p.parent_path().filename().string();
  return {id.empty() ? p.stem().string() : id, p};
}

inline Table cmd_benchmark(const std::vector<NamedPath>& models, const std::vector<DataOptions>& tasks,
                           const BenchConfig& cfg, const fs::path& out) {
  cfg.validate();
  if (models.empty()) throw UsageError("benchmark needs at least one --model");
  if (tasks.empty()) throw UsageError("benchmark needs at least one --task");
  std::set<std::string> seen;
  for (const auto& m : models) {
    if (!seen.insert(m.id).second) throw UsageError("duplicate model id '" + m.id + "'");
    require_file(m.path, "checkpoint");
  }
  std::vector<LoadedModel> loaded;
  for (const auto& m : models) {
    loaded.push_back(load_model_file(m.path));
    check_positions(loaded.back().model.config(), cfg.seq_len);
  }
  // Every model reads the same text through its own vocabulary.
  std::vector<RawTask> raws;
  for (const auto& t : tasks) raws.push_back(load_raw_task(t));
  Table table = Table::with_shape({}, {});
  for (const auto& r : raws) table.cols.push_back(r.spec.name);
  table.comments = bench_header(cfg);
  for (std::size_t m = 0; m < models.size(); ++m) {
    table.rows.push_back(models[m].id);
    table.cells.emplace_back();
    for (const auto& r : raws) {
      const EncodedDataset ds = encode_dataset(loaded[m].vocab, r.dev, cfg.seq_len);
      table.cells.back().push_back(measure_throughput(loaded[m].model, ds, cfg));
    }
  }
  write_json(out / kConfigSnapshot, {{"command", "benchmark"}, {"bench", cfg}});
  write_text(out / "speed.csv", table.to_csv());
  return table;
}

// ---------------------------------------------------------------------------
// Analysis
// ---------------------------------------------------------------------------

struct AnalyzeOptions {
  std::optional<fs::path> scores;
  std::optional<fs::path> speed;
  // Per task: teacher prediction log and student logs (id -> path).
  std::map<std::string, fs::path> teacher_preds;
  std::map<std::string, std::vector<NamedPath>> student_preds;
  RecipeThresholds thresholds;
  std::vector<FactorGroup> groups = default_factor_groups();
};

struct AnalyzeOutputs {
  std::optional<DegradationMatrix> heatmap;
  std::optional<RecipeGrid> recipe;
  std::map<std::string, CategoryReport> categories;
};

// Groups restricted to members present in the score table; groups left empty
// are dropped.
inline std::vector<FactorGroup> present_groups(const std::vector<FactorGroup>& groups, const ScoreTable& scores) {
  std::vector<FactorGroup> out;
  for (const auto& g : groups) {
    FactorGroup kept{g.factor, {}};
    for (const auto& m : g.members) {
      if (scores.row_index(m)) kept.members.push_back(m);
    }
    if (!kept.members.empty()) out.push_back(kept);
  }
  return out;
}

inline AnalyzeOutputs cmd_analyze(const AnalyzeOptions& opt, const fs::path& out) {
  std::size_t students = 0;
  std::optional<ScoreTable> scores;
  if (opt.scores) {
    require_file(*opt.scores, "score table");
    scores = Table::read_csv(*opt.scores);
    students += scores->rows.size() - (scores->row_index(kBaselineId) ? 1 : 0);
  }
  for (const auto& [task, logs] : opt.student_preds) students += logs.size();
  if (students == 0) throw UsageError("analyze: no students given (score table has only a baseline row, no predictions)");
  std::optional<Table> speed;
  if (opt.speed) {
    require_file(*opt.speed, "speed table");
    speed = Table::read_csv(*opt.speed);
  }
  for (const auto& [task, logs] : opt.student_preds) {
    if (!opt.teacher_preds.count(task)) throw UsageError("analyze: student predictions for '" + task + "' but no teacher log");
    for (const auto& l : logs) require_file(l.path, "student prediction log");
  }
  for (const auto& [task, p] : opt.teacher_preds) require_file(p, "teacher prediction log");

  AnalyzeOutputs res;
  fs::create_directories(out);
  if (scores) {
    res.heatmap = degradation_heatmap(*scores);
    write_text(out / "heatmap.csv", res.heatmap->to_csv());
    write_text(out / "heatmap_plot.json",
               res.heatmap->plot_data("Relative degradation of students vs. baseline (%)").dump(2) + "\n");
    const auto groups = present_groups(opt.groups, *scores);
    if (!groups.empty() || speed) {
      res.recipe = recipe_table(*scores, speed, groups, opt.thresholds);
      write_text(out / "recipe.md", res.recipe->to_markdown());
    }
  }
  nlohmann::json disagreement = nlohmann::json::object();
  for (const auto& [task, tpath] : opt.teacher_preds) {
    const PredictionLog teacher = PredictionLog::read(tpath);
    const auto it = opt.student_preds.find(task);
    if (it == opt.student_preds.end() || it->second.empty()) continue;
    std::vector<PredictionLog> logs;
    const auto spec = task_preset(task);
    const TaskKind kind = spec ? spec->task_kind() : TaskKind::classification;
    for (const auto& s : it->second) {
      logs.push_back(PredictionLog::read(s.path));
      disagreement[task][s.id] = disagreement_rate(teacher, logs.back(), kind);
    }
    if (kind == TaskKind::regression) continue;  // categories need hard labels
    const CategoryReport rep = categorize_instances(teacher, logs);
    write_text(out / ("categories_" + task + ".csv"), rep.to_csv());
    write_text(out / ("categories_" + task + "_summary.csv"), rep.summary_csv());
    res.categories.emplace(task, rep);
  }
  if (!disagreement.empty()) write_text(out / "disagreement.json", disagreement.dump(2) + "\n");
  return res;
}

// ---------------------------------------------------------------------------
// Experiment grid
// ---------------------------------------------------------------------------

struct GridStudent {
  std::string name;
  std::string layer_map;  // empty: use run.layer_map
};

struct ExperimentManifest {
  std::map<std::string, fs::path> teachers;  // task -> checkpoint
  std::vector<GridStudent> students;
  std::vector<DataOptions> tasks;
  RunConfig run;
  BenchConfig bench;
  fs::path out;
};

inline ExperimentManifest parse_manifest(const nlohmann::json& j, const fs::path& base_dir = {}) {
  ExperimentManifest m;
  auto resolve = [&](const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
  };
  try {
    for (const auto& t : j.at("tasks")) {
      DataOptions d = t.is_string() ? DataOptions{} : t.get<DataOptions>();
      if (t.is_string()) d.task = t.get<std::string>();
      if (d.train_path) d.train_path = resolve(d.train_path->string());
      if (d.dev_path) d.dev_path = resolve(d.dev_path->string());
      m.tasks.push_back(d);
    }
    const auto& teacher = j.at("teacher");
    for (const auto& d : m.tasks) {
      if (teacher.is_string()) m.teachers[d.task] = resolve(teacher.get<std::string>());
      else m.teachers[d.task] = resolve(teacher.at(d.task).get<std::string>());
    }
    for (const auto& s : j.at("students")) {
      if (s.is_string()) m.students.push_back({s.get<std::string>(), ""});
      else m.students.push_back({s.at("name").get<std::string>(), s.value("layer_map", std::string())});
    }
    if (j.contains("run")) m.run = j["run"].get<RunConfig>();
    if (j.contains("bench")) m.bench = j["bench"].get<BenchConfig>();
    if (j.contains("out")) m.out = resolve(j["out"].get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("manifest: ") + e.what());
  }
  return m;
}

// Everything that can be checked without training: files, names, presets,
// layer maps, configs.
inline void validate_manifest(const ExperimentManifest& m) {
  if (m.students.empty()) throw UsageError("manifest: no students");
  if (m.tasks.empty()) throw UsageError("manifest: no tasks");
  m.run.validate();
  m.bench.validate();
  std::set<std::string> names;
  for (const auto& s : m.students) {
    if (s.name == kBaselineId) throw UsageError("manifest: student name 'baseline' is reserved for the teacher");
    if (!names.insert(s.name).second) throw UsageError("manifest: duplicate student '" + s.name + "'");
  }
  std::set<std::string> tasks;
  for (const auto& d : m.tasks) {
    if (!tasks.insert(d.task).second) throw UsageError("manifest: duplicate task '" + d.task + "'");
    if (!task_preset(d.task)) throw UsageError("manifest: unknown task '" + d.task + "'");
    if (d.train_path) require_file(*d.train_path, "train data");
    if (d.dev_path) require_file(*d.dev_path, "dev data");
    const fs::path& ckpt = m.teachers.at(d.task);
    require_file(ckpt, "teacher checkpoint");
    require_file(ckpt.parent_path() / kVocabFile, "vocabulary next to teacher checkpoint");
    const ModelConfig tc = read_checkpoint_header(ckpt).at("config").get<ModelConfig>();
    check_positions(tc, std::max(d.max_len, m.bench.seq_len));
    for (const auto& s : m.students) {
      const ModelConfig sc = student_config(s.name, tc);
      resolve_layer_map(s.layer_map.empty() ? m.run.layer_map : s.layer_map, sc.num_layers, tc.num_layers);
    }
  }
}

struct CellResult {
  std::string student;
  std::string task;
  std::string status;  // "done" or "failed"
  std::optional<double> metric;
  std::optional<double> throughput;
  std::string error;
};

inline void to_json(nlohmann::json& j, const CellResult& c) {
  j = {{"student", c.student},
       {"task", c.task},
       {"status", c.status},
       {"metric", c.metric ? nlohmann::json(*c.metric) : nlohmann::json(nullptr)},
       {"throughput", c.throughput ? nlohmann::json(*c.throughput) : nlohmann::json(nullptr)},
       {"error", c.error}};
}

inline void from_json(const nlohmann::json& j, CellResult& c) {
  c.student = j.at("student").get<std::string>();
  c.task = j.at("task").get<std::string>();
  c.status = j.at("status").get<std::string>();
  if (!j.at("metric").is_null()) c.metric = j["metric"].get<double>();
  if (!j.at("throughput").is_null()) c.throughput = j["throughput"].get<double>();
  c.error = j.value("error", std::string());
}

struct GridOptions {
  std::size_t jobs = 1;
  std::optional<std::size_t> max_cells;  // stop after this many pending cells
};

struct GridSummary {
  std::vector<CellResult> cells;  // manifest order, including skipped-as-done
  std::size_t ran = 0;
  std::size_t skipped = 0;
  std::size_t pending = 0;  // left for a later run because of max_cells
  std::vector<std::string> failures;
  std::optional<AnalyzeOutputs> analysis;
};

inline fs::path cell_dir(const fs::path& out, const std::string& model, const std::string& task) {
  return out / "cells" / model / task;
}

inline fs::path ledger_path(const fs::path& out, const std::string& model, const std::string& task) {
  return out / "progress" / (model + "__" + task + ".json");
}

namespace detail {

inline CellResult run_cell(const ExperimentManifest& m, const std::string& model_id, const std::string& layer_map,
                           const DataOptions& data) {
  CellResult c{model_id, data.task, "failed", std::nullopt, std::nullopt, ""};
  const fs::path dir = cell_dir(m.out, model_id, data.task);
  const fs::path teacher_ckpt = m.teachers.at(data.task);
  fs::path ckpt = teacher_ckpt;
  if (model_id != kBaselineId) {
    RunConfig run = m.run;
    if (!layer_map.empty()) run.layer_map = layer_map;
    cmd_distill(teacher_ckpt, StudentOptions{model_id, {}, {}, {}}, data, run, dir / "distill");
    ckpt = dir / "distill" / kCheckpointFile;
  }
  const EvalResult ev = cmd_evaluate(ckpt, model_id, data, Split::dev, m.run.eval_workers, dir / "evaluate");
  c.metric = ev.report.value;
  const LoadedModel lm = load_model_file(ckpt);
  const RawTask raw = load_raw_task(data);
  const EncodedDataset bench_ds = encode_dataset(lm.vocab, raw.dev, m.bench.seq_len);
  c.throughput = measure_throughput(lm.model, bench_ds, m.bench);
  c.status = "done";
  return c;
}

}  // namespace detail

// For each task: the teacher is evaluated and benchmarked as the "baseline"
// cell, then each student is distilled, evaluated and benchmarked. Finished
// cells are recorded in out/progress and skipped on later runs. Cells run on
// up to `jobs` threads; throughput measurements are serialized by the
// benchmark lock.
inline GridSummary run_grid(const ExperimentManifest& m, const GridOptions& opt) {
  validate_manifest(m);
  if (opt.jobs < 1) throw UsageError("--jobs must be >= 1");
  fs::create_directories(m.out / "progress");

  struct Job {
    std::string model;
    std::string layer_map;
    const DataOptions* data;
  };
  std::vector<Job> all;
  for (const auto& d : m.tasks) {
    all.push_back({kBaselineId, "", &d});
    for (const auto& s : m.students) all.push_back({s.name, s.layer_map, &d});
  }

  GridSummary sum;
  sum.cells.resize(all.size());
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < all.size(); ++i) {
    const fs::path lp = ledger_path(m.out, all[i].model, all[i].data->task);
    if (fs::exists(lp)) {
      const CellResult prev = read_json(lp).get<CellResult>();
      if (prev.status == "done") {
        sum.cells[i] = prev;
        ++sum.skipped;
        continue;
      }
    }
    todo.push_back(i);
  }
  if (opt.max_cells && todo.size() > *opt.max_cells) {
    sum.pending = todo.size() - *opt.max_cells;
    for (std::size_t k = *opt.max_cells; k < todo.size(); ++k) {
      sum.cells[todo[k]] = {all[todo[k]].model, all[todo[k]].data->task, "pending", {}, {}, ""};
    }
    todo.resize(*opt.max_cells);
  }

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < todo.size(); k = next++) {
      const Job& job = all[todo[k]];
      CellResult c;
      try {
        c = detail::run_cell(m, job.model, job.layer_map, *job.data);
      } catch (const std::exception& e) {
        c = {job.model, job.data->task, "failed", std::nullopt, std::nullopt, e.what()};
      }
      write_text_atomic(ledger_path(m.out, job.model, job.data->task), nlohmann::json(c).dump(2) + "\n");
      sum.cells[todo[k]] = c;
    }
  };
  std::vector<std::thread> threads;
  for (std::size_t t = 1; t < std::min(opt.jobs, todo.size()); ++t) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
  sum.ran = todo.size();

  for (const auto& c : sum.cells) {
    if (c.status == "failed") sum.failures.push_back(c.student + "/" + c.task + ": " + c.error);
  }
  if (sum.pending > 0) return sum;

  // Aggregate tables from every finished cell, then analyze.
  std::vector<std::string> rows = {kBaselineId};
  for (const auto& s : m.students) rows.push_back(s.name);
  std::vector<std::string> cols;
  for (const auto& d : m.tasks) cols.push_back(d.task);
  ScoreTable scores = Table::with_shape(rows, cols);
  Table speed = Table::with_shape(rows, cols);
  speed.comments = bench_header(m.bench);
  for (const auto& c : sum.cells) {
    if (c.status != "done") continue;
    scores.set(c.student, c.task, *c.metric);
    speed.set(c.student, c.task, *c.throughput);
  }
  const fs::path reports = m.out / "reports";
  fs::create_directories(reports);
  scores.write_csv(reports / "scores.csv");
  speed.write_csv(reports / "speed.csv");

  AnalyzeOptions ao;
  ao.scores = reports / "scores.csv";
  ao.speed = reports / "speed.csv";
  for (const auto& d : m.tasks) {
    const fs::path tlog = cell_dir(m.out, kBaselineId, d.task) / "evaluate" / "predictions.jsonl";
    if (!fs::exists(tlog)) continue;
    ao.teacher_preds[d.task] = tlog;
    for (const auto& s : m.students) {
      const fs::path slog = cell_dir(m.out, s.name, d.task) / "evaluate" / "predictions.jsonl";
      if (fs::exists(slog)) ao.student_preds[d.task].push_back({s.name, slog});
    }
  }
  const bool any_student = std::any_of(sum.cells.begin(), sum.cells.end(), [](const CellResult& c) {
    return c.status == "done" && c.student != kBaselineId;
  });
  if (any_student) {
    try {
      sum.analysis = cmd_analyze(ao, reports);
    } catch (const std::exception& e) {
      sum.failures.push_back(std::string("analyze: ") + e.what());
    }
  }
  nlohmann::json summary = {{"cells", sum.cells}, {"failures", sum.failures}};
  write_text(reports / "summary.json", summary.dump(2) + "\n");
  return sum;
}

}  // namespace kdwb
