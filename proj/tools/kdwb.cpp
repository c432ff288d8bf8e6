// kdwb: train teachers, distill students, evaluate, benchmark and analyze.
//
// Exit status: 0 success, 1 runtime failure (including failed grid cells),
// 2 usage error or missing input path.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <sstream>

#include "kdwb/pipeline.hpp"

namespace {

using namespace kdwb;

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

// KDWB_OUT, when set, wins over --out.
fs::path resolve_out(const std::string& flag) {
  const char* env = std::getenv("KDWB_OUT");
  if (env != nullptr && *env != '\0') return fs::path(env);
  return fs::path(flag);
}

DistillConfig parse_weights(DistillConfig cfg, const std::string& s) {
  std::vector<double> w;
  std::stringstream ss(s);
  for (std::string part; std::getline(ss, part, ',');) {
    try {
      std::size_t used = 0;
      w.push_back(std::stod(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw UsageError("--weights: '" + part + "' is not a number");
    }
  }
  if (w.size() != 3) throw UsageError("--weights expects three comma-separated values: hard,int,kd");
  cfg.w_hard = w[0];
  cfg.w_int = w[1];
  cfg.w_kd = w[2];
  return cfg;
}

void add_data_options(CLI::App* sub, DataOptions& d, std::string& train, std::string& dev) {
  sub->add_option("--task", d.task, "Task preset (GLUE name or synthetic task)")->capture_default_str();
  sub->add_option("--train", train, "Train split TSV (GLUE tasks)");
  sub->add_option("--dev", dev, "Dev split TSV (GLUE tasks)");
  sub->add_option("--train-n", d.train_n, "Synthetic train size")->capture_default_str();
  sub->add_option("--dev-n", d.dev_n, "Synthetic dev size")->capture_default_str();
  sub->add_option("--data-seed", d.data_seed, "Synthetic generator seed")->capture_default_str();
  sub->add_option("--max-len", d.max_len, "Tokens per encoded row")->capture_default_str();
  sub->add_option("--min-freq", d.min_freq, "Vocabulary frequency cutoff")->capture_default_str();
}

void finish_data_options(DataOptions& d, const std::string& train, const std::string& dev) {
  if (!train.empty()) d.train_path = train;
  if (!dev.empty()) d.dev_path = dev;
}

struct RunFlags {
  RunConfig run;
  std::string weights = "0.33,0.33,0.33";
  bool keep_last = false;
};

void add_run_options(CLI::App* sub, RunFlags& f, bool distill_flags) {
  RunConfig& r = f.run;
  sub->add_option("--epochs", r.epochs, "Training epochs")->capture_default_str();
  sub->add_option("--batch-size", r.batch_size, "Examples per step")->capture_default_str();
  sub->add_option("--lr", r.adam.lr, "Adam learning rate")->capture_default_str();
  sub->add_option("--seed", r.seed, "Initialization and shuffling seed")->capture_default_str();
  sub->add_option("--clip-norm", r.clip_norm, "Global gradient-norm clip")->capture_default_str();
  sub->add_option("--eval-workers", r.eval_workers, "Threads for dev evaluation")->capture_default_str();
  sub->add_flag("--keep-last", f.keep_last, "Keep the final epoch instead of the best dev epoch");
  if (!distill_flags) return;
  sub->add_option("--temperature", r.distill.temperature, "Softmax temperature for the KD term")->capture_default_str();
  sub->add_option("--weights", f.weights, "Loss weights hard,int,kd")->capture_default_str();
  sub->add_option("--layer-map", r.layer_map, "auto, uniform, identity, paper-3L/6L/9L or pairs like 1:1,2:5")
      ->capture_default_str();
  sub->add_flag("--init-from-teacher", r.init_from_teacher, "Copy mapped teacher blocks into the student");
  sub->add_flag("--scale-kd-t2", r.distill.scale_kd_by_T2, "Multiply the KD term by T^2");
}

RunConfig finish_run(RunFlags& f, bool distill_flags) {
  if (distill_flags) f.run.distill = parse_weights(f.run.distill, f.weights);
  f.run.select_best = !f.keep_last;
  f.run.validate();
  return f.run;
}

void add_bench_options(CLI::App* sub, BenchConfig& b) {
  sub->add_option("--batch-size", b.batch_size, "Examples per forward pass")->capture_default_str();
  sub->add_option("--seq-len", b.seq_len, "Tokens per example")->capture_default_str();
  sub->add_option("--warmup", b.warmup_batches, "Untimed batches per repetition")->capture_default_str();
  sub->add_option("--measured", b.measured_batches, "Timed batches per repetition")->capture_default_str();
  sub->add_option("--repetitions", b.repetitions, "Repetitions (median reported)")->capture_default_str();
}

std::pair<std::string, std::string> split_at(const std::string& s, char sep, const std::string& flag) {
  const auto pos = s.find(sep);
  if (pos == std::string::npos || pos == 0 || pos + 1 == s.size()) {
    throw UsageError(flag + ": expected KEY" + std::string(1, sep) + "VALUE, got '" + s + "'");
  }
  return {s.substr(0, pos), s.substr(pos + 1)};
}

int run(int argc, char** argv) {
  CLI::App app{"Knowledge-distillation workbench"};
  app.require_subcommand(1);
  std::string out = "kdwb_out";
  auto add_out = [&](CLI::App* sub) {
    sub->add_option("--out", out, "Output directory (KDWB_OUT overrides)")->capture_default_str();
  };

  // train-teacher
  auto* tt = app.add_subcommand("train-teacher", "Train a teacher on a task");
  DataOptions tt_data;
  std::string tt_train, tt_dev;
  ArchOptions arch;
  RunFlags tt_run;
  add_data_options(tt, tt_data, tt_train, tt_dev);
  tt->add_option("--layers", arch.layers, "Encoder blocks")->capture_default_str();
  tt->add_option("--heads", arch.heads, "Attention heads")->capture_default_str();
  tt->add_option("--hidden", arch.hidden, "Hidden width")->capture_default_str();
  tt->add_option("--ffn", arch.ffn, "Feed-forward width (0: 4 x hidden)")->capture_default_str();
  tt->add_option("--max-positions", arch.max_positions, "Position table size")->capture_default_str();
  add_run_options(tt, tt_run, false);
  add_out(tt);

  // distill
  auto* di = app.add_subcommand("distill", "Distill a teacher checkpoint into a student");
  std::string di_teacher;
  StudentOptions student;
  std::size_t s_layers = 0, s_heads = 0, s_hidden = 0;
  DataOptions di_data;
  std::string di_train, di_dev;
  RunFlags di_run;
  di->add_option("--teacher", di_teacher, "Teacher checkpoint (vocab.txt beside it)")->required();
  di->add_option("--student", student.preset, "Student preset such as 6L, 8AH, 384D, 6L_384D");
  di->add_option("--layers", s_layers, "Override student depth");
  di->add_option("--heads", s_heads, "Override student heads");
  di->add_option("--hidden", s_hidden, "Override student width");
  add_data_options(di, di_data, di_train, di_dev);
  add_run_options(di, di_run, true);
  add_out(di);

  // finetune
  auto* ft = app.add_subcommand("finetune", "Continue task training from a checkpoint");
  std::string ft_model;
  DataOptions ft_data;
  std::string ft_train, ft_dev;
  RunFlags ft_run;
  ft->add_option("--model", ft_model, "Checkpoint to start from")->required();
  add_data_options(ft, ft_data, ft_train, ft_dev);
  add_run_options(ft, ft_run, false);
  add_out(ft);

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Write predictions and the task metric");
  std::string ev_model, ev_id = "model", ev_split = "dev";
  std::size_t ev_workers = 1;
  DataOptions ev_data;
  std::string ev_train, ev_dev;
  ev->add_option("--model", ev_model, "Checkpoint")->required();
  ev->add_option("--model-id", ev_id, "Id recorded in the prediction log")->capture_default_str();
  ev->add_option("--split", ev_split, "dev or train")->check(CLI::IsMember({"dev", "train"}))->capture_default_str();
  ev->add_option("--workers", ev_workers, "Threads")->capture_default_str();
  add_data_options(ev, ev_data, ev_train, ev_dev);
  add_out(ev);

  // benchmark
  auto* bm = app.add_subcommand("benchmark", "Measure forward throughput (samples/sec)");
  std::vector<std::string> bm_models, bm_tasks, bm_tsv;
  BenchConfig bench;
  std::size_t bm_dev_n = 500;
  std::uint64_t bm_seed = 0;
  bm->add_option("--model", bm_models, "ID=checkpoint (repeatable)")->required();
  bm->add_option("--task", bm_tasks, "Synthetic task (repeatable)");
  bm->add_option("--tsv", bm_tsv, "TASK=file.tsv for a GLUE task (repeatable)");
  bm->add_option("--dev-n", bm_dev_n, "Synthetic examples to cycle through")->capture_default_str();
  bm->add_option("--data-seed", bm_seed, "Synthetic generator seed")->capture_default_str();
  add_bench_options(bm, bench);
  add_out(bm);

  // analyze
  auto* an = app.add_subcommand("analyze", "Heatmap, recipe table and instance categories");
  std::string an_scores, an_speed;
  std::vector<std::string> an_teacher, an_students;
  AnalyzeOptions aopt;
  an->add_option("--scores", an_scores, "Score table CSV (must contain a 'baseline' row)");
  an->add_option("--speed", an_speed, "Speed table CSV");
  an->add_option("--teacher-preds", an_teacher, "TASK=predictions.jsonl (repeatable)");
  an->add_option("--student-preds", an_students, "TASK:ID=predictions.jsonl (repeatable)");
  an->add_option("--t-ok", aopt.thresholds.t_ok, "Recipe OK threshold")->capture_default_str();
  an->add_option("--t-bad", aopt.thresholds.t_bad, "Recipe BAD threshold")->capture_default_str();
  add_out(an);

  // run-grid
  auto* rg = app.add_subcommand("run-grid", "Run or resume a distill/evaluate/benchmark grid from a manifest");
  std::string manifest_path;
  GridOptions gopt;
  std::size_t max_cells = 0;
  rg->add_option("--manifest", manifest_path, "Experiment manifest (JSON)")->required();
  rg->add_option("--jobs", gopt.jobs, "Cells run concurrently")->capture_default_str();
  rg->add_option("--max-cells", max_cells, "Stop after this many cells (resume later)");
  rg->add_option("--out", out, "Output directory (overrides the manifest; KDWB_OUT overrides both)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  const fs::path out_dir = resolve_out(out);
  if (*tt) {
    finish_data_options(tt_data, tt_train, tt_dev);
    const RunConfig rc = finish_run(tt_run, false);
    const auto r = cmd_train_teacher(tt_data, arch, rc, out_dir);
    std::cout << "teacher: " << r.model.scalar_count() << " parameters, best epoch " << r.best_epoch << " -> "
              << (out_dir / kCheckpointFile).string() << '\n';
  } else if (*di) {
    finish_data_options(di_data, di_train, di_dev);
    if (s_layers) student.layers = s_layers;
    if (s_heads) student.heads = s_heads;
    if (s_hidden) student.hidden = s_hidden;
    const RunConfig rc = finish_run(di_run, true);
    const auto r = cmd_distill(di_teacher, student, di_data, rc, out_dir);
    std::cout << "student: " << r.student.scalar_count() << " parameters, map " << r.map.to_string()
              << ", best epoch " << r.best_epoch << " -> " << (out_dir / kCheckpointFile).string() << '\n';
  } else if (*ft) {
    finish_data_options(ft_data, ft_train, ft_dev);
    const RunConfig rc = finish_run(ft_run, false);
    const auto r = cmd_finetune(ft_model, ft_data, rc, out_dir);
    std::cout << "finetuned: best epoch " << r.best_epoch << " -> " << (out_dir / kCheckpointFile).string() << '\n';
  } else if (*ev) {
    finish_data_options(ev_data, ev_train, ev_dev);
    const auto r = cmd_evaluate(ev_model, ev_id, ev_data, ev_split == "dev" ? Split::dev : Split::train, ev_workers,
                                out_dir);
    std::cout << to_string(r.report.kind) << " = " << r.report.value << " over " << r.report.count << " examples\n";
    for (const auto& w : r.report.warnings) std::cerr << "warning: " << w << '\n';
  } else if (*bm) {
    std::vector<NamedPath> models;
    for (const auto& m : bm_models) models.push_back(parse_named_path(m));
    std::vector<DataOptions> tasks;
    for (const auto& t : bm_tasks) {
      DataOptions d;
      d.task = t;
      d.dev_n = bm_dev_n;
      d.data_seed = bm_seed;
      tasks.push_back(d);
    }
    for (const auto& t : bm_tsv) {
      const auto [task, path] = split_at(t, '=', "--tsv");
      DataOptions d;
      d.task = task;
      d.train_path = path;
      d.dev_path = path;
      tasks.push_back(d);
    }
    const Table t = cmd_benchmark(models, tasks, bench, out_dir);
    std::cout << t.to_csv(6);
  } else if (*an) {
    if (!an_scores.empty()) aopt.scores = an_scores;
    if (!an_speed.empty()) aopt.speed = an_speed;
    for (const auto& s : an_teacher) {
      const auto [task, path] = split_at(s, '=', "--teacher-preds");
      aopt.teacher_preds[task] = path;
    }
    for (const auto& s : an_students) {
      const auto [key, path] = split_at(s, '=', "--student-preds");
      const auto [task, id] = split_at(key, ':', "--student-preds");
      aopt.student_preds[task].push_back({id, path});
    }
    const auto res = cmd_analyze(aopt, out_dir);
    if (res.recipe) std::cout << res.recipe->to_markdown();
    for (const auto& [task, rep] : res.categories) std::cout << task << ":\n" << rep.summary_csv();
    std::cout << "reports -> " << out_dir.string() << '\n';
  } else if (*rg) {
    require_file(manifest_path, "manifest");
    ExperimentManifest m = parse_manifest(read_json(manifest_path), fs::path(manifest_path).parent_path());
    const char* env = std::getenv("KDWB_OUT");
    if ((env != nullptr && *env != '\0') || rg->count("--out") > 0 || m.out.empty()) m.out = out_dir;
    if (max_cells > 0) gopt.max_cells = max_cells;
    const GridSummary s = run_grid(m, gopt);
    std::cout << "cells: " << s.ran << " run, " << s.skipped << " already done, " << s.pending << " pending\n";
    if (s.pending > 0) std::cout << "rerun the same command to resume\n";
    for (const auto& f : s.failures) std::cerr << "FAILED " << f << '\n';
    if (!s.failures.empty()) return kExitFailure;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const kdwb::UsageError& e) {
    std::cerr << "kdwb: " << e.what() << '\n';
    return kExitUsage;
  } catch (const kdwb::ConfigError& e) {
    std::cerr << "kdwb: invalid configuration: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "kdwb: " << e.what() << '\n';
    return kExitFailure;
  }
}
