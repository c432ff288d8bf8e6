#pragma once

#include <algorithm>
#include <chrono>
#include <fstream>
#include <functional>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdwb/analysis.hpp"
#include "kdwb/data.hpp"
#include "kdwb/error.hpp"
#include "kdwb/model.hpp"

namespace kdwb {

struct BenchConfig {
  std::size_t batch_size = 12;
  std::size_t seq_len = 128;
  std::size_t warmup_batches = 2;
  std::size_t measured_batches = 10;
  std::size_t repetitions = 3;

  void validate() const {
    if (batch_size < 1 || seq_len < 1) throw ConfigError("bench: batch_size and seq_len must be >= 1");
    if (measured_batches < 10) throw ConfigError("bench: measured_batches must be >= 10");
    if (repetitions < 3) throw ConfigError("bench: repetitions must be >= 3");
  }

  bool operator==(const BenchConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const BenchConfig& c) {
  j = {{"batch_size", c.batch_size},
       {"seq_len", c.seq_len},
       {"warmup_batches", c.warmup_batches},
       {"measured_batches", c.measured_batches},
       {"repetitions", c.repetitions}};
}

inline void from_json(const nlohmann::json& j, BenchConfig& c) {
  const BenchConfig d;
  c.batch_size = j.value("batch_size", d.batch_size);
  c.seq_len = j.value("seq_len", d.seq_len);
  c.warmup_batches = j.value("warmup_batches", d.warmup_batches);
  c.measured_batches = j.value("measured_batches", d.measured_batches);
  c.repetitions = j.value("repetitions", d.repetitions);
}

// Seconds from an arbitrary epoch. Replaceable so tests can drive the harness.
using BenchClock = std::function<double()>;

inline double steady_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

inline std::string hardware_description() {
  std::string cpu = "unknown cpu";
  std::ifstream info("/proc/cpuinfo");
  for (std::string line; std::getline(info, line);) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) cpu = line.substr(line.find_first_not_of(' ', colon + 1));
      break;
    }
  }
  return cpu + "; " + std::to_string(std::max(1u, std::thread::hardware_concurrency())) + " hw threads";
}

namespace detail {

// Measurements never overlap within a process.
inline std::mutex& bench_mutex() {
  static std::mutex m;
  return m;
}

// Rows cycle through the dataset and are cut or padded to seq_len.
inline TokenBatch bench_batch(const EncodedDataset& ds, std::size_t batch_index, const BenchConfig& cfg) {
  TokenBatch tb;
  tb.batch = cfg.batch_size;
  tb.seq_len = cfg.seq_len;
  tb.ids.reserve(cfg.batch_size * cfg.seq_len);
  tb.mask.reserve(cfg.batch_size * cfg.seq_len);
  for (std::size_t r = 0; r < cfg.batch_size; ++r) {
    const auto& row = ds.rows[(batch_index * cfg.batch_size + r) % ds.size()];
    for (std::size_t t = 0; t < cfg.seq_len; ++t) {
      const bool have = t < row.ids.size();
      tb.ids.push_back(have ? row.ids[t] : Vocab::kPad);
      tb.mask.push_back(have ? row.mask[t] : 0);
    }
  }
  return tb;
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

struct ThroughputResult {
  double samples_per_sec = 0.0;          // median over repetitions
  std::vector<double> per_repetition;
};

// Forward-only inference throughput. Warmup batches run before every
// repetition and are not timed; inputs are built ahead of the timed loop.
inline ThroughputResult measure_throughput_detail(const Model& model, const EncodedDataset& ds, const BenchConfig& cfg,
                                                  const BenchClock& clock = steady_seconds) {
  cfg.validate();
  if (ds.size() == 0) throw InputError("bench: empty dataset");
  std::vector<TokenBatch> batches;
  for (std::size_t b = 0; b < cfg.warmup_batches + cfg.measured_batches; ++b) {
    batches.push_back(detail::bench_batch(ds, b, cfg));
  }
  std::lock_guard lock(detail::bench_mutex());
  NoGradGuard guard;
  ThroughputResult out;
  for (std::size_t rep = 0; rep < cfg.repetitions; ++rep) {
    for (std::size_t b = 0; b < cfg.warmup_batches; ++b) forward(model, batches[b]);
    const double start = clock();
    for (std::size_t b = 0; b < cfg.measured_batches; ++b) forward(model, batches[cfg.warmup_batches + b]);
    const double elapsed = clock() - start;
    if (!(elapsed > 0.0)) throw HarnessError("bench: measured zero elapsed time; increase measured_batches");
    out.per_repetition.push_back(static_cast<double>(cfg.measured_batches * cfg.batch_size) / elapsed);
  }
  out.samples_per_sec = detail::median(out.per_repetition);
  return out;
}

inline double measure_throughput(const Model& model, const EncodedDataset& ds, const BenchConfig& cfg,
                                 const BenchClock& clock = steady_seconds) {
  return measure_throughput_detail(model, ds, cfg, clock).samples_per_sec;
}

struct BenchModel {
  std::string id;
  const Model* model = nullptr;
};

struct BenchTask {
  std::string name;
  const EncodedDataset* data = nullptr;
};

inline std::vector<std::string> bench_header(const BenchConfig& cfg) {
  return {"batch_size=" + std::to_string(cfg.batch_size),
          "seq_len=" + std::to_string(cfg.seq_len),
          "warmup_batches=" + std::to_string(cfg.warmup_batches),
          "measured_batches=" + std::to_string(cfg.measured_batches),
          "repetitions=" + std::to_string(cfg.repetitions),
          "statistic=median samples/sec, forward only",
          "threads=1",
          "hardware=" + hardware_description()};
}

// Every (model, task) cell under one config; the config goes into the
// table's '#' header lines.
inline Table speed_report(const std::vector<BenchModel>& models, const std::vector<BenchTask>& tasks,
                          const BenchConfig& cfg, const BenchClock& clock = steady_seconds) {
  cfg.validate();
  std::vector<std::string> ids;
  std::vector<std::string> names;
  for (const auto& m : models) {
    if (!m.model) throw InputError("bench: model '" + m.id + "' not loaded");
    ids.push_back(m.id);
  }
  for (const auto& t : tasks) {
    if (!t.data) throw InputError("bench: task '" + t.name + "' has no data");
    names.push_back(t.name);
  }
  Table table = Table::with_shape(ids, names);
  table.comments = bench_header(cfg);
  for (std::size_t m = 0; m < models.size(); ++m) {
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      table.cells[m][t] = measure_throughput(*models[m].model, *tasks[t].data, cfg, clock);
    }
  }
  return table;
}

}  // namespace kdwb
