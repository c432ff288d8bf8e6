#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdwb/data.hpp"
#include "kdwb/error.hpp"
#include "kdwb/metrics.hpp"
#include "kdwb/train.hpp"

namespace kdwb {

// ---------------------------------------------------------------------------
// Labelled grid with CSV I/O
// ---------------------------------------------------------------------------

// Rows are model ids, columns are task names. Empty CSV cells are missing
// values. Lines starting with '#' carry free-form metadata.
struct Table {
  std::vector<std::string> rows;
  std::vector<std::string> cols;
  std::vector<std::vector<std::optional<double>>> cells;
  std::vector<std::string> comments;

  static Table with_shape(std::vector<std::string> rows, std::vector<std::string> cols) {
    Table t;
    t.rows = std::move(rows);
    t.cols = std::move(cols);
    t.cells.assign(t.rows.size(), std::vector<std::optional<double>>(t.cols.size()));
    return t;
  }

  std::optional<std::size_t> row_index(const std::string& r) const {
    const auto it = std::find(rows.begin(), rows.end(), r);
    return it == rows.end() ? std::nullopt : std::optional<std::size_t>(it - rows.begin());
  }
  std::optional<std::size_t> col_index(const std::string& c) const {
    const auto it = std::find(cols.begin(), cols.end(), c);
    return it == cols.end() ? std::nullopt : std::optional<std::size_t>(it - cols.begin());
  }

  std::optional<double> get(const std::string& r, const std::string& c) const {
    const auto ri = row_index(r);
    const auto ci = col_index(c);
    if (!ri || !ci) return std::nullopt;
    return cells[*ri][*ci];
  }

  void set(const std::string& r, const std::string& c, double v) {
    auto ri = row_index(r);
    if (!ri) {
      rows.push_back(r);
      cells.emplace_back(cols.size());
      ri = rows.size() - 1;
    }
    auto ci = col_index(c);
    if (!ci) {
      cols.push_back(c);
      for (auto& row : cells) row.emplace_back();
      ci = cols.size() - 1;
    }
    cells[*ri][*ci] = v;
  }

  std::string to_csv(int precision = 17) const {
    std::ostringstream out;
    out << std::setprecision(precision);
    for (const auto& c : comments) out << "# " << c << '\n';
    out << "model";
    for (const auto& c : cols) out << ',' << c;
    out << '\n';
    for (std::size_t r = 0; r < rows.size(); ++r) {
      out << rows[r];
      for (const auto& v : cells[r]) {
        out << ',';
        if (v) out << *v;
      }
      out << '\n';
    }
    return out.str();
  }

  static Table parse_csv(std::istream& in, const std::string& source = "<csv>") {
    Table t;
    std::string line;
    std::size_t lineno = 0;
    bool header = false;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      if (line[0] == '#') {
        t.comments.push_back(line.size() > 2 && line[1] == ' ' ? line.substr(2) : line.substr(1));
        continue;
      }
      std::vector<std::string> fields;
      std::stringstream ss(line);
      std::string f;
      while (std::getline(ss, f, ',')) fields.push_back(f);
      if (!line.empty() && line.back() == ',') fields.emplace_back();
      if (!header) {
        if (fields.size() < 2) throw FormatError(source + ":" + std::to_string(lineno) + ": header needs task columns");
        t.cols.assign(fields.begin() + 1, fields.end());
        header = true;
        continue;
      }
      if (fields.size() != t.cols.size() + 1) {
        throw FormatError(source + ":" + std::to_string(lineno) + ": expected " + std::to_string(t.cols.size() + 1) +
                          " fields, got " + std::to_string(fields.size()));
      }
      t.rows.push_back(fields[0]);
      t.cells.emplace_back();
      for (std::size_t i = 1; i < fields.size(); ++i) {
        if (fields[i].empty()) {
          t.cells.back().emplace_back();
          continue;
        }
        try {
          std::size_t used = 0;
          const double v = std::stod(fields[i], &used);
          if (used != fields[i].size()) throw std::invalid_argument("trailing");
          t.cells.back().emplace_back(v);
        } catch (const std::exception&) {
          throw FormatError(source + ":" + std::to_string(lineno) + ": '" + fields[i] + "' is not a number");
        }
      }
    }
    if (!header) throw FormatError(source + ": empty table");
    return t;
  }

  static Table read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open table '" + path.string() + "'");
    return parse_csv(in, path.string());
  }

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write '" + path.string() + "'");
    out << to_csv();
  }
};

using ScoreTable = Table;

inline constexpr const char* kBaselineId = "baseline";

// ---------------------------------------------------------------------------
// Degradation heatmap
// ---------------------------------------------------------------------------

// Integer percentage, half away from zero. The value is first rounded to nine
// decimals so binary noise (27.500000000000007) cannot decide a tie.
inline long round_percent(double x) {
  const double cleaned = std::round(x * 1e9) / 1e9;
  return std::lround(cleaned);
}

struct DegradationMatrix {
  std::vector<std::string> rows;  // students
  std::vector<std::string> cols;  // tasks
  std::vector<std::vector<std::optional<long>>> cells;
  std::vector<std::vector<bool>> clamped;

  std::optional<long> get(const std::string& r, const std::string& c) const {
    const auto ri = std::find(rows.begin(), rows.end(), r);
    const auto ci = std::find(cols.begin(), cols.end(), c);
    if (ri == rows.end() || ci == cols.end()) return std::nullopt;
    return cells[ri - rows.begin()][ci - cols.begin()];
  }

  std::string to_csv() const {
    std::ostringstream out;
    out << "model";
    for (const auto& c : cols) out << ',' << c;
    out << '\n';
    std::vector<std::string> notes;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      out << rows[r];
      for (std::size_t c = 0; c < cols.size(); ++c) {
        out << ',';
        if (cells[r][c]) out << *cells[r][c];
        if (clamped[r][c]) notes.push_back(rows[r] + "/" + cols[c]);
      }
      out << '\n';
    }
    if (!notes.empty()) {
      out << "# clamped to 0 (student scored above baseline):";
      for (const auto& n : notes) out << ' ' << n;
      out << '\n';
    }
    return out.str();
  }

  // Grid description for external plotting: rows, cols, values (null when
  // missing), clamped flags.
  nlohmann::json plot_data(const std::string& title) const {
    nlohmann::json values = nlohmann::json::array();
    for (const auto& row : cells) {
      nlohmann::json r = nlohmann::json::array();
      for (const auto& v : row) r.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
      values.push_back(r);
    }
    return {{"title", title}, {"rows", rows}, {"cols", cols}, {"values", values}, {"clamped", clamped},
            {"unit", "percent"}};
  }
};

// cell = round(100 * (baseline - student) / baseline), negatives clamped to 0.
inline DegradationMatrix degradation_heatmap(const ScoreTable& scores, const std::string& baseline = kBaselineId) {
  const auto base_row = scores.row_index(baseline);
  if (!base_row) throw InputError("score table has no '" + baseline + "' row");
  DegradationMatrix m;
  m.cols = scores.cols;
  for (std::size_t r = 0; r < scores.rows.size(); ++r) {
    if (r == *base_row) continue;
    m.rows.push_back(scores.rows[r]);
    m.cells.emplace_back();
    m.clamped.emplace_back();
    for (std::size_t c = 0; c < scores.cols.size(); ++c) {
      const auto& b = scores.cells[*base_row][c];
      const auto& s = scores.cells[r][c];
      if (!b || !s) {
        m.cells.back().emplace_back();
        m.clamped.back().push_back(false);
        continue;
      }
      if (!(*b > 0.0)) {
        throw InputError("degradation undefined for task '" + scores.cols[c] + "': baseline score " +
                         std::to_string(*b) + " is not positive");
      }
      const long pct = round_percent(100.0 * (*b - *s) / *b);
      m.cells.back().push_back(std::max(pct, 0L));
      m.clamped.back().push_back(pct < 0);
    }
  }
  if (m.rows.empty()) throw InputError("score table has no student rows");
  return m;
}

// ---------------------------------------------------------------------------
// Prediction-level comparisons
// ---------------------------------------------------------------------------

namespace detail {

inline std::map<std::string, const Prediction*> index_by_id(const PredictionLog& log) {
  std::map<std::string, const Prediction*> out;
  for (const auto& r : log.rows) {
    if (!out.emplace(r.id, &r).second) throw InputError("prediction log '" + log.model_id + "' repeats id " + r.id);
  }
  return out;
}

inline void require_same_ids(const std::map<std::string, const Prediction*>& a,
                             const std::map<std::string, const Prediction*>& b, const std::string& what) {
  if (a.size() != b.size() ||
      !std::equal(a.begin(), a.end(), b.begin(), [](const auto& x, const auto& y) { return x.first == y.first; })) {
    throw InputError(what + ": prediction logs cover different id sets");
  }
}

}  // namespace detail

// Fraction of ids whose hard predictions differ. Regression predictions count
// as different when they are more than tau apart.
inline double disagreement_rate(const PredictionLog& a, const PredictionLog& b,
                                TaskKind kind = TaskKind::classification, double tau = 0.5) {
  const auto ia = detail::index_by_id(a);
  const auto ib = detail::index_by_id(b);
  detail::require_same_ids(ia, ib, "disagreement_rate");
  if (ia.empty()) throw InputError("disagreement_rate: empty logs");
  std::size_t differ = 0;
  for (const auto& [id, pa] : ia) {
    const double x = pa->pred;
    const double y = ib.at(id)->pred;
    differ += (kind == TaskKind::regression ? std::abs(x - y) > tau : x != y) ? 1 : 0;
  }
  return static_cast<double>(differ) / static_cast<double>(ia.size());
}

enum class Category { i, ii, iii, iv };

inline std::string to_string(Category c) {
  switch (c) {
    case Category::i: return "i";
    case Category::ii: return "ii";
    case Category::iii: return "iii";
    case Category::iv: return "iv";
  }
  return "?";
}

// i: teacher and every student correct. ii: teacher and some but not all
// students correct. iii: only the teacher correct. iv: teacher wrong.
inline Category categorize(double label, double teacher, const std::vector<double>& students) {
  if (students.empty()) throw InputError("categorize: need at least one student");
  if (teacher != label) return Category::iv;
  const auto correct = static_cast<std::size_t>(std::count(students.begin(), students.end(), label));
  if (correct == students.size()) return Category::i;
  if (correct == 0) return Category::iii;
  return Category::ii;
}

struct CategoryReport {
  std::vector<std::pair<std::string, Category>> items;  // in teacher-log order
  std::map<Category, std::size_t> counts;

  std::string to_csv() const {
    std::string out = "id,category\n";
    for (const auto& [id, c] : items) out += id + ',' + to_string(c) + '\n';
    return out;
  }
  std::string summary_csv() const {
    std::string out = "category,count\n";
    for (Category c : {Category::i, Category::ii, Category::iii, Category::iv}) {
      out += to_string(c) + ',' + std::to_string(counts.count(c) ? counts.at(c) : 0) + '\n';
    }
    return out;
  }
};

// True labels are read from the teacher log.
inline CategoryReport categorize_instances(const PredictionLog& teacher, const std::vector<PredictionLog>& students) {
  if (students.empty()) throw InputError("categorize_instances: need at least one student log");
  const auto it = detail::index_by_id(teacher);
  std::vector<std::map<std::string, const Prediction*>> is;
  for (const auto& s : students) {
    is.push_back(detail::index_by_id(s));
    detail::require_same_ids(it, is.back(), "categorize_instances");
  }
  CategoryReport rep;
  for (const auto& row : teacher.rows) {
    std::vector<double> preds;
    for (const auto& s : is) {
      const Prediction* p = s.at(row.id);
      if (p->label != row.label) throw InputError("categorize_instances: label mismatch for id " + row.id);
      preds.push_back(p->pred);
    }
    const Category c = categorize(row.label, row.pred, preds);
    rep.items.emplace_back(row.id, c);
    ++rep.counts[c];
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Recipe table
// ---------------------------------------------------------------------------

enum class RecipeMark { ok, bad, uncertain };

inline std::string glyph(RecipeMark m) {
  switch (m) {
    case RecipeMark::ok: return "✓";
    case RecipeMark::bad: return "✗";
    case RecipeMark::uncertain: return "?";
  }
  return " ";
}

struct FactorGroup {
  std::string factor;
  std::vector<std::string> members;
};

inline std::vector<FactorGroup> default_factor_groups() {
  return {{"Layer", {"9L", "6L", "3L"}}, {"AttHead", {"8AH", "4AH"}}, {"HiddenDim", {"516D", "384D", "6L_384D"}}};
}

struct RecipeThresholds {
  double t_ok = 0.10;
  double t_bad = 0.20;
};

// Mark for one (factor, task) cell from the members' relative degradations.
inline RecipeMark degradation_mark(const std::vector<double>& degradations, const RecipeThresholds& th) {
  if (degradations.empty()) throw InputError("recipe: empty group");
  double mean = 0.0;
  for (double d : degradations) mean += d;
  mean /= static_cast<double>(degradations.size());
  const auto [lo, hi] = std::minmax_element(degradations.begin(), degradations.end());
  // A small epsilon keeps decimal boundary cases (0.25 - 0.15) on the inclusive side.
  constexpr double kTol = 1e-12;
  if (mean <= th.t_ok + kTol && *hi - *lo <= th.t_ok + kTol) return RecipeMark::ok;
  if (mean >= th.t_bad - kTol) return RecipeMark::bad;
  return RecipeMark::uncertain;
}

inline RecipeMark speed_mark(const std::vector<double>& ratios) {
  if (ratios.empty()) throw InputError("recipe: empty speed group");
  if (std::all_of(ratios.begin(), ratios.end(), [](double r) { return r > 1.0; })) return RecipeMark::ok;
  if (std::all_of(ratios.begin(), ratios.end(), [](double r) { return r < 1.0; })) return RecipeMark::bad;
  return RecipeMark::uncertain;
}

struct RecipeGrid {
  std::vector<std::string> factors;
  std::vector<std::string> tasks;
  std::vector<std::vector<RecipeMark>> marks;

  RecipeMark at(const std::string& factor, const std::string& task) const {
    const auto f = std::find(factors.begin(), factors.end(), factor);
    const auto t = std::find(tasks.begin(), tasks.end(), task);
    if (f == factors.end() || t == tasks.end()) throw InputError("recipe: no cell " + factor + "/" + task);
    return marks[f - factors.begin()][t - tasks.begin()];
  }

  std::string to_markdown() const {
    std::string out = "|";
    for (const auto& t : tasks) out += " | " + t;
    out += " |\n|---";
    for (std::size_t i = 0; i < tasks.size(); ++i) out += "|:---:";
    out += "|\n";
    for (std::size_t f = 0; f < factors.size(); ++f) {
      out += "| " + factors[f];
      for (auto m : marks[f]) out += " | " + glyph(m);
      out += " |\n";
    }
    out += "\n✓ distillation is worthwhile, ✗ it is harmful, ? it depends on the setup.\n";
    return out;
  }
};

// Group members missing from the score table are skipped; a group with no
// scored member is an error. The Speed row compares every student's
// throughput with the baseline's.
inline RecipeGrid recipe_table(const ScoreTable& scores, const std::optional<Table>& speed,
                               const std::vector<FactorGroup>& groups, const RecipeThresholds& th = {},
                               const std::string& baseline = kBaselineId) {
  if (!(th.t_ok < th.t_bad)) throw ConfigError("recipe: t_ok must be below t_bad");
  if (!scores.row_index(baseline)) throw InputError("score table has no '" + baseline + "' row");
  RecipeGrid g;
  g.tasks = scores.cols;
  for (const auto& group : groups) {
    g.factors.push_back(group.factor);
    g.marks.emplace_back();
    for (const auto& task : scores.cols) {
      const auto b = scores.get(baseline, task);
      if (!b || !(*b > 0.0)) throw InputError("recipe: baseline score for '" + task + "' missing or not positive");
      std::vector<double> deg;
      for (const auto& m : group.members) {
        if (const auto s = scores.get(m, task)) deg.push_back((*b - *s) / *b);
      }
      if (deg.empty()) throw InputError("recipe: group '" + group.factor + "' has no scored member for " + task);
      g.marks.back().push_back(degradation_mark(deg, th));
    }
  }
  if (speed) {
    g.factors.push_back("Speed");
    g.marks.emplace_back();
    for (const auto& task : scores.cols) {
      const auto b = speed->get(baseline, task);
      if (!b || !(*b > 0.0)) throw InputError("recipe: baseline throughput for '" + task + "' missing");
      std::vector<double> ratios;
      for (const auto& m : speed->rows) {
        if (m == baseline) continue;
        if (const auto s = speed->get(m, task)) ratios.push_back(*s / *b);
      }
      g.marks.back().push_back(speed_mark(ratios));
    }
  }
  return g;
}

}  // namespace kdwb
