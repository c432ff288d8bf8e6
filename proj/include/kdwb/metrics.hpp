#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "kdwb/data.hpp"
#include "kdwb/error.hpp"

namespace kdwb {

struct MetricReport {
  MetricKind kind = MetricKind::accuracy;
  double value = 0.0;
  std::size_t count = 0;
  std::map<std::string, double> components;
  std::vector<std::string> warnings;
};

struct Confusion {
  std::size_t tp = 0;
  std::size_t tn = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
};

namespace detail {

inline void require_binary(const std::vector<double>& v, const char* what) {
  for (double x : v) {
    if (x != 0.0 && x != 1.0) throw InputError(std::string(what) + ": expected binary values, got " + std::to_string(x));
  }
}

inline double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace detail

inline Confusion confusion(const std::vector<double>& preds, const std::vector<double>& labels) {
  detail::require_binary(preds, "confusion");
  detail::require_binary(labels, "confusion");
  Confusion c;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const bool p = preds[i] == 1.0;
    const bool y = labels[i] == 1.0;
    if (p && y) ++c.tp;
    else if (!p && !y) ++c.tn;
    else if (p) ++c.fp;
    else ++c.fn;
  }
  return c;
}

inline double accuracy(const std::vector<double>& preds, const std::vector<double>& labels) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

// F1 of the positive class; 0 when there are no positives at all.
inline double binary_f1(const Confusion& c) {
  const std::size_t den = 2 * c.tp + c.fp + c.fn;
  return den == 0 ? 0.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(den);
}

inline double matthews(const Confusion& c) {
  const double tp = static_cast<double>(c.tp);
  const double tn = static_cast<double>(c.tn);
  const double fp = static_cast<double>(c.fp);
  const double fn = static_cast<double>(c.fn);
  const double den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  return den == 0.0 ? 0.0 : (tp * tn - fp * fn) / std::sqrt(den);
}

// Pearson correlation; nullopt when either side has zero variance.
inline std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double mx = detail::mean_of(x);
  const double my = detail::mean_of(y);
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// 1-based ranks with ties sharing their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

inline std::optional<double> spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson(average_ranks(x), average_ranks(y));
}

inline MetricReport metric_report(MetricKind kind, const std::vector<double>& preds, const std::vector<double>& labels) {
  if (preds.size() != labels.size()) {
    throw InputError("metric: " + std::to_string(preds.size()) + " predictions vs " + std::to_string(labels.size()) +
                     " labels");
  }
  if (preds.size() < 2) throw InputError("metric: need at least two examples");
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (!std::isfinite(preds[i]) || !std::isfinite(labels[i])) throw InputError("metric: non-finite value");
  }
  MetricReport r;
  r.kind = kind;
  r.count = preds.size();
  switch (kind) {
    case MetricKind::accuracy:
      r.value = accuracy(preds, labels);
      r.components["accuracy"] = r.value;
      break;
    case MetricKind::acc_f1_avg: {
      const double acc = accuracy(preds, labels);
      const double f1 = binary_f1(confusion(preds, labels));
      r.components = {{"accuracy", acc}, {"f1", f1}};
      r.value = 0.5 * (acc + f1);
      break;
    }
    case MetricKind::matthews: {
      const Confusion c = confusion(preds, labels);
      r.value = matthews(c);
      r.components["matthews"] = r.value;
      if ((c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn) == 0) {
        r.warnings.push_back("matthews: degenerate confusion matrix, defined as 0");
      }
      break;
    }
    case MetricKind::pearson_spearman: {
      const auto p = pearson(preds, labels);
      const auto s = spearman(preds, labels);
      if (!p || !s) r.warnings.push_back("pearson_spearman: constant input, correlation defined as 0");
      r.components = {{"pearson", p.value_or(0.0)}, {"spearman", s.value_or(0.0)}};
      r.value = 0.5 * (p.value_or(0.0) + s.value_or(0.0));
      break;
    }
  }
  return r;
}

inline double compute_metric(MetricKind kind, const std::vector<double>& preds, const std::vector<double>& labels) {
  return metric_report(kind, preds, labels).value;
}

}  // namespace kdwb
