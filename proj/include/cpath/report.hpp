#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cpath/errors.hpp"
#include "cpath/metrics.hpp"
#include "cpath/mil.hpp"

namespace cpath {

// Result-table rendering: rows are encoder variants, columns are targets
// plus an AVG column, one table per metric, emitted as CSV and as aligned
// text. Cells are means over the five fold models.

struct VariantMetrics {
  std::string variant;
  std::map<std::string, double> auprc;  // target -> mean metric
  std::map<std::string, double> auroc;
};

namespace detail {

inline double row_average(const std::map<std::string, double>& cells,
                          const std::vector<std::string>& targets) {
  double sum = 0;
  int n = 0;
  for (const auto& t : targets) {
    auto it = cells.find(t);
    if (it == cells.end() || std::isnan(it->second)) continue;
    sum += it->second;
    ++n;
  }
  return n ? sum / n : std::nan("");
}

inline std::string fmt_cell(double v) {
  if (std::isnan(v)) return "-";
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

}  // namespace detail

inline std::string render_report_csv(const std::vector<VariantMetrics>& rows,
                                     const std::vector<std::string>& targets) {
  std::ostringstream os;
  os << "variant,metric";
  for (const auto& t : targets) os << "," << t;
  os << ",AVG\n";
  for (const auto& r : rows) {
    for (const char* metric : {"auprc", "auroc"}) {
      const auto& cells = std::string(metric) == "auprc" ? r.auprc : r.auroc;
      os << r.variant << "," << metric;
      for (const auto& t : targets) {
        auto it = cells.find(t);
        char buf[32];
        if (it == cells.end() || std::isnan(it->second)) {
          os << ",";
        } else {
          std::snprintf(buf, sizeof buf, "%.9g", it->second);
          os << "," << buf;
        }
      }
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.9g", detail::row_average(cells, targets));
      os << "," << buf << "\n";
    }
  }
  return os.str();
}

inline std::string render_report_text(const std::vector<VariantMetrics>& rows,
                                      const std::vector<std::string>& targets) {
  std::ostringstream os;
  std::size_t name_w = 8;
  for (const auto& r : rows) name_w = std::max(name_w, r.variant.size());
  auto table = [&](const char* title, auto member) {
    os << title << "\n";
    os << std::string(name_w, ' ') << " ";
    for (const auto& t : targets) {
      char buf[32];
      std::snprintf(buf, sizeof buf, " %10s", t.c_str());
      os << buf;
    }
    os << "        AVG\n";
    for (const auto& r : rows) {
      os << r.variant << std::string(name_w - r.variant.size(), ' ') << " ";
      const auto& cells = r.*member;
      for (const auto& t : targets) {
        auto it = cells.find(t);
        char buf[32];
        std::snprintf(buf, sizeof buf, " %10s",
                      detail::fmt_cell(it == cells.end() ? std::nan("") : it->second).c_str());
        os << buf;
      }
      char buf[32];
      std::snprintf(buf, sizeof buf, " %10s",
                    detail::fmt_cell(detail::row_average(cells, targets)).c_str());
      os << buf << "\n";
    }
    os << "\n";
  };
  table("AUPRC (mean over fold models)", &VariantMetrics::auprc);
  table("AUROC (mean over fold models)", &VariantMetrics::auroc);
  return os.str();
}

/// Per-fold metrics recomputed from a persisted score matrix + labels;
/// returns {mean auprc, mean auroc}.
inline std::pair<double, double> metrics_from_score_matrix(const std::string& csv_path,
                                                           const std::map<std::string, int>& label_of) {
  const auto sm = read_score_matrix(csv_path);
  if (sm.by_fold.empty()) throw IoError("empty score matrix " + csv_path);
  double sum_auprc = 0, sum_auroc = 0;
  for (const auto& [fold, rows] : sm.by_fold) {
    ScoredLabels scored;
    for (const auto& [slide, scores] : rows) {
      scored.scores.push_back(scores.back());  // positive-class score
      scored.labels.push_back(label_of.at(slide));
    }
    sum_auprc += auprc(scored);
    sum_auroc += auroc(scored);
  }
  const double n = static_cast<double>(sm.by_fold.size());
  return {sum_auprc / n, sum_auroc / n};
}

}  // namespace cpath
