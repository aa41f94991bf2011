#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cpath/config.hpp"
#include "cpath/features.hpp"
#include "cpath/hash.hpp"
#include "cpath/mil.hpp"
#include "cpath/report.hpp"
#include "cpath/trainer.hpp"

namespace cpath {

// Experiment-matrix driver: fractions x strategies x extraction modes, each
// cell running pretrain -> extract -> five-fold MIL -> external deploy ->
// metrics. Pretraining is cached by a content key (config echo + dataset
// hash), so cells that share (fraction, strategy, seed) never retrain, and a
// rerun of the same matrix is a pure cache hit.

struct ExperimentMatrix {
  std::vector<double> fractions = {1.0};
  std::vector<Strategy> strategies = {Strategy::Baseline};
  std::vector<ExtractMode> modes = {ExtractMode::S4};
  std::vector<std::string> targets;  // empty: every target in the label table
  std::uint64_t seed = 1;

  void validate() const {
    if (fractions.empty() || strategies.empty() || modes.empty())
      throw Error("experiment matrix axes must be nonempty");
    for (double f : fractions)
      if (!(f > 0 && f <= 1)) throw Error("matrix fraction out of (0,1]");
  }

  std::string echo() const {
    std::ostringstream os;
    os << "fractions=";
    for (double f : fractions) os << f << ";";
    os << "\nstrategies=";
    for (auto s : strategies) os << strategy_name(s) << ";";
    os << "\nmodes=";
    for (auto m : modes) os << extract_mode_name(m) << ";";
    os << "\ntargets=";
    for (const auto& t : targets) os << t << ";";
    os << "\nseed=" << seed << "\n";
    return os.str();
  }
};

struct CellOutcome {
  std::string name;
  std::string dir;
  bool ok = false;
  std::string error;
  std::map<std::string, std::pair<double, double>> metrics;  // target -> (auprc, auroc)
};

struct MatrixResult {
  std::string matrix_dir;
  std::vector<CellOutcome> cells;
  int failed = 0;
  std::string report_csv_path;
  std::string report_txt_path;
};

/// Run root precedence: explicit argument, then $CF_RUNS_DIR, then ./runs.
inline std::string resolve_runs_root(const std::string& cli_value = "") {
  if (!cli_value.empty()) return cli_value;
  if (const char* env = std::getenv("CF_RUNS_DIR"); env && *env) return env;
  return "runs";
}

namespace detail {

inline std::string cell_name(double fraction, Strategy s, ExtractMode m) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "f%03d", static_cast<int>(std::lround(fraction * 100)));
  return std::string(buf) + "_" + strategy_name(s) + "_" + extract_mode_name(m);
}

/// Pretrain once per (config, dataset) content key; reuse the cached
/// checkpoint afterwards.
inline std::string cached_pretrain(const TrainConfig& cfg, const std::string& data_dir,
                                   const std::string& dataset_hash,
                                   const std::string& runs_root) {
  namespace fs = std::filesystem;
  const std::string key = hex64(fnv1a64(config_echo(cfg) + dataset_hash));
  const auto dir = fs::path(runs_root) / "cache" / key;
  const auto final_ckpt = dir / "final.ckpt";
  if (fs::exists(final_ckpt)) return final_ckpt.string();
  fs::create_directories(dir);
  {
    std::ofstream echo(dir / "config.echo");
    echo << config_echo(cfg) << "dataset_hash = " << dataset_hash << "\n";
  }
  run_pretraining(cfg, data_dir, dir.string());
  return final_ckpt.string();
}

}  // namespace detail

/// One matrix cell: pretrain (cached) -> extract -> per-target 5-fold MIL ->
/// deploy -> persisted scores + metrics. Returns the per-target mean metrics.
inline CellOutcome run_cell(double fraction, Strategy strategy, ExtractMode mode,
                            const TrainConfig& base, const std::vector<std::string>& targets,
                            const std::string& data_dir, const std::string& matrix_dir,
                            const std::string& runs_root, const MilModelConfig& mil_base) {
  namespace fs = std::filesystem;
  CellOutcome out;
  out.name = detail::cell_name(fraction, strategy, mode);
  const auto cell_dir = fs::path(matrix_dir) / out.name;
  out.dir = cell_dir.string();

  const auto ds = PreprocessedDataset::open(data_dir);
  const auto done_marker = cell_dir / "cell.done";
  if (fs::exists(done_marker)) {
    // cache hit: reload the persisted metrics
    for (const auto& target : targets) {
      std::map<std::string, int> label_of;
      for (const auto& s : ds.labels.slides) label_of[s.slide_id] = s.labels.at(target);
      const auto [ap, roc] = metrics_from_score_matrix(
          (cell_dir / ("scores_" + target + ".csv")).string(), label_of);
      out.metrics[target] = {ap, roc};
    }
    out.ok = true;
    return out;
  }

  TrainConfig cfg = base;
  cfg.data_fraction = fraction;
  cfg.plan.strategy = strategy;
  cfg.validate();

  fs::create_directories(cell_dir);
  {
    std::ofstream echo(cell_dir / "config.echo");
    echo << config_echo(cfg) << "mode = " << extract_mode_name(mode) << "\n";
  }

  const std::string ckpt =
      detail::cached_pretrain(cfg, data_dir, ds.dataset_hash(), runs_root);
  const auto feat_dir = cell_dir / "features";
  extract_cohort_features(ckpt, mode, data_dir, feat_dir.string());
  const auto store = FeatureStore::open(feat_dir.string());

  for (const auto& target : targets) {
    const auto internal = load_bags(store, ds.labels, target, "internal");
    const auto external = load_bags(store, ds.labels, target, "external");
    MilModelConfig mil = mil_base;
    mil.seed = derive_seed(cfg.seed, fnv1a64(target));
    const auto folds = make_folds(internal, 5, derive_seed(cfg.seed, fnv1a64("folds:" + target)));
    const auto cv = train_mil(internal, folds, mil);

    std::vector<const ParamStore<float>*> models;
    for (std::size_t f = 0; f < cv.folds.size(); ++f) {
      models.push_back(&cv.folds[f].params);
      save_checkpoint((cell_dir / ("mil_" + target + "_fold" + std::to_string(f) + ".ckpt")).string(),
                      mil_to_checkpoint(cv.folds[f].params, mil, store.dim));
    }
    const auto dep = deploy_external(models, mil, external);
    write_score_matrix((cell_dir / ("scores_" + target + ".csv")).string(), dep);

    std::ofstream mf(cell_dir / ("metrics_" + target + ".csv"));
    mf << "target,metric,fold,value\n";
    for (std::size_t f = 0; f < dep.per_model_auprc.size(); ++f) {
      mf << target << ",auprc," << f << "," << dep.per_model_auprc[f] << "\n";
      mf << target << ",auroc," << f << "," << dep.per_model_auroc[f] << "\n";
    }
    char a[32], b[32];
    std::snprintf(a, sizeof a, "%.17g", dep.mean_auprc);
    std::snprintf(b, sizeof b, "%.17g", dep.mean_auroc);
    mf << target << ",auprc,mean," << a << "\n";
    mf << target << ",auroc,mean," << b << "\n";
    out.metrics[target] = {dep.mean_auprc, dep.mean_auroc};
  }
  std::ofstream(done_marker.string()) << "ok\n";
  out.ok = true;
  return out;
}

/// The full matrix. Failed cells are recorded and the rest proceed.
inline MatrixResult run_matrix(const ExperimentMatrix& matrix, const TrainConfig& base,
                               const std::string& data_dir, const std::string& runs_root,
                               const MilModelConfig& mil = {}) {
  namespace fs = std::filesystem;
  matrix.validate();
  const auto ds = PreprocessedDataset::open(data_dir);
  std::vector<std::string> targets = matrix.targets;
  if (targets.empty()) targets = ds.labels.targets;
  if (targets.empty()) throw Error("dataset declares no targets");

  TrainConfig base_cfg = base;
  base_cfg.seed = matrix.seed;

  MatrixResult result;
  const std::string matrix_hash =
      hex64(fnv1a64(matrix.echo() + config_echo(base_cfg) + ds.dataset_hash()));
  result.matrix_dir = (fs::path(runs_root) / matrix_hash).string();
  fs::create_directories(result.matrix_dir);
  {
    std::ofstream echo(fs::path(result.matrix_dir) / "matrix.echo");
    echo << matrix.echo();
  }

  for (double f : matrix.fractions)
    for (Strategy s : matrix.strategies)
      for (ExtractMode m : matrix.modes) {
        CellOutcome cell;
        try {
          cell = run_cell(f, s, m, base_cfg, targets, data_dir, result.matrix_dir, runs_root, mil);
        } catch (const std::exception& e) {
          cell.name = detail::cell_name(f, s, m);
          cell.ok = false;
          cell.error = e.what();
          ++result.failed;
        }
        result.cells.push_back(std::move(cell));
      }

  // consolidated report
  std::vector<VariantMetrics> rows;
  for (const auto& c : result.cells) {
    VariantMetrics vm;
    vm.variant = c.name + (c.ok ? "" : " [failed]");
    for (const auto& [target, m] : c.metrics) {
      vm.auprc[target] = m.first;
      vm.auroc[target] = m.second;
    }
    rows.push_back(std::move(vm));
  }
  result.report_csv_path = (fs::path(result.matrix_dir) / "report.csv").string();
  result.report_txt_path = (fs::path(result.matrix_dir) / "report.txt").string();
  std::ofstream(result.report_csv_path) << render_report_csv(rows, targets);
  std::ofstream(result.report_txt_path) << render_report_text(rows, targets);
  return result;
}

/// Rebuild the consolidated report of an existing matrix directory purely
/// from the persisted score matrices (used by the report subcommand).
inline std::pair<std::string, std::string> report_from_runs(const std::string& matrix_dir,
                                                            const std::string& data_dir) {
  namespace fs = std::filesystem;
  const auto ds = PreprocessedDataset::open(data_dir);
  std::vector<VariantMetrics> rows;
  std::vector<std::string> targets;
  std::vector<fs::path> cells;
  for (const auto& entry : fs::directory_iterator(matrix_dir))
    if (entry.is_directory()) cells.push_back(entry.path());
  std::sort(cells.begin(), cells.end());
  for (const auto& cell : cells) {
    VariantMetrics vm;
    vm.variant = cell.filename().string();
    bool any = false;
    for (const auto& f : fs::directory_iterator(cell)) {
      const auto name = f.path().filename().string();
      if (name.rfind("scores_", 0) != 0 || f.path().extension() != ".csv") continue;
      const std::string target = name.substr(7, name.size() - 11);
      std::map<std::string, int> label_of;
      for (const auto& s : ds.labels.slides) label_of[s.slide_id] = s.labels.at(target);
      const auto [ap, roc] = metrics_from_score_matrix(f.path().string(), label_of);
      vm.auprc[target] = ap;
      vm.auroc[target] = roc;
      if (std::find(targets.begin(), targets.end(), target) == targets.end())
        targets.push_back(target);
      any = true;
    }
    if (any) rows.push_back(std::move(vm));
  }
  if (rows.empty()) throw IoError("no persisted score matrices under " + matrix_dir);
  std::sort(targets.begin(), targets.end());
  return {render_report_csv(rows, targets), render_report_text(rows, targets)};
}

}  // namespace cpath
