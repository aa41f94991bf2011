// cpath: contrastive pretraining and weakly-supervised evaluation on image
// patches, desk scale. Subcommands cover the full pipeline: synth,
// preprocess, pretrain, extract-features, train-mil, deploy, report, matrix.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "cpath/cpath.hpp"

namespace fs = std::filesystem;
using namespace cpath;

namespace {

// exit codes: 0 success, 2 config error, 3 partial cell failure, 4 data error
constexpr int kExitConfig = 2;
constexpr int kExitPartial = 3;
constexpr int kExitData = 4;

TrainConfig load_train_config(const std::string& path, double fraction_override,
                              const std::string& strategy_override) {
  TrainConfig cfg = path.empty() ? TrainConfig{} : parse_config(path);
  if (fraction_override > 0) cfg.data_fraction = fraction_override;
  if (!strategy_override.empty()) cfg.plan.strategy = strategy_from_name(strategy_override);
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw ParseError(std::string("invalid config: ") + e.what());
  }
  return cfg;
}

int cmd_synth(const std::string& spec_path, const std::string& out) {
  const auto spec = spec_path.empty() ? SyntheticDatasetSpec{} : parse_synth_spec(spec_path);
  const auto sum = generate_synthetic(spec, out);
  std::cout << "wrote " << sum.slides << " slides (" << sum.internal_slides << " internal, "
            << sum.external_slides << " external) to " << out << "\n";
  for (const auto& [target, pos] : sum.positives)
    std::cout << "  target " << target << ": " << pos << " positive slides\n";
  return 0;
}

int cmd_preprocess(const std::string& input, const std::string& out, double mpp, int patch,
                   double source_mpp) {
  CannyParams canny;
  const auto sum = preprocess_dataset(input, out, mpp, patch, canny, source_mpp);
  std::cout << "tessellated " << sum.slides << " slides: " << sum.patches_accepted << "/"
            << sum.patches_total << " patches accepted\n"
            << "dataset hash " << sum.dataset_hash << "\n";
  return 0;
}

int cmd_pretrain(const std::string& config, const std::string& data, const std::string& out,
                 double fraction, const std::string& strategy) {
  const auto cfg = load_train_config(config, fraction, strategy);
  const auto res = run_pretraining(cfg, data, out);
  std::cout << "pretrained " << res.epochs_run << " epochs; final " << res.final_checkpoint
            << "\n";
  if (!res.epoch_losses.empty())
    std::cout << "first-epoch loss " << res.epoch_losses.front() << ", last-epoch loss "
              << res.epoch_losses.back() << "\n";
  return 0;
}

int cmd_extract(const std::string& checkpoint, const std::string& mode, const std::string& data,
                const std::string& out) {
  const auto sum = extract_cohort_features(checkpoint, extract_mode_from_name(mode), data, out);
  std::cout << "wrote " << sum.slides_written << " feature files (dim " << sum.dim << ") to "
            << out << "\n";
  if (!sum.skipped.empty()) std::cout << sum.skipped.size() << " slides skipped (see skipped.tsv)\n";
  return 0;
}

int cmd_train_mil(const std::string& features, const std::string& data, const std::string& target,
                  int folds, const std::string& out, bool shuffle_labels,
                  std::uint64_t seed) {
  const auto store = FeatureStore::open(features);
  const auto ds = PreprocessedDataset::open(data);
  auto bags = load_bags(store, ds.labels, target, "internal");
  if (shuffle_labels) {
    std::vector<int> labels;
    for (const auto& b : bags) labels.push_back(b.label);
    Rng rng(derive_seed(seed, 0x5f1e));
    shuffle(labels, rng);
    for (std::size_t i = 0; i < bags.size(); ++i) bags[i].label = labels[i];
  }
  MilModelConfig cfg;
  cfg.seed = seed;
  const auto splits = make_folds(bags, folds, derive_seed(seed, fnv1a64("folds:" + target)));
  const auto cv = train_mil(bags, splits, cfg);
  fs::create_directories(out);
  double mean_val = 0;
  int n_val = 0;
  for (std::size_t f = 0; f < cv.folds.size(); ++f) {
    save_checkpoint((fs::path(out) / ("mil_" + target + "_fold" + std::to_string(f) + ".ckpt")).string(),
                    mil_to_checkpoint(cv.folds[f].params, cfg, store.dim));
    std::cout << "fold " << f << ": val auroc "
              << (cv.folds[f].val_auroc < 0 ? std::string("n/a")
                                            : std::to_string(cv.folds[f].val_auroc))
              << ", epochs " << cv.folds[f].epochs_ran << "\n";
    if (cv.folds[f].val_auroc >= 0) {
      mean_val += cv.folds[f].val_auroc;
      ++n_val;
    }
  }
  if (n_val) std::cout << "fold-mean val auroc " << mean_val / n_val << "\n";
  return 0;
}

int cmd_deploy(const std::string& models_dir, const std::string& cohort_features,
               const std::string& data, const std::string& target, const std::string& out_csv) {
  std::vector<std::pair<ParamStore<float>, MilModelConfig>> loaded;
  std::vector<fs::path> files;
  for (const auto& f : fs::directory_iterator(models_dir)) {
    const auto name = f.path().filename().string();
    if (name.rfind("mil_" + target + "_fold", 0) == 0 && f.path().extension() == ".ckpt")
      files.push_back(f.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) loaded.push_back(mil_from_checkpoint(load_checkpoint(f.string())));
  if (loaded.empty()) throw IoError("no fold models for target " + target + " in " + models_dir);

  const auto store = FeatureStore::open(cohort_features);
  const auto ds = PreprocessedDataset::open(data);
  const auto external = load_bags(store, ds.labels, target, "external");
  std::vector<const ParamStore<float>*> models;
  for (const auto& [params, cfg] : loaded) models.push_back(&params);
  const auto dep = deploy_external(models, loaded.front().second, external);
  write_score_matrix(out_csv, dep);
  std::cout << "deployed " << models.size() << " models on " << external.size() << " bags\n"
            << "mean auprc " << dep.mean_auprc << ", mean auroc " << dep.mean_auroc << "\n"
            << "scores written to " << out_csv << "\n";
  return 0;
}

int cmd_report(const std::string& runs_dir, const std::string& data,
               const std::string& out_base) {
  const auto [csv, txt] = report_from_runs(runs_dir, data);
  std::cout << txt;
  if (!out_base.empty()) {
    std::ofstream(out_base + ".csv") << csv;
    std::ofstream(out_base + ".txt") << txt;
    std::cout << "written to " << out_base << ".{csv,txt}\n";
  }
  return 0;
}

int cmd_matrix(const std::string& config, const std::string& data, const std::string& runs,
               const std::vector<double>& fractions, const std::vector<std::string>& strategies,
               const std::vector<std::string>& modes, const std::vector<std::string>& targets,
               std::uint64_t seed) {
  ExperimentMatrix matrix;
  if (!fractions.empty()) matrix.fractions = fractions;
  if (!strategies.empty()) {
    matrix.strategies.clear();
    for (const auto& s : strategies) matrix.strategies.push_back(strategy_from_name(s));
  }
  if (!modes.empty()) {
    matrix.modes.clear();
    for (const auto& m : modes) matrix.modes.push_back(extract_mode_from_name(m));
  }
  matrix.targets = targets;
  matrix.seed = seed;

  const auto base = config.empty() ? TrainConfig{} : parse_config(config);
  const auto runs_root = resolve_runs_root(runs);
  const auto result = run_matrix(matrix, base, data, runs_root);
  std::cout << "matrix dir: " << result.matrix_dir << "\n";
  for (const auto& c : result.cells) {
    std::cout << "  " << c.name << ": " << (c.ok ? "ok" : "FAILED " + c.error) << "\n";
    for (const auto& [target, m] : c.metrics)
      std::cout << "    " << target << " auprc " << m.first << " auroc " << m.second << "\n";
  }
  std::ifstream report(result.report_txt_path);
  std::cout << report.rdbuf();
  return result.failed > 0 ? kExitPartial : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"contrastive patch pretraining + weakly-supervised evaluation"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic texture-slide dataset");
  std::string synth_spec, synth_out;
  synth->add_option("--spec", synth_spec, "spec file (key = value)");
  synth->add_option("--out", synth_out, "output directory")->required();

  // preprocess
  auto* prep = app.add_subcommand("preprocess", "tessellate slides into accepted patches");
  std::string prep_in, prep_out;
  double prep_mpp = 0.5, prep_source_mpp = 0.0;
  int prep_patch = 224;
  prep->add_option("--input", prep_in, "raw dataset directory")->required();
  prep->add_option("--mpp", prep_mpp, "target microns-per-pixel (default 0.5)");
  prep->add_option("--patch", prep_patch, "patch edge in pixels (default 224)");
  prep->add_option("--source-mpp", prep_source_mpp, "override source microns-per-pixel");
  prep->add_option("--out", prep_out, "output directory")->required();

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "contrastive SSL pretraining");
  std::string pre_cfg, pre_data, pre_out, pre_strategy;
  double pre_fraction = 0.0;
  pre->add_option("--config", pre_cfg, "training config file");
  pre->add_option("--data", pre_data, "preprocessed dataset directory")->required();
  pre->add_option("--out", pre_out, "run directory")->required();
  pre->add_option("--fraction", pre_fraction, "data fraction override");
  pre->add_option("--strategy", pre_strategy, "baseline|srcl|nsam|dynamic");

  // extract-features
  auto* ext = app.add_subcommand("extract-features", "frozen-feature extraction per slide");
  std::string ext_ckpt, ext_mode = "S4", ext_data, ext_out;
  ext->add_option("--checkpoint", ext_ckpt, "encoder checkpoint")->required();
  ext->add_option("--mode", ext_mode, "S1|S2|S3|S4|AllStages|Last2");
  ext->add_option("--data", ext_data, "preprocessed dataset directory")->required();
  ext->add_option("--out", ext_out, "feature store directory")->required();

  // train-mil
  auto* mil = app.add_subcommand("train-mil", "cross-validated attention-MIL training");
  std::string mil_features, mil_data, mil_target, mil_out;
  int mil_folds = 5;
  bool mil_shuffle = false;
  std::uint64_t mil_seed = 1;
  mil->add_option("--features", mil_features, "feature store directory")->required();
  mil->add_option("--data", mil_data, "preprocessed dataset directory")->required();
  mil->add_option("--target", mil_target, "target name")->required();
  mil->add_option("--folds", mil_folds, "fold count (default 5)");
  mil->add_option("--out", mil_out, "model output directory")->required();
  mil->add_option("--seed", mil_seed, "seed");
  mil->add_flag("--shuffle-labels", mil_shuffle, "shuffled-label control run");

  // deploy
  auto* dep = app.add_subcommand("deploy", "score an external cohort with the fold models");
  std::string dep_models, dep_cohort, dep_data, dep_target, dep_out = "scores.csv";
  dep->add_option("--models", dep_models, "directory with mil_<target>_fold*.ckpt")->required();
  dep->add_option("--cohort", dep_cohort, "external cohort feature store")->required();
  dep->add_option("--data", dep_data, "preprocessed dataset directory")->required();
  dep->add_option("--target", dep_target, "target name")->required();
  dep->add_option("--out", dep_out, "score matrix CSV path");

  // report
  auto* rep = app.add_subcommand("report", "re-render the result tables from persisted scores");
  std::string rep_runs, rep_data, rep_out;
  rep->add_option("--runs", rep_runs, "matrix directory (runs/<hash>)")->required();
  rep->add_option("--data", rep_data, "preprocessed dataset directory")->required();
  rep->add_option("--out", rep_out, "output base name (writes .csv and .txt)");

  // matrix
  auto* mtx = app.add_subcommand("matrix", "run the full experiment matrix");
  std::string mtx_cfg, mtx_data, mtx_runs;
  std::vector<double> mtx_fractions;
  std::vector<std::string> mtx_strategies, mtx_modes, mtx_targets;
  std::uint64_t mtx_seed = 1;
  mtx->add_option("--config", mtx_cfg, "base training config");
  mtx->add_option("--data", mtx_data, "preprocessed dataset directory")->required();
  mtx->add_option("--runs", mtx_runs, "runs root (default $CF_RUNS_DIR or ./runs)");
  mtx->add_option("--fractions", mtx_fractions, "data fractions")->delimiter(',');
  mtx->add_option("--strategies", mtx_strategies, "sampling strategies")->delimiter(',');
  mtx->add_option("--modes", mtx_modes, "extraction modes")->delimiter(',');
  mtx->add_option("--targets", mtx_targets, "targets (default: all)")->delimiter(',');
  mtx->add_option("--seed", mtx_seed, "matrix seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(synth_spec, synth_out);
    if (prep->parsed()) return cmd_preprocess(prep_in, prep_out, prep_mpp, prep_patch, prep_source_mpp);
    if (pre->parsed()) return cmd_pretrain(pre_cfg, pre_data, pre_out, pre_fraction, pre_strategy);
    if (ext->parsed()) return cmd_extract(ext_ckpt, ext_mode, ext_data, ext_out);
    if (mil->parsed())
      return cmd_train_mil(mil_features, mil_data, mil_target, mil_folds, mil_out, mil_shuffle,
                           mil_seed);
    if (dep->parsed()) return cmd_deploy(dep_models, dep_cohort, dep_data, dep_target, dep_out);
    if (rep->parsed()) return cmd_report(rep_runs, rep_data, rep_out);
    if (mtx->parsed())
      return cmd_matrix(mtx_cfg, mtx_data, mtx_runs, mtx_fractions, mtx_strategies, mtx_modes,
                        mtx_targets, mtx_seed);
  } catch (const ParseError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const UnknownMppError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const EmptyResultError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
