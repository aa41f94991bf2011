#include "cpath/mil.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "cpath/momentum.hpp"
#include "cpath/synthetic.hpp"
#include "cpath/trainer.hpp"

using namespace cpath;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  const auto p = fs::temp_directory_path() / ("cpath_mil_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Synthetic bag family with a presence signal: positive bags contain a
// cluster of shifted rows, negatives do not.
std::vector<Bag> signal_bags(int n_bags, int rows, int dim, unsigned seed,
                             const std::string& cohort = "internal") {
  Rng rng(seed);
  std::vector<Bag> bags;
  for (int i = 0; i < n_bags; ++i) {
    Bag b;
    b.slide_id = cohort + "_S" + std::to_string(i);
    b.patient_id = cohort + "_P" + std::to_string(i);
    b.cohort = cohort;
    b.label = i % 2;
    b.features = Tensor<float>({rows, dim});
    for (int r = 0; r < rows; ++r) {
      const bool hot = b.label == 1 && r < rows / 3;  // presence signal
      for (int d = 0; d < dim; ++d)
        b.features.data[static_cast<std::size_t>(r) * dim + d] =
            static_cast<float>(normal(rng) * 0.5 + (hot && d < 3 ? 2.0 : 0.0));
    }
    bags.push_back(std::move(b));
  }
  return bags;
}

MilModelConfig fast_cfg(int dim_unused = 0) {
  MilModelConfig cfg;
  cfg.token_dim = 16;
  cfg.heads = 4;
  cfg.mlp_hidden = 32;
  cfg.epochs = 6;
  cfg.patience = 3;
  cfg.seed = 17;
  (void)dim_unused;
  return cfg;
}

}  // namespace

TEST(FeatureFile, RoundTrip) {
  const auto dir = temp_dir("featfile");
  FeatureFile f;
  f.slide_id = "S0001";
  f.mode = "S4";
  f.checkpoint_hash = "abcd1234abcd1234";
  f.dim = 6;
  f.count = 3;
  Rng rng(61);
  for (int i = 0; i < 18; ++i) f.data.push_back(static_cast<float>(normal(rng)));
  const auto path = (dir / "S0001.feat").string();
  write_feature_file(path, f);
  const auto g = read_feature_file(path);
  EXPECT_EQ(g.slide_id, f.slide_id);
  EXPECT_EQ(g.mode, f.mode);
  EXPECT_EQ(g.checkpoint_hash, f.checkpoint_hash);
  EXPECT_EQ(g.dim, f.dim);
  EXPECT_EQ(g.count, f.count);
  EXPECT_EQ(g.data, f.data);
  fs::remove_all(dir);
}

TEST(FeatureStore, RefusesMixedDimensions) {
  const auto dir = temp_dir("mixed");
  FeatureFile a;
  a.slide_id = "A";
  a.mode = "S4";
  a.dim = 4;
  a.count = 1;
  a.data = {1, 2, 3, 4};
  write_feature_file((dir / "A.feat").string(), a);
  FeatureFile b = a;
  b.slide_id = "B";
  b.dim = 8;
  b.data.resize(8, 0.f);
  write_feature_file((dir / "B.feat").string(), b);
  EXPECT_THROW(FeatureStore::open(dir.string()), ModeMismatchError);
  fs::remove_all(dir);
}

TEST(ExtractFeatures, EndToEndDeterministicWithSkips) {
  // tiny dataset + untrained tiny encoder checkpoint
  const auto root = temp_dir("extract");
  SyntheticDatasetSpec spec;
  spec.num_slides = 5;
  spec.patches_per_slide = 12;
  spec.seed = 71;
  generate_synthetic(spec, (root / "raw").string());
  preprocess_dataset((root / "raw").string(), (root / "prep").string(), 0.5, 64);

  const auto enc_cfg = StageEncoderConfig::make(64, 1.0 / 24.0, 4, {1, 1});
  Rng rng(72);
  auto pair = MomentumPair<float>::init(enc_cfg, default_projection_head(enc_cfg.feature_dim, 16, 16),
                                        default_prediction_head(16, 16), 0.99, rng);
  const auto ck_path = (root / "enc.ckpt").string();
  save_checkpoint(ck_path, pair_to_checkpoint(pair));

  // force one slide to have zero accepted patches
  const auto ds = PreprocessedDataset::open((root / "prep").string());
  const auto victim = ds.labels.slides.back().slide_id;
  auto manifest = read_manifest((root / "prep" / "manifests" / (victim + ".tsv")).string());
  for (auto& p : manifest.patches) p.accepted = false;
  write_manifest((root / "prep" / "manifests" / (victim + ".tsv")).string(), manifest);

  const auto sum = extract_cohort_features(ck_path, ExtractMode::Last2, (root / "prep").string(),
                                           (root / "featA").string());
  EXPECT_EQ(sum.slides_written, 4);
  ASSERT_EQ(sum.skipped.size(), 1u);
  EXPECT_EQ(sum.skipped[0], victim);
  EXPECT_EQ(sum.dim, 2 * enc_cfg.feature_dim);

  // rerun: byte-identical feature files
  extract_cohort_features(ck_path, ExtractMode::Last2, (root / "prep").string(),
                          (root / "featB").string());
  const auto store = FeatureStore::open((root / "featA").string());
  for (const auto& sid : store.slide_ids)
    EXPECT_EQ(hash_file((root / "featA" / (sid + ".feat")).string()),
              hash_file((root / "featB" / (sid + ".feat")).string()));

  // Last2 width is twice the single-stage width
  const auto s2 = extract_cohort_features(ck_path, ExtractMode::S2, (root / "prep").string(),
                                          (root / "featS2").string());
  EXPECT_EQ(sum.dim, 2 * s2.dim);

  // bags load with labels; the skipped slide is absent
  const auto bags = load_bags(store, ds.labels, "tumor", "internal");
  for (const auto& b : bags) EXPECT_NE(b.slide_id, victim);
  EXPECT_FALSE(bags.empty());
  fs::remove_all(root);
}

TEST(ExtractFeatures, EncoderCheckpointNeverMutated) {
  const auto root = temp_dir("frozen");
  SyntheticDatasetSpec spec;
  spec.num_slides = 4;
  spec.patches_per_slide = 12;
  spec.seed = 73;
  generate_synthetic(spec, (root / "raw").string());
  preprocess_dataset((root / "raw").string(), (root / "prep").string(), 0.5, 64);
  const auto enc_cfg = StageEncoderConfig::make(64, 1.0 / 24.0, 4, {1, 1});
  Rng rng(74);
  auto pair = MomentumPair<float>::init(enc_cfg, default_projection_head(enc_cfg.feature_dim, 16, 16),
                                        default_prediction_head(16, 16), 0.99, rng);
  const auto ck_path = (root / "enc.ckpt").string();
  save_checkpoint(ck_path, pair_to_checkpoint(pair));
  const auto hash_before = hash_file(ck_path);

  extract_cohort_features(ck_path, ExtractMode::S2, (root / "prep").string(),
                          (root / "feat").string());
  const auto store = FeatureStore::open((root / "feat").string());
  const auto ds = PreprocessedDataset::open((root / "prep").string());
  auto bags = load_bags(store, ds.labels, "tumor", "internal");
  auto cfg = fast_cfg();
  cfg.epochs = 2;
  std::vector<Bag> val{bags.back()};
  bags.pop_back();
  train_mil_fold(bags, val, cfg);

  EXPECT_EQ(hash_file(ck_path), hash_before);
  fs::remove_all(root);
}

TEST(MakeFolds, StratifiedPartition) {
  // 10 patients, 5/5 labels, k = 5: every val fold holds one of each label
  auto bags = signal_bags(10, 6, 4, 81);
  const auto folds = make_folds(bags, 5, 3);
  ASSERT_EQ(folds.size(), 5u);
  std::set<std::string> seen;
  for (const auto& f : folds) {
    ASSERT_EQ(f.val_patients.size(), 2u);
    int labels = 0;
    for (const auto& p : f.val_patients) {
      EXPECT_TRUE(seen.insert(p).second) << "patient in two val sets";
      for (const auto& b : bags)
        if (b.patient_id == p) labels += b.label;
    }
    EXPECT_EQ(labels, 1);  // one positive, one negative
    // leakage check
    for (const auto& p : f.val_patients)
      EXPECT_EQ(std::count(f.train_patients.begin(), f.train_patients.end(), p), 0);
  }
  EXPECT_EQ(seen.size(), 10u);
}

TEST(MakeFolds, SizesDifferByAtMostOne) {
  auto bags = signal_bags(23, 4, 4, 82);
  const auto folds = make_folds(bags, 5, 4);
  std::size_t mn = 100, mx = 0;
  for (const auto& f : folds) {
    mn = std::min(mn, f.val_patients.size());
    mx = std::max(mx, f.val_patients.size());
  }
  EXPECT_LE(mx - mn, 1u);
}

TEST(MakeFolds, InsufficientClassCountThrows) {
  auto bags = signal_bags(6, 4, 4, 83);
  // relabel so class 1 has just two patients
  for (std::size_t i = 0; i < bags.size(); ++i) bags[i].label = i < 2 ? 1 : 0;
  EXPECT_THROW(make_folds(bags, 5, 5), InsufficientClassCountError);
}

TEST(MakeFolds, MultiSlidePatientsStayTogether) {
  auto bags = signal_bags(12, 4, 4, 84);
  // merge pairs of slides onto shared patients
  for (std::size_t i = 0; i < bags.size(); ++i) bags[i].patient_id = "P" + std::to_string(i / 2);
  const auto folds = make_folds(bags, 3, 6);
  for (const auto& f : folds)
    for (const auto& p : f.val_patients)
      EXPECT_EQ(std::count(f.train_patients.begin(), f.train_patients.end(), p), 0);
}

TEST(MilAggregator, PermutationInvariantScores) {
  MilModelConfig cfg = fast_cfg();
  ParamStore<float> params;
  Rng rng(85);
  init_mil_params(cfg, 8, params, rng);
  auto bags = signal_bags(1, 40, 8, 86);
  const auto base = mil_score(params, cfg, bags[0].features);

  // shuffle rows
  Rng shuffle_rng(87);
  std::vector<std::size_t> idx(40);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  shuffle(idx, shuffle_rng);
  Tensor<float> shuffled({40, 8});
  for (int r = 0; r < 40; ++r)
    std::copy_n(bags[0].features.data.data() + idx[static_cast<std::size_t>(r)] * 8, 8,
                shuffled.data.data() + static_cast<std::size_t>(r) * 8);
  const auto perm = mil_score(params, cfg, shuffled);
  for (std::size_t c = 0; c < base.size(); ++c) EXPECT_NEAR(base[c], perm[c], 1e-5);
}

TEST(MilTraining, SingleBagFoldTrainsAndScores) {
  auto bags = signal_bags(3, 10, 6, 88);
  std::vector<Bag> train(bags.begin(), bags.begin() + 2);
  std::vector<Bag> val(bags.begin() + 2, bags.end());
  auto cfg = fast_cfg();
  cfg.epochs = 2;
  const auto res = train_mil_fold(train, val, cfg);
  ASSERT_EQ(res.val_scores.size(), 1u);
  EXPECT_GE(res.val_scores[0].second, 0.0);
  EXPECT_LE(res.val_scores[0].second, 1.0);
  EXPECT_EQ(res.val_auroc, -1.0);  // single-class validation set
}

TEST(MilTraining, TrueLabelsBeatShuffledControl) {
  auto bags = signal_bags(80, 24, 8, 89);
  const auto folds = make_folds(bags, 5, 7);
  auto cfg = fast_cfg();

  const auto cv_true = train_mil(bags, folds, cfg);
  double mean_true = 0;
  for (const auto& f : cv_true.folds) mean_true += f.val_auroc;
  mean_true /= 5.0;

  // shuffled-label control: chance band
  auto shuffled = bags;
  Rng rng(90);
  std::vector<int> labels;
  for (const auto& b : shuffled) labels.push_back(b.label);
  shuffle(labels, rng);
  for (std::size_t i = 0; i < shuffled.size(); ++i) shuffled[i].label = labels[i];
  const auto folds_s = make_folds(shuffled, 5, 7);
  const auto cv_shuf = train_mil(shuffled, folds_s, cfg);
  double mean_shuf = 0;
  for (const auto& f : cv_shuf.folds) mean_shuf += f.val_auroc;
  mean_shuf /= 5.0;

  EXPECT_GT(mean_true, 0.85);
  EXPECT_GT(mean_shuf, 0.35);
  EXPECT_LT(mean_shuf, 0.65);
  EXPECT_GT(mean_true, mean_shuf);
}

TEST(Deploy, IdenticalModelsAndRecomputeContract) {
  auto internal = signal_bags(20, 16, 8, 91);
  auto external = signal_bags(30, 16, 8, 92, "external");
  auto cfg = fast_cfg();
  cfg.epochs = 3;
  const auto folds = make_folds(internal, 5, 8);
  const auto cv = train_mil(internal, folds, cfg);

  // identical models: mean equals the single-model metric
  std::vector<const ParamStore<float>*> same(5, &cv.folds[0].params);
  const auto dep_same = deploy_external(same, cfg, external);
  EXPECT_NEAR(dep_same.mean_auroc, dep_same.per_model_auroc[0], 1e-15);
  EXPECT_NEAR(dep_same.mean_auprc, dep_same.per_model_auprc[0], 1e-15);

  // real five models; the reported means equal a recomputation from the
  // persisted score matrix
  std::vector<const ParamStore<float>*> models;
  for (const auto& f : cv.folds) models.push_back(&f.params);
  const auto dep = deploy_external(models, cfg, external);
  const auto dir = temp_dir("deploy");
  const auto csv = (dir / "scores.csv").string();
  write_score_matrix(csv, dep);
  const auto sm = read_score_matrix(csv);
  ASSERT_EQ(sm.by_fold.size(), 5u);
  std::map<std::string, int> label_of;
  for (const auto& b : external) label_of[b.slide_id] = b.label;
  double mean_auroc = 0, mean_auprc = 0;
  for (const auto& [fold, rows] : sm.by_fold) {
    ScoredLabels scored;
    for (const auto& [slide, scores] : rows) {
      scored.scores.push_back(scores[1]);
      scored.labels.push_back(label_of.at(slide));
    }
    mean_auroc += auroc(scored);
    mean_auprc += auprc(scored);
  }
  EXPECT_NEAR(dep.mean_auroc, mean_auroc / 5.0, 1e-9);
  EXPECT_NEAR(dep.mean_auprc, mean_auprc / 5.0, 1e-9);

  // empty external cohort is an error, not a silent empty report
  EXPECT_THROW(deploy_external(models, cfg, {}), EmptyResultError);
  fs::remove_all(dir);
}

TEST(MilCheckpoint, RoundTrip) {
  MilModelConfig cfg = fast_cfg();
  ParamStore<float> params;
  Rng rng(93);
  init_mil_params(cfg, 12, params, rng);
  const auto dir = temp_dir("milck");
  const auto path = (dir / "mil.ckpt").string();
  save_checkpoint(path, mil_to_checkpoint(params, cfg, 12));
  const auto [loaded, lcfg] = mil_from_checkpoint(load_checkpoint(path));
  EXPECT_EQ(lcfg.token_dim, cfg.token_dim);
  EXPECT_EQ(lcfg.heads, cfg.heads);
  ASSERT_EQ(loaded.entries.size(), params.entries.size());
  auto bags = signal_bags(1, 10, 12, 94);
  const auto a = mil_score(params, cfg, bags[0].features);
  const auto b = mil_score(loaded, lcfg, bags[0].features);
  for (std::size_t c = 0; c < a.size(); ++c) EXPECT_NEAR(a[c], b[c], 1e-7);
  fs::remove_all(dir);
}
