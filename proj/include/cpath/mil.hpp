#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cpath/checkpoint.hpp"
#include "cpath/features.hpp"
#include "cpath/metrics.hpp"
#include "cpath/nn.hpp"
#include "cpath/pipeline.hpp"
#include "cpath/rng.hpp"

namespace cpath {

// Weakly-supervised bag classification: a two-layer, eight-head transformer
// aggregator with a learnable class token and no positional encodings (bags
// are unordered patch sets), trained with class-weighted cross-entropy under
// patient-level stratified five-fold cross-validation, then deployed on the
// external cohort. Reported numbers are means over the five fold models.

struct Bag {
  std::string slide_id;
  std::string patient_id;
  std::string cohort;
  int label = 0;
  Tensor<float> features;  // (n, D)
};

struct FoldSplit {
  int fold_index = 0;
  std::vector<std::string> train_patients;
  std::vector<std::string> val_patients;
};

struct MilModelConfig {
  int layers = 2;
  int heads = 8;
  int token_dim = 64;
  int classes = 2;
  int mlp_hidden = 128;
  int max_bag = 512;  // per-step uniform subsample cap, redrawn each epoch
  int epochs = 20;
  int patience = 5;
  double lr = 1e-4;
  double weight_decay = 0.01;
  std::uint64_t seed = 1;

  void validate() const {
    if (token_dim % heads) throw Error("token_dim must divide into heads");
    if (layers < 1 || classes < 2) throw Error("bad MIL model config");
  }
};

/// Bags of one target from a feature store + label table. Slides without a
/// feature file (zero accepted patches upstream) are skipped.
inline std::vector<Bag> load_bags(const FeatureStore& store, const LabelTable& labels,
                                  const std::string& target, const std::string& cohort) {
  std::vector<Bag> bags;
  for (const auto& s : labels.slides) {
    if (s.cohort != cohort || !store.has(s.slide_id)) continue;
    const auto f = store.load(s.slide_id);
    Bag b;
    b.slide_id = s.slide_id;
    b.patient_id = s.patient_id;
    b.cohort = s.cohort;
    if (!s.labels.count(target)) throw Error("unknown target '" + target + "'");
    b.label = s.labels.at(target);
    b.features = Tensor<float>({static_cast<int>(f.count), static_cast<int>(f.dim)});
    for (std::size_t i = 0; i < f.data.size(); ++i) b.features.data[i] = f.data[i];
    bags.push_back(std::move(b));
  }
  return bags;
}

// ---- folds -------------------------------------------------------------------

/// Patient-level, label-stratified k-fold partition. Every patient lands in
/// exactly one validation fold; fold sizes differ by at most one.
inline std::vector<FoldSplit> make_folds(const std::vector<Bag>& bags, int k, std::uint64_t seed) {
  if (k < 2) throw Error("need k >= 2 folds");
  std::map<std::string, int> patient_label;
  for (const auto& b : bags) {
    auto [it, inserted] = patient_label.emplace(b.patient_id, b.label);
    if (!inserted && it->second != b.label) it->second = std::max(it->second, b.label);
  }
  if (static_cast<int>(patient_label.size()) < k)
    throw InsufficientClassCountError("fewer patients than folds");

  std::map<int, std::vector<std::string>> by_label;
  for (const auto& [patient, label] : patient_label) by_label[label].push_back(patient);
  for (const auto& [label, patients] : by_label)
    if (static_cast<int>(patients.size()) < k)
      throw InsufficientClassCountError("class " + std::to_string(label) + " has " +
                                        std::to_string(patients.size()) + " patients, need >= " +
                                        std::to_string(k));

  std::vector<std::vector<std::string>> val(static_cast<std::size_t>(k));
  Rng rng(derive_seed(seed, 0xf01d5));
  int cursor = 0;
  for (auto& [label, patients] : by_label) {
    shuffle(patients, rng);
    for (const auto& p : patients) val[static_cast<std::size_t>(cursor++ % k)].push_back(p);
  }
  std::vector<FoldSplit> folds(static_cast<std::size_t>(k));
  for (int f = 0; f < k; ++f) {
    folds[static_cast<std::size_t>(f)].fold_index = f;
    folds[static_cast<std::size_t>(f)].val_patients = val[static_cast<std::size_t>(f)];
    for (int g = 0; g < k; ++g)
      if (g != f)
        for (const auto& p : val[static_cast<std::size_t>(g)])
          folds[static_cast<std::size_t>(f)].train_patients.push_back(p);
  }
  return folds;
}

// ---- aggregator --------------------------------------------------------------

template <class T>
void init_mil_params(const MilModelConfig& cfg, int input_dim, ParamStore<T>& store, Rng& rng) {
  cfg.validate();
  store.add("embed.w", trunc_normal<T>({input_dim, cfg.token_dim}, 0.02, rng));
  store.add("embed.b", zeros<T>({cfg.token_dim}));
  store.add("cls", trunc_normal<T>({1, 1, cfg.token_dim}, 0.02, rng));
  for (int l = 0; l < cfg.layers; ++l)
    init_transformer_block(BlockDims{cfg.token_dim, cfg.heads, cfg.mlp_hidden}, store,
                           "blk" + std::to_string(l) + ".", rng);
  store.add("ln_f.g", ones<T>({cfg.token_dim}));
  store.add("ln_f.b", zeros<T>({cfg.token_dim}));
  store.add("head.w", trunc_normal<T>({cfg.token_dim, cfg.classes}, 0.02, rng));
  store.add("head.b", zeros<T>({cfg.classes}));
}

/// Logits (1, classes) for one bag of (n, D) features.
template <class T>
int mil_forward(Tape<T>& tape, BoundParams<T>& params, const MilModelConfig& cfg, int features) {
  const int n = tape.value(features).dim(0);
  int x = tape.linear(features, params.node("embed.w"), params.node("embed.b"));
  x = tape.reshape(x, {1, n, cfg.token_dim});
  x = tape.concat(params.node("cls"), x, 1);  // class token first
  for (int l = 0; l < cfg.layers; ++l)
    x = transformer_block(tape, params, "blk" + std::to_string(l) + ".", x, 1, n + 1,
                          BlockDims{cfg.token_dim, cfg.heads, cfg.mlp_hidden});
  x = tape.layernorm(x, params.node("ln_f.g"), params.node("ln_f.b"));
  x = tape.slice(x, 1, 0, 1);  // class token
  x = tape.reshape(x, {1, cfg.token_dim});
  return tape.linear(x, params.node("head.w"), params.node("head.b"));
}

namespace detail {

inline std::vector<double> softmax_probs(const std::vector<double>& logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

}  // namespace detail

/// Class probabilities for one bag. Scoring runs in 64-bit regardless of the
/// training precision so deployed scores are stable and order-insensitive.
inline std::vector<double> mil_score(const ParamStore<float>& params, const MilModelConfig& cfg,
                                     const Tensor<float>& features) {
  ParamStore<double> p64;
  for (const auto& e : params.entries) p64.add(e.name, e.value.template cast<double>());
  Tape<double> tape(false);
  BoundParams<double> bound(tape, p64);
  const int logits = mil_forward(tape, bound, cfg, tape.input(features.cast<double>(), false));
  const auto& lv = tape.value(logits);
  return detail::softmax_probs(std::vector<double>(lv.data.begin(), lv.data.end()));
}

struct MilTrainResult {
  ParamStore<float> params;   // best-validation weights
  double best_val_loss = 0.0;
  int epochs_ran = 0;
  double val_auroc = -1.0;    // -1 when the fold's validation set is single-class
  double val_auprc = -1.0;
  std::vector<std::pair<std::string, double>> val_scores;  // slide -> P(class 1)
};

/// Train one fold's aggregator: AdamW, class-weighted cross-entropy, bag
/// subsampling to `max_bag` rows per step, early stop on validation loss.
inline MilTrainResult train_mil_fold(const std::vector<Bag>& train, const std::vector<Bag>& val,
                                     const MilModelConfig& cfg) {
  if (train.empty()) throw Error("empty training fold");
  const int dim = train.front().features.dim(1);

  // inverse-frequency class weights
  std::vector<double> counts(static_cast<std::size_t>(cfg.classes), 0.0);
  for (const auto& b : train) counts[static_cast<std::size_t>(b.label)] += 1.0;
  std::vector<double> weights(counts.size(), 0.0);
  for (std::size_t c = 0; c < counts.size(); ++c)
    weights[c] = counts[c] > 0 ? static_cast<double>(train.size()) /
                                     (static_cast<double>(cfg.classes) * counts[c])
                               : 0.0;

  ParamStore<float> params;
  Rng init_rng(derive_seed(cfg.seed, 0x312a));
  init_mil_params(cfg, dim, params, init_rng);

  AdamWConfig opt;
  opt.weight_decay = cfg.weight_decay;

  auto subsample = [&](const Bag& bag, Rng& rng) {
    const int n = bag.features.dim(0);
    if (n <= cfg.max_bag) return bag.features;
    std::vector<std::size_t> idx(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    shuffle(idx, rng);
    Tensor<float> out({cfg.max_bag, dim});
    for (int i = 0; i < cfg.max_bag; ++i)
      std::copy_n(bag.features.data.data() + idx[static_cast<std::size_t>(i)] * dim, dim,
                  out.data.data() + static_cast<std::size_t>(i) * dim);
    return out;
  };

  auto val_loss = [&](const ParamStore<float>& p) {
    if (val.empty()) return 0.0;
    double total = 0;
    for (const auto& b : val) {
      const auto probs = mil_score(p, cfg, b.features);
      total += -std::log(std::max(probs[static_cast<std::size_t>(b.label)], 1e-12));
    }
    return total / static_cast<double>(val.size());
  };

  MilTrainResult result;
  result.best_val_loss = val_loss(params);
  result.params = params;
  int since_best = 0;
  std::int64_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng epoch_rng(derive_seed(derive_seed(cfg.seed, 0xe90c), static_cast<std::uint64_t>(epoch)));
    shuffle(order, epoch_rng);
    for (std::size_t oi = 0; oi < order.size(); ++oi) {
      const Bag& bag = train[order[oi]];
      const auto feats = subsample(bag, epoch_rng);
      params.zero_grad();
      Tape<float> tape(true);
      BoundParams<float> bound(tape, params);
      const int logits = mil_forward(tape, bound, cfg, tape.input(feats, false));
      const auto& lv = tape.value(logits);
      const auto probs =
          detail::softmax_probs(std::vector<double>(lv.data.begin(), lv.data.end()));
      // weighted CE gradient: w_y * (p - onehot(y))
      Tensor<float>& seed = tape.grad(logits);
      for (int c = 0; c < cfg.classes; ++c)
        seed.data[static_cast<std::size_t>(c)] = static_cast<float>(
            weights[static_cast<std::size_t>(bag.label)] *
            (probs[static_cast<std::size_t>(c)] - (c == bag.label ? 1.0 : 0.0)));
      tape.backward(logits);
      bound.harvest();
      adamw_step(params, opt, cfg.lr, ++step);
    }
    const double vl = val_loss(params);
    result.epochs_ran = epoch;
    if (vl < result.best_val_loss - 1e-9) {
      result.best_val_loss = vl;
      result.params = params;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }

  // validation scores and metrics from the best weights
  ScoredLabels scored;
  for (const auto& b : val) {
    const auto probs = mil_score(result.params, cfg, b.features);
    result.val_scores.emplace_back(b.slide_id, probs[1]);
    scored.scores.push_back(probs[1]);
    scored.labels.push_back(b.label);
  }
  if (!val.empty()) {
    try {
      result.val_auroc = auroc(scored);
      result.val_auprc = auprc(scored);
    } catch (const Error&) {
      // single-class validation folds keep the -1 sentinel
    }
  }
  return result;
}

// ---- cross-validation + deployment --------------------------------------------

struct CvResult {
  std::vector<MilTrainResult> folds;
  std::vector<FoldSplit> splits;
};

/// Five-fold (or k-fold) cross-validated training over the internal bags.
inline CvResult train_mil(const std::vector<Bag>& bags, const std::vector<FoldSplit>& folds,
                          const MilModelConfig& cfg) {
  CvResult out;
  out.splits = folds;
  for (const auto& split : folds) {
    std::vector<Bag> train, val;
    for (const auto& b : bags) {
      const bool in_val = std::find(split.val_patients.begin(), split.val_patients.end(),
                                    b.patient_id) != split.val_patients.end();
      (in_val ? val : train).push_back(b);
    }
    MilModelConfig fold_cfg = cfg;
    fold_cfg.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(split.fold_index) + 101);
    out.folds.push_back(train_mil_fold(train, val, fold_cfg));
  }
  return out;
}

struct DeployResult {
  std::vector<std::string> slide_ids;
  std::vector<int> labels;
  // scores[model][bag][class]
  std::vector<std::vector<std::vector<double>>> scores;
  std::vector<double> per_model_auroc;
  std::vector<double> per_model_auprc;
  double mean_auroc = 0.0;
  double mean_auprc = 0.0;
};

/// Every fold model scores every external bag; the reported numbers are the
/// means of the per-model metrics.
inline DeployResult deploy_external(const std::vector<const ParamStore<float>*>& models,
                                    const MilModelConfig& cfg, const std::vector<Bag>& external) {
  if (external.empty()) throw EmptyResultError("external cohort is empty");
  if (models.empty()) throw Error("no fold models to deploy");
  for (const auto& b : external)
    if (b.features.dim(1) != external.front().features.dim(1))
      throw DimensionMismatchError("external bags disagree on feature dimension");

  DeployResult out;
  for (const auto& b : external) {
    out.slide_ids.push_back(b.slide_id);
    out.labels.push_back(b.label);
  }
  for (const auto* m : models) {
    std::vector<std::vector<double>> rows;
    ScoredLabels scored;
    for (const auto& b : external) {
      auto probs = mil_score(*m, cfg, b.features);
      scored.scores.push_back(probs[1]);
      scored.labels.push_back(b.label);
      rows.push_back(std::move(probs));
    }
    out.scores.push_back(std::move(rows));
    out.per_model_auroc.push_back(auroc(scored));
    out.per_model_auprc.push_back(auprc(scored));
  }
  for (double v : out.per_model_auroc) out.mean_auroc += v;
  for (double v : out.per_model_auprc) out.mean_auprc += v;
  out.mean_auroc /= static_cast<double>(models.size());
  out.mean_auprc /= static_cast<double>(models.size());
  return out;
}

// ---- persistence ----------------------------------------------------------------

inline Checkpoint mil_to_checkpoint(const ParamStore<float>& params, const MilModelConfig& cfg,
                                    int input_dim) {
  Checkpoint ck;
  std::ostringstream meta;
  meta << "kind=mil\nlayers=" << cfg.layers << "\nheads=" << cfg.heads << "\ntoken_dim="
       << cfg.token_dim << "\nclasses=" << cfg.classes << "\nmlp_hidden=" << cfg.mlp_hidden
       << "\ninput_dim=" << input_dim << "\n";
  ck.meta = meta.str();
  for (const auto& e : params.entries)
    ck.blobs.push_back({e.name, e.value.shape,
                        std::vector<double>(e.value.data.begin(), e.value.data.end())});
  return ck;
}

inline std::pair<ParamStore<float>, MilModelConfig> mil_from_checkpoint(const Checkpoint& ck) {
  std::map<std::string, std::string> kv;
  std::istringstream in(ck.meta);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  MilModelConfig cfg;
  cfg.layers = std::stoi(kv.at("layers"));
  cfg.heads = std::stoi(kv.at("heads"));
  cfg.token_dim = std::stoi(kv.at("token_dim"));
  cfg.classes = std::stoi(kv.at("classes"));
  cfg.mlp_hidden = std::stoi(kv.at("mlp_hidden"));
  ParamStore<float> params;
  for (const auto& b : ck.blobs) {
    Tensor<float> t(b.shape);
    for (std::size_t i = 0; i < b.data.size(); ++i) t.data[i] = static_cast<float>(b.data[i]);
    params.add(b.name, std::move(t));
  }
  return {std::move(params), cfg};
}

/// Score matrix CSV: slide_id,fold,score_class_0,...,score_class_{k-1}.
inline void write_score_matrix(const std::string& path, const DeployResult& r) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  const std::size_t classes = r.scores.front().front().size();
  out << "slide_id,fold";
  for (std::size_t c = 0; c < classes; ++c) out << ",score_class_" << c;
  out << "\n";
  for (std::size_t m = 0; m < r.scores.size(); ++m)
    for (std::size_t b = 0; b < r.slide_ids.size(); ++b) {
      out << r.slide_ids[b] << "," << m;
      for (double v : r.scores[m][b]) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        out << "," << buf;
      }
      out << "\n";
    }
}

struct ScoreMatrix {
  // rows keyed by fold -> (slide_id, class scores)
  std::map<int, std::vector<std::pair<std::string, std::vector<double>>>> by_fold;
};

inline ScoreMatrix read_score_matrix(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  std::string line;
  std::getline(in, line);  // header
  ScoreMatrix sm;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string field;
    std::getline(ls, field, ',');
    const std::string slide = field;
    std::getline(ls, field, ',');
    const int fold = std::stoi(field);
    std::vector<double> scores;
    while (std::getline(ls, field, ',')) scores.push_back(std::stod(field));
    sm.by_fold[fold].emplace_back(slide, std::move(scores));
  }
  return sm;
}

}  // namespace cpath
