#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cpath/augment.hpp"
#include "cpath/config.hpp"
#include "cpath/image.hpp"
#include "cpath/loss.hpp"
#include "cpath/momentum.hpp"
#include "cpath/pipeline.hpp"

namespace cpath {

// SSL pretraining loop: warmup + cosine learning rate, symmetrized
// contrastive loss over the momentum pair, AdamW on the query branch, EMA
// after every optimizer step, per-epoch loss rows and resumable state
// checkpoints. Epochs are 1-based; sampling activation compares against the
// same numbering.

inline double lr_at(const TrainConfig& cfg, std::int64_t step, std::int64_t steps_per_epoch) {
  if (step < 0) throw Error("lr_at: negative step");
  const std::int64_t warmup = static_cast<std::int64_t>(cfg.warmup_epochs) * steps_per_epoch;
  const std::int64_t total = static_cast<std::int64_t>(cfg.epochs) * steps_per_epoch;
  if (step < warmup)
    return cfg.base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  const double t = total == warmup
                       ? 1.0
                       : static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return cfg.base_lr * 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, t)));
}

namespace detail {

constexpr std::uint64_t kInitTag = 0x1177;
constexpr std::uint64_t kOrderTag = 0x22aa;
constexpr std::uint64_t kAugTag = 0x33bb;

inline std::string diagnose_nonfinite(const EmbeddingBatch& queries, const EmbeddingBatch& keys) {
  std::ostringstream os;
  os << "non-finite loss; query/key cosine rows follow\n";
  for (std::size_t i = 0; i < queries.n; ++i) {
    bool bad = false;
    for (std::size_t d = 0; d < queries.dim; ++d)
      if (!std::isfinite(queries.row(i)[d])) bad = true;
    std::vector<double> row(keys.n);
    for (std::size_t j = 0; j < keys.n; ++j) {
      row[j] = cosine_sim(queries.row(i), keys.row(j));
      if (!std::isfinite(row[j])) bad = true;
    }
    if (!bad) continue;
    os << "anchor " << i << ":";
    for (double v : row) os << " " << v;
    os << "\n";
  }
  return os.str();
}

}  // namespace detail

template <class T>
class Trainer {
 public:
  TrainConfig cfg;
  MomentumPair<T> pair;
  std::int64_t global_step = 0;
  int completed_epochs = 0;
  double loss_ema = 0.0;
  std::vector<double> epoch_losses;
  std::string lineage;  // hash of the state this run resumed from, if any

  static Trainer init(const TrainConfig& cfg) {
    cfg.validate();
    Trainer t;
    t.cfg = cfg;
    Rng rng(derive_seed(cfg.seed, detail::kInitTag));
    const auto enc = cfg.encoder_config();
    t.pair = MomentumPair<T>::init(
        enc, default_projection_head(enc.feature_dim, cfg.proj_dim, cfg.proj_hidden),
        default_prediction_head(cfg.proj_dim, cfg.proj_hidden), cfg.momentum, rng);
    return t;
  }

  AdamWConfig adamw() const {
    AdamWConfig a;
    a.beta1 = cfg.beta1;
    a.beta2 = cfg.beta2;
    a.weight_decay = cfg.weight_decay;
    return a;
  }

  /// One optimizer step on a batch of (view_a, view_b, original) image
  /// tensors. `epoch` is the 1-based epoch this batch belongs to. Both query
  /// views run as one stacked forward; the three key-side passes likewise.
  double train_step(int epoch, const Tensor<T>& view_a, const Tensor<T>& view_b,
                    const Tensor<T>& originals, std::int64_t steps_per_epoch) {
    pair.query.params.zero_grad();
    const int n = view_a.dim(0);

    Tape<T> tape(true);
    BoundParams<T> params(tape, pair.query.params);
    const int qa = query_branch_forward(tape, params, pair.query, tape.input(view_a, false));
    const int qb = cfg.symmetrize
                       ? query_branch_forward(tape, params, pair.query, tape.input(view_b, false))
                       : -1;

    Tape<T> ktape(false);
    BoundParams<T> kparams(ktape, pair.key.params);
    const Tensor<T>& k_all = ktape.value(key_branch_forward(
        ktape, kparams, pair.key,
        ktape.input(stack3(view_a, view_b, cfg.originals_from_view_a ? view_a : originals),
                    false)));
    const auto keys_a = slice_batch(k_all, 0, n, Role::Key);
    const auto keys_b = slice_batch(k_all, n, n, Role::Key);
    const auto originals_k = slice_batch(k_all, 2 * n, n, Role::OriginalKey);

    const auto q_batch_a = slice_batch(tape.value(qa), 0, n, Role::Query);
    std::vector<double> grad_a, grad_b;
    const double loss_a = batch_loss(cfg.plan, epoch, q_batch_a, keys_b, originals_k,
                                     Temperature(cfg.tau), &grad_a);
    double total = loss_a;
    if (cfg.symmetrize) {
      const auto q_batch_b = slice_batch(tape.value(qb), 0, n, Role::Query);
      const double loss_b = batch_loss(cfg.plan, epoch, q_batch_b, keys_a, originals_k,
                                       Temperature(cfg.tau), &grad_b);
      total = 0.5 * (loss_a + loss_b);
    }
    if (!std::isfinite(total))
      throw NonFiniteLossError(detail::diagnose_nonfinite(q_batch_a, keys_b));

    const double scale = cfg.symmetrize ? 0.5 : 1.0;
    seed_grad(tape, qa, grad_a, scale);
    if (cfg.symmetrize) seed_grad(tape, qb, grad_b, scale);
    tape.backward(std::max(qa, qb));
    params.harvest();

    const double lr = lr_at(cfg, global_step, steps_per_epoch);
    adamw_step(pair.query.params, adamw(), lr, global_step + 1);

    if (cfg.momentum_schedule) {
      const double t = static_cast<double>(global_step + 1) /
                       static_cast<double>(cfg.epochs * steps_per_epoch);
      pair.m = 1.0 - (1.0 - cfg.momentum) * 0.5 * (std::cos(M_PI * std::min(1.0, t)) + 1.0);
    }
    pair.ema_update();
    ++global_step;
    pair.step = global_step;
    loss_ema = global_step == 1 ? total : 0.98 * loss_ema + 0.02 * total;
    return total;
  }

 private:
  static void seed_grad(Tape<T>& tape, int node, const std::vector<double>& g, double scale) {
    Tensor<T>& seed = tape.grad(node);
    for (std::size_t i = 0; i < g.size(); ++i) seed.data[i] = static_cast<T>(g[i] * scale);
  }

  static Tensor<T> stack3(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c) {
    auto shape = a.shape;
    shape[0] *= 3;
    Tensor<T> out(shape);
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.numel()));
    std::copy(c.data.begin(), c.data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(2 * a.numel()));
    return out;
  }

  static EmbeddingBatch slice_batch(const Tensor<T>& t, int row0, int rows, Role role) {
    const std::size_t dim = static_cast<std::size_t>(t.dim(1));
    EmbeddingBatch b(static_cast<std::size_t>(rows), dim, role);
    for (std::size_t i = 0; i < b.data.size(); ++i)
      b.data[i] = static_cast<double>(t.data[static_cast<std::size_t>(row0) * dim + i]);
    return b;
  }
};

// ---- data feeding --------------------------------------------------------------

/// In-memory patch supply: decoded patches of the (subsampled) internal
/// cohort, per-epoch shuffling, per-item augmentation streams. Batch order
/// within an epoch is a pure function of (seed, epoch).
class PatchSupply {
 public:
  using T_ = float;

  PatchSupply(const PreprocessedDataset& ds, const TrainConfig& cfg) : cfg_(cfg) {
    auto internal = ds.cohort("internal");
    if (internal.empty()) throw EmptyResultError("dataset has no internal cohort");
    std::vector<std::string> ids;
    for (const auto& s : internal) ids.push_back(s.slide_id);
    ids = subsample_fraction(ids, cfg.data_fraction, cfg.seed);
    for (const auto& id : ids)
      for (const auto& path : ds.accepted_patches(id)) patches_.push_back(read_png(path));
    if (patches_.empty()) throw EmptyResultError("no accepted patches in the training set");
  }

  std::size_t size() const { return patches_.size(); }
  std::int64_t steps_per_epoch() const {
    return static_cast<std::int64_t>(patches_.size()) / cfg_.batch_size;
  }

  /// Deterministic item order of an epoch (1-based), full batches only.
  std::vector<std::size_t> epoch_order(int epoch) const {
    std::vector<std::size_t> order(patches_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(derive_seed(cfg_.seed, detail::kOrderTag), static_cast<std::uint64_t>(epoch)));
    shuffle(order, rng);
    return order;
  }

  /// Materialize batch `b` of an epoch as three normalized image tensors.
  void load_batch(int epoch, std::int64_t b, const std::vector<std::size_t>& order,
                  Tensor<T_>& view_a, Tensor<T_>& view_b, Tensor<T_>& originals) const {
    const int n = cfg_.batch_size;
    const int px = cfg_.input_size;
    view_a = Tensor<T_>({n, px, px, 3});
    view_b = Tensor<T_>({n, px, px, 3});
    originals = Tensor<T_>({n, px, px, 3});
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
      const std::size_t item = order[static_cast<std::size_t>(b) * n + i];
      AugmentationPolicy policy = AugmentationPolicy::desk_default();
      policy.seed = derive_seed(derive_seed(cfg_.seed, detail::kAugTag),
                                (static_cast<std::uint64_t>(epoch) << 32) ^
                                    (static_cast<std::uint64_t>(b) * cfg_.batch_size + i));
      const auto views = two_views(to_float(patches_[item]), policy, px);
      fill_row(view_a, i, views.view_a);
      fill_row(view_b, i, views.view_b);
      fill_row(originals, i, views.original);
    }
  }

 private:
  static void fill_row(Tensor<T_>& dst, int i, const ImageF& img) {
    const std::size_t off = static_cast<std::size_t>(i) * img.pix.size();
    for (std::size_t k = 0; k < img.pix.size(); ++k)
      dst.data[off + k] = img.pix[k] * 2.0f - 1.0f;  // center to [-1, 1]
  }

  TrainConfig cfg_;
  std::vector<ImageU8> patches_;
};

// ---- pretraining driver ----------------------------------------------------------

struct PretrainResult {
  std::string final_checkpoint;
  std::string best_checkpoint;
  std::string state_checkpoint;
  std::string loss_csv;
  std::vector<double> epoch_losses;
  int epochs_run = 0;
};

namespace detail {

template <class T>
void save_state(const std::string& path, const Trainer<T>& t) {
  Checkpoint ck = pair_to_checkpoint(t.pair, /*f64=*/true);
  for (const auto& e : t.pair.query.params.entries) {
    if (e.m.empty()) continue;
    ck.blobs.push_back({"opt.m." + e.name, e.m.shape,
                        std::vector<double>(e.m.data.begin(), e.m.data.end())});
    ck.blobs.push_back({"opt.v." + e.name, e.v.shape,
                        std::vector<double>(e.v.data.begin(), e.v.data.end())});
  }
  std::ostringstream meta;
  meta << ck.meta << "completed_epochs=" << t.completed_epochs << "\nglobal_step="
       << t.global_step << "\nloss_ema=" << t.loss_ema << "\nlineage=" << t.lineage
       << "\nepoch_losses=";
  for (std::size_t i = 0; i < t.epoch_losses.size(); ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", t.epoch_losses[i]);
    meta << (i ? "," : "") << buf;
  }
  meta << "\nconfig_hash=" << hex64(fnv1a64(config_echo(t.cfg))) << "\n";
  ck.meta = meta.str();
  save_checkpoint(path, ck);
}

template <class T>
bool try_resume(const std::string& path, Trainer<T>& t) {
  if (!std::filesystem::exists(path)) return false;
  const auto ck = load_checkpoint(path);
  std::map<std::string, std::string> kv;
  std::istringstream in(ck.meta);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (kv["config_hash"] != hex64(fnv1a64(config_echo(t.cfg))))
    throw Error("state checkpoint was produced by a different config: " + path);
  load_pair_params(t.pair, ck);
  for (auto& e : t.pair.query.params.entries) {
    if (!ck.has_blob("opt.m." + e.name)) continue;
    const auto& m = ck.blob("opt.m." + e.name);
    const auto& v = ck.blob("opt.v." + e.name);
    e.m = Tensor<T>(m.shape);
    e.v = Tensor<T>(v.shape);
    for (std::size_t i = 0; i < m.data.size(); ++i) e.m.data[i] = static_cast<T>(m.data[i]);
    for (std::size_t i = 0; i < v.data.size(); ++i) e.v.data[i] = static_cast<T>(v.data[i]);
  }
  t.completed_epochs = std::stoi(kv.at("completed_epochs"));
  t.global_step = std::stoll(kv.at("global_step"));
  t.loss_ema = std::stod(kv.at("loss_ema"));
  t.pair.step = t.global_step;
  t.pair.m = std::stod(kv.at("m"));
  t.lineage = checkpoint_hash(path);
  t.epoch_losses.clear();
  if (!kv["epoch_losses"].empty()) {
    std::istringstream ls(kv["epoch_losses"]);
    std::string item;
    while (std::getline(ls, item, ',')) t.epoch_losses.push_back(std::stod(item));
  }
  return true;
}

}  // namespace detail

/// Full pretraining run (resumes from out_dir/state.ckpt when present).
/// Writes loss.csv (one row per epoch: epoch,step,lr,loss), state.ckpt
/// (64-bit, resumable), final.ckpt and best.ckpt (32-bit).
inline PretrainResult run_pretraining(const TrainConfig& cfg, const std::string& data_dir,
                                      const std::string& out_dir) {
  namespace fs = std::filesystem;
  cfg.validate();
  fs::create_directories(out_dir);
  const auto ds = PreprocessedDataset::open(data_dir);
  PatchSupply supply(ds, cfg);
  const std::int64_t spe = supply.steps_per_epoch();
  if (spe < 1) throw Error("batch_size exceeds the training patch count");

  auto trainer = Trainer<float>::init(cfg);
  const std::string state_path = (fs::path(out_dir) / "state.ckpt").string();
  detail::try_resume(state_path, trainer);

  PretrainResult result;
  result.state_checkpoint = state_path;
  result.final_checkpoint = (fs::path(out_dir) / "final.ckpt").string();
  result.best_checkpoint = (fs::path(out_dir) / "best.ckpt").string();
  result.loss_csv = (fs::path(out_dir) / "loss.csv").string();

  auto write_csv = [&]() {
    std::ofstream csv(result.loss_csv);
    csv << "epoch,step,lr,loss\n";
    for (std::size_t e = 0; e < trainer.epoch_losses.size(); ++e) {
      const std::int64_t step_end = static_cast<std::int64_t>(e + 1) * spe;
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.10g,%.10g", lr_at(cfg, step_end - 1, spe),
                    trainer.epoch_losses[e]);
      csv << (e + 1) << "," << step_end << "," << buf << "\n";
    }
  };

  double best = trainer.epoch_losses.empty()
                    ? std::numeric_limits<double>::infinity()
                    : *std::min_element(trainer.epoch_losses.begin(), trainer.epoch_losses.end());
  for (int epoch = trainer.completed_epochs + 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = supply.epoch_order(epoch);
    double sum = 0.0;
    Tensor<float> va, vb, orig;
    for (std::int64_t b = 0; b < spe; ++b) {
      supply.load_batch(epoch, b, order, va, vb, orig);
      sum += trainer.train_step(epoch, va, vb, orig, spe);
    }
    trainer.completed_epochs = epoch;
    trainer.epoch_losses.push_back(sum / static_cast<double>(spe));
    write_csv();
    detail::save_state(state_path, trainer);
    save_checkpoint(result.final_checkpoint, pair_to_checkpoint(trainer.pair));
    if (trainer.epoch_losses.back() < best) {
      best = trainer.epoch_losses.back();
      save_checkpoint(result.best_checkpoint, pair_to_checkpoint(trainer.pair));
    }
  }
  if (!fs::exists(result.best_checkpoint))
    save_checkpoint(result.best_checkpoint, pair_to_checkpoint(trainer.pair));
  result.epoch_losses = trainer.epoch_losses;
  result.epochs_run = trainer.completed_epochs;
  return result;
}

}  // namespace cpath
