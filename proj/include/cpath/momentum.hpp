#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "cpath/checkpoint.hpp"
#include "cpath/core_math.hpp"
#include "cpath/encoder.hpp"
#include "cpath/errors.hpp"
#include "cpath/nn.hpp"

namespace cpath {

// Twin-encoder wiring. The query branch is encoder -> projection ->
// prediction, gradient-trained; the key branch is encoder -> projection,
// updated only as an exponential moving average of the query side. Key-side
// parameter names and shapes are exactly the encoder+projection subset of
// the query side.

template <class T>
struct SslModel {
  StageEncoderConfig enc;
  MlpHeadConfig proj;
  MlpHeadConfig pred;  // empty dims: branch has no prediction head
  ParamStore<T> params;

  bool has_pred() const { return pred.dims.size() >= 2; }

  void init(Rng& rng) {
    init_stage_encoder(enc, params, "enc.", rng);
    init_mlp_head(proj, params, "proj.", rng);
    if (has_pred()) init_mlp_head(pred, params, "pred.", rng);
  }
};

/// Default desk-scale heads: 3-layer projection and 2-layer prediction onto
/// a 256-wide contrastive space.
inline MlpHeadConfig default_projection_head(int in_dim, int out_dim = 256, int hidden = 256) {
  return MlpHeadConfig{{in_dim, hidden, hidden, out_dim}};
}
inline MlpHeadConfig default_prediction_head(int dim = 256, int hidden = 256) {
  return MlpHeadConfig{{dim, hidden, dim}};
}

/// Global-average-pooled final-stage embedding, the encoder output the SSL
/// heads consume: (B, C_last).
template <class T>
int ssl_backbone_embedding(Tape<T>& tape, BoundParams<T>& params, const StageEncoderConfig& cfg,
                           int image) {
  const auto stages = stage_encoder_forward(tape, params, cfg, "enc.", image);
  const StageNode& last = stages.back();
  int x = tape.adaptive_avg_pool(last.node, 1, 1);
  return tape.reshape(x, {tape.value(image).dim(0), last.c});
}

/// Query branch: encoder -> projection -> prediction -> row L2 norm.
template <class T>
int query_branch_forward(Tape<T>& tape, BoundParams<T>& params, const SslModel<T>& model,
                         int image) {
  int x = ssl_backbone_embedding(tape, params, model.enc, image);
  x = mlp_head_forward(tape, params, model.proj, "proj.", x);
  if (model.has_pred()) x = mlp_head_forward(tape, params, model.pred, "pred.", x);
  return tape.l2norm_rows(x);
}

/// Key branch: encoder -> projection -> row L2 norm (no prediction head).
template <class T>
int key_branch_forward(Tape<T>& tape, BoundParams<T>& params, const SslModel<T>& model,
                       int image) {
  int x = ssl_backbone_embedding(tape, params, model.enc, image);
  x = mlp_head_forward(tape, params, model.proj, "proj.", x);
  return tape.l2norm_rows(x);
}

template <class T>
struct MomentumPair {
  SslModel<T> query;  // theta_q: encoder + projection + prediction
  SslModel<T> key;    // theta_k: encoder + projection
  double m = 0.99;
  std::int64_t step = 0;

  static MomentumPair init(const StageEncoderConfig& enc, const MlpHeadConfig& proj,
                           const MlpHeadConfig& pred, double momentum, Rng& rng) {
    if (!(momentum >= 0.0 && momentum < 1.0)) throw Error("momentum must be in [0,1)");
    MomentumPair p;
    p.m = momentum;
    p.query.enc = enc;
    p.query.proj = proj;
    p.query.pred = pred;
    p.query.init(rng);
    p.key.enc = enc;
    p.key.proj = proj;
    // key starts as a copy of the matching query subset
    for (const auto& e : p.query.params.entries)
      if (e.name.rfind("pred.", 0) != 0) p.key.params.add(e.name, e.value);
    return p;
  }

  /// theta_k <- m * theta_k + (1-m) * theta_q, elementwise; query untouched.
  void ema_update() {
    const T mm = static_cast<T>(m);
    const T om = static_cast<T>(1.0 - m);
    for (auto& e : key.params.entries) {
      const auto& q = query.params.at(e.name);
      if (!same_shape(q.value.shape, e.value.shape))
        throw ShapeMismatchError("ema_update: shape of " + e.name);
      for (std::size_t i = 0; i < e.value.data.size(); ++i)
        e.value.data[i] = mm * e.value.data[i] + om * q.value.data[i];
    }
  }
};

/// The five embedding streams of one batch. Key-side batches carry no
/// gradient by construction: they are detached values computed on no-grad
/// tapes.
struct EmbeddedViews {
  EmbeddingBatch queries_a, queries_b;
  EmbeddingBatch keys_a, keys_b;
  EmbeddingBatch original_keys;
};

namespace detail {

template <class T>
EmbeddingBatch to_batch(const Tensor<T>& t, Role role) {
  EmbeddingBatch b(static_cast<std::size_t>(t.dim(0)), static_cast<std::size_t>(t.dim(1)), role);
  for (std::size_t i = 0; i < t.data.size(); ++i) b.data[i] = static_cast<double>(t.data[i]);
  return b;
}

}  // namespace detail

/// Inference-path embedding of three aligned image batches. `originals` go
/// through the key branch with no augmentation applied upstream.
template <class T>
EmbeddedViews embed_views(MomentumPair<T>& pair, const Tensor<T>& view_a, const Tensor<T>& view_b,
                          const Tensor<T>& originals) {
  if (!same_shape(view_a.shape, view_b.shape) || !same_shape(view_a.shape, originals.shape))
    throw ShapeMismatchError("embed_views: the three batches must align");
  EmbeddedViews out;
  auto run = [&](const SslModel<T>& model, const Tensor<T>& imgs, bool query_side) {
    Tape<T> tape(false);
    BoundParams<T> params(tape, const_cast<SslModel<T>&>(model).params);
    const int x = tape.input(imgs, false);
    const int e = query_side ? query_branch_forward(tape, params, model, x)
                             : key_branch_forward(tape, params, model, x);
    return tape.value(e);
  };
  out.queries_a = detail::to_batch(run(pair.query, view_a, true), Role::Query);
  out.queries_b = detail::to_batch(run(pair.query, view_b, true), Role::Query);
  out.keys_a = detail::to_batch(run(pair.key, view_a, false), Role::Key);
  out.keys_b = detail::to_batch(run(pair.key, view_b, false), Role::Key);
  out.original_keys = detail::to_batch(run(pair.key, originals, false), Role::OriginalKey);
  return out;
}

// ---- checkpoint glue ---------------------------------------------------------

inline std::string encoder_config_meta(const StageEncoderConfig& c) {
  std::ostringstream os;
  os << "input_size=" << c.input_size << "\nstem=" << c.stem_kernel << "\nwindow=" << c.window
     << "\nhead_dim=" << c.head_dim << "\nmlp_ratio=" << c.mlp_ratio << "\nfeature_dim="
     << c.feature_dim << "\nstages=";
  for (std::size_t s = 0; s < c.stages.size(); ++s)
    os << (s ? "," : "") << c.stages[s].blocks << "x" << c.stages[s].channels;
  os << "\n";
  return os.str();
}

inline std::string join_dims(const std::vector<int>& dims) {
  std::string s;
  for (std::size_t i = 0; i < dims.size(); ++i) s += (i ? "," : "") + std::to_string(dims[i]);
  return s;
}

template <class T>
Checkpoint pair_to_checkpoint(const MomentumPair<T>& pair, bool f64 = false) {
  Checkpoint ck;
  ck.f64 = f64;
  std::ostringstream meta;
  meta << "kind=momentum_pair\nm=" << pair.m << "\nstep=" << pair.step
       << "\nproj_dims=" << join_dims(pair.query.proj.dims)
       << "\npred_dims=" << join_dims(pair.query.pred.dims) << "\n"
       << encoder_config_meta(pair.query.enc);
  ck.meta = meta.str();
  for (const auto& e : pair.query.params.entries)
    ck.blobs.push_back({"q." + e.name, e.value.shape,
                        std::vector<double>(e.value.data.begin(), e.value.data.end())});
  for (const auto& e : pair.key.params.entries)
    ck.blobs.push_back({"k." + e.name, e.value.shape,
                        std::vector<double>(e.value.data.begin(), e.value.data.end())});
  return ck;
}

template <class T>
void load_pair_params(MomentumPair<T>& pair, const Checkpoint& ck) {
  auto load_into = [&](ParamStore<T>& store, const std::string& prefix) {
    for (auto& e : store.entries) {
      const auto& b = ck.blob(prefix + e.name);
      if (b.shape != e.value.shape) throw ShapeMismatchError("checkpoint blob " + prefix + e.name);
      for (std::size_t i = 0; i < b.data.size(); ++i) e.value.data[i] = static_cast<T>(b.data[i]);
    }
  };
  load_into(pair.query.params, "q.");
  load_into(pair.key.params, "k.");
}

}  // namespace cpath
