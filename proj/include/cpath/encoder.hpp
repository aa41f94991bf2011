#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cpath/autodiff.hpp"
#include "cpath/errors.hpp"
#include "cpath/nn.hpp"
#include "cpath/rng.hpp"
#include "cpath/tensor.hpp"

namespace cpath {

// Hierarchical patch encoder: a convolutional patch-embed stem followed by
// stages of windowed transformer blocks. Channels double and the spatial
// grid halves at every stage transition; any stage's activation map can be
// pooled to a fixed-width feature.

struct StageSpec {
  int blocks;
  int channels;
};

struct StageEncoderConfig {
  int input_size = 64;
  int in_channels = 3;
  int stem_kernel = 4;  // kernel == stride: non-overlapping patch embedding
  int stem_stride = 4;
  std::vector<StageSpec> stages = {{1, 12}, {1, 24}, {2, 48}, {1, 96}};
  int feature_dim = 96;  // pooled width per stage (the 768 analog)
  int window = 4;        // attention window, clamped to the stage grid
  int head_dim = 4;
  double mlp_ratio = 4.0;

  int num_stages() const { return static_cast<int>(stages.size()); }

  /// Spatial grid edge of stage s (square grids).
  int grid(int s) const { return (input_size / stem_stride) >> s; }

  int effective_window(int s) const { return std::min(window, grid(s)); }

  void validate() const {
    if (stages.empty()) throw Error("encoder needs at least one stage");
    if (stem_kernel != stem_stride) throw Error("stem kernel must equal stride");
    if (input_size % stem_stride) throw Error("input size not divisible by stem stride");
    for (int s = 0; s + 1 < num_stages(); ++s)
      if (stages[static_cast<std::size_t>(s) + 1].channels != 2 * stages[static_cast<std::size_t>(s)].channels)
        throw Error("stage channels must double");
    for (int s = 0; s < num_stages(); ++s) {
      if (grid(s) < 1) throw Error("stage grid vanished; too many stages for input size");
      if (grid(s) % effective_window(s)) throw Error("window does not tile stage grid");
      if (stages[static_cast<std::size_t>(s)].channels % head_dim)
        throw Error("stage channels not divisible by head_dim");
      if (feature_dim % stages[static_cast<std::size_t>(s)].channels)
        throw IndivisibleChannelsError("feature_dim " + std::to_string(feature_dim) +
                                       " not divisible by stage channels " +
                                       std::to_string(stages[static_cast<std::size_t>(s)].channels));
    }
  }

  /// Width-scaled family: channels 96/192/384/768 times `width_mult`.
  static StageEncoderConfig make(int input_size, double width_mult, int window,
                                 std::vector<int> blocks) {
    StageEncoderConfig c;
    c.input_size = input_size;
    c.window = window;
    c.stages.clear();
    const int base[] = {96, 192, 384, 768};
    for (std::size_t s = 0; s < blocks.size(); ++s)
      c.stages.push_back({blocks[s], static_cast<int>(std::lround(base[s] * width_mult))});
    c.feature_dim = c.stages.back().channels;
    c.head_dim = std::max(2, static_cast<int>(std::lround(32 * width_mult)));
    return c;
  }

  /// Minutes-scale default: 64 px input, 1/8 width (channels 12/24/48/96).
  static StageEncoderConfig desk_default() { return make(64, 0.125, 4, {1, 1, 2, 1}); }

  /// Full-scale geometry: 224 px input, channels 96..768, window 7.
  static StageEncoderConfig paper_scale() { return make(224, 1.0, 7, {2, 2, 6, 2}); }

  /// Same weights, first `keep` stages only.
  StageEncoderConfig truncated(int keep) const {
    if (keep < 1 || keep > num_stages()) throw Error("truncated: bad stage count");
    StageEncoderConfig c = *this;
    c.stages.resize(static_cast<std::size_t>(keep));
    return c;
  }
};

enum class ExtractMode { S1, S2, S3, S4, AllStages, Last2 };

inline std::string extract_mode_name(ExtractMode m) {
  switch (m) {
    case ExtractMode::S1: return "S1";
    case ExtractMode::S2: return "S2";
    case ExtractMode::S3: return "S3";
    case ExtractMode::S4: return "S4";
    case ExtractMode::AllStages: return "AllStages";
    default: return "Last2";
  }
}

inline ExtractMode extract_mode_from_name(const std::string& s) {
  if (s == "S1") return ExtractMode::S1;
  if (s == "S2") return ExtractMode::S2;
  if (s == "S3") return ExtractMode::S3;
  if (s == "S4") return ExtractMode::S4;
  if (s == "AllStages") return ExtractMode::AllStages;
  if (s == "Last2") return ExtractMode::Last2;
  throw ParseError("unknown extract mode '" + s + "'");
}

/// Pooled output width of a mode under a config.
inline int extract_width(const StageEncoderConfig& cfg, ExtractMode mode) {
  switch (mode) {
    case ExtractMode::AllStages: return cfg.feature_dim * cfg.num_stages();
    case ExtractMode::Last2: return cfg.feature_dim * 2;
    default: return cfg.feature_dim;
  }
}

namespace detail {

inline BlockDims block_dims(const StageEncoderConfig& cfg, int stage) {
  const int c = cfg.stages[static_cast<std::size_t>(stage)].channels;
  return {c, c / cfg.head_dim, static_cast<int>(std::lround(c * cfg.mlp_ratio))};
}

// (B, H, W, C) -> (B*nw*nw, w*w, C) and back.
template <class T>
int window_partition(Tape<T>& tape, int x, int bsz, int grid, int w, int c) {
  const int nw = grid / w;
  int t = tape.reshape(x, {bsz, nw, w, nw, w, c});
  t = tape.permute(t, {0, 1, 3, 2, 4, 5});
  return tape.reshape(t, {bsz * nw * nw, w * w, c});
}

template <class T>
int window_reverse(Tape<T>& tape, int x, int bsz, int grid, int w, int c) {
  const int nw = grid / w;
  int t = tape.reshape(x, {bsz, nw, nw, w, w, c});
  t = tape.permute(t, {0, 1, 3, 2, 4, 5});
  return tape.reshape(t, {bsz, grid, grid, c});
}

}  // namespace detail

template <class T>
void init_stage_encoder(const StageEncoderConfig& cfg, ParamStore<T>& store,
                        const std::string& prefix, Rng& rng) {
  cfg.validate();
  const int k = cfg.stem_kernel;
  const int c1 = cfg.stages[0].channels;
  store.add(prefix + "stem.w", trunc_normal<T>({k * k * cfg.in_channels, c1}, 0.02, rng));
  store.add(prefix + "stem.b", zeros<T>({c1}));
  store.add(prefix + "stem_ln.g", ones<T>({c1}));
  store.add(prefix + "stem_ln.b", zeros<T>({c1}));
  for (int s = 0; s < cfg.num_stages(); ++s) {
    const int c = cfg.stages[static_cast<std::size_t>(s)].channels;
    if (s > 0) {
      const std::string dp = prefix + "down" + std::to_string(s) + ".";
      store.add(dp + "ln.g", ones<T>({4 * c / 2}));
      store.add(dp + "ln.b", zeros<T>({4 * c / 2}));
      store.add(dp + "w", trunc_normal<T>({4 * c / 2, c}, 0.02, rng));
      store.add(dp + "b", zeros<T>({c}));
    }
    for (int b = 0; b < cfg.stages[static_cast<std::size_t>(s)].blocks; ++b) {
      init_transformer_block(detail::block_dims(cfg, s), store,
                             prefix + "s" + std::to_string(s) + ".b" + std::to_string(b) + ".",
                             rng);
    }
  }
}

/// One stage's activation map on the tape.
struct StageNode {
  int node;
  int stage_index;
  int h, w, c;
};

/// Forward pass emitting every stage's (B, H_s, W_s, C_s) activation node.
template <class T>
std::vector<StageNode> stage_encoder_forward(Tape<T>& tape, BoundParams<T>& params,
                                             const StageEncoderConfig& cfg,
                                             const std::string& prefix, int image) {
  const Tensor<T>& img = tape.value(image);
  if (img.rank() != 4 || img.dim(1) != cfg.input_size || img.dim(2) != cfg.input_size ||
      img.dim(3) != cfg.in_channels)
    throw ShapeMismatchError("encoder input " + img.shape_str() + ", want (B," +
                             std::to_string(cfg.input_size) + "," + std::to_string(cfg.input_size) +
                             "," + std::to_string(cfg.in_channels) + ")");
  const int bsz = img.dim(0);

  int x = tape.patchify(image, cfg.stem_kernel);
  x = tape.linear(x, params.node(prefix + "stem.w"), params.node(prefix + "stem.b"));
  x = tape.layernorm(x, params.node(prefix + "stem_ln.g"), params.node(prefix + "stem_ln.b"));

  std::vector<StageNode> out;
  for (int s = 0; s < cfg.num_stages(); ++s) {
    const int grid = cfg.grid(s);
    const int c = cfg.stages[static_cast<std::size_t>(s)].channels;
    if (s > 0) {
      const std::string dp = prefix + "down" + std::to_string(s) + ".";
      x = tape.patchify(x, 2);  // (B, g, g, 4*C_prev)
      x = tape.layernorm(x, params.node(dp + "ln.g"), params.node(dp + "ln.b"));
      x = tape.linear(x, params.node(dp + "w"), params.node(dp + "b"));
    }
    const int w = cfg.effective_window(s);
    const BlockDims bd = detail::block_dims(cfg, s);
    for (int b = 0; b < cfg.stages[static_cast<std::size_t>(s)].blocks; ++b) {
      int t = detail::window_partition(tape, x, bsz, grid, w, c);
      t = transformer_block(tape, params,
                            prefix + "s" + std::to_string(s) + ".b" + std::to_string(b) + ".", t,
                            bsz * (grid / w) * (grid / w), w * w, bd);
      x = detail::window_reverse(tape, t, bsz, grid, w, c);
    }
    out.push_back({x, s, grid, grid, c});
  }
  return out;
}

/// Adaptive-average-pool one stage map to exactly `feature_dim` values per
/// image: feature_dim/C spatial cells (square when possible, else a 1 x g
/// strip), flattened channel-major.
template <class T>
int pool_stage_node(Tape<T>& tape, const StageNode& stage, int feature_dim) {
  if (feature_dim % stage.c)
    throw IndivisibleChannelsError("feature_dim " + std::to_string(feature_dim) +
                                   " not divisible by " + std::to_string(stage.c) + " channels");
  const int g = feature_dim / stage.c;
  int gh = static_cast<int>(std::lround(std::sqrt(static_cast<double>(g))));
  int gw;
  if (gh * gh == g) {
    gw = gh;
  } else {
    gh = 1;
    gw = g;
  }
  const int bsz = tape.value(stage.node).dim(0);
  int p = tape.adaptive_avg_pool(stage.node, gh, gw);
  p = tape.permute(p, {0, 3, 1, 2});  // channel-major
  return tape.reshape(p, {bsz, feature_dim});
}

/// Pooled features for an extraction mode: single stage, all stages
/// concatenated, or the last two, in ascending stage order.
template <class T>
int extract_node(Tape<T>& tape, const std::vector<StageNode>& stages,
                 const StageEncoderConfig& cfg, ExtractMode mode) {
  const int n = static_cast<int>(stages.size());
  auto need = [&](int s) {
    if (s >= n) throw Error("extract mode needs stage " + std::to_string(s + 1) +
                            " but encoder has " + std::to_string(n));
    return pool_stage_node(tape, stages[static_cast<std::size_t>(s)], cfg.feature_dim);
  };
  switch (mode) {
    case ExtractMode::S1: return need(0);
    case ExtractMode::S2: return need(1);
    case ExtractMode::S3: return need(2);
    case ExtractMode::S4: return need(3);
    case ExtractMode::Last2: {
      int a = need(n - 2), b = need(n - 1);
      return tape.concat(a, b, 1);
    }
    case ExtractMode::AllStages:
    default: {
      int acc = need(0);
      for (int s = 1; s < n; ++s) acc = tape.concat(acc, need(s), 1);
      return acc;
    }
  }
}

// ---- plain-tensor convenience surface (inference) ---------------------------

template <class T>
struct StageFeaturesEntry {
  int stage_index;
  int channels;
  int h, w;
  Tensor<T> activations;  // (B, h, w, channels)
};

template <class T>
using StageFeatures = std::vector<StageFeaturesEntry<T>>;

template <class T>
StageFeatures<T> forward_all_stages(const Tensor<T>& images, const StageEncoderConfig& cfg,
                                    ParamStore<T>& store, const std::string& prefix = "enc.") {
  Tape<T> tape(/*grad_enabled=*/false);
  BoundParams<T> params(tape, store);
  const int x = tape.input(images, false);
  const auto nodes = stage_encoder_forward(tape, params, cfg, prefix, x);
  StageFeatures<T> out;
  for (const auto& sn : nodes)
    out.push_back({sn.stage_index, sn.c, sn.h, sn.w, tape.value(sn.node)});
  return out;
}

template <class T>
Tensor<T> pool_stage_to_feature(const StageFeaturesEntry<T>& stage, int feature_dim) {
  Tape<T> tape(false);
  const int x = tape.input(stage.activations, false);
  StageNode sn{x, stage.stage_index, stage.h, stage.w, stage.channels};
  return tape.value(pool_stage_node(tape, sn, feature_dim));
}

template <class T>
Tensor<T> extract_features(const Tensor<T>& images, const StageEncoderConfig& cfg,
                           ParamStore<T>& store, ExtractMode mode,
                           const std::string& prefix = "enc.") {
  Tape<T> tape(false);
  BoundParams<T> params(tape, store);
  const int x = tape.input(images, false);
  const auto stages = stage_encoder_forward(tape, params, cfg, prefix, x);
  return tape.value(extract_node(tape, stages, cfg, mode));
}

/// MLP head applied to plain (N, D) features.
template <class T>
Tensor<T> projection_head(const Tensor<T>& features, const MlpHeadConfig& cfg,
                          ParamStore<T>& store, const std::string& prefix) {
  Tape<T> tape(false);
  BoundParams<T> params(tape, store);
  const int x = tape.input(features, false);
  return tape.value(mlp_head_forward(tape, params, cfg, prefix, x));
}

/// Parameter counts per component (stem / downsamples / each stage), for the
/// stage-removal cost report.
inline std::vector<std::pair<std::string, std::size_t>> encoder_param_report(
    const StageEncoderConfig& cfg) {
  std::vector<std::pair<std::string, std::size_t>> rep;
  const int k = cfg.stem_kernel;
  rep.emplace_back("stem", static_cast<std::size_t>(k * k * cfg.in_channels + 3) *
                               static_cast<std::size_t>(cfg.stages[0].channels));
  for (int s = 0; s < cfg.num_stages(); ++s) {
    const std::size_t c = static_cast<std::size_t>(cfg.stages[static_cast<std::size_t>(s)].channels);
    std::size_t n = 0;
    if (s > 0) n += (2 * c) * 2 + (2 * c) * c + c;  // merge ln + linear
    const std::size_t hidden = static_cast<std::size_t>(std::lround(c * cfg.mlp_ratio));
    const std::size_t per_block = 2 * c +            // ln1
                                  c * 3 * c + 3 * c + // qkv
                                  c * c + c +         // proj
                                  2 * c +             // ln2
                                  c * hidden + hidden + hidden * c + c;
    n += per_block * static_cast<std::size_t>(cfg.stages[static_cast<std::size_t>(s)].blocks);
    rep.emplace_back("stage" + std::to_string(s + 1), n);
  }
  return rep;
}

}  // namespace cpath
