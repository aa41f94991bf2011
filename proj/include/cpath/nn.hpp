#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cpath/autodiff.hpp"
#include "cpath/errors.hpp"
#include "cpath/rng.hpp"
#include "cpath/tensor.hpp"

namespace cpath {

// Named parameters with gradient and AdamW moment buffers. Entry order is
// insertion order and fixed for a given model config, which keeps optimizer
// sweeps and serialization deterministic.
template <class T>
struct ParamStore {
  struct Entry {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    Tensor<T> m, v;  // AdamW moments, allocated on first optimizer step
  };

  std::vector<Entry> entries;
  std::map<std::string, int> index;

  int add(const std::string& name, Tensor<T> init) {
    if (index.count(name)) throw Error("duplicate parameter " + name);
    Entry e;
    e.name = name;
    e.grad = Tensor<T>(init.shape);
    e.value = std::move(init);
    entries.push_back(std::move(e));
    index[name] = static_cast<int>(entries.size()) - 1;
    return index[name];
  }

  bool has(const std::string& name) const { return index.count(name) > 0; }

  Entry& at(const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) throw Error("unknown parameter " + name);
    return entries[static_cast<std::size_t>(it->second)];
  }
  const Entry& at(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw Error("unknown parameter " + name);
    return entries[static_cast<std::size_t>(it->second)];
  }

  void zero_grad() {
    for (auto& e : entries) std::fill(e.grad.data.begin(), e.grad.data.end(), T(0));
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.value.numel();
    return n;
  }

  /// Sum over entries of |grad|^2 — cheap training diagnostics.
  double grad_norm2() const {
    double s = 0;
    for (const auto& e : entries)
      for (const T& g : e.grad.data) s += static_cast<double>(g) * static_cast<double>(g);
    return s;
  }
};

// Binds store entries to tape inputs on demand and harvests gradients back
// after the reverse sweep.
template <class T>
class BoundParams {
 public:
  BoundParams(Tape<T>& tape, ParamStore<T>& store) : tape_(&tape), store_(&store) {}

  int node(const std::string& name) {
    const int idx = store_->index.count(name) ? store_->index.at(name) : -1;
    if (idx < 0) throw Error("unknown parameter " + name);
    auto it = bound_.find(idx);
    if (it != bound_.end()) return it->second;
    const int id = tape_->input(store_->entries[static_cast<std::size_t>(idx)].value,
                                /*requires_grad=*/true);
    bound_[idx] = id;
    return id;
  }

  /// Accumulate tape gradients into the store.
  void harvest() {
    for (const auto& [idx, node_id] : bound_) {
      if (!tape_->has_grad(node_id)) continue;
      auto& e = store_->entries[static_cast<std::size_t>(idx)];
      const Tensor<T>& g = tape_->grad(node_id);
      for (std::size_t i = 0; i < g.data.size(); ++i) e.grad.data[i] += g.data[i];
    }
  }

 private:
  Tape<T>* tape_;
  ParamStore<T>* store_;
  std::map<int, int> bound_;
};

// ---- initializers ----------------------------------------------------------

/// Truncated normal (|x| <= 2 std), the usual transformer weight init.
template <class T>
Tensor<T> trunc_normal(std::vector<int> shape, double std_dev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (T& v : t.data) {
    double x;
    do {
      x = normal(rng) * std_dev;
    } while (std::abs(x) > 2.0 * std_dev);
    v = static_cast<T>(x);
  }
  return t;
}

template <class T>
Tensor<T> zeros(std::vector<int> shape) {
  return Tensor<T>(std::move(shape));
}

template <class T>
Tensor<T> ones(std::vector<int> shape) {
  Tensor<T> t(std::move(shape));
  std::fill(t.data.begin(), t.data.end(), T(1));
  return t;
}

template <class T>
Tensor<T> identity_matrix(int n) {
  Tensor<T> t({n, n});
  for (int i = 0; i < n; ++i) t.data[static_cast<std::size_t>(i) * n + i] = T(1);
  return t;
}

// ---- AdamW ------------------------------------------------------------------

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

/// One decoupled-weight-decay Adam step over every entry. `step` is 1-based.
template <class T>
void adamw_step(ParamStore<T>& store, const AdamWConfig& cfg, double lr, std::int64_t step) {
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (auto& e : store.entries) {
    if (e.m.empty()) {
      e.m = Tensor<T>(e.value.shape);
      e.v = Tensor<T>(e.value.shape);
    }
    for (std::size_t i = 0; i < e.value.data.size(); ++i) {
      const double g = static_cast<double>(e.grad.data[i]);
      const double m = cfg.beta1 * static_cast<double>(e.m.data[i]) + (1.0 - cfg.beta1) * g;
      const double v = cfg.beta2 * static_cast<double>(e.v.data[i]) + (1.0 - cfg.beta2) * g * g;
      e.m.data[i] = static_cast<T>(m);
      e.v.data[i] = static_cast<T>(v);
      const double update = (m / bc1) / (std::sqrt(v / bc2) + cfg.eps) +
                            cfg.weight_decay * static_cast<double>(e.value.data[i]);
      e.value.data[i] = static_cast<T>(static_cast<double>(e.value.data[i]) - lr * update);
    }
  }
}

// ---- shared building blocks --------------------------------------------------

/// MLP head: dims = {in, hidden..., out}; GELU between layers, none after the
/// last. A single-layer head is just a linear map.
struct MlpHeadConfig {
  std::vector<int> dims;
  int layers() const { return static_cast<int>(dims.size()) - 1; }
  void validate() const {
    if (dims.size() < 2) throw Error("mlp head needs at least in/out dims");
    for (int d : dims)
      if (d <= 0) throw Error("mlp head dims must be positive");
  }
};

template <class T>
void init_mlp_head(const MlpHeadConfig& cfg, ParamStore<T>& store, const std::string& prefix,
                   Rng& rng) {
  cfg.validate();
  for (int l = 0; l + 1 < static_cast<int>(cfg.dims.size()); ++l) {
    const std::string p = prefix + std::to_string(l) + ".";
    store.add(p + "w", trunc_normal<T>({cfg.dims[static_cast<std::size_t>(l)],
                                        cfg.dims[static_cast<std::size_t>(l) + 1]},
                                       0.02, rng));
    store.add(p + "b", zeros<T>({cfg.dims[static_cast<std::size_t>(l) + 1]}));
  }
}

template <class T>
int mlp_head_forward(Tape<T>& tape, BoundParams<T>& params, const MlpHeadConfig& cfg,
                     const std::string& prefix, int x) {
  for (int l = 0; l + 1 < static_cast<int>(cfg.dims.size()); ++l) {
    const std::string p = prefix + std::to_string(l) + ".";
    x = tape.linear(x, params.node(p + "w"), params.node(p + "b"));
    if (l + 2 < static_cast<int>(cfg.dims.size())) x = tape.gelu(x);
  }
  return x;
}

// Pre-norm transformer block over (R, T, C) token tensors with multi-head
// self-attention inside each row of R.
struct BlockDims {
  int channels;
  int heads;
  int mlp_hidden;
};

template <class T>
void init_transformer_block(const BlockDims& d, ParamStore<T>& store, const std::string& prefix,
                            Rng& rng) {
  const int c = d.channels;
  store.add(prefix + "ln1.g", ones<T>({c}));
  store.add(prefix + "ln1.b", zeros<T>({c}));
  store.add(prefix + "qkv.w", trunc_normal<T>({c, 3 * c}, 0.02, rng));
  store.add(prefix + "qkv.b", zeros<T>({3 * c}));
  store.add(prefix + "proj.w", trunc_normal<T>({c, c}, 0.02, rng));
  store.add(prefix + "proj.b", zeros<T>({c}));
  store.add(prefix + "ln2.g", ones<T>({c}));
  store.add(prefix + "ln2.b", zeros<T>({c}));
  store.add(prefix + "mlp.fc1.w", trunc_normal<T>({c, d.mlp_hidden}, 0.02, rng));
  store.add(prefix + "mlp.fc1.b", zeros<T>({d.mlp_hidden}));
  store.add(prefix + "mlp.fc2.w", trunc_normal<T>({d.mlp_hidden, c}, 0.02, rng));
  store.add(prefix + "mlp.fc2.b", zeros<T>({c}));
}

template <class T>
int multihead_attention(Tape<T>& tape, BoundParams<T>& params, const std::string& prefix, int x,
                        int rows, int tokens, const BlockDims& d) {
  const int c = d.channels;
  const int hd = c / d.heads;
  if (c % d.heads) throw ShapeMismatchError("channels not divisible by heads");
  int qkv = tape.linear(x, params.node(prefix + "qkv.w"), params.node(prefix + "qkv.b"));
  qkv = tape.reshape(qkv, {rows, tokens, 3, d.heads, hd});
  qkv = tape.permute(qkv, {2, 0, 3, 1, 4});  // (3, R, h, T, hd)
  const int gh = rows * d.heads;
  auto head_mat = [&](int which) {
    int m = tape.slice(qkv, 0, which, 1);
    return tape.reshape(m, {gh, tokens, hd});
  };
  const int q = head_mat(0), k = head_mat(1), v = head_mat(2);
  int scores = tape.bmm(q, k, /*trans_b=*/true);
  scores = tape.scale(scores, static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));
  const int attn = tape.softmax_last(scores);
  int out = tape.bmm(attn, v);                       // (R*h, T, hd)
  out = tape.reshape(out, {rows, d.heads, tokens, hd});
  out = tape.permute(out, {0, 2, 1, 3});             // (R, T, h, hd)
  out = tape.reshape(out, {rows, tokens, c});
  return tape.linear(out, params.node(prefix + "proj.w"), params.node(prefix + "proj.b"));
}

template <class T>
int transformer_block(Tape<T>& tape, BoundParams<T>& params, const std::string& prefix, int x,
                      int rows, int tokens, const BlockDims& d) {
  int h = tape.layernorm(x, params.node(prefix + "ln1.g"), params.node(prefix + "ln1.b"));
  h = multihead_attention(tape, params, prefix, h, rows, tokens, d);
  x = tape.add(x, h);
  int m = tape.layernorm(x, params.node(prefix + "ln2.g"), params.node(prefix + "ln2.b"));
  m = tape.linear(m, params.node(prefix + "mlp.fc1.w"), params.node(prefix + "mlp.fc1.b"));
  m = tape.gelu(m);
  m = tape.linear(m, params.node(prefix + "mlp.fc2.w"), params.node(prefix + "mlp.fc2.b"));
  return tape.add(x, m);
}

}  // namespace cpath
