#pragma once

#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "df/ops.hpp"
#include "df/rng.hpp"
#include "df/tensor.hpp"

namespace df {

// Named parameter buffers shared between models, the optimizer and
// checkpoints. Buffers are read-shared during forward passes; updates are
// applied by a single writer between batches.
template <typename S>
class ParamStore {
 public:
  int add(std::string name, Shape shape, bool trainable = true) {
    entries_.push_back(Entry{std::move(name), shape,
                             std::make_shared<VecX<S>>(VecX<S>::Zero(numel(shape))),
                             trainable});
    return int(entries_.size()) - 1;
  }

  int size() const { return int(entries_.size()); }
  const std::string& name(int i) const { return entries_[i].name; }
  const Shape& shape(int i) const { return entries_[i].shape; }
  const std::shared_ptr<VecX<S>>& values(int i) const { return entries_[i].values; }
  const VecX<S>& flat(int i) const { return *entries_[i].values; }
  bool trainable(int i) const { return entries_[i].trainable; }
  void set_trainable(int i, bool t) { entries_[i].trainable = t; }

  int find(const std::string& name) const {
    for (int i = 0; i < size(); ++i)
      if (entries_[i].name == name) return i;
    return -1;
  }

  std::int64_t total_size() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) n += e.values->size();
    return n;
  }

  // Binds every entry in declaration order: trainable entries become tape
  // leaves, frozen ones constants. With a null tape everything is constant.
  std::vector<Tensor<S>> bind(Tape<S>* tape) const {
    std::vector<Tensor<S>> bound;
    bound.reserve(entries_.size());
    for (const auto& e : entries_) {
      if (tape && e.trainable)
        bound.push_back(tape->leaf(e.shape, e.values));
      else
        bound.push_back(Tensor<S>::constant(e.shape, VecX<S>(*e.values)));
    }
    return bound;
  }

 private:
  struct Entry {
    std::string name;
    Shape shape;
    std::shared_ptr<VecX<S>> values;
    bool trainable;
  };
  std::vector<Entry> entries_;
};

template <typename S>
using BoundParams = std::vector<Tensor<S>>;

// ---------------------------------------------------------------------------
// Initialization

template <typename S>
void he_uniform_init(ParamStore<S>& store, int idx, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / double(fan_in));
  VecX<S>& v = *store.values(idx);
  for (int i = 0; i < v.size(); ++i) v[i] = S(rng.uniform(-bound, bound));
}

template <typename S>
void fill_init(ParamStore<S>& store, int idx, S value) {
  store.values(idx)->setConstant(value);
}

// ---------------------------------------------------------------------------
// Layers

enum class Activation { kNone, kRelu };

struct DenseLayer {
  int weights = -1;  // (out, in)
  int bias = -1;     // (out)
  int in = 0, out = 0;
  Activation activation = Activation::kNone;
};

template <typename S>
DenseLayer add_dense(ParamStore<S>& store, const std::string& name, int in,
                     int out, Activation act, Rng& rng) {
  DenseLayer layer;
  layer.in = in;
  layer.out = out;
  layer.activation = act;
  layer.weights = store.add(name + ".w", {out, in});
  layer.bias = store.add(name + ".b", {out});
  he_uniform_init(store, layer.weights, in, rng);
  return layer;
}

// x (in) -> (out)
template <typename S>
Tensor<S> dense_forward(const DenseLayer& layer, const BoundParams<S>& p,
                        const Tensor<S>& x) {
  check_shape(x.rank() == 1 && x.shape()[0] == layer.in,
              "dense_forward: input size mismatch");
  Tensor<S> y = add(matmul(p[layer.weights], x), p[layer.bias]);
  return layer.activation == Activation::kRelu ? relu(y) : y;
}

// x (batch, in) -> (batch, out)
template <typename S>
Tensor<S> dense_forward_batch(const DenseLayer& layer, const BoundParams<S>& p,
                              const Tensor<S>& x) {
  check_shape(x.rank() == 2 && x.shape()[1] == layer.in,
              "dense_forward_batch: input size mismatch");
  Tensor<S> y = add_rowvec(matmul(x, transpose(p[layer.weights])), p[layer.bias]);
  return layer.activation == Activation::kRelu ? relu(y) : y;
}

struct ConvLayer {
  int kernel = -1;  // (kh, kw, cin, cout)
  int bias = -1;    // (cout)
  int stride = 1;
  int cout = 0;
  Activation activation = Activation::kNone;
};

template <typename S>
ConvLayer add_conv(ParamStore<S>& store, const std::string& name, int kh,
                   int kw, int cin, int cout, int stride, Activation act,
                   Rng& rng) {
  ConvLayer layer;
  layer.stride = stride;
  layer.cout = cout;
  layer.activation = act;
  layer.kernel = store.add(name + ".k", {kh, kw, cin, cout});
  layer.bias = store.add(name + ".b", {cout});
  he_uniform_init(store, layer.kernel, kh * kw * cin, rng);
  return layer;
}

// x (h, w, cin) -> (ceil(h/stride), ceil(w/stride), cout), SAME padding.
template <typename S>
Tensor<S> conv_forward(const ConvLayer& layer, const BoundParams<S>& p,
                       const Tensor<S>& x) {
  Tensor<S> y = conv2d(x, p[layer.kernel], layer.stride);
  const int oh = y.shape()[0], ow = y.shape()[1];
  Tensor<S> flat = add_rowvec(reshape(y, {oh * ow, layer.cout}), p[layer.bias]);
  Tensor<S> out = reshape(flat, {oh, ow, layer.cout});
  return layer.activation == Activation::kRelu ? relu(out) : out;
}

// ---------------------------------------------------------------------------
// Adam

template <typename S>
struct AdamState {
  S lr = S(1e-4);
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
  long step = 0;
  long skipped_nonfinite = 0;
  std::vector<VecX<S>> m, v;

  void reset(const ParamStore<S>& store) {
    step = 0;
    skipped_nonfinite = 0;
    m.assign(store.size(), VecX<S>());
    v.assign(store.size(), VecX<S>());
    for (int i = 0; i < store.size(); ++i) {
      m[i] = VecX<S>::Zero(store.flat(i).size());
      v[i] = VecX<S>::Zero(store.flat(i).size());
    }
  }

  // Standard update with bias correction. `grads` is indexed like the
  // store; empty entries are treated as zero. A non-finite gradient skips
  // the whole step and bumps the diagnostics counter.
  void apply(ParamStore<S>& store, const std::vector<VecX<S>>& grads) {
    for (int i = 0; i < store.size(); ++i) {
      if (!store.trainable(i) || i >= int(grads.size())) continue;
      if (grads[i].size() != 0 && !grads[i].allFinite()) {
        ++skipped_nonfinite;
        return;
      }
    }
    ++step;
    const S bc1 = S(1) - std::pow(beta1, S(step));
    const S bc2 = S(1) - std::pow(beta2, S(step));
    for (int i = 0; i < store.size(); ++i) {
      if (!store.trainable(i)) continue;
      VecX<S>& p = *store.values(i);
      const bool zero = i >= int(grads.size()) || grads[i].size() == 0;
      if (zero) {
        m[i] *= beta1;
        v[i] *= beta2;
      } else {
        m[i] = beta1 * m[i] + (S(1) - beta1) * grads[i];
        v[i] = (beta2 * v[i].array() +
                (S(1) - beta2) * grads[i].array().square()).matrix();
      }
      p.array() -=
          lr * (m[i].array() / bc1) / ((v[i].array() / bc2).sqrt() + eps);
    }
  }
};

// ---------------------------------------------------------------------------
// Checkpoints: magic, 4-byte little-endian manifest length, JSON manifest,
// then each tensor as raw little-endian 32-bit floats in declaration order.

inline constexpr char kCheckpointMagic[8] = {'D', 'F', 'K', 'I',
                                             'T', 'C', 'K', '1'};

template <typename S>
void save_checkpoint(const std::string& path, const ParamStore<S>& store,
                     std::uint64_t seed, long step) {
  nlohmann::json manifest;
  manifest["format"] = "dfkit-checkpoint";
  manifest["version"] = 1;
  manifest["seed"] = seed;
  manifest["step"] = step;
  auto params = nlohmann::json::array();
  for (int i = 0; i < store.size(); ++i) {
    params.push_back({{"name", store.name(i)}, {"shape", store.shape(i)}});
  }
  manifest["params"] = params;
  const std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  out.write(kCheckpointMagic, 8);
  const std::uint32_t len = std::uint32_t(text.size());
  out.write(reinterpret_cast<const char*>(&len), 4);
  out.write(text.data(), std::streamsize(text.size()));
  for (int i = 0; i < store.size(); ++i) {
    const VecX<S>& v = store.flat(i);
    std::vector<float> f(v.size());
    for (int j = 0; j < v.size(); ++j) f[std::size_t(j)] = float(v[j]);
    out.write(reinterpret_cast<const char*>(f.data()),
              std::streamsize(f.size() * sizeof(float)));
  }
  if (!out) throw DataError("failed writing checkpoint: " + path);
}

struct CheckpointInfo {
  std::uint64_t seed = 0;
  long step = 0;
  int loaded = 0;
};

// Loads entries whose name and shape match the store. With `strict` every
// checkpoint entry must land in the store.
template <typename S>
CheckpointInfo load_checkpoint(const std::string& path, ParamStore<S>& store,
                               bool strict = true) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw DataError("not a checkpoint file: " + path);
  std::uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 4);
  std::string text(len, '\0');
  in.read(text.data(), len);
  if (!in) throw DataError("truncated checkpoint manifest: " + path);
  nlohmann::json manifest = nlohmann::json::parse(text);

  CheckpointInfo info;
  info.seed = manifest.value("seed", std::uint64_t(0));
  info.step = manifest.value("step", 0L);
  for (const auto& p : manifest["params"]) {
    const std::string name = p["name"];
    Shape shape = p["shape"].get<Shape>();
    const std::int64_t count = numel(shape);
    std::vector<float> f(static_cast<std::size_t>(count));
    in.read(reinterpret_cast<char*>(f.data()),
            std::streamsize(f.size() * sizeof(float)));
    if (!in) throw DataError("truncated checkpoint payload: " + path);
    const int idx = store.find(name);
    if (idx < 0) {
      if (strict) throw DataError("checkpoint entry not in store: " + name);
      continue;
    }
    if (store.shape(idx) != shape)
      throw DataError("checkpoint shape mismatch for " + name);
    VecX<S>& v = *store.values(idx);
    for (int j = 0; j < v.size(); ++j) v[j] = S(f[std::size_t(j)]);
    ++info.loaded;
  }
  return info;
}

}  // namespace df
