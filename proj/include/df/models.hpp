#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "df/gaussian.hpp"
#include "df/nn.hpp"
#include "df/ops.hpp"

// Learnable filter components: the image sensor network with optional
// heteroscedastic observation-noise head, the (analytic or learned) process
// model with taped Jacobians, process/observation noise models, and the
// learned particle observation likelihood.

namespace df {

// ---------------------------------------------------------------------------
// Observation model h: fixed selection of the observable components.

template <typename S>
MatX<S> selection_matrix(int obs_dim, int state_dim) {
  MatX<S> h = MatX<S>::Zero(obs_dim, state_dim);
  for (int i = 0; i < obs_dim; ++i) h(i, i) = S(1);
  return h;
}

template <typename S>
Tensor<S> observation_select(const Tensor<S>& x, int obs_dim) {
  return slice_rows(x, 0, obs_dim);
}

// (N, n) -> (N, obs_dim)
template <typename S>
Tensor<S> observation_select_batch(const Tensor<S>& x, int obs_dim) {
  return block(x, 0, 0, x.shape()[0], obs_dim);
}

// ---------------------------------------------------------------------------
// Disc dynamics: p' = p + v, v' = v - f_p p - f_d v^2 sgn(v).

inline constexpr double kDiscPull = 0.05;
inline constexpr double kDiscDrag = 0.0075;

template <typename S>
Tensor<S> disc_process(const Tensor<S>& x) {
  check_shape(x.rank() == 1 && x.shape()[0] == 4, "disc_process: state is (4)");
  Tensor<S> p = slice_rows(x, 0, 2);
  Tensor<S> v = slice_rows(x, 2, 2);
  Tensor<S> drag = mul(square(v), sign(v));
  Tensor<S> v_next =
      sub(sub(v, scale(p, S(kDiscPull))), scale(drag, S(kDiscDrag)));
  return concat(add(p, v), v_next, 0);
}

template <typename S>
Tensor<S> disc_process_batch(const Tensor<S>& x) {
  check_shape(x.rank() == 2 && x.shape()[1] == 4, "disc_process_batch: (N,4)");
  const int n = x.shape()[0];
  Tensor<S> p = block(x, 0, 0, n, 2);
  Tensor<S> v = block(x, 0, 2, n, 2);
  Tensor<S> drag = mul(square(v), sign(v));
  Tensor<S> v_next =
      sub(sub(v, scale(p, S(kDiscPull))), scale(drag, S(kDiscDrag)));
  return concat(add(p, v), v_next, 1);
}

// Taped Jacobian of the disc dynamics at x:
//   [ I        I                ]
//   [ -f_p I   diag(1-2 f_d |v|)]
template <typename S>
Tensor<S> disc_process_jacobian(const Tensor<S>& x) {
  Tensor<S> v = slice_rows(x, 2, 2);
  Tensor<S> abs_v = mul(v, sign(v));
  Tensor<S> diag_v = add_const(scale(abs_v, S(-2.0 * kDiscDrag)), S(1));
  MatX<S> top(2, 4);
  top << 1, 0, 1, 0, 0, 1, 0, 1;
  MatX<S> pull = MatX<S>::Zero(2, 2);
  pull(0, 0) = pull(1, 1) = S(-kDiscPull);
  Tensor<S> bottom =
      concat(Tensor<S>::from_matrix(pull), diag_matrix(diag_v), 1);
  return concat(Tensor<S>::from_matrix(top), bottom, 0);
}

// Hand-derived Jacobian used as a test oracle (valid away from v = 0).
template <typename S>
MatX<S> disc_process_jacobian_analytic(const VecX<S>& x) {
  MatX<S> f = MatX<S>::Zero(4, 4);
  f.block(0, 0, 2, 2).setIdentity();
  f.block(0, 2, 2, 2).setIdentity();
  f(2, 0) = f(3, 1) = S(-kDiscPull);
  for (int i = 0; i < 2; ++i)
    f(2 + i, 2 + i) = S(1) - S(2.0 * kDiscDrag) * std::abs(x[2 + i]);
  return f;
}

// ---------------------------------------------------------------------------
// Process model

enum class ProcessKind { kAnalyticDisc, kLearned, kLinear };

// Learned process nets output the state change; x + delta keeps the map
// near identity at initialization and keeps d x_{t+1} / d x_t well scaled.
template <typename S>
struct ProcessModel {
  ProcessKind kind = ProcessKind::kAnalyticDisc;
  int state_dim = 4;
  std::vector<DenseLayer> layers;  // learned variant
  MatX<S> a;                       // linear variant

  Tensor<S> forward(const BoundParams<S>& p, const Tensor<S>& x) const {
    switch (kind) {
      case ProcessKind::kAnalyticDisc:
        return disc_process(x);
      case ProcessKind::kLinear:
        return matmul(Tensor<S>::from_matrix(a), x);
      case ProcessKind::kLearned: {
        Tensor<S> h = x;
        for (const auto& layer : layers) h = dense_forward(layer, p, h);
        return add(x, h);
      }
    }
    throw Error("process: bad kind");
  }

  Tensor<S> forward_batch(const BoundParams<S>& p, const Tensor<S>& x) const {
    switch (kind) {
      case ProcessKind::kAnalyticDisc:
        return disc_process_batch(x);
      case ProcessKind::kLinear:
        return matmul(x, transpose(Tensor<S>::from_matrix(a)));
      case ProcessKind::kLearned: {
        Tensor<S> h = x;
        for (const auto& layer : layers) h = dense_forward_batch(layer, p, h);
        return add(x, h);
      }
    }
    throw Error("process: bad kind");
  }

  // Next-state mean and its taped Jacobian at x. The learned Jacobian is
  // the exact product W_L diag(m_{L-1}) ... diag(m_1) W_1 with the ReLU
  // masks taken from the forward pass, so gradients flow into the weights.
  std::pair<Tensor<S>, Tensor<S>> forward_with_jacobian(
      const BoundParams<S>& p, const Tensor<S>& x) const {
    switch (kind) {
      case ProcessKind::kAnalyticDisc:
        return {disc_process(x), disc_process_jacobian(x)};
      case ProcessKind::kLinear:
        return {matmul(Tensor<S>::from_matrix(a), x), Tensor<S>::from_matrix(a)};
      case ProcessKind::kLearned: {
        Tensor<S> h = x;
        Tensor<S> jac;  // running product, (out_i, state_dim)
        for (std::size_t i = 0; i < layers.size(); ++i) {
          const auto& layer = layers[i];
          Tensor<S> pre = add(matmul(p[layer.weights], h), p[layer.bias]);
          Tensor<S> w = p[layer.weights];
          jac = i == 0 ? w : matmul(w, jac);
          if (layer.activation == Activation::kRelu) {
            Tensor<S> mask = relu(sign(pre));  // constant 0/1 vector
            h = mul(pre, mask);
            jac = scale_rows(jac, mask);
          } else {
            h = pre;
          }
        }
        Tensor<S> eye = Tensor<S>::from_matrix(MatX<S>::Identity(state_dim, state_dim));
        return {add(x, h), add(eye, jac)};
      }
    }
    throw Error("process: bad kind");
  }
};

template <typename S>
ProcessModel<S> make_analytic_disc_process() {
  ProcessModel<S> m;
  m.kind = ProcessKind::kAnalyticDisc;
  return m;
}

template <typename S>
ProcessModel<S> make_linear_process(MatX<S> a) {
  ProcessModel<S> m;
  m.kind = ProcessKind::kLinear;
  m.state_dim = int(a.rows());
  m.a = std::move(a);
  return m;
}

// fc 32 / fc 64 / fc 64 / delta head.
template <typename S>
ProcessModel<S> make_learned_process(ParamStore<S>& store, int state_dim,
                                     Rng& rng) {
  ProcessModel<S> m;
  m.kind = ProcessKind::kLearned;
  m.state_dim = state_dim;
  m.layers.push_back(add_dense(store, "process.fc1", state_dim, 32, Activation::kRelu, rng));
  m.layers.push_back(add_dense(store, "process.fc2", 32, 64, Activation::kRelu, rng));
  m.layers.push_back(add_dense(store, "process.fc3", 64, 64, Activation::kRelu, rng));
  m.layers.push_back(add_dense(store, "process.delta", 64, state_dim, Activation::kNone, rng));
  return m;
}

// ---------------------------------------------------------------------------
// Noise models

enum class NoiseFlavor { kFixed, kConstant, kHeteroscedastic };

// Zero-mean Gaussian noise covariance: fixed matrix, learned constant
// entries, or a network over the state (heteroscedastic). Materialization
// goes through the triangular/diagonal parameterization with a trainable
// bias hitting the init target and a fixed eps floor on the diagonal.
template <typename S>
struct NoiseModel {
  NoiseFlavor flavor = NoiseFlavor::kFixed;
  CovShape cov_shape = CovShape::kDiagonal;
  int dim = 0;
  S eps = S(1e-3);
  MatX<S> fixed;
  int entries = -1;  // constant flavor
  int bias = -1;     // trainable diagonal bias (constant + hetero)
  std::vector<DenseLayer> net;  // hetero: hidden stack + entries head

  Tensor<S> materialize(const BoundParams<S>& p, const Tensor<S>& x) const {
    switch (flavor) {
      case NoiseFlavor::kFixed:
        return Tensor<S>::from_matrix(fixed);
      case NoiseFlavor::kConstant:
        return materialize_cov(p[entries], p[bias], cov_shape, eps, dim);
      case NoiseFlavor::kHeteroscedastic: {
        Tensor<S> h = x;
        for (const auto& layer : net) h = dense_forward(layer, p, h);
        return materialize_cov(h, p[bias], cov_shape, eps, dim);
      }
    }
    throw Error("noise: bad flavor");
  }

  // Weighted mean of per-point covariances over a sigma-point/particle set
  // (weights normalized). Constant and fixed flavors ignore the points.
  Tensor<S> materialize_weighted(const BoundParams<S>& p, const Tensor<S>& points,
                                 const Tensor<S>& weights) const {
    if (flavor != NoiseFlavor::kHeteroscedastic)
      return materialize(p, Tensor<S>());
    Tensor<S> h = points;  // (N, in)
    for (const auto& layer : net) h = dense_forward_batch(layer, p, h);
    const int count = points.shape()[0];
    if (cov_shape == CovShape::kDiagonal) {
      // sum_i w_i diag(d_i^2) + diag(b^2) + eps I
      Tensor<S> var = matmul(weights, square(h));  // (dim)
      Tensor<S> full = add_const(add(var, square(p[bias])), eps);
      return diag_matrix(full);
    }
    // Per-point upper factors L_i; sum_i w_i L_i L_i^T == C^T C with
    // C = [sqrt(w_1) L_1^T ; ... ] stacked row blocks.
    const int n = dim;
    MatX<S> embed_t = MatX<S>::Zero(n * n, cov_param_size(CovShape::kFull, n));
    {
      int at = 0;
      for (int i = 0; i < n; ++i)
        for (int j = i; j < n; ++j) embed_t(j * n + i, at++) = S(1);  // transposed slot
    }
    MatX<S> diag_embed_t = MatX<S>::Zero(n * n, n);
    for (int i = 0; i < n; ++i) diag_embed_t(i * n + i, i) = S(1);
    Tensor<S> lt_flat = add(matmul(h, Tensor<S>::from_matrix(MatX<S>(embed_t.transpose()))),
                            matmul(tile_rows(p[bias], count),
                                   Tensor<S>::from_matrix(MatX<S>(diag_embed_t.transpose()))));
    Tensor<S> stacked = reshape(lt_flat, {count * n, n});  // [L_1^T; L_2^T; ...]
    std::vector<int> rep(count * n);
    for (int i = 0; i < count; ++i)
      for (int j = 0; j < n; ++j) rep[i * n + j] = i;
    Tensor<S> w_rep = gather_rows(sqrt(weights), rep);
    Tensor<S> c = scale_rows(stacked, w_rep);
    Tensor<S> cov = matmul(transpose(c), c);
    Tensor<S> eye = Tensor<S>::from_matrix(MatX<S>::Identity(n, n) * eps);
    return add(symmetrize(cov), eye);
  }
};

template <typename S>
NoiseModel<S> make_fixed_noise(MatX<S> cov) {
  NoiseModel<S> m;
  m.flavor = NoiseFlavor::kFixed;
  m.dim = int(cov.rows());
  m.fixed = std::move(cov);
  return m;
}

// Learned constant noise initialized so the covariance starts at
// target_variance * I exactly.
template <typename S>
NoiseModel<S> make_constant_noise(ParamStore<S>& store, const std::string& name,
                                  int dim, CovShape shape, S target_variance,
                                  S eps) {
  NoiseModel<S> m;
  m.flavor = NoiseFlavor::kConstant;
  m.cov_shape = shape;
  m.dim = dim;
  m.eps = eps;
  m.entries = store.add(name + ".entries", {cov_param_size(shape, dim)});
  m.bias = store.add(name + ".bias", {dim});
  fill_init(store, m.bias, S(std::sqrt(std::max(double(target_variance - eps), 0.0))));
  return m;
}

// Entries are squared inside materialize_cov, so an exactly-zero head is a
// stationary point; a small random init keeps the covariance within a
// fraction of a percent of the bias target while leaving the
// state-dependent path trainable.
inline constexpr double kNoiseHeadInitScale = 0.05;

template <typename S>
void noise_head_init(ParamStore<S>& store, const DenseLayer& head, Rng& rng) {
  he_uniform_init(store, head.weights, head.in, rng);
  *store.values(head.weights) *= S(kNoiseHeadInitScale);
}

// Heteroscedastic noise net (fc 32 / fc 32 / entries head).
template <typename S>
NoiseModel<S> make_hetero_noise(ParamStore<S>& store, const std::string& name,
                                int input_dim, int dim, CovShape shape,
                                S target_variance, S eps, Rng& rng) {
  NoiseModel<S> m;
  m.flavor = NoiseFlavor::kHeteroscedastic;
  m.cov_shape = shape;
  m.dim = dim;
  m.eps = eps;
  m.net.push_back(add_dense(store, name + ".fc1", input_dim, 32, Activation::kRelu, rng));
  m.net.push_back(add_dense(store, name + ".fc2", 32, 32, Activation::kRelu, rng));
  m.net.push_back(add_dense(store, name + ".head", 32, cov_param_size(shape, dim),
                            Activation::kNone, rng));
  noise_head_init(store, m.net.back(), rng);
  m.bias = store.add(name + ".bias", {dim});
  fill_init(store, m.bias, S(std::sqrt(std::max(double(target_variance - eps), 0.0))));
  return m;
}

// ---------------------------------------------------------------------------
// Sensor network (conv 9x9 s2 -> conv 9x9 s2 -> fc 16 -> fc 32, then a
// position head and optionally a noise head off the shared encoding).

template <typename S>
struct SensorNet {
  int image_h = 0, image_w = 0, channels = 3;
  int obs_dim = 2;
  int encoding_dim = 32;
  ConvLayer conv1, conv2;
  DenseLayer fc1, fc2;
  DenseLayer z_head;
  bool hetero_r = false;
  CovShape r_shape = CovShape::kDiagonal;
  S eps = S(1e-3);
  DenseLayer r_head;  // entries (pre-bias)
  int r_bias = -1;

  struct Output {
    Tensor<S> z;         // (obs_dim)
    Tensor<S> encoding;  // (encoding_dim)
  };

  Output forward(const BoundParams<S>& p, const Tensor<S>& image) const {
    check_shape(image.rank() == 3 && image.shape()[0] == image_h &&
                    image.shape()[1] == image_w && image.shape()[2] == channels,
                "sensor: image size mismatch");
    Tensor<S> h = conv_forward(conv1, p, image);
    h = conv_forward(conv2, p, h);
    h = reshape(h, {int(numel(h.shape()))});
    h = dense_forward(fc1, p, h);
    Tensor<S> enc = dense_forward(fc2, p, h);
    Tensor<S> z = dense_forward(z_head, p, enc);
    return {z, enc};
  }

  // Heteroscedastic R from the shared encoding.
  Tensor<S> observation_noise(const BoundParams<S>& p, const Tensor<S>& encoding) const {
    check_shape(hetero_r, "sensor: no heteroscedastic noise head");
    Tensor<S> entries = dense_forward(r_head, p, encoding);
    return materialize_cov(entries, p[r_bias], r_shape, eps, obs_dim);
  }
};

template <typename S>
struct SensorConfig {
  int image_h = 100, image_w = 100, channels = 3;
  int obs_dim = 2;
  bool hetero_r = true;
  CovShape r_shape = CovShape::kDiagonal;
  S r_target = S(900);
  S eps = S(1e-3);
};

template <typename S>
SensorNet<S> make_sensor(ParamStore<S>& store, const SensorConfig<S>& cfg,
                         Rng& rng) {
  SensorNet<S> net;
  net.image_h = cfg.image_h;
  net.image_w = cfg.image_w;
  net.channels = cfg.channels;
  net.obs_dim = cfg.obs_dim;
  net.hetero_r = cfg.hetero_r;
  net.r_shape = cfg.r_shape;
  net.eps = cfg.eps;
  net.conv1 = add_conv(store, "sensor.conv1", 9, 9, cfg.channels, 4, 2,
                       Activation::kRelu, rng);
  net.conv2 = add_conv(store, "sensor.conv2", 9, 9, 4, 8, 2, Activation::kRelu, rng);
  const int flat = ((cfg.image_h + 1) / 2 + 1) / 2 * (((cfg.image_w + 1) / 2 + 1) / 2) * 8;
  net.fc1 = add_dense(store, "sensor.fc1", flat, 16, Activation::kRelu, rng);
  net.fc2 = add_dense(store, "sensor.fc2", 16, 32, Activation::kRelu, rng);
  net.z_head = add_dense(store, "sensor.z", 32, cfg.obs_dim, Activation::kNone, rng);
  if (cfg.hetero_r) {
    net.r_head = add_dense(store, "sensor.rhead", 32,
                           cov_param_size(cfg.r_shape, cfg.obs_dim),
                           Activation::kNone, rng);
    noise_head_init(store, net.r_head, rng);
    net.r_bias = store.add("sensor.rbias", {cfg.obs_dim});
    fill_init(store, net.r_bias,
              S(std::sqrt(std::max(double(cfg.r_target - cfg.eps), 0.0))));
  }
  return net;
}

// ---------------------------------------------------------------------------
// Learned particle observation likelihood (dPF-lrn): consumes the sensor
// encoding and the raw observable particle components (not normalized).

template <typename S>
struct LikelihoodNet {
  std::vector<DenseLayer> layers;
  int obs_dim = 2;

  // Raw per-particle log-likelihood scores; likelihood = exp(raw) > 0.
  Tensor<S> log_forward(const BoundParams<S>& p, const Tensor<S>& encoding,
                        const Tensor<S>& particle_obs) const {
    const int count = particle_obs.shape()[0];
    Tensor<S> in = concat(tile_rows(encoding, count), particle_obs, 1);
    Tensor<S> h = in;
    for (const auto& layer : layers) h = dense_forward_batch(layer, p, h);
    return reshape(h, {count});
  }

  Tensor<S> forward(const BoundParams<S>& p, const Tensor<S>& encoding,
                    const Tensor<S>& particle_obs) const {
    return exp(log_forward(p, encoding, particle_obs));
  }
};

template <typename S>
LikelihoodNet<S> make_likelihood(ParamStore<S>& store, int encoding_dim,
                                 int obs_dim, Rng& rng) {
  LikelihoodNet<S> net;
  net.obs_dim = obs_dim;
  net.layers.push_back(add_dense(store, "likelihood.fc1", encoding_dim + obs_dim,
                                 128, Activation::kRelu, rng));
  net.layers.push_back(add_dense(store, "likelihood.fc2", 128, 64, Activation::kRelu, rng));
  net.layers.push_back(add_dense(store, "likelihood.out", 64, 1, Activation::kNone, rng));
  return net;
}

}  // namespace df
