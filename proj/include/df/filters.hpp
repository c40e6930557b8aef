#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "df/gaussian.hpp"
#include "df/models.hpp"
#include "df/rng.hpp"

// The four differentiable filters as per-timestep step functions over
// beliefs. Every step is built from taped ops, so losses computed on the
// outputs differentiate end-to-end into all model parameters. Covariances
// are symmetrized after every covariance-producing operation.

namespace df {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// ---------------------------------------------------------------------------
// Configuration

enum class FilterKind { kEkf, kUkf, kMcukf, kPf };
enum class PfUpdate { kAnalytic, kLearned };
enum class PfBeliefMode { kSingleGaussian, kGmm };

struct UkfParams {
  double alpha = 1.0;
  double kappa = 0.5;
  double beta = 0.0;

  double lambda(int n) const { return alpha * alpha * (kappa + n) - n; }

  // Sigma-point spread must stay real: lambda + n > 0. For alpha = 1 this
  // rejects exactly kappa <= -n, the regime where training fails on a
  // non-invertible matrix.
  void validate(int n) const {
    if (!(lambda(n) + n > 0))
      throw ConfigError("ukf: alpha^2 (kappa + n) must be positive, got alpha=" +
                        std::to_string(alpha) + " kappa=" + std::to_string(kappa) +
                        " n=" + std::to_string(n));
  }
};

struct FilterConfig {
  FilterKind kind = FilterKind::kEkf;
  UkfParams ukf;
  int sample_count_train = 100;
  int sample_count_eval = 500;
  PfUpdate pf_update = PfUpdate::kAnalytic;
  PfBeliefMode pf_belief = PfBeliefMode::kGmm;
  double gmm_sigma = 1.0;
  int resample_every = 1;
  double alpha_re = 0.05;

  void validate(int state_dim) const {
    if (sample_count_train < 1 || sample_count_eval < 1)
      throw ConfigError("filter: sample counts must be >= 1");
    if (alpha_re < 0.0 || alpha_re > 1.0)
      throw ConfigError("filter: alpha_re must be in [0, 1]");
    if (resample_every < 1)
      throw ConfigError("filter: resample_every must be >= 1");
    if (gmm_sigma <= 0.0) throw ConfigError("filter: gmm_sigma must be > 0");
    if (kind == FilterKind::kUkf) ukf.validate(state_dim);
    if (kind == FilterKind::kMcukf && sample_count_train < 2)
      throw ConfigError("mcukf: needs at least 2 samples");
  }
};

// ---------------------------------------------------------------------------
// Model bundle driving the filters

template <typename S>
struct FilterModels {
  ParamStore<S> store;
  std::optional<SensorNet<S>> sensor;
  ProcessModel<S> process;
  NoiseModel<S> q_model;
  NoiseModel<S> r_model;  // used when R does not come from the sensor head
  std::optional<LikelihoodNet<S>> likelihood;
  int state_dim = 4;
  int obs_dim = 2;
};

// One timestep of input: an image for the sensor network, or a direct
// observation vector (linear-Gaussian oracle checks, unit tests).
template <typename S>
struct StepInput {
  Tensor<S> image;
  Tensor<S> direct_z;
};

template <typename S>
struct Observation {
  Tensor<S> z;         // (obs_dim)
  Tensor<S> r;         // (obs_dim, obs_dim)
  Tensor<S> encoding;  // sensor encoding when available
};

template <typename S>
Observation<S> observe(const FilterModels<S>& models, const BoundParams<S>& p,
                       const StepInput<S>& input) {
  Observation<S> obs;
  if (models.sensor && input.image.defined()) {
    auto out = models.sensor->forward(p, input.image);
    obs.z = out.z;
    obs.encoding = out.encoding;
    obs.r = models.sensor->hetero_r
                ? models.sensor->observation_noise(p, out.encoding)
                : models.r_model.materialize(p, Tensor<S>());
  } else {
    check_shape(input.direct_z.defined(), "observe: no image and no direct z");
    obs.z = input.direct_z;
    obs.r = models.r_model.materialize(p, Tensor<S>());
  }
  return obs;
}

// Per-step diagnostics (plain values, not taped).
struct StepDiagnostics {
  double innovation_norm = 0;
  double effective_sample_size = 0;
  bool resampled = false;
  bool weights_reset = false;
};

// ---------------------------------------------------------------------------
// EKF

template <typename S>
struct EkfResult {
  GaussianBelief<S> belief;
  Observation<S> obs;
  Tensor<S> q;  // process noise used in the prediction
  StepDiagnostics diag;
};

template <typename S>
EkfResult<S> ekf_step(const GaussianBelief<S>& bel, const StepInput<S>& input,
                      const FilterModels<S>& models, const BoundParams<S>& p) {
  const int n = models.state_dim;
  // Prediction: mu_hat = f(mu), Sigma_hat = F Sigma F^T + Q.
  auto [mu_hat, f_jac] = models.process.forward_with_jacobian(p, bel.mean);
  Tensor<S> q = models.q_model.materialize(p, bel.mean);
  Tensor<S> sigma_hat =
      add(symmetrize(matmul(matmul(f_jac, bel.cov), transpose(f_jac))), q);

  Observation<S> obs = observe(models, p, input);
  Tensor<S> h = Tensor<S>::from_matrix(selection_matrix<S>(models.obs_dim, n));
  Tensor<S> hs = matmul(h, sigma_hat);  // (m, n)
  Tensor<S> s_mat = add(symmetrize(matmul(hs, transpose(h))), obs.r);
  Tensor<S> s_chol;
  try {
    s_chol = cholesky(s_mat);
  } catch (const NumericError& e) {
    throw NumericError(std::string("ekf update: innovation covariance not "
                                   "invertible: ") + e.what(), e.index);
  }
  // K = Sigma_hat H^T S^-1 computed as (S^-1 H Sigma_hat)^T.
  Tensor<S> y = triangular_solve(s_chol, hs, true, false);
  Tensor<S> k = transpose(triangular_solve(s_chol, y, true, true));
  Tensor<S> innovation = sub(obs.z, matmul(h, mu_hat));
  Tensor<S> mu_new = add(mu_hat, matmul(k, innovation));
  Tensor<S> eye = Tensor<S>::from_matrix(MatX<S>::Identity(n, n));
  Tensor<S> sigma_new = symmetrize(matmul(sub(eye, matmul(k, h)), sigma_hat));

  EkfResult<S> result{GaussianBelief<S>{mu_new, sigma_new}, obs, q, {}};
  result.diag.innovation_norm = innovation.values().norm();
  return result;
}

// ---------------------------------------------------------------------------
// UKF / MCUKF

template <typename S>
struct SigmaPoints {
  Tensor<S> points;  // (count, n)
  VecX<S> w_mean;
  VecX<S> w_cov;
};

// chi_0 = mu, chi_i = mu +- column_i of sqrt((n + lambda) Sigma).
template <typename S>
SigmaPoints<S> ukf_sigma_points(const GaussianBelief<S>& bel,
                                const UkfParams& params) {
  const int n = bel.dim();
  params.validate(n);
  const double lambda = params.lambda(n);
  Tensor<S> root = matrix_sqrt_psd(scale(bel.cov, S(n + lambda)));
  Tensor<S> root_t = transpose(root);  // rows are the columns of the factor
  Tensor<S> offsets = concat(
      std::vector<Tensor<S>>{Tensor<S>::zeros({1, n}), root_t, neg(root_t)}, 0);
  SigmaPoints<S> sp;
  sp.points = add(tile_rows(bel.mean, 2 * n + 1), offsets);
  sp.w_mean = VecX<S>::Constant(2 * n + 1, S(0.5 / (lambda + n)));
  sp.w_mean[0] = S(lambda / (lambda + n));
  sp.w_cov = sp.w_mean;
  sp.w_cov[0] += S(1.0 - params.alpha * params.alpha + params.beta);
  return sp;
}

// Weighted statistics of transformed points: mean = sum w_m y_i,
// cov = sum w_c (y_i - mean)(y_i - mean)^T + additive.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> unscented_transform(const Tensor<S>& points,
                                                    const VecX<S>& w_mean,
                                                    const VecX<S>& w_cov,
                                                    const Tensor<S>& additive) {
  const int count = points.shape()[0];
  Tensor<S> wm = Tensor<S>::constant({count}, w_mean);
  Tensor<S> wc = Tensor<S>::constant({count}, w_cov);
  Tensor<S> mean = matmul(wm, points);
  Tensor<S> centered = sub(points, tile_rows(mean, count));
  Tensor<S> cov = symmetrize(matmul(transpose(centered), scale_rows(centered, wc)));
  if (additive.defined()) cov = add(cov, additive);
  return {mean, cov};
}

template <typename S>
struct UkfResult {
  GaussianBelief<S> belief;
  Observation<S> obs;
  Tensor<S> q;
  StepDiagnostics diag;
};

namespace detail {

// Shared UKF/MCUKF pipeline. Prediction propagates the given (pseudo)
// sigma points and adds Q once; the observation update re-represents the
// predicted belief with fresh points (the redraw makes the transform exact
// on affine systems, where the filter must coincide with the closed-form
// Kalman filter).
template <typename S>
UkfResult<S> unscented_update(
    const Tensor<S>& points, const VecX<S>& w_mean, const VecX<S>& w_cov,
    const StepInput<S>& input, const FilterModels<S>& models,
    const BoundParams<S>& p,
    const std::function<Tensor<S>(const GaussianBelief<S>&)>& redraw,
    const char* who) {
  const int count = points.shape()[0];
  Tensor<S> wm = Tensor<S>::constant({count}, w_mean);
  Tensor<S> propagated = models.process.forward_batch(p, points);
  Tensor<S> q = models.q_model.materialize_weighted(p, points, wm);
  auto [mu_hat, sigma_hat] = unscented_transform(propagated, w_mean, w_cov, q);

  Tensor<S> upd_points = redraw(GaussianBelief<S>{mu_hat, sigma_hat});
  // Use the transform statistics of the update point set as the predicted
  // moments. Deterministic sigma points reconstruct (mu_hat, sigma_hat)
  // exactly; for sampled points this keeps mean, S and the cross term
  // consistent with one sample joint, so Sigma' stays positive definite.
  auto [mu_upd, sigma_upd] = unscented_transform(upd_points, w_mean, w_cov, Tensor<S>());
  Observation<S> obs = observe(models, p, input);
  Tensor<S> zpts = observation_select_batch(upd_points, models.obs_dim);
  Tensor<S> z_hat = matmul(wm, zpts);
  Tensor<S> wc = Tensor<S>::constant({count}, w_cov);
  Tensor<S> dz = sub(zpts, tile_rows(z_hat, count));
  Tensor<S> dx = sub(upd_points, tile_rows(mu_upd, count));
  Tensor<S> s_mat =
      add(symmetrize(matmul(transpose(dz), scale_rows(dz, wc))), obs.r);
  Tensor<S> cross = matmul(transpose(dx), scale_rows(dz, wc));  // (n, m)
  Tensor<S> s_chol;
  try {
    s_chol = cholesky(s_mat);
  } catch (const NumericError& e) {
    throw NumericError(std::string(who) +
                           " update: innovation covariance not invertible: " +
                           e.what(),
                       e.index);
  }
  // K = Cross S^-1 = (S^-1 Cross^T)^T
  Tensor<S> y = triangular_solve(s_chol, transpose(cross), true, false);
  Tensor<S> k = transpose(triangular_solve(s_chol, y, true, true));
  Tensor<S> innovation = sub(obs.z, z_hat);
  Tensor<S> mu_new = add(mu_upd, matmul(k, innovation));
  // Sigma' = Sigma_hat - K S K^T
  Tensor<S> ksk = matmul(matmul(k, s_mat), transpose(k));
  Tensor<S> sigma_new = symmetrize(sub(sigma_upd, ksk));

  UkfResult<S> result{GaussianBelief<S>{mu_new, sigma_new}, obs, q, {}};
  result.diag.innovation_norm = innovation.values().norm();
  return result;
}

}  // namespace detail

template <typename S>
UkfResult<S> ukf_step(const GaussianBelief<S>& bel, const StepInput<S>& input,
                      const FilterModels<S>& models, const BoundParams<S>& p,
                      const UkfParams& params) {
  SigmaPoints<S> sp = ukf_sigma_points(bel, params);
  auto redraw = [&params](const GaussianBelief<S>& predicted) {
    return ukf_sigma_points(predicted, params).points;
  };
  return detail::unscented_update<S>(sp.points, sp.w_mean, sp.w_cov, input,
                                     models, p, redraw, "ukf");
}

// Pseudo sigma points: uniformly weighted samples from the belief.
template <typename S>
UkfResult<S> mcukf_step(const GaussianBelief<S>& bel, const StepInput<S>& input,
                        const FilterModels<S>& models, const BoundParams<S>& p,
                        int count, Rng& rng) {
  if (count < 2) throw ConfigError("mcukf: needs at least 2 samples");
  Tensor<S> points = sample_gaussian(bel, count, rng);
  VecX<S> w = VecX<S>::Constant(count, S(1) / S(count));
  auto redraw = [count, &rng](const GaussianBelief<S>& predicted) {
    return sample_gaussian(predicted, count, rng);
  };
  return detail::unscented_update<S>(points, w, w, input, models, p, redraw,
                                     "mcukf");
}

// ---------------------------------------------------------------------------
// Particle filter

template <typename S>
struct ParticleBelief {
  Tensor<S> particles;    // (N, n)
  Tensor<S> weights;      // (N), normalized
  Tensor<S> log_weights;  // (N), log of normalized weights
  int count() const { return particles.shape()[0]; }
};

template <typename S>
ParticleBelief<S> make_particle_belief(const GaussianBelief<S>& init, int count,
                                       Rng& rng) {
  ParticleBelief<S> bel;
  bel.particles = sample_gaussian(init, count, rng);
  bel.weights = Tensor<S>::constant({count}, VecX<S>::Constant(count, S(1) / S(count)));
  bel.log_weights =
      Tensor<S>::constant({count}, VecX<S>::Constant(count, -std::log(S(count))));
  return bel;
}

namespace detail {

// Systematic (low-variance) index draw from a probability vector.
inline std::vector<int> systematic_indices(const Eigen::Ref<const Eigen::VectorXd>& probs,
                                           int count, Rng& rng) {
  std::vector<int> idx(static_cast<std::size_t>(count));
  const double step = 1.0 / count;
  double u = rng.uniform() * step;
  double cum = probs[0];
  int j = 0;
  for (int i = 0; i < count; ++i) {
    while (u > cum && j + 1 < int(probs.size())) cum += probs[++j];
    idx[std::size_t(i)] = j;
    u += step;
  }
  return idx;
}

}  // namespace detail

// Samples indices from q = alpha pi + (1-alpha)/N and reweights the drawn
// particles by pi/q, keeping the new weights differentiable w.r.t. the old
// ones. alpha = 1 is hard resampling (uniform output weights, gradient
// flow through the weights cut); alpha = 0 preserves the weighting.
template <typename S>
ParticleBelief<S> soft_resample(const ParticleBelief<S>& bel, double alpha_re,
                                Rng& rng) {
  const int count = bel.count();
  Eigen::VectorXd probs(count);
  for (int i = 0; i < count; ++i)
    probs[i] = alpha_re * double(bel.weights.values()[i]) + (1.0 - alpha_re) / count;
  probs /= probs.sum();
  std::vector<int> idx = detail::systematic_indices(probs, count, rng);

  ParticleBelief<S> out;
  out.particles = gather_rows(bel.particles, idx);
  if (alpha_re >= 1.0) {
    out.weights =
        Tensor<S>::constant({count}, VecX<S>::Constant(count, S(1) / S(count)));
    out.log_weights = Tensor<S>::constant(
        {count}, VecX<S>::Constant(count, -std::log(S(count))));
    return out;
  }
  Tensor<S> q = add_const(scale(bel.weights, S(alpha_re)),
                          S((1.0 - alpha_re) / count));
  Tensor<S> ratio = div(gather_rows(bel.weights, idx), gather_rows(q, idx));
  Tensor<S> log_unnorm = log(ratio);
  Tensor<S> lse = logsumexp(log_unnorm);
  out.log_weights = sub(log_unnorm, tile_like(lse, count));
  out.weights = exp(out.log_weights);
  return out;
}

// Gaussian or mixture summary of the particle belief.
template <typename S>
using BeliefSummary = std::variant<GaussianBelief<S>, GaussianMixture<S>>;

template <typename S>
BeliefSummary<S> particle_belief_summary(const ParticleBelief<S>& bel,
                                         PfBeliefMode mode, double gmm_sigma,
                                         S fit_eps) {
  if (mode == PfBeliefMode::kSingleGaussian)
    return fit_gaussian(bel.particles, bel.weights, fit_eps);
  const int n = bel.particles.shape()[1];
  Tensor<S> cov = Tensor<S>::from_matrix(
      MatX<S>(MatX<S>::Identity(n, n) * S(gmm_sigma * gmm_sigma)));
  return GaussianMixture<S>{bel.particles, bel.log_weights, cov};
}

template <typename S>
struct PfResult {
  ParticleBelief<S> belief;
  Observation<S> obs;
  Tensor<S> q;
  StepDiagnostics diag;
};

template <typename S>
PfResult<S> pf_step(const ParticleBelief<S>& bel, const StepInput<S>& input,
                    const FilterModels<S>& models, const BoundParams<S>& p,
                    const FilterConfig& config, Rng& rng, int step_index) {
  const int count = bel.count();
  const int n = models.state_dim;
  PfResult<S> result;

  // Resampling placed at the start of the step keeps the loss gradients at
  // time t flowing into the time-t weights.
  ParticleBelief<S> current = bel;
  if (step_index % config.resample_every == 0) {
    current = soft_resample(bel, config.alpha_re, rng);
    result.diag.resampled = true;
  }

  // Prediction: apply the process model and add sampled process noise.
  Tensor<S> q = models.q_model.materialize_weighted(p, current.particles,
                                                    current.weights);
  Tensor<S> q_chol;
  try {
    q_chol = cholesky(q);
  } catch (const NumericError& e) {
    throw NumericError(std::string("pf prediction: process noise not PD: ") +
                           e.what(),
                       e.index);
  }
  VecX<S> eta(std::int64_t(count) * n);
  for (int i = 0; i < eta.size(); ++i) eta[i] = S(rng.normal());
  Tensor<S> noise = matmul(Tensor<S>::constant({count, n}, std::move(eta)),
                           transpose(q_chol));
  Tensor<S> propagated = add(models.process.forward_batch(p, current.particles), noise);

  // Observation update in log-weight space.
  Observation<S> obs = observe(models, p, input);
  Tensor<S> particle_obs = observation_select_batch(propagated, models.obs_dim);
  Tensor<S> log_lik;
  if (config.pf_update == PfUpdate::kLearned) {
    check_shape(bool(models.likelihood), "pf: learned update without likelihood net");
    log_lik = models.likelihood->log_forward(p, obs.encoding, particle_obs);
  } else {
    // log N(z; H chi, R) including the 2 pi constant (it cancels in the
    // normalization but keeps per-particle likelihoods interpretable).
    const int m = models.obs_dim;
    Tensor<S> r_chol;
    try {
      r_chol = cholesky(obs.r);
    } catch (const NumericError& e) {
      throw NumericError(std::string("pf update: R not PD: ") + e.what(), e.index);
    }
    Tensor<S> diff = sub(particle_obs, tile_rows(obs.z, count));
    Tensor<S> solved = triangular_solve(r_chol, transpose(diff), true, false);
    Tensor<S> quad = sum_axis(square(solved), 0);  // (N)
    Tensor<S> logdet_r = scale(sum(detail::log_diag(r_chol)), S(2));
    Tensor<S> c =
        scale(add_const(logdet_r, S(m) * S(kLog2Pi)), S(0.5));
    log_lik = neg(add(scale(quad, S(0.5)), tile_like(c, count)));
  }
  Tensor<S> log_unnorm = add(current.log_weights, log_lik);
  Tensor<S> lse = logsumexp(log_unnorm);
  Tensor<S> log_norm = sub(log_unnorm, tile_like(lse, count));
  Tensor<S> weights = exp(log_norm);

  // Degenerate weights (all zero / non-finite) reset to uniform.
  if (!weights.values().allFinite() || weights.values().sum() < S(0.5)) {
    weights =
        Tensor<S>::constant({count}, VecX<S>::Constant(count, S(1) / S(count)));
    log_norm = Tensor<S>::constant(
        {count}, VecX<S>::Constant(count, -std::log(S(count))));
    result.diag.weights_reset = true;
  }

  result.belief = ParticleBelief<S>{propagated, weights, log_norm};
  result.obs = obs;
  result.q = q;
  result.diag.effective_sample_size =
      1.0 / double(weights.values().array().square().sum());
  result.diag.innovation_norm =
      (obs.z.values() -
       (weights.values().transpose() * particle_obs.mat()).transpose())
          .norm();
  return result;
}

// ---------------------------------------------------------------------------
// Sequence folding

template <typename S>
struct FilterStepRecord {
  std::optional<GaussianBelief<S>> gauss;     // dEKF/dUKF/dMCUKF
  std::optional<ParticleBelief<S>> particles; // dPF
  Observation<S> obs;
  Tensor<S> q;
  StepDiagnostics diag;
};

// Folds the configured step function over the inputs, starting from the
// initial Gaussian belief (sampled into particles for the dPF). Gradients
// flow through the whole unrolled sequence except across PF resampling
// ancestry.
template <typename S>
std::vector<FilterStepRecord<S>> run_filter(
    const FilterModels<S>& models, const BoundParams<S>& p,
    const FilterConfig& config, const GaussianBelief<S>& init,
    const std::vector<StepInput<S>>& inputs, int sample_count, Rng& rng) {
  check_shape(!inputs.empty(), "run_filter: empty sequence");
  config.validate(models.state_dim);
  std::vector<FilterStepRecord<S>> records;
  records.reserve(inputs.size());
  if (config.kind == FilterKind::kPf) {
    ParticleBelief<S> bel = make_particle_belief(init, sample_count, rng);
    for (std::size_t t = 0; t < inputs.size(); ++t) {
      PfResult<S> r = pf_step(bel, inputs[t], models, p, config, rng, int(t));
      bel = r.belief;
      FilterStepRecord<S> rec;
      rec.particles = bel;
      rec.obs = r.obs;
      rec.q = r.q;
      rec.diag = r.diag;
      records.push_back(std::move(rec));
    }
    return records;
  }
  GaussianBelief<S> bel = init;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    FilterStepRecord<S> rec;
    switch (config.kind) {
      case FilterKind::kEkf: {
        EkfResult<S> r = ekf_step(bel, inputs[t], models, p);
        bel = r.belief;
        rec.obs = r.obs;
        rec.q = r.q;
        rec.diag = r.diag;
        break;
      }
      case FilterKind::kUkf: {
        UkfResult<S> r = ukf_step(bel, inputs[t], models, p, config.ukf);
        bel = r.belief;
        rec.obs = r.obs;
        rec.q = r.q;
        rec.diag = r.diag;
        break;
      }
      case FilterKind::kMcukf: {
        UkfResult<S> r = mcukf_step(bel, inputs[t], models, p, sample_count, rng);
        bel = r.belief;
        rec.obs = r.obs;
        rec.q = r.q;
        rec.diag = r.diag;
        break;
      }
      case FilterKind::kPf:
        break;  // handled above
    }
    rec.gauss = bel;
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace df
