#pragma once

#include <cmath>
#include <vector>

#include "df/ops.hpp"
#include "df/rng.hpp"
#include "df/tensor.hpp"

// Gaussian beliefs, covariance parameterizations, densities and
// divergences. Everything here is built from taped ops, so gradients flow
// through means, covariances and the triangular noise parameters.

namespace df {

template <typename S>
struct GaussianBelief {
  Tensor<S> mean;  // (n)
  Tensor<S> cov;   // (n, n), symmetric positive definite
  int dim() const { return mean.shape()[0]; }
};

// Mixture with one component per particle and a shared covariance.
template <typename S>
struct GaussianMixture {
  Tensor<S> means;        // (N, n)
  Tensor<S> log_weights;  // (N), normalized in probability space
  Tensor<S> cov;          // (n, n) shared
};

enum class CovShape { kDiagonal, kFull };

// Number of stored entries for a covariance parameterization.
inline int cov_param_size(CovShape shape, int n) {
  return shape == CovShape::kDiagonal ? n : n * (n + 1) / 2;
}

namespace detail {

// Constant 0/1 embedding that scatters packed upper-triangular entries
// into a flat (n*n) matrix, row-major.
template <typename S>
Tensor<S> upper_embedding(int n) {
  const int m = n * (n + 1) / 2;
  MatX<S> e = MatX<S>::Zero(n * n, m);
  int at = 0;
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j) e(i * n + j, at++) = S(1);
  return Tensor<S>::from_matrix(e);
}

// Scatters an n-vector onto the diagonal of a flat (n*n) matrix.
template <typename S>
Tensor<S> diag_embedding(int n) {
  MatX<S> e = MatX<S>::Zero(n * n, n);
  for (int i = 0; i < n; ++i) e(i * n + i, i) = S(1);
  return Tensor<S>::from_matrix(e);
}

}  // namespace detail

// Materializes a covariance matrix from raw (pre-bias) entries and a
// trainable bias so that the result is positive definite by construction
// with diagonal >= eps:
//   diagonal: diag(d^2 + b^2 + eps)
//   full:     L L^T + eps I with upper-triangular L, bias added to diag(L)
// With zero entries the diagonal equals b^2 + eps, which is how noise
// models hit their initialization targets exactly.
template <typename S>
Tensor<S> materialize_cov(const Tensor<S>& entries, const Tensor<S>& bias,
                          CovShape shape, S eps, int n) {
  check_shape(bias.rank() == 1 && bias.shape()[0] == n,
              "materialize_cov: bias must have length n");
  check_shape(entries.rank() == 1 &&
                  entries.shape()[0] == cov_param_size(shape, n),
              "materialize_cov: wrong entry count");
  if (shape == CovShape::kDiagonal) {
    Tensor<S> var = add_const(add(square(entries), square(bias)), eps);
    return diag_matrix(var);
  }
  Tensor<S> l_flat = add(matmul(detail::upper_embedding<S>(n), entries),
                         matmul(detail::diag_embedding<S>(n), bias));
  Tensor<S> l = reshape(l_flat, {n, n});
  Tensor<S> cov = matmul(l, transpose(l));
  Tensor<S> eye = Tensor<S>::from_matrix(MatX<S>::Identity(n, n) * eps);
  return add(cov, eye);
}

// Lower-triangular factor with factor * factor^T = cov (Cholesky).
template <typename S>
Tensor<S> matrix_sqrt_psd(const Tensor<S>& cov) {
  return cholesky(cov);
}

namespace detail {

template <typename S>
Tensor<S> log_diag(const Tensor<S>& l) {
  const int n = l.shape()[0];
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i * n + i;
  return log(gather_rows(reshape(l, {n * n}), idx));
}

}  // namespace detail

// 1/2 [log|Sigma| + (x-mu)^T Sigma^-1 (x-mu)]; the 2*pi constant is
// dropped. Add 0.5*n*log(2*pi) to recover the true negative log density.
template <typename S>
Tensor<S> gaussian_nll(const Tensor<S>& x, const GaussianBelief<S>& bel) {
  check_shape(x.rank() == 1 && x.shape() == bel.mean.shape(),
              "gaussian_nll: dimension mismatch");
  Tensor<S> l = cholesky(bel.cov);
  Tensor<S> logdet_cov = scale(sum(detail::log_diag(l)), S(2));
  Tensor<S> resid = sub(x, bel.mean);
  Tensor<S> y = triangular_solve(l, resid, true, false);
  return scale(add(logdet_cov, sum_squares(y)), S(0.5));
}

// Broadcast of a scalar tensor to a rank-1 tensor of length n.
template <typename S>
Tensor<S> tile_like(const Tensor<S>& scalar_t, int n) {
  check_shape(scalar_t.size() == 1, "tile_like: scalar input required");
  return reshape(tile_rows(reshape(scalar_t, {1}), n), {n});
}

// Mixture negative log likelihood with log-space weights:
//   -log sum_i exp(log pi_i - 1/2 log|Sigma| - 1/2 d_i^T Sigma^-1 d_i)
template <typename S>
Tensor<S> gmm_nll_log(const Tensor<S>& x, const Tensor<S>& means,
                      const Tensor<S>& log_weights, const Tensor<S>& cov) {
  check_shape(means.rank() == 2 && x.rank() == 1 &&
                  means.shape()[1] == x.shape()[0],
              "gmm_nll: dimension mismatch");
  const int count = means.shape()[0];
  check_shape(log_weights.rank() == 1 && log_weights.shape()[0] == count,
              "gmm_nll: weight count mismatch");
  Tensor<S> l = cholesky(cov);
  Tensor<S> logdet_cov = scale(sum(detail::log_diag(l)), S(2));
  Tensor<S> diff = sub(tile_rows(x, count), means);                // (N, n)
  Tensor<S> y = triangular_solve(l, transpose(diff), true, false); // (n, N)
  Tensor<S> quad = sum_axis(square(y), 0);                         // (N)
  Tensor<S> terms = sub(log_weights,
                        scale(add(tile_like(logdet_cov, count), quad), S(0.5)));
  return neg(logsumexp(terms));
}

template <typename S>
Tensor<S> gmm_nll(const Tensor<S>& x, const GaussianMixture<S>& mix) {
  return gmm_nll_log(x, mix.means, mix.log_weights, mix.cov);
}

// Weighted mean and covariance of a particle set, plus eps on the diagonal
// so collapsed particle sets still yield a usable covariance.
template <typename S>
GaussianBelief<S> fit_gaussian(const Tensor<S>& particles,
                               const Tensor<S>& weights, S eps) {
  check_shape(particles.rank() == 2 && weights.rank() == 1 &&
                  weights.shape()[0] == particles.shape()[0],
              "fit_gaussian: dimension mismatch");
  const int n = particles.shape()[1];
  Tensor<S> mu = matmul(weights, particles);  // (n) row * (N,n)
  Tensor<S> centered = sub(particles, tile_rows(mu, particles.shape()[0]));
  Tensor<S> cov = matmul(transpose(centered), scale_rows(centered, weights));
  cov = add(symmetrize(cov), Tensor<S>::from_matrix(MatX<S>::Identity(n, n) * eps));
  return GaussianBelief<S>{mu, cov};
}

// Bhattacharyya distance between zero-mean Gaussians:
//   1/2 log( |(A+B)/2| / sqrt(|A| |B|) )
template <typename S>
Tensor<S> bhattacharyya(const Tensor<S>& cov_a, const Tensor<S>& cov_b) {
  Tensor<S> mid = scale(add(cov_a, cov_b), S(0.5));
  Tensor<S> t = sub(logdet(mid),
                    scale(add(logdet(cov_a), logdet(cov_b)), S(0.5)));
  return scale(t, S(0.5));
}

template <typename S>
S bhattacharyya_value(const MatX<S>& a, const MatX<S>& b) {
  return bhattacharyya(Tensor<S>::from_matrix(a), Tensor<S>::from_matrix(b))
      .scalar_value();
}

// Reparameterized sampling: mu + L eta with eta ~ N(0, I) drawn from the
// stream, so gradients flow into mean and covariance.
template <typename S>
Tensor<S> sample_gaussian(const GaussianBelief<S>& bel, int count, Rng& rng) {
  const int n = bel.dim();
  VecX<S> eta(std::int64_t(count) * n);
  for (int i = 0; i < eta.size(); ++i) eta[i] = S(rng.normal());
  Tensor<S> noise = Tensor<S>::constant({count, n}, std::move(eta));
  Tensor<S> l = cholesky(bel.cov);
  return add(tile_rows(bel.mean, count), matmul(noise, transpose(l)));
}

}  // namespace df
