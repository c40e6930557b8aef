#pragma once

#include <cstdint>
#include <vector>

#include "df/filters.hpp"
#include "df/reference_kf.hpp"

// Linear-Gaussian equivalence suite: every filter against the closed-form
// Kalman filter on a randomly generated stable 4-D system. dEKF and dUKF
// must coincide with the oracle; the sampling filters must track it within
// Monte-Carlo bounds (trajectory-mean error, per seeded trial).

namespace df {

struct OracleCheckResult {
  double ekf_max_mu = 0, ekf_max_sigma = 0;
  double ukf_max_mu = 0, ukf_max_sigma = 0;
  int mcukf_pass = 0, pf_pass = 0, trials = 0;
  double mcukf_worst_ratio = 0, pf_worst_ratio = 0;
  bool ran_ekf = false, ran_ukf = false, ran_mcukf = false, ran_pf = false;

  bool pass(double exact_tol = 1e-8, double trial_fraction = 0.95) const {
    bool ok = true;
    if (ran_ekf) ok = ok && ekf_max_mu < exact_tol && ekf_max_sigma < exact_tol;
    if (ran_ukf) ok = ok && ukf_max_mu < exact_tol && ukf_max_sigma < exact_tol;
    const int needed = int(std::ceil(trial_fraction * trials));
    if (ran_mcukf) ok = ok && mcukf_pass >= needed;
    if (ran_pf) ok = ok && pf_pass >= needed;
    return ok;
  }
};

struct OracleCheckConfig {
  bool run_ekf = true, run_ukf = true, run_mcukf = true, run_pf = true;
  int steps = 50;
  int trials = 100;        // seeded trials for the sampling filters
  int mcukf_samples = 100000;
  int pf_particles = 10000;
  std::uint64_t seed = 2024;
};

inline OracleCheckResult run_oracle_check(const OracleCheckConfig& cfg) {
  LinearSystem sys = random_linear_system(4, 2, cfg.seed);
  sys.h = selection_matrix<double>(2, 4);
  Rng data_rng = Rng::derive(cfg.seed, {1});
  auto traj = simulate_linear(sys, cfg.steps, data_rng);
  auto kf = kf_run(sys, traj.observations);

  FilterModels<double> m;
  m.state_dim = 4;
  m.obs_dim = 2;
  m.process = make_linear_process<double>(sys.a);
  m.q_model = make_fixed_noise<double>(sys.q);
  m.r_model = make_fixed_noise<double>(sys.r);
  BoundParams<double> bound = m.store.bind(nullptr);
  GaussianBelief<double> init{Tensor<double>::from_vector(sys.x0),
                              Tensor<double>::from_matrix(sys.p0)};
  std::vector<StepInput<double>> inputs;
  for (const auto& z : traj.observations) {
    StepInput<double> in;
    in.direct_z = Tensor<double>::from_vector(z);
    inputs.push_back(std::move(in));
  }

  OracleCheckResult result;
  result.trials = cfg.trials;

  auto exact_check = [&](FilterKind kind, double& max_mu, double& max_sigma) {
    FilterConfig fc;
    fc.kind = kind;
    Rng rng(0);
    auto records = run_filter(m, bound, fc, init, inputs, 16, rng);
    for (int t = 0; t < cfg.steps; ++t) {
      max_mu = std::max(max_mu, (records[std::size_t(t)].gauss->mean.vec() -
                                 kf.means[std::size_t(t)])
                                    .cwiseAbs()
                                    .maxCoeff());
      MatX<double> cov = records[std::size_t(t)].gauss->cov.mat();
      max_sigma = std::max(
          max_sigma,
          (cov - kf.covs[std::size_t(t)]).cwiseAbs().maxCoeff());
    }
  };
  if (cfg.run_ekf) {
    exact_check(FilterKind::kEkf, result.ekf_max_mu, result.ekf_max_sigma);
    result.ran_ekf = true;
  }
  if (cfg.run_ukf) {
    exact_check(FilterKind::kUkf, result.ukf_max_mu, result.ukf_max_sigma);
    result.ran_ukf = true;
  }

  // Sampling filters: a trial passes when the trajectory-mean error stays
  // within the stated bound (5 sigma/sqrt(N) per axis for the dMCUKF,
  // 3 sqrt(tr Sigma_KF / N) for the dPF).
  if (cfg.run_mcukf) {
    result.ran_mcukf = true;
    for (int trial = 0; trial < cfg.trials; ++trial) {
      FilterConfig fc;
      fc.kind = FilterKind::kMcukf;
      Rng rng = Rng::derive(cfg.seed, {90, std::uint64_t(trial)});
      auto records =
          run_filter(m, bound, fc, init, inputs, cfg.mcukf_samples, rng);
      double err_sum = 0, bound_sum = 0;
      for (int t = 0; t < cfg.steps; ++t) {
        for (int i = 0; i < 4; ++i) {
          err_sum += std::abs(records[std::size_t(t)].gauss->mean.vec()[i] -
                              kf.means[std::size_t(t)][i]);
          bound_sum += 5.0 * std::sqrt(kf.covs[std::size_t(t)](i, i) /
                                       double(cfg.mcukf_samples));
        }
      }
      const double ratio = err_sum / bound_sum;
      result.mcukf_worst_ratio = std::max(result.mcukf_worst_ratio, ratio);
      if (ratio <= 1.0) ++result.mcukf_pass;
    }
  }
  if (cfg.run_pf) {
    result.ran_pf = true;
    for (int trial = 0; trial < cfg.trials; ++trial) {
      FilterConfig fc;
      fc.kind = FilterKind::kPf;
      fc.alpha_re = 1.0;
      fc.resample_every = 1;
      Rng rng = Rng::derive(cfg.seed, {91, std::uint64_t(trial)});
      auto records =
          run_filter(m, bound, fc, init, inputs, cfg.pf_particles, rng);
      double err_sum = 0, bound_sum = 0;
      for (int t = 0; t < cfg.steps; ++t) {
        const auto& bel = *records[std::size_t(t)].particles;
        Eigen::VectorXd mean =
            (bel.weights.values().transpose() * bel.particles.mat()).transpose();
        err_sum += (mean - kf.means[std::size_t(t)]).norm();
        bound_sum += 3.0 * std::sqrt(kf.covs[std::size_t(t)].trace() /
                                     double(cfg.pf_particles));
      }
      const double ratio = err_sum / bound_sum;
      result.pf_worst_ratio = std::max(result.pf_worst_ratio, ratio);
      if (ratio <= 1.0) ++result.pf_pass;
    }
  }
  return result;
}

}  // namespace df
