#pragma once

#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "df/rng.hpp"

// Textbook closed-form Kalman filter on linear-Gaussian systems. Kept
// deliberately independent of the taped filter implementations so it can
// serve as an oracle for them.

namespace df {

struct LinearSystem {
  Eigen::MatrixXd a;   // state transition
  Eigen::MatrixXd h;   // observation
  Eigen::MatrixXd q;   // process noise covariance
  Eigen::MatrixXd r;   // observation noise covariance
  Eigen::VectorXd x0;  // initial belief mean
  Eigen::MatrixXd p0;  // initial belief covariance
};

inline Eigen::MatrixXd random_spd(int n, double base, Rng& rng) {
  Eigen::MatrixXd b(n, n);
  for (int i = 0; i < b.size(); ++i) b.data()[i] = rng.normal();
  return base * Eigen::MatrixXd::Identity(n, n) + 0.25 * base * (b * b.transpose()) / n;
}

// Random stable system (spectral radius scaled to 0.92).
inline LinearSystem random_linear_system(int state_dim, int obs_dim,
                                         std::uint64_t seed) {
  Rng rng(seed);
  LinearSystem sys;
  sys.a.resize(state_dim, state_dim);
  for (int i = 0; i < sys.a.size(); ++i) sys.a.data()[i] = rng.normal();
  const double radius = sys.a.eigenvalues().cwiseAbs().maxCoeff();
  sys.a *= 0.92 / radius;
  sys.h.resize(obs_dim, state_dim);
  for (int i = 0; i < sys.h.size(); ++i) sys.h.data()[i] = rng.normal();
  sys.q = random_spd(state_dim, 0.3, rng);
  sys.r = random_spd(obs_dim, 0.5, rng);
  sys.x0.resize(state_dim);
  for (int i = 0; i < state_dim; ++i) sys.x0[i] = 2.0 * rng.normal();
  sys.p0 = random_spd(state_dim, 1.0, rng);
  return sys;
}

inline Eigen::VectorXd sample_mvn(const Eigen::VectorXd& mean,
                                  const Eigen::MatrixXd& cov, Rng& rng) {
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  Eigen::VectorXd eta(mean.size());
  for (int i = 0; i < eta.size(); ++i) eta[i] = rng.normal();
  return mean + llt.matrixL() * eta;
}

struct LinearTrajectory {
  std::vector<Eigen::VectorXd> states;        // T+1, true states
  std::vector<Eigen::VectorXd> observations;  // T
};

inline LinearTrajectory simulate_linear(const LinearSystem& sys, int steps,
                                        Rng& rng) {
  LinearTrajectory traj;
  Eigen::VectorXd x = sample_mvn(sys.x0, sys.p0, rng);
  traj.states.push_back(x);
  for (int t = 0; t < steps; ++t) {
    x = sys.a * x + sample_mvn(Eigen::VectorXd::Zero(x.size()), sys.q, rng);
    traj.states.push_back(x);
    traj.observations.push_back(
        sys.h * x + sample_mvn(Eigen::VectorXd::Zero(sys.r.rows()), sys.r, rng));
  }
  return traj;
}

struct KfPosterior {
  std::vector<Eigen::VectorXd> means;
  std::vector<Eigen::MatrixXd> covs;
};

inline KfPosterior kf_run(const LinearSystem& sys,
                          const std::vector<Eigen::VectorXd>& observations) {
  KfPosterior post;
  Eigen::VectorXd mu = sys.x0;
  Eigen::MatrixXd sigma = sys.p0;
  const Eigen::MatrixXd eye =
      Eigen::MatrixXd::Identity(sys.a.rows(), sys.a.rows());
  for (const auto& z : observations) {
    mu = sys.a * mu;
    sigma = sys.a * sigma * sys.a.transpose() + sys.q;
    const Eigen::MatrixXd s = sys.h * sigma * sys.h.transpose() + sys.r;
    const Eigen::MatrixXd k = sigma * sys.h.transpose() * s.inverse();
    mu = mu + k * (z - sys.h * mu);
    sigma = (eye - k * sys.h) * sigma;
    sigma = 0.5 * (sigma + sigma.transpose()).eval();
    post.means.push_back(mu);
    post.covs.push_back(sigma);
  }
  return post;
}

}  // namespace df
