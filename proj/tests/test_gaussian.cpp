#include <cmath>

#include <gtest/gtest.h>

#include "df/autodiff.hpp"
#include "df/gaussian.hpp"
#include "df/rng.hpp"

using df::CovShape;
using df::Shape;
using df::Tape;
using Tensor = df::Tensor<double>;
using Belief = df::GaussianBelief<double>;
using Vec = df::VecX<double>;
using Mat = df::MatX<double>;

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;

Tensor random_tensor(Shape shape, df::Rng& rng, double scale = 1.0) {
  Vec v(df::numel(shape));
  for (int i = 0; i < v.size(); ++i) v[i] = scale * rng.normal();
  return Tensor::constant(std::move(shape), std::move(v));
}
}  // namespace

TEST(MaterializeCov, IdentityFactor) {
  // packed upper entries of L = I (diagonal pre-bias)
  Tensor entries = Tensor::from_vector(Eigen::Vector3d(1, 0, 1));
  Tensor bias = Tensor::from_vector(Eigen::Vector2d(0, 0));
  Tensor cov = df::materialize_cov(entries, bias, CovShape::kFull, 0.0, 2);
  EXPECT_TRUE(cov.mat().isApprox(Mat::Identity(2, 2), 1e-14));
}

TEST(MaterializeCov, FullModeByHand) {
  // L = [[1,2],[0,3]] -> L L^T = [[5,6],[6,9]]
  Tensor entries = Tensor::from_vector(Eigen::Vector3d(1, 2, 3));
  Tensor bias = Tensor::from_vector(Eigen::Vector2d(0, 0));
  Tensor cov = df::materialize_cov(entries, bias, CovShape::kFull, 0.0, 2);
  Mat expect(2, 2);
  expect << 5, 6, 6, 9;
  EXPECT_TRUE(cov.mat().isApprox(expect, 1e-14));
}

TEST(MaterializeCov, DiagonalFloorAndPd) {
  df::Rng rng(17);
  const double eps = 1e-3;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 2 + int(rng.uniform_int(0, 2));
    const bool full = rng.uniform() < 0.5;
    const CovShape mode = full ? CovShape::kFull : CovShape::kDiagonal;
    Tensor entries = random_tensor({df::cov_param_size(mode, n)}, rng, 2.0);
    Tensor bias = random_tensor({n}, rng, 2.0);
    Tensor cov = df::materialize_cov(entries, bias, mode, eps, n);
    Mat m = cov.mat();
    for (int i = 0; i < n; ++i) EXPECT_GE(m(i, i), eps);
    EXPECT_NO_THROW(df::cholesky(cov));
  }
}

TEST(GaussianNll, SpecValues) {
  Belief bel{Tensor::from_vector(Eigen::Vector2d(0, 0)),
             Tensor::from_matrix(Mat::Identity(2, 2))};
  EXPECT_NEAR(df::gaussian_nll(Tensor::from_vector(Eigen::Vector2d(0, 0)), bel)
                  .scalar_value(),
              0.0, 1e-14);
  EXPECT_NEAR(df::gaussian_nll(Tensor::from_vector(Eigen::Vector2d(1, 0)), bel)
                  .scalar_value(),
              0.5, 1e-14);
  Belief bel1{Tensor::from_vector(Vec::Zero(1)),
              Tensor::from_matrix(Mat::Constant(1, 1, 4.0))};
  EXPECT_NEAR(df::gaussian_nll(Tensor::from_vector(Vec::Constant(1, 2.0)), bel1)
                  .scalar_value(),
              0.5 * (std::log(4.0) + 1.0), 1e-12);
}

TEST(GaussianNll, MatchesTrueDensityUpToConstant) {
  df::Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 2 + int(rng.uniform_int(0, 2));
    Mat b = random_tensor({n, n}, rng).mat();
    Mat sigma = b * b.transpose() + Mat::Identity(n, n);
    Vec mu = random_tensor({n}, rng).vec();
    Vec x = random_tensor({n}, rng, 2.0).vec();
    Belief bel{Tensor::from_vector(mu), Tensor::from_matrix(sigma)};
    const double nll =
        df::gaussian_nll(Tensor::from_vector(x), bel).scalar_value();
    const double density =
        std::exp(-0.5 * (x - mu).dot(sigma.inverse() * (x - mu))) /
        std::sqrt(std::pow(kTwoPi, n) * sigma.determinant());
    EXPECT_NEAR(nll + 0.5 * n * std::log(kTwoPi), -std::log(density), 1e-10);
  }
}

TEST(GmmNll, SpecValues) {
  Tensor cov = Tensor::from_matrix(Mat::Identity(2, 2));
  Tensor x = Tensor::from_vector(Eigen::Vector2d(1, 1));
  // one particle exactly at x
  {
    Tensor means = Tensor::constant({1, 2}, x.values());
    Tensor w = Tensor::from_vector(Vec::Ones(1));
    df::GaussianMixture<double> mix{means, df::log(w), cov};
    EXPECT_NEAR(df::gmm_nll(x, mix).scalar_value(), 0.0, 1e-14);
  }
  // two equal-weight particles both at x
  {
    Vec m(4);
    m << 1, 1, 1, 1;
    Tensor means = Tensor::constant({2, 2}, m);
    Tensor w = Tensor::from_vector(Vec::Constant(2, 0.5));
    df::GaussianMixture<double> mix{means, df::log(w), cov};
    EXPECT_NEAR(df::gmm_nll(x, mix).scalar_value(), 0.0, 1e-14);
  }
  // one particle offset by (1,0)
  {
    Vec m(2);
    m << 0, 1;
    Tensor means = Tensor::constant({1, 2}, m);
    Tensor w = Tensor::from_vector(Vec::Ones(1));
    df::GaussianMixture<double> mix{means, df::log(w), cov};
    EXPECT_NEAR(df::gmm_nll(x, mix).scalar_value(), 0.5, 1e-14);
  }
}

TEST(GmmNll, SingleComponentMatchesGaussianNll) {
  df::Rng rng(29);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 3;
    Mat b = random_tensor({n, n}, rng).mat();
    Mat sigma = b * b.transpose() + Mat::Identity(n, n);
    Vec mu = random_tensor({n}, rng).vec();
    Vec x = random_tensor({n}, rng).vec();
    Belief bel{Tensor::from_vector(mu), Tensor::from_matrix(sigma)};
    Tensor means = Tensor::constant({1, n}, mu);
    df::GaussianMixture<double> mix{means, Tensor::from_vector(Vec::Zero(1)),
                                    Tensor::from_matrix(sigma)};
    EXPECT_NEAR(df::gmm_nll(Tensor::from_vector(x), mix).scalar_value(),
                df::gaussian_nll(Tensor::from_vector(x), bel).scalar_value(),
                1e-10);
  }
}

TEST(FitGaussian, DegenerateCases) {
  const double eps = 1e-3;
  // all particles identical
  {
    Vec p(6);
    p << 2, -1, 2, -1, 2, -1;
    Belief bel = df::fit_gaussian(Tensor::constant({3, 2}, p),
                                  Tensor::from_vector(Vec::Constant(3, 1.0 / 3)),
                                  eps);
    EXPECT_TRUE(bel.mean.vec().isApprox(Eigen::Vector2d(2, -1), 1e-12));
    EXPECT_TRUE(bel.cov.mat().isApprox(eps * Mat::Identity(2, 2), 1e-12));
  }
  // two particles at +-1 (1-D), equal weights
  {
    Vec p(2);
    p << 1, -1;
    Belief bel = df::fit_gaussian(Tensor::constant({2, 1}, p),
                                  Tensor::from_vector(Vec::Constant(2, 0.5)), eps);
    EXPECT_NEAR(bel.mean.vec()[0], 0.0, 1e-14);
    EXPECT_NEAR(bel.cov.mat()(0, 0), 1.0 + eps, 1e-12);
  }
  // degenerate weight (1, 0)
  {
    Vec p(2);
    p << 4.2, -7.0;
    Vec w(2);
    w << 1, 0;
    Belief bel = df::fit_gaussian(Tensor::constant({2, 1}, p),
                                  Tensor::from_vector(w), eps);
    EXPECT_NEAR(bel.mean.vec()[0], 4.2, 1e-14);
  }
}

TEST(FitGaussian, ConvergesOnSampledData) {
  df::Rng rng(31);
  const int n = 4, count = 100000;
  Mat b = random_tensor({n, n}, rng).mat();
  Mat sigma = b * b.transpose() + Mat::Identity(n, n);
  Vec mu = random_tensor({n}, rng, 3.0).vec();
  Belief src{Tensor::from_vector(mu), Tensor::from_matrix(sigma)};
  Tensor samples = df::sample_gaussian(src, count, rng);
  Belief fit = df::fit_gaussian(
      samples, Tensor::from_vector(Vec::Constant(count, 1.0 / count)), 1e-3);
  for (int i = 0; i < n; ++i) {
    const double bound = 3.0 * std::sqrt(sigma(i, i)) / std::sqrt(double(count));
    EXPECT_LT(std::abs(fit.mean.vec()[i] - mu[i]), bound) << "axis " << i;
  }
}

TEST(Bhattacharyya, SpecValues) {
  Mat a = Mat::Constant(1, 1, 1.0), b = Mat::Constant(1, 1, 4.0);
  EXPECT_NEAR(df::bhattacharyya_value(a, a), 0.0, 1e-14);
  EXPECT_NEAR(df::bhattacharyya_value(a, b), 0.5 * std::log(2.5 / 2.0), 1e-12);
  EXPECT_NEAR(df::bhattacharyya_value(a, b), df::bhattacharyya_value(b, a), 1e-14);
}

TEST(SampleGaussian, MomentsAndDeterminism) {
  df::Rng rng(37);
  const int count = 100000, n = 3;
  Mat sigma = Mat::Identity(n, n);
  Belief bel{Tensor::from_vector(Vec::Zero(n)), Tensor::from_matrix(sigma)};
  Tensor samples = df::sample_gaussian(bel, count, rng);
  Mat x = samples.mat();
  Vec mean = x.colwise().mean().transpose();
  for (int i = 0; i < n; ++i) EXPECT_LT(std::abs(mean[i]), 0.02);
  Mat centered = x.rowwise() - mean.transpose();
  Mat cov = centered.transpose() * centered / double(count);
  EXPECT_LT((cov - sigma).norm() / sigma.norm(), 0.05);

  df::Rng r1(99), r2(99);
  Tensor s1 = df::sample_gaussian(bel, 10, r1);
  Tensor s2 = df::sample_gaussian(bel, 10, r2);
  EXPECT_TRUE(s1.values() == s2.values());

  Belief tight{Tensor::from_vector(Eigen::Vector3d(1, 2, 3)),
               Tensor::from_matrix(Mat::Identity(3, 3) * 1e-16)};
  Tensor s3 = df::sample_gaussian(tight, 5, r1);
  for (int i = 0; i < 5; ++i)
    EXPECT_LT((s3.mat().row(i).transpose() - Eigen::Vector3d(1, 2, 3)).norm(), 1e-6);
}

TEST(MatrixSqrtPsd, Reconstruction) {
  EXPECT_TRUE(df::matrix_sqrt_psd(Tensor::from_matrix(Mat::Identity(3, 3)))
                  .mat()
                  .isApprox(Mat::Identity(3, 3), 1e-14));
  Mat d = Mat::Zero(2, 2);
  d(0, 0) = 4;
  d(1, 1) = 9;
  Mat expect = Mat::Zero(2, 2);
  expect(0, 0) = 2;
  expect(1, 1) = 3;
  EXPECT_TRUE(df::matrix_sqrt_psd(Tensor::from_matrix(d)).mat().isApprox(expect, 1e-14));

  df::Rng rng(41);
  for (int trial = 0; trial < 10; ++trial) {
    Mat b = random_tensor({4, 4}, rng).mat();
    Mat spd = b * b.transpose() + Mat::Identity(4, 4);
    Mat l = df::matrix_sqrt_psd(Tensor::from_matrix(spd)).mat();
    EXPECT_LT((l * l.transpose() - spd).norm(), 1e-10);
  }
}

// All probability ops differentiable: finite differences at tol 1e-4.
TEST(Gradients, ProbabilityOps) {
  df::Rng rng(43);

  // gaussian_nll w.r.t. mean and triangular covariance parameters jointly
  {
    Tensor x0 = random_tensor({3 + 6 + 3}, rng);
    auto report = df::gradient_check<double>(
        [](Tape<double>& tape, const Tensor& p) {
          Tensor mu = df::slice_rows(p, 0, 3);
          Tensor entries = df::slice_rows(p, 3, 6);
          Tensor bias = df::slice_rows(p, 9, 3);
          Tensor cov = df::materialize_cov(entries, bias, CovShape::kFull, 1e-2, 3);
          df::GaussianBelief<double> bel{mu, cov};
          Tensor x = Tensor::from_vector(Eigen::Vector3d(0.3, -0.8, 1.2));
          return df::gaussian_nll(x, bel);
        },
        x0, 1e-5, 1e-4);
    EXPECT_TRUE(report.pass) << report.max_rel_error;
  }

  // gmm_nll w.r.t. particle positions and log weights
  {
    Tensor x0 = random_tensor({12 + 4}, rng);
    auto report = df::gradient_check<double>(
        [](Tape<double>& tape, const Tensor& p) {
          Tensor means = df::reshape(df::slice_rows(p, 0, 12), {4, 3});
          Tensor logw_raw = df::slice_rows(p, 12, 4);
          Tensor logw = df::log(df::softmax(logw_raw));
          df::GaussianMixture<double> mix{means, logw,
                                          Tensor::from_matrix(Mat::Identity(3, 3))};
          Tensor x = Tensor::from_vector(Eigen::Vector3d(0.1, 0.4, -0.2));
          return df::gmm_nll(x, mix);
        },
        x0, 1e-5, 1e-4);
    EXPECT_TRUE(report.pass) << report.max_rel_error;
  }

  // fit_gaussian + nll of the fit, w.r.t. particles and weights
  {
    Tensor x0 = random_tensor({8 + 4}, rng);
    auto report = df::gradient_check<double>(
        [](Tape<double>& tape, const Tensor& p) {
          Tensor particles = df::reshape(df::slice_rows(p, 0, 8), {4, 2});
          Tensor w = df::softmax(df::slice_rows(p, 8, 4));
          auto bel = df::fit_gaussian(particles, w, 1e-2);
          Tensor x = Tensor::from_vector(Eigen::Vector2d(0.2, -0.1));
          return df::gaussian_nll(x, bel);
        },
        x0, 1e-5, 1e-4);
    EXPECT_TRUE(report.pass) << report.max_rel_error;
  }

  // bhattacharyya w.r.t. one covariance (through a PD construction)
  {
    Tensor x0 = random_tensor({4}, rng);
    auto report = df::gradient_check<double>(
        [](Tape<double>& tape, const Tensor& p) {
          Tensor b = df::reshape(p, {2, 2});
          Tensor cov = df::add(df::matmul(b, df::transpose(b)),
                               Tensor::from_matrix(Mat::Identity(2, 2)));
          Mat g(2, 2);
          g << 3, 1, 1, 2;
          return df::bhattacharyya(cov, Tensor::from_matrix(g));
        },
        x0, 1e-5, 1e-4);
    EXPECT_TRUE(report.pass) << report.max_rel_error;
  }

  // sample_gaussian reparameterization w.r.t. mean and covariance
  {
    Tensor x0 = random_tensor({2 + 4}, rng);
    auto report = df::gradient_check<double>(
        [](Tape<double>& tape, const Tensor& p) {
          Tensor mu = df::slice_rows(p, 0, 2);
          Tensor b = df::reshape(df::slice_rows(p, 2, 4), {2, 2});
          Tensor cov = df::add(df::matmul(b, df::transpose(b)),
                               Tensor::from_matrix(Mat::Identity(2, 2)));
          df::GaussianBelief<double> bel{mu, cov};
          df::Rng sample_rng(7);
          Tensor samples = df::sample_gaussian(bel, 6, sample_rng);
          return df::sum(df::square(samples));
        },
        x0, 1e-5, 1e-4);
    EXPECT_TRUE(report.pass) << report.max_rel_error;
  }
}
