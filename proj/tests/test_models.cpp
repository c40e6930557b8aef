#include <gtest/gtest.h>

#include "df/autodiff.hpp"
#include "df/models.hpp"
#include "df/rng.hpp"

using df::Activation;
using df::CovShape;
using df::Shape;
using df::Tape;
using Tensor = df::Tensor<double>;
using Store = df::ParamStore<double>;
using Vec = df::VecX<double>;
using Mat = df::MatX<double>;

TEST(ObservationModel, SelectionAndLinearity) {
  Tensor x = Tensor::from_vector(Eigen::Vector4d(1, 2, 3, 4));
  Tensor z = df::observation_select(x, 2);
  EXPECT_TRUE(z.vec().isApprox(Eigen::Vector2d(1, 2)));

  Tensor ax = df::scale(x, 3.0);
  EXPECT_TRUE(df::observation_select(ax, 2).vec().isApprox(3.0 * z.vec()));

  Mat h = df::selection_matrix<double>(2, 4);
  Mat jac = df::jacobian<double>(
      [](Tape<double>&, const Tensor& xt) { return df::observation_select(xt, 2); },
      x);
  EXPECT_TRUE(jac.isApprox(h, 1e-14));
}

TEST(DiscDynamics, HandValues) {
  Tensor x = Tensor::from_vector(Eigen::Vector4d(10, 0, 2, 0));
  Tensor next = df::disc_process(x);
  // v' = 2 - 0.05*10 - 0.0075*4 = 1.47
  EXPECT_TRUE(next.vec().isApprox(Eigen::Vector4d(12, 0, 1.47, 0), 1e-12));

  Tensor origin = Tensor::from_vector(Vec::Zero(4));
  EXPECT_TRUE(df::disc_process(origin).vec().isZero());

  df::Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    Vec v(4);
    for (int j = 0; j < 4; ++j) v[j] = 10.0 * rng.normal();
    Vec fwd = df::disc_process(Tensor::from_vector(v)).vec();
    Vec neg = df::disc_process(Tensor::from_vector(Vec(-v))).vec();
    EXPECT_TRUE(neg.isApprox(-fwd, 1e-12));
  }
}

TEST(DiscDynamics, BatchMatchesSingle) {
  df::Rng rng(5);
  Mat xs(7, 4);
  for (int i = 0; i < xs.size(); ++i) xs.data()[i] = 8.0 * rng.normal();
  Tensor batch = df::disc_process_batch(Tensor::from_matrix(xs));
  for (int i = 0; i < 7; ++i) {
    Vec single = df::disc_process(Tensor::from_vector(Vec(xs.row(i).transpose()))).vec();
    EXPECT_TRUE(batch.mat().row(i).transpose().isApprox(single, 1e-13));
  }
}

TEST(DiscDynamics, JacobianMatchesAnalyticAndAutodiff) {
  df::Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Vec x(4);
    for (int j = 0; j < 4; ++j) x[j] = 10.0 * rng.normal();
    if (std::abs(x[2]) < 0.1 || std::abs(x[3]) < 0.1) continue;  // away from v = 0
    Mat analytic = df::disc_process_jacobian_analytic<double>(x);
    Mat taped = df::disc_process_jacobian(Tensor::from_vector(x)).mat();
    EXPECT_TRUE(taped.isApprox(analytic, 1e-12));
    Mat ad = df::jacobian<double>(
        [](Tape<double>&, const Tensor& xt) { return df::disc_process(xt); },
        Tensor::from_vector(x));
    EXPECT_TRUE(ad.isApprox(analytic, 1e-8));
  }
  // dv'_x / dp_x = -f_p
  Mat j = df::disc_process_jacobian_analytic<double>(
      (Eigen::Vector4d() << 10, 0, 2, 0).finished());
  EXPECT_DOUBLE_EQ(j(2, 0), -0.05);
}

TEST(ProcessModel, ZeroHeadIsIdentity) {
  Store store;
  df::Rng rng(11);
  auto process = df::make_learned_process(store, 4, rng);
  df::fill_init(store, process.layers.back().weights, 0.0);
  df::fill_init(store, process.layers.back().bias, 0.0);
  auto bound = store.bind(nullptr);
  df::Rng xr(12);
  for (int i = 0; i < 10; ++i) {
    Vec x(4);
    for (int j = 0; j < 4; ++j) x[j] = 5.0 * xr.normal();
    Vec out = process.forward(bound, Tensor::from_vector(x)).vec();
    EXPECT_TRUE(out == x);
  }
}

TEST(ProcessModel, LearnedJacobianMatchesAutodiff) {
  Store store;
  df::Rng rng(13);
  auto process = df::make_learned_process(store, 4, rng);
  auto bound = store.bind(nullptr);
  df::Rng xr(14);
  for (int trial = 0; trial < 10; ++trial) {
    Vec x(4);
    for (int j = 0; j < 4; ++j) x[j] = 2.0 * xr.normal();
    auto [next, jac] = process.forward_with_jacobian(bound, Tensor::from_vector(x));
    EXPECT_TRUE(next.vec().isApprox(
        process.forward(bound, Tensor::from_vector(x)).vec(), 1e-14));
    Mat ad = df::jacobian<double>(
        [&](Tape<double>& tape, const Tensor& xt) {
          return process.forward(bound, xt);
        },
        Tensor::from_vector(x));
    EXPECT_TRUE(jac.mat().isApprox(ad, 1e-10))
        << "taped:\n" << jac.mat() << "\nautodiff:\n" << ad;
  }
}

TEST(NoiseModel, ConstantInitHitsTarget) {
  Store store;
  auto q = df::make_constant_noise(store, "q", 4, CovShape::kDiagonal, 100.0, 1e-3);
  auto bound = store.bind(nullptr);
  Mat cov = q.materialize(bound, Tensor()).mat();
  EXPECT_TRUE(cov.isApprox(100.0 * Mat::Identity(4, 4), 1e-12));

  Store store2;
  auto qf = df::make_constant_noise(store2, "q", 4, CovShape::kFull, 1.0, 1e-3);
  auto bound2 = store2.bind(nullptr);
  Mat cov2 = qf.materialize(bound2, Tensor()).mat();
  EXPECT_TRUE(cov2.isApprox(Mat::Identity(4, 4), 1e-12));
}

TEST(NoiseModel, HeteroWeightedSetReductions) {
  Store store;
  df::Rng rng(17);
  auto q = df::make_hetero_noise(store, "q", 4, 4, CovShape::kDiagonal, 10.0,
                                 1e-3, rng);
  // make the head nontrivial
  df::he_uniform_init(store, q.net.back().weights, 32, rng);
  auto bound = store.bind(nullptr);

  Vec x(4);
  x << 1, -2, 0.5, 3;
  Mat single = q.materialize(bound, Tensor::from_vector(x)).mat();

  // identical points -> equals single-point evaluation
  Mat pts(3, 4);
  pts << x.transpose(), x.transpose(), x.transpose();
  Tensor w = Tensor::from_vector(Eigen::Vector3d(0.2, 0.5, 0.3));
  Mat avg = q.materialize_weighted(bound, Tensor::from_matrix(pts), w).mat();
  EXPECT_TRUE(avg.isApprox(single, 1e-10));

  // degenerate weights (1, 0, 0) -> Q of the first point
  df::Rng xr(18);
  Mat pts2(3, 4);
  for (int i = 0; i < pts2.size(); ++i) pts2.data()[i] = 3.0 * xr.normal();
  Tensor w2 = Tensor::from_vector(Eigen::Vector3d(1, 0, 0));
  Mat first = q.materialize(bound, Tensor::from_vector(Vec(pts2.row(0).transpose()))).mat();
  Mat picked = q.materialize_weighted(bound, Tensor::from_matrix(pts2), w2).mat();
  EXPECT_TRUE(picked.isApprox(first, 1e-10));
}

TEST(NoiseModel, WeightedFullMatchesPerPointAverage) {
  Store store;
  df::Rng rng(19);
  auto q = df::make_hetero_noise(store, "q", 4, 4, CovShape::kFull, 2.0, 1e-3, rng);
  df::he_uniform_init(store, q.net.back().weights, 32, rng);
  auto bound = store.bind(nullptr);
  df::Rng xr(20);
  Mat pts(5, 4);
  for (int i = 0; i < pts.size(); ++i) pts.data()[i] = 2.0 * xr.normal();
  Vec wv(5);
  for (int i = 0; i < 5; ++i) wv[i] = xr.uniform() + 0.1;
  wv /= wv.sum();
  Mat by_hand = Mat::Zero(4, 4);
  for (int i = 0; i < 5; ++i) {
    Mat qi = q.materialize(bound, Tensor::from_vector(Vec(pts.row(i).transpose()))).mat();
    by_hand += wv[i] * (qi - 1e-3 * Mat::Identity(4, 4));
  }
  by_hand += 1e-3 * Mat::Identity(4, 4);
  Mat fused = q.materialize_weighted(bound, Tensor::from_matrix(pts),
                                     Tensor::from_vector(wv)).mat();
  EXPECT_TRUE(fused.isApprox(by_hand, 1e-10));
}

TEST(NoiseModel, PdOverRandomInputs) {
  Store store;
  df::Rng rng(21);
  auto q = df::make_hetero_noise(store, "q", 4, 4, CovShape::kFull, 5.0, 1e-3, rng);
  df::he_uniform_init(store, q.net.back().weights, 32, rng);
  auto bound = store.bind(nullptr);
  df::Rng xr(22);
  for (int trial = 0; trial < 10000; ++trial) {
    Vec x(4);
    for (int j = 0; j < 4; ++j) x[j] = 20.0 * xr.normal();
    Tensor cov = q.materialize(bound, Tensor::from_vector(x));
    const Mat m = cov.mat();
    EXPECT_TRUE(m.isApprox(m.transpose(), 1e-12));
    for (int i = 0; i < 4; ++i) EXPECT_GE(m(i, i), 1e-3);
    EXPECT_NO_THROW(df::cholesky(cov));
  }
}

TEST(SensorNet, ShapesAndRInitTarget) {
  Store store;
  df::Rng rng(23);
  df::SensorConfig<double> cfg;
  cfg.image_h = cfg.image_w = 32;
  cfg.hetero_r = true;
  cfg.r_target = 900.0;
  auto sensor = df::make_sensor(store, cfg, rng);
  auto bound = store.bind(nullptr);

  df::Rng ir(24);
  double diag_sum = 0;
  const int trials = 20;
  for (int t = 0; t < trials; ++t) {
    Vec img(32 * 32 * 3);
    for (int i = 0; i < img.size(); ++i) img[i] = ir.uniform();
    auto out = sensor.forward(bound, Tensor::constant({32, 32, 3}, std::move(img)));
    EXPECT_EQ(out.z.shape(), (Shape{2}));
    EXPECT_EQ(out.encoding.shape(), (Shape{32}));
    Mat r = sensor.observation_noise(bound, out.encoding).mat();
    diag_sum += r.diagonal().mean();
  }
  // bias initialization contract: mean diag within 1% of the target
  EXPECT_NEAR(diag_sum / trials, 900.0, 9.0);
}

TEST(LikelihoodNet, PositivityAndPermanence) {
  Store store;
  df::Rng rng(25);
  auto lik = df::make_likelihood(store, 32, 2, rng);
  auto bound = store.bind(nullptr);
  df::Rng xr(26);
  Vec enc(32);
  for (int i = 0; i < 32; ++i) enc[i] = xr.normal();

  // identical particles -> identical likelihoods
  Mat same(4, 2);
  same << 3, -1, 3, -1, 3, -1, 3, -1;
  Vec vals = lik.forward(bound, Tensor::from_vector(enc), Tensor::from_matrix(same)).vec();
  for (int i = 1; i < 4; ++i) EXPECT_DOUBLE_EQ(vals[i], vals[0]);

  // positivity over random weights/inputs
  for (int trial = 0; trial < 200; ++trial) {
    Mat obs(50, 2);
    for (int i = 0; i < obs.size(); ++i) obs.data()[i] = 30.0 * xr.normal();
    Vec v = lik.forward(bound, Tensor::from_vector(enc), Tensor::from_matrix(obs)).vec();
    EXPECT_TRUE((v.array() > 0).all());
  }
}
