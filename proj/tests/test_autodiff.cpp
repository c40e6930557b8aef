#include <cmath>
#include <functional>
#include <vector>

#include <gtest/gtest.h>

#include "df/autodiff.hpp"
#include "df/ops.hpp"
#include "df/rng.hpp"
#include "df/tensor.hpp"

using df::Shape;
using df::Tape;
using Tensor = df::Tensor<double>;
using Vec = df::VecX<double>;
using Mat = df::MatX<double>;

namespace {

Tensor random_tensor(Shape shape, df::Rng& rng, double scale = 1.0) {
  Vec v(df::numel(shape));
  for (int i = 0; i < v.size(); ++i) v[i] = scale * rng.normal();
  return Tensor::constant(std::move(shape), std::move(v));
}

Mat to_mat(const Tensor& t) { return t.mat(); }

}  // namespace

TEST(Forward, MatmulIdentity) {
  Mat a(2, 2);
  a << 1, 2, 3, 4;
  Tensor ta = Tensor::from_matrix(a);
  Tensor id = Tensor::from_matrix(Mat::Identity(2, 2));
  Tensor out = df::matmul(ta, id);
  EXPECT_TRUE(to_mat(out).isApprox(a, 1e-15));
}

TEST(Forward, CholeskyReconstructs) {
  Mat a(2, 2);
  a << 4, 2, 2, 5;
  Tensor l = df::cholesky(Tensor::from_matrix(a));
  Mat lm = to_mat(l);
  Mat expect(2, 2);
  expect << 2, 0, 1, 2;
  EXPECT_TRUE(lm.isApprox(expect, 1e-12));
  EXPECT_TRUE((lm * lm.transpose()).isApprox(a, 1e-12));
}

TEST(Forward, LogdetBruteForce) {
  Mat a(2, 2);
  a << 4, 2, 2, 5;
  // det = 4*5 - 2*2 = 16
  Tensor ld = df::logdet(Tensor::from_matrix(a));
  EXPECT_NEAR(ld.scalar_value(), std::log(16.0), 1e-12);
}

TEST(Forward, CholeskyNonPdReportsMinor) {
  Mat a(3, 3);
  a << 1, 0, 0, 0, -1, 0, 0, 0, 1;
  try {
    df::cholesky(Tensor::from_matrix(a));
    FAIL() << "expected NumericError";
  } catch (const df::NumericError& e) {
    EXPECT_EQ(e.index, 2);
  }
}

TEST(Forward, SignAtZeroAndGradientBlocking) {
  Tensor v = Tensor::from_vector(Eigen::Vector3d(-2.0, 0.0, 3.5));
  Tensor s = df::sign(v);
  EXPECT_EQ(s.values()[0], -1.0);
  EXPECT_EQ(s.values()[1], 0.0);
  EXPECT_EQ(s.values()[2], 1.0);
  Tape<double> tape;
  Tensor leaf = tape.leaf(v);
  EXPECT_FALSE(df::sign(leaf).taped());
}

TEST(Forward, ShapeMismatchThrows) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 3});
  EXPECT_THROW(df::add(a, b), df::ShapeError);
  EXPECT_THROW(df::matmul(a, a), df::ShapeError);
}

TEST(Backward, SumGivesOnes) {
  Tape<double> tape;
  df::Rng rng(7);
  Tensor x = tape.leaf(random_tensor({3, 4}, rng));
  Tensor loss = df::sum(x);
  auto grads = df::backward(tape, loss);
  EXPECT_TRUE(grads.at(x).isApprox(Vec::Ones(12)));
}

TEST(Backward, ProductRule) {
  Tape<double> tape;
  Tensor x = tape.leaf(Tensor::scalar(3.0));
  Tensor y = tape.leaf(Tensor::scalar(5.0));
  Tensor loss = df::mul(x, y);
  auto grads = df::backward(tape, loss);
  EXPECT_DOUBLE_EQ(grads.at(x)[0], 5.0);
  EXPECT_DOUBLE_EQ(grads.at(y)[0], 3.0);
}

TEST(Backward, LogdetGradientIsSymmetrizedInverse) {
  Mat sigma(2, 2);
  sigma << 4, 2, 2, 5;
  Tape<double> tape;
  Tensor s = tape.leaf(Tensor::from_matrix(sigma));
  auto grads = df::backward(tape, df::logdet(s));
  Mat g = Eigen::Map<const Mat>(grads.at(s).data(), 2, 2);
  Mat expect = sigma.inverse();
  EXPECT_TRUE(g.isApprox(expect, 1e-10));
}

TEST(Backward, NonScalarLossRejected) {
  Tape<double> tape;
  Tensor x = tape.leaf(Tensor::zeros({3}));
  EXPECT_THROW(df::backward(tape, df::relu(x)), df::ShapeError);
}

TEST(Backward, UntouchedLeafIsZero) {
  Tape<double> tape;
  Tensor x = tape.leaf(Tensor::scalar(1.0));
  Tensor y = tape.leaf(Tensor::scalar(2.0));
  auto grads = df::backward(tape, df::square(x));
  EXPECT_EQ(grads.at(y)[0], 0.0);
}

TEST(Jacobian, LinearMap) {
  df::Rng rng(3);
  Mat a = to_mat(random_tensor({3, 4}, rng));
  Tensor x = random_tensor({4}, rng);
  Mat jac = df::jacobian<double>(
      [&a](Tape<double>& tape, const Tensor& xt) {
        return df::matmul(Tensor::from_matrix(a), xt);
      },
      x);
  EXPECT_TRUE(jac.isApprox(a, 1e-12));
}

TEST(Jacobian, Identity) {
  df::Rng rng(4);
  Tensor x = random_tensor({5}, rng);
  Mat jac = df::jacobian<double>(
      [](Tape<double>&, const Tensor& xt) { return xt; }, x);
  EXPECT_TRUE(jac.isApprox(Mat::Identity(5, 5), 1e-15));
}

TEST(GradCheck, ConstantFunction) {
  df::Rng rng(5);
  Tensor x = random_tensor({4}, rng);
  auto report = df::gradient_check<double>(
      [](Tape<double>&, const Tensor&) { return Tensor::scalar(2.5); }, x,
      1e-5, 1e-4);
  EXPECT_TRUE(report.pass);
  EXPECT_EQ(report.max_rel_error, 0.0);
}

// Chain composition: tape gradient of f(g(x)) equals J_g^T grad_f.
TEST(Backward, ChainComposition) {
  df::Rng rng(11);
  Mat a = to_mat(random_tensor({3, 3}, rng));
  Tensor x = random_tensor({3}, rng);

  auto g = [&a](Tape<double>& tape, const Tensor& xt) {
    return df::relu(df::matmul(Tensor::from_matrix(a), xt));
  };
  // f = sum of squares
  Tape<double> tape;
  Tensor xl = tape.leaf(x);
  Tensor gx = g(tape, xl);
  Tensor loss = df::sum_squares(gx);
  auto grads = df::backward(tape, loss);
  Vec tape_grad = grads.at(xl);

  Mat jg = df::jacobian<double>(g, x);
  Vec fx = gx.values();
  Vec grad_f = 2.0 * fx;
  Vec expect = jg.transpose() * grad_f;
  EXPECT_LT((tape_grad - expect).norm(), 1e-10);
}

TEST(Backward, DeterministicReplay) {
  df::Rng rng(13);
  Tensor x0 = random_tensor({4, 4}, rng);
  auto run = [&x0]() {
    Tape<double> tape;
    Tensor x = tape.leaf(x0);
    Tensor sym = df::add(df::matmul(x, df::transpose(x)),
                         Tensor::from_matrix(Mat::Identity(4, 4)));
    Tensor loss = df::add(df::logdet(sym), df::sum(df::softmax(df::sum_axis(x, 0))));
    auto grads = df::backward(tape, loss);
    return std::make_pair(loss.scalar_value(), grads.at(x));
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  EXPECT_EQ(l1, l2);
  for (int i = 0; i < g1.size(); ++i) EXPECT_EQ(g1[i], g2[i]) << i;
}

// ---------------------------------------------------------------------------
// Finite-difference sweep over the whole op set, 100 random inputs.

namespace {

using LossFn = std::function<Tensor(Tape<double>&, const Tensor&)>;

struct OpCase {
  const char* name;
  Shape shape;
  LossFn f;
};

std::vector<OpCase> op_cases() {
  std::vector<OpCase> cases;
  auto mat3 = Shape{3, 3};
  auto vec4 = Shape{4};

  cases.push_back({"add", {2, 3}, [](Tape<double>& t, const Tensor& x) {
                     return df::sum(df::add(x, df::square(x)));
                   }});
  cases.push_back({"sub_scalar_bcast", {4}, [](Tape<double>& t, const Tensor& x) {
                     return df::sum(df::sub(x, Tensor::scalar(0.3)));
                   }});
  cases.push_back({"mul", {2, 3}, [](Tape<double>& t, const Tensor& x) {
                     return df::sum(df::mul(x, df::add_const(x, 2.0)));
                   }});
  cases.push_back({"div", {4}, [](Tape<double>& t, const Tensor& x) {
                     Tensor denom = df::add_const(df::square(x), 1.5);
                     return df::sum(df::div(x, denom));
                   }});
  cases.push_back({"matmul", {3, 3}, [](Tape<double>& t, const Tensor& x) {
                     return df::sum(df::matmul(x, df::transpose(x)));
                   }});
  cases.push_back({"matvec", {3, 3}, [](Tape<double>& t, const Tensor& x) {
                     Tensor v = Tensor::from_vector(Eigen::Vector3d(0.5, -1.0, 2.0));
                     return df::sum(df::square(df::matmul(x, v)));
                   }});
  cases.push_back({"transpose", {2, 4}, [](Tape<double>& t, const Tensor& x) {
                     return df::sum(df::square(df::transpose(x)));
                   }});
  cases.push_back({"reshape", {2, 6}, [](Tape<double>& t, const Tensor& x) {
                     return df::sum(df::square(df::reshape(x, {3, 4})));
                   }});
  cases.push_back({"concat0", {2, 3}, [](Tape<double>& t, const Tensor& x) {
                     Tensor c = df::concat(x, df::square(x), 0);
                     return df::sum(df::square(c));
                   }});
  cases.push_back({"concat1", {2, 3}, [](Tape<double>& t, const Tensor& x) {
                     Tensor c = df::concat(x, df::scale(x, -2.0), 1);
                     return df::sum(df::square(c));
                   }});
  cases.push_back({"slice_rows", {5, 2}, [](Tape<double>& t, const Tensor& x) {
                     return df::sum(df::square(df::slice_rows(x, 1, 3)));
                   }});
  cases.push_back({"block", {4, 4}, [](Tape<double>& t, const Tensor& x) {
                     return df::sum(df::square(df::block(x, 1, 1, 2, 3)));
                   }});
  cases.push_back({"gather_rows", {4, 2}, [](Tape<double>& t, const Tensor& x) {
                     return df::sum(df::square(df::gather_rows(x, {0, 2, 2, 3})));
                   }});
  cases.push_back({"relu", {6}, [](Tape<double>& t, const Tensor& x) {
                     return df::sum(df::square(df::relu(x)));
                   }});
  cases.push_back({"exp", {5}, [](Tape<double>& t, const Tensor& x) {
                     return df::sum(df::exp(df::scale(x, 0.5)));
                   }});
  cases.push_back({"log", {5}, [](Tape<double>& t, const Tensor& x) {
                     return df::sum(df::log(df::add_const(df::square(x), 1.0)));
                   }});
  cases.push_back({"sqrt", {5}, [](Tape<double>& t, const Tensor& x) {
                     return df::sum(df::sqrt(df::add_const(df::square(x), 0.5)));
                   }});
  cases.push_back({"square", {5}, [](Tape<double>& t, const Tensor& x) {
                     return df::sum(df::square(x));
                   }});
  cases.push_back({"sign_stop_grad", {5}, [](Tape<double>& t, const Tensor& x) {
                     // |x| built as x * sgn(x); derivative sgn(x) a.e.
                     return df::sum(df::mul(x, df::sign(x)));
                   }});
  cases.push_back({"mean", {3, 4}, [](Tape<double>& t, const Tensor& x) {
                     return df::mean(df::square(x));
                   }});
  cases.push_back({"sum_axis0", {3, 4}, [](Tape<double>& t, const Tensor& x) {
                     return df::sum(df::square(df::sum_axis(x, 0)));
                   }});
  cases.push_back({"sum_axis1", {3, 4}, [](Tape<double>& t, const Tensor& x) {
                     return df::sum(df::square(df::sum_axis(x, 1)));
                   }});
  cases.push_back({"softmax", {6}, [](Tape<double>& t, const Tensor& x) {
                     Tensor s = df::softmax(x);
                     Tensor w = Tensor::from_vector(
                         (Eigen::VectorXd(6) << 1, -2, 0.5, 3, -1, 2).finished());
                     return df::sum(df::mul(s, w));
                   }});
  cases.push_back({"logsumexp", {6}, [](Tape<double>& t, const Tensor& x) {
                     return df::logsumexp(df::scale(x, 2.0));
                   }});
  cases.push_back({"cholesky", mat3, [](Tape<double>& t, const Tensor& x) {
                     Tensor spd = df::add(df::matmul(x, df::transpose(x)),
                                          Tensor::from_matrix(Mat::Identity(3, 3)));
                     return df::sum(df::square(df::cholesky(spd)));
                   }});
  cases.push_back({"logdet", mat3, [](Tape<double>& t, const Tensor& x) {
                     Tensor spd = df::add(df::matmul(x, df::transpose(x)),
                                          Tensor::from_matrix(Mat::Identity(3, 3)));
                     return df::logdet(spd);
                   }});
  cases.push_back({"tri_solve_lower", mat3, [](Tape<double>& t, const Tensor& x) {
                     Tensor spd = df::add(df::matmul(x, df::transpose(x)),
                                          Tensor::from_matrix(Mat::Identity(3, 3)));
                     Tensor l = df::cholesky(spd);
                     Tensor b = df::sum_axis(x, 1);
                     return df::sum(df::square(df::triangular_solve(l, b, true, false)));
                   }});
  cases.push_back({"tri_solve_transposed", mat3, [](Tape<double>& t, const Tensor& x) {
                     Tensor spd = df::add(df::matmul(x, df::transpose(x)),
                                          Tensor::from_matrix(Mat::Identity(3, 3)));
                     Tensor l = df::cholesky(spd);
                     Tensor b = df::sum_axis(x, 1);
                     return df::sum(df::square(df::triangular_solve(l, b, true, true)));
                   }});
  cases.push_back({"scale_rows", {4, 3}, [](Tape<double>& t, const Tensor& x) {
                     Tensor w = df::softmax(df::sum_axis(x, 1));
                     return df::sum(df::square(df::scale_rows(x, w)));
                   }});
  cases.push_back({"add_rowvec", {4, 3}, [](Tape<double>& t, const Tensor& x) {
                     Tensor v = df::sum_axis(x, 0);
                     return df::sum(df::square(df::add_rowvec(x, df::scale(v, 0.5))));
                   }});
  cases.push_back({"tile_rows", vec4, [](Tape<double>& t, const Tensor& x) {
                     return df::sum(df::square(df::tile_rows(x, 3)));
                   }});
  cases.push_back({"diag_matrix", vec4, [](Tape<double>& t, const Tensor& x) {
                     Tensor d = df::diag_matrix(df::add_const(df::square(x), 0.5));
                     return df::logdet(d);
                   }});
  cases.push_back({"conv2d", {5, 5, 2}, [](Tape<double>& t, const Tensor& x) {
                     df::Rng krng(99);
                     Vec kv(3 * 3 * 2 * 2);
                     for (int i = 0; i < kv.size(); ++i) kv[i] = 0.3 * krng.normal();
                     Tensor k = Tensor::constant({3, 3, 2, 2}, std::move(kv));
                     return df::sum(df::square(df::conv2d(x, k, 2)));
                   }});
  cases.push_back({"conv2d_kernel_grad", {3, 3, 1, 2}, [](Tape<double>& t, const Tensor& k) {
                     df::Rng xrng(98);
                     Vec xv(6 * 6 * 1);
                     for (int i = 0; i < xv.size(); ++i) xv[i] = xrng.normal();
                     Tensor x = Tensor::constant({6, 6, 1}, std::move(xv));
                     return df::sum(df::square(df::conv2d(x, k, 2)));
                   }});
  return cases;
}

}  // namespace

TEST(GradCheck, AllOpsHundredRandomInputs) {
  auto cases = op_cases();
  const int total = 100;
  for (int trial = 0; trial < total; ++trial) {
    const auto& c = cases[trial % cases.size()];
    df::Rng rng(1000 + trial);
    Tensor x = random_tensor(c.shape, rng);
    auto report = df::gradient_check<double>(c.f, x, 1e-5, 1e-4);
    EXPECT_TRUE(report.pass) << c.name << " trial " << trial
                             << " max rel err " << report.max_rel_error;
  }
}

TEST(Conv, OneByOneKernelIsIdentity) {
  df::Rng rng(21);
  Tensor x = random_tensor({4, 4, 3}, rng);
  Vec kv = Vec::Zero(1 * 1 * 3 * 3);
  // kernel(0,0,ci,co) = 1 when ci == co
  for (int c = 0; c < 3; ++c) kv[c * 3 + c] = 1.0;
  Tensor k = Tensor::constant({1, 1, 3, 3}, std::move(kv));
  Tensor y = df::conv2d(x, k, 1);
  EXPECT_EQ(y.shape(), (Shape{4, 4, 3}));
  EXPECT_TRUE(y.values().isApprox(x.values(), 1e-15));
}

TEST(Conv, AllOnesKernelSumsNeighborhood) {
  const double c = 0.7;
  Tensor x = Tensor::constant({5, 5, 1}, Vec::Constant(25, c));
  Tensor k = Tensor::constant({3, 3, 1, 1}, Vec::Ones(9));
  Tensor y = df::conv2d(x, k, 1);
  // interior pixel: full 3x3 neighborhood
  EXPECT_NEAR(y.values()[2 * 5 + 2], 9 * c, 1e-12);
  // corner pixel under SAME padding sees only 4 taps
  EXPECT_NEAR(y.values()[0], 4 * c, 1e-12);
}

TEST(Conv, StridedShapes) {
  Tensor x = Tensor::zeros({100, 100, 3});
  Tensor k1 = Tensor::zeros({9, 9, 3, 4});
  Tensor y1 = df::conv2d(x, k1, 2);
  EXPECT_EQ(y1.shape(), (Shape{50, 50, 4}));
  Tensor k2 = Tensor::zeros({9, 9, 4, 8});
  Tensor y2 = df::conv2d(y1, k2, 2);
  EXPECT_EQ(y2.shape(), (Shape{25, 25, 8}));
}
