#pragma once

#include <functional>
#include <string>
#include <vector>

#include "df/autodiff.hpp"
#include "df/filters.hpp"
#include "df/harness.hpp"

// Autodiff verification suite: finite-difference checks over every op and
// over full 3-step composed filter losses with all models trainable.
// Runs in double precision.

namespace df {

struct GradcheckEntry {
  std::string name;
  double max_rel_error = 0;
  bool pass = false;
};

struct GradcheckSuiteResult {
  std::vector<GradcheckEntry> entries;
  double max_rel_error = 0;
  bool pass = true;

  void add(const std::string& name, const GradCheckReport<double>& report) {
    entries.push_back(GradcheckEntry{name, double(report.max_rel_error), report.pass});
    max_rel_error = std::max(max_rel_error, double(report.max_rel_error));
    pass = pass && report.pass;
  }
};

namespace detail {

inline Tensor<double> random_tensor64(Shape shape, Rng& rng, double scale = 1.0) {
  VecX<double> v;
  v.resize(numel(shape));
  for (int i = 0; i < v.size(); ++i) v[i] = scale * rng.normal();
  return Tensor<double>::constant(std::move(shape), std::move(v));
}

}  // namespace detail

// Finite-difference sweep over the op set, `trials` random inputs total.
inline void gradcheck_ops(GradcheckSuiteResult& result, double tol, int trials) {
  using T = Tensor<double>;
  using Fn = std::function<T(Tape<double>&, const T&)>;
  struct Case {
    const char* name;
    Shape shape;
    Fn f;
  };
  const MatX<double> eye3 = MatX<double>::Identity(3, 3);
  std::vector<Case> cases = {
      {"add", {2, 3}, [](Tape<double>&, const T& x) { return sum(add(x, square(x))); }},
      {"sub", {4}, [](Tape<double>&, const T& x) { return sum(sub(x, T::scalar(0.3))); }},
      {"mul", {2, 3}, [](Tape<double>&, const T& x) { return sum(mul(x, add_const(x, 2.0))); }},
      {"div", {4}, [](Tape<double>&, const T& x) {
         return sum(div(x, add_const(square(x), 1.5)));
       }},
      {"matmul", {3, 3}, [](Tape<double>&, const T& x) {
         return sum(matmul(x, transpose(x)));
       }},
      {"transpose", {2, 4}, [](Tape<double>&, const T& x) {
         return sum(square(transpose(x)));
       }},
      {"reshape", {2, 6}, [](Tape<double>&, const T& x) {
         return sum(square(reshape(x, {3, 4})));
       }},
      {"concat", {2, 3}, [](Tape<double>&, const T& x) {
         return sum(square(concat(x, scale(x, -2.0), 1)));
       }},
      {"slice", {5, 2}, [](Tape<double>&, const T& x) {
         return sum(square(slice_rows(x, 1, 3)));
       }},
      {"gather", {4, 2}, [](Tape<double>&, const T& x) {
         return sum(square(gather_rows(x, {0, 2, 2, 3})));
       }},
      {"relu", {6}, [](Tape<double>&, const T& x) { return sum(square(relu(x))); }},
      {"exp", {5}, [](Tape<double>&, const T& x) { return sum(exp(scale(x, 0.5))); }},
      {"log", {5}, [](Tape<double>&, const T& x) {
         return sum(log(add_const(square(x), 1.0)));
       }},
      {"sqrt", {5}, [](Tape<double>&, const T& x) {
         return sum(sqrt(add_const(square(x), 0.5)));
       }},
      {"square", {5}, [](Tape<double>&, const T& x) { return sum(square(x)); }},
      {"sign_stop_gradient", {5}, [](Tape<double>&, const T& x) {
         return sum(mul(x, sign(x)));
       }},
      {"sum", {3, 4}, [](Tape<double>&, const T& x) { return sum(square(x)); }},
      {"mean", {3, 4}, [](Tape<double>&, const T& x) { return mean(square(x)); }},
      {"softmax", {6}, [](Tape<double>&, const T& x) {
         return sum(square(softmax(x)));
       }},
      {"cholesky", {3, 3}, [eye3](Tape<double>&, const T& x) {
         return sum(square(cholesky(add(matmul(x, transpose(x)),
                                        T::from_matrix(eye3)))));
       }},
      {"triangular_solve", {3, 3}, [eye3](Tape<double>&, const T& x) {
         T spd = add(matmul(x, transpose(x)), T::from_matrix(eye3));
         T l = cholesky(spd);
         T rhs = sum_axis(x, 1);
         T y = triangular_solve(l, rhs, true, false);
         return sum(square(triangular_solve(l, y, true, true)));
       }},
      {"logdet", {3, 3}, [eye3](Tape<double>&, const T& x) {
         return logdet(add(matmul(x, transpose(x)), T::from_matrix(eye3)));
       }},
      {"conv2d", {5, 5, 2}, [](Tape<double>&, const T& x) {
         Rng krng(99);
         T k = detail::random_tensor64({3, 3, 2, 2}, krng, 0.3);
         return sum(square(conv2d(x, k, 2)));
       }},
  };
  for (int trial = 0; trial < trials; ++trial) {
    const Case& c = cases[std::size_t(trial) % cases.size()];
    Rng rng(4000 + std::uint64_t(trial));
    Tensor<double> x = detail::random_tensor64(c.shape, rng);
    auto report = gradient_check<double>(c.f, x, 1e-5, tol);
    result.add(std::string(c.name) + "#" + std::to_string(trial / cases.size()),
               report);
  }
}

// Gradient of a 3-step composed filter loss w.r.t. every model parameter
// (sensor conv/fc stack, learned process, heteroscedastic noise nets).
inline void gradcheck_composed(GradcheckSuiteResult& result, FilterKind kind,
                               const char* name, double tol) {
  FilterModels<double> m;
  m.state_dim = 4;
  m.obs_dim = 2;
  Rng rng(1234);
  SensorConfig<double> scfg;
  scfg.image_h = scfg.image_w = 8;
  scfg.hetero_r = true;
  scfg.r_target = 25.0;
  m.sensor = make_sensor(m.store, scfg, rng);
  m.process = make_learned_process(m.store, 4, rng);
  m.q_model = make_hetero_noise(m.store, "q", 4, 4, CovShape::kDiagonal, 4.0, 1e-3, rng);
  he_uniform_init(m.store, m.q_model.net.back().weights, 32, rng);
  he_uniform_init(m.store, m.sensor->r_head.weights, 32, rng);

  Rng ir(1235);
  std::vector<StepInput<double>> inputs;
  std::vector<VecX<double>> labels;
  for (int t = 0; t < 3; ++t) {
    StepInput<double> in;
    VecX<double> img;
    img.resize(8 * 8 * 3);
    for (int i = 0; i < img.size(); ++i) img[i] = ir.uniform();
    in.image = Tensor<double>::constant({8, 8, 3}, std::move(img));
    inputs.push_back(std::move(in));
    VecX<double> label(4);
    for (int i = 0; i < 4; ++i) label[i] = 2.0 * ir.normal();
    labels.push_back(label);
  }
  VecX<double> mu0(4);
  for (int i = 0; i < 4; ++i) mu0[i] = ir.normal();
  GaussianBelief<double> init{
      Tensor<double>::constant({4}, mu0),
      Tensor<double>::from_matrix(MatX<double>(4.0 * MatX<double>::Identity(4, 4)))};

  FilterConfig config;
  config.kind = kind;
  std::vector<CheckedParam<double>> params;
  for (int i = 0; i < m.store.size(); ++i)
    params.push_back({m.store.shape(i), m.store.values(i)});
  auto make_loss = [&](Tape<double>& tape,
                       const std::vector<Tensor<double>>& leaves) {
    BoundParams<double> bound = leaves;
    Rng frng(77);
    auto records = run_filter(m, bound, config, init, inputs, 8, frng);
    Tensor<double> loss = Tensor<double>::scalar(0.0);
    for (std::size_t t = 0; t < records.size(); ++t) {
      loss = add(loss, gaussian_nll(Tensor<double>::constant({4}, labels[t]),
                                    *records[t].gauss));
    }
    return scale(loss, 1.0 / 3.0);
  };
  result.add(name, gradient_check_params<double>(params, make_loss, 1e-5, tol));
}

// The full suite: all ops at `tol`, then composed dEKF / dUKF / dMCUKF.
inline GradcheckSuiteResult run_gradcheck_suite(double tol = 1e-4,
                                                int op_trials = 100) {
  GradcheckSuiteResult result;
  gradcheck_ops(result, tol, op_trials);
  gradcheck_composed(result, FilterKind::kEkf, "composed_dekf_3step", tol);
  gradcheck_composed(result, FilterKind::kUkf, "composed_dukf_3step", tol);
  gradcheck_composed(result, FilterKind::kMcukf, "composed_dmcukf_3step", tol);
  return result;
}

}  // namespace df
