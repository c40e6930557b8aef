#pragma once

#include <functional>
#include <limits>
#include <memory>
#include <vector>

#include "df/ops.hpp"
#include "df/tensor.hpp"

namespace df {

// Result of a reverse sweep: gradient of the loss w.r.t. every taped
// tensor. Untouched leaves read as zeros.
template <typename S>
class Gradients {
 public:
  Gradients(const Tape<S>* tape, typename Tape<S>::Grads grads)
      : tape_(tape), grads_(std::move(grads)) {}

  VecX<S> at(const Tensor<S>& t) const {
    if (!t.taped() || t.tape() != tape_)
      throw Error("gradients: tensor does not belong to this tape");
    if (t.node() >= int(grads_.size()) || grads_[t.node()].size() == 0)
      return VecX<S>::Zero(t.size());
    return grads_[t.node()];
  }

  Tensor<S> tensor_at(const Tensor<S>& t) const {
    return Tensor<S>::constant(t.shape(), at(t));
  }

 private:
  const Tape<S>* tape_;
  typename Tape<S>::Grads grads_;
};

// Reverse pass from a taped scalar loss.
template <typename S>
Gradients<S> backward(const Tape<S>& tape, const Tensor<S>& loss) {
  if (!loss.taped() || loss.tape() != &tape)
    throw Error("backward: loss is not recorded on this tape");
  if (loss.size() != 1)
    throw ShapeError("backward: loss must be a scalar, got " +
                     shape_str(loss.shape()));
  return Gradients<S>(&tape, tape.sweep(loss.node(), VecX<S>::Ones(1)));
}

// Dense Jacobian of a vector function, one reverse sweep per output row.
template <typename S>
MatX<S> jacobian(const std::function<Tensor<S>(Tape<S>&, const Tensor<S>&)>& f,
                 const Tensor<S>& x) {
  Tape<S> tape;
  Tensor<S> xl = tape.leaf(x.shape(), x.data());
  Tensor<S> y = f(tape, xl);
  const int m = int(y.size()), n = int(x.size());
  MatX<S> jac = MatX<S>::Zero(m, n);
  if (!y.taped()) return jac;
  for (int i = 0; i < m; ++i) {
    VecX<S> seed = VecX<S>::Zero(m);
    seed[i] = S(1);
    auto grads = y.tape()->sweep(y.node(), seed);
    if (grads[xl.node()].size() != 0) jac.row(i) = grads[xl.node()].transpose();
  }
  if (!jac.allFinite()) throw NumericError("jacobian: non-finite entries");
  return jac;
}

template <typename S>
struct GradCheckReport {
  S max_rel_error = 0;
  S max_abs_error = 0;
  bool pass = true;
  int worst_param = -1;
  int worst_index = -1;
};

// A parameter buffer inspected by gradient checking. The storage is shared
// with whatever built the loss, so finite-difference probes mutate it in
// place and restore it afterwards.
template <typename S>
struct CheckedParam {
  Shape shape;
  std::shared_ptr<VecX<S>> values;
};

// Compares reverse-mode gradients against central finite differences for a
// scalar loss over several parameter buffers. Relative error uses
// max(|analytic|, |numeric|, 1e-8) as denominator.
template <typename S>
GradCheckReport<S> gradient_check_params(
    const std::vector<CheckedParam<S>>& params,
    const std::function<Tensor<S>(Tape<S>&, const std::vector<Tensor<S>>&)>&
        make_loss,
    S step, S tol) {
  auto build = [&]() {
    auto tape = std::make_unique<Tape<S>>();
    std::vector<Tensor<S>> leaves;
    leaves.reserve(params.size());
    for (const auto& p : params) leaves.push_back(tape->leaf(p.shape, p.values));
    Tensor<S> loss = make_loss(*tape, leaves);
    return std::make_pair(std::move(tape), std::move(loss));
  };

  auto [tape, loss] = build();
  if (loss.size() != 1) throw ShapeError("gradient_check: loss must be scalar");
  // Leaves occupy node ids 0..n-1 in creation order.
  std::vector<VecX<S>> analytic(params.size());
  if (loss.taped()) {
    auto raw = tape->sweep(loss.node(), VecX<S>::Ones(1));
    for (std::size_t i = 0; i < params.size(); ++i)
      analytic[i] = raw[int(i)].size() != 0
                        ? raw[int(i)]
                        : VecX<S>::Zero(params[i].values->size());
  } else {
    for (std::size_t i = 0; i < params.size(); ++i)
      analytic[i] = VecX<S>::Zero(params[i].values->size());
  }

  GradCheckReport<S> report;
  // Central differences carry cancellation noise of order eps*|f|/step, so
  // disagreement below that bound is unmeasurable; the relative error is
  // taken on the remainder. Significant gradients are unaffected.
  const S f0 = std::abs(loss.scalar_value());
  const S atol =
      S(20) * std::numeric_limits<S>::epsilon() * std::max(S(1), f0) / step;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    VecX<S>& v = *params[pi].values;
    for (int i = 0; i < v.size(); ++i) {
      const S saved = v[i];
      v[i] = saved + step;
      const S fp = build().second.scalar_value();
      v[i] = saved - step;
      const S fm = build().second.scalar_value();
      v[i] = saved;
      const S numeric = (fp - fm) / (S(2) * step);
      const S a = analytic[pi][i];
      const S abs_err = std::abs(a - numeric);
      const S denom = std::max({std::abs(a), std::abs(numeric), S(1e-8)});
      const S rel = abs_err <= atol ? S(0) : (abs_err - atol) / denom;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = int(pi);
        report.worst_index = i;
      }
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
    }
  }
  report.pass = report.max_rel_error < tol;
  return report;
}

// Single-input convenience: checks d f / d x for a scalar-valued f.
template <typename S>
GradCheckReport<S> gradient_check(
    const std::function<Tensor<S>(Tape<S>&, const Tensor<S>&)>& f,
    const Tensor<S>& x, S step, S tol) {
  auto values = std::make_shared<VecX<S>>(x.values());
  std::vector<CheckedParam<S>> params{{x.shape(), values}};
  return gradient_check_params<S>(
      params,
      [&f](Tape<S>& tape, const std::vector<Tensor<S>>& leaves) {
        return f(tape, leaves[0]);
      },
      step, tol);
}

}  // namespace df
