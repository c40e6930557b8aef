#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "df/tensor.hpp"

// Differentiable operations over tensors. Values are computed eagerly; if
// any operand is taped the result is recorded with its local derivative.
// Elementwise ops accept equal shapes or a single-element operand
// (broadcast). Matrix ops accept rank 2, with rank-1 operands promoted to
// a row (left side) or column (right side) where noted.

namespace df {

namespace detail {

template <typename S>
Eigen::Map<const MatX<S>> as_mat(const VecX<S>& flat, int r, int c) {
  return Eigen::Map<const MatX<S>>(flat.data(), r, c);
}

template <typename S>
VecX<S> flatten(const MatX<S>& m) {
  return Eigen::Map<const VecX<S>>(m.data(), m.size());
}

inline void require_rank12(const Shape& s, const char* op) {
  check_shape(s.size() >= 1 && s.size() <= 2,
              std::string(op) + ": rank must be 1 or 2, got " + shape_str(s));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename S, typename Fwd, typename Bwd>
Tensor<S> elementwise_binary(const Tensor<S>& a, const Tensor<S>& b,
                             const char* name, Fwd fwd, Bwd bwd) {
  const bool a_scalar = a.size() == 1, b_scalar = b.size() == 1;
  check_shape(a.shape() == b.shape() || a_scalar || b_scalar,
              std::string(name) + ": shape mismatch " + shape_str(a.shape()) +
                  " vs " + shape_str(b.shape()));
  const Shape out_shape = a_scalar && !b_scalar ? b.shape() : a.shape();
  VecX<S> out = fwd(a.values(), b.values(), a_scalar, b_scalar);
  Tape<S>* tape = common_tape<S>({&a, &b});
  if (!tape) return Tensor<S>::constant(out_shape, std::move(out));
  const int an = a.node(), bn = b.node();
  auto ad = a.data();
  auto bd = b.data();
  return tape->record(
      out_shape, std::move(out),
      [an, bn, ad, bd, a_scalar, b_scalar, bwd](const VecX<S>& g,
                                                typename Tape<S>::Grads& gr) {
        bwd(g, *ad, *bd, a_scalar, b_scalar, an, bn, gr);
      });
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return elementwise_binary<S>(
      a, b, "add",
      [](const VecX<S>& av, const VecX<S>& bv, bool as, bool bs) -> VecX<S> {
        if (as && !bs) return (bv.array() + av[0]).matrix();
        if (bs && !as) return (av.array() + bv[0]).matrix();
        return av + bv;
      },
      [](const VecX<S>& g, const VecX<S>&, const VecX<S>&, bool as, bool bs,
         int an, int bn, typename Tape<S>::Grads& gr) {
        if (an >= 0) {
          if (as && g.size() > 1)
            acc_grad<S>(gr, an, VecX<S>::Constant(1, g.sum()));
          else
            acc_grad<S>(gr, an, g);
        }
        if (bn >= 0) {
          if (bs && g.size() > 1)
            acc_grad<S>(gr, bn, VecX<S>::Constant(1, g.sum()));
          else
            acc_grad<S>(gr, bn, g);
        }
      });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return elementwise_binary<S>(
      a, b, "sub",
      [](const VecX<S>& av, const VecX<S>& bv, bool as, bool bs) -> VecX<S> {
        if (as && !bs) return (av[0] - bv.array()).matrix();
        if (bs && !as) return (av.array() - bv[0]).matrix();
        return av - bv;
      },
      [](const VecX<S>& g, const VecX<S>&, const VecX<S>&, bool as, bool bs,
         int an, int bn, typename Tape<S>::Grads& gr) {
        if (an >= 0) {
          if (as && g.size() > 1)
            acc_grad<S>(gr, an, VecX<S>::Constant(1, g.sum()));
          else
            acc_grad<S>(gr, an, g);
        }
        if (bn >= 0) {
          if (bs && g.size() > 1)
            acc_grad<S>(gr, bn, VecX<S>::Constant(1, -g.sum()));
          else
            acc_grad<S>(gr, bn, VecX<S>(-g));
        }
      });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return elementwise_binary<S>(
      a, b, "mul",
      [](const VecX<S>& av, const VecX<S>& bv, bool as, bool bs) -> VecX<S> {
        if (as && !bs) return bv * av[0];
        if (bs && !as) return av * bv[0];
        return (av.array() * bv.array()).matrix();
      },
      [](const VecX<S>& g, const VecX<S>& av, const VecX<S>& bv, bool as,
         bool bs, int an, int bn, typename Tape<S>::Grads& gr) {
        if (an >= 0) {
          if (as && g.size() > 1)
            acc_grad<S>(gr, an, VecX<S>::Constant(1, g.dot(bv)));
          else if (bs)
            acc_grad<S>(gr, an, VecX<S>(g * bv[0]));
          else
            acc_grad<S>(gr, an, VecX<S>((g.array() * bv.array()).matrix()));
        }
        if (bn >= 0) {
          if (bs && g.size() > 1)
            acc_grad<S>(gr, bn, VecX<S>::Constant(1, g.dot(av)));
          else if (as)
            acc_grad<S>(gr, bn, VecX<S>(g * av[0]));
          else
            acc_grad<S>(gr, bn, VecX<S>((g.array() * av.array()).matrix()));
        }
      });
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return elementwise_binary<S>(
      a, b, "div",
      [](const VecX<S>& av, const VecX<S>& bv, bool as, bool bs) -> VecX<S> {
        if (as && !bs) return (av[0] / bv.array()).matrix();
        if (bs && !as) return av / bv[0];
        return (av.array() / bv.array()).matrix();
      },
      [](const VecX<S>& g, const VecX<S>& av, const VecX<S>& bv, bool as,
         bool bs, int an, int bn, typename Tape<S>::Grads& gr) {
        if (an >= 0) {
          if (as && g.size() > 1)
            acc_grad<S>(gr, an,
                        VecX<S>::Constant(1, (g.array() / bv.array()).sum()));
          else if (bs)
            acc_grad<S>(gr, an, VecX<S>(g / bv[0]));
          else
            acc_grad<S>(gr, an, VecX<S>((g.array() / bv.array()).matrix()));
        }
        if (bn >= 0) {
          Eigen::Array<S, Eigen::Dynamic, 1> ratio;
          if (as)
            ratio = -g.array() * av[0] / (bv.array() * bv.array());
          else if (bs)
            ratio = -g.array() * av.array() / (bv[0] * bv[0]);
          else
            ratio = -g.array() * av.array() / (bv.array() * bv.array());
          if (bs && g.size() > 1)
            acc_grad<S>(gr, bn, VecX<S>::Constant(1, ratio.sum()));
          else
            acc_grad<S>(gr, bn, VecX<S>(ratio.matrix()));
        }
      });
}

template <typename S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }

// Multiplication / shift by a plain scalar constant.
template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  VecX<S> out = a.values() * c;
  Tape<S>* tape = common_tape<S>({&a});
  if (!tape) return Tensor<S>::constant(a.shape(), std::move(out));
  const int an = a.node();
  return tape->record(a.shape(), std::move(out),
                      [an, c](const VecX<S>& g, typename Tape<S>::Grads& gr) {
                        acc_grad<S>(gr, an, VecX<S>(g * c));
                      });
}

template <typename S>
Tensor<S> operator*(S c, const Tensor<S>& a) { return scale(a, c); }

template <typename S>
Tensor<S> add_const(const Tensor<S>& a, S c) {
  VecX<S> out = (a.values().array() + c).matrix();
  Tape<S>* tape = common_tape<S>({&a});
  if (!tape) return Tensor<S>::constant(a.shape(), std::move(out));
  const int an = a.node();
  return tape->record(a.shape(), std::move(out),
                      [an](const VecX<S>& g, typename Tape<S>::Grads& gr) {
                        acc_grad<S>(gr, an, g);
                      });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) { return scale(a, S(-1)); }

// ---------------------------------------------------------------------------
// Elementwise nonlinearities

template <typename S, typename FwdArr, typename BwdArr>
Tensor<S> elementwise_unary(const Tensor<S>& a, FwdArr fwd, BwdArr bwd) {
  VecX<S> out = fwd(a.values().array()).matrix();
  Tape<S>* tape = common_tape<S>({&a});
  if (!tape) return Tensor<S>::constant(a.shape(), std::move(out));
  const int an = a.node();
  auto ad = a.data();
  auto od = std::make_shared<const VecX<S>>(out);
  Tensor<S> t = tape->record(
      a.shape(), std::move(out),
      [an, ad, od, bwd](const VecX<S>& g, typename Tape<S>::Grads& gr) {
        acc_grad<S>(gr, an, VecX<S>((g.array() * bwd(ad->array(), od->array())).matrix()));
      });
  return t;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  return elementwise_unary<S>(
      a, [](const auto& x) { return x.max(S(0)); },
      [](const auto& x, const auto&) {
        return (x > S(0)).template cast<S>();
      });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  return elementwise_unary<S>(
      a, [](const auto& x) { return x.exp(); },
      [](const auto&, const auto& y) { return y; });
}

template <typename S>
Tensor<S> log(const Tensor<S>& a) {
  return elementwise_unary<S>(
      a, [](const auto& x) { return x.log(); },
      [](const auto& x, const auto&) { return x.inverse(); });
}

template <typename S>
Tensor<S> sqrt(const Tensor<S>& a) {
  return elementwise_unary<S>(
      a, [](const auto& x) { return x.sqrt(); },
      [](const auto&, const auto& y) { return S(0.5) * y.inverse(); });
}

template <typename S>
Tensor<S> square(const Tensor<S>& a) {
  return elementwise_unary<S>(
      a, [](const auto& x) { return x.square(); },
      [](const auto& x, const auto&) { return S(2) * x; });
}

// sign(0) = 0; treated as piecewise constant, so the result never carries
// a tape node and blocks gradient flow.
template <typename S>
Tensor<S> sign(const Tensor<S>& a) {
  VecX<S> out =
      a.values().array().unaryExpr([](S v) {
        return v > S(0) ? S(1) : (v < S(0) ? S(-1) : S(0));
      }).matrix();
  return Tensor<S>::constant(a.shape(), std::move(out));
}

// Copies values off the tape.
template <typename S>
Tensor<S> detach(const Tensor<S>& a) {
  return Tensor<S>::constant(a.shape(), VecX<S>(a.values()));
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  check_shape(numel(shape) == a.size(), "reshape: size mismatch " +
                                            shape_str(a.shape()) + " -> " +
                                            shape_str(shape));
  Tape<S>* tape = common_tape<S>({&a});
  if (!tape) return Tensor<S>::constant(std::move(shape), VecX<S>(a.values()));
  const int an = a.node();
  return tape->record(std::move(shape), VecX<S>(a.values()),
                      [an](const VecX<S>& g, typename Tape<S>::Grads& gr) {
                        acc_grad<S>(gr, an, g);
                      });
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  detail::require_rank12(a.shape(), "transpose");
  const int r = a.rows(), c = a.cols();
  MatX<S> out = a.mat().transpose();
  Tape<S>* tape = common_tape<S>({&a});
  VecX<S> flat = detail::flatten<S>(out);
  if (!tape) return Tensor<S>::constant({c, r}, std::move(flat));
  const int an = a.node();
  return tape->record({c, r}, std::move(flat),
                      [an, r, c](const VecX<S>& g, typename Tape<S>::Grads& gr) {
                        MatX<S> gt = detail::as_mat<S>(g, c, r).transpose();
                        acc_grad<S>(gr, an, detail::flatten<S>(gt));
                      });
}

// Concatenation along rows (axis 0) or columns (axis 1). Rank-1 tensors
// concatenate along axis 0 only.
template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  check_shape(!parts.empty(), "concat: empty input");
  const int rank = parts[0].rank();
  check_shape(axis >= 0 && axis < std::max(rank, 1) + (rank == 2 ? 0 : 0) &&
                  (rank == 2 || axis == 0),
              "concat: bad axis");
  int rows = 0, cols = parts[0].cols();
  for (const auto& p : parts) {
    check_shape(p.rank() == rank, "concat: mixed ranks");
    if (axis == 0) {
      check_shape(p.cols() == cols, "concat: column mismatch");
      rows += p.rows();
    }
  }
  Shape out_shape;
  VecX<S> out;
  std::vector<int> offsets;  // flat offsets (axis 0) or column offsets (axis 1)
  if (axis == 0) {
    out_shape = rank == 1 ? Shape{rows} : Shape{rows, cols};
    out.resize(std::int64_t(rows) * cols);
    int at = 0;
    for (const auto& p : parts) {
      offsets.push_back(at);
      out.segment(at, p.size()) = p.values();
      at += int(p.size());
    }
  } else {
    int total_cols = 0;
    const int r = parts[0].rows();
    for (const auto& p : parts) {
      check_shape(p.rows() == r, "concat: row mismatch");
      total_cols += p.cols();
    }
    out_shape = {r, total_cols};
    MatX<S> m(r, total_cols);
    int at = 0;
    for (const auto& p : parts) {
      offsets.push_back(at);
      m.middleCols(at, p.cols()) = p.mat();
      at += p.cols();
    }
    out = detail::flatten<S>(m);
    cols = total_cols;
    rows = r;
  }
  Tape<S>* tape = nullptr;
  for (const auto& p : parts) {
    if (!p.taped()) continue;
    if (tape && tape != p.tape()) throw Error("concat: operands on different tapes");
    tape = p.tape();
  }
  if (!tape) return Tensor<S>::constant(std::move(out_shape), std::move(out));
  std::vector<int> nodes, sizes, part_cols;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    sizes.push_back(int(p.size()));
    part_cols.push_back(p.cols());
  }
  const int out_rows = rows, out_cols = cols;
  return tape->record(
      std::move(out_shape), std::move(out),
      [axis, nodes, sizes, part_cols, offsets, out_rows,
       out_cols](const VecX<S>& g, typename Tape<S>::Grads& gr) {
        for (std::size_t i = 0; i < nodes.size(); ++i) {
          if (nodes[i] < 0) continue;
          if (axis == 0) {
            acc_grad<S>(gr, nodes[i], VecX<S>(g.segment(offsets[i], sizes[i])));
          } else {
            auto gm = detail::as_mat<S>(g, out_rows, out_cols);
            MatX<S> part = gm.middleCols(offsets[i], part_cols[i]);
            acc_grad<S>(gr, nodes[i], detail::flatten<S>(part));
          }
        }
      });
}

template <typename S>
Tensor<S> concat(const Tensor<S>& a, const Tensor<S>& b, int axis) {
  return concat(std::vector<Tensor<S>>{a, b}, axis);
}

// Contiguous row range.
template <typename S>
Tensor<S> slice_rows(const Tensor<S>& a, int row0, int nrows) {
  detail::require_rank12(a.shape(), "slice_rows");
  const int r = a.rows(), c = a.cols();
  check_shape(row0 >= 0 && nrows >= 0 && row0 + nrows <= r, "slice_rows: range");
  VecX<S> out = a.values().segment(std::int64_t(row0) * c, std::int64_t(nrows) * c);
  Shape shape = a.rank() == 1 ? Shape{nrows} : Shape{nrows, c};
  Tape<S>* tape = common_tape<S>({&a});
  if (!tape) return Tensor<S>::constant(std::move(shape), std::move(out));
  const int an = a.node();
  const std::int64_t total = a.size(), off = std::int64_t(row0) * c,
                     len = std::int64_t(nrows) * c;
  return tape->record(std::move(shape), std::move(out),
                      [an, total, off, len](const VecX<S>& g,
                                            typename Tape<S>::Grads& gr) {
                        VecX<S> full = VecX<S>::Zero(total);
                        full.segment(off, len) = g;
                        acc_grad<S>(gr, an, full);
                      });
}

// Rank-2 sub-block.
template <typename S>
Tensor<S> block(const Tensor<S>& a, int row0, int col0, int nrows, int ncols) {
  check_shape(a.rank() == 2, "block: rank-2 input required");
  const int r = a.rows(), c = a.cols();
  check_shape(row0 >= 0 && col0 >= 0 && row0 + nrows <= r && col0 + ncols <= c,
              "block: range");
  MatX<S> out = a.mat().block(row0, col0, nrows, ncols);
  Tape<S>* tape = common_tape<S>({&a});
  VecX<S> flat = detail::flatten<S>(out);
  if (!tape) return Tensor<S>::constant({nrows, ncols}, std::move(flat));
  const int an = a.node();
  return tape->record(
      {nrows, ncols}, std::move(flat),
      [an, r, c, row0, col0, nrows, ncols](const VecX<S>& g,
                                           typename Tape<S>::Grads& gr) {
        MatX<S> full = MatX<S>::Zero(r, c);
        full.block(row0, col0, nrows, ncols) = detail::as_mat<S>(g, nrows, ncols);
        acc_grad<S>(gr, an, detail::flatten<S>(full));
      });
}

// Row selection with repetition; gradients scatter-add to the source rows.
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& a, const std::vector<int>& idx) {
  detail::require_rank12(a.shape(), "gather_rows");
  const int r = a.rows(), c = a.cols();
  const int n = int(idx.size());
  VecX<S> out(std::int64_t(n) * c);
  for (int i = 0; i < n; ++i) {
    check_shape(idx[i] >= 0 && idx[i] < r, "gather_rows: index out of range");
    out.segment(std::int64_t(i) * c, c) =
        a.values().segment(std::int64_t(idx[i]) * c, c);
  }
  Shape shape = a.rank() == 1 ? Shape{n} : Shape{n, c};
  Tape<S>* tape = common_tape<S>({&a});
  if (!tape) return Tensor<S>::constant(std::move(shape), std::move(out));
  const int an = a.node();
  const std::int64_t total = a.size();
  return tape->record(std::move(shape), std::move(out),
                      [an, idx, c, total](const VecX<S>& g,
                                          typename Tape<S>::Grads& gr) {
                        VecX<S> full = VecX<S>::Zero(total);
                        for (std::size_t i = 0; i < idx.size(); ++i)
                          full.segment(std::int64_t(idx[i]) * c, c) +=
                              g.segment(std::int64_t(i) * c, c);
                        acc_grad<S>(gr, an, full);
                      });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_rank12(a.shape(), "matmul");
  detail::require_rank12(b.shape(), "matmul");
  check_shape(!(a.rank() == 1 && b.rank() == 1),
              "matmul: both operands rank 1; use mul+sum for dot products");
  // Rank-1 left operand acts as a row, rank-1 right operand as a column.
  const int ar = a.rank() == 1 ? 1 : a.shape()[0];
  const int ac = a.rank() == 1 ? a.shape()[0] : a.shape()[1];
  const int br = b.shape()[0];
  const int bc = b.rank() == 1 ? 1 : b.shape()[1];
  check_shape(ac == br, "matmul: inner dimensions " + shape_str(a.shape()) +
                            " x " + shape_str(b.shape()));
  Shape out_shape;
  if (a.rank() == 1) out_shape = {bc};
  else if (b.rank() == 1) out_shape = {ar};
  else out_shape = {ar, bc};
  MatX<S> prod = detail::as_mat<S>(a.values(), ar, ac) *
                 detail::as_mat<S>(b.values(), br, bc);
  VecX<S> out = detail::flatten<S>(prod);
  Tape<S>* tape = common_tape<S>({&a, &b});
  if (!tape) return Tensor<S>::constant(std::move(out_shape), std::move(out));
  const int an = a.node(), bn = b.node();
  auto ad = a.data();
  auto bd = b.data();
  return tape->record(
      std::move(out_shape), std::move(out),
      [an, bn, ad, bd, ar, ac, br, bc](const VecX<S>& g,
                                       typename Tape<S>::Grads& gr) {
        auto G = detail::as_mat<S>(g, ar, bc);
        if (an >= 0) {
          MatX<S> ga = G * detail::as_mat<S>(*bd, br, bc).transpose();
          acc_grad<S>(gr, an, detail::flatten<S>(ga));
        }
        if (bn >= 0) {
          MatX<S> gb = detail::as_mat<S>(*ad, ar, ac).transpose() * G;
          acc_grad<S>(gr, bn, detail::flatten<S>(gb));
        }
      });
}

// diag(v): rank-1 -> diagonal matrix.
template <typename S>
Tensor<S> diag_matrix(const Tensor<S>& v) {
  check_shape(v.rank() == 1, "diag_matrix: rank-1 input required");
  const int n = v.shape()[0];
  MatX<S> m = MatX<S>::Zero(n, n);
  m.diagonal() = v.values();
  VecX<S> out = detail::flatten<S>(m);
  Tape<S>* tape = common_tape<S>({&v});
  if (!tape) return Tensor<S>::constant({n, n}, std::move(out));
  const int vn = v.node();
  return tape->record({n, n}, std::move(out),
                      [vn, n](const VecX<S>& g, typename Tape<S>::Grads& gr) {
                        VecX<S> d(n);
                        for (int i = 0; i < n; ++i) d[i] = g[std::int64_t(i) * n + i];
                        acc_grad<S>(gr, vn, d);
                      });
}

// Row-wise scaling: out(i,:) = m(i,:) * v(i).
template <typename S>
Tensor<S> scale_rows(const Tensor<S>& m, const Tensor<S>& v) {
  check_shape(m.rank() == 2 && v.rank() == 1 && v.shape()[0] == m.shape()[0],
              "scale_rows: need (r,c) and (r)");
  const int r = m.rows(), c = m.cols();
  MatX<S> out = detail::as_mat<S>(m.values(), r, c);
  out.array().colwise() *= v.values().array();
  VecX<S> flat = detail::flatten<S>(out);
  Tape<S>* tape = common_tape<S>({&m, &v});
  if (!tape) return Tensor<S>::constant({r, c}, std::move(flat));
  const int mn = m.node(), vn = v.node();
  auto md = m.data();
  auto vd = v.data();
  return tape->record(
      {r, c}, std::move(flat),
      [mn, vn, md, vd, r, c](const VecX<S>& g, typename Tape<S>::Grads& gr) {
        auto G = detail::as_mat<S>(g, r, c);
        if (mn >= 0) {
          MatX<S> gm = G;
          gm.array().colwise() *= vd->array();
          acc_grad<S>(gr, mn, detail::flatten<S>(gm));
        }
        if (vn >= 0) {
          auto M = detail::as_mat<S>(*md, r, c);
          VecX<S> gv = (G.array() * M.array()).rowwise().sum().matrix();
          acc_grad<S>(gr, vn, gv);
        }
      });
}

// Adds a row vector to every row: out(i,:) = m(i,:) + v.
template <typename S>
Tensor<S> add_rowvec(const Tensor<S>& m, const Tensor<S>& v) {
  check_shape(m.rank() == 2 && v.rank() == 1 && v.shape()[0] == m.shape()[1],
              "add_rowvec: need (r,c) and (c)");
  const int r = m.rows(), c = m.cols();
  MatX<S> out = detail::as_mat<S>(m.values(), r, c);
  out.array().rowwise() += v.values().transpose().array();
  VecX<S> flat = detail::flatten<S>(out);
  Tape<S>* tape = common_tape<S>({&m, &v});
  if (!tape) return Tensor<S>::constant({r, c}, std::move(flat));
  const int mn = m.node(), vn = v.node();
  return tape->record(
      {r, c}, std::move(flat),
      [mn, vn, r, c](const VecX<S>& g, typename Tape<S>::Grads& gr) {
        if (mn >= 0) acc_grad<S>(gr, mn, g);
        if (vn >= 0) {
          VecX<S> gv = detail::as_mat<S>(g, r, c).colwise().sum().transpose();
          acc_grad<S>(gr, vn, gv);
        }
      });
}

// Repeats a row vector n times into an (n, c) matrix.
template <typename S>
Tensor<S> tile_rows(const Tensor<S>& v, int n) {
  check_shape(v.rank() == 1 && n >= 1, "tile_rows: need rank-1 input, n >= 1");
  const int c = v.shape()[0];
  MatX<S> out = v.values().transpose().replicate(n, 1);
  VecX<S> flat = detail::flatten<S>(out);
  Tape<S>* tape = common_tape<S>({&v});
  if (!tape) return Tensor<S>::constant({n, c}, std::move(flat));
  const int vn = v.node();
  return tape->record({n, c}, std::move(flat),
                      [vn, n, c](const VecX<S>& g, typename Tape<S>::Grads& gr) {
                        VecX<S> gv = detail::as_mat<S>(g, n, c).colwise().sum().transpose();
                        acc_grad<S>(gr, vn, gv);
                      });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  VecX<S> out = VecX<S>::Constant(1, a.values().sum());
  Tape<S>* tape = common_tape<S>({&a});
  if (!tape) return Tensor<S>::constant({1}, std::move(out));
  const int an = a.node();
  const std::int64_t n = a.size();
  return tape->record({1}, std::move(out),
                      [an, n](const VecX<S>& g, typename Tape<S>::Grads& gr) {
                        acc_grad<S>(gr, an, VecX<S>::Constant(n, g[0]));
                      });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  return scale(sum(a), S(1) / S(a.size()));
}

// Axis reduction on rank-2 tensors: axis 0 sums rows away (result length
// cols), axis 1 sums columns away (result length rows).
template <typename S>
Tensor<S> sum_axis(const Tensor<S>& a, int axis) {
  check_shape(a.rank() == 2 && (axis == 0 || axis == 1), "sum_axis: rank-2, axis 0/1");
  const int r = a.rows(), c = a.cols();
  auto M = detail::as_mat<S>(a.values(), r, c);
  VecX<S> out = axis == 0 ? VecX<S>(M.colwise().sum().transpose())
                          : VecX<S>(M.rowwise().sum());
  Shape shape = {axis == 0 ? c : r};
  Tape<S>* tape = common_tape<S>({&a});
  if (!tape) return Tensor<S>::constant(std::move(shape), std::move(out));
  const int an = a.node();
  return tape->record(std::move(shape), std::move(out),
                      [an, r, c, axis](const VecX<S>& g,
                                       typename Tape<S>::Grads& gr) {
                        MatX<S> full(r, c);
                        if (axis == 0)
                          full = g.transpose().replicate(r, 1);
                        else
                          full = g.replicate(1, c);
                        acc_grad<S>(gr, an, detail::flatten<S>(full));
                      });
}

// Numerically stable softmax over a rank-1 tensor.
template <typename S>
Tensor<S> softmax(const Tensor<S>& a) {
  check_shape(a.rank() == 1, "softmax: rank-1 input required");
  const S m = a.values().maxCoeff();
  VecX<S> e = (a.values().array() - m).exp().matrix();
  VecX<S> out = e / e.sum();
  Tape<S>* tape = common_tape<S>({&a});
  if (!tape) return Tensor<S>::constant(a.shape(), std::move(out));
  const int an = a.node();
  auto od = std::make_shared<const VecX<S>>(out);
  return tape->record(a.shape(), std::move(out),
                      [an, od](const VecX<S>& g, typename Tape<S>::Grads& gr) {
                        const S inner = g.dot(*od);
                        acc_grad<S>(gr, an,
                                    VecX<S>((od->array() * (g.array() - inner)).matrix()));
                      });
}

// ---------------------------------------------------------------------------
// Matrix factorizations

namespace detail {

// Plain lower Cholesky that reports the order of the failing leading minor
// (1-based, as in LAPACK).
template <typename S>
MatX<S> cholesky_values(const Eigen::Ref<const MatX<S>>& a, const char* who) {
  const int n = int(a.rows());
  if (a.cols() != n) throw ShapeError(std::string(who) + ": square matrix required");
  MatX<S> l = MatX<S>::Zero(n, n);
  for (int j = 0; j < n; ++j) {
    S d = a(j, j);
    for (int k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > S(0)))
      throw NumericError(std::string(who) + ": matrix not positive definite "
                                            "(leading minor of order " +
                             std::to_string(j + 1) + ")",
                         j + 1);
    const S root = std::sqrt(d);
    l(j, j) = root;
    for (int i = j + 1; i < n; ++i) {
      S v = a(i, j);
      for (int k = 0; k < j; ++k) v -= l(i, k) * l(j, k);
      l(i, j) = v / root;
    }
  }
  return l;
}

// Lower triangle mirrored onto the upper one; diagonal kept once.
template <typename S>
MatX<S> copy_lower_to_upper(const MatX<S>& x) {
  MatX<S> out = x.template triangularView<Eigen::Lower>();
  out += MatX<S>(x.template triangularView<Eigen::StrictlyLower>()).transpose();
  return out;
}

}  // namespace detail

// Lower Cholesky factor of a symmetric positive definite matrix (only the
// lower triangle of the input is read). The gradient is the symmetrized
// adjoint, matching differentiation along symmetric perturbations.
template <typename S>
Tensor<S> cholesky(const Tensor<S>& a) {
  check_shape(a.rank() == 2 && a.shape()[0] == a.shape()[1],
              "cholesky: square rank-2 input required");
  const int n = a.shape()[0];
  MatX<S> l = detail::cholesky_values<S>(a.mat(), "cholesky");
  VecX<S> out = detail::flatten<S>(l);
  Tape<S>* tape = common_tape<S>({&a});
  if (!tape) return Tensor<S>::constant({n, n}, std::move(out));
  const int an = a.node();
  auto ld = std::make_shared<const MatX<S>>(l);
  return tape->record(
      {n, n}, std::move(out),
      [an, ld, n](const VecX<S>& g, typename Tape<S>::Grads& gr) {
        const MatX<S>& L = *ld;
        MatX<S> G = detail::as_mat<S>(g, n, n);
        // Abar = 1/2 L^-T (tril(L^T G) + tril(L^T G)^T) L^-1, diagonal once
        MatX<S> P = detail::copy_lower_to_upper<S>(MatX<S>(L.transpose() * G));
        MatX<S> tmp =
            L.transpose().template triangularView<Eigen::Upper>().solve(P);
        MatX<S> m = L.transpose().template triangularView<Eigen::Upper>().solve(
            MatX<S>(tmp.transpose()));
        MatX<S> abar = S(0.25) * (m + m.transpose());
        acc_grad<S>(gr, an, detail::flatten<S>(abar));
      });
}

// Solves op(T) X = B with T triangular; op is identity or transpose.
// `lower` describes T's stored triangle.
template <typename S>
Tensor<S> triangular_solve(const Tensor<S>& t, const Tensor<S>& b, bool lower,
                           bool transposed) {
  check_shape(t.rank() == 2 && t.shape()[0] == t.shape()[1],
              "triangular_solve: square matrix required");
  detail::require_rank12(b.shape(), "triangular_solve");
  const int n = t.shape()[0];
  check_shape(b.rows() == n, "triangular_solve: dimension mismatch");
  const int c = b.cols();
  auto T = detail::as_mat<S>(t.values(), n, n);
  auto B = detail::as_mat<S>(b.values(), n, c);
  MatX<S> x(n, c);
  if (lower) {
    if (transposed)
      x = T.transpose().template triangularView<Eigen::Upper>().solve(B);
    else
      x = T.template triangularView<Eigen::Lower>().solve(B);
  } else {
    if (transposed)
      x = T.transpose().template triangularView<Eigen::Lower>().solve(B);
    else
      x = T.template triangularView<Eigen::Upper>().solve(B);
  }
  if (!x.allFinite())
    throw NumericError("triangular_solve: non-finite solution (singular factor?)");
  VecX<S> out = detail::flatten<S>(x);
  Shape shape = b.rank() == 1 ? Shape{n} : Shape{n, c};
  Tape<S>* tape = common_tape<S>({&t, &b});
  if (!tape) return Tensor<S>::constant(std::move(shape), std::move(out));
  const int tn = t.node(), bn = b.node();
  auto td = t.data();
  auto xd = std::make_shared<const MatX<S>>(x);
  return tape->record(
      std::move(shape), std::move(out),
      [tn, bn, td, xd, n, c, lower, transposed](const VecX<S>& g,
                                                typename Tape<S>::Grads& gr) {
        auto T = detail::as_mat<S>(*td, n, n);
        auto G = detail::as_mat<S>(g, n, c);
        // W = op(T)^-T G  (the gradient w.r.t. B)
        MatX<S> w(n, c);
        if (lower) {
          if (transposed)
            w = T.template triangularView<Eigen::Lower>().solve(G);
          else
            w = T.transpose().template triangularView<Eigen::Upper>().solve(G);
        } else {
          if (transposed)
            w = T.template triangularView<Eigen::Upper>().solve(G);
          else
            w = T.transpose().template triangularView<Eigen::Lower>().solve(G);
        }
        if (bn >= 0) acc_grad<S>(gr, bn, detail::flatten<S>(w));
        if (tn >= 0) {
          MatX<S> opt_bar = -w * xd->transpose();      // d/d op(T)
          MatX<S> t_bar = transposed ? MatX<S>(opt_bar.transpose()) : opt_bar;
          MatX<S> masked =
              lower ? MatX<S>(t_bar.template triangularView<Eigen::Lower>())
                    : MatX<S>(t_bar.template triangularView<Eigen::Upper>());
          acc_grad<S>(gr, tn, detail::flatten<S>(masked));
        }
      });
}

// log det of a symmetric positive definite matrix, via Cholesky. Gradient
// is the (symmetric) inverse.
template <typename S>
Tensor<S> logdet(const Tensor<S>& a) {
  check_shape(a.rank() == 2 && a.shape()[0] == a.shape()[1],
              "logdet: square rank-2 input required");
  const int n = a.shape()[0];
  MatX<S> l = detail::cholesky_values<S>(a.mat(), "logdet");
  S value = 0;
  for (int i = 0; i < n; ++i) value += std::log(l(i, i));
  value *= S(2);
  Tape<S>* tape = common_tape<S>({&a});
  VecX<S> out = VecX<S>::Constant(1, value);
  if (!tape) return Tensor<S>::constant({1}, std::move(out));
  const int an = a.node();
  auto ld = std::make_shared<const MatX<S>>(l);
  return tape->record({1}, std::move(out),
                      [an, ld, n](const VecX<S>& g, typename Tape<S>::Grads& gr) {
                        MatX<S> inv = ld->template triangularView<Eigen::Lower>().solve(
                            MatX<S>::Identity(n, n));
                        MatX<S> ainv = ld->transpose()
                                           .template triangularView<Eigen::Upper>()
                                           .solve(inv);
                        ainv = S(0.5) * (ainv + ainv.transpose()).eval();
                        acc_grad<S>(gr, an, detail::flatten<S>(MatX<S>(g[0] * ainv)));
                      });
}

// ---------------------------------------------------------------------------
// Convolution (channels-last, SAME padding)

namespace detail {

struct ConvPlan {
  int out_h = 0, out_w = 0, patch = 0;
  std::vector<std::int32_t> src;  // (out_h*out_w) x patch source indices, -1 = pad
};

inline std::shared_ptr<const ConvPlan> conv_plan(int h, int w, int cin, int kh,
                                                 int kw, int stride) {
  static std::mutex mu;
  static std::unordered_map<std::uint64_t, std::shared_ptr<const ConvPlan>> cache;
  const std::uint64_t key = (std::uint64_t(h) << 44) ^ (std::uint64_t(w) << 32) ^
                            (std::uint64_t(cin) << 24) ^ (std::uint64_t(kh) << 16) ^
                            (std::uint64_t(kw) << 8) ^ std::uint64_t(stride);
  {
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
  }
  auto plan = std::make_shared<ConvPlan>();
  plan->out_h = (h + stride - 1) / stride;
  plan->out_w = (w + stride - 1) / stride;
  plan->patch = kh * kw * cin;
  const int pad_h = std::max((plan->out_h - 1) * stride + kh - h, 0);
  const int pad_w = std::max((plan->out_w - 1) * stride + kw - w, 0);
  const int ph0 = pad_h / 2, pw0 = pad_w / 2;
  plan->src.resize(std::size_t(plan->out_h) * plan->out_w * plan->patch);
  std::size_t at = 0;
  for (int oh = 0; oh < plan->out_h; ++oh) {
    for (int ow = 0; ow < plan->out_w; ++ow) {
      for (int i = 0; i < kh; ++i) {
        const int ih = oh * stride - ph0 + i;
        for (int j = 0; j < kw; ++j) {
          const int iw = ow * stride - pw0 + j;
          const bool inside = ih >= 0 && ih < h && iw >= 0 && iw < w;
          for (int ci = 0; ci < cin; ++ci)
            plan->src[at++] = inside ? ((ih * w + iw) * cin + ci) : -1;
        }
      }
    }
  }
  std::lock_guard<std::mutex> lock(mu);
  cache.emplace(key, plan);
  return cache[key];
}

template <typename S>
MatX<S> im2col(const VecX<S>& x, const ConvPlan& plan) {
  const int npix = plan.out_h * plan.out_w;
  MatX<S> p(npix, plan.patch);
  const std::int32_t* src = plan.src.data();
  for (int r = 0; r < npix; ++r)
    for (int q = 0; q < plan.patch; ++q) {
      const std::int32_t s = *src++;
      p(r, q) = s >= 0 ? x[s] : S(0);
    }
  return p;
}

}  // namespace detail

// Strided 2-D convolution with SAME padding; input (h, w, cin), kernel
// (kh, kw, cin, cout), output (ceil(h/stride), ceil(w/stride), cout).
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& kernel, int stride) {
  check_shape(x.rank() == 3, "conv2d: input must be (h, w, c)");
  check_shape(kernel.rank() == 4, "conv2d: kernel must be (kh, kw, cin, cout)");
  check_shape(stride >= 1, "conv2d: stride must be >= 1");
  const int h = x.shape()[0], w = x.shape()[1], cin = x.shape()[2];
  const int kh = kernel.shape()[0], kw = kernel.shape()[1];
  check_shape(kernel.shape()[2] == cin, "conv2d: channel mismatch");
  const int cout = kernel.shape()[3];
  auto plan = detail::conv_plan(h, w, cin, kh, kw, stride);
  MatX<S> patches = detail::im2col<S>(x.values(), *plan);
  auto K = detail::as_mat<S>(kernel.values(), plan->patch, cout);
  MatX<S> y = patches * K;
  VecX<S> out = detail::flatten<S>(y);
  Shape out_shape{plan->out_h, plan->out_w, cout};
  Tape<S>* tape = common_tape<S>({&x, &kernel});
  if (!tape) return Tensor<S>::constant(std::move(out_shape), std::move(out));
  const int xn = x.node(), kn = kernel.node();
  auto kd = kernel.data();
  auto pd = std::make_shared<const MatX<S>>(std::move(patches));
  const std::int64_t in_numel = x.size();
  return tape->record(
      std::move(out_shape), std::move(out),
      [xn, kn, kd, pd, plan, cout, in_numel](const VecX<S>& g,
                                             typename Tape<S>::Grads& gr) {
        const int npix = plan->out_h * plan->out_w;
        auto G = detail::as_mat<S>(g, npix, cout);
        if (kn >= 0) {
          MatX<S> gk = pd->transpose() * G;
          acc_grad<S>(gr, kn, detail::flatten<S>(gk));
        }
        if (xn >= 0) {
          auto K = detail::as_mat<S>(*kd, plan->patch, cout);
          MatX<S> gp = G * K.transpose();  // npix x patch
          VecX<S> gx = VecX<S>::Zero(in_numel);
          const std::int32_t* src = plan->src.data();
          for (int r = 0; r < npix; ++r)
            for (int q = 0; q < plan->patch; ++q) {
              const std::int32_t s = *src++;
              if (s >= 0) gx[s] += gp(r, q);
            }
          acc_grad<S>(gr, xn, gx);
        }
      });
}

// ---------------------------------------------------------------------------
// Small conveniences built from the ops above

template <typename S>
Tensor<S> sum_squares(const Tensor<S>& a) {
  return sum(square(a));
}

// Symmetric part of a square matrix.
template <typename S>
Tensor<S> symmetrize(const Tensor<S>& a) {
  return scale(add(a, transpose(a)), S(0.5));
}

// log(sum(exp(v))) with the max subtracted off-tape for stability.
template <typename S>
Tensor<S> logsumexp(const Tensor<S>& v) {
  check_shape(v.rank() == 1, "logsumexp: rank-1 input required");
  const S m = v.values().maxCoeff();
  Tensor<S> shifted = add_const(v, -m);
  return add_const(log(sum(exp(shifted))), m);
}

}  // namespace df
