#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "smi/tensor/graph.hpp"

namespace smi {

namespace detail {

template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(ErrorCode::ShapeMismatch, std::string(op) + ": " + shape_string(a.shape()) +
                                              " vs " + shape_string(b.shape()));
  }
}

inline Shape matrix_shape(Index rows, Index cols) { return Shape{rows, cols}; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "add");
  auto& g = a.graph();
  const NodeId ia = a.id(), ib = b.id();
  return g.record(a.shape(), a.value() + b.value(), {ia, ib},
                  [ia, ib](Graph<Scalar>& gr, const RowMatrix<Scalar>& dy) {
                    gr.accumulate(ia, dy);
                    gr.accumulate(ib, dy);
                  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "sub");
  auto& g = a.graph();
  const NodeId ia = a.id(), ib = b.id();
  return g.record(a.shape(), a.value() - b.value(), {ia, ib},
                  [ia, ib](Graph<Scalar>& gr, const RowMatrix<Scalar>& dy) {
                    gr.accumulate(ia, dy);
                    gr.accumulate(ib, -dy);
                  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "mul");
  auto& g = a.graph();
  const NodeId ia = a.id(), ib = b.id();
  return g.record(a.shape(), a.value().cwiseProduct(b.value()), {ia, ib},
                  [ia, ib](Graph<Scalar>& gr, const RowMatrix<Scalar>& dy) {
                    if (gr.requires_grad(ia)) gr.accumulate(ia, dy.cwiseProduct(gr.value(ib)));
                    if (gr.requires_grad(ib)) gr.accumulate(ib, dy.cwiseProduct(gr.value(ia)));
                  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  auto& g = a.graph();
  const NodeId ia = a.id();
  return g.record(a.shape(), a.value() * s, {ia},
                  [ia, s](Graph<Scalar>& gr, const RowMatrix<Scalar>& dy) { gr.accumulate(ia, dy * s); });
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
Var<Scalar> operator*(const Var<Scalar>& a, Scalar s) { return scale(a, s); }
template <typename Scalar>
Var<Scalar> operator*(Scalar s, const Var<Scalar>& a) { return scale(a, s); }

/// x[m,n] + b broadcast along rows; b has n elements.
template <typename Scalar>
Var<Scalar> add_row_broadcast(const Var<Scalar>& x, const Var<Scalar>& b) {
  if (b.value().size() != x.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "add_row_broadcast: bias length " +
                                              std::to_string(b.value().size()) + " vs cols " +
                                              std::to_string(x.cols()));
  }
  auto& g = x.graph();
  const NodeId ix = x.id(), ib = b.id();
  const auto brow = Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(b.value().data(), x.cols());
  RowMatrix<Scalar> y = x.value().rowwise() + brow;
  return g.record(x.shape(), std::move(y), {ix, ib},
                  [ix, ib](Graph<Scalar>& gr, const RowMatrix<Scalar>& dy) {
                    gr.accumulate(ix, dy);
                    if (gr.requires_grad(ib)) {
                      const auto& bv = gr.value(ib);
                      RowMatrix<Scalar> db = dy.colwise().sum();
                      gr.accumulate(ib, Eigen::Map<const RowMatrix<Scalar>>(db.data(), bv.rows(), bv.cols()));
                    }
                  });
}

/// Exact (erf-based) GELU.
template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& x) {
  auto& g = x.graph();
  const NodeId ix = x.id();
  const Scalar inv_sqrt2 = Scalar(1) / std::sqrt(Scalar(2));
  RowMatrix<Scalar> y = x.value().unaryExpr([inv_sqrt2](Scalar v) {
    return Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2));
  });
  return g.record(x.shape(), std::move(y), {ix},
                  [ix, inv_sqrt2](Graph<Scalar>& gr, const RowMatrix<Scalar>& dy) {
                    const Scalar inv_sqrt_2pi = Scalar(1) / std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar>);
                    RowMatrix<Scalar> d = gr.value(ix).unaryExpr([&](Scalar v) {
                      return Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2)) +
                             v * inv_sqrt_2pi * std::exp(Scalar(-0.5) * v * v);
                    });
                    gr.accumulate(ix, dy.cwiseProduct(d));
                  });
}

/// Elementwise map whose backward is the identity (straight-through estimator).
template <typename Scalar, typename Fn>
Var<Scalar> map_straight_through(const Var<Scalar>& x, Fn fn) {
  auto& g = x.graph();
  const NodeId ix = x.id();
  RowMatrix<Scalar> y = x.value().unaryExpr(fn);
  return g.record(x.shape(), std::move(y), {ix},
                  [ix](Graph<Scalar>& gr, const RowMatrix<Scalar>& dy) { gr.accumulate(ix, dy); });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// a[m,k] · b[k,n]. Rank-1 operands are treated as a single row.
template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b, MacTag tag = MacTag::Other) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw Error(ErrorCode::ShapeMismatch,
                "matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  auto& g = a.graph();
  g.macs().add(tag, static_cast<std::int64_t>(av.rows() * av.cols() * bv.cols()));
  RowMatrix<Scalar> c(av.rows(), bv.cols());
  c.noalias() = av * bv;
  const NodeId ia = a.id(), ib = b.id();
  return g.record(detail::matrix_shape(av.rows(), bv.cols()), std::move(c), {ia, ib},
                  [ia, ib](Graph<Scalar>& gr, const RowMatrix<Scalar>& dc) {
                    if (gr.requires_grad(ia)) gr.accumulate(ia, dc * gr.value(ib).transpose());
                    if (gr.requires_grad(ib)) gr.accumulate(ib, gr.value(ia).transpose() * dc);
                  });
}

/// a[m,k] · b[n,k]ᵀ.
template <typename Scalar>
Var<Scalar> matmul_nt(const Var<Scalar>& a, const Var<Scalar>& b, MacTag tag = MacTag::Other) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw Error(ErrorCode::ShapeMismatch,
                "matmul_nt: " + shape_string(a.shape()) + " x " + shape_string(b.shape()) + "ᵀ");
  }
  auto& g = a.graph();
  g.macs().add(tag, static_cast<std::int64_t>(av.rows() * av.cols() * bv.rows()));
  RowMatrix<Scalar> c(av.rows(), bv.rows());
  c.noalias() = av * bv.transpose();
  const NodeId ia = a.id(), ib = b.id();
  return g.record(detail::matrix_shape(av.rows(), bv.rows()), std::move(c), {ia, ib},
                  [ia, ib](Graph<Scalar>& gr, const RowMatrix<Scalar>& dc) {
                    if (gr.requires_grad(ia)) gr.accumulate(ia, dc * gr.value(ib));
                    if (gr.requires_grad(ib)) gr.accumulate(ib, dc.transpose() * gr.value(ia));
                  });
}

// ---------------------------------------------------------------------------
// Normalization

/// Row-wise softmax over the last dimension, max-subtracted.
template <typename Scalar>
Var<Scalar> softmax_lastdim(const Var<Scalar>& x) {
  const auto& xv = x.value();
  if (xv.cols() < 1) throw Error(ErrorCode::ShapeMismatch, "softmax over empty last dim");
  RowMatrix<Scalar> y(xv.rows(), xv.cols());
  for (Index r = 0; r < xv.rows(); ++r) {
    const Scalar m = xv.row(r).maxCoeff();
    y.row(r) = (xv.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  auto& g = x.graph();
  const NodeId ix = x.id();
  auto out = g.record(x.shape(), std::move(y), {ix}, nullptr);
  if (g.requires_grad(out.id())) {
    // Rebind: the closure needs the output id, which is only known after recording.
    const NodeId iy = out.id();
    g.set_backward(iy, [ix, iy](Graph<Scalar>& gr, const RowMatrix<Scalar>& dy) {
      const auto& yv = gr.value(iy);
      Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dots = dy.cwiseProduct(yv).rowwise().sum();
      RowMatrix<Scalar> dx = yv.cwiseProduct(dy - dots.replicate(1, yv.cols()));
      gr.accumulate(ix, dx);
    });
  }
  return out;
}

template <typename Scalar>
Var<Scalar> log_softmax_lastdim(const Var<Scalar>& x) {
  const auto& xv = x.value();
  if (xv.cols() < 1) throw Error(ErrorCode::ShapeMismatch, "log_softmax over empty last dim");
  RowMatrix<Scalar> y(xv.rows(), xv.cols());
  for (Index r = 0; r < xv.rows(); ++r) {
    const Scalar m = xv.row(r).maxCoeff();
    const Scalar lse = m + std::log((xv.row(r).array() - m).exp().sum());
    y.row(r) = (xv.row(r).array() - lse).matrix();
  }
  auto& g = x.graph();
  const NodeId ix = x.id();
  auto out = g.record(x.shape(), std::move(y), {ix}, nullptr);
  if (g.requires_grad(out.id())) {
    const NodeId iy = out.id();
    g.set_backward(iy, [ix, iy](Graph<Scalar>& gr, const RowMatrix<Scalar>& dy) {
      RowMatrix<Scalar> p = gr.value(iy).array().exp().matrix();
      Eigen::Matrix<Scalar, Eigen::Dynamic, 1> sums = dy.rowwise().sum();
      gr.accumulate(ix, dy - p.cwiseProduct(sums.replicate(1, p.cols())));
    });
  }
  return out;
}

/// Per-row layer normalization with affine gamma/beta over the last dim.
template <typename Scalar>
Var<Scalar> layernorm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                      Scalar eps = Scalar(1e-5)) {
  const auto& xv = x.value();
  const Index n = xv.cols();
  if (gamma.value().size() != n || beta.value().size() != n) {
    throw Error(ErrorCode::ShapeMismatch, "layernorm: gamma/beta must match last dim");
  }
  auto& g = x.graph();
  RowMatrix<Scalar> xhat(xv.rows(), n);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const Scalar mu = xv.row(r).mean();
    const Scalar var = (xv.row(r).array() - mu).square().mean();
    if (g.checked() && var < eps) {
      throw Error(ErrorCode::DegenerateRow, "layernorm row " + std::to_string(r) + " has variance below eps");
    }
    inv_std(r) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = ((xv.row(r).array() - mu) * inv_std(r)).matrix();
  }
  const auto gm = Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(gamma.value().data(), n);
  const auto bm = Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(beta.value().data(), n);
  RowMatrix<Scalar> y = (xhat.array().rowwise() * gm.array()).matrix().rowwise() + bm;
  const NodeId ix = x.id(), ig = gamma.id(), ib = beta.id();
  return g.record(
      x.shape(), std::move(y), {ix, ig, ib},
      [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std), n](Graph<Scalar>& gr,
                                                                          const RowMatrix<Scalar>& dy) {
        const auto& gv = gr.value(ig);
        if (gr.requires_grad(ig)) {
          RowMatrix<Scalar> dg = dy.cwiseProduct(xhat).colwise().sum();
          gr.accumulate(ig, Eigen::Map<const RowMatrix<Scalar>>(dg.data(), gv.rows(), gv.cols()));
        }
        if (gr.requires_grad(ib)) {
          const auto& bv = gr.value(ib);
          RowMatrix<Scalar> db = dy.colwise().sum();
          gr.accumulate(ib, Eigen::Map<const RowMatrix<Scalar>>(db.data(), bv.rows(), bv.cols()));
        }
        if (gr.requires_grad(ix)) {
          const auto gm2 = Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(gv.data(), n);
          RowMatrix<Scalar> dxhat = (dy.array().rowwise() * gm2.array()).matrix();
          RowMatrix<Scalar> dx(dy.rows(), n);
          const Scalar inv_n = Scalar(1) / static_cast<Scalar>(n);
          for (Index r = 0; r < dy.rows(); ++r) {
            const Scalar s1 = dxhat.row(r).sum();
            const Scalar s2 = dxhat.row(r).dot(xhat.row(r));
            dx.row(r) = (inv_std(r) * inv_n) *
                        (static_cast<Scalar>(n) * dxhat.row(r).array() - s1 - xhat.row(r).array() * s2).matrix();
          }
          gr.accumulate(ix, dx);
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  auto& g = x.graph();
  const NodeId ix = x.id();
  RowMatrix<Scalar> y(1, 1);
  y(0, 0) = x.value().sum();
  return g.record(Shape{}, std::move(y), {ix}, [ix](Graph<Scalar>& gr, const RowMatrix<Scalar>& dy) {
    const auto& xv = gr.value(ix);
    gr.accumulate(ix, RowMatrix<Scalar>::Constant(xv.rows(), xv.cols(), dy(0, 0)));
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& x) {
  return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.value().size()));
}

/// −log softmax(logits)[label] for a single row of logits.
template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& logits, int label) {
  const auto& lv = logits.value();
  if (lv.rows() != 1) throw Error(ErrorCode::ShapeMismatch, "cross_entropy expects one row of logits");
  if (label < 0 || label >= lv.cols()) {
    throw Error(ErrorCode::LabelOutOfRange,
                "label " + std::to_string(label) + " for " + std::to_string(lv.cols()) + " classes");
  }
  const Scalar m = lv.maxCoeff();
  const Scalar lse = m + std::log((lv.array() - m).exp().sum());
  RowMatrix<Scalar> y(1, 1);
  y(0, 0) = lse - lv(0, label);
  auto& g = logits.graph();
  const NodeId il = logits.id();
  return g.record(Shape{}, std::move(y), {il}, [il, lse, label](Graph<Scalar>& gr, const RowMatrix<Scalar>& dy) {
    RowMatrix<Scalar> p = (gr.value(il).array() - lse).exp().matrix();
    p(0, label) -= Scalar(1);
    gr.accumulate(il, p * dy(0, 0));
  });
}

// ---------------------------------------------------------------------------
// Indexing and layout

template <typename Scalar>
Var<Scalar> gather_rows(const Var<Scalar>& x, std::span<const Index> rows) {
  const auto& xv = x.value();
  RowMatrix<Scalar> y(static_cast<Index>(rows.size()), xv.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= xv.rows()) throw Error(ErrorCode::ShapeMismatch, "gather_rows index out of range");
    y.row(static_cast<Index>(i)) = xv.row(rows[i]);
  }
  auto& g = x.graph();
  const NodeId ix = x.id();
  std::vector<Index> idx(rows.begin(), rows.end());
  Shape shape = detail::matrix_shape(y.rows(), y.cols());
  return g.record(std::move(shape), std::move(y), {ix},
                  [ix, idx = std::move(idx)](Graph<Scalar>& gr, const RowMatrix<Scalar>& dy) {
                    const auto& xv2 = gr.value(ix);
                    RowMatrix<Scalar> dx = RowMatrix<Scalar>::Zero(xv2.rows(), xv2.cols());
                    for (std::size_t i = 0; i < idx.size(); ++i) dx.row(idx[i]) += dy.row(static_cast<Index>(i));
                    gr.accumulate(ix, dx);
                  });
}

template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& x, Index start, Index count) {
  const auto& xv = x.value();
  if (start < 0 || count < 0 || start + count > xv.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "slice_cols out of range");
  }
  RowMatrix<Scalar> y = xv.middleCols(start, count);
  auto& g = x.graph();
  const NodeId ix = x.id();
  Shape shape = detail::matrix_shape(y.rows(), count);
  return g.record(std::move(shape), std::move(y), {ix},
                  [ix, start, count](Graph<Scalar>& gr, const RowMatrix<Scalar>& dy) {
                    const auto& xv2 = gr.value(ix);
                    RowMatrix<Scalar> dx = RowMatrix<Scalar>::Zero(xv2.rows(), xv2.cols());
                    dx.middleCols(start, count) = dy;
                    gr.accumulate(ix, dx);
                  });
}

template <typename Scalar>
Var<Scalar> concat_cols(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw Error(ErrorCode::ShapeMismatch, "concat_cols of nothing");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw Error(ErrorCode::ShapeMismatch, "concat_cols row mismatch");
    cols += p.cols();
  }
  RowMatrix<Scalar> y(rows, cols);
  std::vector<NodeId> ids;
  std::vector<Index> widths;
  Index off = 0;
  for (const auto& p : parts) {
    y.middleCols(off, p.cols()) = p.value();
    off += p.cols();
    ids.push_back(p.id());
    widths.push_back(p.cols());
  }
  auto& g = parts.front().graph();
  auto parents = ids;
  return g.record(detail::matrix_shape(rows, cols), std::move(y), std::move(parents),
                  [ids = std::move(ids), widths = std::move(widths)](Graph<Scalar>& gr, const RowMatrix<Scalar>& dy) {
                    Index o = 0;
                    for (std::size_t i = 0; i < ids.size(); ++i) {
                      if (gr.requires_grad(ids[i])) gr.accumulate(ids[i], dy.middleCols(o, widths[i]));
                      o += widths[i];
                    }
                  });
}

template <typename Scalar>
Var<Scalar> concat_rows(const Var<Scalar>& top, const Var<Scalar>& bottom) {
  if (top.cols() != bottom.cols()) throw Error(ErrorCode::ShapeMismatch, "concat_rows col mismatch");
  const Index rt = top.rows(), rb = bottom.rows();
  RowMatrix<Scalar> y(rt + rb, top.cols());
  y.topRows(rt) = top.value();
  y.bottomRows(rb) = bottom.value();
  auto& g = top.graph();
  const NodeId it = top.id(), ib = bottom.id();
  return g.record(detail::matrix_shape(rt + rb, top.cols()), std::move(y), {it, ib},
                  [it, ib, rt, rb](Graph<Scalar>& gr, const RowMatrix<Scalar>& dy) {
                    if (gr.requires_grad(it)) gr.accumulate(it, dy.topRows(rt));
                    if (gr.requires_grad(ib)) gr.accumulate(ib, dy.bottomRows(rb));
                  });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, Shape shape) {
  if (shape_numel(shape) != x.value().size()) {
    throw Error(ErrorCode::ShapeMismatch, "reshape " + shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  const auto [r, c] = matrix_extent(shape);
  RowMatrix<Scalar> y = Eigen::Map<const RowMatrix<Scalar>>(x.value().data(), r, c);
  auto& g = x.graph();
  const NodeId ix = x.id();
  return g.record(std::move(shape), std::move(y), {ix}, [ix](Graph<Scalar>& gr, const RowMatrix<Scalar>& dy) {
    const auto& xv = gr.value(ix);
    gr.accumulate(ix, Eigen::Map<const RowMatrix<Scalar>>(dy.data(), xv.rows(), xv.cols()));
  });
}

}  // namespace smi
