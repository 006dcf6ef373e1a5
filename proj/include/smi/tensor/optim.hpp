#pragma once

#include <cmath>
#include <cstdint>

#include "smi/tensor/tensor.hpp"

namespace smi {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Scalar>
struct AdamState {
  RowMatrix<Scalar> m;
  RowMatrix<Scalar> v;
  std::int64_t t = 0;
};

/// Bias-corrected Adam update on any Eigen block. `step` is the 1-based step
/// count used for bias correction; moments are updated in place.
template <typename P, typename G, typename M, typename V>
void adam_update(Eigen::MatrixBase<P>& param, const Eigen::MatrixBase<G>& grad, Eigen::MatrixBase<M>& m,
                 Eigen::MatrixBase<V>& v, std::int64_t step, const AdamOptions& opt) {
  using Scalar = typename P::Scalar;
  const Scalar b1 = static_cast<Scalar>(opt.beta1);
  const Scalar b2 = static_cast<Scalar>(opt.beta2);
  const Scalar c1 = Scalar(1) - std::pow(b1, static_cast<Scalar>(step));
  const Scalar c2 = Scalar(1) - std::pow(b2, static_cast<Scalar>(step));
  const Scalar lr = static_cast<Scalar>(opt.lr);
  const Scalar eps = static_cast<Scalar>(opt.eps);
  for (Eigen::Index r = 0; r < param.rows(); ++r) {
    for (Eigen::Index c = 0; c < param.cols(); ++c) {
      const Scalar g = grad(r, c);
      Scalar& mi = m(r, c);
      Scalar& vi = v(r, c);
      mi = b1 * mi + (Scalar(1) - b1) * g;
      vi = b2 * vi + (Scalar(1) - b2) * (g * g);
      param(r, c) -= lr * (mi / c1) / (std::sqrt(vi / c2) + eps);
    }
  }
}

template <typename Scalar>
void adam_step(BasicTensor<Scalar>& param, const RowMatrix<Scalar>& grad, AdamState<Scalar>& state,
               const AdamOptions& opt) {
  auto& p = param.mat();
  if (grad.rows() != p.rows() || grad.cols() != p.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "adam_step: gradient shape differs from parameter");
  }
  if (state.m.size() == 0) {
    state.m = RowMatrix<Scalar>::Zero(p.rows(), p.cols());
    state.v = RowMatrix<Scalar>::Zero(p.rows(), p.cols());
  }
  ++state.t;
  adam_update(p, grad, state.m, state.v, state.t, opt);
}

template <typename Scalar>
void sgd_step(BasicTensor<Scalar>& param, const RowMatrix<Scalar>& grad, double lr) {
  if (grad.rows() != param.mat().rows() || grad.cols() != param.mat().cols()) {
    throw Error(ErrorCode::ShapeMismatch, "sgd_step: gradient shape differs from parameter");
  }
  param.mat() -= static_cast<Scalar>(lr) * grad;
}

}  // namespace smi
