#pragma once

#include "dfl/qp.hpp"

namespace dfl {

struct SingularJacobianError : SolverError {
  using SolverError::SolverError;
};

// Loss gradients w.r.t. every datum of an AffineQp, obtained from one
// transposed solve of the KKT Jacobian (stationarity + equality +
// complementarity-equality rows).
struct QpGradients {
  Vec d_param;  // k
  Vec d_q;      // n
  Vec d_b;      // m
  Vec d_d;      // p
  Mat d_Q;      // n x n, symmetrized
  Mat d_A;      // m x n
  Mat d_C;      // p x n
  Mat d_G;      // m x k
  Mat d_H;      // p x k
  // True when the KKT matrix needed regularization or the strict
  // complementarity margin fell below 1e-9. Gradients are then a
  // subgradient-like choice rather than the exact implicit derivative.
  bool ill_conditioned = false;
};

// Reverse-mode differentiation through a solved QP. Requires
// sol.status == Optimal. Throws SingularJacobianError when the KKT matrix
// stays numerically singular after the regularization fallback.
QpGradients qp_backward(const AffineQp& qp, const Vec& param, const QpSolution& sol,
                        const Vec& dL_dz);

}  // namespace dfl
