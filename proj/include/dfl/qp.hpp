#pragma once

#include <string>

#include "dfl/common.hpp"

namespace dfl {

// Canonical affine-parametric QP
//
//   min_z  1/2 z'Qz + q'z
//   s.t.   A_in z + G_in u <= b_in
//          C_eq z + H_eq u  = d_eq
//
// where u is the designated parameter slot (dimension k). The parameter
// enters only through the affine couplings G_in/H_eq, never multiplying z.
struct AffineQp {
  Mat Q;     // n x n, symmetric PSD
  Vec q;     // n
  Mat A_in;  // m x n
  Mat G_in;  // m x k
  Vec b_in;  // m
  Mat C_eq;  // p x n
  Mat H_eq;  // p x k
  Vec d_eq;  // p

  Index n() const { return q.size(); }
  Index m() const { return b_in.size(); }
  Index p() const { return d_eq.size(); }
  Index k() const { return G_in.cols(); }

  // Dimension consistency, Q symmetry/PSD and full row rank of C_eq.
  // Throws DataError on violation; rank failure is rejected here rather
  // than silently dropping rows.
  void validate() const;

  // Debug dump in a plain text matrix format (dimension header followed by
  // row-major blocks) for cross-checks against external tools.
  std::string dump() const;
};

// Convenience builder with all-zero blocks of consistent sizes.
AffineQp make_qp(Index n, Index m, Index p, Index k);

enum class QpStatus { Optimal, MaxIter, Infeasible };

struct QpSolution {
  Vec z_star;       // primal
  Vec lambda_star;  // inequality duals, >= 0
  Vec nu_star;      // equality duals
  QpStatus status = QpStatus::MaxIter;
  int iterations = 0;
  Scalar kkt_residual = 0.0;  // max over the four KKT blocks
  // Signed phase-1 margin when phase-1 ran: negative means a strictly
  // feasible point exists (Slater holds empirically). NaN when not run.
  Scalar slater_margin = std::numeric_limits<Scalar>::quiet_NaN();

  Scalar objective(const AffineQp& qp) const {
    return 0.5 * z_star.dot(qp.Q * z_star) + qp.q.dot(z_star);
  }
};

struct QpSolveOptions {
  Scalar tol_kkt = 1e-8;
  int max_iter = 100;
  Scalar infeas_tol = 1e-6;  // phase-1 slack above this declares Infeasible
};

// Dense primal-dual path-following interior point with Mehrotra
// predictor-corrector. Deterministic: fixed iteration schedule, no
// randomized pivoting. Pure function of its inputs.
QpSolution solve_qp(const AffineQp& qp, const Vec& param, const QpSolveOptions& opts = {});

struct KktResiduals {
  Scalar r_stat = 0.0;  // stationarity, max norm
  Scalar r_pri = 0.0;   // primal feasibility (equality + inequality violation)
  Scalar r_dual = 0.0;  // dual feasibility max(0, -lambda)
  Scalar r_comp = 0.0;  // complementary slackness |lambda_i * slack_i|
  Scalar max() const { return std::max(std::max(r_stat, r_pri), std::max(r_dual, r_comp)); }
};

KktResiduals kkt_residual(const AffineQp& qp, const Vec& param, const QpSolution& sol);

// Dense LP over rows plus native variable boxes:
//
//   min q'x  s.t.  A x <= b, C x = d, lo <= x <= hi
//
// Used for MILP node relaxations. `dual_bound` is a rigorous lower bound on
// the optimal value: the stationarity residual of the returned iterate is
// absorbed into the box duals, which is valid because every variable is
// boxed.
struct BoxedLp {
  Vec q;
  Mat A;
  Vec b;
  Mat C;
  Vec d;
  Vec lo;
  Vec hi;
};

struct BoxedLpResult {
  QpStatus status = QpStatus::MaxIter;
  Vec x;
  Scalar objective = 0.0;
  Scalar dual_bound = -std::numeric_limits<Scalar>::infinity();
  int iterations = 0;
};

BoxedLpResult solve_boxed_lp(const BoxedLp& lp, const QpSolveOptions& opts = {});

}  // namespace dfl
