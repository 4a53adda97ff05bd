#include "dfl/qp.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <sstream>

namespace dfl {

namespace {

constexpr Scalar kInf = std::numeric_limits<Scalar>::infinity();

void append_block(std::ostringstream& os, const char* name, const Mat& M) {
  os << name << "\n";
  for (Index i = 0; i < M.rows(); ++i) {
    for (Index j = 0; j < M.cols(); ++j) {
      if (j) os << " ";
      os << M(i, j);
    }
    os << "\n";
  }
}

}  // namespace

void AffineQp::validate() const {
  const Index nn = n(), mm = m(), pp = p(), kk = k();
  if (Q.rows() != nn || Q.cols() != nn) throw DataError("AffineQp: Q must be n x n");
  if (A_in.rows() != mm || A_in.cols() != nn) throw DataError("AffineQp: A_in must be m x n");
  if (G_in.rows() != mm || G_in.cols() != kk) throw DataError("AffineQp: G_in must be m x k");
  if (C_eq.rows() != pp || C_eq.cols() != nn) throw DataError("AffineQp: C_eq must be p x n");
  if (H_eq.rows() != pp || H_eq.cols() != kk) throw DataError("AffineQp: H_eq must be p x k");
  if ((Q - Q.transpose()).cwiseAbs().maxCoeff() > 1e-10 * (1.0 + Q.cwiseAbs().maxCoeff()))
    throw DataError("AffineQp: Q must be symmetric");
  if (nn > 0) {
    Eigen::SelfAdjointEigenSolver<Mat> es(Q, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < -1e-8 * (1.0 + Q.cwiseAbs().maxCoeff()))
      throw DataError("AffineQp: Q must be positive semidefinite");
  }
  if (pp > 0) {
    Eigen::ColPivHouseholderQR<Mat> qr(C_eq.transpose());
    if (qr.rank() < pp) throw DataError("AffineQp: C_eq must have full row rank");
  }
}

std::string AffineQp::dump() const {
  std::ostringstream os;
  os.precision(17);
  os << "AffineQp " << n() << " " << m() << " " << p() << " " << k() << "\n";
  append_block(os, "Q", Q);
  append_block(os, "q", q.transpose());
  append_block(os, "A_in", A_in);
  append_block(os, "G_in", G_in);
  append_block(os, "b_in", b_in.transpose());
  append_block(os, "C_eq", C_eq);
  append_block(os, "H_eq", H_eq);
  append_block(os, "d_eq", d_eq.transpose());
  return os.str();
}

AffineQp make_qp(Index n, Index m, Index p, Index k) {
  AffineQp qp;
  qp.Q = Mat::Zero(n, n);
  qp.q = Vec::Zero(n);
  qp.A_in = Mat::Zero(m, n);
  qp.G_in = Mat::Zero(m, k);
  qp.b_in = Vec::Zero(m);
  qp.C_eq = Mat::Zero(p, n);
  qp.H_eq = Mat::Zero(p, k);
  qp.d_eq = Vec::Zero(p);
  return qp;
}

namespace {

// Raw problem handed to the interior-point core:
//   min 1/2 z'Qz + q'z  s.t.  A z <= b, C z = d.
struct IpmProblem {
  const Mat& Q;
  const Vec& q;
  const Mat& A;
  const Vec& b;
  const Mat& C;
  const Vec& d;
};

struct IpmResult {
  Vec z;
  Vec lambda;
  Vec nu;
  QpStatus status = QpStatus::MaxIter;
  int iterations = 0;
  Scalar kkt_max = kInf;
};

KktResiduals residuals_at(const IpmProblem& pr, const Vec& z, const Vec& lambda, const Vec& nu) {
  KktResiduals r;
  Vec stat = pr.Q * z + pr.q;
  if (pr.A.rows() > 0) stat += pr.A.transpose() * lambda;
  if (pr.C.rows() > 0) stat += pr.C.transpose() * nu;
  r.r_stat = stat.size() ? stat.cwiseAbs().maxCoeff() : 0.0;
  Scalar pri = 0.0;
  if (pr.C.rows() > 0) pri = (pr.C * z - pr.d).cwiseAbs().maxCoeff();
  if (pr.A.rows() > 0) {
    Vec slack = pr.b - pr.A * z;
    pri = std::max(pri, std::max(0.0, (-slack).maxCoeff()));
    r.r_comp = (lambda.array() * slack.array()).abs().maxCoeff();
  }
  r.r_pri = pri;
  r.r_dual = lambda.size() ? std::max(0.0, (-lambda).maxCoeff()) : 0.0;
  return r;
}

// Equality-constrained (or unconstrained) case: one KKT solve.
IpmResult solve_equality_only(const IpmProblem& pr, const QpSolveOptions& opts) {
  const Index n = pr.q.size(), p = pr.d.size();
  IpmResult out;
  out.lambda = Vec::Zero(0);
  Mat K = Mat::Zero(n + p, n + p);
  K.topLeftCorner(n, n) = pr.Q;
  if (p > 0) {
    K.topRightCorner(n, p) = pr.C.transpose();
    K.bottomLeftCorner(p, n) = pr.C;
  }
  Vec rhs(n + p);
  rhs.head(n) = -pr.q;
  if (p > 0) rhs.tail(p) = pr.d;
  Vec sol = K.partialPivLu().solve(rhs);
  out.z = sol.head(n);
  out.nu = sol.tail(p);
  out.iterations = 1;
  out.kkt_max = residuals_at(pr, out.z, out.lambda, out.nu).max();
  out.status = out.kkt_max <= opts.tol_kkt ? QpStatus::Optimal : QpStatus::MaxIter;
  return out;
}

// Mehrotra predictor-corrector with infeasible start. The reduced system
//   [Q + A' diag(lambda/s) A   C'] [dz]   [rhs1]
//   [C                         0 ] [dnu] = [rhs2]
// is factorized once per iteration and reused for both steps.
// Per-block tolerances in the units of the (possibly normalized) problem:
// stationarity and complementarity scale with the objective, primal
// feasibility does not.
struct IpmTols {
  Scalar stat;
  Scalar pri;
};

// Core loop, usually on an objective-normalized copy.
IpmResult ipm_solve_normalized(const IpmProblem& pr, const QpSolveOptions& opts,
                               const IpmTols& tols) {
  const Index n = pr.q.size(), m = pr.b.size(), p = pr.d.size();
  if (m == 0) return solve_equality_only(pr, opts);

  IpmResult out;
  // Start: least-norm point on the equality manifold, slacks shifted >= 1.
  Vec z = Vec::Zero(n);
  if (p > 0) z = pr.C.transpose() * (pr.C * pr.C.transpose()).partialPivLu().solve(pr.d);
  Vec s = (pr.b - pr.A * z).cwiseMax(1.0);
  Vec lambda = Vec::Ones(m);
  Vec nu = Vec::Zero(p);

  // Convergence ratio: 1.0 means every block inside its tolerance.
  auto ratio_of = [&](const KktResiduals& r) {
    return std::max(std::max(r.r_stat, r.r_comp) / tols.stat,
                    std::max(r.r_pri, r.r_dual) / tols.pri);
  };

  Vec best_z = z, best_lambda = lambda, best_nu = nu;
  Scalar best_ratio = kInf;
  int stalls = 0;
  int stale_iters = 0;

  // A jammed barrier (steps collapsing with mu still high) restarts from the
  // best primal point with re-inflated slacks; two lifts are plenty.
  for (int round = 0; round < 3 && out.status != QpStatus::Optimal; ++round) {
  if (round > 0) {
    z = best_z;
    s = (pr.b - pr.A * z).cwiseMax(1.0);
    lambda = best_lambda.array() + 1.0;
    nu = best_nu;
    stalls = 0;
    stale_iters = 0;
  }
  for (int iter = 0; iter < opts.max_iter; ++iter) {
    Vec r_d = pr.Q * z + pr.q + pr.A.transpose() * lambda;
    if (p > 0) r_d += pr.C.transpose() * nu;
    Vec r_p1 = p > 0 ? Vec(pr.C * z - pr.d) : Vec(0);
    Vec r_p2 = pr.A * z + s - pr.b;
    const Scalar mu = s.dot(lambda) / static_cast<Scalar>(m);

    const KktResiduals res = residuals_at(pr, z, lambda, nu);
    const Scalar ratio = ratio_of(res);
    // Below this barrier level the active slacks approach denormals and the
    // dual back-substitution only adds noise; the polish step finishes the
    // job from here.
    if (mu <= 1e-13 && res.r_pri <= tols.pri) {
      out.iterations = iter;
      break;
    }
    // Near the attainable floor, stop once progress stalls.
    if (best_ratio <= 1e2) {
      if (ratio < 0.9 * best_ratio) {
        stale_iters = 0;
      } else if (++stale_iters >= 15) {
        out.iterations = iter;
        break;
      }
    }
    if (ratio < best_ratio) {
      best_ratio = ratio;
      best_z = z;
      best_lambda = lambda;
      best_nu = nu;
    }
    if (ratio <= 1.0) {
      out.status = QpStatus::Optimal;
      out.iterations = iter;
      break;
    }

    Vec w = lambda.cwiseQuotient(s);
    Mat K = Mat::Zero(n + p, n + p);
    K.topLeftCorner(n, n) = pr.Q + pr.A.transpose() * w.asDiagonal() * pr.A;
    if (p > 0) {
      K.topRightCorner(n, p) = pr.C.transpose();
      K.bottomLeftCorner(p, n) = pr.C;
    }

    Eigen::PartialPivLU<Mat> lu(K);
    Mat K_used = K;
    // Static regularization fallback when the saddle factorization degrades.
    {
      Vec probe = Vec::Ones(n + p);
      Vec x = lu.solve(probe);
      Scalar err = (K_used * x - probe).cwiseAbs().maxCoeff();
      Scalar reg = 1e-12;
      while (!std::isfinite(err) || err > 1e-6) {
        Mat Kr = K;
        Kr.topLeftCorner(n, n) += reg * Mat::Identity(n, n);
        if (p > 0) Kr.bottomRightCorner(p, p) -= reg * Mat::Identity(p, p);
        lu = Eigen::PartialPivLU<Mat>(Kr);
        K_used = Kr;
        x = lu.solve(probe);
        err = (K_used * x - probe).cwiseAbs().maxCoeff();
        reg *= 100.0;
        if (reg > 1e-2) break;
      }
    }

    auto refined_solve = [&](const Vec& rhs) {
      Vec x = lu.solve(rhs);
      // One pass of iterative refinement keeps degenerate systems usable.
      Vec resid = rhs - K_used * x;
      x += lu.solve(resid);
      return x;
    };

    auto solve_step = [&](const Vec& r_c) -> std::tuple<Vec, Vec, Vec, Vec> {
      Vec rhs(n + p);
      rhs.head(n) =
          -r_d - pr.A.transpose() * (s.cwiseInverse().asDiagonal() * (lambda.asDiagonal() * r_p2 - r_c));
      if (p > 0) rhs.tail(p) = -r_p1;
      Vec sol = refined_solve(rhs);
      Vec dz = sol.head(n);
      Vec dnu = sol.tail(p);
      Vec ds = -pr.A * dz - r_p2;
      Vec dlambda = -(r_c + lambda.asDiagonal() * ds).cwiseQuotient(s);
      return {dz, dnu, ds, dlambda};
    };

    auto max_step = [](const Vec& v, const Vec& dv) {
      Scalar a = 1.0;
      for (Index i = 0; i < v.size(); ++i)
        if (dv[i] < 0.0) a = std::min(a, -v[i] / dv[i]);
      return a;
    };

    // Predictor (affine scaling).
    Vec r_c_aff = lambda.cwiseProduct(s);
    auto [dz_a, dnu_a, ds_a, dl_a] = solve_step(r_c_aff);
    Scalar ap_a = max_step(s, ds_a);
    Scalar ad_a = max_step(lambda, dl_a);
    Scalar mu_aff = (s + ap_a * ds_a).dot(lambda + ad_a * dl_a) / static_cast<Scalar>(m);
    Scalar sigma = std::pow(std::min(1.0, std::max(0.0, mu_aff / std::max(mu, 1e-300))), 3);

    // Corrector.
    Vec r_c = lambda.cwiseProduct(s) + dl_a.cwiseProduct(ds_a) -
              Vec::Constant(m, sigma * mu);
    auto [dz, dnu, ds, dlambda] = solve_step(r_c);
    // Fraction-to-boundary moves closer to 1 as the barrier shrinks so the
    // iteration cannot jam at a degenerate corner.
    const Scalar tau = std::min(0.999, std::max(0.995, 1.0 - 10.0 * mu));
    Scalar ap = std::min(1.0, tau * max_step(s, ds));
    Scalar ad = std::min(1.0, tau * max_step(lambda, dlambda));

    // Centrality safeguard: never let a single product collapse far below
    // the average, which would blow up the scaling matrix and jam the
    // iteration. Backtrack both steps together until inside the wide
    // neighborhood.
    for (int bt = 0; bt < 12; ++bt) {
      Vec s_new = s + ap * ds;
      Vec l_new = lambda + ad * dlambda;
      const Scalar mu_new = s_new.dot(l_new) / static_cast<Scalar>(m);
      if (mu_new <= 0.0) break;
      if ((s_new.cwiseProduct(l_new).array() >= 1e-4 * mu_new).all()) break;
      ap *= 0.7;
      ad *= 0.7;
    }

    if (std::getenv("DFL_TRACE_IPM"))
      std::fprintf(stderr,
                   "  it=%3d round=%d mu=%9.3e ratio=%9.3e sigma=%5.3f ap=%7.1e ad=%7.1e "
                   "minprod/mu=%8.2e\n",
                   iter, round, mu, ratio, sigma, ap, ad,
                   mu > 0 ? s.cwiseProduct(lambda).minCoeff() / mu : 0.0);

    z += ap * dz;
    s += ap * ds;
    lambda += ad * dlambda;
    if (p > 0) nu += ad * dnu;

    if (std::max(ap, ad) < 1e-10) {
      if (++stalls >= 3) {
        out.iterations = iter + 1;
        break;
      }
    } else {
      stalls = 0;
    }
    out.iterations = iter + 1;
  }
  }  // restart rounds

  if (out.status != QpStatus::Optimal) {
    z = best_z;
    lambda = best_lambda;
    nu = best_nu;
  }

  // Active-set polish: re-solve the equality-constrained KKT system on a
  // guessed active set and adopt the point when its residual ratio improves.
  // Near-degenerate instances leave stationarity or complementarity orders
  // of magnitude above the floor; a correct guess removes that entirely.
  {
    auto try_polish = [&](const std::vector<Index>& act) {
      const Index a = static_cast<Index>(act.size());
      Mat K = Mat::Zero(n + a + p, n + a + p);
      K.topLeftCorner(n, n) = pr.Q;
      Vec rhs(n + a + p);
      rhs.head(n) = -pr.q;
      for (Index i = 0; i < a; ++i) {
        K.block(0, n + i, n, 1) = pr.A.row(act[static_cast<size_t>(i)]).transpose();
        K.block(n + i, 0, 1, n) = pr.A.row(act[static_cast<size_t>(i)]);
        rhs[n + i] = pr.b[act[static_cast<size_t>(i)]];
      }
      if (p > 0) {
        K.block(0, n + a, n, p) = pr.C.transpose();
        K.block(n + a, 0, p, n) = pr.C;
        rhs.tail(p) = pr.d;
      }
      // Rank-revealing least squares: degenerate active sets are common at
      // dispatch vertices and the residual test below rejects bad points.
      Eigen::ColPivHouseholderQR<Mat> qr(K);
      Vec sol = qr.solve(rhs);
      if (!sol.allFinite()) return;
      Vec pz = sol.head(n);
      Vec plambda = Vec::Zero(m);
      for (Index i = 0; i < a; ++i)
        plambda[act[static_cast<size_t>(i)]] = std::max(0.0, sol[n + i]);
      Vec pnu = p > 0 ? Vec(sol.tail(p)) : Vec(0);
      if (std::getenv("DFL_TRACE_IPM"))
        std::fprintf(stderr, "  polish |act|=%ld ratio %.3e vs %.3e\n", a,
                     ratio_of(residuals_at(pr, pz, plambda, pnu)),
                     ratio_of(residuals_at(pr, z, lambda, nu)));
      if (ratio_of(residuals_at(pr, pz, plambda, pnu)) <
          ratio_of(residuals_at(pr, z, lambda, nu))) {
        z = pz;
        lambda = plambda;
        nu = pnu;
      }
    };
    const Vec slack = pr.b - pr.A * z;
    const Scalar lam_scale = lambda.size() ? lambda.maxCoeff() : 0.0;
    std::vector<Index> by_ratio, by_slack;
    for (Index j = 0; j < m; ++j) {
      if (lambda[j] > slack[j]) by_ratio.push_back(j);
      if (slack[j] < 1e-7 * (1.0 + std::abs(pr.b[j]))) by_slack.push_back(j);
    }
    try_polish(by_ratio);
    if (by_slack != by_ratio) try_polish(by_slack);
    if (lam_scale > 0.0) {
      std::vector<Index> by_dual;
      for (Index j = 0; j < m; ++j)
        if (lambda[j] > 1e-5 * lam_scale) by_dual.push_back(j);
      if (by_dual != by_ratio && by_dual != by_slack) try_polish(by_dual);
    }
  }

  out.z = z;
  out.lambda = lambda;
  out.nu = nu;
  const KktResiduals final_res = residuals_at(pr, z, lambda, nu);
  out.kkt_max = final_res.max();
  if (ratio_of(final_res) <= 1.0) out.status = QpStatus::Optimal;
  return out;
}

// The iteration runs on data with the objective normalized to unit scale,
// which keeps the stationarity rows O(1) for dispatch-style costs. The
// normalized stationarity/complementarity tolerance still targets the
// caller's absolute tolerance in original units down to an attainable floor
// of 1e-10; primal feasibility is unaffected by the objective scale.
IpmResult ipm_solve(const IpmProblem& pr, const QpSolveOptions& opts) {
  Scalar obj_scale = 0.0;
  if (pr.q.size() > 0) obj_scale = pr.q.cwiseAbs().maxCoeff();
  if (pr.Q.size() > 0) obj_scale = std::max(obj_scale, pr.Q.cwiseAbs().maxCoeff());
  if (obj_scale <= 1.0)
    return ipm_solve_normalized(pr, opts, IpmTols{opts.tol_kkt, opts.tol_kkt});

  Mat Qs = pr.Q / obj_scale;
  Vec qs = pr.q / obj_scale;
  IpmProblem scaled{Qs, qs, pr.A, pr.b, pr.C, pr.d};
  IpmTols tols{std::max(opts.tol_kkt / obj_scale, 1e-9), opts.tol_kkt};
  IpmResult r = ipm_solve_normalized(scaled, opts, tols);
  r.lambda *= obj_scale;
  r.nu *= obj_scale;
  r.kkt_max = residuals_at(pr, r.z, r.lambda, r.nu).max();
  return r;
}

// Phase-1 for  A z <= b, C z = d: minimize the worst inequality violation t
// while keeping the equalities hard. The start is strictly feasible by
// construction, so this solve never recurses into another phase-1.
Scalar phase1_margin(const Mat& A, const Vec& b, const Mat& C, const Vec& d,
                     const QpSolveOptions& opts) {
  const Index n = A.cols(), m = A.rows(), p = d.size();
  if (m == 0) return -1.0;
  Mat A1(m + 1, n + 1);
  A1.setZero();
  A1.topLeftCorner(m, n) = A;
  A1.topRightCorner(m, 1).setConstant(-1.0);
  A1(m, n) = -1.0;  // t >= -1 keeps the problem bounded
  Vec b1(m + 1);
  b1.head(m) = b;
  b1[m] = 1.0;
  Mat C1 = Mat::Zero(p, n + 1);
  if (p > 0) C1.leftCols(n) = C;
  Mat Q1 = 1e-10 * Mat::Identity(n + 1, n + 1);
  Vec q1 = Vec::Zero(n + 1);
  q1[n] = 1.0;
  QpSolveOptions o1 = opts;
  o1.tol_kkt = std::max(opts.tol_kkt, 1e-9);
  IpmProblem pr{Q1, q1, A1, b1, C1, d};
  IpmResult r = ipm_solve(pr, o1);
  return r.z[n];
}

}  // namespace

QpSolution solve_qp(const AffineQp& qp, const Vec& param, const QpSolveOptions& opts) {
  if (param.size() != qp.k()) throw DataError("solve_qp: parameter dimension mismatch");
  Vec b_eff = qp.b_in - qp.G_in * param;
  Vec d_eff = qp.d_eq - qp.H_eq * param;
  IpmProblem pr{qp.Q, qp.q, qp.A_in, b_eff, qp.C_eq, d_eff};
  IpmResult r = ipm_solve(pr, opts);

  QpSolution sol;
  sol.z_star = r.z;
  sol.lambda_star = r.lambda;
  sol.nu_star = r.nu;
  sol.iterations = r.iterations;
  sol.kkt_residual = r.kkt_max;
  sol.status = r.status;

  if (r.status != QpStatus::Optimal) {
    const Scalar margin = phase1_margin(qp.A_in, b_eff, qp.C_eq, d_eff, opts);
    sol.slater_margin = margin;
    sol.status = margin > opts.infeas_tol ? QpStatus::Infeasible : QpStatus::MaxIter;
  }
  return sol;
}

KktResiduals kkt_residual(const AffineQp& qp, const Vec& param, const QpSolution& sol) {
  if (param.size() != qp.k()) throw DataError("kkt_residual: parameter dimension mismatch");
  Vec b_eff = qp.b_in - qp.G_in * param;
  Vec d_eff = qp.d_eq - qp.H_eq * param;
  IpmProblem pr{qp.Q, qp.q, qp.A_in, b_eff, qp.C_eq, d_eff};
  return residuals_at(pr, sol.z_star, sol.lambda_star, sol.nu_star);
}

namespace {

// Mehrotra loop specialized for boxed LPs: the bound barriers enter the
// reduced system as diagonal terms, so the factorization only carries the
// genuine rows. Returns iterates with lambda, mu_lo, mu_hi > 0.
struct BoxedIterates {
  Vec x, s, lambda, nu, mu_lo, mu_hi;
  QpStatus status = QpStatus::MaxIter;
  int iterations = 0;
};

BoxedIterates boxed_lp_loop(const BoxedLp& lp, const QpSolveOptions& opts) {
  const Index n = lp.q.size(), m = lp.b.size(), p = lp.d.size();
  const Scalar obj_scale = std::max(1.0, lp.q.size() ? lp.q.cwiseAbs().maxCoeff() : 1.0);
  const Vec q = lp.q / obj_scale;
  const Scalar tol_stat = std::max(opts.tol_kkt / obj_scale, 1e-9);
  const Scalar tol_pri = opts.tol_kkt;

  BoxedIterates it;
  // Strictly interior start: midpoint of the box, shifted row slacks.
  it.x = 0.5 * (lp.lo + lp.hi);
  it.s = m > 0 ? Vec((lp.b - lp.A * it.x).cwiseMax(1.0)) : Vec(0);
  it.lambda = Vec::Ones(m);
  it.nu = Vec::Zero(p);
  const Vec width = lp.hi - lp.lo;
  Vec s_lo = (0.5 * width).cwiseMax(1e-8);
  Vec s_hi = s_lo;
  it.mu_lo = Vec::Ones(n);
  it.mu_hi = Vec::Ones(n);

  const Index total = m + 2 * n;
  Scalar best_metric = kInf;
  BoxedIterates best = it;
  int stale = 0;

  for (int iter = 0; iter < opts.max_iter; ++iter) {
    Vec r_d = q + it.mu_hi - it.mu_lo;
    if (m > 0) r_d += lp.A.transpose() * it.lambda;
    if (p > 0) r_d += lp.C.transpose() * it.nu;
    Vec r_p1 = p > 0 ? Vec(lp.C * it.x - lp.d) : Vec(0);
    Vec r_p2 = m > 0 ? Vec(lp.A * it.x + it.s - lp.b) : Vec(0);
    Vec r_lo = it.x - lp.lo - s_lo;
    Vec r_hi = lp.hi - it.x - s_hi;
    const Scalar mu =
        ((m > 0 ? it.s.dot(it.lambda) : 0.0) + s_lo.dot(it.mu_lo) + s_hi.dot(it.mu_hi)) /
        static_cast<Scalar>(total);

    Scalar stat = r_d.cwiseAbs().maxCoeff();
    Scalar pri = std::max(r_lo.cwiseAbs().maxCoeff(), r_hi.cwiseAbs().maxCoeff());
    if (m > 0) pri = std::max(pri, r_p2.cwiseAbs().maxCoeff());
    if (p > 0) pri = std::max(pri, r_p1.cwiseAbs().maxCoeff());
    Scalar comp = std::max(s_lo.cwiseProduct(it.mu_lo).maxCoeff(),
                           s_hi.cwiseProduct(it.mu_hi).maxCoeff());
    if (m > 0) comp = std::max(comp, it.s.cwiseProduct(it.lambda).maxCoeff());
    const Scalar metric = std::max(std::max(stat, comp) / tol_stat, pri / tol_pri);

    if (best_metric <= 1e2) {
      if (metric < 0.9 * best_metric) {
        stale = 0;
      } else if (++stale >= 15) {
        it.iterations = iter;
        break;
      }
    }
    if (metric < best_metric) {
      best_metric = metric;
      best = it;
      best.iterations = iter;
    }
    if (metric <= 1.0) {
      it.status = QpStatus::Optimal;
      it.iterations = iter;
      break;
    }

    Vec w_box = it.mu_lo.cwiseQuotient(s_lo) + it.mu_hi.cwiseQuotient(s_hi);
    Mat K = Mat::Zero(n + p, n + p);
    if (m > 0) {
      Vec w_rows = it.lambda.cwiseQuotient(it.s);
      K.topLeftCorner(n, n) = lp.A.transpose() * w_rows.asDiagonal() * lp.A;
    }
    K.topLeftCorner(n, n) += Mat(w_box.asDiagonal());
    if (p > 0) {
      K.topRightCorner(n, p) = lp.C.transpose();
      K.bottomLeftCorner(p, n) = lp.C;
    }
    Eigen::PartialPivLU<Mat> lu(K);

    auto refined_solve = [&](const Vec& rhs) {
      Vec v = lu.solve(rhs);
      v += lu.solve(rhs - K * v);
      return v;
    };

    // Directions for a given complementarity target (rc_*): eliminate the
    // slack and dual updates onto dx, solve the reduced saddle system, then
    // back-substitute.
    auto solve_step = [&](const Vec& rc_rows, const Vec& rc_lo, const Vec& rc_hi) {
      Vec rhs_x = -r_d;
      if (m > 0)
        rhs_x -=
            lp.A.transpose() * ((it.lambda.cwiseProduct(r_p2) - rc_rows).cwiseQuotient(it.s));
      rhs_x -= (rc_lo + it.mu_lo.cwiseProduct(r_lo)).cwiseQuotient(s_lo);
      rhs_x += (rc_hi + it.mu_hi.cwiseProduct(r_hi)).cwiseQuotient(s_hi);
      Vec rhs(n + p);
      rhs.head(n) = rhs_x;
      if (p > 0) rhs.tail(p) = -r_p1;
      Vec sol = refined_solve(rhs);
      Vec dx = sol.head(n);
      Vec dnu = sol.tail(p);
      Vec ds(0), dlambda(0);
      if (m > 0) {
        ds = -lp.A * dx - r_p2;
        dlambda = -(rc_rows + it.lambda.cwiseProduct(ds)).cwiseQuotient(it.s);
      }
      Vec ds_lo = dx + r_lo;
      Vec ds_hi = -dx + r_hi;
      Vec dmu_lo = -(rc_lo + it.mu_lo.cwiseProduct(ds_lo)).cwiseQuotient(s_lo);
      Vec dmu_hi = -(rc_hi + it.mu_hi.cwiseProduct(ds_hi)).cwiseQuotient(s_hi);
      return std::make_tuple(dx, dnu, ds, dlambda, ds_lo, ds_hi, dmu_lo, dmu_hi);
    };

    auto max_step = [](const Vec& v, const Vec& dv) {
      Scalar a = 1.0;
      for (Index i = 0; i < v.size(); ++i)
        if (dv[i] < 0.0) a = std::min(a, -v[i] / dv[i]);
      return a;
    };

    // Predictor.
    Vec rc_rows_a = m > 0 ? Vec(it.lambda.cwiseProduct(it.s)) : Vec(0);
    Vec rc_lo_a = it.mu_lo.cwiseProduct(s_lo);
    Vec rc_hi_a = it.mu_hi.cwiseProduct(s_hi);
    auto [dx_a, dnu_a, ds_a, dl_a, dslo_a, dshi_a, dmlo_a, dmhi_a] =
        solve_step(rc_rows_a, rc_lo_a, rc_hi_a);
    Scalar ap = std::min({max_step(s_lo, dslo_a), max_step(s_hi, dshi_a),
                          m > 0 ? max_step(it.s, ds_a) : 1.0});
    Scalar ad = std::min({max_step(it.mu_lo, dmlo_a), max_step(it.mu_hi, dmhi_a),
                          m > 0 ? max_step(it.lambda, dl_a) : 1.0});
    Scalar mu_aff = ((m > 0 ? (it.s + ap * ds_a).dot(it.lambda + ad * dl_a) : 0.0) +
                     (s_lo + ap * dslo_a).dot(it.mu_lo + ad * dmlo_a) +
                     (s_hi + ap * dshi_a).dot(it.mu_hi + ad * dmhi_a)) /
                    static_cast<Scalar>(total);
    Scalar sigma = std::pow(std::min(1.0, std::max(0.0, mu_aff / std::max(mu, 1e-300))), 3);

    // Corrector.
    Vec rc_rows = m > 0 ? Vec(rc_rows_a + dl_a.cwiseProduct(ds_a) -
                              Vec::Constant(m, sigma * mu))
                        : Vec(0);
    Vec rc_lo = rc_lo_a + dmlo_a.cwiseProduct(dslo_a) - Vec::Constant(n, sigma * mu);
    Vec rc_hi = rc_hi_a + dmhi_a.cwiseProduct(dshi_a) - Vec::Constant(n, sigma * mu);
    auto [dx, dnu, ds, dlambda, dslo, dshi, dmlo, dmhi] = solve_step(rc_rows, rc_lo, rc_hi);
    const Scalar tau = std::min(0.999, std::max(0.995, 1.0 - 10.0 * mu));
    ap = std::min(1.0, tau * std::min({max_step(s_lo, dslo), max_step(s_hi, dshi),
                                       m > 0 ? max_step(it.s, ds) : 1.0}));
    ad = std::min(1.0, tau * std::min({max_step(it.mu_lo, dmlo), max_step(it.mu_hi, dmhi),
                                       m > 0 ? max_step(it.lambda, dlambda) : 1.0}));

    it.x += ap * dx;
    s_lo += ap * dslo;
    s_hi += ap * dshi;
    if (m > 0) {
      it.s += ap * ds;
      it.lambda += ad * dlambda;
    }
    it.mu_lo += ad * dmlo;
    it.mu_hi += ad * dmhi;
    if (p > 0) it.nu += ad * dnu;
    it.iterations = iter + 1;
    if (std::max(ap, ad) < 1e-10) break;
  }

  if (it.status != QpStatus::Optimal) {
    best.status = QpStatus::MaxIter;
    best.lambda *= obj_scale;
    best.nu *= obj_scale;
    best.mu_lo *= obj_scale;
    best.mu_hi *= obj_scale;
    return best;
  }
  it.lambda *= obj_scale;
  it.nu *= obj_scale;
  it.mu_lo *= obj_scale;
  it.mu_hi *= obj_scale;
  return it;
}

}  // namespace

BoxedLpResult solve_boxed_lp(const BoxedLp& lp, const QpSolveOptions& opts) {
  const Index n = lp.q.size(), m = lp.b.size(), p = lp.d.size();
  if (lp.lo.size() != n || lp.hi.size() != n) throw DataError("solve_boxed_lp: box size mismatch");
  for (Index i = 0; i < n; ++i) {
    if (!(lp.lo[i] <= lp.hi[i]) || !std::isfinite(lp.lo[i]) || !std::isfinite(lp.hi[i]))
      throw DataError("solve_boxed_lp: every variable needs a finite box");
  }
  if (n == 0) {
    BoxedLpResult empty;
    empty.x = Vec(0);
    empty.status = QpStatus::Optimal;
    empty.objective = 0.0;
    empty.dual_bound = 0.0;
    return empty;
  }

  BoxedIterates it = boxed_lp_loop(lp, opts);
  BoxedLpResult out;
  out.iterations = it.iterations;
  out.x = it.x;
  out.objective = lp.q.dot(it.x);

  if (it.status != QpStatus::Optimal) {
    // Classify: relax rows and equalities jointly, boxes stay hard.
    BoxedLp relax;
    const Index rows = m + 2 * p;
    relax.q = Vec::Zero(n + 1);
    relax.q[n] = 1.0;
    relax.A = Mat::Zero(rows, n + 1);
    relax.b = Vec::Zero(rows);
    Index row = 0;
    for (Index i = 0; i < m; ++i, ++row) {
      relax.A.block(row, 0, 1, n) = lp.A.row(i);
      relax.A(row, n) = -1.0;
      relax.b[row] = lp.b[i];
    }
    for (Index i = 0; i < p; ++i) {
      relax.A.block(row, 0, 1, n) = lp.C.row(i);
      relax.A(row, n) = -1.0;
      relax.b[row] = lp.d[i];
      ++row;
      relax.A.block(row, 0, 1, n) = -lp.C.row(i);
      relax.A(row, n) = -1.0;
      relax.b[row] = -lp.d[i];
      ++row;
    }
    relax.C = Mat(0, n + 1);
    relax.d = Vec(0);
    relax.lo = Vec(n + 1);
    relax.hi = Vec(n + 1);
    relax.lo.head(n) = lp.lo;
    relax.hi.head(n) = lp.hi;
    // Generous violation range; only the optimal sign matters.
    Scalar worst = 1.0;
    {
      Vec mid = 0.5 * (lp.lo + lp.hi);
      if (m > 0) worst = std::max(worst, (lp.A * mid - lp.b).cwiseAbs().maxCoeff());
      if (p > 0) worst = std::max(worst, (lp.C * mid - lp.d).cwiseAbs().maxCoeff());
      Scalar reach = 0.0;
      if (m > 0) reach = std::max(reach, lp.A.cwiseAbs().rowwise().sum().maxCoeff());
      if (p > 0) reach = std::max(reach, lp.C.cwiseAbs().rowwise().sum().maxCoeff());
      worst += reach * (lp.hi - lp.lo).cwiseAbs().maxCoeff() + 1.0;
    }
    relax.lo[n] = -1.0;
    relax.hi[n] = worst;
    QpSolveOptions o1 = opts;
    o1.tol_kkt = std::max(opts.tol_kkt, 1e-9);
    BoxedIterates ph = boxed_lp_loop(relax, o1);
    if (ph.status == QpStatus::Optimal && ph.x[n] > opts.infeas_tol) {
      out.status = QpStatus::Infeasible;
      return out;
    }
    out.status = QpStatus::MaxIter;
  } else {
    out.status = QpStatus::Optimal;
  }

  // Rigorous lower bound on the minimum: absorb the stationarity residual
  // into the box duals (valid because all variables are boxed).
  Vec mu_hi = it.mu_hi;
  Vec mu_lo = it.mu_lo;
  Vec resid = lp.q + mu_hi - mu_lo;
  if (m > 0) resid += lp.A.transpose() * it.lambda;
  if (p > 0) resid += lp.C.transpose() * it.nu;
  mu_hi += (-resid).cwiseMax(0.0);
  mu_lo += resid.cwiseMax(0.0);
  Scalar bound = -mu_hi.dot(lp.hi) + mu_lo.dot(lp.lo);
  if (m > 0) bound -= it.lambda.dot(lp.b);
  if (p > 0) bound -= it.nu.dot(lp.d);
  out.dual_bound = bound;
  return out;
}

}  // namespace dfl
