#include "dfl/diffqp.hpp"

#include <Eigen/Dense>

#include <cmath>

namespace dfl {

QpGradients qp_backward(const AffineQp& qp, const Vec& param, const QpSolution& sol,
                        const Vec& dL_dz) {
  const Index n = qp.n(), m = qp.m(), p = qp.p(), k = qp.k();
  if (sol.status != QpStatus::Optimal)
    throw SolverError("qp_backward: solution is not Optimal");
  if (dL_dz.size() != n) throw DataError("qp_backward: cotangent dimension mismatch");

  const Vec& z = sol.z_star;
  const Vec& lambda = sol.lambda_star;
  const Vec& nu = sol.nu_star;
  Vec ineq = qp.A_in * z + qp.G_in * param - qp.b_in;  // -slack

  QpGradients g;
  g.ill_conditioned = false;
  if (m > 0) {
    Scalar margin = 1e300;
    for (Index j = 0; j < m; ++j) margin = std::min(margin, std::max(lambda[j], -ineq[j]));
    if (margin < 1e-9) g.ill_conditioned = true;
  }

  // Jacobian of the KKT equalities w.r.t. (z, lambda, nu).
  const Index dim = n + m + p;
  Mat K = Mat::Zero(dim, dim);
  K.topLeftCorner(n, n) = qp.Q;
  if (m > 0) {
    K.block(0, n, n, m) = qp.A_in.transpose();
    K.block(n, 0, m, n) = lambda.asDiagonal() * qp.A_in;
    K.block(n, n, m, m) = ineq.asDiagonal();
  }
  if (p > 0) {
    K.block(0, n + m, n, p) = qp.C_eq.transpose();
    K.block(n + m, 0, p, n) = qp.C_eq;
  }

  Vec rhs = Vec::Zero(dim);
  rhs.head(n) = dL_dz;

  Mat Kt = K.transpose();
  Vec v;
  Scalar reg = 0.0;
  for (int attempt = 0; attempt < 3; ++attempt) {
    Mat Ktr = Kt;
    if (reg > 0.0) Ktr += reg * Mat::Identity(dim, dim);
    v = Ktr.partialPivLu().solve(rhs);
    Scalar err = (Ktr * v - rhs).cwiseAbs().maxCoeff();
    if (std::isfinite(err) && err <= 1e-6 * (1.0 + rhs.cwiseAbs().maxCoeff()) && v.allFinite())
      break;
    reg = reg == 0.0 ? 1e-10 : reg * 1e4;
    g.ill_conditioned = true;
    if (attempt == 2 || reg > 1e-2)
      throw SingularJacobianError("qp_backward: KKT matrix singular after regularization");
  }

  Vec vz = v.head(n);
  Vec vl = m > 0 ? Vec(v.segment(n, m)) : Vec(0);
  Vec vn = p > 0 ? Vec(v.tail(p)) : Vec(0);
  Vec lam_vl = m > 0 ? Vec(lambda.cwiseProduct(vl)) : Vec(0);

  g.d_q = -vz;
  g.d_Q = -0.5 * (vz * z.transpose() + z * vz.transpose());
  if (m > 0) {
    g.d_b = lam_vl;
    g.d_A = -lambda * vz.transpose() - lam_vl * z.transpose();
    g.d_G = -lam_vl * param.transpose();
  } else {
    g.d_b = Vec(0);
    g.d_A = Mat(0, n);
    g.d_G = Mat(0, k);
  }
  if (p > 0) {
    g.d_d = vn;
    g.d_C = -nu * vz.transpose() - vn * z.transpose();
    g.d_H = -vn * param.transpose();
  } else {
    g.d_d = Vec(0);
    g.d_C = Mat(0, n);
    g.d_H = Mat(0, k);
  }
  g.d_param = Vec::Zero(k);
  if (m > 0) g.d_param -= qp.G_in.transpose() * lam_vl;
  if (p > 0) g.d_param -= qp.H_eq.transpose() * vn;

  if (!g.d_param.allFinite() || !g.d_q.allFinite() || !g.d_Q.allFinite())
    throw SingularJacobianError("qp_backward: non-finite gradient");
  return g;
}

}  // namespace dfl
