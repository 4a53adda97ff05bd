#pragma once

// Test-only oracles, independent of the library solve paths they check.

#include <cstdlib>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dfl/certify.hpp"
#include "dfl/grid.hpp"
#include "dfl/qp.hpp"

namespace dfl::testing {

inline std::string grids_dir() {
  const char* env = std::getenv("DFL_GRID_DIR");
  return env ? env : "grids";
}

struct OracleSolution {
  Vec z;
  Vec lambda;  // full-length, zero off the active set
  Scalar objective = 0.0;
};

// Brute-force active-set enumeration for strictly convex QPs: solve the
// equality-constrained QP for every subset of active inequalities and keep
// the feasible, dual-feasible candidate with the best objective.
inline std::optional<OracleSolution> active_set_solve(const AffineQp& qp, const Vec& param,
                                                      Scalar tol = 1e-9) {
  const Index n = qp.n(), m = qp.m(), p = qp.p();
  const Vec b_eff = qp.b_in - qp.G_in * param;
  const Vec d_eff = qp.d_eq - qp.H_eq * param;
  std::optional<OracleSolution> best;
  for (unsigned long subset = 0; subset < (1UL << m); ++subset) {
    std::vector<Index> act;
    for (Index j = 0; j < m; ++j)
      if (subset & (1UL << j)) act.push_back(j);
    const Index a = static_cast<Index>(act.size());
    Mat K = Mat::Zero(n + a + p, n + a + p);
    Vec rhs(n + a + p);
    K.topLeftCorner(n, n) = qp.Q;
    rhs.head(n) = -qp.q;
    for (Index i = 0; i < a; ++i) {
      K.block(0, n + i, n, 1) = qp.A_in.row(act[static_cast<size_t>(i)]).transpose();
      K.block(n + i, 0, 1, n) = qp.A_in.row(act[static_cast<size_t>(i)]);
      rhs[n + i] = b_eff[act[static_cast<size_t>(i)]];
    }
    if (p > 0) {
      K.block(0, n + a, n, p) = qp.C_eq.transpose();
      K.block(n + a, 0, p, n) = qp.C_eq;
      rhs.tail(p) = d_eff;
    }
    Eigen::FullPivLU<Mat> lu(K);
    if (!lu.isInvertible()) continue;
    Vec sol = lu.solve(rhs);
    Vec z = sol.head(n);
    Vec lam_act = sol.segment(n, a);
    if (a > 0 && lam_act.minCoeff() < -tol) continue;
    Vec resid = qp.A_in * z - b_eff;
    if (m > 0 && resid.maxCoeff() > tol) continue;
    const Scalar obj = 0.5 * z.dot(qp.Q * z) + qp.q.dot(z);
    if (!best || obj < best->objective - 1e-12) {
      OracleSolution o;
      o.z = z;
      o.lambda = Vec::Zero(m);
      for (Index i = 0; i < a; ++i) o.lambda[act[static_cast<size_t>(i)]] = lam_act[i];
      o.objective = obj;
      best = o;
    }
  }
  return best;
}

// Random strictly convex QP with a guaranteed strictly feasible point.
inline AffineQp random_strict_qp(std::uint64_t seed, Index n, Index m, Index p, Index k,
                                 Vec* param_out = nullptr) {
  auto rng = make_rng(seed, /*purpose=*/0x71706f72 /* "qpor" */);
  AffineQp qp = make_qp(n, m, p, k);
  Mat M(n, n);
  for (Index i = 0; i < n; ++i) M.row(i) = gaussian_vec(rng, n).transpose();
  qp.Q = M.transpose() * M + 0.5 * Mat::Identity(n, n);
  qp.q = gaussian_vec(rng, n);
  for (Index i = 0; i < m; ++i) qp.A_in.row(i) = gaussian_vec(rng, n).transpose();
  for (Index i = 0; i < m; ++i) qp.G_in.row(i) = 0.3 * gaussian_vec(rng, k).transpose();
  while (true) {
    for (Index i = 0; i < p; ++i) qp.C_eq.row(i) = gaussian_vec(rng, n).transpose();
    if (p == 0) break;
    Eigen::ColPivHouseholderQR<Mat> qr(qp.C_eq.transpose());
    if (qr.rank() == p) break;
  }
  for (Index i = 0; i < p; ++i) qp.H_eq.row(i) = 0.3 * gaussian_vec(rng, k).transpose();
  Vec param = gaussian_vec(rng, k);
  Vec z0 = gaussian_vec(rng, n);
  qp.d_eq = qp.C_eq * z0 + qp.H_eq * param;
  qp.b_in = qp.A_in * z0 + qp.G_in * param + uniform_vec(rng, m, 0.1, 1.0);
  if (param_out) *param_out = param;
  return qp;
}

// Relative error between an analytic value and a finite-difference estimate.
// Differences inside the FD noise floor (solve tolerance divided by the
// step) are not disagreements: the analytic side is exact linear algebra
// while the FD side cannot resolve below that level at double precision.
inline Scalar rel_err(Scalar analytic, Scalar fd, Scalar floor_mag = 1e-8,
                      Scalar fd_noise = 1e-5) {
  if (std::abs(analytic - fd) <= fd_noise) return 0.0;
  const Scalar mag = std::max(std::abs(analytic), std::abs(fd));
  if (mag < floor_mag) return 0.0;
  return std::abs(analytic - fd) / mag;
}

// Finite difference of L(data) = g' z*(data) under a single-entry
// perturbation applied by `poke`: central differences at h and 2h combined
// by Richardson extrapolation to suppress truncation error near weakly
// active constraints.
template <typename Poke>
Scalar fd_qp_entry(const AffineQp& qp, const Vec& param, const Vec& g, Poke&& poke, Scalar h) {
  QpSolveOptions opts;
  opts.tol_kkt = 1e-10;
  auto value_at = [&](Scalar d) {
    AffineQp moved = qp;
    Vec param_moved = param;
    poke(moved, param_moved, d);
    QpSolution sol = solve_qp(moved, param_moved, opts);
    if (sol.status != QpStatus::Optimal) throw SolverError("fd_qp_entry: perturbed solve failed");
    return g.dot(sol.z_star);
  };
  const Scalar d1 = (value_at(+h) - value_at(-h)) / (2.0 * h);
  const Scalar d2 = (value_at(+2.0 * h) - value_at(-2.0 * h)) / (4.0 * h);
  return (4.0 * d1 - d2) / 3.0;
}

// Exhaustive enumeration over the binary patterns of a pure-binary model
// (every variable binary or pinned by its bounds): direct row evaluation,
// no LP involved. Returns the best objective or nullopt when every pattern
// is infeasible.
inline std::optional<Scalar> milp_enumerate(const MilpModel& model, Scalar tol = 1e-9) {
  const std::size_t nb = model.binaries.size();
  std::vector<bool> is_binary(static_cast<size_t>(model.n_vars()), false);
  for (Index b : model.binaries) is_binary[static_cast<size_t>(b)] = true;
  for (Index j = 0; j < model.n_vars(); ++j)
    if (!is_binary[static_cast<size_t>(j)] && model.lo[j] != model.hi[j])
      throw DataError("milp_enumerate: oracle requires a pure-binary model");

  std::optional<Scalar> best;
  for (unsigned long pat = 0; pat < (1UL << nb); ++pat) {
    Vec x = model.lo;
    for (std::size_t i = 0; i < nb; ++i)
      x[model.binaries[i]] = (pat & (1UL << i)) ? 1.0 : 0.0;
    bool ok = true;
    for (const auto& row : model.rows) {
      Scalar lhs = 0.0;
      for (Index j = 0; j < row.coeffs.size(); ++j) lhs += row.coeffs[j] * x[j];
      if (row.sense == RowSense::LE && lhs > row.rhs + tol) ok = false;
      if (row.sense == RowSense::GE && lhs < row.rhs - tol) ok = false;
      if (row.sense == RowSense::EQ && std::abs(lhs - row.rhs) > tol) ok = false;
      if (!ok) break;
    }
    if (!ok) continue;
    const Scalar obj = model.objective.dot(x);
    if (!best || obj > *best) best = obj;
  }
  return best;
}

// Test-side recomposition of the two-stage pipeline cost with tight solver
// tolerances, independent of infer(). Used as the finite-difference oracle
// at the composed level.
inline Scalar composed_cost_oracle(const MlpParams& mlp, const Vec& x, const Vec& y,
                                   const Vec& b, const GridSpec& grid) {
  QpSolveOptions tight;
  tight.tol_kkt = 1e-9;
  const Vec y_hat = mlp_forward(mlp, x);
  DispatchModel s1 = build_dispatch(grid);
  QpSolution r1 = solve_qp(s1.qp, y_hat, tight);
  if (r1.status != QpStatus::Optimal) throw SolverError("composed_cost_oracle: stage one");
  DispatchDecision d1 = extract_dispatch(s1, r1);
  RedispatchModel s2 = build_redispatch(grid, b);
  Vec param2(grid.n_load() + grid.n_gen());
  param2.head(grid.n_load()) = y;
  param2.tail(grid.n_gen()) = d1.p_g;
  QpSolution r2 = solve_qp(s2.qp, param2, tight);
  if (r2.status != QpStatus::Optimal) throw SolverError("composed_cost_oracle: stage two");
  RedispatchDecision d2 = extract_redispatch(s2, r2);
  return task_cost(d1.p_g, d2.p_ls, d2.p_gs, grid);
}

struct PipelineFdReport {
  bool d_x_ok = true;
  bool d_b_ok = true;
  Scalar worst_rel = 0.0;
};

// Checks d_x and d_phi_b of pipeline_grads against central finite
// differences of the recomposed cost. Pass thresholds follow the composed
// tolerance (1e-2 relative with an absolute noise floor).
inline PipelineFdReport pipeline_fd_check(const MlpParams& mlp, const Vec& x, const Vec& y,
                                          const UnpredictableParams& phi, const GridSpec& grid,
                                          const PipelineGrads& pg, Scalar rel_tol = 1e-2) {
  PipelineFdReport rep;
  const Scalar hx = 1e-4;
  for (Index i = 0; i < x.size(); ++i) {
    Vec xp = x, xm = x;
    xp[i] += hx;
    xm[i] -= hx;
    const Scalar fd = (composed_cost_oracle(mlp, xp, y, phi.b, grid) -
                       composed_cost_oracle(mlp, xm, y, phi.b, grid)) /
                      (2 * hx);
    const Scalar e = rel_err(pg.d_x[i], fd, 1e-8, 5e-3);
    rep.worst_rel = std::max(rep.worst_rel, e);
    if (e >= rel_tol) rep.d_x_ok = false;
  }
  for (Index l = 0; l < grid.n_line(); ++l) {
    const Scalar hb = 1e-4 * phi.nominal_b[l];
    Vec bp = phi.b, bm = phi.b;
    bp[l] += hb;
    bm[l] -= hb;
    const Scalar fd = (composed_cost_oracle(mlp, x, y, bp, grid) -
                       composed_cost_oracle(mlp, x, y, bm, grid)) /
                      (2 * hb);
    const Scalar e = rel_err(pg.d_phi_b[l], fd, 1e-8, 5e-3);
    rep.worst_rel = std::max(rep.worst_rel, e);
    if (e >= rel_tol) rep.d_b_ok = false;
  }
  return rep;
}

// Inline grid fixtures for tests that do not want file I/O.
inline GridSpec two_bus_grid(Scalar b = 1.0, Scalar flow_limit = 0.6) {
  GridSpec g;
  g.n_bus = 2;
  g.ref_bus = 0;
  g.lines = {{0, 1, b, flow_limit}};
  g.generators = {{0, 1.0, 0.0, 2.0}};
  g.loads = {1};
  g.c_ls = 100.0;
  g.c_gs = 10.0;
  g.c_slack = 100.0;
  validate_grid(g);
  return g;
}

inline GridSpec single_gen_3bus(Scalar flow_limit = 5.0, Scalar cap = 2.0) {
  GridSpec g;
  g.n_bus = 3;
  g.ref_bus = 0;
  g.lines = {{0, 1, 10.0, flow_limit}, {1, 2, 10.0, flow_limit}};
  g.generators = {{0, 1.0, 0.0, cap}};
  g.loads = {2};
  g.c_ls = 100.0;
  g.c_gs = 10.0;
  g.c_slack = 100.0;
  validate_grid(g);
  return g;
}

}  // namespace dfl::testing
