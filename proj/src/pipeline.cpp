#include "dfl/pipeline.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>

namespace dfl {

namespace {

const char* status_name(QpStatus s) {
  switch (s) {
    case QpStatus::Optimal: return "Optimal";
    case QpStatus::MaxIter: return "MaxIter";
    case QpStatus::Infeasible: return "Infeasible";
  }
  return "?";
}

}  // namespace

PipelineOutput infer(const MlpParams& theta, const Vec& x, const Vec& y,
                     const UnpredictableParams& phi, const GridSpec& grid, Scalar gamma) {
  if (y.size() != grid.n_load()) throw DataError("infer: load dimension mismatch");
  if (phi.b.size() != grid.n_line()) throw DataError("infer: susceptance dimension mismatch");
  if (phi.b.minCoeff() <= 0.0) throw DataError("infer: susceptance must be > 0");

  PipelineOutput out;
  out.y_hat = mlp_forward(theta, x, &out.mlp_tape);

  out.stage1 = build_dispatch(grid, gamma);
  out.sol1 = solve_qp(out.stage1.qp, out.y_hat);
  if (out.sol1.status != QpStatus::Optimal)
    throw SolverError(std::string("infer: dispatch stage ") + status_name(out.sol1.status) +
                      " (kkt_residual=" + std::to_string(out.sol1.kkt_residual) + ")");
  out.dispatch = extract_dispatch(out.stage1, out.sol1);

  out.stage2 = build_redispatch(grid, phi.b, gamma);
  out.param2 = Vec(grid.n_load() + grid.n_gen());
  out.param2.head(grid.n_load()) = y;
  out.param2.tail(grid.n_gen()) = out.dispatch.p_g;
  out.sol2 = solve_qp(out.stage2.qp, out.param2);
  if (out.sol2.status != QpStatus::Optimal) {
    if (const char* dump_path = std::getenv("DFL_DUMP_FAILED_QP")) {
      std::ofstream dump(dump_path);
      dump.precision(17);
      dump << out.stage2.qp.dump() << "param\n" << out.param2.transpose() << "\n";
    }
    throw SolverError(std::string("infer: redispatch stage ") + status_name(out.sol2.status) +
                      " (kkt_residual=" + std::to_string(out.sol2.kkt_residual) + ")");
  }
  out.redispatch = extract_redispatch(out.stage2, out.sol2);

  out.cost = task_cost(out.dispatch.p_g, out.redispatch.p_ls, out.redispatch.p_gs, grid);
  return out;
}

PipelineGrads pipeline_grads(const MlpParams& theta, const Vec& x, const Vec& y,
                             const UnpredictableParams& phi, const GridSpec& grid,
                             const PipelineOutput& out) {
  (void)x;
  (void)y;
  (void)phi;
  const Index G = grid.n_gen(), N = grid.n_bus, L = grid.n_line(), D = grid.n_load();

  // Stage two: cost depends on (P_ls, P_gs) directly.
  Vec g2 = Vec::Zero(out.stage2.qp.n());
  g2.segment(out.stage2.off_pls, D).setConstant(grid.c_ls);
  g2.segment(out.stage2.off_pgs, G).setConstant(grid.c_gs);
  QpGradients back2;
  try {
    back2 = qp_backward(out.stage2.qp, out.param2, out.sol2, g2);
  } catch (const SingularJacobianError& e) {
    throw SingularJacobianError(std::string("redispatch stage: ") + e.what());
  }

  // Stage one: direct generation-cost term plus the redispatch coupling
  // through its parameter slot (y, P_g_star).
  Vec g1 = Vec::Zero(out.stage1.qp.n());
  g1.segment(out.stage1.off_pg, G) = grid.gen_costs() + back2.d_param.tail(G);
  QpGradients back1;
  try {
    back1 = qp_backward(out.stage1.qp, out.y_hat, out.sol1, g1);
  } catch (const SingularJacobianError& e) {
    throw SingularJacobianError(std::string("dispatch stage: ") + e.what());
  }

  PipelineGrads pg;
  pg.ill_conditioned = back1.ill_conditioned || back2.ill_conditioned;
  pg.d_theta = mlp_backward(theta, out.mlp_tape, back1.d_param, &pg.d_x);

  // Susceptance enters the redispatch rows diag(b)A (both flow signs) and
  // the balance block A' diag(b) A; contract d_A/d_C against those
  // placements line by line.
  const Incidence inc = incidence(grid);
  pg.d_phi_b = Vec::Zero(L);
  const Mat dC_theta = back2.d_C.block(0, out.stage2.off_theta, N, N);
  for (Index l = 0; l < L; ++l) {
    const Vec a_l = inc.A.row(l).transpose();
    Scalar g = 0.0;
    g += back2.d_A.row(out.stage2.row_fup + l).segment(out.stage2.off_theta, N).dot(a_l);
    g -= back2.d_A.row(out.stage2.row_flo + l).segment(out.stage2.off_theta, N).dot(a_l);
    g += a_l.dot(dC_theta * a_l);
    pg.d_phi_b[l] = g;
  }
  return pg;
}

Scalar regret(const MlpParams& theta, const Vec& x, const Vec& y,
              const UnpredictableParams& phi, const GridSpec& grid) {
  PipelineOutput forecast_run = infer(theta, x, y, phi, grid);

  // Hindsight run: dispatch on the realized load itself.
  DispatchModel stage1 = build_dispatch(grid);
  QpSolution sol1 = solve_qp(stage1.qp, y);
  if (sol1.status != QpStatus::Optimal) throw SolverError("regret: hindsight dispatch failed");
  DispatchDecision d1 = extract_dispatch(stage1, sol1);
  RedispatchModel stage2 = build_redispatch(grid, phi.b);
  Vec param2(grid.n_load() + grid.n_gen());
  param2.head(grid.n_load()) = y;
  param2.tail(grid.n_gen()) = d1.p_g;
  QpSolution sol2 = solve_qp(stage2.qp, param2);
  if (sol2.status != QpStatus::Optimal) throw SolverError("regret: hindsight redispatch failed");
  RedispatchDecision d2 = extract_redispatch(stage2, sol2);
  const Scalar hindsight = task_cost(d1.p_g, d2.p_ls, d2.p_gs, grid);

  return forecast_run.cost - hindsight;
}

namespace {

// Lower-level decision: argmin over [z_lo, z_hi] of (z - y_hat)^2.
Scalar clamp_decision(const Prop1Toy& toy, Scalar y_hat) {
  return std::min(std::max(y_hat, toy.z_lo), toy.z_hi);
}

}  // namespace

Prop1Result demo_misformulation(const Prop1Toy& toy) {
  const Index n = toy.x.size();
  if (toy.y.size() != n || n == 0) throw DataError("demo_misformulation: bad toy");

  // Hindsight objective values l(z_star; y) per sample.
  Vec l_star(n);
  for (Index i = 0; i < n; ++i) {
    const Scalar zs = clamp_decision(toy, toy.y[i]);
    l_star[i] = (zs - toy.y[i]) * (zs - toy.y[i]);
  }

  auto bilevel_value = [&](Scalar th) {
    Scalar v = 0.0;
    for (Index i = 0; i < n; ++i) {
      const Scalar yh = th * toy.x[i];
      const Scalar z = clamp_decision(toy, yh);
      const Scalar ell = (z - yh) * (z - yh);
      v += (ell - l_star[i]) * (ell - l_star[i]);
    }
    return v;
  };

  // Relaxed formulation: the decision only needs to be feasible, so each
  // sample picks the best z on a dense grid (plus the clamp candidate so
  // the relaxed value is never above the bilevel one by discretization).
  auto relaxed_value = [&](Scalar th) {
    Scalar v = 0.0;
    for (Index i = 0; i < n; ++i) {
      const Scalar yh = th * toy.x[i];
      Scalar best = std::numeric_limits<Scalar>::infinity();
      for (int gz = 0; gz <= toy.z_grid; ++gz) {
        const Scalar z =
            toy.z_lo + (toy.z_hi - toy.z_lo) * static_cast<Scalar>(gz) / toy.z_grid;
        const Scalar ell = (z - yh) * (z - yh);
        best = std::min(best, (ell - l_star[i]) * (ell - l_star[i]));
      }
      const Scalar zc = clamp_decision(toy, yh);
      const Scalar ellc = (zc - yh) * (zc - yh);
      best = std::min(best, (ellc - l_star[i]) * (ellc - l_star[i]));
      v += best;
    }
    return v;
  };

  Prop1Result res;
  Scalar best8 = std::numeric_limits<Scalar>::infinity();
  Scalar best9 = std::numeric_limits<Scalar>::infinity();
  for (int gt = 0; gt <= toy.theta_grid; ++gt) {
    const Scalar th =
        toy.theta_lo + (toy.theta_hi - toy.theta_lo) * static_cast<Scalar>(gt) / toy.theta_grid;
    const Scalar v8 = relaxed_value(th);
    const Scalar v9 = bilevel_value(th);
    if (v8 < best8) {
      best8 = v8;
      res.theta_relaxed = th;
    }
    if (v9 < best9) {
      best9 = v9;
      res.theta_bilevel = th;
    }
  }
  res.m_train_relaxed = best8;
  res.m_train_bilevel = best9;
  res.m_infer_bilevel = bilevel_value(res.theta_bilevel);
  res.m_infer_relaxed = bilevel_value(res.theta_relaxed);
  return res;
}

Prop1Toy random_prop1_toy(std::uint64_t seed) {
  auto rng = make_rng(seed, /*purpose=*/0x70726f70 /* "prop" */);
  std::uniform_int_distribution<int> nd(2, 8);
  const int n = nd(rng);
  Prop1Toy toy;
  toy.x = uniform_vec(rng, n, 0.5, 2.0);
  toy.y = uniform_vec(rng, n, 0.0, 2.5);
  return toy;
}

}  // namespace dfl
