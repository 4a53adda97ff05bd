#include "dfl/tasks.hpp"

#include <algorithm>

namespace dfl {

namespace {

// The regularizer exists to make the linear stages strictly convex with a
// well-conditioned KKT system; its strength must track the cost scale or it
// vanishes relative to dispatch penalties in the thousands. gamma = 0 stays
// exact for the certification path.
Scalar effective_gamma(Scalar gamma, Scalar cost_scale) {
  if (gamma == 0.0) return 0.0;
  return std::max(gamma, 1e-6 * cost_scale);
}

}  // namespace

DispatchModel build_dispatch(const GridSpec& grid, Scalar gamma) {
  const Incidence inc = incidence(grid);
  const Index G = grid.n_gen(), N = grid.n_bus, L = grid.n_line(), D = grid.n_load();
  const Index n = G + N + D;
  const Index m = 2 * G + 2 * L + D;
  const Index p = N + 1;

  DispatchModel md;
  md.n_gen = G;
  md.n_bus = N;
  md.n_load = D;
  md.n_line = L;
  md.off_pg = 0;
  md.off_theta = G;
  md.off_slack = G + N;
  md.qp = make_qp(n, m, p, /*k=*/D);

  const Scalar cost_scale = std::max(grid.gen_costs().maxCoeff(), grid.c_slack);
  md.qp.Q = effective_gamma(gamma, cost_scale) * Mat::Identity(n, n);
  md.qp.q.segment(md.off_pg, G) = grid.gen_costs();
  md.qp.q.segment(md.off_slack, D).setConstant(grid.c_slack);

  const Vec b = grid.susceptances();
  const Mat flow = b.asDiagonal() * inc.A;  // L x N, line flows from angles

  Index row = 0;
  md.row_pmax = row;
  md.qp.A_in.block(row, md.off_pg, G, G) = Mat::Identity(G, G);
  md.qp.b_in.segment(row, G) = grid.gen_p_max();
  row += G;
  md.row_pmin = row;
  md.qp.A_in.block(row, md.off_pg, G, G) = -Mat::Identity(G, G);
  md.qp.b_in.segment(row, G) = -grid.gen_p_min();
  row += G;
  md.row_fup = row;
  md.qp.A_in.block(row, md.off_theta, L, N) = flow;
  md.qp.b_in.segment(row, L) = grid.flow_limits();
  row += L;
  md.row_flo = row;
  md.qp.A_in.block(row, md.off_theta, L, N) = -flow;
  md.qp.b_in.segment(row, L) = grid.flow_limits();
  row += L;
  md.row_spos = row;
  md.qp.A_in.block(row, md.off_slack, D, D) = -Mat::Identity(D, D);

  // Nodal balance B theta = Cg P_g - Cl (y_hat - s), written as
  // -Cg P_g + B theta - Cl s + Cl y_hat = 0.
  const Mat B = bus_susceptance_matrix(inc, b);
  md.qp.C_eq.block(0, md.off_pg, N, G) = -inc.Cg;
  md.qp.C_eq.block(0, md.off_theta, N, N) = B;
  md.qp.C_eq.block(0, md.off_slack, N, D) = -inc.Cl;
  md.qp.H_eq.topRows(N) = inc.Cl;
  md.qp.C_eq(N, md.off_theta + grid.ref_bus) = 1.0;

  md.qp.validate();
  return md;
}

RedispatchModel build_redispatch(const GridSpec& grid, const Vec& b, Scalar gamma) {
  if (b.size() != grid.n_line()) throw DataError("build_redispatch: susceptance size mismatch");
  if (b.minCoeff() <= 0.0) throw DataError("build_redispatch: susceptance must be > 0");
  const Incidence inc = incidence(grid);
  const Index G = grid.n_gen(), N = grid.n_bus, L = grid.n_line(), D = grid.n_load();
  const Index n = D + G + N;
  const Index m = 2 * L + D + G;
  const Index p = N + 1;

  RedispatchModel md;
  md.n_gen = G;
  md.n_bus = N;
  md.n_load = D;
  md.n_line = L;
  md.off_pls = 0;
  md.off_pgs = D;
  md.off_theta = D + G;
  md.b = b;
  md.qp = make_qp(n, m, p, /*k=*/D + G);

  md.qp.Q = effective_gamma(gamma, grid.c_ls) * Mat::Identity(n, n);
  md.qp.q.segment(md.off_pls, D).setConstant(grid.c_ls);
  md.qp.q.segment(md.off_pgs, G).setConstant(grid.c_gs);

  const Mat flow = b.asDiagonal() * inc.A;

  Index row = 0;
  md.row_fup = row;
  md.qp.A_in.block(row, md.off_theta, L, N) = flow;
  md.qp.b_in.segment(row, L) = grid.flow_limits();
  row += L;
  md.row_flo = row;
  md.qp.A_in.block(row, md.off_theta, L, N) = -flow;
  md.qp.b_in.segment(row, L) = grid.flow_limits();
  row += L;
  md.row_lspos = row;
  md.qp.A_in.block(row, md.off_pls, D, D) = -Mat::Identity(D, D);
  row += D;
  md.row_gspos = row;
  md.qp.A_in.block(row, md.off_pgs, G, G) = -Mat::Identity(G, G);

  // B theta = Cg (P_g_star - P_gs) - Cl (y - P_ls), written as
  // -Cl P_ls + Cg P_gs + B theta + Cl y - Cg P_g_star = 0.
  const Mat B = bus_susceptance_matrix(inc, b);
  md.qp.C_eq.block(0, md.off_pls, N, D) = -inc.Cl;
  md.qp.C_eq.block(0, md.off_pgs, N, G) = inc.Cg;
  md.qp.C_eq.block(0, md.off_theta, N, N) = B;
  md.qp.H_eq.block(0, 0, N, D) = inc.Cl;
  md.qp.H_eq.block(0, D, N, G) = -inc.Cg;
  md.qp.C_eq(N, md.off_theta + grid.ref_bus) = 1.0;

  md.qp.validate();
  return md;
}

DispatchDecision extract_dispatch(const DispatchModel& model, const QpSolution& sol) {
  DispatchDecision d;
  d.p_g = sol.z_star.segment(model.off_pg, model.n_gen);
  d.theta = sol.z_star.segment(model.off_theta, model.n_bus);
  d.slack = sol.z_star.segment(model.off_slack, model.n_load);
  return d;
}

RedispatchDecision extract_redispatch(const RedispatchModel& model, const QpSolution& sol) {
  RedispatchDecision d;
  d.p_ls = sol.z_star.segment(model.off_pls, model.n_load);
  d.p_gs = sol.z_star.segment(model.off_pgs, model.n_gen);
  d.theta = sol.z_star.segment(model.off_theta, model.n_bus);
  return d;
}

Scalar task_cost(const Vec& p_g, const Vec& p_ls, const Vec& p_gs, const GridSpec& grid) {
  if (p_g.size() != grid.n_gen() || p_ls.size() != grid.n_load() || p_gs.size() != grid.n_gen())
    throw DataError("task_cost: dimension mismatch");
  return grid.gen_costs().dot(p_g) + grid.c_ls * p_ls.sum() + grid.c_gs * p_gs.sum();
}

}  // namespace dfl
