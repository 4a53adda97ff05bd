#pragma once

#include "dfl/grid.hpp"
#include "dfl/qp.hpp"

namespace dfl {

// Strict-convexity regularizer added to the linear dispatch objectives so
// solutions are unique and the KKT Jacobian stays nonsingular. The MILP
// certification path builds the stages with gamma = 0 instead.
inline constexpr Scalar kGammaReg = 1e-4;

// Stage one: decide generator set points from the forecast load.
// Decision z = (P_g, theta, s); parameter slot = forecast y_hat.
struct DispatchModel {
  AffineQp qp;
  Index n_gen = 0, n_bus = 0, n_load = 0, n_line = 0;
  Index off_pg = 0, off_theta = 0, off_slack = 0;       // column offsets
  Index row_pmax = 0, row_pmin = 0, row_fup = 0, row_flo = 0, row_spos = 0;
};

// Stage two: reconcile the realized load via shedding and storage.
// Decision z = (P_ls, P_gs, theta); parameter slot = (y_true, P_g_star).
// The susceptance vector is baked into the constraint matrices, so
// gradients w.r.t. it flow through the d_A/d_C blocks of qp_backward.
struct RedispatchModel {
  AffineQp qp;
  Index n_gen = 0, n_bus = 0, n_load = 0, n_line = 0;
  Index off_pls = 0, off_pgs = 0, off_theta = 0;
  Index row_fup = 0, row_flo = 0, row_lspos = 0, row_gspos = 0;
  Vec b;  // susceptance used for this instance
};

struct DispatchDecision {
  Vec p_g;
  Vec theta;
  Vec slack;
};

struct RedispatchDecision {
  Vec p_ls;
  Vec p_gs;
  Vec theta;
};

DispatchModel build_dispatch(const GridSpec& grid, Scalar gamma = kGammaReg);
RedispatchModel build_redispatch(const GridSpec& grid, const Vec& b, Scalar gamma = kGammaReg);

DispatchDecision extract_dispatch(const DispatchModel& model, const QpSolution& sol);
RedispatchDecision extract_redispatch(const RedispatchModel& model, const QpSolution& sol);

// Task-aware cost c_g'P_g + c_ls'P_ls + c_gs'P_gs (penalties are scalar
// per-unit prices applied uniformly).
Scalar task_cost(const Vec& p_g, const Vec& p_ls, const Vec& p_gs, const GridSpec& grid);

}  // namespace dfl
