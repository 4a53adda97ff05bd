#pragma once

#include "dfl/diffqp.hpp"
#include "dfl/forecaster.hpp"
#include "dfl/tasks.hpp"

namespace dfl {

// Fixed-but-uncertain redispatch susceptance. The dispatch stage always
// runs at the nominal values; only the redispatch instance sees b.
struct UnpredictableParams {
  Vec b;
  Vec nominal_b;

  static UnpredictableParams nominal(const GridSpec& grid) {
    UnpredictableParams phi;
    phi.b = grid.susceptances();
    phi.nominal_b = phi.b;
    return phi;
  }
};

struct PipelineOutput {
  Vec y_hat;
  DispatchDecision dispatch;
  RedispatchDecision redispatch;
  Scalar cost = 0.0;
  // Records sufficient for the backward pass.
  MlpTape mlp_tape;
  DispatchModel stage1;
  RedispatchModel stage2;
  QpSolution sol1;
  QpSolution sol2;
  Vec param2;  // (y, P_g_star)
};

// Forecast -> dispatch -> redispatch -> task cost. Throws SolverError with
// stage identification when either solve fails. gamma = 0 selects the
// pure-LP path used by certification cross-checks.
PipelineOutput infer(const MlpParams& theta, const Vec& x, const Vec& y,
                     const UnpredictableParams& phi, const GridSpec& grid,
                     Scalar gamma = kGammaReg);

struct PipelineGrads {
  MlpGrads d_theta;
  Vec d_x;
  Vec d_phi_b;  // per-line susceptance gradient of the redispatch stage
  bool ill_conditioned = false;
};

// Reverse-mode gradients of the task cost w.r.t. network parameters, input
// features and redispatch susceptance, chaining qp_backward through both
// stages. Propagates SingularJacobianError with stage identification.
PipelineGrads pipeline_grads(const MlpParams& theta, const Vec& x, const Vec& y,
                             const UnpredictableParams& phi, const GridSpec& grid,
                             const PipelineOutput& out);

// Task cost of the forecast-driven decision minus the cost when the
// pipeline is re-solved with the realized load in place of the forecast.
Scalar regret(const MlpParams& theta, const Vec& x, const Vec& y,
              const UnpredictableParams& phi, const GridSpec& grid);

// Scalar toy for the two training formulations of a decision problem: one
// treats the decision as any feasible point, the other enforces lower-level
// optimality. Solved by dense grid search; demonstrates that the relaxed
// formulation can mislead inference-time decisions.
struct Prop1Toy {
  Vec x;                // per-sample inputs of the 1-parameter linear model
  Vec y;                // per-sample targets
  Scalar z_lo = 0.0;    // feasible interval for the decision
  Scalar z_hi = 1.0;
  Scalar theta_lo = -1.0;
  Scalar theta_hi = 3.0;
  int theta_grid = 401;
  int z_grid = 401;
};

struct Prop1Result {
  Scalar m_train_relaxed = 0.0;     // training value, feasibility-only formulation
  Scalar m_train_bilevel = 0.0;     // training value, lower-level-optimal formulation
  Scalar m_infer_bilevel = 0.0;     // inference value at the bilevel minimizer
  Scalar m_infer_relaxed = 0.0;     // inference value at the relaxed minimizer
  Scalar theta_relaxed = 0.0;
  Scalar theta_bilevel = 0.0;

  bool chain_holds(Scalar tol = 1e-9) const {
    return m_train_relaxed <= m_train_bilevel + tol &&
           std::abs(m_train_bilevel - m_infer_bilevel) <= tol &&
           m_infer_bilevel <= m_infer_relaxed + tol;
  }
  bool strict_outer(Scalar margin = 1e-6) const {
    return m_infer_relaxed - m_train_relaxed > margin;
  }
};

Prop1Result demo_misformulation(const Prop1Toy& toy);

// Random toy generator for property runs (clamped-decision regime occurs
// with high probability).
Prop1Toy random_prop1_toy(std::uint64_t seed);

}  // namespace dfl
