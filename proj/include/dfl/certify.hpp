#pragma once

#include <string>
#include <vector>

#include "dfl/forecaster.hpp"
#include "dfl/pipeline.hpp"

namespace dfl {

// Pre-activation interval bounds per layer, sound for every input in the
// attack box.
struct LayerBounds {
  std::vector<Vec> lower;
  std::vector<Vec> upper;
};

// Input box [x - eps, x + eps] intersected with [0,1] on attackable
// coordinates, degenerate elsewhere, propagated through positive/negative
// weight splits.
LayerBounds ibp_bounds(const MlpParams& mlp, const Vec& x, Scalar eps,
                       const std::vector<bool>& attack_mask);

enum class RowSense { LE, EQ, GE };

struct MilpRow {
  Vec coeffs;  // dense over all declared variables
  RowSense sense = RowSense::LE;
  Scalar rhs = 0.0;
  std::string label;  // provenance block: nn / dispatch-kkt / redispatch-kkt / budget
};

// Linear objective (maximized), linear rows, binary index set and
// per-variable bounds. Big-M constants are baked into the rows.
struct MilpModel {
  Vec objective;
  std::vector<MilpRow> rows;
  std::vector<Index> binaries;
  Vec lo;
  Vec hi;
  std::vector<std::string> var_names;

  Index n_vars() const { return objective.size(); }
  Index add_var(const std::string& name, Scalar lower, Scalar upper, bool binary = false);
  void add_row(const Vec& coeffs, RowSense sense, Scalar rhs, const std::string& label);
  void validate() const;

  // Text export in the LP-file grammar (Maximize / Subject To / Bounds /
  // Binaries / End) for cross-checks against external solvers.
  std::string export_lp() const;
};

// Appends the mixed-integer ReLU encoding of the network between the given
// input variables and fresh forecast variables. Units with l >= 0 become
// identity rows, u <= 0 become zero variables, the rest get the four big-M
// rows plus one binary. The terminal ReLU is encoded like a hidden unit with
// its own bounds. Returns the forecast variable indices.
std::vector<Index> encode_nn(MilpModel& model, const MlpParams& mlp, const LayerBounds& bounds,
                             const std::vector<Index>& input_vars, const std::string& label);

struct KktFragment {
  std::vector<Index> z_vars;
  std::vector<Index> lambda_vars;
  std::vector<Index> nu_vars;
  std::vector<Index> comp_binaries;
};

// Appends the exact stationarity/equality rows plus the big-M
// complementarity linearization (one binary per inequality row) of the QP's
// KKT system. Parameter columns attach to the caller-provided variables so
// fragments can be chained.
KktFragment encode_kkt(MilpModel& model, const AffineQp& qp, Scalar big_m,
                       const std::vector<Index>& param_vars, const Vec& z_lo, const Vec& z_hi,
                       const std::string& label);

struct CertModel {
  MilpModel milp;
  std::vector<Index> input_vars;  // perturbed feature variables
  std::vector<Index> yhat_vars;
  KktFragment dispatch;
  KktFragment redispatch;
  Vec x_nominal;
  std::vector<bool> attack_mask;
};

// Assembles the exact input-space attack MILP: perturbed inputs -> ReLU
// network -> dispatch KKT -> redispatch KKT, maximizing the task cost. Both
// stages are encoded unregularized (gamma = 0) so the model is exactly
// linear. Certification w.r.t. susceptance is rejected (bilinear).
CertModel assemble_cert(const MlpParams& mlp, const GridSpec& grid, const Vec& x, const Vec& y,
                        Scalar eps, const UnpredictableParams& phi,
                        const std::vector<bool>& attack_mask, Scalar big_m = 1e5);

enum class MilpStatus { Optimal, Infeasible, GapLimit, NodeLimit };

struct MilpResult {
  MilpStatus status = MilpStatus::NodeLimit;
  Scalar objective = -std::numeric_limits<Scalar>::infinity();
  Vec assignment;
  long nodes = 0;
  Scalar gap = std::numeric_limits<Scalar>::infinity();
  std::vector<std::string> warnings;  // e.g. duals within 1% of big-M
};

struct MilpLimits {
  long max_nodes = 2000000;
  Scalar gap_abs = 1e-6;
  Scalar gap_rel = 1e-4;
  Scalar time_limit_sec = 0.0;  // 0 = no limit
  // Optional warm lower bound from a known feasible point (e.g. a PGD
  // attack); pruning starts from it but it is only reported as the
  // incumbent objective once the search proves it attainable.
  Scalar warm_lower_bound = -std::numeric_limits<Scalar>::infinity();
};

// Best-first branch and bound over the binaries with interior-point LP
// relaxations; branches on the most fractional binary, prunes on the
// incumbent, and never reports a gap-limited result as optimal.
MilpResult solve_milp(const MilpModel& model, const MilpLimits& limits = {});

// Feeds the MILP attack back through the pure-LP pipeline (gamma = 0) and
// returns the re-solved task cost.
Scalar verify_attack(const CertModel& cert, const MilpResult& res, const MlpParams& mlp,
                     const GridSpec& grid, const Vec& y, const UnpredictableParams& phi);

}  // namespace dfl
