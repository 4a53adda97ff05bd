#include "dfl/certify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <queue>
#include <sstream>

#include "dfl/tasks.hpp"

namespace dfl {

LayerBounds ibp_bounds(const MlpParams& mlp, const Vec& x, Scalar eps,
                       const std::vector<bool>& attack_mask) {
  if (static_cast<Index>(attack_mask.size()) != x.size())
    throw DataError("ibp_bounds: mask size mismatch");
  LayerBounds bounds;
  Vec lo(x.size()), hi(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    if (attack_mask[static_cast<size_t>(i)]) {
      lo[i] = std::max(0.0, x[i] - eps);
      hi[i] = std::min(1.0, x[i] + eps);
    } else {
      lo[i] = hi[i] = x[i];
    }
  }
  const std::size_t d = mlp.layers.size();
  for (std::size_t i = 0; i < d; ++i) {
    const Mat& W = mlp.layers[i].W;
    const Mat Wp = W.cwiseMax(0.0);
    const Mat Wn = W.cwiseMin(0.0);
    Vec pre_lo = Wp * lo + Wn * hi + mlp.layers[i].b;
    Vec pre_hi = Wn * lo + Wp * hi + mlp.layers[i].b;
    bounds.lower.push_back(pre_lo);
    bounds.upper.push_back(pre_hi);
    const bool relu = (i + 1 < d) || mlp.terminal_relu;
    lo = relu ? Vec(pre_lo.cwiseMax(0.0)) : pre_lo;
    hi = relu ? Vec(pre_hi.cwiseMax(0.0)) : pre_hi;
  }
  return bounds;
}

Index MilpModel::add_var(const std::string& name, Scalar lower, Scalar upper, bool binary) {
  const Index idx = n_vars();
  objective.conservativeResize(idx + 1);
  objective[idx] = 0.0;
  lo.conservativeResize(idx + 1);
  hi.conservativeResize(idx + 1);
  lo[idx] = lower;
  hi[idx] = upper;
  var_names.push_back(name);
  if (binary) binaries.push_back(idx);
  return idx;
}

void MilpModel::add_row(const Vec& coeffs, RowSense sense, Scalar rhs, const std::string& label) {
  if (coeffs.size() != n_vars())
    throw InternalError("MilpModel: row width does not match declared variables");
  rows.push_back({coeffs, sense, rhs, label});
}

void MilpModel::validate() const {
  const Index n = n_vars();
  if (lo.size() != n || hi.size() != n) throw DataError("MilpModel: bound arrays mismatch");
  for (Index i = 0; i < n; ++i) {
    if (!std::isfinite(lo[i]) || !std::isfinite(hi[i]) || lo[i] > hi[i])
      throw DataError("MilpModel: variable " + var_names[static_cast<size_t>(i)] +
                      " needs finite ordered bounds");
  }
  for (Index b : binaries) {
    if (b < 0 || b >= n) throw DataError("MilpModel: binary index out of range");
    if (lo[b] < 0.0 || hi[b] > 1.0) throw DataError("MilpModel: binary bounds must be within [0,1]");
  }
  for (const auto& row : rows) {
    if (row.coeffs.size() > n) throw DataError("MilpModel: row references undeclared variables");
    if (!row.coeffs.allFinite() || !std::isfinite(row.rhs))
      throw DataError("MilpModel: non-finite coefficient in row " + row.label);
  }
  if (!objective.allFinite()) throw DataError("MilpModel: non-finite objective");
}

std::string MilpModel::export_lp() const {
  std::ostringstream os;
  os.precision(17);
  auto term = [&](std::ostringstream& s, Scalar c, Index j, bool& first) {
    if (c == 0.0) return;
    if (first) {
      s << (c < 0 ? "- " : "");
      first = false;
    } else {
      s << (c < 0 ? " - " : " + ");
    }
    s << std::abs(c) << " " << var_names[static_cast<size_t>(j)];
  };
  os << "Maximize\n obj: ";
  bool first = true;
  for (Index j = 0; j < n_vars(); ++j) term(os, objective[j], j, first);
  if (first) os << "0 " << (n_vars() ? var_names[0] : "x");
  os << "\nSubject To\n";
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::ostringstream line;
    bool f2 = true;
    for (Index j = 0; j < rows[r].coeffs.size(); ++j) term(line, rows[r].coeffs[j], j, f2);
    if (f2) continue;
    const char* op = rows[r].sense == RowSense::LE ? "<=" : rows[r].sense == RowSense::GE ? ">=" : "=";
    os << " r" << r << ": " << line.str() << " " << op << " " << rows[r].rhs << "\n";
  }
  os << "Bounds\n";
  for (Index j = 0; j < n_vars(); ++j)
    os << " " << lo[j] << " <= " << var_names[static_cast<size_t>(j)] << " <= " << hi[j] << "\n";
  if (!binaries.empty()) {
    os << "Binaries\n";
    for (Index b : binaries) os << " " << var_names[static_cast<size_t>(b)];
    os << "\n";
  }
  os << "End\n";
  return os.str();
}

std::vector<Index> encode_nn(MilpModel& model, const MlpParams& mlp, const LayerBounds& bounds,
                             const std::vector<Index>& input_vars, const std::string& label) {
  const std::size_t d = mlp.layers.size();
  if (bounds.lower.size() != d) throw DataError("encode_nn: bounds do not match network depth");
  std::vector<Index> prev = input_vars;
  for (std::size_t i = 0; i < d; ++i) {
    const Mat& W = mlp.layers[i].W;
    const Vec& bvec = mlp.layers[i].b;
    if (static_cast<Index>(prev.size()) != W.cols())
      throw DataError("encode_nn: input variable count mismatch");
    const Vec& l = bounds.lower[i];
    const Vec& u = bounds.upper[i];
    for (Index j = 0; j < l.size(); ++j)
      if (l[j] > u[j]) throw DataError("encode_nn: inconsistent bounds (l > u)");
    const bool relu = (i + 1 < d) || mlp.terminal_relu;

    // Pre-activation variables tied to the previous layer by affine rows.
    std::vector<Index> pre(static_cast<size_t>(W.rows()));
    for (Index j = 0; j < W.rows(); ++j)
      pre[static_cast<size_t>(j)] =
          model.add_var(label + "_p" + std::to_string(i) + "_" + std::to_string(j), l[j], u[j]);
    for (Index j = 0; j < W.rows(); ++j) {
      Vec row = Vec::Zero(model.n_vars());
      row[pre[static_cast<size_t>(j)]] = -1.0;
      for (Index c = 0; c < W.cols(); ++c) row[prev[static_cast<size_t>(c)]] = W(j, c);
      model.add_row(row, RowSense::EQ, -bvec[j], label);
    }

    if (!relu) {
      prev = pre;
      continue;
    }

    std::vector<Index> post(static_cast<size_t>(W.rows()));
    for (Index j = 0; j < W.rows(); ++j) {
      const Scalar lj = l[j], uj = u[j];
      if (uj <= 0.0) {
        // Stably inactive: the unit is the zero constant.
        post[static_cast<size_t>(j)] =
            model.add_var(label + "_h" + std::to_string(i) + "_" + std::to_string(j), 0.0, 0.0);
        continue;
      }
      const Index h = model.add_var(label + "_h" + std::to_string(i) + "_" + std::to_string(j),
                                    std::max(0.0, lj), std::max(0.0, uj));
      post[static_cast<size_t>(j)] = h;
      if (lj >= 0.0) {
        Vec row = Vec::Zero(model.n_vars());
        row[h] = 1.0;
        row[pre[static_cast<size_t>(j)]] = -1.0;
        model.add_row(row, RowSense::EQ, 0.0, label);
        continue;
      }
      // Unstable: four rows and one binary.
      const Index v = model.add_var(
          label + "_v" + std::to_string(i) + "_" + std::to_string(j), 0.0, 1.0, /*binary=*/true);
      {
        Vec row = Vec::Zero(model.n_vars());
        row[h] = 1.0;
        row[pre[static_cast<size_t>(j)]] = -1.0;
        model.add_row(row, RowSense::GE, 0.0, label);
      }
      {
        Vec row = Vec::Zero(model.n_vars());
        row[h] = 1.0;
        model.add_row(row, RowSense::GE, 0.0, label);
      }
      {
        Vec row = Vec::Zero(model.n_vars());
        row[h] = 1.0;
        row[v] = -uj;
        model.add_row(row, RowSense::LE, 0.0, label);
      }
      {
        Vec row = Vec::Zero(model.n_vars());
        row[h] = 1.0;
        row[pre[static_cast<size_t>(j)]] = -1.0;
        row[v] = -lj;
        model.add_row(row, RowSense::LE, -lj, label);
      }
    }
    prev = post;
  }
  return prev;
}

KktFragment encode_kkt(MilpModel& model, const AffineQp& qp, Scalar big_m,
                       const std::vector<Index>& param_vars, const Vec& z_lo, const Vec& z_hi,
                       const std::string& label) {
  qp.validate();
  const Index n = qp.n(), m = qp.m(), p = qp.p(), k = qp.k();
  if (static_cast<Index>(param_vars.size()) != k)
    throw DataError("encode_kkt: parameter variable count mismatch");
  if (z_lo.size() != n || z_hi.size() != n) throw DataError("encode_kkt: z bound size mismatch");

  KktFragment frag;
  for (Index j = 0; j < n; ++j)
    frag.z_vars.push_back(model.add_var(label + "_z" + std::to_string(j), z_lo[j], z_hi[j]));
  for (Index j = 0; j < m; ++j)
    frag.lambda_vars.push_back(model.add_var(label + "_lam" + std::to_string(j), 0.0, big_m));
  for (Index j = 0; j < p; ++j)
    frag.nu_vars.push_back(model.add_var(label + "_nu" + std::to_string(j), -big_m, big_m));
  for (Index j = 0; j < m; ++j)
    frag.comp_binaries.push_back(
        model.add_var(label + "_phi" + std::to_string(j), 0.0, 1.0, /*binary=*/true));

  const Index width = model.n_vars();
  // Stationarity: Q z + A' lambda + C' nu = -q.
  for (Index r = 0; r < n; ++r) {
    Vec row = Vec::Zero(width);
    for (Index c = 0; c < n; ++c) row[frag.z_vars[static_cast<size_t>(c)]] = qp.Q(r, c);
    for (Index j = 0; j < m; ++j) row[frag.lambda_vars[static_cast<size_t>(j)]] = qp.A_in(j, r);
    for (Index j = 0; j < p; ++j) row[frag.nu_vars[static_cast<size_t>(j)]] = qp.C_eq(j, r);
    model.add_row(row, RowSense::EQ, -qp.q[r], label);
  }
  // Equalities: C z + H u = d.
  for (Index r = 0; r < p; ++r) {
    Vec row = Vec::Zero(width);
    for (Index c = 0; c < n; ++c) row[frag.z_vars[static_cast<size_t>(c)]] = qp.C_eq(r, c);
    for (Index c = 0; c < k; ++c) row[param_vars[static_cast<size_t>(c)]] = qp.H_eq(r, c);
    model.add_row(row, RowSense::EQ, qp.d_eq[r], label);
  }
  // Primal inequalities and the complementarity pair.
  for (Index r = 0; r < m; ++r) {
    Vec row = Vec::Zero(width);
    for (Index c = 0; c < n; ++c) row[frag.z_vars[static_cast<size_t>(c)]] = qp.A_in(r, c);
    for (Index c = 0; c < k; ++c) row[param_vars[static_cast<size_t>(c)]] = qp.G_in(r, c);
    model.add_row(row, RowSense::LE, qp.b_in[r], label);

    Vec lam_row = Vec::Zero(width);
    lam_row[frag.lambda_vars[static_cast<size_t>(r)]] = 1.0;
    lam_row[frag.comp_binaries[static_cast<size_t>(r)]] = -big_m;
    model.add_row(lam_row, RowSense::LE, 0.0, label);

    Vec slack_row = row;
    slack_row[frag.comp_binaries[static_cast<size_t>(r)]] = -big_m;
    model.add_row(slack_row, RowSense::GE, qp.b_in[r] - big_m, label);
  }
  return frag;
}

CertModel assemble_cert(const MlpParams& mlp, const GridSpec& grid, const Vec& x, const Vec& y,
                        Scalar eps, const UnpredictableParams& phi,
                        const std::vector<bool>& attack_mask, Scalar big_m) {
  if (y.size() != grid.n_load()) throw DataError("assemble_cert: load dimension mismatch");
  if (mlp.output_size() != grid.n_load())
    throw DataError("assemble_cert: network output does not match grid loads");

  CertModel cert;
  cert.x_nominal = x;
  cert.attack_mask = attack_mask;
  MilpModel& model = cert.milp;

  // Perturbed inputs: budget and [0,1] clamp baked into the bounds.
  for (Index i = 0; i < x.size(); ++i) {
    Scalar lb = x[i], ub = x[i];
    if (attack_mask[static_cast<size_t>(i)]) {
      lb = std::max(0.0, x[i] - eps);
      ub = std::min(1.0, x[i] + eps);
    }
    cert.input_vars.push_back(model.add_var("x" + std::to_string(i), lb, ub));
  }

  const LayerBounds bounds = ibp_bounds(mlp, x, eps, attack_mask);
  cert.yhat_vars = encode_nn(model, mlp, bounds, cert.input_vars, "nn");

  // Domain-aware primal bounds shared by both stages.
  const Index G = grid.n_gen(), N = grid.n_bus, L = grid.n_line(), D = grid.n_load();
  Scalar yhat_cap = 0.0;
  for (Index j = 0; j < D; ++j) yhat_cap += std::max(0.0, bounds.upper.back()[j]);
  const Scalar cap = yhat_cap + y.sum() + grid.gen_p_max().cwiseMax(0.0).sum() +
                     grid.flow_limits().sum() + 10.0;
  Scalar theta_cap = 0.0;
  {
    const Vec f = grid.flow_limits();
    Scalar worst_ratio = 0.0;
    for (Index l = 0; l < L; ++l) worst_ratio = std::max(worst_ratio, f[l] / phi.nominal_b[l]);
    const Vec bn = grid.susceptances();
    for (Index l = 0; l < L; ++l) worst_ratio = std::max(worst_ratio, f[l] / bn[l]);
    theta_cap = 2.0 * static_cast<Scalar>(N) * worst_ratio + 10.0;
  }

  // Stage one at gamma = 0 (exactly linear).
  DispatchModel stage1 = build_dispatch(grid, /*gamma=*/0.0);
  Vec z1_lo(stage1.qp.n()), z1_hi(stage1.qp.n());
  z1_lo.segment(stage1.off_pg, G) = grid.gen_p_min();
  z1_hi.segment(stage1.off_pg, G) = grid.gen_p_max();
  z1_lo.segment(stage1.off_theta, N).setConstant(-theta_cap);
  z1_hi.segment(stage1.off_theta, N).setConstant(theta_cap);
  z1_lo.segment(stage1.off_slack, D).setConstant(0.0);
  z1_hi.segment(stage1.off_slack, D).setConstant(cap);
  cert.dispatch = encode_kkt(model, stage1.qp, big_m, cert.yhat_vars, z1_lo, z1_hi,
                             "dispatch-kkt");

  // Realized load enters as fixed variables so the redispatch fragment can
  // link to them uniformly.
  std::vector<Index> param2;
  for (Index j = 0; j < D; ++j)
    param2.push_back(model.add_var("y" + std::to_string(j), y[j], y[j]));
  for (Index g = 0; g < G; ++g)
    param2.push_back(cert.dispatch.z_vars[static_cast<size_t>(stage1.off_pg + g)]);

  RedispatchModel stage2 = build_redispatch(grid, phi.b, /*gamma=*/0.0);
  Vec z2_lo(stage2.qp.n()), z2_hi(stage2.qp.n());
  z2_lo.segment(stage2.off_pls, D).setConstant(0.0);
  z2_hi.segment(stage2.off_pls, D).setConstant(cap);
  z2_lo.segment(stage2.off_pgs, G).setConstant(0.0);
  z2_hi.segment(stage2.off_pgs, G).setConstant(cap);
  z2_lo.segment(stage2.off_theta, N).setConstant(-theta_cap);
  z2_hi.segment(stage2.off_theta, N).setConstant(theta_cap);
  cert.redispatch = encode_kkt(model, stage2.qp, big_m, param2, z2_lo, z2_hi, "redispatch-kkt");

  // Objective: worst-case task cost.
  model.objective.conservativeResize(model.n_vars());
  model.objective.setZero();
  const Vec cg = grid.gen_costs();
  for (Index g = 0; g < G; ++g)
    model.objective[cert.dispatch.z_vars[static_cast<size_t>(stage1.off_pg + g)]] = cg[g];
  for (Index j = 0; j < D; ++j)
    model.objective[cert.redispatch.z_vars[static_cast<size_t>(stage2.off_pls + j)]] = grid.c_ls;
  for (Index g = 0; g < G; ++g)
    model.objective[cert.redispatch.z_vars[static_cast<size_t>(stage2.off_pgs + g)]] = grid.c_gs;

  model.validate();
  return cert;
}

namespace {

struct NodeLp {
  BoxedLp lp;
  std::vector<Index> free_vars;  // model index per LP column
  Scalar fixed_objective = 0.0;
  bool constant_row_violated = false;
};

// Substitute every variable whose (possibly node-tightened) bounds pin it,
// then split rows by sense into the boxed LP layout. Minimizes -objective.
NodeLp build_node_lp(const MilpModel& model, const std::vector<signed char>& binary_fix) {
  const Index n = model.n_vars();
  Vec lo = model.lo, hi = model.hi;
  for (std::size_t bi = 0; bi < model.binaries.size(); ++bi) {
    if (binary_fix[bi] >= 0) {
      lo[model.binaries[bi]] = binary_fix[bi];
      hi[model.binaries[bi]] = binary_fix[bi];
    }
  }
  NodeLp node;
  std::vector<Index> col_of(static_cast<size_t>(n), -1);
  for (Index j = 0; j < n; ++j) {
    if (lo[j] < hi[j]) {
      col_of[static_cast<size_t>(j)] = static_cast<Index>(node.free_vars.size());
      node.free_vars.push_back(j);
    } else {
      node.fixed_objective += model.objective[j] * lo[j];
    }
  }
  const Index nf = static_cast<Index>(node.free_vars.size());
  node.lp.q = Vec::Zero(nf);
  node.lp.lo = Vec(nf);
  node.lp.hi = Vec(nf);
  for (Index c = 0; c < nf; ++c) {
    node.lp.q[c] = -model.objective[node.free_vars[static_cast<size_t>(c)]];
    node.lp.lo[c] = lo[node.free_vars[static_cast<size_t>(c)]];
    node.lp.hi[c] = hi[node.free_vars[static_cast<size_t>(c)]];
  }

  std::vector<Vec> ineq_rows, eq_rows;
  std::vector<Scalar> ineq_rhs, eq_rhs;
  for (const auto& row : model.rows) {
    Vec c = Vec::Zero(nf);
    Scalar rhs = row.rhs;
    bool any = false;
    for (Index j = 0; j < row.coeffs.size(); ++j) {
      if (row.coeffs[j] == 0.0) continue;
      const Index col = col_of[static_cast<size_t>(j)];
      if (col >= 0) {
        c[col] = row.coeffs[j];
        any = true;
      } else {
        rhs -= row.coeffs[j] * lo[j];
      }
    }
    if (!any) {
      const Scalar tol = 1e-9 * (1.0 + std::abs(row.rhs));
      if (row.sense == RowSense::LE && rhs < -tol) node.constant_row_violated = true;
      if (row.sense == RowSense::GE && rhs > tol) node.constant_row_violated = true;
      if (row.sense == RowSense::EQ && std::abs(rhs) > tol) node.constant_row_violated = true;
      continue;
    }
    switch (row.sense) {
      case RowSense::LE:
        ineq_rows.push_back(c);
        ineq_rhs.push_back(rhs);
        break;
      case RowSense::GE:
        ineq_rows.push_back(-c);
        ineq_rhs.push_back(-rhs);
        break;
      case RowSense::EQ:
        eq_rows.push_back(c);
        eq_rhs.push_back(rhs);
        break;
    }
  }
  node.lp.A = Mat(static_cast<Index>(ineq_rows.size()), nf);
  node.lp.b = Vec(static_cast<Index>(ineq_rows.size()));
  for (std::size_t r = 0; r < ineq_rows.size(); ++r) {
    node.lp.A.row(static_cast<Index>(r)) = ineq_rows[r].transpose();
    node.lp.b[static_cast<Index>(r)] = ineq_rhs[r];
  }
  node.lp.C = Mat(static_cast<Index>(eq_rows.size()), nf);
  node.lp.d = Vec(static_cast<Index>(eq_rows.size()));
  for (std::size_t r = 0; r < eq_rows.size(); ++r) {
    node.lp.C.row(static_cast<Index>(r)) = eq_rows[r].transpose();
    node.lp.d[static_cast<Index>(r)] = eq_rhs[r];
  }
  return node;
}

bool assignment_feasible(const MilpModel& model, const Vec& full, Scalar tol) {
  for (const auto& row : model.rows) {
    Scalar lhs = 0.0;
    for (Index j = 0; j < row.coeffs.size(); ++j) lhs += row.coeffs[j] * full[j];
    const Scalar slack = row.rhs - lhs;
    const Scalar scale = 1.0 + std::abs(row.rhs);
    if (row.sense == RowSense::LE && slack < -tol * scale) return false;
    if (row.sense == RowSense::GE && slack > tol * scale) return false;
    if (row.sense == RowSense::EQ && std::abs(slack) > tol * scale) return false;
  }
  for (Index j = 0; j < model.n_vars(); ++j)
    if (full[j] < model.lo[j] - tol || full[j] > model.hi[j] + tol) return false;
  return true;
}

struct BnbNode {
  std::vector<signed char> fix;
  Scalar bound = std::numeric_limits<Scalar>::infinity();
  long id = 0;
};

struct NodeOrder {
  bool operator()(const BnbNode& a, const BnbNode& b) const {
    if (a.bound != b.bound) return a.bound < b.bound;  // max-heap on bound
    return a.id > b.id;                                // FIFO tie-break
  }
};

}  // namespace

MilpResult solve_milp(const MilpModel& model, const MilpLimits& limits) {
  model.validate();
  MilpResult res;
  const auto t0 = std::chrono::steady_clock::now();
  const auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  Scalar lb = limits.warm_lower_bound;
  const auto gap_tol = [&](Scalar incumbent) {
    return std::max(limits.gap_abs, limits.gap_rel * std::abs(incumbent));
  };

  std::priority_queue<BnbNode, std::vector<BnbNode>, NodeOrder> open;
  long next_id = 0;
  open.push({std::vector<signed char>(model.binaries.size(), -1),
             std::numeric_limits<Scalar>::infinity(), next_id++});

  QpSolveOptions lp_opts;
  lp_opts.tol_kkt = 1e-8;
  Scalar pruned_ub = -std::numeric_limits<Scalar>::infinity();
  bool hit_node_limit = false, hit_time_limit = false;

  while (!open.empty()) {
    if (res.nodes >= limits.max_nodes) {
      hit_node_limit = true;
      break;
    }
    if (limits.time_limit_sec > 0.0 && elapsed() > limits.time_limit_sec) {
      hit_time_limit = true;
      break;
    }
    BnbNode node = open.top();
    open.pop();
    if (std::isfinite(lb) && node.bound <= lb + gap_tol(lb)) {
      // Best-first order: every remaining node is dominated by this bound.
      pruned_ub = std::max(pruned_ub, node.bound);
      open = {};
      break;
    }
    ++res.nodes;

    NodeLp nlp = build_node_lp(model, node.fix);
    if (nlp.constant_row_violated) continue;
    if (nlp.free_vars.empty()) {
      // Everything pinned: the node is a single point.
      Vec full = model.lo;
      for (std::size_t bi = 0; bi < model.binaries.size(); ++bi)
        if (node.fix[bi] >= 0) full[model.binaries[bi]] = node.fix[bi];
      if (assignment_feasible(model, full, 1e-6)) {
        const Scalar obj = model.objective.dot(full);
        if (!std::isfinite(lb) || obj > lb) {
          lb = obj;
          res.assignment = full;
          res.objective = obj;
        }
      }
      continue;
    }
    BoxedLpResult rel = solve_boxed_lp(nlp.lp, lp_opts);
    if (rel.status == QpStatus::Infeasible) continue;
    const Scalar ub = nlp.fixed_objective - rel.dual_bound;  // rigorous upper bound
    if (std::isfinite(lb) && ub <= lb + gap_tol(lb)) {
      pruned_ub = std::max(pruned_ub, ub);
      continue;
    }

    // Candidate incumbent when the relaxation lands on integral binaries.
    Vec full(model.n_vars());
    for (Index j = 0; j < model.n_vars(); ++j) full[j] = model.lo[j];
    for (std::size_t bi = 0; bi < model.binaries.size(); ++bi)
      if (node.fix[bi] >= 0) full[model.binaries[bi]] = node.fix[bi];
    for (std::size_t c = 0; c < nlp.free_vars.size(); ++c) full[nlp.free_vars[c]] = rel.x[static_cast<Index>(c)];

    Index branch_var = -1;
    Scalar branch_frac = -1.0;
    for (std::size_t bi = 0; bi < model.binaries.size(); ++bi) {
      if (node.fix[bi] >= 0) continue;
      const Scalar v = full[model.binaries[bi]];
      const Scalar frac = std::min(v - std::floor(v), std::ceil(v) - v);
      const Scalar dist = std::min(std::abs(v), std::abs(1.0 - v));
      if (dist <= 1e-6) continue;  // effectively integral
      if (frac > branch_frac) {
        branch_frac = frac;
        branch_var = static_cast<Index>(bi);
      }
    }

    if (branch_var < 0) {
      // All binaries integral: round and accept if genuinely feasible.
      for (Index b : model.binaries) full[b] = std::round(full[b]);
      if (rel.status == QpStatus::Optimal && assignment_feasible(model, full, 1e-6)) {
        const Scalar obj = model.objective.dot(full);
        if (!std::isfinite(lb) || obj > lb) {
          lb = obj;
          res.assignment = full;
          res.objective = obj;
        }
        continue;
      }
      // Relaxation unreliable; fall through to branching on the first free
      // binary if any, otherwise drop the node.
      for (std::size_t bi = 0; bi < model.binaries.size() && branch_var < 0; ++bi)
        if (node.fix[bi] < 0) branch_var = static_cast<Index>(bi);
      if (branch_var < 0) continue;
    }

    for (signed char v = 0; v <= 1; ++v) {
      BnbNode child;
      child.fix = node.fix;
      child.fix[static_cast<size_t>(branch_var)] = v;
      child.bound = ub;
      child.id = next_id++;
      open.push(child);
    }
  }

  // Global upper bound: all remaining open nodes plus everything pruned.
  Scalar ub_final = pruned_ub;
  if (!open.empty()) ub_final = std::max(ub_final, open.top().bound);
  if (std::isfinite(lb)) ub_final = std::max(ub_final, lb);

  if (!std::isfinite(lb)) {
    res.status = hit_node_limit ? MilpStatus::NodeLimit
                                : (hit_time_limit ? MilpStatus::GapLimit : MilpStatus::Infeasible);
    return res;
  }
  res.objective = lb;
  res.gap = std::max(0.0, (ub_final - lb) / std::max(1.0, std::abs(lb)));
  if (ub_final - lb <= gap_tol(lb)) {
    res.status = MilpStatus::Optimal;
  } else if (hit_node_limit) {
    res.status = MilpStatus::NodeLimit;
  } else {
    res.status = MilpStatus::GapLimit;
  }
  return res;
}

Scalar verify_attack(const CertModel& cert, const MilpResult& res, const MlpParams& mlp,
                     const GridSpec& grid, const Vec& y, const UnpredictableParams& phi) {
  if (res.assignment.size() == 0)
    throw SolverError("verify_attack: MILP result carries no assignment");
  Vec x = cert.x_nominal;
  for (std::size_t i = 0; i < cert.input_vars.size(); ++i)
    x[static_cast<Index>(i)] = res.assignment[cert.input_vars[i]];
  PipelineOutput out = infer(mlp, x, y, phi, grid, /*gamma=*/0.0);
  return out.cost;
}

}  // namespace dfl
