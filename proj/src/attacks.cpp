#include "dfl/attacks.hpp"

#include <algorithm>
#include <cmath>

namespace dfl {

namespace {

void project_input(Vec& delta, const Vec& x, Scalar eps, const std::vector<bool>& mask) {
  for (Index i = 0; i < delta.size(); ++i) {
    if (!mask[static_cast<size_t>(i)]) {
      delta[i] = 0.0;
      continue;
    }
    delta[i] = std::min(eps, std::max(-eps, delta[i]));
    delta[i] = std::min(1.0 - x[i], std::max(-x[i], delta[i]));  // clamp x+delta to [0,1]
  }
}

void project_phi(Vec& delta, const Vec& nominal, Scalar eps) {
  for (Index l = 0; l < delta.size(); ++l) {
    const Scalar r = eps * nominal[l];
    delta[l] = std::min(r, std::max(-r, delta[l]));
  }
}

void assert_input_budget(const Vec& delta, const Vec& x, Scalar eps,
                         const std::vector<bool>& mask) {
  for (Index i = 0; i < delta.size(); ++i) {
    if (!mask[static_cast<size_t>(i)]) {
      // Calendric coordinates are untouched and live outside [0,1].
      if (delta[i] != 0.0)
        throw InternalError("pgd_input: perturbation leaked onto a masked coordinate");
      continue;
    }
    if (std::abs(delta[i]) > eps + 1e-12 || x[i] + delta[i] < -1e-12 ||
        x[i] + delta[i] > 1.0 + 1e-12)
      throw InternalError("pgd_input: projection violated the budget");
  }
}

void assert_phi_budget(const Vec& delta, const Vec& nominal, Scalar eps) {
  for (Index l = 0; l < delta.size(); ++l) {
    if (std::abs(delta[l]) > eps * nominal[l] + 1e-12)
      throw InternalError("pgd_phi: projection violated the budget");
    if (nominal[l] + delta[l] <= 0.0)
      throw InternalError("pgd_phi: susceptance left the positive orthant");
  }
}

Scalar eval_cost(const MlpParams& theta, const Vec& x, const Vec& y,
                 const UnpredictableParams& phi, const GridSpec& grid) {
  return infer(theta, x, y, phi, grid).cost;
}

}  // namespace

AttackResult pgd_input(const MlpParams& theta, const Vec& x, const Vec& y,
                       const UnpredictableParams& phi, const GridSpec& grid,
                       const AttackBudget& budget, const std::vector<bool>& attack_mask,
                       const Vec* delta0) {
  if (static_cast<Index>(attack_mask.size()) != x.size())
    throw DataError("pgd_input: mask size mismatch");
  AttackResult res;
  Vec delta = delta0 ? *delta0 : Vec::Zero(x.size());
  project_input(delta, x, budget.eps_x, attack_mask);
  assert_input_budget(delta, x, budget.eps_x, attack_mask);
  if (budget.eps_x > 0.0) {
    const Scalar step = budget.step_size_x();
    for (int t = 0; t < budget.steps; ++t) {
      try {
        PipelineOutput out = infer(theta, x + delta, y, phi, grid);
        PipelineGrads g = pipeline_grads(theta, x + delta, y, phi, grid, out);
        for (Index i = 0; i < delta.size(); ++i)
          if (attack_mask[static_cast<size_t>(i)] && g.d_x[i] != 0.0)
            delta[i] += step * (g.d_x[i] > 0.0 ? 1.0 : -1.0);
      } catch (const SingularJacobianError&) {
        ++res.skipped_steps;
      }
      project_input(delta, x, budget.eps_x, attack_mask);
      assert_input_budget(delta, x, budget.eps_x, attack_mask);
    }
  }
  res.delta_x = delta;
  res.cost = eval_cost(theta, x + delta, y, phi, grid);
  return res;
}

AttackResult pgd_phi(const MlpParams& theta, const Vec& x, const Vec& y,
                     const UnpredictableParams& phi, const GridSpec& grid,
                     const AttackBudget& budget, const Vec* delta0) {
  AttackResult res;
  Vec delta = delta0 ? *delta0 : Vec::Zero(phi.nominal_b.size());
  project_phi(delta, phi.nominal_b, budget.eps_phi);
  assert_phi_budget(delta, phi.nominal_b, budget.eps_phi);
  if (budget.eps_phi > 0.0) {
    for (int t = 0; t < budget.steps; ++t) {
      try {
        UnpredictableParams cur = phi;
        cur.b = phi.nominal_b + delta;
        PipelineOutput out = infer(theta, x, y, cur, grid);
        PipelineGrads g = pipeline_grads(theta, x, y, cur, grid, out);
        const Scalar gmax = g.d_phi_b.cwiseAbs().maxCoeff();
        if (gmax > 0.0) {
          const Vec dir = g.d_phi_b / gmax;
          for (Index l = 0; l < delta.size(); ++l)
            delta[l] += budget.step_size_phi() * phi.nominal_b[l] * dir[l];
        }
      } catch (const SingularJacobianError&) {
        ++res.skipped_steps;
      }
      project_phi(delta, phi.nominal_b, budget.eps_phi);
      assert_phi_budget(delta, phi.nominal_b, budget.eps_phi);
    }
  }
  res.delta_b = delta;
  UnpredictableParams fin = phi;
  fin.b = phi.nominal_b + delta;
  res.cost = eval_cost(theta, x, y, fin, grid);
  return res;
}

AttackResult pgd_joint(const MlpParams& theta, const Vec& x, const Vec& y,
                       const UnpredictableParams& phi, const GridSpec& grid,
                       const AttackBudget& budget, const std::vector<bool>& attack_mask,
                       const Vec* delta_x0, const Vec* delta_b0) {
  AttackResult res;
  Vec dx = delta_x0 ? *delta_x0 : Vec::Zero(x.size());
  Vec db = delta_b0 ? *delta_b0 : Vec::Zero(phi.nominal_b.size());
  project_input(dx, x, budget.eps_x, attack_mask);
  project_phi(db, phi.nominal_b, budget.eps_phi);
  for (int t = 0; t < budget.steps && (budget.eps_x > 0.0 || budget.eps_phi > 0.0); ++t) {
    try {
      UnpredictableParams cur = phi;
      cur.b = phi.nominal_b + db;
      PipelineOutput out = infer(theta, x + dx, y, cur, grid);
      PipelineGrads g = pipeline_grads(theta, x + dx, y, cur, grid, out);
      if (budget.eps_x > 0.0) {
        const Scalar step = budget.step_size_x();
        for (Index i = 0; i < dx.size(); ++i)
          if (attack_mask[static_cast<size_t>(i)] && g.d_x[i] != 0.0)
            dx[i] += step * (g.d_x[i] > 0.0 ? 1.0 : -1.0);
      }
      if (budget.eps_phi > 0.0) {
        const Scalar gmax = g.d_phi_b.cwiseAbs().maxCoeff();
        if (gmax > 0.0)
          for (Index l = 0; l < db.size(); ++l)
            db[l] += budget.step_size_phi() * phi.nominal_b[l] * (g.d_phi_b[l] / gmax);
      }
    } catch (const SingularJacobianError&) {
      ++res.skipped_steps;
    }
    project_input(dx, x, budget.eps_x, attack_mask);
    project_phi(db, phi.nominal_b, budget.eps_phi);
    assert_input_budget(dx, x, budget.eps_x, attack_mask);
    assert_phi_budget(db, phi.nominal_b, budget.eps_phi);
  }
  res.delta_x = dx;
  res.delta_b = db;
  UnpredictableParams fin = phi;
  fin.b = phi.nominal_b + db;
  res.cost = eval_cost(theta, x + dx, y, fin, grid);
  return res;
}

Vec random_phi(const UnpredictableParams& phi, const AttackBudget& budget, std::uint64_t seed) {
  auto rng = make_rng(seed, /*purpose=*/0x72616e64 /* "rand" */);
  Vec delta(phi.nominal_b.size());
  for (Index l = 0; l < delta.size(); ++l) {
    std::uniform_real_distribution<Scalar> dist(-budget.eps_phi * phi.nominal_b[l],
                                                budget.eps_phi * phi.nominal_b[l]);
    delta[l] = budget.eps_phi > 0.0 ? dist(rng) : 0.0;
  }
  return delta;
}

AttackResult multistart_worst(const AttackFromStart& attack, const AttackBudget& budget,
                              const Vec& x, const std::vector<bool>& attack_mask,
                              const UnpredictableParams& phi, int restarts, std::uint64_t seed) {
  if (restarts < 1) throw ConfigError("multistart_worst: restarts must be >= 1");
  AttackResult best;
  best.cost = -std::numeric_limits<Scalar>::infinity();
  for (int r = 0; r < restarts; ++r) {
    auto rng = make_rng(seed, /*purpose=*/0x6d756c74 /* "mult" */, static_cast<std::uint64_t>(r));
    Vec dx0 = Vec::Zero(x.size());
    for (Index i = 0; i < dx0.size(); ++i)
      if (attack_mask[static_cast<size_t>(i)]) {
        std::uniform_real_distribution<Scalar> dist(-budget.eps_x, budget.eps_x);
        dx0[i] = budget.eps_x > 0.0 ? dist(rng) : 0.0;
      }
    Vec db0(phi.nominal_b.size());
    for (Index l = 0; l < db0.size(); ++l) {
      std::uniform_real_distribution<Scalar> dist(-budget.eps_phi * phi.nominal_b[l],
                                                  budget.eps_phi * phi.nominal_b[l]);
      db0[l] = budget.eps_phi > 0.0 ? dist(rng) : 0.0;
    }
    AttackResult run = attack(dx0, db0);
    if (run.cost > best.cost) best = run;
  }
  return best;
}

AttackResult worst_input_attack(const MlpParams& theta, const Vec& x, const Vec& y,
                                const UnpredictableParams& phi, const GridSpec& grid,
                                const AttackBudget& budget, const std::vector<bool>& attack_mask,
                                std::uint64_t seed) {
  return multistart_worst(
      [&](const Vec& dx0, const Vec&) {
        return pgd_input(theta, x, y, phi, grid, budget, attack_mask, &dx0);
      },
      budget, x, attack_mask, phi, budget.restarts, seed);
}

AttackResult worst_phi_attack(const MlpParams& theta, const Vec& x, const Vec& y,
                              const UnpredictableParams& phi, const GridSpec& grid,
                              const AttackBudget& budget, std::uint64_t seed) {
  std::vector<bool> mask(static_cast<size_t>(x.size()), false);
  return multistart_worst(
      [&](const Vec&, const Vec& db0) { return pgd_phi(theta, x, y, phi, grid, budget, &db0); },
      budget, x, mask, phi, budget.restarts, seed);
}

AttackResult worst_joint_attack(const MlpParams& theta, const Vec& x, const Vec& y,
                                const UnpredictableParams& phi, const GridSpec& grid,
                                const AttackBudget& budget, const std::vector<bool>& attack_mask,
                                std::uint64_t seed) {
  return multistart_worst(
      [&](const Vec& dx0, const Vec& db0) {
        return pgd_joint(theta, x, y, phi, grid, budget, attack_mask, &dx0, &db0);
      },
      budget, x, attack_mask, phi, budget.restarts, seed);
}

GradientAlignment gradient_alignment(const MlpParams& theta, const Mat& batch_x,
                                     const Mat& batch_y, const GridSpec& grid,
                                     const AttackBudget& budget,
                                     const std::vector<bool>& attack_mask, std::uint64_t seed) {
  const Index n = batch_x.rows();
  if (n == 0) throw DataError("gradient_alignment: empty batch");
  MlpGrads gx = zero_grads(theta);
  MlpGrads gp = zero_grads(theta);
  AttackBudget input_only = budget;
  input_only.eps_phi = 0.0;
  AttackBudget phi_only = budget;
  phi_only.eps_x = 0.0;
  const UnpredictableParams phi = UnpredictableParams::nominal(grid);

  for (Index i = 0; i < n; ++i) {
    const Vec x = batch_x.row(i).transpose();
    const Vec y = batch_y.row(i).transpose();
    AttackResult ax = pgd_input(theta, x, y, phi, grid, input_only, attack_mask);
    {
      PipelineOutput out = infer(theta, x + ax.delta_x, y, phi, grid);
      PipelineGrads g = pipeline_grads(theta, x + ax.delta_x, y, phi, grid, out);
      gx.accumulate(g.d_theta, 1.0 / static_cast<Scalar>(n));
    }
    AttackResult ap = pgd_phi(theta, x, y, phi, grid, phi_only);
    {
      UnpredictableParams cur = phi;
      cur.b = phi.nominal_b + ap.delta_b;
      PipelineOutput out = infer(theta, x, y, cur, grid);
      PipelineGrads g = pipeline_grads(theta, x, y, cur, grid, out);
      gp.accumulate(g.d_theta, 1.0 / static_cast<Scalar>(n));
    }
  }
  (void)seed;

  GradientAlignment out;
  out.norm_x = gx.norm1();
  out.norm_phi = gp.norm1();
  const Vec fx = gx.flatten();
  const Vec fp = gp.flatten();
  const Scalar den = fx.norm() * fp.norm();
  out.cosine = den > 0.0 ? fx.dot(fp) / den : 0.0;
  return out;
}

}  // namespace dfl
