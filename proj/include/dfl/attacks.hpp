#pragma once

#include <functional>
#include <vector>

#include "dfl/pipeline.hpp"

namespace dfl {

struct AttackBudget {
  Scalar eps_x = 0.0;    // infinity-norm radius on normalized features
  Scalar eps_phi = 0.0;  // per-line radius, fraction of nominal susceptance
  int steps = 7;         // 7 for training, 30 for evaluation
  int restarts = 3;

  Scalar step_size_x() const { return steps > 0 ? eps_x / steps * 2.0 : 0.0; }
  Scalar step_size_phi() const { return steps > 0 ? eps_phi / steps * 2.0 : 0.0; }

  static AttackBudget train(Scalar eps_x, Scalar eps_phi) {
    return AttackBudget{eps_x, eps_phi, 7, 3};
  }
  static AttackBudget eval(Scalar eps_x, Scalar eps_phi) {
    return AttackBudget{eps_x, eps_phi, 30, 3};
  }
};

struct AttackResult {
  Vec delta_x;  // empty when the attack does not touch x
  Vec delta_b;  // empty when the attack does not touch b
  Scalar cost = 0.0;
  int skipped_steps = 0;  // PGD steps skipped on SingularJacobian
};

// Sign-ascent PGD on the attackable feature coordinates. Every step projects
// onto the eps_x box and re-clamps x + delta into [0,1]; the projection is
// asserted after each step.
AttackResult pgd_input(const MlpParams& theta, const Vec& x, const Vec& y,
                       const UnpredictableParams& phi, const GridSpec& grid,
                       const AttackBudget& budget, const std::vector<bool>& attack_mask,
                       const Vec* delta0 = nullptr);

// PGD on the redispatch susceptance with per-line budgets proportional to
// the nominal value. Uses the raw gradient normalized by its infinity norm
// (per-line scales differ by orders of magnitude, so sign ascent is kept
// for inputs only).
AttackResult pgd_phi(const MlpParams& theta, const Vec& x, const Vec& y,
                     const UnpredictableParams& phi, const GridSpec& grid,
                     const AttackBudget& budget, const Vec* delta0 = nullptr);

// Simultaneous coordinate ascent on both blocks with both projections.
AttackResult pgd_joint(const MlpParams& theta, const Vec& x, const Vec& y,
                       const UnpredictableParams& phi, const GridSpec& grid,
                       const AttackBudget& budget, const std::vector<bool>& attack_mask,
                       const Vec* delta_x0 = nullptr, const Vec* delta_b0 = nullptr);

// Uniform per-line draw in [-eps_phi*b_l, +eps_phi*b_l].
Vec random_phi(const UnpredictableParams& phi, const AttackBudget& budget, std::uint64_t seed);

// Runs `attack` from `restarts` uniform starts inside the budget and keeps
// the maximizer of the final cost. Start r uses a stream derived from
// (seed, r), so enlarging restarts only appends starts.
using AttackFromStart = std::function<AttackResult(const Vec& delta_x0, const Vec& delta_b0)>;
AttackResult multistart_worst(const AttackFromStart& attack, const AttackBudget& budget,
                              const Vec& x, const std::vector<bool>& attack_mask,
                              const UnpredictableParams& phi, int restarts, std::uint64_t seed);

// Convenience multistart wrappers for the three PGD attacks.
AttackResult worst_input_attack(const MlpParams& theta, const Vec& x, const Vec& y,
                                const UnpredictableParams& phi, const GridSpec& grid,
                                const AttackBudget& budget, const std::vector<bool>& attack_mask,
                                std::uint64_t seed);
AttackResult worst_phi_attack(const MlpParams& theta, const Vec& x, const Vec& y,
                              const UnpredictableParams& phi, const GridSpec& grid,
                              const AttackBudget& budget, std::uint64_t seed);
AttackResult worst_joint_attack(const MlpParams& theta, const Vec& x, const Vec& y,
                                const UnpredictableParams& phi, const GridSpec& grid,
                                const AttackBudget& budget, const std::vector<bool>& attack_mask,
                                std::uint64_t seed);

struct GradientAlignment {
  Scalar norm_x = 0.0;    // 1-norm of the batch gradient under the input adversary
  Scalar norm_phi = 0.0;  // 1-norm of the batch gradient under the phi adversary
  Scalar cosine = 0.0;    // cosine similarity between the two gradients
};

// Batch diagnostic: network gradients when the two adversaries are generated
// separately, plus their cosine similarity.
GradientAlignment gradient_alignment(const MlpParams& theta, const Mat& batch_x,
                                     const Mat& batch_y, const GridSpec& grid,
                                     const AttackBudget& budget,
                                     const std::vector<bool>& attack_mask, std::uint64_t seed);

}  // namespace dfl
