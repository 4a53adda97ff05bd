#include <doctest.h>

#include "dfl/qp.hpp"
#include "oracles.hpp"

using namespace dfl;

TEST_CASE("unconstrained quadratic") {
  AffineQp qp = make_qp(1, 0, 0, 0);
  qp.Q << 1.0;
  qp.q << -1.0;
  QpSolution sol = solve_qp(qp, Vec(0));
  REQUIRE(sol.status == QpStatus::Optimal);
  CHECK(sol.z_star[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(sol.objective(qp) == doctest::Approx(-0.5).epsilon(1e-9));
}

TEST_CASE("single active bound: min z^2/2 s.t. z >= 1") {
  AffineQp qp = make_qp(1, 1, 0, 0);
  qp.Q << 1.0;
  qp.A_in << -1.0;
  qp.b_in << -1.0;
  QpSolution sol = solve_qp(qp, Vec(0));
  REQUIRE(sol.status == QpStatus::Optimal);
  CHECK(sol.z_star[0] == doctest::Approx(1.0).epsilon(1e-8));
  CHECK(sol.lambda_star[0] == doctest::Approx(1.0).epsilon(1e-8));
  CHECK(sol.kkt_residual <= 1e-8);
}

TEST_CASE("random strictly convex QPs match the active-set oracle") {
  for (int t = 0; t < 25; ++t) {
    Vec param;
    AffineQp qp = testing::random_strict_qp(1000 + t, 4, 6, 1, 2, &param);
    QpSolution sol = solve_qp(qp, param);
    REQUIRE(sol.status == QpStatus::Optimal);
    auto oracle = testing::active_set_solve(qp, param);
    REQUIRE(oracle.has_value());
    CHECK((sol.z_star - oracle->z).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(std::abs(sol.objective(qp) - oracle->objective) < 1e-6);
    CHECK(sol.kkt_residual <= 1e-8);
  }
}

TEST_CASE("determinism: identical inputs give bit-identical solutions") {
  Vec param;
  AffineQp qp = testing::random_strict_qp(7, 4, 6, 2, 3, &param);
  QpSolution a = solve_qp(qp, param);
  QpSolution b = solve_qp(qp, param);
  CHECK(a.iterations == b.iterations);
  CHECK((a.z_star - b.z_star).cwiseAbs().maxCoeff() == 0.0);
  CHECK((a.lambda_star - b.lambda_star).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("objective never increases when the budget is relaxed") {
  for (int t = 0; t < 10; ++t) {
    Vec param;
    AffineQp qp = testing::random_strict_qp(50 + t, 3, 5, 0, 2, &param);
    QpSolution tight = solve_qp(qp, param);
    AffineQp wide = qp;
    wide.b_in.array() += 0.5;
    QpSolution loose = solve_qp(wide, param);
    REQUIRE(tight.status == QpStatus::Optimal);
    REQUIRE(loose.status == QpStatus::Optimal);
    CHECK(loose.objective(wide) <= tight.objective(qp) + 1e-8);
  }
}

TEST_CASE("duality gap closes at the reported optimum") {
  for (int t = 0; t < 10; ++t) {
    Vec param;
    AffineQp qp = testing::random_strict_qp(90 + t, 4, 5, 2, 2, &param);
    QpSolution sol = solve_qp(qp, param);
    REQUIRE(sol.status == QpStatus::Optimal);
    const Vec b_eff = qp.b_in - qp.G_in * param;
    const Vec d_eff = qp.d_eq - qp.H_eq * param;
    const Vec w = qp.q + qp.A_in.transpose() * sol.lambda_star +
                  qp.C_eq.transpose() * sol.nu_star;
    const Vec z_inner = -qp.Q.ldlt().solve(w);
    const Scalar dual = 0.5 * z_inner.dot(qp.Q * z_inner) + qp.q.dot(z_inner) +
                        sol.lambda_star.dot(qp.A_in * z_inner - b_eff) +
                        sol.nu_star.dot(qp.C_eq * z_inner - d_eff);
    const Scalar primal = sol.objective(qp);
    CHECK(std::abs(primal - dual) <= 1e-6 * (1.0 + std::abs(primal)));
  }
}

TEST_CASE("kkt_residual vanishes on a hand-built KKT point") {
  // min z^2/2 s.t. z >= 1 has the exact point (z, lambda) = (1, 1).
  AffineQp qp = make_qp(1, 1, 0, 0);
  qp.Q << 1.0;
  qp.A_in << -1.0;
  qp.b_in << -1.0;
  QpSolution sol;
  sol.z_star = Vec::Ones(1);
  sol.lambda_star = Vec::Ones(1);
  sol.nu_star = Vec(0);
  sol.status = QpStatus::Optimal;
  KktResiduals r = kkt_residual(qp, Vec(0), sol);
  CHECK(r.max() == 0.0);

  SUBCASE("perturbing the primal moves stationarity by at least gamma*step") {
    sol.z_star[0] += 1e-3;
    KktResiduals rp = kkt_residual(qp, Vec(0), sol);
    CHECK(rp.r_stat >= 1.0 * 1e-3 * (1.0 - 1e-6));
  }
}

TEST_CASE("solver output keeps every residual block below tolerance") {
  for (int t = 0; t < 10; ++t) {
    Vec param;
    AffineQp qp = testing::random_strict_qp(400 + t, 4, 6, 1, 2, &param);
    QpSolution sol = solve_qp(qp, param);
    REQUIRE(sol.status == QpStatus::Optimal);
    KktResiduals r = kkt_residual(qp, param, sol);
    CHECK(r.r_stat <= 1e-8);
    CHECK(r.r_pri <= 1e-8);
    CHECK(r.r_dual <= 1e-8);
    CHECK(r.r_comp <= 1e-8);
    CHECK(sol.lambda_star.minCoeff() >= -1e-10);
  }
}

TEST_CASE("contradictory inequalities are reported Infeasible") {
  AffineQp qp = make_qp(1, 2, 0, 0);
  qp.Q << 1.0;
  qp.A_in << 1.0, -1.0;
  qp.b_in << 0.0, -1.0;  // z <= 0 and z >= 1
  QpSolution sol = solve_qp(qp, Vec(0));
  CHECK(sol.status == QpStatus::Infeasible);
  CHECK(sol.slater_margin > 1e-6);
}

TEST_CASE("rank-deficient equality block is rejected at build time") {
  AffineQp qp = make_qp(2, 0, 2, 0);
  qp.Q = Mat::Identity(2, 2);
  qp.C_eq << 1.0, 1.0, 2.0, 2.0;
  CHECK_THROWS_WITH_AS(qp.validate(), doctest::Contains("full row rank"), DataError);
}

TEST_CASE("dump emits dimensions and every block") {
  AffineQp qp = testing::random_strict_qp(5, 2, 3, 1, 1);
  const std::string text = qp.dump();
  CHECK(text.find("AffineQp 2 3 1 1") == 0);
  for (const char* key : {"Q", "q", "A_in", "G_in", "b_in", "C_eq", "H_eq", "d_eq"})
    CHECK(text.find(std::string("\n") + key + "\n") != std::string::npos);
}

TEST_CASE("boxed LP solves and produces a rigorous dual bound") {
  BoxedLp lp;
  lp.q = Vec(2);
  lp.q << -1.0, -2.0;  // maximize x0 + 2 x1
  lp.A = Mat(1, 2);
  lp.A << 1.0, 1.0;
  lp.b = Vec::Ones(1);
  lp.C = Mat(0, 2);
  lp.d = Vec(0);
  lp.lo = Vec::Zero(2);
  lp.hi = Vec::Ones(2);
  BoxedLpResult r = solve_boxed_lp(lp);
  REQUIRE(r.status == QpStatus::Optimal);
  CHECK(r.objective == doctest::Approx(-2.0).epsilon(1e-7));
  CHECK(r.x[1] == doctest::Approx(1.0).epsilon(1e-7));
  CHECK(r.dual_bound <= r.objective + 1e-9);
  CHECK(r.dual_bound >= r.objective - 1e-6);

  SUBCASE("conflicting rows are classified Infeasible") {
    lp.A = Mat(2, 2);
    lp.A << 1.0, 0.0, -1.0, 0.0;
    lp.b = Vec(2);
    lp.b << 0.2, -0.8;  // x0 <= 0.2 and x0 >= 0.8
    BoxedLpResult bad = solve_boxed_lp(lp);
    CHECK(bad.status == QpStatus::Infeasible);
  }
}
