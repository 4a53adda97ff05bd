#include <doctest.h>

#include <cstdio>

#include "dfl/forecaster.hpp"

using namespace dfl;

namespace {

// Straightline re-evaluation, independent of the library forward pass.
Vec reference_forward(const MlpParams& mlp, const Vec& x) {
  Vec h = x;
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    h = mlp.layers[i].W * h + mlp.layers[i].b;
    if (i + 1 < mlp.layers.size() || mlp.terminal_relu)
      for (Index j = 0; j < h.size(); ++j) h[j] = std::max(0.0, h[j]);
  }
  return h;
}

}  // namespace

TEST_CASE("zero network maps everything to zero") {
  MlpParams mlp = make_mlp({3, 4, 2}, 1);
  for (auto& l : mlp.layers) {
    l.W.setZero();
    l.b.setZero();
  }
  Vec y = mlp_forward(mlp, Vec::Constant(3, 0.7));
  CHECK(y.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("terminal ReLU clamps a negative single layer") {
  MlpParams mlp;
  mlp.layers.push_back({-Mat::Ones(1, 1), Vec::Zero(1)});
  Vec y = mlp_forward(mlp, Vec::Constant(1, 2.0));
  CHECK(y[0] == 0.0);
}

TEST_CASE("forward matches a straightline recomputation") {
  MlpParams mlp = make_mlp({8, 8, 8, 2}, 42);
  auto rng = make_rng(5, 0xf0);
  for (int t = 0; t < 20; ++t) {
    Vec x = uniform_vec(rng, 8, -1.0, 1.0);
    Vec got = mlp_forward(mlp, x);
    Vec want = reference_forward(mlp, x);
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(got.minCoeff() >= 0.0);
  }
}

TEST_CASE("zero cotangent gives zero gradients") {
  MlpParams mlp = make_mlp({4, 6, 3}, 2);
  MlpTape tape;
  mlp_forward(mlp, Vec::Constant(4, 0.3), &tape);
  Vec d_x;
  MlpGrads g = mlp_backward(mlp, tape, Vec::Zero(3), &d_x);
  CHECK(g.norm1() == 0.0);
  CHECK(d_x.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("single linear layer gradient is the outer product") {
  MlpParams mlp;
  mlp.layers.push_back({Mat::Ones(2, 3), Vec::Constant(2, 5.0)});  // strictly active
  Vec x(3);
  x << 0.2, -0.4, 0.9;
  MlpTape tape;
  mlp_forward(mlp, x, &tape);
  Vec gvec(2);
  gvec << 1.0, -2.0;
  Vec d_x;
  MlpGrads g = mlp_backward(mlp, tape, gvec, &d_x);
  CHECK((g.layers[0].W - gvec * x.transpose()).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((g.layers[0].b - gvec).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((d_x - mlp.layers[0].W.transpose() * gvec).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("backward matches central finite differences away from kinks") {
  MlpParams mlp = make_mlp({5, 7, 4}, 11);
  auto rng = make_rng(123, 0xf1);
  const Vec x = uniform_vec(rng, 5, 0.1, 0.9);
  const Vec cot = gaussian_vec(rng, 4);
  MlpTape tape;
  mlp_forward(mlp, x, &tape);
  // Skip if any pre-activation sits near a kink.
  for (const Vec& pre : tape.pre)
    for (Index j = 0; j < pre.size(); ++j) REQUIRE(std::abs(pre[j]) > 1e-6);
  Vec d_x;
  MlpGrads g = mlp_backward(mlp, tape, cot, &d_x);
  const Scalar h = 1e-6;
  for (Index i = 0; i < x.size(); ++i) {
    Vec xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const Scalar fd = (cot.dot(mlp_forward(mlp, xp)) - cot.dot(mlp_forward(mlp, xm))) / (2 * h);
    CHECK(std::abs(fd - d_x[i]) < 1e-4 * std::max(1.0, std::abs(fd)));
  }
  for (Index r = 0; r < mlp.layers[0].W.rows(); ++r)
    for (Index c = 0; c < mlp.layers[0].W.cols(); ++c) {
      MlpParams pp = mlp, pm = mlp;
      pp.layers[0].W(r, c) += h;
      pm.layers[0].W(r, c) -= h;
      const Scalar fd = (cot.dot(mlp_forward(pp, x)) - cot.dot(mlp_forward(pm, x))) / (2 * h);
      CHECK(std::abs(fd - g.layers[0].W(r, c)) < 1e-4 * std::max(1.0, std::abs(fd)));
    }
}

TEST_CASE("gradient clipping rescales at the 1-norm threshold") {
  MlpParams a = make_mlp({2, 2}, 3);
  MlpParams b = a;
  OptimizerState oa = make_optimizer(a, 1e-3, 100);
  OptimizerState ob = make_optimizer(b, 1e-3, 100);
  MlpGrads big = zero_grads(a);
  big.layers[0].W.setConstant(1.0);  // four entries, total 1-norm 4
  REQUIRE(big.norm1() == doctest::Approx(4.0));
  MlpGrads half = big;
  half.scale(0.5);  // 1-norm = 2, exactly at the threshold: not rescaled
  clip_and_step(oa, a, big);
  clip_and_step(ob, b, half);
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    CHECK((a.layers[i].W - b.layers[i].W).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((a.layers[i].b - b.layers[i].b).cwiseAbs().maxCoeff() < 1e-15);
  }
}

TEST_CASE("zero gradient leaves parameters unchanged") {
  MlpParams mlp = make_mlp({3, 3}, 4);
  MlpParams before = mlp;
  OptimizerState opt = make_optimizer(mlp, 1e-2, 10);
  clip_and_step(opt, mlp, zero_grads(mlp));
  for (std::size_t i = 0; i < mlp.layers.size(); ++i)
    CHECK((mlp.layers[i].W - before.layers[i].W).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("identical updates from identical state are deterministic") {
  MlpParams a = make_mlp({3, 4, 2}, 5);
  MlpParams b = a;
  OptimizerState oa = make_optimizer(a, 1e-3, 50);
  OptimizerState ob = make_optimizer(b, 1e-3, 50);
  MlpGrads g = zero_grads(a);
  for (auto& l : g.layers) {
    l.W.setConstant(0.3);
    l.b.setConstant(-0.2);
  }
  clip_and_step(oa, a, g);
  clip_and_step(ob, b, g);
  CHECK(a.digest() == b.digest());
}

TEST_CASE("non-finite gradients abort the step") {
  MlpParams mlp = make_mlp({2, 2}, 6);
  MlpParams before = mlp;
  OptimizerState opt = make_optimizer(mlp, 1e-3, 10);
  MlpGrads g = zero_grads(mlp);
  g.layers[0].W(0, 0) = std::numeric_limits<Scalar>::quiet_NaN();
  CHECK_THROWS_AS(clip_and_step(opt, mlp, g), SolverError);
  CHECK(mlp.digest() == before.digest());
}

TEST_CASE("cosine schedule endpoints") {
  MlpParams mlp = make_mlp({2, 2}, 7);
  OptimizerState opt = make_optimizer(mlp, 3e-3, 1000);
  CHECK(opt.lr_at(0) == doctest::Approx(3e-3).epsilon(1e-12));
  CHECK(std::abs(opt.lr_at(1000)) < 1e-12);
  CHECK(opt.lr_at(500) == doctest::Approx(1.5e-3).epsilon(1e-9));
}

TEST_CASE("checkpoint round-trips parameters and optimizer state") {
  MlpParams mlp = make_mlp({4, 5, 3}, 8);
  OptimizerState opt = make_optimizer(mlp, 2e-3, 77);
  MlpGrads g = zero_grads(mlp);
  for (auto& l : g.layers) l.W.setConstant(0.1);
  clip_and_step(opt, mlp, g);
  const std::string path = "ckpt_test.json";
  save_checkpoint(mlp, &opt, path);
  OptimizerState opt2;
  MlpParams back = load_checkpoint(path, &opt2);
  std::remove(path.c_str());
  CHECK(back.digest() == mlp.digest());
  CHECK(opt2.step == opt.step);
  CHECK(opt2.base_lr == opt.base_lr);
  CHECK(opt2.total_steps == opt.total_steps);
  CHECK((opt2.m[0].W - opt.m[0].W).cwiseAbs().maxCoeff() == 0.0);
  CHECK((opt2.v[1].b - opt.v[1].b).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("forward output is nonnegative for random inputs") {
  MlpParams mlp = make_mlp({6, 10, 4}, 9);
  auto rng = make_rng(10, 0xf2);
  for (int t = 0; t < 200; ++t) {
    Vec x = uniform_vec(rng, 6, -3.0, 3.0);
    CHECK(mlp_forward(mlp, x).minCoeff() >= 0.0);
  }
}
