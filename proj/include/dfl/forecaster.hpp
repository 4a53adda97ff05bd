#pragma once

#include <string>
#include <vector>

#include "dfl/common.hpp"

namespace dfl {

struct MlpLayer {
  Mat W;  // out x in
  Vec b;  // out
};

// Feedforward ReLU network. A terminal ReLU clamps the forecast to be
// nonnegative, so adversarial inputs cannot produce negative load.
struct MlpParams {
  std::vector<MlpLayer> layers;
  bool terminal_relu = true;

  std::vector<Index> layer_sizes() const;
  Index input_size() const { return layers.front().W.cols(); }
  Index output_size() const { return layers.back().W.rows(); }
  Index param_count() const;
  std::uint64_t digest() const;
};

// sizes = {input, hidden..., output}; weights uniform(-1/sqrt(fan_in), +).
MlpParams make_mlp(const std::vector<Index>& sizes, std::uint64_t seed);

struct MlpTape {
  Vec input;
  std::vector<Vec> pre;   // pre-activation per layer (including output layer)
  std::vector<Vec> post;  // post-activation per layer
};

struct MlpGrads {
  std::vector<MlpLayer> layers;  // same shapes as MlpParams

  Scalar norm1() const;
  void scale(Scalar a);
  void accumulate(const MlpGrads& other, Scalar weight = 1.0);
  Vec flatten() const;
};

MlpGrads zero_grads(const MlpParams& mlp);

Vec mlp_forward(const MlpParams& mlp, const Vec& x, MlpTape* tape = nullptr);

// Exact reverse-mode gradients through the tape, including the terminal
// ReLU mask. Returns d_x through the out parameter.
MlpGrads mlp_backward(const MlpParams& mlp, const MlpTape& tape, const Vec& dL_dy, Vec* d_x);

struct OptimizerState {
  std::vector<MlpLayer> m;  // first moments
  std::vector<MlpLayer> v;  // second moments
  long step = 0;
  Scalar base_lr = 1e-3;
  long total_steps = 1;
  Scalar beta1 = 0.9;
  Scalar beta2 = 0.999;
  Scalar eps = 1e-8;
  Scalar clip_norm1 = 2.0;

  Scalar lr_at(long step_index) const;
};

OptimizerState make_optimizer(const MlpParams& mlp, Scalar base_lr, long total_steps);

// Rescales the gradient when its total 1-norm exceeds clip_norm1, then takes
// one Adam step with the cosine-annealed learning rate. Throws SolverError
// on non-finite gradients without touching the parameters.
void clip_and_step(OptimizerState& opt, MlpParams& mlp, const MlpGrads& grads);

// Checkpoint container: versioned JSON with layer sizes, row-major
// weight/bias arrays and optimizer state (layout documented in README).
void save_checkpoint(const MlpParams& mlp, const OptimizerState* opt, const std::string& path);
MlpParams load_checkpoint(const std::string& path, OptimizerState* opt = nullptr);

}  // namespace dfl
