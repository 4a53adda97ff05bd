#pragma once

#include <string>
#include <vector>

#include "dfl/attacks.hpp"
#include "dfl/data.hpp"

namespace dfl {

enum class TrainMethod { NAT, AT_MSE, AT_INPUT, AT_PARA, AT_BOTH };

TrainMethod parse_method(const std::string& name);
std::string method_name(TrainMethod m);

struct TrainConfig {
  TrainMethod method = TrainMethod::NAT;
  Scalar alpha = 1.0;  // weight on the clean term; (1-alpha) on the adversarial term
  AttackBudget budget;
  int epochs = 10;
  int batch_size = 32;
  Scalar lr = 1e-3;
  std::string warm_start;  // optional checkpoint path
  bool free_at = false;
  std::uint64_t seed = 0;
  std::vector<Index> hidden_sizes = {200, 200, 100};

  void validate() const;
  // free AT divides the epoch budget by the PGD step count (floor, >= 1).
  int effective_epochs() const;
};

struct EpochLog {
  int epoch = 0;
  Scalar clean_cost = std::numeric_limits<Scalar>::quiet_NaN();
  Scalar adv_cost = std::numeric_limits<Scalar>::quiet_NaN();
  Scalar grad_norm_pre = 0.0;   // mean over batches, before clipping
  Scalar grad_norm_post = 0.0;  // mean over batches, after clipping
  Scalar lr = 0.0;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  // Batch-level forward sweeps through the training branch. Standard AT
  // performs (steps + 1) per batch, free AT performs `steps` per batch.
  long train_passes = 0;
  long clean_passes = 0;  // extra sweeps for the alpha-weighted clean term
  long skipped_samples = 0;
  std::uint64_t checkpoint_digest = 0;

  void write_csv(const std::string& path, const std::string& header_comment) const;
};

struct TrainResult {
  MlpParams params;
  TrainLog log;
};

// Inner maximization per method, then an Adam step on
// alpha * clean + (1 - alpha) * adversarial cost. NAT degenerates to plain
// descent on the task cost; AT_MSE attacks and trains the MSE loss instead.
TrainResult train(const TrainConfig& config, const Dataset& dataset, const GridSpec& grid);

struct EvalColumn {
  std::string name;
  Scalar mean_cost = 0.0;
};

struct ResultTable {
  std::vector<EvalColumn> columns;
  long failed_samples = 0;
};

struct EvalSpec {
  std::vector<Scalar> eps_x;
  std::vector<Scalar> eps_phi;
  std::vector<std::pair<Scalar, Scalar>> joint;
  int steps = 30;
  int restarts = 3;
  std::uint64_t seed = 0;
  // Samples are independent and reduced in index order, so any worker count
  // reproduces the single-worker result bit for bit.
  int workers = 1;
};

// Mean task cost per attack column using multistart worst-case attacks:
// Clean, Input(eps_x...), CO(eps_phi...), Integrated(pairs...).
ResultTable evaluate(const MlpParams& theta, const Dataset& dataset, const GridSpec& grid,
                     const EvalSpec& spec);

}  // namespace dfl
