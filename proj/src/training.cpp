#include "dfl/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <numeric>

namespace dfl {

TrainMethod parse_method(const std::string& name) {
  if (name == "nat") return TrainMethod::NAT;
  if (name == "at-mse") return TrainMethod::AT_MSE;
  if (name == "at-input") return TrainMethod::AT_INPUT;
  if (name == "at-para") return TrainMethod::AT_PARA;
  if (name == "at-both") return TrainMethod::AT_BOTH;
  throw ConfigError("unknown training method '" + name + "'");
}

std::string method_name(TrainMethod m) {
  switch (m) {
    case TrainMethod::NAT: return "nat";
    case TrainMethod::AT_MSE: return "at-mse";
    case TrainMethod::AT_INPUT: return "at-input";
    case TrainMethod::AT_PARA: return "at-para";
    case TrainMethod::AT_BOTH: return "at-both";
  }
  return "?";
}

void TrainConfig::validate() const {
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("train: alpha must be in [0,1]");
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (lr <= 0.0) throw ConfigError("train: lr must be > 0");
  if (budget.steps < 1) throw ConfigError("train: budget.steps must be >= 1");
  if (budget.eps_x < 0.0 || budget.eps_phi < 0.0) throw ConfigError("train: budgets must be >= 0");
}

int TrainConfig::effective_epochs() const {
  if (!free_at) return epochs;
  return std::max(1, epochs / budget.steps);
}

void TrainLog::write_csv(const std::string& path, const std::string& header_comment) const {
  std::ofstream out(path);
  if (!out) throw DataError("train log: cannot write " + path);
  if (!header_comment.empty()) out << "# " << header_comment << "\n";
  out << "# train_passes=" << train_passes << " clean_passes=" << clean_passes
      << " skipped_samples=" << skipped_samples << " checkpoint_digest="
      << hex_digest(checkpoint_digest) << "\n";
  out << "epoch,clean_cost,adv_cost,grad_norm_pre,grad_norm_post,lr\n";
  for (const auto& e : epochs)
    out << e.epoch << "," << e.clean_cost << "," << e.adv_cost << "," << e.grad_norm_pre << ","
        << e.grad_norm_post << "," << e.lr << "\n";
}

namespace {

struct BatchAccum {
  MlpGrads grads;
  Scalar cost = 0.0;
  Index counted = 0;
  Index skipped = 0;
};

Scalar mse_loss(const Vec& y_hat, const Vec& y) {
  return (y_hat - y).squaredNorm() / static_cast<Scalar>(y.size());
}

// One forward/backward sweep of the task pipeline over a batch at the given
// per-sample perturbations. Solver failures skip the sample.
BatchAccum pipeline_sweep(const MlpParams& mlp, const Dataset& ds,
                          const std::vector<Index>& batch, const Mat* delta_x,
                          const Mat* delta_b, const UnpredictableParams& phi_nominal,
                          const GridSpec& grid, std::vector<PipelineGrads>* per_sample) {
  BatchAccum acc;
  acc.grads = zero_grads(mlp);
  if (per_sample) per_sample->assign(batch.size(), {});
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const Index i = batch[s];
    Vec x = ds.features.row(i).transpose();
    if (delta_x) x += delta_x->row(i).transpose();
    UnpredictableParams phi = phi_nominal;
    if (delta_b) phi.b = phi_nominal.nominal_b + delta_b->row(i).transpose();
    const Vec y = ds.loads.row(i).transpose();
    try {
      PipelineOutput out = infer(mlp, x, y, phi, grid);
      PipelineGrads g = pipeline_grads(mlp, x, y, phi, grid, out);
      acc.grads.accumulate(g.d_theta);
      acc.cost += out.cost;
      ++acc.counted;
      if (per_sample) (*per_sample)[s] = std::move(g);
    } catch (const SolverError& e) {
      ++acc.skipped;
      if (std::getenv("DFL_DEBUG_SOLVER"))
        std::cerr << "solver skip on sample " << i << ": " << e.what() << "\n";
    }
  }
  if (acc.counted > 0) {
    acc.grads.scale(1.0 / static_cast<Scalar>(acc.counted));
    acc.cost /= static_cast<Scalar>(acc.counted);
  }
  return acc;
}

// MSE sweep (network only, no optimization stages).
BatchAccum mse_sweep(const MlpParams& mlp, const Dataset& ds, const std::vector<Index>& batch,
                     const Mat* delta_x, std::vector<Vec>* d_x_out) {
  BatchAccum acc;
  acc.grads = zero_grads(mlp);
  if (d_x_out) d_x_out->assign(batch.size(), Vec());
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const Index i = batch[s];
    Vec x = ds.features.row(i).transpose();
    if (delta_x) x += delta_x->row(i).transpose();
    const Vec y = ds.loads.row(i).transpose();
    MlpTape tape;
    Vec y_hat = mlp_forward(mlp, x, &tape);
    Vec dL_dy = 2.0 * (y_hat - y) / static_cast<Scalar>(y.size());
    Vec d_x;
    MlpGrads g = mlp_backward(mlp, tape, dL_dy, &d_x);
    acc.grads.accumulate(g);
    acc.cost += mse_loss(y_hat, y);
    ++acc.counted;
    if (d_x_out) (*d_x_out)[s] = std::move(d_x);
  }
  acc.grads.scale(1.0 / static_cast<Scalar>(acc.counted));
  acc.cost /= static_cast<Scalar>(acc.counted);
  return acc;
}

void step_input_delta(Mat& delta_x, Index row, const Vec& x, const Vec& d_x,
                      const AttackBudget& budget, const std::vector<bool>& mask) {
  if (budget.eps_x <= 0.0) return;
  const Scalar step = budget.step_size_x();
  for (Index c = 0; c < x.size(); ++c) {
    if (!mask[static_cast<size_t>(c)]) continue;
    Scalar d = delta_x(row, c);
    if (d_x[c] != 0.0) d += step * (d_x[c] > 0.0 ? 1.0 : -1.0);
    d = std::min(budget.eps_x, std::max(-budget.eps_x, d));
    d = std::min(1.0 - x[c], std::max(-x[c], d));
    delta_x(row, c) = d;
  }
}

void step_phi_delta(Mat& delta_b, Index row, const Vec& nominal, const Vec& d_b,
                    const AttackBudget& budget) {
  if (budget.eps_phi <= 0.0) return;
  const Scalar gmax = d_b.cwiseAbs().maxCoeff();
  for (Index l = 0; l < nominal.size(); ++l) {
    Scalar d = delta_b(row, l);
    if (gmax > 0.0) d += budget.step_size_phi() * nominal[l] * (d_b[l] / gmax);
    const Scalar r = budget.eps_phi * nominal[l];
    delta_b(row, l) = std::min(r, std::max(-r, d));
  }
}

}  // namespace

TrainResult train(const TrainConfig& config, const Dataset& dataset, const GridSpec& grid) {
  config.validate();
  const Index n = dataset.n_samples();
  if (n == 0) throw ConfigError("train: dataset is empty");
  const Index F = dataset.n_features(), D = dataset.n_load();
  if (D != grid.n_load()) throw DataError("train: dataset load count does not match grid");

  MlpParams mlp;
  if (config.warm_start.empty()) {
    std::vector<Index> sizes;
    sizes.push_back(F);
    for (Index h : config.hidden_sizes) sizes.push_back(h);
    sizes.push_back(D);
    mlp = make_mlp(sizes, config.seed);
  } else {
    mlp = load_checkpoint(config.warm_start);
    if (mlp.input_size() != F || mlp.output_size() != D)
      throw ConfigError("train: warm-start checkpoint is incompatible with the dataset");
  }

  const int eff_epochs = config.effective_epochs();
  const Index n_batches = (n + config.batch_size - 1) / config.batch_size;
  const bool pipeline_method = config.method != TrainMethod::AT_MSE;
  const bool adversarial = config.method != TrainMethod::NAT;
  const int updates_per_batch = (config.free_at && adversarial) ? config.budget.steps : 1;
  OptimizerState opt = make_optimizer(
      mlp, config.lr, static_cast<long>(eff_epochs) * n_batches * updates_per_batch);

  const UnpredictableParams phi_nominal = UnpredictableParams::nominal(grid);
  const std::vector<bool>& mask = dataset.attack_mask;
  const bool attack_x =
      config.method == TrainMethod::AT_MSE || config.method == TrainMethod::AT_INPUT ||
      config.method == TrainMethod::AT_BOTH;
  const bool attack_b =
      config.method == TrainMethod::AT_PARA || config.method == TrainMethod::AT_BOTH;

  // Perturbation stores; free AT keeps them across batches (gradient reuse).
  Mat delta_x = Mat::Zero(n, F);
  Mat delta_b = Mat::Zero(n, grid.n_line());

  TrainResult result;
  TrainLog& log = result.log;

  auto check_abort = [&](const BatchAccum& acc, Index batch_id) {
    log.skipped_samples += acc.skipped;
    if (acc.counted == 0 ||
        static_cast<Scalar>(acc.skipped) >
            0.01 * static_cast<Scalar>(acc.counted + acc.skipped))
      throw SolverError("train: solver failures above 1% of batch " + std::to_string(batch_id));
    if (!std::isfinite(acc.cost))
      throw InternalError("train: non-finite loss in batch " + std::to_string(batch_id));
  };

  for (int epoch = 0; epoch < eff_epochs; ++epoch) {
    std::vector<Index> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    auto rng = make_rng(config.seed, /*purpose=*/0x65706f63 /* "epoc" */,
                        static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);

    EpochLog elog;
    elog.epoch = epoch;
    Scalar clean_sum = 0.0, adv_sum = 0.0, pre_sum = 0.0, post_sum = 0.0;
    Index clean_cnt = 0, adv_cnt = 0, step_cnt = 0;

    for (Index b = 0; b < n_batches; ++b) {
      std::vector<Index> batch;
      for (Index i = b * config.batch_size; i < std::min<Index>(n, (b + 1) * config.batch_size);
           ++i)
        batch.push_back(order[static_cast<size_t>(i)]);
      const Index batch_id = static_cast<Index>(epoch) * n_batches + b;

      auto apply_update = [&](const MlpGrads& grad, Scalar adv_cost, bool have_adv) {
        MlpGrads blended = zero_grads(mlp);
        Scalar clean_cost = std::numeric_limits<Scalar>::quiet_NaN();
        if (!adversarial) {
          blended = grad;
        } else {
          if (config.alpha > 0.0) {
            BatchAccum clean =
                pipeline_method
                    ? pipeline_sweep(mlp, dataset, batch, nullptr, nullptr, phi_nominal, grid,
                                     nullptr)
                    : mse_sweep(mlp, dataset, batch, nullptr, nullptr);
            ++log.clean_passes;
            check_abort(clean, batch_id);
            blended.accumulate(clean.grads, config.alpha);
            clean_cost = clean.cost;
          }
          blended.accumulate(grad, 1.0 - config.alpha);
        }
        if (std::isfinite(clean_cost)) {
          clean_sum += clean_cost;
          ++clean_cnt;
        }
        if (have_adv && std::isfinite(adv_cost)) {
          adv_sum += adv_cost;
          ++adv_cnt;
        }
        const Scalar pre = blended.norm1();
        pre_sum += pre;
        post_sum += std::min(pre, opt.clip_norm1);
        ++step_cnt;
        elog.lr = opt.lr_at(opt.step);
        clip_and_step(opt, mlp, blended);
      };

      if (!adversarial) {
        // NAT: plain descent on the task cost.
        BatchAccum acc =
            pipeline_sweep(mlp, dataset, batch, nullptr, nullptr, phi_nominal, grid, nullptr);
        ++log.train_passes;
        check_abort(acc, batch_id);
        clean_sum += acc.cost;
        ++clean_cnt;
        apply_update(acc.grads, acc.cost, /*have_adv=*/false);
        continue;
      }

      if (config.free_at) {
        // Gradient reuse: each sweep updates both the perturbation and the
        // parameters.
        for (int t = 0; t < config.budget.steps; ++t) {
          if (pipeline_method) {
            std::vector<PipelineGrads> per_sample;
            BatchAccum acc = pipeline_sweep(mlp, dataset, batch, attack_x ? &delta_x : nullptr,
                                            attack_b ? &delta_b : nullptr, phi_nominal, grid,
                                            &per_sample);
            ++log.train_passes;
            check_abort(acc, batch_id);
            for (std::size_t s = 0; s < batch.size(); ++s) {
              if (per_sample[s].d_x.size() == 0) continue;  // skipped sample
              const Index i = batch[s];
              const Vec x = dataset.features.row(i).transpose();
              if (attack_x)
                step_input_delta(delta_x, i, x, per_sample[s].d_x, config.budget, mask);
              if (attack_b)
                step_phi_delta(delta_b, i, phi_nominal.nominal_b, per_sample[s].d_phi_b,
                               config.budget);
            }
            apply_update(acc.grads, acc.cost, /*have_adv=*/true);
          } else {
            std::vector<Vec> d_x;
            BatchAccum acc = mse_sweep(mlp, dataset, batch, &delta_x, &d_x);
            ++log.train_passes;
            check_abort(acc, batch_id);
            for (std::size_t s = 0; s < batch.size(); ++s) {
              const Index i = batch[s];
              const Vec x = dataset.features.row(i).transpose();
              step_input_delta(delta_x, i, x, d_x[s], config.budget, mask);
            }
            apply_update(acc.grads, acc.cost, /*have_adv=*/true);
          }
        }
        continue;
      }

      // Standard adversarial training: PGD with theta frozen, then one
      // update with the perturbation frozen.
      for (Index i : batch) {
        delta_x.row(i).setZero();
        delta_b.row(i).setZero();
      }
      for (int t = 0; t < config.budget.steps; ++t) {
        if (pipeline_method) {
          std::vector<PipelineGrads> per_sample;
          BatchAccum acc = pipeline_sweep(mlp, dataset, batch, attack_x ? &delta_x : nullptr,
                                          attack_b ? &delta_b : nullptr, phi_nominal, grid,
                                          &per_sample);
          ++log.train_passes;
          check_abort(acc, batch_id);
          for (std::size_t s = 0; s < batch.size(); ++s) {
            if (per_sample[s].d_x.size() == 0) continue;
            const Index i = batch[s];
            const Vec x = dataset.features.row(i).transpose();
            if (attack_x) step_input_delta(delta_x, i, x, per_sample[s].d_x, config.budget, mask);
            if (attack_b)
              step_phi_delta(delta_b, i, phi_nominal.nominal_b, per_sample[s].d_phi_b,
                             config.budget);
          }
        } else {
          std::vector<Vec> d_x;
          BatchAccum acc = mse_sweep(mlp, dataset, batch, &delta_x, &d_x);
          ++log.train_passes;
          check_abort(acc, batch_id);
          for (std::size_t s = 0; s < batch.size(); ++s) {
            const Index i = batch[s];
            const Vec x = dataset.features.row(i).transpose();
            step_input_delta(delta_x, i, x, d_x[s], config.budget, mask);
          }
        }
      }
      BatchAccum adv = pipeline_method
                           ? pipeline_sweep(mlp, dataset, batch, attack_x ? &delta_x : nullptr,
                                            attack_b ? &delta_b : nullptr, phi_nominal, grid,
                                            nullptr)
                           : mse_sweep(mlp, dataset, batch, &delta_x, nullptr);
      ++log.train_passes;
      check_abort(adv, batch_id);
      apply_update(adv.grads, adv.cost, /*have_adv=*/true);
    }

    if (clean_cnt > 0) elog.clean_cost = clean_sum / static_cast<Scalar>(clean_cnt);
    if (adv_cnt > 0) elog.adv_cost = adv_sum / static_cast<Scalar>(adv_cnt);
    if (step_cnt > 0) {
      elog.grad_norm_pre = pre_sum / static_cast<Scalar>(step_cnt);
      elog.grad_norm_post = post_sum / static_cast<Scalar>(step_cnt);
    }
    log.epochs.push_back(elog);
  }

  // Pass-count accounting (also asserted by the acceptance suite).
  const long expected =
      adversarial ? (config.free_at
                         ? static_cast<long>(n_batches) * eff_epochs * config.budget.steps
                         : static_cast<long>(n_batches) * eff_epochs * (config.budget.steps + 1))
                  : static_cast<long>(n_batches) * eff_epochs;
  if (log.train_passes != expected)
    throw InternalError("train: pass accounting mismatch: " + std::to_string(log.train_passes) +
                        " vs expected " + std::to_string(expected));

  log.checkpoint_digest = mlp.digest();
  result.params = std::move(mlp);
  return result;
}

ResultTable evaluate(const MlpParams& theta, const Dataset& dataset, const GridSpec& grid,
                     const EvalSpec& spec) {
  ResultTable table;
  const Index n = dataset.n_samples();
  const UnpredictableParams phi = UnpredictableParams::nominal(grid);

  auto column = [&](const std::string& name, auto&& per_sample_cost) {
    std::vector<Scalar> costs(static_cast<size_t>(n),
                              std::numeric_limits<Scalar>::quiet_NaN());
    parallel_for(n, spec.workers, [&](Index i) {
      const Vec x = dataset.features.row(i).transpose();
      const Vec y = dataset.loads.row(i).transpose();
      try {
        costs[static_cast<size_t>(i)] = per_sample_cost(x, y, i);
      } catch (const SolverError&) {
        // reported below
      }
    });
    Scalar sum = 0.0;
    Index counted = 0;
    for (Scalar c : costs) {
      if (std::isfinite(c)) {
        sum += c;
        ++counted;
      } else {
        ++table.failed_samples;
      }
    }
    table.columns.push_back({name, counted > 0 ? sum / static_cast<Scalar>(counted) : 0.0});
  };

  column("clean", [&](const Vec& x, const Vec& y, Index) { return infer(theta, x, y, phi, grid).cost; });
  for (Scalar ex : spec.eps_x) {
    AttackBudget budget{ex, 0.0, spec.steps, spec.restarts};
    column("input_eps=" + std::to_string(ex), [&](const Vec& x, const Vec& y, Index i) {
      return worst_input_attack(theta, x, y, phi, grid, budget, dataset.attack_mask,
                                spec.seed ^ static_cast<std::uint64_t>(i))
          .cost;
    });
  }
  for (Scalar ep : spec.eps_phi) {
    AttackBudget budget{0.0, ep, spec.steps, spec.restarts};
    column("co_eps=" + std::to_string(ep), [&](const Vec& x, const Vec& y, Index i) {
      return worst_phi_attack(theta, x, y, phi, grid, budget,
                              spec.seed ^ static_cast<std::uint64_t>(i))
          .cost;
    });
  }
  for (const auto& [ex, ep] : spec.joint) {
    AttackBudget budget{ex, ep, spec.steps, spec.restarts};
    column("joint_eps_x=" + std::to_string(ex) + "_eps_phi=" + std::to_string(ep),
           [&](const Vec& x, const Vec& y, Index i) {
             return worst_joint_attack(theta, x, y, phi, grid, budget, dataset.attack_mask,
                                       spec.seed ^ static_cast<std::uint64_t>(i))
                 .cost;
           });
  }
  return table;
}

}  // namespace dfl
