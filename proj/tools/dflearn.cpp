// Command-line front end: data generation, training, evaluation, exact
// certification and gradient diagnostics for the two-stage dispatch
// learning pipeline.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "dfl/attacks.hpp"
#include "dfl/certify.hpp"
#include "dfl/data.hpp"
#include "dfl/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dfl;

namespace {

struct CliOptions {
  std::string config_path;
  std::string grid_override;
  std::string dataset_override;
  std::string out_override;
  long seed_override = -1;
  bool force = false;
  int workers = static_cast<int>(std::thread::hardware_concurrency());
  int toys = 50;  // demo-prop1
};

struct Context {
  json cfg;
  std::string digest;
  std::uint64_t seed = 0;
  fs::path out_dir;
  bool force = false;
  int workers = 1;
};

json load_config(const CliOptions& opts) {
  json cfg = json::object();
  if (!opts.config_path.empty()) {
    std::ifstream in(opts.config_path);
    if (!in) throw ConfigError("cannot open config file " + opts.config_path);
    try {
      cfg = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config parse error: " + std::string(e.what()));
    }
  }
  if (!opts.grid_override.empty()) cfg["grid"] = opts.grid_override;
  if (!opts.dataset_override.empty()) cfg["dataset"] = opts.dataset_override;
  if (!opts.out_override.empty()) cfg["out_dir"] = opts.out_override;
  if (opts.seed_override >= 0) cfg["seed"] = opts.seed_override;
  return cfg;
}

Context make_context(const CliOptions& opts) {
  Context ctx;
  ctx.cfg = load_config(opts);
  ctx.seed = ctx.cfg.value("seed", 0UL);
  ctx.force = opts.force;
  ctx.workers = std::max(1, opts.workers);

  fs::path out = ctx.cfg.value("out_dir", std::string("out"));
  if (out.is_relative()) {
    if (const char* root = std::getenv("DFL_OUTPUT_ROOT")) out = fs::path(root) / out;
  }
  ctx.out_dir = out;
  std::error_code ec;
  fs::create_directories(ctx.out_dir, ec);
  if (ec || !fs::exists(ctx.out_dir))
    throw ConfigError("output directory is not writable: " + ctx.out_dir.string());

  json canonical = ctx.cfg;
  canonical["seed"] = ctx.seed;
  ctx.digest = hex_digest(fnv1a(canonical.dump()));
  return ctx;
}

// Artifacts never overwrite silently; reruns need --force.
std::ofstream open_artifact(const Context& ctx, const std::string& name) {
  fs::path path = ctx.out_dir / name;
  if (fs::exists(path) && !ctx.force)
    throw ConfigError("artifact exists, pass --force to overwrite: " + path.string());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write artifact " + path.string());
  out << "# config_digest=" << ctx.digest << " seed=" << ctx.seed << "\n";
  return out;
}

GridSpec require_grid(const Context& ctx) {
  if (!ctx.cfg.contains("grid")) throw ConfigError("config needs a 'grid' path");
  return load_grid(ctx.cfg["grid"].get<std::string>());
}

Dataset require_dataset(const Context& ctx, const std::string& split_tag) {
  if (!ctx.cfg.contains("dataset")) throw ConfigError("config needs a 'dataset' path");
  Dataset ds = load_csv(ctx.cfg["dataset"].get<std::string>());
  if (!split_tag.empty()) {
    auto idx = ds.indices(split_tag);
    if (idx.empty())
      throw DataError("dataset has no rows tagged '" + split_tag + "'");
    return ds.subset(idx);
  }
  return ds;
}

MlpParams require_checkpoint(const Context& ctx, const json& section) {
  std::string name = section.value("checkpoint", std::string("model.json"));
  fs::path path = name;
  if (path.is_relative() && !fs::exists(path)) path = ctx.out_dir / path;
  if (!fs::exists(path)) throw ConfigError("checkpoint not found: " + path.string());
  return load_checkpoint(path.string());
}

AttackBudget budget_from(const json& section, int default_steps) {
  AttackBudget b;
  b.eps_x = section.value("eps_x", 0.0);
  b.eps_phi = section.value("eps_phi", 0.0);
  b.steps = section.value("steps", default_steps);
  b.restarts = section.value("restarts", 3);
  return b;
}

int cmd_gen_data(const Context& ctx) {
  GridSpec grid = require_grid(ctx);
  json synth = ctx.cfg.value("synth", json::object());
  const Index n = synth.value("n_samples", 500L);
  Dataset ds = generate_synthetic(grid, n, ctx.seed);
  std::vector<Scalar> fracs = synth.value("split", std::vector<Scalar>{0.8, 0.2});
  std::vector<std::string> tags = synth.value("split_tags",
                                              std::vector<std::string>{"train", "test"});
  if (!fracs.empty()) split_dataset(ds, fracs, tags, ctx.seed);

  fs::path path = ctx.out_dir / ctx.cfg.value("dataset_name", std::string("dataset.csv"));
  if (fs::exists(path) && !ctx.force)
    throw ConfigError("artifact exists, pass --force to overwrite: " + path.string());
  save_csv(ds, path.string());
  std::cout << "wrote " << path.string() << " (" << ds.n_samples() << " samples, digest "
            << hex_digest(ds.digest()) << ", config " << ctx.digest << ")\n";
  return 0;
}

int cmd_train(const Context& ctx) {
  GridSpec grid = require_grid(ctx);
  json tj = ctx.cfg.value("train", json::object());
  Dataset ds = require_dataset(ctx, tj.value("split_tag", std::string("train")));

  TrainConfig cfg;
  cfg.method = parse_method(tj.value("method", std::string("nat")));
  cfg.alpha = tj.value("alpha", 1.0);
  cfg.budget = budget_from(tj, /*default_steps=*/7);
  cfg.epochs = tj.value("epochs", 10);
  cfg.batch_size = tj.value("batch_size", 32);
  cfg.lr = tj.value("lr", 1e-3);
  cfg.warm_start = tj.value("warm_start", std::string());
  cfg.free_at = tj.value("free_at", false);
  cfg.seed = ctx.seed;
  if (tj.contains("hidden")) {
    cfg.hidden_sizes.clear();
    for (const auto& h : tj["hidden"]) cfg.hidden_sizes.push_back(h.get<Index>());
  }

  TrainResult result = train(cfg, ds, grid);

  fs::path ckpt = ctx.out_dir / tj.value("checkpoint", std::string("model.json"));
  if (fs::exists(ckpt) && !ctx.force)
    throw ConfigError("artifact exists, pass --force to overwrite: " + ckpt.string());
  save_checkpoint(result.params, nullptr, ckpt.string());

  const std::string log_name = tj.value("log", std::string("train_log.csv"));
  fs::path log_path = ctx.out_dir / log_name;
  if (fs::exists(log_path) && !ctx.force)
    throw ConfigError("artifact exists, pass --force to overwrite: " + log_path.string());
  result.log.write_csv(log_path.string(),
                       "config_digest=" + ctx.digest + " seed=" + std::to_string(ctx.seed));
  std::cout << "trained " << method_name(cfg.method) << ": checkpoint " << ckpt.string()
            << " digest " << hex_digest(result.log.checkpoint_digest) << ", passes "
            << result.log.train_passes << ", skipped " << result.log.skipped_samples << "\n";
  return 0;
}

void write_markdown_table(std::ofstream& out, const ResultTable& table) {
  out << "|";
  for (const auto& c : table.columns) out << " " << c.name << " |";
  out << "\n|";
  for (std::size_t i = 0; i < table.columns.size(); ++i) out << " --- |";
  out << "\n|";
  out.precision(1);
  out << std::fixed;
  for (const auto& c : table.columns) out << " " << c.mean_cost << " |";
  out << "\n";
}

int cmd_evaluate(const Context& ctx) {
  GridSpec grid = require_grid(ctx);
  json ej = ctx.cfg.value("eval", json::object());
  Dataset ds = require_dataset(ctx, ej.value("split_tag", std::string()));
  MlpParams mlp = require_checkpoint(ctx, ej);

  EvalSpec spec;
  spec.eps_x = ej.value("eps_x", std::vector<Scalar>{});
  spec.eps_phi = ej.value("eps_phi", std::vector<Scalar>{});
  for (const auto& pair : ej.value("joint", std::vector<std::vector<Scalar>>{})) {
    if (pair.size() != 2) throw ConfigError("eval.joint entries must be [eps_x, eps_phi]");
    spec.joint.emplace_back(pair[0], pair[1]);
  }
  spec.steps = ej.value("steps", 30);
  spec.restarts = ej.value("restarts", 3);
  spec.seed = ctx.seed;
  spec.workers = ctx.workers;

  ResultTable table = evaluate(mlp, ds, grid, spec);

  std::ofstream csv = open_artifact(ctx, ej.value("results", std::string("results.csv")));
  csv.precision(10);
  for (std::size_t i = 0; i < table.columns.size(); ++i)
    csv << (i ? "," : "") << table.columns[i].name;
  csv << "\n";
  for (std::size_t i = 0; i < table.columns.size(); ++i)
    csv << (i ? "," : "") << table.columns[i].mean_cost;
  csv << "\n# failed_samples=" << table.failed_samples << "\n";

  std::ofstream md = open_artifact(ctx, ej.value("results_md", std::string("results.md")));
  write_markdown_table(md, table);

  std::cout.precision(10);
  for (const auto& c : table.columns) std::cout << c.name << " = " << c.mean_cost << "\n";
  if (table.failed_samples > 0)
    std::cout << "failed samples: " << table.failed_samples << "\n";
  return 0;
}

int cmd_certify(const Context& ctx) {
  GridSpec grid = require_grid(ctx);
  json cj = ctx.cfg.value("certify", json::object());
  Dataset ds = require_dataset(ctx, cj.value("split_tag", std::string()));
  MlpParams mlp = require_checkpoint(ctx, cj);

  const Scalar eps = cj.value("eps", 0.05);
  if (cj.value("eps_phi", 0.0) != 0.0)
    throw ConfigError(
        "certification over susceptance is bilinear in the decision variables; "
        "only input-space budgets are supported");
  const Index n_samples = std::min<Index>(ds.n_samples(), cj.value("samples", 10L));
  MilpLimits limits;
  limits.max_nodes = cj.value("max_nodes", 500000L);
  limits.time_limit_sec = cj.value("time_limit_sec", 600.0);
  const Scalar big_m = cj.value("big_m", 1e5);
  const UnpredictableParams phi = UnpredictableParams::nominal(grid);

  struct Row {
    Scalar clean = 0, pgd30 = 0, exact = 0, verify = 0, gap = 0;
    long nodes = 0;
    MilpStatus status = MilpStatus::NodeLimit;
    std::vector<std::string> warnings;
  };
  std::vector<Row> rows(static_cast<size_t>(n_samples));

  parallel_for(n_samples, ctx.workers, [&](Index i) {
    Row& row = rows[static_cast<size_t>(i)];
    const Vec x = ds.features.row(i).transpose();
    const Vec y = ds.loads.row(i).transpose();
    row.clean = infer(mlp, x, y, phi, grid, /*gamma=*/0.0).cost;

    AttackBudget budget = AttackBudget::eval(eps, 0.0);
    AttackResult pgd = worst_input_attack(mlp, x, y, phi, grid, budget, ds.attack_mask,
                                          ctx.seed ^ static_cast<std::uint64_t>(i));
    row.pgd30 = infer(mlp, x + pgd.delta_x, y, phi, grid, /*gamma=*/0.0).cost;

    CertModel cert = assemble_cert(mlp, grid, x, y, eps, phi, ds.attack_mask, big_m);
    MilpLimits lim = limits;
    lim.warm_lower_bound = row.pgd30 - 1e-6 * (1.0 + std::abs(row.pgd30));
    MilpResult res = solve_milp(cert.milp, lim);
    row.exact = res.objective;
    row.nodes = res.nodes;
    row.gap = res.gap;
    row.status = res.status;
    row.warnings = res.warnings;
    if (res.assignment.size() > 0) {
      row.verify = verify_attack(cert, res, mlp, grid, y, phi);
      // Post-hoc big-M validity check on the optimal duals.
      Scalar worst_dual = 0.0;
      for (Index v : cert.dispatch.lambda_vars)
        worst_dual = std::max(worst_dual, std::abs(res.assignment[v]));
      for (Index v : cert.redispatch.lambda_vars)
        worst_dual = std::max(worst_dual, std::abs(res.assignment[v]));
      if (worst_dual > 0.99 * big_m)
        row.warnings.push_back("dual within 1% of big-M; bound may be invalid");
    } else {
      // The warm PGD point was never improved; it is the certified attack.
      row.verify = infer(mlp, x + pgd.delta_x, y, phi, grid, /*gamma=*/0.0).cost;
    }
  });

  std::ofstream csv = open_artifact(ctx, cj.value("results", std::string("certify.csv")));
  csv.precision(10);
  csv << "sample,clean,pgd30,exact,verify,status,nodes,gap,warnings\n";
  for (Index i = 0; i < n_samples; ++i) {
    const Row& r = rows[static_cast<size_t>(i)];
    const char* status = r.status == MilpStatus::Optimal      ? "optimal"
                         : r.status == MilpStatus::Infeasible ? "infeasible"
                         : r.status == MilpStatus::GapLimit   ? "gap-limit"
                                                              : "node-limit";
    csv << i << "," << r.clean << "," << r.pgd30 << "," << r.exact << "," << r.verify << ","
        << status << "," << r.nodes << "," << r.gap << ",";
    for (std::size_t w = 0; w < r.warnings.size(); ++w)
      csv << (w ? "; " : "") << r.warnings[w];
    csv << "\n";
    std::cout << "sample " << i << ": clean " << r.clean << ", pgd30 " << r.pgd30
              << ", exact " << r.exact << ", verify " << r.verify << " [" << status << ", "
              << r.nodes << " nodes]\n";
  }
  return 0;
}

int cmd_diagnose(const Context& ctx) {
  GridSpec grid = require_grid(ctx);
  json dj = ctx.cfg.value("diagnose", json::object());
  Dataset ds = require_dataset(ctx, dj.value("split_tag", std::string()));
  MlpParams mlp = require_checkpoint(ctx, dj);

  AttackBudget budget = budget_from(dj, /*default_steps=*/7);
  const Index batch = dj.value("batch_size", 16L);
  const Index n_batches = (ds.n_samples() + batch - 1) / batch;

  std::ofstream csv = open_artifact(ctx, dj.value("results", std::string("diagnose.csv")));
  csv.precision(10);
  csv << "batch,grad_norm1_input,grad_norm1_phi,cosine\n";
  Scalar nx = 0, np = 0, cs = 0;
  Index done = 0;
  for (Index b = 0; b < n_batches; ++b) {
    const Index lo = b * batch;
    const Index hi = std::min<Index>(ds.n_samples(), lo + batch);
    Mat bx = ds.features.middleRows(lo, hi - lo);
    Mat by = ds.loads.middleRows(lo, hi - lo);
    try {
      GradientAlignment ga = gradient_alignment(mlp, bx, by, grid, budget, ds.attack_mask,
                                                ctx.seed ^ static_cast<std::uint64_t>(b));
      csv << b << "," << ga.norm_x << "," << ga.norm_phi << "," << ga.cosine << "\n";
      nx += ga.norm_x;
      np += ga.norm_phi;
      cs += ga.cosine;
      ++done;
    } catch (const SolverError& e) {
      csv << b << ",,," << "\n";
    }
  }
  if (done > 0) {
    std::cout << "mean gradient 1-norms: input " << nx / done << ", susceptance " << np / done
              << "; mean cosine " << cs / done << " over " << done << " batches\n";
  }
  return 0;
}

int cmd_demo_prop1(const Context& ctx, int toys) {
  std::cout << "crafted toy (binding constraints):\n";
  Prop1Toy crafted;
  crafted.x = Vec(2);
  crafted.y = Vec(2);
  crafted.x << 1.0, 2.0;
  crafted.y << 2.0, 0.5;
  Prop1Result res = demo_misformulation(crafted);
  std::cout.precision(6);
  std::cout << "  train(relaxed)  = " << res.m_train_relaxed << "\n"
            << "  train(bilevel)  = " << res.m_train_bilevel << "\n"
            << "  infer(bilevel)  = " << res.m_infer_bilevel << "\n"
            << "  infer(relaxed)  = " << res.m_infer_relaxed << "\n";
  bool all_hold = res.chain_holds();
  bool any_strict = res.strict_outer();

  std::ofstream csv = open_artifact(ctx, "prop1.csv");
  csv.precision(10);
  csv << "toy,train_relaxed,train_bilevel,infer_bilevel,infer_relaxed,chain,strict\n";
  auto emit = [&](const std::string& name, const Prop1Result& r) {
    csv << name << "," << r.m_train_relaxed << "," << r.m_train_bilevel << ","
        << r.m_infer_bilevel << "," << r.m_infer_relaxed << "," << (r.chain_holds() ? 1 : 0)
        << "," << (r.strict_outer() ? 1 : 0) << "\n";
  };
  emit("crafted", res);
  for (int t = 0; t < toys; ++t) {
    Prop1Result r = demo_misformulation(random_prop1_toy(ctx.seed + 1000 + t));
    emit("random_" + std::to_string(t), r);
    all_hold = all_hold && r.chain_holds();
    any_strict = any_strict || r.strict_outer();
  }
  std::cout << "chain " << (all_hold ? "holds" : "VIOLATED") << " on " << (toys + 1)
            << " toys; strict outer inequality " << (any_strict ? "observed" : "not observed")
            << "\n";
  return all_hold ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"decision-focused dispatch learning toolkit"};
  app.require_subcommand(1);

  CliOptions opts;
  app.add_option("--config", opts.config_path, "JSON config file");
  app.add_option("--grid", opts.grid_override, "grid file (overrides config)");
  app.add_option("--dataset", opts.dataset_override, "dataset csv (overrides config)");
  app.add_option("--out", opts.out_override, "output directory (overrides config)");
  app.add_option("--seed", opts.seed_override, "seed (overrides config)");
  app.add_option("--workers", opts.workers,
                 "worker threads for per-sample loops (results are identical for any count)");
  app.add_flag("--force", opts.force, "allow overwriting existing artifacts");

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset for a grid");
  auto* tr = app.add_subcommand("train", "train a forecaster");
  auto* ev = app.add_subcommand("evaluate", "attack-grid evaluation table");
  auto* ce = app.add_subcommand("certify", "exact input-space certification");
  auto* di = app.add_subcommand("diagnose", "gradient norms and alignment");
  auto* pr = app.add_subcommand("demo-prop1", "train/inference mismatch demonstration");
  pr->add_option("--toys", opts.toys, "number of random toys");
  for (auto* sub : {gen, tr, ev, ce, di, pr}) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    Context ctx = make_context(opts);
    if (gen->parsed()) return cmd_gen_data(ctx);
    if (tr->parsed()) return cmd_train(ctx);
    if (ev->parsed()) return cmd_evaluate(ctx);
    if (ce->parsed()) return cmd_certify(ctx);
    if (di->parsed()) return cmd_diagnose(ctx);
    if (pr->parsed()) return cmd_demo_prop1(ctx, opts.toys);
    std::cerr << "error: [config] no subcommand\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: [config] " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "error: [data] " << e.what() << "\n";
    return 3;
  } catch (const SolverError& e) {
    std::cerr << "error: [solver] " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: [internal] " << e.what() << "\n";
    return 5;
  }
}
