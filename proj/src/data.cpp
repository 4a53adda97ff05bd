#include "dfl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "dfl/qp.hpp"
#include "dfl/tasks.hpp"

namespace dfl {

using nlohmann::json;

std::vector<Index> Dataset::indices(const std::string& tag) const {
  std::vector<Index> out;
  for (Index i = 0; i < n_samples(); ++i)
    if (split_tag[static_cast<size_t>(i)] == tag) out.push_back(i);
  return out;
}

Dataset Dataset::subset(const std::vector<Index>& rows) const {
  Dataset out;
  out.features = Mat(static_cast<Index>(rows.size()), n_features());
  out.loads = Mat(static_cast<Index>(rows.size()), n_load());
  out.attack_mask = attack_mask;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.features.row(static_cast<Index>(r)) = features.row(rows[r]);
    out.loads.row(static_cast<Index>(r)) = loads.row(rows[r]);
    out.split_tag.push_back(split_tag[static_cast<size_t>(rows[r])]);
  }
  return out;
}

std::uint64_t Dataset::digest() const {
  std::uint64_t h = fnv1a(features.data(), sizeof(Scalar) * static_cast<size_t>(features.size()));
  h = fnv1a(loads.data(), sizeof(Scalar) * static_cast<size_t>(loads.size()), h);
  for (bool b : attack_mask) h = fnv1a(&b, 1, h);
  for (const auto& t : split_tag) h = fnv1a(t.data(), t.size(), h);
  return h;
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

}  // namespace

Dataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("dataset: cannot open " + path);
  std::string header;
  if (!std::getline(in, header)) throw DataError("dataset: empty file " + path);
  auto cols = split_line(header);

  Index n_feat = 0, n_load = 0;
  bool has_split = false;
  for (std::size_t c = 0; c < cols.size(); ++c) {
    const std::string expect_f = "feature_" + std::to_string(n_feat);
    const std::string expect_l = "load_" + std::to_string(n_load);
    if (cols[c] == expect_f && n_load == 0 && !has_split) {
      ++n_feat;
    } else if (cols[c] == expect_l && !has_split) {
      ++n_load;
    } else if (cols[c] == "split" && c + 1 == cols.size()) {
      has_split = true;
    } else {
      throw DataError("dataset: unexpected column '" + cols[c] + "' in " + path);
    }
  }
  if (n_feat == 0 || n_load == 0) throw DataError("dataset: need feature_* and load_* columns");

  std::vector<Vec> rows;
  std::vector<std::string> tags;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split_line(line);
    if (static_cast<Index>(cells.size()) != n_feat + n_load + (has_split ? 1 : 0))
      throw DataError("dataset: row with wrong column count in " + path);
    Vec row(n_feat + n_load);
    for (Index c = 0; c < n_feat + n_load; ++c) {
      try {
        row[c] = std::stod(cells[static_cast<size_t>(c)]);
      } catch (const std::exception&) {
        throw DataError("dataset: non-numeric cell in " + path);
      }
      if (!std::isfinite(row[c])) throw DataError("dataset: NaN or infinite cell in " + path);
    }
    rows.push_back(row);
    tags.push_back(has_split ? cells.back() : "");
  }

  Dataset ds;
  ds.features = Mat(static_cast<Index>(rows.size()), n_feat);
  ds.loads = Mat(static_cast<Index>(rows.size()), n_load);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    ds.features.row(static_cast<Index>(r)) = rows[r].head(n_feat);
    ds.loads.row(static_cast<Index>(r)) = rows[r].tail(n_load);
  }
  ds.split_tag = tags;
  if (ds.loads.size() > 0 && ds.loads.minCoeff() < 0.0)
    throw DataError("dataset: negative load in " + path);

  // Sidecar: attack mask and optional normalization stats.
  ds.attack_mask.assign(static_cast<size_t>(n_feat), true);
  if (n_feat > kCalendricColumns)
    for (Index c = 0; c < kCalendricColumns; ++c) ds.attack_mask[static_cast<size_t>(c)] = false;
  std::ifstream side(path + ".stats.json");
  if (side) {
    json sj;
    try {
      sj = json::parse(side);
    } catch (const json::parse_error& e) {
      throw DataError("dataset: sidecar parse error: " + std::string(e.what()));
    }
    if (sj.contains("attack_mask")) {
      auto mv = sj["attack_mask"].get<std::vector<bool>>();
      if (static_cast<Index>(mv.size()) != n_feat)
        throw DataError("dataset: sidecar attack_mask size mismatch");
      ds.attack_mask = mv;
    }
    if (sj.contains("feature_min") && sj.contains("feature_max")) {
      auto mn = sj["feature_min"].get<std::vector<Scalar>>();
      auto mx = sj["feature_max"].get<std::vector<Scalar>>();
      if (static_cast<Index>(mn.size()) != n_feat || static_cast<Index>(mx.size()) != n_feat)
        throw DataError("dataset: sidecar stats size mismatch");
      for (Index c = 0; c < n_feat; ++c) {
        if (!ds.attack_mask[static_cast<size_t>(c)]) continue;  // calendric stays raw
        const Scalar span = mx[static_cast<size_t>(c)] - mn[static_cast<size_t>(c)];
        if (span <= 0.0) continue;
        ds.features.col(c) = ((ds.features.col(c).array() - mn[static_cast<size_t>(c)]) / span)
                                 .cwiseMin(1.0)
                                 .cwiseMax(0.0);
      }
    }
  }
  return ds;
}

void save_csv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("dataset: cannot write " + path);
  out.precision(17);
  bool any_tag = false;
  for (const auto& t : ds.split_tag) any_tag = any_tag || !t.empty();
  for (Index c = 0; c < ds.n_features(); ++c) out << (c ? "," : "") << "feature_" << c;
  for (Index c = 0; c < ds.n_load(); ++c) out << ",load_" << c;
  if (any_tag) out << ",split";
  out << "\n";
  for (Index r = 0; r < ds.n_samples(); ++r) {
    for (Index c = 0; c < ds.n_features(); ++c) out << (c ? "," : "") << ds.features(r, c);
    for (Index c = 0; c < ds.n_load(); ++c) out << "," << ds.loads(r, c);
    if (any_tag) out << "," << ds.split_tag[static_cast<size_t>(r)];
    out << "\n";
  }
  json sj;
  sj["attack_mask"] = ds.attack_mask;
  std::ofstream side(path + ".stats.json");
  side << sj.dump() << "\n";
}

Dataset generate_synthetic(const GridSpec& grid, Index n_samples, std::uint64_t seed) {
  const Index D = grid.n_load();
  const Index F = kCalendricColumns + 6 * D;
  Dataset ds;
  ds.features = Mat(n_samples, F);
  ds.loads = Mat(n_samples, D);
  ds.attack_mask.assign(static_cast<size_t>(F), true);
  for (Index c = 0; c < kCalendricColumns; ++c) ds.attack_mask[static_cast<size_t>(c)] = false;
  ds.split_tag.assign(static_cast<size_t>(n_samples), "");
  if (n_samples == 0) return ds;

  auto rng = make_rng(seed, /*purpose=*/0x64617461 /* "data" */);
  // Fixed random map from features to loads.
  Mat w = Mat(D, 6);
  for (Index d = 0; d < D; ++d) w.row(d) = uniform_vec(rng, 6, 0.05, 0.35).transpose();
  Vec base = uniform_vec(rng, D, 0.4, 1.0);
  Vec psi = uniform_vec(rng, D, 0.0, 2.0 * M_PI);
  Mat phase1(D, 6), phase2(D, 6);
  for (Index d = 0; d < D; ++d) {
    phase1.row(d) = uniform_vec(rng, 6, 0.0, 2.0 * M_PI).transpose();
    phase2.row(d) = uniform_vec(rng, 6, 0.0, 2.0 * M_PI).transpose();
  }

  for (Index t = 0; t < n_samples; ++t) {
    const long hour = t % 24;
    const long weekday = (t / 24) % 7;
    ds.features(t, 0) = std::sin(2.0 * M_PI * weekday / 7.0);
    ds.features(t, 1) = std::cos(2.0 * M_PI * weekday / 7.0);
    ds.features(t, 2) = std::sin(2.0 * M_PI * hour / 24.0);
    ds.features(t, 3) = std::cos(2.0 * M_PI * hour / 24.0);
    for (Index d = 0; d < D; ++d) {
      for (Index c = 0; c < 6; ++c) {
        std::normal_distribution<Scalar> noise(0.0, 0.04);
        Scalar v = 0.5 + 0.28 * std::sin(2.0 * M_PI * t / 24.0 + phase1(d, c)) +
                   0.14 * std::sin(2.0 * M_PI * t / (24.0 * 7.0) + phase2(d, c)) + noise(rng);
        ds.features(t, kCalendricColumns + 6 * d + c) = std::min(1.0, std::max(0.0, v));
      }
    }
    for (Index d = 0; d < D; ++d) {
      std::normal_distribution<Scalar> noise(0.0, 0.02);
      Scalar met = w.row(d).dot(ds.features.row(t).segment(kCalendricColumns + 6 * d, 6));
      Scalar v = base[d] * (0.45 + 0.3 * std::sin(2.0 * M_PI * t / 24.0 + psi[d]) + met) +
                 noise(rng);
      ds.loads(t, d) = std::max(0.0, v);
    }
  }

  // Global load scale: grow until the dispatch stage starts using slack on
  // more than 5% of samples, then back off one step.
  DispatchModel stage1 = build_dispatch(grid);
  auto slack_fraction = [&](Scalar scale) {
    Index with_slack = 0;
    for (Index t = 0; t < n_samples; ++t) {
      Vec y = scale * ds.loads.row(t).transpose();
      QpSolution sol = solve_qp(stage1.qp, y);
      if (sol.status != QpStatus::Optimal) {
        ++with_slack;
        continue;
      }
      DispatchDecision dec = extract_dispatch(stage1, sol);
      if (dec.slack.maxCoeff() > 1e-6) ++with_slack;
    }
    return static_cast<Scalar>(with_slack) / static_cast<Scalar>(n_samples);
  };

  const Scalar total_cap = grid.gen_p_max().sum();
  const Scalar mean_total = ds.loads.rowwise().sum().mean();
  Scalar scale = mean_total > 0.0 ? 0.3 * total_cap / mean_total : 1.0;
  const Scalar growth = 1.25;
  int guard = 0;
  while (slack_fraction(scale * growth) <= 0.05 && guard++ < 40) scale *= growth;
  ds.loads *= scale;
  return ds;
}

void split_dataset(Dataset& ds, const std::vector<Scalar>& fractions,
                   const std::vector<std::string>& tags, std::uint64_t seed) {
  if (fractions.size() != tags.size() || fractions.empty())
    throw ConfigError("split: fractions and tags must align");
  Scalar total = std::accumulate(fractions.begin(), fractions.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split: fractions must sum to 1");

  std::vector<Index> order(static_cast<size_t>(ds.n_samples()));
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_rng(seed, /*purpose=*/0x73706c69 /* "spli" */);
  std::shuffle(order.begin(), order.end(), rng);

  const Index n = ds.n_samples();
  Index at = 0;
  for (std::size_t k = 0; k < fractions.size(); ++k) {
    Index take = k + 1 == fractions.size()
                     ? n - at
                     : static_cast<Index>(std::floor(fractions[k] * static_cast<Scalar>(n)));
    for (Index i = 0; i < take && at < n; ++i, ++at)
      ds.split_tag[static_cast<size_t>(order[static_cast<size_t>(at)])] = tags[k];
  }
}

}  // namespace dfl
