#include "dfl/grid.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <set>

#include <json.hpp>

namespace dfl {

using nlohmann::json;

Vec GridSpec::susceptances() const {
  Vec b(n_line());
  for (Index l = 0; l < n_line(); ++l) b[l] = lines[static_cast<size_t>(l)].susceptance;
  return b;
}

Vec GridSpec::flow_limits() const {
  Vec f(n_line());
  for (Index l = 0; l < n_line(); ++l) f[l] = lines[static_cast<size_t>(l)].flow_limit;
  return f;
}

Vec GridSpec::gen_costs() const {
  Vec c(n_gen());
  for (Index g = 0; g < n_gen(); ++g) c[g] = generators[static_cast<size_t>(g)].cost;
  return c;
}

Vec GridSpec::gen_p_min() const {
  Vec p(n_gen());
  for (Index g = 0; g < n_gen(); ++g) p[g] = generators[static_cast<size_t>(g)].p_min;
  return p;
}

Vec GridSpec::gen_p_max() const {
  Vec p(n_gen());
  for (Index g = 0; g < n_gen(); ++g) p[g] = generators[static_cast<size_t>(g)].p_max;
  return p;
}

namespace {

void check(bool ok, const std::string& what) {
  if (!ok) throw DataError("grid validation: " + what);
}

}  // namespace

void validate_grid(const GridSpec& grid) {
  check(grid.n_bus >= 1, "n_bus must be >= 1");
  check(grid.ref_bus >= 0 && grid.ref_bus < grid.n_bus, "ref_bus is not a valid bus index");
  check(!grid.generators.empty(), "at least one generator is required");
  check(!grid.loads.empty(), "at least one load bus is required");

  for (const auto& ln : grid.lines) {
    check(ln.from >= 0 && ln.from < grid.n_bus, "line from-bus out of range");
    check(ln.to >= 0 && ln.to < grid.n_bus, "line to-bus out of range");
    check(ln.from != ln.to, "line endpoints must differ");
    check(ln.susceptance > 0.0, "line susceptance must be > 0");
    check(ln.flow_limit > 0.0, "line flow_limit must be > 0");
  }
  for (const auto& g : grid.generators) {
    check(g.bus >= 0 && g.bus < grid.n_bus, "generator bus out of range");
    check(g.cost >= 0.0, "generator cost must be >= 0");
    check(g.p_min <= g.p_max, "generator p_min must be <= p_max");
  }
  for (int b : grid.loads) check(b >= 0 && b < grid.n_bus, "load bus out of range");
  {
    std::set<int> seen(grid.loads.begin(), grid.loads.end());
    check(seen.size() == grid.loads.size(), "duplicate load bus");
  }

  Scalar max_gen_cost = 0.0;
  for (const auto& g : grid.generators) max_gen_cost = std::max(max_gen_cost, g.cost);
  check(grid.c_gs > max_gen_cost, "penalty ordering violated: c_gs must exceed max generator cost");
  check(grid.c_ls > grid.c_gs, "penalty ordering violated: c_ls must exceed c_gs");
  check(grid.c_slack > 0.0, "c_slack must be > 0");

  // Connectivity over the line graph (union-find).
  std::vector<int> parent(static_cast<size_t>(grid.n_bus));
  for (int i = 0; i < grid.n_bus; ++i) parent[static_cast<size_t>(i)] = i;
  std::function<int(int)> find = [&](int x) {
    while (parent[static_cast<size_t>(x)] != x) {
      parent[static_cast<size_t>(x)] = parent[static_cast<size_t>(parent[static_cast<size_t>(x)])];
      x = parent[static_cast<size_t>(x)];
    }
    return x;
  };
  for (const auto& ln : grid.lines) parent[static_cast<size_t>(find(ln.from))] = find(ln.to);
  int root = find(0);
  for (int i = 1; i < grid.n_bus; ++i)
    check(find(i) == root, "line graph is disconnected");
}

namespace {

void reject_unknown(const json& obj, std::initializer_list<const char*> allowed,
                    const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) ok = true;
    if (!ok) throw DataError("grid file: unknown field '" + it.key() + "' in " + where);
  }
}

json require(const json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key))
    throw DataError("grid file: missing field '" + std::string(key) + "' in " + where);
  return obj.at(key);
}

}  // namespace

GridSpec load_grid(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("grid file: cannot open " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError("grid file: parse error in " + path + ": " + e.what());
  }

  reject_unknown(j, {"n_bus", "ref_bus", "lines", "generators", "loads", "penalties", "meta"},
                 "top level");

  GridSpec grid;
  try {
    grid.n_bus = require(j, "n_bus", "top level").get<int>();
    grid.ref_bus = require(j, "ref_bus", "top level").get<int>();
    for (const auto& lj : require(j, "lines", "top level")) {
      reject_unknown(lj, {"from", "to", "susceptance", "flow_limit"}, "lines[]");
      Line ln;
      ln.from = require(lj, "from", "lines[]").get<int>();
      ln.to = require(lj, "to", "lines[]").get<int>();
      ln.susceptance = require(lj, "susceptance", "lines[]").get<Scalar>();
      ln.flow_limit = require(lj, "flow_limit", "lines[]").get<Scalar>();
      grid.lines.push_back(ln);
    }
    for (const auto& gj : require(j, "generators", "top level")) {
      reject_unknown(gj, {"bus", "cost", "p_min", "p_max"}, "generators[]");
      Generator g;
      g.bus = require(gj, "bus", "generators[]").get<int>();
      g.cost = require(gj, "cost", "generators[]").get<Scalar>();
      g.p_min = require(gj, "p_min", "generators[]").get<Scalar>();
      g.p_max = require(gj, "p_max", "generators[]").get<Scalar>();
      grid.generators.push_back(g);
    }
    for (const auto& bj : require(j, "loads", "top level")) grid.loads.push_back(bj.get<int>());
    json pj = require(j, "penalties", "top level");
    reject_unknown(pj, {"c_ls", "c_gs", "c_slack"}, "penalties");
    grid.c_ls = require(pj, "c_ls", "penalties").get<Scalar>();
    grid.c_gs = require(pj, "c_gs", "penalties").get<Scalar>();
    grid.c_slack = require(pj, "c_slack", "penalties").get<Scalar>();
  } catch (const json::exception& e) {
    throw DataError("grid file: malformed value in " + path + ": " + e.what());
  }

  validate_grid(grid);
  return grid;
}

void save_grid(const GridSpec& grid, const std::string& path) {
  json j;
  j["n_bus"] = grid.n_bus;
  j["ref_bus"] = grid.ref_bus;
  j["lines"] = json::array();
  for (const auto& ln : grid.lines)
    j["lines"].push_back({{"from", ln.from},
                          {"to", ln.to},
                          {"susceptance", ln.susceptance},
                          {"flow_limit", ln.flow_limit}});
  j["generators"] = json::array();
  for (const auto& g : grid.generators)
    j["generators"].push_back(
        {{"bus", g.bus}, {"cost", g.cost}, {"p_min", g.p_min}, {"p_max", g.p_max}});
  j["loads"] = grid.loads;
  j["penalties"] = {{"c_ls", grid.c_ls}, {"c_gs", grid.c_gs}, {"c_slack", grid.c_slack}};
  std::ofstream out(path);
  if (!out) throw DataError("grid file: cannot write " + path);
  out << j.dump(2) << "\n";
}

Incidence incidence(const GridSpec& grid) {
  Incidence inc;
  inc.A = Mat::Zero(grid.n_line(), grid.n_bus);
  for (Index l = 0; l < grid.n_line(); ++l) {
    inc.A(l, grid.lines[static_cast<size_t>(l)].from) = 1.0;
    inc.A(l, grid.lines[static_cast<size_t>(l)].to) = -1.0;
  }
  inc.Cg = Mat::Zero(grid.n_bus, grid.n_gen());
  for (Index g = 0; g < grid.n_gen(); ++g)
    inc.Cg(grid.generators[static_cast<size_t>(g)].bus, g) = 1.0;
  inc.Cl = Mat::Zero(grid.n_bus, grid.n_load());
  for (Index d = 0; d < grid.n_load(); ++d) inc.Cl(grid.loads[static_cast<size_t>(d)], d) = 1.0;
  return inc;
}

Mat bus_susceptance_matrix(const Incidence& inc, const Vec& b) {
  return inc.A.transpose() * b.asDiagonal() * inc.A;
}

}  // namespace dfl
