#pragma once

#include <string>
#include <vector>

#include "dfl/common.hpp"

namespace dfl {

struct Line {
  int from = 0;
  int to = 0;
  Scalar susceptance = 0.0;  // per-unit, > 0
  Scalar flow_limit = 0.0;   // per-unit, symmetric +/- limit, > 0
};

struct Generator {
  int bus = 0;
  Scalar cost = 0.0;  // $/per-unit, linear
  Scalar p_min = 0.0;
  Scalar p_max = 0.0;
};

// Static per-unit network description. Immutable after load; safe to share
// read-only across workers.
struct GridSpec {
  int n_bus = 0;
  std::vector<Line> lines;
  std::vector<Generator> generators;
  std::vector<int> loads;  // bus index per load
  int ref_bus = 0;
  Scalar c_ls = 0.0;     // stage-two load-shedding penalty
  Scalar c_gs = 0.0;     // stage-two storage penalty
  Scalar c_slack = 0.0;  // stage-one slack penalty

  Index n_line() const { return static_cast<Index>(lines.size()); }
  Index n_gen() const { return static_cast<Index>(generators.size()); }
  Index n_load() const { return static_cast<Index>(loads.size()); }

  Vec susceptances() const;
  Vec flow_limits() const;
  Vec gen_costs() const;
  Vec gen_p_min() const;
  Vec gen_p_max() const;
};

// Throws DataError naming the violated invariant. Checks penalty ordering
// c_ls > c_gs > max generator cost, box sanity, index ranges and line-graph
// connectivity.
void validate_grid(const GridSpec& grid);

// Parses the normative grid file schema (JSON: n_bus, ref_bus, lines[],
// generators[], loads[], penalties). Unknown fields are rejected.
GridSpec load_grid(const std::string& path);

// Round-trip companion to load_grid.
void save_grid(const GridSpec& grid, const std::string& path);

struct Incidence {
  Mat A;   // n_line x n_bus, +1 at from bus, -1 at to bus
  Mat Cg;  // n_bus x n_gen, one 1 per column
  Mat Cl;  // n_bus x n_load, one 1 per column
};

Incidence incidence(const GridSpec& grid);

// A^T diag(b) A for a given susceptance vector.
Mat bus_susceptance_matrix(const Incidence& inc, const Vec& b);

}  // namespace dfl
