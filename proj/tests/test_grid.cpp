#include <doctest.h>

#include <cstdio>

#include "dfl/grid.hpp"
#include "oracles.hpp"

using namespace dfl;

TEST_CASE("toy3 file loads and validates") {
  GridSpec g = load_grid(testing::grids_dir() + "/toy3.json");
  CHECK(g.n_bus == 3);
  CHECK(g.lines.size() == 2);
  CHECK(g.generators.size() == 2);
  CHECK(g.loads.size() == 1);
  CHECK(g.c_ls == doctest::Approx(100.0));
}

TEST_CASE("case14 file matches the public case dimensions") {
  GridSpec g = load_grid(testing::grids_dir() + "/case14.json");
  CHECK(g.n_bus == 14);
  CHECK(g.lines.size() == 20);
  CHECK(g.generators.size() == 5);
  Incidence inc = incidence(g);
  CHECK(inc.A.rows() == 20);
  CHECK(inc.A.cols() == 14);
  CHECK(inc.Cg.rows() == 14);
  CHECK(inc.Cg.cols() == 5);
}

TEST_CASE("penalty ordering violations are rejected by name") {
  GridSpec g = testing::single_gen_3bus();
  g.c_ls = 5.0;  // below c_gs
  CHECK_THROWS_WITH_AS(validate_grid(g), doctest::Contains("c_ls"), DataError);
  g = testing::single_gen_3bus();
  g.c_gs = 0.5;  // below generator cost
  CHECK_THROWS_AS(validate_grid(g), DataError);
}

TEST_CASE("disconnected line graph is rejected") {
  GridSpec g = testing::single_gen_3bus();
  g.lines.pop_back();  // bus 2 becomes unreachable
  CHECK_THROWS_WITH_AS(validate_grid(g), doctest::Contains("disconnected"), DataError);
}

TEST_CASE("unknown fields are rejected") {
  const std::string path = "unknown_field_grid.json";
  {
    FILE* f = std::fopen(path.c_str(), "w");
    std::fputs(R"({"n_bus":2,"ref_bus":0,"magic":1,
      "lines":[{"from":0,"to":1,"susceptance":1.0,"flow_limit":1.0}],
      "generators":[{"bus":0,"cost":1.0,"p_min":0.0,"p_max":1.0}],
      "loads":[1],"penalties":{"c_ls":100.0,"c_gs":10.0,"c_slack":100.0}})",
               f);
    std::fclose(f);
  }
  CHECK_THROWS_WITH_AS(load_grid(path), doctest::Contains("magic"), DataError);
  std::remove(path.c_str());
}

TEST_CASE("grid round-trips through save/load") {
  GridSpec g = load_grid(testing::grids_dir() + "/ring3.json");
  const std::string path = "roundtrip_grid.json";
  save_grid(g, path);
  GridSpec h = load_grid(path);
  std::remove(path.c_str());
  CHECK(h.n_bus == g.n_bus);
  CHECK(h.ref_bus == g.ref_bus);
  REQUIRE(h.lines.size() == g.lines.size());
  for (std::size_t i = 0; i < g.lines.size(); ++i) {
    CHECK(h.lines[i].from == g.lines[i].from);
    CHECK(h.lines[i].to == g.lines[i].to);
    CHECK(h.lines[i].susceptance == g.lines[i].susceptance);
    CHECK(h.lines[i].flow_limit == g.lines[i].flow_limit);
  }
  REQUIRE(h.generators.size() == g.generators.size());
  CHECK(h.loads == g.loads);
  CHECK(h.c_slack == g.c_slack);
}

TEST_CASE("incidence follows the +1 at from-bus convention") {
  GridSpec g = testing::single_gen_3bus();
  Incidence inc = incidence(g);
  Mat expected(2, 3);
  expected << 1, -1, 0, 0, 1, -1;
  CHECK((inc.A - expected).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("incidence invariants on every shipped grid") {
  for (const char* name : {"/toy3.json", "/ring3.json", "/case14.json"}) {
    GridSpec g = load_grid(testing::grids_dir() + name);
    Incidence inc = incidence(g);
    // Each line row sums to zero.
    CHECK(inc.A.rowwise().sum().cwiseAbs().maxCoeff() == 0.0);
    // One unit entry per generator/load column.
    for (Index c = 0; c < inc.Cg.cols(); ++c) CHECK(inc.Cg.col(c).sum() == 1.0);
    for (Index c = 0; c < inc.Cl.cols(); ++c) CHECK(inc.Cl.col(c).sum() == 1.0);
  }
}
