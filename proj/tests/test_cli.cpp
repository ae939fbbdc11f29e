#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "transmed/cli.hpp"
#include "transmed/sim.hpp"

using namespace transmed;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "transmed");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(int(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "transmed_cli_test";
  fs::create_directories(dir);
  return dir / name;
}

fs::path write_file(const std::string& name, const std::string& text) {
  const auto p = scratch(name);
  std::ofstream(p) << text;
  return p;
}

// A simulated sample with every superpopulation row; delta = 0 rows and
// target rows leave y empty.
std::string sample_csv(std::size_t n, std::uint64_t seed, bool with_z = true) {
  std::ostringstream s;
  s << "delta,s," << (with_z ? "z," : "") << "a,w1,w2,m1,y,pi\n";
  for (const auto& u : sim::generate_units(sim::DgmParams{}, n, seed)) {
    s << u.delta << ',' << u.s << ',';
    if (with_z) s << u.z << ',';
    s << u.a << ',' << u.w1 << ',' << u.w2 << ',' << u.m << ',';
    if (u.delta == 1 && u.s == 1) s << u.y;
    s << ',' << sim::format_double(u.pi) << '\n';
  }
  return s.str();
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST_CASE("a missing column is an input error naming the column") {
  const auto path = write_file("no_z.csv", sample_csv(400, 1, false));
  const auto r = run({"estimate", "--input", path.string()});
  CHECK(r.code == cli::kInputError);
  CHECK(r.err.find("'z'") != std::string::npos);
  CHECK(r.out.empty());
}

TEST_CASE("bad rows are reported with their index") {
  std::string text = sample_csv(400, 2);
  // Corrupt the treatment code of data row 3.
  std::istringstream in(text);
  std::ostringstream fixed;
  std::string line;
  for (int k = 0; std::getline(in, line); ++k) {
    if (k == 4) {
      auto cells = parse_csv(line)[0];
      cells[3] = "7";
      line.clear();
      for (std::size_t j = 0; j < cells.size(); ++j) line += (j ? "," : "") + cells[j];
    }
    fixed << line << '\n';
  }
  const auto path = write_file("bad_a.csv", fixed.str());
  const auto r = run({"estimate", "--input", path.string()});
  CHECK(r.code == cli::kInputError);
  CHECK(r.err.find("row 3") != std::string::npos);
}

TEST_CASE("estimate prints five finite rows") {
  const auto path = write_file("sample.csv", sample_csv(3000, 3));
  const auto r = run({"estimate", "--input", path.string(), "--estimator", "os"});
  REQUIRE(r.code == cli::kOk);
  const auto rows = parse_csv(r.out);
  REQUIRE(rows.size() == 6);
  CHECK(rows[0] == std::vector<std::string>{"quantity", "estimate", "se", "ci_lo", "ci_hi"});
  const char* names[] = {"theta_ps", "theta_pp", "theta_ss", "sde", "sie"};
  for (int k = 0; k < 5; ++k) {
    REQUIRE(rows[k + 1].size() == 5);
    CHECK(rows[k + 1][0] == names[k]);
    for (int j = 1; j < 5; ++j) CHECK(std::isfinite(std::stod(rows[k + 1][j])));
    CHECK(std::stod(rows[k + 1][2]) > 0.0);
  }
}

TEST_CASE("the CLI matches the library on the analysed rows") {
  const auto text = sample_csv(2500, 4);
  const auto path = write_file("lib.csv", text);
  const auto r = run({"estimate", "--input", path.string(), "--designs", "dgm"});
  REQUIRE(r.code == cli::kOk);
  std::istringstream in(text);
  const auto data = cli::read_csv(in);
  const auto analysed = sim::generate(sim::DgmParams{}, 2500, 4);
  estimate::EstimatorOptions opts;
  opts.estimator = estimate::Estimator::Tmle;
  const auto eff = estimate::estimate_effects(analysed, sim::correct_designs(), {1, 0}, opts,
                                              estimate::survey_weights(analysed));
  const auto rows = parse_csv(r.out);
  CHECK(std::stod(rows[4][1]) == doctest::Approx(eff.sde.theta).epsilon(1e-12));
  CHECK(std::stod(rows[5][2]) == doctest::Approx(eff.sie.se).epsilon(1e-12));
  CHECK(data.size() == 2500);
}

TEST_CASE("json and csv carry the same numbers") {
  const auto path = write_file("fmt.csv", sample_csv(2000, 5));
  const auto csv = run({"estimate", "--input", path.string()});
  const auto json = run({"estimate", "--input", path.string(), "--format", "json"});
  REQUIRE(csv.code == 0);
  REQUIRE(json.code == 0);
  const auto rows = parse_csv(csv.out);
  const auto doc = nlohmann::json::parse(json.out);
  REQUIRE(doc.size() == 5);
  const char* cols[] = {"estimate", "se", "ci_lo", "ci_hi"};
  for (int k = 0; k < 5; ++k) {
    CHECK(doc[k]["quantity"] == rows[k + 1][0]);
    for (int j = 0; j < 4; ++j) CHECK(doc[k][cols[j]].get<double>() == std::stod(rows[k + 1][j + 1]));
  }
}

TEST_CASE("output files receive the table") {
  const auto in = write_file("out_in.csv", sample_csv(1500, 6));
  const auto out = scratch("estimates.csv");
  fs::remove(out);
  const auto r = run({"estimate", "--input", in.string(), "--output", out.string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.empty());
  std::ifstream f(out);
  std::string header;
  std::getline(f, header);
  CHECK(header == "quantity,estimate,se,ci_lo,ci_hi");
}

TEST_CASE("oracle output is stable and matches the library") {
  const auto a = run({"oracle"});
  const auto b = run({"oracle"});
  REQUIRE(a.code == 0);
  CHECK(a.out == b.out);
  const auto rows = parse_csv(a.out);
  const auto t = sim::oracle(sim::DgmParams{});
  REQUIRE(rows.size() == 11);
  CHECK(rows[4][0] == "sde");
  CHECK(std::stod(rows[4][1]) == t.sde);
  CHECK(rows[10][0] == "sigma2_sie");
  CHECK(std::stod(rows[10][1]) == t.sigma2_sie);

  const auto zero = run({"oracle", "--set", "y_m=0"});
  CHECK(std::abs(std::stod(parse_csv(zero.out)[5][1])) < 1e-12);
  CHECK(run({"oracle", "--set", "nope=1"}).code == cli::kInputError);
  CHECK(run({"oracle", "--set", "y_m"}).code == cli::kInputError);
}

TEST_CASE("simulation output does not depend on the thread count") {
  const auto spec = write_file("scen.json", R"({
    "defaults": {"n": 1200, "reps": 8, "seed": 5},
    "scenarios": [{"mis": "none"}, {"mis": "q", "effects": ["sde"]}]
  })");
  const auto one = run({"simulate", "--scenarios", spec.string(), "--threads", "1"});
  const auto three = run({"simulate", "--scenarios", spec.string(), "--threads", "3"});
  REQUIRE(one.code == 0);
  CHECK(one.out == three.out);
  const auto rows = parse_csv(one.out);
  REQUIRE(rows.size() == 1 + 4 + 2);
  CHECK(rows[0][0] == "scenario");
  CHECK(rows[0].size() == sim::metrics_columns().size());

  const auto fewer = run({"simulate", "--scenarios", spec.string(), "--reps", "3"});
  CHECK(parse_csv(fewer.out)[1][4] == "3");
}

TEST_CASE("a scenario whose replicates all fail aborts") {
  const auto spec = write_file("abort.json", R"({"scenarios": [{"n": 100, "reps": 4, "folds": 200}]})");
  const auto r = run({"simulate", "--scenarios", spec.string()});
  CHECK(r.code == cli::kScenarioAbort);
  CHECK_FALSE(r.err.empty());
}

TEST_CASE("argument errors") {
  CHECK(run({}).code != 0);
  CHECK(run({"estimate"}).code == cli::kInputError);
  CHECK(run({"estimate", "--input", scratch("absent.csv").string()}).code == cli::kInputError);
  CHECK(run({"simulate", "--scenarios", scratch("absent.json").string()}).code ==
        cli::kInputError);
  CHECK(run({"oracle", "--format", "xml"}).code == cli::kInputError);
  CHECK(run({"--help"}).code == 0);
}

TEST_CASE("read_csv details") {
  std::istringstream in("s,a,z,y,w1,m1,m2\n1,1,0,3.5,0.2,1,0\n0,0,1,,0.1,0,1\n1,0,1,1.5,0.4,1,1\n");
  const auto d = cli::read_csv(in);
  REQUIRE(d.size() == 3);
  CHECK(d.q() == 2);
  CHECK(d[0].delta == 1);
  CHECK_FALSE(d[1].y.has_value());
  CHECK_FALSE(d[1].pi.has_value());
  CHECK(d.bounds().lo == 1.5);
  CHECK(d.bounds().hi == 3.5);

  std::istringstream dup("s,a,z,y,w1,m1,s\n");
  CHECK_THROWS_AS(cli::read_csv(dup), Error);
  std::istringstream ragged("s,a,z,y,w1,m1\n1,1,0\n");
  CHECK_THROWS_AS(cli::read_csv(ragged), Error);
  std::istringstream text("s,a,z,y,w1,m1\n1,yes,0,1,0,0\n");
  CHECK_THROWS_AS(cli::read_csv(text), Error);
}

TEST_CASE("thread count resolution") {
  CHECK(cli::resolve_threads(3) == 3);
  CHECK(cli::resolve_threads(std::nullopt) >= 1);
}
