#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "nsgp/io.hpp"
#include "nsgp/oracle.hpp"

using namespace nsgp;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::path(::testing::TempDir()) / "nsgp_cli" / info->name();
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  std::string write(const std::string& name, const std::string& text) const {
    io::write_text(path(name), text);
    return path(name);
  }

  CliRun run(const std::string& args) const {
    const std::string cmd =
        std::string(NSGP_CLI_PATH) + " " + args + " > " + path("stdout") + " 2> " + path("stderr");
    const int status = std::system(cmd.c_str());
    CliRun r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = io::read_text(path("stdout"));
    r.err = io::read_text(path("stderr"));
    return r;
  }

  fs::path dir_;
};

const char* kDemo =
    "grid.n1 = 12\n"
    "grid.n2 = 16\n"
    "partition.equal_split = 2\n"
    "model.global = 0.3, 0.4, 0.6, 0.1\n"
    "model.segment.1 = 0.5, 0.3, 0.7, 0.05\n"
    "model.segment.2 = 2, 0.7, 0.7, 0.15\n"
    "covariate.count = 1\n"
    "covariate.params = 1, 0.3, 1, 0.05\n"
    "mean.beta = 1, 1, -1, 1\n";

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string l;
  while (std::getline(in, l)) out.push_back(l);
  return out;
}

}  // namespace

TEST_F(Cli, SimulateIsDeterministicGivenSeed) {
  const auto cfg = write("demo.conf", kDemo);
  ASSERT_EQ(run("simulate --config " + cfg + " --seed 5 --output " + path("a")).code, 0);
  ASSERT_EQ(run("simulate --config " + cfg + " --seed 5 --output " + path("b")).code, 0);
  ASSERT_EQ(run("simulate --config " + cfg + " --seed 6 --output " + path("c")).code, 0);
  for (const char* f : {"data.txt", "covariate_1.txt", "partition.txt", "truth.json"}) {
    EXPECT_EQ(io::read_text(path(std::string("a/") + f)), io::read_text(path(std::string("b/") + f))) << f;
  }
  EXPECT_NE(io::read_text(path("a/data.txt")), io::read_text(path("c/data.txt")));
  EXPECT_EQ(io::read_text(path("a/partition.txt")), io::read_text(path("c/partition.txt")));
  const auto truth = io::read_model(path("a/truth.json"));
  EXPECT_EQ(truth.partition.q, 2);
  EXPECT_EQ(truth.n_covariates, 1);
  EXPECT_EQ(truth.beta, Eigen::Vector4d(1, 1, -1, 1));
}

TEST_F(Cli, SimulatedWhiteNoiseHasTheSummedVariance) {
  const auto cfg = write("wn.conf",
                         "grid.n1 = 60\ngrid.n2 = 60\npartition.equal_split = 1\n"
                         "model.global = 1.5, 0.4, 0.6, 0.999999999999\n"
                         "model.segment.1 = 2.5, 0.7, 0.7, 0.999999999999\n"
                         "mean.beta = 0\n");
  ASSERT_EQ(run("simulate --config " + cfg + " --seed 9 --output " + path("wn")).code, 0);
  const auto d = io::read_data(path("wn/data.txt"));
  const auto y = d.observed_values();
  double mean = 0, var = 0;
  for (double v : y) mean += v;
  mean /= y.size();
  for (double v : y) var += (v - mean) * (v - mean);
  var /= y.size() - 1;
  const double se = 4.0 * std::sqrt(2.0 / y.size());
  EXPECT_NEAR(var, 4.0, 4.0 * se) << var;
  // no spatial correlation left between horizontal neighbours
  double lag = 0;
  int pairs = 0;
  for (int r = 0; r < 60; ++r) {
    for (int c = 0; c + 1 < 60; ++c) {
      lag += (d.values[r * 60 + c] - mean) * (d.values[r * 60 + c + 1] - mean);
      ++pairs;
    }
  }
  EXPECT_LT(std::abs(lag / pairs / var), 4.0 / std::sqrt(pairs));
}

TEST_F(Cli, FitEvaluateRoundTrip) {
  const auto cfg = write("demo.conf", kDemo);
  ASSERT_EQ(run("simulate --config " + cfg + " --seed 2 --output " + path("sim")).code, 0);
  const auto fcfg = write("fit.conf", "fit.max_iter = 30\nfit.probes = 5\n");
  const std::string inputs = "--data " + path("sim/data.txt") + " --covariate " + path("sim/covariate_1.txt");
  const auto r = run("fit " + inputs + " --partition " + path("sim/partition.txt") + " --truth " +
                     path("sim/truth.json") + " --config " + fcfg + " --seed 4 --output " + path("fit.json"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto doc = io::read_json(path("fit.json"));
  EXPECT_EQ(doc["method"], "score");
  EXPECT_EQ(doc["parameters"]["segments"].size(), 2u);
  EXPECT_EQ(doc["beta"].size(), 4u);
  EXPECT_TRUE(doc.contains("termination"));
  EXPECT_EQ(doc["diagnostics"]["seed"], 4);
  EXPECT_EQ(doc["initial"]["global"]["alpha"], 0.5);
  ASSERT_TRUE(doc.contains("likelihood_gain"));
  EXPECT_NEAR(doc["likelihood_gain"].get<double>(),
              doc["exact_loglik2"].get<double>() - doc["truth_loglik2"].get<double>(), 1e-12);

  // re-reading the fit document reproduces the logged likelihood
  const auto e = run("evaluate " + inputs + " --model " + path("fit.json") + " --truth " + path("sim/truth.json") +
                     " --output " + path("eval.csv"));
  ASSERT_EQ(e.code, 0) << e.err;
  const auto rows = lines(io::read_text(path("eval.csv")));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0], "model,n,loglik2,truth_loglik2,likelihood_gain");
  std::vector<std::string> cells;
  std::istringstream row(rows[1]);
  for (std::string c; std::getline(row, c, ',');) cells.push_back(c);
  ASSERT_EQ(cells.size(), 5u);
  EXPECT_EQ(cells[1], "192");
  EXPECT_NEAR(std::stod(cells[2]), doc["exact_loglik2"].get<double>(), 1e-9);
  EXPECT_NEAR(std::stod(cells[4]), doc["likelihood_gain"].get<double>(), 1e-9);

  // same seed, same result
  ASSERT_EQ(run("fit " + inputs + " --partition " + path("sim/partition.txt") + " --config " + fcfg +
                " --seed 4 --output " + path("fit2.json"))
                .code,
            0);
  EXPECT_EQ(io::read_json(path("fit2.json"))["model"], doc["model"]);
}

TEST_F(Cli, VecchiaFitWritesItsOwnLikelihood) {
  const auto cfg = write("demo.conf", kDemo);
  ASSERT_EQ(run("simulate --config " + cfg + " --seed 3 --output " + path("sim")).code, 0);
  const auto fcfg = write("fit.conf", "vecchia.neighbors = 8\nvecchia.max_iter = 40\n");
  const auto r = run("fit --method vecchia --data " + path("sim/data.txt") + " --covariate " +
                     path("sim/covariate_1.txt") + " --partition " + path("sim/partition.txt") + " --config " + fcfg +
                     " --output " + path("v.json"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto doc = io::read_json(path("v.json"));
  EXPECT_EQ(doc["method"], "vecchia");
  EXPECT_EQ(doc["diagnostics"]["neighbors"], 8);
  EXPECT_TRUE(std::isfinite(doc["diagnostics"]["vecchia_loglik"].get<double>()));
  EXPECT_EQ(doc["parameters"]["segments"].size(), 2u);
}

TEST_F(Cli, PartitionWritesCandidateTableAndWinner) {
  const auto cfg = write("sim.conf",
                         "grid.n1 = 20\ngrid.n2 = 30\npartition.equal_split = 2\n"
                         "model.global = 0.1, 0.4, 0.6, 0.1\n"
                         "model.segment.1 = 0.3, 0.3, 0.7, 0.05\n"
                         "model.segment.2 = 5, 0.7, 0.7, 0.15\n");
  ASSERT_EQ(run("simulate --config " + cfg + " --seed 8 --output " + path("sim")).code, 0);
  const auto scfg = write("sel.conf", "select.cutoffs = 0.001, 0.005\nselect.seeds_per_cutoff = 2\n");
  const auto r = run("partition --data " + path("sim/data.txt") + " --truth " + path("sim/partition.txt") +
                     " --config " + scfg + " --seed 1 --output " + path("sel"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = lines(io::read_text(path("sel/candidates.csv")));
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0], "candidate,p_cutoff,seed,segments,loglik,bic,rand,tests,forced,merges,refused,winner");
  int winners = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) winners += rows[i].back() == '1';
  EXPECT_EQ(winners, 1);
  const auto d = io::read_data(path("sim/data.txt"));
  EXPECT_NO_THROW(io::read_partition(path("sel/partition.txt"), d.grid));

  // the default pool has 30 candidates
  const auto full = run("partition --data " + path("sim/data.txt") + " --seed 1 --output " + path("full"));
  ASSERT_EQ(full.code, 0) << full.err;
  EXPECT_EQ(lines(io::read_text(path("full/candidates.csv"))).size(), 31u);
}

TEST_F(Cli, ScoreCheckAndBenchmarkEmitTables) {
  const auto cfg = write("demo.conf", kDemo);
  ASSERT_EQ(run("simulate --config " + cfg + " --seed 2 --output " + path("sim")).code, 0);
  const auto scfg = write("sc.conf", "score.draws = 20\n");
  const auto r = run("score-check --data " + path("sim/data.txt") + " --covariate " + path("sim/covariate_1.txt") +
                     " --model " + path("sim/truth.json") + " --config " + scfg + " --output " + path("sc.csv"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = lines(io::read_text(path("sc.csv")));
  ASSERT_EQ(rows.size(), 13u);
  EXPECT_EQ(rows[0], "process,parameter,exact,stochastic_mean,mc_se,z");

  const auto bcfg = write("bench.conf",
                          "grid.n1 = 12\ngrid.n2 = 16\npartition.equal_split = 2\n"
                          "model.global = 0.3, 0.4, 0.6, 0.1\n"
                          "model.segment.1 = 0.5, 0.3, 0.7, 0.05\n"
                          "model.segment.2 = 2, 0.7, 0.7, 0.15\n"
                          "bench.systems = 3\n");
  const auto b = run("bench-precond --config " + bcfg + " --output " + path("bench.csv"));
  ASSERT_EQ(b.code, 0) << b.err;
  const auto brows = lines(io::read_text(path("bench.csv")));
  ASSERT_EQ(brows.size(), 16u);
  EXPECT_EQ(brows[0], "system,preconditioner,iterations,converged,error2,seconds");
  for (std::size_t i = 1; i < brows.size(); ++i) EXPECT_NE(brows[i].find(",1,"), std::string::npos) << brows[i];
}

TEST_F(Cli, ExitCodesAndDiagnostics) {
  auto r = run("simulate --output " + path("x"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("error: config-parse: "), std::string::npos) << r.err;

  const auto bad = write("bad.conf", "grid.n1 = 10\ngrid.n2 = ten\n");
  r = run("simulate --config " + bad + " --output " + path("x"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("bad.conf:2: key `grid.n2`"), std::string::npos) << r.err;

  const auto typo = write("typo.conf", std::string(kDemo) + "mean.bta = 1\n");
  r = run("simulate --config " + typo + " --output " + path("x"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("unknown key mean.bta (line 10)"), std::string::npos) << r.err;

  r = run("frobnicate");
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.err.rfind("error: ", 0), 0u) << r.err;

  r = run("fit --data " + path("missing.txt") + " --partition p --output " + path("o.json"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("error: file-not-found: "), std::string::npos) << r.err;

  // a solver that cannot converge is a numerical failure
  const auto cfg = write("demo.conf", kDemo);
  ASSERT_EQ(run("simulate --config " + cfg + " --seed 2 --output " + path("sim")).code, 0);
  const auto hard = write("hard.conf", "pcg.max_iter = 1\npcg.tol = 1e-14\n");
  r = run("fit --data " + path("sim/data.txt") + " --covariate " + path("sim/covariate_1.txt") + " --partition " +
          path("sim/partition.txt") + " --config " + hard + " --output " + path("o.json"));
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("error: pcg-failure: "), std::string::npos) << r.err;
}
