#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <sstream>

#include "nsgp/baselines.hpp"
#include "nsgp/bench.hpp"
#include "nsgp/io.hpp"
#include "nsgp/optimizer.hpp"
#include "nsgp/oracle.hpp"
#include "nsgp/partition_select.hpp"

namespace fs = std::filesystem;
using namespace nsgp;
using io::Config;
using io::json;

namespace {

struct Common {
  std::uint64_t seed = 1;
  std::string config;
  std::string output;
  int threads = 1;
};

void add_common(CLI::App* cmd, Common& c, bool output_required = true) {
  cmd->add_option("--seed", c.seed, "Master seed")->capture_default_str();
  cmd->add_option("--config", c.config, "key = value settings file");
  auto* out = cmd->add_option("--output", c.output, "Output path");
  if (output_required) out->required();
  cmd->add_option("--threads", c.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
}

Config load_config(const Common& c) { return c.config.empty() ? Config::parse("", "config") : Config::load(c.config); }

std::string csv_double(double v) { return io::format_double(v); }

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw validation_error("file-write", "cannot create directory " + dir + ": " + ec.message());
}

GridGeometry grid_from_config(const Config& cfg) {
  const int n1 = static_cast<int>(cfg.require_int("grid.n1"));
  const int n2 = static_cast<int>(cfg.require_int("grid.n2"));
  if (!cfg.has("grid.mask")) return GridGeometry(n1, n2);
  const auto g = io::read_grid(cfg.require_path("grid.mask"));
  if (g.n1 != n1 || g.n2 != n2) throw validation_error("grid-mismatch", "grid.mask dimensions differ from grid.n1/n2");
  std::vector<std::uint8_t> mask(g.values.size());
  for (std::size_t p = 0; p < mask.size(); ++p) mask[p] = std::isnan(g.values[p]) ? 0 : 1;
  return GridGeometry(n1, n2, mask);
}

Partition partition_from_config(const Config& cfg, const GridGeometry& grid) {
  if (cfg.has("partition.file")) {
    if (cfg.has("partition.equal_split")) {
      throw validation_error("config-parse", "set only one of partition.file and partition.equal_split");
    }
    return io::read_partition(cfg.require_path("partition.file"), grid);
  }
  const int k = static_cast<int>(cfg.get_int("partition.equal_split", 1));
  const Partition p = equal_split_partition(grid, k);
  return Partition::from_labels(grid, p.labels);
}

/// Generating model: grid, partition, global and per-segment parameters,
/// covariate count and mean coefficients.
NonStatModel model_from_config(const Config& cfg) {
  const GridGeometry grid = grid_from_config(cfg);
  const Partition part = partition_from_config(cfg, grid);
  const auto global = io::params_from_config(cfg, "model.global");
  std::vector<QuasiMaternParams> local;
  bool any_local = false;
  for (int k = 1; k <= part.q; ++k) any_local = any_local || cfg.has("model.segment." + std::to_string(k));
  if (any_local) {
    for (int k = 1; k <= part.q; ++k) local.push_back(io::params_from_config(cfg, "model.segment." + std::to_string(k)));
  }
  const int ncov = static_cast<int>(cfg.get_int("covariate.count", 0));
  if (ncov < 0) throw validation_error("config-parse", "covariate.count must be >= 0");
  auto model = NonStatModel::make(grid, part, global, local, cfg.get_double("model.expansion_factor", 1.25), ncov, true);
  if (cfg.has("mean.beta")) {
    const auto b = cfg.require_doubles("mean.beta");
    if (static_cast<int>(b.size()) != model.p_mean()) {
      throw validation_error("config-parse", "mean.beta needs " + std::to_string(model.p_mean()) +
                                                 " values (segment-major: intercept, slopes)");
    }
    model.beta = Eigen::Map<const Eigen::VectorXd>(b.data(), static_cast<Eigen::Index>(b.size()));
  }
  return model;
}

/// Independent stationary covariate fields, NaN on unobserved pixels.
std::vector<std::vector<double>> simulate_covariates(const Config& cfg, const NonStatModel& model, std::uint64_t seed) {
  std::vector<std::vector<double>> out;
  if (model.n_covariates == 0) return out;
  const auto params = io::params_from_config(cfg, "covariate.params");
  const auto density = qm_density(params, model.embed.dims());
  for (int c = 0; c < model.n_covariates; ++c) {
    auto rng = stream_rng(seed, Stream::covariate, static_cast<std::uint64_t>(c));
    auto field = sample_stationary(density, model.grid.n1(), model.grid.n2(), rng);
    for (std::size_t p = 0; p < field.size(); ++p) {
      if (!model.grid.observed(p)) field[p] = std::numeric_limits<double>::quiet_NaN();
    }
    out.push_back(std::move(field));
  }
  return out;
}

int cmd_simulate(const Common& c) {
  const Config cfg = load_config(c);
  const NonStatModel model = model_from_config(cfg);
  const auto covariates = simulate_covariates(cfg, model, c.seed);
  cfg.reject_unused();
  const auto sample = sample_field(model, covariates, c.seed);

  ensure_dir(c.output);
  const fs::path dir(c.output);
  io::write_grid((dir / "data.txt").string(), model.grid.n1(), model.grid.n2(), sample.data.values);
  for (std::size_t k = 0; k < covariates.size(); ++k) {
    io::write_grid((dir / ("covariate_" + std::to_string(k + 1) + ".txt")).string(), model.grid.n1(),
                   model.grid.n2(), covariates[k]);
  }
  io::write_partition((dir / "partition.txt").string(), model.partition);
  json truth = io::model_to_json(model);
  truth["seed"] = c.seed;
  io::write_json((dir / "truth.json").string(), truth);
  std::cout << "wrote " << model.n_obs() << " observations, " << model.partition.q << " segments to " << c.output
            << "\n";
  return 0;
}

struct Inputs {
  std::string data;
  std::vector<std::string> covariates;
};

void add_inputs(CLI::App* cmd, Inputs& in) {
  cmd->add_option("--data", in.data, "Grid file with observations (NA = unobserved)")->required();
  cmd->add_option("--covariate", in.covariates, "Covariate grid file (repeatable)");
}

SelectionConfig selection_from_config(const Config& cfg, const Common& c) {
  SelectionConfig s;
  s.block_rows = static_cast<int>(cfg.get_int("select.block_rows", s.block_rows));
  s.block_cols = static_cast<int>(cfg.get_int("select.block_cols", s.block_cols));
  s.cutoffs = cfg.get_doubles("select.cutoffs", s.cutoffs);
  s.seeds_per_cutoff = static_cast<int>(cfg.get_int("select.seeds_per_cutoff", s.seeds_per_cutoff));
  s.expansion_factor = cfg.get_double("model.expansion_factor", s.expansion_factor);
  s.seed = c.seed;
  s.threads = c.threads;
  return s;
}

int cmd_partition(const Common& c, const Inputs& in, const std::string& truth_path) {
  const Config cfg = load_config(c);
  const auto sc = selection_from_config(cfg, c);
  cfg.reject_unused();
  const DataField data = io::read_data(in.data, in.covariates);
  std::optional<Partition> truth;
  if (!truth_path.empty()) truth = io::read_partition(truth_path, data.grid);

  const auto result = select_partition(data, sc);
  ensure_dir(c.output);
  const fs::path dir(c.output);
  std::ostringstream csv;
  csv << "candidate,p_cutoff,seed,segments,loglik,bic,rand,tests,forced,merges,refused,winner\n";
  for (std::size_t j = 0; j < result.candidates.size(); ++j) {
    const auto& r = result.candidates[j];
    csv << j << ',' << csv_double(r.p_cutoff) << ',' << r.seed << ',' << r.partition.q << ',' << csv_double(r.loglik)
        << ',' << csv_double(r.bic) << ',' << (truth ? csv_double(rand_index(r.partition, *truth)) : std::string())
        << ',' << r.tests << ',' << r.forced << ',' << r.merges << ',' << r.refused << ','
        << (j == result.best ? 1 : 0) << '\n';
  }
  io::write_text((dir / "candidates.csv").string(), csv.str());
  io::write_partition((dir / "partition.txt").string(), result.winner().partition);
  std::cout << "selected " << result.winner().partition.q << " segments (candidate " << result.best << ", BIC "
            << csv_double(result.winner().bic) << ")";
  if (truth) std::cout << ", Rand " << csv_double(rand_index(result.winner().partition, *truth));
  std::cout << "\n";
  return 0;
}

FitConfig fit_config(const Config& cfg, const Common& c) {
  FitConfig f;
  f.probes = static_cast<int>(cfg.get_int("fit.probes", f.probes));
  f.max_iter = static_cast<int>(cfg.get_int("fit.max_iter", f.max_iter));
  f.step_scale = cfg.get_double("fit.step_scale", f.step_scale);
  f.threshold_fraction = cfg.get_double("fit.threshold_fraction", f.threshold_fraction);
  f.rel_move_tol = cfg.get_double("fit.rel_move_tol", f.rel_move_tol);
  f.stop_factor = cfg.get_double("fit.stop_factor", f.stop_factor);
  f.score_tol = cfg.get_double("fit.score_tol", f.score_tol);
  f.max_rejections = static_cast<int>(cfg.get_int("fit.max_rejections", f.max_rejections));
  f.stationary = cfg.get_bool("fit.stationary", f.stationary);
  f.has_mean = cfg.get_bool("fit.has_mean", f.has_mean);
  f.expansion_factor = cfg.get_double("model.expansion_factor", f.expansion_factor);
  f.solver.precond = parse_precond(cfg.get_string("pcg.precond", precond_name(f.solver.precond)));
  f.solver.pcg.tol = cfg.get_double("pcg.tol", f.solver.pcg.tol);
  f.solver.pcg.max_iter = static_cast<int>(cfg.get_int("pcg.max_iter", f.solver.pcg.max_iter));
  f.seed = c.seed;
  f.threads = c.threads;
  return f;
}

int cmd_fit(const Common& c, const Inputs& in, const std::string& partition_path, const std::string& method,
            const std::string& truth_path) {
  const Config cfg = load_config(c);
  const FitConfig fc = fit_config(cfg, c);
  VecchiaConfig vc;
  vc.neighbors = static_cast<int>(cfg.get_int("vecchia.neighbors", vc.neighbors));
  vc.qn.max_iter = static_cast<int>(cfg.get_int("vecchia.max_iter", vc.qn.max_iter));
  vc.stationary = fc.stationary;
  vc.has_mean = fc.has_mean;
  vc.expansion_factor = fc.expansion_factor;
  cfg.reject_unused();

  const DataField data = io::read_data(in.data, in.covariates);
  const Partition part = io::read_partition(partition_path, data.grid);
  json doc;
  NonStatModel fitted;
  if (method == "score") {
    const auto res = fit(data, part, fc);
    doc = io::fit_result_to_json(res);
    fitted = res.model;
  } else {
    const auto res = vecchia_fit(data, part, vc);
    fitted = res.model;
    json params = {{"global", io::params_to_json(fitted.theta0)}, {"segments", json::array()}};
    for (const auto& t : fitted.theta) params["segments"].push_back(io::params_to_json(t));
    doc = {{"method", "vecchia"},
           {"parameters", params},
           {"beta", io::vector_to_json(fitted.beta)},
           {"termination", res.optimizer.converged ? "converged" : "max-iter"},
           {"diagnostics",
            {{"neighbors", vc.neighbors},
             {"vecchia_loglik", res.loglik},
             {"iterations", res.optimizer.iterations},
             {"evaluations", res.optimizer.evaluations},
             {"converged", res.optimizer.converged}}},
           {"model", io::model_to_json(fitted)}};
  }
  doc["inputs"] = {{"data", in.data}, {"covariates", in.covariates}, {"partition", partition_path}};
  if (fitted.n_obs() <= kOracleCap) {
    const double ll = exact_loglik(fitted, data);
    doc["exact_loglik2"] = ll;
    if (!truth_path.empty()) {
      const NonStatModel truth = io::read_model(truth_path);
      doc["truth_loglik2"] = exact_loglik(truth, data);
      doc["likelihood_gain"] = ll - doc["truth_loglik2"].get<double>();
    }
  }
  if (const auto dir = fs::path(c.output).parent_path(); !dir.empty()) ensure_dir(dir.string());
  io::write_json(c.output, doc);
  std::cout << "fit (" << method << ") termination " << doc["termination"].get<std::string>();
  if (doc.contains("likelihood_gain")) std::cout << ", likelihood gain " << csv_double(doc["likelihood_gain"]);
  std::cout << "\n";
  return 0;
}

int cmd_evaluate(const Common& c, const Inputs& in, const std::vector<std::string>& models,
                 const std::string& truth_path) {
  const Config cfg = load_config(c);
  const int cap = static_cast<int>(cfg.get_int("oracle.cap", kOracleCap));
  cfg.reject_unused();
  const DataField data = io::read_data(in.data, in.covariates);
  std::optional<double> truth_ll;
  if (!truth_path.empty()) truth_ll = exact_loglik(io::read_model(truth_path), data, cap);
  std::ostringstream csv;
  csv << "model,n,loglik2,truth_loglik2,likelihood_gain\n";
  for (const auto& path : models) {
    const double ll = exact_loglik(io::read_model(path), data, cap);
    csv << path << ',' << data.grid.n_obs() << ',' << csv_double(ll) << ','
        << (truth_ll ? csv_double(*truth_ll) : std::string()) << ','
        << (truth_ll ? csv_double(ll - *truth_ll) : std::string()) << '\n';
  }
  io::write_text(c.output, csv.str());
  std::cout << csv.str();
  return 0;
}

int cmd_score_check(const Common& c, const Inputs& in, const std::string& model_path) {
  const Config cfg = load_config(c);
  const int probes = static_cast<int>(cfg.get_int("score.probes", 5));
  const int draws = static_cast<int>(cfg.get_int("score.draws", 100));
  SolveSettings ss;
  ss.precond = parse_precond(cfg.get_string("pcg.precond", precond_name(ss.precond)));
  ss.pcg.tol = cfg.get_double("pcg.tol", 1e-10);
  ss.pcg.max_iter = static_cast<int>(cfg.get_int("pcg.max_iter", ss.pcg.max_iter));
  cfg.reject_unused();
  if (probes < 1 || draws < 2) throw validation_error("invalid-parameter", "score.probes >= 1 and score.draws >= 2");

  const DataField data = io::read_data(in.data, in.covariates);
  const NonStatModel model = io::read_model(model_path);
  if (!model.grid.same_shape(data.grid)) throw validation_error("grid-mismatch", "model grid differs from data");
  const Eigen::VectorXd y0 = mean_residual(model, data);
  const Eigen::VectorXd exact = exact_score(model, y0);
  const CirculantOperator op(model);
  const int np = model.n_cov_params();
  std::vector<Eigen::VectorXd> est(draws);
  parallel_for(draws, c.threads, [&](int d) {
    const auto ps = make_probes(model.n_obs(), probes, stream_key(c.seed, Stream::probes, static_cast<std::uint64_t>(d)));
    est[d] = stochastic_score(op, y0, ps, ss).natural;
  });
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(np), m2 = Eigen::VectorXd::Zero(np);
  for (const auto& e : est) mean += e;
  mean /= draws;
  for (const auto& e : est) m2 += (e - mean).cwiseAbs2();
  std::ostringstream csv;
  csv << "process,parameter,exact,stochastic_mean,mc_se,z\n";
  for (int f = 0; f < np; ++f) {
    const ParamId id = ParamId::from_flat(f);
    const double se = std::sqrt(m2[f] / (draws - 1) / draws);
    csv << id.process << ',' << param_name(id.param) << ',' << csv_double(exact[f]) << ',' << csv_double(mean[f])
        << ',' << csv_double(se) << ',' << csv_double(se > 0 ? (mean[f] - exact[f]) / se : 0.0) << '\n';
  }
  io::write_text(c.output, csv.str());
  std::cout << csv.str();
  return 0;
}

int cmd_bench_precond(const Common& c) {
  const Config cfg = load_config(c);
  const NonStatModel model = model_from_config(cfg);
  BenchOptions bo;
  bo.systems = static_cast<int>(cfg.get_int("bench.systems", bo.systems));
  bo.error2_tol = cfg.get_double("bench.error2_tol", bo.error2_tol);
  bo.max_iter = static_cast<int>(cfg.get_int("bench.max_iter", bo.max_iter));
  bo.seed = c.seed;
  cfg.reject_unused();
  const auto rows = bench_precond(model, bo);
  std::ostringstream csv;
  csv << "system,preconditioner,iterations,converged,error2,seconds\n";
  for (const auto& r : rows) {
    csv << r.system << ',' << precond_name(r.precond) << ',' << r.iterations << ',' << (r.converged ? 1 : 0) << ','
        << csv_double(r.error2) << ',' << csv_double(r.seconds) << '\n';
  }
  io::write_text(c.output, csv.str());
  std::cout << "preconditioner,median_iterations\n";
  for (Precond p : bo.preconds) {
    std::vector<int> its;
    for (const auto& r : rows) {
      if (r.precond == p) its.push_back(r.iterations);
    }
    std::sort(its.begin(), its.end());
    const double med = its.size() % 2 ? its[its.size() / 2] : 0.5 * (its[its.size() / 2 - 1] + its[its.size() / 2]);
    std::cout << precond_name(p) << ',' << med << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Partition-based non-stationary Gaussian process fitting on grids"};
  app.require_subcommand(1);
  Common common;
  Inputs inputs;
  std::string partition_path, truth_path, method = "score", model_path;
  std::vector<std::string> model_paths;

  auto* sim = app.add_subcommand("simulate", "Draw a field (and covariates) from a configured model");
  add_common(sim, common);

  auto* part = app.add_subcommand("partition", "Select a partition by LRT merging and BIC");
  add_common(part, common);
  add_inputs(part, inputs);
  part->add_option("--truth", truth_path, "True partition file, adds a Rand column");

  auto* fitc = app.add_subcommand("fit", "Fit the model for a given partition");
  add_common(fitc, common);
  add_inputs(fitc, inputs);
  fitc->add_option("--partition", partition_path, "Partition file")->required();
  fitc->add_option("--method", method, "score or vecchia")->check(CLI::IsMember({"score", "vecchia"}));
  fitc->add_option("--truth", truth_path, "Generating model JSON, adds the likelihood gain");

  auto* eval = app.add_subcommand("evaluate", "Exact 2 log L and likelihood gain of fitted models");
  add_common(eval, common);
  add_inputs(eval, inputs);
  eval->add_option("--model", model_paths, "Model or fit JSON (repeatable)")->required();
  eval->add_option("--truth", truth_path, "Generating model JSON");

  auto* sc = app.add_subcommand("score-check", "Compare stochastic and exact scores");
  add_common(sc, common);
  add_inputs(sc, inputs);
  sc->add_option("--model", model_path, "Model or fit JSON")->required();

  auto* bench = app.add_subcommand("bench-precond", "PCG iteration counts per preconditioner");
  add_common(bench, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*sim) return cmd_simulate(common);
    if (*part) return cmd_partition(common, inputs, truth_path);
    if (*fitc) return cmd_fit(common, inputs, partition_path, method, truth_path);
    if (*eval) return cmd_evaluate(common, inputs, model_paths, truth_path);
    if (*sc) return cmd_score_check(common, inputs, model_path);
    if (*bench) return cmd_bench_precond(common);
  } catch (const Error& e) {
    std::cerr << "error: " << e.category() << ": " << e.what() << "\n";
    return e.kind() == ErrorKind::validation ? 2 : 3;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
