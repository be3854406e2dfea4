#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "mrpsim/harness.hpp"

namespace fs = std::filesystem;
using namespace mrpsim;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> scale;
  std::optional<int> reps;
  std::optional<std::string> out_dir;
  std::optional<int> workers;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "key = value file with ExperimentConfig fields")->check(CLI::ExistingFile);
    app->add_option("--seed", seed, "master seed");
    app->add_option("--scale", scale, "fraction of schools per stratum, in (0, 1]");
    app->add_option("--reps", reps, "number of replications");
    app->add_option("--out-dir", out_dir, "output directory");
    app->add_option("--workers", workers, "replications run concurrently");
  }

  harness::ExperimentConfig resolve() const {
    auto cfg = config.empty() ? harness::ExperimentConfig::desk() : harness::ExperimentConfig::load(config);
    if (seed) cfg.seed = *seed;
    if (scale) cfg.scale = *scale;
    if (reps) cfg.reps = *reps;
    if (out_dir) cfg.out_dir = *out_dir;
    if (workers) cfg.workers = *workers;
    if (cfg.school_cate_replication > cfg.reps) cfg.school_cate_replication = 1;
    cfg.validate();
    fs::create_directories(cfg.out_dir);
    return cfg;
  }
};

fs::path out_path(const harness::ExperimentConfig& cfg, const std::string& name) { return fs::path(cfg.out_dir) / name; }

void write_prior_predictive(const std::vector<std::vector<double>>& reps, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "replicate,row,value\n";
  for (std::size_t r = 0; r < reps.size(); ++r) {
    for (std::size_t i = 0; i < reps[r].size(); ++i) out << r << ',' << i << ',' << io::fmt(reps[r][i]) << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MRP / MRP-MI treatment-effect simulation lab"};
  app.require_subcommand(1);

  Common c_gen, c_sample, c_fit, c_est, c_sim, c_rep;
  int rep_gen = 1, rep_sample = 1, rep_est = 1;

  auto* gen = app.add_subcommand("generate", "finite population and poststratification matrix of one replication");
  c_gen.attach(gen);
  gen->add_option("--rep", rep_gen, "replication index")->check(CLI::PositiveNumber);

  auto* sample = app.add_subcommand("sample", "stratified cluster sample D of one replication");
  c_sample.attach(sample);
  sample->add_option("--rep", rep_sample, "replication index")->check(CLI::PositiveNumber);

  auto* fit = app.add_subcommand("fit", "posterior draws of the Prev-GPA and Post-GPA models for a sample file");
  c_fit.attach(fit);
  std::string fit_sample;
  std::string fit_model = "both";
  int prior_draws = 0;
  fit->add_option("--sample", fit_sample, "sample CSV (default: <out-dir>/sample.csv)");
  fit->add_option("--model", fit_model, "prev, post or both")->check(CLI::IsMember({"prev", "post", "both"}));
  fit->add_option("--prior-predictive", prior_draws, "also write this many prior predictive replicates");

  auto* est = app.add_subcommand("estimate", "every estimator on every subpopulation for one replication");
  c_est.attach(est);
  est->add_option("--rep", rep_est, "replication index")->check(CLI::PositiveNumber);

  auto* sim = app.add_subcommand("simulate", "full experiment: all replications, truth, metrics");
  c_sim.attach(sim);

  auto* report = app.add_subcommand("report", "metrics from an estimates file and a truth file");
  c_rep.attach(report);
  std::string rep_estimates, rep_truth;
  report->add_option("--estimates", rep_estimates, "estimates CSV (default: <out-dir>/estimates.csv)");
  report->add_option("--truth", rep_truth, "truth CSV (default: <out-dir>/truth.csv)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const auto cfg = c_gen.resolve();
      const auto layout = harness::experiment_layout(cfg);
      const auto pop = harness::replication_population(cfg, layout, rep_gen);
      dgp::write_population_csv(pop, out_path(cfg, "population.csv").string());
      poststrat::write_matrix_csv(poststrat::build_poststrat_matrix(pop), out_path(cfg, "poststrat_matrix.csv").string());
      std::cout << "population: " << pop.size() << " students in " << layout.schools.size() << " schools\n";
    } else if (*sample) {
      const auto cfg = c_sample.resolve();
      const auto layout = harness::experiment_layout(cfg);
      const auto pop = harness::replication_population(cfg, layout, rep_sample);
      const auto d = harness::replication_sample(cfg, pop, rep_sample);
      design::write_sample_csv(d, out_path(cfg, "sample.csv").string());
      design::write_provenance(d, out_path(cfg, "sample_provenance.txt").string());
      std::cout << "sample: n = " << d.n() << ", schools = " << d.schools.size()
                << ", response rate = " << d.response_rate() << '\n';
    } else if (*fit) {
      const auto cfg = c_fit.resolve();
      const auto path = fit_sample.empty() ? out_path(cfg, "sample.csv").string() : fit_sample;
      const auto prov = fs::path(path).parent_path() / "sample_provenance.txt";
      const auto d = design::read_sample(path, fs::exists(prov) ? prov.string() : std::string{});
      std::ofstream diag(out_path(cfg, "diagnostics.txt"));
      auto run = [&](const bayes::ModelSpec& spec, const std::string& name, std::uint64_t tag) {
        const auto draws = bayes::fit(spec, d, cfg.fit_options(harness::seeds::derive(cfg.seed, tag, 0)));
        bayes::write_draws_csv(draws, out_path(cfg, name + "_draws.csv").string());
        bayes::write_diagnostics(draws, diag, name);
        for (const auto& w : draws.warnings) std::cerr << name << ": warning: " << w << '\n';
        if (prior_draws > 0) {
          write_prior_predictive(bayes::prior_predictive(spec, d, prior_draws, cfg.seed),
                                 out_path(cfg, name + "_prior_predictive.csv"));
        }
      };
      if (fit_model != "post") run(bayes::ModelSpec::prev_gpa(), "prev", harness::seeds::kPrevFit);
      if (fit_model != "prev") run(bayes::ModelSpec::post_gpa(), "post", harness::seeds::kPostFit);
    } else if (*est) {
      auto cfg = c_est.resolve();
      const auto layout = harness::experiment_layout(cfg);
      const auto truth = harness::experiment_truth(cfg, layout, false);
      const auto out = harness::run_replication(cfg, layout, rep_est);
      if (!out.record.ok) throw std::runtime_error("replication " + std::to_string(rep_est) + " failed: " + out.record.error);
      harness::write_text(out_path(cfg, "estimates.csv").string(), harness::emit_estimates(out.estimates));
      oracle::write_truth_csv(truth, out_path(cfg, "truth.csv").string());
      harness::write_text(out_path(cfg, "diagnostics.txt").string(), out.diagnostics);
      harness::write_text(out_path(cfg, "replications.csv").string(), harness::emit_replications({out.record}));
      std::cout << harness::emit_estimates(out.estimates);
    } else if (*sim) {
      const auto cfg = c_sim.resolve();
      const auto res = harness::run_experiment(cfg, [](const harness::ReplicationRecord& r) {
        std::cerr << "replication " << r.replication << (r.ok ? " ok" : " FAILED: " + r.error) << " (" << r.seconds
                  << " s)\n";
      });
      harness::write_outputs(res, cfg);
      std::cout << harness::emit_metrics(res.metrics);
    } else if (*report) {
      const auto cfg = c_rep.resolve();
      const auto e = rep_estimates.empty() ? out_path(cfg, "estimates.csv").string() : rep_estimates;
      const auto t = rep_truth.empty() ? out_path(cfg, "truth.csv").string() : rep_truth;
      const auto metrics = harness::compute_metrics(harness::read_estimates(e), oracle::read_truth_csv(t));
      harness::write_text(out_path(cfg, "metrics.csv").string(), harness::emit_metrics(metrics));
      std::cout << harness::emit_metrics(metrics);
    }
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return 1;
  }
  return 0;
}
