// SPDX-License-Identifier: Apache-2.0
//
// nsid: run one experiment and write its CSV.
//
//   nsid <experiment> [--config cfg.json] [--out out.csv] [--seed N] [--force-implicit]
//
// Exit status: 0 on success, 2 when an invertibility gate fails and
// --force-implicit was not given, 1 on a configuration error.
#include <CLI11.hpp>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <set>
#include <string>
#include <utility>

#include "nsid/errors.hpp"
#include "nsid/experiments.hpp"

namespace {

using nlohmann::json;
using nsid::ConfigError;
using nsid::Vector;

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

// Rejects keys outside `allowed` so that typos do not silently fall back to defaults.
void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

void read_vector(const json& j, const char* key, Vector& dst) {
  if (!j.contains(key)) return;
  const auto v = j.at(key).get<std::vector<double>>();
  dst = Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

void read_sgd(const json& j, nsid::SGDConfig& cfg) {
  check_keys(j, {"alpha0", "gamma", "s_min", "s_max", "fixed_scale", "w0_jitter", "max_steps", "batch_size",
                 "record_stride", "divergence_bound"},
             "sgd");
  read(j, "alpha0", cfg.alpha0);
  read(j, "gamma", cfg.gamma);
  read(j, "s_min", cfg.s_min);
  read(j, "s_max", cfg.s_max);
  if (j.contains("fixed_scale")) cfg.fixed_scale = j.at("fixed_scale").get<double>();
  read(j, "w0_jitter", cfg.w0_jitter);
  read(j, "max_steps", cfg.max_steps);
  read(j, "batch_size", cfg.batch_size);
  read(j, "record_stride", cfg.record_stride);
  read(j, "divergence_bound", cfg.divergence_bound);
  cfg.validate();
}

nsid::CycleOptions cycle_options(const json& j, bool force, std::set<std::string> extra = {}) {
  std::set<std::string> keys{"init", "step", "iterations", "eps", "divergence_bound", "recurrence", "force_implicit"};
  keys.insert(extra.begin(), extra.end());
  check_keys(j, keys, "cycle");
  nsid::CycleOptions o;
  read_vector(j, "init", o.init);
  read(j, "step", o.step);
  read(j, "iterations", o.iterations);
  read(j, "eps", o.eps);
  read(j, "divergence_bound", o.divergence_bound);
  if (j.contains("recurrence")) {
    const json& r = j.at("recurrence");
    check_keys(r, {"radius", "min_displacement", "excursion", "burn_in_fraction"}, "recurrence");
    read(r, "radius", o.recurrence.radius);
    read(r, "min_displacement", o.recurrence.min_displacement);
    read(r, "excursion", o.recurrence.excursion);
    read(r, "burn_in_fraction", o.recurrence.burn_in_fraction);
  }
  o.force_implicit = force || j.value("force_implicit", false);
  return o;
}

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  return json::parse(in);
}

int run(const std::string& experiment, const Common& c) {
  const json j = load_config(c.config);
  std::ofstream file;
  if (!c.out.empty()) {
    file.open(c.out);
    if (!file) throw ConfigError("cannot open output file " + c.out);
  }
  std::ostream& out = c.out.empty() ? std::cout : file;

  if (experiment == "cycle") {
    const auto run = nsid::run_cycle(cycle_options(j, c.force));
    nsid::write_cycle_csv(out, run);
    std::cerr << "cycle: recurrent=" << run.recurrence.recurrent << " diverged=" << run.diverged
              << " branch_mismatches=" << run.branch_mismatches << '\n';
  } else if (experiment == "cycle-perturbed") {
    const auto base = cycle_options(j, c.force, {"sigma2", "draws"});
    const auto rep = nsid::run_cycle_perturbed(base, j.value("sigma2", 0.05), j.value("draws", std::size_t{20}),
                                               c.seed.value_or(0));
    nsid::write_perturbed_csv(out, rep);
    std::cerr << "cycle-perturbed: recurrent " << rep.recurrent << " of " << rep.draws.size() << '\n';
  } else if (experiment == "billiard4d") {
    check_keys(j, {"init", "step", "iterations", "eta", "checkpoints", "grid", "force_implicit"}, "billiard4d");
    nsid::BilliardOptions o;
    read_vector(j, "init", o.init);
    read(j, "step", o.step);
    read(j, "iterations", o.iterations);
    read(j, "eta", o.eta);
    read(j, "checkpoints", o.checkpoints);
    read(j, "grid", o.grid);
    o.force_implicit = c.force || j.value("force_implicit", false);
    const auto run = nsid::run_billiard4d(o);
    nsid::write_billiard_csv(out, run);
    for (const auto& [n, cells] : run.coverage) std::cerr << "billiard4d: coverage(" << n << ")=" << cells << '\n';
  } else if (experiment == "lorenz") {
    check_keys(j, {"sigma", "rho", "beta", "init", "step", "iterations", "inner_tolerance", "pinv_cutoff",
                   "divergence_bound", "force_implicit"},
               "lorenz");
    nsid::LorenzOptions o;
    read(j, "sigma", o.params.sigma);
    read(j, "rho", o.params.rho);
    read(j, "beta", o.params.beta);
    read_vector(j, "init", o.init);
    read(j, "step", o.step);
    read(j, "iterations", o.iterations);
    read(j, "inner_tolerance", o.inner_tolerance);
    read(j, "pinv_cutoff", o.pinv_cutoff);
    read(j, "divergence_bound", o.divergence_bound);
    o.force_implicit = c.force || j.value("force_implicit", false);
    const auto run = nsid::run_lorenz(o);
    nsid::write_lorenz_csv(out, run);
    std::cerr << "lorenz: plain_diverged=" << run.plain_diverged << " truncated_steps=" << run.truncated_steps
              << '\n';
  } else if (experiment == "counterexample") {
    check_keys(j, {}, "counterexample");
    const auto rep = nsid::run_counterexample();
    nsid::write_counterexample_csv(out, rep);
    std::cerr << "counterexample: dim aff Phi=" << rep.phi_dimension << " dim aff Psi=" << rep.psi_dimension
              << " outside_hull=" << rep.outside_hull << '\n';
    if (!rep.ok()) return 3;
  } else if (experiment == "deq-train") {
    check_keys(j, {"target", "init", "samples", "sgd"}, "deq-train");
    nsid::DeqTrainOptions o;
    read_vector(j, "target", o.target_params);
    read_vector(j, "init", o.init);
    read(j, "samples", o.samples);
    if (j.contains("sgd")) read_sgd(j.at("sgd"), o.sgd);
    if (c.seed) o.sgd.seed = *c.seed;
    const auto run = nsid::run_deq_train(o);
    nsid::write_deq_train_csv(out, run);
    std::cerr << "deq-train: stationarity=" << run.stationarity
              << " last_decile_oscillation=" << run.last_decile_oscillation << '\n';
  } else if (experiment == "lasso-tune") {
    check_keys(j, {"n_train", "n_valid", "p", "noise", "lambda0", "tune", "sgd"}, "lasso-tune");
    nsid::LassoTuneOptions o;
    read(j, "n_train", o.n_train);
    read(j, "n_valid", o.n_valid);
    read(j, "p", o.p);
    read(j, "noise", o.noise);
    if (j.contains("lambda0")) o.lambda0 = j.at("lambda0").get<double>();
    if (j.contains("tune")) {
      const json& t = j.at("tune");
      check_keys(t, {"iterations", "schedule", "alpha0", "power", "gradient_tol", "selection"}, "tune");
      read(t, "iterations", o.tune.iterations);
      read(t, "alpha0", o.tune.schedule.alpha0);
      read(t, "power", o.tune.schedule.power);
      read(t, "gradient_tol", o.tune.gradient_tol);
      const std::string sched = t.value("schedule", std::string("constant"));
      if (sched == "constant") {
        o.tune.schedule.kind = nsid::StepSchedule::Kind::constant;
      } else if (sched == "decaying") {
        o.tune.schedule.kind = nsid::StepSchedule::Kind::decaying;
      } else {
        throw ConfigError("tune.schedule must be 'constant' or 'decaying'");
      }
      const std::string sel = t.value("selection", std::string("lars"));
      if (sel == "lars") {
        o.tune.selection = nsid::QSelection::lars();
      } else if (sel == "weak") {
        o.tune.selection = nsid::QSelection::weak();
      } else {
        throw ConfigError("tune.selection must be 'lars' or 'weak'");
      }
    }
    if (j.contains("sgd")) read_sgd(j.at("sgd"), o.sgd);
    if (c.seed) {
      o.seed = *c.seed;
      o.sgd.seed = *c.seed;
    }
    const auto run = nsid::run_lasso_tune(o);
    nsid::write_lasso_tune_csv(out, run);
    std::cerr << "lasso-tune: lambda=" << run.tune.steps.back().lambda << " stationarity=" << run.stationarity
              << '\n';
  } else if (experiment == "conic-diff") {
    check_keys(j, {"c", "sweep"}, "conic-diff");
    nsid::ConicDiffOptions o;
    read_vector(j, "c", o.c);
    read(j, "sweep", o.sweep);
    const auto run = nsid::run_conic_diff(o);
    if (!run.point.gate_passed && !c.force) {
      std::cerr << "conic-diff: invertibility gate failed at c (rcond " << run.point.rcond
                << "); rerun with --force-implicit to record it\n";
      return 2;
    }
    nsid::write_conic_diff_csv(out, run);
    std::cerr << "conic-diff: gate_passed=" << run.point.gate_passed << " fd_error=" << run.fd_error << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Nonsmooth implicit differentiation experiments"};
  app.require_subcommand(1);
  Common common;
  const std::pair<const char*, const char*> commands[] = {
      {"cycle", "gradient descent through a bilevel box problem"},
      {"cycle-perturbed", "cycle with Gaussian perturbations of the data"},
      {"billiard4d", "two coupled cycles in R^4"},
      {"lorenz", "inexact implicit ascent against the Lorenz flow"},
      {"counterexample", "implicit selections outside the conservative hull"},
      {"deq-train", "SGD on a scalar monotone DEQ"},
      {"lasso-tune", "hyperparameter descent for the Lasso"},
      {"conic-diff", "solution-map derivative of a box LP"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", common.config, "JSON configuration file")->check(CLI::ExistingFile);
    sub->add_option("--out", common.out, "CSV output path (default: stdout)");
    sub->add_option("--seed", common.seed, "random seed");
    sub->add_flag("--force-implicit", common.force, "bypass the invertibility gate");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  const std::string experiment = app.get_subcommands().front()->get_name();
  try {
    return run(experiment, common);
  } catch (const nsid::InvertibilityFailure& e) {
    std::cerr << experiment << ": " << e.what() << "\nwitness:\n" << e.witness() << '\n';
    return 2;
  } catch (const nsid::ConfigError& e) {
    std::cerr << experiment << ": configuration error: " << e.what() << '\n';
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << experiment << ": configuration error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << experiment << ": " << e.what() << '\n';
    return 3;
  }
}
