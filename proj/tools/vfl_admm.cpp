#include "vfl/harness.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

namespace {

struct Overrides {
  std::string config;
  std::string role;
  int party_id = -1;
  std::string listen;
  std::string connect;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
  bool full_data = false;
};

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  app->add_option("--seed", o.seed, "override hyper.seed and privacy.seed")->each([&](const std::string&) {
    o.seed_set = true;
  });
  app->add_option("--out", o.out, "output path");
  app->add_flag("--full-data", o.full_data, "use full data sets (ignores row and column limits)");
}

vfl::ExperimentConfig load(const Overrides& o) {
  auto config = vfl::load_config(o.config);
  if (!o.role.empty()) config.role = vfl::parse_role(o.role);
  if (o.party_id >= 0) config.party_id = static_cast<std::uint16_t>(o.party_id);
  if (!o.listen.empty()) config.listen = o.listen;
  if (!o.connect.empty()) config.connect = o.connect;
  if (o.seed_set) {
    config.hyper.seed = o.seed;
    if (config.privacy) config.privacy->seed = o.seed;
  }
  if (!o.out.empty()) config.output_csv = o.out;
  config.full_data = o.full_data;
  config.validate();
  return config;
}

void report_assumptions(const vfl::RunResult& r) {
  const auto& a = r.assumptions;
  std::fprintf(stderr, "rho = %.6g, lambda = %.6g\n", r.hyper.rho, r.hyper.lambda);
  if (!a.all_hold())
    std::fprintf(stderr,
                 "warning: convergence assumptions not met (gamma_m >= 2 sigma_max: %s, rho^2 > 2L^2: %s, "
                 "rho >= L: %s, full column rank: %s)\n",
                 a.gamma_ok ? "yes" : "no", a.curvature_ok ? "yes" : "no", a.rho_ge_l ? "yes" : "no",
                 a.full_rank ? "yes" : "no");
}

int cmd_run(const Overrides& o) {
  auto config = load(o);
  auto result = vfl::run_experiment(config);
  report_assumptions(result);
  if (!result.metrics.empty()) {
    const auto& last = result.metrics.back();
    std::printf("epochs %zu  objective %.6f  test_log_loss %.6f  test_accuracy %.4f  residual %.3e  lyapunov %.3e\n",
                last.epoch, last.train_objective, last.test_log_loss, last.test_accuracy, last.primal_residual,
                last.lyapunov);
    std::printf("metrics written to %s\n", config.output_csv.c_str());
  } else if (config.role == vfl::Role::Party) {
    std::printf("party %u finished\n", static_cast<unsigned>(*config.party_id));
  }
  return 0;
}

int cmd_baseline(const Overrides& o) {
  auto config = load(o);
  auto data = vfl::prepare_data(config);
  auto hyper = vfl::resolve_hyper(config, data.shards);
  auto central = vfl::baseline_centralized(data.train, data.labels, data.test, data.test_labels, hyper.lambda,
                                           config.baseline, hyper.scaling);
  nlohmann::json out = {{"lambda", hyper.lambda},
                        {"centralized",
                         {{"test_log_loss", central.test.log_loss},
                          {"test_accuracy", central.test.accuracy},
                          {"train_objective", central.train_objective},
                          {"gradient_norm", central.gradient_norm},
                          {"steps", central.steps}}}};
  nlohmann::json local = nlohmann::json::array();
  for (std::size_t m = 0; m < config.partition.parties(); ++m) {
    auto r = vfl::baseline_local(data.train, data.labels, data.test, data.test_labels, hyper.lambda, config.partition,
                                 m, config.baseline, hyper.scaling);
    local.push_back({{"party_id", m + 1},
                     {"test_log_loss", r.test.log_loss},
                     {"test_accuracy", r.test.accuracy},
                     {"gradient_norm", r.gradient_norm}});
  }
  out["local"] = local;
  if (o.out.empty()) {
    std::cout << out.dump(2) << '\n';
  } else {
    std::ofstream file(o.out);
    if (!file) throw vfl::Error("cannot write " + o.out);
    file << out.dump(2) << '\n';
  }
  return 0;
}

int cmd_sweep(const Overrides& o) {
  auto config = load(o);
  auto data = vfl::prepare_data(config);
  auto rows = vfl::noise_sweep(config, data);
  const std::string path = o.out.empty() ? "sweep.csv" : o.out;
  std::ofstream file(path);
  if (!file) throw vfl::Error("cannot write " + path);
  vfl::write_sweep_csv(file, rows);
  std::printf("%zu rows written to %s\n", rows.size(), path.c_str());
  return 0;
}

struct BudgetArgs {
  double epsilon = 0.1;
  double delta = 1e-6;
  std::size_t epochs = 100;
  double delta_prime = 1e-4;
};

int cmd_budget(const BudgetArgs& b) {
  auto total = vfl::total_budget(b.epsilon, b.delta, b.epochs, b.delta_prime);
  nlohmann::json out = {{"epsilon", b.epsilon},      {"delta", b.delta},
                        {"epochs", b.epochs},        {"delta_prime", b.delta_prime},
                        {"epsilon_total", total.epsilon}, {"delta_total", total.delta}};
  std::cout << out.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Vertically partitioned logistic regression by ADMM sharing"};
  app.require_subcommand(1);

  Overrides run_o, base_o, sweep_o;
  auto* run = app.add_subcommand("run", "train with ADMM (local simulation, coordinator or party)");
  add_common(run, run_o);
  run->add_option("--role", run_o.role, "local-sim, coordinator or party")
      ->check(CLI::IsMember({"local-sim", "coordinator", "party"}));
  run->add_option("--party-id", run_o.party_id, "party id (1-based)")->check(CLI::Range(1, 65535));
  run->add_option("--listen", run_o.listen, "coordinator address host:port");
  run->add_option("--connect", run_o.connect, "coordinator address for parties host:port");

  auto* baseline = app.add_subcommand("baseline", "centralized and local-only reference models");
  add_common(baseline, base_o);

  auto* sweep = app.add_subcommand("sweep", "final test loss across noise multipliers and seeds");
  add_common(sweep, sweep_o);

  BudgetArgs budget_args;
  auto* budget = app.add_subcommand("budget", "total privacy budget after composition");
  budget->add_option("--epsilon", budget_args.epsilon, "per-iteration epsilon")->check(CLI::Range(0.0, 1.0));
  budget->add_option("--delta", budget_args.delta, "per-iteration delta");
  budget->add_option("--epochs", budget_args.epochs, "number of releases T");
  budget->add_option("--delta-prime", budget_args.delta_prime, "composition slack");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*run) return cmd_run(run_o);
    if (*baseline) return cmd_baseline(base_o);
    if (*sweep) return cmd_sweep(sweep_o);
    if (*budget) return cmd_budget(budget_args);
  } catch (const vfl::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
