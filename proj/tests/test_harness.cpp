#include "support.hpp"

#include "vfl/harness.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <future>
#include <sstream>

using namespace vfl;
using vfl::test::bitwise_equal;
using vfl::test::random_labels;
using vfl::test::random_matrix;

namespace {

ExperimentConfig small_dp_config(std::size_t epochs) {
  auto config = load_config(test::source_path("configs/a9a-200-dp.json"));
  config.hyper.max_epochs = epochs;
  return config;
}

double objective(const Mat& x, const Vec& y, double lambda, const Vec& w) {
  Vec z = x * w;
  return loss_value(z, y) + lambda * reg_value(w);
}

}  // namespace

TEST_SUITE("harness") {
  TEST_CASE("evaluation") {
    Vec labels(4);
    labels << 1, 1, 1, -1;
    auto zero = evaluate(Vec::Zero(4), labels);
    CHECK(zero.log_loss == doctest::Approx(std::log(2.0)));
    CHECK(zero.accuracy == 0.75);

    Vec saturated = 800.0 * labels;
    auto perfect = evaluate(saturated, labels);
    CHECK(std::isfinite(perfect.log_loss));
    CHECK(perfect.log_loss >= 0.0);
    CHECK(perfect.log_loss < 1e-300);
    CHECK(perfect.accuracy == 1.0);
    auto wrong = evaluate(Vec(-saturated), labels);
    CHECK(wrong.log_loss == doctest::Approx(800.0));
    CHECK(wrong.accuracy == 0.0);

    std::mt19937_64 rng(1);
    Vec scores = test::random_vector(50, rng);
    Vec y = random_labels(50, rng);
    double loss = 0.0, hits = 0.0;
    for (Eigen::Index i = 0; i < 50; ++i) {
      loss += std::log1p(std::exp(-y[i] * scores[i]));
      hits += ((scores[i] >= 0) == (y[i] > 0)) ? 1.0 : 0.0;
    }
    auto e = evaluate(scores, y);
    CHECK(std::abs(e.log_loss - loss / 50) <= 1e-14);
    CHECK(e.accuracy == hits / 50);
    CHECK(std::isnan(evaluate(Vec(), Vec()).log_loss));
    CHECK_THROWS_AS(evaluate(Vec::Zero(3), labels), DimensionError);
  }

  TEST_CASE("model scores add blocks in order") {
    std::mt19937_64 rng(2);
    std::vector<Mat> blocks{random_matrix(6, 2, rng), random_matrix(6, 3, rng)};
    std::vector<Vec> xs{test::random_vector(2, rng), test::random_vector(3, rng)};
    Vec a = blocks[0] * xs[0];
    Vec b = blocks[1] * xs[1];
    Vec expected = a + b;
    CHECK(bitwise_equal(model_scores(blocks, xs), expected));
    std::vector<Vec> wrong{xs[1], xs[0]};
    CHECK_THROWS_AS(model_scores(blocks, wrong), DimensionError);
  }

  TEST_CASE("baseline limits and oracle") {
    std::mt19937_64 rng(3);
    Mat x = random_matrix(20, 2, rng);
    Vec y = random_labels(20, rng);
    Mat none(0, 2);
    Vec no_labels;

    auto heavy = baseline_centralized(x, y, none, no_labels, 1e12);
    CHECK(heavy.weights.norm() <= 1e-10);

    const double lambda = 0.5;
    auto fit = baseline_centralized(x, y, none, no_labels, lambda);
    CHECK(fit.gradient_norm <= 1e-6);
    // Coarse-to-fine grid search.
    Vec best = Vec::Zero(2);
    double best_value = objective(x, y, lambda, best);
    for (double step : {0.05, 0.005, 0.0005}) {
      Vec centre = best;
      for (int i = -40; i <= 40; ++i) {
        for (int j = -40; j <= 40; ++j) {
          Vec w = centre + step * Vec((Vec(2) << i, j).finished());
          double v = objective(x, y, lambda, w);
          if (v < best_value) {
            best_value = v;
            best = w;
          }
        }
      }
    }
    CHECK((fit.weights - best).lpNorm<Eigen::Infinity>() <= 1e-3);
    CHECK(fit.train_objective <= best_value + 1e-12);

    CHECK_THROWS_AS(baseline_centralized(x, Vec::Ones(3), none, no_labels, 1.0), DimensionError);
    CHECK_THROWS_AS(baseline_centralized(x, y, none, no_labels, -1.0), ConfigError);
  }

  TEST_CASE("a9a baselines") {
    ExperimentConfig config;
    config.data.train_path = test::data_path("a9a");
    config.data.test_path = test::data_path("a9a.t");
    config.data.features = 123;
    config.data.train_rows = 2000;
    config.partition.widths = {66, 57};
    auto data = prepare_data(config);
    const double lambda = 1e-4 * 2000;
    auto central = baseline_centralized(data.train, data.labels, data.test, data.test_labels, lambda);
    CHECK(central.gradient_norm <= 1e-6);
    CHECK(central.test.accuracy > 0.8);

    PartitionSpec whole{{123}};
    auto all_columns = baseline_local(data.train, data.labels, data.test, data.test_labels, lambda, whole, 0);
    CHECK(all_columns.train_objective == doctest::Approx(central.train_objective).epsilon(1e-12));

    for (std::size_t m = 0; m < 2; ++m) {
      auto local = baseline_local(data.train, data.labels, data.test, data.test_labels, lambda, config.partition, m);
      CHECK(local.gradient_norm <= 1e-6);
      CHECK(local.train_objective >= central.train_objective - 1e-9);
    }
    CHECK_THROWS_AS(
        baseline_local(data.train, data.labels, data.test, data.test_labels, lambda, config.partition, 2),
        DimensionError);
    PartitionSpec with_empty{{123, 0}};
    CHECK_THROWS_AS(baseline_local(data.train, data.labels, data.test, data.test_labels, lambda, with_empty, 1),
                    DimensionError);
  }

  TEST_CASE("metrics CSV round trip") {
    std::vector<MetricsRecord> rows(3);
    for (std::size_t k = 0; k < 3; ++k) {
      rows[k].epoch = k + 1;
      rows[k].train_objective = 1.0 / 3.0 + static_cast<double>(k);
      rows[k].test_log_loss = std::exp(-static_cast<double>(k));
      rows[k].test_accuracy = 0.1 * static_cast<double>(k);
      rows[k].primal_residual = 1e-300;
      rows[k].lyapunov = 12345.678901234567;
      rows[k].epsilon_spent = std::sqrt(2.0);
      rows[k].wall_ms = 1.5;
    }
    std::stringstream buffer;
    write_metrics_csv(buffer, rows);
    auto back = read_metrics_csv(buffer);
    REQUIRE(back.size() == 3);
    for (std::size_t k = 0; k < 3; ++k) {
      CHECK(back[k].epoch == rows[k].epoch);
      CHECK(bitwise_equal(back[k].train_objective, rows[k].train_objective));
      CHECK(bitwise_equal(back[k].test_log_loss, rows[k].test_log_loss));
      CHECK(bitwise_equal(back[k].primal_residual, rows[k].primal_residual));
      CHECK(bitwise_equal(back[k].lyapunov, rows[k].lyapunov));
      CHECK(bitwise_equal(back[k].epsilon_spent, rows[k].epsilon_spent));
    }
    std::stringstream bad("epoch\n1\n");
    CHECK_THROWS_AS(read_metrics_csv(bad), ParseError);
    std::stringstream short_row(std::string(kMetricsHeader) + "\n1,2,3\n");
    CHECK_THROWS_AS(read_metrics_csv(short_row), ParseError);
  }

  TEST_CASE("git blob hashes") {
    auto dir = test::scratch("sha");
    auto empty = (dir / "empty").string();
    auto hello = (dir / "hello").string();
    std::ofstream(empty).close();
    std::ofstream(hello) << "hello\n";
    CHECK(git_blob_sha1(empty) == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    CHECK(git_blob_sha1(hello) == "ce013625030ba8dba906f756967f9e9ca394464a");
    CHECK_THROWS_AS(git_blob_sha1((dir / "missing").string()), Error);
  }

  TEST_CASE("resolved hyperparameters") {
    auto config = small_dp_config(3);
    auto data = prepare_data(config);
    REQUIRE(data.labels.size() == 200);
    REQUIRE(data.shards.size() == 2);
    auto h = resolve_hyper(config, data.shards);
    CHECK(h.lambda == doctest::Approx(1e-4 * 200));
    REQUIRE(h.ball_radius);
    CHECK(*h.ball_radius == 1.0);
    config.enforce_ball = false;
    CHECK_FALSE(resolve_hyper(config, data.shards).ball_radius);

    config.lambda_rule = LambdaRule::Feasible;
    config.rho_auto = true;
    auto feasible = resolve_hyper(config, data.shards);
    auto report = assumption_check(std::span<const PartyShard>(data.shards), feasible.rho, feasible.lambda,
                                   loss_profile(feasible.objective(), 200));
    CHECK(report.rho_conditions_hold());
  }

  TEST_CASE("converged small run is stationary") {
    auto config = load_config(test::source_path("configs/a9a-200.json"));
    auto data = prepare_data(config);
    auto hyper = resolve_hyper(config, data.shards);
    Problem problem{data.shards, data.labels};
    Engine engine(problem, hyper);
    auto trace = engine.run();
    REQUIRE(trace.size() == 100);
    auto residuals = stationarity_residuals(engine.state(), problem, hyper);
    CHECK(residuals.max() <= 1e-4);
    CHECK(trace.back().stationarity <= 1e-4);
  }

  TEST_CASE("privacy accounting in the metrics") {
    auto config = small_dp_config(4);
    auto data = prepare_data(config);
    auto result = run_local(config, data);
    REQUIRE(result.metrics.size() == 4);
    REQUIRE(result.noise);
    for (const auto& m : result.metrics)
      CHECK(m.epsilon_spent == total_budget(1.0, 1e-5, m.epoch, 1e-4).epsilon);
    for (const auto& x : result.x) CHECK(x.norm() <= 1.0 + 1e-8);
  }

  TEST_CASE("runs are deterministic") {
    auto config = small_dp_config(5);
    auto data = prepare_data(config);
    auto a = run_local(config, data);
    auto b = run_local(config, data);
    for (std::size_t k = 0; k < a.metrics.size(); ++k) {
      CHECK(bitwise_equal(a.metrics[k].test_log_loss, b.metrics[k].test_log_loss));
      CHECK(bitwise_equal(a.metrics[k].train_objective, b.metrics[k].train_objective));
    }
  }

  TEST_CASE("noise sweep") {
    auto config = small_dp_config(3);
    config.sweep_multipliers = {0.0, 1.0};
    config.sweep_seeds = 2;
    auto data = prepare_data(config);
    auto rows = noise_sweep(config, data);
    REQUIRE(rows.size() == 4);
    CHECK(rows[0].multiplier == 0.0);
    CHECK(rows[1].seed == config.privacy->seed + 1);
    CHECK(bitwise_equal(rows[0].final_test_log_loss, rows[1].final_test_log_loss));
    CHECK_FALSE(bitwise_equal(rows[2].final_test_log_loss, rows[3].final_test_log_loss));

    auto quiet = config;
    quiet.privacy->sigma_multiplier = 0.0;
    CHECK(bitwise_equal(run_local(quiet, data).metrics.back().test_log_loss, rows[0].final_test_log_loss));

    std::stringstream csv;
    write_sweep_csv(csv, rows);
    std::string header;
    std::getline(csv, header);
    CHECK(header == kSweepHeader);

    auto plain = config;
    plain.privacy.reset();
    CHECK_THROWS_AS(noise_sweep(plain, data), ConfigError);
  }

  TEST_CASE("distributed roles reproduce the local metrics") {
    auto config = small_dp_config(6);
    auto data = prepare_data(config);
    auto local = run_local(config, data);

    std::vector<std::unique_ptr<Channel>> coordinator_side;
    std::vector<std::unique_ptr<Channel>> party_side;
    for (std::size_t m = 0; m < 2; ++m) {
      auto [a, b] = make_channel_pair();
      coordinator_side.push_back(std::move(a));
      party_side.push_back(std::move(b));
    }
    std::vector<std::future<RunResult>> parties;
    for (std::size_t m = 0; m < 2; ++m) {
      auto party_config = config;
      party_config.role = Role::Party;
      party_config.party_id = static_cast<std::uint16_t>(m + 1);
      parties.push_back(std::async(std::launch::async, [party_config, &data, &channel = *party_side[m]] {
        return run_party(party_config, data, channel);
      }));
    }
    auto coordinator = run_coordinator(config, data, coordinator_side);
    REQUIRE(coordinator.metrics.size() == local.metrics.size());
    for (std::size_t k = 0; k < local.metrics.size(); ++k) {
      const auto& a = local.metrics[k];
      const auto& b = coordinator.metrics[k];
      CHECK(bitwise_equal(a.train_objective, b.train_objective));
      CHECK(bitwise_equal(a.test_log_loss, b.test_log_loss));
      CHECK(bitwise_equal(a.test_accuracy, b.test_accuracy));
      CHECK(bitwise_equal(a.lyapunov, b.lyapunov));
      CHECK(bitwise_equal(a.epsilon_spent, b.epsilon_spent));
    }
    for (std::size_t m = 0; m < 2; ++m) CHECK(bitwise_equal(parties[m].get().x[0], local.x[m]));
  }

  TEST_CASE("experiment outputs") {
    auto config = small_dp_config(2);
    auto dir = test::scratch("outputs");
    config.output_csv = (dir / "run.csv").string();
    config.model_path = (dir / "model.json").string();
    run_experiment(config);
    std::ifstream csv(config.output_csv);
    auto rows = read_metrics_csv(csv);
    CHECK(rows.size() == 2);
    std::ifstream manifest_file(config.output_csv + ".manifest.json");
    auto manifest = nlohmann::json::parse(manifest_file);
    CHECK(manifest["inputs"].size() == 2);
    CHECK(manifest["inputs"][0]["sha1"].get<std::string>().size() == 40);
    CHECK(manifest["resolved"]["lambda"].get<double>() == doctest::Approx(0.02));
    std::ifstream model_file(*config.model_path);
    auto model = nlohmann::json::parse(model_file);
    CHECK(model["blocks"].size() == 2);
  }

  TEST_CASE("configuration errors name the field") {
    auto message = [](const char* text) -> std::string {
      try {
        parse_config(nlohmann::json::parse(text)).validate();
      } catch (const ConfigError& e) {
        return e.what();
      }
      return "";
    };
    const std::string base = R"("data": {"train": "a"}, "partition": [2, 3])";
    CHECK(message(("{" + base + R"(, "hyper": {"rho": "fast"}})").c_str()).find("hyper.rho") != std::string::npos);
    CHECK(message(("{" + base + R"(, "hyper": {"epochs": -1}})").c_str()).find("hyper.epochs") != std::string::npos);
    CHECK(message(("{" + base + R"(, "hyper": {"colour": 1}})").c_str()).find("hyper.colour") != std::string::npos);
    CHECK(message(("{" + base + R"(, "privacy": {"epsilon": 3}})").c_str()).find("privacy.epsilon") !=
          std::string::npos);
    CHECK(message(("{" + base + R"(, "role": "party"})").c_str()).find("party_id") != std::string::npos);
    CHECK(message(R"({"data": {"train": "a", "features": 4}, "partition": [2, 3]})").find("data.features") !=
          std::string::npos);
    CHECK(message(R"({"data": {}, "partition": [2]})").find("data.train") != std::string::npos);
    CHECK(message(("{" + base + "}").c_str()).empty());

    auto parsed = parse_config(nlohmann::json::parse("{" + base + R"(, "hyper": {"rho": "auto", "lambda": 0.5}})"));
    CHECK(parsed.rho_auto);
    CHECK(parsed.lambda_rule == LambdaRule::Fixed);
    CHECK(parsed.hyper.lambda == 0.5);
    auto echoed = parse_config(to_json(parsed));
    CHECK(to_json(echoed) == to_json(parsed));

    CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);
  }
}
