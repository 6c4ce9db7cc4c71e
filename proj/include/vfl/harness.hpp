#pragma once

#include "vfl/config.hpp"
#include "vfl/engine.hpp"
#include "vfl/privacy.hpp"
#include "vfl/protocol.hpp"

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace vfl {

struct Evaluation {
  double log_loss = 0.0;  // mean over samples
  double accuracy = 0.0;  // sign(score), ties predicted +1
};

Evaluation evaluate(const Vec& scores, const Vec& labels);

// sum_m blocks[m] * xs[m], summed in ascending m.
Vec model_scores(std::span<const Mat> blocks, std::span<const Vec> xs);
Evaluation evaluate(std::span<const Mat> blocks, std::span<const Vec> xs, const Vec& labels);

struct BaselineResult {
  Vec weights;
  double train_objective = 0.0;
  double gradient_norm = 0.0;
  std::size_t steps = 0;
  Evaluation test;
};

// Full-feature l2-regularized logistic regression, minimized by a
// line-searched Newton-CG method until ||grad|| <= tolerance.
BaselineResult baseline_centralized(const Mat& train, const Vec& labels, const Mat& test, const Vec& test_labels,
                                    double lambda, const BaselineOptions& options = {},
                                    LossScaling scaling = LossScaling::Sum);

// The same restricted to one party's columns (0-based party index).
BaselineResult baseline_local(const Mat& train, const Vec& labels, const Mat& test, const Vec& test_labels,
                              double lambda, const PartitionSpec& partition, std::size_t party,
                              const BaselineOptions& options = {}, LossScaling scaling = LossScaling::Sum);

struct MetricsRecord {
  std::size_t epoch = 0;
  double train_objective = 0.0;
  double test_log_loss = 0.0;
  double test_accuracy = 0.0;
  double primal_residual = 0.0;
  double lyapunov = 0.0;
  double epsilon_spent = 0.0;
  double wall_ms = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "epoch,train_objective,test_log_loss,test_accuracy,primal_residual,lyapunov,epsilon_spent,wall_ms";

void write_metrics_csv(std::ostream& out, std::span<const MetricsRecord> rows);
std::vector<MetricsRecord> read_metrics_csv(std::istream& in);

// Data as the experiment sees it: relabelled, trimmed, optionally
// normalized, and split by the partition.
struct PreparedData {
  Vec labels;
  Vec test_labels;
  Mat train;  // dense N x d
  Mat test;   // dense N_test x d, 0 rows without a test file
  std::vector<PartyShard> shards;
  std::vector<Mat> test_blocks;
  std::vector<std::string> inputs;  // files read
};

PreparedData prepare_data(const ExperimentConfig& config);

// Applies the lambda rule, rho = "auto" and the DP ball to config.hyper.
HyperParams resolve_hyper(const ExperimentConfig& config, std::span<const PartyShard> shards);

std::optional<NoiseCalibration> noise_calibration(const ExperimentConfig& config, const HyperParams& hyper);

double epsilon_spent(const ExperimentConfig& config, std::size_t epoch);

struct RunResult {
  HyperParams hyper;
  AssumptionReport assumptions;
  std::optional<NoiseCalibration> noise;
  std::vector<DiagnosticsRecord> trace;
  std::vector<MetricsRecord> metrics;
  std::vector<Vec> x;  // all blocks (local-sim) or this party's block (party)
};

// In-process run on already prepared data; writes nothing.
RunResult run_local(const ExperimentConfig& config, const PreparedData& data);

// Coordinator side over established channels.
RunResult run_coordinator(const ExperimentConfig& config, const PreparedData& data,
                          std::vector<std::unique_ptr<Channel>>& channels);

// Party side over an established channel.
RunResult run_party(const ExperimentConfig& config, const PreparedData& data, Channel& channel);

// Loads data, runs the configured role (opening sockets as needed), and
// writes the metrics CSV, manifest and model.
RunResult run_experiment(const ExperimentConfig& config);

struct SweepRow {
  double multiplier = 0.0;
  std::uint64_t seed = 0;
  double final_test_log_loss = 0.0;
  double final_test_accuracy = 0.0;
  double epsilon_spent = 0.0;
};

inline constexpr const char* kSweepHeader = "multiplier,seed,final_test_log_loss,final_test_accuracy,epsilon_spent";

// One local run per (multiplier, seed); seeds are config seed + 0..seeds-1.
std::vector<SweepRow> noise_sweep(const ExperimentConfig& config, const PreparedData& data);
void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows);

// SHA-1 of "blob <size>\0<content>", as git computes object ids.
std::string git_blob_sha1(const std::string& path);

void write_manifest(const std::string& path, const ExperimentConfig& config, const RunResult& result,
                    std::span<const std::string> inputs);

}  // namespace vfl
