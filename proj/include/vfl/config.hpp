#pragma once

#include "vfl/engine.hpp"
#include "vfl/privacy.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace vfl {

enum class Role { LocalSim, Coordinator, Party };

std::string to_string(Role role);
Role parse_role(const std::string& text);

// How lambda is chosen when the config does not give a number.
enum class LambdaRule {
  Fixed,
  Default,   // 1e-4 * N * loss_scale
  Feasible,  // 2.1 * max_m sigma_max(G_m), so gamma_m >= 2 sigma_max for any rho
};

enum class RowNormalization {
  None,
  Full,   // unit l2 norm across all features of a row
  Shard,  // unit l2 norm within every party block
};

struct DataConfig {
  std::string train_path;
  std::string test_path;                  // optional
  std::optional<std::size_t> features;    // forced d
  std::optional<std::size_t> train_rows;  // keep only the first rows
  std::optional<std::size_t> feature_subset;  // keep only the first columns
  RowNormalization normalize_rows = RowNormalization::None;
  bool requires_full_data = false;
};

struct BaselineOptions {
  std::size_t max_steps = 200;
  double gradient_tolerance = 1e-6;
};

struct ExperimentConfig {
  DataConfig data;
  PartitionSpec partition;
  HyperParams hyper;
  LambdaRule lambda_rule = LambdaRule::Default;
  bool rho_auto = false;
  std::optional<PrivacyParams> privacy;
  bool enforce_ball = true;  // DP runs constrain ||x_m|| <= b1
  Role role = Role::LocalSim;
  std::optional<std::uint16_t> party_id;
  std::optional<std::string> listen;
  std::optional<std::string> connect;
  std::string output_csv = "metrics.csv";
  std::optional<std::string> manifest_path;  // defaults to <output_csv>.manifest.json
  std::optional<std::string> model_path;
  double io_timeout_seconds = 30.0;
  std::vector<double> sweep_multipliers{0.0, 0.5, 1.0, 2.0, 4.0};
  std::size_t sweep_seeds = 5;
  BaselineOptions baseline;
  bool full_data = false;

  void validate() const;
};

// Relative paths inside the document are resolved against `base_dir`.
ExperimentConfig parse_config(const nlohmann::json& document, const std::string& base_dir = "");
ExperimentConfig load_config(const std::string& path);
nlohmann::json to_json(const ExperimentConfig& config);

}  // namespace vfl
