#include "vfl/harness.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <memory>
#include <sstream>

namespace vfl {

Evaluation evaluate(const Vec& scores, const Vec& labels) {
  if (scores.size() != labels.size())
    throw DimensionError("evaluation got " + std::to_string(scores.size()) + " scores for " +
                         std::to_string(labels.size()) + " labels");
  Evaluation e;
  if (labels.size() == 0) {
    e.log_loss = std::numeric_limits<double>::quiet_NaN();
    e.accuracy = std::numeric_limits<double>::quiet_NaN();
    return e;
  }
  double loss = 0.0;
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    loss += log1pexp(-labels[i] * scores[i]);
    double predicted = scores[i] >= 0.0 ? 1.0 : -1.0;
    if (predicted == labels[i]) ++correct;
  }
  const double n = static_cast<double>(labels.size());
  e.log_loss = loss / n;
  e.accuracy = static_cast<double>(correct) / n;
  return e;
}

Vec model_scores(std::span<const Mat> blocks, std::span<const Vec> xs) {
  if (blocks.size() != xs.size() || blocks.empty()) throw DimensionError("one parameter block per data block expected");
  std::vector<Vec> parts;
  parts.reserve(blocks.size());
  for (std::size_t m = 0; m < blocks.size(); ++m) {
    if (blocks[m].cols() != xs[m].size())
      throw DimensionError("block " + std::to_string(m) + " has " + std::to_string(blocks[m].cols()) +
                           " columns but its parameters have " + std::to_string(xs[m].size()) + " entries");
    Vec s = blocks[m] * xs[m];
    parts.push_back(std::move(s));
  }
  return sum_shares(parts);
}

Evaluation evaluate(std::span<const Mat> blocks, std::span<const Vec> xs, const Vec& labels) {
  return evaluate(model_scores(blocks, xs), labels);
}

namespace {

struct LogisticModel {
  const Mat& x;
  const Vec& y;
  double lambda;
  double scale;

  double value(const Vec& w) const {
    Vec z = x * w;
    return loss_value(z, y, scale) + lambda * reg_value(w);
  }
  Vec gradient(const Vec& w, Vec& curvature) const {
    Vec z = x * w;
    Vec g = loss_grad(z, y, scale);
    curvature.resize(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      double s = sigmoid(z[i]);
      curvature[i] = scale * s * (1.0 - s);
    }
    Vec out = x.transpose() * g + lambda * w;
    return out;
  }
  Vec hessian_times(const Vec& curvature, const Vec& v) const {
    Vec xv = x * v;
    Vec weighted = curvature.cwiseProduct(xv);
    Vec out = x.transpose() * weighted + lambda * v;
    return out;
  }
};

// Approximately solves H p = -g by conjugate gradients.
Vec newton_direction(const LogisticModel& model, const Vec& curvature, const Vec& g) {
  const double gnorm = g.norm();
  const double target = std::min(0.5, std::sqrt(gnorm)) * gnorm;
  Vec p = Vec::Zero(g.size());
  Vec r = -g;
  Vec d = r;
  double rr = r.squaredNorm();
  const auto limit = std::max<Eigen::Index>(10 * g.size(), 100);
  for (Eigen::Index it = 0; it < limit; ++it) {
    Vec hd = model.hessian_times(curvature, d);
    double dhd = d.dot(hd);
    if (!(dhd > 0.0)) return it == 0 ? Vec(-g) : p;
    double alpha = rr / dhd;
    p += alpha * d;
    r -= alpha * hd;
    double rr_next = r.squaredNorm();
    if (std::sqrt(rr_next) <= target) break;
    d = r + (rr_next / rr) * d;
    rr = rr_next;
  }
  return p;
}

}  // namespace

BaselineResult baseline_centralized(const Mat& train, const Vec& labels, const Mat& test, const Vec& test_labels,
                                    double lambda, const BaselineOptions& options, LossScaling scaling) {
  if (train.cols() == 0) throw DimensionError("baseline needs at least one feature");
  if (train.rows() != labels.size()) throw DimensionError("baseline labels do not match the training rows");
  if (test.rows() != test_labels.size()) throw DimensionError("baseline test labels do not match the test rows");
  if (test.rows() > 0 && test.cols() != train.cols()) throw DimensionError("baseline test width differs from train");
  if (!(lambda >= 0.0)) throw ConfigError("baseline lambda must be non-negative");

  const double scale = ObjectiveConfig{lambda, scaling}.loss_scale(static_cast<std::size_t>(labels.size()));
  LogisticModel model{train, labels, lambda, scale};
  BaselineResult result;
  Vec w = Vec::Zero(train.cols());
  double f = model.value(w);
  Vec curvature;
  Vec g = model.gradient(w, curvature);
  std::size_t step = 0;
  while (g.norm() > options.gradient_tolerance && step < options.max_steps) {
    Vec p = newton_direction(model, curvature, g);
    double slope = g.dot(p);
    if (!(slope < 0.0)) {
      p = -g;
      slope = -g.squaredNorm();
    }
    double alpha = 1.0;
    bool accepted = false;
    for (int k = 0; k < 60; ++k, alpha *= 0.5) {
      Vec candidate = w + alpha * p;
      double fc = model.value(candidate);
      bool decrease = fc <= f + 1e-4 * alpha * slope;
      if (!decrease && fc <= f + 1e-12 * std::abs(f)) {
        // Below the resolution of f: fall back to gradient reduction.
        Vec trial_curvature;
        decrease = model.gradient(candidate, trial_curvature).norm() < g.norm();
      }
      if (decrease) {
        w = std::move(candidate);
        f = fc;
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      // No representable decrease left; accept the point if it is already
      // stationary to rounding, otherwise report divergence.
      if (g.norm() <= 1e3 * options.gradient_tolerance) break;
      throw SolverError("baseline line search failed with gradient norm " + std::to_string(g.norm()));
    }
    g = model.gradient(w, curvature);
    ++step;
  }
  result.weights = w;
  result.train_objective = f;
  result.gradient_norm = g.norm();
  result.steps = step;
  if (test.rows() > 0) {
    Vec scores = test * w;
    result.test = evaluate(scores, test_labels);
  } else {
    result.test = evaluate(Vec(), Vec());
  }
  return result;
}

BaselineResult baseline_local(const Mat& train, const Vec& labels, const Mat& test, const Vec& test_labels,
                              double lambda, const PartitionSpec& partition, std::size_t party,
                              const BaselineOptions& options, LossScaling scaling) {
  if (party >= partition.parties()) throw DimensionError("baseline party index out of range");
  if (partition.total() != static_cast<std::size_t>(train.cols()))
    throw DimensionError("partition does not match the training width");
  const auto offset = static_cast<Eigen::Index>(partition.offset(party));
  const auto width = static_cast<Eigen::Index>(partition.widths[party]);
  if (width == 0) throw DimensionError("baseline party block is empty");
  Mat local_train = train.middleCols(offset, width);
  Mat local_test = test.rows() > 0 ? Mat(test.middleCols(offset, width)) : Mat(0, width);
  return baseline_centralized(local_train, labels, local_test, test_labels, lambda, options, scaling);
}

void write_metrics_csv(std::ostream& out, std::span<const MetricsRecord> rows) {
  out << kMetricsHeader << '\n';
  char line[512];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof(line), "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.3f\n", r.epoch, r.train_objective,
                  r.test_log_loss, r.test_accuracy, r.primal_residual, r.lyapunov, r.epsilon_spent, r.wall_ms);
    out << line;
  }
}

std::vector<MetricsRecord> read_metrics_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw ParseError(1, "unexpected metrics header");
  std::vector<MetricsRecord> rows;
  std::size_t number = 1;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 8) throw ParseError(number, "expected 8 columns");
    try {
      MetricsRecord r;
      r.epoch = std::stoul(cells[0]);
      r.train_objective = std::stod(cells[1]);
      r.test_log_loss = std::stod(cells[2]);
      r.test_accuracy = std::stod(cells[3]);
      r.primal_residual = std::stod(cells[4]);
      r.lyapunov = std::stod(cells[5]);
      r.epsilon_spent = std::stod(cells[6]);
      r.wall_ms = std::stod(cells[7]);
      rows.push_back(r);
    } catch (const std::logic_error&) {
      throw ParseError(number, "malformed number");
    }
  }
  return rows;
}

namespace {

Mat concatenate_blocks(std::span<const Mat> blocks) {
  Eigen::Index rows = blocks.empty() ? 0 : blocks.front().rows();
  Eigen::Index cols = 0;
  for (const auto& b : blocks) cols += b.cols();
  Mat out(rows, cols);
  Eigen::Index offset = 0;
  for (const auto& b : blocks) {
    out.middleCols(offset, b.cols()) = b;
    offset += b.cols();
  }
  return out;
}

Mat concatenate(std::span<const PartyShard> shards) {
  std::vector<Mat> blocks;
  for (const auto& s : shards) blocks.push_back(s.block());
  return concatenate_blocks(blocks);
}

}  // namespace

PreparedData prepare_data(const ExperimentConfig& config) {
  PreparedData out;
  const bool has_test = !config.data.test_path.empty();
  std::optional<std::size_t> forced = config.data.features;

  LabeledDataset train = load_libsvm(config.data.train_path, forced);
  out.inputs.push_back(config.data.train_path);
  LabeledDataset test;
  if (has_test) {
    // A test file whose largest index is smaller than the training width
    // is padded to the training width.
    test = load_libsvm(config.data.test_path, forced ? forced : std::optional<std::size_t>(train.n_features()));
    out.inputs.push_back(config.data.test_path);
    if (test.n_features() != train.n_features())
      throw DimensionError("test file has " + std::to_string(test.n_features()) + " features, training file has " +
                           std::to_string(train.n_features()) + "; set data.features");
  }

  auto relabeled = relabel(train.raw_labels);
  train.labels = relabeled.labels;
  if (has_test) test.labels = apply_label_map(test.raw_labels, relabeled.map);

  if (config.data.train_rows && !config.full_data) train = head_rows(train, *config.data.train_rows);
  if (config.data.feature_subset && !config.full_data) {
    std::vector<std::size_t> columns(std::min(*config.data.feature_subset, train.n_features()));
    for (std::size_t j = 0; j < columns.size(); ++j) columns[j] = j;
    train = select_columns(train, columns);
    if (has_test) test = select_columns(test, columns);
  }
  if (config.data.normalize_rows == RowNormalization::Full) {
    train = normalize_full_rows(train);
    if (has_test) test = normalize_full_rows(test);
  }
  const bool per_shard = config.data.normalize_rows == RowNormalization::Shard;

  out.labels = train.labels;
  for (auto& shard : vertical_split(train, config.partition))
    out.shards.push_back(per_shard ? normalize_rows(shard).shard : std::move(shard));
  out.train = concatenate(out.shards);
  if (has_test) {
    out.test_labels = test.labels;
    for (auto& shard : vertical_split(test, config.partition))
      out.test_blocks.push_back(per_shard ? normalize_rows(shard).shard.block() : shard.block());
    out.test = concatenate_blocks(out.test_blocks);
  } else {
    out.test = Mat(0, out.train.cols());
    for (auto w : config.partition.widths) out.test_blocks.emplace_back(0, static_cast<Eigen::Index>(w));
  }
  return out;
}

HyperParams resolve_hyper(const ExperimentConfig& config, std::span<const PartyShard> shards) {
  HyperParams h = config.hyper;
  if (shards.empty()) throw DimensionError("no party shards");
  const std::size_t n = shards.front().rows();
  switch (config.lambda_rule) {
    case LambdaRule::Fixed:
      break;
    case LambdaRule::Default:
      h.lambda = 1e-4 * static_cast<double>(n) * h.objective().loss_scale(n);
      break;
    case LambdaRule::Feasible: {
      double sigma_max = 0.0;
      for (const auto& shard : shards) sigma_max = std::max(sigma_max, shard.extremes().sigma_max);
      h.lambda = 2.1 * sigma_max;
      break;
    }
  }
  if (config.privacy && config.enforce_ball) h.ball_radius = config.privacy->b1;
  if (config.rho_auto) h.rho = recommend_rho(shards, loss_profile(h.objective(), n), h.lambda);
  return h;
}

std::optional<NoiseCalibration> noise_calibration(const ExperimentConfig& config, const HyperParams& hyper) {
  if (!config.privacy) return std::nullopt;
  return calibrate(*config.privacy, config.partition, hyper.lambda, hyper.rho);
}

double epsilon_spent(const ExperimentConfig& config, std::size_t epoch) {
  if (!config.privacy) return 0.0;
  const auto& p = *config.privacy;
  return total_budget(p.epsilon, p.delta, epoch, p.delta_prime).epsilon;
}

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

Evaluation test_metrics(const PreparedData& data, const Vec& scores) {
  if (data.test_labels.size() == 0) return evaluate(Vec(), Vec());
  return evaluate(scores, data.test_labels);
}

MetricsRecord to_metrics(const ExperimentConfig& config, const DiagnosticsRecord& record, const Evaluation& test,
                         double wall_ms) {
  MetricsRecord m;
  m.epoch = record.epoch;
  m.train_objective = record.objective;
  m.test_log_loss = test.log_loss;
  m.test_accuracy = test.accuracy;
  m.primal_residual = record.primal_residual;
  m.lyapunov = record.lyapunov;
  m.epsilon_spent = epsilon_spent(config, record.epoch);
  m.wall_ms = wall_ms;
  return m;
}

RunResult prepare_run(const ExperimentConfig& config, const PreparedData& data) {
  RunResult result;
  result.hyper = resolve_hyper(config, data.shards);
  result.assumptions = assumption_check(std::span<const PartyShard>(data.shards), result.hyper.rho,
                                        result.hyper.lambda, loss_profile(result.hyper.objective(), data.shards.front().rows()));
  result.noise = noise_calibration(config, result.hyper);
  return result;
}

}  // namespace

RunResult run_local(const ExperimentConfig& config, const PreparedData& data) {
  RunResult result = prepare_run(config, data);
  Problem problem{data.shards, data.labels};
  std::unique_ptr<GaussianPerturber> perturber;
  if (result.noise) perturber = std::make_unique<GaussianPerturber>(config.privacy->seed, result.noise->sigma);

  const auto start = Clock::now();
  Engine engine(problem, result.hyper, perturber.get());
  result.trace = engine.run([&](const EngineState& state, const DiagnosticsRecord& record) {
    Evaluation test = test_metrics(data, data.test_labels.size() ? model_scores(data.test_blocks, state.x) : Vec());
    result.metrics.push_back(to_metrics(config, record, test, elapsed_ms(start)));
  });
  result.x = engine.state().x;
  return result;
}

RunResult run_coordinator(const ExperimentConfig& config, const PreparedData& data,
                          std::vector<std::unique_ptr<Channel>>& channels) {
  RunResult result = prepare_run(config, data);
  ProtocolOptions options{Millis(static_cast<long long>(config.io_timeout_seconds * 1000.0))};
  const auto start = Clock::now();
  result.trace = coordinator_serve(channels, data.labels, result.hyper, options,
                                   [&](const DiagnosticsRecord& record, const Vec& scores) {
                                     Evaluation test = test_metrics(data, scores);
                                     result.metrics.push_back(to_metrics(config, record, test, elapsed_ms(start)));
                                   });
  return result;
}

RunResult run_party(const ExperimentConfig& config, const PreparedData& data, Channel& channel) {
  if (!config.party_id) throw ConfigError("party_id: required for role party");
  RunResult result = prepare_run(config, data);
  const std::size_t m = *config.party_id - 1u;
  if (m >= data.shards.size()) throw ConfigError("party_id: out of range");
  PartyContext context;
  context.party_id = *config.party_id;
  context.shard = &data.shards[m];
  context.test_block = data.test_blocks[m].rows() > 0 ? &data.test_blocks[m] : nullptr;
  context.hyper = result.hyper;
  if (result.noise) {
    context.sigma = result.noise->sigma[m];
    context.noise_seed = config.privacy->seed;
  }
  ProtocolOptions options{Millis(static_cast<long long>(config.io_timeout_seconds * 1000.0))};
  auto outcome = party_serve(channel, context, options);
  result.x.push_back(outcome.x);
  return result;
}

namespace {

void ensure_parent(const std::string& path) {
  auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
}

void write_model(const std::string& path, const ExperimentConfig& config, const RunResult& result) {
  ensure_parent(path);
  nlohmann::json blocks = nlohmann::json::array();
  for (std::size_t k = 0; k < result.x.size(); ++k) {
    std::size_t party = config.role == Role::Party ? *config.party_id : k + 1;
    std::vector<double> values(result.x[k].data(), result.x[k].data() + result.x[k].size());
    blocks.push_back({{"party_id", party}, {"x", values}});
  }
  std::ofstream out(path);
  if (!out) throw Error("cannot write model file " + path);
  out << nlohmann::json{{"blocks", blocks}}.dump(2) << '\n';
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& config) {
  config.validate();
  PreparedData data = prepare_data(config);
  const Millis timeout(static_cast<long long>(config.io_timeout_seconds * 1000.0));

  RunResult result;
  switch (config.role) {
    case Role::LocalSim:
      result = run_local(config, data);
      break;
    case Role::Coordinator: {
      TcpListener listener(parse_endpoint(*config.listen));
      std::vector<std::unique_ptr<Channel>> channels;
      for (std::size_t m = 0; m < config.partition.parties(); ++m) channels.push_back(listener.accept(timeout));
      result = run_coordinator(config, data, channels);
      break;
    }
    case Role::Party: {
      auto channel = tcp_connect(parse_endpoint(*config.connect), timeout);
      result = run_party(config, data, *channel);
      break;
    }
  }

  if (config.role != Role::Party) {
    ensure_parent(config.output_csv);
    std::ofstream csv(config.output_csv);
    if (!csv) throw Error("cannot write metrics file " + config.output_csv);
    write_metrics_csv(csv, result.metrics);
  }
  write_manifest(config.manifest_path.value_or(config.output_csv + ".manifest.json"), config, result, data.inputs);
  if (config.model_path) write_model(*config.model_path, config, result);
  return result;
}

std::vector<SweepRow> noise_sweep(const ExperimentConfig& config, const PreparedData& data) {
  if (!config.privacy) throw ConfigError("privacy: required for a noise sweep");
  std::vector<SweepRow> rows;
  for (double k : config.sweep_multipliers) {
    for (std::size_t s = 0; s < config.sweep_seeds; ++s) {
      ExperimentConfig run = config;
      run.role = Role::LocalSim;
      run.hyper.seed = config.hyper.seed + s;
      run.privacy->seed = config.privacy->seed + s;
      run.privacy->sigma_multiplier = k;
      auto result = run_local(run, data);
      SweepRow row;
      row.multiplier = k;
      row.seed = run.privacy->seed;
      if (!result.metrics.empty()) {
        row.final_test_log_loss = result.metrics.back().test_log_loss;
        row.final_test_accuracy = result.metrics.back().test_accuracy;
        row.epsilon_spent = result.metrics.back().epsilon_spent;
      }
      rows.push_back(row);
    }
  }
  return rows;
}

void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows) {
  out << kSweepHeader << '\n';
  char line[256];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof(line), "%.17g,%llu,%.17g,%.17g,%.17g\n", r.multiplier,
                  static_cast<unsigned long long>(r.seed), r.final_test_log_loss, r.final_test_accuracy,
                  r.epsilon_spent);
    out << line;
  }
}

std::string git_blob_sha1(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path);
  const auto size = std::filesystem::file_size(path);
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha1(), nullptr) != 1) throw Error("SHA-1 unavailable");
  std::string header = "blob " + std::to_string(size);
  EVP_DigestUpdate(ctx.get(), header.data(), header.size() + 1);  // includes the NUL
  std::vector<char> buffer(1 << 16);
  while (in) {
    in.read(buffer.data(), static_cast<std::streamsize>(buffer.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buffer.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &length);
  std::ostringstream hex;
  for (unsigned int i = 0; i < length; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

void write_manifest(const std::string& path, const ExperimentConfig& config, const RunResult& result,
                    std::span<const std::string> inputs) {
  nlohmann::json files = nlohmann::json::array();
  for (const auto& input : inputs) files.push_back({{"path", input}, {"sha1", git_blob_sha1(input)}});

  nlohmann::json resolved = {{"rho", result.hyper.rho}, {"lambda", result.hyper.lambda}};
  if (result.hyper.ball_radius) resolved["ball_radius"] = *result.hyper.ball_radius;
  if (result.noise) resolved["sigma"] = result.noise->sigma;

  nlohmann::json parties = nlohmann::json::array();
  for (const auto& p : result.assumptions.parties)
    parties.push_back({{"sigma_min", p.sigma_min}, {"sigma_max", p.sigma_max}, {"gamma", p.gamma},
                       {"gamma_ok", p.gamma_ok}, {"full_rank", p.full_rank}});
  nlohmann::json assumptions = {{"gamma_ok", result.assumptions.gamma_ok},
                                {"curvature_ok", result.assumptions.curvature_ok},
                                {"rho_ge_l", result.assumptions.rho_ge_l},
                                {"full_rank", result.assumptions.full_rank},
                                {"parties", parties}};

  nlohmann::json manifest = {{"config", to_json(config)},
                             {"resolved", resolved},
                             {"assumptions", assumptions},
                             {"inputs", files},
                             {"epochs", result.trace.size()}};
  ensure_parent(path);
  std::ofstream out(path);
  if (!out) throw Error("cannot write manifest " + path);
  out << manifest.dump(2) << '\n';
}

}  // namespace vfl
