#include "vfl/config.hpp"

#include <filesystem>
#include <fstream>
#include <set>

namespace vfl {

using nlohmann::json;

std::string to_string(Role role) {
  switch (role) {
    case Role::LocalSim: return "local-sim";
    case Role::Coordinator: return "coordinator";
    case Role::Party: return "party";
  }
  return "local-sim";
}

Role parse_role(const std::string& text) {
  if (text == "local-sim") return Role::LocalSim;
  if (text == "coordinator") return Role::Coordinator;
  if (text == "party") return Role::Party;
  throw ConfigError("role: expected one of local-sim, coordinator, party, got '" + text + "'");
}

namespace {

class Reader {
 public:
  Reader(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) fail("expected an object");
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError((path_.empty() ? std::string("config") : path_) + ": " + what);
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) const { return node_.contains(key) && !node_.at(key).is_null(); }

  const json& raw(const std::string& key) const { return node_.at(key); }

  Reader child(const std::string& key) const { return Reader(node_.at(key), at(key)); }

  double number(const std::string& key) const {
    const json& v = node_.at(key);
    if (!v.is_number()) throw ConfigError(at(key) + ": expected a number");
    return v.get<double>();
  }

  std::uint64_t count(const std::string& key) const {
    const json& v = node_.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
      throw ConfigError(at(key) + ": expected a non-negative integer");
    return v.get<std::uint64_t>();
  }

  bool boolean(const std::string& key) const {
    const json& v = node_.at(key);
    if (!v.is_boolean()) throw ConfigError(at(key) + ": expected true or false");
    return v.get<bool>();
  }

  std::string string(const std::string& key) const {
    const json& v = node_.at(key);
    if (!v.is_string()) throw ConfigError(at(key) + ": expected a string");
    return v.get<std::string>();
  }

  void only(std::initializer_list<const char*> keys) const {
    std::set<std::string> allowed(keys.begin(), keys.end());
    for (auto it = node_.begin(); it != node_.end(); ++it)
      if (!allowed.count(it.key())) throw ConfigError(at(it.key()) + ": unknown field");
  }

 private:
  const json& node_;
  std::string path_;
};

std::string resolve(const std::string& path, const std::string& base) {
  if (path.empty() || base.empty() || std::filesystem::path(path).is_absolute()) return path;
  return (std::filesystem::path(base) / path).lexically_normal().string();
}

}  // namespace

void ExperimentConfig::validate() const {
  if (data.train_path.empty()) throw ConfigError("data.train: required");
  if (partition.widths.empty()) throw ConfigError("partition: at least one party required");
  for (std::size_t m = 0; m < partition.widths.size(); ++m)
    if (partition.widths[m] == 0) throw ConfigError("partition[" + std::to_string(m) + "]: width must be positive");
  if (data.feature_subset && !full_data) {
    if (*data.feature_subset != partition.total())
      throw ConfigError("data.feature_subset: " + std::to_string(*data.feature_subset) +
                        " does not match the partition total " + std::to_string(partition.total()));
  } else if (data.features && *data.features != partition.total()) {
    throw ConfigError("data.features: " + std::to_string(*data.features) + " does not match the partition total " +
                      std::to_string(partition.total()));
  }
  try {
    hyper.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("hyper: ") + e.what());
  }
  if (privacy) privacy->validate();
  if (role == Role::Party) {
    if (!party_id) throw ConfigError("party_id: required for role party");
    if (*party_id == 0 || *party_id > partition.parties())
      throw ConfigError("party_id: must lie in 1.." + std::to_string(partition.parties()));
    if (!connect) throw ConfigError("connect: required for role party");
  }
  if (role == Role::Coordinator && !listen) throw ConfigError("listen: required for role coordinator");
  if (!(io_timeout_seconds > 0.0)) throw ConfigError("io_timeout_seconds: must be positive");
  if (sweep_seeds == 0) throw ConfigError("sweep.seeds: must be positive");
  for (double k : sweep_multipliers)
    if (!(k >= 0.0)) throw ConfigError("sweep.multipliers: entries must be non-negative");
  if (data.requires_full_data && !full_data)
    throw ConfigError("data.requires_full_data: this experiment is opt-in; pass --full-data");
}

ExperimentConfig parse_config(const json& document, const std::string& base_dir) {
  ExperimentConfig c;
  Reader root(document, "");
  root.only({"data", "partition", "hyper", "privacy", "role", "party_id", "listen", "connect", "output",
             "manifest", "model", "io_timeout_seconds", "sweep", "baseline", "$schema"});

  if (!root.has("data")) root.fail("data: required");
  Reader data = root.child("data");
  data.only({"train", "test", "features", "train_rows", "feature_subset", "normalize_rows", "requires_full_data"});
  if (!data.has("train")) throw ConfigError("data.train: required");
  c.data.train_path = resolve(data.string("train"), base_dir);
  if (data.has("test")) c.data.test_path = resolve(data.string("test"), base_dir);
  if (data.has("features")) c.data.features = data.count("features");
  if (data.has("train_rows")) c.data.train_rows = data.count("train_rows");
  if (data.has("feature_subset")) c.data.feature_subset = data.count("feature_subset");
  if (data.has("normalize_rows")) {
    const json& v = data.raw("normalize_rows");
    if (v.is_boolean()) {
      c.data.normalize_rows = v.get<bool>() ? RowNormalization::Full : RowNormalization::None;
    } else {
      auto mode = data.string("normalize_rows");
      if (mode == "none") c.data.normalize_rows = RowNormalization::None;
      else if (mode == "full") c.data.normalize_rows = RowNormalization::Full;
      else if (mode == "shard") c.data.normalize_rows = RowNormalization::Shard;
      else throw ConfigError("data.normalize_rows: expected \"none\", \"full\" or \"shard\"");
    }
  }
  if (data.has("requires_full_data")) c.data.requires_full_data = data.boolean("requires_full_data");

  if (!root.has("partition")) root.fail("partition: required");
  const json& partition = root.raw("partition");
  if (!partition.is_array()) throw ConfigError("partition: expected an array of widths");
  for (std::size_t m = 0; m < partition.size(); ++m) {
    if (!partition[m].is_number_unsigned())
      throw ConfigError("partition[" + std::to_string(m) + "]: expected a positive integer");
    c.partition.widths.push_back(partition[m].get<std::size_t>());
  }

  if (root.has("hyper")) {
    Reader h = root.child("hyper");
    h.only({"rho", "lambda", "epochs", "lyapunov_tol", "early_stop", "seed", "loss_scaling", "parallel"});
    if (h.has("rho")) {
      if (h.raw("rho").is_string()) {
        if (h.string("rho") != "auto") throw ConfigError("hyper.rho: expected a number or \"auto\"");
        c.rho_auto = true;
      } else {
        c.hyper.rho = h.number("rho");
      }
    }
    if (h.has("lambda")) {
      if (h.raw("lambda").is_string()) {
        auto rule = h.string("lambda");
        if (rule == "default") c.lambda_rule = LambdaRule::Default;
        else if (rule == "feasible") c.lambda_rule = LambdaRule::Feasible;
        else throw ConfigError("hyper.lambda: expected a number, \"default\" or \"feasible\"");
      } else {
        c.hyper.lambda = h.number("lambda");
        c.lambda_rule = LambdaRule::Fixed;
      }
    }
    if (h.has("epochs")) c.hyper.max_epochs = h.count("epochs");
    if (h.has("lyapunov_tol")) c.hyper.lyapunov_tol = h.number("lyapunov_tol");
    if (h.has("early_stop")) c.hyper.early_stop = h.boolean("early_stop");
    if (h.has("seed")) c.hyper.seed = h.count("seed");
    if (h.has("parallel")) c.hyper.parallel = h.boolean("parallel");
    if (h.has("loss_scaling")) {
      auto s = h.string("loss_scaling");
      if (s == "sum") c.hyper.scaling = LossScaling::Sum;
      else if (s == "mean") c.hyper.scaling = LossScaling::Mean;
      else throw ConfigError("hyper.loss_scaling: expected \"sum\" or \"mean\"");
    }
  }

  if (root.has("privacy")) {
    Reader p = root.child("privacy");
    p.only({"epsilon", "delta", "delta_prime", "b1", "c1", "seed", "sigma_multiplier", "enforce_ball"});
    PrivacyParams params;
    if (p.has("epsilon")) params.epsilon = p.number("epsilon");
    if (p.has("delta")) params.delta = p.number("delta");
    if (p.has("delta_prime")) params.delta_prime = p.number("delta_prime");
    if (p.has("b1")) params.b1 = p.number("b1");
    if (p.has("c1")) params.c1 = p.number("c1");
    params.seed = p.has("seed") ? p.count("seed") : c.hyper.seed;
    if (p.has("sigma_multiplier")) params.sigma_multiplier = p.number("sigma_multiplier");
    if (p.has("enforce_ball")) c.enforce_ball = p.boolean("enforce_ball");
    c.privacy = params;
  }

  if (root.has("role")) c.role = parse_role(root.string("role"));
  if (root.has("party_id")) {
    auto id = root.count("party_id");
    if (id > 65535) throw ConfigError("party_id: out of range");
    c.party_id = static_cast<std::uint16_t>(id);
  }
  if (root.has("listen")) c.listen = root.string("listen");
  if (root.has("connect")) c.connect = root.string("connect");
  if (root.has("output")) c.output_csv = root.string("output");
  if (root.has("manifest")) c.manifest_path = root.string("manifest");
  if (root.has("model")) c.model_path = root.string("model");
  if (root.has("io_timeout_seconds")) c.io_timeout_seconds = root.number("io_timeout_seconds");

  if (root.has("sweep")) {
    Reader s = root.child("sweep");
    s.only({"multipliers", "seeds"});
    if (s.has("multipliers")) {
      const json& list = s.raw("multipliers");
      if (!list.is_array()) throw ConfigError("sweep.multipliers: expected an array");
      c.sweep_multipliers.clear();
      for (std::size_t i = 0; i < list.size(); ++i) {
        if (!list[i].is_number()) throw ConfigError("sweep.multipliers[" + std::to_string(i) + "]: expected a number");
        c.sweep_multipliers.push_back(list[i].get<double>());
      }
    }
    if (s.has("seeds")) c.sweep_seeds = s.count("seeds");
  }

  if (root.has("baseline")) {
    Reader b = root.child("baseline");
    b.only({"max_steps", "gradient_tolerance"});
    if (b.has("max_steps")) c.baseline.max_steps = b.count("max_steps");
    if (b.has("gradient_tolerance")) c.baseline.gradient_tolerance = b.number("gradient_tolerance");
  }
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  json document;
  try {
    document = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  auto base = std::filesystem::path(path).parent_path().string();
  return parse_config(document, base);
}

json to_json(const ExperimentConfig& c) {
  const char* normalization = c.data.normalize_rows == RowNormalization::Full    ? "full"
                              : c.data.normalize_rows == RowNormalization::Shard ? "shard"
                                                                                 : "none";
  json data = {{"train", c.data.train_path}, {"normalize_rows", normalization}};
  if (!c.data.test_path.empty()) data["test"] = c.data.test_path;
  if (c.data.features) data["features"] = *c.data.features;
  if (c.data.train_rows) data["train_rows"] = *c.data.train_rows;
  if (c.data.feature_subset) data["feature_subset"] = *c.data.feature_subset;
  if (c.data.requires_full_data) data["requires_full_data"] = true;

  json hyper = {{"epochs", c.hyper.max_epochs},
                {"lyapunov_tol", c.hyper.lyapunov_tol},
                {"early_stop", c.hyper.early_stop},
                {"seed", c.hyper.seed},
                {"parallel", c.hyper.parallel},
                {"loss_scaling", c.hyper.scaling == LossScaling::Sum ? "sum" : "mean"}};
  if (c.rho_auto) hyper["rho"] = "auto";
  else hyper["rho"] = c.hyper.rho;
  switch (c.lambda_rule) {
    case LambdaRule::Fixed: hyper["lambda"] = c.hyper.lambda; break;
    case LambdaRule::Default: hyper["lambda"] = "default"; break;
    case LambdaRule::Feasible: hyper["lambda"] = "feasible"; break;
  }

  json out = {{"data", data},
              {"partition", c.partition.widths},
              {"hyper", hyper},
              {"role", to_string(c.role)},
              {"output", c.output_csv},
              {"io_timeout_seconds", c.io_timeout_seconds},
              {"sweep", {{"multipliers", c.sweep_multipliers}, {"seeds", c.sweep_seeds}}},
              {"baseline",
               {{"max_steps", c.baseline.max_steps}, {"gradient_tolerance", c.baseline.gradient_tolerance}}}};
  if (c.privacy) {
    const auto& p = *c.privacy;
    out["privacy"] = {{"epsilon", p.epsilon}, {"delta", p.delta},   {"delta_prime", p.delta_prime},
                      {"b1", p.b1},           {"c1", p.c1},         {"seed", p.seed},
                      {"sigma_multiplier", p.sigma_multiplier},     {"enforce_ball", c.enforce_ball}};
  }
  if (c.party_id) out["party_id"] = *c.party_id;
  if (c.listen) out["listen"] = *c.listen;
  if (c.connect) out["connect"] = *c.connect;
  if (c.manifest_path) out["manifest"] = *c.manifest_path;
  if (c.model_path) out["model"] = *c.model_path;
  return out;
}

}  // namespace vfl
