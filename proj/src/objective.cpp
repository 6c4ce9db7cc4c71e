#include "vfl/objective.hpp"

#include <cmath>

namespace vfl {
namespace {

void require_same_length(const Vec& z, const Vec& labels) {
  if (z.size() != labels.size())
    throw DimensionError("score vector has " + std::to_string(z.size()) + " entries, labels have " +
                         std::to_string(labels.size()));
}

}  // namespace

double log1pexp(double t) {
  if (t > 0.0) return t + std::log1p(std::exp(-t));
  return std::log1p(std::exp(t));
}

double sigmoid(double u) {
  if (u >= 0.0) return 1.0 / (1.0 + std::exp(-u));
  double e = std::exp(u);
  return e / (1.0 + e);
}

double loss_value(const Vec& z, const Vec& labels, double scale) {
  require_same_length(z, labels);
  double sum = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) sum += log1pexp(-labels[i] * z[i]);
  return scale * sum;
}

Vec loss_grad(const Vec& z, const Vec& labels, double scale) {
  require_same_length(z, labels);
  Vec g(z.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) g[i] = scale * (-labels[i] * sigmoid(-labels[i] * z[i]));
  return g;
}

double loss_lipschitz(const ObjectiveConfig& config, std::size_t n) { return config.loss_scale(n) * 0.25; }

LossProfile loss_profile(const ObjectiveConfig& config, std::size_t n) {
  return LossProfile{loss_lipschitz(config, n), true};
}

double reg_value(const Vec& x) { return 0.5 * x.squaredNorm(); }

Vec reg_grad(const Vec& x) { return x; }

double reg_curvature() { return 1.0; }

Vec prox_reg(const Vec& v, double weight) {
  if (weight < 0.0) throw Error("prox weight must be non-negative");
  return v / (1.0 + weight);
}

double full_objective(std::span<const PartyShard> shards, std::span<const Vec> xs, const Vec& labels,
                      const ObjectiveConfig& config) {
  if (shards.size() != xs.size()) throw DimensionError("one parameter block per shard expected");
  Vec scores = Vec::Zero(labels.size());
  double reg = 0.0;
  for (std::size_t m = 0; m < shards.size(); ++m) {
    if (static_cast<std::size_t>(xs[m].size()) != shards[m].width() ||
        static_cast<Eigen::Index>(shards[m].rows()) != labels.size())
      throw DimensionError("party " + std::to_string(m) + " block does not match its parameters");
    scores.noalias() += shards[m].block() * xs[m];
    reg += reg_value(xs[m]);
  }
  return loss_value(scores, labels, config.loss_scale(static_cast<std::size_t>(labels.size()))) +
         config.lambda * reg;
}

}  // namespace vfl
