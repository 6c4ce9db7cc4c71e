#include "vfl/privacy.hpp"

#include <cmath>

namespace vfl {

void PrivacyParams::validate() const {
  if (!(epsilon > 0.0 && epsilon <= 1.0)) throw ConfigError("privacy.epsilon must lie in (0, 1]");
  if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("privacy.delta must lie in (0, 1)");
  if (!(delta_prime > 0.0 && delta_prime < 1.0)) throw ConfigError("privacy.delta_prime must lie in (0, 1)");
  if (!(b1 > 0.0)) throw ConfigError("privacy.b1 must be positive");
  if (!(c1 > 0.0)) throw ConfigError("privacy.c1 must be positive");
  if (!(sigma_multiplier >= 0.0)) throw ConfigError("privacy.sigma_multiplier must be non-negative");
}

double sensitivity_bound(double lambda, double c1, double b1, double rho, std::size_t parties, std::size_t width) {
  if (width == 0) throw Error("sensitivity bound needs d_m > 0");
  if (rho == 0.0) throw Error("sensitivity bound needs rho > 0");
  const double d = static_cast<double>(width);
  const double m = static_cast<double>(parties);
  return 3.0 / (d * rho) * (lambda * c1 + (1.0 + m * rho) * b1);
}

double calibrate_sigma(double sensitivity, double epsilon, double delta) {
  if (!(epsilon > 0.0 && epsilon <= 1.0)) throw Error("calibration requires epsilon in (0, 1]");
  if (!(delta > 0.0 && delta < 1.25)) throw Error("calibration requires delta in (0, 1.25)");
  return std::sqrt(2.0 * std::log(1.25 / delta)) * sensitivity / epsilon;
}

NoiseCalibration calibrate(const PrivacyParams& params, const PartitionSpec& partition, double lambda, double rho) {
  params.validate();
  NoiseCalibration out;
  for (auto width : partition.widths) {
    double s = sensitivity_bound(lambda, params.c1, params.b1, rho, partition.parties(), width);
    out.sensitivity.push_back(s);
    out.sigma.push_back(params.sigma_multiplier * calibrate_sigma(s, params.epsilon, params.delta));
  }
  return out;
}

Vec perturb_share(const Vec& share, double sigma, std::mt19937_64& rng) {
  if (sigma == 0.0) return share;
  std::normal_distribution<double> noise(0.0, sigma);
  Vec out = share;
  for (Eigen::Index i = 0; i < out.size(); ++i) out[i] += noise(rng);
  return out;
}

PrivacyBudget total_budget(double epsilon, double delta, std::size_t iterations, double delta_prime) {
  const double t = static_cast<double>(iterations);
  PrivacyBudget b;
  b.epsilon = std::sqrt(2.0 * t * std::log(1.0 / delta_prime)) * epsilon + t * epsilon * std::expm1(epsilon);
  b.delta = t * delta + delta_prime;
  return b;
}

namespace {

std::mt19937_64 party_stream(std::uint64_t seed, std::size_t party) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(party), static_cast<std::uint32_t>(std::uint64_t{party} >> 32)};
  return std::mt19937_64(seq);
}

Vec random_direction(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Vec v(static_cast<Eigen::Index>(n));
  do {
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = normal(rng);
  } while (v.norm() == 0.0);
  return v / v.norm();
}

}  // namespace

PartyNoise::PartyNoise(std::uint64_t seed, std::size_t party, double sigma)
    : rng_(party_stream(seed, party)), sigma_(sigma) {
  if (!(sigma >= 0.0)) throw Error("noise sigma must be non-negative");
}

Vec PartyNoise::apply(const Vec& share) { return perturb_share(share, sigma_, rng_); }

GaussianPerturber::GaussianPerturber(std::uint64_t seed, const std::vector<double>& sigmas) {
  streams_.reserve(sigmas.size());
  for (std::size_t m = 0; m < sigmas.size(); ++m) streams_.emplace_back(seed, m, sigmas[m]);
}

Vec GaussianPerturber::perturb(std::size_t party, const Vec& share) {
  if (party >= streams_.size()) throw Error("no noise stream for party " + std::to_string(party));
  return streams_[party].apply(share);
}

double empirical_sensitivity(const SensitivityProbe& probe, std::size_t trials, std::uint64_t seed) {
  if (probe.samples == 0 || probe.width == 0) throw Error("sensitivity probe needs N > 0 and d_m > 0");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, probe.width - 1);
  const auto n = static_cast<Eigen::Index>(probe.samples);
  const auto d = static_cast<Eigen::Index>(probe.width);

  double worst = 0.0;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    Mat block(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      Vec row = random_direction(probe.width, rng);
      block.row(i) = row.transpose();
    }
    Mat neighbour = block;
    neighbour.col(static_cast<Eigen::Index>(pick(rng))) += probe.column_change * random_direction(probe.samples, rng);

    Vec y = probe.b1 * random_direction(probe.samples, rng);
    Vec c = static_cast<double>(probe.parties) * probe.b1 * random_direction(probe.samples, rng);

    PartyShard a(0, std::move(block));
    PartyShard b(0, std::move(neighbour));
    Vec warm = Vec::Zero(d);
    Vec xa = XStepSolver(a, probe.lambda, probe.rho, probe.b1).solve(y, c, warm);
    Vec xb = XStepSolver(b, probe.lambda, probe.rho, probe.b1).solve(y, c, warm);
    worst = std::max(worst, (a.block() * xa - b.block() * xb).norm());
  }
  return worst;
}

}  // namespace vfl
