#pragma once

#include "vfl/engine.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace vfl {

struct PrivacyParams {
  double epsilon = 1.0;        // per-iteration, in (0, 1]
  double delta = 1e-5;         // per-iteration, in (0, 1)
  double delta_prime = 1e-4;   // composition slack
  double b1 = 1.0;             // norm bound on x, y, z
  double c1 = 1.0;             // regularizer gradient bound
  std::uint64_t seed = 0;
  double sigma_multiplier = 1.0;  // scales the calibrated sigma (noise sweeps)

  void validate() const;
};

// 3 / (d_m rho) * (lambda c1 + (1 + M rho) b1)
double sensitivity_bound(double lambda, double c1, double b1, double rho, std::size_t parties, std::size_t width);

// sqrt(2 ln(1.25 / delta)) * sensitivity / epsilon
double calibrate_sigma(double sensitivity, double epsilon, double delta);

struct NoiseCalibration {
  std::vector<double> sensitivity;  // per party
  std::vector<double> sigma;        // per party, multiplier applied
};

NoiseCalibration calibrate(const PrivacyParams& params, const PartitionSpec& partition, double lambda, double rho);

// share + N(0, sigma^2 I). sigma = 0 returns the share without drawing.
Vec perturb_share(const Vec& share, double sigma, std::mt19937_64& rng);

struct PrivacyBudget {
  double epsilon = 0.0;
  double delta = 0.0;
};

// Composition over T releases:
//   eps' = sqrt(2 T ln(1/delta')) eps + T eps (e^eps - 1),  delta' + T delta.
PrivacyBudget total_budget(double epsilon, double delta, std::size_t iterations, double delta_prime);

// The noise stream of one party, seeded from (seed, party index).
class PartyNoise {
 public:
  PartyNoise(std::uint64_t seed, std::size_t party, double sigma);

  Vec apply(const Vec& share);
  double sigma() const { return sigma_; }

 private:
  std::mt19937_64 rng_;
  double sigma_;
};

class GaussianPerturber : public SharePerturber {
 public:
  GaussianPerturber(std::uint64_t seed, const std::vector<double>& sigmas);

  Vec perturb(std::size_t party, const Vec& share) override;

 private:
  std::vector<PartyNoise> streams_;
};

struct SensitivityProbe {
  std::size_t samples = 50;
  std::size_t width = 5;
  double lambda = 1.0;
  double rho = 1.0;
  std::size_t parties = 1;
  double b1 = 1.0;
  double column_change = 1.0;  // l2 norm of the replaced column's difference
};

// Largest ||D x - D' x'|| over random neighbouring pairs (D, D') that
// differ in one column, where x and x' are ball-constrained x-steps for the
// same dual and aggregate. D has unit-norm rows; ||y|| = b1 and
// ||c|| = M b1.
double empirical_sensitivity(const SensitivityProbe& probe, std::size_t trials, std::uint64_t seed);

}  // namespace vfl
