#pragma once

#include "vfl/dataset.hpp"

#include <cstddef>
#include <span>

namespace vfl {

enum class LossScaling {
  Sum,   // l(z) = sum_i log(1 + exp(-Y_i z_i))
  Mean,  // the same divided by N
};

struct ObjectiveConfig {
  double lambda = 0.0;
  LossScaling scaling = LossScaling::Sum;

  double loss_scale(std::size_t n) const {
    return scaling == LossScaling::Sum ? 1.0 : 1.0 / static_cast<double>(n);
  }
};

struct LossProfile {
  double lipschitz = 0.25;
  bool convex = true;
};

// log(1 + exp(t)) without overflow.
double log1pexp(double t);
// 1 / (1 + exp(-u)) without overflow.
double sigmoid(double u);

double loss_value(const Vec& z, const Vec& labels, double scale = 1.0);
Vec loss_grad(const Vec& z, const Vec& labels, double scale = 1.0);

// Gradient Lipschitz constant of the logistic loss: scale / 4.
double loss_lipschitz(const ObjectiveConfig& config, std::size_t n);
LossProfile loss_profile(const ObjectiveConfig& config, std::size_t n);

// R(x) = 1/2 ||x||^2.
double reg_value(const Vec& x);
Vec reg_grad(const Vec& x);
double reg_curvature();

// argmin_u  w * R(u) + 1/2 ||u - v||^2
Vec prox_reg(const Vec& v, double weight);

// l(sum_m D_m x_m) + lambda * sum_m R(x_m)
double full_objective(std::span<const PartyShard> shards, std::span<const Vec> xs, const Vec& labels,
                      const ObjectiveConfig& config);

}  // namespace vfl
