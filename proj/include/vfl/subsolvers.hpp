#pragma once

#include "vfl/dataset.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <memory>
#include <optional>

namespace vfl {

struct XStepOptions {
  std::size_t dense_limit = 4096;  // Cholesky up to this width, CG beyond
  double cg_tolerance = 1e-10;     // relative residual
  std::size_t cg_max_iterations = 100000;
  double ball_tolerance = 1e-8;
};

// Party subproblem
//   argmin_x  lambda/2 ||x||^2 + <y, D x> + rho/2 ||c + D x||^2   s.t. ||x|| <= b1
// where c = sum_{k != m} D_k x_k - z.
struct XStepInput {
  const PartyShard& shard;
  Vec x_prev;
  Vec others_minus_z;
  Vec dual;
  double rho = 1.0;
  double lambda = 0.0;
  std::optional<double> ball_radius;
};

// Holds the factorization of lambda I + rho G for one shard so repeated
// solves reuse it.
class XStepSolver {
 public:
  XStepSolver(const PartyShard& shard, double lambda, double rho, std::optional<double> ball_radius = {},
              XStepOptions options = {});

  Vec solve(const Vec& dual, const Vec& others_minus_z, const Vec& x_prev) const;

  // Right-hand side of the normal equations, -D^T (y + rho c).
  Vec rhs(const Vec& dual, const Vec& others_minus_z) const;

  const PartyShard& shard() const { return *shard_; }

 private:
  Vec solve_system(const Vec& rhs, double extra_shift, const Vec& warm) const;
  Vec project_to_ball(const Vec& rhs, const Vec& unconstrained) const;

  const PartyShard* shard_;
  double lambda_;
  double rho_;
  std::optional<double> ball_;
  XStepOptions options_;
  bool dense_;
  Eigen::LLT<Mat> llt_;
  // Eigendecomposition of G, only for the dense ball-constrained path.
  std::shared_ptr<Eigen::SelfAdjointEigenSolver<Mat>> eigen_;
};

Vec x_step(const XStepInput& input, const XStepOptions& options = {});

// Value of the x subproblem objective; used by tests and the descent checks.
double x_subproblem_value(const XStepInput& input, const Vec& x);

// Central subproblem, separable over samples:
//   argmin_z  scale * sum_i log(1 + exp(-Y_i z_i)) - <y, z> + rho/2 ||w - z||^2
// loss_scale = 0 drops the loss term (z = w + y / rho).
struct ZStepInput {
  Vec aggregate;
  Vec dual;
  double rho = 1.0;
  Vec labels;
  double loss_scale = 1.0;
};

struct ZStepOptions {
  double derivative_tolerance = 1e-10;
  std::size_t max_iterations = 100;
};

Vec z_step(const ZStepInput& input, const ZStepOptions& options = {});

// Scalar version used by z_step.
double z_step_scalar(double aggregate, double dual, double rho, double label, double loss_scale,
                     const ZStepOptions& options = {});

// Derivative of the scalar z objective.
double z_step_derivative(double z, double aggregate, double dual, double rho, double label, double loss_scale);

// y + rho (w - z)
Vec y_step(const Vec& y, double rho, const Vec& aggregate, const Vec& z);

}  // namespace vfl
