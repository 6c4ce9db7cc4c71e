#include "vfl/subsolvers.hpp"

#include "vfl/objective.hpp"

#include <cmath>
#include <limits>

namespace vfl {
namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

std::string singular_message(const PartyShard& shard) {
  return "x-step system for party " + std::to_string(shard.party_id()) +
         " is singular: lambda = 0 and the block is not of full column rank (full column rank assumption "
         "violated); use lambda > 0";
}

}  // namespace

XStepSolver::XStepSolver(const PartyShard& shard, double lambda, double rho, std::optional<double> ball_radius,
                         XStepOptions options)
    : shard_(&shard),
      lambda_(lambda),
      rho_(rho),
      ball_(ball_radius),
      options_(options),
      dense_(shard.width() <= options.dense_limit) {
  if (!(rho > 0.0)) throw Error("rho must be positive");
  if (!(lambda >= 0.0)) throw Error("lambda must be non-negative");
  if (ball_ && !(*ball_ > 0.0)) throw Error("ball radius must be positive");
  if (lambda == 0.0) {
    auto ext = shard.extremes();
    if (!(ext.sigma_min > 1e-12 * std::max(ext.sigma_max, 1.0))) throw SolverError(singular_message(shard));
  }
  if (dense_) {
    Mat system = rho * shard.gram();
    system.diagonal().array() += lambda;
    llt_.compute(system);
    if (llt_.info() != Eigen::Success) throw SolverError(singular_message(shard));
    if (ball_) eigen_ = std::make_shared<Eigen::SelfAdjointEigenSolver<Mat>>(shard.gram());
  }
}

Vec XStepSolver::rhs(const Vec& dual, const Vec& others_minus_z) const {
  const auto n = static_cast<Eigen::Index>(shard_->rows());
  require(dual.size() == n && others_minus_z.size() == n, "x-step vectors must have one entry per sample");
  Vec combined = dual + rho_ * others_minus_z;
  Vec out = -(shard_->block().transpose() * combined);
  return out;
}

Vec XStepSolver::solve_system(const Vec& rhs, double extra_shift, const Vec& warm) const {
  if (dense_ && extra_shift == 0.0) return llt_.solve(rhs);

  // Conjugate gradients on ((lambda + shift) I + rho G) x = rhs.
  const Mat& gram = shard_->gram();
  const double diag = lambda_ + extra_shift;
  auto apply = [&](const Vec& v) -> Vec { return diag * v + rho_ * (gram * v); };
  Vec x = warm.size() == rhs.size() ? warm : Vec::Zero(rhs.size());
  Vec r = rhs - apply(x);
  const double target = options_.cg_tolerance * std::max(rhs.norm(), std::numeric_limits<double>::min());
  if (r.norm() <= target) return x;
  Vec p = r;
  double rr = r.squaredNorm();
  for (std::size_t it = 0; it < options_.cg_max_iterations; ++it) {
    Vec ap = apply(p);
    double curvature = p.dot(ap);
    if (!(curvature > 0.0)) throw SolverError(singular_message(*shard_));
    double alpha = rr / curvature;
    x += alpha * p;
    r -= alpha * ap;
    double rr_next = r.squaredNorm();
    if (std::sqrt(rr_next) <= target) return x;
    p = r + (rr_next / rr) * p;
    rr = rr_next;
  }
  throw SolverError("conjugate gradients did not reach residual " + std::to_string(options_.cg_tolerance) +
                    " for party " + std::to_string(shard_->party_id()));
}

Vec XStepSolver::project_to_ball(const Vec& rhs, const Vec& unconstrained) const {
  // Solve ((lambda + nu) I + rho G) x = rhs for the multiplier nu >= 0 with
  // ||x(nu)|| = b1; ||x(nu)|| is decreasing in nu.
  const double radius = *ball_;
  Vec r;
  Vec denom_base;
  if (eigen_) {
    r = eigen_->eigenvectors().transpose() * rhs;
    denom_base = (rho_ * eigen_->eigenvalues().array() + lambda_).matrix();
  }
  auto solve_at = [&](double nu, const Vec& warm) -> Vec {
    if (eigen_) {
      Vec scaled = (r.array() / (denom_base.array() + nu)).matrix();
      return eigen_->eigenvectors() * scaled;
    }
    return solve_system(rhs, nu, warm);
  };

  double lo = 0.0;
  double hi = rhs.norm() / radius;
  Vec x_hi = solve_at(hi, unconstrained);
  Vec x_best = x_hi;
  for (int it = 0; it < 200; ++it) {
    double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    Vec x_mid = solve_at(mid, x_best);
    double norm = x_mid.norm();
    if (std::abs(norm - radius) <= options_.ball_tolerance) return x_mid;
    if (norm > radius) {
      lo = mid;
    } else {
      hi = mid;
      x_best = std::move(x_mid);
    }
  }
  return x_best;
}

Vec XStepSolver::solve(const Vec& dual, const Vec& others_minus_z, const Vec& x_prev) const {
  Vec b = rhs(dual, others_minus_z);
  Vec x = solve_system(b, 0.0, x_prev);
  if (ball_ && x.norm() > *ball_) return project_to_ball(b, x);
  return x;
}

Vec x_step(const XStepInput& input, const XStepOptions& options) {
  XStepSolver solver(input.shard, input.lambda, input.rho, input.ball_radius, options);
  return solver.solve(input.dual, input.others_minus_z, input.x_prev);
}

double x_subproblem_value(const XStepInput& input, const Vec& x) {
  Vec share = input.shard.block() * x;
  return input.lambda * reg_value(x) + input.dual.dot(share) +
         0.5 * input.rho * (input.others_minus_z + share).squaredNorm();
}

double z_step_derivative(double z, double aggregate, double dual, double rho, double label, double loss_scale) {
  double loss_slope = loss_scale == 0.0 ? 0.0 : loss_scale * (-label * sigmoid(-label * z));
  return loss_slope - dual + rho * (z - aggregate);
}

double z_step_scalar(double aggregate, double dual, double rho, double label, double loss_scale,
                     const ZStepOptions& options) {
  if (!(rho > 0.0)) throw Error("rho must be positive");
  double z = aggregate + dual / rho;
  if (loss_scale == 0.0) return z;

  // The loss slope lies in (-scale, scale), which brackets the root. Where
  // the sigmoid saturates the endpoint derivative is zero up to rounding, so
  // the bracket is widened until the signs are strict.
  double lo = aggregate + (dual - loss_scale) / rho;
  double hi = aggregate + (dual + loss_scale) / rho;
  double widen = std::max(hi - lo, 1e-300);
  for (int k = 0; k < 64 && !(z_step_derivative(lo, aggregate, dual, rho, label, loss_scale) <= 0.0); ++k) {
    lo -= widen;
    widen *= 2.0;
  }
  widen = std::max(hi - lo, 1e-300);
  for (int k = 0; k < 64 && !(z_step_derivative(hi, aggregate, dual, rho, label, loss_scale) >= 0.0); ++k) {
    hi += widen;
    widen *= 2.0;
  }
  if (!(z_step_derivative(lo, aggregate, dual, rho, label, loss_scale) <= 0.0) ||
      !(z_step_derivative(hi, aggregate, dual, rho, label, loss_scale) >= 0.0))
    throw SolverError("z-step bracket does not contain a root");

  for (std::size_t it = 0; it < options.max_iterations; ++it) {
    double d = z_step_derivative(z, aggregate, dual, rho, label, loss_scale);
    if (std::abs(d) <= options.derivative_tolerance) return z;
    if (d > 0.0) {
      hi = z;
    } else {
      lo = z;
    }
    double width = hi - lo;
    if (width <= 4.0 * std::numeric_limits<double>::epsilon() * std::max({std::abs(lo), std::abs(hi), 1.0}))
      return z;
    double s = sigmoid(label * z);
    double curvature = loss_scale * s * (1.0 - s) + rho;
    double next = z - d / curvature;
    z = (next > lo && next < hi) ? next : 0.5 * (lo + hi);
  }
  throw SolverError("z-step did not converge");
}

Vec z_step(const ZStepInput& input, const ZStepOptions& options) {
  const auto n = input.aggregate.size();
  require(input.dual.size() == n && input.labels.size() == n, "z-step vectors must have equal length");
  Vec z(n);
  for (Eigen::Index i = 0; i < n; ++i)
    z[i] = z_step_scalar(input.aggregate[i], input.dual[i], input.rho, input.labels[i], input.loss_scale, options);
  return z;
}

Vec y_step(const Vec& y, double rho, const Vec& aggregate, const Vec& z) {
  require(y.size() == aggregate.size() && y.size() == z.size(), "y-step vectors must have equal length");
  Vec out = y + rho * (aggregate - z);
  return out;
}

}  // namespace vfl
