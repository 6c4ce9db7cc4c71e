#include "support.hpp"

#include "vfl/objective.hpp"
#include "vfl/subsolvers.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>

using namespace vfl;
using vfl::test::random_matrix;
using vfl::test::random_vector;

namespace {

Vec subproblem_gradient(const PartyShard& shard, const Vec& x, const Vec& y, const Vec& c, double rho, double lambda) {
  Vec share = shard.block() * x;
  Vec inner = y + rho * (c + share);
  Vec g = lambda * x + shard.block().transpose() * inner;
  return g;
}

// Projected gradient descent on the ball, run to convergence.
Vec projected_gradient_oracle(const PartyShard& shard, const Vec& y, const Vec& c, double rho, double lambda,
                              double radius) {
  const double step = 1.0 / (lambda + rho * shard.extremes().sigma_max);
  Vec x = Vec::Zero(static_cast<Eigen::Index>(shard.width()));
  for (int it = 0; it < 200000; ++it) {
    Vec next = x - step * subproblem_gradient(shard, x, y, c, rho, lambda);
    if (next.norm() > radius) next *= radius / next.norm();
    if ((next - x).norm() <= 1e-14) return next;
    x = next;
  }
  return x;
}

}  // namespace

TEST_SUITE("subsolvers") {
  TEST_CASE("x-step examples") {
    Mat d(2, 1);
    d << 1, 0;
    PartyShard shard(0, d);
    Vec zero = Vec::Zero(2);
    XStepInput in{shard, Vec::Zero(1), zero, zero, 1.0, 1.0, {}};
    CHECK(x_step(in)[0] == 0.0);
    in.dual = Vec((Vec(2) << 1, 0).finished());
    CHECK(x_step(in)[0] == doctest::Approx(-0.5).epsilon(1e-15));
  }

  TEST_CASE("x-step optimality on random instances") {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 10; ++trial) {
      PartyShard shard(0, random_matrix(20, 6, rng));
      Vec y = random_vector(20, rng), c = random_vector(20, rng);
      const double rho = 0.5 + trial, lambda = 0.1 * trial;
      XStepInput in{shard, Vec::Zero(6), c, y, rho, lambda, {}};
      Vec x = x_step(in);
      CHECK(subproblem_gradient(shard, x, y, c, rho, lambda).norm() <= 1e-8);
      XStepSolver solver(shard, lambda, rho);
      Vec rhs = solver.rhs(y, c);
      Vec residual = (lambda * Mat::Identity(6, 6) + rho * shard.gram()) * x - rhs;
      CHECK(residual.norm() <= 1e-8 * (1.0 + rhs.norm()));

      XStepOptions cg;
      cg.dense_limit = 0;
      Vec x_cg = x_step(in, cg);
      CHECK((x_cg - x).norm() <= 1e-8 * (1.0 + x.norm()));
    }
  }

  TEST_CASE("singular x-step names the rank assumption") {
    Mat d(3, 2);
    d << 1, 1, 2, 2, 3, 3;
    PartyShard shard(4, d);
    try {
      XStepSolver solver(shard, 0.0, 1.0);
      FAIL("expected a solver error");
    } catch (const SolverError& e) {
      CHECK(std::string(e.what()).find("full column rank") != std::string::npos);
      CHECK(std::string(e.what()).find("party 4") != std::string::npos);
    }
    CHECK_NOTHROW(XStepSolver(shard, 1e-3, 1.0));
  }

  TEST_CASE("ball-constrained x-step") {
    std::mt19937_64 rng(22);
    for (int trial = 0; trial < 6; ++trial) {
      PartyShard shard(0, random_matrix(15, 4, rng));
      Vec y = 3.0 * random_vector(15, rng), c = 3.0 * random_vector(15, rng);
      const double rho = 1.0, lambda = 0.5;
      XStepInput free{shard, Vec::Zero(4), c, y, rho, lambda, {}};
      Vec unconstrained = x_step(free);

      XStepInput tight = free;
      tight.ball_radius = 0.5 * unconstrained.norm();
      Vec x = x_step(tight);
      CHECK(x.norm() <= *tight.ball_radius + 1e-8);
      Vec oracle = projected_gradient_oracle(shard, y, c, rho, lambda, *tight.ball_radius);
      CHECK((x - oracle).norm() <= 1e-6);
      const double best = x_subproblem_value(tight, oracle);
      CHECK(x_subproblem_value(tight, x) <= best + 1e-7 * (1.0 + std::abs(best)));

      XStepOptions cg;
      cg.dense_limit = 0;
      CHECK((x_step(tight, cg) - x).norm() <= 1e-6);

      XStepInput loose = free;
      loose.ball_radius = 2.0 * unconstrained.norm();
      Vec inside = x_step(loose);
      CHECK(std::memcmp(inside.data(), unconstrained.data(), sizeof(double) * 4) == 0);
    }
  }

  TEST_CASE("z-step without the loss") {
    std::mt19937_64 rng(23);
    Vec w = random_vector(5, rng), y = random_vector(5, rng);
    Vec z = z_step(ZStepInput{w, y, 2.0, Vec::Ones(5), 0.0});
    for (Eigen::Index i = 0; i < 5; ++i) CHECK(z[i] == w[i] + y[i] / 2.0);
  }

  TEST_CASE("z-step scalar root") {
    // Bisection oracle for z = sigmoid(-z).
    double lo = 0.0, hi = 1.0;
    for (int it = 0; it < 200; ++it) {
      double mid = 0.5 * (lo + hi);
      if (mid - 1.0 / (1.0 + std::exp(mid)) > 0) {
        hi = mid;
      } else {
        lo = mid;
      }
    }
    double z = z_step_scalar(0.0, 0.0, 1.0, 1.0, 1.0);
    CHECK(std::abs(z - 0.5 * (lo + hi)) <= 1e-10);
    CHECK(z == doctest::Approx(0.4011).epsilon(1e-4));
  }

  TEST_CASE("z-step with a saturated bracket endpoint") {
    // hi = w + (y + 1) / rho lies deep in the saturated region, where the
    // derivative is zero up to rounding.
    for (double y : {-2.5, -1.7, -3.1}) {
      for (double w : {0.0, 4.3, -7.9}) {
        double z = z_step_scalar(w, y, 0.01, 1.0, 1.0);
        CHECK(std::abs(z_step_derivative(z, w, y, 0.01, 1.0, 1.0)) <= 1e-9);
        z = z_step_scalar(w, -y, 0.01, -1.0, 1.0);
        CHECK(std::abs(z_step_derivative(z, w, -y, 0.01, -1.0, 1.0)) <= 1e-9);
      }
    }
  }

  TEST_CASE("z-step with a huge penalty") {
    std::mt19937_64 rng(24);
    Vec w = random_vector(8, rng), y = random_vector(8, rng);
    Vec labels = test::random_labels(8, rng);
    const double rho = 1e6;
    Vec z = z_step(ZStepInput{w, y, rho, labels, 1.0});
    Vec quad = w + y / rho;
    CHECK((z - quad).lpNorm<Eigen::Infinity>() <= 1e-5);
  }

  TEST_CASE("z-step optimality and the dual identity") {
    std::mt19937_64 rng(25);
    for (int trial = 0; trial < 20; ++trial) {
      const double rho = std::pow(10.0, trial % 5 - 2);
      Vec w = 5.0 * random_vector(30, rng), y = random_vector(30, rng);
      Vec labels = test::random_labels(30, rng);
      const double scale = trial % 2 ? 1.0 : 1.0 / 30.0;
      Vec z = z_step(ZStepInput{w, y, rho, labels, scale});
      for (Eigen::Index i = 0; i < 30; ++i) CHECK(std::abs(z_step_derivative(z[i], w[i], y[i], rho, labels[i], scale)) <= 1e-9);
      Vec y_next = y_step(y, rho, w, z);
      CHECK((loss_grad(z, labels, scale) - y_next).lpNorm<Eigen::Infinity>() <= 1e-8);
    }
  }

  TEST_CASE("y-step") {
    Vec y = Vec::Constant(1, 0.0), w = Vec::Constant(1, 1.5), z = Vec::Constant(1, 1.0);
    CHECK(y_step(y, 2.0, w, z)[0] == 1.0);
    Vec y3 = Vec::Constant(3, 0.7), same(3);
    same << 1, 2, 3;
    CHECK(y_step(y3, 5.0, same, same) == y3);

    std::mt19937_64 rng(26);
    Vec a = random_vector(9, rng), b = random_vector(9, rng), c = random_vector(9, rng);
    Vec out = y_step(a, 0.37, b, c);
    for (Eigen::Index i = 0; i < 9; ++i) CHECK(test::bitwise_equal(out[i], a[i] + 0.37 * (b[i] - c[i])));
    CHECK_THROWS_AS(y_step(a, 1.0, Vec::Zero(2), c), DimensionError);
  }
}
