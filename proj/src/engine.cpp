#include "vfl/engine.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <limits>
#include <numeric>
#include <random>

namespace vfl {

void HyperParams::validate() const {
  if (!(rho > 0.0)) throw ConfigError("rho must be positive");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
  if (!(lyapunov_tol > 0.0)) throw ConfigError("lyapunov_tol must be positive");
  if (ball_radius && !(*ball_radius > 0.0)) throw ConfigError("ball radius must be positive");
}

void Problem::validate() const {
  if (shards.empty()) throw DimensionError("problem has no parties");
  for (const auto& shard : shards)
    if (static_cast<Eigen::Index>(shard.rows()) != labels.size())
      throw DimensionError("party " + std::to_string(shard.party_id()) + " has " + std::to_string(shard.rows()) +
                           " rows, expected " + std::to_string(labels.size()));
}

double StationarityResiduals::max() const {
  return std::max({x_condition, x_variational, dual_condition, primal_condition});
}

EngineState init_state(std::span<const PartyShard> shards) {
  EngineState state;
  const auto n = shards.empty() ? Eigen::Index{0} : static_cast<Eigen::Index>(shards.front().rows());
  for (const auto& shard : shards) {
    state.x.push_back(Vec::Zero(static_cast<Eigen::Index>(shard.width())));
    state.shares.push_back(Vec::Zero(n));
    state.released.push_back(Vec::Zero(n));
  }
  state.z = Vec::Zero(n);
  state.y = Vec::Zero(n);
  state.aggregate = Vec::Zero(n);
  state.residual = Vec::Zero(n);
  return state;
}

Vec others_minus_z(const Vec& residual, const Vec& own_release) {
  Vec c = residual - own_release;
  return c;
}

Vec sum_shares(std::span<const Vec> released) {
  if (released.empty()) throw DimensionError("no shares to sum");
  Vec sum = released[0];
  for (std::size_t m = 1; m < released.size(); ++m) {
    if (released[m].size() != sum.size()) throw DimensionError("shares differ in length");
    sum += released[m];
  }
  return sum;
}

CentralUpdate central_update(const Vec& y, std::span<const Vec> released, const Vec& labels,
                             const HyperParams& hyper) {
  CentralUpdate out;
  out.aggregate = sum_shares(released);
  const double scale = hyper.objective().loss_scale(static_cast<std::size_t>(labels.size()));
  out.z = z_step(ZStepInput{out.aggregate, y, hyper.rho, labels, scale});
  out.y = y_step(y, hyper.rho, out.aggregate, out.z);
  out.residual = out.aggregate - out.z;
  return out;
}

PartyTerms party_terms(const PartyShard& shard, const Vec& x, const Vec& residual, const Vec& y,
                       const HyperParams& hyper) {
  PartyTerms terms;
  terms.reg = reg_value(x);

  Vec coupled = y + hyper.rho * residual;
  Vec grad = shard.block().transpose() * coupled;
  if (hyper.branch == RegularizerBranch::Convex) {
    Vec step = x - grad;
    terms.gradient_map_sq = (x - prox_reg(step, hyper.lambda)).squaredNorm();
  } else {
    terms.gradient_map_sq = (hyper.lambda * reg_grad(x) + grad).squaredNorm();
  }

  Vec dual_grad = shard.block().transpose() * y;
  Vec dual_step = x - dual_grad;
  terms.stationarity_map_sq = (x - prox_reg(dual_step, hyper.lambda)).squaredNorm();
  return terms;
}

DiagnosticsRecord assemble_diagnostics(std::size_t epoch, const Vec& z, const Vec& y, const Vec& aggregate,
                                       const Vec& residual, const Vec& labels, const HyperParams& hyper,
                                       std::span<const PartyTerms> parties) {
  const double scale = hyper.objective().loss_scale(static_cast<std::size_t>(labels.size()));
  double reg_total = 0.0;
  double x_terms = 0.0;
  double stationarity_sq = 0.0;
  for (const auto& p : parties) {
    reg_total += p.reg;
    x_terms += p.gradient_map_sq;
    stationarity_sq += p.stationarity_map_sq;
  }

  Vec grad_l = loss_grad(z, labels, scale);
  Vec dual_gap = grad_l - y;
  Vec grad_z = dual_gap - hyper.rho * residual;
  const double residual_sq = residual.squaredNorm();

  DiagnosticsRecord r;
  r.epoch = epoch;
  r.objective = loss_value(aggregate, labels, scale) + hyper.lambda * reg_total;
  r.lagrangian = loss_value(z, labels, scale) + hyper.lambda * reg_total + y.dot(residual) +
                 0.5 * hyper.rho * residual_sq;
  r.primal_residual = std::sqrt(residual_sq);
  r.lyapunov = x_terms + grad_z.squaredNorm() + residual_sq;
  if (hyper.branch == RegularizerBranch::Convex) r.residuals.x_condition = std::sqrt(stationarity_sq);
  r.residuals.dual_condition = dual_gap.norm();
  r.residuals.primal_condition = r.primal_residual;
  r.stationarity = r.residuals.max();
  r.dual_gap = dual_gap.size() ? dual_gap.lpNorm<Eigen::Infinity>() : 0.0;
  return r;
}

DescentMonitor::DescentMonitor(const Vec& labels, const HyperParams& hyper)
    : lipschitz_(loss_lipschitz(hyper.objective(), static_cast<std::size_t>(labels.size()))),
      previous_lagrangian_(loss_value(Vec::Zero(labels.size()), labels,
                                      hyper.objective().loss_scale(static_cast<std::size_t>(labels.size())))),
      previous_z_(Vec::Zero(labels.size())),
      previous_y_(Vec::Zero(labels.size())) {}

void DescentMonitor::check(DiagnosticsRecord& record, const Vec& z, const Vec& y) {
  record.lagrangian_change = record.lagrangian - previous_lagrangian_;
  record.dual_step_excess =
      (y - previous_y_).squaredNorm() - lipschitz_ * lipschitz_ * (z - previous_z_).squaredNorm();
  // Both bounds presuppose y^t = grad l(z^t) at the previous iterate, which
  // the zero initialization does not satisfy.
  if (have_dual_identity_) {
    record.descent_ok = record.lagrangian_change <= kDescentSlack + 1e-12 * std::abs(previous_lagrangian_);
    record.dual_bound_ok = record.dual_step_excess <= kDualSlack;
  }
  previous_lagrangian_ = record.lagrangian;
  previous_z_ = z;
  previous_y_ = y;
  have_dual_identity_ = true;
}

namespace {

struct PartyUpdate {
  Vec x;
  Vec share;
  Vec released;
};

PartyUpdate update_party(const XStepSolver& solver, const EngineState& state, std::size_t m,
                         SharePerturber* perturber) {
  try {
    PartyUpdate u;
    Vec c = others_minus_z(state.residual, state.released[m]);
    u.x = solver.solve(state.y, c, state.x[m]);
    u.share = solver.shard().block() * u.x;
    u.released = perturber ? perturber->perturb(m, u.share) : u.share;
    return u;
  } catch (const std::exception& e) {
    throw SolverError("party " + std::to_string(m) + ": " + e.what());
  }
}

std::vector<PartyUpdate> update_parties(const std::vector<XStepSolver>& solvers, const EngineState& state,
                                        SharePerturber* perturber, bool parallel,
                                        std::span<const std::size_t> order) {
  const std::size_t parties = solvers.size();
  std::vector<std::size_t> sequence(parties);
  if (order.empty()) {
    std::iota(sequence.begin(), sequence.end(), std::size_t{0});
  } else {
    if (order.size() != parties) throw DimensionError("party order must list every party once");
    sequence.assign(order.begin(), order.end());
  }

  std::vector<PartyUpdate> updates(parties);
  if (parallel && parties > 1) {
    std::vector<std::future<PartyUpdate>> futures;
    futures.reserve(parties);
    for (auto m : sequence)
      futures.push_back(std::async(std::launch::async, update_party, std::cref(solvers[m]), std::cref(state), m,
                                   perturber));
    for (std::size_t k = 0; k < parties; ++k) updates[sequence[k]] = futures[k].get();
  } else {
    for (auto m : sequence) updates[m] = update_party(solvers[m], state, m, perturber);
  }
  return updates;
}

std::vector<XStepSolver> make_solvers(const Problem& problem, const HyperParams& hyper) {
  std::vector<XStepSolver> solvers;
  solvers.reserve(problem.parties());
  for (const auto& shard : problem.shards) {
    try {
      solvers.emplace_back(shard, hyper.lambda, hyper.rho, hyper.ball_radius);
    } catch (const std::exception& e) {
      throw SolverError("party " + std::to_string(shard.party_id()) + ": " + e.what());
    }
  }
  return solvers;
}

EngineState apply_updates(const EngineState& state, std::vector<PartyUpdate> updates, const Problem& problem,
                          const HyperParams& hyper) {
  EngineState next;
  next.t = state.t + 1;
  for (auto& u : updates) {
    next.x.push_back(std::move(u.x));
    next.shares.push_back(std::move(u.share));
    next.released.push_back(std::move(u.released));
  }
  auto central = central_update(state.y, next.released, problem.labels, hyper);
  next.z = std::move(central.z);
  next.y = std::move(central.y);
  next.aggregate = std::move(central.aggregate);
  next.residual = std::move(central.residual);
  return next;
}

std::vector<PartyTerms> all_party_terms(const EngineState& state, const Problem& problem, const HyperParams& hyper) {
  std::vector<PartyTerms> terms;
  terms.reserve(problem.parties());
  for (std::size_t m = 0; m < problem.parties(); ++m)
    terms.push_back(party_terms(problem.shards[m], state.x[m], state.residual, state.y, hyper));
  return terms;
}

}  // namespace

EngineState iterate(const EngineState& state, const Problem& problem, const HyperParams& hyper,
                    SharePerturber* perturber, std::span<const std::size_t> order) {
  hyper.validate();
  problem.validate();
  auto solvers = make_solvers(problem, hyper);
  auto updates = update_parties(solvers, state, perturber, hyper.parallel, order);
  return apply_updates(state, std::move(updates), problem, hyper);
}

double augmented_lagrangian(const EngineState& state, const Problem& problem, const HyperParams& hyper) {
  const double scale = hyper.objective().loss_scale(problem.samples());
  Vec residual = sum_shares(state.released) - state.z;
  double reg = 0.0;
  for (const auto& x : state.x) reg += reg_value(x);
  return loss_value(state.z, problem.labels, scale) + hyper.lambda * reg + state.y.dot(residual) +
         0.5 * hyper.rho * residual.squaredNorm();
}

LyapunovTerms lyapunov_terms(const EngineState& state, const Problem& problem, const HyperParams& hyper) {
  const double scale = hyper.objective().loss_scale(problem.samples());
  Vec residual = sum_shares(state.released) - state.z;
  LyapunovTerms terms;
  for (std::size_t m = 0; m < problem.parties(); ++m)
    terms.x_terms += party_terms(problem.shards[m], state.x[m], residual, state.y, hyper).gradient_map_sq;
  terms.z_term = (loss_grad(state.z, problem.labels, scale) - state.y - hyper.rho * residual).squaredNorm();
  terms.primal_term = residual.squaredNorm();
  return terms;
}

double lyapunov(const EngineState& state, const Problem& problem, const HyperParams& hyper) {
  auto terms = lyapunov_terms(state, problem, hyper);
  return terms.x_terms + terms.z_term + terms.primal_term;
}

double sampled_variational_violation(const PartyShard& shard, const Vec& x, const Vec& y, double lambda,
                                     const std::function<Vec(const Vec&)>& reg_gradient, std::size_t directions,
                                     std::uint64_t seed) {
  Vec g = lambda * reg_gradient(x) + shard.block().transpose() * y;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  double worst = 0.0;
  for (std::size_t k = 0; k < directions; ++k) {
    Vec u(g.size());
    for (Eigen::Index i = 0; i < u.size(); ++i) u[i] = normal(rng);
    double norm = u.norm();
    if (norm == 0.0) continue;
    worst = std::max(worst, -u.dot(g) / norm);
  }
  return worst;
}

StationarityResiduals stationarity_residuals(const EngineState& state, const Problem& problem,
                                             const HyperParams& hyper, std::size_t directions) {
  const double scale = hyper.objective().loss_scale(problem.samples());
  StationarityResiduals r;
  Vec residual = sum_shares(state.released) - state.z;
  if (hyper.branch == RegularizerBranch::Convex) {
    double sq = 0.0;
    for (std::size_t m = 0; m < problem.parties(); ++m)
      sq += party_terms(problem.shards[m], state.x[m], residual, state.y, hyper).stationarity_map_sq;
    r.x_condition = std::sqrt(sq);
  } else {
    for (std::size_t m = 0; m < problem.parties(); ++m)
      r.x_variational = std::max(
          r.x_variational, sampled_variational_violation(problem.shards[m], state.x[m], state.y, hyper.lambda,
                                                         [](const Vec& v) { return reg_grad(v); }, directions,
                                                         hyper.seed + m));
  }
  r.dual_condition = (loss_grad(state.z, problem.labels, scale) - state.y).norm();
  r.primal_condition = residual.norm();
  return r;
}

namespace {

bool full_rank(const GramExtremes& e) { return e.sigma_min > 1e-10 * std::max(e.sigma_max, 1.0); }

}  // namespace

AssumptionReport assumption_check(std::span<const GramExtremes> extremes, double rho, double lambda,
                                  const LossProfile& loss) {
  AssumptionReport report;
  report.rho = rho;
  report.lipschitz = loss.lipschitz;
  report.gamma_ok = true;
  report.full_rank = true;
  for (const auto& e : extremes) {
    AssumptionReport::Party p;
    p.sigma_min = e.sigma_min;
    p.sigma_max = e.sigma_max;
    p.gamma = lambda + rho * e.sigma_min;
    p.gamma_ok = p.gamma >= 2.0 * e.sigma_max;
    p.full_rank = full_rank(e);
    report.gamma_ok = report.gamma_ok && p.gamma_ok;
    report.full_rank = report.full_rank && p.full_rank;
    report.parties.push_back(p);
  }
  report.curvature_ok = rho * rho > 2.0 * loss.lipschitz * loss.lipschitz;
  report.rho_ge_l = rho >= loss.lipschitz;
  return report;
}

AssumptionReport assumption_check(std::span<const PartyShard> shards, double rho, double lambda,
                                  const LossProfile& loss) {
  std::vector<GramExtremes> extremes;
  for (const auto& shard : shards) extremes.push_back(shard.extremes());
  return assumption_check(extremes, rho, lambda, loss);
}

double recommend_rho(std::span<const GramExtremes> extremes, const LossProfile& loss, double lambda) {
  for (std::size_t m = 0; m < extremes.size(); ++m)
    if (!full_rank(extremes[m]) && lambda < 2.0 * extremes[m].sigma_max)
      throw ConfigError("no feasible rho: party " + std::to_string(m) +
                        " has a rank-deficient block and lambda < 2 sigma_max = " +
                        std::to_string(2.0 * extremes[m].sigma_max) + "; increase lambda");

  constexpr double kGrowth = 1.1;
  constexpr double kSafety = 1.05;
  const double floor = std::max(loss.lipschitz, 1e-6);
  for (int k = 0;; ++k) {
    double rho = floor * std::pow(kGrowth, k);
    if (!std::isfinite(rho * kSafety)) break;
    if (assumption_check(extremes, rho, lambda, loss).rho_conditions_hold()) return rho * kSafety;
  }
  throw ConfigError("no feasible rho found on the search grid");
}

double recommend_rho(std::span<const PartyShard> shards, const LossProfile& loss, double lambda) {
  std::vector<GramExtremes> extremes;
  for (const auto& shard : shards) extremes.push_back(shard.extremes());
  return recommend_rho(extremes, loss, lambda);
}

Engine::Engine(const Problem& problem, HyperParams hyper, SharePerturber* perturber)
    : problem_(&problem),
      hyper_(hyper),
      perturber_(perturber),
      solvers_((hyper.validate(), problem.validate(), make_solvers(problem, hyper))),
      state_(init_state(problem.shards)),
      monitor_(problem.labels, hyper) {}

DiagnosticsRecord Engine::step() {
  auto updates = update_parties(solvers_, state_, perturber_, hyper_.parallel, {});
  state_ = apply_updates(state_, std::move(updates), *problem_, hyper_);
  auto terms = all_party_terms(state_, *problem_, hyper_);
  auto record = assemble_diagnostics(state_.t, state_.z, state_.y, state_.aggregate, state_.residual,
                                     problem_->labels, hyper_, terms);
  monitor_.check(record, state_.z, state_.y);
  return record;
}

std::vector<DiagnosticsRecord> Engine::run(const EpochCallback& callback) {
  std::vector<DiagnosticsRecord> trace;
  while (state_.t < hyper_.max_epochs) {
    try {
      trace.push_back(step());
    } catch (const std::exception& e) {
      throw RunAborted(std::string("run aborted at epoch ") + std::to_string(state_.t + 1) + ": " + e.what(),
                       std::move(trace));
    }
    if (callback) callback(state_, trace.back());
    if (hyper_.early_stop && trace.back().lyapunov <= hyper_.lyapunov_tol) break;
  }
  return trace;
}

std::vector<DiagnosticsRecord> run(const Problem& problem, const HyperParams& hyper, SharePerturber* perturber,
                                   const EpochCallback& callback) {
  Engine engine(problem, hyper, perturber);
  return engine.run(callback);
}

}  // namespace vfl
