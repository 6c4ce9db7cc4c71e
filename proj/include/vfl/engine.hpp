#pragma once

#include "vfl/dataset.hpp"
#include "vfl/objective.hpp"
#include "vfl/subsolvers.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace vfl {

// Which stationarity term the Lyapunov function uses for R_m.
enum class RegularizerBranch {
  Convex,           // prox gradient map
  SmoothNonconvex,  // plain gradient of the augmented Lagrangian
};

struct HyperParams {
  double rho = 1.0;
  double lambda = 0.0;
  std::size_t max_epochs = 1;
  double lyapunov_tol = 1e-4;
  bool early_stop = false;
  std::uint64_t seed = 0;
  LossScaling scaling = LossScaling::Sum;
  std::optional<double> ball_radius;
  RegularizerBranch branch = RegularizerBranch::Convex;
  bool parallel = true;

  ObjectiveConfig objective() const { return ObjectiveConfig{lambda, scaling}; }
  void validate() const;
};

struct Problem {
  std::vector<PartyShard> shards;
  Vec labels;

  std::size_t samples() const { return static_cast<std::size_t>(labels.size()); }
  std::size_t parties() const { return shards.size(); }
  void validate() const;
};

// Iterates of the sharing scheme. `released` is what each party pushed to
// the coordinator (equal to `shares` without perturbation); aggregates are
// always formed from `released`.
struct EngineState {
  std::vector<Vec> x;
  std::vector<Vec> shares;
  std::vector<Vec> released;
  Vec z;
  Vec y;
  Vec aggregate;  // sum_m released_m, summed in ascending party order
  Vec residual;   // aggregate - z
  std::size_t t = 0;
};

struct StationarityResiduals {
  double x_condition = 0.0;        // || x_m - prox[x_m - D_m^T y] || over all m
  double x_variational = 0.0;      // sampled variational-inequality violation (nonconvex R_m)
  double dual_condition = 0.0;     // || grad l(z) - y ||
  double primal_condition = 0.0;   // || sum_m D_m x_m - z ||

  double max() const;
};

struct DiagnosticsRecord {
  std::size_t epoch = 0;
  double objective = 0.0;
  double lagrangian = 0.0;
  double primal_residual = 0.0;
  double lyapunov = 0.0;
  double stationarity = 0.0;
  StationarityResiduals residuals;
  double dual_gap = 0.0;              // || grad l(z) - y ||_inf
  double lagrangian_change = 0.0;     // L^t - L^{t-1}
  double dual_step_excess = 0.0;      // ||y^t - y^{t-1}||^2 - L^2 ||z^t - z^{t-1}||^2
  bool descent_ok = true;
  bool dual_bound_ok = true;
};

// Party-local pieces of the diagnostics, computable from x_m^t and the
// broadcast (a^t, y^t) alone.
struct PartyTerms {
  double reg = 0.0;                // R_m(x_m)
  double gradient_map_sq = 0.0;    // Lyapunov x-term
  double stationarity_map_sq = 0.0;
};

class SharePerturber {
 public:
  virtual ~SharePerturber() = default;
  virtual Vec perturb(std::size_t party, const Vec& share) = 0;
};

EngineState init_state(std::span<const PartyShard> shards);

// c_m = a - cached release of party m
Vec others_minus_z(const Vec& residual, const Vec& own_release);

Vec sum_shares(std::span<const Vec> released);

struct CentralUpdate {
  Vec z;
  Vec y;
  Vec aggregate;
  Vec residual;
};

// z- and y-updates on the collected releases.
CentralUpdate central_update(const Vec& y, std::span<const Vec> released, const Vec& labels,
                             const HyperParams& hyper);

PartyTerms party_terms(const PartyShard& shard, const Vec& x, const Vec& residual, const Vec& y,
                       const HyperParams& hyper);

// Tracks consecutive iterates for the descent and dual-step checks.
class DescentMonitor {
 public:
  DescentMonitor(const Vec& labels, const HyperParams& hyper);
  void check(DiagnosticsRecord& record, const Vec& z, const Vec& y);

  static constexpr double kDescentSlack = 1e-8;
  static constexpr double kDualSlack = 1e-10;

 private:
  double lipschitz_;
  double previous_lagrangian_;
  Vec previous_z_;
  Vec previous_y_;
  bool have_dual_identity_ = false;
};

DiagnosticsRecord assemble_diagnostics(std::size_t epoch, const Vec& z, const Vec& y, const Vec& aggregate,
                                       const Vec& residual, const Vec& labels, const HyperParams& hyper,
                                       std::span<const PartyTerms> parties);

// One Jacobi iteration. `order` only changes the sequence in which the
// independent party solves run.
EngineState iterate(const EngineState& state, const Problem& problem, const HyperParams& hyper,
                    SharePerturber* perturber = nullptr, std::span<const std::size_t> order = {});

double augmented_lagrangian(const EngineState& state, const Problem& problem, const HyperParams& hyper);
double lyapunov(const EngineState& state, const Problem& problem, const HyperParams& hyper);

// The three Lyapunov summands, in order: sum of x-terms, ||grad_z L||^2, ||residual||^2.
struct LyapunovTerms {
  double x_terms = 0.0;
  double z_term = 0.0;
  double primal_term = 0.0;
};
LyapunovTerms lyapunov_terms(const EngineState& state, const Problem& problem, const HyperParams& hyper);

StationarityResiduals stationarity_residuals(const EngineState& state, const Problem& problem,
                                             const HyperParams& hyper, std::size_t directions = 64);

// Largest violation of <u, lambda grad R(x) + D^T y> >= 0 over `directions`
// random unit u (unconstrained X_m).
double sampled_variational_violation(const PartyShard& shard, const Vec& x, const Vec& y, double lambda,
                                     const std::function<Vec(const Vec&)>& reg_gradient, std::size_t directions,
                                     std::uint64_t seed);

struct AssumptionReport {
  struct Party {
    double sigma_min = 0.0;
    double sigma_max = 0.0;
    double gamma = 0.0;  // lambda + rho sigma_min
    bool gamma_ok = false;
    bool full_rank = false;
  };
  std::vector<Party> parties;
  double rho = 0.0;
  double lipschitz = 0.0;
  bool gamma_ok = false;      // gamma_m >= 2 sigma_max for every m
  bool curvature_ok = false;  // rho * gamma(rho) > 2 L^2, with gamma(rho) = rho
  bool rho_ge_l = false;      // rho >= L
  bool full_rank = false;     // sigma_min > 0 for every m

  // The conditions that depend on rho (those recommend_rho targets).
  bool rho_conditions_hold() const { return gamma_ok && curvature_ok && rho_ge_l; }
  bool all_hold() const { return rho_conditions_hold() && full_rank; }
};

AssumptionReport assumption_check(std::span<const PartyShard> shards, double rho, double lambda,
                                  const LossProfile& loss);
AssumptionReport assumption_check(std::span<const GramExtremes> extremes, double rho, double lambda,
                                  const LossProfile& loss);

double recommend_rho(std::span<const PartyShard> shards, const LossProfile& loss, double lambda);
double recommend_rho(std::span<const GramExtremes> extremes, const LossProfile& loss, double lambda);

using EpochCallback = std::function<void(const EngineState&, const DiagnosticsRecord&)>;

class RunAborted : public Error {
 public:
  RunAborted(const std::string& what, std::vector<DiagnosticsRecord> partial)
      : Error(what), partial_(std::move(partial)) {}
  const std::vector<DiagnosticsRecord>& partial_trace() const { return partial_; }

 private:
  std::vector<DiagnosticsRecord> partial_;
};

// Stateful driver with cached per-party factorizations.
class Engine {
 public:
  Engine(const Problem& problem, HyperParams hyper, SharePerturber* perturber = nullptr);

  const EngineState& state() const { return state_; }
  const Problem& problem() const { return *problem_; }
  const HyperParams& hyper() const { return hyper_; }

  DiagnosticsRecord step();
  std::vector<DiagnosticsRecord> run(const EpochCallback& callback = {});

 private:
  const Problem* problem_;
  HyperParams hyper_;
  SharePerturber* perturber_;
  std::vector<XStepSolver> solvers_;
  EngineState state_;
  DescentMonitor monitor_;
};

std::vector<DiagnosticsRecord> run(const Problem& problem, const HyperParams& hyper,
                                   SharePerturber* perturber = nullptr, const EpochCallback& callback = {});

}  // namespace vfl
