#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "famp/autodiff.hpp"
#include "famp/policy.hpp"

namespace famp::iopg {

// States are stored by index into the one-hot encoding.
struct Trajectory {
  std::vector<std::uint32_t> states;  // s_0 .. s_T
  std::vector<std::uint32_t> actions;  // a_0 .. a_{T-1}
  std::vector<double> rewards;         // r_0 .. r_{T-1}
  bool done_by_goal = false;

  std::size_t length() const { return actions.size(); }
  double total_return() const;
};

// Raised when a filtered probability falls below the 1e-300 floor.
class NumericalGuardError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kProbFloor = 1e-300;

// Batched forward recursion over option posteriors. Row j of every result
// belongs to trajs[j]; steps past a trajectory's end hold exact zeros.
struct Filtered {
  ad::Var loglik;                  // [k, T_max]: log sum_w p(w_t | h_t) pi^w(a_t | s_t)
  std::vector<ad::Var> log_prior;  // per t, [k, N]: log p(w_t | s_0..t, a_0..t-1); only if requested
};

Filtered forward_filter(const policy::HierVars& p, std::span<const Trajectory> trajs,
                        const policy::TerminationMode& mode, bool keep_rows = false);

// [T, N] rows p(w_t | s_0..t, a_0..t-1); row 0 is pi_Omega(.|s_0).
ad::Var responsibilities(const Trajectory& traj, const policy::HierVars& p,
                         const policy::TerminationMode& mode);

// [T] per-step marginal action log-likelihoods.
ad::Var marginal_action_loglik(const Trajectory& traj, const policy::HierVars& p,
                               const policy::TerminationMode& mode);

// Exact marginalisation over all N^T option sequences, in plain doubles.
// Throws std::invalid_argument when N^T exceeds 1e6.
double brute_force_loglik(const Trajectory& traj, const policy::HierParams& p,
                          const policy::TerminationMode& mode = policy::TerminationMode::learned());
std::vector<std::vector<double>> brute_force_responsibilities(
    const Trajectory& traj, const policy::HierParams& p,
    const policy::TerminationMode& mode = policy::TerminationMode::learned());

// Loaded-DiCE surrogate: mean over trajectories of
// sum_t (box(z_t) - box(z_t - l_t)) A_t with z = lambda-discounted cumsum of
// the per-step log-likelihoods l. Evaluates to exactly 0.
ad::Var dice_surrogate(const policy::HierVars& p, std::span<const Trajectory> trajs,
                       const std::vector<std::vector<double>>& advantages, double lambda_dice,
                       const policy::TerminationMode& mode);

// Same, from precomputed [k, T_max] log-likelihoods.
ad::Var dice_from_loglik(ad::Var loglik, const std::vector<std::vector<double>>& advantages,
                         double lambda_dice);

}  // namespace famp::iopg
