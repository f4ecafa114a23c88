#pragma once

#include <span>
#include <vector>

#include "famp/iopg.hpp"

namespace famp::advantage {

inline constexpr double kRidge = 1e-5;

// one-hot state, t/100, (t/100)^2, (t/100)^3, 1
std::vector<double> baseline_features(std::span<const double> encoded_state, int t);
inline std::size_t feature_dim(std::size_t state_dim) { return state_dim + 4; }

struct LinearBaseline {
  std::vector<double> weights;
  double ridge = kRidge;

  std::size_t state_dim() const { return weights.size() - 4; }
  double predict(std::size_t state, int t) const;
  // V(s_0) .. V(s_T)
  std::vector<double> predict(const iopg::Trajectory& traj) const;
};

std::vector<double> returns_to_go(std::span<const double> rewards, double gamma);

// Ridge regression of discounted returns-to-go on the features of every
// visited (state, t): solves (X^T X + ridge I) w = X^T G.
LinearBaseline fit_baseline(std::span<const iopg::Trajectory> trajs, double gamma, std::size_t state_dim,
                            double ridge = kRidge);

// delta_t = r_t + gamma V_{t+1} - V_t, A_t = sum_k (gamma lambda)^k delta_{t+k};
// `values` holds V(s_0)..V(s_{T-1}) and V(s_T) is `value_of_sT`.
std::vector<double> gae(std::span<const double> rewards, std::span<const double> values, double value_of_sT,
                        double gamma, double lambda);

// GAE for a batch against a fitted baseline: zero bootstrap at the goal, the
// baseline's value of the last state when the episode was cut off.
std::vector<std::vector<double>> batch_advantages(std::span<const iopg::Trajectory> trajs,
                                                  const LinearBaseline& baseline, double gamma, double lambda);

}  // namespace famp::advantage
