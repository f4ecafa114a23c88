#include "famp/rollout.hpp"

#include <algorithm>
#include <stdexcept>

namespace famp::harness {

std::vector<iopg::Trajectory> rollout(const envs::TaxiTask& task, const policy::HierParams& params,
                                      std::size_t k, Rng& rng, const policy::TerminationMode& mode,
                                      int max_steps) {
  const envs::TaxiMap& map = task.layout();
  if (params.dims.S != static_cast<std::size_t>(map.state_dim()) || params.dims.A != envs::kNumActions)
    throw std::invalid_argument("rollout: policy dimensions do not match the task");
  const int cap = std::min(max_steps, envs::kMaxSteps);
  std::vector<iopg::Trajectory> out(k);
  for (std::size_t e = 0; e < k; ++e) {
    Rng ep(derive_seed({rng.bits(), e}));
    iopg::Trajectory& tr = out[e];
    envs::TaxiState s = envs::reset(task);
    std::size_t si = static_cast<std::size_t>(envs::state_index(map, s));
    tr.states.push_back(static_cast<std::uint32_t>(si));
    std::optional<policy::ExecState> exec;
    for (int t = 0; t < cap; ++t) {
      const policy::StepChoice c = policy::sample_step(params, exec, si, t, ep, mode);
      exec = c.exec;
      const envs::StepOutcome o = envs::step(task, s, static_cast<int>(c.action));
      s = o.next_state;
      si = static_cast<std::size_t>(envs::state_index(map, s));
      tr.actions.push_back(static_cast<std::uint32_t>(c.action));
      tr.rewards.push_back(o.reward);
      tr.states.push_back(static_cast<std::uint32_t>(si));
      if (o.reached_goal) {
        tr.done_by_goal = true;
        break;
      }
      if (o.done) break;
    }
  }
  return out;
}

double mean_return(std::span<const iopg::Trajectory> trajs) {
  if (trajs.empty()) return 0.0;
  double s = 0.0;
  for (const auto& tr : trajs) s += tr.total_return();
  return s / static_cast<double>(trajs.size());
}

}  // namespace famp::harness
