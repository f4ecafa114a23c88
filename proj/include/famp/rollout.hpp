#pragma once

#include <span>
#include <vector>

#include "famp/envs.hpp"
#include "famp/iopg.hpp"
#include "famp/policy.hpp"
#include "famp/rng.hpp"

namespace famp::harness {

// k episodes under the hierarchical policy, each cut at `max_steps`
// (never more than the environment's own 1500-step cap). Every episode draws
// from its own substream keyed off `rng`.
std::vector<iopg::Trajectory> rollout(const envs::TaxiTask& task, const policy::HierParams& params,
                                      std::size_t k, Rng& rng, const policy::TerminationMode& mode,
                                      int max_steps = envs::kMaxSteps);

// Mean undiscounted episode return.
double mean_return(std::span<const iopg::Trajectory> trajs);

}  // namespace famp::harness
