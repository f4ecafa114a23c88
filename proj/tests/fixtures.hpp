#pragma once

#include <random>

#include "famp/iopg.hpp"
#include "famp/policy.hpp"

namespace fixtures {

inline famp::policy::HierParams random_params(std::size_t S, std::size_t N, std::size_t A, std::mt19937_64& gen,
                                              double scale = 1.5) {
  std::normal_distribution<double> nd(0.0, scale);
  famp::policy::HierParams p = famp::policy::init_params(S, N, A, 0);
  for (auto* block : {&p.hi, &p.sub, &p.term})
    for (double& v : block->data) v = nd(gen);
  return p;
}

inline famp::iopg::Trajectory random_traj(std::size_t S, std::size_t A, std::size_t T, std::mt19937_64& gen) {
  std::uniform_int_distribution<std::uint32_t> sd(0, static_cast<std::uint32_t>(S - 1));
  std::uniform_int_distribution<std::uint32_t> ad(0, static_cast<std::uint32_t>(A - 1));
  famp::iopg::Trajectory tr;
  for (std::size_t t = 0; t < T; ++t) {
    tr.states.push_back(sd(gen));
    tr.actions.push_back(ad(gen));
    tr.rewards.push_back(-0.1);
  }
  tr.states.push_back(sd(gen));
  return tr;
}

}  // namespace fixtures
