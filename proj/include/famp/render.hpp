#pragma once

#include <span>
#include <string>
#include <vector>

#include "famp/envs.hpp"
#include "famp/iopg.hpp"
#include "famp/policy.hpp"

namespace famp::harness {

// Option usage on a Taxi task: one panel per carrying flag, each visited
// cell shows the last action taken there (arrow, square for pickup/drop-off,
// dot for noop) colored by the most responsible option at that step.
std::string render_option_map(const policy::HierParams& params, const envs::TaxiTask& task,
                              std::span<const iopg::Trajectory> trajs,
                              const policy::TerminationMode& mode = policy::TerminationMode::learned());

// One SVG per option: termination probability heatmap (white 0, black 1)
// beside the option's most likely action in every state.
std::vector<std::string> render_term_maps(const policy::HierParams& params, const envs::TaxiMap& map);

// Fill color of a termination probability.
std::string term_color(double xi);

}  // namespace famp::harness
