#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "famp/meta.hpp"
#include "famp/rng.hpp"
#include "famp/rollout.hpp"

namespace famp::harness {

struct Interval {
  double mean = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

// Percentile bootstrap of the mean. Samples are sorted first, so the result
// does not depend on their order. Throws std::invalid_argument when empty.
Interval bootstrap_ci(std::span<const double> samples, Rng& rng, std::size_t resamples = 10000,
                      double level = 0.95);

// Stream key for adapting / evaluating on test task `task_id` under `seed`.
std::uint64_t test_key(std::uint64_t seed, int task_id);

struct SweepAxis {
  std::string key;
  std::vector<nlohmann::json> values;
};

struct ExperimentSpec {
  nlohmann::json config = nlohmann::json::object();  // base config keys
  std::vector<std::uint64_t> seeds = {0};
  std::vector<SweepAxis> sweep;
  std::filesystem::path out_dir;
  bool maps = true;  // SVG maps for the first test task of each cell
};

// Keys: config, seeds, sweep (object of key -> list), out, maps. Unknown keys
// and empty lists throw meta::ConfigError.
ExperimentSpec spec_from_json(const nlohmann::json& j);

struct Cell {
  std::string point;  // "base" or "key=value__key=value"
  std::uint64_t seed = 0;
  meta::MetaConfig config;
  nlohmann::json config_json;
  std::string config_hash;
  std::filesystem::path dir;  // <out>/<point>/<seed>
};

// Sweep points in axis order (last axis fastest), seeds innermost.
std::vector<Cell> expand_cells(const ExperimentSpec& spec);

struct RunReport {
  std::size_t completed = 0;
  std::size_t skipped = 0;  // already complete in the manifest
  std::size_t failed = 0;
};

// Runs every cell that the manifest does not already list as complete with
// the same config hash. A failing cell is recorded and the run continues.
// Writes manifest.json and summary.csv under spec.out_dir; summary rows are
// per (point, update) over completed seeds, plus one "failed" row per failed
// cell. jobs = 0 uses every core.
RunReport run_experiment(const ExperimentSpec& spec, unsigned jobs, std::ostream* progress = nullptr);

// One cell: meta-training (unless single_task) and the test-task curves.
// Returns the paths written, relative to the cell directory.
std::vector<std::string> run_cell(const Cell& cell, const envs::TaskFamily& family, unsigned jobs, bool maps);

}  // namespace famp::harness
