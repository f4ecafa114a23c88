#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "famp/autodiff.hpp"

namespace famp::envs {

inline constexpr int kMaxSteps = 1500;
inline constexpr double kGoalReward = 2.0;
inline constexpr double kStepReward = -0.1;

enum class Action : int { Up = 0, Down, Left, Right, PickupDropoff, Noop };
inline constexpr int kNumActions = 6;

struct Cell {
  int row = 0;
  int col = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

// Blocked edge between two 4-adjacent cells.
struct Wall {
  Cell a;
  Cell b;
};

struct Special {
  Cell cell;
  std::string color;
};

class TaxiMap {
 public:
  // Throws std::invalid_argument if walls are not between adjacent cells,
  // specials are not distinct, or some cell is unreachable.
  TaxiMap(int width, int height, std::vector<Wall> walls, std::array<Special, 4> specials);

  int width() const { return width_; }
  int height() const { return height_; }
  int cell_count() const { return width_ * height_; }
  // One-hot over (cell, carrying).
  int state_dim() const { return 2 * cell_count(); }

  const std::vector<Wall>& walls() const { return walls_; }
  const std::array<Special, 4>& specials() const { return specials_; }

  int cell_index(Cell c) const { return c.row * width_ + c.col; }
  Cell cell_at(int index) const { return {index / width_, index % width_}; }
  bool inside(Cell c) const { return c.row >= 0 && c.row < height_ && c.col >= 0 && c.col < width_; }
  // Destination of a directional move; the same cell when blocked.
  Cell move(Cell from, Action a) const;

 private:
  int width_;
  int height_;
  std::vector<Wall> walls_;
  std::array<Special, 4> specials_;
  std::vector<std::uint8_t> blocked_;  // cell * 4 + direction
};

// 6x6 grid, specials in the corners, three short interior wall segments.
TaxiMap canonical_map();

struct TaxiTask {
  std::shared_ptr<const TaxiMap> map;
  int start = 0;      // special indices
  int passenger = 0;
  int goal = 0;
  int id = 0;

  const TaxiMap& layout() const { return *map; }
};

struct TaxiState {
  Cell cell;
  bool carrying = false;
  int t = 0;
  friend bool operator==(const TaxiState&, const TaxiState&) = default;
};

struct StepOutcome {
  TaxiState next_state;
  double reward = 0.0;
  bool done = false;
  bool reached_goal = false;
};

TaxiState reset(const TaxiTask& task);
// Throws std::invalid_argument for an action id outside [0, 6).
StepOutcome step(const TaxiTask& task, const TaxiState& state, int action);

int state_index(const TaxiMap& map, const TaxiState& state);
std::vector<double> encode(const TaxiMap& map, const TaxiState& state);

// BFS over (cell, carrying) with pickup as an edge: number of -0.1 steps
// on the fastest route to the successful drop-off.
int shortest_path_length(const TaxiTask& task);
double optimal_return(const TaxiTask& task);

struct TaskFamily {
  std::shared_ptr<const TaxiMap> map;
  std::uint64_t seed = 0;
  std::vector<TaxiTask> train;
  std::vector<TaxiTask> test;

  // All tasks ordered by id.
  std::vector<TaxiTask> all() const;
  const TaxiTask& by_id(int id) const;
  bool is_test(int id) const;
  std::size_t size() const { return train.size() + test.size(); }
};

inline constexpr int kNumTestTasks = 12;

// Every (start, passenger, goal) triple over the four specials except the
// four with all three equal, ids in lexicographic order, split 48 / 12 by a
// seeded shuffle.
TaskFamily task_family(std::shared_ptr<const TaxiMap> map, std::uint64_t seed = 0);
TaskFamily task_family(std::uint64_t seed = 0);

nlohmann::json family_to_json(const TaskFamily& family);
TaskFamily family_from_json(const nlohmann::json& j);

// One-step episodic bandit with a closed-form expected return.
class Bandit {
 public:
  explicit Bandit(std::vector<double> payoffs);

  std::size_t arms() const { return payoffs_.size(); }
  const std::vector<double>& payoffs() const { return payoffs_; }

  double expected_return(std::span<const double> probs) const;
  ad::Var expected_return(ad::Var probs) const;
  // d E[payoff] / d logits for a softmax policy: p_i (payoff_i - E).
  std::vector<double> softmax_return_gradient(std::span<const double> logits) const;

 private:
  std::vector<double> payoffs_;
};

Bandit make_bandit(std::vector<double> expected_payoffs);

}  // namespace famp::envs
