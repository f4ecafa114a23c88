#include "famp/envs.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <deque>
#include <numeric>
#include <stdexcept>

#include "famp/rng.hpp"

namespace famp::envs {

namespace {

constexpr int kDr[4] = {-1, 1, 0, 0};
constexpr int kDc[4] = {0, 0, -1, 1};

int direction_between(Cell a, Cell b) {
  for (int d = 0; d < 4; ++d)
    if (a.row + kDr[d] == b.row && a.col + kDc[d] == b.col) return d;
  return -1;
}

}  // namespace

TaxiMap::TaxiMap(int width, int height, std::vector<Wall> walls, std::array<Special, 4> specials)
    : width_(width), height_(height), walls_(std::move(walls)), specials_(std::move(specials)) {
  if (width_ <= 0 || height_ <= 0) throw std::invalid_argument("taxi map: non-positive size");
  blocked_.assign(static_cast<std::size_t>(cell_count()) * 4, 0);
  for (const Wall& w : walls_) {
    const int d = direction_between(w.a, w.b);
    if (!inside(w.a) || !inside(w.b) || d < 0)
      throw std::invalid_argument("taxi map: wall must separate two adjacent cells");
    blocked_[cell_index(w.a) * 4 + d] = 1;
    blocked_[cell_index(w.b) * 4 + (d ^ 1)] = 1;
  }
  for (int i = 0; i < 4; ++i) {
    if (!inside(specials_[i].cell)) throw std::invalid_argument("taxi map: special outside grid");
    for (int j = 0; j < i; ++j)
      if (specials_[i].cell == specials_[j].cell)
        throw std::invalid_argument("taxi map: specials must be distinct");
  }
  // connectivity from the first special
  std::vector<char> seen(cell_count(), 0);
  std::deque<int> queue{cell_index(specials_[0].cell)};
  seen[queue.front()] = 1;
  int reached = 1;
  while (!queue.empty()) {
    const Cell c = cell_at(queue.front());
    queue.pop_front();
    for (int d = 0; d < 4; ++d) {
      const int n = cell_index(move(c, static_cast<Action>(d)));
      if (!seen[n]) {
        seen[n] = 1;
        ++reached;
        queue.push_back(n);
      }
    }
  }
  if (reached != cell_count()) throw std::invalid_argument("taxi map: passable region is not connected");
}

Cell TaxiMap::move(Cell from, Action a) const {
  const int d = static_cast<int>(a);
  if (d < 0 || d > 3) return from;
  const Cell to{from.row + kDr[d], from.col + kDc[d]};
  if (!inside(to) || blocked_[cell_index(from) * 4 + d]) return from;
  return to;
}

TaxiMap canonical_map() {
  std::vector<Wall> walls = {
      {{0, 2}, {0, 3}}, {{1, 2}, {1, 3}},  // top centre
      {{4, 1}, {4, 2}}, {{5, 1}, {5, 2}},  // bottom left
      {{4, 3}, {4, 4}}, {{5, 3}, {5, 4}},  // bottom right
  };
  std::array<Special, 4> specials = {{
      {{0, 0}, "red"},
      {{0, 5}, "green"},
      {{5, 0}, "yellow"},
      {{5, 5}, "blue"},
  }};
  return TaxiMap(6, 6, std::move(walls), std::move(specials));
}

TaxiState reset(const TaxiTask& task) {
  return TaxiState{task.layout().specials()[task.start].cell, false, 0};
}

StepOutcome step(const TaxiTask& task, const TaxiState& state, int action) {
  if (action < 0 || action >= kNumActions)
    throw std::invalid_argument("taxi step: invalid action id " + std::to_string(action));
  const TaxiMap& map = task.layout();
  StepOutcome out;
  out.next_state = state;
  out.next_state.t = state.t + 1;
  out.reward = kStepReward;
  const auto a = static_cast<Action>(action);
  if (a == Action::PickupDropoff) {
    if (!state.carrying && state.cell == map.specials()[task.passenger].cell) {
      out.next_state.carrying = true;
    } else if (state.carrying && state.cell == map.specials()[task.goal].cell) {
      out.reward = kGoalReward;
      out.done = true;
      out.reached_goal = true;
    }
  } else if (a != Action::Noop) {
    out.next_state.cell = map.move(state.cell, a);
  }
  if (out.next_state.t >= kMaxSteps) out.done = true;
  return out;
}

int state_index(const TaxiMap& map, const TaxiState& state) {
  return (state.carrying ? map.cell_count() : 0) + map.cell_index(state.cell);
}

std::vector<double> encode(const TaxiMap& map, const TaxiState& state) {
  std::vector<double> v(map.state_dim(), 0.0);
  v[state_index(map, state)] = 1.0;
  return v;
}

int shortest_path_length(const TaxiTask& task) {
  const TaxiMap& map = task.layout();
  const int cells = map.cell_count();
  const int passenger = map.cell_index(map.specials()[task.passenger].cell);
  const int goal = map.cell_index(map.specials()[task.goal].cell);
  std::vector<int> dist(2 * cells, -1);
  const int src = map.cell_index(map.specials()[task.start].cell);
  std::deque<int> queue{src};
  dist[src] = 0;
  while (!queue.empty()) {
    const int s = queue.front();
    queue.pop_front();
    const bool carrying = s >= cells;
    const int cell = s % cells;
    if (carrying && cell == goal) return dist[s];  // plus the final rewarded drop-off
    auto visit = [&](int n) {
      if (dist[n] < 0) {
        dist[n] = dist[s] + 1;
        queue.push_back(n);
      }
    };
    for (int d = 0; d < 4; ++d)
      visit((carrying ? cells : 0) + map.cell_index(map.move(map.cell_at(cell), static_cast<Action>(d))));
    if (!carrying && cell == passenger) visit(cells + cell);
  }
  throw std::logic_error("taxi: goal unreachable");
}

double optimal_return(const TaxiTask& task) {
  return kGoalReward + kStepReward * shortest_path_length(task);
}

std::vector<TaxiTask> TaskFamily::all() const {
  std::vector<TaxiTask> out(train);
  out.insert(out.end(), test.begin(), test.end());
  std::sort(out.begin(), out.end(), [](const TaxiTask& a, const TaxiTask& b) { return a.id < b.id; });
  return out;
}

const TaxiTask& TaskFamily::by_id(int id) const {
  for (const auto* list : {&train, &test})
    for (const TaxiTask& t : *list)
      if (t.id == id) return t;
  throw std::out_of_range("task family: unknown task id " + std::to_string(id));
}

bool TaskFamily::is_test(int id) const {
  return std::any_of(test.begin(), test.end(), [id](const TaxiTask& t) { return t.id == id; });
}

TaskFamily task_family(std::shared_ptr<const TaxiMap> map, std::uint64_t seed) {
  std::vector<TaxiTask> tasks;
  for (int s = 0; s < 4; ++s)
    for (int p = 0; p < 4; ++p)
      for (int g = 0; g < 4; ++g) {
        if (s == p && p == g) continue;
        tasks.push_back(TaxiTask{map, s, p, g, static_cast<int>(tasks.size())});
      }
  std::vector<int> order(tasks.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed({0x7461736bull, seed}));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  TaskFamily fam;
  fam.map = std::move(map);
  fam.seed = seed;
  std::vector<int> test_ids(order.begin(), order.begin() + kNumTestTasks);
  std::sort(test_ids.begin(), test_ids.end());
  for (const TaxiTask& t : tasks) {
    if (std::binary_search(test_ids.begin(), test_ids.end(), t.id))
      fam.test.push_back(t);
    else
      fam.train.push_back(t);
  }
  return fam;
}

TaskFamily task_family(std::uint64_t seed) {
  return task_family(std::make_shared<const TaxiMap>(canonical_map()), seed);
}

namespace {

nlohmann::json cell_json(Cell c) { return nlohmann::json::array({c.row, c.col}); }

Cell cell_from(const nlohmann::json& j) { return Cell{j.at(0).get<int>(), j.at(1).get<int>()}; }

nlohmann::json tasks_json(const std::vector<TaxiTask>& tasks) {
  auto arr = nlohmann::json::array();
  for (const TaxiTask& t : tasks)
    arr.push_back({{"id", t.id}, {"start", t.start}, {"passenger", t.passenger}, {"goal", t.goal}});
  return arr;
}

}  // namespace

nlohmann::json family_to_json(const TaskFamily& family) {
  const TaxiMap& m = *family.map;
  nlohmann::json walls = nlohmann::json::array();
  for (const Wall& w : m.walls()) walls.push_back({cell_json(w.a), cell_json(w.b)});
  nlohmann::json specials = nlohmann::json::array();
  for (const Special& s : m.specials()) specials.push_back({{"cell", cell_json(s.cell)}, {"color", s.color}});
  return {
      {"map", {{"width", m.width()}, {"height", m.height()}, {"walls", walls}, {"specials", specials}}},
      {"seed", family.seed},
      {"train", tasks_json(family.train)},
      {"test", tasks_json(family.test)},
  };
}

TaskFamily family_from_json(const nlohmann::json& j) {
  const auto& jm = j.at("map");
  std::vector<Wall> walls;
  for (const auto& w : jm.at("walls")) walls.push_back(Wall{cell_from(w.at(0)), cell_from(w.at(1))});
  if (jm.at("specials").size() != 4) throw std::invalid_argument("task family: need exactly 4 specials");
  std::array<Special, 4> specials;
  for (int i = 0; i < 4; ++i) {
    const auto& s = jm.at("specials").at(i);
    specials[i] = Special{cell_from(s.at("cell")), s.at("color").get<std::string>()};
  }
  TaskFamily fam;
  fam.map = std::make_shared<const TaxiMap>(jm.at("width").get<int>(), jm.at("height").get<int>(),
                                            std::move(walls), std::move(specials));
  fam.seed = j.at("seed").get<std::uint64_t>();
  auto read = [&](const nlohmann::json& arr, std::vector<TaxiTask>& out) {
    for (const auto& t : arr) {
      TaxiTask task{fam.map, t.at("start").get<int>(), t.at("passenger").get<int>(), t.at("goal").get<int>(),
                    t.at("id").get<int>()};
      for (int idx : {task.start, task.passenger, task.goal})
        if (idx < 0 || idx > 3) throw std::invalid_argument("task family: special index out of range");
      if (task.start == task.passenger && task.passenger == task.goal)
        throw std::invalid_argument("task family: degenerate task");
      out.push_back(task);
    }
  };
  read(j.at("train"), fam.train);
  read(j.at("test"), fam.test);
  return fam;
}

Bandit::Bandit(std::vector<double> payoffs) : payoffs_(std::move(payoffs)) {
  if (payoffs_.size() < 2) throw std::invalid_argument("bandit: need at least 2 arms");
}

double Bandit::expected_return(std::span<const double> probs) const {
  if (probs.size() != payoffs_.size()) throw std::invalid_argument("bandit: probability length mismatch");
  double e = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) e += probs[i] * payoffs_[i];
  return e;
}

ad::Var Bandit::expected_return(ad::Var probs) const {
  if (probs.numel() != payoffs_.size()) throw std::invalid_argument("bandit: probability length mismatch");
  ad::Var p = probs.tape()->leaf(payoffs_, probs.shape(), false);
  return ad::sum(probs * p);
}

std::vector<double> Bandit::softmax_return_gradient(std::span<const double> logits) const {
  if (logits.size() != payoffs_.size()) throw std::invalid_argument("bandit: logit length mismatch");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += p[i] = std::exp(logits[i] - mx);
  for (double& x : p) x /= z;
  const double e = expected_return(p);
  std::vector<double> g(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) g[i] = p[i] * (payoffs_[i] - e);
  return g;
}

Bandit make_bandit(std::vector<double> expected_payoffs) { return Bandit(std::move(expected_payoffs)); }

}  // namespace famp::envs
