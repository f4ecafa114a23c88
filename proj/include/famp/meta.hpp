#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "famp/advantage.hpp"
#include "famp/envs.hpp"
#include "famp/iopg.hpp"
#include "famp/policy.hpp"

namespace famp::meta {

class AblationMode {
 public:
  enum class Kind { Famp, MultiTask, LearnHighLevel, LearnAll, NoHierarchy, FixedTerm, SingleTask };

  AblationMode() = default;
  // "famp", "multi_task", "learn_high_level", "learn_all", "no_hierarchy",
  // "fixed_term", "single_task"; fixed_term carries the option length c.
  // Throws std::invalid_argument for anything else or c <= 0.
  static AblationMode parse(std::string_view name, int option_length = 7);
  static AblationMode of(Kind k, int option_length = 7);

  Kind kind() const { return kind_; }
  int option_length() const { return c_; }
  std::string name() const;
  std::string str() const;  // name, with "(c)" for fixed_term

  policy::TerminationMode termination() const;
  // theta_Omega starts from uniform zeros for every task (inner and test time).
  bool resets_high_level() const { return kind_ == Kind::Famp || kind_ == Kind::FixedTerm; }
  // The inner loop (and test-time adaptation) moves all three blocks.
  bool adapts_all() const { return kind_ == Kind::LearnAll || kind_ == Kind::NoHierarchy; }
  // The outer update writes theta_Omega.
  bool outer_updates_high_level() const { return !resets_high_level() && kind_ != Kind::SingleTask; }

  friend bool operator==(const AblationMode&, const AblationMode&) = default;

 private:
  AblationMode(Kind k, int c) : kind_(k), c_(c) {}
  Kind kind_ = Kind::Famp;
  int c_ = 7;
};

std::span<const std::string_view> ablation_names();

struct MetaConfig {
  std::size_t N_options = 4;
  std::size_t M_env_samples = 64;
  std::size_t L_adapt_steps = 2;
  std::size_t k_episodes = 10;
  double alpha_in = 10.0;
  double alpha_out = 0.01;
  double gamma = 0.95;
  double lambda_gae = 0.98;
  double lambda_dice = 0.0;
  int epochs = 2000;
  AblationMode mode;
  std::uint64_t seed = 0;
  std::uint64_t family_seed = 0;
  int checkpoint_every = 50;
  int max_steps = envs::kMaxSteps;
  std::optional<double> alpha_adapt;  // test-time SGD rate; see adapt_lr()
  double single_task_lr = 0.3;
  int single_task_updates = 100;
  double sub_init_scale = 0.1;
  int eval_steps = 10;
  bool log_wallclock = false;
  // Worker threads for the per-task computations; 0 = all cores. Never
  // changes results.
  unsigned jobs = 0;

  std::size_t options() const;       // 1 under no_hierarchy
  std::size_t inner_steps() const;   // 0 under multi_task
  double adapt_lr() const;           // alpha_adapt, else 1 for multi_task, else alpha_in
  // Throws std::invalid_argument naming the offending field.
  void validate() const;
};

// Which of the three parameter blocks an operation touches.
struct Blocks {
  bool hi = false;
  bool sub = false;
  bool term = false;
  static Blocks all() { return {true, true, true}; }
};

Blocks inner_blocks(const AblationMode& m);
Blocks outer_blocks(const AblationMode& m);

// Per-block gradients or updates, shaped like HierParams.
struct HierGrad {
  ad::Array hi;
  ad::Array sub;
  ad::Array term;
  static HierGrad zeros_like(const policy::HierParams& p);
  HierGrad& operator+=(const HierGrad& o);
  HierGrad& operator*=(double c);
};

// Adam in ascent form (b1 0.9, b2 0.999, eps 1e-8) over the chosen blocks.
class Adam {
 public:
  Adam(const policy::HierParams& shape_like, double lr, Blocks which);
  void ascend(policy::HierParams& p, const HierGrad& g);
  long steps() const { return t_; }

 private:
  double lr_;
  Blocks which_;
  long t_ = 0;
  HierGrad m_, v_;
};

// DiCE surrogate of one rollout batch on the tape: fits the baseline on the
// batch, computes GAE and builds the loaded-DiCE objective.
ad::Var batch_surrogate(const policy::HierVars& p, std::span<const iopg::Trajectory> trajs,
                        const MetaConfig& cfg);

struct InnerObjective {
  ad::Var objective;
  std::vector<iopg::Trajectory> trajs;
};

// Samples k episodes with the current values of `p` and returns the surrogate.
InnerObjective inner_objective(const policy::HierVars& p, const envs::TaxiTask& task, const MetaConfig& cfg,
                               Rng& rng);

// L ascent steps p <- p + alpha grad J(p, step) on the chosen blocks. With
// create_graph the steps stay differentiable. Environment-agnostic.
using Objective = std::function<ad::Var(const policy::HierVars&, std::size_t step)>;
policy::HierVars inner_adapt(const policy::HierVars& start, Blocks which, double alpha, std::size_t L,
                             const Objective& J, bool create_graph = true);

struct Adapted {
  policy::HierVars params;
  std::vector<double> step_returns;  // mean return of each inner batch
};

// The Taxi inner loop. Step j samples from the substream (key, j).
Adapted inner_adapt(const policy::HierVars& start, const envs::TaxiTask& task, const MetaConfig& cfg,
                    std::uint64_t key, bool create_graph = true);

struct TaskGradient {
  HierGrad grad;  // zero outside outer_blocks(mode)
  double pre_return = 0.0;
  double post_return = 0.0;
};

// Inner adaptation, one more batch with the adapted policy, gradient of its
// surrogate w.r.t. the pre-adaptation outer blocks. The outer batch's stream
// depends only on `key`, not on L.
TaskGradient task_gradient(const policy::HierParams& params, const envs::TaxiTask& task, const MetaConfig& cfg,
                           std::uint64_t key);

struct OuterGradient {
  HierGrad grad;  // averaged over tasks
  double pre_return = 0.0;
  double post_return = 0.0;
};

// task_gradient for each (task, key) on cfg.jobs workers, summed in slot
// order and divided by the number of tasks.
OuterGradient outer_gradient(const policy::HierParams& params, std::span<const envs::TaxiTask> tasks,
                             std::span<const std::uint64_t> keys, const MetaConfig& cfg);

struct EpochMetrics {
  double pre_return = 0.0;
  double post_return = 0.0;
  double grad_norm_sub = 0.0;
  double grad_norm_term = 0.0;
};

EpochMetrics outer_step(policy::HierParams& params, std::span<const envs::TaxiTask> tasks,
                        std::span<const std::uint64_t> keys, const MetaConfig& cfg, Adam& opt);

struct LogRow {
  int epoch = 0;
  std::string mode;
  double mean_post_adapt_return = 0.0;
  double mean_pre_adapt_return = 0.0;
  double wallclock_s = 0.0;
  double grad_norm_sub = 0.0;
  double grad_norm_term = 0.0;
};

struct TrainResult {
  policy::HierParams params;
  std::vector<LogRow> log;
};

policy::HierParams initial_params(const MetaConfig& cfg, const envs::TaxiMap& map);

// Tasks for one epoch: M uniform draws with replacement from the train split,
// or the whole train split under multi_task.
std::vector<envs::TaxiTask> sample_tasks(const envs::TaskFamily& family, const MetaConfig& cfg, int epoch);
std::vector<std::uint64_t> slot_keys(const MetaConfig& cfg, int epoch, std::size_t M);

// With a non-empty out_dir: train_log.csv, timing.log and
// checkpoint_<epoch>.bin every checkpoint_every epochs plus the last one
// (also copied to checkpoint_final.bin).
TrainResult meta_train(const MetaConfig& cfg, const envs::TaskFamily& family,
                       const std::filesystem::path& out_dir = {},
                       const std::function<void(const LogRow&)>& on_epoch = {});

void write_train_log(const std::filesystem::path& path, std::span<const LogRow> rows);

// Returns after each of eval_steps + 1 evaluations; entry 0 is pre-adaptation.
using AdaptationCurve = std::vector<double>;

// Evaluate on k fresh episodes, then one SGD step on separate episodes, and
// so on. theta_Omega is reset to zeros under famp / fixed_term. The final
// parameters go to `adapted` when given.
AdaptationCurve adapt_and_eval(const policy::HierParams& params, const envs::TaxiTask& task, int eval_steps,
                               const MetaConfig& cfg, std::uint64_t key, policy::HierParams* adapted = nullptr);

// IOPG from scratch on one task, all blocks, Adam at single_task_lr.
AdaptationCurve single_task_train(const envs::TaxiTask& task, const MetaConfig& cfg, int updates,
                                  std::uint64_t key);

void write_curve(const std::filesystem::path& path, const AdaptationCurve& curve, std::size_t k);

}  // namespace famp::meta
