#include "famp/meta.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <thread>

#include "famp/config.hpp"
#include "famp/rollout.hpp"

namespace famp::meta {

using ad::Array;
using ad::Var;
using policy::HierParams;
using policy::HierVars;

namespace {

// substream tags
constexpr std::uint64_t kSampleTag = 0x73616d70;
constexpr std::uint64_t kSlotTag = 0x736c6f74;
constexpr std::uint64_t kInnerTag = 0x696e6e;
constexpr std::uint64_t kOuterTag = 0x6f7574;
constexpr std::uint64_t kEvalTag = 0x6576616c;
constexpr std::uint64_t kAdaptTag = 0x61647074;
constexpr std::uint64_t kInitTag = 0x696e6974;

constexpr std::array<std::string_view, 7> kNames = {"famp",         "multi_task", "learn_high_level", "learn_all",
                                                    "no_hierarchy", "fixed_term", "single_task"};

std::vector<Var> pick(const HierVars& v, Blocks b) {
  std::vector<Var> out;
  if (b.hi) out.push_back(v.hi);
  if (b.sub) out.push_back(v.sub);
  if (b.term) out.push_back(v.term);
  return out;
}

HierGrad unpack(const HierParams& like, Blocks b, std::vector<Array> g) {
  HierGrad out = HierGrad::zeros_like(like);
  std::size_t i = 0;
  if (b.hi) out.hi = std::move(g[i++]);
  if (b.sub) out.sub = std::move(g[i++]);
  if (b.term) out.term = std::move(g[i++]);
  return out;
}

void axpy(Array& y, double a, const Array& x) {
  for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += a * x.data[i];
}

double norm(const Array& a) {
  double s = 0.0;
  for (double x : a.data) s += x * x;
  return std::sqrt(s);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

// -- modes and config ---------------------------------------------------------

AblationMode AblationMode::parse(std::string_view name, int option_length) {
  for (std::size_t i = 0; i < kNames.size(); ++i)
    if (name == kNames[i]) return of(static_cast<Kind>(i), option_length);
  std::string valid;
  for (auto n : kNames) valid += (valid.empty() ? "" : ", ") + std::string(n);
  throw std::invalid_argument("unknown mode '" + std::string(name) + "' (valid: " + valid + ")");
}

AblationMode AblationMode::of(Kind k, int option_length) {
  if (option_length <= 0) throw std::invalid_argument("option length must be positive");
  return AblationMode(k, option_length);
}

std::string AblationMode::name() const { return std::string(kNames[static_cast<std::size_t>(kind_)]); }

std::string AblationMode::str() const {
  return kind_ == Kind::FixedTerm ? name() + "(" + std::to_string(c_) + ")" : name();
}

policy::TerminationMode AblationMode::termination() const {
  return kind_ == Kind::FixedTerm ? policy::TerminationMode::fixed(c_) : policy::TerminationMode::learned();
}

std::span<const std::string_view> ablation_names() { return kNames; }

std::size_t MetaConfig::options() const { return mode.kind() == AblationMode::Kind::NoHierarchy ? 1 : N_options; }

std::size_t MetaConfig::inner_steps() const {
  return mode.kind() == AblationMode::Kind::MultiTask ? 0 : L_adapt_steps;
}

double MetaConfig::adapt_lr() const {
  if (alpha_adapt) return *alpha_adapt;
  return mode.kind() == AblationMode::Kind::MultiTask ? 1.0 : alpha_in;
}

void MetaConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("config: ") + what);
  };
  need(N_options >= 1 && N_options <= 64, "N_options must be in [1, 64]");
  need(M_env_samples >= 1, "M_env_samples must be at least 1");
  need(k_episodes >= 1, "k_episodes must be at least 1");
  need(gamma >= 0.0 && gamma <= 1.0, "gamma must be in [0, 1]");
  need(lambda_gae >= 0.0 && lambda_gae <= 1.0, "lambda_gae must be in [0, 1]");
  need(lambda_dice >= 0.0 && lambda_dice <= 1.0, "lambda_dice must be in [0, 1]");
  need(epochs >= 0, "epochs must be non-negative");
  need(checkpoint_every >= 1, "checkpoint_every must be positive");
  need(max_steps >= 1 && max_steps <= envs::kMaxSteps, "max_steps must be in [1, 1500]");
  need(single_task_updates >= 0, "single_task_updates must be non-negative");
  need(eval_steps >= 0, "eval_steps must be non-negative");
  need(sub_init_scale >= 0.0, "sub_init_scale must be non-negative");
  need(std::isfinite(alpha_in) && std::isfinite(alpha_out) && std::isfinite(single_task_lr),
       "learning rates must be finite");
}

Blocks inner_blocks(const AblationMode& m) { return m.adapts_all() ? Blocks::all() : Blocks{true, false, false}; }

Blocks outer_blocks(const AblationMode& m) {
  return m.outer_updates_high_level() || m.kind() == AblationMode::Kind::SingleTask ? Blocks::all()
                                                                                     : Blocks{false, true, true};
}

// -- gradients and Adam ---------------------------------------------------------

HierGrad HierGrad::zeros_like(const HierParams& p) {
  return {Array::zeros(p.hi.shape), Array::zeros(p.sub.shape), Array::zeros(p.term.shape)};
}

HierGrad& HierGrad::operator+=(const HierGrad& o) {
  axpy(hi, 1.0, o.hi);
  axpy(sub, 1.0, o.sub);
  axpy(term, 1.0, o.term);
  return *this;
}

HierGrad& HierGrad::operator*=(double c) {
  for (Array* a : {&hi, &sub, &term})
    for (double& x : a->data) x *= c;
  return *this;
}

Adam::Adam(const HierParams& like, double lr, Blocks which)
    : lr_(lr), which_(which), m_(HierGrad::zeros_like(like)), v_(HierGrad::zeros_like(like)) {}

void Adam::ascend(HierParams& p, const HierGrad& g) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ++t_;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  auto upd = [&](Array& x, Array& m, Array& v, const Array& gr) {
    for (std::size_t i = 0; i < x.data.size(); ++i) {
      m.data[i] = b1 * m.data[i] + (1 - b1) * gr.data[i];
      v.data[i] = b2 * v.data[i] + (1 - b2) * gr.data[i] * gr.data[i];
      x.data[i] += lr_ * (m.data[i] / c1) / (std::sqrt(v.data[i] / c2) + eps);
    }
  };
  if (which_.hi) upd(p.hi, m_.hi, v_.hi, g.hi);
  if (which_.sub) upd(p.sub, m_.sub, v_.sub, g.sub);
  if (which_.term) upd(p.term, m_.term, v_.term, g.term);
}

// -- objectives -------------------------------------------------------------------

Var batch_surrogate(const HierVars& p, std::span<const iopg::Trajectory> trajs, const MetaConfig& cfg) {
  const advantage::LinearBaseline b = advantage::fit_baseline(trajs, cfg.gamma, p.dims.S);
  const auto adv = advantage::batch_advantages(trajs, b, cfg.gamma, cfg.lambda_gae);
  return iopg::dice_surrogate(p, trajs, adv, cfg.lambda_dice, cfg.mode.termination());
}

InnerObjective inner_objective(const HierVars& p, const envs::TaxiTask& task, const MetaConfig& cfg, Rng& rng) {
  InnerObjective out;
  out.trajs = harness::rollout(task, policy::values_of(p), cfg.k_episodes, rng, cfg.mode.termination(),
                               cfg.max_steps);
  out.objective = batch_surrogate(p, out.trajs, cfg);
  return out;
}

HierVars inner_adapt(const HierVars& start, Blocks which, double alpha, std::size_t L, const Objective& J,
                     bool create_graph) {
  HierVars cur = start;
  for (std::size_t j = 0; j < L; ++j) {
    const std::vector<Var> wrt = pick(cur, which);
    const std::vector<Var> g = ad::grad(J(cur, j), wrt, create_graph);
    std::size_t i = 0;
    if (which.hi) cur.hi = cur.hi + alpha * g[i++];
    if (which.sub) cur.sub = cur.sub + alpha * g[i++];
    if (which.term) cur.term = cur.term + alpha * g[i++];
  }
  return cur;
}

Adapted inner_adapt(const HierVars& start, const envs::TaxiTask& task, const MetaConfig& cfg, std::uint64_t key,
                    bool create_graph) {
  Adapted out;
  auto J = [&](const HierVars& cur, std::size_t j) {
    Rng rng(derive_seed({key, kInnerTag, j}));
    InnerObjective r = inner_objective(cur, task, cfg, rng);
    out.step_returns.push_back(harness::mean_return(r.trajs));
    return r.objective;
  };
  out.params = inner_adapt(start, inner_blocks(cfg.mode), cfg.alpha_in, cfg.inner_steps(), J, create_graph);
  return out;
}

TaskGradient task_gradient(const HierParams& params, const envs::TaxiTask& task, const MetaConfig& cfg,
                           std::uint64_t key) {
  HierParams start = params;
  if (cfg.mode.resets_high_level()) start.hi = Array::zeros(start.hi.shape);
  const Blocks in = inner_blocks(cfg.mode), outb = outer_blocks(cfg.mode);
  ad::Tape tape;
  const HierVars v = policy::on_tape(tape, start, {in.hi || outb.hi, in.sub || outb.sub, in.term || outb.term});
  Adapted a = inner_adapt(v, task, cfg, key);
  Rng rng(derive_seed({key, kOuterTag}));
  InnerObjective r = inner_objective(a.params, task, cfg, rng);
  TaskGradient out;
  out.grad = unpack(params, outb, ad::grad_values(r.objective, pick(v, outb)));
  out.post_return = harness::mean_return(r.trajs);
  out.pre_return = a.step_returns.empty() ? out.post_return : a.step_returns.front();
  return out;
}

OuterGradient outer_gradient(const HierParams& params, std::span<const envs::TaxiTask> tasks,
                             std::span<const std::uint64_t> keys, const MetaConfig& cfg) {
  if (tasks.empty() || tasks.size() != keys.size())
    throw std::invalid_argument("outer_gradient: need one key per task and at least one task");
  const std::size_t M = tasks.size();
  std::vector<TaskGradient> res(M);
  std::vector<std::exception_ptr> err(M);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < M;) {
      try {
        res[i] = task_gradient(params, tasks[i], cfg, keys[i]);
      } catch (...) {
        err[i] = std::current_exception();
      }
    }
  };
  unsigned n = cfg.jobs ? cfg.jobs : std::max(1u, std::thread::hardware_concurrency());
  n = static_cast<unsigned>(std::min<std::size_t>(n, M));
  if (n <= 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < n; ++w) pool.emplace_back(work);
  }
  for (const auto& e : err)
    if (e) std::rethrow_exception(e);

  // fixed slot order keeps the sum independent of scheduling
  OuterGradient out;
  out.grad = HierGrad::zeros_like(params);
  for (const TaskGradient& r : res) {
    out.grad += r.grad;
    out.pre_return += r.pre_return;
    out.post_return += r.post_return;
  }
  out.grad *= 1.0 / static_cast<double>(M);
  out.pre_return /= static_cast<double>(M);
  out.post_return /= static_cast<double>(M);
  return out;
}

EpochMetrics outer_step(HierParams& params, std::span<const envs::TaxiTask> tasks,
                        std::span<const std::uint64_t> keys, const MetaConfig& cfg, Adam& opt) {
  OuterGradient g = outer_gradient(params, tasks, keys, cfg);
  opt.ascend(params, g.grad);
  return {g.pre_return, g.post_return, norm(g.grad.sub), norm(g.grad.term)};
}

// -- training ---------------------------------------------------------------------

HierParams initial_params(const MetaConfig& cfg, const envs::TaxiMap& map) {
  return policy::init_params(static_cast<std::size_t>(map.state_dim()), cfg.options(), envs::kNumActions,
                             derive_seed({kInitTag, cfg.seed}), cfg.sub_init_scale);
}

std::vector<envs::TaxiTask> sample_tasks(const envs::TaskFamily& family, const MetaConfig& cfg, int epoch) {
  if (cfg.mode.kind() == AblationMode::Kind::MultiTask) return family.train;
  Rng rng(derive_seed({kSampleTag, cfg.seed, static_cast<std::uint64_t>(epoch)}));
  std::vector<envs::TaxiTask> out;
  out.reserve(cfg.M_env_samples);
  for (std::size_t i = 0; i < cfg.M_env_samples; ++i) out.push_back(family.train[rng.below(family.train.size())]);
  return out;
}

std::vector<std::uint64_t> slot_keys(const MetaConfig& cfg, int epoch, std::size_t M) {
  std::vector<std::uint64_t> keys(M);
  for (std::size_t i = 0; i < M; ++i) keys[i] = derive_seed({kSlotTag, cfg.seed, static_cast<std::uint64_t>(epoch), i});
  return keys;
}

namespace {

constexpr const char* kLogHeader =
    "epoch,mode,mean_post_adapt_return,mean_pre_adapt_return,wallclock_s,grad_norm_sub,grad_norm_term\n";

std::string log_line(const LogRow& r) {
  return std::to_string(r.epoch) + "," + r.mode + "," + fmt(r.mean_post_adapt_return) + "," +
         fmt(r.mean_pre_adapt_return) + "," + fmt(r.wallclock_s) + "," + fmt(r.grad_norm_sub) + "," +
         fmt(r.grad_norm_term) + "\n";
}

std::ofstream open_or_throw(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::trunc);
  if (!os) throw std::runtime_error(p.string() + ": cannot open for writing");
  return os;
}

void save(const std::filesystem::path& dir, const HierParams& p, const MetaConfig& cfg, int epoch, bool final) {
  nlohmann::json extra = {{"mode", cfg.mode.name()},
                          {"option_length", cfg.mode.option_length()},
                          {"seed", cfg.seed},
                          {"family_seed", cfg.family_seed},
                          {"epoch", epoch},
                          {"config", config_to_json(cfg)}};
  char name[40];
  std::snprintf(name, sizeof name, "checkpoint_%05d.bin", epoch);
  policy::write_checkpoint(dir / name, p, extra);
  if (final) policy::write_checkpoint(dir / "checkpoint_final.bin", p, extra);
}

}  // namespace

void write_train_log(const std::filesystem::path& path, std::span<const LogRow> rows) {
  std::ofstream os = open_or_throw(path);
  os << kLogHeader;
  for (const LogRow& r : rows) os << log_line(r);
  if (!os) throw std::runtime_error(path.string() + ": write failed");
}

TrainResult meta_train(const MetaConfig& cfg, const envs::TaskFamily& family, const std::filesystem::path& out_dir,
                       const std::function<void(const LogRow&)>& on_epoch) {
  cfg.validate();
  if (cfg.mode.kind() == AblationMode::Kind::SingleTask)
    throw std::invalid_argument("meta_train: single_task has no meta-training phase");
  TrainResult res;
  res.params = initial_params(cfg, *family.map);
  Adam opt(res.params, cfg.alpha_out, outer_blocks(cfg.mode));

  std::ofstream log, timing;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    log = open_or_throw(out_dir / "train_log.csv");
    timing = open_or_throw(out_dir / "timing.log");
    log << kLogHeader << std::flush;
    if (cfg.epochs == 0) save(out_dir, res.params, cfg, 0, true);
  }
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto tasks = sample_tasks(family, cfg, epoch);
    const auto keys = slot_keys(cfg, epoch, tasks.size());
    const EpochMetrics m = outer_step(res.params, tasks, keys, cfg, opt);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    LogRow row{epoch, cfg.mode.str(), m.post_return, m.pre_return, cfg.log_wallclock ? secs : 0.0,
               m.grad_norm_sub, m.grad_norm_term};
    res.log.push_back(row);
    if (!out_dir.empty()) {
      log << log_line(row) << std::flush;
      timing << "epoch " << epoch << " " << fmt(secs) << " s\n" << std::flush;
      if (!log) throw std::runtime_error((out_dir / "train_log.csv").string() + ": write failed");
      if (epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs)
        save(out_dir, res.params, cfg, epoch, epoch == cfg.epochs);
    }
    if (on_epoch) on_epoch(row);
  }
  return res;
}

// -- evaluation -------------------------------------------------------------------

AdaptationCurve adapt_and_eval(const HierParams& params, const envs::TaxiTask& task, int eval_steps,
                               const MetaConfig& cfg, std::uint64_t key, HierParams* adapted) {
  if (eval_steps < 0) throw std::invalid_argument("adapt_and_eval: eval_steps must be non-negative");
  HierParams p = params;
  if (cfg.mode.resets_high_level()) p.hi = Array::zeros(p.hi.shape);
  const Blocks which = inner_blocks(cfg.mode);
  const double lr = cfg.adapt_lr();
  const auto mode = cfg.mode.termination();
  AdaptationCurve curve;
  for (int u = 0;; ++u) {
    Rng er(derive_seed({key, kEvalTag, static_cast<std::uint64_t>(u)}));
    const auto eval = harness::rollout(task, p, cfg.k_episodes, er, mode, cfg.max_steps);
    curve.push_back(harness::mean_return(eval));
    if (u == eval_steps) {
      if (adapted) *adapted = p;
      break;
    }
    Rng ar(derive_seed({key, kAdaptTag, static_cast<std::uint64_t>(u)}));
    ad::Tape tape;
    const HierVars v = policy::on_tape(tape, p, {which.hi, which.sub, which.term});
    const InnerObjective r = inner_objective(v, task, cfg, ar);
    const HierGrad g = unpack(p, which, ad::grad_values(r.objective, pick(v, which)));
    axpy(p.hi, lr, g.hi);
    axpy(p.sub, lr, g.sub);
    axpy(p.term, lr, g.term);
  }
  return curve;
}

AdaptationCurve single_task_train(const envs::TaxiTask& task, const MetaConfig& cfg, int updates,
                                  std::uint64_t key) {
  if (updates < 0) throw std::invalid_argument("single_task_train: updates must be non-negative");
  HierParams p = policy::init_params(static_cast<std::size_t>(task.layout().state_dim()), cfg.options(),
                                     envs::kNumActions, derive_seed({key, kInitTag}), cfg.sub_init_scale);
  Adam opt(p, cfg.single_task_lr, Blocks::all());
  const auto mode = cfg.mode.termination();
  AdaptationCurve curve;
  for (int u = 0;; ++u) {
    Rng er(derive_seed({key, kEvalTag, static_cast<std::uint64_t>(u)}));
    curve.push_back(harness::mean_return(harness::rollout(task, p, cfg.k_episodes, er, mode, cfg.max_steps)));
    if (u == updates) break;
    Rng ar(derive_seed({key, kAdaptTag, static_cast<std::uint64_t>(u)}));
    ad::Tape tape;
    const HierVars v = policy::on_tape(tape, p);
    const InnerObjective r = inner_objective(v, task, cfg, ar);
    opt.ascend(p, unpack(p, Blocks::all(), ad::grad_values(r.objective, {v.hi, v.sub, v.term})));
  }
  return curve;
}

void write_curve(const std::filesystem::path& path, const AdaptationCurve& curve, std::size_t k) {
  std::ofstream os = open_or_throw(path);
  os << "update,episodes,mean_return\n";
  for (std::size_t u = 0; u < curve.size(); ++u) os << u << "," << u * k << "," << fmt(curve[u]) << "\n";
  if (!os) throw std::runtime_error(path.string() + ": write failed");
}

}  // namespace famp::meta
