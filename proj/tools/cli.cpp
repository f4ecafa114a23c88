#include "cli.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <CLI11.hpp>

#include "famp/config.hpp"
#include "famp/envs.hpp"
#include "famp/harness.hpp"
#include "famp/meta.hpp"
#include "famp/policy.hpp"
#include "famp/render.hpp"
#include "famp/rollout.hpp"

namespace famp::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// bad input the user can fix; maps to exit 2
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string keys_footer() {
  std::ostringstream os;
  os << "Config keys (JSON file via --config, or --set key=value):\n";
  for (const meta::KeyDoc& k : meta::config_keys())
    os << "  " << std::left << std::setw(20) << k.key << std::setw(8) << k.default_value << " " << k.help << "\n";
  return os.str();
}

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  unsigned jobs = 0;
  std::string out;
  bool quiet = false;
};

void add_common(CLI::App* sub, Common& c, bool with_config = true) {
  if (with_config) {
    sub->add_option("--config", c.config, "JSON config file");
    sub->add_option("--set", c.sets, "override, key=value (dotted paths allowed); repeatable")->take_all();
  }
  sub->add_option("--seed", c.seed, "global seed (overrides the config)");
  sub->add_option("--jobs", c.jobs, "worker threads, 0 = all cores")->capture_default_str();
  sub->add_option("--out", c.out, "output directory (default $FAMP_OUT_DIR, else ./famp_out)");
  sub->add_flag("--quiet", c.quiet, "no progress output");
  sub->footer(keys_footer());
}

fs::path out_dir(const Common& c, const std::string& env_out) {
  if (!c.out.empty()) return c.out;
  if (!env_out.empty()) return env_out;
  return "famp_out";
}

// config file keys on top of `base`, then --set, then --seed
meta::MetaConfig resolve_config(json base, const Common& c) {
  if (!c.config.empty()) {
    const json file = meta::load_json_file(c.config);
    if (!file.is_object()) throw meta::ConfigError("config file '" + c.config + "' must hold a JSON object");
    base.update(file);
  }
  for (const std::string& s : c.sets) meta::apply_override(base, s);
  if (c.seed) base["seed"] = *c.seed;
  meta::MetaConfig cfg = meta::config_from_json(base);
  cfg.jobs = c.jobs;
  return cfg;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error(path.string() + ": cannot open for writing");
  os << j.dump(2) << "\n";
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error(path.string() + ": cannot open for writing");
  os << text;
}

const envs::TaxiTask& task_or_usage(const envs::TaskFamily& fam, int id) {
  const int n = static_cast<int>(fam.size());
  if (id < 0 || id >= n)
    throw UsageError("task id " + std::to_string(id) + " out of range; valid ids are 0.." + std::to_string(n - 1));
  return fam.by_id(id);
}

struct Loaded {
  policy::HierParams params;
  meta::MetaConfig cfg;
};

Loaded load_checkpoint(const std::string& path, const Common& c) {
  if (path.empty()) throw UsageError("--checkpoint is required");
  auto [params, header] = policy::read_checkpoint(path);
  json base = header.contains("config") && header["config"].is_object() ? header["config"] : json::object();
  Loaded l{std::move(params), resolve_config(base, c)};
  if (l.params.dims.N != l.cfg.options())
    throw meta::ConfigError("checkpoint has " + std::to_string(l.params.dims.N) + " options but the config asks for " +
                            std::to_string(l.cfg.options()));
  return l;
}

int cmd_meta_train(const Common& c, const std::string& env_out, std::ostream& out, std::ostream& err) {
  const meta::MetaConfig cfg = resolve_config(json::object(), c);
  const fs::path dir = out_dir(c, env_out);
  fs::create_directories(dir);
  write_json(dir / "config.json", meta::config_to_json(cfg));
  const envs::TaskFamily fam = envs::task_family(cfg.family_seed);
  const auto res = meta::meta_train(cfg, fam, dir, [&](const meta::LogRow& r) {
    if (c.quiet) return;
    char buf[160];
    std::snprintf(buf, sizeof buf, "epoch %d/%d  pre %.3f  post %.3f\n", r.epoch, cfg.epochs, r.mean_pre_adapt_return,
                  r.mean_post_adapt_return);
    err << buf << std::flush;
  });
  out << "wrote " << (dir / "train_log.csv").string() << " (" << res.log.size() << " epochs)\n";
  return kExitOk;
}

int cmd_adapt(const Common& c, const std::string& ckpt, int task_id, std::optional<int> steps,
              const std::string& env_out, std::ostream& out) {
  const Loaded l = load_checkpoint(ckpt, c);
  const envs::TaskFamily fam = envs::task_family(l.cfg.family_seed);
  const envs::TaxiTask& task = task_or_usage(fam, task_id);
  const int n = steps.value_or(l.cfg.eval_steps);
  if (n < 0) throw UsageError("--steps must be non-negative");
  const auto curve = meta::adapt_and_eval(l.params, task, n, l.cfg, harness::test_key(l.cfg.seed, task.id));
  const fs::path dir = out_dir(c, env_out);
  fs::create_directories(dir);
  const fs::path path = dir / ("adapt_task" + std::to_string(task.id) + ".csv");
  meta::write_curve(path, curve, l.cfg.k_episodes);
  out << "wrote " << path.string() << "\n";
  return kExitOk;
}

int cmd_sweep(const Common& c, const std::string& spec_path, bool dry_run, const std::string& env_out,
              std::ostream& out, std::ostream& err) {
  json doc = meta::load_json_file(spec_path);
  if (!doc.is_object()) throw meta::ConfigError("spec file '" + spec_path + "' must hold a JSON object");
  if (!doc.contains("config")) doc["config"] = json::object();
  for (const std::string& s : c.sets) meta::apply_override(doc["config"], s);
  harness::ExperimentSpec spec = harness::spec_from_json(doc);
  if (c.seed) spec.seeds = {*c.seed};
  if (!c.out.empty() || spec.out_dir.empty()) spec.out_dir = out_dir(c, env_out);
  const auto cells = harness::expand_cells(spec);
  if (dry_run) {
    out << "point\tseed\tmode\tconfig_hash\tdir\n";
    for (const harness::Cell& cell : cells)
      out << cell.point << "\t" << cell.seed << "\t" << cell.config.mode.str() << "\t" << cell.config_hash << "\t"
          << cell.dir.string() << "\n";
    return kExitOk;
  }
  const auto rep = harness::run_experiment(spec, c.jobs, c.quiet ? nullptr : &err);
  out << rep.completed << " completed, " << rep.skipped << " skipped, " << rep.failed << " failed\n";
  return rep.failed == 0 ? kExitOk : kExitRuntime;
}

int cmd_visualize(const Common& c, const std::string& ckpt, int task_id, int adapt_steps, const std::string& env_out,
                  std::ostream& out) {
  const Loaded l = load_checkpoint(ckpt, c);
  const envs::TaskFamily fam = envs::task_family(l.cfg.family_seed);
  const envs::TaxiTask& task = task_or_usage(fam, task_id);
  if (adapt_steps < 0) throw UsageError("--adapt must be non-negative");
  const std::uint64_t key = harness::test_key(l.cfg.seed, task.id);
  policy::HierParams p;
  meta::adapt_and_eval(l.params, task, adapt_steps, l.cfg, key, &p);
  Rng rng(derive_seed({key, 0x76697a}));
  const auto mode = l.cfg.mode.termination();
  const auto trajs = harness::rollout(task, p, l.cfg.k_episodes, rng, mode, l.cfg.max_steps);
  const fs::path dir = out_dir(c, env_out);
  fs::create_directories(dir);
  const fs::path usage = dir / ("options_task" + std::to_string(task.id) + ".svg");
  write_text(usage, harness::render_option_map(p, task, trajs, mode));
  out << "wrote " << usage.string() << "\n";
  const auto maps = harness::render_term_maps(p, task.layout());
  for (std::size_t w = 0; w < maps.size(); ++w) {
    const fs::path path = dir / ("termination_option" + std::to_string(w) + ".svg");
    write_text(path, maps[w]);
    out << "wrote " << path.string() << "\n";
  }
  return kExitOk;
}

int cmd_list_tasks(std::uint64_t family_seed, std::ostream& out) {
  const envs::TaskFamily fam = envs::task_family(family_seed);
  const auto& sp = fam.map->specials();
  out << "id\tsplit\tstart\tpassenger\tgoal\tshortest_path\toptimal_return\n";
  for (const envs::TaxiTask& t : fam.all()) {
    char ret[32];
    std::snprintf(ret, sizeof ret, "%.1f", envs::optimal_return(t));
    out << t.id << "\t" << (fam.is_test(t.id) ? "test" : "train") << "\t" << sp[t.start].color << "\t"
        << sp[t.passenger].color << "\t" << sp[t.goal].color << "\t" << envs::shortest_path_length(t) << "\t" << ret
        << "\n";
  }
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, const std::string& env_out) {
  CLI::App app{"Hierarchical meta-reinforcement learning on the Taxi task family", "famp"};
  app.require_subcommand(1);
  app.set_version_flag("--version", FAMP_VERSION);

  Common c;
  std::string ckpt, spec_path;
  int task_id = -1, adapt_steps = 0;
  std::optional<int> steps;
  bool dry_run = false;
  std::uint64_t family_seed = 0;

  auto* train = app.add_subcommand("meta-train", "meta-train a hierarchical policy; writes train_log.csv and checkpoints");
  add_common(train, c);

  auto* adapt = app.add_subcommand("adapt", "adapt a checkpoint to one task; writes adapt_task<id>.csv");
  add_common(adapt, c);
  adapt->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  adapt->add_option("--task", task_id, "task id (see list-tasks)")->required();
  adapt->add_option("--steps", steps, "adaptation updates (default eval_steps)");

  auto* sweep = app.add_subcommand("sweep", "run a multi-seed experiment spec; resumes from its manifest");
  add_common(sweep, c);
  sweep->add_option("spec", spec_path, "experiment spec (JSON: config, seeds, sweep, out, maps)")->required();
  sweep->add_flag("--dry-run", dry_run, "print the cell matrix and exit");

  auto* viz = app.add_subcommand("visualize", "SVG option-usage map and per-option termination maps");
  add_common(viz, c);
  viz->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  viz->add_option("--task", task_id, "task id (see list-tasks)")->required();
  viz->add_option("--adapt", adapt_steps, "adaptation updates before rendering")->capture_default_str();

  auto* list = app.add_subcommand("list-tasks", "print the task family as TSV");
  list->add_option("--family-seed", family_seed, "seed of the train/test split")->capture_default_str();

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const bool info = e.get_exit_code() == 0;
    const int code = app.exit(e, out, err);
    return info ? code : kExitUsage;
  }

  const std::string env = env_out;
  try {
    if (*train) return cmd_meta_train(c, env, out, err);
    if (*adapt) return cmd_adapt(c, ckpt, task_id, steps, env, out);
    if (*sweep) return cmd_sweep(c, spec_path, dry_run, env, out, err);
    if (*viz) return cmd_visualize(c, ckpt, task_id, adapt_steps, env, out);
    if (*list) return cmd_list_tasks(family_seed, out);
  } catch (const meta::ConfigError& e) {
    err << "famp: " << e.what() << "\n";
    return kExitUsage;
  } catch (const policy::CheckpointError& e) {
    err << "famp: " << e.what() << "\n";
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "famp: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "famp: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "famp: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace famp::cli
