#include "famp/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "famp/config.hpp"
#include "famp/render.hpp"

namespace famp::harness {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kTestTag = 0x74657374;
constexpr std::uint64_t kMapTag = 0x6d6170;
constexpr std::uint64_t kBootTag = 0x626f6f74;
constexpr int kManifestFormat = 1;

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double quantile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

std::string value_label(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error(path.string() + ": cannot open for writing");
  os << text;
  if (!os) throw std::runtime_error(path.string() + ": write failed");
}

// write-then-rename so an interrupted run never leaves half a manifest
void write_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  write_text(tmp, text);
  fs::rename(tmp, path);
}

std::vector<double> read_curve(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error(path.string() + ": cannot open");
  std::string line;
  std::getline(is, line);
  std::vector<double> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    out.push_back(std::strtod(line.c_str() + comma + 1, nullptr));
  }
  return out;
}

std::string cell_key(const Cell& c) { return c.point + "/" + std::to_string(c.seed); }

}  // namespace

std::uint64_t test_key(std::uint64_t seed, int task_id) {
  return derive_seed({kTestTag, seed, static_cast<std::uint64_t>(task_id)});
}

Interval bootstrap_ci(std::span<const double> samples, Rng& rng, std::size_t resamples, double level) {
  if (samples.empty()) throw std::invalid_argument("bootstrap_ci: no samples");
  if (resamples == 0) throw std::invalid_argument("bootstrap_ci: resamples must be positive");
  if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("bootstrap_ci: level must be in (0, 1)");
  std::vector<double> xs(samples.begin(), samples.end());
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  Interval r;
  r.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(n);
  if (n == 1 || xs.front() == xs.back()) {
    r.lower = r.upper = r.mean;
    return r;
  }
  std::vector<double> means(resamples);
  for (double& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += xs[rng.below(n)];
    m = s / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  const double tail = (1.0 - level) / 2.0;
  r.lower = std::min(quantile(means, tail), r.mean);
  r.upper = std::max(quantile(means, 1.0 - tail), r.mean);
  return r;
}

ExperimentSpec spec_from_json(const json& j) {
  if (!j.is_object()) throw meta::ConfigError("experiment spec must be a JSON object");
  ExperimentSpec s;
  for (const auto& [key, v] : j.items()) {
    if (key == "config") {
      if (!v.is_object()) throw meta::ConfigError("'config' must be an object");
      s.config = v;
    } else if (key == "seeds") {
      if (!v.is_array() || v.empty()) throw meta::ConfigError("'seeds' must be a non-empty list");
      s.seeds.clear();
      for (const json& x : v) {
        if (!x.is_number_integer() || x.get<std::int64_t>() < 0) throw meta::ConfigError("'seeds' entries must be non-negative integers");
        s.seeds.push_back(x.get<std::uint64_t>());
      }
    } else if (key == "sweep") {
      if (!v.is_object()) throw meta::ConfigError("'sweep' must be an object of key -> list");
      for (const auto& [axis, vals] : v.items()) {
        if (!vals.is_array() || vals.empty())
          throw meta::ConfigError("sweep axis '" + axis + "' must be a non-empty list");
        s.sweep.push_back({axis, std::vector<json>(vals.begin(), vals.end())});
      }
    } else if (key == "out") {
      if (!v.is_string()) throw meta::ConfigError("'out' must be a string");
      s.out_dir = v.get<std::string>();
    } else if (key == "maps") {
      if (!v.is_boolean()) throw meta::ConfigError("'maps' must be a boolean");
      s.maps = v.get<bool>();
    } else {
      throw meta::ConfigError("unknown experiment key '" + key + "'");
    }
  }
  return s;
}

std::vector<Cell> expand_cells(const ExperimentSpec& spec) {
  if (spec.seeds.empty()) throw meta::ConfigError("experiment needs at least one seed");
  std::size_t points = 1;
  for (const SweepAxis& a : spec.sweep) {
    if (a.values.empty()) throw meta::ConfigError("sweep axis '" + a.key + "' has no values");
    points *= a.values.size();
  }
  std::vector<Cell> cells;
  for (std::size_t p = 0; p < points; ++p) {
    json base = spec.config;
    std::string point;
    std::size_t rest = p;
    std::vector<std::size_t> idx(spec.sweep.size());
    for (std::size_t a = spec.sweep.size(); a-- > 0;) {
      idx[a] = rest % spec.sweep[a].values.size();
      rest /= spec.sweep[a].values.size();
    }
    for (std::size_t a = 0; a < spec.sweep.size(); ++a) {
      const json& v = spec.sweep[a].values[idx[a]];
      base[spec.sweep[a].key] = v;
      if (!point.empty()) point += "__";
      point += spec.sweep[a].key + "=" + value_label(v);
    }
    if (point.empty()) point = "base";
    for (std::uint64_t seed : spec.seeds) {
      json j = base;
      j["seed"] = seed;
      Cell c;
      c.point = point;
      c.seed = seed;
      c.config = meta::config_from_json(j);
      c.config_json = meta::config_to_json(c.config);
      c.config_hash = meta::hex64(meta::config_hash(c.config_json));
      c.dir = spec.out_dir / point / std::to_string(seed);
      cells.push_back(std::move(c));
    }
  }
  return cells;
}

std::vector<std::string> run_cell(const Cell& cell, const envs::TaskFamily& family, unsigned jobs, bool maps) {
  meta::MetaConfig cfg = cell.config;
  cfg.jobs = jobs;
  fs::create_directories(cell.dir);
  std::vector<std::string> files;
  std::vector<meta::AdaptationCurve> curves;
  const bool single = cfg.mode.kind() == meta::AblationMode::Kind::SingleTask;

  policy::HierParams trained;
  if (!single) {
    trained = meta::meta_train(cfg, family, cell.dir).params;
    files.push_back("train_log.csv");
    files.push_back("timing.log");
  }
  policy::HierParams first_adapted;
  for (std::size_t i = 0; i < family.test.size(); ++i) {
    const envs::TaxiTask& task = family.test[i];
    const std::uint64_t key = test_key(cell.seed, task.id);
    meta::AdaptationCurve c =
        single ? meta::single_task_train(task, cfg, cfg.single_task_updates, key)
               : meta::adapt_and_eval(trained, task, cfg.eval_steps, cfg, key, i == 0 ? &first_adapted : nullptr);
    const std::string name = "adapt_task" + std::to_string(task.id) + ".csv";
    meta::write_curve(cell.dir / name, c, cfg.k_episodes);
    files.push_back(name);
    curves.push_back(std::move(c));
  }

  meta::AdaptationCurve mean(curves.front().size(), 0.0);
  for (const auto& c : curves)
    for (std::size_t u = 0; u < mean.size(); ++u) mean[u] += c[u];
  for (double& v : mean) v /= static_cast<double>(curves.size());
  meta::write_curve(cell.dir / "curve.csv", mean, cfg.k_episodes);
  files.push_back("curve.csv");

  if (maps && !single && !family.test.empty()) {
    fs::create_directories(cell.dir / "maps");
    const envs::TaxiTask& task = family.test.front();
    Rng rng(derive_seed({kMapTag, cell.seed, static_cast<std::uint64_t>(task.id)}));
    const auto mode = cfg.mode.termination();
    const auto trajs = rollout(task, first_adapted, cfg.k_episodes, rng, mode, cfg.max_steps);
    const std::string usage = "maps/options_task" + std::to_string(task.id) + ".svg";
    write_text(cell.dir / usage, render_option_map(first_adapted, task, trajs, mode));
    files.push_back(usage);
    const auto term = render_term_maps(trained, task.layout());
    for (std::size_t w = 0; w < term.size(); ++w) {
      const std::string name = "maps/termination_option" + std::to_string(w) + ".svg";
      write_text(cell.dir / name, term[w]);
      files.push_back(name);
    }
  }

  if (!single) {
    std::vector<std::string> ckpts;
    for (const auto& e : fs::directory_iterator(cell.dir)) {
      const std::string n = e.path().filename().string();
      if (n.starts_with("checkpoint_") && n.ends_with(".bin")) ckpts.push_back(n);
    }
    std::sort(ckpts.begin(), ckpts.end());
    files.insert(files.end(), ckpts.begin(), ckpts.end());
  }
  return files;
}

RunReport run_experiment(const ExperimentSpec& spec, unsigned jobs, std::ostream* progress) {
  if (spec.out_dir.empty()) throw meta::ConfigError("experiment has no output directory");
  const std::vector<Cell> cells = expand_cells(spec);
  fs::create_directories(spec.out_dir);
  const fs::path manifest_path = spec.out_dir / "manifest.json";

  json manifest = {{"format", kManifestFormat}, {"cells", json::object()}};
  if (fs::exists(manifest_path)) {
    try {
      json old = meta::load_json_file(manifest_path.string());
      if (old.is_object() && old.value("format", 0) == kManifestFormat && old.contains("cells") &&
          old["cells"].is_object())
        manifest["cells"] = old["cells"];
    } catch (const std::exception&) {
      // unreadable manifest: rerun everything
    }
  }
  manifest["version"] = FAMP_VERSION;
  manifest["seeds"] = spec.seeds;
  json axes = json::object();
  for (const SweepAxis& a : spec.sweep) axes[a.key] = a.values;
  manifest["sweep"] = axes;
  manifest["base_config"] = spec.config;

  auto already_done = [&](const Cell& c) {
    const auto& all = manifest["cells"];
    const std::string k = cell_key(c);
    if (!all.contains(k)) return false;
    const json& e = all[k];
    if (e.value("status", "") != "complete" || e.value("config_hash", "") != c.config_hash) return false;
    if (!e.contains("files")) return false;
    for (const json& f : e["files"])
      if (!fs::exists(c.dir / f.value("path", ""))) return false;
    return fs::exists(c.dir / "curve.csv");
  };

  std::vector<std::size_t> todo;
  RunReport report;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (already_done(cells[i])) {
      ++report.skipped;
      if (progress) *progress << "skip " << cell_key(cells[i]) << " (complete)\n";
    } else {
      todo.push_back(i);
    }
  }

  std::map<std::uint64_t, envs::TaskFamily> families;
  for (const Cell& c : cells)
    if (!families.contains(c.config.family_seed)) families.emplace(c.config.family_seed, envs::task_family(c.config.family_seed));

  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const unsigned total = jobs == 0 ? hw : jobs;
  const unsigned workers = std::max(1u, std::min<unsigned>(total, static_cast<unsigned>(todo.size())));
  const unsigned per_cell = std::max(1u, total / workers);

  std::mutex mu;
  std::atomic<std::size_t> next{0};
  auto record = [&](const Cell& c, const std::string& status, const std::vector<std::string>& files,
                    const std::string& error) {
    json e = {{"point", c.point},       {"seed", c.seed},      {"dir", fs::relative(c.dir, spec.out_dir).string()},
              {"status", status},       {"config_hash", c.config_hash}, {"config", c.config_json}};
    json fl = json::array();
    for (const std::string& f : files) fl.push_back({{"path", f}, {"config_hash", c.config_hash}});
    e["files"] = fl;
    if (!error.empty()) e["error"] = error;
    std::lock_guard lock(mu);
    manifest["cells"][cell_key(c)] = e;
    write_atomic(manifest_path, manifest.dump(2) + "\n");
    if (status == "complete")
      ++report.completed;
    else
      ++report.failed;
    if (progress) *progress << status << " " << cell_key(c) << (error.empty() ? "" : ": " + error) << "\n" << std::flush;
  };
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < todo.size();) {
      const Cell& c = cells[todo[i]];
      if (progress) {
        std::lock_guard lock(mu);
        *progress << "run  " << cell_key(c) << " [" << c.config.mode.str() << "]\n" << std::flush;
      }
      try {
        record(c, "complete", run_cell(c, families.at(c.config.family_seed), per_cell, spec.maps), "");
      } catch (const std::exception& ex) {
        record(c, "failed", {}, ex.what());
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (unsigned w = 1; w < workers; ++w) pool.emplace_back(work);
    work();
  }

  // summary: one row per (point, update) over the seeds that completed,
  // plus a sentinel row per failed cell
  std::ostringstream sum;
  sum << "point,seed,update,episodes,n_seeds,mean_return,ci_lower,ci_upper,status\n";
  std::vector<std::string> points;
  for (const Cell& c : cells)
    if (std::find(points.begin(), points.end(), c.point) == points.end()) points.push_back(c.point);
  for (const std::string& point : points) {
    std::vector<std::vector<double>> curves;
    std::vector<std::uint64_t> failed;
    std::size_t k = 0;
    for (const Cell& c : cells) {
      if (c.point != point) continue;
      k = c.config.k_episodes;
      const json& e = manifest["cells"][cell_key(c)];
      if (e.value("status", "") == "complete")
        curves.push_back(read_curve(c.dir / "curve.csv"));
      else
        failed.push_back(c.seed);
    }
    if (!curves.empty()) {
      std::size_t len = curves.front().size();
      for (const auto& c : curves) len = std::min(len, c.size());
      std::vector<double> xs(curves.size());
      for (std::size_t u = 0; u < len; ++u) {
        for (std::size_t s = 0; s < curves.size(); ++s) xs[s] = curves[s][u];
        Rng rng(derive_seed({kBootTag, meta::config_hash(json(point)), u}));
        const Interval iv = bootstrap_ci(xs, rng);
        sum << point << ",all," << u << "," << u * k << "," << curves.size() << "," << fmt(iv.mean) << ","
            << fmt(iv.lower) << "," << fmt(iv.upper) << ",ok\n";
      }
    }
    for (std::uint64_t s : failed) sum << point << "," << s << ",-1,-1,0,0,0,0,failed\n";
  }
  write_atomic(spec.out_dir / "summary.csv", sum.str());
  {
    std::lock_guard lock(mu);
    manifest["summary"] = {{"path", "summary.csv"}};
    write_atomic(manifest_path, manifest.dump(2) + "\n");
  }
  return report;
}

}  // namespace famp::harness
