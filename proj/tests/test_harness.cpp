#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include "famp/config.hpp"
#include "famp/harness.hpp"
#include "famp/render.hpp"
#include "famp/rollout.hpp"

using namespace famp;
using namespace famp::harness;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("famp_test_harness_" + name);
  fs::remove_all(p);
  return p;
}

json tiny_config() {
  return {{"epochs", 1}, {"M_env_samples", 2}, {"k_episodes", 3}, {"max_steps", 40}, {"eval_steps", 2}};
}

ExperimentSpec tiny_spec(const fs::path& out, std::vector<std::uint64_t> seeds = {0}) {
  ExperimentSpec s;
  s.config = tiny_config();
  s.seeds = std::move(seeds);
  s.out_dir = out;
  return s;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

std::vector<std::string> split(const std::string& line, char sep = ',') {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

std::size_t count(const std::string& s, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = s.find(needle); pos != std::string::npos; pos = s.find(needle, pos + 1)) ++n;
  return n;
}

// Option 0 everywhere, never terminates, always moves up.
policy::HierParams greedy_up(const envs::TaxiMap& map, std::size_t N) {
  auto p = policy::init_params(static_cast<std::size_t>(map.state_dim()), N, envs::kNumActions, 3);
  const std::size_t S = p.dims.S, A = p.dims.A;
  for (std::size_t s = 0; s < S; ++s) {
    p.hi.data[s * N] = 20.0;
    for (std::size_t w = 0; w < N; ++w) {
      p.term.data[w * S + s] = -20.0;
      for (std::size_t a = 0; a < A; ++a) p.sub.data[(w * S + s) * A + a] = a == 0 ? 20.0 : -20.0;
    }
  }
  return p;
}

}  // namespace

// -- rollout --------------------------------------------------------------------

TEST(Rollout, ReturnsKCappedTrajectories) {
  const auto fam = envs::task_family(0);
  const auto p = policy::init_params(72, 4, 6, 1);
  Rng rng(5);
  const auto trajs = rollout(fam.test[0], p, 10, rng, policy::TerminationMode::learned());
  ASSERT_EQ(trajs.size(), 10u);
  for (const auto& t : trajs) {
    EXPECT_LE(t.length(), 1500u);
    EXPECT_EQ(t.states.size(), t.length() + 1);
  }
}

TEST(Rollout, NearGreedyPolicyRepeatsItself) {
  const auto fam = envs::task_family(0);
  const auto p = greedy_up(*fam.map, 3);
  Rng rng(11);
  const auto trajs = rollout(fam.test[0], p, 5, rng, policy::TerminationMode::learned(), 60);
  ASSERT_EQ(trajs.size(), 5u);
  for (const auto& t : trajs) {
    EXPECT_EQ(t.length(), 60u);
    EXPECT_EQ(t.states, trajs[0].states);
    EXPECT_EQ(t.actions, trajs[0].actions);
  }
}

TEST(Rollout, MeanReturn) {
  iopg::Trajectory a, b;
  a.rewards = {1.0, 1.0};
  b.rewards = {-3.0};
  std::vector<iopg::Trajectory> v{a, b};
  EXPECT_DOUBLE_EQ(mean_return(v), -0.5);
}

// -- bootstrap ------------------------------------------------------------------

TEST(Bootstrap, ZeroVariance) {
  std::vector<double> xs(7, 4.2);
  Rng rng(1);
  const Interval iv = bootstrap_ci(xs, rng);
  EXPECT_EQ(iv.mean, 4.2);
  EXPECT_EQ(iv.lower, 4.2);
  EXPECT_EQ(iv.upper, 4.2);
}

TEST(Bootstrap, SingleSampleIsDegenerate) {
  std::vector<double> xs{-1.5};
  Rng rng(1);
  const Interval iv = bootstrap_ci(xs, rng);
  EXPECT_EQ(iv.mean, -1.5);
  EXPECT_EQ(iv.lower, -1.5);
  EXPECT_EQ(iv.upper, -1.5);
}

TEST(Bootstrap, BinomialHalf) {
  std::vector<double> xs;
  for (int i = 0; i < 500; ++i) {
    xs.push_back(0.0);
    xs.push_back(1.0);
  }
  Rng rng(2024);
  const Interval iv = bootstrap_ci(xs, rng);
  const double se = std::sqrt(0.25 / 1000.0);
  EXPECT_DOUBLE_EQ(iv.mean, 0.5);
  EXPECT_NEAR(iv.lower, 0.5 - 1.96 * se, 0.01);
  EXPECT_NEAR(iv.upper, 0.5 + 1.96 * se, 0.01);
}

TEST(Bootstrap, OrderDoesNotMatter) {
  std::vector<double> a{3.0, -1.0, 0.5, 8.0, 2.0}, b{8.0, 0.5, 3.0, 2.0, -1.0};
  Rng r1(9), r2(9);
  const Interval x = bootstrap_ci(a, r1), y = bootstrap_ci(b, r2);
  EXPECT_EQ(x.mean, y.mean);
  EXPECT_EQ(x.lower, y.lower);
  EXPECT_EQ(x.upper, y.upper);
  EXPECT_LE(x.lower, x.mean);
  EXPECT_LE(x.mean, x.upper);
}

TEST(Bootstrap, EmptyThrows) {
  Rng rng(0);
  EXPECT_THROW(bootstrap_ci(std::span<const double>{}, rng), std::invalid_argument);
}

// -- specs ----------------------------------------------------------------------

TEST(Spec, ParsesAndRejects) {
  const json j = {{"config", {{"epochs", 3}}},
                  {"seeds", {0, 1, 2}},
                  {"sweep", {{"N_options", {2, 4}}}},
                  {"out", "x"},
                  {"maps", false}};
  const ExperimentSpec s = spec_from_json(j);
  EXPECT_EQ(s.seeds.size(), 3u);
  ASSERT_EQ(s.sweep.size(), 1u);
  EXPECT_EQ(s.sweep[0].values.size(), 2u);
  EXPECT_FALSE(s.maps);
  EXPECT_EQ(s.out_dir, fs::path("x"));

  EXPECT_THROW(spec_from_json({{"bogus", 1}}), meta::ConfigError);
  EXPECT_THROW(spec_from_json({{"seeds", json::array()}}), meta::ConfigError);
  EXPECT_THROW(spec_from_json({{"seeds", {-1}}}), meta::ConfigError);
  EXPECT_THROW(spec_from_json({{"sweep", {{"N_options", json::array()}}}}), meta::ConfigError);
}

TEST(Spec, CellMatrix) {
  ExperimentSpec s = tiny_spec("o", {0, 1});
  s.sweep = {{"N_options", {2, 4}}, {"mode", {"famp", "multi_task"}}};
  const auto cells = expand_cells(s);
  ASSERT_EQ(cells.size(), 8u);
  EXPECT_EQ(cells[0].point, "N_options=2__mode=famp");
  EXPECT_EQ(cells[1].point, "N_options=2__mode=famp");
  EXPECT_EQ(cells[1].seed, 1u);
  EXPECT_EQ(cells[2].point, "N_options=2__mode=multi_task");
  EXPECT_EQ(cells[7].point, "N_options=4__mode=multi_task");
  EXPECT_EQ(cells[7].config.N_options, 4u);
  EXPECT_EQ(cells[7].config.seed, 1u);
  EXPECT_EQ(cells[7].dir, fs::path("o") / "N_options=4__mode=multi_task" / "1");
  std::set<std::string> hashes;
  for (const auto& c : cells) hashes.insert(c.config_hash);
  EXPECT_EQ(hashes.size(), 8u);

  ExperimentSpec bad = tiny_spec("o");
  bad.sweep = {{"no_such_key", {1}}};
  EXPECT_THROW(expand_cells(bad), meta::ConfigError);
}

// -- experiments ----------------------------------------------------------------

TEST(Experiment, OneSeedNoSweep) {
  const fs::path out = scratch("one");
  const RunReport r = run_experiment(tiny_spec(out), 1);
  EXPECT_EQ(r.completed, 1u);
  const fs::path cell = out / "base" / "0";
  EXPECT_TRUE(fs::exists(cell / "train_log.csv"));
  std::size_t curves = 0;
  for (const auto& e : fs::directory_iterator(cell))
    if (e.path().filename().string().starts_with("adapt_task")) ++curves;
  EXPECT_EQ(curves, 12u);
  EXPECT_EQ(lines(slurp(cell / "train_log.csv")).size(), 2u);

  // every file in the cell is listed with the cell's config hash
  const json m = json::parse(slurp(out / "manifest.json"));
  const json& entry = m["cells"]["base/0"];
  EXPECT_EQ(entry["status"], "complete");
  std::set<std::string> listed;
  for (const json& f : entry["files"]) {
    EXPECT_EQ(f["config_hash"], entry["config_hash"]);
    listed.insert(f["path"].get<std::string>());
  }
  for (const auto& e : fs::recursive_directory_iterator(cell))
    if (e.is_regular_file()) {
      EXPECT_TRUE(listed.contains(fs::relative(e.path(), cell).generic_string())) << e.path();
    }
  EXPECT_EQ(m["seeds"], json({0}));
  EXPECT_TRUE(m.contains("version"));
}

TEST(Experiment, RerunGivesIdenticalCsvs) {
  const fs::path a = scratch("rerun_a"), b = scratch("rerun_b");
  run_experiment(tiny_spec(a), 1);
  run_experiment(tiny_spec(b), 2);
  std::size_t compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (e.path().extension() != ".csv") continue;
    const fs::path rel = fs::relative(e.path(), a);
    EXPECT_EQ(slurp(e.path()), slurp(b / rel)) << rel;
    ++compared;
  }
  EXPECT_GE(compared, 15u);
}

TEST(Experiment, ResumesFromManifest) {
  const fs::path out = scratch("resume");
  EXPECT_EQ(run_experiment(tiny_spec(out, {0}), 1).completed, 1u);
  const std::string first = slurp(out / "base" / "0" / "curve.csv");
  const RunReport r = run_experiment(tiny_spec(out, {0, 1}), 1);
  EXPECT_EQ(r.skipped, 1u);
  EXPECT_EQ(r.completed, 1u);
  EXPECT_EQ(slurp(out / "base" / "0" / "curve.csv"), first);

  // a changed config is not a match
  ExperimentSpec changed = tiny_spec(out, {0});
  changed.config["eval_steps"] = 1;
  EXPECT_EQ(run_experiment(changed, 1).completed, 1u);
}

TEST(Experiment, SummaryIsSeedOrderInvariantAndBracketed) {
  const fs::path a = scratch("order_a"), b = scratch("order_b");
  run_experiment(tiny_spec(a, {0, 1, 2}), 1);
  run_experiment(tiny_spec(b, {2, 0, 1}), 1);
  const std::string sa = slurp(a / "summary.csv");
  EXPECT_EQ(sa, slurp(b / "summary.csv"));
  const auto rows = lines(sa);
  ASSERT_EQ(rows.size(), 4u);  // header + updates 0..2
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto f = split(rows[i]);
    ASSERT_EQ(f.size(), 9u);
    EXPECT_EQ(f[4], "3");
    const double mean = std::stod(f[5]), lo = std::stod(f[6]), hi = std::stod(f[7]);
    EXPECT_LE(lo, mean);
    EXPECT_LE(mean, hi);
  }
}

TEST(Experiment, FailedCellBecomesSentinelRow) {
  const fs::path out = scratch("fail");
  fs::create_directories(out / "base");
  std::ofstream(out / "base" / "1") << "in the way";
  const RunReport r = run_experiment(tiny_spec(out, {0, 1}), 1);
  EXPECT_EQ(r.completed, 1u);
  EXPECT_EQ(r.failed, 1u);
  const json m = json::parse(slurp(out / "manifest.json"));
  EXPECT_EQ(m["cells"]["base/1"]["status"], "failed");
  EXPECT_FALSE(m["cells"]["base/1"]["error"].get<std::string>().empty());
  const auto rows = lines(slurp(out / "summary.csv"));
  EXPECT_EQ(rows.back(), "base,1,-1,-1,0,0,0,0,failed");
  for (std::size_t i = 1; i < rows.size(); ++i)
    for (const std::string& f : split(rows[i])) EXPECT_EQ(f.find("nan"), std::string::npos) << rows[i];
}

TEST(Experiment, SingleTaskCellsSkipMetaTraining) {
  const fs::path out = scratch("single");
  ExperimentSpec s = tiny_spec(out);
  s.config["mode"] = "single_task";
  s.config["single_task_updates"] = 2;
  EXPECT_EQ(run_experiment(s, 1).completed, 1u);
  EXPECT_FALSE(fs::exists(out / "base" / "0" / "train_log.csv"));
  EXPECT_EQ(lines(slurp(out / "base" / "0" / "curve.csv")).size(), 4u);
}

// -- rendering ------------------------------------------------------------------

TEST(Render, TermColorScale) {
  EXPECT_EQ(term_color(0.5), "#808080");
  EXPECT_EQ(term_color(0.0), "#ffffff");
  EXPECT_EQ(term_color(1.0), "#000000");
  EXPECT_EQ(term_color(1.0 / (1.0 + std::exp(20.0))), "#ffffff");
}

TEST(Render, FreshParamsGiveUniformGray) {
  const auto map = envs::canonical_map();
  const auto p = policy::init_params(static_cast<std::size_t>(map.state_dim()), 3, 6, 4);
  const auto svgs = render_term_maps(p, map);
  ASSERT_EQ(svgs.size(), 3u);
  for (const auto& s : svgs) {
    // every heatmap cell plus the middle of the scale bar
    EXPECT_EQ(count(s, "fill=\"#808080\""), static_cast<std::size_t>(map.state_dim()) + 1);
    EXPECT_EQ(s.rfind("<svg", 0), 0u);
  }
}

TEST(Render, SaturatedTerminationSitsAtTheFloor) {
  const auto map = envs::canonical_map();
  auto p = policy::init_params(static_cast<std::size_t>(map.state_dim()), 2, 6, 4);
  for (double& v : p.term.data) v = -20.0;
  for (const auto& s : render_term_maps(p, map)) EXPECT_EQ(count(s, "fill=\"#808080\""), 1u);
}

TEST(Render, OptionMap) {
  const auto fam = envs::task_family(0);
  const auto& task = fam.test[0];
  for (std::size_t N : {1u, 3u, 16u}) {
    const auto p = policy::init_params(static_cast<std::size_t>(task.layout().state_dim()), N, 6, 8);
    Rng rng(3);
    const auto trajs = rollout(task, p, 2, rng, policy::TerminationMode::learned(), 30);
    const std::string svg = render_option_map(p, task, trajs);
    EXPECT_EQ(count(svg, "class=\"legend\""), N);
    EXPECT_EQ(svg, render_option_map(p, task, trajs));

    // one glyph per visited state, nothing elsewhere
    std::set<std::uint32_t> visited;
    for (const auto& t : trajs)
      for (std::size_t i = 0; i < t.length(); ++i) visited.insert(t.states[i]);
    std::size_t glyphs = count(svg, "<polygon") + count(svg, "<circle");
    const std::regex square("<rect x=\"[0-9]+\" y=\"[0-9]+\" width=\"18\"");
    glyphs += static_cast<std::size_t>(std::distance(std::sregex_iterator(svg.begin(), svg.end(), square),
                                                     std::sregex_iterator()));
    EXPECT_EQ(glyphs, visited.size());
    if (N == 1) {
      const std::regex fills("<(polygon|circle|rect)[^>]*fill=\"(#[0-9a-f]{6})\"");
      std::set<std::string> colors;
      for (auto it = std::sregex_iterator(svg.begin(), svg.end(), fills); it != std::sregex_iterator(); ++it)
        if ((*it)[2] != "#ffffff") colors.insert((*it)[2]);
      EXPECT_EQ(colors.size(), 1u);
    }
  }
}
