#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "famp/policy.hpp"
#include "fixtures.hpp"

using namespace famp;
using namespace famp::policy;
using ad::Tape;

TEST(Policy, FreshParamsAreUniformWithHalfTermination) {
  HierParams p = init_params(72, 4, 6, 3);
  Tape t;
  HierVars v = on_tape(t, p);
  for (std::size_t s : {0u, 17u, 71u}) {
    for (double x : option_dist(v, s).values()) EXPECT_EQ(x, 0.25);
    for (std::size_t w = 0; w < 4; ++w) EXPECT_EQ(termination_prob(v, w, s).item(), 0.5);
  }
  EXPECT_EQ(init_params(72, 4, 6, 3).sub.data, p.sub.data);
  EXPECT_NE(init_params(72, 4, 6, 4).sub.data, p.sub.data);
  double m = 0.0, sq = 0.0;
  for (double x : p.sub.data) m += x, sq += x * x;
  m /= p.sub.data.size();
  EXPECT_NEAR(m, 0.0, 0.02);
  EXPECT_NEAR(std::sqrt(sq / p.sub.data.size()), 0.1, 0.01);
}

TEST(Policy, OptionDistClosedForm) {
  HierParams p = init_params(3, 2, 6, 0);
  p.hi.data[2] = std::log(3.0);  // state 1, option 0
  Tape t;
  auto d = option_dist(on_tape(t, p), 1).array().data;
  EXPECT_NEAR(d[0], 0.75, 1e-15);
  EXPECT_NEAR(d[1], 0.25, 1e-15);
}

TEST(Policy, ProbabilitiesNormalised) {
  std::mt19937_64 gen(5);
  for (int i = 0; i < 50; ++i) {
    HierParams p = fixtures::random_params(7, 3, 6, gen, 10.0);
    Tape t;
    HierVars v = on_tape(t, p);
    for (std::size_t s = 0; s < 7; ++s) {
      double a = 0.0, b = 0.0;
      for (double x : option_dist(v, s).values()) {
        a += x;
        EXPECT_GT(x, 0.0);
      }
      for (double x : action_dist(v, 2, s).values()) {
        b += x;
        EXPECT_GT(x, 0.0);
      }
      EXPECT_NEAR(a, 1.0, 1e-12);
      EXPECT_NEAR(b, 1.0, 1e-12);
      double c = 0.0;
      for (double x : option_transition(v, 1, s).values()) c += x;
      EXPECT_NEAR(c, 1.0, 1e-12);
    }
  }
}

TEST(Policy, ActionDist) {
  HierParams p = init_params(4, 3, 6, 0);
  for (double& x : p.sub.data) x = 0.0;
  p.sub.data[(1 * 4 + 2) * 6 + 3] = 20.0;
  Tape t;
  HierVars v = on_tape(t, p);
  for (double x : action_dist(v, 0, 2).values()) EXPECT_NEAR(x, 1.0 / 6.0, 1e-15);
  EXPECT_GT(action_dist(v, 1, 2).at(3), 0.999);

  auto g = ad::grad(ad::slice(ad::log(action_dist(v, 1, 2)), 3, ad::Shape::scalar()), {v.sub, v.hi}, false);
  for (std::size_t i = 0; i < g[0].numel(); ++i) {
    const bool inside = i >= (1 * 4 + 2) * 6 && i < (1 * 4 + 2) * 6 + 6;
    if (!inside) {
      EXPECT_EQ(g[0].at(i), 0.0) << i;
    }
  }
  for (double x : g[1].values()) EXPECT_EQ(x, 0.0);
}

TEST(Policy, TerminationProb) {
  HierParams p = init_params(2, 2, 6, 0);
  p.term.data[1] = -20.0;
  p.term.data[2] = 1.3;
  Tape t;
  HierVars v = on_tape(t, p);
  EXPECT_EQ(termination_prob(v, 0, 0).item(), 0.5);
  EXPECT_LT(termination_prob(v, 0, 1).item(), 1e-8);
  auto g = ad::grad(termination_prob(v, 1, 0), {v.term}, false)[0];
  auto s = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  const double eps = 1e-6;
  EXPECT_NEAR(g.at(2), (s(1.3 + eps) - s(1.3 - eps)) / (2 * eps), 1e-7);
}

TEST(Policy, OptionTransitionLimits) {
  HierParams p = init_params(2, 3, 6, 0);
  std::mt19937_64 gen(2);
  std::normal_distribution<double> nd;
  for (double& x : p.hi.data) x = nd(gen);
  p.term.data[0 * 2 + 1] = 40.0;    // option 0 at state 1: xi rounds to 1
  p.term.data[1 * 2 + 1] = -800.0;  // option 1 at state 1: xi underflows to 0
  Tape t;
  HierVars v = on_tape(t, p);
  EXPECT_EQ(option_transition(v, 0, 1).array().data, option_dist(v, 1).array().data);
  EXPECT_EQ(option_transition(v, 1, 1).array().data, (std::vector<double>{0, 1, 0}));

  HierParams q = init_params(1, 2, 6, 0);
  Tape t2;
  auto d = option_transition(on_tape(t2, q), 0, 0).array().data;
  EXPECT_DOUBLE_EQ(d[0], 0.75);
  EXPECT_DOUBLE_EQ(d[1], 0.25);
}

TEST(Policy, EncodingQueriesValidateOneHot) {
  HierParams p = init_params(3, 2, 6, 0);
  Tape t;
  HierVars v = on_tape(t, p);
  std::vector<double> enc = {0, 1, 0};
  EXPECT_EQ(option_dist(v, enc).numel(), 2u);
  std::vector<double> bad = {0, 1, 1};
  EXPECT_THROW(option_dist(v, bad), ad::ShapeError);
  std::vector<double> short_enc = {1, 0};
  EXPECT_THROW(action_dist(v, 0, short_enc), ad::ShapeError);
  EXPECT_THROW(option_dist(v, 3), ad::ShapeError);
}

TEST(Policy, SampleStepNeverTerminatesWithVeryNegativeLogits) {
  HierParams p = init_params(5, 4, 6, 1);
  for (double& x : p.term.data) x = -20.0;
  Rng rng(9);
  auto mode = TerminationMode::learned();
  for (int ep = 0; ep < 50; ++ep) {
    auto first = sample_step(p, std::nullopt, 0, 0, rng, mode);
    EXPECT_TRUE(first.switched);
    ExecState e = first.exec;
    for (int t = 1; t < 200; ++t) {
      auto c = sample_step(p, e, t % 5, t, rng, mode);
      EXPECT_EQ(c.exec.active_option, first.exec.active_option);
      EXPECT_FALSE(c.switched);
      EXPECT_EQ(c.exec.steps_in_option, t + 1);
      e = c.exec;
    }
  }
}

TEST(Policy, FixedModeSynchronisedReselection) {
  HierParams p = init_params(5, 4, 6, 1);
  Rng rng(4);
  for (int c : {1, 4}) {
    auto mode = TerminationMode::fixed(c);
    std::optional<ExecState> e;
    int changes_off_grid = 0, picks = 0;
    for (int t = 0; t < 400; ++t) {
      auto ch = sample_step(p, e, t % 5, t, rng, mode);
      if (ch.switched) {
        ++picks;
        EXPECT_EQ(t % c, 0);
      }
      if (e && ch.exec.active_option != e->active_option && t % c != 0) ++changes_off_grid;
      e = ch.exec;
    }
    EXPECT_EQ(changes_off_grid, 0);
    EXPECT_EQ(picks, 400 / c);
  }
  EXPECT_THROW(TerminationMode::fixed(0), std::invalid_argument);
}

TEST(Policy, SamplingFrequenciesMatchProbabilities) {
  std::mt19937_64 gen(8);
  HierParams p = fixtures::random_params(3, 4, 6, gen, 1.0);
  Rng rng(77);
  const int n = 100000;
  std::vector<int> opt(4, 0), act(6, 0);
  auto mode = TerminationMode::learned();
  for (int i = 0; i < n; ++i) {
    auto c = sample_step(p, std::nullopt, 2, 0, rng, mode);
    ++opt[c.exec.active_option];
  }
  ExecState fixed_opt{1, 3};
  for (double& x : p.term.data) x = -50.0;
  for (int i = 0; i < n; ++i) ++act[sample_step(p, fixed_opt, 2, 5, rng, mode).action];
  std::vector<double> po(4), pa(6);
  option_probs(p, 2, po);
  action_probs(p, 1, 2, pa);
  for (int w = 0; w < 4; ++w) {
    const double se = std::sqrt(po[w] * (1 - po[w]) / n);
    EXPECT_NEAR(opt[w] / double(n), po[w], 3 * se) << w;
  }
  for (int a = 0; a < 6; ++a) {
    const double se = std::sqrt(pa[a] * (1 - pa[a]) / n);
    EXPECT_NEAR(act[a] / double(n), pa[a], 3 * se) << a;
  }
}

TEST(Policy, ArgmaxInvariantUnderRowShift) {
  std::mt19937_64 gen(1);
  HierParams p = fixtures::random_params(4, 2, 6, gen);
  std::vector<double> a(6), b(6);
  action_probs(p, 1, 3, a);
  for (int i = 0; i < 6; ++i) p.sub.data[(1 * 4 + 3) * 6 + i] += 123.4;
  action_probs(p, 1, 3, b);
  EXPECT_EQ(std::max_element(a.begin(), a.end()) - a.begin(), std::max_element(b.begin(), b.end()) - b.begin());
}

TEST(Policy, CheckpointRoundTrip) {
  std::mt19937_64 gen(3);
  HierParams p = fixtures::random_params(72, 4, 6, gen);
  auto dir = std::filesystem::temp_directory_path() / "famp_ckpt_test";
  std::filesystem::create_directories(dir);
  auto path = dir / "a.bin";
  write_checkpoint(path, p, {{"mode", "famp"}, {"seed", 11}});
  auto [q, header] = read_checkpoint(path);
  EXPECT_EQ(q.dims, p.dims);
  EXPECT_EQ(q.hi.data, p.hi.data);
  EXPECT_EQ(q.sub.data, p.sub.data);
  EXPECT_EQ(q.term.data, p.term.data);
  EXPECT_EQ(header["mode"], "famp");
  EXPECT_EQ(header["seed"], 11);
  EXPECT_EQ(std::filesystem::file_size(path), 8 + 8 + header.dump().size() + 8 * (72 * 4 + 4 * 72 * 6 + 4 * 72));

  {
    std::ofstream bad(dir / "bad.bin", std::ios::binary);
    bad << "NOTACKPTxxxxxxxxxxxx";
  }
  EXPECT_THROW(read_checkpoint(dir / "bad.bin"), CheckpointError);
  EXPECT_THROW(read_checkpoint(dir / "missing.bin"), CheckpointError);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 8);
  EXPECT_THROW(read_checkpoint(path), CheckpointError);
  std::filesystem::remove_all(dir);
}
