#include "famp/advantage.hpp"

#include <stdexcept>

#include <Eigen/Dense>

namespace famp::advantage {

namespace {

void time_features(int t, double* out) {
  const double x = t / 100.0;
  out[0] = x;
  out[1] = x * x;
  out[2] = x * x * x;
  out[3] = 1.0;
}

}  // namespace

std::vector<double> baseline_features(std::span<const double> encoded_state, int t) {
  if (t < 0) throw std::invalid_argument("baseline_features: negative time step");
  std::vector<double> f(encoded_state.begin(), encoded_state.end());
  f.resize(encoded_state.size() + 4);
  time_features(t, f.data() + encoded_state.size());
  return f;
}

double LinearBaseline::predict(std::size_t state, int t) const {
  const std::size_t S = state_dim();
  double tf[4];
  time_features(t, tf);
  double v = weights[state];
  for (int i = 0; i < 4; ++i) v += weights[S + i] * tf[i];
  return v;
}

std::vector<double> LinearBaseline::predict(const iopg::Trajectory& traj) const {
  std::vector<double> v(traj.states.size());
  for (std::size_t t = 0; t < v.size(); ++t) v[t] = predict(traj.states[t], static_cast<int>(t));
  return v;
}

std::vector<double> returns_to_go(std::span<const double> rewards, double gamma) {
  std::vector<double> g(rewards.size());
  double acc = 0.0;
  for (std::size_t t = rewards.size(); t-- > 0;) g[t] = acc = rewards[t] + gamma * acc;
  return g;
}

LinearBaseline fit_baseline(std::span<const iopg::Trajectory> trajs, double gamma, std::size_t state_dim,
                            double ridge) {
  if (trajs.empty()) throw std::invalid_argument("fit_baseline: no trajectories");
  const std::size_t D = feature_dim(state_dim);
  const std::size_t S = state_dim;
  Eigen::MatrixXd xtx = Eigen::MatrixXd::Zero(D, D);
  Eigen::VectorXd xty = Eigen::VectorXd::Zero(D);
  for (const iopg::Trajectory& tr : trajs) {
    const std::vector<double> g = returns_to_go(tr.rewards, gamma);
    for (std::size_t t = 0; t < tr.length(); ++t) {
      // sparse row: one hot entry plus the four dense time features
      const std::size_t s = tr.states[t];
      if (s >= S) throw std::invalid_argument("fit_baseline: state index out of range");
      double tf[4];
      time_features(static_cast<int>(t), tf);
      xtx(s, s) += 1.0;
      for (int i = 0; i < 4; ++i) {
        xtx(s, S + i) += tf[i];
        for (int j = 0; j < 4; ++j) xtx(S + i, S + j) += tf[i] * tf[j];
        xty(S + i) += tf[i] * g[t];
      }
      xty(s) += g[t];
    }
  }
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t s = 0; s < S; ++s) xtx(S + i, s) = xtx(s, S + i);
  xtx.diagonal().array() += ridge;
  Eigen::VectorXd w = xtx.ldlt().solve(xty);
  LinearBaseline b;
  b.ridge = ridge;
  b.weights.assign(w.data(), w.data() + D);
  return b;
}

std::vector<double> gae(std::span<const double> rewards, std::span<const double> values, double value_of_sT,
                        double gamma, double lambda) {
  if (values.size() != rewards.size()) throw std::invalid_argument("gae: values and rewards differ in length");
  const std::size_t T = rewards.size();
  std::vector<double> adv(T);
  double acc = 0.0;
  for (std::size_t t = T; t-- > 0;) {
    const double next = t + 1 < T ? values[t + 1] : value_of_sT;
    const double delta = rewards[t] + gamma * next - values[t];
    adv[t] = acc = delta + gamma * lambda * acc;
  }
  return adv;
}

std::vector<std::vector<double>> batch_advantages(std::span<const iopg::Trajectory> trajs,
                                                  const LinearBaseline& baseline, double gamma, double lambda) {
  std::vector<std::vector<double>> out;
  out.reserve(trajs.size());
  for (const iopg::Trajectory& tr : trajs) {
    std::vector<double> v = baseline.predict(tr);
    const double last = tr.done_by_goal ? 0.0 : v.back();
    v.pop_back();
    out.push_back(gae(tr.rewards, v, last, gamma, lambda));
  }
  return out;
}

}  // namespace famp::advantage
