#include "famp/iopg.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "famp/mathutil.hpp"

namespace famp::iopg {

using ad::Shape;
using ad::Var;
using policy::HierParams;
using policy::HierVars;
using policy::TerminationMode;

double Trajectory::total_return() const {
  double r = 0.0;
  for (double x : rewards) r += x;
  return r;
}

namespace {

void validate(const Trajectory& tr, const policy::Dims& d) {
  if (tr.actions.empty()) throw std::invalid_argument("trajectory has no steps");
  if (tr.states.size() != tr.actions.size() + 1 || tr.rewards.size() != tr.actions.size())
    throw std::invalid_argument("trajectory lengths are inconsistent");
  for (auto s : tr.states)
    if (s >= d.S) throw ad::ShapeError("trajectory state index out of range");
  for (auto a : tr.actions)
    if (a >= d.A) throw ad::ShapeError("trajectory action index out of range");
}

void guard(Var p, std::size_t t) {
  auto v = p.values();
  const auto it = std::min_element(v.begin(), v.end());
  if (*it < kProbFloor) {
    std::ostringstream os;
    os << "option filter: probability " << *it << " below floor at step " << t + 1 << ", trajectory "
       << (it - v.begin()) / p.shape().cols() << ", option " << (it - v.begin()) % p.shape().cols();
    throw NumericalGuardError(os.str());
  }
}

}  // namespace

Filtered forward_filter(const HierVars& p, std::span<const Trajectory> trajs, const TerminationMode& mode,
                        bool keep_rows) {
  if (trajs.empty()) throw std::invalid_argument("forward_filter: no trajectories");
  const auto [S, N, A] = p.dims;
  const std::size_t k = trajs.size();
  std::size_t T = 0;
  for (const Trajectory& tr : trajs) {
    validate(tr, p.dims);
    T = std::max(T, tr.length());
  }
  ad::Tape& tape = *p.hi.tape();
  const std::size_t kN = k * N;

  // state / action at (t, j), padding past the end with index 0
  auto state_at = [&](std::size_t t, std::size_t j) -> std::size_t {
    return t <= trajs[j].length() ? trajs[j].states[t] : 0;
  };
  bool padded = false;
  for (const Trajectory& tr : trajs) padded |= tr.length() < T;
  const Shape row_shape = Shape::matrix(k, N);

  // Everything per step is gathered straight from the parameter blocks, so
  // the backward pass only ever materialises parameter-sized buffers.
  std::vector<std::uint32_t> rows(kN * A), pick(kN), idx(kN);
  std::vector<double> mask(kN);
  auto log_action = [&](std::size_t t) {
    bool partial = false;
    for (std::size_t j = 0; j < k; ++j) {
      const bool live = t < trajs[j].length();
      partial |= !live;
      const std::size_t s = live ? trajs[j].states[t] : 0;
      const std::size_t a = live ? trajs[j].actions[t] : 0;
      for (std::size_t w = 0; w < N; ++w) {
        const std::size_t r = j * N + w;
        for (std::size_t b = 0; b < A; ++b) rows[r * A + b] = static_cast<std::uint32_t>((w * S + s) * A + b);
        pick[r] = static_cast<std::uint32_t>(r * A + a);
        mask[r] = live ? 1.0 : 0.0;
      }
    }
    Var logits = ad::index_select(p.sub, rows, Shape::matrix(kN, A));
    Var la = ad::index_select(ad::log_softmax(logits), pick, row_shape);
    return partial ? la * tape.leaf(mask, row_shape, false) : la;
  };
  auto high_logits = [&](std::size_t t) {
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t w = 0; w < N; ++w) idx[j * N + w] = static_cast<std::uint32_t>(state_at(t, j) * N + w);
    return ad::index_select(p.hi, idx, row_shape);
  };
  auto term_probs = [&](std::size_t t) {
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t w = 0; w < N; ++w) idx[j * N + w] = static_cast<std::uint32_t>(w * S + state_at(t, j));
    return ad::sigmoid(ad::index_select(p.term, idx, row_shape));
  };

  Filtered out;
  std::vector<Var> ell;
  ell.reserve(T);

  if (N == 1) {
    // a single option is always active: the mixture is the sub-policy itself
    Var zero = tape.leaf(std::vector<double>(k, 0.0), row_shape, false);
    for (std::size_t t = 0; t < T; ++t) {
      if (keep_rows) out.log_prior.push_back(zero);
      ell.push_back(ad::reshape(log_action(t), Shape::vector(k)));
    }
  } else {
    Var r = ad::log_softmax(high_logits(0));
    for (std::size_t t = 0; t < T; ++t) {
      if (keep_rows) out.log_prior.push_back(r);
      Var c = r + log_action(t);
      ell.push_back(ad::logsumexp(c));
      if (t + 1 == T) break;
      if (mode.is_fixed()) {
        r = mode.reselects_at(static_cast<int>(t + 1)) ? ad::log_softmax(high_logits(t + 1)) : ad::log_softmax(c);
      } else {
        Var q = ad::softmax(c);
        Var qx = q * term_probs(t + 1);
        Var switched = ad::row_expand(ad::row_sum(qx), N);
        Var pn = (q - qx) + switched * ad::softmax(high_logits(t + 1));
        guard(pn, t);
        r = ad::log(pn);
      }
    }
  }

  // [T, k] -> [k, T]
  Var flat = ad::concat(std::span<const Var>(ell));
  std::vector<std::uint32_t> perm(k * T);
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t t = 0; t < T; ++t) perm[j * T + t] = static_cast<std::uint32_t>(t * k + j);
  out.loglik = ad::index_select(flat, perm, Shape::matrix(k, T));
  if (padded) {
    std::vector<double> live(k * T, 0.0);
    for (std::size_t j = 0; j < k; ++j) std::fill_n(live.begin() + j * T, trajs[j].length(), 1.0);
    out.loglik = out.loglik * tape.leaf(live, out.loglik.shape(), false);
  }
  return out;
}

Var responsibilities(const Trajectory& traj, const HierVars& p, const TerminationMode& mode) {
  Filtered f = forward_filter(p, std::span<const Trajectory>(&traj, 1), mode, true);
  Var rows = ad::concat(std::span<const Var>(f.log_prior));
  return ad::exp(ad::reshape(rows, Shape::matrix(traj.length(), p.dims.N)));
}

Var marginal_action_loglik(const Trajectory& traj, const HierVars& p, const TerminationMode& mode) {
  Filtered f = forward_filter(p, std::span<const Trajectory>(&traj, 1), mode);
  return ad::reshape(f.loglik, Shape::vector(traj.length()));
}

namespace {

struct PlainPolicy {
  const HierParams& p;
  const TerminationMode& mode;

  std::vector<double> option_probs(std::size_t s) const {
    std::vector<double> v(p.dims.N);
    policy::option_probs(p, s, v);
    return v;
  }
  double action_prob(std::size_t w, std::size_t s, std::size_t a) const {
    std::vector<double> v(p.dims.A);
    policy::action_probs(p, w, s, v);
    return v[a];
  }
  // Pr(w_next | w_prev, s_next) entering step t_next
  double transition(std::size_t prev, std::size_t next, std::size_t s_next, std::size_t t_next) const {
    const double pio = option_probs(s_next)[next];
    if (mode.is_fixed()) return mode.reselects_at(static_cast<int>(t_next)) ? pio : (prev == next ? 1.0 : 0.0);
    const double xi = policy::termination_value(p, prev, s_next);
    return xi * pio + (prev == next ? 1.0 - xi : 0.0);
  }
};

// Calls f(seq) for every sequence in [0, N)^len.
template <class F>
void enumerate(std::size_t N, std::size_t len, F&& f) {
  std::vector<std::size_t> seq(len, 0);
  while (true) {
    f(seq);
    std::size_t i = len;
    while (i > 0) {
      if (++seq[i - 1] < N) break;
      seq[--i] = 0;
    }
    if (i == 0) return;
  }
}

void check_size(std::size_t N, std::size_t T) {
  double count = 1.0;
  for (std::size_t i = 0; i < T; ++i) count *= static_cast<double>(N);
  if (count > 1e6) throw std::invalid_argument("brute force: N^T exceeds 1e6 option sequences");
}

// Joint weight of an option prefix w_0..w_m with actions a_0..a_{m-1}
// (and a_m too when `through` is set).
double prefix_weight(const PlainPolicy& pp, const Trajectory& tr, const std::vector<std::size_t>& w, bool through) {
  double prob = pp.option_probs(tr.states[0])[w[0]];
  const std::size_t m = w.size() - 1;
  for (std::size_t t = 0; t < m; ++t) {
    prob *= pp.action_prob(w[t], tr.states[t], tr.actions[t]);
    prob *= pp.transition(w[t], w[t + 1], tr.states[t + 1], t + 1);
  }
  if (through) prob *= pp.action_prob(w[m], tr.states[m], tr.actions[m]);
  return prob;
}

}  // namespace

double brute_force_loglik(const Trajectory& traj, const HierParams& p, const TerminationMode& mode) {
  validate(traj, p.dims);
  check_size(p.dims.N, traj.length());
  PlainPolicy pp{p, mode};
  double total = 0.0;
  enumerate(p.dims.N, traj.length(), [&](const std::vector<std::size_t>& w) { total += prefix_weight(pp, traj, w, true); });
  return std::log(total);
}

std::vector<std::vector<double>> brute_force_responsibilities(const Trajectory& traj, const HierParams& p,
                                                              const TerminationMode& mode) {
  validate(traj, p.dims);
  check_size(p.dims.N, traj.length());
  PlainPolicy pp{p, mode};
  std::vector<std::vector<double>> rows;
  for (std::size_t t = 0; t < traj.length(); ++t) {
    std::vector<double> row(p.dims.N, 0.0);
    enumerate(p.dims.N, t + 1, [&](const std::vector<std::size_t>& w) { row[w[t]] += prefix_weight(pp, traj, w, false); });
    double z = 0.0;
    for (double v : row) z += v;
    for (double& v : row) v /= z;
    rows.push_back(std::move(row));
  }
  return rows;
}

Var dice_from_loglik(Var loglik, const std::vector<std::vector<double>>& advantages, double lambda_dice) {
  if (!(lambda_dice >= 0.0 && lambda_dice <= 1.0)) throw std::invalid_argument("dice: lambda must lie in [0, 1]");
  const Shape s = loglik.shape();
  const std::size_t k = s.rows(), T = s.cols();
  if (advantages.size() != k) throw std::invalid_argument("dice: advantages do not match the trajectory count");
  std::vector<double> adv(k * T, 0.0);
  for (std::size_t j = 0; j < k; ++j) {
    if (advantages[j].size() > T) throw std::invalid_argument("dice: advantage vector longer than its trajectory");
    std::copy(advantages[j].begin(), advantages[j].end(), adv.begin() + j * T);
  }
  ad::Tape& tape = *loglik.tape();
  Var z = ad::discounted_cumsum(loglik, lambda_dice);
  Var y = z - loglik;
  Var weighted = (ad::magic_box(z) - ad::magic_box(y)) * tape.leaf(adv, s, false);
  return ad::scale(ad::sum(weighted), 1.0 / static_cast<double>(k));
}

Var dice_surrogate(const HierVars& p, std::span<const Trajectory> trajs,
                   const std::vector<std::vector<double>>& advantages, double lambda_dice,
                   const TerminationMode& mode) {
  if (advantages.size() != trajs.size()) throw std::invalid_argument("dice: advantages do not match the trajectory count");
  for (std::size_t j = 0; j < trajs.size(); ++j)
    if (advantages[j].size() != trajs[j].length())
      throw std::invalid_argument("dice: advantage length differs from trajectory length");
  return dice_from_loglik(forward_filter(p, trajs, mode).loglik, advantages, lambda_dice);
}

}  // namespace famp::iopg
