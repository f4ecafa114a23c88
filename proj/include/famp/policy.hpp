#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>

#include <nlohmann/json.hpp>

#include "famp/autodiff.hpp"
#include "famp/rng.hpp"

namespace famp::policy {

struct Dims {
  std::size_t S = 0;  // state encoding size
  std::size_t N = 0;  // options
  std::size_t A = 0;  // actions
  friend bool operator==(const Dims&, const Dims&) = default;
};

// Plain tables, no biases: hi [S, N], sub [N, S, A], term [N, S].
struct HierParams {
  Dims dims;
  ad::Array hi;
  ad::Array sub;
  ad::Array term;
};

// The same three blocks living on a tape.
struct HierVars {
  Dims dims;
  ad::Var hi;
  ad::Var sub;
  ad::Var term;
};

struct Tracking {
  bool hi = true;
  bool sub = true;
  bool term = true;
};

HierVars on_tape(ad::Tape& tape, const HierParams& p, Tracking tracked = {});
HierParams values_of(const HierVars& v);

// hi and term at zero (uniform options, termination 0.5), sub ~ N(0, scale^2).
HierParams init_params(std::size_t S, std::size_t N, std::size_t A, std::uint64_t seed,
                       double sub_scale = 0.1);

class TerminationMode {
 public:
  enum class Kind { Learned, Fixed };

  static TerminationMode learned() { return TerminationMode(Kind::Learned, 0); }
  // Throws std::invalid_argument unless c > 0.
  static TerminationMode fixed(int c);

  Kind kind() const { return kind_; }
  int period() const { return c_; }
  bool is_fixed() const { return kind_ == Kind::Fixed; }
  // Synchronized re-selection: the option in force at global step t is
  // drawn fresh from the high-level policy.
  bool reselects_at(int t) const { return kind_ == Kind::Fixed && t % c_ == 0; }
  std::string str() const;
  friend bool operator==(const TerminationMode&, const TerminationMode&) = default;

 private:
  TerminationMode(Kind k, int c) : kind_(k), c_(c) {}
  Kind kind_;
  int c_;
};

// Index of the hot entry; ad::ShapeError if `encoding` is not a one-hot of size S.
std::size_t state_of(const Dims& d, std::span<const double> encoding);

// -- differentiable queries ----------------------------------------------------
ad::Var option_dist(const HierVars& p, std::size_t s);
ad::Var action_dist(const HierVars& p, std::size_t option, std::size_t s);
ad::Var termination_prob(const HierVars& p, std::size_t option, std::size_t s);
// xi * pi_Omega(.|s') + (1 - xi) * onehot(prev)
ad::Var option_transition(const HierVars& p, std::size_t prev_option, std::size_t s_next);

inline ad::Var option_dist(const HierVars& p, std::span<const double> enc) {
  return option_dist(p, state_of(p.dims, enc));
}
inline ad::Var action_dist(const HierVars& p, std::size_t option, std::span<const double> enc) {
  return action_dist(p, option, state_of(p.dims, enc));
}
inline ad::Var termination_prob(const HierVars& p, std::size_t option, std::span<const double> enc) {
  return termination_prob(p, option, state_of(p.dims, enc));
}

// -- plain-value queries used while sampling ------------------------------------
void option_probs(const HierParams& p, std::size_t s, std::span<double> out);
void action_probs(const HierParams& p, std::size_t option, std::size_t s, std::span<double> out);
double termination_value(const HierParams& p, std::size_t option, std::size_t s);

struct ExecState {
  std::size_t active_option = 0;
  int steps_in_option = 0;
  friend bool operator==(const ExecState&, const ExecState&) = default;
};

struct StepChoice {
  std::size_t action = 0;
  ExecState exec;
  bool switched = false;
};

// One control step at global time t. `exec` is empty at episode start.
StepChoice sample_step(const HierParams& p, const std::optional<ExecState>& exec, std::size_t s, int t,
                       Rng& rng, const TerminationMode& mode);

// -- checkpoints ----------------------------------------------------------------
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointVersion = 1;

// "FAMPCKP1", u64 LE header length, JSON header, then hi, sub, term as LE f64.
// `extra` is merged into the header (mode, seed, epoch, ...).
void write_checkpoint(const std::filesystem::path& path, const HierParams& p,
                      const nlohmann::json& extra = nlohmann::json::object());
std::pair<HierParams, nlohmann::json> read_checkpoint(const std::filesystem::path& path);

// FNV-1a over the raw parameter bytes.
std::uint64_t hash_block(const ad::Array& a);

}  // namespace famp::policy
