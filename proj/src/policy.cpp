#include "famp/policy.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include "famp/mathutil.hpp"

namespace famp::policy {

using ad::Array;
using ad::Shape;
using ad::Var;

HierVars on_tape(ad::Tape& tape, const HierParams& p, Tracking tracked) {
  return HierVars{p.dims, tape.leaf(p.hi, tracked.hi), tape.leaf(p.sub, tracked.sub),
                  tape.leaf(p.term, tracked.term)};
}

HierParams values_of(const HierVars& v) {
  return HierParams{v.dims, v.hi.array(), v.sub.array(), v.term.array()};
}

HierParams init_params(std::size_t S, std::size_t N, std::size_t A, std::uint64_t seed, double sub_scale) {
  if (S == 0 || N == 0 || A == 0) throw std::invalid_argument("init_params: dimensions must be positive");
  HierParams p;
  p.dims = {S, N, A};
  p.hi = Array::zeros(Shape::matrix(S, N));
  p.term = Array::zeros(Shape::matrix(N, S));
  p.sub = Array::zeros(Shape::tensor3(N, S, A));
  Rng rng(derive_seed({0x737562ull, seed}));
  for (double& v : p.sub.data) v = sub_scale * rng.normal();
  return p;
}

TerminationMode TerminationMode::fixed(int c) {
  if (c <= 0) throw std::invalid_argument("termination mode: fixed period must be positive, got " + std::to_string(c));
  return TerminationMode(Kind::Fixed, c);
}

std::string TerminationMode::str() const {
  return kind_ == Kind::Learned ? "learned" : "fixed(" + std::to_string(c_) + ")";
}

std::size_t state_of(const Dims& d, std::span<const double> enc) {
  if (enc.size() != d.S)
    throw ad::ShapeError("state encoding has " + std::to_string(enc.size()) + " entries, expected " +
                         std::to_string(d.S));
  std::size_t hot = d.S, ones = 0;
  for (std::size_t i = 0; i < enc.size(); ++i) {
    if (enc[i] == 1.0) {
      hot = i;
      ++ones;
    } else if (enc[i] != 0.0) {
      ones = 2;
    }
  }
  if (ones != 1) throw ad::ShapeError("state encoding is not one-hot");
  return hot;
}

namespace {

void check_index(std::size_t v, std::size_t n, const char* what) {
  if (v >= n) throw ad::ShapeError(std::string(what) + " index " + std::to_string(v) + " out of range");
}

}  // namespace

Var option_dist(const HierVars& p, std::size_t s) {
  check_index(s, p.dims.S, "state");
  return ad::softmax(ad::slice(p.hi, s * p.dims.N, Shape::vector(p.dims.N)));
}

Var action_dist(const HierVars& p, std::size_t option, std::size_t s) {
  check_index(option, p.dims.N, "option");
  check_index(s, p.dims.S, "state");
  const std::size_t off = (option * p.dims.S + s) * p.dims.A;
  return ad::softmax(ad::slice(p.sub, off, Shape::vector(p.dims.A)));
}

Var termination_prob(const HierVars& p, std::size_t option, std::size_t s) {
  check_index(option, p.dims.N, "option");
  check_index(s, p.dims.S, "state");
  return ad::sigmoid(ad::slice(p.term, option * p.dims.S + s, Shape::scalar()));
}

Var option_transition(const HierVars& p, std::size_t prev, std::size_t s_next) {
  check_index(prev, p.dims.N, "option");
  const std::size_t N = p.dims.N;
  Var xi = termination_prob(p, prev, s_next);
  Var stay = ad::pad(ad::add_scalar(ad::neg(xi), 1.0), prev, Shape::vector(N));
  return ad::expand(xi, Shape::vector(N)) * option_dist(p, s_next) + stay;
}

void option_probs(const HierParams& p, std::size_t s, std::span<double> out) {
  const std::size_t N = p.dims.N;
  softmax_into(std::span<const double>(p.hi.data).subspan(s * N, N), out);
}

void action_probs(const HierParams& p, std::size_t option, std::size_t s, std::span<double> out) {
  const std::size_t A = p.dims.A;
  softmax_into(std::span<const double>(p.sub.data).subspan((option * p.dims.S + s) * A, A), out);
}

double termination_value(const HierParams& p, std::size_t option, std::size_t s) {
  return sigmoid_value(p.term.data[option * p.dims.S + s]);
}

StepChoice sample_step(const HierParams& p, const std::optional<ExecState>& exec, std::size_t s, int t,
                       Rng& rng, const TerminationMode& mode) {
  check_index(s, p.dims.S, "state");
  std::array<double, 64> buf{};
  if (p.dims.N > buf.size() || p.dims.A > buf.size())
    throw std::invalid_argument("sample_step: more than 64 options or actions");
  StepChoice out;
  bool pick = !exec.has_value();
  if (!pick) {
    if (mode.is_fixed())
      pick = mode.reselects_at(t);
    else
      pick = rng.bernoulli(termination_value(p, exec->active_option, s));
  }
  if (pick) {
    std::span<double> probs(buf.data(), p.dims.N);
    option_probs(p, s, probs);
    out.exec.active_option = rng.categorical(probs);
    out.exec.steps_in_option = 0;
    out.switched = true;
  } else {
    out.exec = *exec;
  }
  std::span<double> probs(buf.data(), p.dims.A);
  action_probs(p, out.exec.active_option, s, probs);
  out.action = rng.categorical(probs);
  ++out.exec.steps_in_option;
  return out;
}

// -- checkpoints ----------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'F', 'A', 'M', 'P', 'C', 'K', 'P', '1'};

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void put_block(std::ostream& os, const Array& a) {
  for (double d : a.data) put_u64(os, std::bit_cast<std::uint64_t>(d));
}

void get_block(std::istream& is, Array& a, const std::filesystem::path& path) {
  for (double& d : a.data) {
    d = std::bit_cast<double>(get_u64(is));
    if (!is) throw CheckpointError(path.string() + ": truncated parameter data");
  }
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const HierParams& p, const nlohmann::json& extra) {
  nlohmann::json header = extra;
  header["version"] = kCheckpointVersion;
  header["S"] = p.dims.S;
  header["N"] = p.dims.N;
  header["A"] = p.dims.A;
  const std::string text = header.dump();
  // write-then-rename so a crash never leaves a half-written checkpoint
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError(tmp.string() + ": cannot open for writing");
    os.write(kMagic, sizeof kMagic);
    put_u64(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    put_block(os, p.hi);
    put_block(os, p.sub);
    put_block(os, p.term);
    if (!os) throw CheckpointError(tmp.string() + ": write failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(path.string() + ": " + ec.message());
}

std::pair<HierParams, nlohmann::json> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError(path.string() + ": cannot open checkpoint");
  char magic[8] = {};
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw CheckpointError(path.string() + ": not a checkpoint (bad magic)");
  const std::uint64_t len = get_u64(is);
  if (!is || len > (1u << 24)) throw CheckpointError(path.string() + ": corrupt header length");
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw CheckpointError(path.string() + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": header is not JSON: " + e.what());
  }
  if (header.value("version", -1) != kCheckpointVersion)
    throw CheckpointError(path.string() + ": unsupported checkpoint version");
  HierParams p;
  try {
    p.dims = {header.at("S").get<std::size_t>(), header.at("N").get<std::size_t>(),
              header.at("A").get<std::size_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": header lacks dimensions");
  }
  if (p.dims.S == 0 || p.dims.N == 0 || p.dims.A == 0 || p.dims.S * p.dims.N * p.dims.A > (1u << 26))
    throw CheckpointError(path.string() + ": implausible dimensions");
  p.hi = Array::zeros(Shape::matrix(p.dims.S, p.dims.N));
  p.sub = Array::zeros(Shape::tensor3(p.dims.N, p.dims.S, p.dims.A));
  p.term = Array::zeros(Shape::matrix(p.dims.N, p.dims.S));
  get_block(is, p.hi, path);
  get_block(is, p.sub, path);
  get_block(is, p.term, path);
  if (is.peek() != std::char_traits<char>::eof()) throw CheckpointError(path.string() + ": trailing bytes");
  return {std::move(p), std::move(header)};
}

std::uint64_t hash_block(const Array& a) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (double d : a.data) {
    const std::uint64_t bits = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xFF;
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

}  // namespace famp::policy
