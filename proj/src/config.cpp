#include "famp/config.hpp"

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace famp::meta {

namespace {

constexpr std::array<KeyDoc, 22> kKeys = {{
    {"N_options", "4", "number of options"},
    {"M_env_samples", "64", "tasks sampled per outer update (multi_task uses every train task)"},
    {"L_adapt_steps", "2", "inner adaptation steps"},
    {"k_episodes", "10", "episodes per update"},
    {"alpha_in", "10", "inner SGD learning rate"},
    {"alpha_out", "0.01", "outer Adam learning rate"},
    {"gamma", "0.95", "discount"},
    {"lambda_gae", "0.98", "GAE lambda"},
    {"lambda_dice", "0", "loaded DiCE lambda"},
    {"epochs", "2000", "outer updates"},
    {"mode", "\"famp\"", "famp | multi_task | learn_high_level | learn_all | no_hierarchy | fixed_term | single_task"},
    {"option_length", "7", "c for fixed_term"},
    {"seed", "0", "global seed; every substream derives from it"},
    {"family_seed", "0", "seed of the train/test split"},
    {"checkpoint_every", "50", "epochs between checkpoints (the last epoch is always saved)"},
    {"max_steps", "1500", "episode cap, at most 1500"},
    {"alpha_adapt", "null", "test-time SGD rate; null means 1 for multi_task, alpha_in otherwise"},
    {"single_task_lr", "0.3", "Adam rate of the single-task baseline"},
    {"single_task_updates", "100", "updates of the single-task baseline per test task"},
    {"sub_init_scale", "0.1", "std of the initial sub-policy logits"},
    {"eval_steps", "10", "adaptation updates evaluated on each test task"},
    {"log_wallclock", "false", "write real epoch times into train_log.csv (breaks byte-identical logs)"},
}};

template <class T>
T get_as(const std::string& key, const nlohmann::json& v) {
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError("");
      if constexpr (std::is_unsigned_v<T>)
        if (v.get<long long>() < 0) throw ConfigError("");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("");
    } else {
      if (!v.is_string()) throw ConfigError("");
    }
    return v.get<T>();
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': bad value " + v.dump());
  }
}

}  // namespace

std::span<const KeyDoc> config_keys() { return kKeys; }

void apply_key(MetaConfig& cfg, const std::string& key, const nlohmann::json& v) {
  if (key == "N_options") cfg.N_options = get_as<std::size_t>(key, v);
  else if (key == "M_env_samples") cfg.M_env_samples = get_as<std::size_t>(key, v);
  else if (key == "L_adapt_steps") cfg.L_adapt_steps = get_as<std::size_t>(key, v);
  else if (key == "k_episodes") cfg.k_episodes = get_as<std::size_t>(key, v);
  else if (key == "alpha_in") cfg.alpha_in = get_as<double>(key, v);
  else if (key == "alpha_out") cfg.alpha_out = get_as<double>(key, v);
  else if (key == "gamma") cfg.gamma = get_as<double>(key, v);
  else if (key == "lambda_gae") cfg.lambda_gae = get_as<double>(key, v);
  else if (key == "lambda_dice") cfg.lambda_dice = get_as<double>(key, v);
  else if (key == "epochs") cfg.epochs = get_as<int>(key, v);
  else if (key == "mode") {
    try {
      cfg.mode = AblationMode::parse(get_as<std::string>(key, v), cfg.mode.option_length());
    } catch (const std::invalid_argument& e) {
      throw ConfigError("config key 'mode': " + std::string(e.what()));
    }
  } else if (key == "option_length") {
    const int c = get_as<int>(key, v);
    if (c <= 0) throw ConfigError("config key 'option_length': must be positive");
    cfg.mode = AblationMode::of(cfg.mode.kind(), c);
  } else if (key == "seed") cfg.seed = get_as<std::uint64_t>(key, v);
  else if (key == "family_seed") cfg.family_seed = get_as<std::uint64_t>(key, v);
  else if (key == "checkpoint_every") cfg.checkpoint_every = get_as<int>(key, v);
  else if (key == "max_steps") cfg.max_steps = get_as<int>(key, v);
  else if (key == "alpha_adapt") {
    if (v.is_null()) cfg.alpha_adapt.reset();
    else cfg.alpha_adapt = get_as<double>(key, v);
  } else if (key == "single_task_lr") cfg.single_task_lr = get_as<double>(key, v);
  else if (key == "single_task_updates") cfg.single_task_updates = get_as<int>(key, v);
  else if (key == "sub_init_scale") cfg.sub_init_scale = get_as<double>(key, v);
  else if (key == "eval_steps") cfg.eval_steps = get_as<int>(key, v);
  else if (key == "log_wallclock") cfg.log_wallclock = get_as<bool>(key, v);
  else throw ConfigError("unknown config key '" + key + "'");
}

MetaConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  MetaConfig cfg;
  // option_length before mode would be clobbered by the mode's default c
  for (const auto& [k, v] : j.items())
    if (k != "option_length") apply_key(cfg, k, v);
  if (j.contains("option_length")) apply_key(cfg, "option_length", j.at("option_length"));
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

nlohmann::json config_to_json(const MetaConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  j["N_options"] = c.N_options;
  j["M_env_samples"] = c.M_env_samples;
  j["L_adapt_steps"] = c.L_adapt_steps;
  j["k_episodes"] = c.k_episodes;
  j["alpha_in"] = c.alpha_in;
  j["alpha_out"] = c.alpha_out;
  j["gamma"] = c.gamma;
  j["lambda_gae"] = c.lambda_gae;
  j["lambda_dice"] = c.lambda_dice;
  j["epochs"] = c.epochs;
  j["mode"] = c.mode.name();
  j["option_length"] = c.mode.option_length();
  j["seed"] = c.seed;
  j["family_seed"] = c.family_seed;
  j["checkpoint_every"] = c.checkpoint_every;
  j["max_steps"] = c.max_steps;
  j["alpha_adapt"] = c.alpha_adapt ? nlohmann::json(*c.alpha_adapt) : nlohmann::json(nullptr);
  j["single_task_lr"] = c.single_task_lr;
  j["single_task_updates"] = c.single_task_updates;
  j["sub_init_scale"] = c.sub_init_scale;
  j["eval_steps"] = c.eval_steps;
  j["log_wallclock"] = c.log_wallclock;
  return j;
}

std::uint64_t config_hash(const nlohmann::json& j) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void apply_override(nlohmann::json& doc, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0)
    throw ConfigError("override '" + std::string(assignment) + "' is not of the form key=value");
  const std::string path(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  for (;;) {
    const auto dot = path.find('.', start);
    const std::string part = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override '" + path + "': empty path component");
    if (node->is_null()) *node = nlohmann::json::object();
    if (!node->is_object()) throw ConfigError("override '" + path + "': '" + part + "' is not inside an object");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

nlohmann::json load_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  nlohmann::json j = nlohmann::json::parse(ss.str(), nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file '" + path + "' is not valid JSON");
  return j;
}

}  // namespace famp::meta
