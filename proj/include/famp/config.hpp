#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "famp/meta.hpp"

namespace famp::meta {

// Bad key, bad value or unreadable file. The message names the culprit.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct KeyDoc {
  std::string_view key;
  std::string_view default_value;
  std::string_view help;
};

// Every accepted key with its default, in a stable order.
std::span<const KeyDoc> config_keys();

// Strict: unknown keys and ill-typed values throw ConfigError.
MetaConfig config_from_json(const nlohmann::json& j);
void apply_key(MetaConfig& cfg, const std::string& key, const nlohmann::json& value);
nlohmann::json config_to_json(const MetaConfig& cfg);

// FNV-1a of the canonical JSON dump.
std::uint64_t config_hash(const nlohmann::json& j);
std::string hex64(std::uint64_t v);

// "a.b.c=v": v is parsed as JSON when it parses, otherwise taken as a string.
void apply_override(nlohmann::json& doc, std::string_view assignment);

nlohmann::json load_json_file(const std::string& path);

}  // namespace famp::meta
