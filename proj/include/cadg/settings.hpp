#pragma once

// Every tunable of the generator and the run protocol, addressable as
// `section.key`. One table drives the config-file reader, the command-line
// overrides and the reproducibility snapshot, so the three cannot drift apart.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "cadg/data.hpp"
#include "cadg/train.hpp"

namespace cadg {

struct Settings {
  GeneratorParams data;
  RunConfig run;
};

struct SettingKey {
  std::string section;
  std::string key;
  std::function<void(Settings&, const std::string&)> set;
  std::function<std::string(const Settings&)> get;

  std::string qualified() const { return section + "." + key; }
  /// Command-line spelling, e.g. `per_cell` -> `--per-cell`.
  std::string flag() const {
    std::string f = "--" + key;
    std::replace(f.begin(), f.end(), '_', '-');
    return f;
  }
};

namespace detail {

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* first = text.data();
  const char* last = text.data() + text.size();
  while (first < last && std::isspace(static_cast<unsigned char>(*first))) ++first;
  while (last > first && std::isspace(static_cast<unsigned char>(*(last - 1)))) --last;
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc{} || ptr != last || first == last) {
    throw ConfigError("invalid value \"" + text + "\" for " + key);
  }
  return value;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

#define CADG_SIZE_KEY(SECTION, NAME, MEMBER)                                                    \
  SettingKey {                                                                                  \
    SECTION, NAME,                                                                              \
        [](Settings& s, const std::string& v) {                                                 \
          s.MEMBER = detail::parse_number<std::decay_t<decltype(s.MEMBER)>>(SECTION "." NAME, v); \
        },                                                                                      \
        [](const Settings& s) { return std::to_string(s.MEMBER); }                              \
  }

#define CADG_REAL_KEY(SECTION, NAME, MEMBER)                                                    \
  SettingKey {                                                                                  \
    SECTION, NAME,                                                                              \
        [](Settings& s, const std::string& v) {                                                 \
          s.MEMBER = detail::parse_number<double>(SECTION "." NAME, v);                         \
        },                                                                                      \
        [](const Settings& s) { return detail::format_double(s.MEMBER); }                       \
  }

inline const std::vector<SettingKey>& setting_keys() {
  static const std::vector<SettingKey> keys{
      CADG_SIZE_KEY("data", "classes", data.classes),
      CADG_SIZE_KEY("data", "domains", data.domains),
      CADG_SIZE_KEY("data", "per_cell", data.per_cell),
      CADG_SIZE_KEY("data", "height", data.height),
      CADG_SIZE_KEY("data", "width", data.width),
      CADG_SIZE_KEY("data", "channels", data.channels),
      CADG_SIZE_KEY("data", "seed", data.seed),
      CADG_SIZE_KEY("model", "layers", run.layers),
      CADG_SIZE_KEY("model", "model_dim", run.model_dim),
      CADG_SIZE_KEY("model", "heads", run.heads),
      CADG_SIZE_KEY("model", "patch_size", run.patch_size),
      CADG_SIZE_KEY("model", "mlp_hidden", run.mlp_hidden),
      CADG_SIZE_KEY("train", "steps", run.steps),
      CADG_SIZE_KEY("train", "batch", run.batch),
      CADG_REAL_KEY("train", "lr", run.lr),
      CADG_REAL_KEY("train", "momentum", run.momentum),
      CADG_REAL_KEY("train", "weight_decay", run.weight_decay),
      CADG_REAL_KEY("train", "lambda1", run.lambda.self1),
      CADG_REAL_KEY("train", "lambda2", run.lambda.self2),
      CADG_REAL_KEY("train", "lambda3", run.lambda.cross1),
      CADG_REAL_KEY("train", "lambda4", run.lambda.cross2),
      CADG_SIZE_KEY("train", "eval_every", run.eval_every),
      CADG_SIZE_KEY("train", "patience", run.patience),
      CADG_SIZE_KEY("train", "init_seed", run.init_seed),
      CADG_SIZE_KEY("train", "data_seed", run.data_seed),
      CADG_SIZE_KEY("train", "split_seed", run.split_seed),
      CADG_SIZE_KEY("train", "held_out_domain", run.held_out_domain),
      CADG_REAL_KEY("train", "val_fraction", run.val_fraction),
      CADG_SIZE_KEY("train", "erm_batch", run.erm_batch),
      CADG_SIZE_KEY("train", "eval_batch", run.eval_batch),
  };
  return keys;
}

#undef CADG_SIZE_KEY
#undef CADG_REAL_KEY

inline const SettingKey* find_setting(const std::string& section, const std::string& key) {
  for (const auto& k : setting_keys()) {
    if (k.section == section && k.key == key) return &k;
  }
  return nullptr;
}

/// Applies an INI-style stream (`[section]` headers, `key = value` lines).
/// Unknown sections or keys are errors.
inline void apply_config(Settings& s, std::istream& is) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(is, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw ConfigError("config key \"" + section + "\" is outside any section");
    }
    for (const auto& [key, value] : body) {
      const SettingKey* k = find_setting(section, key);
      if (!k) throw ConfigError("unknown config key \"" + section + "." + key + "\"");
      k->set(s, value.data());
    }
  }
}

inline void apply_config_file(Settings& s, const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  apply_config(s, is);
}

/// Full snapshot in the config-file format; reading it back reproduces `s`.
inline std::string to_config_text(const Settings& s) {
  std::ostringstream os;
  std::string section;
  for (const auto& k : setting_keys()) {
    if (k.section != section) {
      if (!section.empty()) os << '\n';
      section = k.section;
      os << '[' << section << "]\n";
    }
    os << k.key << " = " << k.get(s) << '\n';
  }
  return os.str();
}

}  // namespace cadg
