// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

#include "sgr/localnet.hpp"

namespace sgr {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TrainMode : std::uint8_t { GlobalBp, Layerwise, Reforward, Sgr };
enum class Schedule : std::uint8_t { Constant, Cosine };

struct TrainConfig {
  TrainMode mode = TrainMode::Sgr;
  HeadMode head_mode = HeadMode::BpFree;
  double lambda = 1.0;
  bool normalize_deltas = true;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  Schedule schedule = Schedule::Cosine;
  std::size_t epochs = 30;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  std::size_t modules = 3;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline const char* to_string(TrainMode m) {
  switch (m) {
    case TrainMode::GlobalBp: return "globalbp";
    case TrainMode::Layerwise: return "layerwise";
    case TrainMode::Reforward: return "reforward";
    case TrainMode::Sgr: return "sgr";
  }
  return "?";
}

inline const char* to_string(HeadMode m) { return m == HeadMode::BpFree ? "bpfree" : "localbp"; }
inline const char* to_string(Schedule s) { return s == Schedule::Constant ? "constant" : "cosine"; }

inline TrainMode parse_train_mode(const std::string& v) {
  if (v == "globalbp") return TrainMode::GlobalBp;
  if (v == "layerwise") return TrainMode::Layerwise;
  if (v == "reforward") return TrainMode::Reforward;
  if (v == "sgr") return TrainMode::Sgr;
  throw ConfigError("unknown mode '" + v + "' (globalbp|layerwise|reforward|sgr)");
}

inline void validate(const TrainConfig& c) {
  if (!(c.lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (!(c.lr >= 0.0)) throw ConfigError("lr must be >= 0");
  if (!(c.momentum >= 0.0)) throw ConfigError("momentum must be >= 0");
  if (!(c.weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (c.modules < 1) throw ConfigError("modules must be >= 1");
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size() || !std::isfinite(out))
    throw ConfigError("cannot parse value '" + v + "' for key '" + key + "' as a real number");
  return out;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("cannot parse value '" + v + "' for key '" + key + "' as a non-negative integer");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("cannot parse value '" + v + "' for key '" + key + "' as a boolean");
}

}  // namespace detail

inline void set_config_key(TrainConfig& c, const std::string& key, const std::string& v) {
  using namespace detail;
  if (key == "mode") {
    c.mode = parse_train_mode(v);
  } else if (key == "head_mode") {
    if (v == "bpfree") c.head_mode = HeadMode::BpFree;
    else if (v == "localbp") c.head_mode = HeadMode::LocalBp;
    else throw ConfigError("unknown head_mode '" + v + "' (bpfree|localbp)");
  } else if (key == "lambda") {
    c.lambda = parse_double(key, v);
  } else if (key == "normalize_deltas") {
    c.normalize_deltas = parse_bool(key, v);
  } else if (key == "lr") {
    c.lr = parse_double(key, v);
  } else if (key == "momentum") {
    c.momentum = parse_double(key, v);
  } else if (key == "weight_decay") {
    c.weight_decay = parse_double(key, v);
  } else if (key == "schedule") {
    if (v == "constant") c.schedule = Schedule::Constant;
    else if (v == "cosine") c.schedule = Schedule::Cosine;
    else throw ConfigError("unknown schedule '" + v + "' (constant|cosine)");
  } else if (key == "epochs") {
    c.epochs = parse_uint(key, v);
  } else if (key == "batch_size") {
    c.batch_size = parse_uint(key, v);
  } else if (key == "seed") {
    c.seed = parse_uint(key, v);
  } else if (key == "modules") {
    c.modules = parse_uint(key, v);
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

// `key = value` lines; '#' starts a comment; absent keys keep their defaults.
inline TrainConfig parse_config_text(const std::string& text) {
  TrainConfig c;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    try {
      set_config_key(c, key, val);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  validate(c);
  return c;
}

inline TrainConfig parse_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

inline std::string serialize_config(const TrainConfig& c) {
  std::ostringstream os;
  os << "mode = " << to_string(c.mode) << '\n'
     << "head_mode = " << to_string(c.head_mode) << '\n'
     << "lambda = " << format_double(c.lambda) << '\n'
     << "normalize_deltas = " << (c.normalize_deltas ? "true" : "false") << '\n'
     << "lr = " << format_double(c.lr) << '\n'
     << "momentum = " << format_double(c.momentum) << '\n'
     << "weight_decay = " << format_double(c.weight_decay) << '\n'
     << "schedule = " << to_string(c.schedule) << '\n'
     << "epochs = " << c.epochs << '\n'
     << "batch_size = " << c.batch_size << '\n'
     << "seed = " << c.seed << '\n'
     << "modules = " << c.modules << '\n';
  return os.str();
}

}  // namespace sgr
