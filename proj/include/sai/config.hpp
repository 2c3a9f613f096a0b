#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sai/csv.hpp"
#include "sai/errors.hpp"
#include "sai/simulation.hpp"

namespace sai {

// Flat key = value format with [section] headers and # comments. The
// global section supplies defaults; each [scenario NAME] section overrides
// them. Errors carry line numbers.
struct ConfigFile {
  std::map<std::string, std::string> globals;
  std::vector<std::pair<std::string, std::map<std::string, std::string>>>
      sections;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t");
  return s.substr(first, last - first + 1);
}

}  // namespace detail

inline ConfigFile parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  ConfigFile cfg;
  std::map<std::string, std::string>* current = &cfg.globals;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw ConfigError(path + ":" + std::to_string(line_no) +
                          ": unterminated section header");
      const std::string name = detail::trim(t.substr(1, t.size() - 2));
      if (name.empty())
        throw ConfigError(path + ":" + std::to_string(line_no) +
                          ": empty section name");
      cfg.sections.emplace_back(name, std::map<std::string, std::string>{});
      current = &cfg.sections.back().second;
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(line_no) +
                        ": expected key = value");
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string value = detail::trim(t.substr(eq + 1));
    if (key.empty())
      throw ConfigError(path + ":" + std::to_string(line_no) + ": empty key");
    (*current)[key] = value;
  }
  return cfg;
}

struct KeyedValues {
  const std::map<std::string, std::string>* local = nullptr;
  const std::map<std::string, std::string>* global = nullptr;
  std::string context;

  const std::string* find(const std::string& key) const {
    if (local) {
      const auto it = local->find(key);
      if (it != local->end()) return &it->second;
    }
    if (global) {
      const auto it = global->find(key);
      if (it != global->end()) return &it->second;
    }
    return nullptr;
  }

  std::string get_string(const std::string& key, const std::string& dflt) const {
    const std::string* v = find(key);
    return v ? *v : dflt;
  }

  std::string require_string(const std::string& key) const {
    const std::string* v = find(key);
    if (!v) throw ConfigError(context + ": missing required key '" + key + "'");
    return *v;
  }

  double get_double(const std::string& key, double dflt) const {
    const std::string* v = find(key);
    if (!v) return dflt;
    double out;
    if (!parse_double(*v, &out))
      throw ConfigError(context + ": key '" + key + "' is not a number: " + *v);
    return out;
  }

  long long get_int(const std::string& key, long long dflt) const {
    const double v = get_double(key, static_cast<double>(dflt));
    const long long out = static_cast<long long>(v);
    if (static_cast<double>(out) != v)
      throw ConfigError(context + ": key '" + key + "' is not an integer");
    return out;
  }
};

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const std::string t = detail::trim(item);
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

// Builds the scenario grid from a parsed config. Sections named
// "scenario ..." (or any section, when none carry the prefix) become
// scenarios; global keys provide defaults.
struct ScenarioPlan {
  ScenarioConfig config;
  std::vector<std::string> methods;
};

inline std::vector<ScenarioPlan> scenarios_from_config(const ConfigFile& cfg,
                                                       std::uint64_t seed) {
  std::vector<ScenarioPlan> plans;
  for (const auto& [name, section] : cfg.sections) {
    KeyedValues kv{&section, &cfg.globals, "scenario '" + name + "'"};
    ScenarioPlan plan;
    ScenarioConfig& sc = plan.config;
    sc.name = name;
    const std::string outcome = kv.get_string("outcome", "continuous");
    if (outcome == "continuous")
      sc.outcome = OutcomeKind::continuous;
    else if (outcome == "binary")
      sc.outcome = OutcomeKind::binary;
    else
      throw ConfigError(kv.context + ": outcome must be continuous|binary");
    sc.missing_rate = kv.get_double("missing_rate", 0.5);
    sc.n = kv.get_int("n", 500);
    sc.p = kv.get_int("p", 8);
    const std::string* delta = kv.find("delta");
    if (delta) {
      double v;
      if (!parse_double(*delta, &v))
        throw ConfigError(kv.context + ": delta is not a number");
      sc.delta = v;
    }
    sc.epsilon_sd = kv.get_double("epsilon_sd", sc.epsilon_sd);
    sc.n_replicates = kv.get_int("replicates", 200);
    sc.b_reps = static_cast<int>(kv.get_int("b_reps", 200));
    sc.k_folds = static_cast<int>(kv.get_int("k_folds", 5));
    sc.test_n = kv.get_int("test_n", 10000);
    sc.oracle_n = kv.get_int("oracle_n", 1000000);
    sc.master_seed = derive_seed(
        seed, detail::fnv1a(name));  // per-scenario stream from the run seed
    plan.methods = split_list(kv.get_string(
        "methods", "baseline1,baseline2,proposed_no_z,proposed_with_z"));
    sc.validate();
    plans.push_back(std::move(plan));
  }
  if (plans.empty())
    throw ConfigError("config defines no scenario sections");
  return plans;
}

}  // namespace sai
