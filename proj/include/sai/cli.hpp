#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sai/config.hpp"
#include "sai/csv.hpp"
#include "sai/debias.hpp"
#include "sai/errors.hpp"
#include "sai/simulation.hpp"

namespace sai {

// Parsed invocation of one CLI command, echoed to the output directory for
// provenance.
struct RunManifest {
  std::string command;  // simulate | analyze | oracle
  std::string config_path;
  std::string data_path;  // analyze only
  std::string output_dir;
  std::uint64_t seed = 1;
  std::string target = "all";  // analyze only: 1-based coordinate or "all"
  unsigned threads = 1;
  bool paper_scale = false;
  std::vector<std::pair<std::string, std::string>> overrides;
};

namespace cli_detail {

inline void apply_overrides(ConfigFile& cfg, const RunManifest& manifest) {
  for (const auto& [key, value] : manifest.overrides) cfg.globals[key] = value;
}

inline void write_manifest_echo(const RunManifest& manifest) {
  std::filesystem::create_directories(manifest.output_dir);
  std::ofstream out(std::filesystem::path(manifest.output_dir) /
                    "manifest.txt");
  out << "version = " << kVersion << "\n";
  out << "command = " << manifest.command << "\n";
  out << "config = " << manifest.config_path << "\n";
  if (!manifest.data_path.empty()) out << "data = " << manifest.data_path << "\n";
  out << "out = " << manifest.output_dir << "\n";
  out << "seed = " << manifest.seed << "\n";
  if (manifest.command == "analyze") out << "target = " << manifest.target << "\n";
  out << "threads = " << manifest.threads << "\n";
  out << "paper_scale = " << (manifest.paper_scale ? 1 : 0) << "\n";
  for (const auto& [key, value] : manifest.overrides)
    out << "override " << key << " = " << value << "\n";
}

inline void write_error_file(const RunManifest& manifest,
                             const std::string& stage,
                             const std::string& message) {
  std::error_code ec;
  std::filesystem::create_directories(manifest.output_dir, ec);
  std::ofstream out(std::filesystem::path(manifest.output_dir) / "error.txt");
  out << "stage = " << stage << "\n";
  out << "message = " << message << "\n";
}

inline std::string outcome_name(OutcomeKind k) {
  return k == OutcomeKind::continuous ? "continuous" : "binary";
}

inline void write_results_csv(const std::filesystem::path& path,
                              const ScenarioResult& result) {
  std::ofstream out(path);
  write_csv_row(out, {"scenario", "method", "replicate", "coord", "estimate",
                      "ci_low", "ci_high", "covered", "deviance",
                      "trim_fraction", "neg_weight_fraction", "selected_d",
                      "clip_fraction", "error"});
  for (const auto& row : result.rows) {
    write_csv_row(
        out, {result.config.name, row.method, std::to_string(row.replicate),
              std::to_string(row.coord), format_double(row.estimate),
              format_double(row.ci_low), format_double(row.ci_high),
              std::to_string(row.covered), format_double(row.test_deviance),
              format_double(row.trim_fraction),
              format_double(row.neg_weight_fraction),
              std::to_string(row.selected_d), format_double(row.clip_fraction),
              row.error});
  }
}

inline void write_aggregate_csv(const std::filesystem::path& path,
                                const ScenarioResult& result) {
  std::ofstream out(path);
  write_csv_row(out, {"scenario", "method", "coord", "oracle_beta", "coverage",
                      "n_eval", "deviance_mean", "deviance_sd", "n_deviance",
                      "failures"});
  for (const auto& agg : aggregate(result)) {
    const double oracle =
        agg.coord >= 1 && agg.coord <= result.oracle_beta.size()
            ? result.oracle_beta(agg.coord - 1)
            : std::numeric_limits<double>::quiet_NaN();
    write_csv_row(out, {result.config.name, agg.method,
                        std::to_string(agg.coord), format_double(oracle),
                        format_double(agg.coverage),
                        std::to_string(agg.n_covered_eval),
                        format_double(agg.deviance_mean),
                        format_double(agg.deviance_sd),
                        std::to_string(agg.n_deviance),
                        std::to_string(agg.failures)});
  }
}

}  // namespace cli_detail

// Runs every scenario in the config and writes per-scenario result and
// aggregate CSVs plus long-format deviance data for plotting. Byte-identical
// outputs for identical manifests.
inline int cmd_simulate(const RunManifest& manifest) {
  try {
    ConfigFile cfg = parse_config(manifest.config_path);
    cli_detail::apply_overrides(cfg, manifest);
    auto plans = scenarios_from_config(cfg, manifest.seed);
    if (manifest.paper_scale) {
      for (auto& plan : plans) {
        plan.config.n_replicates = 500;
        plan.config.b_reps = 500;
      }
    }

    cli_detail::write_manifest_echo(manifest);
    const std::filesystem::path out_dir(manifest.output_dir);

    KeyedValues globals{nullptr, &cfg.globals, "config"};
    RunOptions run_opt;
    run_opt.threads = manifest.threads;
    run_opt.cache_dir =
        globals.get_string("oracle_cache", (out_dir / "oracle_cache").string());

    std::ofstream meta(out_dir / "scenarios.csv");
    write_csv_row(meta, {"scenario", "outcome", "missing_rate", "n", "p",
                         "delta", "epsilon_sd", "replicates", "b_reps",
                         "k_folds", "test_n", "oracle_n", "master_seed",
                         "methods"});

    std::ofstream dev(out_dir / "deviance_long.csv");
    write_csv_row(dev, {"scenario", "outcome", "missing_rate", "n", "method",
                        "replicate", "deviance"});

    for (const auto& plan : plans) {
      const ScenarioConfig& sc = plan.config;
      std::string methods_joined;
      for (const auto& m : plan.methods) {
        if (!methods_joined.empty()) methods_joined += ",";
        methods_joined += m;
      }
      write_csv_row(meta,
                    {sc.name, cli_detail::outcome_name(sc.outcome),
                     format_double(sc.missing_rate), std::to_string(sc.n),
                     std::to_string(sc.p), format_double(sc.resolved_delta()),
                     format_double(sc.epsilon_sd),
                     std::to_string(sc.n_replicates), std::to_string(sc.b_reps),
                     std::to_string(sc.k_folds), std::to_string(sc.test_n),
                     std::to_string(sc.oracle_n),
                     std::to_string(sc.master_seed), methods_joined});

      const ScenarioResult result = run_scenario(sc, plan.methods, run_opt);
      cli_detail::write_results_csv(out_dir / ("results_" + sc.name + ".csv"),
                                    result);
      cli_detail::write_aggregate_csv(
          out_dir / ("aggregate_" + sc.name + ".csv"), result);

      int last_rep = -1;
      std::string last_method;
      for (const auto& row : result.rows) {
        if (!row.error.empty()) continue;
        if (row.replicate == last_rep && row.method == last_method) continue;
        last_rep = row.replicate;
        last_method = row.method;
        write_csv_row(dev, {sc.name, cli_detail::outcome_name(sc.outcome),
                            format_double(sc.missing_rate),
                            std::to_string(sc.n), row.method,
                            std::to_string(row.replicate),
                            format_double(row.test_deviance)});
      }
    }
    return 0;
  } catch (const ConfigError& e) {
    cli_detail::write_error_file(manifest, "config", e.what());
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    cli_detail::write_error_file(manifest, "simulate", e.what());
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

// Precomputes (and caches) the oracle coefficients for every scenario in
// the config; existing cache entries are reused, not rewritten.
inline int cmd_oracle(const RunManifest& manifest) {
  try {
    ConfigFile cfg = parse_config(manifest.config_path);
    cli_detail::apply_overrides(cfg, manifest);
    const auto plans = scenarios_from_config(cfg, manifest.seed);
    cli_detail::write_manifest_echo(manifest);
    const std::filesystem::path out_dir(manifest.output_dir);
    KeyedValues globals{nullptr, &cfg.globals, "config"};
    const std::string cache =
        globals.get_string("oracle_cache", (out_dir / "oracle_cache").string());

    std::ofstream out(out_dir / "oracle.csv");
    write_csv_row(out, {"scenario", "coord", "beta_star", "mc_se"});
    for (const auto& plan : plans) {
      const OracleEstimate est = oracle_beta_star_cached(
          plan.config, plan.config.oracle_n, kOracleSeed, cache);
      for (Index j = 0; j < est.beta.size(); ++j)
        write_csv_row(out, {plan.config.name, std::to_string(j + 1),
                            format_double(est.beta(j)),
                            format_double(est.mc_se(j))});
    }
    return 0;
  } catch (const ConfigError& e) {
    cli_detail::write_error_file(manifest, "config", e.what());
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    cli_detail::write_error_file(manifest, "oracle", e.what());
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

namespace cli_detail {

struct LoadedData {
  Dataset data;
  std::vector<std::string> covariate_names;
  std::vector<std::pair<int, std::string>> rejects;  // row number, reason
  std::size_t data_rows = 0;
};

inline LoadedData load_analysis_csv(const std::string& path,
                                    const KeyedValues& kv) {
  const auto rows = read_csv(path);
  if (rows.size() < 2)
    throw ConfigError("data file has no rows: " + path);
  const auto& header = rows.front();
  auto col_index = [&](const std::string& name) -> int {
    for (std::size_t j = 0; j < header.size(); ++j)
      if (header[j] == name) return static_cast<int>(j);
    throw ConfigError("column '" + name + "' not found in " + path);
  };

  const std::string outcome_col = kv.require_string("outcome_col");
  const int oc = col_index(outcome_col);
  std::optional<int> zc;
  const std::string* surrogate = kv.find("surrogate_col");
  if (surrogate && !surrogate->empty()) zc = col_index(*surrogate);
  const auto cov_names = split_list(kv.require_string("covariate_cols"));
  if (cov_names.empty()) throw ConfigError("covariate_cols is empty");
  std::vector<int> cc;
  for (const auto& name : cov_names) cc.push_back(col_index(name));

  LoadedData loaded;
  loaded.covariate_names = cov_names;
  loaded.data_rows = rows.size() - 1;
  std::vector<double> xs, ys, zs;
  std::vector<int> rs;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& row = rows[i];
    const int row_no = static_cast<int>(i + 1);  // 1-based with header
    bool ok = true;
    std::string reason;
    std::vector<double> xrow(cov_names.size());
    for (std::size_t j = 0; j < cc.size(); ++j) {
      if (static_cast<std::size_t>(cc[j]) >= row.size() ||
          !parse_double(row[static_cast<std::size_t>(cc[j])], &xrow[j])) {
        ok = false;
        reason = "non-numeric covariate '" + cov_names[j] + "'";
        break;
      }
    }
    double z = 0.0;
    if (ok && zc) {
      if (static_cast<std::size_t>(*zc) >= row.size() ||
          !parse_double(row[static_cast<std::size_t>(*zc)], &z)) {
        ok = false;
        reason = "non-numeric surrogate";
      }
    }
    double y = std::numeric_limits<double>::quiet_NaN();
    int r = 0;
    if (ok) {
      const std::string yv = static_cast<std::size_t>(oc) < row.size()
                                 ? row[static_cast<std::size_t>(oc)]
                                 : "";
      if (detail::trim(yv).empty()) {
        r = 0;  // blank outcome: missing
      } else if (parse_double(yv, &y)) {
        r = 1;
      } else {
        ok = false;
        reason = "non-numeric outcome";
      }
    }
    if (!ok) {
      loaded.rejects.emplace_back(row_no, reason);
      continue;
    }
    for (double v : xrow) xs.push_back(v);
    ys.push_back(y);
    rs.push_back(r);
    if (zc) zs.push_back(z);
  }

  const Index n = static_cast<Index>(ys.size());
  const Index p = static_cast<Index>(cov_names.size());
  loaded.data.x.resize(n, p);
  loaded.data.y.resize(n);
  loaded.data.r.resize(n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < p; ++j)
      loaded.data.x(i, j) = xs[static_cast<std::size_t>(i * p + j)];
    loaded.data.y(i) = ys[static_cast<std::size_t>(i)];
    loaded.data.r(i) = rs[static_cast<std::size_t>(i)];
  }
  if (zc) {
    loaded.data.z = Vector(n);
    for (Index i = 0; i < n; ++i)
      (*loaded.data.z)(i) = zs[static_cast<std::size_t>(i)];
  }
  return loaded;
}

}  // namespace cli_detail

// Fits the proposed pipeline on a user-supplied CSV and writes a per-
// coordinate report with estimates, bootstrap intervals, and diagnostics.
inline int cmd_analyze(const RunManifest& manifest) {
  try {
    ConfigFile cfg = parse_config(manifest.config_path);
    cli_detail::apply_overrides(cfg, manifest);
    KeyedValues kv{nullptr, &cfg.globals, "analyze config"};
    cli_detail::write_manifest_echo(manifest);
    const std::filesystem::path out_dir(manifest.output_dir);

    const GlmFamily family = family_from_string(kv.require_string("family"));
    auto loaded = cli_detail::load_analysis_csv(manifest.data_path, kv);

    {
      std::ofstream rej(out_dir / "rejects.csv");
      write_csv_row(rej, {"row", "reason"});
      for (const auto& [row_no, reason] : loaded.rejects)
        write_csv_row(rej, {std::to_string(row_no), reason});
    }
    if (loaded.data_rows == 0 ||
        loaded.rejects.size() * 2 > loaded.data_rows)
      throw ConfigError("more than 50% of data rows were rejected");

    Dataset& data = loaded.data;
    data.validate();
    const Index p = data.p();

    std::vector<Index> targets;
    if (manifest.target == "all") {
      for (Index t = 0; t < p; ++t) targets.push_back(t);
    } else {
      const long long t = std::strtoll(manifest.target.c_str(), nullptr, 10);
      if (t < 1 || t > p)
        throw ConfigError("target must be 'all' or a 1-based coordinate");
      targets.push_back(static_cast<Index>(t - 1));
    }

    InferenceOptions opt;
    opt.threads = manifest.threads;
    if (kv.find("d")) opt.first_stage.d = kv.get_int("d", 0);
    opt.first_stage.d_max = kv.get_int("d_max", 3);
    const int k_folds = static_cast<int>(kv.get_int("k_folds", 5));
    const int b_reps = static_cast<int>(kv.get_int("b_reps", 200));
    const std::uint64_t seed = manifest.seed;

    const auto ests =
        multi_target_inference(data, family, targets, k_folds, b_reps, seed, opt);

    const double missing_rate =
        1.0 - static_cast<double>(data.observed_count()) /
                  static_cast<double>(data.n());
    std::ofstream out(out_dir / "report.csv");
    write_csv_row(out, {"coord", "column", "estimate", "se", "ci_low",
                        "ci_high", "beta_init", "selected_d", "trim_fraction",
                        "neg_weight_fraction", "nw_fallbacks", "n",
                        "n_observed", "missing_rate"});
    for (const auto& est : ests) {
      write_csv_row(
          out,
          {std::to_string(est.target_index + 1),
           loaded.covariate_names[static_cast<std::size_t>(est.target_index)],
           format_double(est.beta_tilde), format_double(est.se),
           format_double(est.ci_low), format_double(est.ci_high),
           format_double(est.beta_init(est.target_index)),
           std::to_string(est.selected_d), format_double(est.trim_fraction),
           format_double(est.neg_weight_fraction),
           std::to_string(est.nw_fallbacks), std::to_string(data.n()),
           std::to_string(data.observed_count()),
           format_double(missing_rate)});
    }
    return 0;
  } catch (const ConfigError& e) {
    cli_detail::write_error_file(manifest, "config", e.what());
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    cli_detail::write_error_file(manifest, "analyze", e.what());
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace sai
