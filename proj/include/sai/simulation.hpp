#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sai/baselines.hpp"
#include "sai/debias.hpp"
#include "sai/errors.hpp"
#include "sai/glm.hpp"
#include "sai/parallel.hpp"
#include "sai/pipeline.hpp"
#include "sai/rng.hpp"

namespace sai {

enum class OutcomeKind { continuous, binary };

// One benchmark scenario. epsilon_sd encodes the N(0,2) noise as variance 2
// by default; the value is carried into run metadata so the reading is
// auditable and overridable.
struct ScenarioConfig {
  std::string name = "scenario";
  OutcomeKind outcome = OutcomeKind::continuous;
  double missing_rate = 0.5;  // marginal P(R=0)
  Index n = 500;
  Index p = 8;
  std::optional<double> delta;  // surrogate strength; default by outcome
  double epsilon_sd = 1.4142135623730951;
  Index n_replicates = 200;
  int b_reps = 200;
  int k_folds = 5;
  std::uint64_t master_seed = 20250801;
  Index test_n = 10000;
  Index oracle_n = 1000000;

  double resolved_delta() const {
    if (delta) return *delta;
    return outcome == OutcomeKind::continuous ? 0.5 : 0.25;
  }

  GlmFamily family() const {
    return outcome == OutcomeKind::continuous ? gaussian_family()
                                              : binomial_family();
  }

  void validate() const {
    if (!(missing_rate > 0.0 && missing_rate < 1.0))
      throw ConfigError("scenario " + name + ": missing_rate must be in (0,1)");
    if (p != 8)
      throw ConfigError("scenario " + name + ": the benchmark DGP fixes p=8");
    if (n < p + 2) throw ConfigError("scenario " + name + ": n too small");
  }
};

inline Vector benchmark_beta0() {
  Vector b(8);
  b << 1, 1, -1, -1, 0, 0, 0, 0;
  return b;
}

// Draws (X, Z, R, Y) per the benchmark design: R ~ Bern(1 - missing_rate);
// X | R=0 ~ N(0, I); X | R=1 ~ 0.7 N(0, I) + 0.3 N(1, 1.5 I);
// Y = X'b0 + sum_{j=5..8} |X_j|/4 + eps (continuous) or the sign indicator
// of the same index with a 0.5 factor on X'b0 (binary);
// Z = delta X'b0 + sum |X_j|/4 + eps_z. Y is stored for every row; the R
// mask governs access downstream.
inline Dataset generate(const ScenarioConfig& config, std::uint64_t seed) {
  config.validate();
  const Index n = config.n;
  const Index p = config.p;
  const Vector beta0 = benchmark_beta0();
  const double delta = config.resolved_delta();
  const double sd15 = std::sqrt(1.5);

  Dataset data;
  data.x.resize(n, p);
  data.y.resize(n);
  data.r.resize(n);
  data.z = Vector(n);

  Rng rng(seed);
  for (Index i = 0; i < n; ++i) {
    const int r = rng.bernoulli(1.0 - config.missing_rate) ? 1 : 0;
    data.r(i) = r;
    if (r == 1 && !rng.bernoulli(0.7)) {
      for (Index j = 0; j < p; ++j) data.x(i, j) = 1.0 + sd15 * rng.normal();
    } else {
      for (Index j = 0; j < p; ++j) data.x(i, j) = rng.normal();
    }
    const double lin = data.x.row(i).dot(beta0);
    double bump = 0.0;
    for (Index j = 4; j < 8; ++j) bump += std::abs(data.x(i, j)) / 4.0;
    const double eps = config.epsilon_sd * rng.normal();
    if (config.outcome == OutcomeKind::continuous)
      data.y(i) = lin + bump + eps;
    else
      data.y(i) = (0.5 * lin + bump + eps > 0.0) ? 1.0 : 0.0;
    (*data.z)(i) = delta * lin + bump + rng.normal();
  }
  return data;
}

// seed for oracle draws; fixed so the cached value is shared across runs
inline constexpr std::uint64_t kOracleSeed = 0x0eac1e5eedull;

struct OracleEstimate {
  Vector beta;
  Vector mc_se;  // sandwich standard errors of the Monte Carlo fit
};

// Pseudo-true beta*: deviance minimizer over the scenario's joint (X, Y)
// law, computed by fitting the GLM on a large fully observed draw (the R
// mask is ignored; the covariate marginal keeps its R-mixture form).
inline OracleEstimate oracle_beta_star_full(const ScenarioConfig& config,
                                            Index oracle_n,
                                            std::uint64_t seed) {
  if (oracle_n < 100000)
    throw ConfigError("oracle_beta_star: need oracle_n >= 1e5");
  ScenarioConfig big = config;
  big.n = oracle_n;
  const Dataset draw = generate(big, seed);
  const GlmFamily family = config.family();
  const GlmFit fit = fit_glm(draw.x, draw.y, family);

  const Index n = draw.x.rows();
  const Index p = draw.x.cols();
  const Vector eta = draw.x * fit.beta;
  Matrix a = Matrix::Zero(p, p);
  Matrix b = Matrix::Zero(p, p);
  for (Index i = 0; i < n; ++i) {
    const double w = family.b_double_prime(eta(i));
    const double res = family.b_prime(eta(i)) - draw.y(i);
    const Vector xi = draw.x.row(i).transpose();
    a += w * xi * xi.transpose();
    b += res * res * xi * xi.transpose();
  }
  a /= static_cast<double>(n);
  b /= static_cast<double>(n);
  const Matrix ainv = a.ldlt().solve(Matrix::Identity(p, p));
  const Matrix cov = ainv * b * ainv / static_cast<double>(n);

  OracleEstimate est;
  est.beta = fit.beta;
  est.mc_se = cov.diagonal().cwiseSqrt();
  return est;
}

inline Vector oracle_beta_star(const ScenarioConfig& config, Index oracle_n,
                               std::uint64_t seed) {
  return oracle_beta_star_full(config, oracle_n, seed).beta;
}

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string oracle_cache_key(const ScenarioConfig& config,
                                    Index oracle_n, std::uint64_t seed) {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "outcome=%d missing=%.17g delta=%.17g eps_sd=%.17g p=%lld "
                "oracle_n=%lld seed=%llu",
                config.outcome == OutcomeKind::continuous ? 0 : 1,
                config.missing_rate, config.resolved_delta(),
                config.epsilon_sd, static_cast<long long>(config.p),
                static_cast<long long>(oracle_n),
                static_cast<unsigned long long>(seed));
  return buf;
}

}  // namespace detail

// Disk-cached oracle. The cache file is keyed by a hash of the scenario
// fields that determine beta*; an existing file is trusted and not
// rewritten (writes go through a temp file + rename).
inline OracleEstimate oracle_beta_star_cached(
    const ScenarioConfig& config, Index oracle_n, std::uint64_t seed,
    const std::optional<std::string>& cache_dir) {
  if (!cache_dir) return oracle_beta_star_full(config, oracle_n, seed);
  const std::string key = detail::oracle_cache_key(config, oracle_n, seed);
  const std::uint64_t h = detail::fnv1a(key);
  char name[64];
  std::snprintf(name, sizeof(name), "oracle_%016llx.txt",
                static_cast<unsigned long long>(h));
  const std::filesystem::path dir(*cache_dir);
  const std::filesystem::path path = dir / name;

  if (std::filesystem::exists(path)) {
    std::ifstream in(path);
    std::string line;
    OracleEstimate est;
    std::vector<double> beta, se;
    while (std::getline(in, line)) {
      if (line.rfind("beta ", 0) == 0)
        beta.push_back(std::strtod(line.c_str() + 5, nullptr));
      else if (line.rfind("se ", 0) == 0)
        se.push_back(std::strtod(line.c_str() + 3, nullptr));
    }
    if (beta.size() == static_cast<std::size_t>(config.p)) {
      est.beta = Eigen::Map<Vector>(beta.data(), config.p);
      est.mc_se = se.size() == beta.size()
                      ? Vector(Eigen::Map<Vector>(se.data(), config.p))
                      : Vector::Zero(config.p);
      return est;
    }
  }

  const OracleEstimate est = oracle_beta_star_full(config, oracle_n, seed);
  std::filesystem::create_directories(dir);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    out << "# " << key << "\n";
    out.precision(17);
    for (Index j = 0; j < config.p; ++j) out << "beta " << est.beta(j) << "\n";
    for (Index j = 0; j < config.p; ++j) out << "se " << est.mc_se(j) << "\n";
  }
  std::filesystem::rename(tmp, path);
  return est;
}

// Mean deviance of `beta` on a fresh fully observed draw of test_n rows.
// When `first` is supplied the response is replaced by the fitted link
// g-hat evaluated on the reduced coordinates (the workflow used when the
// test outcomes themselves are unavailable).
inline double test_deviance(const Vector& beta, const ScenarioConfig& config,
                            std::uint64_t seed,
                            const FirstStageFit* first = nullptr) {
  ScenarioConfig test_cfg = config;
  test_cfg.n = config.test_n;
  const Dataset draw = generate(test_cfg, seed);
  const GlmFamily family = config.family();
  Vector resp = draw.y;
  if (first) {
    const Matrix red = first->basis.reduce(draw.augmented());
    resp = nw_predict(first->g_hat, red);
  }
  const Vector eta = draw.x * beta;
  double acc = 0.0;
  for (Index i = 0; i < draw.n(); ++i)
    acc += family.b(eta(i)) - resp(i) * eta(i);
  return acc / static_cast<double>(draw.n());
}

struct ReplicateResult {
  std::string method;
  int replicate = 0;
  int coord = 0;  // 1-based coefficient label; 0 for failure rows
  double estimate = std::numeric_limits<double>::quiet_NaN();
  double ci_low = std::numeric_limits<double>::quiet_NaN();
  double ci_high = std::numeric_limits<double>::quiet_NaN();
  int covered = -1;  // 1/0; -1 when no interval was formed
  double test_deviance = std::numeric_limits<double>::quiet_NaN();
  double trim_fraction = std::numeric_limits<double>::quiet_NaN();
  double neg_weight_fraction = std::numeric_limits<double>::quiet_NaN();
  int selected_d = 0;
  double clip_fraction = std::numeric_limits<double>::quiet_NaN();
  std::string error;
};

struct ScenarioResult {
  ScenarioConfig config;
  Vector oracle_beta;
  Vector oracle_se;
  std::vector<ReplicateResult> rows;
  int failures = 0;
};

struct AggregateRow {
  std::string method;
  int coord = 0;
  double coverage = std::numeric_limits<double>::quiet_NaN();
  int n_covered_eval = 0;
  double deviance_mean = std::numeric_limits<double>::quiet_NaN();
  double deviance_sd = std::numeric_limits<double>::quiet_NaN();
  int n_deviance = 0;
  int failures = 0;
};

struct RunOptions {
  unsigned threads = 1;
  std::optional<std::string> cache_dir;
  // coverage is reported for these 1-based coefficients
  std::vector<int> report_coords = {1, 2, 3, 4};
};

inline const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> m = {"baseline1", "baseline2",
                                             "proposed_no_z",
                                             "proposed_with_z"};
  return m;
}

namespace detail {

inline std::vector<ReplicateResult> run_one_replicate(
    const ScenarioConfig& config, const std::vector<std::string>& methods,
    int rep, const Vector& oracle, const RunOptions& run_opt) {
  const std::uint64_t data_seed = derive_seed(config.master_seed, 2 * rep);
  const std::uint64_t test_seed = derive_seed(config.master_seed, 2 * rep + 1);
  const Dataset data = generate(config, data_seed);
  const GlmFamily family = config.family();

  std::vector<ReplicateResult> rows;
  int method_id = 0;
  for (const auto& method : methods) {
    const std::uint64_t seed = derive_seed(data_seed, 100 + method_id);
    ++method_id;
    try {
      if (method == "proposed_with_z" || method == "proposed_no_z") {
        const Dataset local =
            method == "proposed_no_z" ? data.without_surrogate() : data;
        std::vector<Index> targets;
        for (Index t = 0; t < config.p; ++t) targets.push_back(t);
        const auto ests = multi_target_inference(
            local, family, targets, config.k_folds, config.b_reps, seed);
        Vector assembled = ests[0].beta_init;
        for (std::size_t t = 0; t < ests.size(); ++t)
          assembled(ests[t].target_index) = ests[t].beta_tilde;
        const double dev = test_deviance(assembled, config, test_seed);
        for (int coord : run_opt.report_coords) {
          const auto& est = ests[static_cast<std::size_t>(coord - 1)];
          ReplicateResult row;
          row.method = method;
          row.replicate = rep;
          row.coord = coord;
          row.estimate = est.beta_tilde;
          row.ci_low = est.ci_low;
          row.ci_high = est.ci_high;
          if (config.b_reps >= 2)
            row.covered = (est.ci_low <= oracle(coord - 1) &&
                           oracle(coord - 1) <= est.ci_high)
                              ? 1
                              : 0;
          row.test_deviance = dev;
          row.trim_fraction = est.trim_fraction;
          row.neg_weight_fraction = est.neg_weight_fraction;
          row.selected_d = static_cast<int>(est.selected_d);
          rows.push_back(std::move(row));
        }
      } else if (method == "baseline1" || method == "baseline2") {
        const BaselineMethod kind = method == "baseline1"
                                        ? BaselineMethod::dml_kernel
                                        : BaselineMethod::dml_logistic;
        const BaselineEstimate est =
            fit_dml(data, family, kind, config.k_folds, config.b_reps, seed);
        const double dev = test_deviance(est.beta, config, test_seed);
        for (int coord : run_opt.report_coords) {
          ReplicateResult row;
          row.method = method;
          row.replicate = rep;
          row.coord = coord;
          row.estimate = est.beta(coord - 1);
          row.ci_low = est.per_coordinate_ci(coord - 1, 0);
          row.ci_high = est.per_coordinate_ci(coord - 1, 1);
          if (config.b_reps >= 2)
            row.covered = (row.ci_low <= oracle(coord - 1) &&
                           oracle(coord - 1) <= row.ci_high)
                              ? 1
                              : 0;
          row.test_deviance = dev;
          row.selected_d = static_cast<int>(est.selected_d_q);
          row.clip_fraction = est.clip_fraction;
          rows.push_back(std::move(row));
        }
      } else {
        throw ConfigError("unknown method: " + method);
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      ReplicateResult row;
      row.method = method;
      row.replicate = rep;
      row.error = e.what();
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

}  // namespace detail

// Executes the scenario sweep: every replicate generates data, runs each
// requested method, and records per-coordinate interval coverage against
// the cached oracle plus the method's test deviance. Replicate failures
// are recorded with an error label and never abort the sweep.
inline ScenarioResult run_scenario(const ScenarioConfig& config,
                                   const std::vector<std::string>& methods,
                                   const RunOptions& run_opt = {}) {
  config.validate();
  for (const auto& m : methods) {
    bool ok = false;
    for (const auto& k : known_methods()) ok = ok || k == m;
    if (!ok) throw ConfigError("run_scenario: unknown method " + m);
  }

  ScenarioResult result;
  result.config = config;
  const OracleEstimate oracle = oracle_beta_star_cached(
      config, config.oracle_n, kOracleSeed, run_opt.cache_dir);
  result.oracle_beta = oracle.beta;
  result.oracle_se = oracle.mc_se;

  std::vector<std::vector<ReplicateResult>> per_rep(
      static_cast<std::size_t>(config.n_replicates));
  parallel_for(static_cast<std::size_t>(config.n_replicates), run_opt.threads,
               [&](std::size_t rep) {
                 per_rep[rep] = detail::run_one_replicate(
                     config, methods, static_cast<int>(rep), oracle.beta,
                     run_opt);
               });
  for (auto& rows : per_rep) {
    for (auto& row : rows) {
      if (!row.error.empty()) ++result.failures;
      result.rows.push_back(std::move(row));
    }
  }
  return result;
}

// Table-1 style aggregation: coverage per (method, coord) and deviance
// mean/sd per method (one deviance value per replicate).
inline std::vector<AggregateRow> aggregate(const ScenarioResult& result) {
  std::vector<AggregateRow> out;
  std::vector<std::string> methods;
  for (const auto& row : result.rows) {
    bool seen = false;
    for (const auto& m : methods) seen = seen || m == row.method;
    if (!seen) methods.push_back(row.method);
  }
  for (const auto& method : methods) {
    // per-replicate deviance (deduped on the first coordinate row)
    std::vector<double> devs;
    int failures = 0;
    std::vector<int> coords;
    for (const auto& row : result.rows) {
      if (row.method != method) continue;
      if (!row.error.empty()) {
        ++failures;
        continue;
      }
      bool seen = false;
      for (int c : coords) seen = seen || c == row.coord;
      if (!seen) coords.push_back(row.coord);
    }
    {
      int last_rep = -1;
      for (const auto& row : result.rows) {
        if (row.method != method || !row.error.empty()) continue;
        if (row.replicate != last_rep) {
          devs.push_back(row.test_deviance);
          last_rep = row.replicate;
        }
      }
    }
    for (int coord : coords) {
      AggregateRow agg;
      agg.method = method;
      agg.coord = coord;
      agg.failures = failures;
      double cov_sum = 0.0;
      int cov_n = 0;
      for (const auto& row : result.rows) {
        if (row.method != method || row.coord != coord || !row.error.empty())
          continue;
        if (row.covered >= 0) {
          cov_sum += row.covered;
          ++cov_n;
        }
      }
      agg.n_covered_eval = cov_n;
      if (cov_n > 0) agg.coverage = cov_sum / cov_n;
      agg.n_deviance = static_cast<int>(devs.size());
      if (!devs.empty()) {
        double mean = 0.0;
        for (double d : devs) mean += d;
        mean /= static_cast<double>(devs.size());
        double ss = 0.0;
        for (double d : devs) ss += (d - mean) * (d - mean);
        agg.deviance_mean = mean;
        agg.deviance_sd = devs.size() > 1
                              ? std::sqrt(ss / static_cast<double>(devs.size() - 1))
                              : 0.0;
      }
      out.push_back(std::move(agg));
    }
  }
  return out;
}

}  // namespace sai
