#pragma once

// Command-line surface: fit, simulate and summarize.
//
// Configuration precedence is defaults < JSON file (--config) < flags. Every
// input is loaded and validated before the output directory is touched.

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "hetsae/csv.hpp"
#include "hetsae/errors.hpp"
#include "hetsae/eval.hpp"
#include "hetsae/models.hpp"
#include "hetsae/spatial.hpp"
#include "hetsae/survey.hpp"

namespace hetsae::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum class Command { fit, simulate, summarize };

inline Command parse_command(const std::string& s) {
  if (s == "fit") return Command::fit;
  if (s == "simulate") return Command::simulate;
  if (s == "summarize") return Command::summarize;
  throw InvalidInput("unknown command '" + s + "' (expected fit, simulate or summarize)");
}

inline std::string to_string(Command c) {
  switch (c) {
    case Command::fit: return "fit";
    case Command::simulate: return "simulate";
    case Command::summarize: return "summarize";
  }
  return "?";
}

struct GenerationConfig {
  int n_areas = 30;
  int min_size = 300;
  int max_size = 600;
  bool spatial = true;
  bool heteroscedastic = true;
  bool informative = true;
  std::uint64_t seed = 20240601;
};

struct RunConfig {
  std::string command;
  std::string model = "halm";
  std::string input;
  std::string population;
  std::string adjacency;
  std::string output = "out";
  int iterations = 3000;
  int burn_in = 1000;
  int thin = 1;
  std::uint64_t seed = 1;
  int k_replicates = 100;
  std::string design = "stratified";
  std::vector<std::string> estimators{"fh", "halm"};
  std::optional<std::vector<std::string>> estimator_filter;  // summarize only
  int parallelism = 1;
  double level = 0.95;
  std::string plot_kind = "estimate_map";
  int n_per_area = 5;
  double expected_n = 1000.0;
  bool log_response = true;
  bool constrain_eta2_zero = false;
  std::string variance_covariates = "same_as_mean";
  std::optional<double> icar_jitter;
  Hyperparameters hyper;
  GenerationConfig generation;
};

// ---------------------------------------------------------------------------
// JSON configuration
// ---------------------------------------------------------------------------

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    const auto b = cur.find_first_not_of(" \t");
    const auto e = cur.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(cur.substr(b, e - b + 1));
  }
  return out;
}

inline void apply_json(const json& j, RunConfig& c) {
  if (!j.is_object()) throw InvalidInput("config: top level must be a JSON object");
  static const std::set<std::string> known{
      "command", "model",       "input",     "population",  "adjacency",       "output",
      "iterations", "burn_in",  "thin",      "seed",        "k_replicates",    "design",
      "estimators", "parallelism", "level",  "plot_kind",   "n_per_area",      "expected_n",
      "log_response", "constrain_eta2_zero", "variance_covariates", "icar_jitter", "hyper", "generation"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw InvalidInput("config: unknown key '" + it.key() + "'");
  }
  try {
    auto get = [&](const char* key, auto& target) {
      if (j.contains(key)) target = j.at(key).get<std::decay_t<decltype(target)>>();
    };
    get("command", c.command);
    get("model", c.model);
    get("input", c.input);
    get("population", c.population);
    get("adjacency", c.adjacency);
    get("output", c.output);
    get("iterations", c.iterations);
    get("burn_in", c.burn_in);
    get("thin", c.thin);
    get("seed", c.seed);
    get("k_replicates", c.k_replicates);
    get("design", c.design);
    get("parallelism", c.parallelism);
    get("level", c.level);
    get("plot_kind", c.plot_kind);
    get("n_per_area", c.n_per_area);
    get("expected_n", c.expected_n);
    get("log_response", c.log_response);
    get("constrain_eta2_zero", c.constrain_eta2_zero);
    get("variance_covariates", c.variance_covariates);
    if (j.contains("icar_jitter")) c.icar_jitter = j.at("icar_jitter").get<double>();
    if (j.contains("estimators")) {
      const json& e = j.at("estimators");
      c.estimators = e.is_string() ? split_list(e.get<std::string>()) : e.get<std::vector<std::string>>();
    }
    if (j.contains("hyper")) {
      const json& h = j.at("hyper");
      auto hget = [&](const char* key, double& target) {
        if (h.contains(key)) target = h.at(key).get<double>();
      };
      hget("sigma2_beta1", c.hyper.sigma2_beta1);
      hget("sigma2_beta2", c.hyper.sigma2_beta2);
      hget("a", c.hyper.a);
      hget("b", c.hyper.b);
      hget("c", c.hyper.c);
      hget("alpha", c.hyper.alpha_mlg);
    }
    if (j.contains("generation")) {
      const json& g = j.at("generation");
      auto gget = [&](const char* key, auto& target) {
        if (g.contains(key)) target = g.at(key).get<std::decay_t<decltype(target)>>();
      };
      gget("n_areas", c.generation.n_areas);
      gget("min_size", c.generation.min_size);
      gget("max_size", c.generation.max_size);
      gget("spatial", c.generation.spatial);
      gget("heteroscedastic", c.generation.heteroscedastic);
      gget("informative", c.generation.informative);
      gget("seed", c.generation.seed);
    }
  } catch (const json::exception& ex) {
    throw InvalidInput(std::string("config: ") + ex.what());
  }
}

inline json to_json(const RunConfig& c) {
  json j{{"command", c.command},
         {"model", c.model},
         {"input", c.input},
         {"population", c.population},
         {"adjacency", c.adjacency},
         {"output", c.output},
         {"iterations", c.iterations},
         {"burn_in", c.burn_in},
         {"thin", c.thin},
         {"seed", c.seed},
         {"k_replicates", c.k_replicates},
         {"design", c.design},
         {"estimators", c.estimators},
         {"parallelism", c.parallelism},
         {"level", c.level},
         {"plot_kind", c.plot_kind},
         {"n_per_area", c.n_per_area},
         {"expected_n", c.expected_n},
         {"log_response", c.log_response},
         {"constrain_eta2_zero", c.constrain_eta2_zero},
         {"variance_covariates", c.variance_covariates},
         {"hyper",
          {{"sigma2_beta1", c.hyper.sigma2_beta1},
           {"sigma2_beta2", c.hyper.sigma2_beta2},
           {"a", c.hyper.a},
           {"b", c.hyper.b},
           {"c", c.hyper.c},
           {"alpha", c.hyper.alpha_mlg}}},
         {"generation",
          {{"n_areas", c.generation.n_areas},
           {"min_size", c.generation.min_size},
           {"max_size", c.generation.max_size},
           {"spatial", c.generation.spatial},
           {"heteroscedastic", c.generation.heteroscedastic},
           {"informative", c.generation.informative},
           {"seed", c.generation.seed}}}};
  j["icar_jitter"] = c.icar_jitter ? json(*c.icar_jitter) : json(nullptr);
  return j;
}

// ---------------------------------------------------------------------------
// Data loading
// ---------------------------------------------------------------------------

/// Columns x_1..x_p in numeric order; p may be zero.
inline std::vector<std::size_t> covariate_columns(const csv::Table& t) {
  std::vector<std::size_t> cols;
  for (int k = 1;; ++k) {
    const std::string name = "x_" + std::to_string(k);
    if (!t.has_column(name)) break;
    cols.push_back(t.column(name));
  }
  return cols;
}

/// Intercept followed by the x_k columns (the intercept is not repeated if an
/// x column is already constant one).
inline Eigen::MatrixXd design_matrix(const csv::Table& t, const std::vector<std::size_t>& cols) {
  const Eigen::Index n = static_cast<Eigen::Index>(t.rows.size());
  Eigen::MatrixXd X(n, static_cast<Eigen::Index>(cols.size()));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < cols.size(); ++k) X(i, k) = t.number(i, cols[k]);
  }
  for (Eigen::Index k = 0; k < X.cols(); ++k) {
    if (n > 0 && (X.col(k).array() == 1.0).all()) return X;
  }
  Eigen::MatrixXd out(n, X.cols() + 1);
  out.col(0).setOnes();
  out.rightCols(X.cols()) = X;
  return out;
}

struct LoadedArea {
  AreaDataset data;
  std::vector<std::string> warnings;
};

inline LoadedArea load_area_csv(const std::string& path) {
  const csv::Table t = csv::read(path);
  const std::size_t c_id = t.column("area_id"), c_m = t.column("direct_mean"), c_v = t.column("direct_var"),
                    c_n = t.column("n_samp");
  if (t.rows.empty()) throw InvalidInput(path + ": no data rows");
  const Eigen::Index d = static_cast<Eigen::Index>(t.rows.size());
  Eigen::VectorXd m(d), v(d);
  LoadedArea out;
  std::set<std::string> seen;
  for (Eigen::Index i = 0; i < d; ++i) {
    const std::string& id = t.rows[i][c_id];
    if (!seen.insert(id).second) {
      throw InvalidInput(path + " line " + std::to_string(t.row_line[i]) + ": duplicate area_id '" + id + "'");
    }
    m[i] = t.number(i, c_m);
    v[i] = t.number(i, c_v);
    if (!(m[i] > 0.0)) {
      throw InvalidInput(path + " line " + std::to_string(t.row_line[i]) + ", column 'direct_mean': must be positive");
    }
    if (!(v[i] >= 0.0)) {
      throw InvalidInput(path + " line " + std::to_string(t.row_line[i]) + ", column 'direct_var': must be non-negative");
    }
    const long long n = t.integer(i, c_n);
    if (n < 1) throw InvalidInput(path + " line " + std::to_string(t.row_line[i]) + ", column 'n_samp': must be positive");
    out.data.n_samp.push_back(static_cast<int>(n));
    out.data.area_ids.push_back(id);
  }
  PreparedAreaInputs prep = prepare_area_inputs(m, v);
  out.data.y = std::move(prep.y);
  out.data.s2 = std::move(prep.s2);
  out.warnings = std::move(prep.warnings);
  out.data.X = design_matrix(t, covariate_columns(t));
  out.data.validate();
  return out;
}

struct LoadedPopulation {
  csv::Table table;
  std::vector<std::string> area_ids;  // order of first appearance
  std::map<std::string, int> index_of;
  std::vector<int> area_index;
};

inline LoadedPopulation load_population_table(const std::string& path) {
  LoadedPopulation p;
  p.table = csv::read(path);
  const std::size_t c_id = p.table.column("area_id");
  if (p.table.rows.empty()) throw InvalidInput(path + ": no data rows");
  for (const auto& row : p.table.rows) {
    auto [it, inserted] = p.index_of.emplace(row[c_id], static_cast<int>(p.area_ids.size()));
    if (inserted) p.area_ids.push_back(row[c_id]);
    p.area_index.push_back(it->second);
  }
  return p;
}

/// Unit sample (area_id, y, w, x_1..x_p) plus a population table with the
/// same covariates. Area order follows the population file.
inline UnitDataset load_unit_data(const std::string& sample_path, const std::string& population_path,
                                  bool log_response) {
  const csv::Table t = csv::read(sample_path);
  LoadedPopulation pop = load_population_table(population_path);
  const std::size_t c_id = t.column("area_id"), c_y = t.column("y"), c_w = t.column("w");
  const auto cols = covariate_columns(t);
  const auto pop_cols = covariate_columns(pop.table);
  if (cols.size() != pop_cols.size()) {
    throw InvalidInput("sample has " + std::to_string(cols.size()) + " covariates but population has " +
                       std::to_string(pop_cols.size()));
  }
  if (t.rows.empty()) throw InvalidInput(sample_path + ": no data rows");
  UnitDataset u;
  const Eigen::Index n = static_cast<Eigen::Index>(t.rows.size());
  u.y.resize(n);
  Eigen::VectorXd w(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const std::string& id = t.rows[i][c_id];
    auto it = pop.index_of.find(id);
    if (it == pop.index_of.end()) {
      throw InvalidInput(sample_path + " line " + std::to_string(t.row_line[i]) + ": area_id '" + id +
                         "' not present in the population file");
    }
    u.area_index.push_back(it->second);
    const double y = t.number(i, c_y);
    if (log_response && !(y > 0.0)) {
      throw InvalidInput(sample_path + " line " + std::to_string(t.row_line[i]) +
                         ", column 'y': must be positive for a log-scale fit");
    }
    u.y[i] = log_response ? std::log(y) : y;
    w[i] = t.number(i, c_w);
    if (!(w[i] > 0.0)) {
      throw InvalidInput(sample_path + " line " + std::to_string(t.row_line[i]) + ", column 'w': must be positive");
    }
  }
  u.w_scaled = scale_to_sample_size(w);
  u.X = design_matrix(t, cols);
  u.population.X = design_matrix(pop.table, pop_cols);
  if (u.population.X.cols() != u.X.cols()) throw InvalidInput("sample and population designs differ in width");
  u.population.area_index = pop.area_index;
  u.d = static_cast<int>(pop.area_ids.size());
  u.area_ids = pop.area_ids;
  u.validate();
  return u;
}

/// Population CSV for simulation: area_id, income, base_weight, x_1..x_p.
inline SyntheticPopulation load_population(const std::string& path) {
  LoadedPopulation lp = load_population_table(path);
  const csv::Table& t = lp.table;
  const std::size_t c_inc = t.column("income"), c_w = t.column("base_weight");
  const auto cols = covariate_columns(t);
  SyntheticPopulation pop;
  pop.d = static_cast<int>(lp.area_ids.size());
  pop.area_ids = lp.area_ids;
  pop.area_index = lp.area_index;
  pop.area_size.assign(pop.d, 0);
  for (int a : pop.area_index) ++pop.area_size[a];
  const Eigen::Index N = static_cast<Eigen::Index>(t.rows.size());
  pop.income.resize(N);
  pop.base_weight.resize(N);
  pop.covariates.resize(N, static_cast<Eigen::Index>(cols.size()));
  for (Eigen::Index i = 0; i < N; ++i) {
    pop.income[i] = t.number(i, c_inc);
    pop.base_weight[i] = t.number(i, c_w);
    for (std::size_t k = 0; k < cols.size(); ++k) pop.covariates(i, k) = t.number(i, cols[k]);
  }
  pop.validate();
  return pop;
}

inline AdjacencyGraph load_adjacency(const std::string& path) { return parse_adjacency(csv::read_file(path)); }

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw NumericalError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw NumericalError("write failed for '" + path.string() + "'");
}

/// Parameter blocks written to chains.csv, in order.
inline std::vector<std::pair<std::string, Eigen::MatrixXd>> chain_blocks(const PosteriorDraws& draws,
                                                                         const Eigen::MatrixXd& area_values) {
  std::vector<std::pair<std::string, Eigen::MatrixXd>> b;
  b.emplace_back(is_area_level(draws.model) ? "theta" : "area_mean", area_values);
  b.emplace_back("beta1", draws.beta1);
  if (draws.beta2.cols() > 0 && draws.model != ModelKind::FH && draws.model != ModelKind::PL_BULM) {
    b.emplace_back("beta2", draws.beta2);
  }
  b.emplace_back("eta1", draws.eta1);
  if (draws.model != ModelKind::FH && draws.model != ModelKind::PL_BULM) {
    b.emplace_back("eta2", draws.eta2);
    b.emplace_back("sigma_eta2", draws.sigma_eta2);
  }
  b.emplace_back("sigma2_eta1", draws.sigma2_eta1);
  if (draws.model == ModelKind::PL_BULM) b.emplace_back("sigma2_unit", draws.sigma2_unit);
  return b;
}

inline std::string chains_csv(const std::vector<std::pair<std::string, Eigen::MatrixXd>>& blocks,
                              const FitConfig& cfg) {
  std::ostringstream out;
  csv::Writer w(out);
  w.row({"iteration", "parameter", "index", "value"});
  const Eigen::Index R = blocks.front().second.rows();
  for (Eigen::Index t = 0; t < R; ++t) {
    const std::string iter = std::to_string(cfg.burn_in + (t + 1) * cfg.thin);
    for (const auto& [name, m] : blocks) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) w.row({iter, name, std::to_string(j), csv::format_double(m(t, j))});
    }
  }
  return out.str();
}

inline std::string summary_csv(const AreaSummary& s, const std::vector<std::string>& ids) {
  std::ostringstream out;
  csv::Writer w(out);
  w.row({"area_id", "estimate", "lower", "upper", "sd"});
  for (std::size_t a = 0; a < ids.size(); ++a) {
    const auto i = static_cast<Eigen::Index>(a);
    w.row({ids[a], csv::format_double(s.estimate[i]), csv::format_double(s.lower[i]), csv::format_double(s.upper[i]),
           csv::format_double(s.sd[i])});
  }
  return out.str();
}

/// Reads chains.csv back into per-parameter draw matrices.
inline std::map<std::string, Eigen::MatrixXd> read_chains(const std::string& path) {
  const csv::Table t = csv::read(path);
  const std::size_t c_it = t.column("iteration"), c_p = t.column("parameter"), c_i = t.column("index"),
                    c_v = t.column("value");
  std::map<std::string, std::map<long long, std::map<long long, double>>> raw;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    raw[t.rows[r][c_p]][t.integer(r, c_it)][t.integer(r, c_i)] = t.number(r, c_v);
  }
  std::map<std::string, Eigen::MatrixXd> out;
  for (const auto& [name, by_iter] : raw) {
    const Eigen::Index R = static_cast<Eigen::Index>(by_iter.size());
    const Eigen::Index cols = static_cast<Eigen::Index>(by_iter.begin()->second.size());
    Eigen::MatrixXd m(R, cols);
    Eigen::Index row = 0;
    for (const auto& [iter, values] : by_iter) {
      if (static_cast<Eigen::Index>(values.size()) != cols) {
        throw InvalidInput(path + ": parameter '" + name + "' has a ragged row at iteration " + std::to_string(iter));
      }
      Eigen::Index col = 0;
      for (const auto& [idx, v] : values) {
        if (idx != col) throw InvalidInput(path + ": parameter '" + name + "' is missing index " + std::to_string(col));
        m(row, col++) = v;
      }
      ++row;
    }
    out.emplace(name, std::move(m));
  }
  return out;
}

inline json ess_json(const std::vector<std::pair<std::string, Eigen::MatrixXd>>& blocks) {
  json j = json::object();
  for (const auto& [name, m] : blocks) {
    json v = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const double e = effective_sample_size(m.col(c));
      v.push_back(std::isfinite(e) ? json(e) : json(nullptr));
    }
    j[name] = v;
  }
  return j;
}

inline json finite_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// Output directory must exist as a directory or be creatable under a
/// writable ancestor.
inline void check_output_dir(const std::string& dir) {
  if (dir.empty()) throw InvalidInput("output directory is empty");
  fs::path p = fs::absolute(dir);
  if (fs::exists(p)) {
    if (!fs::is_directory(p)) throw InvalidInput("output path '" + dir + "' exists and is not a directory");
    if (::access(p.c_str(), W_OK) != 0) throw InvalidInput("output directory '" + dir + "' is not writable");
    return;
  }
  fs::path anc = p.parent_path();
  while (!anc.empty() && !fs::exists(anc)) anc = anc.parent_path();
  if (anc.empty() || !fs::is_directory(anc) || ::access(anc.c_str(), W_OK) != 0) {
    throw InvalidInput("output directory '" + dir + "' cannot be created");
  }
}

inline void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw InvalidInput(std::string("missing required ") + what + " path");
  if (!fs::is_regular_file(path)) throw InvalidInput(std::string(what) + " file not found: '" + path + "'");
}

inline VarianceCovariates parse_variance_covariates(const std::string& s) {
  if (s == "same_as_mean") return VarianceCovariates::same_as_mean;
  if (s == "intercept_only") return VarianceCovariates::intercept_only;
  throw InvalidInput("variance_covariates must be same_as_mean or intercept_only");
}

inline FitConfig fit_config(const RunConfig& c, ModelKind model) {
  FitConfig f;
  f.model = model;
  f.iterations = c.iterations;
  f.burn_in = c.burn_in;
  f.thin = c.thin;
  f.seed = c.seed;
  f.hyper = c.hyper;
  f.icar_jitter = c.icar_jitter;
  f.constrain_eta2_zero = c.constrain_eta2_zero;
  f.variance_covariates = parse_variance_covariates(c.variance_covariates);
  return f;
}

inline void log_warnings(const std::vector<std::string>& w) {
  for (const auto& s : w) spdlog::warn("{}", s);
}

inline void run_fit(const RunConfig& c) {
  // Validation and loading.
  const ModelKind model = parse_model_kind(c.model);
  require_file(c.input, "input");
  if (!is_area_level(model)) require_file(c.population, "population");
  if (model == ModelKind::SHALM) {
    if (c.adjacency.empty()) throw InvalidInput("SHALM requires an adjacency file (--adjacency)");
    require_file(c.adjacency, "adjacency");
  }
  if (!(c.level > 0.0 && c.level < 1.0)) throw InvalidInput("level must lie in (0, 1)");
  check_output_dir(c.output);
  FitConfig fc = fit_config(c, model);
  if (!c.adjacency.empty() && model == ModelKind::SHALM) fc.graph = load_adjacency(c.adjacency);

  std::optional<LoadedArea> area;
  std::optional<UnitDataset> unit;
  std::vector<std::string> ids;
  if (is_area_level(model)) {
    area = load_area_csv(c.input);
    ids = area->data.area_ids;
    log_warnings(area->warnings);
    if (fc.graph && fc.graph->n_areas() != area->data.d()) {
      throw InvalidInput("adjacency has n=" + std::to_string(fc.graph->n_areas()) + " but the input has " +
                         std::to_string(area->data.d()) + " areas");
    }
  } else {
    unit = load_unit_data(c.input, c.population, c.log_response);
    ids = unit->area_ids;
  }
  fc.validate();

  // Side effects start here.
  spdlog::info("fitting {} ({} iterations, seed {})", to_string(model), fc.iterations, fc.seed);
  const PosteriorDraws draws = area ? fit(area->data, fc) : fit(*unit, fc);
  log_warnings(draws.warnings);
  const Eigen::MatrixXd area_values =
      area ? draws.theta
           : predict_unit_level_area_means(draws, unit->population, unit->d, c.log_response, derive_seed(fc.seed, 7));
  const AreaSummary summary = summarize_posterior(area_values, c.level, area.has_value());
  const auto blocks = chain_blocks(draws, area_values);

  json diag{{"model", to_string(model)},
            {"seed", fc.seed},
            {"retained_draws", draws.retained()},
            {"mh_acceptance", finite_or_null(draws.mh_acceptance)},
            {"final_proposal_sd", finite_or_null(draws.final_proposal_sd)},
            {"clamp_count", draws.clamp_count},
            {"ess", ess_json(blocks)},
            {"area_ids", ids},
            {"area_parameter", blocks.front().first},
            {"back_transform", area.has_value()},
            {"level", c.level},
            {"warnings", draws.warnings},
            {"config", to_json(c)}};

  fs::create_directories(c.output);
  const fs::path out(c.output);
  write_text(out / "chains.csv", chains_csv(blocks, fc));
  write_text(out / "summary.csv", summary_csv(summary, ids));
  write_text(out / "diagnostics.json", diag.dump(2) + "\n");
  spdlog::info("wrote {}", out.string());
}

// The direct estimator is the reference for rel_rmse, so metrics.csv and
// per_area_rmse.csv carry model rows only; metrics.json keeps the direct row.
inline std::string metrics_csv(const MetricsTable& t) {
  std::ostringstream out;
  csv::Writer w(out);
  w.row({"estimator", "rel_rmse", "abs_bias", "cov_rate", "int_score"});
  for (const auto& e : t.estimators) {
    if (e.estimator == "direct") continue;
    w.row({e.estimator, csv::format_double(e.rel_rmse), csv::format_double(e.abs_bias), csv::format_double(e.cov_rate),
           csv::format_double(e.int_score)});
  }
  return out.str();
}

inline std::string per_area_csv(const MetricsTable& t) {
  std::ostringstream out;
  csv::Writer w(out);
  w.row({"area_id", "direct_rmse", "estimator", "model_rmse"});
  for (const auto& a : t.per_area) {
    if (a.estimator == "direct") continue;
    w.row({a.area_id, csv::format_double(a.direct_rmse), a.estimator, csv::format_double(a.model_rmse)});
  }
  return out.str();
}

/// Raw per-replicate values: one row per (k, area, estimator).
inline std::string replicates_csv(const MetricsTable& t, const std::vector<ModelKind>& estimators) {
  std::ostringstream out;
  csv::Writer w(out);
  w.row({"k", "area_id", "estimator", "truth", "point", "lower", "upper"});
  for (const auto& r : t.replicates) {
    for (std::size_t a = 0; a < t.area_ids.size(); ++a) {
      const auto i = static_cast<Eigen::Index>(a);
      auto emit = [&](const std::string& name, const IntervalEstimates& e) {
        w.row({std::to_string(r.k), t.area_ids[a], name, csv::format_double(r.truth[i]), csv::format_double(e.point[i]),
               csv::format_double(e.lower[i]), csv::format_double(e.upper[i])});
      };
      emit("direct", r.direct);
      for (std::size_t e = 0; e < estimators.size(); ++e) emit(to_string(estimators[e]), r.models[e]);
    }
  }
  return out.str();
}

inline json metrics_json(const MetricsTable& t) {
  json rows = json::array();
  for (const auto& e : t.estimators) {
    rows.push_back({{"estimator", e.estimator},
                    {"rel_rmse", finite_or_null(e.rel_rmse)},
                    {"abs_bias", finite_or_null(e.abs_bias)},
                    {"cov_rate", finite_or_null(e.cov_rate)},
                    {"int_score", finite_or_null(e.int_score)},
                    {"rmse", finite_or_null(e.rmse)}});
  }
  return {{"estimators", rows},
          {"replicates_used", t.replicates.size()},
          {"replicates_failed", t.failed_replicates},
          {"warnings", t.warnings}};
}

inline void run_simulate(const RunConfig& c) {
  std::vector<ModelKind> estimators;
  for (const auto& e : c.estimators) estimators.push_back(parse_model_kind(e));
  if (estimators.empty()) throw InvalidInput("no estimators given");
  if (c.k_replicates < 1) throw InvalidInput("k_replicates must be at least 1");
  StudyConfig sc;
  sc.design = parse_design_kind(c.design);
  sc.n_per_area = c.n_per_area;
  sc.expected_n = c.expected_n;
  sc.estimators = estimators;
  sc.K = c.k_replicates;
  sc.base_seed = c.seed;
  sc.parallelism = c.parallelism;
  sc.fit = fit_config(c, ModelKind::HALM);
  sc.level = c.level;
  sc.log_response = c.log_response;
  check_output_dir(c.output);
  if (!c.adjacency.empty()) require_file(c.adjacency, "adjacency");

  SyntheticPopulation pop;
  if (!c.population.empty()) {
    require_file(c.population, "population");
    pop = load_population(c.population);
  } else {
    GenerationSpec g;
    g.n_areas = c.generation.n_areas;
    g.min_size = c.generation.min_size;
    g.max_size = c.generation.max_size;
    g.spatial = c.generation.spatial;
    g.heteroscedastic = c.generation.heteroscedastic;
    g.informative = c.generation.informative;
    g.validate();
    Rng rng(c.generation.seed);
    pop = generate_population(g, rng);
  }
  if (!c.adjacency.empty()) sc.graph = load_adjacency(c.adjacency);
  const bool needs_graph = std::find(estimators.begin(), estimators.end(), ModelKind::SHALM) != estimators.end();
  if (needs_graph && !sc.graph && !pop.graph) throw InvalidInput("SHALM requires an adjacency file (--adjacency)");
  const auto& g = sc.graph ? sc.graph : pop.graph;
  if (g && g->n_areas() != pop.d) throw InvalidInput("adjacency size does not match the population's area count");
  sc.validate();

  spdlog::info("simulating {} replicates under the {} design", sc.K, to_string(sc.design));
  const MetricsTable table = run_replication_study(pop, sc);
  log_warnings(table.warnings);

  fs::create_directories(c.output);
  const fs::path out(c.output);
  write_text(out / "metrics.csv", metrics_csv(table));
  write_text(out / "metrics.json", metrics_json(table).dump(2) + "\n");
  write_text(out / "per_area_rmse.csv", per_area_csv(table));
  write_text(out / "replicates.csv", replicates_csv(table, estimators));
  spdlog::info("wrote {}", out.string());
}

inline void run_summarize(const RunConfig& c) {
  if (c.input.empty()) throw InvalidInput("summarize needs --input pointing at an artifact directory");
  const fs::path in(c.input);
  if (!fs::is_directory(in)) throw InvalidInput("artifact directory not found: '" + c.input + "'");
  const std::string out_dir = c.output.empty() || c.output == "out" ? c.input : c.output;
  check_output_dir(out_dir);
  const fs::path out(out_dir);

  if (c.plot_kind == "rmse_scatter") {
    require_file((in / "per_area_rmse.csv").string(), "per_area_rmse.csv");
    const csv::Table t = csv::read((in / "per_area_rmse.csv").string());
    const std::size_t c_id = t.column("area_id"), c_d = t.column("direct_rmse"), c_e = t.column("estimator"),
                      c_m = t.column("model_rmse");
    auto wanted = [&](const std::string& name) {
      return !c.estimator_filter ||
             std::find(c.estimator_filter->begin(), c.estimator_filter->end(), name) != c.estimator_filter->end();
    };
    std::ostringstream s;
    csv::Writer w(s);
    w.row({"area_id", "x", "y", "estimator"});
    // The direct series is its own reference: x = y = direct_rmse.
    std::vector<std::pair<std::string, std::string>> direct;
    std::set<std::string> seen;
    for (const auto& row : t.rows) {
      if (seen.insert(row[c_id]).second) direct.emplace_back(row[c_id], row[c_d]);
      if (wanted(row[c_e])) w.row({row[c_id], row[c_d], row[c_m], row[c_e]});
    }
    if (wanted("direct")) {
      for (const auto& [id, x] : direct) w.row({id, x, x, "direct"});
    }
    fs::create_directories(out);
    write_text(out / "rmse_scatter.csv", s.str());
    return;
  }
  if (c.plot_kind != "estimate_map" && c.plot_kind != "summary") {
    throw InvalidInput("plot kind must be estimate_map, rmse_scatter or summary");
  }

  require_file((in / "chains.csv").string(), "chains.csv");
  require_file((in / "diagnostics.json").string(), "diagnostics.json");
  json diag;
  try {
    diag = json::parse(csv::read_file((in / "diagnostics.json").string()));
  } catch (const json::exception& ex) {
    throw InvalidInput(std::string("diagnostics.json: ") + ex.what());
  }
  const auto ids = diag.at("area_ids").get<std::vector<std::string>>();
  const auto param = diag.at("area_parameter").get<std::string>();
  const bool back = diag.at("back_transform").get<bool>();
  const double level = diag.at("level").get<double>();
  const auto chains = read_chains((in / "chains.csv").string());
  auto it = chains.find(param);
  if (it == chains.end()) throw InvalidInput("chains.csv has no '" + param + "' rows");
  if (it->second.cols() != static_cast<Eigen::Index>(ids.size())) {
    throw InvalidInput("chains.csv area count differs from diagnostics.json");
  }
  const AreaSummary s = summarize_posterior(it->second, level, back);

  fs::create_directories(out);
  write_text(out / "summary.csv", summary_csv(s, ids));
  if (c.plot_kind == "estimate_map") {
    std::ostringstream m;
    csv::Writer w(m);
    w.row({"area_id", "estimate", "log_se"});
    for (std::size_t a = 0; a < ids.size(); ++a) {
      const auto i = static_cast<Eigen::Index>(a);
      w.row({ids[a], csv::format_double(s.estimate[i]), csv::format_double(std::log(s.sd[i]))});
    }
    write_text(out / "estimate_map.csv", m.str());
  }
}

inline void configure_logging() {
  static bool done = false;
  if (!done) {
    auto logger = spdlog::stderr_color_mt("hetsae");
    logger->set_pattern("[%l] %v");
    spdlog::set_default_logger(logger);
    done = true;
  }
  spdlog::set_level(spdlog::level::warn);
  if (const char* env = std::getenv("HETSAE_LOG")) {
    const std::string v = env;
    if (v == "error") spdlog::set_level(spdlog::level::err);
    else if (v == "warn") spdlog::set_level(spdlog::level::warn);
    else if (v == "info") spdlog::set_level(spdlog::level::info);
    else if (v == "debug") spdlog::set_level(spdlog::level::debug);
  }
}

inline void run_command(const RunConfig& c) {
  switch (parse_command(c.command)) {
    case Command::fit: run_fit(c); break;
    case Command::simulate: run_simulate(c); break;
    case Command::summarize: run_summarize(c); break;
  }
}

/// Entry point shared by the executable and the tests. Returns the exit code.
inline int run(int argc, const char* const* argv) {
  configure_logging();
  CLI::App app{"Heteroscedastic small area estimation"};
  std::optional<std::string> command, model, input, population, adjacency, output, design, estimators, config,
      plot_kind;
  std::optional<int> iterations, burn_in, thin, k_replicates, parallelism, n_per_area;
  std::optional<std::uint64_t> seed;
  std::optional<double> level, expected_n;
  app.add_option("--command", command, "fit, simulate or summarize");
  app.add_option("--model", model, "fh, halm, shalm, pl-bulm or hulm");
  app.add_option("--input", input, "area or unit CSV (fit), artifact directory (summarize)");
  app.add_option("--population", population, "population CSV");
  app.add_option("--adjacency", adjacency, "edge-list adjacency file");
  app.add_option("--output", output, "output directory");
  app.add_option("--iterations", iterations, "MCMC iterations");
  app.add_option("--burn-in", burn_in, "burn-in iterations");
  app.add_option("--thin", thin, "thinning interval");
  app.add_option("--seed", seed, "random seed");
  app.add_option("--k-replicates", k_replicates, "simulation replicates");
  app.add_option("--design", design, "stratified or pps");
  app.add_option("--estimators", estimators, "comma-separated estimator list (summarize: filter)");
  app.add_option("--parallelism", parallelism, "worker threads for simulate");
  app.add_option("--level", level, "credible level");
  app.add_option("--n-per-area", n_per_area, "units per area (stratified)");
  app.add_option("--expected-n", expected_n, "expected sample size (pps)");
  app.add_option("--plot-kind", plot_kind, "estimate_map, rmse_scatter or summary");
  app.add_option("--config", config, "JSON configuration file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    RunConfig c;
    if (config) {
      require_file(*config, "config");
      json j;
      try {
        j = json::parse(csv::read_file(*config));
      } catch (const json::exception& ex) {
        throw InvalidInput("config '" + *config + "': " + ex.what());
      }
      apply_json(j, c);
    }
    if (command) c.command = *command;
    if (model) c.model = *model;
    if (input) c.input = *input;
    if (population) c.population = *population;
    if (adjacency) c.adjacency = *adjacency;
    if (output) c.output = *output;
    if (iterations) c.iterations = *iterations;
    if (burn_in) c.burn_in = *burn_in;
    if (thin) c.thin = *thin;
    if (seed) c.seed = *seed;
    if (k_replicates) c.k_replicates = *k_replicates;
    if (design) c.design = *design;
    if (estimators) {
      c.estimators = split_list(*estimators);
      c.estimator_filter = c.estimators;
    }
    if (parallelism) c.parallelism = *parallelism;
    if (level) c.level = *level;
    if (n_per_area) c.n_per_area = *n_per_area;
    if (expected_n) c.expected_n = *expected_n;
    if (plot_kind) c.plot_kind = *plot_kind;
    if (c.command.empty()) throw InvalidInput("--command is required");
    run_command(c);
    return 0;
  } catch (const InvalidInput& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 3;
  }
}

}  // namespace hetsae::cli
