#pragma once

// Experiment configuration, dispatch and result emission.
//
// A config is a flat JSON object. `kind` selects the experiment; the other
// keys belong to that kind and anything unknown is rejected. Every run
// writes one CSV per series plus summary.json with the parameter echo.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "coopdetect/diffusion.hpp"
#include "coopdetect/graph.hpp"
#include "coopdetect/marl.hpp"
#include "coopdetect/parallel.hpp"
#include "coopdetect/random.hpp"

namespace coopdetect::experiment {

using Json = nlohmann::ordered_json;

inline constexpr std::string_view kVersion = "0.1.0";
inline constexpr std::string_view kOutputDirEnv = "COOPDETECT_OUTPUT_DIR";
inline constexpr std::string_view kDefaultOutputDir = "results";

enum class Kind { Paths, Diffusion, Marl };

inline std::string_view to_string(Kind k) {
  switch (k) {
    case Kind::Paths: return "paths";
    case Kind::Diffusion: return "diffusion";
    case Kind::Marl: return "marl";
  }
  return "?";
}

inline std::optional<Kind> kind_from_string(std::string_view name) {
  for (Kind k : {Kind::Paths, Kind::Diffusion, Kind::Marl})
    if (to_string(k) == name) return k;
  return std::nullopt;
}

/// Config problem. `key` names the offending field when there is one;
/// `line` is set for syntax errors.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& message, std::optional<std::size_t> line = {},
              std::optional<std::size_t> column = {})
      : std::runtime_error(message), key_(std::move(key)), line_(line), column_(column) {}

  const std::string& key() const noexcept { return key_; }
  std::optional<std::size_t> line() const noexcept { return line_; }
  std::optional<std::size_t> column() const noexcept { return column_; }

 private:
  std::string key_;
  std::optional<std::size_t> line_;
  std::optional<std::size_t> column_;
};

struct PathsParams {
  std::vector<std::size_t> n_nodes{6, 10, 20};
  std::vector<double> link_probabilities{0.3, 0.5, 1.0};
  std::vector<std::size_t> lengths{1, 2, 3};
  std::vector<graph::PathCase> cases{std::begin(graph::kAllPathCases),
                                     std::end(graph::kAllPathCases)};
  std::size_t trials = 100'000;

  friend bool operator==(const PathsParams&, const PathsParams&) = default;
};

struct DiffusionParams {
  diffusion::LmsConfig lms{};
  /// Rounds averaged for the steady-state figure.
  std::size_t steady_state_window = 200;
  /// Suppression is measured on rounds with 0-based index >= this.
  std::size_t suppression_first_round = 200;
  /// A trial counts as suppressed when its ratio is below this.
  double suppression_threshold = 0.25;
  /// Also run the uniform-weight arm and report the gap.
  bool compare_uniform = false;

  friend bool operator==(const DiffusionParams&, const DiffusionParams&) = default;
};

struct MarlParams {
  marl::MarlSetup setup{};
  std::size_t repetitions = 20;

  friend bool operator==(const MarlParams&, const MarlParams&) = default;
};

struct ExperimentConfig {
  Kind kind = Kind::Diffusion;
  std::uint64_t seed = 1;
  unsigned jobs = 1;
  std::optional<std::string> output_dir;
  std::variant<PathsParams, DiffusionParams, MarlParams> params = DiffusionParams{};

  const PathsParams& paths() const { return std::get<PathsParams>(params); }
  const DiffusionParams& diffusion() const { return std::get<DiffusionParams>(params); }
  const MarlParams& marl() const { return std::get<MarlParams>(params); }

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

inline std::string_view to_string(marl::CombineScope s) {
  return s == marl::CombineScope::VisitedEntries ? "visited_entries" : "whole_table";
}

namespace detail {

inline std::pair<std::size_t, std::size_t> line_and_column(std::string_view text,
                                                           std::size_t byte) {
  std::size_t line = 1;
  std::size_t col = 1;
  for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col > 1 ? col - 1 : 1};
}

class Reader {
 public:
  explicit Reader(const Json& doc) : doc_(doc) {}

  bool has(const std::string& key) const { return doc_.contains(key); }

  template <class T>
  void get(const std::string& key, T& out) {
    if (!doc_.contains(key)) return;
    seen_.insert(key);
    out = convert<T>(key, doc_.at(key));
  }

  template <class T>
  void get_optional(const std::string& key, std::optional<T>& out) {
    if (!doc_.contains(key)) return;
    seen_.insert(key);
    const Json& v = doc_.at(key);
    out = v.is_null() ? std::nullopt : std::optional<T>(convert<T>(key, v));
  }

  template <class T>
  void get_list(const std::string& key, std::vector<T>& out) {
    if (!doc_.contains(key)) return;
    seen_.insert(key);
    const Json& v = doc_.at(key);
    if (!v.is_array()) throw ConfigError(key, key + ": expected a list");
    out.clear();
    for (const auto& item : v) out.push_back(convert<T>(key, item));
  }

  const Json& raw(const std::string& key) {
    seen_.insert(key);
    return doc_.at(key);
  }

  void reject_unknown() const {
    for (const auto& [key, _] : doc_.items())
      if (!seen_.count(key)) throw ConfigError(key, key + ": unknown key");
  }

 private:
  template <class T>
  static T convert(const std::string& key, const Json& v) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(key, key + ": expected true or false");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(key, key + ": expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(key, key + ": expected a number");
      return v.get<T>();
    } else {
      static_assert(std::is_integral_v<T>);
      if (v.is_number_unsigned()) {
        const auto u = v.get<std::uint64_t>();
        if (u > static_cast<std::uint64_t>(std::numeric_limits<T>::max()))
          throw ConfigError(key, key + ": value out of range");
        return static_cast<T>(u);
      }
      if (v.is_number_float()) {
        // accept 1e6-style literals when they are whole numbers
        const double d = v.get<double>();
        if (d >= 0.0 && d == std::floor(d) &&
            d <= static_cast<double>(std::numeric_limits<T>::max()))
          return static_cast<T>(d);
      }
      if (v.is_number_integer()) throw ConfigError(key, key + ": must be >= 0");
      throw ConfigError(key, key + ": expected a non-negative integer");
    }
  }

  const Json& doc_;
  std::set<std::string> seen_;
};

/// Re-raises a validate() failure as a ConfigError naming the key, which
/// validate() messages always lead with.
template <class Fn>
void validate_as_config(Fn&& fn) {
  try {
    fn();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    const auto end = msg.find_first_of(" :");
    throw ConfigError(msg.substr(0, end), msg);
  }
}

inline void read_paths(Reader& r, PathsParams& p) {
  r.get_list("n_nodes", p.n_nodes);
  r.get_list("link_probabilities", p.link_probabilities);
  r.get_list("lengths", p.lengths);
  if (r.has("cases")) {
    std::vector<std::string> names;
    r.get_list("cases", names);
    p.cases.clear();
    for (const auto& name : names) {
      try {
        p.cases.push_back(graph::path_case_from_string(name));
      } catch (const std::invalid_argument& e) {
        throw ConfigError("cases", std::string("cases: ") + e.what());
      }
    }
  }
  r.get("trials", p.trials);

  if (p.n_nodes.empty() || p.link_probabilities.empty() || p.lengths.empty() || p.cases.empty())
    throw ConfigError("paths", "n_nodes, link_probabilities, lengths and cases must be non-empty");
  for (auto n : p.n_nodes)
    if (n < 3) throw ConfigError("n_nodes", "n_nodes: every entry must be at least 3");
  for (auto rho : p.link_probabilities)
    if (!(rho >= 0.0 && rho <= 1.0))
      throw ConfigError("link_probabilities", "link_probabilities: entries must lie in [0, 1]");
  for (auto k : p.lengths)
    if (k < 1 || k > 8) throw ConfigError("lengths", "lengths: entries must lie in [1, 8]");
  if (p.trials < 1) throw ConfigError("trials", "trials must be at least 1");
}

inline void read_diffusion(Reader& r, DiffusionParams& p) {
  auto& c = p.lms;
  r.get("n_nodes", c.graph.n_nodes);
  r.get("link_probability", c.graph.link_probability);
  r.get("signal_length", c.signal_length);
  r.get("sparsity", c.sparsity);
  r.get("step_size", c.step_size);
  r.get("adaptation_window", c.adaptation_window);
  r.get("iterations", c.iterations);
  r.get("zeta", c.weighting.zeta);
  r.get("exponent", c.weighting.exponent);
  r.get("sigma_noise", c.noise.sigma_noise);
  r.get_optional("impaired_node", c.noise.impaired_node);
  r.get("impaired_exponent", c.noise.impaired_exponent);
  r.get("n_simulations", c.n_simulations);
  r.get("msd_floor_db", c.msd_floor_db);
  r.get("steady_state_window", p.steady_state_window);
  r.get("suppression_first_round", p.suppression_first_round);
  r.get("suppression_threshold", p.suppression_threshold);
  r.get("compare_uniform", p.compare_uniform);

  validate_as_config([&] { c.validate(); });
  if (p.steady_state_window < 1 || p.steady_state_window > c.iterations)
    throw ConfigError("steady_state_window", "steady_state_window must lie in [1, iterations]");
  if (p.suppression_first_round >= c.iterations)
    throw ConfigError("suppression_first_round", "suppression_first_round must be < iterations");
  if (!(p.suppression_threshold > 0.0) || !std::isfinite(p.suppression_threshold))
    throw ConfigError("suppression_threshold", "suppression_threshold must be > 0");
}

inline void read_marl(Reader& r, MarlParams& p) {
  auto& s = p.setup;
  if (r.has("case")) {
    int which = 0;
    r.get("case", which);
    try {
      const auto preset = marl::case_preset(which);
      s.learning = preset.learning;
      s.voting.lambda = preset.lambda;
    } catch (const std::invalid_argument& e) {
      throw ConfigError("case", e.what());
    }
  }
  if (r.has("layout")) {
    const Json& v = r.raw("layout");
    std::string text;
    if (v.is_string()) {
      text = v.get<std::string>();
    } else if (v.is_array()) {
      for (const auto& row : v) {
        if (!row.is_string()) throw ConfigError("layout", "layout: rows must be strings");
        text += row.get<std::string>() + "\n";
      }
    } else {
      throw ConfigError("layout", "layout: expected a string or a list of rows");
    }
    try {
      s.world = marl::parse_layout(text);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("layout", std::string("layout: ") + e.what());
    }
  }
  if (r.has("starts")) {
    const Json& v = r.raw("starts");
    if (!v.is_array()) throw ConfigError("starts", "starts: expected a list of [row, col]");
    s.starts.clear();
    for (const auto& cell : v) {
      if (!cell.is_array() || cell.size() != 2 || !cell[0].is_number_unsigned() ||
          !cell[1].is_number_unsigned())
        throw ConfigError("starts", "starts: each entry must be [row, col]");
      s.starts.push_back({cell[0].get<std::size_t>(), cell[1].get<std::size_t>()});
    }
  }
  r.get("slippery", s.slippery);
  r.get("learning_rate", s.learning.learning_rate);
  r.get("discount", s.learning.discount);
  r.get("eps_min", s.learning.eps_min);
  r.get("eps_max", s.learning.eps_max);
  r.get("decay_rate", s.learning.decay_rate);
  r.get("max_steps", s.learning.max_steps);
  r.get("n_episodes", s.learning.n_episodes);
  r.get("window", s.voting.window);
  if (r.has("scope")) {
    std::string name;
    r.get("scope", name);
    if (name == "visited_entries")
      s.voting.scope = marl::CombineScope::VisitedEntries;
    else if (name == "whole_table")
      s.voting.scope = marl::CombineScope::WholeTable;
    else
      throw ConfigError("scope", "scope: expected visited_entries or whole_table");
  }
  r.get("lambda", s.voting.lambda);
  r.get("bias", s.voting.corruption.bias);
  if (r.has("divergence")) {
    std::string name;
    r.get("divergence", name);
    try {
      s.voting.divergence = marl::divergence_from_string(name);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("divergence", std::string("divergence: ") + e.what());
    }
  }
  r.get("n_agents", s.n_agents);
  r.get("broken_agent", s.broken_agent);
  r.get("eval_episodes", s.eval_episodes);
  r.get("q_init_scale", s.q_init_scale);
  r.get("warmup_episodes", s.warmup_episodes);
  r.get("record_votes", s.record_votes);
  r.get("repetitions", p.repetitions);

  validate_as_config([&] { s.validate(); });
  if (p.repetitions < 1) throw ConfigError("repetitions", "repetitions must be >= 1");
}

}  // namespace detail

/// Parses and validates a config document. When the document has no
/// `kind`, `expected` supplies it; when both are present they must agree.
inline ExperimentConfig parse_config(std::string_view text,
                                     std::optional<Kind> expected = std::nullopt) {
  Json doc;
  try {
    doc = Json::parse(text);
  } catch (const Json::parse_error& e) {
    const auto [line, col] = detail::line_and_column(text, e.byte);
    throw ConfigError("", "syntax error at line " + std::to_string(line) + ", column " +
                              std::to_string(col) + ": " + e.what(),
                      line, col);
  }
  if (!doc.is_object()) throw ConfigError("", "config must be a JSON object", 1, 1);

  detail::Reader r(doc);
  ExperimentConfig cfg;
  std::optional<Kind> kind = expected;
  if (r.has("kind")) {
    std::string name;
    r.get("kind", name);
    const auto k = kind_from_string(name);
    if (!k) throw ConfigError("kind", "kind: expected paths, diffusion or marl");
    if (expected && *expected != *k)
      throw ConfigError("kind", "kind: config is for '" + name + "' but '" +
                                    std::string(to_string(*expected)) + "' was requested");
    kind = k;
  }
  if (!kind) throw ConfigError("kind", "kind: missing");
  cfg.kind = *kind;

  r.get("seed", cfg.seed);
  r.get("jobs", cfg.jobs);
  if (cfg.jobs < 1) throw ConfigError("jobs", "jobs must be >= 1");
  if (r.has("output_dir")) {
    std::string dir;
    r.get("output_dir", dir);
    cfg.output_dir = dir;
  }

  switch (cfg.kind) {
    case Kind::Paths: {
      PathsParams p;
      detail::read_paths(r, p);
      cfg.params = p;
      break;
    }
    case Kind::Diffusion: {
      DiffusionParams p;
      detail::read_diffusion(r, p);
      cfg.params = p;
      break;
    }
    case Kind::Marl: {
      MarlParams p;
      detail::read_marl(r, p);
      cfg.params = p;
      break;
    }
  }
  r.reject_unknown();
  return cfg;
}

/// Full parameter echo; parse_config(to_json(c).dump()) == c.
inline Json to_json(const ExperimentConfig& c) {
  Json j;
  j["kind"] = to_string(c.kind);
  j["seed"] = c.seed;
  j["jobs"] = c.jobs;
  if (c.output_dir) j["output_dir"] = *c.output_dir;

  switch (c.kind) {
    case Kind::Paths: {
      const auto& p = c.paths();
      j["n_nodes"] = p.n_nodes;
      j["link_probabilities"] = p.link_probabilities;
      j["lengths"] = p.lengths;
      Json cases = Json::array();
      for (auto pc : p.cases) cases.push_back(graph::to_string(pc));
      j["cases"] = cases;
      j["trials"] = p.trials;
      break;
    }
    case Kind::Diffusion: {
      const auto& p = c.diffusion();
      const auto& l = p.lms;
      j["n_nodes"] = l.graph.n_nodes;
      j["link_probability"] = l.graph.link_probability;
      j["signal_length"] = l.signal_length;
      j["sparsity"] = l.sparsity;
      j["step_size"] = l.step_size;
      j["adaptation_window"] = l.adaptation_window;
      j["iterations"] = l.iterations;
      j["zeta"] = l.weighting.zeta;
      j["exponent"] = l.weighting.exponent;
      j["sigma_noise"] = l.noise.sigma_noise;
      j["impaired_node"] = l.noise.impaired_node ? Json(*l.noise.impaired_node) : Json(nullptr);
      j["impaired_exponent"] = l.noise.impaired_exponent;
      j["n_simulations"] = l.n_simulations;
      j["msd_floor_db"] = l.msd_floor_db;
      j["steady_state_window"] = p.steady_state_window;
      j["suppression_first_round"] = p.suppression_first_round;
      j["suppression_threshold"] = p.suppression_threshold;
      j["compare_uniform"] = p.compare_uniform;
      break;
    }
    case Kind::Marl: {
      const auto& p = c.marl();
      const auto& s = p.setup;
      Json rows = Json::array();
      const std::string layout = s.world.to_layout();
      for (std::size_t pos = 0; pos < layout.size();) {
        const auto nl = layout.find('\n', pos);
        rows.push_back(layout.substr(pos, nl - pos));
        pos = nl + 1;
      }
      j["layout"] = rows;
      Json starts = Json::array();
      for (const auto& st : s.starts) starts.push_back({st.row, st.col});
      j["starts"] = starts;
      j["slippery"] = s.slippery;
      j["learning_rate"] = s.learning.learning_rate;
      j["discount"] = s.learning.discount;
      j["eps_min"] = s.learning.eps_min;
      j["eps_max"] = s.learning.eps_max;
      j["decay_rate"] = s.learning.decay_rate;
      j["max_steps"] = s.learning.max_steps;
      j["n_episodes"] = s.learning.n_episodes;
      j["window"] = s.voting.window;
      j["scope"] = to_string(s.voting.scope);
      j["lambda"] = s.voting.lambda;
      j["bias"] = s.voting.corruption.bias;
      j["divergence"] = marl::to_string(s.voting.divergence);
      j["n_agents"] = s.n_agents;
      j["broken_agent"] = s.broken_agent;
      j["eval_episodes"] = s.eval_episodes;
      j["q_init_scale"] = s.q_init_scale;
      j["warmup_episodes"] = s.warmup_episodes;
      j["record_votes"] = s.record_votes;
      j["repetitions"] = p.repetitions;
      break;
    }
  }
  return j;
}

// ---------------------------------------------------------------------------
// Tabular output
// ---------------------------------------------------------------------------

using Value = std::variant<std::int64_t, double, std::string>;

/// Column-ordered table. Rows must have one value per column.
struct MetricSeries {
  std::vector<std::string> columns;
  std::vector<std::vector<Value>> rows;

  void add(std::vector<Value> row) {
    if (row.size() != columns.size())
      throw std::invalid_argument("row has " + std::to_string(row.size()) + " values, expected " +
                                  std::to_string(columns.size()));
    rows.push_back(std::move(row));
  }
};

inline std::string format_value(const Value& v) {
  if (const auto* i = std::get_if<std::int64_t>(&v)) return std::to_string(*i);
  if (const auto* d = std::get_if<double>(&v)) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", *d);
    return buf;
  }
  const auto& s = std::get<std::string>(v);
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string quoted = "\"";
  for (char ch : s) {
    if (ch == '"') quoted += '"';
    quoted += ch;
  }
  return quoted + "\"";
}

inline std::string to_csv(const MetricSeries& series) {
  std::string out;
  for (std::size_t c = 0; c < series.columns.size(); ++c) {
    if (c) out += ',';
    out += series.columns[c];
  }
  out += '\n';
  for (const auto& row : series.rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) out += ',';
      out += format_value(row[c]);
    }
    out += '\n';
  }
  return out;
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  out.close();
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

inline void emit_csv(const MetricSeries& series, const std::filesystem::path& path) {
  write_file(path, to_csv(series));
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

struct ResultBundle {
  Json summary;
  /// file name -> table
  std::vector<std::pair<std::string, MetricSeries>> tables;

  const MetricSeries& table(std::string_view name) const {
    for (const auto& [n, t] : tables)
      if (n == name) return t;
    throw std::out_of_range("no table named '" + std::string(name) + "'");
  }
};

namespace detail {

inline Json run_metadata(const ExperimentConfig& c) {
  Json j;
  j["version"] = kVersion;
  j["kind"] = to_string(c.kind);
  j["master_seed"] = c.seed;
  j["seed_rule"] = kSeedDerivationRule;
  j["jobs"] = c.jobs;
  return j;
}

inline double relative_error(double estimate, double reference) {
  if (std::isnan(reference) || std::isnan(estimate))
    return std::numeric_limits<double>::quiet_NaN();
  if (reference == 0.0)
    return estimate == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return std::abs(estimate - reference) / std::abs(reference);
}

}  // namespace detail

/// One cell of the walk-count grid.
struct PathsRow {
  graph::PathCase path_case;
  std::size_t n_nodes;
  double link_probability;
  double avg_neighbors;
  std::size_t length;
  double formula;  ///< NaN when the closed form is undefined for the cell
  double monte_carlo;
  double relative_error;
};

/// Grid cell k (case-major, then N, rho, K) uses seed derive_seed(seed, k).
inline std::vector<PathsRow> run_paths_grid(const PathsParams& p, std::uint64_t seed,
                                            unsigned jobs) {
  std::vector<PathsRow> rows;
  std::uint64_t cell = 0;
  for (auto pc : p.cases)
    for (auto n : p.n_nodes)
      for (auto rho : p.link_probabilities)
        for (auto k : p.lengths) {
          PathsRow row{pc, n, rho, rho * static_cast<double>(n - 1), k, 0.0, 0.0, 0.0};
          try {
            row.formula = graph::expected_paths({pc, n, row.avg_neighbors, k});
          } catch (const std::invalid_argument&) {
            row.formula = std::numeric_limits<double>::quiet_NaN();
          }
          row.monte_carlo =
              graph::monte_carlo_paths({n, rho}, k, pc, p.trials, derive_seed(seed, cell), jobs);
          row.relative_error = detail::relative_error(row.monte_carlo, row.formula);
          rows.push_back(row);
          ++cell;
        }
  return rows;
}

inline ResultBundle run_paths(const ExperimentConfig& c) {
  const auto rows = run_paths_grid(c.paths(), c.seed, c.jobs);
  MetricSeries t{{"case", "n_nodes", "link_probability", "avg_neighbors", "length", "formula",
                  "monte_carlo", "relative_error"},
                 {}};
  double worst = 0.0;
  for (const auto& r : rows) {
    t.add({std::string(graph::to_string(r.path_case)), static_cast<std::int64_t>(r.n_nodes),
           r.link_probability, r.avg_neighbors, static_cast<std::int64_t>(r.length), r.formula,
           r.monte_carlo, r.relative_error});
    if (!std::isnan(r.relative_error)) worst = std::max(worst, r.relative_error);
  }
  ResultBundle b;
  b.summary["run"] = detail::run_metadata(c);
  b.summary["config"] = to_json(c);
  b.summary["metrics"] = {{"cells", rows.size()}, {"max_relative_error", worst}};
  b.tables.emplace_back("paths.csv", std::move(t));
  return b;
}

inline MetricSeries msd_table(const diffusion::MsdSeries& s) {
  MetricSeries t{{"iteration", "node_id", "msd_db", "intact_mean_db"}, {}};
  t.rows.reserve(s.iterations * s.n_nodes);
  for (std::size_t r = 0; r < s.iterations; ++r) {
    const double intact = s.intact_mean_db(r);
    for (std::size_t i = 0; i < s.n_nodes; ++i)
      t.rows.push_back({static_cast<std::int64_t>(r + 1), static_cast<std::int64_t>(i),
                        s.msd_db(r, i), intact});
  }
  return t;
}

/// Fraction of trials whose impaired-weight ratio after `first_round` is
/// below `threshold`. Trials without a measurement count as failures.
inline double suppression_fraction(const diffusion::MsdSeries& s, std::size_t first_round,
                                   double threshold) {
  std::size_t ok = 0;
  for (std::size_t k = 0; k < s.n_simulations; ++k)
    if (s.trial_suppression_ratio(k, first_round) < threshold) ++ok;
  return static_cast<double>(ok) / static_cast<double>(s.n_simulations);
}

inline ResultBundle run_diffusion(const ExperimentConfig& c) {
  const auto& p = c.diffusion();
  const auto series = diffusion::run_experiment(p.lms, c.seed, c.jobs);

  ResultBundle b;
  b.summary["run"] = detail::run_metadata(c);
  b.summary["config"] = to_json(c);
  Json m;
  m["steady_state_intact_db"] = series.steady_state_intact_db(p.steady_state_window);
  if (p.lms.noise.impaired_node) {
    MetricSeries sup{{"trial", "impaired_weight_ratio"}, {}};
    for (std::size_t k = 0; k < series.n_simulations; ++k)
      sup.add({static_cast<std::int64_t>(k),
               series.trial_suppression_ratio(k, p.suppression_first_round)});
    m["suppressed_trial_fraction"] =
        suppression_fraction(series, p.suppression_first_round, p.suppression_threshold);
    b.tables.emplace_back("suppression.csv", std::move(sup));
  }
  b.tables.emplace(b.tables.begin(), "msd.csv", msd_table(series));

  if (p.compare_uniform) {
    auto uniform = p.lms;
    uniform.weighting = detection::WeightingPolicy::uniform();
    const auto base = diffusion::run_experiment(uniform, c.seed, c.jobs);
    const double base_db = base.steady_state_intact_db(p.steady_state_window);
    m["uniform_steady_state_intact_db"] = base_db;
    m["improvement_db"] = base_db - m["steady_state_intact_db"].get<double>();
    b.tables.emplace_back("msd_uniform.csv", msd_table(base));
  }
  b.summary["metrics"] = m;
  return b;
}

struct MarlOutcome {
  std::vector<marl::RunStats> with_detection;
  std::vector<marl::RunStats> without_detection;

  double success_with_detection() const { return mean_success(with_detection); }
  double success_without_detection() const { return mean_success(without_detection); }

  /// Pooled over every scored vote of every detection run.
  double detection_accuracy() const {
    std::size_t scored = 0;
    std::size_t correct = 0;
    for (const auto& r : with_detection) {
      scored += r.scored_votes;
      correct += r.correct_votes;
    }
    return scored ? static_cast<double>(correct) / static_cast<double>(scored) : 0.0;
  }

 private:
  static double mean_success(const std::vector<marl::RunStats>& runs) {
    double acc = 0.0;
    for (const auto& r : runs) acc += r.success_rate();
    return runs.empty() ? 0.0 : acc / static_cast<double>(runs.size());
  }
};

/// Repetition r runs both arms from derive_seed(seed, r).
inline MarlOutcome run_marl_repetitions(const MarlParams& p, std::uint64_t seed, unsigned jobs) {
  p.setup.validate();
  std::vector<marl::RunStats> all(2 * p.repetitions);
  parallel_for(all.size(), jobs, [&](std::size_t k) {
    const std::size_t rep = k / 2;
    all[k] = marl::run_marl(p.setup, k % 2 == 0, derive_seed(seed, rep));
  });
  MarlOutcome out;
  for (std::size_t k = 0; k < all.size(); ++k)
    (k % 2 == 0 ? out.with_detection : out.without_detection).push_back(std::move(all[k]));
  return out;
}

inline ResultBundle run_marl(const ExperimentConfig& c) {
  const auto& p = c.marl();
  const auto outcome = run_marl_repetitions(p, c.seed, c.jobs);

  MetricSeries runs{{"repetition", "detection", "success_rate", "detection_accuracy",
                     "voting_rounds", "training_steps"},
                    {}};
  for (std::size_t r = 0; r < p.repetitions; ++r)
    for (const auto* arm : {&outcome.with_detection, &outcome.without_detection}) {
      const auto& s = (*arm)[r];
      runs.add({static_cast<std::int64_t>(r), static_cast<std::int64_t>(s.detection ? 1 : 0),
                s.success_rate(), s.detection_accuracy(),
                static_cast<std::int64_t>(s.voting_rounds),
                static_cast<std::int64_t>(s.training_steps)});
    }

  ResultBundle b;
  b.summary["run"] = detail::run_metadata(c);
  b.summary["config"] = to_json(c);
  b.summary["metrics"] = {{"success_with_detection", outcome.success_with_detection()},
                          {"success_without_detection", outcome.success_without_detection()},
                          {"detection_accuracy", outcome.detection_accuracy()}};
  b.tables.emplace_back("runs.csv", std::move(runs));

  if (p.setup.record_votes) {
    MetricSeries votes{{"repetition", "episode", "agent", "detected"}, {}};
    for (std::size_t r = 0; r < p.repetitions; ++r)
      for (const auto& v : outcome.with_detection[r].votes)
        for (std::size_t a = 0; a < v.detected.size(); ++a)
          votes.add({static_cast<std::int64_t>(r), static_cast<std::int64_t>(v.episode),
                     static_cast<std::int64_t>(a), static_cast<std::int64_t>(v.detected[a])});
    b.tables.emplace_back("votes.csv", std::move(votes));
  }
  return b;
}

inline ResultBundle run(const ExperimentConfig& c) {
  switch (c.kind) {
    case Kind::Paths: return run_paths(c);
    case Kind::Diffusion: return run_diffusion(c);
    case Kind::Marl: return run_marl(c);
  }
  throw std::logic_error("unknown experiment kind");
}

/// --out, then the config's output_dir, then $COOPDETECT_OUTPUT_DIR, then
/// "results".
inline std::filesystem::path resolve_output_dir(const std::optional<std::string>& cli_out,
                                                const ExperimentConfig& c) {
  if (cli_out) return *cli_out;
  if (c.output_dir) return *c.output_dir;
  if (const char* env = std::getenv(std::string(kOutputDirEnv).c_str()); env && *env) return env;
  return std::string(kDefaultOutputDir);
}

/// Writes every table and summary.json into `dir`, creating it if needed.
/// Returns the written paths.
inline std::vector<std::filesystem::path> write_bundle(const ResultBundle& b,
                                                       const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create '" + dir.string() + "': " + ec.message());
  std::vector<std::filesystem::path> written;
  for (const auto& [name, table] : b.tables) {
    emit_csv(table, dir / name);
    written.push_back(dir / name);
  }
  Json summary = b.summary;
  Json files = Json::array();
  for (const auto& [name, _] : b.tables) files.push_back(name);
  summary["files"] = files;
  write_file(dir / "summary.json", summary.dump(2) + "\n");
  written.push_back(dir / "summary.json");
  return written;
}

}  // namespace coopdetect::experiment
