#pragma once

// Adapt-then-combine diffusion LMS with one impaired (high-noise) node and
// distance-weighted combination.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "coopdetect/detection.hpp"
#include "coopdetect/graph.hpp"
#include "coopdetect/parallel.hpp"
#include "coopdetect/random.hpp"

namespace coopdetect::diffusion {

using Vector = std::vector<double>;

inline constexpr double kDefaultMsdFloorDb = -200.0;

struct TargetSignal {
  Vector values;
  double sparsity = 0.0;

  std::size_t size() const noexcept { return values.size(); }

  std::size_t support_size() const {
    return static_cast<std::size_t>(
        std::count_if(values.begin(), values.end(), [](double v) { return v != 0.0; }));
  }
};

/// Sparse target: round(sparsity * L) uniformly chosen components drawn
/// from N(0, 1), zeros elsewhere.
template <class URBG>
TargetSignal generate_target(std::size_t length, double sparsity, URBG& rng) {
  if (!(sparsity >= 0.0 && sparsity <= 1.0))
    throw std::invalid_argument("sparsity must lie in [0, 1]");
  const auto support = static_cast<std::size_t>(std::lround(sparsity * static_cast<double>(length)));
  std::vector<std::size_t> all(length);
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<std::size_t> chosen;
  chosen.reserve(support);
  std::sample(all.begin(), all.end(), std::back_inserter(chosen), support, rng);

  TargetSignal target{Vector(length, 0.0), sparsity};
  StandardNormal normal;
  for (std::size_t k : chosen) {
    double v = normal(rng);
    while (v == 0.0) v = normal(rng);  // keeps the support size exact
    target.values[k] = v;
  }
  return target;
}

/// Per-node measurement noise. The impaired node's std is
/// 10^impaired_exponent times the common sigma_noise.
struct NoiseProfile {
  double sigma_noise = 0.04;
  std::optional<std::size_t> impaired_node = 0;
  double impaired_exponent = 2.0;

  void validate() const {
    if (!(sigma_noise >= 0.0) || !std::isfinite(sigma_noise))
      throw std::invalid_argument("sigma_noise must be a finite value >= 0");
    if (!(impaired_exponent >= 0.0) || !std::isfinite(impaired_exponent))
      throw std::invalid_argument("impaired_exponent must be a finite value >= 0");
  }

  bool is_impaired(std::size_t node) const { return impaired_node && *impaired_node == node; }

  double sigma(std::size_t node) const {
    return is_impaired(node) ? std::pow(10.0, impaired_exponent) * sigma_noise : sigma_noise;
  }

  friend bool operator==(const NoiseProfile&, const NoiseProfile&) = default;
};

struct Measurement {
  Vector regressor;
  double observation = 0.0;
};

/// Fills `regressor` with i.i.d. N(0, 1) entries and returns
/// d = regressor . x_opt + noise, noise ~ N(0, sigma(node)^2).
template <class URBG>
double measure_into(std::size_t node, const TargetSignal& x_opt, const NoiseProfile& noise,
                    URBG& rng, std::span<double> regressor) {
  if (regressor.size() != x_opt.size())
    throw std::invalid_argument("regressor length does not match target length");
  StandardNormal normal;
  for (double& a : regressor) a = normal(rng);
  double d = 0.0;
  for (std::size_t k = 0; k < regressor.size(); ++k) d += regressor[k] * x_opt.values[k];
  return d + noise.sigma(node) * normal(rng);
}

template <class URBG>
Measurement measure(std::size_t node, const TargetSignal& x_opt, const NoiseProfile& noise,
                    URBG& rng) {
  Measurement m{Vector(x_opt.size()), 0.0};
  m.observation = measure_into(node, x_opt, noise, rng, m.regressor);
  return m;
}

/// x <- x + mu * (d - a.x) * a
inline void lms_adapt_inplace(std::span<double> x, std::span<const double> a, double d,
                              double mu) {
  if (x.size() != a.size()) throw std::invalid_argument("lms_adapt: length mismatch");
  double predicted = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) predicted += a[k] * x[k];
  const double step = mu * (d - predicted);
  for (std::size_t k = 0; k < x.size(); ++k) x[k] += step * a[k];
}

inline Vector lms_adapt(std::span<const double> x, std::span<const double> a, double d,
                        double mu) {
  if (!(mu > 0.0)) throw std::invalid_argument("lms_adapt: step size must be > 0");
  Vector out(x.begin(), x.end());
  lms_adapt_inplace(out, a, d, mu);
  return out;
}

inline double squared_deviation(std::span<const double> x, std::span<const double> x_opt) {
  if (x.size() != x_opt.size()) throw std::invalid_argument("msd: length mismatch");
  double acc = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double d = x[k] - x_opt[k];
    acc += d * d;
  }
  return acc;
}

inline double to_db(double linear, double floor_db = kDefaultMsdFloorDb) {
  if (!(linear > 0.0)) return floor_db;
  return std::max(floor_db, 10.0 * std::log10(linear));
}

inline double msd(std::span<const double> x, const TargetSignal& x_opt,
                  double floor_db = kDefaultMsdFloorDb) {
  return to_db(squared_deviation(x, x_opt.values), floor_db);
}

struct LmsConfig {
  graph::GraphSpec graph{10, 1.0};
  std::size_t signal_length = 100;
  double sparsity = 0.5;
  double step_size = 0.001;
  std::size_t adaptation_window = 10;
  std::size_t iterations = 2000;
  detection::WeightingPolicy weighting{0.015, 8.0};
  NoiseProfile noise{};
  std::size_t n_simulations = 1000;
  double msd_floor_db = kDefaultMsdFloorDb;

  void validate() const {
    graph.validate();
    if (signal_length < 1) throw std::invalid_argument("signal_length must be at least 1");
    if (!(sparsity >= 0.0 && sparsity <= 1.0))
      throw std::invalid_argument("sparsity must lie in [0, 1]");
    if (!(step_size > 0.0) || !std::isfinite(step_size))
      throw std::invalid_argument("step_size must be > 0");
    if (adaptation_window < 1) throw std::invalid_argument("adaptation_window must be >= 1");
    if (iterations < 1) throw std::invalid_argument("iterations must be >= 1");
    if (n_simulations < 1) throw std::invalid_argument("n_simulations must be >= 1");
    weighting.validate();
    noise.validate();
    if (noise.impaired_node && *noise.impaired_node >= graph.n_nodes)
      throw std::invalid_argument("impaired_node is not a node of the graph");
  }

  friend bool operator==(const LmsConfig&, const LmsConfig&) = default;
};

/// Weights chosen by every node in one round, aligned with `neighborhoods`.
struct RoundWeights {
  std::vector<detection::CombinationWeights> per_node;
};

/// One adapt-then-combine round: every node runs `adaptation_window`
/// consecutive measure + LMS steps from its current estimate on its own
/// stream, then combines its neighbors' temporaries with distance weights.
inline std::vector<Vector> atc_round(const std::vector<Vector>& states,
                                     const std::vector<std::vector<std::size_t>>& neighborhoods,
                                     const LmsConfig& config, const TargetSignal& x_opt,
                                     std::span<Rng> node_streams,
                                     RoundWeights* weights_out = nullptr) {
  const std::size_t n = states.size();
  if (neighborhoods.size() != n || node_streams.size() != n)
    throw std::invalid_argument("atc_round: per-node inputs disagree in size");

  std::vector<Vector> temporaries(states);
  Vector regressor(x_opt.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t step = 0; step < config.adaptation_window; ++step) {
      const double d = measure_into(i, x_opt, config.noise, node_streams[i], regressor);
      lms_adapt_inplace(temporaries[i], regressor, d, config.step_size);
    }
  }

  std::vector<Vector> next(n);
  if (weights_out) weights_out->per_node.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const detection::NeighborhoodView view{i, neighborhoods[i], temporaries};
    auto w = detection::distance_weights(view, config.weighting);
    next[i] = detection::combine_estimates(view, w);
    if (weights_out) weights_out->per_node[i] = std::move(w);
  }
  return next;
}

/// Per-trial record: squared deviation per (round, node), round-major, and
/// the mean of w(i -> impaired) * |N_i| over intact neighbors i of the
/// impaired node (NaN when it has none).
struct TrialResult {
  std::size_t n_nodes = 0;
  std::vector<double> squared_deviation;
  std::vector<double> impaired_weight_ratio;
};

/// Streams: graph and target from make_stream(trial_seed, 0); node i
/// measures from make_stream(trial_seed, i + 1). Estimates start at zero.
inline TrialResult run_trial(const LmsConfig& config, std::uint64_t trial_seed) {
  const std::size_t n = config.graph.n_nodes;
  Rng setup = make_stream(trial_seed, 0);
  const graph::Graph g = graph::generate_graph(config.graph, setup);
  const TargetSignal x_opt = generate_target(config.signal_length, config.sparsity, setup);

  std::vector<Rng> streams;
  streams.reserve(n);
  for (std::size_t i = 0; i < n; ++i) streams.push_back(make_stream(trial_seed, i + 1));

  std::vector<std::vector<std::size_t>> hoods(n);
  for (std::size_t i = 0; i < n; ++i) hoods[i] = g.neighbors(i);

  TrialResult result;
  result.n_nodes = n;
  result.squared_deviation.resize(config.iterations * n);
  result.impaired_weight_ratio.assign(config.iterations, std::numeric_limits<double>::quiet_NaN());

  std::vector<Vector> states(n, Vector(config.signal_length, 0.0));
  RoundWeights weights;
  for (std::size_t t = 0; t < config.iterations; ++t) {
    states = atc_round(states, hoods, config, x_opt, streams, &weights);
    for (std::size_t i = 0; i < n; ++i)
      result.squared_deviation[t * n + i] = squared_deviation(states[i], x_opt.values);

    if (config.noise.impaired_node) {
      const std::size_t bad = *config.noise.impaired_node;
      double ratio_sum = 0.0;
      std::size_t count = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (i == bad || !g.adjacent(i, bad)) continue;
        const auto& hood = hoods[i];
        const auto pos = static_cast<std::size_t>(
            std::find(hood.begin(), hood.end(), bad) - hood.begin());
        ratio_sum += weights.per_node[i][pos] * static_cast<double>(hood.size());
        ++count;
      }
      if (count > 0) result.impaired_weight_ratio[t] = ratio_sum / static_cast<double>(count);
    }
  }
  return result;
}

/// Monte Carlo averaged MSD curves. All averaging is of linear squared
/// deviations; decibels are taken afterwards.
struct MsdSeries {
  std::size_t n_nodes = 0;
  std::size_t iterations = 0;
  std::size_t n_simulations = 0;
  std::optional<std::size_t> impaired_node;
  double floor_db = kDefaultMsdFloorDb;
  /// mean squared deviation, [round * n_nodes + node]
  std::vector<double> mean_squared_deviation;
  /// mean over intact nodes of mean_squared_deviation, per round
  std::vector<double> intact_mean_squared_deviation;
  /// per-trial impaired weight ratio, [trial * iterations + round]
  std::vector<double> impaired_weight_ratio;

  double msd_db(std::size_t round, std::size_t node) const {
    return to_db(mean_squared_deviation[round * n_nodes + node], floor_db);
  }
  double intact_mean_db(std::size_t round) const {
    return to_db(intact_mean_squared_deviation[round], floor_db);
  }

  /// dB of the intact-node mean squared deviation averaged over the last
  /// `window` rounds.
  double steady_state_intact_db(std::size_t window) const {
    window = std::clamp<std::size_t>(window, 1, iterations);
    double acc = 0.0;
    for (std::size_t t = iterations - window; t < iterations; ++t)
      acc += intact_mean_squared_deviation[t];
    return to_db(acc / static_cast<double>(window), floor_db);
  }

  /// Trial's mean impaired weight ratio over rounds with index >= first_round
  /// (0-based), ignoring rounds without a measurement. NaN if none.
  double trial_suppression_ratio(std::size_t trial, std::size_t first_round) const {
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t t = first_round; t < iterations; ++t) {
      const double r = impaired_weight_ratio[trial * iterations + t];
      if (std::isnan(r)) continue;
      acc += r;
      ++count;
    }
    return count ? acc / static_cast<double>(count) : std::numeric_limits<double>::quiet_NaN();
  }
};

/// Runs n_simulations independent trials (trial k seeded with
/// derive_seed(master_seed, k)) on up to `jobs` threads and reduces them in
/// trial order, so the output is identical for every `jobs`.
inline MsdSeries run_experiment(const LmsConfig& config, std::uint64_t master_seed,
                                unsigned jobs = 1) {
  config.validate();
  const std::size_t n = config.graph.n_nodes;
  const std::size_t rounds = config.iterations;
  const std::size_t trials = config.n_simulations;

  std::vector<TrialResult> results(trials);
  parallel_for(trials, jobs, [&](std::size_t k) {
    results[k] = run_trial(config, derive_seed(master_seed, k));
  });

  MsdSeries series;
  series.n_nodes = n;
  series.iterations = rounds;
  series.n_simulations = trials;
  series.impaired_node = config.noise.impaired_node;
  series.floor_db = config.msd_floor_db;
  series.mean_squared_deviation.assign(rounds * n, 0.0);
  series.impaired_weight_ratio.reserve(trials * rounds);
  for (const auto& r : results) {
    for (std::size_t k = 0; k < rounds * n; ++k)
      series.mean_squared_deviation[k] += r.squared_deviation[k];
    series.impaired_weight_ratio.insert(series.impaired_weight_ratio.end(),
                                        r.impaired_weight_ratio.begin(),
                                        r.impaired_weight_ratio.end());
  }
  for (double& v : series.mean_squared_deviation) v /= static_cast<double>(trials);

  series.intact_mean_squared_deviation.assign(rounds, 0.0);
  const std::size_t intact = n - (config.noise.impaired_node ? 1 : 0);
  for (std::size_t t = 0; t < rounds; ++t) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (!config.noise.is_impaired(i)) acc += series.mean_squared_deviation[t * n + i];
    series.intact_mean_squared_deviation[t] = acc / static_cast<double>(intact);
  }
  return series;
}

}  // namespace coopdetect::diffusion
