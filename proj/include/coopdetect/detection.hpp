#pragma once

// Adapt-then-combine detection skeleton and distance-based combination
// weights. Every node adapts on its own data, then weighs each neighbor's
// temporary estimate by how far it sits from its own.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <exception>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "coopdetect/graph.hpp"
#include "coopdetect/parallel.hpp"

namespace coopdetect::detection {

/// Exponent standing in for the hard-decision limit.
inline constexpr double kHardExponent = 64.0;

/// alpha = (distance / zeta)^exponent. exponent 0 gives uniform weights,
/// large exponents approach a hard in/out decision at distance zeta.
/// zeta should be on the order of the honest nodes' noise level.
struct WeightingPolicy {
  double zeta = 0.015;
  double exponent = 8.0;

  void validate() const {
    if (!(zeta > 0.0) || !std::isfinite(zeta)) throw std::invalid_argument("zeta must be > 0");
    if (!(exponent >= 0.0) || !std::isfinite(exponent))
      throw std::invalid_argument("exponent must be a finite value >= 0");
  }

  static WeightingPolicy uniform() { return {1.0, 0.0}; }
  static WeightingPolicy hard(double zeta) { return {zeta, kHardExponent}; }

  friend bool operator==(const WeightingPolicy&, const WeightingPolicy&) = default;
};

/// Convex weights aligned with a neighborhood's member order.
class CombinationWeights {
 public:
  CombinationWeights() = default;
  explicit CombinationWeights(std::vector<double> w) : w_(std::move(w)) {}

  std::size_t size() const noexcept { return w_.size(); }
  double operator[](std::size_t k) const { return w_[k]; }
  std::span<const double> values() const noexcept { return w_; }
  auto begin() const { return w_.begin(); }
  auto end() const { return w_.end(); }

  double sum() const {
    double s = 0.0;
    for (double v : w_) s += v;
    return s;
  }

  static CombinationWeights uniform(std::size_t n) {
    return CombinationWeights(std::vector<double>(n, 1.0 / static_cast<double>(n)));
  }

 private:
  std::vector<double> w_;
};

inline double distance(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("distance: vector length mismatch");
  double acc = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double d = x[k] - y[k];
    acc += d * d;
  }
  return std::sqrt(acc);
}

inline double alpha(double dist, const WeightingPolicy& policy) {
  if (policy.exponent == 0.0) return 1.0;
  return std::pow(dist / policy.zeta, policy.exponent);
}

/// Softmax over negated alphas: larger distance measure, smaller weight.
inline CombinationWeights combine_weights(std::span<const double> alphas) {
  if (alphas.empty()) throw std::invalid_argument("combine_weights: empty neighborhood");
  const double lowest = *std::min_element(alphas.begin(), alphas.end());
  if (!std::isfinite(lowest))
    throw std::domain_error("combine_weights: every neighbor has a non-finite distance measure");
  std::vector<double> w(alphas.size());
  double total = 0.0;
  for (std::size_t k = 0; k < alphas.size(); ++k) {
    w[k] = std::exp(-(alphas[k] - lowest));
    total += w[k];
  }
  for (double& v : w) v /= total;
  return CombinationWeights(std::move(w));
}

/// A node's view of its neighborhood at combination time. `estimates` is
/// indexed by node id over the whole network; only members are read.
struct NeighborhoodView {
  std::size_t self_id;
  std::span<const std::size_t> neighbor_ids;
  std::span<const std::vector<double>> estimates;

  void validate() const {
    if (std::count(neighbor_ids.begin(), neighbor_ids.end(), self_id) != 1)
      throw std::invalid_argument("neighborhood must contain self exactly once");
    const std::size_t len = estimates[self_id].size();
    for (std::size_t j : neighbor_ids) {
      if (j >= estimates.size()) throw std::out_of_range("neighbor id out of range");
      if (estimates[j].size() != len)
        throw std::invalid_argument("neighbor estimates differ in length");
    }
  }
};

/// Weights for each member of `view` from its distance to the self estimate.
inline CombinationWeights distance_weights(const NeighborhoodView& view,
                                           const WeightingPolicy& policy) {
  const auto& own = view.estimates[view.self_id];
  std::vector<double> alphas;
  alphas.reserve(view.neighbor_ids.size());
  for (std::size_t j : view.neighbor_ids)
    alphas.push_back(alpha(distance(own, view.estimates[j]), policy));
  return combine_weights(alphas);
}

/// sum_k weights[k] * estimates[neighbor_ids[k]]
inline std::vector<double> combine_estimates(const NeighborhoodView& view,
                                             const CombinationWeights& weights) {
  if (weights.size() != view.neighbor_ids.size())
    throw std::invalid_argument("weights do not match neighborhood size");
  std::vector<double> out(view.estimates[view.self_id].size(), 0.0);
  for (std::size_t k = 0; k < view.neighbor_ids.size(); ++k) {
    const auto& x = view.estimates[view.neighbor_ids[k]];
    const double c = weights[k];
    for (std::size_t m = 0; m < out.size(); ++m) out[m] += c * x[m];
  }
  return out;
}

/// Failure inside one node's adapt or combine step.
class DetectionLoopError : public std::runtime_error {
 public:
  DetectionLoopError(std::size_t node, std::size_t iteration, const std::string& stage,
                     const std::string& what)
      : std::runtime_error(stage + " failed at node " + std::to_string(node) + ", iteration " +
                           std::to_string(iteration) + ": " + what),
        node_(node),
        iteration_(iteration) {}

  std::size_t node() const noexcept { return node_; }
  std::size_t iteration() const noexcept { return iteration_; }

 private:
  std::size_t node_;
  std::size_t iteration_;
};

/// Synchronous adapt-then-combine rounds over `g`.
///
///   adapt(i, t, const State& previous) -> State          (temporary)
///   combine(i, t, span<const size_t> neighbors,
///           span<const State> temporaries) -> State      (new estimate)
///
/// For t = 1..T every node adapts from its round t-1 state, then every node
/// combines from the round-t temporaries. Per-node calls inside a round may
/// run on `jobs` threads; adapt must therefore only touch node-owned state.
template <class State, class Adapt, class Combine>
std::vector<State> run_detection_loop(const graph::Graph& g, std::size_t iterations,
                                      std::vector<State> states, Adapt&& adapt,
                                      Combine&& combine, unsigned jobs = 1) {
  if (iterations < 1) throw std::invalid_argument("iterations must be at least 1");
  const std::size_t n = g.size();
  if (states.size() != n) throw std::invalid_argument("one initial state per node required");

  std::vector<std::vector<std::size_t>> hoods(n);
  for (std::size_t i = 0; i < n; ++i) hoods[i] = g.neighbors(i);

  std::vector<State> temporaries(n);
  for (std::size_t t = 1; t <= iterations; ++t) {
    parallel_for(n, jobs, [&](std::size_t i) {
      try {
        temporaries[i] = adapt(i, t, std::as_const(states[i]));
      } catch (const std::exception& e) {
        throw DetectionLoopError(i, t, "adaptation", e.what());
      }
    });
    parallel_for(n, jobs, [&](std::size_t i) {
      try {
        states[i] = combine(i, t, std::span<const std::size_t>(hoods[i]),
                            std::span<const State>(temporaries));
      } catch (const std::exception& e) {
        throw DetectionLoopError(i, t, "combination", e.what());
      }
    });
  }
  return states;
}

}  // namespace coopdetect::detection
