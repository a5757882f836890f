#pragma once

// Random sharing graphs, row normalization, and expected walk counts
// between two nodes of a random graph.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "coopdetect/parallel.hpp"
#include "coopdetect/random.hpp"

namespace coopdetect::graph {

struct GraphSpec {
  std::size_t n_nodes = 10;
  double link_probability = 1.0;

  void validate() const {
    if (n_nodes < 2) throw std::invalid_argument("n_nodes must be at least 2");
    if (!(link_probability >= 0.0 && link_probability <= 1.0))
      throw std::invalid_argument("link_probability must lie in [0, 1]");
  }

  /// Average number of neighbors (excluding self) implied by the spec.
  double avg_neighbors() const { return link_probability * static_cast<double>(n_nodes - 1); }

  friend bool operator==(const GraphSpec&, const GraphSpec&) = default;
};

/// Symmetric adjacency with every node adjacent to itself.
class Graph {
 public:
  /// Graph with only the self-loops set.
  explicit Graph(std::size_t n_nodes) : n_(n_nodes), adj_(n_nodes * n_nodes, 0) {
    if (n_nodes == 0) throw std::invalid_argument("graph needs at least one node");
    for (std::size_t i = 0; i < n_; ++i) adj_[i * n_ + i] = 1;
  }

  static Graph complete(std::size_t n_nodes) {
    Graph g(n_nodes);
    for (auto& a : g.adj_) a = 1;
    return g;
  }

  /// Builds from a row-major boolean matrix; rejects asymmetry or a
  /// missing self-loop.
  static Graph from_adjacency(std::size_t n_nodes, const std::vector<bool>& adjacency) {
    if (adjacency.size() != n_nodes * n_nodes)
      throw std::invalid_argument("adjacency size does not match n_nodes^2");
    Graph g(n_nodes);
    for (std::size_t i = 0; i < n_nodes; ++i) {
      if (!adjacency[i * n_nodes + i])
        throw std::invalid_argument("adjacency diagonal must be all true");
      for (std::size_t j = 0; j < n_nodes; ++j) {
        if (adjacency[i * n_nodes + j] != adjacency[j * n_nodes + i])
          throw std::invalid_argument("adjacency must be symmetric");
        g.adj_[i * n_nodes + j] = adjacency[i * n_nodes + j] ? 1 : 0;
      }
    }
    return g;
  }

  std::size_t size() const noexcept { return n_; }

  bool adjacent(std::size_t i, std::size_t j) const { return adj_[i * n_ + j] != 0; }

  void connect(std::size_t i, std::size_t j) {
    adj_[i * n_ + j] = 1;
    adj_[j * n_ + i] = 1;
  }

  /// Neighborhood of i in ascending id order, i itself included.
  std::vector<std::size_t> neighbors(std::size_t i) const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < n_; ++j)
      if (adjacent(i, j)) out.push_back(j);
    return out;
  }

  std::size_t degree(std::size_t i) const {
    std::size_t d = 0;
    for (std::size_t j = 0; j < n_; ++j) d += adj_[i * n_ + j];
    return d;
  }

  /// Number of undirected edges between distinct nodes.
  std::size_t edge_count() const {
    std::size_t e = 0;
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = i + 1; j < n_; ++j) e += adj_[i * n_ + j];
    return e;
  }

  friend bool operator==(const Graph&, const Graph&) = default;

 private:
  std::size_t n_;
  std::vector<std::uint8_t> adj_;
};

/// Erdos-Renyi draw: each unordered pair independently linked with
/// probability spec.link_probability. Pairs are visited in (i < j)
/// row-major order, one Bernoulli draw each.
template <class URBG>
Graph generate_graph(const GraphSpec& spec, URBG& rng) {
  spec.validate();
  Graph g(spec.n_nodes);
  std::bernoulli_distribution link(spec.link_probability);
  for (std::size_t i = 0; i < spec.n_nodes; ++i)
    for (std::size_t j = i + 1; j < spec.n_nodes; ++j)
      if (link(rng)) g.connect(i, j);
  return g;
}

class RowStochasticMatrix {
 public:
  RowStochasticMatrix(std::size_t n, std::vector<double> weights)
      : n_(n), w_(std::move(weights)) {}

  std::size_t size() const noexcept { return n_; }
  double operator()(std::size_t i, std::size_t j) const { return w_[i * n_ + j]; }

  double row_sum(std::size_t i) const {
    double s = 0.0;
    for (std::size_t j = 0; j < n_; ++j) s += w_[i * n_ + j];
    return s;
  }

 private:
  std::size_t n_;
  std::vector<double> w_;
};

/// Divides each adjacency row by its number of true entries.
inline RowStochasticMatrix row_normalize(const Graph& g) {
  const std::size_t n = g.size();
  std::vector<double> w(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double inv = 1.0 / static_cast<double>(g.degree(i));
    for (std::size_t j = 0; j < n; ++j)
      if (g.adjacent(i, j)) w[i * n + j] = inv;
  }
  return RowStochasticMatrix(n, std::move(w));
}

// ---------------------------------------------------------------------------
// Walk counting
// ---------------------------------------------------------------------------

/// Walk classes between two distinct nodes:
///   NoLoops     - simple paths, no node repeated;
///   NoSelfLoops - nodes may repeat but no step stays put;
///   General     - any step, self-loops included.
enum class PathCase { NoLoops, NoSelfLoops, General };

inline constexpr PathCase kAllPathCases[] = {PathCase::NoLoops, PathCase::NoSelfLoops,
                                             PathCase::General};

inline std::string_view to_string(PathCase c) {
  switch (c) {
    case PathCase::NoLoops: return "no_loops";
    case PathCase::NoSelfLoops: return "no_self_loops";
    case PathCase::General: return "general";
  }
  return "?";
}

inline PathCase path_case_from_string(std::string_view name) {
  for (PathCase c : kAllPathCases)
    if (to_string(c) == name) return c;
  throw std::invalid_argument("unknown path case '" + std::string(name) + "'");
}

struct PathCountQuery {
  PathCase path_case = PathCase::General;
  std::size_t n_nodes = 10;
  double avg_neighbors = 3.0;
  std::size_t length = 1;

  /// Link existence probability M / (N - 1).
  double s() const { return avg_neighbors / static_cast<double>(n_nodes - 1); }
  /// Conditional continuation probability (M - 1) / (N - 2).
  double p() const { return (avg_neighbors - 1.0) / static_cast<double>(n_nodes - 2); }
};

/// P(n, k) = n! / (n - k)!
inline double falling_factorial(std::size_t n, std::size_t k) {
  if (k > n) return 0.0;
  double r = 1.0;
  for (std::size_t i = 0; i < k; ++i) r *= static_cast<double>(n - i);
  return r;
}

/// Closed-form expected number of length-K walks of the given class
/// between two nodes, parameterized by N and the mean neighbor count M.
inline double expected_paths(const PathCountQuery& q) {
  if (q.length < 1) throw std::invalid_argument("path length must be at least 1");
  if (q.n_nodes < 2) throw std::invalid_argument("n_nodes must be at least 2");
  const double s = q.s();
  if (!(s >= 0.0 && s <= 1.0))
    throw std::invalid_argument("avg_neighbors gives s = M/(N-1) outside [0, 1]");
  if (q.length == 1) return s;

  if (q.n_nodes < 3) throw std::invalid_argument("paths longer than 1 need n_nodes >= 3");
  const double p = q.p();
  if (!(p >= 0.0 && p <= 1.0))
    throw std::invalid_argument("avg_neighbors gives p = (M-1)/(N-2) outside [0, 1]");

  const std::size_t k = q.length;
  const double inner = static_cast<double>(q.n_nodes - 2);
  switch (q.path_case) {
    case PathCase::NoLoops:
      return falling_factorial(q.n_nodes - 2, k - 1) * s * std::pow(p, static_cast<double>(k - 1));
    case PathCase::NoSelfLoops:
      return std::pow(inner * s, static_cast<double>(k - 1)) * p;
    case PathCase::General: {
      double total = 0.0;
      for (std::size_t l = 0; l < k; ++l)
        total += std::pow(inner * s, static_cast<double>(k - l - 1)) * p;
      return total;
    }
  }
  return 0.0;
}

namespace detail {

struct WalkCounter {
  const Graph& g;
  std::size_t target;
  PathCase path_case;
  std::vector<std::uint8_t> on_path;

  // Walks of `remaining` steps from `at` that end at target.
  std::uint64_t count(std::size_t at, std::size_t remaining) {
    const std::size_t n = g.size();
    if (remaining == 1) {
      if (!g.adjacent(at, target)) return 0;
      if (path_case == PathCase::NoSelfLoops && at == target) return 0;
      if (path_case == PathCase::NoLoops && on_path[target]) return 0;
      return 1;
    }
    std::uint64_t total = 0;
    for (std::size_t next = 0; next < n; ++next) {
      if (!g.adjacent(at, next)) continue;
      switch (path_case) {
        case PathCase::NoLoops:
          if (on_path[next] || next == target) continue;
          on_path[next] = 1;
          total += count(next, remaining - 1);
          on_path[next] = 0;
          break;
        case PathCase::NoSelfLoops:
          if (next == at) continue;
          total += count(next, remaining - 1);
          break;
        case PathCase::General:
          total += count(next, remaining - 1);
          break;
      }
    }
    return total;
  }
};

}  // namespace detail

/// Exhaustive count of length-K walks of class `path_case` from source to
/// target. Exponential in K; intended for small K.
inline std::uint64_t count_walks(const Graph& g, std::size_t source, std::size_t target,
                                 std::size_t length, PathCase path_case) {
  if (source == target) throw std::invalid_argument("count_walks needs source != target");
  if (source >= g.size() || target >= g.size())
    throw std::out_of_range("count_walks node id out of range");
  if (length < 1) throw std::invalid_argument("walk length must be at least 1");
  detail::WalkCounter counter{g, target, path_case, std::vector<std::uint8_t>(g.size(), 0)};
  counter.on_path[source] = 1;
  return counter.count(source, length);
}

/// Mean of count_walks(0 -> 1) over `trials` independently drawn graphs.
/// Trial t draws its graph from make_stream(seed, t); integer counts are
/// summed exactly, so the result does not depend on `jobs`.
inline double monte_carlo_paths(const GraphSpec& spec, std::size_t length, PathCase path_case,
                                std::size_t trials, std::uint64_t seed, unsigned jobs = 1) {
  spec.validate();
  if (trials < 1) throw std::invalid_argument("trials must be at least 1");
  if (length < 1) throw std::invalid_argument("walk length must be at least 1");

  constexpr std::size_t kChunk = 1024;
  const std::size_t chunks = (trials + kChunk - 1) / kChunk;
  std::vector<std::uint64_t> partial(chunks, 0);
  parallel_for(chunks, jobs, [&](std::size_t c) {
    const std::size_t end = std::min(trials, (c + 1) * kChunk);
    std::uint64_t sum = 0;
    for (std::size_t t = c * kChunk; t < end; ++t) {
      Rng rng = make_stream(seed, t);
      sum += count_walks(generate_graph(spec, rng), 0, 1, length, path_case);
    }
    partial[c] = sum;
  });
  std::uint64_t total = 0;
  for (auto v : partial) total += v;
  return static_cast<double>(total) / static_cast<double>(trials);
}

}  // namespace coopdetect::graph
