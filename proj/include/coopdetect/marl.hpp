#pragma once

// Multi-agent tabular Q-learning on a frozen-lake grid, with periodic
// Q-table sharing. One agent is broken: it learns normally but broadcasts
// an upward-biased table. With detection on, agents nominate the neighbor
// whose table sits furthest above their own, pool the nominations by
// majority vote and shrink the winner's combination weight by lambda.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "coopdetect/detection.hpp"
#include "coopdetect/random.hpp"

namespace coopdetect::marl {

using detection::CombinationWeights;

enum class Cell : std::uint8_t { Start, Frozen, Hole, Goal };

enum Action : std::uint8_t { kLeft = 0, kDown = 1, kRight = 2, kUp = 3 };
inline constexpr std::size_t kActions = 4;

inline constexpr std::string_view kStandard8x8 =
    "SFFFFFFF\n"
    "FFFFFFFF\n"
    "FFFHFFFF\n"
    "FFFFFHFF\n"
    "FFFHFFFF\n"
    "FHHFFFHF\n"
    "FHFFHFHF\n"
    "FFFHFFFG\n";

struct Position {
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const Position&, const Position&) = default;
};

class GridWorld {
 public:
  GridWorld(std::size_t width, std::size_t height, std::vector<Cell> cells)
      : width_(width), height_(height), cells_(std::move(cells)) {
    if (width_ == 0 || height_ == 0) throw std::invalid_argument("grid must be non-empty");
    if (cells_.size() != width_ * height_)
      throw std::invalid_argument("cell count does not match grid dimensions");
    if (std::count(cells_.begin(), cells_.end(), Cell::Goal) != 1)
      throw std::invalid_argument("grid needs exactly one goal cell");
  }

  std::size_t width() const noexcept { return width_; }
  std::size_t height() const noexcept { return height_; }
  std::size_t n_states() const noexcept { return cells_.size(); }
  Cell cell(std::size_t state) const { return cells_.at(state); }
  std::size_t state_of(Position p) const { return p.row * width_ + p.col; }
  Position position_of(std::size_t state) const { return {state / width_, state % width_}; }

  bool terminal(std::size_t state) const {
    const Cell c = cell(state);
    return c == Cell::Hole || c == Cell::Goal;
  }

  /// S cells in row-major order.
  std::vector<std::size_t> start_cells() const {
    std::vector<std::size_t> out;
    for (std::size_t s = 0; s < cells_.size(); ++s)
      if (cells_[s] == Cell::Start) out.push_back(s);
    return out;
  }

  std::string to_layout() const {
    std::string out;
    for (std::size_t r = 0; r < height_; ++r) {
      for (std::size_t c = 0; c < width_; ++c) {
        switch (cells_[r * width_ + c]) {
          case Cell::Start: out += 'S'; break;
          case Cell::Frozen: out += 'F'; break;
          case Cell::Hole: out += 'H'; break;
          case Cell::Goal: out += 'G'; break;
        }
      }
      out += '\n';
    }
    return out;
  }

  friend bool operator==(const GridWorld&, const GridWorld&) = default;

 private:
  std::size_t width_;
  std::size_t height_;
  std::vector<Cell> cells_;
};

/// Parses one row per line using S/F/H/G. Blank lines and trailing
/// whitespace are ignored.
inline GridWorld parse_layout(std::string_view text) {
  std::vector<Cell> cells;
  std::size_t width = 0;
  std::size_t height = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
    if (line.empty()) continue;
    if (width == 0) width = line.size();
    if (line.size() != width)
      throw std::invalid_argument("layout line " + std::to_string(line_no) +
                                  " has a different width");
    for (char ch : line) {
      switch (ch) {
        case 'S': cells.push_back(Cell::Start); break;
        case 'F': cells.push_back(Cell::Frozen); break;
        case 'H': cells.push_back(Cell::Hole); break;
        case 'G': cells.push_back(Cell::Goal); break;
        default:
          throw std::invalid_argument("layout line " + std::to_string(line_no) +
                                      ": unknown cell '" + std::string(1, ch) + "'");
      }
    }
    ++height;
  }
  return GridWorld(width, height, std::move(cells));
}

struct StepResult {
  std::size_t state;
  double reward;
  bool done;
  friend bool operator==(const StepResult&, const StepResult&) = default;
};

/// Deterministic move, clipped at the walls. Reward 1 on entering the
/// goal; the episode ends on the goal or a hole.
inline StepResult env_step(const GridWorld& world, std::size_t state, std::size_t action) {
  if (state >= world.n_states()) throw std::out_of_range("state outside the grid");
  if (world.terminal(state)) throw std::logic_error("cannot step from a terminal state");
  if (action >= kActions) throw std::out_of_range("action must be in [0, 4)");
  Position p = world.position_of(state);
  switch (action) {
    case kLeft: if (p.col > 0) --p.col; break;
    case kDown: if (p.row + 1 < world.height()) ++p.row; break;
    case kRight: if (p.col + 1 < world.width()) ++p.col; break;
    case kUp: if (p.row > 0) --p.row; break;
  }
  const std::size_t next = world.state_of(p);
  const Cell c = world.cell(next);
  return {next, c == Cell::Goal ? 1.0 : 0.0, c == Cell::Goal || c == Cell::Hole};
}

/// Slippery variant: the intended action or one of its two perpendicular
/// actions, each with probability 1/3.
template <class URBG>
StepResult env_step(const GridWorld& world, std::size_t state, std::size_t action, bool slippery,
                    URBG& rng) {
  if (!slippery) return env_step(world, state, action);
  if (action >= kActions) throw std::out_of_range("action must be in [0, 4)");
  std::uniform_int_distribution<int> slip(-1, 1);
  const auto actual = static_cast<std::size_t>((static_cast<int>(action) + slip(rng) + 4) % 4);
  return env_step(world, state, actual);
}

class QTable {
 public:
  QTable() = default;
  explicit QTable(std::size_t n_states, double fill = 0.0)
      : n_states_(n_states), q_(n_states * kActions, fill) {}

  std::size_t n_states() const noexcept { return n_states_; }
  std::size_t n_entries() const noexcept { return q_.size(); }

  double& at(std::size_t s, std::size_t a) { return q_[s * kActions + a]; }
  double at(std::size_t s, std::size_t a) const { return q_[s * kActions + a]; }
  std::span<double> raw() noexcept { return q_; }
  std::span<const double> raw() const noexcept { return q_; }

  /// argmax over actions, lowest index on ties.
  std::size_t greedy_action(std::size_t s) const {
    std::size_t best = 0;
    for (std::size_t a = 1; a < kActions; ++a)
      if (at(s, a) > at(s, best)) best = a;
    return best;
  }

  double max_value(std::size_t s) const { return at(s, greedy_action(s)); }

  friend bool operator==(const QTable&, const QTable&) = default;

 private:
  std::size_t n_states_ = 0;
  std::vector<double> q_;
};

template <class URBG>
std::size_t epsilon_greedy(const QTable& q, std::size_t s, double eps, URBG& rng) {
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  if (coin(rng) < eps) {
    std::uniform_int_distribution<std::size_t> pick(0, kActions - 1);
    return pick(rng);
  }
  return q.greedy_action(s);
}

struct LearningParams {
  double learning_rate = 0.8;
  double discount = 0.97;
  double eps_min = 0.001;
  double eps_max = 1.0;
  double decay_rate = 0.001;
  std::size_t max_steps = 1000;
  std::size_t n_episodes = 1'000'000;

  void validate() const {
    if (!(learning_rate > 0.0 && learning_rate <= 1.0))
      throw std::invalid_argument("learning_rate must lie in (0, 1]");
    if (!(discount >= 0.0 && discount < 1.0))
      throw std::invalid_argument("discount must lie in [0, 1)");
    if (!(eps_min >= 0.0 && eps_min <= 1.0)) throw std::invalid_argument("eps_min must lie in [0, 1]");
    if (!(eps_max >= 0.0 && eps_max <= 1.0)) throw std::invalid_argument("eps_max must lie in [0, 1]");
    if (eps_min > eps_max) throw std::invalid_argument("eps_min must not exceed eps_max");
    if (!(decay_rate > 0.0) || !std::isfinite(decay_rate))
      throw std::invalid_argument("decay_rate must be > 0");
    if (max_steps < 1) throw std::invalid_argument("max_steps must be >= 1");
    if (n_episodes < 1) throw std::invalid_argument("n_episodes must be >= 1");
  }

  friend bool operator==(const LearningParams&, const LearningParams&) = default;
};

/// eps_min + (eps_max - eps_min) * exp(-step * decay_rate)
inline double epsilon(std::size_t step, const LearningParams& p) {
  return p.eps_min + (p.eps_max - p.eps_min) * std::exp(-static_cast<double>(step) * p.decay_rate);
}

/// Q(s,a) <- (1 - lr) Q(s,a) + lr (r + discount * max_a' Q(s', a')), with the
/// max term dropped when s' is terminal. Returns the new entry.
inline double q_update(QTable& q, std::size_t s, std::size_t a, double reward, std::size_t s_next,
                       bool terminal, const LearningParams& p) {
  const double future = terminal ? 0.0 : q.max_value(s_next);
  double& entry = q.at(s, a);
  entry = (1.0 - p.learning_rate) * entry + p.learning_rate * (reward + p.discount * future);
  return entry;
}

/// Broken agent's broadcast: every entry inflated by U[0, bias].
struct CorruptionModel {
  double bias = 10.0;
  friend bool operator==(const CorruptionModel&, const CorruptionModel&) = default;
};

template <class URBG>
QTable corrupt_shared_q(const QTable& q, const CorruptionModel& model, URBG& rng) {
  QTable out = q;
  if (model.bias == 0.0) return out;
  std::uniform_real_distribution<double> noise(0.0, model.bias);
  for (double& v : out.raw()) v += noise(rng);
  return out;
}

/// How Q_j - Q_i is reduced to a scalar for the nomination test.
enum class Divergence {
  VisitedSum,  ///< summed over the (s, a) pairs the evaluator visited this window
  FullTable,   ///< summed over every entry
};

inline std::string_view to_string(Divergence d) {
  return d == Divergence::VisitedSum ? "visited_sum" : "full_table";
}

inline Divergence divergence_from_string(std::string_view name) {
  if (name == "visited_sum") return Divergence::VisitedSum;
  if (name == "full_table") return Divergence::FullTable;
  throw std::invalid_argument("unknown divergence '" + std::string(name) + "'");
}

struct StateAction {
  std::size_t state;
  std::size_t action;
  friend auto operator<=>(const StateAction&, const StateAction&) = default;
};

inline double divergence(const QTable& own, const QTable& other,
                         std::span<const StateAction> visited, Divergence mode) {
  double d = 0.0;
  if (mode == Divergence::FullTable) {
    for (std::size_t k = 0; k < own.n_entries(); ++k) d += other.raw()[k] - own.raw()[k];
  } else {
    for (const auto& sa : visited) d += other.at(sa.state, sa.action) - own.at(sa.state, sa.action);
  }
  return d;
}

/// argmax of the scores if strictly positive, else none. Earlier entries
/// win ties.
inline std::optional<std::size_t> pick_candidate(
    std::span<const std::pair<std::size_t, double>> scores) {
  std::optional<std::size_t> best;
  double best_score = 0.0;
  for (const auto& [id, score] : scores) {
    if (score > best_score) {
      best = id;
      best_score = score;
    }
  }
  return best;
}

struct SharedTable {
  std::size_t id;
  const QTable* table;
};

/// Agent `self`'s own nomination from one window of experience.
inline std::optional<std::size_t> local_fake_candidate(std::size_t self, const QTable& own,
                                                       std::span<const SharedTable> neighbors,
                                                       std::span<const StateAction> visited,
                                                       Divergence mode = Divergence::VisitedSum) {
  std::vector<std::pair<std::size_t, double>> scores;
  scores.reserve(neighbors.size());
  for (const auto& nb : neighbors) {
    if (nb.id == self) continue;
    scores.emplace_back(nb.id, divergence(own, *nb.table, visited, mode));
  }
  return pick_candidate(scores);
}

/// Majority vote over one ballot per neighborhood member (empty ballots
/// count as cast). The most named id wins only with strictly more than
/// half of all ballots.
inline std::optional<std::size_t> tally_votes(std::span<const std::optional<std::size_t>> votes) {
  std::vector<std::pair<std::size_t, std::size_t>> counts;  // (id, count)
  for (const auto& v : votes) {
    if (!v) continue;
    auto it = std::find_if(counts.begin(), counts.end(), [&](const auto& c) { return c.first == *v; });
    if (it == counts.end())
      counts.emplace_back(*v, 1);
    else
      ++it->second;
  }
  std::optional<std::size_t> winner;
  std::size_t top = 0;
  bool tied = false;
  for (const auto& [id, count] : counts) {
    if (count > top) {
      winner = id;
      top = count;
      tied = false;
    } else if (count == top) {
      tied = true;
    }
  }
  if (!winner || tied) return std::nullopt;
  if (2 * top <= votes.size()) return std::nullopt;
  return winner;
}

/// Weights for an n-member neighborhood: the detected member gets
/// (1 - lambda) / n, everyone else (1 + lambda / (n - 1)) / n.
inline CombinationWeights adjust_weights(std::size_t n, std::optional<std::size_t> detected_position,
                                         double lambda) {
  if (n == 0) throw std::invalid_argument("adjust_weights: empty neighborhood");
  if (!detected_position) return CombinationWeights::uniform(n);
  if (!(lambda > 0.0 && lambda < 1.0)) throw std::invalid_argument("lambda must lie in (0, 1)");
  if (n < 2) throw std::invalid_argument("adjust_weights: cannot redistribute with one member");
  if (*detected_position >= n) throw std::out_of_range("detected member outside neighborhood");
  const double size = static_cast<double>(n);
  std::vector<double> w(n, (1.0 + lambda / (size - 1.0)) / size);
  w[*detected_position] = (1.0 - lambda) / size;
  return CombinationWeights(std::move(w));
}

/// Same, with the detected agent given by id within `neighborhood`.
inline CombinationWeights adjust_weights(std::span<const std::size_t> neighborhood,
                                         std::optional<std::size_t> detected, double lambda) {
  if (!detected) return adjust_weights(neighborhood.size(), std::nullopt, lambda);
  auto it = std::find(neighborhood.begin(), neighborhood.end(), *detected);
  if (it == neighborhood.end()) throw std::invalid_argument("detected agent is not a neighbor");
  return adjust_weights(neighborhood.size(),
                        static_cast<std::size_t>(it - neighborhood.begin()), lambda);
}

/// Entrywise sum_l weights[l] * tables[l].
inline QTable combine_q(std::span<const QTable* const> tables, const CombinationWeights& weights) {
  if (tables.empty() || tables.size() != weights.size())
    throw std::invalid_argument("combine_q: tables and weights disagree in count");
  const std::size_t n_states = tables.front()->n_states();
  for (const QTable* t : tables)
    if (t->n_states() != n_states) throw std::invalid_argument("combine_q: table shape mismatch");
  QTable out(n_states);
  auto dst = out.raw();
  for (std::size_t l = 0; l < tables.size(); ++l) {
    const auto src = tables[l]->raw();
    const double c = weights[l];
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += c * src[k];
  }
  return out;
}

inline QTable combine_q(std::span<const QTable> tables, const CombinationWeights& weights) {
  std::vector<const QTable*> ptrs;
  for (const auto& t : tables) ptrs.push_back(&t);
  return combine_q(std::span<const QTable* const>(ptrs), weights);
}

/// Which entries an agent overwrites with the combined value.
enum class CombineScope {
  VisitedEntries,  ///< the (s, a) pairs the agent updated during the window
  WholeTable,
};

struct VotingConfig {
  std::size_t window = 10;
  CombineScope scope = CombineScope::VisitedEntries;
  double lambda = 0.7;
  CorruptionModel corruption{};
  Divergence divergence = Divergence::VisitedSum;

  void validate() const {
    if (window < 1) throw std::invalid_argument("window must be >= 1");
    if (!(lambda > 0.0 && lambda < 1.0)) throw std::invalid_argument("lambda must lie in (0, 1)");
    if (!(corruption.bias >= 0.0) || !std::isfinite(corruption.bias))
      throw std::invalid_argument("bias must be a finite value >= 0");
  }

  friend bool operator==(const VotingConfig&, const VotingConfig&) = default;
};

/// Hyperparameter columns of the three reported MARL cases (1-based).
struct CasePreset {
  LearningParams learning;
  double lambda;
};

inline CasePreset case_preset(int which) {
  LearningParams p;
  switch (which) {
    case 1: p.n_episodes = 1'000'000; p.max_steps = 1000; p.learning_rate = 0.8; return {p, 0.7};
    case 2: p.n_episodes = 100'000; p.max_steps = 10000; p.learning_rate = 0.8; return {p, 0.9};
    case 3: p.n_episodes = 1'000'000; p.max_steps = 1000; p.learning_rate = 0.7; return {p, 0.7};
    default: throw std::invalid_argument("case must be 1, 2 or 3");
  }
}

/// Default agent start cells on the 8x8 map: corners other than the goal.
inline std::vector<Position> default_starts() { return {{0, 0}, {0, 7}, {7, 0}}; }

struct MarlSetup {
  GridWorld world = parse_layout(kStandard8x8);
  /// Start of agent a is starts[a % starts.size()].
  std::vector<Position> starts = default_starts();
  bool slippery = false;
  LearningParams learning{};
  VotingConfig voting{};
  std::size_t n_agents = 3;
  std::size_t broken_agent = 2;
  std::size_t eval_episodes = 1000;
  /// Tables start as i.i.d. U[0, q_init_scale] so the untrained greedy
  /// policy is random rather than stuck on the lowest-index action.
  double q_init_scale = 1e-3;
  /// Voting rounds before this episode are not scored.
  std::size_t warmup_episodes = 100;
  bool record_votes = false;

  void validate() const {
    learning.validate();
    voting.validate();
    if (n_agents < 2) throw std::invalid_argument("n_agents must be >= 2");
    if (broken_agent >= n_agents) throw std::invalid_argument("broken_agent is not an agent");
    if (starts.empty()) throw std::invalid_argument("starts: at least one start cell is required");
    for (const auto& p : starts) {
      if (p.row >= world.height() || p.col >= world.width())
        throw std::invalid_argument("starts: cell outside the grid");
      if (world.terminal(world.state_of(p)))
        throw std::invalid_argument("starts: cell must not be a hole or the goal");
    }
    if (eval_episodes < 1) throw std::invalid_argument("eval_episodes must be >= 1");
    if (!(q_init_scale >= 0.0) || !std::isfinite(q_init_scale))
      throw std::invalid_argument("q_init_scale must be a finite value >= 0");
  }

  friend bool operator==(const MarlSetup&, const MarlSetup&) = default;

  std::size_t start_state(std::size_t agent) const {
    return world.state_of(starts[agent % starts.size()]);
  }
};

/// One voting round as seen by every agent; -1 encodes "none".
struct VoteRecord {
  std::uint32_t episode;
  std::vector<std::int32_t> detected;
};

struct RunStats {
  bool detection = false;
  std::size_t eval_episodes = 0;
  std::size_t eval_successes = 0;
  /// (voting round, intact agent) pairs scored after warm-up
  std::size_t scored_votes = 0;
  std::size_t correct_votes = 0;
  std::size_t voting_rounds = 0;
  std::uint64_t training_steps = 0;
  std::vector<VoteRecord> votes;

  double success_rate() const {
    return eval_episodes ? static_cast<double>(eval_successes) / static_cast<double>(eval_episodes)
                         : 0.0;
  }
  double detection_accuracy() const {
    return scored_votes ? static_cast<double>(correct_votes) / static_cast<double>(scored_votes)
                        : 0.0;
  }
};

/// Greedy rollout; true if the goal is reached within max_steps.
template <class URBG>
bool greedy_reaches_goal(const GridWorld& world, const QTable& q, std::size_t start,
                         std::size_t max_steps, bool slippery, URBG& rng) {
  std::size_t s = start;
  for (std::size_t step = 0; step < max_steps; ++step) {
    const StepResult r = env_step(world, s, q.greedy_action(s), slippery, rng);
    if (r.done) return r.reward > 0.0;
    s = r.state;
  }
  return false;
}

template <class URBG>
QTable initial_table(std::size_t n_states, double scale, URBG& rng) {
  QTable q(n_states);
  if (scale <= 0.0) return q;
  std::uniform_real_distribution<double> init(0.0, scale);
  for (double& v : q.raw()) v = init(rng);
  return q;
}

/// Plain epsilon-greedy Q-learning of one agent with no sharing. The
/// exploration rate follows epsilon(episode).
inline QTable train_single_agent(const GridWorld& world, std::size_t start,
                                 const LearningParams& lp, double q_init_scale, bool slippery,
                                 std::uint64_t seed) {
  lp.validate();
  Rng rng = make_stream(seed, 1);
  QTable q = initial_table(world.n_states(), q_init_scale, rng);
  for (std::size_t episode = 0; episode < lp.n_episodes; ++episode) {
    const double eps = epsilon(episode, lp);
    std::size_t s = start;
    for (std::size_t step = 0; step < lp.max_steps; ++step) {
      const std::size_t act = epsilon_greedy(q, s, eps, rng);
      const StepResult r = env_step(world, s, act, slippery, rng);
      q_update(q, s, act, r.reward, r.state, r.done, lp);
      if (r.done) break;
      s = r.state;
    }
  }
  return q;
}

/// Trains `n_agents` fully connected Q-learners and evaluates them.
///
/// Agents act in lockstep, each in its own copy of the world. Every
/// `voting.window` lockstep steps (counted across episode boundaries) the
/// agents share tables: with detection, each agent nominates a suspect from
/// its window visits, the nominations are pooled by majority vote, and the
/// winner's weight is cut by lambda; without detection the shared tables are
/// averaged uniformly. An agent keeps its own table for itself and combines
/// it with the others' broadcasts.
///
/// Streams: corruption from make_stream(seed, 0), agent a explores with
/// make_stream(seed, a + 1), evaluation slips use make_stream(seed, n_agents + 1).
inline RunStats run_marl(const MarlSetup& setup, bool detection_on, std::uint64_t seed) {
  setup.validate();
  const std::size_t n = setup.n_agents;
  const std::size_t broken = setup.broken_agent;
  const LearningParams& lp = setup.learning;

  Rng corruption_rng = make_stream(seed, 0);
  std::vector<Rng> agent_rng;
  for (std::size_t a = 0; a < n; ++a) agent_rng.push_back(make_stream(seed, a + 1));

  std::vector<QTable> q;
  for (std::size_t a = 0; a < n; ++a)
    q.push_back(initial_table(setup.world.n_states(), setup.q_init_scale, agent_rng[a]));
  std::vector<std::size_t> hood(n);
  for (std::size_t a = 0; a < n; ++a) hood[a] = a;

  std::vector<std::vector<StateAction>> visits(n);
  std::vector<std::size_t> state(n);
  std::vector<bool> done(n);
  std::size_t window_clock = 0;

  RunStats stats;
  stats.detection = detection_on;

  auto share = [&](std::size_t episode) {
    ++stats.voting_rounds;
    for (auto& v : visits) {
      std::sort(v.begin(), v.end());
      v.erase(std::unique(v.begin(), v.end()), v.end());
    }
    std::vector<QTable> broadcast = q;
    broadcast[broken] = corrupt_shared_q(q[broken], setup.voting.corruption, corruption_rng);

    std::vector<std::optional<std::size_t>> verdict(n);
    if (detection_on) {
      std::vector<SharedTable> shared;
      for (std::size_t j = 0; j < n; ++j) shared.push_back({j, &broadcast[j]});
      std::vector<std::optional<std::size_t>> nominations(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto& v = visits[i];
        nominations[i] = local_fake_candidate(i, q[i], shared, v, setup.voting.divergence);
      }
      // Fully connected: every agent sees every nomination, its own included.
      for (std::size_t i = 0; i < n; ++i) verdict[i] = tally_votes(nominations);

      if (episode >= setup.warmup_episodes) {
        for (std::size_t i = 0; i < n; ++i) {
          if (i == broken) continue;
          ++stats.scored_votes;
          if (verdict[i] == broken) ++stats.correct_votes;
        }
      }
      if (setup.record_votes) {
        VoteRecord rec{static_cast<std::uint32_t>(episode), {}};
        for (const auto& v : verdict) rec.detected.push_back(v ? static_cast<std::int32_t>(*v) : -1);
        stats.votes.push_back(std::move(rec));
      }
    }

    std::vector<QTable> next(n);
    std::vector<const QTable*> sources(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t l = 0; l < n; ++l) sources[l] = (l == i) ? &q[i] : &broadcast[l];
      const CombinationWeights w = detection_on
                                       ? adjust_weights(hood, verdict[i], setup.voting.lambda)
                                       : CombinationWeights::uniform(n);
      if (setup.voting.scope == CombineScope::WholeTable) {
        next[i] = combine_q(sources, w);
      } else {
        next[i] = q[i];
        for (const auto& sa : visits[i]) {
          double v = 0.0;
          for (std::size_t l = 0; l < n; ++l) v += w[l] * sources[l]->at(sa.state, sa.action);
          next[i].at(sa.state, sa.action) = v;
        }
      }
    }
    q = std::move(next);
    for (auto& v : visits) v.clear();
  };

  for (std::size_t episode = 0; episode < lp.n_episodes; ++episode) {
    const double eps = epsilon(episode, lp);
    for (std::size_t a = 0; a < n; ++a) {
      state[a] = setup.start_state(a);
      done[a] = false;
    }
    for (std::size_t step = 0; step < lp.max_steps; ++step) {
      bool any_active = false;
      for (std::size_t a = 0; a < n; ++a) {
        if (done[a]) continue;
        any_active = true;
        const std::size_t s = state[a];
        const std::size_t act = epsilon_greedy(q[a], s, eps, agent_rng[a]);
        const StepResult r = env_step(setup.world, s, act, setup.slippery, agent_rng[a]);
        q_update(q[a], s, act, r.reward, r.state, r.done, lp);
        visits[a].push_back({s, act});
        state[a] = r.state;
        done[a] = r.done;
      }
      if (!any_active) break;
      ++stats.training_steps;
      if (++window_clock == setup.voting.window) {
        window_clock = 0;
        share(episode);
      }
      if (std::all_of(done.begin(), done.end(), [](bool d) { return d; })) break;
    }
  }

  Rng eval_rng = make_stream(seed, n + 1);
  stats.eval_episodes = setup.eval_episodes;
  for (std::size_t e = 0; e < setup.eval_episodes; ++e) {
    bool success = false;
    for (std::size_t a = 0; a < n; ++a) {
      if (a == broken) continue;
      // every rollout runs so the slip stream advances the same way each time
      if (greedy_reaches_goal(setup.world, q[a], setup.start_state(a), lp.max_steps,
                              setup.slippery, eval_rng))
        success = true;
    }
    if (success) ++stats.eval_successes;
  }
  return stats;
}

}  // namespace coopdetect::marl
