#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "coopdetect/marl.hpp"

using namespace coopdetect;
using namespace coopdetect::marl;

namespace {

const GridWorld& standard() {
  static const GridWorld w = parse_layout(kStandard8x8);
  return w;
}

}  // namespace

TEST(GridWorld, StandardLayout) {
  const auto& w = standard();
  EXPECT_EQ(w.width(), 8u);
  EXPECT_EQ(w.height(), 8u);
  EXPECT_EQ(w.cell(0), Cell::Start);
  EXPECT_EQ(w.cell(63), Cell::Goal);
  EXPECT_EQ(w.cell(w.state_of({2, 3})), Cell::Hole);
  EXPECT_EQ(w.to_layout(), std::string(kStandard8x8));
}

TEST(GridWorld, ParseErrorsNameTheLine) {
  try {
    parse_layout("SFF\nFXF\nFFG\n");
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  EXPECT_THROW(parse_layout("SF\nFFF\n"), std::invalid_argument);
  EXPECT_THROW(parse_layout("SF\nFF\n"), std::invalid_argument);  // no goal
}

TEST(EnvStep, Examples) {
  const auto& w = standard();
  EXPECT_EQ(env_step(w, 0, kRight), (StepResult{1, 0.0, false}));
  EXPECT_EQ(env_step(w, w.state_of({6, 7}), kDown), (StepResult{63, 1.0, true}));
  EXPECT_EQ(env_step(w, w.state_of({7, 6}), kRight), (StepResult{63, 1.0, true}));
  EXPECT_EQ(env_step(w, 0, kLeft), (StepResult{0, 0.0, false}));
  EXPECT_EQ(env_step(w, 0, kUp), (StepResult{0, 0.0, false}));
  // hole at (2,3): entering it ends the episode without reward
  EXPECT_EQ(env_step(w, w.state_of({1, 3}), kDown), (StepResult{w.state_of({2, 3}), 0.0, true}));
  EXPECT_THROW(env_step(w, 63, kLeft), std::logic_error);
}

TEST(EnvStep, SlipperyStaysPerpendicular) {
  const auto& w = standard();
  Rng rng(1);
  const std::size_t s = w.state_of({1, 1});
  for (int k = 0; k < 200; ++k) {
    const auto r = env_step(w, s, kRight, true, rng);
    // right, or up/down; never left
    EXPECT_NE(r.state, w.state_of({1, 0}));
  }
}

TEST(Epsilon, Examples) {
  LearningParams p;
  EXPECT_EQ(epsilon(0, p), p.eps_max);
  EXPECT_NEAR(epsilon(100'000'000, p), p.eps_min, 1e-12);
  EXPECT_NEAR(epsilon(1000, p), 0.001 + 0.999 * std::exp(-1.0), 1e-12);
  EXPECT_NEAR(epsilon(1000, p), 0.3685115, 1e-7);
}

TEST(QUpdate, Examples) {
  LearningParams p;
  QTable q(4);
  q.at(0, 0) = 0.3;
  p.learning_rate = 0.0;
  EXPECT_NEAR(q_update(q, 0, 0, 5.0, 1, false, p), 0.3, 1e-12);

  QTable t(4);
  p.learning_rate = 1.0;
  EXPECT_EQ(q_update(t, 0, 0, 1.0, 3, true, p), 1.0);

  QTable h(4);
  h.at(0, 1) = 1.0;
  h.at(2, 3) = 0.5;
  p.learning_rate = 0.8;
  p.discount = 0.97;
  EXPECT_NEAR(q_update(h, 0, 1, 0.0, 2, false, p), 0.588, 1e-12);
}

TEST(QTable, GreedyLowestIndexOnTies) {
  QTable q(1);
  EXPECT_EQ(q.greedy_action(0), 0u);
  q.at(0, 2) = 1.0;
  q.at(0, 3) = 1.0;
  EXPECT_EQ(q.greedy_action(0), 2u);
}

TEST(Corruption, Examples) {
  Rng rng(2);
  QTable q(64);
  for (std::size_t k = 0; k < q.n_entries(); ++k) q.raw()[k] = 0.01 * static_cast<double>(k);
  EXPECT_EQ(corrupt_shared_q(q, {0.0}, rng), q);

  const auto c = corrupt_shared_q(q, {10.0}, rng);
  for (std::size_t k = 0; k < q.n_entries(); ++k) EXPECT_GE(c.raw()[k], q.raw()[k]);

  double inflation = 0.0;
  const int samples = 10'000;
  QTable one(1);
  for (int k = 0; k < samples; ++k) inflation += corrupt_shared_q(one, {10.0}, rng).at(0, 0);
  EXPECT_NEAR(inflation / samples, 5.0, 0.1);
}

TEST(FakeCandidate, IdenticalTablesGiveNone) {
  QTable own(4, 0.2);
  const std::vector<SharedTable> shared{{0, &own}, {1, &own}, {2, &own}};
  const std::vector<StateAction> visited{{0, 0}, {1, 2}};
  EXPECT_EQ(local_fake_candidate(0, own, shared, visited), std::nullopt);
}

TEST(FakeCandidate, PicksLargestPositiveDivergence) {
  const std::vector<std::pair<std::size_t, double>> scores{{2, 0.5}, {3, -0.2}};
  EXPECT_EQ(pick_candidate(scores), 2u);
  const std::vector<std::pair<std::size_t, double>> negative{{2, -0.5}, {3, -0.2}};
  EXPECT_EQ(pick_candidate(negative), std::nullopt);
}

TEST(FakeCandidate, FindsBiasedNeighborNearConvergence) {
  Rng rng(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> jitter(0.0, 0.01);
  QTable base(64);
  for (double& v : base.raw()) v = u(rng);
  auto honest = [&] {
    QTable t = base;
    for (double& v : t.raw()) v += jitter(rng);
    return t;
  };

  int hits = 0;
  const int windows = 1000;
  for (int w = 0; w < windows; ++w) {
    const QTable own = honest();
    const QTable other = honest();
    const QTable broken = corrupt_shared_q(honest(), {10.0}, rng);
    const std::vector<SharedTable> shared{{0, &own}, {1, &other}, {2, &broken}};
    std::vector<StateAction> visited;
    std::uniform_int_distribution<std::size_t> st(0, 63), ac(0, 3);
    for (int k = 0; k < 10; ++k) visited.push_back({st(rng), ac(rng)});
    if (local_fake_candidate(0, own, shared, visited) == 2u) ++hits;
  }
  EXPECT_GT(hits, 0.95 * windows);
}

TEST(TallyVotes, Examples) {
  using V = std::vector<std::optional<std::size_t>>;
  EXPECT_EQ(tally_votes(V{3, 3, 3}), 3u);
  EXPECT_EQ(tally_votes(V{3, 3, std::nullopt}), 3u);
  EXPECT_EQ(tally_votes(V{1, 2, 3}), std::nullopt);
  EXPECT_EQ(tally_votes(V{1, 1, 2, 2}), std::nullopt);
  EXPECT_EQ(tally_votes(V{std::nullopt, std::nullopt, std::nullopt}), std::nullopt);
  // two of four is not strictly more than half
  EXPECT_EQ(tally_votes(V{1, 1, std::nullopt, std::nullopt}), std::nullopt);
}

TEST(AdjustWeights, Examples) {
  const auto a = adjust_weights(3, 0, 0.7);
  EXPECT_NEAR(a[0], 0.1, 1e-12);
  EXPECT_NEAR(a[1], 0.45, 1e-12);
  EXPECT_NEAR(a[2], 0.45, 1e-12);

  const auto b = adjust_weights(3, 0, 0.9);
  EXPECT_NEAR(b[0], 0.1 / 3, 1e-12);
  EXPECT_NEAR(b[1], 1.45 / 3, 1e-12);
  EXPECT_NEAR(b[2], 1.45 / 3, 1e-12);

  const auto c = adjust_weights(4, std::nullopt, 0.7);
  for (double v : c) EXPECT_EQ(v, 0.25);

  const std::vector<std::size_t> hood{4, 7, 9};
  const auto d = adjust_weights(hood, 9, 0.7);
  EXPECT_NEAR(d[2], 0.1, 1e-12);
  EXPECT_THROW(adjust_weights(hood, 5, 0.7), std::invalid_argument);
}

TEST(AdjustWeights, AlwaysSumsToOne) {
  for (std::size_t n = 2; n < 8; ++n)
    for (double lambda : {0.1, 0.5, 0.7, 0.9, 0.99})
      for (std::size_t pos = 0; pos < n; ++pos)
        EXPECT_NEAR(adjust_weights(n, pos, lambda).sum(), 1.0, 1e-12);
}

TEST(CombineQ, Examples) {
  QTable t(3);
  for (std::size_t k = 0; k < t.n_entries(); ++k) t.raw()[k] = static_cast<double>(k);
  std::vector<QTable> single{t};
  EXPECT_EQ(combine_q(single, CombinationWeights({1.0})), t);

  std::vector<QTable> same{t, t};
  const auto s = combine_q(same, CombinationWeights({0.3, 0.7}));
  for (std::size_t k = 0; k < t.n_entries(); ++k) EXPECT_NEAR(s.raw()[k], t.raw()[k], 1e-12);

  std::vector<QTable> zero_one{QTable(3, 0.0), QTable(3, 1.0)};
  const auto m = combine_q(zero_one, CombinationWeights({0.1, 0.9}));
  for (double v : m.raw()) EXPECT_NEAR(v, 0.9, 1e-12);
}

TEST(CasePresets, Columns) {
  const auto c1 = case_preset(1);
  EXPECT_EQ(c1.learning.learning_rate, 0.8);
  EXPECT_EQ(c1.learning.discount, 0.97);
  EXPECT_EQ(c1.learning.n_episodes, 1'000'000u);
  EXPECT_EQ(c1.learning.max_steps, 1000u);
  EXPECT_EQ(c1.lambda, 0.7);
  EXPECT_EQ(case_preset(2).lambda, 0.9);
  EXPECT_EQ(case_preset(2).learning.max_steps, 10000u);
  EXPECT_EQ(case_preset(3).learning.learning_rate, 0.7);
  EXPECT_THROW(case_preset(4), std::invalid_argument);
}

TEST(SingleAgent, LearnsTheDeterministicGrid) {
  LearningParams p;
  p.n_episodes = 10'000;
  const QTable q = train_single_agent(standard(), 0, p, 1e-3, false, 5);
  Rng rng(0);
  EXPECT_TRUE(greedy_reaches_goal(standard(), q, 0, p.max_steps, false, rng));
}

namespace {

MarlSetup short_setup(double bias) {
  MarlSetup s;
  s.learning.n_episodes = 3000;
  s.learning.decay_rate = 0.003;
  s.voting.corruption.bias = bias;
  s.eval_episodes = 50;
  return s;
}

}  // namespace

TEST(RunMarl, RepeatableForFixedSeed) {
  auto s = short_setup(10.0);
  s.learning.n_episodes = 300;
  s.record_votes = true;
  const auto a = run_marl(s, true, 12);
  const auto b = run_marl(s, true, 12);
  EXPECT_EQ(a.eval_successes, b.eval_successes);
  EXPECT_EQ(a.correct_votes, b.correct_votes);
  EXPECT_EQ(a.training_steps, b.training_steps);
  ASSERT_EQ(a.votes.size(), b.votes.size());
  for (std::size_t k = 0; k < a.votes.size(); ++k) EXPECT_EQ(a.votes[k].detected, b.votes[k].detected);
}

TEST(RunMarl, NoCorruptionMeansNoDetectionPenalty) {
  const auto s = short_setup(0.0);
  for (std::uint64_t seed : {1u, 2u}) {
    const auto on = run_marl(s, true, seed);
    const auto off = run_marl(s, false, seed);
    EXPECT_EQ(on.success_rate(), 1.0);
    EXPECT_EQ(off.success_rate(), 1.0);
  }
}

TEST(RunMarl, VotingRoundsFollowTheWindow) {
  auto s = short_setup(10.0);
  s.learning.n_episodes = 200;
  const auto r = run_marl(s, true, 4);
  EXPECT_EQ(r.voting_rounds, r.training_steps / s.voting.window);
}

TEST(MarlSetup, Validation) {
  MarlSetup s;
  EXPECT_NO_THROW(s.validate());
  s.broken_agent = 3;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = MarlSetup{};
  s.starts = {{2, 3}};
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = MarlSetup{};
  s.voting.lambda = 1.0;
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(Epsilon, StrictlyDecreasingAndBounded) {
  LearningParams p;
  double previous = epsilon(0, p);
  for (std::size_t step = 1; step < 20'000; step += 7) {
    const double e = epsilon(step, p);
    EXPECT_LT(e, previous);
    EXPECT_GE(e, p.eps_min);
    EXPECT_LE(e, p.eps_max);
    previous = e;
  }
}

TEST(CombineQ, StaysWithinInputBounds) {
  Rng rng(6);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<QTable> tables(3, QTable(5));
    for (auto& t : tables)
      for (double& v : t.raw()) v = u(rng);
    const auto w = adjust_weights(3, trial % 3, 0.7);
    const auto out = combine_q(tables, w);
    for (std::size_t k = 0; k < out.n_entries(); ++k) {
      const double lo = std::min({tables[0].raw()[k], tables[1].raw()[k], tables[2].raw()[k]});
      const double hi = std::max({tables[0].raw()[k], tables[1].raw()[k], tables[2].raw()[k]});
      EXPECT_GE(out.raw()[k], lo - 1e-12);
      EXPECT_LE(out.raw()[k], hi + 1e-12);
    }
  }
}

TEST(TallyVotes, WinnerAlwaysComesFromTheBallots) {
  Rng rng(8);
  std::uniform_int_distribution<int> pick(-1, 4);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<std::optional<std::size_t>> votes;
    for (int k = 0; k < 5; ++k) {
      const int v = pick(rng);
      votes.push_back(v < 0 ? std::nullopt : std::optional<std::size_t>(v));
    }
    const auto w = tally_votes(votes);
    if (w) {
      EXPECT_NE(std::find(votes.begin(), votes.end(), w), votes.end());
    }
  }
}

TEST(RunMarl, CaseTwoScaledDownDetectionHelps) {
  MarlSetup s;
  const auto preset = case_preset(2);
  s.learning = preset.learning;
  s.voting.lambda = preset.lambda;
  s.learning.n_episodes = 10'000;
  s.eval_episodes = 100;
  double on = 0.0;
  double off = 0.0;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    on += run_marl(s, true, seed).success_rate();
    off += run_marl(s, false, seed).success_rate();
  }
  EXPECT_GT(on, off);
}
