// Acceptance run. Prints one PASS/FAIL line per criterion, preceded by
// detail lines, and exits nonzero if any criterion fails.
//
//   acceptance            all criteria
//   acceptance 2 4 8      a subset

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "coopdetect/experiment.hpp"

using namespace coopdetect;
using namespace coopdetect::experiment;

namespace {

// Tolerances and sizes, fixed here.
constexpr std::uint64_t kSeed = 1;

constexpr std::size_t kPathTrials = 100'000;
constexpr double kPathRelTol = 0.15;
constexpr double kPathExactTol = 1e-12;
constexpr double kPathBudgetSec = 120.0;

constexpr std::size_t kDiffusionTrials = 100;
constexpr std::size_t kDiffusionRounds = 2000;
constexpr std::size_t kDiffusionWindow = 200;
constexpr double kDiffusionMarginDb = 10.0;
constexpr double kDiffusionBudgetSec = 300.0;

constexpr std::size_t kSparseRounds = 1500;
constexpr std::size_t kSparseWindow = 150;
constexpr double kSparseMarginDb = 3.0;
constexpr double kSparseBudgetSec = 300.0;

constexpr std::size_t kSuppressionFirstRound = 200;
constexpr double kSuppressionRatio = 0.25;
constexpr double kSuppressionTrialShare = 0.95;

constexpr std::size_t kMarlSeeds = 20;
constexpr std::size_t kMarlEpisodes = 10'000;
constexpr double kMarlGap = 0.10;
constexpr double kMarlBudgetSec = 600.0;
constexpr double kVoteAccuracy = 0.90;

constexpr double kFormulaTol = 1e-12;
constexpr double kFormulaBudgetSec = 1.0;

constexpr unsigned kRerunJobs = 2;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Verdict {
  bool pass;
  std::string detail;
};

std::map<int, Verdict> verdicts;

void detail(const char* fmt, auto... args) {
  std::printf("  ");
  std::printf(fmt, args...);
  std::printf("\n");
  std::fflush(stdout);
}

std::string format(const char* fmt, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

// ---------------------------------------------------------------------------

void criterion_1() {
  PathsParams p;
  p.n_nodes = {6, 10, 20};
  p.link_probabilities = {0.3, 0.5, 1.0};
  p.lengths = {1, 2, 3};
  p.trials = kPathTrials;
  const auto start = Clock::now();
  const auto rows = run_paths_grid(p, kSeed, 1);
  const double elapsed = seconds_since(start);

  std::size_t failing = 0;
  double worst = 0.0;
  for (const auto& r : rows) {
    bool ok;
    if (r.path_case == graph::PathCase::NoLoops && r.link_probability == 1.0)
      ok = std::abs(r.monte_carlo - r.formula) <= kPathExactTol * std::abs(r.formula);
    else
      ok = r.relative_error <= kPathRelTol;
    worst = std::max(worst, r.relative_error);
    if (!ok) {
      ++failing;
      detail("c1 cell %-13s N=%-2zu rho=%.1f K=%zu formula=%.5g monte_carlo=%.5g rel_err=%.3f",
             std::string(graph::to_string(r.path_case)).c_str(), r.n_nodes, r.link_probability,
             r.length, r.formula, r.monte_carlo, r.relative_error);
    }
  }
  const bool fast = elapsed < kPathBudgetSec;
  verdicts[1] = {failing == 0 && fast,
                 format("%zu of %zu cells outside tolerance (rel %.2f, exact at rho=1 for "
                        "no_loops); worst rel err %.3f; %.1f s (budget %.0f s)",
                        failing, rows.size(), kPathRelTol, worst, elapsed, kPathBudgetSec)};
}

// ---------------------------------------------------------------------------

ExperimentConfig fig1_config() {
  ExperimentConfig c;
  c.kind = Kind::Diffusion;
  c.seed = kSeed;
  DiffusionParams p;
  p.lms.graph = {10, 1.0};
  p.lms.signal_length = 100;
  p.lms.sparsity = 0.5;
  p.lms.step_size = 0.001;
  p.lms.adaptation_window = 10;
  p.lms.iterations = kDiffusionRounds;
  p.lms.weighting = {0.015, 8.0};
  p.lms.noise = {0.04, 0, 2.0};
  p.lms.n_simulations = kDiffusionTrials;
  p.steady_state_window = kDiffusionWindow;
  p.suppression_first_round = kSuppressionFirstRound;
  p.suppression_threshold = kSuppressionRatio;
  p.compare_uniform = true;
  c.params = p;
  return c;
}

std::string all_csv(const ResultBundle& b) {
  std::string out;
  for (const auto& [name, table] : b.tables) out += name + "\n" + to_csv(table);
  return out;
}

std::string fig1_csv;

void criteria_2_and_4() {
  const auto start = Clock::now();
  const auto bundle = run(fig1_config());
  const double elapsed = seconds_since(start);
  fig1_csv = all_csv(bundle);

  const auto& m = bundle.summary["metrics"];
  const double soft = m["steady_state_intact_db"].get<double>();
  const double uniform = m["uniform_steady_state_intact_db"].get<double>();
  const double gap = uniform - soft;
  detail("c2 steady-state intact MSD: soft %.2f dB, uniform %.2f dB", soft, uniform);
  verdicts[2] = {gap >= kDiffusionMarginDb && elapsed < kDiffusionBudgetSec,
                 format("soft weighting %.2f dB below uniform (need >= %.1f); %.1f s (budget %.0f s)",
                        gap, kDiffusionMarginDb, elapsed, kDiffusionBudgetSec)};

  const double share = m["suppressed_trial_fraction"].get<double>();
  verdicts[4] = {share >= kSuppressionTrialShare,
                 format("%.0f%% of trials keep the impaired weight below %.2fx uniform after "
                        "round %zu (need >= %.0f%%)",
                        100.0 * share, kSuppressionRatio, kSuppressionFirstRound,
                        100.0 * kSuppressionTrialShare)};
}

void criterion_3() {
  auto c = fig1_config();
  auto& p = std::get<DiffusionParams>(c.params);
  p.lms.graph = {50, 0.1};
  p.lms.weighting = {0.015, 2.0};
  p.lms.iterations = kSparseRounds;
  p.steady_state_window = kSparseWindow;
  const auto start = Clock::now();
  const auto bundle = run(c);
  const double elapsed = seconds_since(start);
  const auto& m = bundle.summary["metrics"];
  const double soft = m["steady_state_intact_db"].get<double>();
  const double uniform = m["uniform_steady_state_intact_db"].get<double>();
  detail("c3 steady-state intact MSD: soft %.2f dB, uniform %.2f dB", soft, uniform);
  verdicts[3] = {uniform - soft >= kSparseMarginDb && elapsed < kSparseBudgetSec,
                 format("soft weighting %.2f dB below uniform (need >= %.1f); %.1f s (budget %.0f s)",
                        uniform - soft, kSparseMarginDb, elapsed, kSparseBudgetSec)};
}

// ---------------------------------------------------------------------------

ExperimentConfig marl_config() {
  ExperimentConfig c;
  c.kind = Kind::Marl;
  c.seed = kSeed;
  MarlParams p;
  auto& s = p.setup;
  s.world = marl::parse_layout(marl::kStandard8x8);
  s.slippery = false;
  s.n_agents = 3;
  s.broken_agent = 2;
  s.voting.corruption.bias = 10.0;
  s.learning.learning_rate = 0.8;
  s.learning.discount = 0.97;
  s.voting.lambda = 0.7;
  s.learning.decay_rate = 0.001;
  s.learning.n_episodes = kMarlEpisodes;
  s.voting.window = 10;
  s.eval_episodes = 1000;
  s.warmup_episodes = 100;
  p.repetitions = kMarlSeeds;
  c.params = p;
  return c;
}

std::string marl_csv;

void criteria_5_and_6() {
  const auto start = Clock::now();
  const auto bundle = run(marl_config());
  const double elapsed = seconds_since(start);
  marl_csv = all_csv(bundle);

  const auto& m = bundle.summary["metrics"];
  const double on = m["success_with_detection"].get<double>();
  const double off = m["success_without_detection"].get<double>();
  const double acc = m["detection_accuracy"].get<double>();
  detail("c5 success rate: with detection %.3f, without %.3f (%zu seeds)", on, off, kMarlSeeds);
  verdicts[5] = {on - off >= kMarlGap && elapsed < kMarlBudgetSec,
                 format("detection gains %.1f points (need >= %.0f); %.1f s (budget %.0f s)",
                        100.0 * (on - off), 100.0 * kMarlGap, elapsed, kMarlBudgetSec)};
  verdicts[6] = {acc > kVoteAccuracy,
                 format("majority vote names the broken agent in %.1f%% of scored voting rounds "
                        "(need > %.0f%%)",
                        100.0 * acc, 100.0 * kVoteAccuracy)};
}

// ---------------------------------------------------------------------------

void criterion_7() {
  const auto start = Clock::now();
  std::vector<std::pair<std::string, bool>> checks;
  auto near = [](double a, double b) { return std::abs(a - b) <= kFormulaTol; };

  {
    marl::LearningParams p;
    checks.emplace_back("epsilon(0) = eps_max", marl::epsilon(0, p) == 1.0);
    checks.emplace_back("epsilon(1000) = 0.001 + 0.999 e^-1",
                        near(marl::epsilon(1000, p), 0.001 + 0.999 * std::exp(-1.0)));
    checks.emplace_back("epsilon(large) -> eps_min", near(marl::epsilon(100'000'000, p), 0.001));
  }
  {
    marl::LearningParams p;
    marl::QTable q(3);
    q.at(0, 0) = 1.0;
    q.at(1, 2) = 0.5;
    checks.emplace_back("q_update hand example = 0.588",
                        near(marl::q_update(q, 0, 0, 0.0, 1, false, p), 0.588));
    marl::QTable t(3);
    p.learning_rate = 1.0;
    checks.emplace_back("q_update terminal, lr 1, r 1 = 1",
                        marl::q_update(t, 0, 0, 1.0, 2, true, p) == 1.0);
    marl::QTable z(3);
    z.at(0, 0) = 0.3;
    p.learning_rate = 0.0;
    checks.emplace_back("q_update lr 0 leaves entry", marl::q_update(z, 0, 0, 1.0, 1, false, p) == 0.3);
  }
  {
    const auto a = marl::adjust_weights(3, 0, 0.7);
    checks.emplace_back("adjust_weights n=3 lambda=0.7",
                        near(a[0], 0.1) && near(a[1], 0.45) && near(a[2], 0.45));
    const auto b = marl::adjust_weights(3, 0, 0.9);
    checks.emplace_back("adjust_weights n=3 lambda=0.9",
                        near(b[0], 0.1 / 3) && near(b[1], 1.45 / 3) && near(b[2], 1.45 / 3));
    const auto c = marl::adjust_weights(4, std::nullopt, 0.7);
    checks.emplace_back("adjust_weights no detection n=4",
                        c[0] == 0.25 && c[1] == 0.25 && c[2] == 0.25 && c[3] == 0.25);
  }
  {
    using detection::alpha;
    checks.emplace_back("alpha e=0 = 1", alpha(7.5, {0.015, 0.0}) == 1.0);
    checks.emplace_back("alpha dist=zeta = 1", near(alpha(0.015, {0.015, 8.0}), 1.0));
    checks.emplace_back("alpha dist=2 zeta=1 e=2 = 4", near(alpha(2.0, {1.0, 2.0}), 4.0));
  }
  {
    using detection::combine_weights;
    const auto u = combine_weights(std::vector<double>(4, 1.0));
    checks.emplace_back("combine_weights equal alphas",
                        near(u[0], 0.25) && near(u[1], 0.25) && near(u[2], 0.25) && near(u[3], 0.25));
    const auto w = combine_weights(std::vector<double>{0.0, 4.0});
    const double z = 1.0 + std::exp(-4.0);
    checks.emplace_back("combine_weights [0, 4]", near(w[0], 1.0 / z) && near(w[1], std::exp(-4.0) / z));
    const auto h = combine_weights(std::vector<double>{0.0, 64.0});
    checks.emplace_back("combine_weights [0, 64]",
                        std::abs(h[0] - 1.0) <= 1e-20 && std::abs(h[1]) <= 1e-20);
  }
  {
    const diffusion::TargetSignal t{{1.0, 2.0}, 1.0};
    checks.emplace_back("msd exact match = -200 dB", diffusion::msd(t.values, t) == -200.0);
    checks.emplace_back("msd deviation 1 = 0 dB", near(diffusion::msd(std::vector<double>{2.0, 2.0}, t), 0.0));
    checks.emplace_back("msd deviation 0.01 = -20 dB", near(diffusion::to_db(0.01), -20.0));
  }
  const double elapsed = seconds_since(start);

  std::size_t failed = 0;
  for (const auto& [name, ok] : checks)
    if (!ok) {
      ++failed;
      detail("c7 check failed: %s", name.c_str());
    }
  verdicts[7] = {failed == 0 && elapsed < kFormulaBudgetSec,
                 format("%zu of %zu tabulated examples pass (tol %.0e); %.3f s", checks.size() - failed,
                        checks.size(), kFormulaTol, elapsed)};
}

// ---------------------------------------------------------------------------

void criterion_8() {
  if (fig1_csv.empty()) criteria_2_and_4();
  if (marl_csv.empty()) criteria_5_and_6();

  auto fig1 = fig1_config();
  fig1.jobs = kRerunJobs;
  const bool diffusion_same = all_csv(run(fig1)) == fig1_csv;
  auto m = marl_config();
  m.jobs = kRerunJobs;
  const bool marl_same = all_csv(run(m)) == marl_csv;
  verdicts[8] = {diffusion_same && marl_same,
                 format("--jobs 1 vs %u: diffusion CSV %s, marl CSV %s", kRerunJobs,
                        diffusion_same ? "identical" : "DIFFERS", marl_same ? "identical" : "DIFFERS")};
}

const std::map<int, std::string> kNames = {
    {1, "path-count formulas vs Monte Carlo"},
    {2, "diffusion detection benefit"},
    {3, "sparse-graph diffusion"},
    {4, "impaired-weight suppression"},
    {5, "MARL detection benefit"},
    {6, "majority-vote accuracy"},
    {7, "formula examples"},
    {8, "determinism across --jobs"},
};

}  // namespace

int main(int argc, char** argv) {
  std::set<int> wanted;
  for (int k = 1; k < argc; ++k) wanted.insert(std::atoi(argv[k]));
  if (wanted.empty())
    for (const auto& [id, _] : kNames) wanted.insert(id);
  auto want = [&](int id) { return wanted.count(id) > 0; };

  if (want(7)) criterion_7();
  if (want(1)) criterion_1();
  if (want(2) || want(4)) criteria_2_and_4();
  if (want(3)) criterion_3();
  if (want(5) || want(6)) criteria_5_and_6();
  if (want(8)) criterion_8();

  std::printf("\n");
  bool all = true;
  for (int id : wanted) {
    const auto it = verdicts.find(id);
    if (it == verdicts.end()) continue;
    const auto& v = it->second;
    all = all && v.pass;
    std::printf("criterion %d %-36s %s  %s\n", id, ("(" + kNames.at(id) + ")").c_str(),
                v.pass ? "PASS" : "FAIL", v.detail.c_str());
  }
  return all ? 0 : 1;
}
