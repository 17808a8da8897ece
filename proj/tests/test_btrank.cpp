#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <sstream>

#include "dualharm/btrank.hpp"

using namespace dualharm::bt;

namespace {

PairwiseTally matrix(std::vector<std::string> names, std::vector<std::vector<std::int64_t>> wins) {
  return PairwiseTally{std::move(names), std::move(wins)};
}

const std::vector<std::string> kTableMethods{"DPH", "E2STN", "SANet", "AdaAttN", "StyTr2", "PHDNet"};
const std::vector<double> kTableScores{0.555, -1.811, -0.168, 0.029, 0.343, 1.052};

}  // namespace

TEST_CASE("two methods with a 3:1 record differ by ln 3", "[btrank]") {
  auto s = fit(matrix({"a", "b"}, {{0, 3}, {1, 0}}));
  CHECK(s.scores[0] - s.scores[1] == Catch::Approx(std::log(3.0)).margin(1e-6));
  CHECK(s.scores[0] + s.scores[1] == Catch::Approx(0).margin(1e-12));
}

TEST_CASE("symmetric tallies give zero scores", "[btrank]") {
  auto s = fit(matrix({"a", "b", "c"}, {{0, 5, 2}, {5, 0, 7}, {2, 7, 0}}));
  for (double v : s.scores) CHECK(v == Catch::Approx(0).margin(1e-9));
}

TEST_CASE("recovers scores from a sampled study", "[btrank]") {
  std::vector<double> truth = kTableScores;
  const double mean = std::accumulate(truth.begin(), truth.end(), 0.0) / truth.size();
  for (auto& v : truth) v -= mean;
  auto tally = simulate(kTableMethods, truth, 30000, 2024);
  std::int64_t total = 0;
  for (auto& row : tally.wins) total = std::accumulate(row.begin(), row.end(), total);
  CHECK(total == 30000);
  auto s = fit(tally);
  for (std::size_t i = 0; i < truth.size(); ++i) CHECK(std::abs(s.scores[i] - truth[i]) < 0.1);
  CHECK(rank(s) == rank(BTScores{kTableMethods, truth}));
  CHECK(std::abs(std::accumulate(s.scores.begin(), s.scores.end(), 0.0)) < 1e-9);
}

TEST_CASE("rank orders the table fixture by score", "[btrank]") {
  auto order = rank(BTScores{kTableMethods, kTableScores});
  CHECK(order == std::vector<std::string>{"PHDNet", "DPH", "StyTr2", "AdaAttN", "SANet", "E2STN"});
  CHECK(rank(BTScores{{"c", "a", "b"}, {0, 0, 0}}) == std::vector<std::string>{"a", "b", "c"});
  CHECK(rank(BTScores{{"solo"}, {0}}) == std::vector<std::string>{"solo"});
  CHECK(fit(matrix({"solo"}, {{0}})).scores == std::vector<double>{0.0});
}

TEST_CASE("degenerate tallies name the offending method", "[btrank]") {
  try {
    fit(matrix({"a", "b", "c"}, {{0, 2, 3}, {0, 0, 1}, {0, 1, 0}}));
    FAIL("expected DegenerateTally");
  } catch (const DegenerateTally& e) {
    CHECK(e.method == "a");
    CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("never loses"));
  }
  try {
    fit(matrix({"a", "b", "c"}, {{0, 2, 3}, {1, 0, 1}, {0, 0, 0}}));
    FAIL("expected DegenerateTally");
  } catch (const DegenerateTally& e) {
    CHECK(e.method == "c");
  }
  // Two internally balanced groups where {a, b} always beat {c, d}.
  try {
    fit(matrix({"a", "b", "c", "d"}, {{0, 1, 1, 1}, {1, 0, 1, 1}, {0, 0, 0, 1}, {0, 0, 1, 0}}));
    FAIL("expected DegenerateTally");
  } catch (const DegenerateTally& e) {
    CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("not strongly connected"));
    CHECK((e.method == "c" || e.method == "d"));
  }
}

TEST_CASE("fit is permutation equivariant and shift invariant", "[btrank][property]") {
  auto t = simulate({"a", "b", "c", "d"}, {0.4, -0.2, 1.0, -1.2}, 4000, 3);
  auto s = fit(t);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  PairwiseTally p;
  for (auto i : perm) p.methods.push_back(t.methods[i]);
  for (auto i : perm) {
    std::vector<std::int64_t> row;
    for (auto j : perm) row.push_back(t.wins[i][j]);
    p.wins.push_back(row);
  }
  auto sp = fit(p);
  for (std::size_t k = 0; k < perm.size(); ++k) CHECK(sp.scores[k] == Catch::Approx(s.scores[perm[k]]).margin(1e-8));

  auto shifted = s.scores;
  for (auto& v : shifted) v += 5;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      CHECK(win_probability(shifted[i], shifted[j]) == Catch::Approx(win_probability(s.scores[i], s.scores[j])).margin(1e-12));
  CHECK(log_likelihood(t, shifted) == Catch::Approx(log_likelihood(t, s.scores)));
}

TEST_CASE("tally file formats", "[btrank]") {
  std::istringstream m("# study\nmethods a b\n0 3\n1 0\n");
  auto tm = parse_tally(m);
  CHECK(tm.methods == std::vector<std::string>{"a", "b"});
  CHECK(tm.wins[0][1] == 3);

  std::istringstream l("a b 2\nb a 1\na b 1 # repeat\n");
  auto tl = parse_tally(l);
  CHECK(tl.wins == tm.wins);

  std::istringstream round(format_tally_matrix(tm));
  CHECK(parse_tally(round).wins == tm.wins);

  std::istringstream bad_count("methods a b\n0 x\n1 0\n");
  CHECK_THROWS_WITH(parse_tally(bad_count, "t.txt"), Catch::Matchers::ContainsSubstring("t.txt:2"));
  std::istringstream short_rows("methods a b c\n0 1 1\n1 0 1\n");
  CHECK_THROWS_AS(parse_tally(short_rows), std::invalid_argument);
  std::istringstream diag("methods a b\n4 1\n1 0\n");
  CHECK_THROWS_WITH(parse_tally(diag), Catch::Matchers::ContainsSubstring("diagonal"));
  std::istringstream self("a a 3\n");
  CHECK_THROWS_AS(parse_tally(self), std::invalid_argument);
}

TEST_CASE("fixture tally ranks the table methods", "[btrank]") {
  auto t = read_tally(DUALHARM_FIXTURE_DIR "/table1_synthetic.txt");
  CHECK(t.methods == kTableMethods);
  auto s = fit(t);
  CHECK(rank(s) == std::vector<std::string>{"PHDNet", "DPH", "StyTr2", "AdaAttN", "SANet", "E2STN"});
}
