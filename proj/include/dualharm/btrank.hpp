#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dualharm::bt {

/// wins[i][j] = number of times method i was preferred over method j.
struct PairwiseTally {
  std::vector<std::string> methods;
  std::vector<std::vector<std::int64_t>> wins;

  std::size_t size() const { return methods.size(); }

  void validate() const {
    if (methods.empty()) throw std::invalid_argument("tally has no methods");
    if (wins.size() != methods.size()) throw std::invalid_argument("tally matrix has the wrong number of rows");
    std::map<std::string, int> seen;
    for (const auto& m : methods)
      if (seen[m]++) throw std::invalid_argument("duplicate method name '" + m + "'");
    for (std::size_t i = 0; i < wins.size(); ++i) {
      if (wins[i].size() != methods.size()) throw std::invalid_argument("tally row for '" + methods[i] + "' has the wrong length");
      if (wins[i][i] != 0) throw std::invalid_argument("tally diagonal for '" + methods[i] + "' must be zero");
      for (auto w : wins[i])
        if (w < 0) throw std::invalid_argument("tally row for '" + methods[i] + "' has a negative count");
    }
  }
};

/// Mean-zero log-strengths.
struct BTScores {
  std::vector<std::string> methods;
  std::vector<double> scores;
  int iterations = 0;
  double log_likelihood = 0;
};

struct FitOptions {
  int max_iter = 10000;
  double tol = 1e-9;
};

/// The maximum-likelihood estimate does not exist for this tally.
struct DegenerateTally : std::runtime_error {
  std::string method;
  DegenerateTally(std::string m, const std::string& why) : std::runtime_error(why), method(std::move(m)) {}
};

inline double win_probability(double score_i, double score_j) { return 1.0 / (1.0 + std::exp(score_j - score_i)); }

/// Log-likelihood of the tally under log-strengths `s`.
inline double log_likelihood(const PairwiseTally& t, const std::vector<double>& s) {
  double ll = 0;
  for (std::size_t i = 0; i < t.size(); ++i)
    for (std::size_t j = 0; j < t.size(); ++j)
      if (t.wins[i][j] > 0) ll += static_cast<double>(t.wins[i][j]) * -std::log1p(std::exp(s[j] - s[i]));
  return ll;
}

namespace detail {

inline std::vector<bool> reachable(const PairwiseTally& t, std::size_t from, bool forward) {
  std::vector<bool> seen(t.size(), false);
  std::vector<std::size_t> stack{from};
  seen[from] = true;
  while (!stack.empty()) {
    const std::size_t u = stack.back();
    stack.pop_back();
    for (std::size_t v = 0; v < t.size(); ++v) {
      const auto w = forward ? t.wins[u][v] : t.wins[v][u];
      if (w > 0 && !seen[v]) {
        seen[v] = true;
        stack.push_back(v);
      }
    }
  }
  return seen;
}

/// The MLE is finite iff the "i beat j" graph is strongly connected.
inline void require_identifiable(const PairwiseTally& t) {
  if (t.size() == 1) return;
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::int64_t w = 0, l = 0;
    for (std::size_t j = 0; j < t.size(); ++j) {
      w += t.wins[i][j];
      l += t.wins[j][i];
    }
    if (w == 0 && l == 0) throw DegenerateTally(t.methods[i], "method '" + t.methods[i] + "' has no comparisons");
    if (w == 0) throw DegenerateTally(t.methods[i], "method '" + t.methods[i] + "' never wins; its score diverges to -inf");
    if (l == 0) throw DegenerateTally(t.methods[i], "method '" + t.methods[i] + "' never loses; its score diverges to +inf");
  }
  const auto fwd = reachable(t, 0, true), bwd = reachable(t, 0, false);
  for (std::size_t i = 0; i < t.size(); ++i)
    if (!fwd[i] || !bwd[i])
      throw DegenerateTally(t.methods[i], "comparison graph is not strongly connected: method '" + t.methods[i] + "' " +
                                              (!fwd[i] ? "is never beaten by a chain from '" : "never beats a chain to '") +
                                              t.methods[0] + "'");
}

inline void center(std::vector<double>& s) {
  const double mean = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
  for (auto& v : s) v -= mean;
}

}  // namespace detail

/// Minorization-maximization fit of p(i beats j) = pi_i / (pi_i + pi_j).
/// Throws DegenerateTally naming a method when no finite MLE exists.
inline BTScores fit(const PairwiseTally& t, const FitOptions& opts = {}) {
  t.validate();
  detail::require_identifiable(t);
  const std::size_t k = t.size();
  BTScores out;
  out.methods = t.methods;
  out.scores.assign(k, 0.0);
  if (k == 1) return out;

  std::vector<double> total_wins(k, 0);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) total_wins[i] += static_cast<double>(t.wins[i][j]);

  std::vector<double> s(k, 0.0), next(k);
  double ll = log_likelihood(t, s);
  for (int it = 1; it <= opts.max_iter; ++it) {
    for (std::size_t i = 0; i < k; ++i) {
      double denom = 0;
      for (std::size_t j = 0; j < k; ++j) {
        if (i == j) continue;
        const double n = static_cast<double>(t.wins[i][j] + t.wins[j][i]);
        // n / (pi_i + pi_j), scaled by pi_i to stay in log space.
        if (n > 0) denom += n / (1.0 + std::exp(s[j] - s[i]));
      }
      next[i] = s[i] + std::log(total_wins[i]) - std::log(denom);
    }
    detail::center(next);
    const double next_ll = log_likelihood(t, next);
    if (next_ll < ll - 1e-9 * std::max(1.0, std::abs(ll)))
      throw std::logic_error("Bradley-Terry likelihood decreased at iteration " + std::to_string(it));
    double delta = 0;
    for (std::size_t i = 0; i < k; ++i) delta = std::max(delta, std::abs(next[i] - s[i]));
    s.swap(next);
    ll = next_ll;
    out.iterations = it;
    if (delta < opts.tol) break;
  }
  out.scores = s;
  out.log_likelihood = ll;
  return out;
}

/// Methods by descending score; equal scores order lexicographically by name.
inline std::vector<std::string> rank(const BTScores& s) {
  std::vector<std::size_t> idx(s.methods.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (s.scores[a] != s.scores[b]) return s.scores[a] > s.scores[b];
    return s.methods[a] < s.methods[b];
  });
  std::vector<std::string> out;
  for (auto i : idx) out.push_back(s.methods[i]);
  return out;
}

/// Draws `outcomes` comparisons spread evenly over all unordered pairs, each
/// won by i with probability win_probability(scores[i], scores[j]).
inline PairwiseTally simulate(const std::vector<std::string>& methods, const std::vector<double>& scores,
                              std::int64_t outcomes, std::uint64_t seed) {
  if (methods.size() != scores.size()) throw std::invalid_argument("simulate: methods and scores differ in length");
  if (methods.size() < 2) throw std::invalid_argument("simulate: need at least two methods");
  PairwiseTally t{methods, std::vector<std::vector<std::int64_t>>(methods.size(), std::vector<std::int64_t>(methods.size(), 0))};
  t.validate();
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < methods.size(); ++i)
    for (std::size_t j = i + 1; j < methods.size(); ++j) pairs.emplace_back(i, j);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::int64_t k = 0; k < outcomes; ++k) {
    const auto [i, j] = pairs[static_cast<std::size_t>(k) % pairs.size()];
    if (u(rng) < win_probability(scores[i], scores[j]))
      ++t.wins[i][j];
    else
      ++t.wins[j][i];
  }
  return t;
}

// ---------------------------------------------------------------------------
// Tally files. Two layouts, '#' starts a comment:
//   matrix:    "methods A B C" then one row of k counts per method
//   long-form: "winner loser count" per line (repeated pairs accumulate)

inline PairwiseTally parse_tally(std::istream& in, const std::string& source = "tally") {
  std::vector<std::pair<int, std::string>> lines;
  std::string line;
  for (int no = 1; std::getline(in, line); ++no) {
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    lines.emplace_back(no, line);
  }
  if (lines.empty()) throw std::invalid_argument(source + ": empty tally");
  auto fail = [&](int no, const std::string& msg) { throw std::invalid_argument(source + ":" + std::to_string(no) + ": " + msg); };
  auto parse_count = [&](int no, const std::string& tok) {
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(tok, &used);
    } catch (const std::exception&) {
      fail(no, "expected a count, got '" + tok + "'");
    }
    if (used != tok.size() || v < 0) fail(no, "expected a non-negative integer, got '" + tok + "'");
    return static_cast<std::int64_t>(v);
  };

  PairwiseTally t;
  std::istringstream head(lines[0].second);
  std::string first;
  head >> first;
  if (first == "methods") {
    for (std::string m; head >> m;) t.methods.push_back(m);
    const std::size_t k = t.methods.size();
    if (k == 0) fail(lines[0].first, "no method names after 'methods'");
    if (lines.size() != k + 1)
      fail(lines.back().first, "expected " + std::to_string(k) + " matrix rows, found " + std::to_string(lines.size() - 1));
    for (std::size_t r = 0; r < k; ++r) {
      std::istringstream row(lines[r + 1].second);
      std::vector<std::int64_t> vals;
      for (std::string tok; row >> tok;) vals.push_back(parse_count(lines[r + 1].first, tok));
      if (vals.size() != k) fail(lines[r + 1].first, "expected " + std::to_string(k) + " counts, found " + std::to_string(vals.size()));
      t.wins.push_back(std::move(vals));
    }
  } else {
    std::map<std::string, std::size_t> index;
    auto id = [&](const std::string& m) {
      auto [it, inserted] = index.emplace(m, t.methods.size());
      if (inserted) {
        t.methods.push_back(m);
        for (auto& row : t.wins) row.push_back(0);
        t.wins.emplace_back(t.methods.size(), 0);
      }
      return it->second;
    };
    for (const auto& [no, text] : lines) {
      std::istringstream row(text);
      std::string winner, loser, count, extra;
      if (!(row >> winner >> loser >> count) || (row >> extra)) fail(no, "expected 'winner loser count'");
      if (winner == loser) fail(no, "a method cannot be compared with itself");
      const auto c = parse_count(no, count);
      const auto wi = id(winner), li = id(loser);
      t.wins[wi][li] += c;
    }
  }
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(source + ": " + e.what());
  }
  return t;
}

inline PairwiseTally read_tally(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open tally " + path.string());
  return parse_tally(in, path.string());
}

inline std::string format_tally_matrix(const PairwiseTally& t) {
  std::ostringstream os;
  os << "methods";
  for (const auto& m : t.methods) os << ' ' << m;
  os << '\n';
  for (const auto& row : t.wins) {
    for (std::size_t j = 0; j < row.size(); ++j) os << (j ? " " : "") << row[j];
    os << '\n';
  }
  return os.str();
}

}  // namespace dualharm::bt
