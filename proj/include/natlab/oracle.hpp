#pragma once

// Exhaustive reference implementations of the alignment losses, a
// central-difference gradient checker, and the randomized equivalence
// suites built on them. Everything here is exponential by design and meant
// for tiny instances.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "natlab/log_prob_matrix.hpp"
#include "natlab/losses.hpp"
#include "natlab/rng.hpp"

namespace natlab::oracle {

class BudgetExceeded : public std::length_error {
 public:
  using std::length_error::length_error;
};

struct OracleBudget {
  int max_m = 12;
  int max_n = 7;
  int max_vocab = 16;
  std::uint64_t max_states = 10'000'000;

  void check(int m, int n, int vocab, std::uint64_t states) const {
    if (m > max_m || n > max_n || vocab > max_vocab || states > max_states)
      throw BudgetExceeded("oracle budget exceeded (m=" + std::to_string(m) + ", n=" + std::to_string(n) +
                           ", V=" + std::to_string(vocab) + ", states=" + std::to_string(states) + ")");
  }
};

inline std::uint64_t checked_pow(std::uint64_t base, int exp) {
  std::uint64_t r = 1;
  for (int i = 0; i < exp; ++i) {
    if (r > std::numeric_limits<std::uint64_t>::max() / std::max<std::uint64_t>(base, 1))
      return std::numeric_limits<std::uint64_t>::max();
    r *= base;
  }
  return r;
}

/// -log of the total probability of every label path that collapses to
/// `target` (merge repeats, then drop BLANK). +inf when no path exists.
inline double brute_ctc(const LogProbMatrix& logp, std::span<const int> target, int blank,
                        const OracleBudget& budget = {}) {
  const int m = logp.rows(), vocab = logp.cols();
  budget.check(m, static_cast<int>(target.size()), vocab, checked_pow(static_cast<std::uint64_t>(vocab), m));
  std::vector<int> path(static_cast<std::size_t>(m), 0);
  std::vector<double> terms;
  std::vector<int> collapsed;
  while (true) {
    collapsed.clear();
    int prev = -1;
    for (int v : path) {
      if (v != prev && v != blank) collapsed.push_back(v);
      prev = v;
    }
    if (std::equal(collapsed.begin(), collapsed.end(), target.begin(), target.end())) {
      double lp = 0.0;
      for (int k = 0; k < m; ++k) lp += logp(k, path[static_cast<std::size_t>(k)]);
      terms.push_back(lp);
    }
    int pos = m - 1;
    while (pos >= 0 && ++path[static_cast<std::size_t>(pos)] == vocab) path[static_cast<std::size_t>(pos--)] = 0;
    if (pos < 0) break;
  }
  if (terms.empty()) return std::numeric_limits<double>::infinity();
  return -log_sum_exp(terms);
}

struct BruteAlignment {
  double value = std::numeric_limits<double>::infinity();
  std::vector<int> alpha;
};

/// Exact minimum over every injective map from reference tokens to output
/// rows of -sum_i logp[alpha(i)][y_i]. Square inputs enumerate n!
/// permutations; rectangular ones enumerate m!/(m-n)! injections.
inline BruteAlignment brute_oaxe(const LogProbMatrix& logp, std::span<const int> target,
                                 const OracleBudget& budget = {}) {
  const int n = static_cast<int>(target.size()), m = logp.rows();
  if (n > m) throw std::invalid_argument("brute_oaxe: more reference tokens than output rows");
  std::uint64_t count = 1;
  for (int i = 0; i < n; ++i) count *= static_cast<std::uint64_t>(m - i);
  budget.check(m, n, logp.cols(), count);

  BruteAlignment best;
  std::vector<int> alpha(static_cast<std::size_t>(n));
  std::vector<char> taken(static_cast<std::size_t>(m), 0);
  std::function<void(int, double)> rec = [&](int i, double acc) {
    if (i == n) {
      if (acc < best.value) best.value = acc, best.alpha = alpha;
      return;
    }
    for (int k = 0; k < m; ++k) {
      if (taken[static_cast<std::size_t>(k)]) continue;
      taken[static_cast<std::size_t>(k)] = 1;
      alpha[static_cast<std::size_t>(i)] = k;
      rec(i + 1, acc - logp(k, target[static_cast<std::size_t>(i)]));
      taken[static_cast<std::size_t>(k)] = 0;
    }
  };
  rec(0, 0.0);
  return best;
}

/// Enumerates every monotone path of align / skip-prediction / skip-target
/// moves from (0 targets, 0 rows) to (n, m) and returns the cheapest.
inline double brute_axe(const LogProbMatrix& logp, std::span<const int> target, int epsilon,
                        const OracleBudget& budget = {}) {
  const int n = static_cast<int>(target.size()), m = logp.rows();
  budget.check(m, n, logp.cols(), checked_pow(3, n + m));
  double best = std::numeric_limits<double>::infinity();
  std::function<void(int, int, double)> rec = [&](int i, int k, double acc) {
    if (i == n && k == m) {
      best = std::min(best, acc);
      return;
    }
    if (i < n && k < m) rec(i + 1, k + 1, acc - logp(k, target[static_cast<std::size_t>(i)]));
    if (k < m) rec(i, k + 1, acc - logp(k, epsilon));
    // Skip-target reuses the row consumed by the previous move.
    if (i < n && k >= 1) rec(i + 1, k, acc - logp(k - 1, target[static_cast<std::size_t>(i)]));
  };
  rec(0, 0, 0.0);
  return best;
}

struct BruteSpans {
  double value = std::numeric_limits<double>::infinity();
  std::vector<int> beta;
};

/// Enumerates every total row->reference map that keeps the anchors of
/// `alpha` and assigns each reference token one contiguous block of rows;
/// returns the cheapest.
inline BruteSpans brute_moaxe_stage2(const LogProbMatrix& logp, std::span<const int> target,
                                     std::span<const int> alpha, const OracleBudget& budget = {}) {
  const int n = static_cast<int>(target.size()), m = logp.rows();
  budget.check(m, n, logp.cols(), checked_pow(static_cast<std::uint64_t>(n), m - n));
  std::vector<int> fixed(static_cast<std::size_t>(m), -1);
  for (int i = 0; i < n; ++i) fixed[static_cast<std::size_t>(alpha[static_cast<std::size_t>(i)])] = i;
  std::vector<int> free_rows;
  for (int k = 0; k < m; ++k)
    if (fixed[static_cast<std::size_t>(k)] < 0) free_rows.push_back(k);

  BruteSpans best;
  std::vector<int> beta = fixed;
  std::vector<int> digits(free_rows.size(), 0);
  while (true) {
    for (std::size_t f = 0; f < free_rows.size(); ++f) beta[static_cast<std::size_t>(free_rows[f])] = digits[f];
    // Contiguity: once a token's block ends it never reappears.
    std::vector<char> closed(static_cast<std::size_t>(n), 0);
    bool ok = true;
    for (int k = 0; k < m && ok; ++k) {
      const int b = beta[static_cast<std::size_t>(k)];
      if (closed[static_cast<std::size_t>(b)]) ok = false;
      if (k + 1 < m && beta[static_cast<std::size_t>(k + 1)] != b) closed[static_cast<std::size_t>(b)] = 1;
    }
    if (ok) {
      double c = 0.0;
      for (int k = 0; k < m; ++k) c -= logp(k, target[static_cast<std::size_t>(beta[static_cast<std::size_t>(k)])]);
      if (c < best.value) best.value = c, best.beta = beta;
    }
    std::size_t pos = 0;
    while (pos < digits.size() && ++digits[pos] == n) digits[pos++] = 0;
    if (pos == digits.size()) break;
  }
  return best;
}

/// Full modified-OAXE reference: exhaustive stage 1, then exhaustive stage 2.
inline double brute_moaxe(const LogProbMatrix& logp, std::span<const int> target, const OracleBudget& budget = {}) {
  const auto stage1 = brute_oaxe(logp, target, budget);
  return brute_moaxe_stage2(logp, target, stage1.alpha, budget).value;
}

// ---------------------------------------------------------------------------
// Gradient checking

using ValueFn = std::function<double(const LogProbMatrix&)>;
using LossFn = std::function<LossOutput(const LogProbMatrix&)>;

/// Central differences of `loss(log_softmax(logits))` with respect to logits.
inline RowMatrix finite_diff_grad(const ValueFn& loss, const RowMatrix& logits, double h = 1e-5) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
  RowMatrix grad(logits.rows(), logits.cols());
  RowMatrix probe = logits;
  for (Eigen::Index k = 0; k < logits.rows(); ++k) {
    for (Eigen::Index v = 0; v < logits.cols(); ++v) {
      probe(k, v) = logits(k, v) + h;
      const double up = loss(LogProbMatrix::from_logits(probe));
      probe(k, v) = logits(k, v) - h;
      const double down = loss(LogProbMatrix::from_logits(probe));
      probe(k, v) = logits(k, v);
      grad(k, v) = (up - down) / (2.0 * h);
    }
  }
  return grad;
}

/// True if the selected alignment is identical at every +/-h probe, i.e. the
/// point is away from an argmin switch.
inline bool alignment_stable(const LossFn& loss, const RowMatrix& logits, double h = 1e-5) {
  const auto base = loss(LogProbMatrix::from_logits(logits)).selections;
  RowMatrix probe = logits;
  for (Eigen::Index k = 0; k < logits.rows(); ++k) {
    for (Eigen::Index v = 0; v < logits.cols(); ++v) {
      for (double d : {h, -h}) {
        probe(k, v) = logits(k, v) + d;
        if (loss(LogProbMatrix::from_logits(probe)).selections != base) return false;
      }
      probe(k, v) = logits(k, v);
    }
  }
  return true;
}

/// ||a - b|| / max(||a||, ||b||), Frobenius norms.
inline double relative_error(const RowMatrix& a, const RowMatrix& b) {
  const double scale = std::max({a.norm(), b.norm(), 1e-12});
  return (a - b).norm() / scale;
}

inline double max_row_sum(const RowMatrix& g) {
  return g.rows() == 0 ? 0.0 : g.rowwise().sum().cwiseAbs().maxCoeff();
}

/// |a - b| / |b|, treating equal infinities as a match.
inline double relative_deviation(double a, double b) {
  if (a == b) return 0.0;
  if (std::isinf(a) || std::isinf(b)) return std::numeric_limits<double>::infinity();
  return std::abs(a - b) / std::max(std::abs(b), 1e-300);
}

// ---------------------------------------------------------------------------
// Randomized suites

/// Logits drawn i.i.d. standard normal.
inline RowMatrix random_logits(Rng& rng, int m, int vocab) {
  RowMatrix x(m, vocab);
  for (int k = 0; k < m; ++k)
    for (int v = 0; v < vocab; ++v) x(k, v) = standard_normal(rng);
  return x;
}

inline std::vector<int> random_target(Rng& rng, int n, int usable_vocab) {
  std::vector<int> t(static_cast<std::size_t>(n));
  for (auto& x : t) x = static_cast<int>(uniform_int(rng, 0, usable_vocab - 1));
  return t;
}

struct SuiteResult {
  std::string name;
  int instances = 0;
  double max_deviation = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

struct SuiteLimits {
  int instances = 1000;
  int max_m = 7;
  int max_n = 3;
  int max_vocab = 4;
  double tolerance = 1e-9;
};

/// The four loss/oracle equivalence suites (CTC, AXE, OAXE, M-OAXE).
inline std::vector<SuiteResult> run_oracle_suites(std::uint64_t seed, const SuiteLimits& lim = {}) {
  std::vector<SuiteResult> out;
  auto run = [&](const std::string& name, std::uint64_t domain, auto&& body) {
    SuiteResult r{name, lim.instances, 0.0, lim.tolerance, false};
    for (int i = 0; i < lim.instances; ++i) {
      auto rng = make_stream(seed, domain, static_cast<std::uint64_t>(i));
      r.max_deviation = std::max(r.max_deviation, body(rng));
    }
    r.passed = r.max_deviation <= lim.tolerance;
    out.push_back(r);
  };

  run("ctc", 1, [&](Rng& rng) {
    const int vocab = static_cast<int>(uniform_int(rng, 2, lim.max_vocab));
    const int blank = vocab - 1;
    const int n = static_cast<int>(uniform_int(rng, 1, lim.max_n));
    const auto target = random_target(rng, n, vocab - 1);
    const int lo = ctc_min_length(target);
    if (lo > lim.max_m) return 0.0;
    const int m = static_cast<int>(uniform_int(rng, lo, lim.max_m));
    const auto logp = LogProbMatrix::from_logits(random_logits(rng, m, vocab));
    return relative_deviation(ctc_loss(logp, target, blank).value, brute_ctc(logp, target, blank));
  });
  run("axe", 2, [&](Rng& rng) {
    const int vocab = static_cast<int>(uniform_int(rng, 2, lim.max_vocab));
    const int eps = vocab - 1;
    const int n = static_cast<int>(uniform_int(rng, 1, lim.max_n));
    const int m = static_cast<int>(uniform_int(rng, 1, lim.max_m));
    const auto target = random_target(rng, n, vocab - 1);
    const auto logp = LogProbMatrix::from_logits(random_logits(rng, m, vocab));
    return relative_deviation(axe_loss(logp, target, eps).value, brute_axe(logp, target, eps));
  });
  run("oaxe", 3, [&](Rng& rng) {
    const int vocab = static_cast<int>(uniform_int(rng, 1, lim.max_vocab));
    const int n = static_cast<int>(uniform_int(rng, 1, std::min(lim.max_n, lim.max_m)));
    const auto target = random_target(rng, n, vocab);
    const auto logp = LogProbMatrix::from_logits(random_logits(rng, n, vocab));
    return relative_deviation(oaxe_loss(logp, target).value, brute_oaxe(logp, target).value);
  });
  run("moaxe", 4, [&](Rng& rng) {
    const int vocab = static_cast<int>(uniform_int(rng, 1, lim.max_vocab));
    const int n = static_cast<int>(uniform_int(rng, 1, std::min(lim.max_n, lim.max_m)));
    const int m = static_cast<int>(uniform_int(rng, n, lim.max_m));
    const auto target = random_target(rng, n, vocab);
    const auto logp = LogProbMatrix::from_logits(random_logits(rng, m, vocab));
    return relative_deviation(moaxe_loss(logp, target).value, brute_moaxe(logp, target));
  });
  return out;
}

/// A loss under gradient test: `make` draws an instance shape, `eval`
/// computes value and gradient.
struct GradientCase {
  std::string name;
  bool square = false;  // m must equal n
  std::function<LossOutput(const LogProbMatrix&, std::span<const int>)> eval;
};

inline std::vector<GradientCase> standard_gradient_cases(double lambda = kDefaultCocoLambda) {
  return {
      {"xe", true, [](const LogProbMatrix& lp, std::span<const int> t) { return xe_loss(lp, t); }},
      {"axe", false,
       [](const LogProbMatrix& lp, std::span<const int> t) { return axe_loss(lp, t, reserved_epsilon(lp.cols())); }},
      {"ctc", false,
       [](const LogProbMatrix& lp, std::span<const int> t) { return ctc_loss(lp, t, reserved_blank(lp.cols())); }},
      {"oaxe", true, [](const LogProbMatrix& lp, std::span<const int> t) { return oaxe_loss(lp, t); }},
      {"moaxe", false, [](const LogProbMatrix& lp, std::span<const int> t) { return moaxe_loss(lp, t); }},
      {"coco", false,
       [lambda](const LogProbMatrix& lp, std::span<const int> t) {
         return coco_loss(lp, t, lambda, reserved_blank(lp.cols()));
       }},
  };
}

struct GradientSuiteResult {
  std::string name;
  int points = 0;
  int rejected = 0;  // draws discarded for a non-unique argmin
  double max_relative_error = 0.0;
  double max_row_sum = 0.0;
  bool passed = false;
};

struct GradientLimits {
  int points = 100;
  int max_m = 7;
  int max_n = 3;
  int vocab = 5;  // two of which are the reserved BLANK/EPSILON slots
  double step = 1e-5;
  double tolerance = 1e-4;
  double row_sum_tolerance = 1e-8;
};

inline GradientSuiteResult run_gradient_suite(const GradientCase& c, std::uint64_t seed,
                                              const GradientLimits& lim = {}) {
  GradientSuiteResult r{c.name, 0, 0, 0.0, 0.0, false};
  std::uint64_t draw = 0;
  while (r.points < lim.points) {
    if (r.rejected > 10 * lim.points) throw std::runtime_error("gradient suite: too many tied draws");
    auto rng = make_stream(seed, 0x67726164ULL, draw++);
    const int n = static_cast<int>(uniform_int(rng, 1, lim.max_n));
    auto target = random_target(rng, n, lim.vocab - 2);
    int m = n;
    if (!c.square) {
      const int lo = std::max(n, ctc_min_length(target));
      m = static_cast<int>(uniform_int(rng, lo, std::max(lo, lim.max_m)));
    }
    const RowMatrix logits = random_logits(rng, m, lim.vocab);
    const LossFn full = [&](const LogProbMatrix& lp) { return c.eval(lp, target); };
    if (!alignment_stable(full, logits, lim.step)) {
      ++r.rejected;
      continue;
    }
    const auto analytic = full(LogProbMatrix::from_logits(logits));
    const auto numeric = finite_diff_grad([&](const LogProbMatrix& lp) { return c.eval(lp, target).value; }, logits,
                                          lim.step);
    r.max_relative_error = std::max(r.max_relative_error, relative_error(analytic.grad, numeric));
    r.max_row_sum = std::max(r.max_row_sum, max_row_sum(analytic.grad));
    ++r.points;
  }
  r.passed = r.max_relative_error < lim.tolerance && r.max_row_sum <= lim.row_sum_tolerance;
  return r;
}

}  // namespace natlab::oracle
