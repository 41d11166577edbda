#pragma once

// Alignment-based training losses for non-autoregressive decoders.
//
// Every loss consumes an m x V matrix of per-position log-probabilities and
// a reference of n token indices, and returns the loss value together with
// its exact gradient with respect to the pre-softmax logits. Losses that
// pick a discrete alignment (AXE, OAXE, M-OAXE) differentiate with that
// alignment held fixed.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "natlab/hungarian.hpp"
#include "natlab/log_prob_matrix.hpp"

namespace natlab {

enum class LossKind { xe, axe, ctc, oaxe, moaxe, coco };

inline constexpr LossKind kAllLosses[] = {LossKind::xe,   LossKind::axe,   LossKind::ctc,
                                          LossKind::oaxe, LossKind::moaxe, LossKind::coco};

inline const char* loss_name(LossKind k) {
  switch (k) {
    case LossKind::xe: return "xe";
    case LossKind::axe: return "axe";
    case LossKind::ctc: return "ctc";
    case LossKind::oaxe: return "oaxe";
    case LossKind::moaxe: return "moaxe";
    case LossKind::coco: return "coco";
  }
  return "?";
}

inline LossKind parse_loss(const std::string& s) {
  for (auto k : kAllLosses)
    if (s == loss_name(k)) return k;
  throw std::invalid_argument("unknown loss '" + s + "' (expected xe, axe, ctc, oaxe, moaxe, coco)");
}

/// CTC-family models decode with twice the source length; the others use
/// the reference length.
constexpr bool uses_ctc_length(LossKind k) noexcept { return k == LossKind::ctc || k == LossKind::coco; }

/// Reserved slots at the end of a model vocabulary of size V.
constexpr int reserved_blank(int vocab) noexcept { return vocab - 2; }
constexpr int reserved_epsilon(int vocab) noexcept { return vocab - 1; }

/// The reference is too long for the output (CTC needs n + #repeats rows).
class InfeasibleAlignment : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// One (output position, vocabulary column) term of a fixed alignment.
struct Selection {
  int row;
  int col;
  friend bool operator==(const Selection&, const Selection&) = default;
};

struct LossOutput {
  double value = 0.0;
  RowMatrix grad;                     // d value / d logits, m x V
  std::vector<Selection> selections;  // chosen alignment; empty for XE-free sums (CTC)
};

namespace detail {

inline void check_target(const LogProbMatrix& logp, std::span<const int> target, std::initializer_list<int> reserved) {
  if (target.empty()) throw std::invalid_argument("target sequence is empty");
  for (int t : target) {
    if (t < 0 || t >= logp.cols()) throw std::invalid_argument("target token outside vocabulary");
    for (int r : reserved)
      if (t == r) throw std::invalid_argument("target contains a reserved token");
  }
}

}  // namespace detail

/// -sum of the selected log-probabilities; gradient softmax - onehot per term.
inline LossOutput selection_loss(const LogProbMatrix& logp, std::vector<Selection> selections) {
  LossOutput out;
  out.grad = RowMatrix::Zero(logp.rows(), logp.cols());
  for (const auto& s : selections) {
    out.value -= logp(s.row, s.col);
    out.grad.row(s.row) += logp.matrix().row(s.row).array().exp().matrix();
    out.grad(s.row, s.col) -= 1.0;
  }
  out.selections = std::move(selections);
  return out;
}

// ---------------------------------------------------------------------------
// XE

inline LossOutput xe_loss(const LogProbMatrix& logp, std::span<const int> target) {
  detail::check_target(logp, target, {});
  if (static_cast<int>(target.size()) != logp.rows())
    throw std::invalid_argument("xe_loss: output length must equal target length");
  std::vector<Selection> sel;
  for (int i = 0; i < logp.rows(); ++i) sel.push_back({i, target[static_cast<std::size_t>(i)]});
  return selection_loss(logp, std::move(sel));
}

// ---------------------------------------------------------------------------
// AXE: minimum-cost monotonic alignment.
//
//   A[0][0] = 0
//   A[i][k] = min( A[i][k-1]   - logp[k][EPSILON]   skip prediction
//                  A[i-1][k-1] - logp[k][y_i]       align
//                  A[i-1][k]   - logp[k][y_i] )     skip target
//
// with rows k and targets i counted from 1; the loss is A[n][m].

inline LossOutput axe_loss(const LogProbMatrix& logp, std::span<const int> target, int epsilon) {
  if (epsilon < 0 || epsilon >= logp.cols()) throw std::invalid_argument("axe_loss: EPSILON outside vocabulary");
  detail::check_target(logp, target, {epsilon});
  const int n = static_cast<int>(target.size());
  const int m = logp.rows();
  constexpr double inf = std::numeric_limits<double>::infinity();
  enum Move : char { none, align, skip_pred, skip_tgt };

  RowMatrix cost = RowMatrix::Constant(n + 1, m + 1, inf);
  std::vector<Move> from(static_cast<std::size_t>((n + 1) * (m + 1)), none);
  auto mv = [&](int i, int k) -> Move& { return from[static_cast<std::size_t>(i * (m + 1) + k)]; };
  cost(0, 0) = 0.0;
  for (int i = 0; i <= n; ++i) {
    for (int k = 1; k <= m; ++k) {
      // Candidate order fixes tie-breaking: align, skip prediction, skip target.
      double best = inf;
      Move pick = none;
      if (i >= 1) {
        const double c = cost(i - 1, k - 1) - logp(k - 1, target[static_cast<std::size_t>(i - 1)]);
        if (c < best) best = c, pick = align;
      }
      {
        const double c = cost(i, k - 1) - logp(k - 1, epsilon);
        if (c < best) best = c, pick = skip_pred;
      }
      if (i >= 1) {
        const double c = cost(i - 1, k) - logp(k - 1, target[static_cast<std::size_t>(i - 1)]);
        if (c < best) best = c, pick = skip_tgt;
      }
      cost(i, k) = best;
      mv(i, k) = pick;
    }
  }

  std::vector<Selection> sel;
  int i = n, k = m;
  while (i > 0 || k > 0) {
    switch (mv(i, k)) {
      case align: sel.push_back({k - 1, target[static_cast<std::size_t>(i - 1)]}); --i; --k; break;
      case skip_pred: sel.push_back({k - 1, epsilon}); --k; break;
      case skip_tgt: sel.push_back({k - 1, target[static_cast<std::size_t>(i - 1)]}); --i; break;
      case none: throw std::logic_error("axe_loss: broken back-pointer");
    }
  }
  std::reverse(sel.begin(), sel.end());
  auto out = selection_loss(logp, std::move(sel));
  out.value = cost(n, m);
  return out;
}

// ---------------------------------------------------------------------------
// CTC

/// Minimum number of output rows that can emit `target`.
inline int ctc_min_length(std::span<const int> target) {
  int len = static_cast<int>(target.size());
  for (std::size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++len;
  return len;
}

inline LossOutput ctc_loss(const LogProbMatrix& logp, std::span<const int> target, int blank) {
  if (blank < 0 || blank >= logp.cols()) throw std::invalid_argument("ctc_loss: BLANK outside vocabulary");
  detail::check_target(logp, target, {blank});
  const int m = logp.rows();
  if (m < ctc_min_length(target))
    throw InfeasibleAlignment("ctc_loss: " + std::to_string(m) + " output positions cannot emit a reference of " +
                              std::to_string(target.size()) + " tokens");

  // Extended label sequence: blank, y1, blank, y2, ..., yn, blank.
  const int states = 2 * static_cast<int>(target.size()) + 1;
  std::vector<int> ext(static_cast<std::size_t>(states), blank);
  for (std::size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i];
  auto can_skip = [&](int s) {  // transition s-2 -> s
    return s >= 2 && ext[static_cast<std::size_t>(s)] != blank &&
           ext[static_cast<std::size_t>(s)] != ext[static_cast<std::size_t>(s - 2)];
  };

  RowMatrix alpha = RowMatrix::Constant(m, states, kNegInf);
  RowMatrix beta = RowMatrix::Constant(m, states, kNegInf);
  alpha(0, 0) = logp(0, ext[0]);
  alpha(0, 1) = logp(0, ext[1]);
  for (int k = 1; k < m; ++k) {
    for (int s = 0; s < states; ++s) {
      double a = alpha(k - 1, s);
      if (s >= 1) a = log_add(a, alpha(k - 1, s - 1));
      if (can_skip(s)) a = log_add(a, alpha(k - 1, s - 2));
      alpha(k, s) = a == kNegInf ? kNegInf : a + logp(k, ext[static_cast<std::size_t>(s)]);
    }
  }
  beta(m - 1, states - 1) = logp(m - 1, ext[static_cast<std::size_t>(states - 1)]);
  beta(m - 1, states - 2) = logp(m - 1, ext[static_cast<std::size_t>(states - 2)]);
  for (int k = m - 2; k >= 0; --k) {
    for (int s = 0; s < states; ++s) {
      double b = beta(k + 1, s);
      if (s + 1 < states) b = log_add(b, beta(k + 1, s + 1));
      if (s + 2 < states && can_skip(s + 2)) b = log_add(b, beta(k + 1, s + 2));
      beta(k, s) = b == kNegInf ? kNegInf : b + logp(k, ext[static_cast<std::size_t>(s)]);
    }
  }
  const double log_z = log_add(alpha(m - 1, states - 1), alpha(m - 1, states - 2));

  LossOutput out;
  out.value = -log_z;
  out.grad.resize(m, logp.cols());
  for (int k = 0; k < m; ++k) {
    out.grad.row(k) = logp.matrix().row(k).array().exp().matrix();
    for (int s = 0; s < states; ++s) {
      const double lg = alpha(k, s) + beta(k, s) - logp(k, ext[static_cast<std::size_t>(s)]) - log_z;
      if (lg > kNegInf) out.grad(k, ext[static_cast<std::size_t>(s)]) -= std::exp(lg);
    }
  }
  return out;
}

/// Per-position argmax (ties to the lowest id), merge adjacent repeats,
/// drop BLANK.
inline std::vector<int> ctc_decode_greedy(const LogProbMatrix& logp, int blank) {
  std::vector<int> out;
  int prev = -1;
  for (int k = 0; k < logp.rows(); ++k) {
    int best = 0;
    for (int v = 1; v < logp.cols(); ++v)
      if (logp(k, v) > logp(k, best)) best = v;
    if (best != prev && best != blank) out.push_back(best);
    prev = best;
  }
  return out;
}

/// Per-position argmax (ties to the lowest id).
inline std::vector<int> argmax_decode(const LogProbMatrix& logp) {
  std::vector<int> out;
  for (int k = 0; k < logp.rows(); ++k) {
    int best = 0;
    for (int v = 1; v < logp.cols(); ++v)
      if (logp(k, v) > logp(k, best)) best = v;
    out.push_back(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// OAXE and modified OAXE

/// Stage-1 alignment: alpha[i] = output row of reference token i, the
/// injective map minimizing -sum_i logp[alpha(i)][y_i].
inline std::vector<int> oaxe_alignment(const LogProbMatrix& logp, std::span<const int> target) {
  const int n = static_cast<int>(target.size());
  const int m = logp.rows();
  if (m < n) throw std::invalid_argument("oaxe_alignment: fewer output positions than reference tokens");
  std::vector<double> cost(static_cast<std::size_t>(n) * static_cast<std::size_t>(m));
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < m; ++k)
      cost[static_cast<std::size_t>(i * m + k)] = -logp(k, target[static_cast<std::size_t>(i)]);
  return solve_assignment<double>(cost, n, m).row_to_col;
}

inline LossOutput oaxe_loss(const LogProbMatrix& logp, std::span<const int> target) {
  detail::check_target(logp, target, {});
  if (static_cast<int>(target.size()) != logp.rows())
    throw std::invalid_argument("oaxe_loss: output length must equal target length");
  const auto alpha = oaxe_alignment(logp, target);
  std::vector<Selection> sel;
  for (std::size_t i = 0; i < alpha.size(); ++i) sel.push_back({alpha[i], target[i]});
  std::sort(sel.begin(), sel.end(), [](const Selection& a, const Selection& b) { return a.row < b.row; });
  return selection_loss(logp, std::move(sel));
}

inline constexpr int kUnaligned = -1;

/// Stage 2: extend the anchors of `alpha` into contiguous spans. Returns
/// beta[k] = reference index for every output row. Rows before the first
/// anchor join the first anchor's token, rows after the last anchor join the
/// last one's, and each interior gap (k1, k2) is split at the k* minimizing
/// the cost of giving (k1, k*] to the left token and (k*, k2) to the right.
inline std::vector<int> moaxe_spans(const LogProbMatrix& logp, std::span<const int> target,
                                    std::span<const int> alpha) {
  const int m = logp.rows();
  std::vector<int> beta(static_cast<std::size_t>(m), kUnaligned);
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    const int k = alpha[i];
    if (k < 0 || k >= m || beta[static_cast<std::size_t>(k)] != kUnaligned)
      throw std::invalid_argument("moaxe_spans: alignment is not injective into the output");
    beta[static_cast<std::size_t>(k)] = static_cast<int>(i);
  }
  std::vector<int> anchors;
  for (int k = 0; k < m; ++k)
    if (beta[static_cast<std::size_t>(k)] != kUnaligned) anchors.push_back(k);
  if (anchors.empty()) throw std::invalid_argument("moaxe_spans: empty alignment");

  for (int k = 0; k < anchors.front(); ++k) beta[static_cast<std::size_t>(k)] = beta[static_cast<std::size_t>(anchors.front())];
  for (int k = anchors.back() + 1; k < m; ++k) beta[static_cast<std::size_t>(k)] = beta[static_cast<std::size_t>(anchors.back())];

  for (std::size_t a = 0; a + 1 < anchors.size(); ++a) {
    const int k1 = anchors[a], k2 = anchors[a + 1];
    if (k2 - k1 < 2) continue;
    const int left = beta[static_cast<std::size_t>(k1)], right = beta[static_cast<std::size_t>(k2)];
    const int yl = target[static_cast<std::size_t>(left)], yr = target[static_cast<std::size_t>(right)];
    // cost(k') = -sum_{k1<k<=k'} logp[k][yl] - sum_{k'<k<k2} logp[k][yr]
    double c = 0.0;
    for (int k = k1 + 1; k < k2; ++k) c -= logp(k, yr);
    double best = c;
    int best_split = k1;
    for (int split = k1 + 1; split < k2; ++split) {
      c += logp(split, yr) - logp(split, yl);
      if (c < best) best = c, best_split = split;
    }
    for (int k = k1 + 1; k < k2; ++k) beta[static_cast<std::size_t>(k)] = k <= best_split ? left : right;
  }
  return beta;
}

inline LossOutput moaxe_loss(const LogProbMatrix& logp, std::span<const int> target) {
  detail::check_target(logp, target, {});
  if (logp.rows() < static_cast<int>(target.size()))
    throw std::invalid_argument("moaxe_loss: fewer output positions than reference tokens");
  const auto alpha = oaxe_alignment(logp, target);
  const auto beta = moaxe_spans(logp, target, alpha);
  std::vector<Selection> sel;
  for (int k = 0; k < logp.rows(); ++k) sel.push_back({k, target[static_cast<std::size_t>(beta[static_cast<std::size_t>(k)])]});
  return selection_loss(logp, std::move(sel));
}

// ---------------------------------------------------------------------------
// CoCO

inline constexpr double kDefaultCocoLambda = 0.1;

inline LossOutput coco_loss(const LogProbMatrix& logp, std::span<const int> target, double lambda, int blank) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("coco_loss: lambda must lie in [0,1]");
  detail::check_target(logp, target, {blank});
  if (lambda == 0.0) return moaxe_loss(logp, target);
  if (lambda == 1.0) return ctc_loss(logp, target, blank);
  auto ctc = ctc_loss(logp, target, blank);
  auto mo = moaxe_loss(logp, target);
  LossOutput out;
  out.value = lambda * ctc.value + (1.0 - lambda) * mo.value;
  out.grad = lambda * ctc.grad + (1.0 - lambda) * mo.grad;
  out.selections = std::move(mo.selections);
  return out;
}

// ---------------------------------------------------------------------------

struct LossOptions {
  double lambda = kDefaultCocoLambda;
  int blank = -1;    // defaults to reserved_blank(V)
  int epsilon = -1;  // defaults to reserved_epsilon(V)
};

/// Dispatch by kind, with BLANK/EPSILON defaulting to the reserved slots.
inline LossOutput compute_loss(LossKind kind, const LogProbMatrix& logp, std::span<const int> target,
                               const LossOptions& opt = {}) {
  const int blank = opt.blank >= 0 ? opt.blank : reserved_blank(logp.cols());
  const int epsilon = opt.epsilon >= 0 ? opt.epsilon : reserved_epsilon(logp.cols());
  switch (kind) {
    case LossKind::xe: return xe_loss(logp, target);
    case LossKind::axe: return axe_loss(logp, target, epsilon);
    case LossKind::ctc: return ctc_loss(logp, target, blank);
    case LossKind::oaxe: return oaxe_loss(logp, target);
    case LossKind::moaxe: return moaxe_loss(logp, target);
    case LossKind::coco: return coco_loss(logp, target, opt.lambda, blank);
  }
  throw std::logic_error("compute_loss: unreachable");
}

}  // namespace natlab
