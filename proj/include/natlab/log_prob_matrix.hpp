#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

namespace natlab {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// log(exp(a) + exp(b)) without overflow; either argument may be -inf.
inline double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  if (a < b) std::swap(a, b);
  return a + std::log1p(std::exp(b - a));
}

template <typename Range>
double log_sum_exp(const Range& xs) {
  double hi = kNegInf;
  for (double x : xs) hi = std::max(hi, x);
  if (hi == kNegInf) return kNegInf;
  if (std::isinf(hi)) return hi;
  double sum = 0.0;
  for (double x : xs) sum += std::exp(x - hi);
  return hi + std::log(sum);
}

/// Row-wise log-softmax, max-subtracted.
template <typename Derived>
RowMatrix log_softmax_rows(const Eigen::MatrixBase<Derived>& logits) {
  RowMatrix out(logits.rows(), logits.cols());
  for (Eigen::Index k = 0; k < logits.rows(); ++k) {
    const double hi = logits.row(k).maxCoeff();
    const double lse = hi + std::log((logits.row(k).array() - hi).exp().sum());
    out.row(k) = logits.row(k).array() - lse;
  }
  return out;
}

/// m position-wise normalized log-distributions over a vocabulary of size V.
class LogProbMatrix {
 public:
  LogProbMatrix() = default;

  explicit LogProbMatrix(RowMatrix logp, double tolerance = 1e-6) : data_(std::move(logp)) {
    if (data_.rows() < 1 || data_.cols() < 1) throw std::invalid_argument("LogProbMatrix: empty matrix");
    for (Eigen::Index k = 0; k < data_.rows(); ++k) {
      const auto row = data_.row(k);
      if (std::abs(log_sum_exp(std::span<const double>(row.data(), static_cast<std::size_t>(row.size()))))
          > tolerance)
        throw std::invalid_argument("LogProbMatrix: row " + std::to_string(k) + " is not normalized");
    }
  }

  template <typename Derived>
  static LogProbMatrix from_logits(const Eigen::MatrixBase<Derived>& logits) {
    return LogProbMatrix(log_softmax_rows(logits));
  }

  /// Rows given as probabilities (each row must sum to 1).
  static LogProbMatrix from_probs(const std::vector<std::vector<double>>& probs) {
    if (probs.empty()) throw std::invalid_argument("LogProbMatrix: empty matrix");
    RowMatrix m(static_cast<Eigen::Index>(probs.size()), static_cast<Eigen::Index>(probs[0].size()));
    for (std::size_t k = 0; k < probs.size(); ++k) {
      if (probs[k].size() != probs[0].size()) throw std::invalid_argument("LogProbMatrix: ragged rows");
      for (std::size_t v = 0; v < probs[k].size(); ++v)
        m(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(v)) = std::log(probs[k][v]);
    }
    return LogProbMatrix(std::move(m));
  }

  int rows() const { return static_cast<int>(data_.rows()); }
  int cols() const { return static_cast<int>(data_.cols()); }
  double operator()(int k, int v) const { return data_(k, v); }
  const RowMatrix& matrix() const { return data_; }

  /// exp of one row, i.e. the softmax of the underlying logits.
  Eigen::RowVectorXd probs(int k) const { return data_.row(k).array().exp(); }

  LogProbMatrix permuted_rows(const std::vector<int>& order) const {
    RowMatrix m(data_.rows(), data_.cols());
    for (int k = 0; k < rows(); ++k) m.row(k) = data_.row(order.at(static_cast<std::size_t>(k)));
    return LogProbMatrix(std::move(m));
  }

 private:
  RowMatrix data_;
};

}  // namespace natlab
