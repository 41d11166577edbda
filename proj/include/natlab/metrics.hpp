#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "natlab/kv_file.hpp"

namespace natlab {

/// Length of the longest common subsequence, O(|a|*|b|) time, O(|b|) memory.
template <typename T>
std::size_t lcs_length(std::span<const T> a, std::span<const T> b) {
  std::vector<std::size_t> row(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = 0;  // row[j-1] from the previous i
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = a[i - 1] == b[j - 1] ? diag + 1 : std::max(row[j], row[j - 1]);
      diag = up;
    }
  }
  return row[b.size()];
}

template <typename T>
std::size_t lcs_length(const std::vector<T>& a, const std::vector<T>& b) {
  return lcs_length<T>(std::span<const T>(a), std::span<const T>(b));
}

/// lcs(pred, gold) / |gold|.
template <typename T>
double sentence_accuracy(const std::vector<T>& pred, const std::vector<T>& gold) {
  if (gold.empty()) throw std::invalid_argument("sentence_accuracy: empty reference");
  return static_cast<double>(lcs_length(pred, gold)) / static_cast<double>(gold.size());
}

struct SentenceScore {
  std::size_t pred_len = 0;
  std::size_t gold_len = 0;
  std::size_t lcs = 0;
  double accuracy = 0.0;
};

struct AccuracyReport {
  double corpus_accuracy = 0.0;
  std::vector<SentenceScore> sentences;
  double mean_pred_len = 0.0;
  double mean_gold_len = 0.0;
  double mean_length_ratio = 0.0;  // mean of pred_len / gold_len
  double repeated_token_rate = 0.0;  // adjacent identical predictions per predicted token

  /// `index,pred_len,gold_len,lcs,accuracy`
  std::string per_sentence_csv() const {
    std::string out = "index,pred_len,gold_len,lcs,accuracy\n";
    for (std::size_t i = 0; i < sentences.size(); ++i) {
      const auto& s = sentences[i];
      out += std::to_string(i) + "," + std::to_string(s.pred_len) + "," + std::to_string(s.gold_len) + "," +
             std::to_string(s.lcs) + "," + format_double(s.accuracy) + "\n";
    }
    return out;
  }
};

template <typename T>
struct PredictionPair {
  std::vector<T> pred;
  std::vector<T> gold;
};

/// Unweighted mean of sentence accuracies plus length diagnostics.
template <typename T>
AccuracyReport corpus_accuracy(std::span<const PredictionPair<T>> pairs) {
  if (pairs.empty()) throw std::invalid_argument("corpus_accuracy: no sentences");
  AccuracyReport r;
  std::size_t repeats = 0, predicted = 0;
  for (const auto& p : pairs) {
    SentenceScore s;
    s.pred_len = p.pred.size();
    s.gold_len = p.gold.size();
    s.lcs = lcs_length(p.pred, p.gold);
    s.accuracy = sentence_accuracy(p.pred, p.gold);
    r.sentences.push_back(s);
    r.corpus_accuracy += s.accuracy;
    r.mean_pred_len += static_cast<double>(s.pred_len);
    r.mean_gold_len += static_cast<double>(s.gold_len);
    r.mean_length_ratio += static_cast<double>(s.pred_len) / static_cast<double>(s.gold_len);
    for (std::size_t i = 1; i < p.pred.size(); ++i) repeats += p.pred[i] == p.pred[i - 1];
    predicted += p.pred.size();
  }
  const auto count = static_cast<double>(pairs.size());
  r.corpus_accuracy /= count;
  r.mean_pred_len /= count;
  r.mean_gold_len /= count;
  r.mean_length_ratio /= count;
  r.repeated_token_rate = predicted ? static_cast<double>(repeats) / static_cast<double>(predicted) : 0.0;
  return r;
}

template <typename T>
AccuracyReport corpus_accuracy(const std::vector<PredictionPair<T>>& pairs) {
  return corpus_accuracy<T>(std::span<const PredictionPair<T>>(pairs));
}

}  // namespace natlab
