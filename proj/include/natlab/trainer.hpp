#pragma once

// Two-phase training: phase 1 runs the pretraining loss, phase 2 the target
// loss. The Adam state and the learning-rate schedule continue across the
// switch. Each update draws sentences until the batch holds at least
// tokens_per_batch target tokens; the loss is averaged per target token.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "natlab/checkpoint.hpp"
#include "natlab/corpus.hpp"
#include "natlab/losses.hpp"
#include "natlab/metrics.hpp"
#include "natlab/model.hpp"
#include "natlab/rng.hpp"

namespace natlab {

/// oaxe and moaxe start from xe, coco from ctc; the rest pretrain with themselves.
constexpr LossKind pretraining_loss(LossKind k) noexcept {
  switch (k) {
    case LossKind::oaxe:
    case LossKind::moaxe: return LossKind::xe;
    case LossKind::coco: return LossKind::ctc;
    default: return k;
  }
}

inline int decoder_length(LossKind k, std::size_t src_len, std::size_t tgt_len) {
  return static_cast<int>(uses_ctc_length(k) ? 2 * src_len : tgt_len);
}

struct TrainConfig {
  LossKind loss = LossKind::ctc;
  double lambda = kDefaultCocoLambda;
  std::optional<LossKind> phase1_loss;
  std::int64_t phase1_updates = 0;
  std::int64_t phase2_updates = 1000;
  int tokens_per_batch = 2048;
  double peak_lr = 5e-4;
  std::int64_t warmup = 4000;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  std::uint64_t seed = 1;
  std::int64_t eval_interval = 500;
  std::int64_t eval_sentences = 0;  // 0 = the whole validation split
  std::string checkpoint_dir;
  int threads = 1;  // not part of the result; outputs are identical for any value

  LossKind resolved_phase1() const { return phase1_loss.value_or(pretraining_loss(loss)); }
  std::int64_t total_updates() const { return phase1_updates + phase2_updates; }

  void validate() const {
    if (phase1_updates < 0 || phase2_updates < 0) throw ConfigError("TrainConfig: update counts must be >= 0");
    if (phase1_loss && pretraining_loss(loss) != loss && *phase1_loss != pretraining_loss(loss))
      throw ConfigError(std::string("TrainConfig: ") + loss_name(loss) + " must pretrain with " +
                        loss_name(pretraining_loss(loss)));
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("TrainConfig: lambda must lie in [0,1]");
    if (tokens_per_batch < 1 || warmup < 1 || !(peak_lr > 0.0)) throw ConfigError("TrainConfig: invalid optimizer settings");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && adam_eps > 0.0))
      throw ConfigError("TrainConfig: invalid Adam settings");
    if (eval_interval < 0 || eval_sentences < 0) throw ConfigError("TrainConfig: eval settings must be >= 0");
  }

  void write(KvRecord& kv) const {
    kv.set("train.loss", loss_name(loss));
    kv.set("train.lambda", lambda);
    kv.set("train.phase1_loss", loss_name(resolved_phase1()));
    kv.set("train.phase1_updates", phase1_updates);
    kv.set("train.phase2_updates", phase2_updates);
    kv.set("train.tokens_per_batch", tokens_per_batch);
    kv.set("train.peak_lr", peak_lr);
    kv.set("train.warmup", warmup);
    kv.set("train.beta1", beta1);
    kv.set("train.beta2", beta2);
    kv.set("train.adam_eps", adam_eps);
    kv.set("train.seed", seed);
    kv.set("train.eval_interval", eval_interval);
    kv.set("train.eval_sentences", eval_sentences);
  }
};

/// Inverse square-root decay after linear warmup; step counts from 1.
inline double learning_rate(std::int64_t step, double peak, std::int64_t warmup) {
  const auto s = static_cast<double>(std::max<std::int64_t>(step, 1));
  const auto w = static_cast<double>(warmup);
  return peak * std::min(s / w, std::sqrt(w / s));
}

template <typename T>
struct Adam {
  std::vector<T> m, v;
  std::int64_t t = 0;

  void step(Parameters<T>& p, const Parameters<T>& g, double lr, double beta1, double beta2, double eps) {
    if (m.empty()) {
      m.assign(p.values.size(), T{});
      v.assign(p.values.size(), T{});
    }
    ++t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2);
    const T step_size = static_cast<T>(lr * std::sqrt(c2) / c1);
    const T e = static_cast<T>(eps * std::sqrt(c2));
    for (std::size_t i = 0; i < p.values.size(); ++i) {
      const T gi = g.values[i];
      m[i] = b1 * m[i] + (T(1) - b1) * gi;
      v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
      p.values[i] -= step_size * m[i] / (std::sqrt(v[i]) + e);
    }
  }
};

/// A sentence pair in model index space.
struct Example {
  std::vector<int> src;
  std::vector<int> tgt;
};

inline std::vector<Example> to_examples(std::span<const SentencePair> pairs, const ModelVocab& vocab) {
  std::vector<Example> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    Example e;
    for (auto id : p.source) e.src.push_back(vocab.src_index(id));
    for (auto id : p.target) e.tgt.push_back(vocab.tgt_index(id));
    out.push_back(std::move(e));
  }
  return out;
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers with a static split.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(threads, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    });
  for (auto& t : pool) t.join();
}

/// Endless shuffled stream of token-budgeted batches.
class BatchStream {
 public:
  BatchStream(std::size_t n, int tokens_per_batch, std::span<const Example> data, std::uint64_t seed)
      : data_(data), budget_(tokens_per_batch), rng_(make_stream(seed, 0x6261746368ULL)), order_(n) {
    if (n == 0) throw DataError("BatchStream: empty training set");
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    shuffle(order_.begin(), order_.end(), rng_);
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> batch;
    int tokens = 0;
    while (tokens < budget_) {
      if (pos_ == order_.size()) {
        shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
        if (!batch.empty() && batch.size() >= order_.size()) break;
      }
      const auto i = order_[pos_++];
      batch.push_back(i);
      tokens += static_cast<int>(data_[i].tgt.size());
    }
    return batch;
  }

 private:
  std::span<const Example> data_;
  int budget_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

struct BatchLoss {
  double value = 0.0;  // sum over sentences
  std::int64_t tokens = 0;
  std::int64_t skipped = 0;  // sentences with no feasible alignment
};

/// Loss and d loss / d logits (already divided by the token count) for a
/// forward pass over `batch_examples`.
template <typename T>
BatchLoss batch_loss(const ForwardResult<T>& f, std::span<const Example* const> batch_examples, LossKind kind,
                     double lambda, int threads, Mat<T>* grad) {
  const auto n = batch_examples.size();
  std::vector<std::optional<LossOutput>> outs(n);
  parallel_for(n, threads, [&](std::size_t s) {
    try {
      outs[s] = compute_loss(kind, f.log_probs(static_cast<int>(s)), batch_examples[s]->tgt, LossOptions{lambda});
    } catch (const InfeasibleAlignment&) {
    }
  });
  BatchLoss r;
  for (std::size_t s = 0; s < n; ++s) {
    if (!outs[s]) {
      ++r.skipped;
      continue;
    }
    r.value += outs[s]->value;
    r.tokens += static_cast<std::int64_t>(batch_examples[s]->tgt.size());
  }
  if (grad) {
    grad->setZero(f.logp.rows(), f.logp.cols());
    if (r.tokens > 0) {
      const double scale = 1.0 / static_cast<double>(r.tokens);
      for (std::size_t s = 0; s < n; ++s)
        if (outs[s])
          grad->block(f.segments[s].dec_off, 0, f.segments[s].dec_len, grad->cols()) =
              (outs[s]->grad * scale).template cast<T>();
    }
  }
  return r;
}

inline Batch make_batch(std::span<const Example* const> examples, LossKind kind) {
  Batch b;
  for (const auto* e : examples) b.add(e->src, decoder_length(kind, e->src.size(), e->tgt.size()));
  return b;
}

/// Per-token loss of `data` in evaluation mode (no dropout).
template <typename T>
double dataset_loss(const Parameters<T>& p, std::span<const Example> data, LossKind kind, double lambda,
                    int threads = 1, std::size_t chunk = 64) {
  double value = 0.0;
  std::int64_t tokens = 0;
  for (std::size_t lo = 0; lo < data.size(); lo += chunk) {
    std::vector<const Example*> ex;
    for (std::size_t i = lo; i < std::min(data.size(), lo + chunk); ++i) ex.push_back(&data[i]);
    const auto f = forward(p, make_batch(ex, kind));
    const auto r = batch_loss<T>(f, ex, kind, lambda, threads, nullptr);
    value += r.value;
    tokens += r.tokens;
  }
  return tokens ? value / static_cast<double>(tokens) : 0.0;
}

/// CTC-length losses decode greedily from 2 T_x rows; the others take the
/// argmax at the golden length. Reserved ids never appear in the output.
template <typename T>
std::vector<std::vector<int>> decode(const Parameters<T>& p, std::span<const Example> data, LossKind kind,
                                     std::size_t chunk = 64) {
  const int blank = reserved_blank(p.config().tgt_vocab);
  const int epsilon = reserved_epsilon(p.config().tgt_vocab);
  std::vector<std::vector<int>> out;
  out.reserve(data.size());
  for (std::size_t lo = 0; lo < data.size(); lo += chunk) {
    std::vector<const Example*> ex;
    for (std::size_t i = lo; i < std::min(data.size(), lo + chunk); ++i) ex.push_back(&data[i]);
    const auto f = forward(p, make_batch(ex, kind));
    for (int s = 0; s < f.sentences(); ++s) {
      const auto lp = f.log_probs(s);
      auto pred = uses_ctc_length(kind) ? ctc_decode_greedy(lp, blank) : argmax_decode(lp);
      std::erase_if(pred, [&](int t) { return t == blank || t == epsilon; });
      out.push_back(std::move(pred));
    }
  }
  return out;
}

template <typename T>
AccuracyReport evaluate_examples(const Parameters<T>& p, std::span<const Example> data, LossKind kind,
                                 std::vector<std::vector<int>>* predictions = nullptr) {
  auto pred = decode(p, data, kind);
  std::vector<PredictionPair<int>> pairs;
  pairs.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) pairs.push_back({pred[i], data[i].tgt});
  if (predictions) *predictions = std::move(pred);
  return corpus_accuracy(pairs);
}

struct TrainLogRow {
  std::int64_t update = 0;
  int phase = 1;
  double loss_value = 0.0;
  double valid_accuracy = 0.0;
};

inline std::string training_log_csv(std::span<const TrainLogRow> rows) {
  std::string out = "update,phase,loss_value,valid_accuracy\n";
  for (const auto& r : rows)
    out += std::to_string(r.update) + "," + std::to_string(r.phase) + "," + format_double(r.loss_value) + "," +
           format_double(r.valid_accuracy) + "\n";
  return out;
}

struct TrainResult {
  Parameters<float> params;
  std::vector<TrainLogRow> log;
  double final_loss = 0.0;  // mean per-token loss over the last logging window
  std::int64_t skipped_sentences = 0;
};

/// Trains from scratch on in-memory examples. `on_log` sees every log row
/// as it is produced.
inline TrainResult train_examples(const TrainConfig& tc, const ModelConfig& mc, std::span<const Example> train_set,
                                  std::span<const Example> valid_set,
                                  const std::function<void(const TrainLogRow&)>& on_log = {}) {
  tc.validate();
  mc.validate();
  TrainResult result;
  result.params = init_parameters<float>(mc, stream_seed(tc.seed, 0x696e6974ULL));
  auto grads = result.params.zeros_like();
  Adam<float> adam;
  BatchStream stream(train_set.size(), tc.tokens_per_batch, train_set, tc.seed);
  const auto valid = valid_set.subspan(
      0, tc.eval_sentences > 0 ? std::min(valid_set.size(), static_cast<std::size_t>(tc.eval_sentences)) : valid_set.size());

  double window_value = 0.0;
  std::int64_t window_tokens = 0;
  Mat<float> grad_logits;
  for (std::int64_t update = 1; update <= tc.total_updates(); ++update) {
    const int phase = update <= tc.phase1_updates ? 1 : 2;
    const LossKind kind = phase == 1 ? tc.resolved_phase1() : tc.loss;
    std::vector<const Example*> ex;
    for (auto i : stream.next()) ex.push_back(&train_set[i]);
    const Batch batch = make_batch(ex, kind);
    const auto f = forward(result.params, batch, {true, stream_seed(tc.seed, 0x64726f70ULL, static_cast<std::uint64_t>(update))});
    const auto r = batch_loss<float>(f, ex, kind, tc.lambda, tc.threads, &grad_logits);
    result.skipped_sentences += r.skipped;
    window_value += r.value;
    window_tokens += r.tokens;
    if (r.tokens > 0) {
      std::fill(grads.values.begin(), grads.values.end(), 0.0f);
      backward_logits(result.params, batch, f, grad_logits, grads);
      adam.step(result.params, grads, learning_rate(update, tc.peak_lr, tc.warmup), tc.beta1, tc.beta2, tc.adam_eps);
    }

    const bool last = update == tc.total_updates();
    if (last || (tc.eval_interval > 0 && update % tc.eval_interval == 0)) {
      TrainLogRow row{update, phase, window_tokens ? window_value / static_cast<double>(window_tokens) : 0.0, 0.0};
      if (!valid.empty()) row.valid_accuracy = evaluate_examples(result.params, valid, tc.loss).corpus_accuracy;
      result.log.push_back(row);
      result.final_loss = row.loss_value;
      if (on_log) on_log(row);
      window_value = 0.0;
      window_tokens = 0;
    }
  }
  return result;
}

/// Fills model vocabulary sizes from the corpus, or checks them if set.
inline ModelConfig bind_vocab(ModelConfig mc, const ModelVocab& v) {
  if (mc.src_vocab == 0) mc.src_vocab = v.src_size;
  if (mc.tgt_vocab == 0) mc.tgt_vocab = v.tgt_size();
  if (mc.src_vocab != v.src_size || mc.tgt_vocab != v.tgt_size())
    throw DataError("model vocabulary (" + std::to_string(mc.src_vocab) + ", " + std::to_string(mc.tgt_vocab) +
                    ") does not match corpus (" + std::to_string(v.src_size) + ", " + std::to_string(v.tgt_size()) + ")");
  return mc;
}

inline constexpr const char* kCheckpointFile = "model.bin";
inline constexpr const char* kTrainLogFile = "train_log.csv";

/// Trains on <data_dir>/train, validates on <data_dir>/valid, and writes
/// model.bin (+ manifest) and train_log.csv into checkpoint_dir when set.
inline TrainResult train(const TrainConfig& tc, ModelConfig mc, const std::filesystem::path& data_dir) {
  tc.validate();
  const auto train_corpus = read_corpus(data_dir, "train");
  const auto valid_corpus = read_corpus(data_dir, "valid");
  const auto vocab = ModelVocab::from(train_corpus.config.vocab);
  mc = bind_vocab(mc, vocab);
  const auto train_set = to_examples(train_corpus.pairs, vocab);
  const auto valid_set = to_examples(valid_corpus.pairs, vocab);
  auto result = train_examples(tc, mc, train_set, valid_set);
  if (!tc.checkpoint_dir.empty()) {
    const std::filesystem::path dir(tc.checkpoint_dir);
    ensure_directory(dir);
    KvRecord extra;
    tc.write(extra);
    extra.set("vocab.src_base", static_cast<std::int64_t>(vocab.src_base));
    extra.set("vocab.tgt_base", static_cast<std::int64_t>(vocab.tgt_base));
    extra.set("vocab.tgt_words", vocab.tgt_words);
    extra.set("data.fingerprint", file_fingerprint(data_dir / "manifest.txt"));
    save_checkpoint(dir / kCheckpointFile, result.params, extra);
    write_file_atomic(dir / kTrainLogFile, training_log_csv(result.log));
  }
  return result;
}

struct Evaluation {
  AccuracyReport report;
  std::vector<TokenSeq> predictions;  // corpus token ids
  LossKind decode_kind = LossKind::xe;
};

/// Loads a checkpoint and scores the given split of a corpus directory.
inline Evaluation evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& data_dir,
                           const std::string& split) {
  const auto ckpt = load_checkpoint(checkpoint);
  const auto corpus = read_corpus(data_dir, split);
  const auto vocab = ModelVocab::from(corpus.config.vocab);
  bind_vocab(ckpt.params.config(), vocab);
  Evaluation ev;
  ev.decode_kind = parse_loss(ckpt.manifest.get("train.loss"));
  const auto data = to_examples(corpus.pairs, vocab);
  std::vector<std::vector<int>> pred;
  ev.report = evaluate_examples(ckpt.params, data, ev.decode_kind, &pred);
  for (const auto& p : pred) {
    TokenSeq seq;
    for (int t : p) seq.push_back(vocab.tgt_id(t));
    ev.predictions.push_back(std::move(seq));
  }
  return ev;
}

}  // namespace natlab
