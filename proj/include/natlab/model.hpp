#pragma once

// Non-autoregressive encoder-decoder transformer with explicit reverse mode.
//
// Sentences of a batch are packed row-wise: every position-wise operation
// (embeddings, linear maps, layer norms, FFNs) runs on the stacked rows of
// all sentences at once, while attention is evaluated per sentence block.
// There is no causal mask anywhere; output row j of a sentence depends on
// its source and on j only.
//
// Decoder inputs are the source embeddings copied by uniform upsampling:
// decoder position j of m reads source position floor(j * T_x / m).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "natlab/kv_file.hpp"
#include "natlab/log_prob_matrix.hpp"
#include "natlab/rng.hpp"

namespace natlab {

/// Allocator with a fixed 64-byte alignment. Eigen's vectorized kernels
/// peel differently depending on the start address, so a fixed alignment
/// keeps floating-point results identical across runs.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_enc_layers = 2;
  int n_dec_layers = 2;
  int d_ffn = 256;
  int src_vocab = 0;
  int tgt_vocab = 0;  // includes the reserved BLANK and EPSILON slots
  int max_len = 256;
  double dropout = 0.1;
  bool tie_decoder_input = true;  // decoder inputs reuse the source embedding table

  void validate() const {
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
      throw ConfigError("ModelConfig: d_model must be a positive multiple of n_heads");
    if (n_enc_layers < 0 || n_dec_layers < 0 || d_ffn < 1 || max_len < 1)
      throw ConfigError("ModelConfig: layer counts, d_ffn, and max_len must be positive");
    if (src_vocab < 1 || tgt_vocab < 3) throw ConfigError("ModelConfig: vocabularies are too small");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("ModelConfig: dropout must lie in [0,1)");
  }

  void write(KvRecord& kv) const {
    kv.set("model.d_model", d_model);
    kv.set("model.n_heads", n_heads);
    kv.set("model.n_enc_layers", n_enc_layers);
    kv.set("model.n_dec_layers", n_dec_layers);
    kv.set("model.d_ffn", d_ffn);
    kv.set("model.src_vocab", src_vocab);
    kv.set("model.tgt_vocab", tgt_vocab);
    kv.set("model.max_len", max_len);
    kv.set("model.dropout", dropout);
    kv.set("model.tie_decoder_input", tie_decoder_input);
  }

  static ModelConfig read(const KvRecord& kv) {
    ModelConfig c;
    c.d_model = static_cast<int>(kv.get_int("model.d_model"));
    c.n_heads = static_cast<int>(kv.get_int("model.n_heads"));
    c.n_enc_layers = static_cast<int>(kv.get_int("model.n_enc_layers"));
    c.n_dec_layers = static_cast<int>(kv.get_int("model.n_dec_layers"));
    c.d_ffn = static_cast<int>(kv.get_int("model.d_ffn"));
    c.src_vocab = static_cast<int>(kv.get_int("model.src_vocab"));
    c.tgt_vocab = static_cast<int>(kv.get_int("model.tgt_vocab"));
    c.max_len = static_cast<int>(kv.get_int("model.max_len"));
    c.dropout = kv.get_double("model.dropout");
    c.tie_decoder_input = kv.get_bool_or("model.tie_decoder_input", true);
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Parameter layout

enum class InitKind { xavier, zeros, ones };

struct TensorSpec {
  std::string name;
  std::vector<int> shape;  // rank 1 or 2
  std::size_t offset = 0;
  InitKind init = InitKind::zeros;

  std::size_t size() const {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
  }
};

/// Location of one tensor inside the flat parameter buffer, viewed as a
/// rows x cols matrix (vectors have one row).
struct TensorRef {
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;
};

struct LinearSlot {
  TensorRef w, b;  // w is in x out
};
struct NormSlot {
  TensorRef gain, bias;
};
struct AttentionSlot {
  LinearSlot q, k, v, o;
};
struct EncoderLayerSlot {
  NormSlot ln1, ln2;
  AttentionSlot attn;
  LinearSlot ff1, ff2;
};
struct DecoderLayerSlot {
  NormSlot ln1, ln2, ln3;
  AttentionSlot self_attn, cross_attn;
  LinearSlot ff1, ff2;
};

class ModelLayout {
 public:
  explicit ModelLayout(const ModelConfig& cfg) : config_(cfg) {
    cfg.validate();
    const int d = cfg.d_model;
    src_emb_ = add("src_emb", cfg.src_vocab, d, InitKind::xavier);
    dec_emb_ = cfg.tie_decoder_input ? src_emb_ : add("dec_emb", cfg.src_vocab, d, InitKind::xavier);
    for (int l = 0; l < cfg.n_enc_layers; ++l) {
      const auto p = "enc." + std::to_string(l) + ".";
      EncoderLayerSlot s;
      s.ln1 = norm(p + "ln1");
      s.attn = attention(p + "attn");
      s.ln2 = norm(p + "ln2");
      s.ff1 = linear(p + "ff1", d, cfg.d_ffn);
      s.ff2 = linear(p + "ff2", cfg.d_ffn, d);
      enc_.push_back(s);
    }
    if (cfg.n_enc_layers > 0) enc_final_ = norm("enc.final_ln");
    for (int l = 0; l < cfg.n_dec_layers; ++l) {
      const auto p = "dec." + std::to_string(l) + ".";
      DecoderLayerSlot s;
      s.ln1 = norm(p + "ln1");
      s.self_attn = attention(p + "self_attn");
      s.ln2 = norm(p + "ln2");
      s.cross_attn = attention(p + "cross_attn");
      s.ln3 = norm(p + "ln3");
      s.ff1 = linear(p + "ff1", d, cfg.d_ffn);
      s.ff2 = linear(p + "ff2", cfg.d_ffn, d);
      dec_.push_back(s);
    }
    if (cfg.n_dec_layers > 0) dec_final_ = norm("dec.final_ln");
    out_ = linear("out", d, cfg.tgt_vocab);
  }

  const ModelConfig& config() const { return config_; }
  const std::vector<TensorSpec>& tensors() const { return tensors_; }
  std::size_t total() const { return total_; }

  const TensorRef& src_emb() const { return src_emb_; }
  const TensorRef& dec_emb() const { return dec_emb_; }
  const std::vector<EncoderLayerSlot>& encoder() const { return enc_; }
  const std::vector<DecoderLayerSlot>& decoder() const { return dec_; }
  const NormSlot* encoder_final() const { return config_.n_enc_layers > 0 ? &enc_final_ : nullptr; }
  const NormSlot* decoder_final() const { return config_.n_dec_layers > 0 ? &dec_final_ : nullptr; }
  const LinearSlot& output() const { return out_; }

 private:
  TensorRef add(const std::string& name, int rows, int cols, InitKind init, bool vector = false) {
    TensorSpec spec{name, vector ? std::vector<int>{cols} : std::vector<int>{rows, cols}, total_, init};
    TensorRef ref{total_, rows, cols};
    total_ += spec.size();
    tensors_.push_back(std::move(spec));
    return ref;
  }
  LinearSlot linear(const std::string& name, int in, int out) {
    return {add(name + ".w", in, out, InitKind::xavier), add(name + ".b", 1, out, InitKind::zeros, true)};
  }
  NormSlot norm(const std::string& name) {
    const int d = config_.d_model;
    return {add(name + ".gain", 1, d, InitKind::ones, true), add(name + ".bias", 1, d, InitKind::zeros, true)};
  }
  AttentionSlot attention(const std::string& name) {
    const int d = config_.d_model;
    return {linear(name + ".q", d, d), linear(name + ".k", d, d), linear(name + ".v", d, d),
            linear(name + ".o", d, d)};
  }

  ModelConfig config_;
  std::vector<TensorSpec> tensors_;
  std::size_t total_ = 0;
  TensorRef src_emb_, dec_emb_;
  std::vector<EncoderLayerSlot> enc_;
  std::vector<DecoderLayerSlot> dec_;
  NormSlot enc_final_, dec_final_;
  LinearSlot out_;
};

/// Named tensors in one flat buffer. Gradients use the same type.
template <typename T>
struct Parameters {
  std::shared_ptr<const ModelLayout> layout;
  AlignedVector<T> values;

  const ModelConfig& config() const { return layout->config(); }

  Eigen::Map<Mat<T>> mat(const TensorRef& r) {
    return Eigen::Map<Mat<T>>(values.data() + r.offset, r.rows, r.cols);
  }
  Eigen::Map<const Mat<T>> mat(const TensorRef& r) const {
    return Eigen::Map<const Mat<T>>(values.data() + r.offset, r.rows, r.cols);
  }
  Eigen::Map<RowVec<T>> vec(const TensorRef& r) { return Eigen::Map<RowVec<T>>(values.data() + r.offset, r.cols); }
  Eigen::Map<const RowVec<T>> vec(const TensorRef& r) const {
    return Eigen::Map<const RowVec<T>>(values.data() + r.offset, r.cols);
  }

  Parameters zeros_like() const { return Parameters{layout, AlignedVector<T>(values.size(), T{})}; }

  template <typename U>
  Parameters<U> cast() const {
    return Parameters<U>{layout, AlignedVector<U>(values.begin(), values.end())};
  }
};

/// Deterministic initialization: Xavier-uniform matrices (embeddings
/// included), zero biases, unit layer-norm gains. Each tensor draws from
/// its own stream so adding a tensor does not perturb the others.
template <typename T>
Parameters<T> init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  auto layout = std::make_shared<const ModelLayout>(cfg);
  Parameters<T> p{layout, AlignedVector<T>(layout->total(), T{})};
  std::uint64_t index = 0;
  for (const auto& t : layout->tensors()) {
    auto rng = make_stream(seed, 0x696e6974ULL, index++);
    T* dst = p.values.data() + t.offset;
    switch (t.init) {
      case InitKind::zeros: break;
      case InitKind::ones: std::fill(dst, dst + t.size(), T{1}); break;
      case InitKind::xavier: {
        const double a = std::sqrt(6.0 / static_cast<double>(t.shape[0] + t.shape[1]));
        for (std::size_t i = 0; i < t.size(); ++i) dst[i] = static_cast<T>(uniform_real(rng, -a, a));
        break;
      }
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Batches

/// Packed batch: source rows of every sentence back to back plus the
/// decoder length chosen for each sentence.
struct Batch {
  std::vector<int> src;          // model source indices, packed
  std::vector<int> src_offsets;  // size sentences + 1
  std::vector<int> dec_lengths;  // decoder length per sentence

  int sentences() const { return static_cast<int>(dec_lengths.size()); }
  int src_len(int s) const { return src_offsets[static_cast<std::size_t>(s) + 1] - src_offsets[static_cast<std::size_t>(s)]; }

  void add(std::span<const int> source, int dec_length) {
    if (src_offsets.empty()) src_offsets.push_back(0);
    if (source.empty() || dec_length < 1) throw std::invalid_argument("Batch: empty sentence");
    src.insert(src.end(), source.begin(), source.end());
    src_offsets.push_back(static_cast<int>(src.size()));
    dec_lengths.push_back(dec_length);
  }
};

struct Segment {
  int src_off, src_len, dec_off, dec_len;
};

// ---------------------------------------------------------------------------
// Forward caches

template <typename T>
struct NormCache {
  Mat<T> xhat;
  ColVec<T> rstd;
};

template <typename T>
struct AttentionCache {
  Mat<T> xq, xkv, q, k, v, ctx;
  std::vector<Mat<T>> probs;  // per (sentence, head)
};

template <typename T>
struct FfnCache {
  Mat<T> x, pre;
};

template <typename T>
struct EncoderLayerCache {
  NormCache<T> ln1, ln2;
  AttentionCache<T> attn;
  FfnCache<T> ffn;
  Mat<T> mask1, mask2;
};

template <typename T>
struct DecoderLayerCache {
  NormCache<T> ln1, ln2, ln3;
  AttentionCache<T> self_attn, cross_attn;
  FfnCache<T> ffn;
  Mat<T> mask1, mask2, mask3;
};

template <typename T>
struct ForwardResult {
  std::vector<Segment> segments;
  std::vector<int> dec_src_rows;  // packed source row copied into each decoder row
  Mat<T> enc_in_mask, dec_in_mask;
  std::vector<EncoderLayerCache<T>> enc;
  NormCache<T> enc_final;
  std::vector<DecoderLayerCache<T>> dec;
  NormCache<T> dec_final;
  Mat<T> dec_out;  // input to the output projection
  Mat<T> logp;     // packed decoder rows x tgt_vocab

  int sentences() const { return static_cast<int>(segments.size()); }

  /// Log-probabilities of sentence `s` in double precision.
  LogProbMatrix log_probs(int s) const {
    const auto& seg = segments[static_cast<std::size_t>(s)];
    RowMatrix m = logp.block(seg.dec_off, 0, seg.dec_len, logp.cols()).template cast<double>();
    return LogProbMatrix(std::move(m), 1e-3);
  }
};

struct ForwardOptions {
  bool train = false;  // enables dropout
  std::uint64_t dropout_seed = 0;
};

namespace detail {

template <typename T>
Mat<T> sinusoid_table(int len, int d) {
  Mat<T> pe(len, d);
  for (int pos = 0; pos < len; ++pos)
    for (int i = 0; i < d; i += 2) {
      const double angle = pos / std::pow(10000.0, static_cast<double>(i) / d);
      pe(pos, i) = static_cast<T>(std::sin(angle));
      if (i + 1 < d) pe(pos, i + 1) = static_cast<T>(std::cos(angle));
    }
  return pe;
}

template <typename T>
Mat<T> linear_forward(const Parameters<T>& p, const LinearSlot& s, const Mat<T>& x) {
  Mat<T> y(x.rows(), s.w.cols);
  y.noalias() = x * p.mat(s.w);
  y.rowwise() += p.vec(s.b);
  return y;
}

template <typename T>
Mat<T> linear_backward(const Parameters<T>& p, const LinearSlot& s, const Mat<T>& x, const Mat<T>& dy,
                       Parameters<T>& g) {
  g.mat(s.w).noalias() += x.transpose() * dy;
  g.vec(s.b) += dy.colwise().sum();
  Mat<T> dx(dy.rows(), s.w.rows);
  dx.noalias() = dy * p.mat(s.w).transpose();
  return dx;
}

template <typename T>
Mat<T> norm_forward(const Parameters<T>& p, const NormSlot& s, const Mat<T>& x, NormCache<T>& c) {
  constexpr T eps = T(1e-5);
  const auto d = static_cast<T>(x.cols());
  const ColVec<T> mean = x.rowwise().sum() / d;
  c.xhat = x.colwise() - mean;
  const ColVec<T> var = c.xhat.array().square().rowwise().sum() / d;
  c.rstd = (var.array() + eps).rsqrt();
  c.xhat = c.xhat.array().colwise() * c.rstd.array();
  Mat<T> y = c.xhat.array().rowwise() * p.vec(s.gain).array();
  y.rowwise() += p.vec(s.bias);
  return y;
}

template <typename T>
Mat<T> norm_backward(const Parameters<T>& p, const NormSlot& s, const NormCache<T>& c, const Mat<T>& dy,
                     Parameters<T>& g) {
  g.vec(s.gain) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  g.vec(s.bias) += dy.colwise().sum();
  const Mat<T> dxhat = dy.array().rowwise() * p.vec(s.gain).array();
  const auto d = static_cast<T>(dy.cols());
  const ColVec<T> mean_d = dxhat.rowwise().sum() / d;
  const ColVec<T> mean_dx = (dxhat.array() * c.xhat.array()).rowwise().sum().matrix() / d;
  Mat<T> dx = (dxhat.colwise() - mean_d) - (c.xhat.array().colwise() * mean_dx.array()).matrix();
  return dx.array().colwise() * c.rstd.array();
}

/// Multi-head attention per sentence block. `q_rows`/`kv_rows` give the
/// (offset, length) of each sentence in the query and key/value matrices.
template <typename T>
Mat<T> attention_forward(const Parameters<T>& p, const AttentionSlot& s, const Mat<T>& xq, const Mat<T>& xkv,
                         const std::vector<std::pair<int, int>>& q_rows,
                         const std::vector<std::pair<int, int>>& kv_rows, int heads, AttentionCache<T>& c) {
  c.xq = xq;
  c.xkv = xkv;
  c.q = linear_forward(p, s.q, xq);
  c.k = linear_forward(p, s.k, xkv);
  c.v = linear_forward(p, s.v, xkv);
  const int d = static_cast<int>(xq.cols());
  const int dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  c.ctx = Mat<T>::Zero(xq.rows(), d);
  c.probs.clear();
  c.probs.reserve(q_rows.size() * static_cast<std::size_t>(heads));
  for (std::size_t b = 0; b < q_rows.size(); ++b) {
    const auto [qo, ql] = q_rows[b];
    const auto [ko, kl] = kv_rows[b];
    for (int h = 0; h < heads; ++h) {
      Mat<T> a(ql, kl);
      a.noalias() = c.q.block(qo, h * dh, ql, dh) * c.k.block(ko, h * dh, kl, dh).transpose();
      a *= scale;
      const ColVec<T> hi = a.rowwise().maxCoeff();
      a = (a.colwise() - hi).array().exp();
      const ColVec<T> z = a.rowwise().sum();
      a = a.array().colwise() / z.array();
      c.ctx.block(qo, h * dh, ql, dh).noalias() = a * c.v.block(ko, h * dh, kl, dh);
      c.probs.push_back(std::move(a));
    }
  }
  return linear_forward(p, s.o, c.ctx);
}

/// Returns (d xq, d xkv).
template <typename T>
std::pair<Mat<T>, Mat<T>> attention_backward(const Parameters<T>& p, const AttentionSlot& s,
                                             const AttentionCache<T>& c, const Mat<T>& dy,
                                             const std::vector<std::pair<int, int>>& q_rows,
                                             const std::vector<std::pair<int, int>>& kv_rows, int heads,
                                             Parameters<T>& g) {
  const Mat<T> dctx = linear_backward(p, s.o, c.ctx, dy, g);
  const int d = static_cast<int>(dctx.cols());
  const int dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Mat<T> dq = Mat<T>::Zero(c.q.rows(), d);
  Mat<T> dk = Mat<T>::Zero(c.k.rows(), d);
  Mat<T> dv = Mat<T>::Zero(c.v.rows(), d);
  std::size_t idx = 0;
  for (std::size_t b = 0; b < q_rows.size(); ++b) {
    const auto [qo, ql] = q_rows[b];
    const auto [ko, kl] = kv_rows[b];
    for (int h = 0; h < heads; ++h, ++idx) {
      const Mat<T>& a = c.probs[idx];
      const auto dctx_b = dctx.block(qo, h * dh, ql, dh);
      Mat<T> da(ql, kl);
      da.noalias() = dctx_b * c.v.block(ko, h * dh, kl, dh).transpose();
      dv.block(ko, h * dh, kl, dh).noalias() += a.transpose() * dctx_b;
      const ColVec<T> dot = (da.array() * a.array()).rowwise().sum();
      Mat<T> ds = (a.array() * (da.colwise() - dot).array()) * scale;
      dq.block(qo, h * dh, ql, dh).noalias() += ds * c.k.block(ko, h * dh, kl, dh);
      dk.block(ko, h * dh, kl, dh).noalias() += ds.transpose() * c.q.block(qo, h * dh, ql, dh);
    }
  }
  Mat<T> dxq = linear_backward(p, s.q, c.xq, dq, g);
  Mat<T> dxkv = linear_backward(p, s.k, c.xkv, dk, g);
  dxkv += linear_backward(p, s.v, c.xkv, dv, g);
  return {std::move(dxq), std::move(dxkv)};
}

template <typename T>
Mat<T> ffn_forward(const Parameters<T>& p, const LinearSlot& ff1, const LinearSlot& ff2, const Mat<T>& x,
                   FfnCache<T>& c) {
  c.x = x;
  c.pre = linear_forward(p, ff1, x);
  return linear_forward(p, ff2, Mat<T>(c.pre.cwiseMax(T(0))));
}

template <typename T>
Mat<T> ffn_backward(const Parameters<T>& p, const LinearSlot& ff1, const LinearSlot& ff2, const FfnCache<T>& c,
                    const Mat<T>& dy, Parameters<T>& g) {
  Mat<T> dh = linear_backward(p, ff2, Mat<T>(c.pre.cwiseMax(T(0))), dy, g);
  dh = (c.pre.array() > T(0)).select(dh, T(0));
  return linear_backward(p, ff1, c.x, dh, g);
}

/// Inverted dropout; leaves `mask` empty when inactive.
template <typename T>
void dropout(Mat<T>& x, Mat<T>& mask, double rate, Rng* rng) {
  if (!rng || rate <= 0.0) {
    mask.resize(0, 0);
    return;
  }
  mask.resize(x.rows(), x.cols());
  const T keep = static_cast<T>(1.0 / (1.0 - rate));
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = uniform01(*rng) < rate ? T(0) : keep;
  x.array() *= mask.array();
}

template <typename T>
void dropout_backward(Mat<T>& dx, const Mat<T>& mask) {
  if (mask.size()) dx.array() *= mask.array();
}

}  // namespace detail

template <typename T>
ForwardResult<T> forward(const Parameters<T>& p, const Batch& batch, const ForwardOptions& opt = {}) {
  const auto& cfg = p.config();
  const auto& layout = *p.layout;
  const int d = cfg.d_model;
  ForwardResult<T> f;

  int dec_rows = 0;
  for (int s = 0; s < batch.sentences(); ++s) {
    const int tx = batch.src_len(s);
    const int m = batch.dec_lengths[static_cast<std::size_t>(s)];
    if (tx > cfg.max_len || m > cfg.max_len)
      throw std::length_error("forward: sequence longer than max_len (" + std::to_string(cfg.max_len) + ")");
    f.segments.push_back({batch.src_offsets[static_cast<std::size_t>(s)], tx, dec_rows, m});
    for (int j = 0; j < m; ++j)
      f.dec_src_rows.push_back(batch.src_offsets[static_cast<std::size_t>(s)] +
                               static_cast<int>((static_cast<std::int64_t>(j) * tx) / m));
    dec_rows += m;
  }
  for (int id : batch.src)
    if (id < 0 || id >= cfg.src_vocab) throw std::out_of_range("forward: source id outside vocabulary");

  std::vector<std::pair<int, int>> src_blocks, dec_blocks;
  for (const auto& seg : f.segments) {
    src_blocks.emplace_back(seg.src_off, seg.src_len);
    dec_blocks.emplace_back(seg.dec_off, seg.dec_len);
  }

  Rng drop_rng(stream_seed(opt.dropout_seed, 0x64726f70ULL));
  Rng* rng = opt.train ? &drop_rng : nullptr;
  const double rate = cfg.dropout;
  const T emb_scale = std::sqrt(static_cast<T>(d));
  int pe_len = 0;
  for (const auto& seg : f.segments) pe_len = std::max({pe_len, seg.src_len, seg.dec_len});
  const Mat<T> pe = detail::sinusoid_table<T>(pe_len, d);

  // Encoder.
  const auto src_emb = p.mat(layout.src_emb());
  Mat<T> x(static_cast<Eigen::Index>(batch.src.size()), d);
  for (const auto& seg : f.segments)
    for (int i = 0; i < seg.src_len; ++i)
      x.row(seg.src_off + i) = src_emb.row(batch.src[static_cast<std::size_t>(seg.src_off + i)]) * emb_scale + pe.row(i);
  detail::dropout(x, f.enc_in_mask, rate, rng);

  f.enc.resize(layout.encoder().size());
  for (std::size_t l = 0; l < layout.encoder().size(); ++l) {
    const auto& s = layout.encoder()[l];
    auto& c = f.enc[l];
    const Mat<T> h1 = detail::norm_forward(p, s.ln1, x, c.ln1);
    Mat<T> a = detail::attention_forward(p, s.attn, h1, h1, src_blocks, src_blocks, cfg.n_heads, c.attn);
    detail::dropout(a, c.mask1, rate, rng);
    x += a;
    const Mat<T> h2 = detail::norm_forward(p, s.ln2, x, c.ln2);
    Mat<T> ff = detail::ffn_forward(p, s.ff1, s.ff2, h2, c.ffn);
    detail::dropout(ff, c.mask2, rate, rng);
    x += ff;
  }
  const Mat<T> enc_out = layout.encoder_final() ? detail::norm_forward(p, *layout.encoder_final(), x, f.enc_final) : x;

  // Decoder.
  const auto dec_emb = p.mat(layout.dec_emb());
  Mat<T> y(dec_rows, d);
  for (const auto& seg : f.segments)
    for (int j = 0; j < seg.dec_len; ++j) {
      const int row = seg.dec_off + j;
      y.row(row) = dec_emb.row(batch.src[static_cast<std::size_t>(f.dec_src_rows[static_cast<std::size_t>(row)])]) * emb_scale +
                   pe.row(j);
    }
  detail::dropout(y, f.dec_in_mask, rate, rng);

  f.dec.resize(layout.decoder().size());
  for (std::size_t l = 0; l < layout.decoder().size(); ++l) {
    const auto& s = layout.decoder()[l];
    auto& c = f.dec[l];
    const Mat<T> h1 = detail::norm_forward(p, s.ln1, y, c.ln1);
    Mat<T> a = detail::attention_forward(p, s.self_attn, h1, h1, dec_blocks, dec_blocks, cfg.n_heads, c.self_attn);
    detail::dropout(a, c.mask1, rate, rng);
    y += a;
    const Mat<T> h2 = detail::norm_forward(p, s.ln2, y, c.ln2);
    Mat<T> ca = detail::attention_forward(p, s.cross_attn, h2, enc_out, dec_blocks, src_blocks, cfg.n_heads, c.cross_attn);
    detail::dropout(ca, c.mask2, rate, rng);
    y += ca;
    const Mat<T> h3 = detail::norm_forward(p, s.ln3, y, c.ln3);
    Mat<T> ff = detail::ffn_forward(p, s.ff1, s.ff2, h3, c.ffn);
    detail::dropout(ff, c.mask3, rate, rng);
    y += ff;
  }
  f.dec_out = layout.decoder_final() ? detail::norm_forward(p, *layout.decoder_final(), y, f.dec_final) : y;

  Mat<T> logits = detail::linear_forward(p, layout.output(), f.dec_out);
  const ColVec<T> hi = logits.rowwise().maxCoeff();
  logits.colwise() -= hi;
  const ColVec<T> lse = logits.array().exp().rowwise().sum().log();
  logits.colwise() -= lse;
  f.logp = std::move(logits);
  return f;
}

/// Accumulates d loss / d parameters into `grads` given d loss / d logits
/// (pre-softmax) for every packed decoder row.
template <typename T>
void backward_logits(const Parameters<T>& p, const Batch& batch, const ForwardResult<T>& f, const Mat<T>& grad_logits,
                     Parameters<T>& grads) {
  const auto& cfg = p.config();
  const auto& layout = *p.layout;
  if (grad_logits.rows() != f.logp.rows() || grad_logits.cols() != f.logp.cols())
    throw std::invalid_argument("backward: gradient shape does not match forward output");
  if (grads.values.size() != p.values.size()) throw std::invalid_argument("backward: gradient buffer mismatch");
  const int d = cfg.d_model;
  const T emb_scale = std::sqrt(static_cast<T>(d));

  std::vector<std::pair<int, int>> src_blocks, dec_blocks;
  for (const auto& seg : f.segments) {
    src_blocks.emplace_back(seg.src_off, seg.src_len);
    dec_blocks.emplace_back(seg.dec_off, seg.dec_len);
  }

  Mat<T> dy = detail::linear_backward(p, layout.output(), f.dec_out, grad_logits, grads);
  if (layout.decoder_final()) dy = detail::norm_backward(p, *layout.decoder_final(), f.dec_final, dy, grads);

  Mat<T> denc = Mat<T>::Zero(static_cast<Eigen::Index>(batch.src.size()), d);
  for (std::size_t l = layout.decoder().size(); l-- > 0;) {
    const auto& s = layout.decoder()[l];
    const auto& c = f.dec[l];
    Mat<T> g = dy;
    detail::dropout_backward(g, c.mask3);
    dy += detail::norm_backward(p, s.ln3, c.ln3, detail::ffn_backward(p, s.ff1, s.ff2, c.ffn, g, grads), grads);

    g = dy;
    detail::dropout_backward(g, c.mask2);
    auto [dq, dkv] = detail::attention_backward(p, s.cross_attn, c.cross_attn, g, dec_blocks, src_blocks, cfg.n_heads, grads);
    dy += detail::norm_backward(p, s.ln2, c.ln2, dq, grads);
    denc += dkv;

    g = dy;
    detail::dropout_backward(g, c.mask1);
    auto [dq1, dkv1] = detail::attention_backward(p, s.self_attn, c.self_attn, g, dec_blocks, dec_blocks, cfg.n_heads, grads);
    dq1 += dkv1;
    dy += detail::norm_backward(p, s.ln1, c.ln1, dq1, grads);
  }
  detail::dropout_backward(dy, f.dec_in_mask);
  auto demb_dec = grads.mat(layout.dec_emb());
  for (Eigen::Index row = 0; row < dy.rows(); ++row)
    demb_dec.row(batch.src[static_cast<std::size_t>(f.dec_src_rows[static_cast<std::size_t>(row)])]) += dy.row(row) * emb_scale;

  Mat<T> dx = layout.encoder_final() ? detail::norm_backward(p, *layout.encoder_final(), f.enc_final, denc, grads) : denc;
  for (std::size_t l = layout.encoder().size(); l-- > 0;) {
    const auto& s = layout.encoder()[l];
    const auto& c = f.enc[l];
    Mat<T> g = dx;
    detail::dropout_backward(g, c.mask2);
    dx += detail::norm_backward(p, s.ln2, c.ln2, detail::ffn_backward(p, s.ff1, s.ff2, c.ffn, g, grads), grads);
    g = dx;
    detail::dropout_backward(g, c.mask1);
    auto [dq, dkv] = detail::attention_backward(p, s.attn, c.attn, g, src_blocks, src_blocks, cfg.n_heads, grads);
    dq += dkv;
    dx += detail::norm_backward(p, s.ln1, c.ln1, dq, grads);
  }
  detail::dropout_backward(dx, f.enc_in_mask);
  auto demb_src = grads.mat(layout.src_emb());
  for (Eigen::Index row = 0; row < dx.rows(); ++row)
    demb_src.row(batch.src[static_cast<std::size_t>(row)]) += dx.row(row) * emb_scale;
}

/// Same as backward_logits, but the upstream gradient is with respect to
/// the normalized log-probabilities.
template <typename T>
void backward(const Parameters<T>& p, const Batch& batch, const ForwardResult<T>& f, const Mat<T>& grad_logp,
              Parameters<T>& grads) {
  if (grad_logp.rows() != f.logp.rows() || grad_logp.cols() != f.logp.cols())
    throw std::invalid_argument("backward: gradient shape does not match forward output");
  const ColVec<T> total = grad_logp.rowwise().sum();
  const Mat<T> grad_logits = grad_logp - (f.logp.array().exp().colwise() * total.array()).matrix();
  backward_logits(p, batch, f, grad_logits, grads);
}

/// Closed-form parameter count for a configuration.
inline std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t d = static_cast<std::size_t>(c.d_model), f = static_cast<std::size_t>(c.d_ffn);
  const std::size_t attn = 4 * (d * d + d), ffn = d * f + f + f * d + d, ln = 2 * d;
  std::size_t n = static_cast<std::size_t>(c.src_vocab) * d * (c.tie_decoder_input ? 1 : 2);
  n += static_cast<std::size_t>(c.n_enc_layers) * (attn + ffn + 2 * ln) + (c.n_enc_layers > 0 ? ln : 0);
  n += static_cast<std::size_t>(c.n_dec_layers) * (2 * attn + ffn + 3 * ln) + (c.n_dec_layers > 0 ? ln : 0);
  n += d * static_cast<std::size_t>(c.tgt_vocab) + static_cast<std::size_t>(c.tgt_vocab);
  return n;
}

}  // namespace natlab
