#pragma once

// Synthetic parallel corpora with controllable syntactic multi-modality.
//
// Source sentences are generated from three phrase-structure rules
//
//   Sen -> NP VP
//   NP  -> (DT) (RB)* (JJ)* N
//   VP  -> V (NP) (RB)*
//
// and "translated" by reordering the tree (Sen order, VP order, DT
// existence) and substituting every source word through a fixed
// per-POS bijection. Words are integers drawn from per-POS id ranges.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "natlab/kv_file.hpp"
#include "natlab/rng.hpp"

namespace natlab {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

/// Malformed corpus content (ids outside every range, bad lines).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class PosTag { Sen, NP, VP, DT, JJ, RB, N, V };

inline constexpr std::array<PosTag, 5> kTerminalTags = {PosTag::N, PosTag::V, PosTag::JJ, PosTag::RB,
                                                        PosTag::DT};

constexpr bool is_terminal(PosTag t) noexcept {
  return t == PosTag::DT || t == PosTag::JJ || t == PosTag::RB || t == PosTag::N || t == PosTag::V;
}

inline const char* tag_name(PosTag t) {
  switch (t) {
    case PosTag::Sen: return "Sen";
    case PosTag::NP: return "NP";
    case PosTag::VP: return "VP";
    case PosTag::DT: return "DT";
    case PosTag::JJ: return "JJ";
    case PosTag::RB: return "RB";
    case PosTag::N: return "N";
    case PosTag::V: return "V";
  }
  return "?";
}

inline PosTag parse_tag(const std::string& s) {
  for (PosTag t : {PosTag::Sen, PosTag::NP, PosTag::VP, PosTag::DT, PosTag::JJ, PosTag::RB, PosTag::N, PosTag::V})
    if (s == tag_name(t)) return t;
  throw ConfigError("unknown POS tag '" + s + "'");
}

struct SyntaxTree {
  PosTag tag = PosTag::Sen;
  std::vector<SyntaxTree> children;
  std::optional<TokenId> token;
  // DT created by a reorder flip; it has no source counterpart and is
  // lexicalized on the target side during translation.
  bool inserted = false;

  static SyntaxTree leaf(PosTag t) { return SyntaxTree{t, {}, std::nullopt, false}; }
  static SyntaxTree node(PosTag t, std::vector<SyntaxTree> kids) {
    return SyntaxTree{t, std::move(kids), std::nullopt, false};
  }

  bool terminal() const { return children.empty(); }

  bool has_child(PosTag t) const {
    return std::any_of(children.begin(), children.end(), [t](const SyntaxTree& c) { return c.tag == t; });
  }
};

/// Left-to-right terminal nodes.
inline void collect_leaves(const SyntaxTree& tree, std::vector<const SyntaxTree*>& out) {
  if (tree.terminal()) {
    out.push_back(&tree);
    return;
  }
  for (const auto& c : tree.children) collect_leaves(c, out);
}

inline std::vector<const SyntaxTree*> leaves(const SyntaxTree& tree) {
  std::vector<const SyntaxTree*> out;
  collect_leaves(tree, out);
  return out;
}

inline std::vector<PosTag> leaf_tags(const SyntaxTree& tree) {
  std::vector<PosTag> out;
  for (const auto* l : leaves(tree)) out.push_back(l->tag);
  return out;
}

inline TokenSeq leaf_tokens(const SyntaxTree& tree) {
  TokenSeq out;
  for (const auto* l : leaves(tree)) {
    if (!l->token) throw DataError("leaf_tokens: tree is not fully lexicalized");
    out.push_back(*l->token);
  }
  return out;
}

inline int tree_depth(const SyntaxTree& tree) {
  int d = 0;
  for (const auto& c : tree.children) d = std::max(d, tree_depth(c));
  return tree.terminal() ? 0 : d + 1;
}

/// Bracketed structure, e.g. "Sen(NP(DT,N),VP(V))". Tokens are omitted.
inline std::string structure_string(const SyntaxTree& tree) {
  std::string s = tag_name(tree.tag);
  if (tree.terminal()) return s;
  s += '(';
  for (std::size_t i = 0; i < tree.children.size(); ++i) {
    if (i) s += ',';
    s += structure_string(tree.children[i]);
  }
  return s + ')';
}

// ---------------------------------------------------------------------------
// Configuration

struct GenConfig {
  double p_dt = 0.5;
  double p_np_in_vp = 0.8;
  double star_continue = 0.3;
  int star_cap = 2;

  void validate() const {
    for (double p : {p_dt, p_np_in_vp, star_continue})
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("GenConfig: probabilities must lie in [0,1]");
    if (star_cap < 1) throw ConfigError("GenConfig: star_cap must be >= 1");
  }
};

struct ReorderConfig {
  double p_lo = 1.0;
  double p_so1 = 1.0;
  double p_so2 = 0.0;
  double p_op = 0.0;

  void validate() const {
    for (double p : {p_lo, p_so1, p_so2, p_op})
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("ReorderConfig: probabilities must lie in [0,1]");
    if (p_so1 + p_so2 > 1.0 + 1e-12) throw ConfigError("ReorderConfig: p_so1 + p_so2 must not exceed 1");
  }
};

struct IdRange {
  TokenId lo = 0;
  TokenId hi = -1;

  std::int64_t size() const { return static_cast<std::int64_t>(hi) - lo + 1; }
  bool contains(TokenId t) const { return t >= lo && t <= hi; }
  friend bool operator==(const IdRange&, const IdRange&) = default;
};

enum class Side { source, target };

struct VocabSpec {
  std::map<PosTag, IdRange> source;
  std::map<PosTag, IdRange> target;

  const std::map<PosTag, IdRange>& side(Side s) const { return s == Side::source ? source : target; }

  const IdRange& range(Side s, PosTag tag) const {
    const auto& m = side(s);
    auto it = m.find(tag);
    if (it == m.end())
      throw ConfigError(std::string("VocabSpec: no ") + (s == Side::source ? "source" : "target") +
                        " range for tag " + tag_name(tag));
    return it->second;
  }

  /// Smallest range covering every id of a side.
  IdRange span(Side s) const {
    const auto& m = side(s);
    if (m.empty()) throw ConfigError("VocabSpec: empty side");
    IdRange out{m.begin()->second.lo, m.begin()->second.hi};
    for (const auto& [tag, r] : m) {
      out.lo = std::min(out.lo, r.lo);
      out.hi = std::max(out.hi, r.hi);
    }
    return out;
  }

  std::optional<PosTag> tag_of(Side s, TokenId t) const {
    for (const auto& [tag, r] : side(s))
      if (r.contains(t)) return tag;
    return std::nullopt;
  }

  void validate() const {
    for (Side s : {Side::source, Side::target}) {
      std::vector<IdRange> rs;
      for (const auto& [tag, r] : side(s)) {
        if (!is_terminal(tag)) throw ConfigError("VocabSpec: ranges are only defined for terminal tags");
        if (r.size() < 1) throw ConfigError("VocabSpec: empty range");
        rs.push_back(r);
      }
      std::sort(rs.begin(), rs.end(), [](const IdRange& a, const IdRange& b) { return a.lo < b.lo; });
      for (std::size_t i = 1; i < rs.size(); ++i)
        if (rs[i].lo <= rs[i - 1].hi) throw ConfigError("VocabSpec: overlapping ranges");
    }
  }

  /// Full-size id ranges: 15K source and 15K target words.
  static VocabSpec paper_default() {
    VocabSpec v;
    v.source = {{PosTag::N, {1, 5000}},
                {PosTag::V, {5001, 10000}},
                {PosTag::JJ, {10001, 12500}},
                {PosTag::RB, {12501, 15000}},
                {PosTag::DT, {15001, 15003}}};
    v.target = {{PosTag::N, {15004, 20003}},
                {PosTag::V, {20004, 25003}},
                {PosTag::JJ, {25004, 27503}},
                {PosTag::RB, {27504, 30003}},
                {PosTag::DT, {30004, 30006}}};
    return v;
  }

  /// Shrinks every range of the default layout by `divisor`, keeping up to
  /// three ids per tag, and packs the ranges contiguously from id 1.
  static VocabSpec scaled(int divisor) {
    if (divisor < 1) throw ConfigError("VocabSpec::scaled: divisor must be >= 1");
    if (divisor == 1) return paper_default();
    const auto full = paper_default();
    VocabSpec v;
    TokenId next = 1;
    for (Side s : {Side::source, Side::target}) {
      auto& dst = s == Side::source ? v.source : v.target;
      for (PosTag tag : kTerminalTags) {
        const auto n = full.range(s, tag).size();
        const auto k = std::max<std::int64_t>(n / divisor, std::min<std::int64_t>(n, 3));
        dst[tag] = IdRange{next, static_cast<TokenId>(next + k - 1)};
        next = static_cast<TokenId>(next + k);
      }
    }
    return v;
  }
};

// ---------------------------------------------------------------------------
// Word mapping

/// Per-POS bijection from source ids to target ids.
class WordMapping {
 public:
  WordMapping() = default;

  WordMapping(const VocabSpec& vocab, std::map<PosTag, std::vector<TokenId>> forward)
      : vocab_(vocab), forward_(std::move(forward)) {
    for (const auto& [tag, fwd] : forward_) {
      const auto& src = vocab_.range(Side::source, tag);
      const auto& tgt = vocab_.range(Side::target, tag);
      if (static_cast<std::int64_t>(fwd.size()) != src.size())
        throw ConfigError(std::string("WordMapping: mapping for ") + tag_name(tag) + " is not total");
      std::vector<TokenId> inv(static_cast<std::size_t>(tgt.size()), -1);
      for (std::size_t i = 0; i < fwd.size(); ++i) {
        if (!tgt.contains(fwd[i])) throw ConfigError("WordMapping: target id out of range");
        auto& slot = inv[static_cast<std::size_t>(fwd[i] - tgt.lo)];
        if (slot != -1) throw ConfigError("WordMapping: mapping is not injective");
        slot = static_cast<TokenId>(src.lo + static_cast<TokenId>(i));
      }
      inverse_[tag] = std::move(inv);
    }
  }

  const VocabSpec& vocab() const { return vocab_; }

  TokenId map(TokenId src) const {
    const auto tag = vocab_.tag_of(Side::source, src);
    if (!tag || !forward_.count(*tag))
      throw DataError("token " + std::to_string(src) + " lies outside every source range");
    return forward_.at(*tag)[static_cast<std::size_t>(src - vocab_.range(Side::source, *tag).lo)];
  }

  TokenId unmap(TokenId tgt) const {
    const auto tag = vocab_.tag_of(Side::target, tgt);
    if (!tag || !inverse_.count(*tag))
      throw DataError("token " + std::to_string(tgt) + " lies outside every target range");
    return inverse_.at(*tag)[static_cast<std::size_t>(tgt - vocab_.range(Side::target, *tag).lo)];
  }

  /// TSV `src_id<TAB>tgt_id`, one line per source id in ascending order.
  std::string to_tsv() const {
    std::vector<std::pair<TokenId, TokenId>> rows;
    for (const auto& [tag, fwd] : forward_) {
      const auto lo = vocab_.range(Side::source, tag).lo;
      for (std::size_t i = 0; i < fwd.size(); ++i) rows.emplace_back(lo + static_cast<TokenId>(i), fwd[i]);
    }
    std::sort(rows.begin(), rows.end());
    std::string out;
    for (const auto& [s, t] : rows) out += std::to_string(s) + "\t" + std::to_string(t) + "\n";
    return out;
  }

  static WordMapping from_tsv(const VocabSpec& vocab, const std::string& text) {
    std::map<PosTag, std::vector<TokenId>> fwd;
    for (PosTag tag : kTerminalTags)
      if (vocab.source.count(tag)) fwd[tag].assign(static_cast<std::size_t>(vocab.range(Side::source, tag).size()), -1);
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto parts = split(line, '\t');
      if (parts.size() != 2) throw DataError("mapping: malformed line '" + line + "'");
      const auto s = static_cast<TokenId>(parse_int("src_id", parts[0]));
      const auto t = static_cast<TokenId>(parse_int("tgt_id", parts[1]));
      const auto tag = vocab.tag_of(Side::source, s);
      if (!tag) throw DataError("mapping: source id out of range");
      fwd[*tag][static_cast<std::size_t>(s - vocab.range(Side::source, *tag).lo)] = t;
    }
    return WordMapping(vocab, std::move(fwd));
  }

  friend bool operator==(const WordMapping& a, const WordMapping& b) { return a.forward_ == b.forward_; }

 private:
  VocabSpec vocab_;
  std::map<PosTag, std::vector<TokenId>> forward_;
  std::map<PosTag, std::vector<TokenId>> inverse_;
};

/// Uniformly random per-tag bijection, deterministic in `seed`.
inline WordMapping build_mapping(const VocabSpec& vocab, std::uint64_t seed) {
  vocab.validate();
  std::map<PosTag, std::vector<TokenId>> fwd;
  std::uint64_t tag_index = 0;
  for (PosTag tag : kTerminalTags) {
    ++tag_index;
    if (!vocab.source.count(tag)) continue;
    const auto& src = vocab.range(Side::source, tag);
    const auto& tgt = vocab.range(Side::target, tag);
    if (src.size() != tgt.size())
      throw ConfigError(std::string("build_mapping: source and target ranges for ") + tag_name(tag) +
                        " differ in size");
    std::vector<TokenId> ids(static_cast<std::size_t>(tgt.size()));
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = tgt.lo + static_cast<TokenId>(i);
    auto rng = make_stream(seed, /*domain=*/0x6d6170ULL, tag_index);
    shuffle(ids.begin(), ids.end(), rng);
    fwd[tag] = std::move(ids);
  }
  return WordMapping(vocab, std::move(fwd));
}

// ---------------------------------------------------------------------------
// Tree synthesis

namespace detail {

inline int draw_star(Rng& rng, const GenConfig& cfg) {
  int n = 0;
  while (n < cfg.star_cap && bernoulli(rng, cfg.star_continue)) ++n;
  return n;
}

inline SyntaxTree generate_np(Rng& rng, const GenConfig& cfg) {
  auto np = SyntaxTree::node(PosTag::NP, {});
  if (bernoulli(rng, cfg.p_dt)) np.children.push_back(SyntaxTree::leaf(PosTag::DT));
  for (int i = draw_star(rng, cfg); i > 0; --i) np.children.push_back(SyntaxTree::leaf(PosTag::RB));
  for (int i = draw_star(rng, cfg); i > 0; --i) np.children.push_back(SyntaxTree::leaf(PosTag::JJ));
  np.children.push_back(SyntaxTree::leaf(PosTag::N));
  return np;
}

inline SyntaxTree generate_vp(Rng& rng, const GenConfig& cfg) {
  auto vp = SyntaxTree::node(PosTag::VP, {SyntaxTree::leaf(PosTag::V)});
  if (bernoulli(rng, cfg.p_np_in_vp)) vp.children.push_back(generate_np(rng, cfg));
  for (int i = draw_star(rng, cfg); i > 0; --i) vp.children.push_back(SyntaxTree::leaf(PosTag::RB));
  return vp;
}

}  // namespace detail

inline SyntaxTree generate_tree(Rng& rng, const GenConfig& cfg) {
  cfg.validate();
  auto np = detail::generate_np(rng, cfg);
  auto vp = detail::generate_vp(rng, cfg);
  return SyntaxTree::node(PosTag::Sen, {std::move(np), std::move(vp)});
}

/// Assigns every unlexicalized terminal an id sampled uniformly from its
/// tag's range on `side`.
inline SyntaxTree lexicalize(SyntaxTree tree, const VocabSpec& vocab, Side side, Rng& rng) {
  if (tree.terminal()) {
    if (!tree.token) {
      const auto& r = vocab.range(side, tree.tag);
      tree.token = static_cast<TokenId>(uniform_int(rng, r.lo, r.hi));
    }
    return tree;
  }
  for (auto& c : tree.children) c = lexicalize(std::move(c), vocab, side, rng);
  return tree;
}

namespace detail {

inline void flip_dt(SyntaxTree& np, Rng& rng, double p_op) {
  if (!bernoulli(rng, p_op)) return;
  auto& kids = np.children;
  if (!kids.empty() && kids.front().tag == PosTag::DT) {
    kids.erase(kids.begin());
  } else {
    auto dt = SyntaxTree::leaf(PosTag::DT);
    dt.inserted = true;
    kids.insert(kids.begin(), std::move(dt));
  }
}

inline void reorder_vp(SyntaxTree& vp, const ReorderConfig& cfg, Rng& rng) {
  // Source layout is V (NP) (RB)*; the RB run moves as a single block.
  std::optional<SyntaxTree> verb, object;
  std::vector<SyntaxTree> adverbs;
  for (auto& c : vp.children) {
    if (c.tag == PosTag::V) verb = std::move(c);
    else if (c.tag == PosTag::NP) object = std::move(c);
    else adverbs.push_back(std::move(c));
  }
  const double u = uniform01(rng);
  if (object) flip_dt(*object, rng, cfg.p_op);

  std::vector<SyntaxTree> out;
  auto push_object = [&] { if (object) out.push_back(std::move(*object)); };
  auto push_adverbs = [&] { for (auto& a : adverbs) out.push_back(std::move(a)); };
  if (u < cfg.p_so1) {
    out.push_back(std::move(*verb));
    push_object();
    push_adverbs();
  } else if (u < cfg.p_so1 + cfg.p_so2) {
    out.push_back(std::move(*verb));
    push_adverbs();
    push_object();
  } else {
    push_adverbs();
    out.push_back(std::move(*verb));
    push_object();
  }
  vp.children = std::move(out);
}

}  // namespace detail

/// Applies the stochastic target-side word order: Sen keeps NP-VP with
/// probability p_lo; each VP keeps V-NP-RB with p_so1, becomes V-RB-NP with
/// p_so2, RB-V-NP otherwise; each NP flips DT existence with p_op.
inline SyntaxTree reorder(SyntaxTree tree, const ReorderConfig& cfg, Rng& rng) {
  cfg.validate();
  if (tree.tag != PosTag::Sen || tree.children.size() != 2)
    throw ConfigError("reorder: expected a Sen node with two children");
  const bool keep = bernoulli(rng, cfg.p_lo);
  for (auto& c : tree.children) {
    if (c.tag == PosTag::NP) detail::flip_dt(c, rng, cfg.p_op);
    else if (c.tag == PosTag::VP) detail::reorder_vp(c, cfg, rng);
  }
  const bool np_first = tree.children[0].tag == PosTag::NP;
  if (keep != np_first) std::swap(tree.children[0], tree.children[1]);
  return tree;
}

/// Left-to-right target tokens of a reordered source tree.
inline TokenSeq translate(const SyntaxTree& tree, const WordMapping& mapping, Rng& rng) {
  TokenSeq out;
  for (const auto* leaf : leaves(tree)) {
    if (leaf->inserted) {
      const auto& r = mapping.vocab().range(Side::target, PosTag::DT);
      out.push_back(static_cast<TokenId>(uniform_int(rng, r.lo, r.hi)));
      continue;
    }
    if (!leaf->token) throw DataError("translate: unlexicalized source terminal");
    out.push_back(mapping.map(*leaf->token));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpora

struct SentencePair {
  TokenSeq source;
  TokenSeq target;
  friend bool operator==(const SentencePair&, const SentencePair&) = default;
};

struct Synthesis {
  SyntaxTree source_tree;
  SyntaxTree target_tree;
  SentencePair pair;
};

/// Full pipeline for one sentence using a single generator.
inline Synthesis synthesize(Rng& rng, const GenConfig& gen, const ReorderConfig& reo, const VocabSpec& vocab,
                            const WordMapping& mapping) {
  auto src = lexicalize(generate_tree(rng, gen), vocab, Side::source, rng);
  auto tgt = reorder(src, reo, rng);
  SentencePair pair{leaf_tokens(src), translate(tgt, mapping, rng)};
  return Synthesis{std::move(src), std::move(tgt), std::move(pair)};
}

struct CorpusConfig {
  std::int64_t n_train = 300000;
  std::int64_t n_valid = 5000;
  std::int64_t n_test = 5000;
  GenConfig gen;
  ReorderConfig reorder;
  VocabSpec vocab = VocabSpec::paper_default();
  int vocab_divisor = 1;
  std::uint64_t seed = 1;
};

/// Contiguous model-side vocabulary derived from a VocabSpec. Target ids map
/// to [0, tgt_words); BLANK and EPSILON take the last two slots.
struct ModelVocab {
  TokenId src_base = 0;
  int src_size = 0;
  TokenId tgt_base = 0;
  int tgt_words = 0;

  int tgt_size() const { return tgt_words + 2; }
  int blank() const { return tgt_words; }
  int epsilon() const { return tgt_words + 1; }

  static ModelVocab from(const VocabSpec& v) {
    const auto s = v.span(Side::source);
    const auto t = v.span(Side::target);
    return ModelVocab{s.lo, static_cast<int>(s.size()), t.lo, static_cast<int>(t.size())};
  }

  int src_index(TokenId id) const {
    const int i = id - src_base;
    if (i < 0 || i >= src_size) throw DataError("source id " + std::to_string(id) + " outside model vocabulary");
    return i;
  }
  int tgt_index(TokenId id) const {
    const int i = id - tgt_base;
    if (i < 0 || i >= tgt_words) throw DataError("target id " + std::to_string(id) + " outside model vocabulary");
    return i;
  }
  TokenId tgt_id(int index) const { return tgt_base + index; }
};

inline std::string format_range(const IdRange& r) { return std::to_string(r.lo) + "-" + std::to_string(r.hi); }

inline IdRange parse_range(const std::string& key, const std::string& s) {
  const auto dash = s.find('-');
  if (dash == std::string::npos) throw ConfigError("invalid range for '" + key + "': " + s);
  return IdRange{static_cast<TokenId>(parse_int(key, s.substr(0, dash))),
                 static_cast<TokenId>(parse_int(key, s.substr(dash + 1)))};
}

inline KvRecord corpus_manifest(const CorpusConfig& cfg) {
  KvRecord m;
  m.set("format", "natlab-corpus-1");
  m.set("seed", cfg.seed);
  m.set("n_train", cfg.n_train);
  m.set("n_valid", cfg.n_valid);
  m.set("n_test", cfg.n_test);
  m.set("gen.p_dt", cfg.gen.p_dt);
  m.set("gen.p_np_in_vp", cfg.gen.p_np_in_vp);
  m.set("gen.star_continue", cfg.gen.star_continue);
  m.set("gen.star_cap", cfg.gen.star_cap);
  m.set("reorder.p_lo", cfg.reorder.p_lo);
  m.set("reorder.p_so1", cfg.reorder.p_so1);
  m.set("reorder.p_so2", cfg.reorder.p_so2);
  m.set("reorder.p_op", cfg.reorder.p_op);
  m.set("vocab.divisor", cfg.vocab_divisor);
  for (Side s : {Side::source, Side::target})
    for (PosTag tag : kTerminalTags)
      m.set(std::string("vocab.") + (s == Side::source ? "source." : "target.") + tag_name(tag),
            format_range(cfg.vocab.range(s, tag)));
  const auto mv = ModelVocab::from(cfg.vocab);
  m.set("model.src_base", static_cast<std::int64_t>(mv.src_base));
  m.set("model.src_vocab", mv.src_size);
  m.set("model.tgt_base", static_cast<std::int64_t>(mv.tgt_base));
  m.set("model.tgt_vocab", mv.tgt_size());
  m.set("model.blank_id", mv.blank());
  m.set("model.epsilon_id", mv.epsilon());
  return m;
}

inline CorpusConfig corpus_config_from_manifest(const KvRecord& m) {
  CorpusConfig c;
  c.seed = static_cast<std::uint64_t>(m.get_int("seed"));
  c.n_train = m.get_int("n_train");
  c.n_valid = m.get_int("n_valid");
  c.n_test = m.get_int("n_test");
  c.gen.p_dt = m.get_double("gen.p_dt");
  c.gen.p_np_in_vp = m.get_double("gen.p_np_in_vp");
  c.gen.star_continue = m.get_double("gen.star_continue");
  c.gen.star_cap = static_cast<int>(m.get_int("gen.star_cap"));
  c.reorder.p_lo = m.get_double("reorder.p_lo");
  c.reorder.p_so1 = m.get_double("reorder.p_so1");
  c.reorder.p_so2 = m.get_double("reorder.p_so2");
  c.reorder.p_op = m.get_double("reorder.p_op");
  c.vocab_divisor = static_cast<int>(m.get_int_or("vocab.divisor", 1));
  c.vocab = VocabSpec{};
  for (Side s : {Side::source, Side::target})
    for (PosTag tag : kTerminalTags) {
      const auto key = std::string("vocab.") + (s == Side::source ? "source." : "target.") + tag_name(tag);
      (s == Side::source ? c.vocab.source : c.vocab.target)[tag] = parse_range(key, m.get(key));
    }
  c.vocab.validate();
  return c;
}

inline const char* split_name(int split) {
  static constexpr const char* names[] = {"train", "valid", "test"};
  return names[split];
}

inline std::string format_line(const TokenSeq& seq) {
  std::string s;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) s += ' ';
    s += std::to_string(seq[i]);
  }
  s += '\n';
  return s;
}

/// Pair `index` of split `split` (0 train, 1 valid, 2 test). Every pair owns
/// a generator derived from (seed, split, index).
inline SentencePair corpus_pair(const CorpusConfig& cfg, const WordMapping& mapping, int split,
                                std::int64_t index) {
  auto rng = make_stream(cfg.seed, 0x73656e74ULL + static_cast<std::uint64_t>(split),
                         static_cast<std::uint64_t>(index));
  return synthesize(rng, cfg.gen, cfg.reorder, cfg.vocab, mapping).pair;
}

/// Writes <split>.src/.tgt for train/valid/test, mapping.tsv, and
/// manifest.txt under `out_dir`.
inline void generate_corpus(const CorpusConfig& cfg, const std::filesystem::path& out_dir) {
  if (cfg.n_train < 1 || cfg.n_valid < 1 || cfg.n_test < 1)
    throw ConfigError("generate_corpus: split sizes must be >= 1");
  cfg.gen.validate();
  cfg.reorder.validate();
  cfg.vocab.validate();
  ensure_directory(out_dir);
  const auto mapping = build_mapping(cfg.vocab, cfg.seed);
  const std::int64_t sizes[] = {cfg.n_train, cfg.n_valid, cfg.n_test};
  for (int split = 0; split < 3; ++split) {
    std::string src, tgt;
    for (std::int64_t i = 0; i < sizes[split]; ++i) {
      const auto pair = corpus_pair(cfg, mapping, split, i);
      src += format_line(pair.source);
      tgt += format_line(pair.target);
    }
    write_file_atomic(out_dir / (std::string(split_name(split)) + ".src"), src);
    write_file_atomic(out_dir / (std::string(split_name(split)) + ".tgt"), tgt);
  }
  write_file_atomic(out_dir / "mapping.tsv", mapping.to_tsv());
  write_file_atomic(out_dir / "manifest.txt", corpus_manifest(cfg).to_string());
}

inline std::vector<TokenSeq> read_token_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<TokenSeq> out;
  std::string line;
  while (std::getline(in, line)) {
    TokenSeq seq;
    std::istringstream ls(line);
    std::string tok;
    while (ls >> tok) seq.push_back(static_cast<TokenId>(parse_int(path.string(), tok)));
    out.push_back(std::move(seq));
  }
  return out;
}

struct Corpus {
  CorpusConfig config;
  std::vector<SentencePair> pairs;
};

inline Corpus read_corpus(const std::filesystem::path& dir, const std::string& split) {
  Corpus c;
  c.config = corpus_config_from_manifest(read_kv_file(dir / "manifest.txt"));
  const auto src = read_token_lines(dir / (split + ".src"));
  const auto tgt = read_token_lines(dir / (split + ".tgt"));
  if (src.size() != tgt.size()) throw DataError(split + ": source and target line counts differ");
  c.pairs.reserve(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].empty() || tgt[i].empty()) throw DataError(split + ": empty sentence at line " + std::to_string(i + 1));
    c.pairs.push_back({src[i], tgt[i]});
  }
  return c;
}

}  // namespace natlab
