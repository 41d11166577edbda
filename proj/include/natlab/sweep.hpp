#pragma once

// Grid sweeps over (probability setting x loss x seed) and the summary
// report built from their CSV output.
//
// Grid file: key=value blocks separated by blank lines. A block containing
// `block=defaults` sets defaults for all later blocks; every other block
// describes one probability setting and may list several losses and seeds
// as comma-separated values.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "natlab/corpus.hpp"
#include "natlab/kv_file.hpp"
#include "natlab/trainer.hpp"

namespace natlab {

struct SweepCell {
  std::string group;
  std::string setting;
  LossKind loss = LossKind::ctc;
  std::uint64_t seed = 1;
  CorpusConfig corpus;
  TrainConfig train;
  ModelConfig model;

  std::string key() const { return group + "," + setting + "," + loss_name(loss) + "," + std::to_string(seed); }
};

namespace detail {

inline const std::set<std::string>& grid_keys() {
  static const std::set<std::string> keys = {
      "block", "group", "setting", "loss", "seed", "lambda", "p_lo", "p_so1", "p_so2", "p_op",
      "n_train", "n_valid", "n_test", "vocab_divisor", "data_seed", "phase1_updates", "phase2_updates",
      "tokens_per_batch", "peak_lr", "warmup", "eval_interval", "eval_sentences", "d_model", "n_heads",
      "n_enc_layers", "n_dec_layers", "d_ffn", "dropout", "max_len"};
  return keys;
}

inline void check_label(const std::string& what, const std::string& s) {
  if (s.empty() || s.find_first_of(",\n\"/\\") != std::string::npos || s == "." || s == "..")
    throw ConfigError("grid: " + what + " '" + s + "' must be non-empty and free of commas, quotes, and slashes");
}

inline std::vector<std::string> list_values(const std::string& s) {
  std::vector<std::string> out;
  for (auto& part : split(s, ',')) {
    auto t = trim(part);
    if (!t.empty()) out.push_back(t);
  }
  if (out.empty()) throw ConfigError("grid: empty value list");
  return out;
}

}  // namespace detail

/// Expands a grid file into cells in file order (losses outer, seeds inner).
inline std::vector<SweepCell> parse_grid(const std::vector<KvRecord>& blocks) {
  KvRecord defaults;
  std::vector<SweepCell> cells;
  std::set<std::string> seen;
  for (const auto& block : blocks) {
    for (const auto& [k, v] : block.entries())
      if (!detail::grid_keys().count(k)) throw ConfigError("grid: unknown key '" + k + "'");
    if (block.get_or("block", "") == "defaults") {
      for (const auto& [k, v] : block.entries())
        if (k != "block") defaults.set(k, v);
      continue;
    }
    KvRecord kv = defaults;
    for (const auto& [k, v] : block.entries()) kv.set(k, v);

    SweepCell base;
    base.group = kv.get_or("group", "default");
    detail::check_label("group", base.group);
    auto& cc = base.corpus;
    cc.n_train = kv.get_int_or("n_train", 20000);
    cc.n_valid = kv.get_int_or("n_valid", 500);
    cc.n_test = kv.get_int_or("n_test", 1000);
    cc.vocab_divisor = static_cast<int>(kv.get_int_or("vocab_divisor", 100));
    cc.vocab = cc.vocab_divisor == 1 ? VocabSpec::paper_default() : VocabSpec::scaled(cc.vocab_divisor);
    cc.seed = static_cast<std::uint64_t>(kv.get_int_or("data_seed", 1));
    cc.reorder.p_lo = kv.get_double_or("p_lo", cc.reorder.p_lo);
    cc.reorder.p_so1 = kv.get_double_or("p_so1", cc.reorder.p_so1);
    cc.reorder.p_so2 = kv.get_double_or("p_so2", cc.reorder.p_so2);
    cc.reorder.p_op = kv.get_double_or("p_op", cc.reorder.p_op);
    cc.reorder.validate();
    if (kv.has("setting")) {
      base.setting = kv.get("setting");
    } else {
      base.setting = "p_lo=" + format_double(cc.reorder.p_lo) + ";p_so1=" + format_double(cc.reorder.p_so1) +
                     ";p_so2=" + format_double(cc.reorder.p_so2) + ";p_op=" + format_double(cc.reorder.p_op);
    }
    detail::check_label("setting", base.setting);

    auto& tc = base.train;
    tc.lambda = kv.get_double_or("lambda", tc.lambda);
    tc.phase1_updates = kv.get_int_or("phase1_updates", 3000);
    tc.phase2_updates = kv.get_int_or("phase2_updates", 3000);
    tc.tokens_per_batch = static_cast<int>(kv.get_int_or("tokens_per_batch", tc.tokens_per_batch));
    tc.peak_lr = kv.get_double_or("peak_lr", tc.peak_lr);
    tc.warmup = kv.get_int_or("warmup", tc.warmup);
    tc.eval_interval = kv.get_int_or("eval_interval", tc.eval_interval);
    tc.eval_sentences = kv.get_int_or("eval_sentences", tc.eval_sentences);

    auto& mc = base.model;
    mc.d_model = static_cast<int>(kv.get_int_or("d_model", mc.d_model));
    mc.n_heads = static_cast<int>(kv.get_int_or("n_heads", mc.n_heads));
    mc.n_enc_layers = static_cast<int>(kv.get_int_or("n_enc_layers", mc.n_enc_layers));
    mc.n_dec_layers = static_cast<int>(kv.get_int_or("n_dec_layers", mc.n_dec_layers));
    mc.d_ffn = static_cast<int>(kv.get_int_or("d_ffn", mc.d_ffn));
    mc.dropout = kv.get_double_or("dropout", mc.dropout);
    mc.max_len = static_cast<int>(kv.get_int_or("max_len", mc.max_len));

    for (const auto& loss : detail::list_values(kv.get_or("loss", "ctc")))
      for (const auto& seed : detail::list_values(kv.get_or("seed", "1"))) {
        SweepCell cell = base;
        cell.loss = parse_loss(loss);
        cell.seed = static_cast<std::uint64_t>(parse_int("seed", seed));
        cell.train.loss = cell.loss;
        cell.train.seed = cell.seed;
        cell.train.validate();
        if (!seen.insert(cell.key()).second) throw ConfigError("grid: duplicate cell " + cell.key());
        cells.push_back(std::move(cell));
      }
  }
  return cells;
}

inline std::vector<SweepCell> read_grid(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return parse_grid(parse_kv_blocks(in));
}

// ---------------------------------------------------------------------------
// Sweep CSV

inline constexpr const char* kSweepHeader =
    "group,setting,loss,seed,p_lo,p_so1,p_so2,p_op,lambda,accuracy,mean_length_ratio,repeated_token_rate,final_loss";

struct SweepRow {
  std::string group, setting, loss;
  std::uint64_t seed = 0;
  double p_lo = 0, p_so1 = 0, p_so2 = 0, p_op = 0, lambda = 0;
  double accuracy = 0, mean_length_ratio = 0, repeated_token_rate = 0, final_loss = 0;

  std::string key() const { return group + "," + setting + "," + loss + "," + std::to_string(seed); }

  std::string to_csv() const {
    std::ostringstream s;
    s << group << ',' << setting << ',' << loss << ',' << seed << ',' << format_double(p_lo) << ','
      << format_double(p_so1) << ',' << format_double(p_so2) << ',' << format_double(p_op) << ','
      << format_double(lambda) << ',' << format_double(accuracy) << ',' << format_double(mean_length_ratio) << ','
      << format_double(repeated_token_rate) << ',' << format_double(final_loss);
    return s.str();
  }

  static SweepRow from_csv(const std::string& line) {
    const auto f = split(line, ',');
    if (f.size() != 13) throw DataError("sweep csv: expected 13 fields in '" + line + "'");
    SweepRow r;
    r.group = f[0];
    r.setting = f[1];
    r.loss = f[2];
    r.seed = static_cast<std::uint64_t>(parse_int("seed", f[3]));
    r.p_lo = parse_double("p_lo", f[4]);
    r.p_so1 = parse_double("p_so1", f[5]);
    r.p_so2 = parse_double("p_so2", f[6]);
    r.p_op = parse_double("p_op", f[7]);
    r.lambda = parse_double("lambda", f[8]);
    r.accuracy = parse_double("accuracy", f[9]);
    r.mean_length_ratio = parse_double("mean_length_ratio", f[10]);
    r.repeated_token_rate = parse_double("repeated_token_rate", f[11]);
    r.final_loss = parse_double("final_loss", f[12]);
    return r;
  }
};

inline std::vector<SweepRow> read_sweep_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || trim(line) != kSweepHeader) throw DataError(path.string() + ": not a sweep CSV");
  std::vector<SweepRow> rows;
  while (std::getline(in, line))
    if (!trim(line).empty()) rows.push_back(SweepRow::from_csv(trim(line)));
  return rows;
}

inline std::string sweep_csv(std::span<const SweepRow> rows) {
  std::string out = std::string(kSweepHeader) + "\n";
  for (const auto& r : rows) out += r.to_csv() + "\n";
  return out;
}

/// Corpus directories are named by a hash of their manifest so that cells
/// sharing a setting share the data.
inline std::filesystem::path corpus_dir_for(const std::filesystem::path& work_dir, const CorpusConfig& cc) {
  return work_dir / "data" / hex64(fnv1a64(corpus_manifest(cc).to_string()));
}

inline std::filesystem::path run_dir_for(const std::filesystem::path& work_dir, const SweepCell& c) {
  return work_dir / "runs" / c.group /
         (std::string(loss_name(c.loss)) + "_seed" + std::to_string(c.seed) + "_" + hex64(fnv1a64(c.setting)).substr(0, 8));
}

/// Generates the corpus unless a complete one with the same manifest exists.
inline void ensure_corpus(const CorpusConfig& cc, const std::filesystem::path& dir) {
  const auto manifest = dir / "manifest.txt";
  if (std::filesystem::exists(manifest) && read_text_file(manifest) == corpus_manifest(cc).to_string()) return;
  generate_corpus(cc, dir);
}

struct SweepStats {
  std::size_t trained = 0;
  std::size_t skipped = 0;
};

/// Trains and evaluates every cell whose key is not yet in `out_csv`,
/// rewriting the CSV after each cell so partial results survive failures.
inline SweepStats sweep(const std::vector<SweepCell>& cells, const std::filesystem::path& work_dir,
                        const std::filesystem::path& out_csv, int threads = 1,
                        const std::function<void(const SweepCell&, const SweepRow&)>& on_row = {}) {
  std::vector<SweepRow> rows;
  if (std::filesystem::exists(out_csv)) rows = read_sweep_csv(out_csv);
  std::set<std::string> done;
  for (const auto& r : rows) done.insert(r.key());
  if (out_csv.has_parent_path()) ensure_directory(out_csv.parent_path());

  SweepStats stats;
  for (const auto& cell : cells) {
    if (done.count(cell.key())) {
      ++stats.skipped;
      continue;
    }
    const auto data_dir = corpus_dir_for(work_dir, cell.corpus);
    ensure_corpus(cell.corpus, data_dir);
    auto tc = cell.train;
    tc.threads = threads;
    const auto run_dir = run_dir_for(work_dir, cell);
    tc.checkpoint_dir = run_dir.string();
    const auto result = train(tc, cell.model, data_dir);
    const auto ev = evaluate(run_dir / kCheckpointFile, data_dir, "test");
    write_file_atomic(run_dir / "test_eval.csv", ev.report.per_sentence_csv());

    SweepRow row;
    row.group = cell.group;
    row.setting = cell.setting;
    row.loss = loss_name(cell.loss);
    row.seed = cell.seed;
    row.p_lo = cell.corpus.reorder.p_lo;
    row.p_so1 = cell.corpus.reorder.p_so1;
    row.p_so2 = cell.corpus.reorder.p_so2;
    row.p_op = cell.corpus.reorder.p_op;
    row.lambda = cell.train.lambda;
    row.accuracy = ev.report.corpus_accuracy;
    row.mean_length_ratio = ev.report.mean_length_ratio;
    row.repeated_token_rate = ev.report.repeated_token_rate;
    row.final_loss = result.final_loss;
    rows.push_back(row);
    done.insert(row.key());
    write_file_atomic(out_csv, sweep_csv(rows));
    ++stats.trained;
    if (on_row) on_row(cell, row);
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Report

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median: empty input");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct ReportCell {
  std::string group, setting;
  LossKind loss = LossKind::ctc;
  double median_accuracy = 0.0;
  std::size_t seeds = 0;
};

/// Median accuracy over seeds per (group, setting, loss), sorted by group,
/// then setting, then loss in canonical order.
inline std::vector<ReportCell> summarize(std::span<const SweepRow> rows) {
  std::map<std::tuple<std::string, std::string, int>, std::vector<double>> acc;
  for (const auto& r : rows)
    acc[{r.group, r.setting, static_cast<int>(parse_loss(r.loss))}].push_back(r.accuracy);
  std::vector<ReportCell> out;
  for (const auto& [k, v] : acc)
    out.push_back({std::get<0>(k), std::get<1>(k), static_cast<LossKind>(std::get<2>(k)), median(v), v.size()});
  return out;
}

inline const ReportCell* find_cell(std::span<const ReportCell> cells, const std::string& group, LossKind loss) {
  for (const auto& c : cells)
    if (c.group == group && c.loss == loss) return &c;
  return nullptr;
}

/// One text table per group: rows are settings, columns are losses.
inline std::string report_tables(std::span<const ReportCell> cells) {
  std::ostringstream out;
  std::vector<std::string> groups;
  for (const auto& c : cells)
    if (groups.empty() || groups.back() != c.group) groups.push_back(c.group);
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& g = groups[gi];
    std::vector<LossKind> losses;
    std::vector<std::string> settings;
    for (const auto& c : cells) {
      if (c.group != g) continue;
      if (std::find(losses.begin(), losses.end(), c.loss) == losses.end()) losses.push_back(c.loss);
      if (std::find(settings.begin(), settings.end(), c.setting) == settings.end()) settings.push_back(c.setting);
    }
    std::sort(losses.begin(), losses.end());
    if (gi) out << "\n";
    out << "## " << g << "\n\n| setting |";
    for (auto l : losses) out << ' ' << loss_name(l) << " |";
    out << "\n|---|";
    for (std::size_t i = 0; i < losses.size(); ++i) out << "---|";
    out << "\n";
    for (const auto& s : settings) {
      out << "| " << s << " |";
      for (auto l : losses) {
        const ReportCell* hit = nullptr;
        for (const auto& c : cells)
          if (c.group == g && c.setting == s && c.loss == l) hit = &c;
        char buf[32];
        if (hit) std::snprintf(buf, sizeof buf, " %.4f |", hit->median_accuracy);
        out << (hit ? buf : " - |");
      }
      out << "\n";
    }
  }
  return out.str();
}

/// `group,setting,loss,accuracy,seeds`, one line per report cell.
inline std::string report_plot_csv(std::span<const ReportCell> cells) {
  std::string out = "group,setting,loss,accuracy,seeds\n";
  for (const auto& c : cells)
    out += c.group + "," + c.setting + "," + loss_name(c.loss) + "," + format_double(c.median_accuracy) + "," +
           std::to_string(c.seeds) + "\n";
  return out;
}

}  // namespace natlab
