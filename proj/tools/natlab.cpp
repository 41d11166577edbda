// natlab command-line tool.
//
// Exit codes: 0 success, 1 usage, 2 verification failure, 3 I/O or data error.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "natlab/natlab.hpp"

namespace fs = std::filesystem;
using namespace natlab;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitVerify = 2;
constexpr int kExitIo = 3;

int env_threads() {
  int n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* s = std::getenv("NATLAB_THREADS")) {
    try {
      n = std::max(1, std::stoi(s));
    } catch (const std::exception&) {
      throw ConfigError(std::string("NATLAB_THREADS must be an integer, got '") + s + "'");
    }
  }
  return n;
}

// Replaces `--config FILE` with `--key=value` arguments for every key not
// already given on the command line. Keys may use '_' or '-'.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::vector<std::string> out;
  std::vector<std::string> files;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 == args.size()) throw ConfigError("--config needs a file");
      files.push_back(args[++i]);
    } else if (args[i].rfind("--config=", 0) == 0) {
      files.push_back(args[i].substr(9));
    } else {
      out.push_back(args[i]);
    }
  }
  auto given = [&](const std::string& flag) {
    for (const auto& a : out)
      if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
    return false;
  };
  for (const auto& f : files) {
    if (!fs::exists(f)) throw IoError("cannot open config file " + f);
    const auto kv = read_kv_file(f);
    for (const auto& [key, value] : kv.entries()) {
      std::string flag = "--" + key;
      std::replace(flag.begin() + 2, flag.end(), '_', '-');
      if (!given(flag)) out.push_back(flag + "=" + value);
    }
  }
  return out;
}

class RunManifest {
 public:
  RunManifest(std::string command, const std::vector<std::string>& args) : start_(std::chrono::steady_clock::now()) {
    kv_.set("tool", "natlab");
    kv_.set("version", NATLAB_VERSION);
    kv_.set("command", command);
    std::string joined;
    for (const auto& a : args) joined += (joined.empty() ? "" : " ") + a;
    kv_.set("args", joined);
  }

  void config(const std::string& key, const std::string& value) { kv_.set("config." + key, value); }
  template <typename T>
  void config(const std::string& key, const T& value) {
    if constexpr (std::is_same_v<T, bool>)
      kv_.set("config." + key, value);
    else if constexpr (std::is_floating_point_v<T>)
      kv_.set("config." + key, static_cast<double>(value));
    else
      kv_.set("config." + key, static_cast<std::int64_t>(value));
  }
  void seed(std::uint64_t s) { kv_.set("seed", s); }
  void input(const std::string& name, const fs::path& p) { file("input." + name, p); }
  void output(const std::string& name, const fs::path& p) { file("output." + name, p); }

  void write(const fs::path& path) {
    kv_.set("wall_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count());
    if (path.has_parent_path()) ensure_directory(path.parent_path());
    write_file_atomic(path, kv_.to_string());
  }

 private:
  void file(const std::string& key, const fs::path& p) {
    kv_.set(key, p.string());
    if (fs::is_regular_file(p)) kv_.set(key + ".fnv1a64", file_fingerprint(p));
  }
  KvRecord kv_;
  std::chrono::steady_clock::time_point start_;
};

fs::path sibling(const fs::path& file, const std::string& suffix) {
  auto p = file;
  p += suffix;
  return p;
}

LossKind loss_option(const std::string& s) {
  try {
    return parse_loss(s);
  } catch (const std::exception&) {
    throw ConfigError("unknown loss '" + s + "' (expected xe, axe, ctc, oaxe, moaxe, coco)");
  }
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::int64_t train = 300000, valid = 5000, test = 5000;
  double p_lo = 1.0, p_so1 = 1.0, p_so2 = 0.0, p_op = 0.0;
  std::uint64_t seed = 1;
  int vocab_divisor = 1;
  std::string out;
};

int cmd_gen_data(const GenDataArgs& a, const std::vector<std::string>& args) {
  RunManifest rm("gen-data", args);
  CorpusConfig cc;
  cc.n_train = a.train;
  cc.n_valid = a.valid;
  cc.n_test = a.test;
  cc.reorder.p_lo = a.p_lo;
  cc.reorder.p_so1 = a.p_so1;
  cc.reorder.p_so2 = a.p_so2;
  cc.reorder.p_op = a.p_op;
  cc.seed = a.seed;
  cc.vocab_divisor = a.vocab_divisor;
  if (a.vocab_divisor < 1) throw ConfigError("--vocab-divisor must be >= 1");
  cc.vocab = a.vocab_divisor == 1 ? VocabSpec::paper_default() : VocabSpec::scaled(a.vocab_divisor);
  cc.reorder.validate();
  if (cc.n_train < 1 || cc.n_valid < 0 || cc.n_test < 0) throw ConfigError("split sizes must be positive");
  generate_corpus(cc, a.out);
  const auto manifest = corpus_manifest(cc);
  for (const auto& [k, v] : manifest.entries()) rm.config(k, v);
  rm.seed(a.seed);
  for (const char* f : {"train.src", "train.tgt", "valid.src", "valid.tgt", "test.src", "test.tgt", "mapping.tsv", "manifest.txt"})
    rm.output(f, fs::path(a.out) / f);
  rm.write(fs::path(a.out) / "run_manifest.txt");
  std::cout << "wrote corpus to " << a.out << " (" << a.train << "/" << a.valid << "/" << a.test << " pairs)\n";
  return kExitOk;
}

struct TrainArgs {
  std::string data, out, loss = "ctc", phase1_loss;
  double lambda = kDefaultCocoLambda;
  std::int64_t phase1_updates = 1000, phase2_updates = 1000;
  int tokens_per_batch = 2048;
  double lr = 5e-4;
  std::int64_t warmup = 4000;
  std::uint64_t seed = 1;
  std::int64_t eval_interval = 500, eval_sentences = 0;
  ModelConfig model;
  bool untied = false;
};

int cmd_train(const TrainArgs& a, const std::vector<std::string>& args) {
  RunManifest rm("train", args);
  TrainConfig tc;
  tc.loss = loss_option(a.loss);
  if (!a.phase1_loss.empty()) tc.phase1_loss = loss_option(a.phase1_loss);
  tc.lambda = a.lambda;
  tc.phase1_updates = a.phase1_updates;
  tc.phase2_updates = a.phase2_updates;
  tc.tokens_per_batch = a.tokens_per_batch;
  tc.peak_lr = a.lr;
  tc.warmup = a.warmup;
  tc.seed = a.seed;
  tc.eval_interval = a.eval_interval;
  tc.eval_sentences = a.eval_sentences;
  tc.checkpoint_dir = a.out;
  tc.threads = env_threads();
  tc.validate();
  auto mc = a.model;
  mc.tie_decoder_input = !a.untied;
  mc.src_vocab = mc.tgt_vocab = 0;
  if (!fs::exists(fs::path(a.data) / "manifest.txt")) throw IoError("no corpus at " + a.data);
  const auto result = train(tc, mc, a.data);
  for (const auto& row : result.log)
    std::cerr << "update " << row.update << " phase " << row.phase << " loss " << row.loss_value << " valid_acc "
              << row.valid_accuracy << "\n";
  KvRecord resolved;
  tc.write(resolved);
  result.params.config().write(resolved);
  for (const auto& [k, v] : resolved.entries()) rm.config(k, v);
  rm.seed(a.seed);
  rm.input("corpus_manifest", fs::path(a.data) / "manifest.txt");
  rm.output("checkpoint", fs::path(a.out) / kCheckpointFile);
  rm.output("train_log", fs::path(a.out) / kTrainLogFile);
  rm.write(fs::path(a.out) / "run_manifest.txt");
  std::cout << "final_loss=" << format_double(result.final_loss) << " skipped_sentences=" << result.skipped_sentences
            << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint, data, split = "test", out_csv, predictions;
};

int cmd_eval(const EvalArgs& a, const std::vector<std::string>& args) {
  RunManifest rm("eval", args);
  if (a.split != "train" && a.split != "valid" && a.split != "test") throw ConfigError("--split must be train, valid, or test");
  const auto ev = evaluate(a.checkpoint, a.data, a.split);
  const fs::path csv = a.out_csv.empty() ? fs::path(a.checkpoint).parent_path() / (a.split + "_eval.csv") : fs::path(a.out_csv);
  write_file_atomic(csv, ev.report.per_sentence_csv());
  if (!a.predictions.empty()) {
    std::string text;
    for (const auto& p : ev.predictions) text += format_line(p) + "\n";
    write_file_atomic(a.predictions, text);
    rm.output("predictions", a.predictions);
  }
  rm.config("split", a.split);
  rm.config("decode", std::string(uses_ctc_length(ev.decode_kind) ? "ctc_greedy_2x" : "argmax_golden_length"));
  rm.input("checkpoint", a.checkpoint);
  rm.input("corpus_manifest", fs::path(a.data) / "manifest.txt");
  rm.output("per_sentence_csv", csv);
  rm.write(sibling(csv, ".run.txt"));
  const auto& r = ev.report;
  std::cout << "accuracy=" << format_double(r.corpus_accuracy) << " sentences=" << r.sentences.size()
            << " mean_length_ratio=" << format_double(r.mean_length_ratio)
            << " repeated_token_rate=" << format_double(r.repeated_token_rate) << "\n";
  return kExitOk;
}

struct SweepArgs {
  std::string grid, work, out;
};

int cmd_sweep(const SweepArgs& a, const std::vector<std::string>& args) {
  RunManifest rm("sweep", args);
  const auto cells = read_grid(a.grid);
  const fs::path out = a.out.empty() ? fs::path(a.work) / "sweep.csv" : fs::path(a.out);
  const auto stats = sweep(cells, a.work, out, env_threads(), [](const SweepCell& c, const SweepRow& r) {
    std::cerr << c.group << " " << c.setting << " " << r.loss << " seed " << r.seed << " accuracy " << r.accuracy << "\n";
  });
  rm.config("cells", static_cast<std::int64_t>(cells.size()));
  rm.input("grid", a.grid);
  rm.output("sweep_csv", out);
  rm.write(sibling(out, ".run.txt"));
  std::cout << "cells=" << cells.size() << " trained=" << stats.trained << " skipped=" << stats.skipped << "\n";
  return kExitOk;
}

struct OracleArgs {
  std::uint64_t seed = 1;
  oracle::SuiteLimits lim;
  std::string out_csv;
};

int cmd_oracle_check(const OracleArgs& a, const std::vector<std::string>& args) {
  RunManifest rm("oracle-check", args);
  if (a.lim.instances < 1 || a.lim.max_n < 1 || a.lim.max_m < a.lim.max_n || a.lim.max_vocab < 3)
    throw ConfigError("oracle-check: need instances >= 1, 1 <= max-n <= max-m, max-vocab >= 3");
  oracle::OracleBudget{}.check(a.lim.max_m, a.lim.max_n, a.lim.max_vocab, oracle::checked_pow(static_cast<std::uint64_t>(a.lim.max_vocab), a.lim.max_m));
  const auto results = oracle::run_oracle_suites(a.seed, a.lim);
  std::string csv = "suite,instances,max_deviation,tolerance,passed\n";
  bool ok = true;
  for (const auto& r : results) {
    csv += r.name + "," + std::to_string(r.instances) + "," + format_double(r.max_deviation) + "," +
           format_double(r.tolerance) + "," + (r.passed ? "1" : "0") + "\n";
    ok = ok && r.passed;
  }
  std::cout << csv;
  if (!a.out_csv.empty()) {
    write_file_atomic(a.out_csv, csv);
    rm.seed(a.seed);
    rm.output("csv", a.out_csv);
    rm.write(sibling(a.out_csv, ".run.txt"));
  }
  return ok ? kExitOk : kExitVerify;
}

struct GradArgs {
  std::uint64_t seed = 1;
  oracle::GradientLimits lim;
  double lambda = kDefaultCocoLambda;
  std::string out_csv;
  bool inject_sign_error = false;
};

int cmd_grad_check(const GradArgs& a, const std::vector<std::string>& args) {
  RunManifest rm("grad-check", args);
  if (a.lim.points < 1 || a.lim.max_n < 1 || a.lim.max_m < a.lim.max_n || a.lim.vocab < 3 || !(a.lim.step > 0.0))
    throw ConfigError("grad-check: need points >= 1, 1 <= max-n <= max-m, vocab >= 3, step > 0");
  auto cases = oracle::standard_gradient_cases(a.lambda);
  if (a.inject_sign_error)
    for (auto& c : cases)
      if (c.name == "ctc") {
        auto inner = c.eval;
        c.eval = [inner](const LogProbMatrix& lp, std::span<const int> t) {
          auto out = inner(lp, t);
          out.grad = -out.grad;
          return out;
        };
      }
  std::string csv = "loss,points,rejected,max_relative_error,max_row_sum,passed\n";
  bool ok = true;
  for (const auto& c : cases) {
    const auto r = oracle::run_gradient_suite(c, a.seed, a.lim);
    csv += r.name + "," + std::to_string(r.points) + "," + std::to_string(r.rejected) + "," +
           format_double(r.max_relative_error) + "," + format_double(r.max_row_sum) + "," + (r.passed ? "1" : "0") + "\n";
    ok = ok && r.passed;
  }
  std::cout << csv;
  if (!a.out_csv.empty()) {
    write_file_atomic(a.out_csv, csv);
    rm.seed(a.seed);
    rm.output("csv", a.out_csv);
    rm.write(sibling(a.out_csv, ".run.txt"));
  }
  return ok ? kExitOk : kExitVerify;
}

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string out_dir;
};

int cmd_report(const ReportArgs& a, const std::vector<std::string>& args) {
  RunManifest rm("report", args);
  std::vector<SweepRow> rows;
  for (const auto& in : a.inputs) {
    if (!fs::exists(in)) throw IoError("missing sweep CSV " + in);
    auto r = read_sweep_csv(in);
    rows.insert(rows.end(), r.begin(), r.end());
    rm.input(fs::path(in).filename().string(), in);
  }
  if (rows.empty()) throw DataError("report: no sweep rows");
  const auto cells = summarize(rows);
  const auto tables = report_tables(cells);
  std::cout << tables;
  if (!a.out_dir.empty()) {
    const fs::path dir(a.out_dir);
    ensure_directory(dir);
    write_file_atomic(dir / "report.md", tables);
    write_file_atomic(dir / "plot.csv", report_plot_csv(cells));
    rm.output("report", dir / "report.md");
    rm.output("plot_csv", dir / "plot.csv");
    rm.write(dir / "run_manifest.txt");
  }
  return kExitOk;
}

int run(int argc, char** argv) {
  std::vector<std::string> raw(argv + 1, argv + argc);
  const auto args = expand_config(raw);

  CLI::App app{"natlab: synthetic multi-modality corpora, NAT alignment losses, and a small NAT trainer"};
  app.set_version_flag("--version", NATLAB_VERSION);
  app.require_subcommand(1);

  GenDataArgs g;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic parallel corpus");
  gen->add_option("--train", g.train, "training pairs")->capture_default_str();
  gen->add_option("--valid", g.valid, "validation pairs")->capture_default_str();
  gen->add_option("--test", g.test, "test pairs")->capture_default_str();
  gen->add_option("--p-lo", g.p_lo, "probability of keeping NP-VP order")->capture_default_str();
  gen->add_option("--p-so1", g.p_so1, "probability of V-NP-RB order")->capture_default_str();
  gen->add_option("--p-so2", g.p_so2, "probability of V-RB-NP order")->capture_default_str();
  gen->add_option("--p-op", g.p_op, "probability of flipping determiner presence")->capture_default_str();
  gen->add_option("--seed", g.seed, "random seed")->capture_default_str();
  gen->add_option("--vocab-divisor", g.vocab_divisor, "shrink every vocabulary range by this factor")->capture_default_str();
  gen->add_option("--out", g.out, "output directory")->required();

  TrainArgs t;
  auto* tr = app.add_subcommand("train", "Train a NAT model on a corpus directory");
  tr->add_option("--data", t.data, "corpus directory")->required();
  tr->add_option("--out", t.out, "output directory for checkpoint and log")->required();
  tr->add_option("--loss", t.loss, "xe, axe, ctc, oaxe, moaxe, or coco")->capture_default_str();
  tr->add_option("--lambda", t.lambda, "CTC weight in coco")->capture_default_str();
  tr->add_option("--phase1-loss", t.phase1_loss, "pretraining loss (forced for oaxe, moaxe, coco)");
  tr->add_option("--phase1-updates", t.phase1_updates)->capture_default_str();
  tr->add_option("--phase2-updates", t.phase2_updates)->capture_default_str();
  tr->add_option("--tokens-per-batch", t.tokens_per_batch)->capture_default_str();
  tr->add_option("--lr", t.lr, "peak learning rate")->capture_default_str();
  tr->add_option("--warmup", t.warmup)->capture_default_str();
  tr->add_option("--seed", t.seed)->capture_default_str();
  tr->add_option("--eval-interval", t.eval_interval)->capture_default_str();
  tr->add_option("--eval-sentences", t.eval_sentences, "validation sentences per evaluation (0 = all)")->capture_default_str();
  tr->add_option("--d-model", t.model.d_model)->capture_default_str();
  tr->add_option("--heads", t.model.n_heads)->capture_default_str();
  tr->add_option("--enc-layers", t.model.n_enc_layers)->capture_default_str();
  tr->add_option("--dec-layers", t.model.n_dec_layers)->capture_default_str();
  tr->add_option("--ffn", t.model.d_ffn)->capture_default_str();
  tr->add_option("--dropout", t.model.dropout)->capture_default_str();
  tr->add_option("--max-len", t.model.max_len)->capture_default_str();
  tr->add_flag("--untied-decoder-input", t.untied, "separate embedding table for decoder inputs");

  EvalArgs e;
  auto* ev = app.add_subcommand("eval", "Score a checkpoint on a corpus split");
  ev->add_option("--checkpoint", e.checkpoint, "model.bin path")->required();
  ev->add_option("--data", e.data, "corpus directory")->required();
  ev->add_option("--split", e.split)->capture_default_str();
  ev->add_option("--out-csv", e.out_csv, "per-sentence CSV (default: next to the checkpoint)");
  ev->add_option("--predictions", e.predictions, "write decoded target lines here");

  SweepArgs s;
  auto* sw = app.add_subcommand("sweep", "Run a grid of corpus settings, losses, and seeds");
  sw->add_option("--grid", s.grid, "grid file")->required();
  sw->add_option("--work", s.work, "work directory for corpora and runs")->required();
  sw->add_option("--out", s.out, "sweep CSV (default: <work>/sweep.csv)");

  OracleArgs o;
  auto* oc = app.add_subcommand("oracle-check", "Compare losses against brute-force oracles");
  oc->add_option("--seed", o.seed)->capture_default_str();
  oc->add_option("--instances", o.lim.instances)->capture_default_str();
  oc->add_option("--max-m", o.lim.max_m)->capture_default_str();
  oc->add_option("--max-n", o.lim.max_n)->capture_default_str();
  oc->add_option("--max-vocab", o.lim.max_vocab)->capture_default_str();
  oc->add_option("--tolerance", o.lim.tolerance)->capture_default_str();
  oc->add_option("--out-csv", o.out_csv);

  GradArgs gr;
  auto* gc = app.add_subcommand("grad-check", "Compare loss gradients against finite differences");
  gc->add_option("--seed", gr.seed)->capture_default_str();
  gc->add_option("--points", gr.lim.points)->capture_default_str();
  gc->add_option("--max-m", gr.lim.max_m)->capture_default_str();
  gc->add_option("--max-n", gr.lim.max_n)->capture_default_str();
  gc->add_option("--vocab", gr.lim.vocab)->capture_default_str();
  gc->add_option("--step", gr.lim.step)->capture_default_str();
  gc->add_option("--tolerance", gr.lim.tolerance)->capture_default_str();
  gc->add_option("--lambda", gr.lambda)->capture_default_str();
  gc->add_option("--out-csv", gr.out_csv);
  gc->add_flag("--inject-sign-error", gr.inject_sign_error, "negate the CTC gradient (checks the checker)");

  ReportArgs r;
  auto* rp = app.add_subcommand("report", "Summarize sweep CSVs into per-group tables");
  rp->add_option("--in", r.inputs, "sweep CSV files")->required();
  rp->add_option("--out-dir", r.out_dir, "write report.md and plot.csv here");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  std::vector<std::string> full = {"natlab"};
  full.insert(full.end(), args.begin(), args.end());
  if (gen->parsed()) return cmd_gen_data(g, full);
  if (tr->parsed()) return cmd_train(t, full);
  if (ev->parsed()) return cmd_eval(e, full);
  if (sw->parsed()) return cmd_sweep(s, full);
  if (oc->parsed()) return cmd_oracle_check(o, full);
  if (gc->parsed()) return cmd_grad_check(gr, full);
  if (rp->parsed()) return cmd_report(r, full);
  return kExitUsage;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const oracle::BudgetExceeded& e) {
    std::cerr << "natlab: budget: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "natlab: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "natlab: " << e.what() << "\n";
    return kExitIo;
  }
}
