#include <gtest/gtest.h>

#include <filesystem>

#include "natlab/trainer.hpp"

using namespace natlab;
namespace fs = std::filesystem;

namespace {

ModelConfig small_model(const ModelVocab& v) {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.d_ffn = 32;
  c.dropout = 0.0;
  return bind_vocab(c, v);
}

CorpusConfig tiny_corpus(std::int64_t n_train = 20) {
  CorpusConfig c;
  c.n_train = n_train;
  c.n_valid = 10;
  c.n_test = 10;
  c.vocab = VocabSpec::scaled(1000);
  c.vocab_divisor = 1000;
  c.seed = 4;
  return c;
}

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("natlab_trainer_" + name);
  fs::remove_all(d);
  return d;
}

struct Data {
  ModelVocab vocab;
  std::vector<Example> train, valid;
};

Data make_data(std::int64_t n_train = 20) {
  const auto cfg = tiny_corpus(n_train);
  const auto mapping = build_mapping(cfg.vocab, cfg.seed);
  Data d;
  d.vocab = ModelVocab::from(cfg.vocab);
  std::vector<SentencePair> tr, va;
  for (std::int64_t i = 0; i < cfg.n_train; ++i) tr.push_back(corpus_pair(cfg, mapping, 0, i));
  for (std::int64_t i = 0; i < cfg.n_valid; ++i) va.push_back(corpus_pair(cfg, mapping, 1, i));
  d.train = to_examples(tr, d.vocab);
  d.valid = to_examples(va, d.vocab);
  return d;
}

TrainConfig quick(LossKind loss, std::int64_t p1, std::int64_t p2) {
  TrainConfig t;
  t.loss = loss;
  t.phase1_updates = p1;
  t.phase2_updates = p2;
  t.tokens_per_batch = 32;
  t.warmup = 20;
  t.peak_lr = 3e-3;
  t.eval_interval = 10;
  return t;
}

}  // namespace

TEST(TrainConfig, PretrainingLosses) {
  EXPECT_EQ(pretraining_loss(LossKind::oaxe), LossKind::xe);
  EXPECT_EQ(pretraining_loss(LossKind::coco), LossKind::ctc);
  EXPECT_EQ(pretraining_loss(LossKind::ctc), LossKind::ctc);
  EXPECT_EQ(pretraining_loss(LossKind::axe), LossKind::axe);
  TrainConfig t;
  t.loss = LossKind::oaxe;
  t.phase1_loss = LossKind::ctc;
  EXPECT_THROW(t.validate(), ConfigError);
  t.phase1_loss = LossKind::xe;
  EXPECT_NO_THROW(t.validate());
  t.phase1_updates = -1;
  EXPECT_THROW(t.validate(), ConfigError);
}

TEST(TrainConfig, DecoderLengthRule) {
  EXPECT_EQ(decoder_length(LossKind::ctc, 5, 4), 10);
  EXPECT_EQ(decoder_length(LossKind::coco, 5, 4), 10);
  EXPECT_EQ(decoder_length(LossKind::oaxe, 5, 4), 4);
  EXPECT_EQ(decoder_length(LossKind::axe, 5, 4), 4);
}

TEST(Schedule, WarmupThenInverseSqrt) {
  EXPECT_DOUBLE_EQ(learning_rate(100, 1e-3, 100), 1e-3);
  EXPECT_DOUBLE_EQ(learning_rate(50, 1e-3, 100), 5e-4);
  EXPECT_DOUBLE_EQ(learning_rate(400, 1e-3, 100), 5e-4);
  for (std::int64_t s = 1; s < 300; ++s) EXPECT_LE(learning_rate(s, 1e-3, 100), 1e-3 + 1e-18);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ModelConfig c;
  c.d_model = 2;
  c.n_heads = 1;
  c.n_enc_layers = 0;
  c.n_dec_layers = 0;
  c.src_vocab = 1;
  c.tgt_vocab = 3;
  auto p = init_parameters<double>(c, 1);
  const auto before = p.values;
  auto g = p.zeros_like();
  for (std::size_t i = 0; i < g.values.size(); ++i) g.values[i] = (i % 2 ? 2.0 : -3.0);
  Adam<double> adam;
  adam.step(p, g, 0.01, 0.9, 0.98, 1e-12);
  for (std::size_t i = 0; i < p.values.size(); ++i) EXPECT_NEAR(p.values[i] - before[i], i % 2 ? -0.01 : 0.01, 1e-9);
}

TEST(BatchStream, RespectsBudgetAndIsDeterministic) {
  const auto d = make_data();
  BatchStream a(d.train.size(), 20, d.train, 3), b(d.train.size(), 20, d.train, 3);
  for (int k = 0; k < 30; ++k) {
    const auto x = a.next();
    EXPECT_EQ(x, b.next());
    int tokens = 0;
    for (auto i : x) tokens += static_cast<int>(d.train[i].tgt.size());
    EXPECT_GE(tokens, 20);
    int without_last = tokens - static_cast<int>(d.train[x.back()].tgt.size());
    EXPECT_LT(without_last, 20);
  }
}

TEST(Training, IsDeterministic) {
  const auto d = make_data();
  const auto mc = small_model(d.vocab);
  const auto r1 = train_examples(quick(LossKind::coco, 10, 10), mc, d.train, d.valid);
  const auto r2 = train_examples(quick(LossKind::coco, 10, 10), mc, d.train, d.valid);
  EXPECT_EQ(r1.params.values, r2.params.values);
  EXPECT_EQ(r1.final_loss, r2.final_loss);
  ASSERT_EQ(r1.log.size(), 2u);
  EXPECT_EQ(r1.log[0].phase, 1);
  EXPECT_EQ(r1.log[1].phase, 2);
}

TEST(Training, ThreadCountDoesNotChangeResult) {
  const auto d = make_data();
  const auto mc = small_model(d.vocab);
  auto tc = quick(LossKind::oaxe, 5, 5);
  const auto r1 = train_examples(tc, mc, d.train, d.valid);
  tc.threads = 3;
  const auto r2 = train_examples(tc, mc, d.train, d.valid);
  EXPECT_EQ(r1.params.values, r2.params.values);
}

TEST(Training, PhaseSwitchHappensExactlyAtPhase1Updates) {
  const auto d = make_data();
  auto tc = quick(LossKind::oaxe, 7, 5);
  tc.eval_interval = 1;
  const auto r = train_examples(tc, small_model(d.vocab), d.train, {});
  ASSERT_EQ(r.log.size(), 12u);
  for (const auto& row : r.log) EXPECT_EQ(row.phase, row.update <= 7 ? 1 : 2);
}

TEST(Training, PureCtcRunHasOnlyPhaseTwo) {
  const auto d = make_data();
  const auto r = train_examples(quick(LossKind::ctc, 0, 10), small_model(d.vocab), d.train, d.valid);
  for (const auto& row : r.log) EXPECT_EQ(row.phase, 2);
}

TEST(Training, XeLossDecreasesOnTinyCorpus) {
  const auto d = make_data(10);
  const auto mc = small_model(d.vocab);
  auto tc = quick(LossKind::xe, 0, 300);
  tc.eval_interval = 0;
  const auto before = dataset_loss(init_parameters<float>(mc, stream_seed(tc.seed, 0x696e6974ULL)), d.train,
                                   LossKind::xe, tc.lambda);
  const auto r = train_examples(tc, mc, d.train, {});
  const double after = dataset_loss(r.params, d.train, LossKind::xe, tc.lambda);
  EXPECT_LT(after, 0.25 * before);
  EXPECT_GT(evaluate_examples(r.params, d.train, LossKind::xe).corpus_accuracy, 0.8);
}

TEST(Evaluation, UntrainedModelIsNearChanceAndInRange) {
  const auto d = make_data();
  const auto p = init_parameters<float>(small_model(d.vocab), 1);
  for (LossKind k : {LossKind::xe, LossKind::ctc}) {
    std::vector<std::vector<int>> pred;
    const auto r = evaluate_examples(p, d.valid, k, &pred);
    EXPECT_LT(r.corpus_accuracy, 0.5);
    for (const auto& s : r.sentences) {
      EXPECT_GE(s.accuracy, 0.0);
      EXPECT_LE(s.accuracy, 1.0);
    }
    for (const auto& seq : pred)
      for (int t : seq) EXPECT_LT(t, d.vocab.tgt_words);
  }
}

TEST(Checkpoint, RoundTripsAndRejectsCorruption) {
  const auto dir = temp_dir("ckpt");
  const auto d = make_data();
  auto mc = small_model(d.vocab);
  mc.tie_decoder_input = false;
  const auto p = init_parameters<float>(mc, 9);
  KvRecord extra;
  extra.set("train.loss", "ctc");
  save_checkpoint(dir / "m.bin", p, extra);
  const auto loaded = load_checkpoint(dir / "m.bin");
  EXPECT_EQ(loaded.params.values, p.values);
  EXPECT_EQ(loaded.manifest.get("train.loss"), "ctc");
  EXPECT_FALSE(loaded.params.config().tie_decoder_input);
  EXPECT_EQ(encode_checkpoint(loaded.params), read_text_file(dir / "m.bin"));

  const auto bytes = read_text_file(dir / "m.bin");
  EXPECT_EQ(bytes.substr(0, 7), "NATLAB1");
  write_file_atomic(dir / "m.bin", "NATLAB2" + bytes.substr(7));
  EXPECT_THROW(load_checkpoint(dir / "m.bin"), CheckpointError);
  write_file_atomic(dir / "m.bin", bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(load_checkpoint(dir / "m.bin"), CheckpointError);
  fs::remove_all(dir);
}

TEST(TrainOnDisk, WritesArtifactsAndEvaluates) {
  const auto dir = temp_dir("disk");
  generate_corpus(tiny_corpus(), dir / "data");
  auto tc = quick(LossKind::ctc, 0, 20);
  tc.checkpoint_dir = (dir / "run").string();
  ModelConfig mc;
  mc.d_model = 16;
  mc.n_heads = 2;
  mc.d_ffn = 32;
  train(tc, mc, dir / "data");
  EXPECT_TRUE(fs::exists(dir / "run" / "model.bin"));
  const auto log = read_text_file(dir / "run" / "train_log.csv");
  EXPECT_EQ(log.substr(0, log.find('\n')), "update,phase,loss_value,valid_accuracy");
  const auto bytes = read_text_file(dir / "run" / "model.bin");
  train(tc, mc, dir / "data");
  EXPECT_EQ(read_text_file(dir / "run" / "model.bin"), bytes);

  const auto ev = evaluate(dir / "run" / "model.bin", dir / "data", "test");
  EXPECT_EQ(ev.decode_kind, LossKind::ctc);
  EXPECT_EQ(ev.predictions.size(), 10u);
  EXPECT_GE(ev.report.corpus_accuracy, 0.0);
  EXPECT_LE(ev.report.corpus_accuracy, 1.0);

  mc.src_vocab = 3;
  EXPECT_THROW(train(tc, mc, dir / "data"), DataError);
  fs::remove_all(dir);
}
