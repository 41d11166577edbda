#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "natlab/model.hpp"

using namespace natlab;

namespace {

ModelConfig tiny_config(bool tied = true, double dropout = 0.0) {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.d_ffn = 12;
  c.src_vocab = 6;
  c.tgt_vocab = 7;
  c.max_len = 16;
  c.dropout = dropout;
  c.tie_decoder_input = tied;
  return c;
}

Batch two_sentences() {
  Batch b;
  b.add(std::vector<int>{1, 4, 2}, 5);
  b.add(std::vector<int>{3, 0}, 3);
  return b;
}

// Weighted sum of log-probabilities; its gradient with respect to logp is W.
double weighted(const Mat<double>& logp, const Mat<double>& w) { return (logp.array() * w.array()).sum(); }

Mat<double> random_weights(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  Rng rng(seed);
  Mat<double> w(rows, cols);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = uniform_real(rng, -1.0, 1.0);
  return w;
}

double gradient_check(const ModelConfig& cfg, bool train) {
  auto p = init_parameters<double>(cfg, 11);
  const auto batch = two_sentences();
  ForwardOptions opt{train, 5};
  const auto f = forward(p, batch, opt);
  const auto w = random_weights(f.logp.rows(), f.logp.cols(), 3);
  auto g = p.zeros_like();
  backward(p, batch, f, w, g);

  std::vector<double> fd(p.values.size());
  const double h = 1e-6;
  for (std::size_t i = 0; i < p.values.size(); ++i) {
    const double keep = p.values[i];
    p.values[i] = keep + h;
    const double up = weighted(forward(p, batch, opt).logp, w);
    p.values[i] = keep - h;
    const double down = weighted(forward(p, batch, opt).logp, w);
    p.values[i] = keep;
    fd[i] = (up - down) / (2 * h);
  }
  const Eigen::Map<const Eigen::VectorXd> a(g.values.data(), static_cast<Eigen::Index>(g.values.size()));
  const Eigen::Map<const Eigen::VectorXd> b(fd.data(), static_cast<Eigen::Index>(fd.size()));
  return (a - b).norm() / std::max(a.norm(), b.norm());
}

}  // namespace

TEST(Model, ParameterCountMatchesClosedForm) {
  for (bool tied : {true, false})
    for (int enc : {0, 1, 3})
      for (int dec : {0, 2}) {
        auto c = tiny_config(tied);
        c.n_enc_layers = enc;
        c.n_dec_layers = dec;
        const ModelLayout layout(c);
        EXPECT_EQ(layout.total(), parameter_count(c));
      }
  // 1 enc + 1 dec layer, d=8, ffn=12, src 6, tgt 7, tied.
  EXPECT_EQ(parameter_count(tiny_config()), 48u + (288 + 212 + 32 + 16) + (576 + 212 + 48 + 16) + 63u);
}

TEST(Model, TensorNamesAreUnique) {
  const ModelLayout layout(tiny_config(false));
  std::set<std::string> names;
  for (const auto& t : layout.tensors()) EXPECT_TRUE(names.insert(t.name).second) << t.name;
  EXPECT_TRUE(names.count("dec_emb"));
  EXPECT_FALSE(ModelLayout(tiny_config(true)).tensors().empty());
}

TEST(Model, OutputRowsAreNormalized) {
  const auto p = init_parameters<double>(tiny_config(), 1);
  const auto f = forward(p, two_sentences());
  ASSERT_EQ(f.logp.rows(), 8);
  for (Eigen::Index r = 0; r < f.logp.rows(); ++r) EXPECT_NEAR(f.logp.row(r).array().exp().sum(), 1.0, 1e-12);
  EXPECT_EQ(f.log_probs(1).rows(), 3);
}

TEST(Model, GradientMatchesFiniteDifferences) {
  EXPECT_LT(gradient_check(tiny_config(), false), 1e-6);
}

TEST(Model, GradientMatchesWithDropoutAndUntiedInput) {
  EXPECT_LT(gradient_check(tiny_config(false, 0.2), true), 1e-6);
}

TEST(Model, InitializationIsDeterministic) {
  const auto a = init_parameters<double>(tiny_config(), 7);
  const auto b = init_parameters<double>(tiny_config(), 7);
  const auto c = init_parameters<double>(tiny_config(), 8);
  EXPECT_EQ(a.values, b.values);
  EXPECT_NE(a.values, c.values);
}

TEST(Model, SentencesDoNotInteractInsideABatch) {
  const auto p = init_parameters<double>(tiny_config(), 2);
  const auto both = forward(p, two_sentences());
  Batch first, second;
  first.add(std::vector<int>{1, 4, 2}, 5);
  second.add(std::vector<int>{3, 0}, 3);
  EXPECT_LT((both.logp.topRows(5) - forward(p, first).logp).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((both.logp.bottomRows(3) - forward(p, second).logp).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Model, FirstOutputSeesTheWholeSource) {
  const auto p = init_parameters<double>(tiny_config(), 2);
  Batch a, b;
  a.add(std::vector<int>{1, 4, 2}, 4);
  b.add(std::vector<int>{1, 4, 5}, 4);
  EXPECT_GT((forward(p, a).logp.row(0) - forward(p, b).logp.row(0)).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Model, DecoderInputsUpsampleTheSource) {
  const auto p = init_parameters<double>(tiny_config(), 2);
  Batch b;
  b.add(std::vector<int>{1, 4, 2}, 6);
  EXPECT_EQ(forward(p, b).dec_src_rows, (std::vector<int>{0, 0, 1, 1, 2, 2}));
}

TEST(Model, DropoutOnlyInTrainingMode) {
  const auto p = init_parameters<double>(tiny_config(true, 0.3), 2);
  const auto batch = two_sentences();
  const auto eval1 = forward(p, batch);
  const auto eval2 = forward(p, batch, {false, 9});
  EXPECT_EQ(eval1.logp, eval2.logp);
  const auto t1 = forward(p, batch, {true, 9});
  const auto t2 = forward(p, batch, {true, 9});
  EXPECT_EQ(t1.logp, t2.logp);
  EXPECT_NE(t1.logp, eval1.logp);
}

TEST(Model, UntiedDecoderEmbeddingReceivesGradient) {
  const auto p = init_parameters<double>(tiny_config(false), 4);
  const auto batch = two_sentences();
  const auto f = forward(p, batch);
  auto g = p.zeros_like();
  backward(p, batch, f, random_weights(f.logp.rows(), f.logp.cols(), 1), g);
  EXPECT_GT(g.mat(p.layout->dec_emb()).norm(), 0.0);
  EXPECT_GT(g.mat(p.layout->src_emb()).norm(), 0.0);
  // Source id 5 never occurs: its embedding rows get no gradient.
  EXPECT_EQ(g.mat(p.layout->src_emb()).row(5).norm(), 0.0);
}

TEST(Model, RejectsOverlongAndOutOfVocabularyInput) {
  const auto p = init_parameters<double>(tiny_config(), 1);
  Batch longb;
  longb.add(std::vector<int>{1}, 17);
  EXPECT_THROW(forward(p, longb), std::length_error);
  Batch oov;
  oov.add(std::vector<int>{6}, 2);
  EXPECT_THROW(forward(p, oov), std::out_of_range);
}

TEST(Model, FloatAndDoubleAgree) {
  const auto pd = init_parameters<double>(tiny_config(), 3);
  const auto pf = pd.cast<float>();
  const auto batch = two_sentences();
  const Mat<double> diff = forward(pd, batch).logp - forward(pf, batch).logp.cast<double>();
  EXPECT_LT(diff.cwiseAbs().maxCoeff(), 1e-4);
}

TEST(Model, ConfigRoundTripsThroughKv) {
  KvRecord kv;
  const auto c = tiny_config(false, 0.25);
  c.write(kv);
  const auto r = ModelConfig::read(kv);
  EXPECT_EQ(r.d_model, 8);
  EXPECT_EQ(r.tie_decoder_input, false);
  EXPECT_DOUBLE_EQ(r.dropout, 0.25);
  auto bad = c;
  bad.n_heads = 3;
  EXPECT_THROW(bad.validate(), ConfigError);
}
