#include <gtest/gtest.h>

#include <cmath>

#include "structie/error.hpp"
#include "structie/model.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "support/tiny_model.hpp"

using namespace structie;
using namespace structie::testing;

TEST(StructureOps, BoundaryOpMatchesReference) {
  Rng rng(151);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(7));
    const DistanceProfile p = random_profile(n, rng);
    const Tensor oc = Tensor::constant({1, static_cast<std::size_t>(n - 1)}, p.oc());
    const Tensor od = Tensor::constant({1, static_cast<std::size_t>(n)}, p.od());
    const Tensor b = boundary_op(oc, od, {});
    const BoundaryDistribution want = boundary_distribution(p);
    ASSERT_EQ(b.shape(), (Shape{static_cast<std::size_t>(n), static_cast<std::size_t>(2 * n)}));
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        EXPECT_NEAR(b.at(i, j), want.left(i, j), 1e-15);
        EXPECT_NEAR(b.at(i, n + j), want.right(i, j), 1e-15);
      }
    }
    std::vector<double> scores(static_cast<std::size_t>(n));
    for (auto& s : scores) s = rng.normal();
    const Tensor pd = head_op(b, Tensor::constant({1, static_cast<std::size_t>(n)}, scores), HeadMode::kMarginal);
    const Eigen::MatrixXd ref = brute_head_distribution(p, scores);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) EXPECT_NEAR(pd.at(i, j), ref(i, j), 1e-12);
    }
  }
}

TEST(StructureOps, Gradients) {
  Rng rng(157);
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(5));
    const DistanceProfile p = random_profile(n, rng);
    Tensor oc = Tensor::variable({1, static_cast<std::size_t>(n - 1)}, p.oc());
    Tensor od = Tensor::variable({1, static_cast<std::size_t>(n)}, p.od());
    std::vector<double> s(static_cast<std::size_t>(n)), w(static_cast<std::size_t>(n * n));
    for (auto& x : s) x = rng.normal();
    for (auto& x : w) x = rng.normal();
    Tensor scores = Tensor::variable({1, static_cast<std::size_t>(n)}, s);
    const Tensor weights = Tensor::constant({static_cast<std::size_t>(n), static_cast<std::size_t>(n)}, w);
    for (HeadMode mode : {HeadMode::kMarginal, HeadMode::kSingleSpan}) {
      const auto r = gradcheck(
          [&] { return sum(mul(head_op(boundary_op(oc, od, {}), scores, mode), weights)); }, {oc, od, scores},
          {.floor = 1e-6});
      EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
    }
  }
}

TEST(ModelConfig, ValidatesAndRoundTrips) {
  ModelConfig c;
  c.vocab = 100;
  c.d_model = 24;
  c.heads = 3;
  c.use_sb = false;
  c.head_mode = HeadMode::kSingleSpan;
  c.weights.sdr = 0.0;
  EXPECT_NO_THROW(c.validate());
  const ModelConfig back = nlohmann::json(c).get<ModelConfig>();
  EXPECT_EQ(back.d_model, 24);
  EXPECT_FALSE(back.use_sb);
  EXPECT_EQ(back.head_mode, HeadMode::kSingleSpan);
  EXPECT_EQ(back.weights.sdr, 0.0);
  c.heads = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c.heads = 3;
  c.layers = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c.layers = 2;
  c.vocab = 10;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Corruption, MasksContiguousSpans) {
  Rng rng(163);
  std::vector<int> ids(20);
  for (int i = 0; i < 20; ++i) ids[static_cast<std::size_t>(i)] = 40 + i;
  for (int trial = 0; trial < 100; ++trial) {
    const Corruption c = corrupt(ids, 0.15, 3.0, Vocab::kFirstSentinel, Vocab::kNumSentinels, rng);
    EXPECT_EQ(c.masked, 3);
    int sentinels = 0, kept = 0;
    for (int id : c.input) {
      if (id >= Vocab::kFirstSentinel && id < Vocab::kFirstSentinel + Vocab::kNumSentinels) {
        EXPECT_EQ(id, Vocab::kFirstSentinel + sentinels);
        ++sentinels;
      } else {
        ++kept;
      }
    }
    EXPECT_EQ(kept, 17);
    EXPECT_GE(sentinels, 1);
  }
  Rng a(5), b(5);
  EXPECT_EQ(corrupt(ids, 0.3, 2.0, 11, 16, a).input, corrupt(ids, 0.3, 2.0, 11, 16, b).input);
  EXPECT_EQ(corrupt(ids, 0.0, 2.0, 11, 16, a).input, ids);
}

TEST(Model, EncoderShapesAndStructures) {
  TinySetup t = make_tiny();
  const EncoderOutput enc = t.model->encode(t.task.input, t.task.offset, t.task.n);
  EXPECT_EQ(enc.h1.rows(), t.task.input.size());
  EXPECT_EQ(enc.hstar.rows(), static_cast<std::size_t>(t.task.n));
  ASSERT_EQ(enc.heads.size(), 2u);
  for (const auto& h : enc.heads) {
    EXPECT_EQ(h.oc.cols(), static_cast<std::size_t>(t.task.n - 1));
    for (int i = 0; i < t.task.n; ++i) EXPECT_NEAR(h.pd_value.row(i).sum(), 1.0, 1e-9);
  }
  EXPECT_THROW(t.model->encode(t.task.input, t.task.offset, t.task.n + 1), Error);
}

TEST(Model, InduceUnderActionsMatchesEncodeWithActions) {
  TinySetup t = make_tiny();
  const ProfileActions actions = t.trace.actions();
  const EncoderOutput direct = t.model->encode(t.task.input, t.task.offset, t.task.n, &actions);
  EncoderOutput later = t.model->encode(t.task.input, t.task.offset, t.task.n);
  t.model->induce(later, &actions);
  for (std::size_t h = 0; h < direct.heads.size(); ++h) {
    EXPECT_EQ(direct.heads[h].profile.oc(), later.heads[h].profile.oc());
    EXPECT_LE((direct.heads[h].pd_value - later.heads[h].pd_value).cwiseAbs().maxCoeff(), 0.0);
  }
  ProfileActions bad = actions;
  bad.od.pop_back();
  EXPECT_THROW(t.model->induce(later, &bad), StructureError);
}

TEST(Model, DecoderIsCausal) {
  TinySetup t = make_tiny();
  const EncoderOutput enc = t.model->encode(t.task.input, t.task.offset, t.task.n);
  const ForestGraph graph = t.model->build_graph(enc);
  std::vector<int> prefix{Vocab::kBos, 40, 41, 42, 43};
  const Tensor a = t.model->decoder_log_probs(enc, &graph, prefix);
  prefix[4] = 60;
  prefix[3] = 61;
  const Tensor b = t.model->decoder_log_probs(enc, &graph, prefix);
  for (std::size_t row = 0; row < 3; ++row) {
    for (std::size_t c = 0; c < a.cols(); ++c) ASSERT_NEAR(a.at(row, c), b.at(row, c), 1e-12) << row;
  }
  const Tensor next = t.model->next_token_distribution(enc, &graph, prefix);
  double total = 0.0;
  for (double p : next.data()) total += p;
  EXPECT_NEAR(total, 1.0, 1e-9);
}

TEST(Model, BroadcastingChangesDecoding) {
  TinySetup t = make_tiny();
  const EncoderOutput enc = t.model->encode(t.task.input, t.task.offset, t.task.n);
  const ForestGraph graph = t.model->build_graph(enc);
  const double with = t.model->sequence_nll(enc, &graph, t.task.target).item();
  const double without = t.model->sequence_nll(enc, nullptr, t.task.target).item();
  EXPECT_NE(with, without);
  EXPECT_GT(with, 0.0);
  const auto out = t.model->greedy_decode(enc, &graph, 5);
  EXPECT_LE(out.size(), 5u);
}

TEST(Model, ForestGraphCoversBothForests) {
  TinySetup t = make_tiny();
  const EncoderOutput enc = t.model->encode(t.sentence, 0, static_cast<int>(t.sentence.size()));
  const ForestGraph g = t.model->build_graph(enc);
  EXPECT_EQ(g.dep_nodes.rows(), t.sentence.size());
  EXPECT_EQ(g.con_nodes.rows(), g.con.spans.size());
  EXPECT_TRUE(g.con.contains(Span{0, static_cast<int>(t.sentence.size()) - 1}));
  EXPECT_FALSE(g.dep.arcs.empty());
}

TEST(Model, PosttrainLossesAreFiniteAndWeighted) {
  TinySetup t = make_tiny();
  Rng rng(3);
  const PosttrainLosses l = t.model->posttrain_losses(t.sentence, rng);
  for (const Tensor* x : {&l.lm, &l.dep, &l.con, &l.sdr}) {
    EXPECT_TRUE(std::isfinite(x->item()));
    EXPECT_GE(x->item(), 0.0);
  }
  EXPECT_NEAR(l.total.item(), l.lm.item() + l.dep.item() + l.con.item() + l.sdr.item(), 1e-9);
}

TEST(Model, SdrPenalizesOverlap) {
  TinySetup t = make_tiny();
  const EncoderOutput enc = t.model->encode(t.sentence, 0, static_cast<int>(t.sentence.size()));
  double want = 0.0;
  const Eigen::MatrixXd& a = enc.heads[0].pd_value;
  const Eigen::MatrixXd& b = enc.heads[1].pd_value;
  want = 2.0 * a.cwiseProduct(b).norm();
  EXPECT_NEAR(t.model->loss_sdr(enc).item(), want, 1e-12);
}

class LossGradient : public ::testing::TestWithParam<int> {};

TEST_P(LossGradient, MatchesFiniteDifferences) {
  TinySetup t = make_tiny();
  auto cases = loss_cases(t);
  const auto& c = cases.at(static_cast<std::size_t>(GetParam()));
  const auto r = gradcheck(c.loss, c.inputs, loss_check_options());
  EXPECT_LT(r.max_rel_error, 1e-3) << c.name << ": " << r.worst;
  EXPECT_GT(r.checked, 20);
}

std::string component_name(const ::testing::TestParamInfo<int>& info) {
  static const char* names[] = {"LW", "LD", "LC", "LSDR", "LTask", "Policy"};
  return names[info.param];
}

INSTANTIATE_TEST_SUITE_P(EveryComponent, LossGradient, ::testing::Range(0, 6), component_name);
