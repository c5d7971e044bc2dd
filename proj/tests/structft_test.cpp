#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "structie/error.hpp"
#include "structie/structft.hpp"
#include "support/tiny_model.hpp"

using namespace structie;
using namespace structie::testing;

namespace {

bool any_grad(const ParameterStore& store) {
  for (const auto& p : store.all()) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) {
      if (g != 0.0) return true;
    }
  }
  return false;
}

void clear(const ParameterStore& store) {
  for (auto p : store.all()) p.clear_grad();
}

}  // namespace

TEST(Policy, SquashAndDensity) {
  EXPECT_DOUBLE_EQ(squash(0.0), 0.0);
  EXPECT_NEAR(squash(std::log(3.0)), 0.5, 1e-15);
  EXPECT_NEAR(squash(-std::log(3.0)), -0.5, 1e-15);
  EXPECT_LT(squash(50.0), 1.0 + 1e-15);
  EXPECT_NEAR(gaussian_log_density(1.0, 1.0, 1.0), -0.5 * std::log(2.0 * std::numbers::pi), 1e-15);
  EXPECT_NEAR(gaussian_log_density(3.0, 1.0, 2.0), -0.5 - std::log(2.0) - 0.5 * std::log(2.0 * std::numbers::pi),
              1e-15);
}

TEST(Policy, ApplyActionsAdds) {
  const DistanceProfile p({1.0, 2.0}, {0.5, 0.0, -1.0});
  ActionTrace t;
  t.act_c = {0.25, -0.5};
  t.act_d = {0.1, 0.2, 0.3};
  const DistanceProfile q = apply_actions(p, t);
  EXPECT_EQ(q.oc(), (std::vector<double>{1.25, 1.5}));
  EXPECT_NEAR(q.od()[2], -0.7, 1e-15);
  t.act_d.pop_back();
  EXPECT_THROW(apply_actions(p, t), StructureError);
}

TEST(Policy, SamplesAreSquashedAndLogProbIsTheGaussianSum) {
  TinySetup t = make_tiny();
  const EncoderOutput enc = t.model->encode(t.task.input, t.task.offset, t.task.n);
  const PolicyMeans means = t.policy->means(enc);
  ASSERT_EQ(means.c.rows(), static_cast<std::size_t>(t.task.n - 1));
  ASSERT_EQ(means.d.rows(), static_cast<std::size_t>(t.task.n));
  Rng rng(9);
  const ActionTrace trace = t.policy->sample(means, rng);
  double want = 0.0;
  const double sigma = t.policy->config().sigma;
  for (std::size_t i = 0; i < trace.raw_c.size(); ++i) {
    EXPECT_DOUBLE_EQ(trace.act_c[i], squash(trace.raw_c[i]));
    want += gaussian_log_density(trace.raw_c[i], means.c.at(i, 0), sigma);
  }
  for (std::size_t i = 0; i < trace.raw_d.size(); ++i) {
    EXPECT_DOUBLE_EQ(trace.act_d[i], squash(trace.raw_d[i]));
    want += gaussian_log_density(trace.raw_d[i], means.d.at(i, 0), sigma);
  }
  EXPECT_NEAR(t.policy->log_prob(means, trace).item(), want, 1e-12);
  const ActionTrace mean = t.policy->mean_actions(means);
  for (std::size_t i = 0; i < mean.raw_d.size(); ++i) EXPECT_DOUBLE_EQ(mean.raw_d[i], means.d.at(i, 0));
}

TEST(Policy, MeansDoNotBackpropagateIntoTheModel) {
  TinySetup t = make_tiny();
  const EncoderOutput enc = t.model->encode(t.task.input, t.task.offset, t.task.n);
  const Tensor lp = t.policy->log_prob(t.policy->means(enc), t.trace);
  backward(policy_loss(lp, 1.0, 0.0));
  EXPECT_FALSE(any_grad(t.model->params()));
  EXPECT_TRUE(any_grad(t.policy->params()));
}

TEST(Baseline, ExponentialMovingAverage) {
  RewardBaseline b(0.9, true);
  EXPECT_EQ(b.value(7, -2.0), -2.0);
  b.update(7, -2.0);
  EXPECT_EQ(b.value(7, -10.0), -2.0);
  b.update(7, -1.0);
  EXPECT_NEAR(b.value(7, 0.0), 0.9 * -2.0 + 0.1 * -1.0, 1e-15);
  b.update(7, -3.0);
  EXPECT_NEAR(b.value(7, 0.0), 0.9 * (0.9 * -2.0 + 0.1 * -1.0) + 0.1 * -3.0, 1e-15);
  EXPECT_EQ(b.value(8, -4.0), -4.0);

  RewardBaseline global(0.5, false);
  global.update(1, 2.0);
  global.update(2, 4.0);
  EXPECT_DOUBLE_EQ(global.value(3, 0.0), 3.0);
}

TEST(Baseline, NoAdvantageNoGradient) {
  TinySetup t = make_tiny();
  const EncoderOutput enc = t.model->encode(t.task.input, t.task.offset, t.task.n);
  const Tensor lp = t.policy->log_prob(t.policy->means(enc), t.trace);
  const Tensor loss = policy_loss(lp, -2.5, -2.5);
  EXPECT_EQ(loss.item(), 0.0);
  backward(loss);
  EXPECT_FALSE(any_grad(t.policy->params()));
  EXPECT_DOUBLE_EQ(policy_loss(Tensor::scalar(-4.0), -1.0, -3.0).item(), 8.0);
}

TEST(Finetune, PolicyLearnsOnlyWithStructureFt) {
  TinySetup t = make_tiny();
  const std::vector<TaskInstance> batch{t.task};
  RewardBaseline baseline(0.9, true);
  // Seed the baseline so the first step already has an advantage.
  baseline.update(t.task.key, -1.0);
  Rng rng(21);
  const auto r = finetune_step(*t.model, *t.policy, baseline, batch, {.structure_ft = true}, rng);
  EXPECT_TRUE(any_grad(t.model->params()));
  EXPECT_TRUE(any_grad(t.policy->params()));
  EXPECT_NEAR(r.reward, -r.task, 1e-12);
  EXPECT_NE(r.structure, 0.0);
  clear(t.model->params());
  clear(t.policy->params());

  const auto off = finetune_step(*t.model, *t.policy, baseline, batch, {.structure_ft = false}, rng);
  EXPECT_TRUE(any_grad(t.model->params()));
  EXPECT_FALSE(any_grad(t.policy->params()));
  EXPECT_EQ(off.structure, 0.0);
  EXPECT_DOUBLE_EQ(off.total, off.task);
}

TEST(Finetune, DeterministicUnderSeed) {
  auto run = [] {
    TinySetup t = make_tiny();
    const std::vector<TaskInstance> batch{t.task};
    RewardBaseline baseline(0.9, true);
    Rng rng(33);
    std::vector<double> out;
    for (int i = 0; i < 3; ++i) {
      out.push_back(finetune_step(*t.model, *t.policy, baseline, batch, {}, rng).total);
    }
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Finetune, ActionsOnlyMatterThroughBroadcasting) {
  TinySetup t = make_tiny();
  const ProfileActions actions = t.trace.actions();
  const EncoderOutput plain = t.model->encode(t.task.input, t.task.offset, t.task.n);
  const EncoderOutput moved = t.model->encode(t.task.input, t.task.offset, t.task.n, &actions);
  const double a = t.model->sequence_nll(plain, nullptr, t.task.target).item();
  const double b = t.model->sequence_nll(moved, nullptr, t.task.target).item();
  EXPECT_DOUBLE_EQ(a, b);
  const ForestGraph ga = t.model->build_graph(plain), gb = t.model->build_graph(moved);
  EXPECT_NE(t.model->sequence_nll(plain, &ga, t.task.target).item(),
            t.model->sequence_nll(moved, &gb, t.task.target).item());
}

TEST(PolicyConfig, JsonRoundTrip) {
  PolicyConfig c;
  c.sigma = 0.3;
  c.per_example_baseline = false;
  const PolicyConfig back = nlohmann::json(c).get<PolicyConfig>();
  EXPECT_EQ(back.sigma, 0.3);
  EXPECT_FALSE(back.per_example_baseline);
}
