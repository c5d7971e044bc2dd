#include "structie/structft.hpp"

#include <cmath>
#include <numbers>

#include "structie/error.hpp"

namespace structie {

void to_json(nlohmann::json& j, const PolicyConfig& c) {
  j = nlohmann::json{{"sigma", c.sigma},
                     {"hidden", c.hidden},
                     {"baseline_momentum", c.baseline_momentum},
                     {"per_example_baseline", c.per_example_baseline}};
}

void from_json(const nlohmann::json& j, PolicyConfig& c) {
  const PolicyConfig d;
  c.sigma = j.value("sigma", d.sigma);
  c.hidden = j.value("hidden", d.hidden);
  c.baseline_momentum = j.value("baseline_momentum", d.baseline_momentum);
  c.per_example_baseline = j.value("per_example_baseline", d.per_example_baseline);
  if (!(c.sigma > 0.0)) throw ConfigError("policy sigma must be positive");
  if (c.baseline_momentum < 0.0 || c.baseline_momentum >= 1.0) throw ConfigError("baseline momentum must lie in [0, 1)");
}

double squash(double raw) { return 2.0 / (1.0 + std::exp(-raw)) - 1.0; }

double gaussian_log_density(double x, double mean, double sigma) {
  const double z = (x - mean) / sigma;
  return -0.5 * z * z - std::log(sigma) - 0.5 * std::log(2.0 * std::numbers::pi);
}

DistanceProfile apply_actions(const DistanceProfile& profile, const ActionTrace& trace) {
  if (trace.act_d.size() != profile.od().size() || trace.act_c.size() != profile.oc().size()) {
    throw StructureError("action lengths (" + std::to_string(trace.act_c.size()) + ", " +
                         std::to_string(trace.act_d.size()) + ") do not match the profile (" +
                         std::to_string(profile.oc().size()) + ", " + std::to_string(profile.od().size()) + ")");
  }
  std::vector<double> oc = profile.oc();
  std::vector<double> od = profile.od();
  for (std::size_t k = 0; k < oc.size(); ++k) oc[k] += trace.act_c[k];
  for (std::size_t k = 0; k < od.size(); ++k) od[k] += trace.act_d[k];
  return {std::move(oc), std::move(od)};
}

StructurePolicy::StructurePolicy(int d_model, const PolicyConfig& config, std::uint64_t seed) : config_(config) {
  if (d_model < 1) throw ConfigError("policy state width must be positive");
  Rng rng(seed);
  const auto in = static_cast<std::size_t>(3 * d_model);
  const auto hidden = static_cast<std::size_t>(config_.hidden > 0 ? config_.hidden : d_model);
  auto make = [&](const std::string& p) {
    // Zero output layer: the initial policy is N(0, sigma^2) for every state.
    return Net{params_.add_normal(p + ".w1", {in, hidden}, 1.0 / std::sqrt(static_cast<double>(in)), rng),
               params_.add_constant(p + ".b1", {1, hidden}, 0.0), params_.add_constant(p + ".w2", {hidden, 1}, 0.0),
               params_.add_constant(p + ".b2", {1, 1}, 0.0)};
  };
  con_ = make("policy.con");
  dep_ = make("policy.dep");
}

Tensor StructurePolicy::mean_of(const Net& net, const Tensor& state) const {
  return add_row(matmul(tanh(add_row(matmul(state, net.w1), net.b1)), net.w2), net.b2);
}

PolicyMeans StructurePolicy::means(const EncoderOutput& enc) const {
  const auto n = static_cast<std::size_t>(enc.n);
  const auto offset = static_cast<std::size_t>(enc.offset);
  const Tensor state =
      concat_cols({slice_rows(enc.h1, offset, n), enc.hstar, slice_rows(enc.hL, offset, n)}).detach();
  PolicyMeans m;
  m.d = mean_of(dep_, state);
  // The measurement of gap k is driven by the state of its left token.
  if (n > 1) m.c = mean_of(con_, slice_rows(state, 0, n - 1));
  return m;
}

ActionTrace StructurePolicy::sample(const PolicyMeans& means, Rng& rng) const {
  ActionTrace t;
  auto draw = [&](const Tensor& mu, std::vector<double>& raw, std::vector<double>& act) {
    if (!mu.defined()) return;
    for (double m : mu.data()) {
      raw.push_back(rng.normal(m, config_.sigma));
      act.push_back(squash(raw.back()));
    }
  };
  draw(means.c, t.raw_c, t.act_c);
  draw(means.d, t.raw_d, t.act_d);
  return t;
}

ActionTrace StructurePolicy::mean_actions(const PolicyMeans& means) const {
  ActionTrace t;
  auto fill = [](const Tensor& mu, std::vector<double>& raw, std::vector<double>& act) {
    if (!mu.defined()) return;
    for (double m : mu.data()) {
      raw.push_back(m);
      act.push_back(squash(m));
    }
  };
  fill(means.c, t.raw_c, t.act_c);
  fill(means.d, t.raw_d, t.act_d);
  return t;
}

Tensor StructurePolicy::log_prob(const PolicyMeans& means, const ActionTrace& trace) const {
  const double var = config_.sigma * config_.sigma;
  const double norm = -std::log(config_.sigma) - 0.5 * std::log(2.0 * std::numbers::pi);
  auto term = [&](const Tensor& mu, const std::vector<double>& raw) {
    if (!mu.defined()) return Tensor::scalar(0.0);
    if (raw.size() != mu.rows()) throw StructureError("trace does not match the policy means");
    const Tensor diff = sub(mu, Tensor::constant({raw.size(), 1}, raw));
    return add_scalar(scale(sum(mul(diff, diff)), -0.5 / var), norm * static_cast<double>(raw.size()));
  };
  return add(term(means.c, trace.raw_c), term(means.d, trace.raw_d));
}

double RewardBaseline::value(std::int64_t key, double reward) const {
  auto it = values_.find(per_key_ ? key : 0);
  return it == values_.end() ? reward : it->second;
}

void RewardBaseline::update(std::int64_t key, double reward) {
  const std::int64_t k = per_key_ ? key : 0;
  auto it = values_.find(k);
  if (it == values_.end()) {
    values_.emplace(k, reward);
  } else {
    it->second = momentum_ * it->second + (1.0 - momentum_) * reward;
  }
}

Tensor policy_loss(const Tensor& log_prob, double reward, double baseline) {
  return scale(log_prob, -(reward - baseline));
}

FinetuneStepResult finetune_step(const Model& model, const StructurePolicy& policy, RewardBaseline& baseline,
                                 std::span<const TaskInstance> batch, const FinetuneOptions& options, Rng& rng) {
  FinetuneStepResult result;
  Tensor total = Tensor::scalar(0.0);
  for (const auto& inst : batch) {
    std::optional<ActionTrace> trace;
    std::optional<PolicyMeans> means;
    EncoderOutput enc = model.encode(inst.input, inst.offset, inst.n);
    if (options.structure_ft) {
      means = policy.means(enc);
      trace = policy.sample(*means, rng);
      const ProfileActions actions = trace->actions();
      model.induce(enc, &actions);
    }
    std::optional<ForestGraph> graph;
    if (model.config().use_sb) graph = model.build_graph(enc);
    const Tensor nll = model.sequence_nll(enc, model.decoding_graph(graph), inst.target);
    const double reward = -nll.item();
    result.task += nll.item();
    result.reward += reward;
    total = add(total, nll);
    if (trace) {
      const double b = baseline.value(inst.key, reward);
      const Tensor lp = policy.log_prob(*means, *trace);
      const Tensor pl = policy_loss(lp, reward, b);
      result.structure += pl.item();
      total = add(total, pl);
      baseline.update(inst.key, reward);
    }
  }
  if (!batch.empty()) result.reward /= static_cast<double>(batch.size());
  result.total = total.item();
  backward(total);
  return result;
}

}  // namespace structie
