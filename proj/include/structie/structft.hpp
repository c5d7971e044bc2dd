#pragma once

// Two Gaussian policy agents adjusting the syntax measurements during task
// fine-tuning.  Each maps the detached state s_i = [h^1_i; h*_i; h^L_i] to a
// mean; raw actions are drawn around it with a fixed deviation and squashed
// to (-1, 1) before being added to o^c (per gap) and o^d (per token).

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "structie/model.hpp"
#include "structie/optim.hpp"
#include "structie/rng.hpp"

namespace structie {

struct PolicyConfig {
  double sigma = 1.0;
  int hidden = 0;  // 0 selects d_model
  double baseline_momentum = 0.9;
  /// Keep one running baseline per training example instead of a single global one.
  bool per_example_baseline = true;
};

void to_json(nlohmann::json& j, const PolicyConfig& c);
void from_json(const nlohmann::json& j, PolicyConfig& c);

/// 2 * sigmoid(x) - 1.
double squash(double raw);
double gaussian_log_density(double x, double mean, double sigma);

struct ActionTrace {
  std::vector<double> raw_c;  // n - 1
  std::vector<double> raw_d;  // n
  std::vector<double> act_c;
  std::vector<double> act_d;

  ProfileActions actions() const { return {act_c, act_d}; }
};

/// Elementwise o + a; throws StructureError on length mismatch.
DistanceProfile apply_actions(const DistanceProfile& profile, const ActionTrace& trace);

struct PolicyMeans {
  Tensor c;  // (n-1) x 1, empty for a single token
  Tensor d;  // n x 1
};

class StructurePolicy {
 public:
  StructurePolicy(int d_model, const PolicyConfig& config, std::uint64_t seed);

  const PolicyConfig& config() const { return config_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  PolicyMeans means(const EncoderOutput& enc) const;
  ActionTrace sample(const PolicyMeans& means, Rng& rng) const;
  /// Deterministic actions at the means (used for evaluation).
  ActionTrace mean_actions(const PolicyMeans& means) const;
  /// Sum of log N(raw | mean, sigma) over both agents; differentiable in the policy parameters.
  Tensor log_prob(const PolicyMeans& means, const ActionTrace& trace) const;

 private:
  struct Net {
    Tensor w1, b1, w2, b2;
  };
  Tensor mean_of(const Net& net, const Tensor& state) const;

  PolicyConfig config_;
  ParameterStore params_;
  Net con_, dep_;
};

class RewardBaseline {
 public:
  RewardBaseline(double momentum, bool per_key) : momentum_(momentum), per_key_(per_key) {}

  /// Current baseline for the key (the reward itself when nothing has been seen).
  double value(std::int64_t key, double reward) const;
  void update(std::int64_t key, double reward);

 private:
  double momentum_;
  bool per_key_;
  std::map<std::int64_t, double> values_;
};

/// -(R - b) * log p(actions); zero gradient when R equals the baseline.
Tensor policy_loss(const Tensor& log_prob, double reward, double baseline);

/// Encoded task example: input ids with the sentence at [offset, offset + n).
struct TaskInstance {
  std::vector<int> input;
  int offset = 0;
  int n = 0;
  std::vector<int> target;
  std::int64_t key = 0;
};

struct FinetuneOptions {
  bool structure_ft = true;
};

struct FinetuneStepResult {
  double task = 0.0;      // L_Task
  double structure = 0.0; // L_FS = L_FD + L_FC
  double total = 0.0;     // L_FT
  double reward = 0.0;    // mean log p(y|x)
};

/// One joint step worth of gradients: cross-entropy into the model and the
/// score-function estimator into the policies.  Gradients are accumulated;
/// the caller applies the optimizer.
FinetuneStepResult finetune_step(const Model& model, const StructurePolicy& policy, RewardBaseline& baseline,
                                 std::span<const TaskInstance> batch, const FinetuneOptions& options, Rng& rng);

}  // namespace structie
