#pragma once

// Three-stage pipeline: post-training, task fine-tuning, evaluation.  Every
// run archives its configuration next to its outputs and draws all of its
// randomness from one generator seeded by RunConfig::seed.

#include <cstdint>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "structie/data.hpp"
#include "structie/metrics.hpp"
#include "structie/model.hpp"
#include "structie/structft.hpp"

namespace structie {

struct DataConfig {
  std::string prototype = "span";
  std::string task;  // defaults to the prototype's task name
  int train = 400;
  int test = 100;
  std::uint64_t seed = 11;
  int min_len = 3;
  int max_len = 14;
  std::string regime = "full";
  /// Optional JSONL files replacing the generated splits.
  std::string train_path;
  std::string test_path;
  /// Plain-text post-training corpus; generated from the grammar when empty.
  std::string corpus_path;
  int corpus_size = 200;
};

struct TrainConfig {
  int steps = 500;
  int batch = 1;
  double lr = 3e-3;
  double clip = 5.0;
  int eval_every = 250;
  int eval_examples = 100;
  int decode_steps = 48;
  bool structure_ft = true;
  /// Stop fine-tuning at the first evaluation reaching this F1 (0 disables).
  double stop_at_f1 = 0.0;
};

struct RunConfig {
  std::string stage = "posttrain";  // posttrain | finetune | eval
  std::uint64_t seed = 1;
  ModelConfig model;
  PolicyConfig policy;
  DataConfig data;
  TrainConfig train;
  std::string out_dir = "runs/default";
  /// Input checkpoint (required for finetune / eval, optional resume for posttrain).
  std::string checkpoint;
};

void to_json(nlohmann::json& j, const DataConfig& c);
void from_json(const nlohmann::json& j, DataConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_run_config(const std::string& path);
void save_json(const std::string& path, const nlohmann::json& j);

struct TaskData {
  TaskPrompt labels;
  std::vector<Example> train;
  std::vector<Example> test;
};

TaskData load_task_data(const DataConfig& config);

/// Prompt + sentence ids with the gold LHE as target.
TaskInstance make_instance(const Vocab& vocab, const TaskPrompt& labels, const Example& example, std::int64_t key);

struct StructureStats {
  double omega_c = 0.0;
  double omega_d = 0.0;
  double delta_c = 0.0;
  double delta_d = 0.0;
};

/// A model, its structure policies and the vocabulary.
class Engine {
 public:
  /// Fresh parameters drawn from `rng`.
  Engine(const ModelConfig& model, const PolicyConfig& policy, Rng& rng);

  /// Restores a checkpoint.  `runtime` overrides the non-architectural model
  /// switches (broadcasting, forest size, induction options); `policy`
  /// replaces the stored policy settings.
  static Engine load(const std::string& path, const std::optional<ModelConfig>& runtime = std::nullopt,
                     const std::optional<PolicyConfig>& policy = std::nullopt);

  Model& model() { return *model_; }
  const Model& model() const { return *model_; }
  StructurePolicy& policy() { return *policy_; }
  const StructurePolicy& policy() const { return *policy_; }
  const Vocab& vocab() const { return vocab_; }
  const nlohmann::json& meta() const { return meta_; }

  std::vector<Tensor> parameters() const;

  /// Encoding with the policies' mean actions applied when `use_policy`.
  EncoderOutput encode(const TaskInstance& inst, bool use_policy) const;

  /// Greedy LHE output for one example.
  std::string generate_text(const TaskPrompt& labels, const Example& example, bool use_policy, int decode_steps) const;
  std::vector<IERecord> predict(const TaskPrompt& labels, const Example& example, bool use_policy,
                                int decode_steps) const;
  /// `outputs`, when given, receives the raw generated text per example.
  EvalMetrics evaluate(const TaskPrompt& labels, std::span<const Example> data, bool use_policy, int decode_steps,
                       std::vector<std::string>* outputs = nullptr) const;
  StructureStats structure_stats(const TaskPrompt& labels, std::span<const Example> data, bool use_policy) const;

  void save(const std::string& path, nlohmann::json meta) const;

 private:
  Engine() = default;

  Vocab vocab_;
  std::unique_ptr<Model> model_;
  std::unique_ptr<StructurePolicy> policy_;
  nlohmann::json meta_ = nlohmann::json::object();
};

struct PosttrainStep {
  int step = 0;
  double lm = 0.0;
  double dep = 0.0;
  double con = 0.0;
  double sdr = 0.0;
  double total = 0.0;
};

struct PosttrainSummary {
  std::vector<PosttrainStep> steps;
  std::size_t skipped = 0;
};

struct TrajectoryRow {
  int step = 0;
  double f1 = 0.0;
  StructureStats structure;
};

struct FinetuneSummary {
  std::vector<TrajectoryRow> trajectory;
  std::vector<FinetuneStepResult> steps;
  EvalMetrics final;
};

/// Writes config.json, log.jsonl, metrics.json and checkpoint.bin into out_dir.
PosttrainSummary run_posttrain(const RunConfig& config);
/// Also writes trajectory.csv.  run_eval additionally writes predictions.jsonl.
FinetuneSummary run_finetune(const RunConfig& config);
EvalMetrics run_eval(const RunConfig& config);

/// Per-head measurements, 1-best trees and compacted forests of a sentence.
nlohmann::json induce(const Engine& engine, const std::vector<std::string>& sentence);
std::string render_induction(const nlohmann::json& report);

}  // namespace structie
