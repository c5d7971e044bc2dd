// Command-line entry point: post-training, fine-tuning, evaluation, structure
// inspection, LHE checks and synthetic data generation.

#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <optional>

#include "structie/checkpoint.hpp"
#include "structie/data.hpp"
#include "structie/error.hpp"
#include "structie/lhe.hpp"
#include "structie/pipeline.hpp"

namespace {

using namespace structie;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> kbest;
  std::string out;
  std::string checkpoint;
  bool no_sb = false;
  bool no_sdr = false;
  bool no_structure_ft = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "Run seed (overrides the config)");
  cmd->add_option("--kbest", f.kbest, "Forest size K")->check(CLI::PositiveNumber);
  cmd->add_option("--out", f.out, "Output directory (overrides the config)");
  cmd->add_option("--checkpoint", f.checkpoint, "Input checkpoint (overrides the config)")->check(CLI::ExistingFile);
  cmd->add_flag("--no-sb", f.no_sb, "Disable the structural broadcaster");
  cmd->add_flag("--no-sdr", f.no_sdr, "Drop the structure diversifying regularizer");
  cmd->add_flag("--no-structure-ft", f.no_structure_ft, "Freeze the structure policies");
}

RunConfig resolve(const CommonFlags& f, const std::string& stage) {
  RunConfig c;
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    const auto j = nlohmann::json::parse(in);
    if (j.contains("stage") && j.at("stage").get<std::string>() != stage) {
      throw ConfigError("stage mismatch: " + f.config + " is a '" + j.at("stage").get<std::string>() +
                        "' configuration, not '" + stage + "'");
    }
    c = load_run_config(f.config);
  } else if (!f.checkpoint.empty() && stage != "posttrain") {
    // Without a config the checkpoint supplies the model switches and, after
    // fine-tuning, the task data.
    const Checkpoint ckpt = load_checkpoint(f.checkpoint);
    c.model = ckpt.meta.value("model", c.model);
    c.policy = ckpt.meta.value("policy", c.policy);
    c.data = ckpt.meta.value("data", c.data);
  }
  c.stage = stage;
  if (f.seed) c.seed = *f.seed;
  if (f.kbest) c.model.kbest = *f.kbest;
  if (!f.out.empty()) c.out_dir = f.out;
  if (!f.checkpoint.empty()) c.checkpoint = f.checkpoint;
  if (f.no_sb) c.model.use_sb = false;
  if (f.no_sdr) c.model.weights.sdr = 0.0;
  if (f.no_structure_ft) c.train.structure_ft = false;
  if (stage != "posttrain" && c.checkpoint.empty()) throw ConfigError(stage + " needs --checkpoint or a config naming one");
  return c;
}

void print_metrics(const EvalMetrics& m) {
  std::cout << "f1=" << m.f1.f1 << " precision=" << m.f1.precision << " recall=" << m.f1.recall
            << " boundary_error=" << m.boundary_error << " relation_error=" << m.relation_error << '\n';
}

int codec_check(const std::string& prototype, const std::string& task, const std::vector<std::string>& texts,
                const std::string& dataset) {
  SyntheticTaskSpec spec;
  spec.prototype = prototype_from_string(prototype);
  spec.task_name = task;
  const TaskPrompt labels = task_labels(spec);
  int failures = 0;
  for (const auto& text : texts) {
    try {
      const auto records = parse(text, labels, ParseMode::kStrict);
      const std::string back = serialize(records);
      const bool same = parse(back, labels, ParseMode::kStrict) == records;
      std::cout << (same ? "ok    " : "FAIL  ") << back << '\n';
      failures += same ? 0 : 1;
    } catch (const CodecError& e) {
      std::cout << "error " << e.what() << '\n';
      ++failures;
    }
  }
  if (!dataset.empty()) {
    const auto data = read_jsonl(dataset);
    std::size_t ok = 0;
    for (const auto& ex : data) {
      try {
        const std::string text = serialize(ex.records);
        if (parse(text, labels, ParseMode::kStrict) == ex.records) {
          ++ok;
        } else {
          ++failures;
          std::cout << "FAIL  " << text << '\n';
        }
      } catch (const CodecError& e) {
        ++failures;
        std::cout << "error " << e.what() << '\n';
      }
    }
    std::cout << ok << "/" << data.size() << " records round-trip\n";
  }
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Structure-aware generative information extraction"};
  app.require_subcommand(1);

  CommonFlags post_flags, ft_flags, eval_flags;
  auto* post = app.add_subcommand("posttrain", "Unsupervised structure-aware post-training");
  add_common(post, post_flags);

  auto* ft = app.add_subcommand("finetune", "Task fine-tuning with structure policies");
  add_common(ft, ft_flags);

  auto* ev = app.add_subcommand("eval", "Strict F1 and error analysis of a checkpoint");
  add_common(ev, eval_flags);
  std::string eval_dataset;
  ev->add_option("--dataset", eval_dataset, "JSONL test set (defaults to the generated split)")
      ->check(CLI::ExistingFile);

  auto* ind = app.add_subcommand("induce", "Print induced trees and forests for a sentence");
  std::string ind_checkpoint, ind_sentence;
  std::optional<int> ind_kbest;
  bool ind_json = false;
  ind->add_option("--checkpoint", ind_checkpoint, "Checkpoint")->required()->check(CLI::ExistingFile);
  ind->add_option("--sentence", ind_sentence, "Whitespace-tokenized sentence")->required();
  ind->add_option("--kbest", ind_kbest, "Forest size K")->check(CLI::PositiveNumber);
  ind->add_flag("--json", ind_json, "Emit JSON instead of text");

  auto* cc = app.add_subcommand("codec-check", "Validate LHE strings or dataset records");
  std::string cc_prototype = "span", cc_task, cc_dataset;
  std::vector<std::string> cc_texts;
  cc->add_option("--prototype", cc_prototype, "span | pair | hyper-pair");
  cc->add_option("--task", cc_task, "Task name");
  cc->add_option("--text", cc_texts, "LHE string (repeatable)");
  cc->add_option("--dataset", cc_dataset, "JSONL dataset")->check(CLI::ExistingFile);

  auto* gen = app.add_subcommand("generate", "Write synthetic task data or a plain-text corpus");
  std::string gen_prototype = "span", gen_out;
  int gen_count = 100;
  std::uint64_t gen_seed = 1;
  bool gen_plain = false;
  gen->add_option("--prototype", gen_prototype, "span | pair | hyper-pair");
  gen->add_option("--count", gen_count, "Number of sentences")->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "Generator seed");
  gen->add_flag("--plaintext", gen_plain, "Plain sentences, one per line");
  gen->add_option("--out", gen_out, "Output file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*post) {
      const RunConfig c = resolve(post_flags, "posttrain");
      const auto summary = run_posttrain(c);
      if (!summary.steps.empty()) {
        std::cout << "posttrain: " << summary.steps.size() << " steps, L_W " << summary.steps.front().lm << " -> "
                  << summary.steps.back().lm << "; outputs in " << c.out_dir << '\n';
      }
    } else if (*ft) {
      const RunConfig c = resolve(ft_flags, "finetune");
      const auto summary = run_finetune(c);
      print_metrics(summary.final);
      std::cout << "outputs in " << c.out_dir << '\n';
    } else if (*ev) {
      RunConfig c = resolve(eval_flags, "eval");
      if (!eval_dataset.empty()) c.data.test_path = eval_dataset;
      print_metrics(run_eval(c));
    } else if (*ind) {
      std::optional<ModelConfig> runtime;
      if (ind_kbest) {
        ModelConfig m = load_checkpoint(ind_checkpoint).meta.at("model").get<ModelConfig>();
        m.kbest = *ind_kbest;
        runtime = m;
      }
      const Engine engine = Engine::load(ind_checkpoint, runtime);
      const auto report = induce(engine, split_whitespace(ind_sentence));
      std::cout << (ind_json ? report.dump(2) + "\n" : render_induction(report));
    } else if (*cc) {
      return codec_check(cc_prototype, cc_task, cc_texts, cc_dataset);
    } else if (*gen) {
      if (gen_plain) {
        std::ofstream out(gen_out);
        if (!out) throw IoError(gen_out, "cannot open for writing");
        for (const auto& s : generate_plaintext(gen_count, gen_seed)) out << s << '\n';
      } else {
        SyntheticTaskSpec spec;
        spec.prototype = prototype_from_string(gen_prototype);
        spec.seed = gen_seed;
        write_jsonl(gen_out, generate(spec, gen_count));
      }
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
