#include "structie/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "structie/checkpoint.hpp"
#include "structie/error.hpp"

namespace structie {

namespace fs = std::filesystem;

namespace {

constexpr const char* kPolicyProbe = "policy.dep.w1";

template <class T>
void read_field(const nlohmann::json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

void prepare_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(dir, "cannot create output directory: " + ec.message());
}

std::string in_dir(const std::string& dir, const char* file) { return (fs::path(dir) / file).string(); }

class JsonlLog {
 public:
  explicit JsonlLog(const std::string& path) : path_(path), out_(path) {
    if (!out_) throw IoError(path, "cannot open log");
  }
  void write(const nlohmann::json& j) { out_ << j.dump() << '\n'; }

 private:
  std::string path_;
  std::ofstream out_;
};

ModelConfig resolved_model(const RunConfig& config, const Vocab& vocab) {
  ModelConfig m = config.model;
  if (m.vocab == 0) m.vocab = vocab.size();
  if (m.vocab != vocab.size()) {
    throw ConfigError("model vocab " + std::to_string(m.vocab) + " does not match the vocabulary size " +
                      std::to_string(vocab.size()));
  }
  return m;
}

nlohmann::json stats_json(const StructureStats& s) {
  return {{"omega_c", s.omega_c}, {"omega_d", s.omega_d}, {"delta_c", s.delta_c}, {"delta_d", s.delta_d}};
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void to_json(nlohmann::json& j, const DataConfig& c) {
  j = nlohmann::json{{"prototype", c.prototype}, {"task", c.task},           {"train", c.train},
                     {"test", c.test},           {"seed", c.seed},           {"min_len", c.min_len},
                     {"max_len", c.max_len},     {"regime", c.regime},       {"train_path", c.train_path},
                     {"test_path", c.test_path}, {"corpus_path", c.corpus_path}, {"corpus_size", c.corpus_size}};
}

void from_json(const nlohmann::json& j, DataConfig& c) {
  read_field(j, "prototype", c.prototype);
  read_field(j, "task", c.task);
  read_field(j, "train", c.train);
  read_field(j, "test", c.test);
  read_field(j, "seed", c.seed);
  read_field(j, "min_len", c.min_len);
  read_field(j, "max_len", c.max_len);
  read_field(j, "regime", c.regime);
  read_field(j, "train_path", c.train_path);
  read_field(j, "test_path", c.test_path);
  read_field(j, "corpus_path", c.corpus_path);
  read_field(j, "corpus_size", c.corpus_size);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"steps", c.steps},           {"batch", c.batch},
                     {"lr", c.lr},                 {"clip", c.clip},
                     {"eval_every", c.eval_every}, {"eval_examples", c.eval_examples},
                     {"decode_steps", c.decode_steps}, {"structure_ft", c.structure_ft},
                     {"stop_at_f1", c.stop_at_f1}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  read_field(j, "steps", c.steps);
  read_field(j, "batch", c.batch);
  read_field(j, "lr", c.lr);
  read_field(j, "clip", c.clip);
  read_field(j, "eval_every", c.eval_every);
  read_field(j, "eval_examples", c.eval_examples);
  read_field(j, "decode_steps", c.decode_steps);
  read_field(j, "structure_ft", c.structure_ft);
  read_field(j, "stop_at_f1", c.stop_at_f1);
  if (c.steps < 0 || c.batch < 1 || c.eval_every < 1 || c.decode_steps < 1) {
    throw ConfigError("train: steps must be >= 0 and batch, eval_every, decode_steps >= 1");
  }
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"stage", c.stage}, {"seed", c.seed},       {"model", c.model},     {"policy", c.policy},
                     {"data", c.data},   {"train", c.train}, {"out_dir", c.out_dir}, {"checkpoint", c.checkpoint}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  read_field(j, "stage", c.stage);
  read_field(j, "seed", c.seed);
  read_field(j, "model", c.model);
  read_field(j, "policy", c.policy);
  read_field(j, "data", c.data);
  read_field(j, "train", c.train);
  read_field(j, "out_dir", c.out_dir);
  read_field(j, "checkpoint", c.checkpoint);
  if (c.stage != "posttrain" && c.stage != "finetune" && c.stage != "eval") {
    throw ConfigError("unknown stage '" + c.stage + "'");
  }
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path, "cannot open config");
  try {
    return nlohmann::json::parse(in).get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void save_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError(path, "cannot open for writing");
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Data

TaskData load_task_data(const DataConfig& config) {
  SyntheticTaskSpec spec;
  spec.prototype = prototype_from_string(config.prototype);
  spec.task_name = config.task;
  spec.min_len = config.min_len;
  spec.max_len = config.max_len;
  TaskData d;
  d.labels = task_labels(spec);
  if (!config.train_path.empty()) {
    d.train = read_jsonl(config.train_path);
  } else {
    spec.seed = config.seed;
    d.train = generate(spec, config.train);
  }
  if (!config.test_path.empty()) {
    d.test = read_jsonl(config.test_path);
  } else {
    spec.seed = config.seed + 7919;
    d.test = generate(spec, config.test);
  }
  d.train = subsample(d.train, config.regime, config.seed);
  return d;
}

TaskInstance make_instance(const Vocab& vocab, const TaskPrompt& labels, const Example& example, std::int64_t key) {
  TaskPrompt prompt = labels;
  prompt.sentence = example.tokens;
  const auto input = build_input(prompt);
  TaskInstance inst;
  inst.input = vocab.encode(input);
  inst.n = static_cast<int>(example.tokens.size());
  inst.offset = static_cast<int>(input.size()) - inst.n;
  inst.target = tokenize(vocab, serialize(example.records));
  inst.key = key;
  return inst;
}

// ---------------------------------------------------------------------------
// Engine

Engine::Engine(const ModelConfig& model, const PolicyConfig& policy, Rng& rng) : vocab_(standard_vocab()) {
  ModelConfig m = model;
  if (m.vocab == 0) m.vocab = vocab_.size();
  model_ = std::make_unique<Model>(m, rng.next_u64());
  policy_ = std::make_unique<StructurePolicy>(m.d_model, policy, rng.next_u64());
}

Engine Engine::load(const std::string& path, const std::optional<ModelConfig>& runtime,
                    const std::optional<PolicyConfig>& policy) {
  const Checkpoint ckpt = load_checkpoint(path);
  Engine e;
  e.meta_ = ckpt.meta;
  if (!ckpt.meta.contains("model") || !ckpt.meta.contains("vocab")) {
    throw ConfigError(path + ": checkpoint header lacks the model configuration");
  }
  for (const auto& t : ckpt.meta.at("vocab")) e.vocab_.add(t.get<std::string>());
  ModelConfig m = ckpt.meta.at("model").get<ModelConfig>();
  if (runtime) {
    m.use_sb = runtime->use_sb;
    m.kbest = runtime->kbest;
    m.head_mode = runtime->head_mode;
    m.distribution = runtime->distribution;
  }
  const PolicyConfig p = policy ? *policy : ckpt.meta.value("policy", PolicyConfig{});
  e.model_ = std::make_unique<Model>(m, 0);
  e.policy_ = std::make_unique<StructurePolicy>(m.d_model, p, 0);
  restore_parameters(ckpt, e.model_->params().all());
  if (ckpt.find(kPolicyProbe)) restore_parameters(ckpt, e.policy_->params().all());
  return e;
}

std::vector<Tensor> Engine::parameters() const {
  std::vector<Tensor> all = model_->params().all();
  for (const auto& t : policy_->params().all()) all.push_back(t);
  return all;
}

EncoderOutput Engine::encode(const TaskInstance& inst, bool use_policy) const {
  EncoderOutput enc = model_->encode(inst.input, inst.offset, inst.n);
  if (use_policy) {
    const ActionTrace trace = policy_->mean_actions(policy_->means(enc));
    const ProfileActions actions = trace.actions();
    model_->induce(enc, &actions);
  }
  return enc;
}

std::string Engine::generate_text(const TaskPrompt& labels, const Example& example, bool use_policy,
                                  int decode_steps) const {
  NoGradGuard guard;
  const TaskInstance inst = make_instance(vocab_, labels, example, 0);
  const EncoderOutput enc = encode(inst, use_policy);
  std::optional<ForestGraph> graph;
  if (model_->config().use_sb) graph = model_->build_graph(enc);
  return detokenize(vocab_, model_->greedy_decode(enc, model_->decoding_graph(graph), decode_steps));
}

std::vector<IERecord> Engine::predict(const TaskPrompt& labels, const Example& example, bool use_policy,
                                      int decode_steps) const {
  return parse(generate_text(labels, example, use_policy, decode_steps), labels, ParseMode::kLenient);
}

EvalMetrics Engine::evaluate(const TaskPrompt& labels, std::span<const Example> data, bool use_policy,
                             int decode_steps, std::vector<std::string>* outputs) const {
  std::vector<std::vector<AnchoredRecord>> pred, gold;
  for (const auto& ex : data) {
    const std::string text = generate_text(labels, ex, use_policy, decode_steps);
    if (outputs) outputs->push_back(text);
    pred.push_back(restore_offsets(parse(text, labels, ParseMode::kLenient), ex.tokens));
    gold.push_back(restore_offsets(ex.records, ex.tokens));
  }
  return evaluate_records(pred, gold);
}

StructureStats Engine::structure_stats(const TaskPrompt& labels, std::span<const Example> data, bool use_policy) const {
  NoGradGuard guard;
  StructureStats s;
  std::size_t nc = 0, nd = 0;
  for (const auto& ex : data) {
    const TaskInstance inst = make_instance(vocab_, labels, ex, 0);
    const EncoderOutput enc = encode(inst, use_policy);
    const auto matrices = enc.head_matrices();
    const auto profiles = enc.profiles();
    std::vector<BoundaryDistribution> bounds;
    for (const auto& h : enc.heads) bounds.push_back(h.bounds_value);
    const DepForest dep = compact_dep_forest(matrices, model_->config().kbest);
    const ConForest con = compact_con_forest(profiles, bounds);
    s.delta_c += density(con);
    s.delta_d += density(dep);
    // Single-token spans are leaves of every binary tree, so only longer gold
    // spans say anything about the induced constituents.
    std::vector<Span> phrases;
    for (const auto& sp : ex.task_spans) {
      if (sp.r > sp.l) phrases.push_back(sp);
    }
    if (!phrases.empty()) {
      s.omega_c += agreement_rate(con, phrases);
      ++nc;
    }
    if (!ex.task_arcs.empty()) {
      s.omega_d += agreement_rate(dep, ex.task_arcs);
      ++nd;
    }
  }
  if (!data.empty()) {
    s.delta_c /= static_cast<double>(data.size());
    s.delta_d /= static_cast<double>(data.size());
  }
  if (nc > 0) s.omega_c /= static_cast<double>(nc);
  if (nd > 0) s.omega_d /= static_cast<double>(nd);
  return s;
}

void Engine::save(const std::string& path, nlohmann::json meta) const {
  meta["model"] = model_->config();
  meta["policy"] = policy_->config();
  meta["vocab"] = vocab_.tokens();
  save_checkpoint(path, parameters(), meta);
}

// ---------------------------------------------------------------------------
// Stages

PosttrainSummary run_posttrain(const RunConfig& config) {
  if (config.stage != "posttrain") throw ConfigError("stage mismatch: config stage is '" + config.stage + "'");
  prepare_dir(config.out_dir);
  save_json(in_dir(config.out_dir, "config.json"), config);

  Rng rng(config.seed);
  std::optional<Engine> engine;
  int start = 0;
  if (!config.checkpoint.empty()) {
    engine.emplace(Engine::load(config.checkpoint, config.model));
    if (engine->meta().value("stage", std::string()) != "posttrain") {
      throw ConfigError("stage mismatch: cannot resume post-training from a '" +
                        engine->meta().value("stage", std::string("unknown")) + "' checkpoint");
    }
    start = engine->meta().value("step", 0);
  } else {
    engine.emplace(resolved_model(config, standard_vocab()), config.policy, rng);
  }
  const Vocab& vocab = engine->vocab();
  Model& model = engine->model();

  PosttrainSummary summary;
  std::vector<std::vector<int>> corpus;
  const int max_words = model.config().max_len - 1;
  if (!config.data.corpus_path.empty()) {
    PlaintextCorpus c = load_plaintext(config.data.corpus_path, max_words);
    summary.skipped = c.skipped;
    for (const auto& s : c.sentences) corpus.push_back(vocab.encode(s));
  } else {
    for (const auto& s : generate_plaintext(config.data.corpus_size, config.data.seed)) {
      corpus.push_back(tokenize(vocab, s));
    }
  }
  if (corpus.empty()) throw ConfigError("post-training corpus is empty");

  Adam adam({.lr = config.train.lr});
  auto params = model.params().all();
  JsonlLog log(in_dir(config.out_dir, "log.jsonl"));
  for (int s = 1; s <= config.train.steps; ++s) {
    PosttrainStep rec;
    rec.step = start + s;
    for (int b = 0; b < config.train.batch; ++b) {
      const auto& sentence = corpus[rng.below(corpus.size())];
      const PosttrainLosses l = model.posttrain_losses(sentence, rng);
      backward(l.total);
      rec.lm += l.lm.item();
      rec.dep += l.dep.item();
      rec.con += l.con.item();
      rec.sdr += l.sdr.item();
      rec.total += l.total.item();
    }
    if (config.train.clip > 0.0) clip_grad_norm(params, config.train.clip);
    adam.step(params);
    log.write({{"step", rec.step}, {"l_w", rec.lm}, {"l_d", rec.dep}, {"l_c", rec.con}, {"l_sdr", rec.sdr},
               {"l_prt", rec.total}});
    summary.steps.push_back(rec);
  }
  const int final_step = start + config.train.steps;
  engine->save(in_dir(config.out_dir, "checkpoint.bin"), {{"stage", "posttrain"}, {"step", final_step}});

  auto window_mean = [&](bool head) {
    const std::size_t w = std::min<std::size_t>(20, summary.steps.size());
    double acc = 0.0;
    for (std::size_t k = 0; k < w; ++k) acc += summary.steps[head ? k : summary.steps.size() - 1 - k].lm;
    return w == 0 ? 0.0 : acc / static_cast<double>(w);
  };
  save_json(in_dir(config.out_dir, "metrics.json"), {{"stage", "posttrain"},
                                                     {"step", final_step},
                                                     {"l_w_initial", window_mean(true)},
                                                     {"l_w_final", window_mean(false)},
                                                     {"skipped_sentences", summary.skipped},
                                                     {"corpus_sentences", corpus.size()}});
  return summary;
}

FinetuneSummary run_finetune(const RunConfig& config) {
  if (config.stage != "finetune") throw ConfigError("stage mismatch: config stage is '" + config.stage + "'");
  if (config.checkpoint.empty()) throw ConfigError("fine-tuning needs a checkpoint");
  Engine engine = Engine::load(config.checkpoint, config.model, config.policy);
  const std::string from = engine.meta().value("stage", std::string("unknown"));
  if (from != "posttrain" && from != "finetune") {
    throw ConfigError("stage mismatch: cannot fine-tune from a '" + from + "' checkpoint");
  }
  prepare_dir(config.out_dir);
  save_json(in_dir(config.out_dir, "config.json"), config);

  Rng rng(config.seed);
  const TaskData data = load_task_data(config.data);
  if (data.train.empty()) throw ConfigError("training split is empty");
  std::vector<TaskInstance> train;
  for (std::size_t i = 0; i < data.train.size(); ++i) {
    train.push_back(make_instance(engine.vocab(), data.labels, data.train[i], static_cast<std::int64_t>(i)));
  }
  const std::size_t eval_count = std::min<std::size_t>(data.test.size(), static_cast<std::size_t>(config.train.eval_examples));
  const std::span<const Example> eval_set(data.test.data(), eval_count);
  const bool sft = config.train.structure_ft;

  Adam adam({.lr = config.train.lr});
  auto params = engine.parameters();
  RewardBaseline baseline(engine.policy().config().baseline_momentum, engine.policy().config().per_example_baseline);
  JsonlLog log(in_dir(config.out_dir, "log.jsonl"));
  std::ofstream traj(in_dir(config.out_dir, "trajectory.csv"));
  if (!traj) throw IoError(in_dir(config.out_dir, "trajectory.csv"), "cannot open for writing");
  traj << "step,f1,omega_c,omega_d,delta_c,delta_d\n" << std::setprecision(17);

  FinetuneSummary summary;
  auto evaluate_now = [&](int step) {
    TrajectoryRow row;
    row.step = step;
    row.f1 = engine.evaluate(data.labels, eval_set, sft, config.train.decode_steps).f1.f1;
    row.structure = engine.structure_stats(data.labels, eval_set, sft);
    traj << row.step << ',' << row.f1 << ',' << row.structure.omega_c << ',' << row.structure.omega_d << ','
         << row.structure.delta_c << ',' << row.structure.delta_d << '\n';
    traj.flush();
    summary.trajectory.push_back(row);
  };

  evaluate_now(0);
  const FinetuneOptions options{sft};
  for (int s = 1; s <= config.train.steps; ++s) {
    std::vector<TaskInstance> batch;
    for (int b = 0; b < config.train.batch; ++b) batch.push_back(train[rng.below(train.size())]);
    const FinetuneStepResult r = finetune_step(engine.model(), engine.policy(), baseline, batch, options, rng);
    if (config.train.clip > 0.0) clip_grad_norm(params, config.train.clip);
    adam.step(params);
    log.write({{"step", s}, {"l_task", r.task}, {"l_fs", r.structure}, {"l_ft", r.total}, {"reward", r.reward}});
    summary.steps.push_back(r);
    if (s % config.train.eval_every == 0 || s == config.train.steps) {
      evaluate_now(s);
      if (config.train.stop_at_f1 > 0.0 && summary.trajectory.back().f1 >= config.train.stop_at_f1) break;
    }
  }
  summary.final = engine.evaluate(data.labels, data.test, sft, config.train.decode_steps);
  engine.save(in_dir(config.out_dir, "checkpoint.bin"),
              {{"stage", "finetune"}, {"step", summary.steps.size()}, {"structure_ft", sft}, {"data", config.data}});
  nlohmann::json metrics = to_json(summary.final);
  metrics["stage"] = "finetune";
  metrics["structure"] = stats_json(summary.trajectory.back().structure);
  save_json(in_dir(config.out_dir, "metrics.json"), metrics);
  return summary;
}

EvalMetrics run_eval(const RunConfig& config) {
  if (config.stage != "eval") throw ConfigError("stage mismatch: config stage is '" + config.stage + "'");
  if (config.checkpoint.empty()) throw ConfigError("evaluation needs a checkpoint");
  const Engine engine = Engine::load(config.checkpoint, config.model);
  prepare_dir(config.out_dir);
  save_json(in_dir(config.out_dir, "config.json"), config);
  const TaskData data = load_task_data(config.data);
  const bool sft = config.train.structure_ft && engine.meta().value("structure_ft", true);
  std::vector<std::string> outputs;
  const EvalMetrics m = engine.evaluate(data.labels, data.test, sft, config.train.decode_steps, &outputs);
  {
    JsonlLog preds(in_dir(config.out_dir, "predictions.jsonl"));
    for (std::size_t i = 0; i < outputs.size(); ++i) {
      preds.write({{"tokens", data.test[i].tokens}, {"gold", serialize(data.test[i].records)}, {"output", outputs[i]}});
    }
  }
  nlohmann::json out = to_json(m);
  out["stage"] = "eval";
  out["structure"] = stats_json(engine.structure_stats(data.labels, data.test, sft));
  save_json(in_dir(config.out_dir, "metrics.json"), out);
  return m;
}

// ---------------------------------------------------------------------------
// Inspection

nlohmann::json induce(const Engine& engine, const std::vector<std::string>& sentence) {
  NoGradGuard guard;
  if (sentence.empty()) throw Error("induce: empty sentence");
  const auto ids = engine.vocab().encode(sentence);
  const EncoderOutput enc = engine.model().encode(ids, 0, static_cast<int>(ids.size()));
  nlohmann::json report;
  report["tokens"] = sentence;
  report["heads"] = nlohmann::json::array();
  for (const auto& h : enc.heads) {
    nlohmann::json hj;
    hj["oc"] = h.profile.oc();
    hj["od"] = h.profile.od();
    nlohmann::json smallest = nlohmann::json::array();
    for (int i = 0; i < enc.n; ++i) {
      const Span s = smallest_constituent(h.profile, i);
      smallest.push_back({s.l, s.r});
    }
    hj["smallest_constituent"] = smallest;
    const ConTree con = build_con_tree(h.profile);
    hj["con_tree"] = con.to_sexpr(sentence);
    nlohmann::json spans = nlohmann::json::array();
    for (const auto& s : con.spans()) spans.push_back({s.l, s.r});
    hj["con_spans"] = spans;
    hj["dep_tree"] = build_dep_tree(h.profile).to_arcs(sentence);
    report["heads"].push_back(hj);
  }
  const auto matrices = enc.head_matrices();
  const auto profiles = enc.profiles();
  std::vector<BoundaryDistribution> bounds;
  for (const auto& h : enc.heads) bounds.push_back(h.bounds_value);
  report["con_forest"] = to_json(compact_con_forest(profiles, bounds));
  report["dep_forest"] = to_json(compact_dep_forest(matrices, engine.model().config().kbest));
  return report;
}

std::string render_induction(const nlohmann::json& report) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(3);
  const auto tokens = report.at("tokens").get<std::vector<std::string>>();
  out << "sentence: " << join_tokens(tokens) << '\n';
  int m = 0;
  for (const auto& h : report.at("heads")) {
    out << "head " << m++ << '\n';
    out << "  o^c:";
    for (double v : h.at("oc")) out << ' ' << v;
    out << "\n  o^d:";
    for (double v : h.at("od")) out << ' ' << v;
    out << "\n  smallest constituents:";
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const auto& s = h.at("smallest_constituent")[i];
      out << ' ' << tokens[i] << "=[" << s[0].get<int>() << ',' << s[1].get<int>() << ']';
    }
    out << "\n  constituency: " << h.at("con_tree").get<std::string>() << '\n';
    out << "  dependency:";
    for (const auto& a : h.at("dep_tree")) out << ' ' << a.get<std::string>();
    out << '\n';
  }
  out << "constituency forest:\n";
  for (const auto& s : report.at("con_forest").at("spans")) {
    out << "  [" << s.at("l").get<int>() << ',' << s.at("r").get<int>() << "] "
        << s.at("weight").get<double>() << '\n';
  }
  out << "dependency forest:\n";
  for (const auto& a : report.at("dep_forest").at("arcs")) {
    const int head = a.at("head").get<int>();
    const int dep = a.at("dep").get<int>();
    out << "  " << tokens[static_cast<std::size_t>(dep)] << "<-"
        << (head < 0 ? std::string("ROOT") : tokens[static_cast<std::size_t>(head)]) << ' '
        << a.at("weight").get<double>() << '\n';
  }
  return out.str();
}

}  // namespace structie
