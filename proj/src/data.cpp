#include "structie/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <set>

#include "structie/error.hpp"
#include "structie/rng.hpp"

namespace structie {

// ---------------------------------------------------------------------------
// Vocab

Vocab::Vocab() {
  for (const char* t : {"<pad>", "<unk>", "<bos>", "<eos>", "<SPAN>", "<REL>", "(", ")", "[", "]", ","}) add(t);
  for (int k = 0; k < kNumSentinels; ++k) add("<M" + std::to_string(k) + ">");
  while (size() < kReserved) add("<R" + std::to_string(size()) + ">");
}

int Vocab::add(const std::string& token) {
  if (token.empty()) throw Error("vocab: empty token");
  if (auto it = index_.find(token); it != index_.end()) return it->second;
  const int id = size();
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

int Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) throw Error("vocab: id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

int Vocab::sentinel(int k) const {
  if (k < 0 || k >= kNumSentinels) throw Error("vocab: sentinel " + std::to_string(k) + " out of range");
  return kFirstSentinel + k;
}

std::vector<int> Vocab::encode(std::span<const std::string> tokens) const {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

std::vector<std::string> Vocab::decode(std::span<const int> ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(token(i));
  return out;
}

std::vector<int> tokenize(const Vocab& vocab, std::string_view text) {
  const auto words = split_whitespace(text);
  return vocab.encode(words);
}

std::string detokenize(const Vocab& vocab, std::span<const int> ids) {
  const auto words = vocab.decode(ids);
  return join_tokens(words);
}

// ---------------------------------------------------------------------------
// Grammar

namespace {

const std::vector<std::string> kPersons = {"alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi", "ivan", "judy"};
const std::vector<std::string> kTitles = {"doctor", "professor", "captain"};
const std::vector<std::string> kOrgs = {"acme", "globex", "initech", "hooli", "umbrella", "wayne", "stark"};
const std::vector<std::string> kOrgSuffixes = {"labs", "group"};
const std::vector<std::string> kPlaces = {"paris", "london", "tokyo", "berlin", "madrid", "oslo", "cairo", "lima"};
const std::vector<std::vector<std::string>> kPlaces2 = {{"new", "york"}, {"san", "diego"}, {"hong", "kong"}, {"buenos", "aires"}};
const std::vector<std::string> kDets = {"the", "a"};
const std::vector<std::string> kAdjs = {"old", "big", "small", "red"};
const std::vector<std::string> kNouns = {"museum", "station", "bridge", "tower", "library"};
const std::vector<std::string> kAdverbs = {"yesterday", "today", "again", "quietly"};
const std::vector<std::string> kVerbPreps = {"in", "at"};

const std::vector<std::string> kEntityAttrs = {"person", "organization", "location", "facility"};
const std::vector<std::string> kEventAttrs = {"travel", "employment", "meeting", "funding"};
const std::vector<std::string> kPairTypes = {"origin", "member_of", "located_near"};
const std::vector<std::string> kRoleTypes = {"agent", "target", "place"};

struct Verb {
  std::string word;
  std::string event;
  std::vector<std::string> subj;
  std::vector<std::string> obj;
};

const std::vector<Verb> kVerbs = {
    {"visited", "travel", {"person", "organization"}, {"location", "facility"}},
    {"joined", "employment", {"person"}, {"organization"}},
    {"met", "meeting", {"person"}, {"person"}},
    {"funded", "funding", {"organization", "person"}, {"organization", "facility"}},
};

struct Modifier {
  std::string prep;
  std::string type;
  std::vector<std::string> target;
};

std::vector<Modifier> modifiers_for(const std::string& attr) {
  if (attr == "person") return {{"from", "origin", {"location"}}, {"of", "member_of", {"organization"}}};
  if (attr == "organization") return {{"from", "origin", {"location"}}};
  return {{"near", "located_near", {"location", "facility"}}};
}

template <class T>
const T& pick(Rng& rng, const std::vector<T>& v) {
  return v[rng.below(v.size())];
}

struct MentionInfo {
  Span span;
  int head = 0;
  Mention mention;
};

struct NounPhrase {
  MentionInfo main;
  std::optional<MentionInfo> mod;
  std::string mod_type;
};

struct Built {
  std::vector<std::string> tokens;
  std::vector<int> heads;
  std::vector<Span> spans;
  std::vector<MentionInfo> mentions;  // every mention in order
  NounPhrase subj;
  NounPhrase obj;
  int verb = 0;
  const Verb* verb_def = nullptr;
  std::optional<MentionInfo> place;
};

class SentenceBuilder {
 public:
  explicit SentenceBuilder(Rng& rng) : rng_(rng) {}

  Built build(double p_mod, double p_place, double p_adv) {
    b_ = Built{};
    const Verb& verb = pick(rng_, kVerbs);
    b_.verb_def = &verb;
    b_.subj = noun_phrase(pick(rng_, verb.subj), p_mod);
    b_.verb = push(verb.word);
    const int vp_start = b_.verb;
    b_.obj = noun_phrase(pick(rng_, verb.obj), p_mod);
    b_.heads[static_cast<std::size_t>(np_head(b_.subj))] = b_.verb;
    b_.heads[static_cast<std::size_t>(np_head(b_.obj))] = b_.verb;
    if (rng_.bernoulli(p_place)) {
      const int p = push(pick(rng_, kVerbPreps));
      MentionInfo m = mention(rng_.bernoulli(0.6) ? "location" : "facility");
      b_.heads[static_cast<std::size_t>(p)] = m.head;
      b_.heads[static_cast<std::size_t>(m.head)] = b_.verb;
      b_.spans.push_back({p, m.span.r});
      b_.place = m;
    }
    b_.spans.push_back({vp_start, static_cast<int>(b_.tokens.size()) - 1});
    if (rng_.bernoulli(p_adv)) {
      const int a = push(pick(rng_, kAdverbs));
      b_.heads[static_cast<std::size_t>(a)] = b_.verb;
    }
    b_.heads[static_cast<std::size_t>(b_.verb)] = -1;
    b_.spans.push_back({0, static_cast<int>(b_.tokens.size()) - 1});
    return std::move(b_);
  }

 private:
  int push(const std::string& word) {
    const int i = static_cast<int>(b_.tokens.size());
    b_.tokens.push_back(word);
    b_.heads.push_back(-1);
    b_.spans.push_back({i, i});
    return i;
  }

  MentionInfo mention(const std::string& attr) {
    std::vector<std::string> words;
    if (attr == "person") {
      if (rng_.bernoulli(0.3)) words.push_back(pick(rng_, kTitles));
      words.push_back(pick(rng_, kPersons));
    } else if (attr == "organization") {
      words.push_back(pick(rng_, kOrgs));
      if (rng_.bernoulli(0.4)) words.push_back(pick(rng_, kOrgSuffixes));
    } else if (attr == "location") {
      if (rng_.bernoulli(0.4)) {
        words = pick(rng_, kPlaces2);
      } else {
        words.push_back(pick(rng_, kPlaces));
      }
    } else {
      words.push_back(pick(rng_, kDets));
      if (rng_.bernoulli(0.5)) words.push_back(pick(rng_, kAdjs));
      words.push_back(pick(rng_, kNouns));
    }
    const int start = static_cast<int>(b_.tokens.size());
    for (const auto& w : words) push(w);
    const int end = static_cast<int>(b_.tokens.size()) - 1;
    for (int i = start; i < end; ++i) b_.heads[static_cast<std::size_t>(i)] = end;
    if (end > start) b_.spans.push_back({start, end});
    MentionInfo info{{start, end}, end, Mention{words, attr}};
    b_.mentions.push_back(info);
    return info;
  }

  static int np_head(const NounPhrase& np) { return np.main.head; }

  NounPhrase noun_phrase(const std::string& attr, double p_mod) {
    NounPhrase np;
    np.main = mention(attr);
    if (rng_.bernoulli(p_mod)) {
      const std::vector<Modifier> options = modifiers_for(attr);
      const Modifier& mod = pick(rng_, options);
      const int p = push(mod.prep);
      MentionInfo target = mention(pick(rng_, mod.target));
      b_.heads[static_cast<std::size_t>(p)] = target.head;
      b_.heads[static_cast<std::size_t>(target.head)] = np.main.head;
      b_.spans.push_back({p, target.span.r});
      b_.spans.push_back({np.main.span.l, target.span.r});
      np.mod = target;
      np.mod_type = mod.type;
    }
    return np;
  }

  Rng& rng_;
  Built b_;
};

/// Every mention must be recoverable by leftmost matching.
bool anchors_unambiguous(const Built& b) {
  for (const auto& m : b.mentions) {
    if (locate(m.mention.text, b.tokens).start != m.span.l) return false;
  }
  return true;
}

std::string default_task_name(Prototype p) {
  switch (p) {
    case Prototype::kSpan:
      return "entity";
    case Prototype::kPair:
      return "relation";
    case Prototype::kHyperPair:
      return "event";
  }
  return "entity";
}

void add_inner_arcs(const MentionInfo& m, std::vector<Arc>& arcs) {
  for (int i = m.span.l; i < m.span.r; ++i) arcs.push_back({m.head, i});
}

Example to_example(const Built& b, Prototype prototype) {
  Example e;
  e.tokens = b.tokens;
  e.syntax_heads = b.heads;
  e.syntax_spans = b.spans;
  std::sort(e.syntax_spans.begin(), e.syntax_spans.end());
  e.syntax_spans.erase(std::unique(e.syntax_spans.begin(), e.syntax_spans.end()), e.syntax_spans.end());
  std::set<Span> spans;
  switch (prototype) {
    case Prototype::kSpan:
      for (const auto& m : b.mentions) {
        e.records.push_back({m.mention, {}});
        spans.insert(m.span);
        add_inner_arcs(m, e.task_arcs);
      }
      break;
    case Prototype::kPair:
      for (const NounPhrase* np : {&b.subj, &b.obj}) {
        if (!np->mod) continue;
        e.records.push_back({np->main.mention, {{np->mod_type, np->mod->mention}}});
        spans.insert(np->main.span);
        spans.insert(np->mod->span);
        e.task_arcs.push_back({np->main.head, np->mod->head});
      }
      break;
    case Prototype::kHyperPair: {
      IERecord rec;
      rec.head = Mention{{b.tokens[static_cast<std::size_t>(b.verb)]}, b.verb_def->event};
      spans.insert({b.verb, b.verb});
      auto add_role = [&](const std::string& role, const MentionInfo& m) {
        rec.relations.push_back({role, m.mention});
        spans.insert(m.span);
        e.task_arcs.push_back({b.verb, m.head});
      };
      add_role("agent", b.subj.main);
      add_role("target", b.obj.main);
      if (b.place) add_role("place", *b.place);
      e.records.push_back(std::move(rec));
      break;
    }
  }
  e.task_spans.assign(spans.begin(), spans.end());
  std::sort(e.task_arcs.begin(), e.task_arcs.end());
  return e;
}

void check_lengths(int min_len, int max_len) {
  if (min_len < 3 || max_len < min_len) {
    throw ConfigError("sentence length range [" + std::to_string(min_len) + ", " + std::to_string(max_len) +
                      "] is not satisfiable (grammar minimum is 3)");
  }
}

Built draw(SentenceBuilder& builder, double p_mod, double p_place, double p_adv, int min_len, int max_len,
           bool need_mod) {
  for (int attempt = 0; attempt < 100000; ++attempt) {
    Built b = builder.build(p_mod, p_place, p_adv);
    const int n = static_cast<int>(b.tokens.size());
    if (n < min_len || n > max_len) continue;
    if (need_mod && !b.subj.mod && !b.obj.mod) continue;
    if (!anchors_unambiguous(b)) continue;
    return b;
  }
  throw ConfigError("could not generate a sentence within the requested length range");
}

}  // namespace

TaskPrompt task_labels(const SyntheticTaskSpec& spec) {
  TaskPrompt p;
  p.task = spec.task_name.empty() ? default_task_name(spec.prototype) : spec.task_name;
  p.prototype = spec.prototype;
  p.attrs = kEntityAttrs;
  switch (spec.prototype) {
    case Prototype::kSpan:
      break;
    case Prototype::kPair:
      p.types = kPairTypes;
      break;
    case Prototype::kHyperPair:
      p.attrs.insert(p.attrs.end(), kEventAttrs.begin(), kEventAttrs.end());
      p.types = kRoleTypes;
      break;
  }
  return p;
}

std::vector<Example> generate(const SyntheticTaskSpec& spec, int count) {
  check_lengths(spec.min_len, spec.max_len);
  if (count < 0) throw ConfigError("negative example count");
  Rng rng(spec.seed);
  SentenceBuilder builder(rng);
  const bool pair = spec.prototype == Prototype::kPair;
  const double p_mod = pair ? 0.5 : 0.3;
  const double p_place = spec.prototype == Prototype::kHyperPair ? 0.5 : 0.3;
  std::vector<Example> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    Built b = draw(builder, p_mod, p_place, 0.3, spec.min_len, spec.max_len, pair);
    out.push_back(to_example(b, spec.prototype));
  }
  return out;
}

std::vector<std::string> generate_plaintext(int count, std::uint64_t seed, int min_len, int max_len) {
  check_lengths(min_len, max_len);
  Rng rng(seed);
  SentenceBuilder builder(rng);
  std::vector<std::string> out;
  for (int i = 0; i < count; ++i) {
    Built b = draw(builder, 0.4, 0.4, 0.3, min_len, max_len, false);
    out.push_back(join_tokens(b.tokens));
  }
  return out;
}

Vocab standard_vocab() {
  Vocab v;
  for (const auto* list : {&kPersons, &kTitles, &kOrgs, &kOrgSuffixes, &kPlaces, &kDets, &kAdjs, &kNouns, &kAdverbs,
                           &kVerbPreps, &kEntityAttrs, &kEventAttrs, &kPairTypes, &kRoleTypes}) {
    for (const auto& w : *list) v.add(w);
  }
  for (const auto& p : kPlaces2) {
    for (const auto& w : p) v.add(w);
  }
  for (const auto& verb : kVerbs) v.add(verb.word);
  for (const char* p : {"from", "of", "near"}) v.add(p);
  for (Prototype p : {Prototype::kSpan, Prototype::kPair, Prototype::kHyperPair}) {
    v.add(std::string(kTaskMarker) + default_task_name(p));
  }
  return v;
}

std::vector<Example> subsample(std::span<const Example> data, std::string_view regime, std::uint64_t seed) {
  if (regime == "full") return {data.begin(), data.end()};
  Rng rng(seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  std::set<std::size_t> chosen;
  auto parse_number = [&](std::string_view digits) {
    int value = 0;
    auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), value);
    if (ec != std::errc() || ptr != digits.data() + digits.size() || value <= 0) {
      throw ConfigError("unknown low-resource regime '" + std::string(regime) + "'");
    }
    return value;
  };
  if (regime.ends_with("-shot")) {
    const int k = parse_number(regime.substr(0, regime.size() - 5));
    std::set<std::string> labels;
    for (const auto& e : data) {
      for (const auto& r : e.records) {
        labels.insert(r.head.attr);
        for (const auto& rel : r.relations) labels.insert(rel.target.attr);
      }
    }
    for (const auto& label : labels) {
      int have = 0;
      for (std::size_t idx : order) {
        if (have >= k) break;
        const auto& e = data[idx];
        const bool has = std::any_of(e.records.begin(), e.records.end(), [&](const IERecord& r) {
          return r.head.attr == label || std::any_of(r.relations.begin(), r.relations.end(),
                                                     [&](const Relation& rel) { return rel.target.attr == label; });
        });
        if (!has) continue;
        chosen.insert(idx);
        ++have;
      }
    }
  } else if (regime.ends_with("%")) {
    const int pct = parse_number(regime.substr(0, regime.size() - 1));
    if (pct > 100) throw ConfigError("low-resource percentage above 100");
    const auto count = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(static_cast<double>(data.size()) * pct / 100.0)));
    for (std::size_t i = 0; i < std::min(count, order.size()); ++i) chosen.insert(order[i]);
  } else {
    throw ConfigError("unknown low-resource regime '" + std::string(regime) + "'");
  }
  std::vector<Example> out;
  for (std::size_t idx : chosen) out.push_back(data[idx]);
  return out;
}

// ---------------------------------------------------------------------------
// Files

PlaintextReader::PlaintextReader(const std::string& path, int max_len) : path_(path), in_(path), max_len_(max_len) {
  if (!in_) throw IoError(path, "cannot open plain-text corpus");
  if (max_len < 1) throw ConfigError("max sentence length must be positive");
}

std::optional<std::vector<std::string>> PlaintextReader::next() {
  std::string line;
  while (std::getline(in_, line)) {
    auto words = split_whitespace(line);
    if (words.empty()) continue;
    if (static_cast<int>(words.size()) > max_len_) {
      ++skipped_;
      continue;
    }
    return words;
  }
  if (in_.bad()) throw IoError(path_, "read failure");
  return std::nullopt;
}

PlaintextCorpus load_plaintext(const std::string& path, int max_len) {
  PlaintextReader reader(path, max_len);
  PlaintextCorpus corpus;
  while (auto s = reader.next()) corpus.sentences.push_back(std::move(*s));
  corpus.skipped = reader.skipped();
  return corpus;
}

void to_json(nlohmann::json& j, const Example& e) {
  auto spans = nlohmann::json::array();
  for (const auto& s : e.syntax_spans) spans.push_back({s.l, s.r});
  auto task_spans = nlohmann::json::array();
  for (const auto& s : e.task_spans) task_spans.push_back({s.l, s.r});
  auto arcs = nlohmann::json::array();
  for (const auto& a : e.task_arcs) arcs.push_back({a.head, a.dep});
  j = nlohmann::json{{"tokens", e.tokens},         {"records", e.records},       {"syntax_spans", spans},
                     {"syntax_heads", e.syntax_heads}, {"task_spans", task_spans}, {"task_arcs", arcs}};
}

void from_json(const nlohmann::json& j, Example& e) {
  e.tokens = j.at("tokens").get<std::vector<std::string>>();
  e.records = j.value("records", std::vector<IERecord>{});
  e.syntax_spans.clear();
  e.task_spans.clear();
  e.task_arcs.clear();
  for (const auto& s : j.value("syntax_spans", nlohmann::json::array())) e.syntax_spans.push_back({s.at(0), s.at(1)});
  e.syntax_heads = j.value("syntax_heads", std::vector<int>{});
  for (const auto& s : j.value("task_spans", nlohmann::json::array())) e.task_spans.push_back({s.at(0), s.at(1)});
  for (const auto& a : j.value("task_arcs", nlohmann::json::array())) e.task_arcs.push_back({a.at(0), a.at(1)});
}

void write_jsonl(const std::string& path, std::span<const Example> data) {
  std::ofstream out(path);
  if (!out) throw IoError(path, "cannot open for writing");
  for (const auto& e : data) out << nlohmann::json(e).dump() << '\n';
  if (!out) throw IoError(path, "write failure");
}

std::vector<Example> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path, "cannot open dataset");
  std::vector<Example> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (split_whitespace(line).empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<Example>());
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path, "line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace structie
