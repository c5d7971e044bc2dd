#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <algorithm>
#include <set>

#include "structie/data.hpp"
#include "structie/error.hpp"

using namespace structie;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("structie_test_" + name)).string();
}

SyntheticTaskSpec spec_of(Prototype p, std::uint64_t seed = 5) {
  SyntheticTaskSpec s;
  s.prototype = p;
  s.seed = seed;
  return s;
}

bool same(const Example& a, const Example& b) {
  return a.tokens == b.tokens && a.records == b.records && a.syntax_spans == b.syntax_spans &&
         a.syntax_heads == b.syntax_heads && a.task_spans == b.task_spans && a.task_arcs == b.task_arcs;
}

}  // namespace

TEST(Vocab, ReservedLayout) {
  const Vocab v;
  EXPECT_EQ(v.size(), Vocab::kReserved);
  EXPECT_EQ(v.token(Vocab::kPad), "<pad>");
  EXPECT_EQ(v.id("("), 6);
  EXPECT_EQ(v.id(","), 10);
  EXPECT_EQ(v.id("<SPAN>"), Vocab::kSpan);
  EXPECT_EQ(v.sentinel(0), Vocab::kFirstSentinel);
  EXPECT_THROW(v.sentinel(Vocab::kNumSentinels), Error);
}

TEST(Vocab, EncodeDecode) {
  Vocab v;
  const int ada = v.add("ada");
  EXPECT_EQ(v.add("ada"), ada);
  const std::vector<std::string> words{"ada", "zed"};
  EXPECT_EQ(v.encode(words), (std::vector<int>{ada, Vocab::kUnk}));
  EXPECT_EQ(v.decode(std::vector<int>{ada, Vocab::kUnk}), (std::vector<std::string>{"ada", "<unk>"}));
  EXPECT_EQ(tokenize(v, "  ada\tada "), (std::vector<int>{ada, ada}));
  EXPECT_EQ(detokenize(v, std::vector<int>{ada, ada}), "ada ada");
}

TEST(Synthetic, DeterministicUnderSeed) {
  for (Prototype p : {Prototype::kSpan, Prototype::kPair, Prototype::kHyperPair}) {
    const auto a = generate(spec_of(p), 50), b = generate(spec_of(p), 50), c = generate(spec_of(p, 6), 50);
    ASSERT_EQ(a.size(), 50u);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(same(a[i], b[i]));
    bool differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) differs = differs || !same(a[i], c[i]);
    EXPECT_TRUE(differs);
  }
}

TEST(Synthetic, GoldStructuresAlign) {
  const Vocab vocab = standard_vocab();
  for (Prototype p : {Prototype::kSpan, Prototype::kPair, Prototype::kHyperPair}) {
    const TaskPrompt labels = task_labels(spec_of(p));
    for (const auto& ex : generate(spec_of(p, 9), 300)) {
      const int n = static_cast<int>(ex.tokens.size());
      ASSERT_GE(n, 3);
      ASSERT_LE(n, 14);
      for (const auto& w : ex.tokens) EXPECT_TRUE(vocab.contains(w)) << w;
      // Gold syntax: one root, acyclic, constituents nested and covering the sentence.
      ASSERT_EQ(ex.syntax_heads.size(), ex.tokens.size());
      EXPECT_EQ(std::count(ex.syntax_heads.begin(), ex.syntax_heads.end(), -1), 1);
      for (int i = 0; i < n; ++i) {
        int v = i;
        for (int steps = 0; v != -1; ++steps) {
          ASSERT_LE(steps, n);
          v = ex.syntax_heads[static_cast<std::size_t>(v)];
        }
      }
      const std::set<Span> spans(ex.syntax_spans.begin(), ex.syntax_spans.end());
      EXPECT_TRUE(spans.count(Span{0, n - 1}));
      for (const Span& a : spans) {
        for (const Span& b : spans) {
          const bool disjoint = a.r < b.l || b.r < a.l;
          EXPECT_TRUE(disjoint || a.contains(b) || b.contains(a));
        }
      }
      // Every mention is a constituent, every relation a syntactic arc.
      for (const Span& s : ex.task_spans) EXPECT_TRUE(spans.count(s)) << to_string(s);
      for (const Arc& a : ex.task_arcs) EXPECT_EQ(ex.syntax_heads[static_cast<std::size_t>(a.dep)], a.head);
      std::size_t relations = 0;
      for (const auto& r : ex.records) {
        relations += r.relations.size();
        if (p == Prototype::kSpan) EXPECT_TRUE(r.relations.empty());
        if (p == Prototype::kPair) EXPECT_LE(r.relations.size(), 1u);
        const auto anchored = restore_offsets(std::vector<IERecord>{r}, ex.tokens);
        EXPECT_TRUE(anchored[0].head.matched());
      }
      if (p == Prototype::kSpan) {
        // Span tasks align with the arcs inside each multi-token mention.
        for (const Arc& a : ex.task_arcs) {
          EXPECT_TRUE(std::any_of(ex.task_spans.begin(), ex.task_spans.end(),
                                  [&](const Span& s) { return s.l <= a.dep && a.dep <= s.r && s.l <= a.head && a.head <= s.r; }));
        }
      } else {
        EXPECT_EQ(ex.task_arcs.size(), relations);
      }
      EXPECT_EQ(parse(serialize(ex.records), labels), ex.records);
    }
  }
}

TEST(Synthetic, TaskLabels) {
  const TaskPrompt span = task_labels(spec_of(Prototype::kSpan));
  EXPECT_EQ(span.task, "entity");
  EXPECT_TRUE(span.types.empty());
  const TaskPrompt hyper = task_labels(spec_of(Prototype::kHyperPair));
  EXPECT_EQ(hyper.task, "event");
  EXPECT_EQ(hyper.types, (std::vector<std::string>{"agent", "target", "place"}));
  SyntheticTaskSpec named = spec_of(Prototype::kPair);
  named.task_name = "custom";
  EXPECT_EQ(task_labels(named).task_token(), "<TASK>custom");
}

TEST(Synthetic, LengthBoundsRespected) {
  SyntheticTaskSpec s = spec_of(Prototype::kPair);
  s.min_len = 6;
  s.max_len = 8;
  for (const auto& ex : generate(s, 100)) {
    EXPECT_GE(ex.tokens.size(), 6u);
    EXPECT_LE(ex.tokens.size(), 8u);
  }
  s.max_len = 2;
  EXPECT_THROW(generate(s, 1), ConfigError);
}

TEST(Synthetic, PlaintextFromTheSameLexicon) {
  const Vocab vocab = standard_vocab();
  const auto lines = generate_plaintext(100, 3);
  ASSERT_EQ(lines.size(), 100u);
  EXPECT_EQ(lines, generate_plaintext(100, 3));
  for (const auto& line : lines) {
    for (const auto& w : split_whitespace(line)) EXPECT_TRUE(vocab.contains(w)) << w;
  }
}

TEST(Subsample, Regimes) {
  const auto data = generate(spec_of(Prototype::kPair), 200);
  EXPECT_EQ(subsample(data, "full", 1).size(), 200u);
  EXPECT_EQ(subsample(data, "10%", 1).size(), 20u);
  EXPECT_EQ(subsample(data, "1%", 1).size(), 2u);
  const auto shots = subsample(data, "1-shot", 1);
  std::set<std::string> covered, all;
  for (const auto& ex : data) {
    for (const auto& r : ex.records) all.insert(r.head.attr);
  }
  for (const auto& ex : shots) {
    for (const auto& r : ex.records) {
      covered.insert(r.head.attr);
      for (const auto& rel : r.relations) covered.insert(rel.target.attr);
    }
  }
  for (const auto& label : all) EXPECT_TRUE(covered.count(label)) << label;
  EXPECT_LE(shots.size(), 10u);
  const auto again = subsample(data, "10-shot", 4), twice = subsample(data, "10-shot", 4);
  ASSERT_EQ(again.size(), twice.size());
  for (std::size_t i = 0; i < again.size(); ++i) EXPECT_TRUE(same(again[i], twice[i]));
  EXPECT_THROW(subsample(data, "many", 1), ConfigError);
  EXPECT_THROW(subsample(data, "0-shot", 1), ConfigError);
  EXPECT_THROW(subsample(data, "150%", 1), ConfigError);
}

TEST(Files, JsonlRoundTrip) {
  const auto data = generate(spec_of(Prototype::kHyperPair), 20);
  const std::string path = temp_path("data.jsonl");
  write_jsonl(path, data);
  const auto back = read_jsonl(path);
  ASSERT_EQ(back.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) EXPECT_TRUE(same(data[i], back[i]));
  std::remove(path.c_str());
  EXPECT_THROW(read_jsonl(temp_path("missing.jsonl")), IoError);
}

TEST(Files, PlaintextReaderSkipsLongSentences) {
  const std::string path = temp_path("corpus.txt");
  {
    std::ofstream out(path);
    out << "ada visited rome\n\n   \none two three four five six\nbo met ada\n";
  }
  PlaintextReader reader(path, 4);
  std::vector<std::vector<std::string>> got;
  while (auto s = reader.next()) got.push_back(*s);
  EXPECT_EQ(got.size(), 2u);
  EXPECT_EQ(reader.skipped(), 1u);
  const PlaintextCorpus c = load_plaintext(path, 10);
  EXPECT_EQ(c.sentences.size(), 3u);
  std::remove(path.c_str());
  EXPECT_THROW(PlaintextReader(temp_path("nope.txt"), 4), IoError);
}
