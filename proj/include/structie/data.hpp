#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "structie/forest.hpp"
#include "structie/lhe.hpp"
#include "structie/synstruct.hpp"

namespace structie {

// ---------------------------------------------------------------------------
// Vocabulary

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;
  static constexpr int kSpan = 4;
  static constexpr int kRel = 5;
  static constexpr int kFirstSentinel = 11;
  static constexpr int kNumSentinels = 16;
  static constexpr int kReserved = 32;

  /// Reserved tokens only.
  Vocab();

  /// Adds a token (no-op if present) and returns its id.
  int add(const std::string& token);
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  /// Id of the token, kUnk when absent.
  int id(const std::string& token) const;
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(tokens_.size()); }
  int sentinel(int k) const;

  std::vector<int> encode(std::span<const std::string> tokens) const;
  std::vector<std::string> decode(std::span<const int> ids) const;

  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int, std::less<>> index_;
};

/// Whitespace tokenization to ids (unknown words map to kUnk).
std::vector<int> tokenize(const Vocab& vocab, std::string_view text);
std::string detokenize(const Vocab& vocab, std::span<const int> ids);

// ---------------------------------------------------------------------------
// Synthetic tasks

struct SyntheticTaskSpec {
  Prototype prototype = Prototype::kSpan;
  std::string task_name;  // defaults to the prototype name
  int min_len = 3;
  int max_len = 14;
  std::uint64_t seed = 1;
};

/// One generated sentence with its gold extraction records and gold syntax.
struct Example {
  std::vector<std::string> tokens;
  std::vector<IERecord> records;
  std::vector<Span> syntax_spans;  // every template constituent
  std::vector<int> syntax_heads;   // head per token, -1 for the root
  std::vector<Span> task_spans;    // spans of the mentions in `records`
  std::vector<Arc> task_arcs;      // syntactic arcs aligned with the relations (inside mentions for span tasks)
};

/// Label prompt (without sentence) of the task family.
TaskPrompt task_labels(const SyntheticTaskSpec& spec);

/// Deterministic under spec.seed.
std::vector<Example> generate(const SyntheticTaskSpec& spec, int count);

/// Vocabulary covering the grammar lexicon, every label and every task token.
Vocab standard_vocab();

/// Plain sentences drawn from the same grammar (for post-training corpora).
std::vector<std::string> generate_plaintext(int count, std::uint64_t seed, int min_len = 3, int max_len = 14);

/// Low-resource subsets: "1-shot", "10-shot", "1%", "10%" or "full".
std::vector<Example> subsample(std::span<const Example> data, std::string_view regime, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Files

/// Streams whitespace-tokenized sentences, one per non-empty line, dropping
/// sentences longer than max_len.
class PlaintextReader {
 public:
  PlaintextReader(const std::string& path, int max_len);

  std::optional<std::vector<std::string>> next();
  std::size_t skipped() const { return skipped_; }

 private:
  std::string path_;
  std::ifstream in_;
  int max_len_;
  std::size_t skipped_ = 0;
};

struct PlaintextCorpus {
  std::vector<std::vector<std::string>> sentences;
  std::size_t skipped = 0;
};

PlaintextCorpus load_plaintext(const std::string& path, int max_len);

void to_json(nlohmann::json& j, const Example& e);
void from_json(const nlohmann::json& j, Example& e);

void write_jsonl(const std::string& path, std::span<const Example> data);
std::vector<Example> read_jsonl(const std::string& path);

}  // namespace structie
