#pragma once

// Linearized hierarchical expressions (LHE): the flat token encoding of
// extraction records emitted by the decoder.
//
//   span record       ( w1 w2 , attr )
//   pair record       ( w1 , attr [ type ] ( w2 , attr2 ) )
//   hyper-pair record ( w1 , attr [ t1 ] ( w2 , a2 ) [ t2 ] ( w3 , a3 ) )
//
// Tokens are joined by single spaces; records follow each other separated by
// one space.

#include <compare>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace structie {

enum class Prototype { kSpan, kPair, kHyperPair };

std::string to_string(Prototype prototype);
Prototype prototype_from_string(std::string_view name);

inline constexpr std::string_view kTaskMarker = "<TASK>";
inline constexpr std::string_view kSpanMarker = "<SPAN>";
inline constexpr std::string_view kRelMarker = "<REL>";

/// True for LHE punctuation and prompt markers (including task tokens "<TASK>name").
bool is_reserved_token(std::string_view token);

struct Mention {
  std::vector<std::string> text;
  std::string attr;
  auto operator<=>(const Mention&) const = default;
};

struct Relation {
  std::string type;
  Mention target;
  auto operator<=>(const Relation&) const = default;
};

struct IERecord {
  Mention head;
  std::vector<Relation> relations;
  auto operator<=>(const IERecord&) const = default;
};

struct TaskPrompt {
  std::string task;
  Prototype prototype = Prototype::kSpan;
  std::vector<std::string> attrs;
  std::vector<std::string> types;
  std::vector<std::string> sentence;

  /// The single task identifier token, "<TASK>" followed by the task name.
  std::string task_token() const;
};

/// Throws CodecError on empty mentions, reserved tokens in mention text or
/// labels, and tokens containing whitespace.
std::string serialize(std::span<const IERecord> records);

enum class ParseMode {
  /// Any malformed input raises ParseError.
  kStrict,
  /// Malformed records are skipped; every well-formed record is returned.
  kLenient,
};

/// Parses LHE text against the label sets of `labels`.
std::vector<IERecord> parse(std::string_view text, const TaskPrompt& labels, ParseMode mode = ParseMode::kStrict);

/// task token, "<SPAN>"-prefixed attributes, "<REL>"-prefixed types, sentence.
std::vector<std::string> build_input(const TaskPrompt& prompt);

/// Token offsets [start, end) of a mention; start = -1 when the text was not found.
struct MentionOffsets {
  int start = -1;
  int end = -1;

  bool matched() const { return start >= 0; }
  auto operator<=>(const MentionOffsets&) const = default;
};

struct AnchoredRecord {
  IERecord record;
  MentionOffsets head;
  std::vector<MentionOffsets> targets;  // parallel to record.relations
};

/// Leftmost exact match of every mention inside the sentence.
MentionOffsets locate(std::span<const std::string> mention, std::span<const std::string> sentence);
std::vector<AnchoredRecord> restore_offsets(std::span<const IERecord> records, std::span<const std::string> sentence);

void to_json(nlohmann::json& j, const Mention& m);
void from_json(const nlohmann::json& j, Mention& m);
void to_json(nlohmann::json& j, const Relation& r);
void from_json(const nlohmann::json& j, Relation& r);
void to_json(nlohmann::json& j, const IERecord& r);
void from_json(const nlohmann::json& j, IERecord& r);

std::vector<std::string> split_whitespace(std::string_view text);
std::string join_tokens(std::span<const std::string> tokens);

}  // namespace structie
