#include "structie/lhe.hpp"

#include <algorithm>
#include <cctype>
#include <optional>

#include "structie/error.hpp"

namespace structie {

namespace {

constexpr std::string_view kOpen = "(";
constexpr std::string_view kClose = ")";
constexpr std::string_view kTypeOpen = "[";
constexpr std::string_view kTypeClose = "]";
constexpr std::string_view kSep = ",";

bool has_space(std::string_view token) {
  return std::any_of(token.begin(), token.end(), [](unsigned char c) { return std::isspace(c) != 0; });
}

void check_token(std::string_view token, const char* what) {
  if (token.empty()) throw CodecError(std::string(what) + ": empty token");
  if (has_space(token)) throw CodecError(std::string(what) + ": token contains whitespace: '" + std::string(token) + "'");
  if (is_reserved_token(token)) {
    throw CodecError(std::string(what) + ": reserved marker '" + std::string(token) + "'");
  }
}

void append_mention(std::string& out, const Mention& m) {
  if (m.text.empty()) throw CodecError("mention text is empty");
  for (const auto& tok : m.text) {
    check_token(tok, "mention text");
    out += tok;
    out += ' ';
  }
  check_token(m.attr, "attribute label");
  out += ", ";
  out += m.attr;
}

struct Token {
  std::string_view text;
  std::size_t offset;
};

std::vector<Token> tokenize(std::string_view text) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i >= text.size()) break;
    const std::size_t start = i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    out.push_back({text.substr(start, i - start), start});
  }
  return out;
}

class RecordParser {
 public:
  RecordParser(const std::vector<Token>& tokens, std::size_t end_offset, const TaskPrompt& labels)
      : tokens_(tokens), end_(end_offset), labels_(labels) {}

  /// Parses one record starting at `pos` (which must hold "("); advances pos past it.
  IERecord record(std::size_t& pos) {
    expect(pos, kOpen);
    IERecord rec;
    rec.head = mention_body(pos);
    while (true) {
      const Token& t = at(pos);
      if (t.text == kClose) {
        ++pos;
        return rec;
      }
      if (t.text != kTypeOpen) throw ParseError(t.offset, "expected '[' or ')' but found '" + std::string(t.text) + "'");
      ++pos;
      const Token& type = at(pos);
      if (std::find(labels_.types.begin(), labels_.types.end(), type.text) == labels_.types.end()) {
        throw ParseError(type.offset, "unknown relation type '" + std::string(type.text) + "'");
      }
      ++pos;
      expect(pos, kTypeClose);
      const Token& open = at(pos);
      if (open.text != kOpen) throw ParseError(open.offset, "dangling relation type without a target mention");
      ++pos;
      Relation rel;
      rel.type = std::string(type.text);
      rel.target = mention_body(pos);
      expect(pos, kClose);
      rec.relations.push_back(std::move(rel));
    }
  }

 private:
  const Token& at(std::size_t pos) {
    if (pos >= tokens_.size()) throw ParseError(end_, "unexpected end of input");
    return tokens_[pos];
  }

  void expect(std::size_t& pos, std::string_view what) {
    const Token& t = at(pos);
    if (t.text != what) {
      throw ParseError(t.offset, "expected '" + std::string(what) + "' but found '" + std::string(t.text) + "'");
    }
    ++pos;
  }

  Mention mention_body(std::size_t& pos) {
    Mention m;
    while (true) {
      const Token& t = at(pos);
      if (t.text == kSep) break;
      if (is_reserved_token(t.text)) throw ParseError(t.offset, "reserved token '" + std::string(t.text) + "' in mention");
      m.text.emplace_back(t.text);
      ++pos;
    }
    if (m.text.empty()) throw ParseError(at(pos).offset, "empty mention");
    ++pos;  // ","
    const Token& attr = at(pos);
    if (std::find(labels_.attrs.begin(), labels_.attrs.end(), attr.text) == labels_.attrs.end()) {
      throw ParseError(attr.offset, "unknown attribute label '" + std::string(attr.text) + "'");
    }
    m.attr = std::string(attr.text);
    ++pos;
    return m;
  }

  const std::vector<Token>& tokens_;
  std::size_t end_;
  const TaskPrompt& labels_;
};

}  // namespace

std::string to_string(Prototype prototype) {
  switch (prototype) {
    case Prototype::kSpan:
      return "span";
    case Prototype::kPair:
      return "pair";
    case Prototype::kHyperPair:
      return "hyper-pair";
  }
  return "span";
}

Prototype prototype_from_string(std::string_view name) {
  if (name == "span") return Prototype::kSpan;
  if (name == "pair") return Prototype::kPair;
  if (name == "hyper-pair" || name == "hyper_pair" || name == "hyperpair") return Prototype::kHyperPair;
  throw ConfigError("unknown prototype '" + std::string(name) + "'");
}

bool is_reserved_token(std::string_view token) {
  return token == kOpen || token == kClose || token == kTypeOpen || token == kTypeClose || token == kSep ||
         token == kSpanMarker || token == kRelMarker || token.starts_with(kTaskMarker);
}

std::string TaskPrompt::task_token() const { return std::string(kTaskMarker) + task; }

std::string serialize(std::span<const IERecord> records) {
  std::string out;
  for (const auto& rec : records) {
    if (!out.empty()) out += ' ';
    out += "( ";
    append_mention(out, rec.head);
    for (const auto& rel : rec.relations) {
      check_token(rel.type, "relation type");
      out += " [ ";
      out += rel.type;
      out += " ] ( ";
      append_mention(out, rel.target);
      out += " )";
    }
    out += " )";
  }
  return out;
}

std::vector<IERecord> parse(std::string_view text, const TaskPrompt& labels, ParseMode mode) {
  const std::vector<Token> tokens = tokenize(text);
  RecordParser parser(tokens, text.size(), labels);
  std::vector<IERecord> out;
  std::size_t pos = 0;
  while (pos < tokens.size()) {
    if (tokens[pos].text != kOpen) {
      if (mode == ParseMode::kStrict) {
        throw ParseError(tokens[pos].offset, "expected '(' but found '" + std::string(tokens[pos].text) + "'");
      }
      ++pos;
      continue;
    }
    const std::size_t start = pos;
    try {
      out.push_back(parser.record(pos));
    } catch (const ParseError&) {
      if (mode == ParseMode::kStrict) throw;
      pos = start + 1;
    }
  }
  return out;
}

std::vector<std::string> build_input(const TaskPrompt& prompt) {
  if (prompt.task.empty() || has_space(prompt.task)) throw CodecError("task name must be a single non-empty token");
  if (prompt.attrs.empty()) throw CodecError("task '" + prompt.task + "' declares no attribute labels");
  if (prompt.prototype != Prototype::kSpan && prompt.types.empty()) {
    throw CodecError("task '" + prompt.task + "' declares no relation types");
  }
  std::vector<std::string> out;
  out.reserve(1 + 2 * prompt.attrs.size() + 2 * prompt.types.size() + prompt.sentence.size());
  out.push_back(prompt.task_token());
  for (const auto& a : prompt.attrs) {
    check_token(a, "attribute label");
    out.emplace_back(kSpanMarker);
    out.push_back(a);
  }
  for (const auto& t : prompt.types) {
    check_token(t, "relation type");
    out.emplace_back(kRelMarker);
    out.push_back(t);
  }
  for (const auto& w : prompt.sentence) {
    check_token(w, "sentence");
    out.push_back(w);
  }
  return out;
}

MentionOffsets locate(std::span<const std::string> mention, std::span<const std::string> sentence) {
  if (mention.empty() || mention.size() > sentence.size()) return {};
  for (std::size_t s = 0; s + mention.size() <= sentence.size(); ++s) {
    if (std::equal(mention.begin(), mention.end(), sentence.begin() + static_cast<std::ptrdiff_t>(s))) {
      return {static_cast<int>(s), static_cast<int>(s + mention.size())};
    }
  }
  return {};
}

std::vector<AnchoredRecord> restore_offsets(std::span<const IERecord> records, std::span<const std::string> sentence) {
  std::vector<AnchoredRecord> out;
  out.reserve(records.size());
  for (const auto& rec : records) {
    AnchoredRecord a;
    a.record = rec;
    a.head = locate(rec.head.text, sentence);
    for (const auto& rel : rec.relations) a.targets.push_back(locate(rel.target.text, sentence));
    out.push_back(std::move(a));
  }
  return out;
}

void to_json(nlohmann::json& j, const Mention& m) { j = nlohmann::json{{"text", m.text}, {"attr", m.attr}}; }

void from_json(const nlohmann::json& j, Mention& m) {
  m.text = j.at("text").get<std::vector<std::string>>();
  m.attr = j.at("attr").get<std::string>();
}

void to_json(nlohmann::json& j, const Relation& r) { j = nlohmann::json{{"type", r.type}, {"target", r.target}}; }

void from_json(const nlohmann::json& j, Relation& r) {
  r.type = j.at("type").get<std::string>();
  r.target = j.at("target").get<Mention>();
}

void to_json(nlohmann::json& j, const IERecord& r) {
  j = nlohmann::json{{"head", r.head}, {"relations", r.relations}};
}

void from_json(const nlohmann::json& j, IERecord& r) {
  r.head = j.at("head").get<Mention>();
  r.relations = j.value("relations", std::vector<Relation>{});
}

std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  for (const auto& t : tokenize(text)) out.emplace_back(t.text);
  return out;
}

std::string join_tokens(std::span<const std::string> tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

}  // namespace structie
