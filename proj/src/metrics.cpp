#include "structie/metrics.hpp"

#include <algorithm>
#include <map>
#include <set>

#include "structie/error.hpp"

namespace structie {

namespace {

struct MentionKey {
  int start;
  int end;
  std::string attr;
  auto operator<=>(const MentionKey&) const = default;
};

std::vector<MentionKey> mentions_of(const AnchoredRecord& r) {
  std::vector<MentionKey> out{{r.head.start, r.head.end, r.record.head.attr}};
  for (std::size_t k = 0; k < r.record.relations.size(); ++k) {
    out.push_back({r.targets[k].start, r.targets[k].end, r.record.relations[k].target.attr});
  }
  return out;
}

bool overlaps(const MentionKey& a, const MentionKey& b) { return a.start < b.end && b.start < a.end; }

double ratio(std::size_t num, std::size_t den) { return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den); }

void check_sizes(std::size_t a, std::size_t b) {
  if (a != b) throw Error("prediction and gold sentence counts differ");
}

}  // namespace

RecordKey record_key(const AnchoredRecord& record) {
  RecordKey k;
  k.start = record.head.start;
  k.end = record.head.end;
  k.attr = record.record.head.attr;
  for (std::size_t i = 0; i < record.record.relations.size(); ++i) {
    const auto& rel = record.record.relations[i];
    k.relations.emplace_back(rel.type, record.targets[i].start, record.targets[i].end, rel.target.attr);
  }
  std::sort(k.relations.begin(), k.relations.end());
  return k;
}

F1Score strict_f1(std::span<const std::vector<AnchoredRecord>> predicted,
                  std::span<const std::vector<AnchoredRecord>> gold) {
  check_sizes(predicted.size(), gold.size());
  F1Score s;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    std::map<RecordKey, int> remaining;
    for (const auto& g : gold[i]) ++remaining[record_key(g)];
    s.gold += gold[i].size();
    s.predicted += predicted[i].size();
    for (const auto& p : predicted[i]) {
      if (!p.head.matched()) continue;
      auto it = remaining.find(record_key(p));
      if (it != remaining.end() && it->second > 0) {
        --it->second;
        ++s.correct;
      }
    }
  }
  s.precision = ratio(s.correct, s.predicted);
  s.recall = ratio(s.correct, s.gold);
  s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

EvalMetrics evaluate_records(std::span<const std::vector<AnchoredRecord>> predicted,
                             std::span<const std::vector<AnchoredRecord>> gold) {
  check_sizes(predicted.size(), gold.size());
  EvalMetrics m;
  m.f1 = strict_f1(predicted, gold);
  m.examples = predicted.size();
  std::size_t mentions = 0, boundary = 0, relational = 0, relation_wrong = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    std::set<MentionKey> gold_mentions;
    std::set<RecordKey> gold_records;
    for (const auto& g : gold[i]) {
      for (auto& mk : mentions_of(g)) gold_mentions.insert(mk);
      gold_records.insert(record_key(g));
    }
    for (const auto& p : predicted[i]) {
      const auto ms = mentions_of(p);
      for (const auto& mk : ms) {
        ++mentions;
        if (mk.start < 0) continue;
        bool exact = false, overlap = false;
        for (const auto& g : gold_mentions) {
          if (g.start == mk.start && g.end == mk.end) exact = true;
          if (overlaps(g, mk)) overlap = true;
        }
        if (overlap && !exact) ++boundary;
      }
      if (p.record.relations.empty()) continue;
      ++relational;
      const bool mentions_ok = std::all_of(ms.begin(), ms.end(), [&](const MentionKey& mk) {
        return mk.start >= 0 && gold_mentions.count(mk) != 0;
      });
      if (mentions_ok && gold_records.count(record_key(p)) == 0) ++relation_wrong;
    }
  }
  m.boundary_error = ratio(boundary, mentions);
  m.relation_error = ratio(relation_wrong, relational);
  return m;
}

nlohmann::json to_json(const EvalMetrics& m) {
  return nlohmann::json{{"precision", m.f1.precision},
                        {"recall", m.f1.recall},
                        {"f1", m.f1.f1},
                        {"predicted", m.f1.predicted},
                        {"gold", m.f1.gold},
                        {"correct", m.f1.correct},
                        {"boundary_error", m.boundary_error},
                        {"relation_error", m.relation_error},
                        {"examples", m.examples}};
}

}  // namespace structie
