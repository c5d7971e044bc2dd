#pragma once

#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "structie/lhe.hpp"

namespace structie {

/// Offsets-and-labels identity of a record used for strict matching.
struct RecordKey {
  int start = -1;
  int end = -1;
  std::string attr;
  std::vector<std::tuple<std::string, int, int, std::string>> relations;  // type, start, end, attr

  auto operator<=>(const RecordKey&) const = default;
};

RecordKey record_key(const AnchoredRecord& record);

struct F1Score {
  std::size_t predicted = 0;
  std::size_t gold = 0;
  std::size_t correct = 0;
  double precision = 0.0;  // 0 when nothing was predicted
  double recall = 0.0;     // 0 when there is no gold
  double f1 = 0.0;
};

/// Strict record-level F1: a record counts only when every offset and every
/// label (mention attributes, relation types) matches a gold record.
/// Matching is one-to-one per sentence.
F1Score strict_f1(std::span<const std::vector<AnchoredRecord>> predicted,
                  std::span<const std::vector<AnchoredRecord>> gold);

struct EvalMetrics {
  F1Score f1;
  /// Predicted mentions overlapping a gold mention without matching its boundaries.
  double boundary_error = 0.0;
  /// Predicted relational records whose mentions are all correct but whose record is wrong.
  double relation_error = 0.0;
  std::size_t examples = 0;
};

EvalMetrics evaluate_records(std::span<const std::vector<AnchoredRecord>> predicted,
                             std::span<const std::vector<AnchoredRecord>> gold);

nlohmann::json to_json(const EvalMetrics& m);

}  // namespace structie
