#pragma once

#include <Eigen/Dense>
#include <compare>
#include <nlohmann/json.hpp>
#include <span>
#include <vector>

#include "structie/synstruct.hpp"

namespace structie {

/// Directed word-word arc; head -1 stands for the virtual root.
struct Arc {
  int head = -1;
  int dep = 0;
  auto operator<=>(const Arc&) const = default;
};

struct Arborescence {
  std::vector<int> head;  // -1 marks the single root
  double score = 0.0;     // sum of log arc weights, root attachment included
};

/// The k highest-scoring single-root arborescences, best first.
///
/// weights(i, j) for i != j is the weight of the arc j -> i (head j of
/// dependent i); weights(i, i) is the weight of attaching i to the virtual
/// root.  Scores are sums of log weights; zero-weight arcs are unusable.
/// Throws StructureError when a token has no usable head at all.
std::vector<Arborescence> kbest_mst(const Eigen::MatrixXd& weights, int k);

struct WeightedArc {
  Arc arc;
  double weight = 0.0;
};

struct DepForest {
  int n = 0;
  std::vector<WeightedArc> arcs;  // sorted by (dep, head); root attachments have head -1
  std::vector<Arborescence> trees;

  bool contains(const Arc& arc) const;
  /// Word-word arcs only; root attachments are not counted.
  std::size_t edge_count() const;
};

/// Union of the k-best trees of the mean of the per-head matrices; arc weight
/// is the mean probability.
DepForest compact_dep_forest(std::span<const Eigen::MatrixXd> per_head, int k);

struct WeightedSpan {
  Span span;
  double weight = 0.0;
  int provenance = 0;  // number of source trees containing the span
};

struct ConForest {
  int n = 0;
  std::vector<WeightedSpan> spans;       // ranked by weight, heaviest first
  std::vector<std::pair<int, int>> edges;  // (parent, child) indices into spans

  int find(Span span) const;
  bool contains(Span span) const { return find(span) >= 0; }
};

/// Union of the constituency trees of every profile.  A span's weight is the
/// mean over profiles of the mean p_c(span | w_i) over the tokens i inside it.
ConForest compact_con_forest(std::span<const DistanceProfile> profiles, const DistributionOptions& options = {});
ConForest compact_con_forest(std::span<const DistanceProfile> profiles, std::span<const BoundaryDistribution> bounds);

/// Fraction of gold items present in the forest. Throws on empty gold.
double agreement_rate(const ConForest& forest, std::span<const Span> gold);
double agreement_rate(const DepForest& forest, std::span<const Arc> gold);

/// Structure elements per token.
double density(const ConForest& forest);
double density(const DepForest& forest);

nlohmann::json to_json(const ConForest& forest);
nlohmann::json to_json(const DepForest& forest);

}  // namespace structie
