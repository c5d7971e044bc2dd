#include "structie/forest.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <queue>
#include <set>

#include "structie/error.hpp"

namespace structie {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Maximum spanning arborescence rooted at `root` by Chu-Liu-Edmonds
// contraction.  score(d, h) is the log-weight of h -> d; -inf forbids the arc.
std::optional<std::vector<int>> chu_liu_edmonds(const Eigen::MatrixXd& score, int root) {
  const int n = static_cast<int>(score.rows());
  std::vector<int> parent(static_cast<std::size_t>(n), -1);
  for (int d = 0; d < n; ++d) {
    if (d == root) continue;
    int best = -1;
    for (int h = 0; h < n; ++h) {
      if (h == d || score(d, h) == kNegInf) continue;
      if (best < 0 || score(d, h) > score(d, best)) best = h;
    }
    if (best < 0) return std::nullopt;
    parent[static_cast<std::size_t>(d)] = best;
  }

  std::vector<int> cycle;
  std::vector<int> mark(static_cast<std::size_t>(n), -1);
  for (int s = 0; s < n && cycle.empty(); ++s) {
    int v = s;
    while (v != root && mark[static_cast<std::size_t>(v)] == -1) {
      mark[static_cast<std::size_t>(v)] = s;
      v = parent[static_cast<std::size_t>(v)];
    }
    if (v != root && mark[static_cast<std::size_t>(v)] == s) {
      int u = v;
      do {
        cycle.push_back(u);
        u = parent[static_cast<std::size_t>(u)];
      } while (u != v);
    }
  }
  if (cycle.empty()) return parent;

  std::vector<bool> in_cycle(static_cast<std::size_t>(n), false);
  for (int v : cycle) in_cycle[static_cast<std::size_t>(v)] = true;
  std::vector<int> to_new(static_cast<std::size_t>(n), -1);
  std::vector<int> to_old;
  for (int v = 0; v < n; ++v) {
    if (!in_cycle[static_cast<std::size_t>(v)]) {
      to_new[static_cast<std::size_t>(v)] = static_cast<int>(to_old.size());
      to_old.push_back(v);
    }
  }
  const int c = static_cast<int>(to_old.size());
  for (int v : cycle) to_new[static_cast<std::size_t>(v)] = c;

  Eigen::MatrixXd contracted = Eigen::MatrixXd::Constant(c + 1, c + 1, kNegInf);
  std::vector<int> leave_via(static_cast<std::size_t>(n), -1);  // cycle node used by arcs c -> d
  std::vector<int> enter_at(static_cast<std::size_t>(n), -1);   // cycle node entered from h
  for (int d = 0; d < n; ++d) {
    if (in_cycle[static_cast<std::size_t>(d)]) continue;
    const int nd = to_new[static_cast<std::size_t>(d)];
    double best = kNegInf;
    int via = -1;
    for (int h = 0; h < n; ++h) {
      if (h == d) continue;
      if (!in_cycle[static_cast<std::size_t>(h)]) {
        contracted(nd, to_new[static_cast<std::size_t>(h)]) = score(d, h);
      } else if (via < 0 || score(d, h) > best) {
        best = score(d, h);
        via = h;
      }
    }
    contracted(nd, c) = best;
    leave_via[static_cast<std::size_t>(d)] = via;
  }
  for (int h = 0; h < n; ++h) {
    if (in_cycle[static_cast<std::size_t>(h)]) continue;
    for (int v : cycle) {
      const double s = score(v, h);
      if (s == kNegInf) continue;
      const double gain = s - score(v, parent[static_cast<std::size_t>(v)]);
      if (enter_at[static_cast<std::size_t>(h)] < 0 || gain > contracted(c, to_new[static_cast<std::size_t>(h)])) {
        contracted(c, to_new[static_cast<std::size_t>(h)]) = gain;
        enter_at[static_cast<std::size_t>(h)] = v;
      }
    }
  }

  const auto sub = chu_liu_edmonds(contracted, to_new[static_cast<std::size_t>(root)]);
  if (!sub) return std::nullopt;

  std::vector<int> result = parent;
  for (int d = 0; d < n; ++d) {
    if (d == root || in_cycle[static_cast<std::size_t>(d)]) continue;
    const int hp = (*sub)[static_cast<std::size_t>(to_new[static_cast<std::size_t>(d)])];
    result[static_cast<std::size_t>(d)] = hp == c ? leave_via[static_cast<std::size_t>(d)] : to_old[static_cast<std::size_t>(hp)];
  }
  const int entering_head = to_old[static_cast<std::size_t>((*sub)[static_cast<std::size_t>(c)])];
  result[static_cast<std::size_t>(enter_at[static_cast<std::size_t>(entering_head)])] = entering_head;
  return result;
}

struct Constraints {
  std::vector<int> forced;                 // forced head per dependent, -2 when free
  std::set<std::pair<int, int>> excluded;  // (dep, head)
};

struct Candidate {
  double score;
  std::size_t order;
  int root;
  std::vector<int> parent;
  Constraints constraints;
};

struct CandidateLess {
  bool operator()(const Candidate& a, const Candidate& b) const {
    if (a.score != b.score) return a.score < b.score;
    return a.order > b.order;
  }
};

std::optional<Candidate> solve(const Eigen::MatrixXd& logw, int root, Constraints constraints) {
  const int n = static_cast<int>(logw.rows());
  Eigen::MatrixXd score = logw;
  for (int d = 0; d < n; ++d) {
    score(d, d) = kNegInf;
    if (d == root) {
      score.row(d).setConstant(kNegInf);
      continue;
    }
    const int f = constraints.forced[static_cast<std::size_t>(d)];
    if (f >= 0) {
      const double keep = score(d, f);
      score.row(d).setConstant(kNegInf);
      score(d, f) = keep;
    }
  }
  for (const auto& [d, h] : constraints.excluded) score(d, h) = kNegInf;
  auto parent = chu_liu_edmonds(score, root);
  if (!parent) return std::nullopt;
  double total = logw(root, root);
  for (int d = 0; d < n; ++d) {
    if (d != root) total += logw(d, (*parent)[static_cast<std::size_t>(d)]);
  }
  if (total == kNegInf) return std::nullopt;
  (*parent)[static_cast<std::size_t>(root)] = -1;
  return Candidate{total, 0, root, std::move(*parent), std::move(constraints)};
}

}  // namespace

std::vector<Arborescence> kbest_mst(const Eigen::MatrixXd& weights, int k) {
  if (k < 1) throw StructureError("kbest_mst needs k >= 1");
  const int n = static_cast<int>(weights.rows());
  if (n < 1 || weights.cols() != n) throw StructureError("kbest_mst needs a non-empty square matrix");
  Eigen::MatrixXd logw(n, n);
  for (int i = 0; i < n; ++i) {
    bool any = false;
    for (int j = 0; j < n; ++j) {
      const double w = weights(i, j);
      if (w < 0 || std::isnan(w)) throw StructureError("kbest_mst: negative or NaN weight");
      logw(i, j) = w > 0 ? std::log(w) : kNegInf;
      any = any || w > 0;
    }
    if (!any) throw StructureError("kbest_mst: token " + std::to_string(i) + " has no possible head");
  }

  // Lawler partitioning over one queue shared by every root choice.
  std::priority_queue<Candidate, std::vector<Candidate>, CandidateLess> queue;
  std::size_t order = 0;
  for (int root = 0; root < n; ++root) {
    if (logw(root, root) == kNegInf) continue;
    auto cand = solve(logw, root, Constraints{std::vector<int>(static_cast<std::size_t>(n), -2), {}});
    if (!cand) continue;
    cand->order = order++;
    queue.push(std::move(*cand));
  }

  std::vector<Arborescence> out;
  while (!queue.empty() && static_cast<int>(out.size()) < k) {
    Candidate best = queue.top();
    queue.pop();
    out.push_back({best.parent, best.score});
    if (static_cast<int>(out.size()) == k) break;

    Constraints running = best.constraints;
    for (int d = 0; d < n; ++d) {
      if (d == best.root || running.forced[static_cast<std::size_t>(d)] >= 0) continue;
      const int h = best.parent[static_cast<std::size_t>(d)];
      Constraints branch = running;
      branch.excluded.insert({d, h});
      if (auto cand = solve(logw, best.root, std::move(branch))) {
        cand->order = order++;
        queue.push(std::move(*cand));
      }
      running.forced[static_cast<std::size_t>(d)] = h;
    }
  }
  return out;
}

bool DepForest::contains(const Arc& arc) const {
  return std::any_of(arcs.begin(), arcs.end(), [&](const WeightedArc& w) { return w.arc == arc; });
}

std::size_t DepForest::edge_count() const {
  return static_cast<std::size_t>(
      std::count_if(arcs.begin(), arcs.end(), [](const WeightedArc& w) { return w.arc.head >= 0; }));
}

DepForest compact_dep_forest(std::span<const Eigen::MatrixXd> per_head, int k) {
  if (per_head.empty()) throw StructureError("compact_dep_forest needs at least one matrix");
  Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(per_head.front().rows(), per_head.front().cols());
  for (const auto& m : per_head) {
    if (m.rows() != mean.rows() || m.cols() != mean.cols()) {
      throw StructureError("compact_dep_forest: matrices differ in size");
    }
    mean += m;
  }
  mean /= static_cast<double>(per_head.size());

  DepForest forest;
  forest.n = static_cast<int>(mean.rows());
  forest.trees = kbest_mst(mean, k);
  std::set<Arc> seen;
  for (const auto& tree : forest.trees) {
    for (int d = 0; d < forest.n; ++d) seen.insert(Arc{tree.head[static_cast<std::size_t>(d)], d});
  }
  std::vector<Arc> ordered(seen.begin(), seen.end());
  std::sort(ordered.begin(), ordered.end(), [](const Arc& a, const Arc& b) {
    return a.dep != b.dep ? a.dep < b.dep : a.head < b.head;
  });
  for (const Arc& arc : ordered) {
    const double w = arc.head < 0 ? mean(arc.dep, arc.dep) : mean(arc.dep, arc.head);
    forest.arcs.push_back({arc, w});
  }
  return forest;
}

int ConForest::find(Span span) const {
  for (std::size_t k = 0; k < spans.size(); ++k) {
    if (spans[k].span == span) return static_cast<int>(k);
  }
  return -1;
}

ConForest compact_con_forest(std::span<const DistanceProfile> profiles, const DistributionOptions& options) {
  std::vector<BoundaryDistribution> bounds;
  bounds.reserve(profiles.size());
  for (const auto& p : profiles) bounds.push_back(boundary_distribution(p, options));
  return compact_con_forest(profiles, bounds);
}

ConForest compact_con_forest(std::span<const DistanceProfile> profiles, std::span<const BoundaryDistribution> bounds) {
  if (profiles.empty()) throw StructureError("compact_con_forest needs at least one profile");
  if (bounds.size() != profiles.size()) throw StructureError("compact_con_forest: bounds/profiles mismatch");
  const int n = profiles.front().size();
  std::map<Span, int> provenance;
  std::set<std::pair<Span, Span>> tree_edges;
  for (const auto& p : profiles) {
    if (p.size() != n) throw StructureError("compact_con_forest: profiles differ in length");
    const ConTree tree = build_con_tree(p);
    for (const auto& node : tree.nodes) {
      ++provenance[node.span];
      if (node.parent >= 0) tree_edges.insert({tree.nodes[static_cast<std::size_t>(node.parent)].span, node.span});
    }
  }

  ConForest forest;
  forest.n = n;
  for (const auto& [span, count] : provenance) {
    double w = 0.0;
    for (const auto& b : bounds) {
      double inner = 0.0;
      for (int i = span.l; i <= span.r; ++i) inner += b.left(i, span.l) * b.right(i, span.r);
      w += inner / span.width();
    }
    forest.spans.push_back({span, w / static_cast<double>(bounds.size()), count});
  }
  std::stable_sort(forest.spans.begin(), forest.spans.end(),
                   [](const WeightedSpan& a, const WeightedSpan& b) { return a.weight > b.weight; });
  for (const auto& [parent, child] : tree_edges) forest.edges.emplace_back(forest.find(parent), forest.find(child));
  return forest;
}

double agreement_rate(const ConForest& forest, std::span<const Span> gold) {
  if (gold.empty()) throw StructureError("agreement_rate needs non-empty gold spans");
  const auto hits = std::count_if(gold.begin(), gold.end(), [&](const Span& s) { return forest.contains(s); });
  return static_cast<double>(hits) / static_cast<double>(gold.size());
}

double agreement_rate(const DepForest& forest, std::span<const Arc> gold) {
  if (gold.empty()) throw StructureError("agreement_rate needs non-empty gold arcs");
  const auto hits = std::count_if(gold.begin(), gold.end(), [&](const Arc& a) { return forest.contains(a); });
  return static_cast<double>(hits) / static_cast<double>(gold.size());
}

double density(const ConForest& forest) {
  return forest.n == 0 ? 0.0 : static_cast<double>(forest.spans.size()) / forest.n;
}

double density(const DepForest& forest) {
  return forest.n == 0 ? 0.0 : static_cast<double>(forest.edge_count()) / forest.n;
}

nlohmann::json to_json(const ConForest& forest) {
  nlohmann::json j;
  j["n"] = forest.n;
  j["spans"] = nlohmann::json::array();
  for (const auto& s : forest.spans) {
    j["spans"].push_back({{"l", s.span.l}, {"r", s.span.r}, {"weight", s.weight}, {"provenance", s.provenance}});
  }
  j["edges"] = forest.edges;
  return j;
}

nlohmann::json to_json(const DepForest& forest) {
  nlohmann::json j;
  j["n"] = forest.n;
  j["arcs"] = nlohmann::json::array();
  for (const auto& a : forest.arcs) {
    j["arcs"].push_back({{"head", a.arc.head}, {"dep", a.arc.dep}, {"weight", a.weight}});
  }
  j["tree_scores"] = nlohmann::json::array();
  for (const auto& t : forest.trees) j["tree_scores"].push_back(t.score);
  return j;
}

}  // namespace structie
