#pragma once

// Structure induction from syntactic-distance measurements.
//
// Tokens are 0-based.  Gap k (0 <= k < n-1) sits between tokens k and k+1 and
// carries the constituency measurement oc[k]; token i carries the dependency
// measurement od[i].  The virtual gaps k = -1 and k = n-1 are +infinity.
// Spans are inclusive [l, r].

#include <Eigen/Dense>
#include <compare>
#include <map>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

namespace structie {

struct Span {
  int l = 0;
  int r = 0;

  int width() const { return r - l + 1; }
  bool contains(int i) const { return l <= i && i <= r; }
  bool contains(const Span& other) const { return l <= other.l && other.r <= r; }
  auto operator<=>(const Span&) const = default;
};

std::string to_string(const Span& span);

class DistanceProfile {
 public:
  DistanceProfile() = default;
  /// Requires od non-empty and oc.size() == od.size() - 1.
  DistanceProfile(std::vector<double> oc, std::vector<double> od);

  int size() const { return static_cast<int>(od_.size()); }
  const std::vector<double>& oc() const { return oc_; }
  const std::vector<double>& od() const { return od_; }

  /// Constituency measurement at gap k; +infinity outside [0, n-1).
  double gap(int k) const;
  double dep(int i) const { return od_.at(static_cast<std::size_t>(i)); }

 private:
  std::vector<double> oc_;
  std::vector<double> od_;
};

void to_json(nlohmann::json& j, const DistanceProfile& p);
void from_json(const nlohmann::json& j, DistanceProfile& p);

/// Minimal span around token i whose outer gaps both exceed od[i].
Span smallest_constituent(const DistanceProfile& profile, int i);

/// Leftmost argmax of od over the span.
int dependent_head(const DistanceProfile& profile, Span span);

struct ConTree {
  struct Node {
    Span span;
    int split = -1;  // gap index separating the children; -1 for leaves
    int left = -1;
    int right = -1;
    int parent = -1;
  };
  std::vector<Node> nodes;  // nodes[0] is the root [0, n-1]

  int find(Span span) const;
  std::vector<Span> spans() const;
  /// Bracketed form, e.g. "(a (b c))".
  std::string to_sexpr(std::span<const std::string> tokens) const;
};

/// Recursive top-down splitting at the leftmost maximal gap.
ConTree build_con_tree(const DistanceProfile& profile);

struct DepTree {
  std::vector<int> head;  // parent index per token, -1 for the root

  int root() const;
  /// Arcs rendered as "child<-head" (root as "child<-ROOT"), one per token.
  std::vector<std::string> to_arcs(std::span<const std::string> tokens) const;
};

/// Each token attaches to the dependent head of its smallest constituent;
/// when it is that head itself, to the head of the nearest enclosing
/// constituency node headed by another token.  The global leftmost argmax of
/// od is the root.
DepTree build_dep_tree(const DistanceProfile& profile);

// ---------------------------------------------------------------------------
// Probabilistic structures.

struct DistributionOptions {
  /// Stand-in for the infinite virtual gaps (and minus the empty-set max).
  double sentinel = 1e6;
  /// 0 selects the hard running max; > 0 replaces it by temperature * logsumexp(x / temperature).
  double max_temperature = 0.0;
};

/// left(i, l) = p(w_l | w_i) for l <= i, right(i, r) = p(w_r | w_i) for r >= i; zeros elsewhere.
struct BoundaryDistribution {
  Eigen::MatrixXd left;
  Eigen::MatrixXd right;
};

BoundaryDistribution boundary_distribution(const DistanceProfile& profile, const DistributionOptions& options = {});

/// Vector-Jacobian product of boundary_distribution: given dLoss/dleft and
/// dLoss/dright, returns dLoss/doc and dLoss/dod (the hard max routes its
/// gradient to the leftmost argmax).
struct ProfileGradient {
  std::vector<double> oc;
  std::vector<double> od;
};
ProfileGradient boundary_distribution_vjp(const DistanceProfile& profile, const Eigen::MatrixXd& grad_left,
                                          const Eigen::MatrixXd& grad_right,
                                          const DistributionOptions& options = {});

/// p_c(c | w_i) for every span c containing token i.
std::map<Span, double> span_distribution(const DistanceProfile& profile, int i,
                                         const DistributionOptions& options = {});

enum class HeadMode {
  /// Sum over every span containing both tokens (rows normalize).
  kMarginal,
  /// Only the most probable span of each token contributes.
  kSingleSpan,
};

/// p_d(w_j | w_i) from boundary probabilities and per-token head scores.
Eigen::MatrixXd head_marginal(const BoundaryDistribution& bounds, std::span<const double> scores,
                              HeadMode mode = HeadMode::kMarginal);

struct HeadMarginalGradient {
  Eigen::MatrixXd left;
  Eigen::MatrixXd right;
  std::vector<double> scores;
};
HeadMarginalGradient head_marginal_vjp(const BoundaryDistribution& bounds, std::span<const double> scores,
                                       const Eigen::MatrixXd& grad_out, HeadMode mode = HeadMode::kMarginal);

Eigen::MatrixXd head_distribution(const DistanceProfile& profile, std::span<const double> scores,
                                  HeadMode mode = HeadMode::kMarginal, const DistributionOptions& options = {});

/// Most probable left and right boundary of token i (leftmost on ties).
Span most_probable_span(const BoundaryDistribution& bounds, int i);

}  // namespace structie
