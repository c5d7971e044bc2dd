#include "structie/synstruct.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "structie/error.hpp"

namespace structie {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double sigmoid_grad(double x) {
  const double s = sigmoid(x);
  return s * (1.0 - s);
}

// Running "max" values of one side of token i.  For the left side,
// value[l + 1] = Max over gaps [l, i) for l = -1..i (offset by one so the
// virtual boundary l = -1 is index 0); for the right side,
// value[r - i] = Max over gaps [i, r) for r = i..n.
struct SideMax {
  std::vector<double> value;
  std::vector<int> argmax;  // -1 for sentinel or empty sets
};

SideMax left_side(const DistanceProfile& p, int i, const DistributionOptions& opt) {
  SideMax s;
  s.value.assign(static_cast<std::size_t>(i + 2), 0.0);
  s.argmax.assign(static_cast<std::size_t>(i + 2), -1);
  s.value[static_cast<std::size_t>(i + 1)] = -opt.sentinel;
  double lse = -kInf;
  for (int l = i - 1; l >= 0; --l) {
    const double g = p.oc()[static_cast<std::size_t>(l)];
    const auto idx = static_cast<std::size_t>(l + 1);
    if (opt.max_temperature > 0) {
      const double t = opt.max_temperature;
      const double x = g / t;
      lse = (lse == -kInf) ? x : std::max(lse, x) + std::log1p(std::exp(-std::abs(lse - x)));
      s.value[idx] = t * lse;
    } else if (l == i - 1 || g >= s.value[idx + 1]) {
      s.value[idx] = g;
      s.argmax[idx] = l;
    } else {
      s.value[idx] = s.value[idx + 1];
      s.argmax[idx] = s.argmax[idx + 1];
    }
  }
  s.value[0] = opt.sentinel;
  return s;
}

SideMax right_side(const DistanceProfile& p, int i, const DistributionOptions& opt) {
  const int n = p.size();
  SideMax s;
  s.value.assign(static_cast<std::size_t>(n - i + 1), 0.0);
  s.argmax.assign(static_cast<std::size_t>(n - i + 1), -1);
  s.value[0] = -opt.sentinel;
  double lse = -kInf;
  for (int r = i; r < n - 1; ++r) {
    const double g = p.oc()[static_cast<std::size_t>(r)];
    const auto idx = static_cast<std::size_t>(r - i + 1);
    if (opt.max_temperature > 0) {
      const double t = opt.max_temperature;
      const double x = g / t;
      lse = (lse == -kInf) ? x : std::max(lse, x) + std::log1p(std::exp(-std::abs(lse - x)));
      s.value[idx] = t * lse;
    } else if (r == i || g > s.value[idx - 1]) {
      s.value[idx] = g;
      s.argmax[idx] = r;
    } else {
      s.value[idx] = s.value[idx - 1];
      s.argmax[idx] = s.argmax[idx - 1];
    }
  }
  s.value[static_cast<std::size_t>(n - i)] = opt.sentinel;
  return s;
}

// Routes d(loss)/d(Max over gaps [lo, hi)) into d(loss)/d(oc).
void route_max_grad(const DistanceProfile& p, const DistributionOptions& opt, int lo, int hi, int argmax,
                    double value, double grad, std::vector<double>& d_oc) {
  if (grad == 0.0 || lo >= hi) return;
  if (opt.max_temperature > 0) {
    for (int k = lo; k < hi; ++k) {
      const double w = std::exp((p.oc()[static_cast<std::size_t>(k)] - value) / opt.max_temperature);
      d_oc[static_cast<std::size_t>(k)] += grad * w;
    }
  } else if (argmax >= 0) {
    d_oc[static_cast<std::size_t>(argmax)] += grad;
  }
}

}  // namespace

std::string to_string(const Span& span) {
  return "[" + std::to_string(span.l) + "," + std::to_string(span.r) + "]";
}

DistanceProfile::DistanceProfile(std::vector<double> oc, std::vector<double> od)
    : oc_(std::move(oc)), od_(std::move(od)) {
  if (od_.empty()) throw StructureError("distance profile needs at least one token");
  if (oc_.size() + 1 != od_.size()) {
    throw StructureError("distance profile: " + std::to_string(oc_.size()) + " gap values for " +
                         std::to_string(od_.size()) + " tokens");
  }
}

double DistanceProfile::gap(int k) const {
  if (k < 0 || k >= size() - 1) return kInf;
  return oc_[static_cast<std::size_t>(k)];
}

void to_json(nlohmann::json& j, const DistanceProfile& p) {
  j = nlohmann::json{{"n", p.size()}, {"oc", p.oc()}, {"od", p.od()}};
}

void from_json(const nlohmann::json& j, DistanceProfile& p) {
  p = DistanceProfile(j.at("oc").get<std::vector<double>>(), j.at("od").get<std::vector<double>>());
}

Span smallest_constituent(const DistanceProfile& profile, int i) {
  const int n = profile.size();
  if (i < 0 || i >= n) throw StructureError("token index " + std::to_string(i) + " out of range");
  const double d = profile.dep(i);
  int l = i;
  while (!(profile.gap(l - 1) > d)) --l;
  int r = i;
  while (!(profile.gap(r) > d)) ++r;
  return {l, r};
}

int dependent_head(const DistanceProfile& profile, Span span) {
  if (span.l < 0 || span.r >= profile.size() || span.l > span.r) {
    throw StructureError("span " + to_string(span) + " out of range");
  }
  int best = span.l;
  for (int k = span.l + 1; k <= span.r; ++k) {
    if (profile.dep(k) > profile.dep(best)) best = k;
  }
  return best;
}

int ConTree::find(Span span) const {
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    if (nodes[k].span == span) return static_cast<int>(k);
  }
  return -1;
}

std::vector<Span> ConTree::spans() const {
  std::vector<Span> out;
  out.reserve(nodes.size());
  for (const auto& node : nodes) out.push_back(node.span);
  return out;
}

std::string ConTree::to_sexpr(std::span<const std::string> tokens) const {
  std::string out;
  auto emit = [&](auto&& self, int v) -> void {
    const Node& node = nodes[static_cast<std::size_t>(v)];
    if (node.left < 0) {
      out += tokens[static_cast<std::size_t>(node.span.l)];
      return;
    }
    out += '(';
    self(self, node.left);
    out += ' ';
    self(self, node.right);
    out += ')';
  };
  if (!nodes.empty()) emit(emit, 0);
  return out;
}

ConTree build_con_tree(const DistanceProfile& profile) {
  ConTree tree;
  const int n = profile.size();
  tree.nodes.reserve(static_cast<std::size_t>(2 * n - 1));
  tree.nodes.push_back({Span{0, n - 1}, -1, -1, -1, -1});
  std::vector<int> pending{0};
  while (!pending.empty()) {
    const int v = pending.back();
    pending.pop_back();
    const Span span = tree.nodes[static_cast<std::size_t>(v)].span;
    if (span.l == span.r) continue;
    int split = span.l;
    for (int k = span.l + 1; k < span.r; ++k) {
      if (profile.gap(k) > profile.gap(split)) split = k;
    }
    const int left = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back({Span{span.l, split}, -1, -1, -1, v});
    const int right = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back({Span{split + 1, span.r}, -1, -1, -1, v});
    auto& node = tree.nodes[static_cast<std::size_t>(v)];
    node.split = split;
    node.left = left;
    node.right = right;
    pending.push_back(right);
    pending.push_back(left);
  }
  return tree;
}

int DepTree::root() const {
  for (std::size_t i = 0; i < head.size(); ++i) {
    if (head[i] < 0) return static_cast<int>(i);
  }
  return -1;
}

std::vector<std::string> DepTree::to_arcs(std::span<const std::string> tokens) const {
  std::vector<std::string> out;
  out.reserve(head.size());
  for (std::size_t i = 0; i < head.size(); ++i) {
    const std::string parent = head[i] < 0 ? "ROOT" : tokens[static_cast<std::size_t>(head[i])];
    out.push_back(tokens[i] + "<-" + parent);
  }
  return out;
}

DepTree build_dep_tree(const DistanceProfile& profile) {
  const int n = profile.size();
  const ConTree tree = build_con_tree(profile);
  std::vector<int> node_head(tree.nodes.size());
  for (std::size_t v = 0; v < tree.nodes.size(); ++v) node_head[v] = dependent_head(profile, tree.nodes[v].span);

  DepTree dep;
  dep.head.assign(static_cast<std::size_t>(n), -1);
  for (int i = 0; i < n; ++i) {
    int v = tree.find(smallest_constituent(profile, i));
    if (v < 0) throw StructureError("smallest constituent is not a tree node");
    while (v >= 0 && node_head[static_cast<std::size_t>(v)] == i) v = tree.nodes[static_cast<std::size_t>(v)].parent;
    dep.head[static_cast<std::size_t>(i)] = v < 0 ? -1 : node_head[static_cast<std::size_t>(v)];
  }
  return dep;
}

// ---------------------------------------------------------------------------

BoundaryDistribution boundary_distribution(const DistanceProfile& profile, const DistributionOptions& options) {
  const int n = profile.size();
  BoundaryDistribution out{Eigen::MatrixXd::Zero(n, n), Eigen::MatrixXd::Zero(n, n)};
  for (int i = 0; i < n; ++i) {
    const double d = profile.dep(i);
    const SideMax left = left_side(profile, i, options);
    for (int l = 0; l <= i; ++l) {
      out.left(i, l) = sigmoid(d - left.value[static_cast<std::size_t>(l + 1)]) -
                       sigmoid(d - left.value[static_cast<std::size_t>(l)]);
    }
    const SideMax right = right_side(profile, i, options);
    for (int r = i; r < n; ++r) {
      out.right(i, r) = sigmoid(d - right.value[static_cast<std::size_t>(r - i)]) -
                        sigmoid(d - right.value[static_cast<std::size_t>(r - i + 1)]);
    }
  }
  return out;
}

ProfileGradient boundary_distribution_vjp(const DistanceProfile& profile, const Eigen::MatrixXd& grad_left,
                                          const Eigen::MatrixXd& grad_right, const DistributionOptions& options) {
  const int n = profile.size();
  ProfileGradient g{std::vector<double>(profile.oc().size(), 0.0), std::vector<double>(profile.od().size(), 0.0)};
  for (int i = 0; i < n; ++i) {
    const double d = profile.dep(i);

    const SideMax left = left_side(profile, i, options);
    std::vector<double> d_left(left.value.size(), 0.0);
    for (int l = 0; l <= i; ++l) {
      const double go = grad_left(i, l);
      if (go == 0.0) continue;
      const double inner = sigmoid_grad(d - left.value[static_cast<std::size_t>(l + 1)]);
      const double outer = sigmoid_grad(d - left.value[static_cast<std::size_t>(l)]);
      g.od[static_cast<std::size_t>(i)] += go * (inner - outer);
      d_left[static_cast<std::size_t>(l + 1)] -= go * inner;
      d_left[static_cast<std::size_t>(l)] += go * outer;
    }
    // Index 0 is the sentinel boundary and index i + 1 the empty set.
    for (int l = 0; l < i; ++l) {
      const auto idx = static_cast<std::size_t>(l + 1);
      route_max_grad(profile, options, l, i, left.argmax[idx], left.value[idx], d_left[idx], g.oc);
    }

    const SideMax right = right_side(profile, i, options);
    std::vector<double> d_right(right.value.size(), 0.0);
    for (int r = i; r < n; ++r) {
      const double go = grad_right(i, r);
      if (go == 0.0) continue;
      const double inner = sigmoid_grad(d - right.value[static_cast<std::size_t>(r - i)]);
      const double outer = sigmoid_grad(d - right.value[static_cast<std::size_t>(r - i + 1)]);
      g.od[static_cast<std::size_t>(i)] += go * (inner - outer);
      d_right[static_cast<std::size_t>(r - i)] -= go * inner;
      d_right[static_cast<std::size_t>(r - i + 1)] += go * outer;
    }
    // Index 0 is the empty set and index n - i the sentinel boundary.
    for (int r = i + 1; r < n; ++r) {
      const auto idx = static_cast<std::size_t>(r - i);
      route_max_grad(profile, options, i, r, right.argmax[idx], right.value[idx], d_right[idx], g.oc);
    }
  }
  return g;
}

std::map<Span, double> span_distribution(const DistanceProfile& profile, int i, const DistributionOptions& options) {
  const int n = profile.size();
  if (i < 0 || i >= n) throw StructureError("token index " + std::to_string(i) + " out of range");
  const BoundaryDistribution b = boundary_distribution(profile, options);
  std::map<Span, double> out;
  for (int l = 0; l <= i; ++l)
    for (int r = i; r < n; ++r) out[Span{l, r}] = b.left(i, l) * b.right(i, r);
  return out;
}

Span most_probable_span(const BoundaryDistribution& bounds, int i) {
  const int n = static_cast<int>(bounds.left.rows());
  int l_best = 0;
  for (int l = 1; l <= i; ++l) {
    if (bounds.left(i, l) > bounds.left(i, l_best)) l_best = l;
  }
  int r_best = i;
  for (int r = i + 1; r < n; ++r) {
    if (bounds.right(i, r) > bounds.right(i, r_best)) r_best = r;
  }
  return {l_best, r_best};
}

namespace {

struct SpanSoftmax {
  std::vector<double> e;  // exp(score - max)
  Eigen::MatrixXd z;      // z(l, r) = sum of e over [l, r]
};

SpanSoftmax span_softmax(std::span<const double> scores) {
  const int n = static_cast<int>(scores.size());
  SpanSoftmax s;
  const double mx = *std::max_element(scores.begin(), scores.end());
  s.e.resize(scores.size());
  for (std::size_t k = 0; k < scores.size(); ++k) s.e[k] = std::exp(scores[k] - mx);
  s.z = Eigen::MatrixXd::Zero(n, n);
  for (int l = 0; l < n; ++l) {
    double acc = 0.0;
    for (int r = l; r < n; ++r) {
      acc += s.e[static_cast<std::size_t>(r)];
      s.z(l, r) = acc;
    }
  }
  return s;
}

template <typename F>
void for_each_active_span(const BoundaryDistribution& bounds, int i, HeadMode mode, F&& f) {
  const int n = static_cast<int>(bounds.left.rows());
  if (mode == HeadMode::kSingleSpan) {
    const Span best = most_probable_span(bounds, i);
    f(best.l, best.r);
    return;
  }
  for (int l = 0; l <= i; ++l)
    for (int r = i; r < n; ++r) f(l, r);
}

}  // namespace

Eigen::MatrixXd head_marginal(const BoundaryDistribution& bounds, std::span<const double> scores, HeadMode mode) {
  const int n = static_cast<int>(bounds.left.rows());
  if (static_cast<int>(scores.size()) != n) throw StructureError("head scores do not match sentence length");
  const SpanSoftmax sm = span_softmax(scores);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    for_each_active_span(bounds, i, mode, [&](int l, int r) {
      const double w = bounds.left(i, l) * bounds.right(i, r) / sm.z(l, r);
      if (w == 0.0) return;
      for (int j = l; j <= r; ++j) out(i, j) += w * sm.e[static_cast<std::size_t>(j)];
    });
  }
  return out;
}

HeadMarginalGradient head_marginal_vjp(const BoundaryDistribution& bounds, std::span<const double> scores,
                                       const Eigen::MatrixXd& grad_out, HeadMode mode) {
  const int n = static_cast<int>(bounds.left.rows());
  const SpanSoftmax sm = span_softmax(scores);
  HeadMarginalGradient g{Eigen::MatrixXd::Zero(n, n), Eigen::MatrixXd::Zero(n, n),
                         std::vector<double>(static_cast<std::size_t>(n), 0.0)};
  for (int i = 0; i < n; ++i) {
    for_each_active_span(bounds, i, mode, [&](int l, int r) {
      double dot = 0.0;  // sum_j G(i, j) * softmax_[l,r](j)
      for (int j = l; j <= r; ++j) dot += grad_out(i, j) * sm.e[static_cast<std::size_t>(j)] / sm.z(l, r);
      const double pl = bounds.left(i, l);
      const double pr = bounds.right(i, r);
      g.left(i, l) += pr * dot;
      g.right(i, r) += pl * dot;
      const double c = pl * pr;
      if (c == 0.0) return;
      for (int k = l; k <= r; ++k) {
        const double s = sm.e[static_cast<std::size_t>(k)] / sm.z(l, r);
        g.scores[static_cast<std::size_t>(k)] += c * s * (grad_out(i, k) - dot);
      }
    });
  }
  return g;
}

Eigen::MatrixXd head_distribution(const DistanceProfile& profile, std::span<const double> scores, HeadMode mode,
                                  const DistributionOptions& options) {
  if (static_cast<int>(scores.size()) != profile.size()) {
    throw StructureError("head scores do not match sentence length");
  }
  return head_marginal(boundary_distribution(profile, options), scores, mode);
}

}  // namespace structie
