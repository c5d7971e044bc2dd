#pragma once

// Slow, independent reference implementations used to pin down the fast code.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "structie/rng.hpp"
#include "structie/synstruct.hpp"

namespace structie::testing {

inline DistanceProfile random_profile(int n, Rng& rng, double scale = 2.0) {
  std::vector<double> oc(static_cast<std::size_t>(n - 1)), od(static_cast<std::size_t>(n));
  for (auto& x : oc) x = rng.normal(0.0, scale);
  for (auto& x : od) x = rng.normal(0.0, scale);
  return DistanceProfile(std::move(oc), std::move(od));
}

/// Scan every (l, r) around i and keep the narrowest span whose two outer
/// gaps exceed od[i].
inline Span brute_smallest_constituent(const DistanceProfile& p, int i) {
  const int n = p.size();
  Span best{0, n - 1};
  for (int l = 0; l <= i; ++l) {
    for (int r = i; r < n; ++r) {
      const bool ok = p.gap(l - 1) > p.dep(i) && p.gap(r) > p.dep(i);
      if (ok && r - l < best.r - best.l) best = {l, r};
    }
  }
  return best;
}

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// p_c([l, r] | w_i) transcribed step by step in 1-based positions: c[k] is
/// the measurement between words k and k+1, c[0] = c[n] = +inf.  Each
/// boundary factor is "every gap strictly inside is below o^d_i, and the
/// outer gap is not", computed with explicit maxima over index sets.
inline double literal_span_probability(const DistanceProfile& p, int i0, int l0, int r0) {
  const int n = p.size();
  const int i = i0 + 1, l = l0 + 1, r = r0 + 1;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> c(static_cast<std::size_t>(n + 1), inf);
  for (int k = 1; k < n; ++k) c[static_cast<std::size_t>(k)] = p.oc()[static_cast<std::size_t>(k - 1)];
  const double d = p.dep(i0);
  // Max over the index set [a, b] (inclusive); -inf when empty.
  const auto max_over = [&](int a, int b) {
    double m = -inf;
    for (int k = a; k <= b; ++k) m = std::max(m, c[static_cast<std::size_t>(k)]);
    return m;
  };
  const auto prob_below = [&](double m) {
    if (m == inf) return 0.0;
    if (m == -inf) return 1.0;
    return logistic(d - m);
  };
  // Gaps between w_l and w_i are c[l .. i-1]; the outer gap is c[l-1].
  const double left = prob_below(max_over(l, i - 1)) - prob_below(max_over(l - 1, i - 1));
  // Gaps between w_i and w_r are c[i .. r-1]; the outer gap is c[r].
  const double right = prob_below(max_over(i, r - 1)) - prob_below(max_over(i, r));
  return left * right;
}

/// p_d(j | i) = sum over spans containing i and j of p_c(span | i) times the
/// softmax of the head scores inside the span.
inline Eigen::MatrixXd brute_head_distribution(const DistanceProfile& p, const std::vector<double>& scores) {
  const int n = p.size();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    for (int l = 0; l <= i; ++l) {
      for (int r = i; r < n; ++r) {
        const double pc = literal_span_probability(p, i, l, r);
        double z = 0.0;
        for (int k = l; k <= r; ++k) z += std::exp(scores[static_cast<std::size_t>(k)]);
        for (int j = l; j <= r; ++j) out(i, j) += pc * std::exp(scores[static_cast<std::size_t>(j)]) / z;
      }
    }
  }
  return out;
}

struct EnumeratedTree {
  std::vector<int> head;
  double score;
};

/// Strictly positive arc weights for tree enumeration.
inline Eigen::MatrixXd random_weights(int n, Rng& rng) {
  Eigen::MatrixXd w(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) w(i, j) = 0.02 + rng.uniform();
  }
  return w;
}

/// Every single-root arborescence over n tokens (head -1 = root), scored by
/// the sum of log weights; weights(i, j) is the arc j -> i, weights(i, i) the
/// root attachment of i.  Trees using a zero-weight arc are skipped.
inline std::vector<EnumeratedTree> enumerate_arborescences(const Eigen::MatrixXd& w) {
  const int n = static_cast<int>(w.rows());
  std::vector<EnumeratedTree> out;
  std::vector<int> head(static_cast<std::size_t>(n), -1);
  // Each token picks a head in {-1, 0..n-1} \ {itself}: (n)^n assignments.
  std::vector<int> choice(static_cast<std::size_t>(n), 0);
  while (true) {
    for (int i = 0; i < n; ++i) {
      int c = choice[static_cast<std::size_t>(i)];
      head[static_cast<std::size_t>(i)] = c == 0 ? -1 : (c - 1 < i ? c - 1 : c);
    }
    int roots = 0;
    bool ok = true;
    double score = 0.0;
    for (int i = 0; i < n && ok; ++i) {
      const int h = head[static_cast<std::size_t>(i)];
      if (h == -1) ++roots;
      const double weight = h == -1 ? w(i, i) : w(i, h);
      if (weight <= 0.0) ok = false;
      score += std::log(weight);
      int v = i;
      for (int steps = 0; v != -1 && ok; ++steps) {
        if (steps > n) ok = false;
        v = head[static_cast<std::size_t>(v)];
      }
    }
    if (ok && roots == 1) out.push_back({head, score});
    int k = 0;
    while (k < n && ++choice[static_cast<std::size_t>(k)] == n) choice[static_cast<std::size_t>(k++)] = 0;
    if (k == n) break;
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  return out;
}

}  // namespace structie::testing
