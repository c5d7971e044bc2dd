#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>

#include "support/oracles.hpp"
#include "structie/error.hpp"
#include "structie/rng.hpp"
#include "structie/synstruct.hpp"

using namespace structie;
using namespace structie::testing;

namespace {

// Figure-style profile over 8 tokens: the gap before w_3 (1-based) is 4, the
// gaps inside w_3..w_8 stay below 3.5, w_3 measures 3.5 and w_6 4.5.
DistanceProfile worked_example() {
  return DistanceProfile({5.0, 4.0, 1.0, 2.0, 3.0, 2.0, 1.0}, {1.0, 2.0, 3.5, 1.0, 2.0, 4.5, 0.5, 3.0});
}

bool is_valid_tree(const DepTree& t) {
  const int n = static_cast<int>(t.head.size());
  int roots = 0;
  for (int i = 0; i < n; ++i) {
    if (t.head[static_cast<std::size_t>(i)] == -1) ++roots;
    int v = i;
    for (int steps = 0; v != -1; ++steps) {
      if (steps > n) return false;
      v = t.head[static_cast<std::size_t>(v)];
    }
  }
  return roots == 1;
}

}  // namespace

TEST(Rules, WorkedExampleConstituentAndHead) {
  const DistanceProfile p = worked_example();
  EXPECT_EQ(smallest_constituent(p, 2), (Span{2, 7}));
  EXPECT_EQ(dependent_head(p, Span{2, 7}), 5);
}

TEST(Rules, WorkedExampleDependencyTree) {
  const DistanceProfile p = worked_example();
  const DepTree t = build_dep_tree(p);
  ASSERT_TRUE(is_valid_tree(t));
  for (int i = 2; i <= 7; ++i) {
    if (i != 5 && smallest_constituent(p, i) == Span{2, 7}) {
      EXPECT_EQ(t.head[static_cast<std::size_t>(i)], 5) << i;
    }
  }
}

TEST(Rules, SingleToken) {
  const DistanceProfile p({}, {0.3});
  EXPECT_EQ(smallest_constituent(p, 0), (Span{0, 0}));
  EXPECT_EQ(build_dep_tree(p).head, std::vector<int>{-1});
  EXPECT_EQ(build_con_tree(p).nodes.size(), 1u);
  const auto dist = span_distribution(p, 0);
  ASSERT_EQ(dist.size(), 1u);
  EXPECT_DOUBLE_EQ(dist.at(Span{0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(head_distribution(p, std::vector<double>{0.7})(0, 0), 1.0);
}

TEST(Rules, ProfileValidation) {
  EXPECT_THROW(DistanceProfile({1.0, 2.0}, {1.0, 2.0}), StructureError);
  EXPECT_THROW(DistanceProfile({}, {}), StructureError);
  EXPECT_THROW(smallest_constituent(worked_example(), 8), StructureError);
  EXPECT_EQ(worked_example().gap(-1), std::numeric_limits<double>::infinity());
  EXPECT_EQ(worked_example().gap(7), std::numeric_limits<double>::infinity());
}

TEST(Rules, SmallestConstituentMatchesBruteForce) {
  Rng rng(17);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(7));
    const DistanceProfile p = random_profile(n, rng);
    for (int i = 0; i < n; ++i) {
      ASSERT_EQ(smallest_constituent(p, i), brute_smallest_constituent(p, i)) << "trial " << trial << " i " << i;
    }
  }
}

TEST(Rules, DependentHeadTieBreaksLeft) {
  const DistanceProfile p({0, 0, 0, 0, 0}, {5, 1, 1, 1, 1, 9});
  EXPECT_EQ(dependent_head(p, Span{1, 4}), 1);
  EXPECT_EQ(dependent_head(p, Span{3, 3}), 3);
  EXPECT_EQ(dependent_head(p, Span{0, 5}), 5);
}

TEST(ConTree, HandExecutedSplits) {
  const ConTree t = build_con_tree(DistanceProfile({3, 1, 2}, {0, 0, 0, 0}));
  const std::vector<Span> list = t.spans();
  const std::set<Span> spans(list.begin(), list.end());
  EXPECT_EQ(spans, (std::set<Span>{{0, 3}, {0, 0}, {1, 3}, {1, 2}, {3, 3}, {1, 1}, {2, 2}}));
  EXPECT_EQ(t.nodes[0].split, 0);
  EXPECT_EQ(t.nodes[static_cast<std::size_t>(t.find({1, 3}))].split, 2);
  const std::vector<std::string> words{"a", "b", "c", "d"};
  EXPECT_EQ(t.to_sexpr(words), "(a ((b c) d))");
}

TEST(ConTree, DecreasingGapsPeelTokensFromTheLeft) {
  const ConTree t = build_con_tree(DistanceProfile({4, 3, 2, 1}, {0, 0, 0, 0, 0}));
  for (int l = 0; l < 4; ++l) {
    EXPECT_GE(t.find({l, 4}), 0);
    EXPECT_GE(t.find({l, l}), 0);
  }
  EXPECT_EQ(t.spans().size(), 9u);
}

TEST(ConTree, TieSplitsAtLeftmostGap) {
  const ConTree t = build_con_tree(DistanceProfile({2, 2}, {0, 0, 0}));
  EXPECT_EQ(t.nodes[0].split, 0);
}

TEST(ConTree, ContainsEverySmallestConstituent) {
  Rng rng(23);
  for (int trial = 0; trial < 500; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(12));
    const DistanceProfile p = random_profile(n, rng);
    const ConTree t = build_con_tree(p);
    ASSERT_EQ(t.nodes.size(), static_cast<std::size_t>(2 * n - 1));
    for (int i = 0; i < n; ++i) {
      ASSERT_GE(t.find(smallest_constituent(p, i)), 0) << "trial " << trial << " token " << i;
    }
  }
}

TEST(DepTree, ValidTreesRootedAtGlobalArgmax) {
  Rng rng(29);
  for (int trial = 0; trial < 2000; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(6));
    const DistanceProfile p = random_profile(n, rng);
    const DepTree t = build_dep_tree(p);
    ASSERT_TRUE(is_valid_tree(t)) << "trial " << trial;
    EXPECT_EQ(t.root(), dependent_head(p, Span{0, n - 1}));
  }
}

TEST(DepTree, HeadsAgreeWithEnclosingConstituents) {
  Rng rng(31);
  for (int trial = 0; trial < 500; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(10));
    const DistanceProfile p = random_profile(n, rng);
    const ConTree con = build_con_tree(p);
    const DepTree dep = build_dep_tree(p);
    for (int i = 0; i < n; ++i) {
      const Span s = smallest_constituent(p, i);
      std::set<int> allowed;
      for (const Span& node : con.spans()) {
        if (node.contains(s)) allowed.insert(dependent_head(p, node));
      }
      const int h = dependent_head(p, s);
      const int got = dep.head[static_cast<std::size_t>(i)];
      if (h != i) {
        EXPECT_EQ(got, h) << "trial " << trial << " token " << i;
      } else if (got >= 0) {
        EXPECT_TRUE(allowed.count(got)) << "trial " << trial << " token " << i;
        EXPECT_NE(got, i);
      }
    }
  }
}

TEST(DepTree, RendersArcs) {
  const DepTree t = build_dep_tree(DistanceProfile({1}, {0.0, 2.0}));
  const std::vector<std::string> words{"red", "car"};
  EXPECT_EQ(t.to_arcs(words), (std::vector<std::string>{"red<-car", "car<-ROOT"}));
}

TEST(SpanDistribution, MatchesLiteralTranscription) {
  Rng rng(37);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(6));
    const DistanceProfile p = random_profile(n, rng);
    for (int i = 0; i < n; ++i) {
      const auto got = span_distribution(p, i);
      for (int l = 0; l <= i; ++l) {
        for (int r = i; r < n; ++r) {
          const double want = literal_span_probability(p, i, l, r);
          const auto it = got.find(Span{l, r});
          const double have = it == got.end() ? 0.0 : it->second;
          ASSERT_NEAR(have, want, 1e-12) << "trial " << trial << " i " << i << " span " << l << "," << r;
        }
      }
    }
  }
}

TEST(SpanDistribution, NormalizedAndNonNegative) {
  Rng rng(41);
  for (int trial = 0; trial < 500; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(8));
    const DistanceProfile p = random_profile(n, rng);
    const BoundaryDistribution b = boundary_distribution(p);
    for (int i = 0; i < n; ++i) {
      double total = 0.0;
      for (const auto& [span, prob] : span_distribution(p, i)) {
        EXPECT_TRUE(span.contains(i));
        EXPECT_GE(prob, 0.0);
        total += prob;
      }
      EXPECT_NEAR(total, 1.0, 1e-9);
      EXPECT_NEAR(b.left.row(i).sum(), 1.0, 1e-9);
      EXPECT_NEAR(b.right.row(i).sum(), 1.0, 1e-9);
      EXPECT_GE(b.left.row(i).minCoeff(), 0.0);
      EXPECT_GE(b.right.row(i).minCoeff(), 0.0);
    }
  }
}

TEST(SpanDistribution, HardLimitRecoversSmallestConstituent) {
  Rng rng(43);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(8));
    const DistanceProfile base = random_profile(n, rng);
    std::vector<double> oc = base.oc(), od = base.od();
    for (auto& x : oc) x *= 1e4;
    for (auto& x : od) x *= 1e4;
    const DistanceProfile sharp(oc, od);
    const BoundaryDistribution b = boundary_distribution(sharp);
    for (int i = 0; i < n; ++i) {
      EXPECT_EQ(most_probable_span(b, i), smallest_constituent(base, i)) << "trial " << trial;
    }
  }
}

TEST(HeadDistribution, MatchesSpanEnumeration) {
  Rng rng(47);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(6));
    const DistanceProfile p = random_profile(n, rng);
    std::vector<double> scores(static_cast<std::size_t>(n));
    for (auto& s : scores) s = rng.normal();
    const Eigen::MatrixXd got = head_distribution(p, scores);
    const Eigen::MatrixXd want = brute_head_distribution(p, scores);
    ASSERT_LE((got - want).cwiseAbs().maxCoeff(), 1e-12) << "trial " << trial;
    for (int i = 0; i < n; ++i) EXPECT_NEAR(got.row(i).sum(), 1.0, 1e-9);
  }
}

TEST(HeadDistribution, SingleSpanModeUsesTheLikeliestSpan) {
  Rng rng(53);
  const DistanceProfile p = random_profile(5, rng);
  const std::vector<double> scores{0.1, -0.4, 0.9, 0.0, 0.3};
  const BoundaryDistribution b = boundary_distribution(p);
  const Eigen::MatrixXd pd = head_marginal(b, scores, HeadMode::kSingleSpan);
  for (int i = 0; i < 5; ++i) {
    const Span s = most_probable_span(b, i);
    for (int j = 0; j < 5; ++j) {
      if (!s.contains(j)) {
        EXPECT_EQ(pd(i, j), 0.0);
      }
    }
  }
}

TEST(Gradients, BoundaryVjpMatchesFiniteDifferences) {
  Rng rng(59);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(5));
    const DistanceProfile p = random_profile(n, rng);
    Eigen::MatrixXd gl = Eigen::MatrixXd::Random(n, n), gr = Eigen::MatrixXd::Random(n, n);
    const auto f = [&](const DistanceProfile& q) {
      const BoundaryDistribution b = boundary_distribution(q);
      return (b.left.cwiseProduct(gl)).sum() + (b.right.cwiseProduct(gr)).sum();
    };
    const ProfileGradient g = boundary_distribution_vjp(p, gl, gr);
    const double h = 1e-6;
    for (int k = 0; k < n - 1; ++k) {
      auto up = p.oc(), down = p.oc();
      up[static_cast<std::size_t>(k)] += h;
      down[static_cast<std::size_t>(k)] -= h;
      const double num = (f(DistanceProfile(up, p.od())) - f(DistanceProfile(down, p.od()))) / (2 * h);
      EXPECT_NEAR(g.oc[static_cast<std::size_t>(k)], num, 1e-6 + 1e-4 * std::abs(num));
    }
    for (int i = 0; i < n; ++i) {
      auto up = p.od(), down = p.od();
      up[static_cast<std::size_t>(i)] += h;
      down[static_cast<std::size_t>(i)] -= h;
      const double num = (f(DistanceProfile(p.oc(), up)) - f(DistanceProfile(p.oc(), down))) / (2 * h);
      EXPECT_NEAR(g.od[static_cast<std::size_t>(i)], num, 1e-6 + 1e-4 * std::abs(num));
    }
  }
}

TEST(Profile, JsonRoundTrip) {
  const DistanceProfile p = worked_example();
  const DistanceProfile q = nlohmann::json(p).get<DistanceProfile>();
  EXPECT_EQ(p.oc(), q.oc());
  EXPECT_EQ(p.od(), q.od());
}
