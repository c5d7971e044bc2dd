#include <gtest/gtest.h>

#include "structie/error.hpp"
#include "structie/metrics.hpp"

using namespace structie;

namespace {

const std::vector<std::string> kSentence{"ada", "lee", "of", "acme", "labs", "visited", "rome"};

std::vector<AnchoredRecord> anchor(const std::vector<IERecord>& recs) { return restore_offsets(recs, kSentence); }

IERecord span(std::vector<std::string> text, std::string attr) { return {{std::move(text), std::move(attr)}, {}}; }

IERecord pair(std::vector<std::string> a, std::string type, std::vector<std::string> b) {
  return {{std::move(a), "person"}, {{std::move(type), {std::move(b), "organization"}}}};
}

}  // namespace

TEST(StrictF1, HandComputed) {
  // Sentence 1: 2 gold, 3 predicted, 1 correct.  Sentence 2: 1 gold, 1 predicted, 1 correct.
  const std::vector<std::vector<AnchoredRecord>> gold{
      anchor({span({"ada", "lee"}, "person"), span({"rome"}, "location")}), anchor({span({"acme", "labs"}, "organization")})};
  const std::vector<std::vector<AnchoredRecord>> pred{
      anchor({span({"ada", "lee"}, "person"), span({"rome"}, "person"), span({"lee"}, "person")}),
      anchor({span({"acme", "labs"}, "organization")})};
  const F1Score s = strict_f1(pred, gold);
  EXPECT_EQ(s.gold, 3u);
  EXPECT_EQ(s.predicted, 4u);
  EXPECT_EQ(s.correct, 2u);
  EXPECT_DOUBLE_EQ(s.precision, 0.5);
  EXPECT_DOUBLE_EQ(s.recall, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(s.f1, 2 * 0.5 * (2.0 / 3.0) / (0.5 + 2.0 / 3.0));
}

TEST(StrictF1, DuplicatesMatchOnce) {
  const std::vector<std::vector<AnchoredRecord>> gold{anchor({span({"rome"}, "location")})};
  const std::vector<std::vector<AnchoredRecord>> pred{anchor({span({"rome"}, "location"), span({"rome"}, "location")})};
  const F1Score s = strict_f1(pred, gold);
  EXPECT_EQ(s.correct, 1u);
  EXPECT_DOUBLE_EQ(s.precision, 0.5);
  EXPECT_DOUBLE_EQ(s.recall, 1.0);
}

TEST(StrictF1, RelationsMustMatchExactly) {
  const std::vector<std::vector<AnchoredRecord>> gold{anchor({pair({"ada", "lee"}, "member_of", {"acme", "labs"})})};
  const std::vector<std::vector<AnchoredRecord>> wrong_type{anchor({pair({"ada", "lee"}, "origin", {"acme", "labs"})})};
  const std::vector<std::vector<AnchoredRecord>> wrong_span{anchor({pair({"ada", "lee"}, "member_of", {"acme"})})};
  const std::vector<std::vector<AnchoredRecord>> right{anchor({pair({"ada", "lee"}, "member_of", {"acme", "labs"})})};
  EXPECT_EQ(strict_f1(wrong_type, gold).correct, 0u);
  EXPECT_EQ(strict_f1(wrong_span, gold).correct, 0u);
  EXPECT_DOUBLE_EQ(strict_f1(right, gold).f1, 1.0);
}

TEST(StrictF1, UnanchoredPredictionsNeverMatch) {
  const std::vector<std::vector<AnchoredRecord>> gold{anchor({span({"rome"}, "location")})};
  const std::vector<std::vector<AnchoredRecord>> pred{anchor({span({"paris"}, "location")})};
  EXPECT_EQ(strict_f1(pred, gold).correct, 0u);
}

TEST(StrictF1, EmptyIsZeroNotNaN) {
  const std::vector<std::vector<AnchoredRecord>> none{{}};
  const F1Score s = strict_f1(none, none);
  EXPECT_EQ(s.f1, 0.0);
  EXPECT_EQ(s.precision, 0.0);
  const std::vector<std::vector<AnchoredRecord>> two{{}, {}};
  EXPECT_THROW(strict_f1(none, two), Error);
}

TEST(ErrorAnalysis, BoundaryAndRelationErrors) {
  const std::vector<std::vector<AnchoredRecord>> gold{
      anchor({pair({"ada", "lee"}, "member_of", {"acme", "labs"}), span({"rome"}, "location")})};
  // Mentions: "lee" overlaps "ada lee" without matching (boundary error), "acme labs" exact,
  // "rome" exact; the second record has right mentions but the wrong type.
  const std::vector<std::vector<AnchoredRecord>> pred{
      anchor({pair({"lee"}, "member_of", {"acme", "labs"}), pair({"ada", "lee"}, "origin", {"acme", "labs"}),
              span({"rome"}, "location")})};
  const EvalMetrics m = evaluate_records(pred, gold);
  EXPECT_DOUBLE_EQ(m.boundary_error, 1.0 / 5.0);
  EXPECT_DOUBLE_EQ(m.relation_error, 1.0 / 2.0);
  EXPECT_EQ(m.examples, 1u);
  const auto j = to_json(m);
  EXPECT_EQ(j.at("correct"), 1);
}
