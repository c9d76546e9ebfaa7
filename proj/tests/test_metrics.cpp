#include "lidargen/metrics.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "test_util.hpp"

namespace lidargen {
namespace {

using testing::brute_force_assignment;
using testing::brute_force_emd;
using testing::naive_chamfer;
using testing::random_points;

TEST(KdTree, AgreesWithLinearScan) {
  const PointSet pts = random_points(400, 21);
  const KdTree3 tree(pts);
  const PointSet queries = random_points(200, 22, 1.5);
  for (const Point3& q : queries) {
    double best = std::numeric_limits<double>::infinity();
    for (const Point3& p : pts) best = std::min(best, sq_dist(q, p));
    EXPECT_EQ(tree.nearest_sq(q), best);
  }
}

TEST(Chamfer, HandCases) {
  const PointSet a = {{0, 0, 0}};
  const PointSet b = {{1, 0, 0}};
  EXPECT_DOUBLE_EQ(chamfer(a, b), 2.0);  // 1^2 in both directions
  EXPECT_DOUBLE_EQ(chamfer(a, a), 0.0);
  const PointSet c = random_points(64, 1);
  EXPECT_DOUBLE_EQ(chamfer(c, c), 0.0);
}

TEST(Chamfer, EmptySetsRejected) {
  const PointSet a = {{0, 0, 0}};
  EXPECT_THROW(chamfer(a, {}), precondition_error);
  EXPECT_THROW(chamfer({}, a), precondition_error);
}

TEST(Chamfer, EqualsNaiveDoubleLoopExactly) {
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    const int n = 1 + static_cast<int>(mix64(trial) % 300);
    const int m = 1 + static_cast<int>(mix64(trial + 1000) % 300);
    const PointSet a = random_points(n, 2 * trial, 5.0);
    const PointSet b = random_points(m, 2 * trial + 1, 5.0);
    // Exact equality: the tree prunes candidates but never changes the
    // arithmetic of a squared distance or of the final sum.
    EXPECT_EQ(chamfer(a, b), naive_chamfer(a, b));
  }
}

TEST(Hungarian, HandCases) {
  CostMatrix diag;
  diag.n = 2;
  diag.cost = {0.0, 9.0, 9.0, 0.0};
  const Assignment a = hungarian(diag);
  EXPECT_EQ(a.col_of_row, (std::vector<int>{0, 1}));
  EXPECT_DOUBLE_EQ(a.total_cost, 0.0);

  CostMatrix cross;
  cross.n = 2;
  cross.cost = {4.0, 1.0, 2.0, 3.0};
  const Assignment b = hungarian(cross);
  EXPECT_EQ(b.col_of_row, (std::vector<int>{1, 0}));
  EXPECT_DOUBLE_EQ(b.total_cost, 3.0);

  CostMatrix one;
  one.n = 1;
  one.cost = {5.0};
  EXPECT_DOUBLE_EQ(hungarian(one).total_cost, 5.0);
}

TEST(Hungarian, MatchesBruteForceEnumeration) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> value(0.0, 10.0);
  std::uniform_int_distribution<int> size(2, 7);
  for (int trial = 0; trial < 100; ++trial) {
    CostMatrix m;
    m.n = size(rng);
    m.cost.resize(static_cast<std::size_t>(m.n) * m.n);
    for (double& c : m.cost) c = value(rng);
    const Assignment got = hungarian(m);
    EXPECT_NEAR(got.total_cost, brute_force_assignment(m), 1e-12);
    // Result is a permutation.
    std::set<int> cols(got.col_of_row.begin(), got.col_of_row.end());
    EXPECT_EQ(cols.size(), static_cast<std::size_t>(m.n));
  }
}

TEST(Hungarian, DualsCertifyOptimality) {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> value(0.0, 10.0);
  for (int trial = 0; trial < 20; ++trial) {
    CostMatrix m;
    m.n = 40;
    m.cost.resize(static_cast<std::size_t>(m.n) * m.n);
    for (double& c : m.cost) c = value(rng);
    const Assignment a = hungarian(m);
    double dual_total = 0.0;
    for (int i = 0; i < m.n; ++i) {
      dual_total += a.row_potential[static_cast<std::size_t>(i)] +
                    a.col_potential[static_cast<std::size_t>(i)];
      for (int j = 0; j < m.n; ++j) {
        // Dual feasibility: u_i + v_j <= c_ij.
        EXPECT_LE(a.row_potential[static_cast<std::size_t>(i)] +
                      a.col_potential[static_cast<std::size_t>(j)],
                  m.at(i, j) + 1e-9);
      }
    }
    // Strong duality: any feasible dual lower-bounds the cost, and the
    // returned one is tight.
    EXPECT_NEAR(dual_total, a.total_cost, 1e-9);
  }
}

TEST(Hungarian, RejectsInvalidMatrices) {
  CostMatrix bad;
  bad.n = 2;
  bad.cost = {1.0, 2.0, 3.0};  // not square
  EXPECT_THROW(hungarian(bad), precondition_error);
  bad.cost = {1.0, 2.0, 3.0, std::numeric_limits<double>::infinity()};
  EXPECT_THROW(hungarian(bad), precondition_error);
  CostMatrix empty;
  EXPECT_THROW(hungarian(empty), precondition_error);
}

TEST(EmdExact, HandCasesAndIdentity) {
  const PointSet a = {{0, 0, 0}, {2, 0, 0}};
  const PointSet b = {{2, 0, 0}, {0, 0, 0}};
  EXPECT_DOUBLE_EQ(emd_exact(a, b), 0.0);  // cross pairing is free

  const PointSet c = {{0, 0, 0}};
  const PointSet d = {{3, 4, 0}};
  EXPECT_DOUBLE_EQ(emd_exact(c, d), 5.0);

  const PointSet e = random_points(32, 5);
  EXPECT_DOUBLE_EQ(emd_exact(e, e), 0.0);
}

TEST(EmdExact, MatchesBruteForceOverAllBijections) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> size(2, 7);
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    const int n = size(rng);
    const PointSet a = random_points(n, 100 + 2 * trial, 3.0);
    const PointSet b = random_points(n, 101 + 2 * trial, 3.0);
    EXPECT_NEAR(emd_exact(a, b), brute_force_emd(a, b), 1e-12);
  }
}

TEST(EmdExact, IsSymmetric) {
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    const PointSet a = random_points(32, 300 + 2 * trial);
    const PointSet b = random_points(32, 301 + 2 * trial);
    EXPECT_NEAR(emd_exact(a, b), emd_exact(b, a), 1e-9);
  }
}

TEST(EmdExact, ValidatesInputs) {
  const PointSet a = random_points(4, 1);
  const PointSet b = random_points(5, 2);
  EXPECT_THROW(emd_exact(a, b), precondition_error);
  EXPECT_THROW(emd_exact({}, {}), precondition_error);
  const PointSet big_a = random_points(kEmdExactSizeCap + 1, 3);
  const PointSet big_b = random_points(kEmdExactSizeCap + 1, 4);
  try {
    emd_exact(big_a, big_b);
    FAIL() << "expected precondition_error";
  } catch (const precondition_error& e) {
    EXPECT_NE(std::string(e.what()).find("emd_approx"), std::string::npos);
  }
}

TEST(EmdApprox, IdenticalSetsCostZeroForAnyEpsilon) {
  const PointSet a = random_points(128, 6);
  for (double eps : {1e-4, 0.01, 1.0}) {
    EXPECT_DOUBLE_EQ(emd_approx(a, a, eps), 0.0);
  }
}

TEST(EmdApprox, GapIsBoundedByNTimesEpsilon) {
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    const int n = 64;
    const PointSet a = random_points(n, 500 + 2 * trial);
    const PointSet b = random_points(n, 501 + 2 * trial);
    const double exact = emd_exact(a, b);
    for (double eps : {0.01, 1e-3}) {
      const double approx = emd_approx(a, b, eps);
      EXPECT_GE(approx, exact - 1e-9);  // feasible, so never below optimal
      EXPECT_LE(approx, exact + n * eps + 1e-9);
    }
  }
}

TEST(EmdApprox, TightEpsilonAgreesWithinOnePercent) {
  const int n = 256;
  const PointSet a = random_points(n, 600);
  const PointSet b = random_points(n, 601);
  const double exact = emd_exact(a, b);
  const double approx = emd_approx(a, b, 1e-4);
  EXPECT_LE(std::abs(approx - exact), 0.01 * exact);
}

TEST(EmdApprox, ValidatesInputs) {
  const PointSet a = random_points(4, 1);
  EXPECT_THROW(emd_approx(a, random_points(5, 2), 0.01), precondition_error);
  EXPECT_THROW(emd_approx(a, a, 0.0), std::domain_error);
  EXPECT_THROW(emd_approx(a, a, -1.0), std::domain_error);
}

TEST(Equalize, SubsamplesLargerSetOnly) {
  const PointSet a = random_points(10, 7);
  const PointSet b = random_points(5, 8);
  const auto [ea, eb] = equalize(a, b, 1024, 3);
  EXPECT_EQ(ea.size(), 5u);
  EXPECT_EQ(eb.size(), 5u);
  // The smaller set passes through unchanged.
  for (std::size_t i = 0; i < eb.size(); ++i) {
    EXPECT_EQ(eb[i].x, b[i].x);
    EXPECT_EQ(eb[i].y, b[i].y);
    EXPECT_EQ(eb[i].z, b[i].z);
  }
  // The subsample preserves relative order and draws from the original.
  std::size_t cursor = 0;
  for (const Point3& p : ea) {
    while (cursor < a.size() &&
           !(a[cursor].x == p.x && a[cursor].y == p.y && a[cursor].z == p.z)) {
      ++cursor;
    }
    EXPECT_LT(cursor, a.size());
    ++cursor;
  }
}

TEST(Equalize, CapsAtNMaxAndIsDeterministic) {
  const PointSet a = random_points(50, 9);
  const PointSet b = random_points(60, 10);
  const auto [ea, eb] = equalize(a, b, 16, 5);
  EXPECT_EQ(ea.size(), 16u);
  EXPECT_EQ(eb.size(), 16u);
  const auto [ea2, eb2] = equalize(a, b, 16, 5);
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_EQ(ea[i].x, ea2[i].x);
    EXPECT_EQ(eb[i].x, eb2[i].x);
  }
  const auto [ea3, eb3] = equalize(a, b, 16, 6);
  bool any_diff = false;
  for (std::size_t i = 0; i < 16; ++i) any_diff |= ea[i].x != ea3[i].x;
  EXPECT_TRUE(any_diff);

  // Already equal and under the cap: pass-through.
  const auto [pa, pb] = equalize(b, b, 1024, 1);
  EXPECT_EQ(pa.size(), b.size());
  EXPECT_EQ(pb.size(), b.size());
  for (std::size_t i = 0; i < b.size(); ++i) {
    EXPECT_EQ(pa[i].x, b[i].x);
    EXPECT_EQ(pb[i].x, b[i].x);
  }
}

TEST(Equalize, ValidatesInputs) {
  const PointSet a = random_points(4, 1);
  EXPECT_THROW(equalize(a, {}, 16, 0), precondition_error);
  EXPECT_THROW(equalize(a, a, 0, 0), precondition_error);
}

TEST(EqualizedPipeline, EmdOnEqualizedSetsIsFinite) {
  // The common downstream pattern: unequal clouds -> equalize -> emd.
  const PointSet a = random_points(700, 12, 10.0);
  const PointSet b = random_points(400, 13, 10.0);
  const auto [ea, eb] = equalize(a, b, 256, 42);
  ASSERT_EQ(ea.size(), 256u);
  const double cost = emd_exact(ea, eb);
  EXPECT_TRUE(std::isfinite(cost));
  EXPECT_GT(cost, 0.0);
}

}  // namespace
}  // namespace lidargen
