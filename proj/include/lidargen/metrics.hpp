#pragma once

// Point-set distances used to score reconstructions: symmetric Chamfer
// distance (k-d-tree accelerated) and earth mover's distance between
// equal-size sets, exact via an O(n^3) optimal assignment solver and
// approximate via an auction solver with a tunable optimality gap.

#include <cstdint>
#include <utility>
#include <vector>

#include "lidargen/projection.hpp"

namespace lidargen {

inline double sq_dist(const Point3& a, const Point3& b) {
  const double dx = a.x - b.x;
  const double dy = a.y - b.y;
  const double dz = a.z - b.z;
  return dx * dx + dy * dy + dz * dz;
}

// Static 3-d k-d tree over a copied point set; exact nearest neighbours.
class KdTree3 {
 public:
  explicit KdTree3(const PointSet& points);

  // Squared distance from `query` to its nearest neighbour in the set.
  double nearest_sq(const Point3& query) const;

 private:
  struct Node {
    Point3 point;
    int axis = 0;
    int left = -1;
    int right = -1;
  };

  int build(std::vector<Point3>& pts, int lo, int hi, int depth);
  void search(int node, const Point3& q, double& best) const;

  std::vector<Node> nodes_;
  int root_ = -1;
};

// Sum over each set of the squared distance to the nearest point of the
// other set. Equals the naive double loop exactly (same arithmetic, just
// fewer candidate pairs inspected). Throws precondition_error on empty sets.
double chamfer(const PointSet& a, const PointSet& b);

// Dense square cost matrix for assignment problems.
struct CostMatrix {
  int n = 0;
  std::vector<double> cost;  // row-major n*n

  double at(int i, int j) const { return cost[static_cast<std::size_t>(i) * n + j]; }
  double& at(int i, int j) { return cost[static_cast<std::size_t>(i) * n + j]; }

  // Pairwise (unsquared) Euclidean distances; requires |a| == |b| >= 1.
  static CostMatrix from_points(const PointSet& a, const PointSet& b);
  // Finite entries, square layout.
  void validate() const;
};

struct Assignment {
  std::vector<int> col_of_row;  // row i is matched to column col_of_row[i]
  double total_cost = 0.0;
  // Dual potentials of the optimal solution: feasible (u[i] + v[j] <= c_ij)
  // and tight on matched pairs, so sum(u) + sum(v) == total_cost. They form
  // a certificate of optimality usable by tests.
  std::vector<double> row_potential;
  std::vector<double> col_potential;
};

// Exact minimum-cost perfect matching via the shortest-augmenting-path
// formulation of the Hungarian method, O(n^3).
Assignment hungarian(const CostMatrix& m);

inline constexpr int kEmdExactSizeCap = 1024;

// Exact earth mover's distance: the minimum over bijections of the summed
// (unsquared) Euclidean distances between matched points. Requires
// |a| == |b| in [1, 1024]; larger inputs throw precondition_error and the
// message points at emd_approx.
double emd_exact(const PointSet& a, const PointSet& b);

// Auction-based approximation with epsilon scaling; the result is feasible,
// hence >= the optimum, and epsilon-complementary slackness bounds the gap
// by n * epsilon. epsilon must be positive.
double emd_approx(const PointSet& a, const PointSet& b, double epsilon);

// Uniform subsampling without replacement to m = min(|a|, |b|, n_max)
// points each, seeded and deterministic. Sets already at size m are passed
// through unchanged; subsampled sets keep their original relative order.
std::pair<PointSet, PointSet> equalize(const PointSet& a, const PointSet& b,
                                       int n_max, std::uint64_t seed);

}  // namespace lidargen
