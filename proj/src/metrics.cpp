#include "lidargen/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>

namespace lidargen {

KdTree3::KdTree3(const PointSet& points) {
  if (points.empty()) {
    throw precondition_error("k-d tree needs at least one point");
  }
  std::vector<Point3> pts = points;
  nodes_.reserve(pts.size());
  root_ = build(pts, 0, static_cast<int>(pts.size()), 0);
}

int KdTree3::build(std::vector<Point3>& pts, int lo, int hi, int depth) {
  if (lo >= hi) return -1;
  const int axis = depth % 3;
  const int mid = lo + (hi - lo) / 2;
  std::nth_element(pts.begin() + lo, pts.begin() + mid, pts.begin() + hi,
                   [axis](const Point3& a, const Point3& b) {
                     const double* pa = &a.x;
                     const double* pb = &b.x;
                     return pa[axis] < pb[axis];
                   });
  const int index = static_cast<int>(nodes_.size());
  nodes_.push_back({pts[mid], axis, -1, -1});
  // Children are built after the parent slot is reserved; indices stay valid
  // because nodes_ only grows.
  const int left = build(pts, lo, mid, depth + 1);
  const int right = build(pts, mid + 1, hi, depth + 1);
  nodes_[index].left = left;
  nodes_[index].right = right;
  return index;
}

void KdTree3::search(int node, const Point3& q, double& best) const {
  if (node < 0) return;
  const Node& nd = nodes_[node];
  const double d = sq_dist(q, nd.point);
  if (d < best) best = d;
  const double* pq = &q.x;
  const double* pp = &nd.point.x;
  const double delta = pq[nd.axis] - pp[nd.axis];
  const int near = delta < 0.0 ? nd.left : nd.right;
  const int far = delta < 0.0 ? nd.right : nd.left;
  search(near, q, best);
  if (delta * delta < best) search(far, q, best);
}

double KdTree3::nearest_sq(const Point3& query) const {
  double best = std::numeric_limits<double>::infinity();
  search(root_, query, best);
  return best;
}

double chamfer(const PointSet& a, const PointSet& b) {
  if (a.empty() || b.empty()) {
    throw precondition_error("chamfer distance needs two non-empty sets");
  }
  const KdTree3 tree_b(b);
  double total = 0.0;
  for (const Point3& p : a) total += tree_b.nearest_sq(p);
  const KdTree3 tree_a(a);
  for (const Point3& q : b) total += tree_a.nearest_sq(q);
  return total;
}

CostMatrix CostMatrix::from_points(const PointSet& a, const PointSet& b) {
  if (a.size() != b.size() || a.empty()) {
    throw precondition_error(
        "cost matrix needs two equal-size non-empty point sets");
  }
  CostMatrix m;
  m.n = static_cast<int>(a.size());
  m.cost.resize(static_cast<std::size_t>(m.n) * m.n);
  for (int i = 0; i < m.n; ++i) {
    for (int j = 0; j < m.n; ++j) {
      m.at(i, j) = std::sqrt(sq_dist(a[static_cast<std::size_t>(i)],
                                     b[static_cast<std::size_t>(j)]));
    }
  }
  return m;
}

void CostMatrix::validate() const {
  if (n < 1 || cost.size() != static_cast<std::size_t>(n) * n) {
    throw precondition_error("cost matrix must be square and non-empty");
  }
  for (double c : cost) {
    if (!std::isfinite(c)) {
      throw precondition_error("cost matrix entries must be finite");
    }
  }
}

Assignment hungarian(const CostMatrix& m) {
  m.validate();
  const int n = m.n;
  constexpr double kInf = std::numeric_limits<double>::infinity();

  // Shortest augmenting paths over reduced costs, with column 0 acting as a
  // sentinel. p[j] is the row currently matched to column j.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = 0;
      double delta = kInf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = m.at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  Assignment result;
  result.col_of_row.assign(n, -1);
  result.row_potential.assign(n, 0.0);
  result.col_potential.assign(n, 0.0);
  for (int j = 1; j <= n; ++j) {
    result.col_of_row[p[j] - 1] = j - 1;
    result.col_potential[j - 1] = v[j];
  }
  for (int i = 1; i <= n; ++i) result.row_potential[i - 1] = u[i];
  for (int i = 0; i < n; ++i) {
    result.total_cost += m.at(i, result.col_of_row[i]);
  }
  return result;
}

double emd_exact(const PointSet& a, const PointSet& b) {
  if (a.size() != b.size() || a.empty()) {
    throw precondition_error(
        "earth mover's distance needs two equal-size non-empty sets");
  }
  if (a.size() > static_cast<std::size_t>(kEmdExactSizeCap)) {
    throw precondition_error(
        "emd_exact is capped at " + std::to_string(kEmdExactSizeCap) +
        " points (got " + std::to_string(a.size()) +
        "); use emd_approx or equalize first");
  }
  return hungarian(CostMatrix::from_points(a, b)).total_cost;
}

namespace {

// Forward auction for the assignment problem at a fixed epsilon. Prices
// persist across scaling phases; the assignment is rebuilt each phase.
void auction_round(const std::vector<double>& cost, int n, double eps,
                   std::vector<double>& price, std::vector<int>& obj_of) {
  std::vector<int> owner(static_cast<std::size_t>(n), -1);
  obj_of.assign(static_cast<std::size_t>(n), -1);
  std::vector<int> pending(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) pending[static_cast<std::size_t>(i)] = i;

  while (!pending.empty()) {
    const int i = pending.back();
    pending.pop_back();
    // Best and second-best object values for bidder i.
    int best_j = -1;
    double best_v = -std::numeric_limits<double>::infinity();
    double second_v = -std::numeric_limits<double>::infinity();
    const double* row = cost.data() + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double v = -row[j] - price[static_cast<std::size_t>(j)];
      if (v > best_v) {
        second_v = best_v;
        best_v = v;
        best_j = j;
      } else if (v > second_v) {
        second_v = v;
      }
    }
    const double raise =
        n == 1 ? eps : best_v - second_v + eps;
    price[static_cast<std::size_t>(best_j)] += raise;
    const int evicted = owner[static_cast<std::size_t>(best_j)];
    owner[static_cast<std::size_t>(best_j)] = i;
    obj_of[static_cast<std::size_t>(i)] = best_j;
    if (evicted >= 0) {
      obj_of[static_cast<std::size_t>(evicted)] = -1;
      pending.push_back(evicted);
    }
  }
}

}  // namespace

double emd_approx(const PointSet& a, const PointSet& b, double epsilon) {
  if (a.size() != b.size() || a.empty()) {
    throw precondition_error(
        "earth mover's distance needs two equal-size non-empty sets");
  }
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
    throw std::domain_error("auction epsilon must be finite and positive");
  }
  const int n = static_cast<int>(a.size());
  std::vector<double> cost(static_cast<std::size_t>(n) * n);
  double c_max = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double d = std::sqrt(sq_dist(a[static_cast<std::size_t>(i)],
                                         b[static_cast<std::size_t>(j)]));
      cost[static_cast<std::size_t>(i) * n + j] = d;
      c_max = std::max(c_max, d);
    }
  }

  std::vector<double> price(static_cast<std::size_t>(n), 0.0);
  std::vector<int> obj_of;
  double eps = std::max(epsilon, c_max / 2.0);
  double total = 0.0;
  while (true) {
    auction_round(cost, n, eps, price, obj_of);
    total = 0.0;
    for (int i = 0; i < n; ++i) {
      total += cost[static_cast<std::size_t>(i) * n +
                    obj_of[static_cast<std::size_t>(i)]];
    }
    // Costs are non-negative, so a zero-cost assignment is already optimal;
    // later (coarser-tolerance) phases could only walk away from it.
    if (total == 0.0 || eps <= epsilon) break;
    eps = std::max(epsilon, eps / 4.0);
  }
  return total;
}

namespace {

PointSet subsample(const PointSet& points, int m, std::uint64_t seed) {
  const int n = static_cast<int>(points.size());
  if (n == m) return points;
  // Partial Fisher-Yates over indices, then restore original order.
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  std::mt19937_64 rng(seed);
  for (int i = 0; i < m; ++i) {
    std::uniform_int_distribution<int> pick(i, n - 1);
    std::swap(idx[static_cast<std::size_t>(i)],
              idx[static_cast<std::size_t>(pick(rng))]);
  }
  idx.resize(static_cast<std::size_t>(m));
  std::sort(idx.begin(), idx.end());
  PointSet out;
  out.reserve(static_cast<std::size_t>(m));
  for (int i : idx) out.push_back(points[static_cast<std::size_t>(i)]);
  return out;
}

}  // namespace

std::pair<PointSet, PointSet> equalize(const PointSet& a, const PointSet& b,
                                       int n_max, std::uint64_t seed) {
  if (n_max < 1) {
    throw precondition_error("equalize n_max must be positive");
  }
  if (a.empty() || b.empty()) {
    throw precondition_error("equalize needs two non-empty sets");
  }
  const int m = static_cast<int>(
      std::min({a.size(), b.size(), static_cast<std::size_t>(n_max)}));
  return {subsample(a, m, derive_seed(seed, 0)),
          subsample(b, m, derive_seed(seed, 1))};
}

}  // namespace lidargen
