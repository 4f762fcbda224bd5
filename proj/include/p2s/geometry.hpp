#pragma once

// Deterministic point-set operations: normalization, farthest point sampling,
// k-nearest-neighbor search and multi-scale grouping.
//
// Every comparison that could tie is resolved first by coordinates
// (lexicographic x, y, z) and only then by index, so permuting the input
// points permutes the results without changing any selected coordinates.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <queue>
#include <span>
#include <string>
#include <vector>

#include "p2s/errors.hpp"

namespace p2s {

using Point3 = std::array<double, 3>;

struct PointCloud {
  std::vector<Point3> points;
  // Per-point part labels; empty when the cloud is unlabeled.
  std::vector<int> labels;

  std::size_t size() const noexcept { return points.size(); }
  bool labeled() const noexcept { return !labels.empty(); }
};

inline double squared_distance(const Point3& a, const Point3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

inline bool coordinates_less(const Point3& a, const Point3& b) {
  return a < b;  // std::array compares lexicographically
}

// Candidate ordering shared by every nearest-neighbor routine.
struct Neighbor {
  double d2;
  std::size_t index;
};

inline bool neighbor_before(const Neighbor& a, const Neighbor& b, std::span<const Point3> pts) {
  if (a.d2 != b.d2) return a.d2 < b.d2;
  if (pts[a.index] != pts[b.index]) return coordinates_less(pts[a.index], pts[b.index]);
  return a.index < b.index;
}

// Mean that does not depend on point order: each axis is summed in sorted order.
inline Point3 order_independent_mean(std::span<const Point3> pts) {
  Point3 mean{0.0, 0.0, 0.0};
  if (pts.empty()) return mean;
  std::vector<double> axis(pts.size());
  for (std::size_t a = 0; a < 3; ++a) {
    for (std::size_t i = 0; i < pts.size(); ++i) axis[i] = pts[i][a];
    std::sort(axis.begin(), axis.end());
    double total = 0.0;
    for (double v : axis) total += v;
    mean[a] = total / static_cast<double>(pts.size());
  }
  return mean;
}

/// Translates the mean to the origin and scales by the inverse maximum norm.
/// A cloud of identical points maps to all zeros.
inline PointCloud normalize_unit_ball(PointCloud cloud) {
  if (cloud.points.empty()) throw DataError("cannot normalize an empty point cloud");
  const Point3 mean = order_independent_mean(cloud.points);
  double max_norm = 0.0;
  for (auto& p : cloud.points) {
    for (std::size_t a = 0; a < 3; ++a) p[a] -= mean[a];
    max_norm = std::max(max_norm, std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]));
  }
  if (max_norm > 0.0)
    for (auto& p : cloud.points)
      for (double& c : p) c /= max_norm;
  return cloud;
}

struct Centroids {
  std::vector<std::size_t> indices;
  std::vector<Point3> coordinates;
  // Euclidean distance from each pick to the previously selected set at the
  // moment it was chosen (infinity for the first pick).
  std::vector<double> gains;

  std::size_t size() const noexcept { return indices.size(); }
};

/// Index of the point farthest from the cloud mean, ties to the
/// lexicographically smallest coordinates.
inline std::size_t fps_start_index(std::span<const Point3> pts) {
  const Point3 mean = order_independent_mean(pts);
  std::size_t best = 0;
  double best_d2 = -1.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double d2 = squared_distance(pts[i], mean);
    if (d2 > best_d2 || (d2 == best_d2 && (coordinates_less(pts[i], pts[best]) ||
                                           (pts[i] == pts[best] && i < best)))) {
      best = i;
      best_d2 = d2;
    }
  }
  return best;
}

/// Greedy farthest point sampling of M centroids.
inline Centroids farthest_point_sample(const PointCloud& cloud, std::size_t count) {
  const std::span<const Point3> pts = cloud.points;
  const std::size_t n = pts.size();
  if (count == 0 || count > n)
    throw ArgumentError("farthest_point_sample: need 1 <= M <= N, got M=" + std::to_string(count) +
                        " N=" + std::to_string(n));
  Centroids out;
  out.indices.reserve(count);
  std::vector<double> min_d2(n, std::numeric_limits<double>::infinity());
  std::vector<char> taken(n, 0);

  std::size_t pick = fps_start_index(pts);
  double gain2 = std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s < count; ++s) {
    out.indices.push_back(pick);
    out.coordinates.push_back(pts[pick]);
    out.gains.push_back(std::sqrt(gain2));
    taken[pick] = 1;
    if (s + 1 == count) break;

    std::size_t next = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      min_d2[i] = std::min(min_d2[i], squared_distance(pts[i], pts[pick]));
      if (next == n || min_d2[i] > min_d2[next] ||
          (min_d2[i] == min_d2[next] && coordinates_less(pts[i], pts[next])))
        next = i;  // equal coordinates keep the earlier (lower) index
    }
    pick = next;
    gain2 = min_d2[next];
  }
  return out;
}

/// Static median-split axis-aligned tree over a fixed point set.
class KdTree {
 public:
  explicit KdTree(std::span<const Point3> points) : points_(points.begin(), points.end()) {
    order_.resize(points_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    if (!points_.empty()) build(0, points_.size());
  }

  std::size_t size() const noexcept { return points_.size(); }

  /// The K nearest point indices to `query`, ascending by distance.
  std::vector<std::size_t> nearest(const Point3& query, std::size_t k) const {
    if (k == 0 || k > points_.size())
      throw ArgumentError("knn: need 1 <= K <= N, got K=" + std::to_string(k) + " N=" + std::to_string(points_.size()));
    auto worse = [this](const Neighbor& a, const Neighbor& b) { return neighbor_before(a, b, points_); };
    std::priority_queue<Neighbor, std::vector<Neighbor>, decltype(worse)> heap(worse);
    search(0, query, k, heap);
    std::vector<std::size_t> result(heap.size());
    for (std::size_t i = result.size(); i-- > 0;) {
      result[i] = heap.top().index;
      heap.pop();
    }
    return result;
  }

 private:
  static constexpr std::size_t kLeafSize = 8;

  struct Node {
    std::size_t begin = 0, end = 0;
    int axis = -1;  // -1 marks a leaf
    double split = 0.0;
    std::size_t left = 0, right = 0;
  };

  std::size_t build(std::size_t begin, std::size_t end) {
    const std::size_t id = nodes_.size();
    nodes_.push_back({begin, end});
    if (end - begin <= kLeafSize) return id;

    Point3 lo = points_[order_[begin]], hi = lo;
    for (std::size_t i = begin; i < end; ++i)
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::min(lo[a], points_[order_[i]][a]);
        hi[a] = std::max(hi[a], points_[order_[i]][a]);
      }
    int axis = 0;
    for (int a = 1; a < 3; ++a)
      if (hi[a] - lo[a] > hi[axis] - lo[axis]) axis = a;
    if (hi[axis] == lo[axis]) return id;  // all coincident: keep as leaf

    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin),
                     order_.begin() + static_cast<std::ptrdiff_t>(mid),
                     order_.begin() + static_cast<std::ptrdiff_t>(end), [&](std::size_t a, std::size_t b) {
                       if (points_[a][axis] != points_[b][axis]) return points_[a][axis] < points_[b][axis];
                       return a < b;
                     });
    const double split = points_[order_[mid]][axis];
    const std::size_t left = build(begin, mid);
    const std::size_t right = build(mid, end);
    nodes_[id].axis = axis;
    nodes_[id].split = split;
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  template <class Heap>
  void search(std::size_t id, const Point3& q, std::size_t k, Heap& heap) const {
    const Node& node = nodes_[id];
    if (node.axis < 0) {
      for (std::size_t i = node.begin; i < node.end; ++i) {
        const Neighbor cand{squared_distance(points_[order_[i]], q), order_[i]};
        if (heap.size() < k) {
          heap.push(cand);
        } else if (neighbor_before(cand, heap.top(), points_)) {
          heap.pop();
          heap.push(cand);
        }
      }
      return;
    }
    // Left holds coordinates <= split, right holds >= split.
    const double diff = q[node.axis] - node.split;
    const std::size_t near = diff < 0.0 ? node.left : node.right;
    const std::size_t far = diff < 0.0 ? node.right : node.left;
    search(near, q, k, heap);
    // Prune only on a strictly larger bound; an equal one may hide a coordinate-tie winner.
    if (heap.size() < k || diff * diff <= heap.top().d2) search(far, q, k, heap);
  }

  std::vector<Point3> points_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
};

/// Accelerated K-nearest-neighbor search; builds a tree for the cloud.
inline std::vector<std::size_t> knn_search(const PointCloud& cloud, const Point3& query, std::size_t k) {
  return KdTree(cloud.points).nearest(query, k);
}

/// Reference K-nearest-neighbor search by full sort.
inline std::vector<std::size_t> brute_force_knn(const PointCloud& cloud, const Point3& query, std::size_t k) {
  const std::span<const Point3> pts = cloud.points;
  if (k == 0 || k > pts.size())
    throw ArgumentError("knn: need 1 <= K <= N, got K=" + std::to_string(k) + " N=" + std::to_string(pts.size()));
  std::vector<Neighbor> all(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) all[i] = {squared_distance(pts[i], query), i};
  std::sort(all.begin(), all.end(), [&](const Neighbor& a, const Neighbor& b) { return neighbor_before(a, b, pts); });
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = all[i].index;
  return out;
}

struct ScaleSpec {
  std::vector<std::size_t> sizes;

  std::size_t count() const noexcept { return sizes.size(); }
  std::size_t largest() const { return sizes.back(); }

  void validate(std::size_t cloud_size) const {
    if (sizes.empty()) throw ConfigError("scale list is empty");
    for (std::size_t t = 0; t < sizes.size(); ++t) {
      if (sizes[t] == 0) throw ConfigError("scale sizes must be positive");
      if (t > 0 && sizes[t] <= sizes[t - 1]) throw ConfigError("scale sizes must be strictly increasing");
    }
    if (sizes.back() > cloud_size)
      throw ArgumentError("largest scale " + std::to_string(sizes.back()) + " exceeds cloud size " +
                          std::to_string(cloud_size));
  }
};

/// Neighbor lists per region. Area (j, t) is the first K_t entries of region
/// j's K_T-nearest list, so smaller scales are prefixes of larger ones.
struct MultiScaleGrouping {
  std::vector<std::size_t> sizes;
  std::size_t regions = 0;
  std::vector<std::size_t> neighbors;  // regions x K_T, row-major

  std::size_t largest() const { return sizes.back(); }

  std::span<const std::size_t> area(std::size_t region, std::size_t scale) const {
    return std::span<const std::size_t>(neighbors).subspan(region * largest(), sizes.at(scale));
  }
};

inline MultiScaleGrouping group_areas(const PointCloud& cloud, const Centroids& centroids, const ScaleSpec& scales) {
  scales.validate(cloud.size());
  MultiScaleGrouping g;
  g.sizes = scales.sizes;
  g.regions = centroids.size();
  g.neighbors.reserve(g.regions * scales.largest());
  const KdTree tree(cloud.points);
  for (const Point3& c : centroids.coordinates) {
    const auto nn = tree.nearest(c, scales.largest());
    g.neighbors.insert(g.neighbors.end(), nn.begin(), nn.end());
  }
  return g;
}

inline std::vector<Point3> to_relative(std::span<const Point3> points, const Point3& centroid) {
  std::vector<Point3> out(points.size());
  for (std::size_t i = 0; i < points.size(); ++i)
    for (std::size_t a = 0; a < 3; ++a) out[i][a] = points[i][a] - centroid[a];
  return out;
}

}  // namespace p2s
