#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <vector>

namespace osd::builder {

inline constexpr int kEmbedDim = 9;
using Point = std::array<double, kEmbedDim>;

inline double squared_distance(const double* a, const double* b) {
  double s = 0.0;
  for (int i = 0; i < kEmbedDim; ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

/// Result of a nearest-neighbour query: `id` is -1 when nothing was found within the bound.
struct Neighbor {
  std::int64_t id = -1;
  double cost = std::numeric_limits<double>::infinity();

  bool operator<(const Neighbor& o) const { return cost < o.cost || (cost == o.cost && id < o.id); }
};

/// Static kd-tree over embedded points with caller-supplied ids. Exact queries;
/// among equidistant points the smallest id wins.
class KdTree {
 public:
  KdTree() = default;
  KdTree(std::vector<Point> points, std::vector<std::int64_t> ids, int leaf_size = 12);

  std::size_t size() const { return pts_.size(); }
  bool empty() const { return pts_.empty(); }

  /// Nearest point with cost <= best.cost (inclusive); `best` is updated in place.
  /// `exclude` skips one id (used for nearest-other-point queries).
  void nearest(const double* q, Neighbor& best, std::int64_t exclude = -1) const;
  Neighbor nearest(const double* q, std::int64_t exclude = -1) const {
    Neighbor b;
    nearest(q, b, exclude);
    return b;
  }

  const std::vector<Point>& points() const { return pts_; }
  const std::vector<std::int64_t>& ids() const { return ids_; }

 private:
  struct Node {
    std::uint32_t begin, end;  // range in pts_
    std::int32_t left = -1, right = -1;
    Point lo, hi;              // bounding box
  };
  int build(std::uint32_t begin, std::uint32_t end, int leaf_size);
  void search(int node, const double* q, Neighbor& best, std::int64_t exclude) const;

  std::vector<Point> pts_;
  std::vector<std::int64_t> ids_;
  std::vector<Node> nodes_;
};

/// Insert-only exact index built from a binary ladder of static kd-trees
/// plus a small linear buffer.
class IncrementalKdForest {
 public:
  explicit IncrementalKdForest(std::size_t buffer_size = 64) : buffer_size_(buffer_size) {}

  void insert(const Point& p, std::int64_t id);
  Neighbor nearest(const double* q, double bound = std::numeric_limits<double>::infinity()) const;
  std::size_t size() const { return count_; }

 private:
  std::size_t buffer_size_;
  std::vector<Point> buf_pts_;
  std::vector<std::int64_t> buf_ids_;
  std::vector<KdTree> trees_;  // trees_[i] is empty or holds buffer_size * 2^i points
  std::size_t count_ = 0;
};

}  // namespace osd::builder
