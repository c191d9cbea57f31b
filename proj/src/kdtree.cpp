#include "osd/kdtree.hpp"

#include "osd/common.hpp"

#include <algorithm>
#include <numeric>

namespace osd::builder {

KdTree::KdTree(std::vector<Point> points, std::vector<std::int64_t> ids, int leaf_size)
    : pts_(std::move(points)), ids_(std::move(ids)) {
  require(pts_.size() == ids_.size(), "KdTree: points and ids differ in length");
  require(leaf_size >= 1, "KdTree: leaf size must be positive");
  require(pts_.size() < std::numeric_limits<std::uint32_t>::max(), "KdTree: too many points");
  if (pts_.empty()) return;
  nodes_.reserve(2 * pts_.size() / leaf_size + 2);
  build(0, static_cast<std::uint32_t>(pts_.size()), leaf_size);
}

int KdTree::build(std::uint32_t begin, std::uint32_t end, int leaf_size) {
  const int idx = static_cast<int>(nodes_.size());
  nodes_.push_back({begin, end, -1, -1, {}, {}});
  Point lo = pts_[begin], hi = pts_[begin];
  for (std::uint32_t i = begin + 1; i < end; ++i) {
    for (int d = 0; d < kEmbedDim; ++d) {
      lo[d] = std::min(lo[d], pts_[i][d]);
      hi[d] = std::max(hi[d], pts_[i][d]);
    }
  }
  nodes_[idx].lo = lo;
  nodes_[idx].hi = hi;
  if (end - begin <= static_cast<std::uint32_t>(leaf_size)) return idx;

  int dim = 0;
  for (int d = 1; d < kEmbedDim; ++d) {
    if (hi[d] - lo[d] > hi[dim] - lo[dim]) dim = d;
  }
  if (hi[dim] == lo[dim]) return idx;  // all points identical

  // Sort a permutation so points and ids move together.
  const std::uint32_t mid = begin + (end - begin) / 2;
  std::vector<std::uint32_t> perm(end - begin);
  std::iota(perm.begin(), perm.end(), begin);
  std::nth_element(perm.begin(), perm.begin() + (mid - begin), perm.end(), [&](std::uint32_t a, std::uint32_t b) {
    return pts_[a][dim] < pts_[b][dim] || (pts_[a][dim] == pts_[b][dim] && ids_[a] < ids_[b]);
  });
  std::vector<Point> tp(perm.size());
  std::vector<std::int64_t> ti(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    tp[i] = pts_[perm[i]];
    ti[i] = ids_[perm[i]];
  }
  std::copy(tp.begin(), tp.end(), pts_.begin() + begin);
  std::copy(ti.begin(), ti.end(), ids_.begin() + begin);

  const int l = build(begin, mid, leaf_size);
  const int r = build(mid, end, leaf_size);
  nodes_[idx].left = l;
  nodes_[idx].right = r;
  return idx;
}

namespace {

double box_distance(const double* q, const Point& lo, const Point& hi) {
  double s = 0.0;
  for (int d = 0; d < kEmbedDim; ++d) {
    double e = 0.0;
    if (q[d] < lo[d]) {
      e = lo[d] - q[d];
    } else if (q[d] > hi[d]) {
      e = q[d] - hi[d];
    }
    s += e * e;
  }
  return s;
}

}  // namespace

void KdTree::search(int node, const double* q, Neighbor& best, std::int64_t exclude) const {
  const Node& n = nodes_[node];
  if (n.left < 0) {
    for (std::uint32_t i = n.begin; i < n.end; ++i) {
      if (ids_[i] == exclude) continue;
      const Neighbor c{ids_[i], squared_distance(q, pts_[i].data())};
      if (c.cost < best.cost || (c.cost == best.cost && (best.id < 0 || c.id < best.id))) best = c;
    }
    return;
  }
  const double dl = box_distance(q, nodes_[n.left].lo, nodes_[n.left].hi);
  const double dr = box_distance(q, nodes_[n.right].lo, nodes_[n.right].hi);
  const int first = dl <= dr ? n.left : n.right;
  const int second = dl <= dr ? n.right : n.left;
  const double d1 = std::min(dl, dr), d2 = std::max(dl, dr);
  if (d1 <= best.cost) search(first, q, best, exclude);
  if (d2 <= best.cost) search(second, q, best, exclude);
}

void KdTree::nearest(const double* q, Neighbor& best, std::int64_t exclude) const {
  if (nodes_.empty()) return;
  if (box_distance(q, nodes_[0].lo, nodes_[0].hi) > best.cost) return;
  search(0, q, best, exclude);
}

// ---------------------------------------------------------------------------

void IncrementalKdForest::insert(const Point& p, std::int64_t id) {
  buf_pts_.push_back(p);
  buf_ids_.push_back(id);
  ++count_;
  if (buf_pts_.size() < buffer_size_) return;

  std::vector<Point> pts = std::move(buf_pts_);
  std::vector<std::int64_t> ids = std::move(buf_ids_);
  buf_pts_.clear();
  buf_ids_.clear();
  std::size_t level = 0;
  while (level < trees_.size() && !trees_[level].empty()) {
    pts.insert(pts.end(), trees_[level].points().begin(), trees_[level].points().end());
    ids.insert(ids.end(), trees_[level].ids().begin(), trees_[level].ids().end());
    trees_[level] = KdTree();
    ++level;
  }
  if (level == trees_.size()) trees_.emplace_back();
  trees_[level] = KdTree(std::move(pts), std::move(ids));
}

Neighbor IncrementalKdForest::nearest(const double* q, double bound) const {
  Neighbor best;
  best.cost = bound;
  for (std::size_t i = 0; i < buf_pts_.size(); ++i) {
    const Neighbor c{buf_ids_[i], squared_distance(q, buf_pts_[i].data())};
    if (c.cost < best.cost || (c.cost == best.cost && (best.id < 0 || c.id < best.id))) best = c;
  }
  for (const auto& t : trees_) t.nearest(q, best);
  return best;
}

}  // namespace osd::builder
