#pragma once

#include "osd/kdtree.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace osd::builder {

struct HnswOptions {
  int M = 16;
  int ef_construction = 200;
  int ef_search = 64;
  int ef_verify = 128;
  double level_mult = 0.0;  // 0 selects 1 / ln(M)
  std::uint64_t seed = 42;

  void validate() const;
};

/// Hierarchical navigable small-world graph over embedded points under squared
/// Euclidean distance. Single writer; concurrent readers must use their own
/// SearchScratch.
class HnswIndex {
 public:
  struct SearchScratch {
    std::vector<std::uint32_t> visited;
    std::uint32_t epoch = 0;
  };

  explicit HnswIndex(HnswOptions options = {});

  /// Inserts a point and returns its id (ids are dense, in insertion order).
  std::int64_t insert(const Point& p);
  void reserve(std::size_t n);

  Neighbor search(const double* q, int ef = 0) const;
  Neighbor search(const double* q, int ef, SearchScratch& scratch) const;
  /// Up to k nearest candidates found with beam width ef, ascending.
  std::vector<Neighbor> search_knn(const double* q, int k, int ef, SearchScratch& scratch) const;

  std::size_t size() const { return levels_.size(); }
  int max_level() const { return max_level_; }
  std::int64_t entry_point() const { return entry_; }
  int level(std::int64_t id) const { return levels_[id]; }
  std::vector<std::uint32_t> neighbors(std::int64_t id, int layer) const;
  const Point& point(std::int64_t id) const { return pts_[id]; }
  const HnswOptions& options() const { return opt_; }

  /// Throws InvariantViolation if a structural invariant fails: neighbour
  /// list sizes, link targets present on the layer, reachability from the entry point.
  void check_invariants() const;

 private:
  using Candidate = std::pair<double, std::uint32_t>;

  std::uint32_t* links0(std::uint32_t id) { return &links0_[static_cast<std::size_t>(id) * (2 * opt_.M + 1)]; }
  const std::uint32_t* links0(std::uint32_t id) const {
    return &links0_[static_cast<std::size_t>(id) * (2 * opt_.M + 1)];
  }
  std::vector<std::uint32_t>& upper(std::uint32_t id, int layer) { return upper_[id][layer - 1]; }
  const std::vector<std::uint32_t>& upper(std::uint32_t id, int layer) const { return upper_[id][layer - 1]; }

  template <typename F>
  void for_each_link(std::uint32_t id, int layer, F&& f) const;
  void set_links(std::uint32_t id, int layer, const std::vector<std::uint32_t>& ids);

  std::vector<Candidate> search_layer(const double* q, const std::vector<Candidate>& entry, int ef, int layer,
                                      SearchScratch& scratch) const;
  Candidate greedy(const double* q, Candidate ep, int layer) const;
  std::vector<std::uint32_t> select_neighbors(const std::vector<Candidate>& candidates, int m) const;
  void connect(std::uint32_t from, std::uint32_t to, int layer);
  double dist(std::uint32_t a, const double* q) const { return squared_distance(pts_[a].data(), q); }

  HnswOptions opt_;
  double mult_;
  std::mt19937_64 rng_;
  std::vector<Point> pts_;
  std::vector<int> levels_;
  std::vector<std::uint32_t> links0_;  // per node: count followed by 2M slots
  std::vector<std::vector<std::vector<std::uint32_t>>> upper_;
  std::int64_t entry_ = -1;
  int max_level_ = -1;
  mutable SearchScratch scratch_;
};

}  // namespace osd::builder
