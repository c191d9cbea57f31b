#pragma once

#include "osd/common.hpp"
#include "osd/dataset.hpp"
#include "osd/hnsw.hpp"
#include "osd/kdtree.hpp"

#include <optional>
#include <vector>

namespace osd::builder {

using io::DataPair;
using io::Dataset;

/// Sampling geometry: J(a, b) = dx' S_x dx + s_u du^2.
struct OsdParams {
  double j_star = 1.0;
  Mat8 s_x = Mat8::Identity();
  double s_u = 0.0;

  void validate() const;
  bool operator==(const OsdParams& o) const { return j_star == o.j_star && s_x == o.s_x && s_u == o.s_u; }
};

double pair_cost(const DataPair& a, const DataPair& b, const OsdParams& params);
/// General-dimension form used for small toy checks.
double pair_cost(const Eigen::VectorXd& dx, double du, const Eigen::MatrixXd& s_x, double s_u);

/// Maps a record to [L' x, sqrt(s_u) u] with S_x = L L', so pair_cost is a squared
/// Euclidean distance in the embedded space.
class Embedding {
 public:
  explicit Embedding(const OsdParams& params);
  Point operator()(const Vec8& x, double u) const;
  Point operator()(const DataPair& p) const { return (*this)(p.x, p.u); }
  /// State-only embedding (u term dropped), for queries without a control action.
  Point state_only(const Vec8& x) const { return (*this)(x, 0.0); }
  const OsdParams& params() const { return params_; }

 private:
  OsdParams params_;
  Mat8 Lt_;
  double su_sqrt_;
};

/// HNSW graph bound to the metric it was built with.
class OsdIndex {
 public:
  explicit OsdIndex(const OsdParams& params, HnswOptions options = {});

  std::int64_t insert(const DataPair& p) { return graph_.insert(embed_(p)); }
  /// Throws ValidationError if `params` differ from the build-time metric.
  Neighbor search(const DataPair& q, const OsdParams& params, int ef = 0) const;

  const Embedding& embedding() const { return embed_; }
  HnswIndex& graph() { return graph_; }
  const HnswIndex& graph() const { return graph_; }

 private:
  Embedding embed_;
  HnswIndex graph_;
};

/// Exact D-nearest neighbour by linear scan; smallest index wins ties.
Neighbor nn_exact(const DataPair& query, const Dataset& records, const OsdParams& params);

/// Inverse of the regularized sample covariance of the states.
Mat8 estimate_state_metric(const Dataset& raw, std::size_t min_records = 10000);

struct SaturationStats {
  std::size_t window_size = 10000;
  std::size_t rejections_in_window = 0;
  std::size_t processed = 0;
  std::size_t accepted = 0;
  std::size_t hnsw_misses = 0;  // accepts overturned by the exact guard
  std::vector<std::pair<std::size_t, double>> rejection_ratio_history;

  /// Ratio over the trailing window (or everything processed so far if shorter).
  double current_ratio() const;
};

struct Osd {
  OsdParams params;
  Dataset records;                       // centroids, in acceptance order
  std::vector<std::int64_t> source_index;  // position of each centroid in the build stream
  double u_s = 0.0;                      // build-time value from the running maximum
  SaturationStats stats;

  std::size_t size() const { return records.size(); }
};

struct BuildOptions {
  HnswOptions hnsw;
  std::size_t window = 10000;
  std::size_t history_stride = 0;  // 0 selects the window size
  bool exact_guard = true;         // confirm every accept with an exact range check
};

/// Algorithm 1 over the stream in order; the first element seeds the dataset.
Osd build_osd(const Dataset& stream, const OsdParams& params, const BuildOptions& options = {});

/// Exact nearest centroid queries over a frozen OSD.
class ExactIndex {
 public:
  enum class Method { KdTree, BruteForce };
  ExactIndex(const Osd& osd, Method method = Method::KdTree);

  Neighbor nearest(const DataPair& q) const;
  Neighbor nearest_state(const Vec8& x) const;
  Neighbor nearest_other(std::int64_t centroid) const;

 private:
  Neighbor scan(const Point& q, const std::vector<Point>& pts, std::int64_t exclude) const;

  const Osd* osd_;
  Method method_;
  Embedding joint_, state_;
  std::vector<Point> joint_pts_, state_pts_;
  KdTree joint_tree_, state_tree_;
};

struct VerificationReport {
  std::size_t n_d = 0;
  std::size_t raw_records = 0;
  std::size_t condition_ii_violations = 0;  // centroids with another centroid closer than J*
  double min_pair_cost = 0.0;
  std::size_t covered = 0;  // raw records with exact D-NN cost <= J*
  double coverage = 0.0;
  double max_uncovered_cost = 0.0;
  double build_time_us = 0.0;
  double recomputed_us = 0.0;  // authoritative
  double u_tol = 0.0;
  bool u_within_tol = true;
  bool passed = false;
};

VerificationReport verify_osd(const Osd& osd, const Dataset& raw,
                              double u_tol = std::numeric_limits<double>::infinity(),
                              ExactIndex::Method method = ExactIndex::Method::KdTree);

struct ResolutionReport {
  double mean_us = 0.0;
  double max_us = 0.0;
  std::size_t n_d = 0;
  std::vector<double> histogram_edges;        // gap bins (mU/min), last edge is +inf
  std::vector<std::size_t> record_histogram;  // raw records per gap bin
  std::vector<std::size_t> volume_histogram;  // volumes per bin of their largest gap
  std::vector<double> per_volume_max;
};

ResolutionReport measure_resolution(const Osd& osd, const Dataset& raw,
                                    ExactIndex::Method method = ExactIndex::Method::KdTree);

/// Control action of the nearest centroid under the state part of the cost.
double lookup_control(const Osd& osd, const Vec8& x_tilde);
double lookup_control(const ExactIndex& index, const Osd& osd, const Vec8& x_tilde);

}  // namespace osd::builder
