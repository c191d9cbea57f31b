#include "osd/osd_builder.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>

namespace osd::builder {

using Eigen::MatrixXd;
using Eigen::VectorXd;

void OsdParams::validate() const {
  require(std::isfinite(j_star) && j_star > 0, "OsdParams: J* must be positive");
  require(std::isfinite(s_u) && s_u >= 0, "OsdParams: S_u must be >= 0");
  require(s_x.allFinite(), "OsdParams: S_x must be finite");
  require((s_x - s_x.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * (1 + s_x.cwiseAbs().maxCoeff()),
          "OsdParams: S_x must be symmetric");
  require(Eigen::LLT<Mat8>(s_x).info() == Eigen::Success, "OsdParams: S_x must be positive definite");
}

double pair_cost(const DataPair& a, const DataPair& b, const OsdParams& params) {
  const Vec8 dx = a.x - b.x;
  const double du = a.u - b.u;
  return dx.dot(params.s_x * dx) + params.s_u * du * du;
}

double pair_cost(const VectorXd& dx, double du, const MatrixXd& s_x, double s_u) {
  require(s_x.rows() == dx.size() && s_x.cols() == dx.size(), "pair_cost: dimension mismatch");
  return dx.dot(s_x * dx) + s_u * du * du;
}

Embedding::Embedding(const OsdParams& params) : params_(params) {
  params.validate();
  Eigen::LLT<Mat8> llt(params.s_x);
  Lt_ = llt.matrixL().transpose();
  su_sqrt_ = std::sqrt(params.s_u);
}

Point Embedding::operator()(const Vec8& x, double u) const {
  Point p;
  const Vec8 y = Lt_ * x;
  for (int i = 0; i < kStateDim; ++i) p[i] = y[i];
  p[kStateDim] = su_sqrt_ * u;
  return p;
}

OsdIndex::OsdIndex(const OsdParams& params, HnswOptions options) : embed_(params), graph_(options) {}

Neighbor OsdIndex::search(const DataPair& q, const OsdParams& params, int ef) const {
  require(params == embed_.params(), "OsdIndex: query metric differs from the build-time metric");
  const Point e = embed_(q);
  return graph_.search(e.data(), ef);
}

Neighbor nn_exact(const DataPair& query, const Dataset& records, const OsdParams& params) {
  require(records.size() > 0, "nn_exact: empty dataset");
  Neighbor best;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const double c = pair_cost(query, records[i], params);
    if (c < best.cost) best = {static_cast<std::int64_t>(i), c};
  }
  return best;
}

Mat8 estimate_state_metric(const Dataset& raw, std::size_t min_records) {
  require(raw.size() >= min_records && raw.size() >= 2, "estimate_state_metric: too few records");
  require(raw.X.allFinite(), "estimate_state_metric: non-finite states");
  const Eigen::RowVectorXd mean = raw.X.colwise().mean();
  Mat8 cov = Mat8::Zero();
  // Accumulate in blocks to keep the centred copy small.
  constexpr Eigen::Index kBlock = 65536;
  for (Eigen::Index s = 0; s < raw.X.rows(); s += kBlock) {
    const Eigen::Index n = std::min(kBlock, raw.X.rows() - s);
    const MatrixXd c = raw.X.middleRows(s, n).rowwise() - mean;
    cov.noalias() += c.transpose() * c;
  }
  cov /= static_cast<double>(raw.X.rows() - 1);
  const double eps = 1e-6 * cov.trace() / kStateDim;
  require(eps > 0, "estimate_state_metric: zero covariance");
  cov.diagonal().array() += eps;
  Eigen::LLT<Mat8> llt(cov);
  require(llt.info() == Eigen::Success, "estimate_state_metric: covariance is not positive definite");
  Mat8 s_x = llt.solve(Mat8::Identity());
  s_x = (0.5 * (s_x + Mat8(s_x.transpose()))).eval();
  require(s_x.allFinite() && Eigen::LLT<Mat8>(s_x).info() == Eigen::Success,
          "estimate_state_metric: metric is not positive definite");
  return s_x;
}

double SaturationStats::current_ratio() const {
  const std::size_t n = std::min(processed, window_size);
  return n == 0 ? 0.0 : static_cast<double>(rejections_in_window) / static_cast<double>(n);
}

Osd build_osd(const Dataset& stream, const OsdParams& params, const BuildOptions& options) {
  require(stream.size() > 0, "build_osd: empty stream");
  require(options.window >= 1, "build_osd: window must be >= 1");
  const auto t0 = std::chrono::steady_clock::now();
  Osd osd;
  osd.params = params;
  osd.stats.window_size = options.window;
  const std::size_t stride = options.history_stride ? options.history_stride : options.window;

  OsdIndex index(params, options.hnsw);
  IncrementalKdForest guard;
  const Embedding& embed = index.embedding();
  std::vector<char> window(options.window, 0);  // 1 = rejected
  std::vector<DataPair> accepted;

  auto accept = [&](std::size_t k, const DataPair& p, const Point& e) {
    index.graph().insert(e);
    if (options.exact_guard) guard.insert(e, static_cast<std::int64_t>(accepted.size()));
    accepted.push_back(p);
    osd.source_index.push_back(static_cast<std::int64_t>(k));
  };
  auto record = [&](std::size_t k, bool rejected) {
    const std::size_t slot = k % options.window;
    if (k >= options.window) osd.stats.rejections_in_window -= window[slot];
    window[slot] = rejected ? 1 : 0;
    osd.stats.rejections_in_window += window[slot];
    osd.stats.processed = k + 1;
    if ((k + 1) % stride == 0) osd.stats.rejection_ratio_history.emplace_back(k + 1, osd.stats.current_ratio());
  };

  {
    const DataPair p0 = stream[0];
    accept(0, p0, embed(p0));
    record(0, false);
  }
  for (std::size_t k = 1; k < stream.size(); ++k) {
    const DataPair p = stream[k];
    const Point e = embed(p);
    Neighbor nn = index.graph().search(e.data(), options.hnsw.ef_search);
    if (nn.cost > params.j_star && options.exact_guard) {
      const Neighbor g = guard.nearest(e.data(), params.j_star);
      if (g.id >= 0) {
        nn = g;
        ++osd.stats.hnsw_misses;
      }
    }
    if (nn.cost > params.j_star) {
      accept(k, p, e);
      record(k, false);
    } else {
      osd.u_s = std::max(osd.u_s, std::abs(p.u - accepted[static_cast<std::size_t>(nn.id)].u));
      record(k, true);
    }
  }
  osd.records = Dataset::from_pairs(accepted);
  osd.stats.accepted = accepted.size();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  spdlog::info("build_osd J*={} S_u={}: {} of {} accepted, u_s={:.4g}, trailing rejection {:.3f}, {} guard saves, "
               "{:.1f} s",
               params.j_star, params.s_u, osd.size(), stream.size(), osd.u_s, osd.stats.current_ratio(),
               osd.stats.hnsw_misses, secs);
  return osd;
}

// ---------------------------------------------------------------------------

ExactIndex::ExactIndex(const Osd& osd, Method method)
    : osd_(&osd),
      method_(method),
      joint_(osd.params),
      state_([&] {
        OsdParams p = osd.params;
        p.s_u = 0.0;
        return p;
      }()) {
  require(osd.size() > 0, "ExactIndex: empty OSD");
  const std::size_t n = osd.size();
  joint_pts_.resize(n);
  state_pts_.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const DataPair p = osd.records[i];
    joint_pts_[i] = joint_(p);
    state_pts_[i] = state_.state_only(p.x);
  }
  if (method_ == Method::KdTree) {
    std::vector<std::int64_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<std::int64_t>(i);
    joint_tree_ = KdTree(joint_pts_, ids);
    state_tree_ = osd.params.s_u == 0.0 ? joint_tree_ : KdTree(state_pts_, ids);
  }
}

Neighbor ExactIndex::scan(const Point& q, const std::vector<Point>& pts, std::int64_t exclude) const {
  Neighbor best;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (static_cast<std::int64_t>(i) == exclude) continue;
    const double c = squared_distance(q.data(), pts[i].data());
    if (c < best.cost) best = {static_cast<std::int64_t>(i), c};
  }
  return best;
}

Neighbor ExactIndex::nearest(const DataPair& q) const {
  const Point e = joint_(q);
  return method_ == Method::KdTree ? joint_tree_.nearest(e.data()) : scan(e, joint_pts_, -1);
}

Neighbor ExactIndex::nearest_state(const Vec8& x) const {
  const Point e = state_.state_only(x);
  return method_ == Method::KdTree ? state_tree_.nearest(e.data()) : scan(e, state_pts_, -1);
}

Neighbor ExactIndex::nearest_other(std::int64_t c) const {
  const Point& e = joint_pts_[static_cast<std::size_t>(c)];
  return method_ == Method::KdTree ? joint_tree_.nearest(e.data(), c) : scan(e, joint_pts_, c);
}

VerificationReport verify_osd(const Osd& osd, const Dataset& raw, double u_tol, ExactIndex::Method method) {
  const auto t0 = std::chrono::steady_clock::now();
  VerificationReport r;
  r.n_d = osd.size();
  r.raw_records = raw.size();
  r.build_time_us = osd.u_s;
  r.u_tol = u_tol;
  const ExactIndex index(osd, method);
  const double j_star = osd.params.j_star;

  r.min_pair_cost = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < osd.size(); ++i) {
    const Neighbor nb = index.nearest_other(static_cast<std::int64_t>(i));
    if (nb.id < 0) continue;
    r.min_pair_cost = std::min(r.min_pair_cost, nb.cost);
    if (nb.cost < j_star) ++r.condition_ii_violations;
  }
  for (std::size_t k = 0; k < raw.size(); ++k) {
    const DataPair p = raw[k];
    const Neighbor nb = index.nearest(p);
    if (nb.cost <= j_star) {
      ++r.covered;
    } else {
      r.max_uncovered_cost = std::max(r.max_uncovered_cost, nb.cost);
    }
    r.recomputed_us = std::max(r.recomputed_us, std::abs(p.u - osd.records.u[nb.id]));
  }
  r.coverage = raw.size() ? static_cast<double>(r.covered) / static_cast<double>(raw.size()) : 1.0;
  if (r.covered < raw.size()) {
    spdlog::warn("verify_osd: {} raw records outside J* (worst cost {:.6g})", raw.size() - r.covered,
                 r.max_uncovered_cost);
  }
  r.u_within_tol = r.recomputed_us <= u_tol;
  r.passed = r.condition_ii_violations == 0 && r.coverage >= 0.999 && r.u_within_tol;
  spdlog::info("verify_osd: N_d={}, (ii) violations={}, coverage={:.6f}, u_s build={:.4g} recomputed={:.4g}, "
               "{:.1f} s",
               r.n_d, r.condition_ii_violations, r.coverage, r.build_time_us, r.recomputed_us,
               std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  return r;
}

ResolutionReport measure_resolution(const Osd& osd, const Dataset& raw, ExactIndex::Method method) {
  ResolutionReport r;
  r.n_d = osd.size();
  r.histogram_edges = {0.0, 1e-3, 1e-2, 0.1, 1.0, 10.0, 100.0, 1000.0, std::numeric_limits<double>::infinity()};
  const std::size_t bins = r.histogram_edges.size() - 1;
  r.record_histogram.assign(bins, 0);
  r.volume_histogram.assign(bins, 0);
  r.per_volume_max.assign(osd.size(), 0.0);
  auto bin_of = [&](double g) {
    std::size_t b = 0;
    while (b + 1 < bins && g >= r.histogram_edges[b + 1]) ++b;
    return b;
  };
  const ExactIndex index(osd, method);
  double sum = 0.0;
  for (std::size_t k = 0; k < raw.size(); ++k) {
    const DataPair p = raw[k];
    const Neighbor nb = index.nearest(p);
    const double gap = std::abs(p.u - osd.records.u[nb.id]);
    sum += gap;
    r.max_us = std::max(r.max_us, gap);
    auto& vm = r.per_volume_max[static_cast<std::size_t>(nb.id)];
    vm = std::max(vm, gap);
    ++r.record_histogram[bin_of(gap)];
  }
  r.mean_us = raw.size() ? sum / static_cast<double>(raw.size()) : 0.0;
  for (double g : r.per_volume_max) ++r.volume_histogram[bin_of(g)];
  return r;
}

double lookup_control(const ExactIndex& index, const Osd& osd, const Vec8& x_tilde) {
  const Neighbor nb = index.nearest_state(x_tilde);
  return osd.records.u[nb.id];
}

double lookup_control(const Osd& osd, const Vec8& x_tilde) {
  require(osd.size() > 0, "lookup_control: empty OSD");
  return lookup_control(ExactIndex(osd, ExactIndex::Method::BruteForce), osd, x_tilde);
}

}  // namespace osd::builder
