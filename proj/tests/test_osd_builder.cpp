#include "doctest.h"

#include "osd/mpc.hpp"
#include "osd/osd_builder.hpp"

#include <cmath>
#include <random>

using namespace osd;
using namespace osd::builder;

namespace {

DataPair pair_1d(double x, double u) {
  DataPair p;
  p.x[0] = x;
  p.u = u;
  return p;
}

// Independent brute force: cost written out coordinate by coordinate.
double reference_cost(const DataPair& a, const DataPair& b, const OsdParams& prm) {
  double c = 0.0;
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) c += (a.x[i] - b.x[i]) * prm.s_x(i, j) * (a.x[j] - b.x[j]);
  return c + prm.s_u * (a.u - b.u) * (a.u - b.u);
}

std::pair<std::int64_t, double> reference_nn(const DataPair& q, const Dataset& d, const OsdParams& prm) {
  std::int64_t best = -1;
  double bc = INFINITY;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double c = reference_cost(q, d[i], prm);
    if (c < bc) {
      bc = c;
      best = static_cast<std::int64_t>(i);
    }
  }
  return {best, bc};
}

Mat8 random_spd(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Mat8 M;
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) M(i, j) = g(rng);
  Mat8 S = M * M.transpose() / 8 + 0.2 * Mat8::Identity();
  return 0.5 * (S + S.transpose());
}

double smooth_policy(const Vec8& x) { return 40.0 * std::tanh(2.0 * x[0]) + 5.0 * x[1] * x[2]; }

// States on a 3-dimensional manifold in R^8 with a nonlinear control law.
Dataset synthetic_stream(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Dataset d;
  d.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double a = g(rng), b = g(rng), c = g(rng);
    Vec8 x;
    x << a, b, c, a + 0.5 * b, b - c, 0.3 * a * b, std::sin(c), 0.1 * g(rng);
    d.X.row(k) = x.transpose();
    d.u[k] = smooth_policy(x);
  }
  return d;
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// One-sided Mann-Kendall p-value for an increasing trend, with tie correction.
double mann_kendall_increasing_p(const std::vector<double>& v) {
  const auto n = static_cast<double>(v.size());
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i)
    for (std::size_t j = i + 1; j < v.size(); ++j) s += (v[j] > v[i]) - (v[j] < v[i]);
  std::vector<double> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  double tie_term = 0.0;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i);
    tie_term += t * (t - 1) * (2 * t + 5);
    i = j;
  }
  const double var = (n * (n - 1) * (2 * n + 5) - tie_term) / 18.0;
  const double z = s > 0 ? (s - 1) / std::sqrt(var) : 0.0;
  return 1.0 - normal_cdf(z);
}

}  // namespace

TEST_CASE("pair cost examples") {
  OsdParams prm;
  const DataPair a = pair_1d(1.0, 3.0);
  CHECK(pair_cost(a, a, prm) == 0.0);
  Eigen::VectorXd dx(2);
  dx << 1, 1;
  CHECK(pair_cost(dx, 10.0, Eigen::MatrixXd::Identity(2, 2), 0.01) == doctest::Approx(3.0));
  CHECK_THROWS_AS(pair_cost(dx, 1.0, Eigen::MatrixXd::Identity(3, 3), 0.0), ValidationError);

  std::mt19937_64 rng(1);
  prm.s_x = random_spd(rng);
  prm.s_u = 0.0;
  DataPair b = pair_1d(0.0, 100.0);
  b.x[3] = 2.0;
  const Vec8 d = a.x - b.x;
  CHECK(pair_cost(a, b, prm) == doctest::Approx(d.dot(prm.s_x * d)));
}

TEST_CASE("cost axioms and embedding agreement on random pairs") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int t = 0; t < 200; ++t) {
    OsdParams prm;
    prm.s_x = random_spd(rng);
    prm.s_u = t % 3 == 0 ? 0.0 : std::exp(g(rng));
    DataPair a, b;
    for (int i = 0; i < 8; ++i) {
      a.x[i] = g(rng);
      b.x[i] = g(rng);
    }
    a.u = 10 * g(rng);
    b.u = 10 * g(rng);
    const double ab = pair_cost(a, b, prm);
    CHECK(ab == doctest::Approx(pair_cost(b, a, prm)).epsilon(1e-14));
    CHECK(ab > 0.0);
    CHECK(pair_cost(a, a, prm) == 0.0);
    const Embedding emb(prm);
    const Point ea = emb(a), eb = emb(b);
    CHECK(squared_distance(ea.data(), eb.data()) == doctest::Approx(ab).epsilon(1e-12));
  }
}

TEST_CASE("invalid metric parameters") {
  OsdParams prm;
  prm.j_star = 0.0;
  CHECK_THROWS_AS(prm.validate(), ValidationError);
  prm = OsdParams{};
  prm.s_u = -1;
  CHECK_THROWS_AS(prm.validate(), ValidationError);
  prm = OsdParams{};
  prm.s_x(0, 0) = -1;
  CHECK_THROWS_AS(prm.validate(), ValidationError);
}

TEST_CASE("nn_exact") {
  OsdParams prm;
  Dataset one;
  one.push_back(pair_1d(5.0, 1.0));
  CHECK(nn_exact(pair_1d(-3, 0), one, prm).id == 0);
  CHECK_THROWS_AS(nn_exact(pair_1d(0, 0), Dataset{}, prm), ValidationError);

  std::mt19937_64 rng(3);
  prm.s_x = random_spd(rng);
  prm.s_u = 0.01;
  const Dataset d = synthetic_stream(1000, 4);
  CHECK(nn_exact(d[17], d, prm).id == 17);
  CHECK(nn_exact(d[17], d, prm).cost == 0.0);
  const Dataset q = synthetic_stream(100, 5);
  for (std::size_t i = 0; i < q.size(); ++i) {
    const auto got = nn_exact(q[i], d, prm);
    const auto want = reference_nn(q[i], d, prm);
    CHECK(got.id == want.first);
    CHECK(got.cost == doctest::Approx(want.second).epsilon(1e-12));
  }

  Dataset dup;
  dup.push_back(pair_1d(1, 0));
  dup.push_back(pair_1d(-1, 0));
  dup.push_back(pair_1d(1, 0));
  CHECK(nn_exact(pair_1d(0, 0), dup, OsdParams{}).id == 0);
}

TEST_CASE("kd-tree and incremental forest agree with brute force, ties to smallest id") {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<Point> pts(3000);
  for (auto& p : pts)
    for (auto& v : p) v = std::round(4 * g(rng)) / 4;  // coarse grid creates many ties
  std::vector<std::int64_t> ids(pts.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::int64_t>(i);
  const KdTree tree(pts, ids);
  IncrementalKdForest forest(16);
  for (std::size_t i = 0; i < pts.size(); ++i) forest.insert(pts[i], static_cast<std::int64_t>(i));
  CHECK(forest.size() == pts.size());
  for (int t = 0; t < 500; ++t) {
    Point q;
    for (auto& v : q) v = std::round(4 * g(rng)) / 4;
    Neighbor want;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const double c = squared_distance(q.data(), pts[i].data());
      if (c < want.cost) want = {static_cast<std::int64_t>(i), c};
    }
    const Neighbor a = tree.nearest(q.data());
    const Neighbor b = forest.nearest(q.data());
    CHECK(a.id == want.id);
    CHECK(b.id == want.id);
    CHECK(a.cost == want.cost);
    // bounded query: nothing returned when the bound is below the optimum
    if (want.cost > 0) CHECK(forest.nearest(q.data(), want.cost * 0.999).id == -1);
    CHECK(forest.nearest(q.data(), want.cost).id == want.id);
  }
  const Neighbor other = tree.nearest(pts[5].data(), 5);
  CHECK(other.id != 5);
}

TEST_CASE("HNSW: single element, recall and invariants") {
  HnswIndex one;
  Point p{};
  p[0] = 1;
  one.insert(p);
  Point q{};
  CHECK(one.search(q.data()).id == 0);
  CHECK(one.search(q.data()).cost == 1.0);

  const Dataset d = synthetic_stream(20000, 7);
  OsdParams prm;
  prm.s_u = 1e-3;
  OsdIndex index(prm);
  for (std::size_t i = 0; i < d.size(); ++i) index.insert(d[i]);
  CHECK_NOTHROW(index.graph().check_invariants());
  CHECK(index.graph().size() == d.size());

  const Dataset queries = synthetic_stream(2000, 8);
  std::vector<Point> pts(d.size());
  std::vector<std::int64_t> ids(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    pts[i] = index.embedding()(d[i]);
    ids[i] = static_cast<std::int64_t>(i);
  }
  const KdTree exact(pts, ids);
  int hits = 0;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const Point e = index.embedding()(queries[i]);
    const Neighbor a = index.graph().search(e.data(), index.graph().options().ef_verify);
    const Neighbor b = exact.nearest(e.data());
    hits += a.cost == b.cost;
  }
  MESSAGE("recall@1 = " << hits / 2000.0);
  CHECK(hits >= 1998);

  OsdParams other = prm;
  other.s_u = 2e-3;
  CHECK_THROWS_AS(index.search(queries[0], other), ValidationError);
  CHECK_NOTHROW(index.search(queries[0], prm));
}

TEST_CASE("state metric estimation") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g(0.0, 1.0);
  Dataset d;
  d.resize(100000);
  for (std::size_t k = 0; k < d.size(); ++k) {
    for (int i = 0; i < 8; ++i) d.X(k, i) = g(rng);
    d.u[k] = 0.0;
  }
  const Mat8 S = estimate_state_metric(d);
  CHECK((S - Mat8::Identity()).cwiseAbs().maxCoeff() <= 0.05);
  CHECK((S - S.transpose()).cwiseAbs().maxCoeff() == 0.0);

  Dataset scaled = d;
  scaled.X.col(2) *= 10.0;
  const Mat8 S2 = estimate_state_metric(scaled);
  CHECK(S2(2, 2) == doctest::Approx(S(2, 2) / 100).epsilon(1e-3));

  // Mahalanobis distances are invariant under affine re-coordinatization.
  Mat8 T = random_spd(rng) + Mat8::Identity();
  Dataset t = d;
  Vec8 shift;
  for (int i = 0; i < 8; ++i) shift[i] = 5 * g(rng);
  t.X = (d.X * T.transpose()).rowwise() + shift.transpose();
  const Mat8 St = estimate_state_metric(t);
  for (int k = 0; k < 50; ++k) {
    const Vec8 a = d.X.row(k).transpose(), b = d.X.row(k + 100).transpose();
    const double m0 = (a - b).dot(S * (a - b));
    const double m1 = (T * (a - b)).dot(St * (T * (a - b)));
    CHECK(m1 == doctest::Approx(m0).epsilon(1e-4));
  }

  Dataset small = synthetic_stream(100, 1);
  CHECK_THROWS_AS(estimate_state_metric(small), ValidationError);
  Dataset zero;
  zero.resize(20000);
  zero.X.setZero();
  zero.u.setZero();
  CHECK_THROWS_AS(estimate_state_metric(zero), ValidationError);
}

TEST_CASE("Algorithm 1 hand trace") {
  Dataset s;
  s.push_back(pair_1d(0.0, 0.0));
  s.push_back(pair_1d(0.5, 1.0));
  s.push_back(pair_1d(1.2, 2.0));
  s.push_back(pair_1d(1.25, 5.0));
  OsdParams prm;
  prm.j_star = 0.3;
  const Osd osd = build_osd(s, prm);
  REQUIRE(osd.size() == 2);
  CHECK(osd.records.X(0, 0) == 0.0);
  CHECK(osd.records.X(1, 0) == 1.2);
  CHECK(osd.u_s == 3.0);  // max(|1-0|, |5-2|)
  CHECK(osd.source_index == std::vector<std::int64_t>{0, 2});
  CHECK(osd.stats.processed == 4);
  CHECK(osd.stats.rejections_in_window == 2);
}

TEST_CASE("Algorithm 1 degenerate streams") {
  OsdParams prm;
  Dataset same;
  for (int i = 0; i < 50; ++i) same.push_back(pair_1d(2.0, 1.0));
  CHECK(build_osd(same, prm).size() == 1);

  Dataset d = synthetic_stream(500, 11);
  prm.s_x = Mat8::Identity();
  prm.j_star = 1e6;
  CHECK(build_osd(d, prm).size() == 1);

  // ties at exactly J* are rejected
  Dataset tie;
  tie.push_back(pair_1d(0.0, 0.0));
  tie.push_back(pair_1d(0.5, 0.0));
  prm.j_star = 0.25;
  CHECK(build_osd(tie, prm).size() == 1);
}

TEST_CASE("built OSDs satisfy both conditions") {
  const Dataset d = synthetic_stream(30000, 12);
  for (double su : {0.0, 1e-3, 1e-2}) {
    OsdParams prm;
    prm.j_star = 0.5;
    prm.s_u = su;
    const Osd osd = build_osd(d, prm);
    const auto rep = verify_osd(osd, d);
    CHECK(rep.condition_ii_violations == 0);
    CHECK(rep.min_pair_cost > prm.j_star);
    CHECK(rep.covered == d.size());
    CHECK(rep.passed);
    CHECK(rep.recomputed_us >= 0.0);
    // brute-force verification agrees on a prefix
    Dataset prefix;
    prefix.resize(2000);
    prefix.X = d.X.topRows(2000);
    prefix.u = d.u.head(2000);
    const auto a = verify_osd(osd, prefix, INFINITY, ExactIndex::Method::KdTree);
    const auto b = verify_osd(osd, prefix, INFINITY, ExactIndex::Method::BruteForce);
    CHECK(a.recomputed_us == b.recomputed_us);
    CHECK(a.covered == b.covered);
  }
}

TEST_CASE("recomputed u_s can exceed the build-time value") {
  Dataset s;
  s.push_back(pair_1d(0.0, 0.0));
  s.push_back(pair_1d(0.9, 10.0));
  s.push_back(pair_1d(1.5, 100.0));
  OsdParams prm;
  prm.j_star = 1.0;
  const Osd osd = build_osd(s, prm);
  CHECK(osd.size() == 2);
  CHECK(osd.u_s == 10.0);
  const auto rep = verify_osd(osd, s, 50.0);
  CHECK(rep.recomputed_us == 90.0);
  CHECK(rep.build_time_us == 10.0);
  CHECK_FALSE(rep.u_within_tol);
  CHECK_FALSE(rep.passed);
}

TEST_CASE("resolution measurement") {
  const Dataset d = synthetic_stream(20000, 13);
  OsdParams prm;
  prm.j_star = 0.5;
  const Osd osd = build_osd(d, prm);
  const auto self = measure_resolution(osd, osd.records);
  CHECK(self.mean_us == 0.0);
  CHECK(self.max_us == 0.0);
  CHECK(self.n_d == osd.size());

  double prev_max = INFINITY;
  for (double su : {0.0, 1e-3, 1e-2, 1e-1}) {
    prm.s_u = su;
    const Osd o = build_osd(d, prm);
    const auto r = measure_resolution(o, d);
    CHECK(r.mean_us <= r.max_us);
    CHECK(r.max_us < prev_max);
    std::size_t total = 0;
    for (auto c : r.record_histogram) total += c;
    CHECK(total == d.size());
    prev_max = r.max_us;
  }
}

TEST_CASE("lookup control") {
  const Dataset d = synthetic_stream(20000, 14);
  const Dataset held = synthetic_stream(3000, 15);
  OsdParams prm;
  prm.j_star = 0.25;
  const Osd osd = build_osd(d, prm);
  CHECK(lookup_control(osd, osd.records[7].x) == osd.records.u[7]);

  // With S_u = 0 the lookup and the resolution measurement use the same neighbour.
  const ExactIndex idx(osd);
  const auto res = measure_resolution(osd, held);
  std::vector<std::size_t> hist(res.histogram_edges.size() - 1, 0);
  for (std::size_t k = 0; k < held.size(); ++k) {
    const double gap = std::abs(lookup_control(idx, osd, held[k].x) - held.u[k]);
    std::size_t b = 0;
    while (b + 2 < res.histogram_edges.size() && gap >= res.histogram_edges[b + 1]) ++b;
    ++hist[b];
  }
  CHECK(hist == res.record_histogram);

  // Large S_u and small J*: the denser sampling of sensitive regions lowers the
  // state-only lookup error relative to the S_u = 0 dataset at the same J*.
  prm.j_star = 0.05;
  auto worst_lookup = [&](double s_u) {
    prm.s_u = s_u;
    const Osd o = build_osd(d, prm);
    const ExactIndex ix(o);
    double worst = 0.0;
    for (std::size_t k = 0; k < held.size(); ++k) {
      worst = std::max(worst, std::abs(lookup_control(ix, o, held[k].x) - held.u[k]));
    }
    return worst;
  };
  const double plain = worst_lookup(0.0), shaped = worst_lookup(1.0);
  MESSAGE("max held-out lookup error: S_u=0 " << plain << ", S_u=1 " << shaped);
  CHECK(shaped <= plain);
}

TEST_CASE("saturation trend on a stationary stream") {
  const Dataset d = synthetic_stream(200000, 16);
  OsdParams prm;
  prm.j_star = 0.5;
  prm.s_u = 1e-3;
  BuildOptions opt;
  opt.window = 10000;
  const Osd osd = build_osd(d, prm, opt);
  std::vector<double> ratios;
  for (const auto& [n, r] : osd.stats.rejection_ratio_history) {
    CHECK(r >= 0.0);
    CHECK(r <= 1.0);
    ratios.push_back(r);
  }
  CHECK(ratios.size() == 20);
  CHECK(mann_kendall_increasing_p(ratios) < 0.05);
  CHECK(osd.stats.current_ratio() == doctest::Approx(ratios.back()));
}

TEST_CASE("partition volumes shrink along sensitive directions as S_u grows") {
  const auto model = glucose::nominal_model(glucose::SubjectParams{});
  mpc::MpcParams mp;
  const mpc::Controller ctl(model, mp);
  mpc::AugmentedState c;
  c.x[0] = 60.0;
  c.d = 1.0;
  c.y_dot = 1.0;
  c.iob = 1.0;
  const Vec8 xc = c.to_vector();
  const double uc = ctl(c);
  auto extent = [&](double s_u, int axis) {
    OsdParams prm;
    prm.j_star = 1.0;
    prm.s_x = Mat8::Identity() * 1e-3;
    prm.s_u = s_u;
    double lo = 0.0, hi = 1000.0;
    for (int it = 0; it < 60; ++it) {
      const double t = 0.5 * (lo + hi);
      Vec8 x = xc;
      x[axis] += t;
      const double u = ctl(mpc::AugmentedState::from_vector(x));
      const double j = pair_cost(DataPair{xc, uc}, DataPair{x, u}, prm);
      (j > prm.j_star ? hi : lo) = t;
    }
    return lo;
  };
  const double e0 = extent(0.0, 0), e1 = extent(1e-4, 0), e2 = extent(1e-2, 0);
  MESSAGE("glucose-axis extents " << e0 << " " << e1 << " " << e2);
  CHECK(e1 < e0);
  CHECK(e2 < e1);
}
