#include "osd/hnsw.hpp"

#include "osd/common.hpp"

#include <algorithm>
#include <cmath>
#include <queue>

namespace osd::builder {

void HnswOptions::validate() const {
  require(M >= 2, "HnswOptions: M must be >= 2");
  require(ef_construction >= 1 && ef_search >= 1 && ef_verify >= 1, "HnswOptions: beam widths must be >= 1");
  require(level_mult >= 0, "HnswOptions: level multiplier must be >= 0");
}

HnswIndex::HnswIndex(HnswOptions options) : opt_(options), rng_(options.seed) {
  opt_.validate();
  mult_ = opt_.level_mult > 0 ? opt_.level_mult : 1.0 / std::log(static_cast<double>(opt_.M));
}

void HnswIndex::reserve(std::size_t n) {
  pts_.reserve(n);
  levels_.reserve(n);
  upper_.reserve(n);
  links0_.reserve(n * (2 * opt_.M + 1));
}

template <typename F>
void HnswIndex::for_each_link(std::uint32_t id, int layer, F&& f) const {
  if (layer == 0) {
    const std::uint32_t* l = links0(id);
    for (std::uint32_t i = 0; i < l[0]; ++i) f(l[1 + i]);
  } else {
    for (std::uint32_t n : upper(id, layer)) f(n);
  }
}

void HnswIndex::set_links(std::uint32_t id, int layer, const std::vector<std::uint32_t>& ids) {
  if (layer == 0) {
    std::uint32_t* l = links0(id);
    l[0] = static_cast<std::uint32_t>(ids.size());
    std::copy(ids.begin(), ids.end(), l + 1);
  } else {
    upper(id, layer) = ids;
  }
}

std::vector<std::uint32_t> HnswIndex::neighbors(std::int64_t id, int layer) const {
  std::vector<std::uint32_t> out;
  for_each_link(static_cast<std::uint32_t>(id), layer, [&](std::uint32_t n) { out.push_back(n); });
  return out;
}

HnswIndex::Candidate HnswIndex::greedy(const double* q, Candidate ep, int layer) const {
  bool changed = true;
  while (changed) {
    changed = false;
    for_each_link(ep.second, layer, [&](std::uint32_t n) {
      const Candidate c{dist(n, q), n};
      if (c < ep) {
        ep = c;
        changed = true;
      }
    });
  }
  return ep;
}

std::vector<HnswIndex::Candidate> HnswIndex::search_layer(const double* q, const std::vector<Candidate>& entry,
                                                          int ef, int layer, SearchScratch& s) const {
  if (s.visited.size() < pts_.size()) s.visited.resize(pts_.size() + pts_.size() / 2 + 16, 0);
  if (++s.epoch == 0) {
    std::fill(s.visited.begin(), s.visited.end(), 0);
    s.epoch = 1;
  }
  // candidates: min-heap; results: max-heap of the best ef found so far.
  std::priority_queue<Candidate, std::vector<Candidate>, std::greater<>> candidates;
  std::priority_queue<Candidate> results;
  for (const auto& e : entry) {
    s.visited[e.second] = s.epoch;
    candidates.push(e);
    results.push(e);
  }
  while (static_cast<int>(results.size()) > ef) results.pop();

  while (!candidates.empty()) {
    const Candidate c = candidates.top();
    if (c > results.top() && static_cast<int>(results.size()) >= ef) break;
    candidates.pop();
    for_each_link(c.second, layer, [&](std::uint32_t n) {
      if (s.visited[n] == s.epoch) return;
      s.visited[n] = s.epoch;
      const Candidate e{dist(n, q), n};
      if (static_cast<int>(results.size()) < ef || e < results.top()) {
        candidates.push(e);
        results.push(e);
        if (static_cast<int>(results.size()) > ef) results.pop();
      }
    });
  }
  std::vector<Candidate> out(results.size());
  for (auto i = out.size(); i-- > 0;) {
    out[i] = results.top();
    results.pop();
  }
  return out;  // ascending
}

std::vector<std::uint32_t> HnswIndex::select_neighbors(const std::vector<Candidate>& candidates, int m) const {
  // Keep a candidate only if it is closer to the base than to every neighbour kept so far.
  std::vector<std::uint32_t> kept;
  kept.reserve(m);
  for (const auto& c : candidates) {
    if (static_cast<int>(kept.size()) >= m) break;
    bool good = true;
    for (std::uint32_t r : kept) {
      if (squared_distance(pts_[r].data(), pts_[c.second].data()) < c.first) {
        good = false;
        break;
      }
    }
    if (good) kept.push_back(c.second);
  }
  return kept;
}

void HnswIndex::connect(std::uint32_t from, std::uint32_t to, int layer) {
  const int cap = layer == 0 ? 2 * opt_.M : opt_.M;
  std::vector<std::uint32_t> cur = neighbors(from, layer);
  if (static_cast<int>(cur.size()) < cap) {
    cur.push_back(to);
    set_links(from, layer, cur);
    return;
  }
  std::vector<Candidate> cands;
  cands.reserve(cur.size() + 1);
  const double* base = pts_[from].data();
  for (std::uint32_t n : cur) cands.emplace_back(dist(n, base), n);
  cands.emplace_back(dist(to, base), to);
  std::sort(cands.begin(), cands.end());
  set_links(from, layer, select_neighbors(cands, cap));
}

std::int64_t HnswIndex::insert(const Point& p) {
  for (double v : p) require(std::isfinite(v), "HnswIndex: non-finite point");
  const auto id = static_cast<std::uint32_t>(pts_.size());
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double r = 1.0 - u01(rng_);  // (0, 1]
  const int lvl = static_cast<int>(std::floor(-std::log(r) * mult_));

  pts_.push_back(p);
  levels_.push_back(lvl);
  links0_.resize(links0_.size() + 2 * opt_.M + 1, 0);
  upper_.emplace_back(lvl);

  if (entry_ < 0) {
    entry_ = id;
    max_level_ = lvl;
    return id;
  }
  const double* q = p.data();
  Candidate ep{dist(static_cast<std::uint32_t>(entry_), q), static_cast<std::uint32_t>(entry_)};
  for (int l = max_level_; l > lvl; --l) ep = greedy(q, ep, l);

  std::vector<Candidate> eps{ep};
  for (int l = std::min(lvl, max_level_); l >= 0; --l) {
    std::vector<Candidate> w = search_layer(q, eps, opt_.ef_construction, l, scratch_);
    const auto chosen = select_neighbors(w, opt_.M);
    set_links(id, l, chosen);
    for (std::uint32_t n : chosen) connect(n, id, l);
    eps = std::move(w);
  }
  if (lvl > max_level_) {
    max_level_ = lvl;
    entry_ = id;
  }
  return id;
}

Neighbor HnswIndex::search(const double* q, int ef) const { return search(q, ef, scratch_); }

Neighbor HnswIndex::search(const double* q, int ef, SearchScratch& scratch) const {
  const auto r = search_knn(q, 1, ef, scratch);
  return r.empty() ? Neighbor{} : r.front();
}

std::vector<Neighbor> HnswIndex::search_knn(const double* q, int k, int ef, SearchScratch& scratch) const {
  if (entry_ < 0) return {};
  if (ef <= 0) ef = opt_.ef_search;
  ef = std::max(ef, k);
  Candidate ep{dist(static_cast<std::uint32_t>(entry_), q), static_cast<std::uint32_t>(entry_)};
  for (int l = max_level_; l > 0; --l) ep = greedy(q, ep, l);
  const auto w = search_layer(q, {ep}, ef, 0, scratch);
  std::vector<Neighbor> out;
  for (int i = 0; i < k && i < static_cast<int>(w.size()); ++i) out.push_back({w[i].second, w[i].first});
  return out;
}

void HnswIndex::check_invariants() const {
  const std::size_t n = size();
  if (n == 0) return;
  for (std::uint32_t id = 0; id < n; ++id) {
    for (int l = 0; l <= levels_[id]; ++l) {
      const auto nb = neighbors(id, l);
      const std::size_t cap = l == 0 ? 2 * opt_.M : opt_.M;
      if (nb.size() > cap) throw InvariantViolation("HnswIndex: neighbour list over capacity");
      for (std::uint32_t t : nb) {
        if (t >= n || levels_[t] < l) throw InvariantViolation("HnswIndex: link to a node absent from the layer");
        if (t == id) throw InvariantViolation("HnswIndex: self link");
      }
    }
  }
  if (levels_[entry_] != max_level_) throw InvariantViolation("HnswIndex: entry point is not on the top layer");
  // Every node must be reachable from the entry point through the layered graph.
  std::vector<char> seen(n, 0);
  std::vector<std::uint32_t> stack{static_cast<std::uint32_t>(entry_)};
  seen[entry_] = 1;
  while (!stack.empty()) {
    const std::uint32_t v = stack.back();
    stack.pop_back();
    for (int l = 0; l <= levels_[v]; ++l) {
      for_each_link(v, l, [&](std::uint32_t t) {
        if (!seen[t]) {
          seen[t] = 1;
          stack.push_back(t);
        }
      });
    }
  }
  if (std::count(seen.begin(), seen.end(), 0) > 0) throw InvariantViolation("HnswIndex: unreachable node");
}

}  // namespace osd::builder
