#include "support.hpp"

#include "pimap/errors.hpp"
#include "pimap/retrieval.hpp"

#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <set>

using namespace pimap;
using pimap::test::random_vector;

namespace {

// Metrics evaluated straight from their definitions.
struct Oracle {
  double map = 0, mrr = 0, r1 = 0, r5 = 0, r10 = 0, tr5 = 0, p5 = 0;
  std::size_t n = 0;
};

Oracle oracle(const std::vector<QueryOutcome>& qs) {
  Oracle o;
  double top5_hits = 0, all_pos = 0;
  for (const auto& q : qs) {
    const std::set<std::string> P(q.positives.begin(), q.positives.end());
    if (P.empty()) continue;
    ++o.n;
    auto is_pos = [&](std::size_t i) { return P.count(q.ranking[i]) > 0; };
    auto hits_in = [&](std::size_t k) {
      double h = 0;
      for (std::size_t i = 0; i < std::min(k, q.ranking.size()); ++i) h += is_pos(i) ? 1 : 0;
      return h;
    };
    double ap = 0;
    for (std::size_t i = 0; i < q.ranking.size(); ++i) {
      if (is_pos(i)) ap += hits_in(i + 1) / static_cast<double>(i + 1);
    }
    o.map += ap / static_cast<double>(P.size());
    for (std::size_t i = 0; i < q.ranking.size(); ++i) {
      if (is_pos(i)) {
        o.mrr += 1.0 / static_cast<double>(i + 1);
        break;
      }
    }
    o.r1 += hits_in(1) > 0 ? 1 : 0;
    o.r5 += hits_in(5) > 0 ? 1 : 0;
    o.r10 += hits_in(10) > 0 ? 1 : 0;
    top5_hits += hits_in(5);
    all_pos += static_cast<double>(P.size());
  }
  if (o.n == 0) return o;
  const double n = static_cast<double>(o.n);
  o.map /= n;
  o.mrr /= n;
  o.r1 /= n;
  o.r5 /= n;
  o.r10 /= n;
  o.tr5 = top5_hits / all_pos;
  o.p5 = top5_hits / (5.0 * n);
  return o;
}

std::vector<std::string> item_ids(std::size_t n) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back("m" + std::to_string(i));
  return ids;
}

IndexEntry entry(const std::string& id, std::vector<Vector> embs, MediaKind kind = MediaKind::image) {
  IndexEntry e;
  e.media_id = id;
  e.kind = kind;
  e.embeddings = std::move(embs);
  return e;
}

std::vector<std::string> ids_of(const std::vector<RankedHit>& hits) {
  std::vector<std::string> out;
  for (const auto& h : hits) out.push_back(h.media_id);
  return out;
}

}  // namespace

TEST_SUITE("retrieval") {

TEST_CASE("metrics equal the brute-force definitions on random instances") {
  Rng rng = make_stream(21, "metrics");
  for (int inst = 0; inst < 1000; ++inst) {
    const std::size_t n_items = 1 + uniform_index(rng, 50);
    const std::size_t n_queries = 1 + uniform_index(rng, 20);
    const auto ids = item_ids(n_items);
    std::vector<QueryOutcome> qs;
    for (std::size_t q = 0; q < n_queries; ++q) {
      QueryOutcome o;
      o.query_id = "q" + std::to_string(q);
      const auto perm = sample_without_replacement(rng, n_items, n_items);
      for (auto i : perm) o.ranking.push_back(ids[i]);
      const std::size_t n_pos = uniform_index(rng, std::min<std::size_t>(n_items, 12) + 1);
      for (auto i : sample_without_replacement(rng, n_items, n_pos)) o.positives.push_back(ids[i]);
      qs.push_back(std::move(o));
    }
    const auto r = compute_metrics(qs, {1, 5, 10});
    const auto o = oracle(qs);
    REQUIRE(r.n_queries == o.n);
    if (o.n == 0) continue;
    CHECK(std::abs(r.map - o.map) <= 1e-12);
    CHECK(std::abs(r.mrr - o.mrr) <= 1e-12);
    CHECK(std::abs(r.recall_at.at(1) - o.r1) <= 1e-12);
    CHECK(std::abs(r.recall_at.at(5) - o.r5) <= 1e-12);
    CHECK(std::abs(r.recall_at.at(10) - o.r10) <= 1e-12);
    CHECK(std::abs(r.tr_at5 - o.tr5) <= 1e-12);
    CHECK(std::abs(r.p_at5 - o.p5) <= 1e-12);
  }
}

TEST_CASE("metric worked values") {
  QueryOutcome a{"a", {"x", "p", "y", "z"}, {"p"}};
  QueryOutcome b{"b", {"x", "y", "z", "p"}, {"p"}};
  const auto r = compute_metrics({a, b});
  CHECK(r.mrr == 0.375);

  QueryOutcome one{"c", {"p", "x"}, {"p"}};
  const auto s = compute_metrics({one});
  CHECK(s.mrr == 1.0);
  CHECK(s.recall_at.at(5) == 1.0);

  QueryOutcome none{"d", {"x"}, {}};
  const auto t = compute_metrics({one, none});
  CHECK(t.n_queries == 1);
  CHECK(t.n_excluded == 1);
  CHECK(t.warnings.size() == 1);

  QueryOutcome many{"e", item_ids(10), item_ids(8)};
  const auto u = compute_metrics({many});
  CHECK(u.tr_at5_ceiling == doctest::Approx(5.0 / 8.0));
  CHECK(u.tr_at5 == u.tr_at5_ceiling);
  CHECK(u.p_at5 == 1.0);
}

TEST_CASE("rank-based metrics ignore monotone score transforms") {
  Rng rng = make_stream(22, "monotone");
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + uniform_index(rng, 40);
    std::vector<double> scores;
    for (std::size_t i = 0; i < n; ++i) scores.push_back(gaussian(rng));
    const auto ids = item_ids(n);
    std::vector<std::string> pos;
    for (auto i : sample_without_replacement(rng, n, 1 + uniform_index(rng, std::min<std::size_t>(n, 4)))) {
      pos.push_back(ids[i]);
    }
    auto metrics_for = [&](const std::function<double(double)>& f) {
      std::vector<IndexEntry> entries;
      for (std::size_t i = 0; i < n; ++i) entries.push_back(entry(ids[i], {Vector::Constant(1, f(scores[i]))}));
      QueryOutcome q{"q", ids_of(rank_full_sort(Vector::Ones(1), entries)), pos};
      return compute_metrics({q});
    };
    const auto base = metrics_for([](double s) { return s; });
    for (const auto& f : std::vector<std::function<double(double)>>{
             [](double s) { return std::exp(s); }, [](double s) { return 3.0 * s + 2.0; }}) {
      const auto m = metrics_for(f);
      CHECK(m.mrr == base.mrr);
      for (const auto& [k, v] : base.recall_at) CHECK(m.recall_at.at(k) == v);
    }
  }
}

TEST_CASE("top-k agrees with a full sort and ignores insertion order") {
  Rng rng = make_stream(23, "rank");
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + uniform_index(rng, 60);
    const std::size_t d = 1 + uniform_index(rng, 6);
    std::vector<IndexEntry> entries;
    for (std::size_t i = 0; i < n; ++i) {
      const bool video = uniform01(rng) < 0.3;
      std::vector<Vector> frames;
      for (std::size_t f = 0; f < (video ? 1 + uniform_index(rng, 4) : 1); ++f) {
        // Coarse values force plenty of exact ties.
        Vector v(static_cast<Eigen::Index>(d));
        for (Eigen::Index j = 0; j < v.size(); ++j) v[j] = static_cast<double>(uniform_index(rng, 3));
        frames.push_back(v);
      }
      entries.push_back(entry("id" + std::to_string(uniform_index(rng, 1000000)) + "-" + std::to_string(i),
                              frames, video ? MediaKind::video : MediaKind::image));
    }
    const Vector q = Vector::Ones(static_cast<Eigen::Index>(d));
    const std::size_t k = 1 + uniform_index(rng, n + 5);

    EmbeddingIndex a("enc", d), b("enc", d);
    for (const auto& e : entries) a.add(e);
    for (auto i : sample_without_replacement(rng, n, n)) b.add(entries[i]);
    const auto top = rank(q, a, k);
    auto full = rank_full_sort(q, entries);
    full.resize(std::min(k, full.size()));
    REQUIRE(top.size() == full.size());
    CHECK(ids_of(top) == ids_of(full));
    CHECK(ids_of(rank(q, b, k)) == ids_of(top));
    for (std::size_t i = 1; i < top.size(); ++i) {
      const bool ordered = top[i - 1].score > top[i].score ||
                           (top[i - 1].score == top[i].score && top[i - 1].media_id < top[i].media_id);
      CHECK(ordered);
    }
  }
}

TEST_CASE("video score is the best frame") {
  Vector q = Vector::Zero(2);
  q[0] = 1.0;
  const auto v = entry("v", {Vector::Constant(2, 0.2), Vector::Constant(2, 0.8), Vector::Constant(2, 0.5)},
                       MediaKind::video);
  CHECK(score(q, v) == 0.8);
  for (const auto& f : v.embeddings) CHECK(score(q, v) >= q.dot(f));
  const auto single = entry("s", {Vector::Constant(2, 0.3)}, MediaKind::video);
  const auto img = entry("i", {Vector::Constant(2, 0.3)});
  CHECK(score(q, single) == score(q, img));
  Vector ortho = Vector::Zero(2);
  ortho[1] = 1.0;
  CHECK(score(ortho, entry("o", {q})) == 0.0);
}

TEST_CASE("rank edge cases") {
  EmbeddingIndex idx("enc", 2);
  CHECK_THROWS_AS(rank(Vector::Ones(2), idx, 1), UsageError);
  idx.add(entry("b", {Vector::Ones(2)}));
  idx.add(entry("a", {Vector::Ones(2)}));
  CHECK_THROWS_AS(rank(Vector::Ones(2), idx, 0), UsageError);
  CHECK(ids_of(rank(Vector::Ones(2), idx, 10)) == std::vector<std::string>{"a", "b"});
  CHECK_THROWS_AS(idx.add(entry("a", {Vector::Ones(2)})), ValidationError);
  CHECK_THROWS_AS(idx.add(entry("c", {Vector::Ones(3)})), ShapeError);
}

TEST_CASE("index files round-trip") {
  const auto dir = test::scratch_dir("index");
  Rng rng = make_stream(24, "idx");
  EmbeddingIndex idx("enc-x", 4);
  for (int i = 0; i < 10; ++i) {
    auto e = entry("m" + std::to_string(i), {random_vector(rng, 4), random_vector(rng, 4)},
                   i % 2 ? MediaKind::video : MediaKind::image);
    if (i % 2 == 0) e.embeddings.pop_back();
    e.metadata["k"] = std::to_string(i);
    idx.add(e);
  }
  const auto bytes = serialize_index(idx);
  const auto back = deserialize_index(bytes);
  CHECK(back.encoder_id() == "enc-x");
  CHECK(back.size() == 10);
  CHECK(serialize_index(back) == bytes);
  save_index(idx, dir / "i.piidx");
  CHECK(serialize_index(load_index(dir / "i.piidx")) == bytes);
  CHECK_THROWS(deserialize_index(bytes.substr(0, bytes.size() - 3)));
}

}  // TEST_SUITE
