#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "psimap/panoptic.hpp"

using namespace psimap;

namespace {

InstanceQuery make_query(const Vec3& mean, const VecX& feature, const Mat3& cov) {
  InstanceQuery q;
  q.mean = mean;
  q.feature = feature;
  q.cov = cov;
  return q;
}

Surfel make_surfel(const Vec3& center, const VecX& f_ins) {
  Surfel s;
  s.center = center;
  s.f_ins = f_ins;
  s.f_sem = VecX::Zero(2);
  s.scales = Vec2(0.1, 0.1);
  return s;
}

VecX vec(std::initializer_list<double> v) {
  VecX out(static_cast<int>(v.size()));
  int i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

}  // namespace

TEST_CASE("feature similarity closed forms") {
  CHECK(feature_similarity(vec({1, 0}), vec({0, 1})) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(feature_similarity(vec({1e3, 0}), vec({1, 0})) > 1.0 - 1e-12);
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    VecX a(4), b(4);
    for (int i = 0; i < 4; ++i) {
      a[i] = rng.normal();
      b[i] = rng.normal();
    }
    CHECK(feature_similarity(a, b) == doctest::Approx(sigmoid(a.dot(b))).epsilon(1e-12));
  }
}

TEST_CASE("geometric affinity is the density ratio") {
  const Mat3 cov = Vec3(0.5, 0.25, 1.0).asDiagonal();
  const InstanceQuery q = make_query(Vec3(1, 2, 3), vec({0, 0}), cov);
  CHECK(geometric_affinity(q, q.mean) == doctest::Approx(1.0).epsilon(1e-12));

  // Mahalanobis distance sqrt(2) -> exp(-1)
  const Vec3 p = q.mean + Vec3(std::sqrt(2.0 * 0.5), 0, 0);
  CHECK(geometric_affinity(q, p) == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));

  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    const Vec3 probe = q.mean + Vec3(rng.normal(), rng.normal(), rng.normal());
    // independent two-density evaluation
    auto dens = [&](const Vec3& x) {
      const Vec3 d = x - q.mean;
      const Mat3 inv = cov.inverse();
      return std::exp(-0.5 * d.dot(inv * d)) /
             std::sqrt(std::pow(2 * M_PI, 3) * cov.determinant());
    };
    CHECK(geometric_affinity(q, probe) ==
          doctest::Approx(dens(probe) / dens(q.mean)).epsilon(1e-10));
  }
}

TEST_CASE("attention map product and bound") {
  const InstanceQuery q = make_query(Vec3(0, 0, 0), vec({1.0, -0.5}), Mat3::Identity());
  const Surfel s = make_surfel(Vec3(0.5, 0.5, 0), vec({0.3, 0.7}));
  const double a = attention_map(q, q.feature, s);
  const double s_only = feature_similarity(q.feature, s.f_ins);
  CHECK(a <= s_only + 1e-15);
  CHECK(a == doctest::Approx(s_only * geometric_affinity(q, s.center)).epsilon(1e-12));
}

TEST_CASE("assign_labels: singleton, symmetry and oracle") {
  SceneMap scene;
  scene.vocabulary = {"a"};
  for (int i = 0; i < 6; ++i) {
    scene.surfels.push_back(make_surfel(Vec3(i * 0.3, 0, 0), vec({0.1 * i, -0.2})));
  }

  SUBCASE("single alive query claims everything") {
    std::vector<InstanceQuery> queries = {make_query(Vec3(0, 0, 0), vec({1, 1}), Mat3::Identity())};
    const LabelAssignment la = assign_labels(queries, nullptr, scene);
    for (int s = 0; s < 6; ++s) {
      CHECK(la.dist(0, s) == doctest::Approx(1.0).epsilon(1e-12));
      CHECK(la.argmax[s] == 0);
    }
  }

  SUBCASE("two identical queries split evenly, argmax takes the lower index") {
    std::vector<InstanceQuery> queries = {
        make_query(Vec3(0, 0, 0), vec({1, 1}), Mat3::Identity()),
        make_query(Vec3(0, 0, 0), vec({1, 1}), Mat3::Identity())};
    const LabelAssignment la = assign_labels(queries, nullptr, scene);
    for (int s = 0; s < 6; ++s) {
      CHECK(la.dist(0, s) == doctest::Approx(0.5).epsilon(1e-12));
      CHECK(la.dist(1, s) == doctest::Approx(0.5).epsilon(1e-12));
      CHECK(la.argmax[s] == 0);
    }
  }

  SUBCASE("separated clusters match the brute-force argmax") {
    SceneMap clusters;
    clusters.vocabulary = {"a"};
    Rng rng(7);
    const std::array<Vec3, 3> centers = {Vec3(0, 0, 0), Vec3(5, 0, 0), Vec3(0, 5, 0)};
    for (int c = 0; c < 3; ++c) {
      for (int i = 0; i < 4; ++i) {
        clusters.surfels.push_back(
            make_surfel(centers[c] + 0.2 * Vec3(rng.normal(), rng.normal(), rng.normal()),
                        vec({rng.normal(), rng.normal()})));
      }
    }
    std::vector<InstanceQuery> queries;
    for (int c = 0; c < 3; ++c) {
      queries.push_back(make_query(centers[c], vec({rng.normal(), rng.normal()}),
                                   0.5 * Mat3::Identity()));
    }
    const LabelAssignment la = assign_labels(queries, nullptr, clusters);
    for (size_t s = 0; s < clusters.surfels.size(); ++s) {
      // exhaustive per-surfel comparison of A values
      int best = 0;
      double best_a = -1;
      for (int q = 0; q < 3; ++q) {
        const double a = attention_map(queries[q], queries[q].feature, clusters.surfels[s]);
        if (a > best_a) {
          best_a = a;
          best = q;
        }
      }
      CHECK(la.argmax[s] == best);
      double sum = 0;
      for (int q = 0; q < 3; ++q) sum += la.dist(q, s);
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-8));
    }
  }
}

TEST_CASE("assign_labels invariant under a common feature-space rotation") {
  SceneMap scene;
  scene.vocabulary = {"a"};
  Rng rng(19);
  const int c_ins = 4;
  for (int i = 0; i < 10; ++i) {
    VecX f(c_ins);
    for (int c = 0; c < c_ins; ++c) f[c] = rng.normal();
    scene.surfels.push_back(make_surfel(Vec3(rng.normal(), rng.normal(), rng.normal()), f));
  }
  std::vector<InstanceQuery> queries;
  for (int q = 0; q < 3; ++q) {
    VecX f(c_ins);
    for (int c = 0; c < c_ins; ++c) f[c] = rng.normal();
    queries.push_back(make_query(Vec3(rng.normal(), rng.normal(), rng.normal()), f,
                                 Mat3::Identity()));
  }
  const LabelAssignment base = assign_labels(queries, nullptr, scene);

  // random orthogonal matrix via QR
  MatX g(c_ins, c_ins);
  for (int i = 0; i < c_ins * c_ins; ++i) g.data()[i] = rng.normal();
  const MatX rot = Eigen::HouseholderQR<MatX>(g).householderQ();

  SceneMap rotated = scene;
  for (auto& s : rotated.surfels) s.f_ins = rot * s.f_ins;
  std::vector<InstanceQuery> rot_queries = queries;
  for (auto& q : rot_queries) q.feature = rot * q.feature;

  const LabelAssignment after = assign_labels(rot_queries, nullptr, rotated);
  CHECK((base.dist - after.dist).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(base.argmax == after.argmax);
}

TEST_CASE("frustum_select basics and boundary flip") {
  SceneMap scene;
  scene.vocabulary = {"a"};
  const Camera cam = Camera::make(Mat3::Identity(), Vec3::Zero(), 100, 100, 32, 32, 64, 64, 0.5,
                                  50.0);

  Surfel inside = make_surfel(Vec3(0, 0, 10), vec({0, 0}));
  Surfel outside = make_surfel(Vec3(100, 0, 10), vec({0, 0}));
  scene.surfels = {inside, outside};
  const auto sel = frustum_select(scene, cam);
  CHECK(sel == std::vector<int>{0});

  // sweep across the right frustum plane: membership flips exactly once
  int flips = 0;
  bool prev = true;
  for (int i = 0; i <= 400; ++i) {
    SceneMap probe;
    probe.vocabulary = {"a"};
    probe.surfels = {make_surfel(Vec3(i * 0.02, 0, 10), vec({0, 0}))};
    const bool in = !frustum_select(probe, cam).empty();
    if (in != prev) ++flips;
    prev = in;
  }
  CHECK(flips == 1);
}

TEST_CASE("frustum_select monotone under nested frusta") {
  Rng rng(23);
  SceneMap scene;
  scene.vocabulary = {"a"};
  for (int i = 0; i < 200; ++i) {
    Surfel s = make_surfel(Vec3(rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(-5, 60)),
                           vec({0, 0}));
    s.scales = Vec2(rng.uniform(0.05, 1.0), rng.uniform(0.05, 1.0));
    scene.surfels.push_back(s);
  }
  std::vector<int> prev;
  for (int w : {64, 96, 128, 192}) {
    // fixed principal point and focal: growing width only widens the frustum
    const Camera cam =
        Camera::make(Mat3::Identity(), Vec3::Zero(), 100, 100, 32, 32, w, w, 0.5, 20.0 + w);
    const auto sel = frustum_select(scene, cam);
    CHECK(std::includes(sel.begin(), sel.end(), prev.begin(), prev.end()));
    prev = sel;
  }
}

TEST_CASE("cross attention: singleton and duplicate keys") {
  const int c_ins = 4, d = 3;
  AttentionWeights w = AttentionWeights::init(c_ins, d, 11);
  Rng rng(13);
  std::vector<InstanceQuery> queries;
  for (int q = 0; q < 3; ++q) {
    VecX f(c_ins);
    for (int i = 0; i < c_ins; ++i) f[i] = rng.normal();
    queries.push_back(make_query(Vec3::Zero(), f, Mat3::Identity()));
  }

  KeysValues kv;
  kv.keys = MatX(c_ins, 1);
  kv.values = MatX(c_ins, 1);
  for (int i = 0; i < c_ins; ++i) {
    kv.keys(i, 0) = rng.normal();
    kv.values(i, 0) = rng.normal();
  }
  const AttentionForward single = cross_attention_update(queries, kv, w);
  REQUIRE(single.refined_valid);
  const VecX expected = w.w_v.transpose() * kv.values.col(0);
  for (int q = 0; q < 3; ++q) {
    CHECK((single.refined.col(q) - expected).cwiseAbs().maxCoeff() < 1e-12);
  }

  // duplicating the key/value pair changes nothing
  KeysValues kv2;
  kv2.keys = MatX(c_ins, 2);
  kv2.values = MatX(c_ins, 2);
  kv2.keys.col(0) = kv.keys.col(0);
  kv2.keys.col(1) = kv.keys.col(0);
  kv2.values.col(0) = kv.values.col(0);
  kv2.values.col(1) = kv.values.col(0);
  const AttentionForward dup = cross_attention_update(queries, kv2, w);
  CHECK((dup.refined - single.refined).cwiseAbs().maxCoeff() < 1e-12);

  // empty visible set: no-op flag
  KeysValues empty;
  empty.keys = MatX(c_ins, 0);
  empty.values = MatX(c_ins, 0);
  CHECK_FALSE(cross_attention_update(queries, empty, w).refined_valid);
}

TEST_CASE("cross attention matches a straight-line dense oracle") {
  const int c_ins = 6, d = 4, n_q = 3, n_v = 5;
  AttentionWeights w = AttentionWeights::init(c_ins, d, 29);
  Rng rng(31);
  std::vector<InstanceQuery> queries;
  for (int q = 0; q < n_q; ++q) {
    VecX f(c_ins);
    for (int i = 0; i < c_ins; ++i) f[i] = rng.normal();
    queries.push_back(make_query(Vec3::Zero(), f, Mat3::Identity()));
  }
  KeysValues kv;
  kv.keys = MatX(c_ins, n_v);
  kv.values = MatX(c_ins, n_v);
  for (int i = 0; i < c_ins * n_v; ++i) {
    kv.keys.data()[i] = rng.normal();
    kv.values.data()[i] = rng.normal();
  }
  const AttentionForward fwd = cross_attention_update(queries, kv, w);
  REQUIRE(fwd.refined_valid);

  for (int i = 0; i < n_q; ++i) {
    // independent scalar-loop evaluation
    std::vector<double> e(n_v);
    double e_max = -1e300;
    for (int j = 0; j < n_v; ++j) {
      double dot = 0;
      for (int a = 0; a < d; ++a) {
        double qa = 0, ka = 0;
        for (int c = 0; c < c_ins; ++c) {
          qa += queries[i].feature[c] * w.w_q(c, a);
          ka += kv.keys(c, j) * w.w_k(c, a);
        }
        dot += qa * ka;
      }
      e[j] = dot / std::sqrt(static_cast<double>(d));
      e_max = std::max(e_max, e[j]);
    }
    double denom = 0;
    for (int j = 0; j < n_v; ++j) denom += std::exp(e[j] - e_max);
    for (int a = 0; a < d; ++a) {
      double out = 0;
      for (int j = 0; j < n_v; ++j) {
        double va = 0;
        for (int c = 0; c < c_ins; ++c) va += kv.values(c, j) * w.w_v(c, a);
        out += std::exp(e[j] - e_max) / denom * va;
      }
      CHECK(fwd.refined(a, i) == doctest::Approx(out).epsilon(1e-10));
    }
  }
}

TEST_CASE("positional encoder jacobian matches finite differences") {
  AttentionWeights w = AttentionWeights::init(8, 8, 77);
  const PosEncoder enc = PosEncoder::make(w);
  Rng rng(41);
  const Vec3 p(rng.normal(), rng.normal(), rng.normal());
  const MatX jac = enc.jacobian(p);
  const double h = 1e-6;
  for (int axis = 0; axis < 3; ++axis) {
    Vec3 pp = p, pm = p;
    pp[axis] += h;
    pm[axis] -= h;
    const VecX fd = (enc.encode(pp) - enc.encode(pm)) / (2 * h);
    CHECK((fd - jac.col(axis)).cwiseAbs().maxCoeff() < 1e-5);
  }
}

TEST_CASE("iom closed forms and identities") {
  const Mask3D a = {0, 1, 2, 3};
  const Mask3D b = {2, 3, 4, 5, 6, 7};
  const Mask3D empty;
  CHECK(iom(a, a) == 1.0);
  CHECK(iom(a, Mask3D{9, 10}) == 0.0);
  const Mask3D sub = {2, 3};
  CHECK(iom(sub, b) == 1.0);                      // containment
  CHECK(iom(b, sub) == doctest::Approx(2.0 / 6.0).epsilon(1e-12));
  // shared-intersection identity
  CHECK(iom(a, b) * a.size() == doctest::Approx(iom(b, a) * b.size()).epsilon(1e-12));
  CHECK_THROWS_AS(iom(empty, a), std::invalid_argument);
}

TEST_CASE("prune_useless keeps at least one query") {
  std::vector<InstanceQuery> queries(3);
  for (auto& q : queries) {
    q.feature = vec({0, 0});
    q.alive = true;
  }
  const std::vector<int64_t> matches = {0, 2, 0};
  auto events = prune_useless(queries, matches, 100, 0.05);
  CHECK(events.size() == 2);
  CHECK(queries[1].alive);
  CHECK_FALSE(queries[0].alive);
  CHECK_FALSE(queries[2].alive);

  // all below rate: the best-matched one survives
  std::vector<InstanceQuery> all_bad(3);
  for (auto& q : all_bad) {
    q.feature = vec({0, 0});
    q.alive = true;
  }
  const std::vector<int64_t> low = {1, 3, 2};
  events = prune_useless(all_bad, low, 1000, 0.05);
  CHECK(all_bad[1].alive);
  CHECK_FALSE(all_bad[0].alive);
  CHECK_FALSE(all_bad[2].alive);
}

TEST_CASE("prune_duplicates kills the smaller mask and is idempotent") {
  std::vector<InstanceQuery> queries(3);
  for (auto& q : queries) {
    q.feature = vec({0, 0});
    q.alive = true;
  }
  std::vector<Mask3D> masks = {
      {0, 1, 2, 3, 4, 5, 6, 7},  // big
      {0, 1, 2, 3},              // contained in big
      {20, 21, 22},              // disjoint
  };
  auto events = prune_duplicates(queries, masks, 0.8);
  REQUIRE(events.size() == 1);
  CHECK(events[0].query == 1);
  CHECK(queries[0].alive);
  CHECK_FALSE(queries[1].alive);
  CHECK(queries[2].alive);

  // idempotent for the same masks
  auto again = prune_duplicates(queries, masks, 0.8);
  CHECK(again.empty());
}

TEST_CASE("masks_from_argmax collects sorted index sets") {
  const std::vector<int> argmax = {1, 0, 1, 2, -1, 1};
  const auto masks = masks_from_argmax(argmax, 3);
  CHECK(masks[0] == Mask3D{1});
  CHECK(masks[1] == Mask3D{0, 2, 5});
  CHECK(masks[2] == Mask3D{3});
}
