#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "psimap/pipeline.hpp"

using namespace psimap;

namespace {

// the canonical gradient-check instance: 20 surfels, 3 queries, 16x16
struct GradScene {
  SceneMap scene;
  SogmmModel model;
  FrameBundle frame;
  PipelineConfig cfg;
};

GradScene make_instance(uint64_t seed, int n_surfels = 20, int n_queries = 3, int img = 16) {
  GradScene g;
  Rng rng(seed);
  const int c_sem = 4, c_ins = 8;

  g.frame.camera = Camera::make(Mat3::Identity(), Vec3::Zero(), 20.0, 20.0, img / 2.0 - 0.5,
                                img / 2.0 - 0.5, img, img, 0.1, 100.0);

  g.scene.vocabulary = {"c0", "c1", "c2", "c3"};
  for (int i = 0; i < n_surfels; ++i) {
    Surfel s;
    s.center = Vec3(rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), rng.uniform(1.6, 3.2));
    // random but not edge-on orientation
    s.rotation = (Vec4(1, 0, 0, 0) + 0.3 * Vec4(rng.normal(), rng.normal(), rng.normal(),
                                                rng.normal()))
                     .normalized();
    s.scales = Vec2(rng.uniform(0.12, 0.3), rng.uniform(0.12, 0.3));
    s.opacity = rng.uniform(0.25, 0.75);
    s.color = Vec3(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8));
    s.f_sem = VecX(c_sem);
    for (int c = 0; c < c_sem; ++c) s.f_sem[c] = 0.5 * rng.normal();
    s.f_ins = VecX(c_ins);
    for (int c = 0; c < c_ins; ++c) s.f_ins[c] = 0.5 * rng.normal();
    g.scene.surfels.push_back(std::move(s));
  }
  for (int q = 0; q < n_queries; ++q) {
    InstanceQuery iq;
    iq.mean = Vec3(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(1.8, 3.0));
    Mat3 a;
    for (int i = 0; i < 9; ++i) a.data()[i] = 0.3 * rng.normal();
    iq.cov = a * a.transpose() + 0.4 * Mat3::Identity();
    iq.feature = VecX(c_ins);
    for (int c = 0; c < c_ins; ++c) iq.feature[c] = 0.5 * rng.normal();
    iq.class_votes.assign(4, 0);
    g.scene.queries.push_back(std::move(iq));
  }
  g.scene.attn = AttentionWeights::init(c_ins, c_ins, seed ^ 0xbeef);

  // frame supervision: random rgb, classes, two instance masks
  g.frame.rgb = Image(img, img, 3);
  for (auto& v : g.frame.rgb.data) v = rng.uniform();
  g.frame.sem_gt = IntPlane(img, img, 1);
  for (auto& v : g.frame.sem_gt.data) {
    v = static_cast<int32_t>(rng.uniform_int(5)) - 1;  // includes ignore
  }
  for (int k = 0; k < 2; ++k) {
    Image mask(img, img, 1);
    for (auto& v : mask.data) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
    g.frame.instance_gt.push_back(std::move(mask));
  }

  // two-component geometric prior
  for (int k = 0; k < 2; ++k) {
    SogmmComponent comp;
    comp.weight = 0.5;
    comp.mean = Vec3(k == 0 ? -0.4 : 0.4, 0, 2.3);
    comp.cov = Vec3(0.5, 0.4, 0.003).asDiagonal();
    eigen_frame(comp);
    g.model.components.push_back(comp);
  }

  g.cfg = PipelineConfig::smooth();
  return g;
}

}  // namespace

TEST_CASE("zero-loss configuration has zero gradients") {
  GradScene g = make_instance(100, 8, 2, 12);
  // geometry exactly on the first component plane with aligned normals
  for (auto& s : g.scene.surfels) {
    const SogmmComponent& comp = g.model.components[nearest_component(g.model, s.center)];
    s.center -= comp.normal * (s.center - comp.mean).dot(comp.normal);
    Mat3 r;
    r.col(0) = comp.eigenvectors.col(0);
    r.col(1) = comp.eigenvectors.col(1);
    r.col(2) = comp.normal;
    s.rotation = quat_from_rotation(r);
    s.scales = Vec2(0.2, 0.2);  // iso term zero
  }
  // photometric target equals the render; feature losses switched off
  g.cfg.weights.l_ins = 0;
  g.cfg.weights.l_sem = 0;
  const PipelineForward fwd = pipeline_forward(g.scene, &g.model, g.frame, g.cfg, false);
  g.frame.rgb = fwd.targets.color;

  const BackwardResult bw = pipeline_backward(g.scene, &g.model, g.frame, g.cfg);
  CHECK(bw.report.total == doctest::Approx(0.0).epsilon(1e-12));
  for (const auto& v : bw.grads.center) CHECK(v.cwiseAbs().maxCoeff() < 1e-10);
  for (const auto& v : bw.grads.rotation) CHECK(v.cwiseAbs().maxCoeff() < 1e-10);
  for (const auto& v : bw.grads.scales) CHECK(v.cwiseAbs().maxCoeff() < 1e-10);
  for (double v : bw.grads.opacity) CHECK(std::abs(v) < 1e-10);
  for (const auto& v : bw.grads.color) CHECK(v.cwiseAbs().maxCoeff() < 1e-10);
  CHECK(bw.grads.f_sem.cwiseAbs().maxCoeff() < 1e-10);
  CHECK(bw.grads.f_ins.cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("single-surfel single-pixel L1 color derivative") {
  SceneMap scene;
  scene.vocabulary = {"a"};
  Surfel s;
  s.center = Vec3(0, 0, 2);
  s.rotation = Vec4(1, 0, 0, 0);
  s.scales = Vec2(0.5, 0.5);
  s.opacity = 1.0;
  s.color = Vec3(0.7, 0.2, 0.5);
  s.f_sem = VecX();
  s.f_ins = VecX();
  scene.surfels.push_back(s);

  FrameBundle frame;
  frame.camera = Camera::make(Mat3::Identity(), Vec3::Zero(), 10, 10, 0.5, 0.5, 1, 1, 0.1, 10);
  frame.rgb = Image(1, 1, 3);
  frame.rgb.at(0, 0, 0) = 0.2;  // c > gt
  frame.rgb.at(0, 0, 1) = 0.9;  // c < gt
  frame.rgb.at(0, 0, 2) = 0.1;  // c > gt
  frame.sem_gt = IntPlane(1, 1, 1, -1);

  PipelineConfig cfg = PipelineConfig::smooth();
  cfg.weights = LossWeights{};
  cfg.weights.lambda_s = 0;  // pure L1
  cfg.weights.l_geo = 0;
  cfg.weights.l_iso = 0;

  const BackwardResult bw = pipeline_backward(scene, nullptr, frame, cfg);
  CHECK(bw.grads.color[0][0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(bw.grads.color[0][1] == doctest::Approx(-1.0 / 3.0).epsilon(1e-12));
  CHECK(bw.grads.color[0][2] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("finite differences confirm the full backward on the canonical instance") {
  GradScene g = make_instance(7);
  const FiniteDiffReport report =
      finite_diff_check(g.scene, &g.model, g.frame, g.cfg, 1e-5, 200, 77);
  CHECK(report.coords_checked >= 200);
  // every parameter class must be covered
  for (const char* cls : {"position", "rotation", "scale", "opacity", "color",
                          "semantic-feature", "instance-feature", "query-feature", "query-mean",
                          "query-covariance", "attention-wq", "attention-wk", "attention-wv"}) {
    INFO(cls);
    CHECK(report.per_class_max.count(cls) == 1);
  }
  INFO("worst: class=" << param_class_name(report.worst.cls) << " entity=" << report.worst.entity
                       << " comp=" << report.worst.comp << " analytic=" << report.worst_analytic
                       << " numeric=" << report.worst_numeric);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("top-k backward differentiates the literal truncated formula") {
  GradScene g = make_instance(17, 12, 2, 12);
  g.cfg.raster.blending = Blending::TopK;
  g.cfg.raster.top_k = 4;  // well below the stack depth
  const FiniteDiffReport report =
      finite_diff_check(g.scene, &g.model, g.frame, g.cfg, 1e-5, 150, 99);
  INFO("worst: class=" << param_class_name(report.worst.cls) << " analytic="
                       << report.worst_analytic << " numeric=" << report.worst_numeric);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("backward is bitwise deterministic across calls") {
  GradScene g = make_instance(23);
  const BackwardResult a = pipeline_backward(g.scene, &g.model, g.frame, g.cfg);
  const BackwardResult b = pipeline_backward(g.scene, &g.model, g.frame, g.cfg);
  for (size_t i = 0; i < a.grads.center.size(); ++i) {
    CHECK(a.grads.center[i] == b.grads.center[i]);
    CHECK(a.grads.rotation[i] == b.grads.rotation[i]);
    CHECK(a.grads.opacity[i] == b.grads.opacity[i]);
  }
  CHECK(a.grads.w_q == b.grads.w_q);
  CHECK(a.grads.query_feature == b.grads.query_feature);
}

TEST_CASE("frames with no instance masks still backpropagate") {
  GradScene g = make_instance(31, 10, 2, 12);
  g.frame.instance_gt.clear();
  const BackwardResult bw = pipeline_backward(g.scene, &g.model, g.frame, g.cfg);
  CHECK_FALSE(bw.grads.find_non_finite().has_value());
  CHECK(bw.report.total >= 0.0);
  const FiniteDiffReport report =
      finite_diff_check(g.scene, &g.model, g.frame, g.cfg, 1e-5, 60, 5);
  CHECK(report.max_rel_err < 1e-4);
}
