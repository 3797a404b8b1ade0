#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "psimap/io.hpp"
#include "psimap/metrics.hpp"
#include "psimap/synthetic.hpp"
#include "psimap/trainer.hpp"

using namespace psimap;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  SyntheticScene syn;
  TrainState state;
  TrainConfig cfg;
};

Fixture make_fixture(uint64_t seed, int queries = 6) {
  SyntheticSpec spec;
  spec.image_w = 32;
  spec.image_h = 32;
  spec.n_train = 4;
  spec.n_heldout = 1;
  spec.cloud_points = 1200;
  spec.seed = 5;
  Fixture f;
  f.syn = make_synthetic_scene(spec);

  SogmmFitConfig scfg;
  scfg.min_points = 20;
  scfg.em_iters = 4;
  SogmmModel model = fit_sogmm(f.syn.cloud, scfg);

  SceneMap scene;
  scene.vocabulary = f.syn.vocabulary;
  scene.surfels = init_surfels(model, 4, static_cast<int>(f.syn.vocabulary.size()), 8, seed);
  init_queries(scene, queries, 8, seed);
  scene.attn = AttentionWeights::init(8, 8, seed);

  f.cfg.seed = seed;
  f.cfg.steps = 12;
  f.cfg.prune_start = 6;
  f.cfg.prune_interval = 4;
  f.state = TrainState::init(std::move(scene), std::move(model), f.cfg);
  return f;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("zero steps leave the state unchanged") {
  Fixture f = make_fixture(1);
  const SceneMap before = f.state.scene;
  TrainConfig cfg = f.cfg;
  cfg.steps = 0;
  const auto logs = train(f.state, f.syn.train_frames, cfg);
  CHECK(logs.empty());
  REQUIRE(f.state.scene.surfels.size() == before.surfels.size());
  for (size_t i = 0; i < before.surfels.size(); ++i) {
    CHECK(f.state.scene.surfels[i].center == before.surfels[i].center);
    CHECK(f.state.scene.surfels[i].opacity == before.surfels[i].opacity);
  }
}

TEST_CASE("core invariants hold after every step") {
  Fixture f = make_fixture(2);
  TrainConfig cfg = f.cfg;
  cfg.steps = 6;
  bool all_valid = true;
  train(f.state, f.syn.train_frames, cfg, [&](const TrainState& st, const StepLog&) {
    all_valid = all_valid && validate_scene(st.scene).empty();
  });
  CHECK(all_valid);
  CHECK(validate_scene(f.state.scene).empty());
}

TEST_CASE("fixed seed reproduces byte-identical checkpoints and logs") {
  const fs::path tmp = fs::temp_directory_path() / "psimap_trainer_det";
  fs::create_directories(tmp);

  auto run = [&](const std::string& tag) {
    Fixture f = make_fixture(7);
    TrainConfig cfg = f.cfg;
    cfg.steps = 10;
    std::ofstream log_out(tmp / (tag + ".jsonl"));
    const auto logs = train(f.state, f.syn.train_frames, cfg);
    for (const auto& l : logs) {
      char buf[256];
      std::snprintf(buf, sizeof(buf), "%lld %.17g %.17g %.17g %d\n",
                    static_cast<long long>(l.step), l.report.total, l.report.rgb, l.report.geo,
                    l.alive_queries);
      log_out << buf;
    }
    log_out.close();
    save_checkpoint((tmp / (tag + ".psimap")).string(), f.state.scene);
  };
  run("a");
  run("b");
  CHECK(slurp((tmp / "a.psimap").string()) == slurp((tmp / "b.psimap").string()));
  CHECK(slurp((tmp / "a.jsonl").string()) == slurp((tmp / "b.jsonl").string()));
  fs::remove_all(tmp);
}

TEST_CASE("training reduces the loss on a short run") {
  Fixture f = make_fixture(3);
  TrainConfig cfg = f.cfg;
  cfg.steps = 40;
  cfg.prune_start = 1000;  // no pruning here
  const auto logs = train(f.state, f.syn.train_frames, cfg);
  REQUIRE(logs.size() == 40);
  // compare same-frame losses across epochs (soft but monotone-ish)
  double first_epoch = 0, last_epoch = 0;
  const int n = 4;
  for (int i = 0; i < n; ++i) {
    first_epoch += logs[i].report.total;
    last_epoch += logs[logs.size() - n + i].report.total;
  }
  CHECK(last_epoch < first_epoch);
}

TEST_CASE("duplicate pruning fires with oversubscribed queries") {
  Fixture f = make_fixture(4, 10);  // far more queries than instances
  TrainConfig cfg = f.cfg;
  cfg.steps = 16;
  cfg.prune_start = 4;
  cfg.prune_interval = 4;
  cfg.min_assign_rate = 0.05;
  int prune_events = 0;
  const auto logs = train(f.state, f.syn.train_frames, cfg);
  for (const auto& l : logs) prune_events += static_cast<int>(l.prunes.size());
  CHECK(prune_events > 0);
  CHECK(f.state.scene.alive_query_count() >= 1);
  // dead queries were compacted away at epoch boundaries
  CHECK(f.state.scene.queries.size() ==
        static_cast<size_t>(f.state.scene.alive_query_count()));
}

TEST_CASE("non-finite gradients abort with the parameter class named") {
  Fixture f = make_fixture(11);
  // poison one semantic feature so the blended softmax overflows
  f.state.scene.surfels[0].f_sem[0] = 1e308;
  TrainConfig cfg = f.cfg;
  try {
    train_step(f.state, f.syn.train_frames[0], cfg, 0);
    // if the forward survived the overflow, the step must stay finite
    CHECK(validate_scene(f.state.scene).empty());
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("parameter class") != std::string::npos);
  }
}

TEST_CASE("moment state tracks query compaction") {
  Fixture f = make_fixture(9, 8);
  TrainConfig cfg = f.cfg;
  cfg.steps = 12;
  cfg.prune_start = 2;
  cfg.prune_interval = 2;
  train(f.state, f.syn.train_frames, cfg);
  CHECK(f.state.adam.m.query_mean.size() == f.state.scene.queries.size());
  CHECK(f.state.adam.v.query_cov.size() == f.state.scene.queries.size());
  CHECK(static_cast<size_t>(f.state.adam.m.query_feature.cols()) ==
        f.state.scene.queries.size());
}
