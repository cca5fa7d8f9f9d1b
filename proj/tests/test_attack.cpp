#include <doctest.h>

#include <cmath>

#include "featadv/attack.hpp"
#include "featadv/errors.hpp"
#include "featadv/tensor_io.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace featadv;
using nlohmann::json;

namespace {

ModelSuite& suite() {
  static ModelSuite s = ModelSuite::load(testing::tiny_suite_dir());
  return s;
}

ModelSuite& suite64() {
  static ModelSuite s = ModelSuite::load(testing::tiny_suite_dir(), torch::kFloat64);
  return s;
}

AttackConfig small(AttackMode mode, json extra = json::object()) {
  json j = {{"mode", mode_name(mode)}, {"steps", 3}, {"batch_size", 2}, {"eval_sources", 6}, {"target_class", 2}};
  j.update(extra);
  return AttackConfig::from_json(j);
}

std::string field_of(const json& j) {
  try {
    AttackConfig::from_json(j);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "<none>";
}

void check_same(const torch::Tensor& a, const torch::Tensor& b) {
  CHECK(a.defined() == b.defined());
  if (a.defined() && b.defined()) CHECK(torch::equal(a, b));
}

}  // namespace

TEST_CASE("config defaults per mode") {
  auto patch = AttackConfig::from_json({{"mode", "patch"}});
  CHECK(patch.area_fraction == doctest::Approx(1.0 / 16.0));
  CHECK(patch.transforms.preset == TransformPreset::kPatchFull);
  CHECK(patch.source.kind == SourceKind::kDatasetAll);
  auto region = AttackConfig::from_json({{"mode", "region"}});
  CHECK(region.area_fraction == doctest::Approx(1.0 / 8.0));
  CHECK(region.transforms.preset == TransformPreset::kRegionLight);
  CHECK(region.source.generated());
  CHECK(AttackConfig::from_json({{"mode", "channel"}}).area_fraction == doctest::Approx(0.25));
  CHECK(AttackConfig::from_json({{"mode", "generalized_patch"}}).source.kind == SourceKind::kDatasetAll);
}

TEST_CASE("config errors name the offending field") {
  CHECK(field_of({{"mode", "sideways"}}) == "mode");
  CHECK(field_of({{"target_class", 1}}) == "mode");
  CHECK(field_of({{"mode", "patch"}, {"bogus", 1}}) == "bogus");
  CHECK(field_of({{"mode", "patch"}, {"weights", {{"x", 1}}}}) == "weights.x");
  CHECK(field_of({{"mode", "patch"}, {"weights", {{"tv", -1}}}}) == "weights.tv");
  CHECK(field_of({{"mode", "patch"}, {"target_class", 10}}) == "target_class");
  CHECK(field_of({{"mode", "patch"}, {"steps", 0}}) == "steps");
  CHECK(field_of({{"mode", "patch"}, {"seed", -3}}) == "seed");
  CHECK(field_of({{"mode", "patch"}, {"source", {{"kind", "moon"}}}}) == "source.kind");
  CHECK(field_of({{"mode", "region"}, {"source", {{"kind", "dataset_all"}}}}) == "source.kind");
  CHECK(field_of({{"mode", "region"}, {"ablation", {{"use_generator", false}}}}) == "ablation.use_generator");
  CHECK(field_of({{"mode", "region"}, {"layer", "input"}}) == "layer");
  CHECK(field_of({{"mode", "patch"}, {"transforms", {{"preset", "wobble"}}}}) == "transforms.preset");
  CHECK(field_of({{"mode", "patch"}, {"victims", json::array()}}) == "victims");
  CHECK(field_of({{"mode", "patch"}, {"source", {{"kind", "dataset_class"}}}}) == "source.class");
  CHECK_THROWS_AS(AttackConfig::from_json(json::array()), ConfigError);
}

TEST_CASE("config hash is canonical") {
  auto a = AttackConfig::from_json(json::parse(R"({"mode":"patch","seed":4,"steps":10})"));
  auto b = AttackConfig::from_json(json::parse(R"({"steps":10,"seed":4,"mode":"patch","target_class":0})"));
  CHECK(a.hash() == b.hash());
  CHECK(a.hash().size() == 64);
  auto c = AttackConfig::from_json(json::parse(R"({"mode":"patch","seed":5,"steps":10})"));
  CHECK(a.hash() != c.hash());
  CHECK(AttackConfig::from_json(a.to_json()).to_json() == a.to_json());
}

TEST_CASE("sampler draws do not depend on the perturbation or optimizer settings") {
  auto a = small(AttackMode::kPatch);
  auto b = small(AttackMode::kPatch, {{"step_size", 0.5}, {"weights", {{"tv", 3.0}}}, {"seed", 77}});
  AttackSampler sa(a, suite().generator), sb(b, suite().generator);
  for (int i = 0; i < 3; ++i) {
    auto ba = sa.next(4), bb = sb.next(4);
    CHECK(torch::equal(ba.sources.images, bb.sources.images));
    for (size_t k = 0; k < 4; ++k) {
      CHECK(ba.locations[k].u == bb.locations[k].u);
      CHECK(ba.transforms[k].to_json() == bb.transforms[k].to_json());
    }
  }
  CHECK(sa.digest() == sb.digest());
  AttackSampler held(a, suite().generator, Split::kHeldout);
  AttackSampler fresh(a, suite().generator);
  CHECK_FALSE(torch::equal(held.next(4).sources.images, fresh.next(4).sources.images));
}

TEST_CASE("all-class sources exclude the target") {
  auto c = small(AttackMode::kPatch, {{"target_class", 6}});
  auto s = draw_sources(c.source, 6, 200, suite().generator, Split::kTraining);
  CHECK((s.labels != 6).all().item<bool>());
  auto r = small(AttackMode::kRegion, {{"target_class", 6}});
  auto g = draw_sources(r.source, 6, 200, suite().generator, Split::kTraining);
  CHECK((g.labels != 6).all().item<bool>());
  CHECK(g.latents.defined());
}

TEST_CASE("location resolution") {
  LocationSample s{0.0, 0.0, std::nullopt};
  CHECK(s.resolve(32, 32, 8, 8, 0) == Location{0, 0});
  s.u = 0.999999;
  s.v = 0.999999;
  CHECK(s.resolve(32, 32, 8, 8, 0) == Location{24, 24});
  CHECK(s.resolve(32, 32, 8, 8, 2) == Location{22, 22});
  LocationSample f{0, 0, Location{30, 1}};
  CHECK_THROWS_AS(f.resolve(32, 32, 8, 8, 0), InputError);
}

TEST_CASE("zero region perturbation reproduces the generated image") {
  auto config = small(AttackMode::kRegion, {{"transforms", {{"preset", "identity"}}}});
  auto models = AttackModels::resolve(config, suite());
  auto p = init_perturbation(config, models);
  Minibatch batch;
  batch.sources.latents = p.base_latent;
  batch.sources.labels = torch::tensor({p.base_class});
  batch.sources.images = models.generator->forward(p.base_latent, models.generator->one_hot(batch.sources.labels));
  batch.sources.generated = true;
  batch.transforms = {SampledTransform{}};
  batch.locations = {LocationSample{}};
  auto out = compose_adversarial(config, p, models, batch);
  CHECK(testing::max_abs_diff(out, batch.sources.images) <= 1e-5);
}

TEST_CASE("loss bookkeeping") {
  auto config = small(AttackMode::kPatch, {{"weights", {{"tv", 0}, {"realism", 0}, {"entropy", 0}, {"anti_target", 0}}}});
  auto models = AttackModels::resolve(config, suite());
  auto p = init_perturbation(config, models);
  AttackSampler sampler(config, models.generator);
  auto batch = sampler.next(3);
  auto loss = attack_step_loss(config, p, models, batch);
  CHECK(loss.total.item<double>() == loss.xent.item<double>());
  auto images = compose_adversarial(config, p, models, batch);
  auto expected = torch::nn::functional::cross_entropy(models.victims[0]->forward(images),
                                                       torch::full({3}, config.target_class, torch::kInt64));
  CHECK(loss.xent.item<double>() == doctest::Approx(expected.item<double>()).epsilon(1e-6));

  auto full = small(AttackMode::kPatch);
  auto lf = attack_step_loss(full, p, models, batch);
  auto row = lf.row();
  CHECK(std::abs(row[1] + row[2] + row[3] + row[4] + row[5] - row[0]) < 1e-6);
}

TEST_CASE("a uniform victim gives crossentropy ln K") {
  auto config = small(AttackMode::kPatch, {{"weights", {{"tv", 0}, {"realism", 0}, {"entropy", 0}, {"anti_target", 0}}}});
  auto models = AttackModels::resolve(config, suite());
  Classifier flat(testing::tiny_classifier("flat"));
  {
    torch::NoGradGuard guard;
    for (auto& p : flat->parameters()) p.zero_();
  }
  flat->eval();
  models.victims = {flat};
  auto p = init_perturbation(config, models);
  AttackSampler sampler(config, models.generator);
  auto loss = attack_step_loss(config, p, models, sampler.next(2));
  CHECK(loss.xent.item<double>() == doctest::Approx(std::log(10.0)).epsilon(1e-6));
}

TEST_CASE("every parameter group receives gradient") {
  const std::vector<std::pair<AttackMode, json>> cases{
      {AttackMode::kPatch, json::object()},
      {AttackMode::kPatch, {{"ablation", {{"use_generator", false}}}}},
      {AttackMode::kRegion, json::object()},
      {AttackMode::kChannel, json::object()},
      {AttackMode::kGeneralizedPatch, {{"location", {{"margin", 0}}}}},
  };
  for (const auto& [mode, extra] : cases) {
    CAPTURE(mode_name(mode));
    auto config = small(mode, extra);
    auto models = AttackModels::resolve(config, suite());
    auto p = init_perturbation(config, models);
    AttackSampler sampler(config, models.generator);
    auto out = compose_adversarial(config, p, models, sampler.next(2));
    auto params = p.parameters();
    REQUIRE_FALSE(params.empty());
    auto grads = torch::autograd::grad({out.mean()}, params, {}, false, false, true);
    int nonzero = 0;
    for (const auto& g : grads) nonzero += g.defined() && g.abs().sum().item<double>() > 0.0;
    // The input-latent delta may be blocked when the base latent is untouched.
    CHECK(nonzero >= 1);
    if (mode == AttackMode::kPatch && config.ablation.use_generator) {
      CHECK(grads[0].abs().sum().item<double>() > 0.0);
      CHECK(grads[1].abs().sum().item<double>() > 0.0);
    }
  }
}

TEST_CASE("composed attack loss gradient agrees with central differences") {
  auto config = small(AttackMode::kPatch, {{"ablation", {{"use_generator", false}}}, {"weights", {{"tv", 0.5}}}});
  auto models = AttackModels::resolve(config, suite64());
  auto p = init_perturbation(config, models);
  AttackSampler sampler(config, models.generator);
  auto batch = sampler.next(2);
  auto f = [&](const torch::Tensor& logits) {
    auto q = p;
    q.pixel_logits = logits;
    return attack_step_loss(config, q, models, batch).total;
  };
  CHECK(oracle::worst_fd_error(f, p.pixel_logits, 16, 21) < 1e-3);

  auto gen_config = small(AttackMode::kPatch, {{"weights", {{"tv", 0.5}}}});
  auto gp = init_perturbation(gen_config, models);
  auto g = [&](const torch::Tensor& z) {
    auto q = gp;
    q.patch_latent = z;
    return attack_step_loss(gen_config, q, models, batch).total;
  };
  CHECK(oracle::worst_fd_error(g, gp.patch_latent, 16, 22) < 1e-3);
}

TEST_CASE("zero step size leaves the initialization untouched") {
  for (auto mode : {AttackMode::kPatch, AttackMode::kRegion, AttackMode::kChannel}) {
    auto config = small(mode, {{"step_size", 0.0}});
    auto models = AttackModels::resolve(config, suite());
    auto initial = make_artifact(config, init_perturbation(config, models), models);
    auto trained = run_attack(config, models, {.skip_metrics = true});
    check_same(trained.patch, initial.patch);
    check_same(trained.insertion, initial.insertion);
    CHECK(trained.loss_curve.size() == 3);
  }
}

TEST_CASE("attacks are deterministic for a fixed config") {
  for (auto mode : {AttackMode::kPatch, AttackMode::kRegion, AttackMode::kGeneralizedPatch, AttackMode::kChannel}) {
    CAPTURE(mode_name(mode));
    auto config = small(mode);
    auto a = run_attack(config, suite());
    auto b = run_attack(config, suite());
    check_same(a.patch, b.patch);
    check_same(a.mask, b.mask);
    check_same(a.insertion, b.insertion);
    check_same(a.latent_delta, b.latent_delta);
    CHECK(a.mean_target_confidence == b.mean_target_confidence);
    CHECK(a.training == b.training);
    CHECK(a.patch.min().item<double>() >= 0.0);
    CHECK(a.patch.max().item<double>() <= 1.0);
  }
}

TEST_CASE("latent delta respects its bound") {
  auto config = small(AttackMode::kRegion, {{"latent_epsilon", 0.01}, {"step_size", 0.5}});
  auto a = run_attack(config, suite(), {.skip_metrics = true});
  REQUIRE(a.latent_delta.defined());
  CHECK(a.latent_delta.abs().max().item<double>() <= 0.01 + 1e-7);
}

TEST_CASE("artifact save and load round trip") {
  testing::TempDir dir;
  for (auto mode : {AttackMode::kPatch, AttackMode::kGeneralizedPatch}) {
    auto a = run_attack(small(mode), suite());
    const auto path = dir / mode_name(mode);
    a.save(path);
    CHECK(std::filesystem::exists(path / "patch.png"));
    CHECK(std::filesystem::exists(path / "loss_curve.csv"));
    auto b = AdversarialArtifact::load(path);
    check_same(a.patch, b.patch);
    check_same(a.mask, b.mask);
    check_same(a.insertion, b.insertion);
    CHECK(a.summary() == b.summary());
    CHECK(a.loss_curve.size() == b.loss_curve.size());
    CHECK(b.loss_curve.front().size() == 7);
  }
}

TEST_CASE("non-finite losses end in AttackDiverged carrying the last good state") {
  auto config = small(AttackMode::kPatch);
  auto models = AttackModels::resolve(config, suite());
  Classifier broken(testing::tiny_classifier("broken"));
  {
    torch::NoGradGuard guard;
    for (auto& p : broken->parameters()) p.fill_(std::nan(""));
  }
  broken->eval();
  models.victims = {broken};
  try {
    run_attack(config, models);
    FAIL("expected AttackDiverged");
  } catch (const AttackDiverged& e) {
    CHECK(std::string(e.what()).find("non-finite") != std::string::npos);
    CHECK(e.last_good().patch.defined());
  }
}

TEST_CASE("pinned model hashes are enforced") {
  auto config = small(AttackMode::kPatch, {{"model_hashes", {{"victim", std::string(64, 'a')}}}});
  try {
    AttackModels::resolve(config, suite());
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "model_hashes.victim");
  }
  auto ok = small(AttackMode::kPatch, {{"model_hashes", {{"victim", suite().hashes.at("victim")}}}});
  CHECK_NOTHROW(AttackModels::resolve(ok, suite()));
}

TEST_CASE("shipped example configs validate") {
  int checked = 0;
  for (const auto& e : std::filesystem::directory_iterator(std::filesystem::path(FEATADV_SOURCE_DIR) / "configs")) {
    if (e.path().extension() != ".json" || e.path().filename() == "acceptance.json") continue;
    CAPTURE(e.path().string());
    auto j = json::parse(read_file(e.path()));
    CHECK_NOTHROW(AttackConfig::from_json(j));
    ++checked;
  }
  CHECK(checked >= 4);
}
