#include <doctest.h>

#include "featadv/dataset.hpp"
#include "featadv/errors.hpp"
#include "featadv/models.hpp"
#include "featadv/tensor_io.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace featadv;
using torch::indexing::Slice;

namespace {

ModelSuite& suite() {
  static ModelSuite s = ModelSuite::load(testing::tiny_suite_dir());
  return s;
}

ModelSuite& suite64() {
  static ModelSuite s = ModelSuite::load(testing::tiny_suite_dir(), torch::kFloat64);
  return s;
}

}  // namespace

TEST_CASE("generation is deterministic and in range") {
  auto& g = suite().generator;
  auto z = torch::randn({g->input_dim()});
  auto a = generate(g, z, 3).data();
  auto b = generate(g, z, 3).data();
  CHECK(torch::equal(a, b));
  CHECK(a.min().item<double>() >= 0.0);
  CHECK(a.max().item<double>() <= 1.0);
  CHECK(a.sizes() == torch::IntArrayRef({3, 32, 32}));
  CHECK_THROWS_AS(generate(g, torch::randn({3}), 0), ConfigError);
  CHECK_THROWS_AS(generate(g, z, 10), ConfigError);
}

TEST_CASE("suffix consistency for every cataloged layer") {
  auto& g = suite().generator;
  auto z = torch::randn({2, g->input_dim()});
  auto y = g->one_hot(torch::tensor({1, 7}));
  auto full = g->forward(z, y);
  for (const auto& info : g->layer_catalog()) {
    CAPTURE(info.id);
    auto act = g->activations_at(z, y, info.id);
    CHECK(act.values.size(1) == info.channels);
    CHECK(act.values.size(2) == info.height);
    CHECK(act.values.size(3) == info.width);
    if (info.rectified) CHECK(act.values.min().item<double>() >= 0.0);
    CHECK(testing::max_abs_diff(g->forward_from(act, y), full) <= 1e-5);
  }
  CHECK_THROWS_AS(g->layer("block9"), ConfigError);
}

TEST_CASE("a replaced latent column changes a localized image region") {
  auto& g = suite().generator;
  torch::manual_seed(4);
  auto z = torch::randn({1, g->input_dim()});
  auto y = g->one_hot(torch::tensor({2}));
  auto act = g->activations_at(z, y, "block1");
  auto base = g->forward_from(act, y);
  const auto h = act.values.size(2);
  const int64_t r = h / 2, c = h / 2;

  // Receptive field by brute force: union of pixels touched by single-unit
  // perturbations at the chosen position.
  auto field = torch::zeros({32, 32}, torch::kBool);
  for (int64_t ch = 0; ch < act.values.size(1); ++ch) {
    auto probe = act;
    probe.values = act.values.clone();
    probe.values.index_put_({0, ch, r, c}, probe.values.index({0, ch, r, c}) + 1.0);
    field |= (g->forward_from(probe, y) - base).abs().sum({0, 1}) > 1e-7;
  }
  auto rows = field.any(1).nonzero(), cols = field.any(0).nonzero();
  REQUIRE(rows.size(0) > 0);
  auto box = torch::zeros({32, 32}, torch::kBool);
  box.index_put_({Slice(rows.min().item<int64_t>(), rows.max().item<int64_t>() + 1),
                  Slice(cols.min().item<int64_t>(), cols.max().item<int64_t>() + 1)},
                 true);

  auto perturbed = act;
  perturbed.values = act.values.clone();
  perturbed.values.index_put_({0, Slice(), r, c}, torch::rand({act.values.size(1)}) * 2.0);
  auto energy = (g->forward_from(perturbed, y) - base).pow(2).sum({0, 1});
  const double inside = energy.masked_select(box).sum().item<double>();
  const double total = energy.sum().item<double>();
  REQUIRE(total > 0.0);
  CHECK(inside / total > 0.6);
  CHECK(box.sum().item<int64_t>() < 32 * 32);
}

TEST_CASE("classify returns a probability simplex") {
  auto& c = suite().classifier("victim");
  auto images = torch::rand({4, 3, 32, 32});
  auto p = classify(c, images);
  CHECK(p.sizes() == torch::IntArrayRef({4, 10}));
  CHECK(p.min().item<double>() >= 0.0);
  CHECK(testing::max_abs_diff(p.sum(1), torch::ones({4})) < 1e-5);
  CHECK(torch::equal(p, classify(c, images)));
  CHECK(classify(c, torch::rand({3, 48, 48})).sizes() == torch::IntArrayRef({1, 10}));
  auto bad = images.clone();
  bad[0][0][0][0] = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(classify(c, bad), InputError);
}

TEST_CASE("discriminator is deterministic and differentiable") {
  auto& d = suite64().discriminator;
  auto x = torch::rand({2, 3, 32, 32}, torch::kFloat64);
  CHECK(torch::equal(d->discriminate(x), d->discriminate(x)));
  CHECK_THROWS_AS(d->discriminate(torch::rand({1, 3, 16, 16}, torch::kFloat64)), InputError);
  auto f = [&](const torch::Tensor& t) { return d->discriminate(t).sum(); };
  CHECK(oracle::worst_fd_error(f, x, 16, 8) < 1e-3);
}

TEST_CASE("generator output is differentiable in z") {
  auto& g = suite64().generator;
  auto y = g->one_hot(torch::tensor({5})).to(torch::kFloat64);
  auto z = torch::randn({1, g->input_dim()}, torch::kFloat64);
  auto weights = torch::rand({1, 3, 32, 32}, torch::kFloat64);
  auto f = [&](const torch::Tensor& t) { return (g->forward(t, y) * weights).sum(); };
  CHECK(oracle::worst_fd_error(f, z, 16, 9) < 1e-3);
}

TEST_CASE("weights round trip and hash pinning") {
  testing::TempDir dir;
  auto options = testing::tiny_classifier("rt");
  Classifier a(options);
  auto manifest = save_weights(dir / "m", *a, "classifier", options.to_json(), {{"note", 1}});
  CHECK(manifest.content_hash.size() == 64);
  Classifier b(options);
  auto loaded = load_weights(dir / "m", *b);
  CHECK(loaded.content_hash == manifest.content_hash);
  CHECK(loaded.metrics["note"] == 1);
  auto pa = a->parameters(), pb = b->parameters();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) CHECK(torch::equal(pa[i], pb[i]));
  CHECK_THROWS_AS(load_weights(dir / "m", *b, std::string(64, '0')), ConfigError);

  // Corrupting a tensor file breaks the content hash.
  for (const auto& e : std::filesystem::directory_iterator(dir / "m")) {
    if (e.path().extension() == ".fvt") {
      auto t = read_tensor(e.path());
      write_tensor(e.path(), t + 1.0);
      break;
    }
  }
  CHECK_THROWS_AS(load_weights(dir / "m", *b), ConfigError);
}

TEST_CASE("suite loading") {
  auto& s = suite();
  CHECK(s.classifiers.size() == kClassifierRoles.size());
  CHECK(s.hashes.count("generator") == 1);
  CHECK_THROWS_AS(s.classifier("nobody"), ConfigError);
  for (auto& p : s.generator->parameters()) CHECK_FALSE(p.requires_grad());
  testing::TempDir empty;
  CHECK_THROWS_AS(ModelSuite::load(empty.path()), ConfigError);
}

TEST_CASE("classifier presets and head pooling") {
  for (const auto* arch : {"convnet-a", "convnet-b", "convnet-c", "convnet-d", "convnet-e"}) {
    Classifier c(ClassifierOptions::preset(arch));
    CHECK(c->forward(torch::rand({2, 3, 32, 32})).sizes() == torch::IntArrayRef({2, 10}));
    CHECK_FALSE(c->last_block_parameters().empty());
  }
  CHECK_THROWS_AS(ClassifierOptions::preset("convnet-z"), ConfigError);
  auto legacy = ClassifierOptions::preset("convnet-a").to_json();
  legacy.erase("max_head");
  CHECK_FALSE(ClassifierOptions::from_json(legacy).max_head);
}

TEST_CASE("shapes dataset is balanced and reproducible") {
  auto a = render_shapes(40, 3);
  auto b = render_shapes(40, 3);
  CHECK(torch::equal(a.images, b.images));
  CHECK(torch::equal(a.labels, b.labels));
  CHECK(a.of_class(4).size() == 4);
  CHECK(a.excluding(4).size() == 36);
  CHECK(a.images.min().item<double>() >= 0.0);
  CHECK(a.images.max().item<double>() <= 1.0);
  CHECK_FALSE(torch::equal(render_shapes(10, 4).images, a.take(10).images));
  CHECK_THROWS_AS(a.of_class(10), InputError);
}
