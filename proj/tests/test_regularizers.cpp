#include <doctest.h>

#include <cmath>

#include "featadv/errors.hpp"
#include "featadv/regularizers.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace featadv;

namespace {

ModelSuite& suite64() {
  static ModelSuite suite = ModelSuite::load(testing::tiny_suite_dir(), torch::kFloat64);
  return suite;
}

}  // namespace

TEST_CASE("total variation by hand") {
  auto constant = torch::full({3, 5, 5}, 0.3);
  CHECK(total_variation(constant).item<double>() == 0.0);
  auto two = torch::tensor({0.0, 1.0, 0.0, 1.0}, torch::kFloat64).view({1, 2, 2});
  CHECK(total_variation(two).item<double>() == doctest::Approx(0.5).epsilon(1e-12));
  auto img = torch::rand({3, 7, 9}, torch::kFloat64);
  CHECK(total_variation(img).item<double>() == doctest::Approx(oracle::total_variation(img)).epsilon(1e-12));
  CHECK(total_variation(img.flip({2})).item<double>() == doctest::Approx(total_variation(img).item<double>()));
  auto batch = torch::stack({img, torch::zeros_like(img)});
  CHECK(total_variation(batch).item<double>() == doctest::Approx(oracle::total_variation(img) / 2.0));
}

TEST_CASE("softplus realism values") {
  auto l = [](double x) { return realism_from_logit(torch::tensor(x, torch::kFloat64)).item<double>(); };
  CHECK(l(0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(l(20.0) == doctest::Approx(2.0611536e-9).epsilon(1e-6));
  auto logits = torch::linspace(-30, 30, 100, torch::kFloat64);
  auto v = realism_from_logit(logits);
  CHECK((v.slice(0, 1) < v.slice(0, 0, -1)).all().item<bool>());
}

TEST_CASE("entropy and anti-target crossentropy of fixed distributions") {
  auto uniform = torch::full({10}, 0.1, torch::kFloat64);
  CHECK(entropy_of(uniform).item<double>() == doctest::Approx(std::log(10.0)).epsilon(1e-12));
  auto one_hot = torch::zeros({10}, torch::kFloat64);
  one_hot[4] = 1.0;
  CHECK(entropy_of(one_hot).item<double>() == 0.0);
  auto half = torch::zeros({10}, torch::kFloat64);
  half[0] = 0.5;
  half[1] = 0.5;
  CHECK(entropy_of(half).item<double>() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  CHECK(target_xent_of(one_hot, 4).item<double>() == doctest::Approx(0.0));
  auto q = torch::zeros({10}, torch::kFloat64);
  q[2] = std::exp(-1.0);
  q[3] = 1.0 - std::exp(-1.0);
  CHECK(target_xent_of(q, 2).item<double>() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(target_xent_of(uniform, 7).item<double>() == doctest::Approx(std::log(10.0)).epsilon(1e-12));
}

TEST_CASE("extract_and_resize") {
  auto patch = torch::rand({3, 32, 32}, torch::kFloat64);
  CHECK(testing::max_abs_diff(extract_and_resize(patch, std::nullopt, 32), patch) < 1e-6);
  auto small = torch::rand({3, 9, 9}, torch::kFloat64);
  CHECK(testing::max_abs_diff(extract_and_resize(0.4 * small, std::nullopt, 32),
                              0.4 * extract_and_resize(small, std::nullopt, 32)) < 1e-12);
  auto mask = torch::zeros({9, 9}, torch::kFloat64);
  CHECK_THROWS_AS(extract_and_resize(small, mask, 32), InputError);
  mask.index_put_({torch::indexing::Slice(2, 5), torch::indexing::Slice(3, 7)}, 1.0);
  auto p = extract_and_resize(small, mask, 16);
  CHECK(p.sizes() == torch::IntArrayRef({3, 16, 16}));
}

TEST_CASE("perceptual distance against a straight-line re-evaluation") {
  auto& extractor = suite64().classifier("auxiliary");
  auto a = torch::rand({1, 3, 32, 32}, torch::kFloat64);
  auto b = torch::rand({1, 3, 32, 32}, torch::kFloat64);
  CHECK(perceptual_distance(extractor, a, a).item<double>() == doctest::Approx(0.0).scale(1.0));
  const double ab = perceptual_distance(extractor, a, b).item<double>();
  CHECK(ab == doctest::Approx(perceptual_distance(extractor, b, a).item<double>()).epsilon(1e-12));
  const double expected = oracle::perceptual(extractor->stage_features(a), extractor->stage_features(b));
  CHECK(std::abs(ab - expected) < 1e-6);
  CHECK(ab > 0.0);
}

TEST_CASE("l_reg degenerate weights and bookkeeping") {
  auto& s = suite64();
  auto image = torch::rand({3, 32, 32}, torch::kFloat64);
  auto features = image.unsqueeze(0);
  RegularizerContext ctx;
  ctx.discriminator = &s.discriminator;
  ctx.auxiliary = &s.classifier("auxiliary");
  ctx.target_class = 3;

  ctx.weights = {0, 0, 0, 0, 0};
  CHECK(l_reg(ctx, image, features).total().item<double>() == 0.0);

  ctx.weights = {1, 0, 0, 0, 0};
  CHECK(l_reg(ctx, image, features).total().item<double>() ==
        doctest::Approx(total_variation(image).item<double>()).epsilon(1e-12));

  ctx.weights = {0.3, 0.7, 1.1, 0.9, 0};
  auto terms = l_reg(ctx, image, features);
  const double sum = terms.tv.item<double>() + terms.disc.item<double>() + terms.entropy.item<double>() +
                     terms.patch_xent.item<double>() + terms.perceptual.item<double>();
  CHECK(std::abs(sum - terms.total().item<double>()) < 1e-6);
  CHECK(terms.tv.item<double>() >= 0.0);
  CHECK(terms.disc.item<double>() >= 0.0);
  CHECK(terms.entropy.item<double>() >= 0.0);
  CHECK(terms.patch_xent.item<double>() <= 0.0);

  ctx.use_disc_term = false;
  ctx.use_entropy_term = false;
  ctx.use_patch_xent_term = false;
  auto off = l_reg(ctx, image, features);
  CHECK(off.disc.item<double>() == 0.0);
  CHECK(off.entropy.item<double>() == 0.0);
  CHECK(off.patch_xent.item<double>() == 0.0);
}

TEST_CASE("regularizer gradients agree with central differences") {
  auto& s = suite64();
  auto& aux = s.classifier("auxiliary");
  auto x = torch::rand({1, 3, 32, 32}, torch::kFloat64) * 0.8 + 0.1;
  auto other = torch::rand({1, 3, 32, 32}, torch::kFloat64);
  CHECK(oracle::worst_fd_error([](const torch::Tensor& t) { return total_variation(t); }, x, 16, 1) < 1e-3);
  CHECK(oracle::worst_fd_error([&](const torch::Tensor& t) { return output_entropy(aux, t); }, x, 16, 2) < 1e-3);
  CHECK(oracle::worst_fd_error([&](const torch::Tensor& t) { return anti_target_xent(aux, t, 3); }, x, 16, 3) <
        1e-3);
  CHECK(oracle::worst_fd_error([&](const torch::Tensor& t) { return realism_loss(s.discriminator, t); }, x, 16, 4) <
        1e-3);
  CHECK(oracle::worst_fd_error([&](const torch::Tensor& t) { return perceptual_distance(aux, t, other); }, x, 16,
                               5) < 1e-3);
}

TEST_CASE("weights parsing names the offending field") {
  try {
    RegularizerWeights::from_json({{"tv", -1.0}});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "weights.tv");
  }
  CHECK_THROWS_AS(RegularizerWeights::from_json({{"realism", "x"}}), ConfigError);
  auto w = RegularizerWeights::from_json({{"entropy", 0.5}});
  CHECK(w.entropy == 0.5);
  CHECK(w.tv == RegularizerWeights{}.tv);
}
