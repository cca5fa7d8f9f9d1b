#include "featadv/regularizers.hpp"

#include <cmath>

#include "featadv/compositing.hpp"
#include "featadv/errors.hpp"
#include "featadv/image.hpp"

namespace featadv {

using nlohmann::json;
using torch::indexing::None;
using torch::indexing::Slice;

json RegularizerWeights::to_json() const {
  return {{"tv", tv}, {"realism", realism}, {"entropy", entropy}, {"anti_target", anti_target}, {"perceptual", perceptual}};
}

RegularizerWeights RegularizerWeights::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("must be an object", "weights");
  RegularizerWeights w;
  auto read = [&](const char* key, double& field) {
    if (!j.contains(key)) return;
    const auto path = std::string("weights.") + key;
    if (!j[key].is_number()) throw ConfigError("must be a number", path);
    field = j[key].get<double>();
    if (!(field >= 0.0) || !std::isfinite(field)) throw ConfigError("must be finite and >= 0", path);
  };
  read("tv", w.tv);
  read("realism", w.realism);
  read("entropy", w.entropy);
  read("anti_target", w.anti_target);
  read("perceptual", w.perceptual);
  return w;
}

torch::Tensor total_variation(const torch::Tensor& image) {
  auto x = image.dim() == 3 ? image.unsqueeze(0) : image;
  const double pixels = static_cast<double>(x.size(2) * x.size(3));
  auto dx = (x.index({Slice(), Slice(), Slice(), Slice(1, None)}) - x.index({Slice(), Slice(), Slice(), Slice(None, -1)}))
                .abs()
                .sum({1, 2, 3});
  auto dy = (x.index({Slice(), Slice(), Slice(1, None)}) - x.index({Slice(), Slice(), Slice(None, -1)})).abs().sum({1, 2, 3});
  return ((dx + dy) / pixels).mean();
}

torch::Tensor extract_and_resize(const torch::Tensor& image, const std::optional<torch::Tensor>& mask,
                                 int64_t resolution) {
  if (image.dim() != 3) throw InputError("P(a) expects a single [3,H,W] image");
  if (!mask) return resize_bilinear(image, resolution, resolution);
  const auto box = mask_bounding_box(*mask);
  auto crop = (image * mask->to(image.scalar_type()).unsqueeze(0))
                  .index({Slice(), Slice(box.row, box.row + box.height), Slice(box.col, box.col + box.width)});
  return resize_bilinear(crop, resolution, resolution);
}

torch::Tensor realism_from_logit(const torch::Tensor& logit) { return torch::softplus(-logit); }

torch::Tensor realism_loss(Discriminator& discriminator, const torch::Tensor& features) {
  return realism_from_logit(discriminator->discriminate(features)).mean();
}

torch::Tensor entropy_of(const torch::Tensor& probabilities) {
  auto q = probabilities.dim() == 1 ? probabilities.unsqueeze(0) : probabilities;
  // 0 ln 0 = 0
  auto terms = torch::where(q > 0, q * torch::log(q.clamp_min(1e-300)), torch::zeros_like(q));
  return -terms.sum(1).mean();
}

torch::Tensor output_entropy(Classifier& auxiliary, const torch::Tensor& features) {
  auto logits = auxiliary->forward(features);
  auto log_q = torch::log_softmax(logits, 1);
  return -(log_q.exp() * log_q).sum(1).mean();
}

torch::Tensor target_xent_of(const torch::Tensor& probabilities, int64_t target_class) {
  auto q = probabilities.dim() == 1 ? probabilities.unsqueeze(0) : probabilities;
  return -torch::log(q.select(1, target_class).clamp_min(1e-12)).mean();
}

torch::Tensor anti_target_xent(Classifier& auxiliary, const torch::Tensor& features, int64_t target_class) {
  if (target_class < 0 || target_class >= auxiliary->num_classes()) throw InputError("target class out of range");
  auto log_q = torch::log_softmax(auxiliary->forward(features), 1).select(1, target_class);
  return -log_q.clamp_min(std::log(1e-12)).mean();
}

torch::Tensor perceptual_distance(Classifier& extractor, const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) throw InputError("perceptual distance needs images of the same shape");
  auto fa = extractor->stage_features(a);
  auto fb = extractor->stage_features(b);
  const double weight = 1.0 / static_cast<double>(fa.size());
  auto unit = [](const torch::Tensor& f) { return f / (f.pow(2).sum(1, true).sqrt() + 1e-10); };
  torch::Tensor total;
  for (size_t l = 0; l < fa.size(); ++l) {
    auto term = weight * (unit(fa[l]) - unit(fb[l])).pow(2).sum(1).mean({1, 2});
    total = total.defined() ? total + term : term;
  }
  return total.mean();
}

RegularizerTerms l_reg(const RegularizerContext& context, const torch::Tensor& tv_image, const torch::Tensor& features,
                       const torch::Tensor& adversarial, const torch::Tensor& original) {
  const auto& w = context.weights;
  auto zero = torch::zeros({}, tv_image.options().requires_grad(false));
  RegularizerTerms terms{zero, zero, zero, zero, zero};
  if (w.tv != 0.0) terms.tv = w.tv * total_variation(tv_image);
  if (context.use_disc_term && w.realism != 0.0) {
    if (!context.discriminator) throw ConfigError("realism term needs a discriminator", "weights.realism");
    terms.disc = w.realism * realism_loss(*context.discriminator, features);
  }
  if (context.use_entropy_term && w.entropy != 0.0) {
    if (!context.auxiliary) throw ConfigError("entropy term needs an auxiliary classifier", "auxiliary");
    terms.entropy = w.entropy * output_entropy(*context.auxiliary, features);
  }
  if (context.use_patch_xent_term && w.anti_target != 0.0) {
    if (!context.auxiliary) throw ConfigError("crossentropy term needs an auxiliary classifier", "auxiliary");
    terms.patch_xent = -w.anti_target * anti_target_xent(*context.auxiliary, features, context.target_class);
  }
  if (context.use_perceptual_term && w.perceptual != 0.0) {
    if (!context.perceptual_extractor) throw ConfigError("perceptual term needs a feature extractor", "auxiliary");
    terms.perceptual = w.perceptual * perceptual_distance(*context.perceptual_extractor, adversarial, original);
  }
  return terms;
}

}  // namespace featadv
