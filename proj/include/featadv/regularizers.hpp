#pragma once

// Terms of the regularization loss: total variation, discriminator realism,
// auxiliary-classifier entropy, negated target crossentropy, and a
// perceptual distance for latent-space (region family) attacks.

#include <optional>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "featadv/models.hpp"

namespace featadv {

struct RegularizerWeights {
  double tv = 1e-4;
  double realism = 1.0;
  double entropy = 1.0;
  double anti_target = 1.0;
  double perceptual = 1.0;

  nlohmann::json to_json() const;
  static RegularizerWeights from_json(const nlohmann::json& j);
};

/// Anisotropic TV: sum of absolute horizontal and vertical neighbour
/// differences over all channels, divided by the pixel count. Batches
/// average over images.
torch::Tensor total_variation(const torch::Tensor& image);

/// P(a): the patch, or the bounding box of `mask` within a masked patch
/// (zero background), bilinearly resized to `resolution`. Accepts a single
/// [3,H,W] image and returns [3,R,R]. Throws InputError on an empty mask.
torch::Tensor extract_and_resize(const torch::Tensor& image, const std::optional<torch::Tensor>& mask,
                                 int64_t resolution);

/// softplus(-logit), averaged over the batch.
torch::Tensor realism_loss(Discriminator& discriminator, const torch::Tensor& features);
torch::Tensor realism_from_logit(const torch::Tensor& logit);

/// -sum q ln q of the auxiliary classifier's output (natural log), batch mean.
torch::Tensor output_entropy(Classifier& auxiliary, const torch::Tensor& features);
torch::Tensor entropy_of(const torch::Tensor& probabilities);

/// -ln q_target with q clamped at 1e-12, batch mean.
torch::Tensor anti_target_xent(Classifier& auxiliary, const torch::Tensor& features, int64_t target_class);
torch::Tensor target_xent_of(const torch::Tensor& probabilities, int64_t target_class);

/// sum_l w_l * mean over positions of ||n(phi_l(a)) - n(phi_l(b))||^2, with
/// phi_l the stage features of `extractor`, n channel-wise unit
/// normalization and uniform weights w_l = 1/L. Batch mean.
torch::Tensor perceptual_distance(Classifier& extractor, const torch::Tensor& a, const torch::Tensor& b);

/// Weighted, signed contributions; `total()` is their sum.
struct RegularizerTerms {
  torch::Tensor tv;
  torch::Tensor disc;
  torch::Tensor entropy;
  torch::Tensor patch_xent;  // -lambda4 * crossentropy, <= 0
  torch::Tensor perceptual;

  torch::Tensor total() const { return tv + disc + entropy + patch_xent + perceptual; }
};

struct RegularizerContext {
  RegularizerWeights weights;
  bool use_disc_term = true;
  bool use_entropy_term = true;
  bool use_patch_xent_term = true;
  bool use_perceptual_term = false;  // region family only
  int64_t target_class = 0;
  Discriminator* discriminator = nullptr;
  Classifier* auxiliary = nullptr;
  Classifier* perceptual_extractor = nullptr;
};

/// L_reg. `tv_image` is the feature at native resolution, `features` the
/// batch of P(a) at discriminator resolution; `adversarial`/`original` are
/// only read when the perceptual term is active. A disabled flag skips its
/// term entirely (zero value, no gradient).
RegularizerTerms l_reg(const RegularizerContext& context, const torch::Tensor& tv_image,
                       const torch::Tensor& features, const torch::Tensor& adversarial = {},
                       const torch::Tensor& original = {});

}  // namespace featadv
