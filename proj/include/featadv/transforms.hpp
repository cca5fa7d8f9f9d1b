#pragma once

// The transformation distribution T: photometric and geometric augmentations
// sampled per minibatch item and applied differentiably.

#include <array>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "featadv/rng.hpp"

namespace featadv {

enum class TransformPreset { kPatchFull, kRegionLight, kIdentity };

std::string preset_name(TransformPreset preset);
TransformPreset preset_from_name(const std::string& name);

struct TransformConfig {
  TransformPreset preset = TransformPreset::kPatchFull;
  double brightness = 0.25;
  double contrast = 0.25;
  double saturation = 0.25;
  double hue = 0.05;
  double blur_sigma_max = 1.5;
  double noise_std_max = 0.05;
  double rotation_degrees = 15.0;
  double perspective_scale = 0.2;
  double flip_probability = 0.5;
  uint64_t seed = 0;

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults. Throws ConfigError("transforms.<key>").
  static TransformConfig from_json(const nlohmann::json& j);
  void validate() const;
};

struct ColorJitter {
  double brightness = 1.0;  // multiplicative factors
  double contrast = 1.0;
  double saturation = 1.0;
  double hue = 0.0;  // fraction of a full turn
};
struct GaussianBlur {
  double sigma = 0.0;
};
struct GaussianNoise {
  double stddev = 0.0;
  uint64_t seed = 0;
};
struct Rotation {
  double degrees = 0.0;
};
/// Inward corner displacements in normalized [-1,1] coordinates, ordered
/// (top-left, top-right, bottom-right, bottom-left) x (dx, dy).
struct Perspective {
  std::array<double, 8> displacement{};
};
struct HorizontalFlip {};

using TransformOp = std::variant<ColorJitter, GaussianBlur, GaussianNoise, Rotation, Perspective, HorizontalFlip>;

struct SampledTransform {
  std::vector<TransformOp> ops;
  nlohmann::json to_json() const;
};

/// Draws each op's parameters uniformly from the configured ranges.
SampledTransform sample_transform(const TransformConfig& config, Rng& rng);

/// A seeded stream of transforms for one job.
class TransformSampler {
 public:
  explicit TransformSampler(TransformConfig config) : config_(config), rng_(config.seed) {}
  SampledTransform next() { return sample_transform(config_, rng_); }
  const TransformConfig& config() const { return config_; }

 private:
  TransformConfig config_;
  Rng rng_;
};

/// Applies the ops in order to [3,H,W] or [B,3,H,W] and clamps to [0,1].
/// Differentiable with respect to the image; noise is an additive constant.
torch::Tensor apply_transform(const SampledTransform& transform, const torch::Tensor& images);

/// Normalized 1-D Gaussian taps of radius ceil(3 sigma); {1} for sigma ~ 0.
std::vector<double> gaussian_kernel(double sigma);

/// Separable Gaussian blur with replicate padding on [B,C,H,W].
torch::Tensor gaussian_blur(const torch::Tensor& images, double sigma);

}  // namespace featadv
