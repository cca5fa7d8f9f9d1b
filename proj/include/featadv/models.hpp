#pragma once

// Differentiable adapters over the desk-scale model suite: a class-conditional
// generator with layer-level access, a projection discriminator, and small
// convolutional classifiers.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "featadv/image.hpp"

namespace featadv {

/// A named generator layer and its activation, batched as [B,C,h,w].
struct LatentActivation {
  std::string layer_id;
  torch::Tensor values;
  bool post_activation = true;
};

struct LayerInfo {
  std::string id;
  int64_t channels;
  int64_t height;
  int64_t width;
  bool post_activation;  // taken after a nonlinearity
  bool rectified;        // that nonlinearity is a ReLU, so values are >= 0
};

struct GeneratorOptions {
  int64_t latent_dim = 64;
  int64_t num_classes = 10;
  int64_t embed_dim = 32;
  int64_t base_channels = 128;  // channels of the 4x4 block; halved per block
  int64_t num_blocks = 4;       // 4x4 -> 32x32
  nlohmann::json to_json() const;
  static GeneratorOptions from_json(const nlohmann::json& j);
};

/// Class-conditional convolutional generator. Conditioning is a (possibly
/// soft) class vector of length num_classes; one-hot for a discrete class.
class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(GeneratorOptions options = {});

  /// z: [B,latent_dim], class_vector: [B,num_classes] -> images [B,3,S,S].
  torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& class_vector);

  /// Post-nonlinearity activation of `layer_id` ("input" is the raw latent).
  LatentActivation activations_at(const torch::Tensor& z, const torch::Tensor& class_vector,
                                  const std::string& layer_id);

  /// Runs only the layers after `activation.layer_id`. Conditioning is used
  /// only when resuming from "input".
  torch::Tensor forward_from(const LatentActivation& activation, const torch::Tensor& class_vector);

  const std::vector<LayerInfo>& layer_catalog() const { return catalog_; }
  const LayerInfo& layer(const std::string& layer_id) const;
  const GeneratorOptions& options() const { return options_; }
  int64_t input_dim() const { return options_.latent_dim; }
  int64_t num_classes() const { return options_.num_classes; }
  int64_t output_resolution() const { return int64_t{4} << (options_.num_blocks - 1); }

  /// One-hot class vectors for integer labels [B].
  torch::Tensor one_hot(const torch::Tensor& labels) const;

 private:
  size_t layer_index(const std::string& layer_id) const;
  torch::Tensor run_stage(size_t stage, const torch::Tensor& x, const torch::Tensor& class_vector);
  torch::Tensor head(const torch::Tensor& x);
  void check_conditioning(const torch::Tensor& z, const torch::Tensor& class_vector) const;

  GeneratorOptions options_;
  std::vector<LayerInfo> catalog_;
  torch::nn::Linear embed_{nullptr};
  torch::nn::Linear fc_{nullptr};
  torch::nn::BatchNorm2d fc_norm_{nullptr};
  std::vector<torch::nn::Conv2d> convs_;
  std::vector<torch::nn::BatchNorm2d> norms_;
  torch::nn::Conv2d to_rgb_{nullptr};
};
TORCH_MODULE(Generator);

/// Single-image convenience: z [latent_dim], class id -> ImageTensor.
ImageTensor generate(Generator& generator, const torch::Tensor& z, int64_t label);

struct DiscriminatorOptions {
  int64_t num_classes = 10;
  int64_t base_channels = 32;
  int64_t resolution = 32;
  nlohmann::json to_json() const;
  static DiscriminatorOptions from_json(const nlohmann::json& j);
};

/// Projection discriminator. Higher logit means more real.
class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(DiscriminatorOptions options = {});

  /// images [B,3,R,R], class_vector [B,K] -> logits [B].
  torch::Tensor forward(const torch::Tensor& images, const torch::Tensor& class_vector);

  /// Realness logit with a uniform class vector. Throws InputError on a
  /// resolution mismatch.
  torch::Tensor discriminate(const torch::Tensor& images);

  int64_t resolution() const { return options_.resolution; }
  const DiscriminatorOptions& options() const { return options_; }

 private:
  DiscriminatorOptions options_;
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, conv3_{nullptr};
  torch::nn::Linear out_{nullptr};
  torch::nn::Linear embed_{nullptr};
};
TORCH_MODULE(Discriminator);

enum class Pooling { kMax, kAvg, kStride };

struct ClassifierOptions {
  std::string arch_id = "convnet-a";
  std::vector<int64_t> widths{16, 32, 64};
  int64_t convs_per_stage = 2;
  Pooling pooling = Pooling::kMax;
  bool leaky = false;
  int64_t kernel = 3;
  int64_t num_classes = 10;
  int64_t input_size = 32;
  double mean = 0.5;
  double stddev = 0.25;
  /// Global max pooling before the linear head (average pooling if false).
  bool max_head = true;
  nlohmann::json to_json() const;
  static ClassifierOptions from_json(const nlohmann::json& j);
  /// Named presets: convnet-a (victim), convnet-b (auxiliary),
  /// convnet-c (realism proxy), convnet-d / convnet-e (ensemble members).
  static ClassifierOptions preset(const std::string& arch_id);
};

/// Small convolutional classifier with built-in preprocessing (bilinear
/// resize to input_size, then (x - mean) / stddev).
class ClassifierImpl : public torch::nn::Module {
 public:
  explicit ClassifierImpl(ClassifierOptions options = {});

  /// images in [0,1] -> logits [B,K].
  torch::Tensor forward(const torch::Tensor& images);
  /// Output of every stage, for perceptual features.
  std::vector<torch::Tensor> stage_features(const torch::Tensor& images);

  /// Parameters of the final stage and the linear head.
  std::vector<torch::Tensor> last_block_parameters();

  const ClassifierOptions& options() const { return options_; }
  int64_t num_classes() const { return options_.num_classes; }

 private:
  torch::Tensor preprocess(const torch::Tensor& images) const;

  ClassifierOptions options_;
  std::vector<torch::nn::Sequential> stages_;
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(Classifier);

/// Softmax confidences for a batch [B,3,H,W] (or a single [3,H,W]).
/// Throws InputError on non-finite pixels.
torch::Tensor classify(Classifier& classifier, const torch::Tensor& images);

// ---------------------------------------------------------------------------
// Weight containers: <dir>/manifest.json plus one tensor file per parameter
// and buffer. The content hash covers the tensor files in manifest order.

struct WeightManifest {
  std::string architecture;  // "generator", "discriminator" or "classifier"
  nlohmann::json options;
  std::string content_hash;
  nlohmann::json metrics;
};

WeightManifest save_weights(const std::filesystem::path& dir, torch::nn::Module& module,
                            const std::string& architecture, const nlohmann::json& options,
                            const nlohmann::json& metrics = nlohmann::json::object());

/// Reads the manifest and loads tensors into `module`. Throws ConfigError on
/// a hash mismatch (against the files, or against `expected_hash` if given).
WeightManifest load_weights(const std::filesystem::path& dir, torch::nn::Module& module,
                            const std::optional<std::string>& expected_hash = std::nullopt);

WeightManifest read_manifest(const std::filesystem::path& dir);

/// All trained models used by the toolkit. Roles: generator, discriminator,
/// and the classifiers victim, auxiliary, proxy, ens_d, ens_e.
struct ModelSuite {
  Generator generator{nullptr};
  Discriminator discriminator{nullptr};
  std::map<std::string, Classifier> classifiers;
  std::map<std::string, std::string> hashes;  // role -> content hash
  std::filesystem::path root;

  Classifier& classifier(const std::string& role);

  /// Loads every role found under `dir`, in eval mode with frozen parameters, cast to `dtype`.
  static ModelSuite load(const std::filesystem::path& dir, torch::Dtype dtype = torch::kFloat32,
                         const std::map<std::string, std::string>& pinned_hashes = {});
};

inline const std::vector<std::string> kClassifierRoles{"victim", "auxiliary", "proxy", "ens_d", "ens_e"};

}  // namespace featadv
