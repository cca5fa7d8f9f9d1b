#pragma once

// Feature-level attack engine. An attack trains a perturbation in the latent
// space of the generator (or, for the "No Gen" control, in pixel space) to
// minimize the targeted crossentropy of the victim(s) on composited images
// plus the regularization loss, in expectation over source images,
// transformations and insertion locations.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "featadv/compositing.hpp"
#include "featadv/dataset.hpp"
#include "featadv/errors.hpp"
#include "featadv/models.hpp"
#include "featadv/regularizers.hpp"
#include "featadv/rng.hpp"
#include "featadv/transforms.hpp"

namespace featadv {

enum class AttackMode { kPatch, kRegion, kGeneralizedPatch, kChannel };

std::string mode_name(AttackMode mode);
AttackMode mode_from_name(const std::string& name);
/// Region, generalized patch and channel attacks perturb a generator latent.
bool is_latent_mode(AttackMode mode);

enum class SourceKind { kDatasetClass, kDatasetAll, kGeneratedClass, kGeneratedAll, kFixedImage };

struct SourceDistribution {
  SourceKind kind = SourceKind::kDatasetAll;
  int64_t class_id = -1;      // *_class kinds
  bool exclude_target = true;  // *_all kinds skip images of the target class
  std::string image_path;      // fixed_image (PNG)
  uint64_t seed = 1;

  bool generated() const { return kind == SourceKind::kGeneratedClass || kind == SourceKind::kGeneratedAll; }
  nlohmann::json to_json() const;
};

enum class LocationKind { kUniformValid, kFixed };

struct LocationDistribution {
  LocationKind kind = LocationKind::kUniformValid;
  int64_t margin = 0;
  Location fixed;
  uint64_t seed = 3;
  nlohmann::json to_json() const;
};

struct AblationFlags {
  bool use_generator = true;
  bool use_disc_term = true;
  bool use_entropy_term = true;
  bool use_patch_xent_term = true;
  nlohmann::json to_json() const;
};

struct AttackConfig {
  AttackMode mode = AttackMode::kPatch;
  int64_t target_class = 0;
  SourceDistribution source;
  TransformConfig transforms;
  LocationDistribution location;
  std::string layer = "block1";
  /// Patch area, region spatial area, or channel fraction (see defaults).
  double area_fraction = 1.0 / 16.0;
  RegularizerWeights weights;
  AblationFlags ablation;
  int64_t steps = 1000;
  int64_t batch_size = 16;
  double step_size = 0.01;
  uint64_t seed = 0;
  /// L-inf bound on the input-latent delta; 0 disables the delta.
  double latent_epsilon = 0.5;
  double smoothing_sigma = 1.0;
  std::vector<std::string> victims{"victim"};
  std::string auxiliary = "auxiliary";
  std::string perceptual_extractor = "auxiliary";
  int64_t eval_sources = 100;
  std::map<std::string, std::string> model_hashes;

  /// Mode-dependent defaults: area 1/16 (patch), 1/8 (region, generalized
  /// patch), 1/4 (channel); transform preset patch_full for patches and
  /// region_light otherwise; generated sources for region/channel.
  static AttackConfig defaults(AttackMode mode);

  nlohmann::json to_json() const;
  /// Parses and validates. Missing fields take the mode defaults. Throws
  /// ConfigError naming the offending field path.
  static AttackConfig from_json(const nlohmann::json& j);
  void validate() const;
  /// Content hash of the canonical JSON form.
  std::string hash() const;
};

// ---------------------------------------------------------------- sampling

/// A set of source images; generated sources also carry their latents.
struct SourceSet {
  torch::Tensor images;   // [N,3,H,W]
  torch::Tensor latents;  // [N,latent_dim] (generated only)
  torch::Tensor labels;   // [N]
  bool generated = false;

  int64_t size() const { return images.defined() ? images.size(0) : 0; }
  SourceSet slice(int64_t begin, int64_t end) const;
};

enum class Split { kTraining, kHeldout };

/// Fractional insertion position, resolved against the window size at
/// composition time so the sampler does not depend on the perturbation.
struct LocationSample {
  double u = 0.0;
  double v = 0.0;
  std::optional<Location> fixed;

  /// Top-left corner for an h x w window in an H x W image. Throws
  /// InputError if a fixed location does not fit.
  Location resolve(int64_t image_h, int64_t image_w, int64_t h, int64_t w, int64_t margin) const;
};

struct Minibatch {
  SourceSet sources;
  std::vector<SampledTransform> transforms;
  std::vector<LocationSample> locations;
  int64_t size() const { return sources.size(); }
};

/// Draws i.i.d. samples from X x T x L with streams independent of the
/// perturbation. `digest()` summarizes every draw made so far.
class AttackSampler {
 public:
  AttackSampler(const AttackConfig& config, Generator generator, Split split = Split::kTraining);

  Minibatch next(int64_t batch_size);
  SourceSet sources(int64_t count);
  LocationSample location();
  SampledTransform transform();
  uint64_t digest() const { return digest_; }

 private:
  void mix(uint64_t value);

  AttackConfig config_;
  Generator generator_;
  LabeledImages pool_;
  Rng source_rng_;
  Rng location_rng_;
  TransformSampler transforms_;
  uint64_t digest_ = 0xcbf29ce484222325ull;
};

/// `count` sources from a distribution, reproducible from its seed.
SourceSet draw_sources(const SourceDistribution& distribution, int64_t target_class, int64_t count,
                       Generator& generator, Split split);

// ------------------------------------------------------------ perturbation

/// Trainable parameters of one attack. Which tensors are defined depends on
/// the mode.
struct Perturbation {
  AttackMode mode = AttackMode::kPatch;
  torch::Tensor patch_latent;  // [1,latent_dim]    patch, generator on
  torch::Tensor class_vector;  // [1,num_classes]   patch, generator on
  torch::Tensor pixel_logits;  // [3,S,S]           patch, generator off
  torch::Tensor insertion;     // [C,s,s] region/generalized, [k,h,w] channel
  torch::Tensor latent_delta;  // [1,latent_dim]    optional, |.|_inf <= eps
  Location offset;             // region window
  ChannelBlock channels;       // channel block
  torch::Tensor base_latent;   // [1,latent_dim]    reference generated image
  int64_t base_class = 0;

  std::vector<torch::Tensor> parameters() const;
  /// Deep copy (detached, same requires_grad flags).
  Perturbation clone() const;
};

/// Models an attack reads. Non-owning views into a ModelSuite.
struct AttackModels {
  Generator generator{nullptr};
  Discriminator discriminator{nullptr};
  std::vector<Classifier> victims;
  Classifier auxiliary{nullptr};
  Classifier perceptual_extractor{nullptr};

  static AttackModels resolve(const AttackConfig& config, ModelSuite& suite);
  torch::ScalarType dtype() const;
};

/// Initial perturbation, drawn from the job seed's own stream.
Perturbation init_perturbation(const AttackConfig& config, AttackModels& models);

/// Feature image of a patch perturbation, [3,S,S].
torch::Tensor patch_image(const AttackConfig& config, const Perturbation& perturbation, AttackModels& models);

/// Everything produced by A(x, delta, t, l) for one minibatch.
struct Composition {
  torch::Tensor adversarial;  // [B,3,H,W], input to the victim
  torch::Tensor feature;      // native-resolution feature for TV
  torch::Tensor extracted;    // P(a) batch at discriminator resolution
  torch::Tensor decoded;      // region family: pre-transform adversarial image(s)
  torch::Tensor original;     // region family: matching unperturbed image(s)
  torch::Tensor mask;         // generalized patch
};

Composition compose(const AttackConfig& config, const Perturbation& perturbation, AttackModels& models,
                    const Minibatch& batch);

/// The adversarial images only.
torch::Tensor compose_adversarial(const AttackConfig& config, const Perturbation& perturbation,
                                  AttackModels& models, const Minibatch& batch);

struct LossBreakdown {
  torch::Tensor total;
  torch::Tensor xent;
  RegularizerTerms reg;

  /// step,total,xent,tv,disc,entropy,patch_xent (perceptual is folded into
  /// total only).
  std::vector<double> row() const;
};

/// Mean targeted crossentropy (averaged over victims) plus L_reg. Throws
/// OptimizationError if the total is non-finite.
LossBreakdown attack_step_loss(const AttackConfig& config, const Perturbation& perturbation, AttackModels& models,
                               const Minibatch& batch);

// ---------------------------------------------------------------- artifacts

struct AdversarialArtifact {
  AttackMode mode = AttackMode::kPatch;
  int64_t target_class = 0;
  torch::Tensor patch;         // [3,H,W] feature image, values in [0,1]
  torch::Tensor mask;          // [H,W] binary (generalized patch)
  torch::Tensor insertion;     // latent insertion (latent modes)
  torch::Tensor latent_delta;  // [1,latent_dim] or undefined
  torch::Tensor base_latent;   // [1,latent_dim] (latent modes)
  int64_t base_class = 0;
  std::string layer;
  Location offset;
  ChannelBlock channels;
  double area_fraction = 0.0;
  bool use_generator = true;

  int64_t disguise_class = -1;  // victim argmax on the feature alone
  double disguise_confidence = 0.0;
  bool disguised = false;
  double mean_target_confidence = 0.0;
  double success_rate = 0.0;

  std::string config_hash;
  nlohmann::json config;
  nlohmann::json training;  // steps, retries, final step size, sampler digest
  std::vector<std::vector<double>> loss_curve;

  /// artifact.json, patch.png/patch.fvt, mask.png/mask.fvt (generalized),
  /// insertion.fvt / latent_delta.fvt / base_latent.fvt, loss_curve.csv.
  void save(const std::filesystem::path& dir) const;
  static AdversarialArtifact load(const std::filesystem::path& dir);
  nlohmann::json summary() const;
};

/// Applies an artifact to sources: pastes patches at the given locations or
/// decodes latent insertions on generated sources, then applies the
/// transforms. Returns [N,3,H,W].
torch::Tensor apply_artifact(const AdversarialArtifact& artifact, Generator& generator, const SourceSet& sources,
                             const std::vector<LocationSample>& locations,
                             const std::vector<SampledTransform>& transforms, int64_t margin = 0);

/// Feature image alone at classifier resolution (P of the artifact).
torch::Tensor artifact_feature(const AdversarialArtifact& artifact, int64_t resolution);

struct AttackOptions {
  /// Called after each step with (step, breakdown row).
  std::function<void(int64_t, const std::vector<double>&)> on_step;
  /// Skip the emission-time evaluation (metrics stay zero).
  bool skip_metrics = false;
};

/// Thrown when the loss stays non-finite after the allowed retries. Carries
/// the last finite perturbation as an artifact without metrics.
class AttackDiverged : public OptimizationError {
 public:
  AttackDiverged(const std::string& message, AdversarialArtifact last_good)
      : OptimizationError(message), last_good_(std::move(last_good)) {}
  const AdversarialArtifact& last_good() const { return last_good_; }

 private:
  AdversarialArtifact last_good_;
};

/// Runs `steps` Adam updates, clamps the latent delta, retries divergence by
/// halving the step size (at most 3 times), and emits the artifact with its
/// evaluation metrics.
AdversarialArtifact run_attack(const AttackConfig& config, ModelSuite& suite, const AttackOptions& options = {});

/// Same engine with explicit models (used by the ensemble harness and tests).
AdversarialArtifact run_attack(const AttackConfig& config, AttackModels& models, const AttackOptions& options = {});

/// Artifact built directly from a perturbation, without metrics.
AdversarialArtifact make_artifact(const AttackConfig& config, const Perturbation& perturbation, AttackModels& models);

/// Fills disguise and universality metrics on held-out sources.
void measure_artifact(AdversarialArtifact& artifact, const AttackConfig& config, AttackModels& models);

}  // namespace featadv
