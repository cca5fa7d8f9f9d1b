#pragma once

// Evaluation protocols: universality and disguise metrics, baselines, the
// ablation grid, the realism proxy, ensemble transfer, class impressions,
// copy/paste ranking and the adversarial-training defense.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "featadv/attack.hpp"

namespace featadv {

struct SourceRecord {
  int64_t index = 0;
  int64_t label = -1;
  int64_t predicted = -1;
  double target_confidence = 0.0;
};

struct EvalReport {
  std::string artifact_id;
  std::string model;
  int64_t target_class = 0;
  int64_t n = 0;
  double mean_confidence = 0.0;
  double std_confidence = 0.0;
  double success_rate = 0.0;
  bool disguised = false;
  int64_t disguise_class = -1;
  double disguise_confidence = 0.0;
  std::optional<double> realism_proxy;
  std::vector<SourceRecord> records;

  nlohmann::json to_json() const;
  /// index,label,predicted,target_confidence
  std::string records_csv() const;
};

/// Held-out evaluation minibatch drawn from the artifact config's own source,
/// transform and location distributions.
Minibatch heldout_batch(const AttackConfig& config, Generator& generator, int64_t n);

/// Aggregates victim confidences over a batch of already composed images.
EvalReport summarize(Classifier& victim, const torch::Tensor& images, const torch::Tensor& labels,
                     int64_t target_class);

/// Applies the artifact to every source of `batch` and classifies.
EvalReport universality_eval(const AdversarialArtifact& artifact, Generator& generator, Classifier& victim,
                             const Minibatch& batch, int64_t margin = 0);

/// Same sources and transforms with no artifact inserted.
EvalReport no_patch_eval(Classifier& victim, const Minibatch& batch, int64_t target_class);

struct DisguiseResult {
  bool disguised = false;
  int64_t disguise_class = -1;
  double confidence = 0.0;
};

/// Classifies the extracted feature alone; disguised iff argmax != target.
DisguiseResult disguise_check(const AdversarialArtifact& artifact, Classifier& victim);

struct BaselineOptions {
  int64_t n_patches = 10;
  double area_fraction = 1.0 / 16.0;
  uint64_t seed = 5;
  int64_t margin = 0;
  /// Random center crops (side fraction in [0.5,1]) instead of whole images.
  bool center_crop = false;
};

/// Mean target confidence when natural target-class images from `pool` are
/// inserted as patches into each source of `batch` (with its transforms and
/// locations). Throws InputError if the pool has no target-class image.
double natural_patch_baseline(Classifier& victim, int64_t target_class, const LabeledImages& pool,
                              const Minibatch& batch, const BaselineOptions& options = {});
double random_crop_baseline(Classifier& victim, int64_t target_class, const LabeledImages& pool,
                            const Minibatch& batch, BaselineOptions options = {});

/// Confidence an independent classifier assigns to the artifact's disguise
/// class. Throws InputError if the artifact has no disguise class.
double realism_proxy(const AdversarialArtifact& artifact, Classifier& independent);

// ------------------------------------------------------------ ablation grid

struct AblationCondition {
  std::string name;
  AblationFlags flags;
};

/// All, No Gen, No Disc, No Ent, No Patch X-ent, Only Gen, Brown17.
const std::vector<AblationCondition>& ablation_conditions();
/// Throws ConfigError (field "conditions") for unknown names.
const AblationCondition& ablation_condition(const std::string& name);
AttackConfig apply_condition(AttackConfig config, const AblationCondition& condition);

struct GridRun {
  std::string condition;
  int64_t attempt = 0;
  int64_t target_class = 0;
  std::string artifact_id;
  bool disguised = false;
  int64_t disguise_class = -1;
  double mean_confidence = 0.0;
  double success_rate = 0.0;
};

struct ConditionResult {
  std::string name;
  int64_t attempts = 0;
  int64_t disguised = 0;
  bool partial = false;  // attempt cap reached before the quota
  std::vector<GridRun> runs;

  double disguise_rate() const;
  /// Mean target confidences of the disguised artifacts.
  std::vector<double> disguised_confidences() const;
  double mean_disguised_confidence() const;
};

struct GridOptions {
  int64_t quota = 20;
  int64_t cap_factor = 5;
  uint64_t seed = 0;
  /// Template for every run; mode must be patch. Targets and seeds are drawn.
  AttackConfig base = AttackConfig::defaults(AttackMode::kPatch);
  /// When set, grid.csv, summary.json and per-run artifacts are written here.
  std::optional<std::filesystem::path> out_dir;
  std::function<void(const GridRun&)> on_run;
};

std::vector<ConditionResult> ablation_grid(const std::vector<AblationCondition>& conditions, ModelSuite& suite,
                                           const GridOptions& options);

/// a dominates b on (disguise rate, mean disguised confidence): no worse on
/// both axes and strictly better on one.
bool pareto_dominates(const ConditionResult& a, const ConditionResult& b);

// ---------------------------------------------------------------- transfer

/// run_attack with the crossentropy averaged over the `ensemble` roles.
AdversarialArtifact ensemble_attack(AttackConfig config, ModelSuite& suite, const std::vector<std::string>& ensemble,
                                    const AttackOptions& options = {});

/// universality_eval on a held-out role. Throws ConfigError if the role was
/// part of the attack's ensemble.
EvalReport transfer_eval(const AdversarialArtifact& artifact, ModelSuite& suite, const std::string& held_out,
                         int64_t n = 100);

// ------------------------------------------------------- class impressions

struct ImpressionOptions {
  int64_t steps = 200;
  int64_t batch_size = 4;
  double step_size = 0.05;
  double tv_weight = 0.05;
  uint64_t seed = 0;
  TransformConfig transforms = [] {
    TransformConfig t;
    t.preset = TransformPreset::kRegionLight;
    return t;
  }();
};

/// n images maximizing the class logit from random starts (pixel
/// parameterization, TV penalty, expectation over transforms).
std::vector<torch::Tensor> class_impressions(Classifier& classifier, int64_t class_id, int64_t n,
                                             const ImpressionOptions& options = {});

// --------------------------------------------------------------- copy/paste

struct CopyPasteResult {
  std::vector<double> before;  // target confidence per source
  std::vector<double> after;
  std::vector<double> delta;
  std::vector<int64_t> rank;   // rank[i] in 1..N, 1 = largest delta
  std::vector<int64_t> top;    // source indices of the top-k
  double top_mean_before = 0.0;
  double top_mean_after = 0.0;
  double top_mean_delta = 0.0;

  nlohmann::json to_json() const;
};

/// Inserts `patch` (resized to side x side) at `where` into every source and
/// ranks sources by the change in target confidence. side 0 is a no-op.
CopyPasteResult copy_paste_eval(Classifier& victim, const torch::Tensor& sources, const torch::Tensor& patch,
                                int64_t target_class, Location where, int64_t side, int64_t top_k = 6);

// ------------------------------------------------------------------ defense

struct DefenseOptions {
  int64_t n = 1024;
  int64_t epochs = 10;
  int64_t batch_size = 32;
  double learning_rate = 1e-4;
  double test_fraction = 0.2;
  uint64_t seed = 0;
};

struct DefenseReport {
  int64_t class_a = 0;
  int64_t class_b = 1;
  std::string mode;
  double pre_accuracy = 0.0;
  double post_accuracy = 0.0;
  double improvement = 0.0;
  int64_t train_size = 0;
  int64_t test_size = 0;
  std::vector<int64_t> cell_counts;  // clean a, perturbed a, clean b, perturbed b

  nlohmann::json to_json() const;
};

/// The balanced clean/perturbed binary dataset: images, binary labels
/// (0 = class a) and cell ids (0..3, see DefenseReport::cell_counts).
struct DefenseDataset {
  torch::Tensor images;
  torch::Tensor labels;
  torch::Tensor cells;
};

/// Attack template for one direction of a defense pair: sources of class
/// `from` (dataset images, or generated ones for region/channel), target `to`.
AttackConfig defense_attack_config(AttackMode mode, int64_t from, int64_t to, int64_t steps, uint64_t seed);

/// `a_to_b` turns class a images into b, `b_to_a` the reverse.
DefenseDataset build_defense_dataset(const AdversarialArtifact& a_to_b, const AdversarialArtifact& b_to_a,
                                     Generator& generator, int64_t class_a, int64_t class_b,
                                     const DefenseOptions& options = {});

/// Fine-tunes a copy of the victim (head and last block) as an a-vs-b binary
/// classifier on 80% of the dataset and reports accuracy on the other 20%
/// before and after.
DefenseReport adversarial_training_defense(Classifier& victim, const AdversarialArtifact& a_to_b,
                                           const AdversarialArtifact& b_to_a, Generator& generator,
                                           const DefenseOptions& options = {});

// ---------------------------------------------------------------- statistics

/// Two-sided paired t-test p-value.
double paired_t_test(const std::vector<double>& a, const std::vector<double>& b);
/// One-sided sign test: P(X >= wins) for X ~ Binomial(n, 1/2).
double sign_test(int64_t wins, int64_t n);

}  // namespace featadv
