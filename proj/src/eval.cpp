#include "featadv/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <boost/math/distributions/students_t.hpp>

#include "featadv/image.hpp"
#include "featadv/tensor_io.hpp"

namespace featadv {

namespace F = torch::nn::functional;
using nlohmann::json;
using torch::indexing::Slice;

namespace {

torch::Tensor classify_chunked(Classifier& classifier, const torch::Tensor& images) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> out;
  for (int64_t start = 0; start < images.size(0); start += 128) {
    out.push_back(classify(classifier, images.slice(0, start, std::min(start + 128, images.size(0)))));
  }
  return torch::cat(out);
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

// ----------------------------------------------------------------- reports

json EvalReport::to_json() const {
  json j = {{"artifact_id", artifact_id},
            {"model", model},
            {"target_class", target_class},
            {"n", n},
            {"mean_confidence", mean_confidence},
            {"std_confidence", std_confidence},
            {"success_rate", success_rate},
            {"disguised", disguised},
            {"disguise_class", disguise_class},
            {"disguise_confidence", disguise_confidence}};
  j["realism_proxy"] = realism_proxy ? json(*realism_proxy) : json(nullptr);
  return j;
}

std::string EvalReport::records_csv() const {
  std::ostringstream out;
  out.precision(9);
  out << "index,label,predicted,target_confidence\n";
  for (const auto& r : records) out << r.index << ',' << r.label << ',' << r.predicted << ',' << r.target_confidence << '\n';
  return out.str();
}

Minibatch heldout_batch(const AttackConfig& config, Generator& generator, int64_t n) {
  if (n < 1) throw InputError("evaluation needs at least one source");
  AttackSampler sampler(config, generator, Split::kHeldout);
  return sampler.next(n);
}

EvalReport summarize(Classifier& victim, const torch::Tensor& images, const torch::Tensor& labels,
                     int64_t target_class) {
  auto probs = classify_chunked(victim, images).to(torch::kFloat64);
  auto conf = probs.select(1, target_class).contiguous();
  auto pred = probs.argmax(1).contiguous();
  EvalReport r;
  r.target_class = target_class;
  r.n = images.size(0);
  r.mean_confidence = conf.mean().item<double>();
  r.std_confidence = r.n > 1 ? conf.std().item<double>() : 0.0;
  r.success_rate = (pred == target_class).to(torch::kFloat64).mean().item<double>();
  r.model = victim->options().arch_id;
  for (int64_t i = 0; i < r.n; ++i) {
    r.records.push_back({i, labels[i].item<int64_t>(), pred[i].item<int64_t>(), conf[i].item<double>()});
  }
  return r;
}

EvalReport universality_eval(const AdversarialArtifact& artifact, Generator& generator, Classifier& victim,
                             const Minibatch& batch, int64_t margin) {
  torch::NoGradGuard no_grad;
  auto images = apply_artifact(artifact, generator, batch.sources, batch.locations, batch.transforms, margin);
  auto report = summarize(victim, images, batch.sources.labels, artifact.target_class);
  report.artifact_id = artifact.config_hash;
  const auto d = disguise_check(artifact, victim);
  report.disguised = d.disguised;
  report.disguise_class = d.disguise_class;
  report.disguise_confidence = d.confidence;
  return report;
}

EvalReport no_patch_eval(Classifier& victim, const Minibatch& batch, int64_t target_class) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> items;
  for (int64_t b = 0; b < batch.size(); ++b) items.push_back(apply_transform(batch.transforms[b], batch.sources.images[b]));
  return summarize(victim, torch::stack(items), batch.sources.labels, target_class);
}

DisguiseResult disguise_check(const AdversarialArtifact& artifact, Classifier& victim) {
  torch::NoGradGuard no_grad;
  auto dtype = victim->parameters().front().scalar_type();
  auto q = classify(victim, artifact_feature(artifact, victim->options().input_size).to(dtype))[0];
  DisguiseResult r;
  r.disguise_class = q.argmax().item<int64_t>();
  r.confidence = q[r.disguise_class].item<double>();
  r.disguised = r.disguise_class != artifact.target_class;
  return r;
}

// --------------------------------------------------------------- baselines

double natural_patch_baseline(Classifier& victim, int64_t target_class, const LabeledImages& pool,
                              const Minibatch& batch, const BaselineOptions& options) {
  torch::NoGradGuard no_grad;
  const auto candidates = pool.of_class(target_class);
  if (candidates.size() == 0) throw InputError("no images of class " + std::to_string(target_class) + " for the baseline");
  const auto& x = batch.sources.images;
  const auto height = x.size(2), width = x.size(3);
  const auto side = window_side(width, options.area_fraction);
  Rng rng(options.seed);
  double total = 0.0;
  int64_t count = 0;
  for (int64_t p = 0; p < options.n_patches; ++p) {
    auto patch = candidates.images[rng.integer(0, candidates.size() - 1)].to(x.scalar_type());
    if (options.center_crop) {
      const auto full = patch.size(1);
      const auto crop = std::max<int64_t>(1, std::lround(rng.uniform(0.5, 1.0) * static_cast<double>(full)));
      const auto off = (full - crop) / 2;
      patch = patch.index({Slice(), Slice(off, off + crop), Slice(off, off + crop)});
    }
    std::vector<torch::Tensor> items;
    for (int64_t b = 0; b < batch.size(); ++b) {
      const auto where = batch.locations[b].resolve(height, width, side, side, options.margin);
      items.push_back(apply_transform(batch.transforms[b], insert_patch_sized(x[b], patch, where, side)));
    }
    auto conf = classify_chunked(victim, torch::stack(items)).select(1, target_class);
    total += conf.to(torch::kFloat64).sum().item<double>();
    count += conf.size(0);
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

double random_crop_baseline(Classifier& victim, int64_t target_class, const LabeledImages& pool,
                            const Minibatch& batch, BaselineOptions options) {
  options.center_crop = true;
  return natural_patch_baseline(victim, target_class, pool, batch, options);
}

double realism_proxy(const AdversarialArtifact& artifact, Classifier& independent) {
  if (artifact.disguise_class < 0) throw InputError("artifact has no disguise class (metrics were not measured)");
  torch::NoGradGuard no_grad;
  auto dtype = independent->parameters().front().scalar_type();
  auto q = classify(independent, artifact_feature(artifact, independent->options().input_size).to(dtype))[0];
  return q[artifact.disguise_class].item<double>();
}

// ------------------------------------------------------------ ablation grid

const std::vector<AblationCondition>& ablation_conditions() {
  static const std::vector<AblationCondition> conditions{
      {"All", {true, true, true, true}},
      {"No Gen", {false, true, true, true}},
      {"No Disc", {true, false, true, true}},
      {"No Ent", {true, true, false, true}},
      {"No Patch X-ent", {true, true, true, false}},
      {"Only Gen", {true, false, false, false}},
      {"Brown17", {false, false, false, false}},
  };
  return conditions;
}

const AblationCondition& ablation_condition(const std::string& name) {
  for (const auto& c : ablation_conditions()) {
    if (c.name == name) return c;
  }
  throw ConfigError("unknown ablation condition '" + name + "'", "conditions");
}

AttackConfig apply_condition(AttackConfig config, const AblationCondition& condition) {
  config.ablation = condition.flags;
  return config;
}

double ConditionResult::disguise_rate() const {
  return attempts == 0 ? 0.0 : static_cast<double>(disguised) / static_cast<double>(attempts);
}

std::vector<double> ConditionResult::disguised_confidences() const {
  std::vector<double> out;
  for (const auto& r : runs) {
    if (r.disguised) out.push_back(r.mean_confidence);
  }
  return out;
}

double ConditionResult::mean_disguised_confidence() const { return mean_of(disguised_confidences()); }

bool pareto_dominates(const ConditionResult& a, const ConditionResult& b) {
  const double ar = a.disguise_rate(), br = b.disguise_rate();
  const double ac = a.mean_disguised_confidence(), bc = b.mean_disguised_confidence();
  return ar >= br && ac >= bc && (ar > br || ac > bc);
}

std::vector<ConditionResult> ablation_grid(const std::vector<AblationCondition>& conditions, ModelSuite& suite,
                                           const GridOptions& options) {
  if (options.base.mode != AttackMode::kPatch) throw ConfigError("the ablation grid runs patch attacks", "mode");
  if (options.quota < 0) throw ConfigError("must be >= 0", "quota");
  std::vector<ConditionResult> results;
  std::ostringstream csv;
  csv.precision(9);
  csv << "condition,attempt,target_class,artifact_id,disguised,disguise_class,mean_confidence,success_rate\n";
  const int64_t cap = options.quota * options.cap_factor;
  for (const auto& condition : conditions) {
    ConditionResult result;
    result.name = condition.name;
    // Every condition sees the same sequence of targets and seeds.
    Rng rng(derive_seed(options.seed, 17));
    while (result.disguised < options.quota && result.attempts < cap) {
      auto config = apply_condition(options.base, condition);
      config.target_class = rng.integer(0, kNumClasses - 1);
      config.seed = rng.next();
      config.source.seed = rng.next();
      config.location.seed = rng.next();
      config.transforms.seed = rng.next();
      auto artifact = run_attack(config, suite);
      GridRun run{condition.name,          result.attempts,          config.target_class,
                  artifact.config_hash,    artifact.disguised,       artifact.disguise_class,
                  artifact.mean_target_confidence, artifact.success_rate};
      if (options.out_dir) artifact.save(*options.out_dir / "artifacts" / artifact.config_hash);
      ++result.attempts;
      if (run.disguised) ++result.disguised;
      csv << '"' << run.condition << "\"," << run.attempt << ',' << run.target_class << ',' << run.artifact_id << ','
          << (run.disguised ? 1 : 0) << ',' << run.disguise_class << ',' << run.mean_confidence << ','
          << run.success_rate << '\n';
      if (options.on_run) options.on_run(run);
      result.runs.push_back(std::move(run));
    }
    result.partial = result.disguised < options.quota;
    results.push_back(std::move(result));
  }
  if (options.out_dir) {
    write_file_atomic(*options.out_dir / "grid.csv", csv.str());
    json summary = json::array();
    for (const auto& r : results) {
      summary.push_back({{"condition", r.name},
                         {"attempts", r.attempts},
                         {"disguised", r.disguised},
                         {"disguise_rate", r.disguise_rate()},
                         {"mean_disguised_confidence", r.mean_disguised_confidence()},
                         {"disguised_confidences", r.disguised_confidences()},
                         {"partial", r.partial}});
    }
    write_file_atomic(*options.out_dir / "summary.json", summary.dump(2));
  }
  return results;
}

// ---------------------------------------------------------------- transfer

AdversarialArtifact ensemble_attack(AttackConfig config, ModelSuite& suite, const std::vector<std::string>& ensemble,
                                    const AttackOptions& options) {
  if (ensemble.empty()) throw ConfigError("needs at least one model", "ensemble");
  config.victims = ensemble;
  return run_attack(config, suite, options);
}

EvalReport transfer_eval(const AdversarialArtifact& artifact, ModelSuite& suite, const std::string& held_out, int64_t n) {
  const auto config = AttackConfig::from_json(artifact.config);
  if (std::find(config.victims.begin(), config.victims.end(), held_out) != config.victims.end()) {
    throw ConfigError("held-out model '" + held_out + "' was part of the attack ensemble", "held_out");
  }
  auto& model = suite.classifier(held_out);
  auto batch = heldout_batch(config, suite.generator, n);
  auto report = universality_eval(artifact, suite.generator, model, batch, config.location.margin);
  report.model = held_out;
  return report;
}

// ------------------------------------------------------- class impressions

std::vector<torch::Tensor> class_impressions(Classifier& classifier, int64_t class_id, int64_t n,
                                             const ImpressionOptions& options) {
  if (class_id < 0 || class_id >= classifier->num_classes()) throw ConfigError("class out of range", "class");
  const auto side = classifier->options().input_size;
  const auto dtype = classifier->parameters().front().scalar_type();
  std::vector<torch::Tensor> out;
  for (int64_t i = 0; i < n; ++i) {
    const auto seed = derive_seed(options.seed, static_cast<uint64_t>(i));
    double step_size = options.step_size;
    for (int attempt = 0;; ++attempt) {
      auto gen = torch_generator(seed);
      auto logits = (0.5 * torch::randn({3, side, side}, gen, torch::TensorOptions().dtype(torch::kFloat64)))
                        .to(dtype)
                        .requires_grad_(true);
      auto transforms = options.transforms;
      transforms.seed = derive_seed(seed, 1);
      TransformSampler sampler(transforms);
      torch::optim::Adam optimizer({logits}, torch::optim::AdamOptions(step_size));
      bool diverged = false;
      for (int64_t step = 0; step < options.steps; ++step) {
        auto image = torch::sigmoid(logits);
        std::vector<torch::Tensor> views;
        for (int64_t b = 0; b < options.batch_size; ++b) views.push_back(apply_transform(sampler.next(), image));
        auto loss = -classifier->forward(torch::stack(views)).select(1, class_id).mean() +
                    options.tv_weight * total_variation(image);
        if (!std::isfinite(loss.item<double>())) {
          diverged = true;
          break;
        }
        optimizer.zero_grad();
        loss.backward();
        optimizer.step();
      }
      if (!diverged) {
        out.push_back(torch::sigmoid(logits).detach());
        break;
      }
      if (attempt == 3) throw OptimizationError("class impression diverged after 3 step-size halvings");
      step_size *= 0.5;
    }
  }
  return out;
}

// --------------------------------------------------------------- copy/paste

json CopyPasteResult::to_json() const {
  return {{"before", before},       {"after", after},
          {"delta", delta},         {"rank", rank},
          {"top", top},             {"top_mean_before", top_mean_before},
          {"top_mean_after", top_mean_after}, {"top_mean_delta", top_mean_delta}};
}

CopyPasteResult copy_paste_eval(Classifier& victim, const torch::Tensor& sources, const torch::Tensor& patch,
                                int64_t target_class, Location where, int64_t side, int64_t top_k) {
  torch::NoGradGuard no_grad;
  const auto n = sources.size(0);
  std::vector<torch::Tensor> composites;
  for (int64_t i = 0; i < n; ++i) composites.push_back(insert_patch_sized(sources[i], patch.to(sources.scalar_type()), where, side));
  auto before = classify_chunked(victim, sources).select(1, target_class).to(torch::kFloat64).contiguous();
  auto after = classify_chunked(victim, torch::stack(composites)).select(1, target_class).to(torch::kFloat64).contiguous();
  CopyPasteResult r;
  r.before.assign(before.data_ptr<double>(), before.data_ptr<double>() + n);
  r.after.assign(after.data_ptr<double>(), after.data_ptr<double>() + n);
  for (int64_t i = 0; i < n; ++i) r.delta.push_back(r.after[i] - r.before[i]);
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) { return r.delta[a] > r.delta[b]; });
  r.rank.assign(static_cast<size_t>(n), 0);
  for (int64_t pos = 0; pos < n; ++pos) r.rank[order[pos]] = pos + 1;
  r.top.assign(order.begin(), order.begin() + std::min(top_k, n));
  for (auto i : r.top) {
    r.top_mean_before += r.before[i];
    r.top_mean_after += r.after[i];
  }
  if (!r.top.empty()) {
    r.top_mean_before /= static_cast<double>(r.top.size());
    r.top_mean_after /= static_cast<double>(r.top.size());
  }
  r.top_mean_delta = r.top_mean_after - r.top_mean_before;
  return r;
}

// ------------------------------------------------------------------ defense

json DefenseReport::to_json() const {
  return {{"class_pair", {class_a, class_b}},
          {"mode", mode},
          {"pre_accuracy", pre_accuracy},
          {"post_accuracy", post_accuracy},
          {"improvement", improvement},
          {"train_size", train_size},
          {"test_size", test_size},
          {"cell_counts", cell_counts}};
}

namespace {

// Clean and perturbed images of `cls` for one artifact (per_cell each).
std::pair<torch::Tensor, torch::Tensor> defense_cells(const AdversarialArtifact& artifact, Generator& generator,
                                                      int64_t cls, int64_t per_cell, uint64_t seed) {
  torch::NoGradGuard no_grad;
  auto config = AttackConfig::from_json(artifact.config);
  SourceSet clean, to_perturb;
  if (is_latent_mode(artifact.mode) && artifact.mode != AttackMode::kGeneralizedPatch) {
    SourceDistribution d{SourceKind::kGeneratedClass, cls, false, "", seed};
    auto all = draw_sources(d, artifact.target_class, 2 * per_cell, generator, Split::kTraining);
    clean = all.slice(0, per_cell);
    to_perturb = all.slice(per_cell, 2 * per_cell);
  } else {
    const auto pool = training_pool().of_class(cls);
    if (pool.size() < 2 * per_cell) {
      throw InputError("class " + std::to_string(cls) + " has " + std::to_string(pool.size()) + " images, need " +
                       std::to_string(2 * per_cell));
    }
    auto gen = torch_generator(seed);
    auto order = torch::randperm(pool.size(), gen, torch::kInt64);
    auto images = pool.images.index_select(0, order.slice(0, 0, 2 * per_cell));
    auto labels = pool.labels.index_select(0, order.slice(0, 0, 2 * per_cell));
    clean = {images.slice(0, 0, per_cell), {}, labels.slice(0, 0, per_cell), false};
    to_perturb = {images.slice(0, per_cell), {}, labels.slice(0, per_cell), false};
  }
  config.location.seed = derive_seed(seed, 2);
  config.transforms.seed = derive_seed(seed, 3);
  AttackSampler sampler(config, generator, Split::kTraining);
  std::vector<LocationSample> locations;
  std::vector<SampledTransform> transforms;
  for (int64_t i = 0; i < per_cell; ++i) transforms.push_back(sampler.transform());
  for (int64_t i = 0; i < per_cell; ++i) locations.push_back(sampler.location());
  auto perturbed = apply_artifact(artifact, generator, to_perturb, locations, transforms, config.location.margin);
  return {clean.images, perturbed};
}

Classifier copy_classifier(Classifier& source) {
  Classifier copy(source->options());
  torch::NoGradGuard no_grad;
  auto src_params = source->named_parameters(true);
  for (auto& p : copy->named_parameters(true)) p.value().copy_(src_params[p.key()]);
  auto src_buffers = source->named_buffers(true);
  for (auto& b : copy->named_buffers(true)) b.value().copy_(src_buffers[b.key()]);
  copy->to(source->parameters().front().scalar_type());
  copy->eval();
  return copy;
}

double binary_accuracy(Classifier& model, const torch::Tensor& images, const torch::Tensor& labels,
                       const torch::Tensor& pair) {
  torch::NoGradGuard no_grad;
  auto logits = model->forward(images).index_select(1, pair);
  return (logits.argmax(1) == labels).to(torch::kFloat64).mean().item<double>();
}

}  // namespace

AttackConfig defense_attack_config(AttackMode mode, int64_t from, int64_t to, int64_t steps, uint64_t seed) {
  auto config = AttackConfig::defaults(mode);
  config.target_class = to;
  config.steps = steps;
  config.seed = seed;
  config.source.class_id = from;
  config.source.kind = mode == AttackMode::kRegion || mode == AttackMode::kChannel ? SourceKind::kGeneratedClass
                                                                                    : SourceKind::kDatasetClass;
  config.source.seed = derive_seed(seed, 1);
  config.location.seed = derive_seed(seed, 2);
  config.transforms.seed = derive_seed(seed, 3);
  return config;
}

DefenseDataset build_defense_dataset(const AdversarialArtifact& a_to_b, const AdversarialArtifact& b_to_a,
                                     Generator& generator, int64_t class_a, int64_t class_b,
                                     const DefenseOptions& options) {
  if (options.n <= 0 || options.n % 4 != 0) throw ConfigError("must be a positive multiple of 4", "n");
  if (class_a == class_b) throw ConfigError("classes must differ", "pair");
  const auto per_cell = options.n / 4;
  auto [clean_a, pert_a] = defense_cells(a_to_b, generator, class_a, per_cell, derive_seed(options.seed, 1));
  auto [clean_b, pert_b] = defense_cells(b_to_a, generator, class_b, per_cell, derive_seed(options.seed, 2));
  DefenseDataset d;
  d.images = torch::cat({clean_a, pert_a, clean_b, pert_b});
  d.labels = torch::cat({torch::zeros({2 * per_cell}, torch::kInt64), torch::ones({2 * per_cell}, torch::kInt64)});
  d.cells = torch::arange(4, torch::kInt64).repeat_interleave(per_cell);
  return d;
}

DefenseReport adversarial_training_defense(Classifier& victim, const AdversarialArtifact& a_to_b,
                                           const AdversarialArtifact& b_to_a, Generator& generator,
                                           const DefenseOptions& options) {
  const auto class_a = b_to_a.target_class;
  const auto class_b = a_to_b.target_class;
  auto data = build_defense_dataset(a_to_b, b_to_a, generator, class_a, class_b, options);
  const auto per_cell = options.n / 4;
  const auto test_per_cell = std::lround(options.test_fraction * static_cast<double>(per_cell));

  // Stratified 80/20 split: the same number of test images from every cell.
  auto gen = torch_generator(derive_seed(options.seed, 5));
  std::vector<torch::Tensor> train_idx, test_idx;
  for (int64_t cell = 0; cell < 4; ++cell) {
    auto order = torch::randperm(per_cell, gen, torch::kInt64) + cell * per_cell;
    test_idx.push_back(order.slice(0, 0, test_per_cell));
    train_idx.push_back(order.slice(0, test_per_cell));
  }
  auto train = torch::cat(train_idx), test = torch::cat(test_idx);
  auto dtype = victim->parameters().front().scalar_type();
  auto x_train = data.images.index_select(0, train).to(dtype), y_train = data.labels.index_select(0, train);
  auto x_test = data.images.index_select(0, test).to(dtype), y_test = data.labels.index_select(0, test);
  auto pair = torch::tensor({class_a, class_b}, torch::kInt64);

  auto model = copy_classifier(victim);
  DefenseReport report;
  report.class_a = class_a;
  report.class_b = class_b;
  report.mode = mode_name(a_to_b.mode);
  report.train_size = train.size(0);
  report.test_size = test.size(0);
  for (int64_t cell = 0; cell < 4; ++cell) report.cell_counts.push_back((data.cells == cell).sum().item<int64_t>());
  report.pre_accuracy = binary_accuracy(model, x_test, y_test, pair);

  for (auto& p : model->parameters()) p.requires_grad_(false);
  auto trainable = model->last_block_parameters();
  for (auto& p : trainable) p.requires_grad_(true);
  torch::optim::Adam optimizer(trainable, torch::optim::AdamOptions(options.learning_rate));
  for (int64_t epoch = 0; epoch < options.epochs; ++epoch) {
    auto order = torch::randperm(x_train.size(0), gen, torch::kInt64);
    for (int64_t start = 0; start < order.size(0); start += options.batch_size) {
      auto idx = order.slice(0, start, std::min(start + options.batch_size, order.size(0)));
      auto logits = model->forward(x_train.index_select(0, idx)).index_select(1, pair);
      auto loss = F::cross_entropy(logits, y_train.index_select(0, idx));
      optimizer.zero_grad();
      loss.backward();
      optimizer.step();
    }
  }
  report.post_accuracy = binary_accuracy(model, x_test, y_test, pair);
  report.improvement = report.post_accuracy - report.pre_accuracy;
  return report;
}

// ---------------------------------------------------------------- statistics

double paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw InputError("paired t-test needs two equal samples of size >= 2");
  const auto n = static_cast<double>(a.size());
  std::vector<double> d(a.size());
  for (size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  const double mean = mean_of(d);
  double ss = 0.0;
  for (double v : d) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  if (sd == 0.0) return mean == 0.0 ? 1.0 : 0.0;
  const double t = mean / (sd / std::sqrt(n));
  boost::math::students_t dist(n - 1.0);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(t)));
}

double sign_test(int64_t wins, int64_t n) {
  double p = 0.0;
  for (int64_t k = wins; k <= n; ++k) {
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) - n * std::log(2.0));
  }
  return std::min(1.0, p);
}

}  // namespace featadv
