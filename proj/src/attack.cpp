#include "featadv/attack.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "featadv/hashing.hpp"
#include "featadv/image.hpp"
#include "featadv/tensor_io.hpp"

namespace featadv {

namespace F = torch::nn::functional;
using nlohmann::json;
using torch::indexing::Slice;

// ------------------------------------------------------------------ naming

std::string mode_name(AttackMode mode) {
  switch (mode) {
    case AttackMode::kPatch:
      return "patch";
    case AttackMode::kRegion:
      return "region";
    case AttackMode::kGeneralizedPatch:
      return "generalized_patch";
    case AttackMode::kChannel:
      return "channel";
  }
  return "patch";
}

AttackMode mode_from_name(const std::string& name) {
  if (name == "patch") return AttackMode::kPatch;
  if (name == "region") return AttackMode::kRegion;
  if (name == "generalized_patch") return AttackMode::kGeneralizedPatch;
  if (name == "channel") return AttackMode::kChannel;
  throw ConfigError("unknown mode '" + name + "' (expected patch, region, generalized_patch or channel)", "mode");
}

bool is_latent_mode(AttackMode mode) { return mode != AttackMode::kPatch; }

namespace {

std::string source_kind_name(SourceKind kind) {
  switch (kind) {
    case SourceKind::kDatasetClass:
      return "dataset_class";
    case SourceKind::kDatasetAll:
      return "dataset_all";
    case SourceKind::kGeneratedClass:
      return "generated_class";
    case SourceKind::kGeneratedAll:
      return "generated_all";
    case SourceKind::kFixedImage:
      return "fixed_image";
  }
  return "dataset_all";
}

SourceKind source_kind_from(const std::string& name) {
  if (name == "dataset_class") return SourceKind::kDatasetClass;
  if (name == "dataset_all") return SourceKind::kDatasetAll;
  if (name == "generated_class") return SourceKind::kGeneratedClass;
  if (name == "generated_all") return SourceKind::kGeneratedAll;
  if (name == "fixed_image") return SourceKind::kFixedImage;
  throw ConfigError("unknown source kind '" + name + "'", "source.kind");
}

// Strict typed accessors that report the config path on failure.
const json& field(const json& j, const std::string& key, const std::string& path) {
  if (!j.contains(key)) throw ConfigError("is required", path);
  return j.at(key);
}

int64_t get_int(const json& v, const std::string& path) {
  if (!v.is_number_integer()) throw ConfigError("must be an integer", path);
  return v.get<int64_t>();
}

uint64_t get_seed(const json& v, const std::string& path) {
  if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<int64_t>() < 0)) {
    throw ConfigError("must be a non-negative integer", path);
  }
  return v.get<uint64_t>();
}

double get_number(const json& v, const std::string& path) {
  if (!v.is_number()) throw ConfigError("must be a number", path);
  const double d = v.get<double>();
  if (!std::isfinite(d)) throw ConfigError("must be finite", path);
  return d;
}

bool get_bool(const json& v, const std::string& path) {
  if (!v.is_boolean()) throw ConfigError("must be a boolean", path);
  return v.get<bool>();
}

std::string get_string(const json& v, const std::string& path) {
  if (!v.is_string()) throw ConfigError("must be a string", path);
  return v.get<std::string>();
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& prefix) {
  if (!j.is_object()) throw ConfigError("must be an object", prefix.empty() ? "config" : prefix);
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || item.key() == k;
    if (!ok) throw ConfigError("unknown field", prefix.empty() ? item.key() : prefix + "." + item.key());
  }
}

json merged(const json& base, const json& overlay) {
  json out = base;
  for (const auto& item : overlay.items()) {
    if (item.value().is_object() && out.contains(item.key()) && out[item.key()].is_object()) {
      out[item.key()] = merged(out[item.key()], item.value());
    } else {
      out[item.key()] = item.value();
    }
  }
  return out;
}

}  // namespace

// ------------------------------------------------------------------ config

json SourceDistribution::to_json() const {
  json j = {{"kind", source_kind_name(kind)}, {"exclude_target", exclude_target}, {"seed", seed}};
  j["class"] = class_id >= 0 ? json(class_id) : json(nullptr);
  j["image"] = image_path;
  return j;
}

json LocationDistribution::to_json() const {
  return {{"kind", kind == LocationKind::kFixed ? "fixed" : "uniform_valid"},
          {"margin", margin},
          {"row", fixed.row},
          {"col", fixed.col},
          {"seed", seed}};
}

json AblationFlags::to_json() const {
  return {{"use_generator", use_generator},
          {"use_disc_term", use_disc_term},
          {"use_entropy_term", use_entropy_term},
          {"use_patch_xent_term", use_patch_xent_term}};
}

AttackConfig AttackConfig::defaults(AttackMode mode) {
  AttackConfig c;
  c.mode = mode;
  switch (mode) {
    case AttackMode::kPatch:
      c.area_fraction = 1.0 / 16.0;
      c.transforms.preset = TransformPreset::kPatchFull;
      c.source.kind = SourceKind::kDatasetAll;
      break;
    case AttackMode::kRegion:
      c.area_fraction = 1.0 / 8.0;
      c.transforms.preset = TransformPreset::kRegionLight;
      c.source.kind = SourceKind::kGeneratedAll;
      break;
    case AttackMode::kGeneralizedPatch:
      c.area_fraction = 1.0 / 8.0;
      c.transforms.preset = TransformPreset::kRegionLight;
      c.source.kind = SourceKind::kDatasetAll;
      break;
    case AttackMode::kChannel:
      c.area_fraction = 1.0 / 4.0;
      c.transforms.preset = TransformPreset::kRegionLight;
      c.source.kind = SourceKind::kGeneratedAll;
      break;
  }
  return c;
}

json AttackConfig::to_json() const {
  return {{"mode", mode_name(mode)},
          {"target_class", target_class},
          {"source", source.to_json()},
          {"transforms", transforms.to_json()},
          {"location", location.to_json()},
          {"layer", layer},
          {"area_fraction", area_fraction},
          {"weights", weights.to_json()},
          {"ablation", ablation.to_json()},
          {"steps", steps},
          {"batch_size", batch_size},
          {"step_size", step_size},
          {"seed", seed},
          {"latent_epsilon", latent_epsilon},
          {"smoothing_sigma", smoothing_sigma},
          {"victims", victims},
          {"auxiliary", auxiliary},
          {"perceptual_extractor", perceptual_extractor},
          {"eval_sources", eval_sources},
          {"model_hashes", model_hashes}};
}

AttackConfig AttackConfig::from_json(const json& input) {
  if (!input.is_object()) throw ConfigError("config must be a JSON object", "config");
  const auto mode = mode_from_name(get_string(field(input, "mode", "mode"), "mode"));
  reject_unknown(input,
                 {"mode", "target_class", "source", "transforms", "location", "layer", "area_fraction", "weights",
                  "ablation", "steps", "batch_size", "step_size", "seed", "latent_epsilon", "smoothing_sigma",
                  "victims", "auxiliary", "perceptual_extractor", "eval_sources", "model_hashes"},
                 "");
  for (const char* key : {"source", "transforms", "location", "weights", "ablation", "model_hashes"}) {
    if (input.contains(key) && !input[key].is_object()) throw ConfigError("must be an object", key);
  }
  auto defaults_cfg = defaults(mode);
  const json j = merged(defaults_cfg.to_json(), input);

  AttackConfig c;
  c.mode = mode;
  c.target_class = get_int(field(j, "target_class", "target_class"), "target_class");

  const auto& s = j.at("source");
  reject_unknown(s, {"kind", "class", "exclude_target", "image", "seed"}, "source");
  c.source.kind = source_kind_from(get_string(field(s, "kind", "source.kind"), "source.kind"));
  c.source.class_id = s.at("class").is_null() ? -1 : get_int(s.at("class"), "source.class");
  c.source.exclude_target = get_bool(s.at("exclude_target"), "source.exclude_target");
  c.source.image_path = get_string(s.at("image"), "source.image");
  c.source.seed = get_seed(s.at("seed"), "source.seed");

  c.transforms = TransformConfig::from_json(j.at("transforms"));

  const auto& l = j.at("location");
  reject_unknown(l, {"kind", "margin", "row", "col", "seed"}, "location");
  const auto lkind = get_string(l.at("kind"), "location.kind");
  if (lkind == "fixed") {
    c.location.kind = LocationKind::kFixed;
  } else if (lkind == "uniform_valid") {
    c.location.kind = LocationKind::kUniformValid;
  } else {
    throw ConfigError("unknown location kind '" + lkind + "'", "location.kind");
  }
  c.location.margin = get_int(l.at("margin"), "location.margin");
  c.location.fixed = {get_int(l.at("row"), "location.row"), get_int(l.at("col"), "location.col")};
  c.location.seed = get_seed(l.at("seed"), "location.seed");

  c.layer = get_string(j.at("layer"), "layer");
  c.area_fraction = get_number(j.at("area_fraction"), "area_fraction");
  reject_unknown(j.at("weights"), {"tv", "realism", "entropy", "anti_target", "perceptual"}, "weights");
  c.weights = RegularizerWeights::from_json(j.at("weights"));
  const auto& a = j.at("ablation");
  reject_unknown(a, {"use_generator", "use_disc_term", "use_entropy_term", "use_patch_xent_term"}, "ablation");
  c.ablation.use_generator = get_bool(a.at("use_generator"), "ablation.use_generator");
  c.ablation.use_disc_term = get_bool(a.at("use_disc_term"), "ablation.use_disc_term");
  c.ablation.use_entropy_term = get_bool(a.at("use_entropy_term"), "ablation.use_entropy_term");
  c.ablation.use_patch_xent_term = get_bool(a.at("use_patch_xent_term"), "ablation.use_patch_xent_term");
  c.steps = get_int(j.at("steps"), "steps");
  c.batch_size = get_int(j.at("batch_size"), "batch_size");
  c.step_size = get_number(j.at("step_size"), "step_size");
  c.seed = get_seed(j.at("seed"), "seed");
  c.latent_epsilon = get_number(j.at("latent_epsilon"), "latent_epsilon");
  c.smoothing_sigma = get_number(j.at("smoothing_sigma"), "smoothing_sigma");
  if (!j.at("victims").is_array()) throw ConfigError("must be an array of model roles", "victims");
  c.victims.clear();
  for (size_t i = 0; i < j.at("victims").size(); ++i) {
    c.victims.push_back(get_string(j.at("victims")[i], "victims[" + std::to_string(i) + "]"));
  }
  c.auxiliary = get_string(j.at("auxiliary"), "auxiliary");
  c.perceptual_extractor = get_string(j.at("perceptual_extractor"), "perceptual_extractor");
  c.eval_sources = get_int(j.at("eval_sources"), "eval_sources");
  for (const auto& item : j.at("model_hashes").items()) {
    c.model_hashes[item.key()] = get_string(item.value(), "model_hashes." + item.key());
  }
  c.validate();
  return c;
}

void AttackConfig::validate() const {
  if (target_class < 0 || target_class >= kNumClasses) throw ConfigError("must be in [0,10)", "target_class");
  if (!(area_fraction > 0.0 && area_fraction <= 1.0)) throw ConfigError("must be in (0,1]", "area_fraction");
  if (steps <= 0) throw ConfigError("must be positive", "steps");
  if (batch_size <= 0) throw ConfigError("must be positive", "batch_size");
  if (!(step_size >= 0.0)) throw ConfigError("must be >= 0", "step_size");
  if (!(latent_epsilon >= 0.0)) throw ConfigError("must be >= 0", "latent_epsilon");
  if (!(smoothing_sigma >= 0.0)) throw ConfigError("must be >= 0", "smoothing_sigma");
  if (eval_sources <= 0) throw ConfigError("must be positive", "eval_sources");
  if (victims.empty()) throw ConfigError("needs at least one classifier", "victims");
  if (location.margin < 0) throw ConfigError("must be >= 0", "location.margin");
  if (location.kind == LocationKind::kFixed && (location.fixed.row < 0 || location.fixed.col < 0)) {
    throw ConfigError("must be >= 0", "location.row");
  }
  const bool class_kind = source.kind == SourceKind::kDatasetClass || source.kind == SourceKind::kGeneratedClass;
  if (class_kind && (source.class_id < 0 || source.class_id >= kNumClasses)) {
    throw ConfigError("class-conditional sources need a class in [0,10)", "source.class");
  }
  if (source.kind == SourceKind::kFixedImage && source.image_path.empty()) {
    throw ConfigError("fixed_image sources need an image path", "source.image");
  }
  if ((mode == AttackMode::kRegion || mode == AttackMode::kChannel) && !source.generated()) {
    throw ConfigError("region and channel attacks perturb generated sources", "source.kind");
  }
  if (!ablation.use_generator && mode != AttackMode::kPatch) {
    throw ConfigError("only patch attacks can run without the generator", "ablation.use_generator");
  }
  if (is_latent_mode(mode) && (layer == "input" || layer.rfind("block", 0) != 0)) {
    throw ConfigError("latent attacks need a generator block layer", "layer");
  }
  if (mode == AttackMode::kGeneralizedPatch && layer.empty()) throw ConfigError("is required", "layer");
}

std::string AttackConfig::hash() const { return sha256_hex(to_json().dump()); }

// ---------------------------------------------------------------- sampling

SourceSet SourceSet::slice(int64_t begin, int64_t end) const {
  SourceSet out;
  out.images = images.slice(0, begin, end);
  if (latents.defined()) out.latents = latents.slice(0, begin, end);
  out.labels = labels.slice(0, begin, end);
  out.generated = generated;
  return out;
}

Location LocationSample::resolve(int64_t image_h, int64_t image_w, int64_t h, int64_t w, int64_t margin) const {
  if (fixed) {
    if (fixed->row < 0 || fixed->col < 0 || fixed->row + h > image_h || fixed->col + w > image_w) {
      throw InputError("fixed location (" + std::to_string(fixed->row) + "," + std::to_string(fixed->col) +
                       ") does not fit a " + std::to_string(h) + "x" + std::to_string(w) + " window");
    }
    return *fixed;
  }
  const auto rows = image_h - h - 2 * margin + 1;
  const auto cols = image_w - w - 2 * margin + 1;
  if (rows <= 0 || cols <= 0) throw InputError("window does not fit inside the margin");
  const auto r = std::min<int64_t>(rows - 1, static_cast<int64_t>(std::floor(u * static_cast<double>(rows))));
  const auto c = std::min<int64_t>(cols - 1, static_cast<int64_t>(std::floor(v * static_cast<double>(cols))));
  return {margin + r, margin + c};
}

namespace {

torch::ScalarType generator_dtype(Generator& generator) { return generator->parameters().front().scalar_type(); }

LabeledImages source_pool(const SourceDistribution& d, int64_t target, Split split) {
  const auto& pool = split == Split::kTraining ? training_pool() : heldout_pool();
  if (d.kind == SourceKind::kDatasetClass) return pool.of_class(d.class_id);
  if (d.kind == SourceKind::kDatasetAll && d.exclude_target) return pool.excluding(target);
  return pool;
}

uint64_t split_seed(uint64_t seed, Split split) { return split == Split::kTraining ? seed : derive_seed(seed, 99); }

SourceSet sample_sources(const SourceDistribution& d, int64_t target, int64_t count, Generator& generator,
                         const LabeledImages& pool, Rng& rng, const std::function<void(uint64_t)>& mix) {
  SourceSet out;
  out.generated = d.generated();
  if (d.kind == SourceKind::kFixedImage) {
    auto image = decode_png(read_file(d.image_path)).data().to(generator_dtype(generator));
    out.images = image.unsqueeze(0).repeat({count, 1, 1, 1});
    out.labels = torch::full({count}, -1, torch::kInt64);
    return out;
  }
  if (!d.generated()) {
    if (pool.size() == 0) throw InputError("source distribution has no images");
    std::vector<int64_t> index(static_cast<size_t>(count));
    for (auto& i : index) {
      i = rng.integer(0, pool.size() - 1);
      mix(static_cast<uint64_t>(i));
    }
    auto idx = torch::tensor(index, torch::kInt64);
    out.images = pool.images.index_select(0, idx).to(generator_dtype(generator));
    out.labels = pool.labels.index_select(0, idx);
    return out;
  }
  const auto dim = generator->input_dim();
  std::vector<double> z(static_cast<size_t>(count * dim));
  std::vector<int64_t> labels(static_cast<size_t>(count));
  for (int64_t b = 0; b < count; ++b) {
    for (int64_t k = 0; k < dim; ++k) z[b * dim + k] = rng.normal();
    if (d.kind == SourceKind::kGeneratedClass) {
      labels[b] = d.class_id;
    } else if (d.exclude_target) {
      const auto drawn = rng.integer(0, kNumClasses - 2);
      labels[b] = drawn >= target ? drawn + 1 : drawn;
    } else {
      labels[b] = rng.integer(0, kNumClasses - 1);
    }
    mix(static_cast<uint64_t>(labels[b]));
    mix(std::bit_cast<uint64_t>(z[b * dim]));
  }
  const auto dtype = generator_dtype(generator);
  out.latents = torch::tensor(z, torch::kFloat64).view({count, dim}).to(dtype);
  out.labels = torch::tensor(labels, torch::kInt64);
  torch::NoGradGuard no_grad;
  out.images = generator->forward(out.latents, generator->one_hot(out.labels));
  return out;
}

}  // namespace

AttackSampler::AttackSampler(const AttackConfig& config, Generator generator, Split split)
    : config_(config),
      generator_(std::move(generator)),
      source_rng_(split_seed(config.source.seed, split)),
      location_rng_(split_seed(config.location.seed, split)),
      transforms_([&] {
        auto t = config.transforms;
        t.seed = split_seed(t.seed, split);
        return t;
      }()) {
  if (!config_.source.generated() && config_.source.kind != SourceKind::kFixedImage) {
    pool_ = source_pool(config_.source, config_.target_class, split);
  }
}

void AttackSampler::mix(uint64_t value) {
  digest_ ^= value;
  digest_ *= 0x100000001b3ull;
}

SourceSet AttackSampler::sources(int64_t count) {
  return sample_sources(config_.source, config_.target_class, count, generator_, pool_, source_rng_,
                        [this](uint64_t v) { mix(v); });
}

LocationSample AttackSampler::location() {
  LocationSample s;
  if (config_.location.kind == LocationKind::kFixed) {
    s.fixed = config_.location.fixed;
  } else {
    s.u = location_rng_.uniform();
    s.v = location_rng_.uniform();
  }
  mix(std::bit_cast<uint64_t>(s.u));
  mix(std::bit_cast<uint64_t>(s.v));
  return s;
}

SampledTransform AttackSampler::transform() {
  auto t = transforms_.next();
  mix(std::hash<std::string>{}(t.to_json().dump()));
  return t;
}

Minibatch AttackSampler::next(int64_t batch_size) {
  Minibatch batch;
  batch.sources = sources(batch_size);
  for (int64_t b = 0; b < batch_size; ++b) batch.transforms.push_back(transform());
  for (int64_t b = 0; b < batch_size; ++b) batch.locations.push_back(location());
  return batch;
}

SourceSet draw_sources(const SourceDistribution& distribution, int64_t target_class, int64_t count,
                       Generator& generator, Split split) {
  LabeledImages pool;
  if (!distribution.generated() && distribution.kind != SourceKind::kFixedImage) {
    pool = source_pool(distribution, target_class, split);
  }
  Rng rng(split_seed(distribution.seed, split));
  return sample_sources(distribution, target_class, count, generator, pool, rng, [](uint64_t) {});
}

// ------------------------------------------------------------ perturbation

std::vector<torch::Tensor> Perturbation::parameters() const {
  std::vector<torch::Tensor> out;
  for (const auto* t : {&patch_latent, &class_vector, &pixel_logits, &insertion, &latent_delta}) {
    if (t->defined() && t->requires_grad()) out.push_back(*t);
  }
  return out;
}

Perturbation Perturbation::clone() const {
  Perturbation p = *this;
  for (auto* t : {&p.patch_latent, &p.class_vector, &p.pixel_logits, &p.insertion, &p.latent_delta, &p.base_latent}) {
    if (t->defined()) *t = t->detach().clone().requires_grad_(t->requires_grad());
  }
  return p;
}

AttackModels AttackModels::resolve(const AttackConfig& config, ModelSuite& suite) {
  for (const auto& [role, hash] : config.model_hashes) {
    auto it = suite.hashes.find(role);
    if (it == suite.hashes.end()) throw ConfigError("pinned model '" + role + "' not in suite", "model_hashes." + role);
    if (it->second != hash) throw ConfigError("weights do not match pinned hash", "model_hashes." + role);
  }
  AttackModels m;
  m.generator = suite.generator;
  m.discriminator = suite.discriminator;
  for (const auto& role : config.victims) m.victims.push_back(suite.classifier(role));
  const bool needs_aux = config.weights.entropy != 0.0 || config.weights.anti_target != 0.0;
  if (needs_aux || suite.classifiers.count(config.auxiliary)) m.auxiliary = suite.classifier(config.auxiliary);
  if (suite.classifiers.count(config.perceptual_extractor)) {
    m.perceptual_extractor = suite.classifier(config.perceptual_extractor);
  }
  return m;
}

torch::ScalarType AttackModels::dtype() const { return generator->parameters().front().scalar_type(); }

Perturbation init_perturbation(const AttackConfig& config, AttackModels& models) {
  config.validate();
  Rng rng(derive_seed(config.seed, 10));
  auto gen = torch_generator(derive_seed(config.seed, 11));
  auto& generator = models.generator;
  const auto dtype = models.dtype();
  const auto dim = generator->input_dim();
  const auto k = generator->num_classes();
  torch::NoGradGuard no_grad;

  Perturbation p;
  p.mode = config.mode;
  const bool uses_generator = config.mode != AttackMode::kPatch || config.ablation.use_generator;
  if (config.latent_epsilon > 0.0 && uses_generator) {
    p.latent_delta = torch::zeros({1, dim}, dtype).requires_grad_(true);
  }
  if (config.mode == AttackMode::kPatch) {
    auto z = torch::randn({1, dim}, gen, torch::TensorOptions().dtype(torch::kFloat64)).to(dtype);
    auto drawn = rng.integer(0, k - 2);
    const int64_t start_class = drawn >= config.target_class ? drawn + 1 : drawn;
    auto c = generator->one_hot(torch::tensor({start_class}));
    p.base_class = start_class;
    if (config.ablation.use_generator) {
      p.patch_latent = z.clone().requires_grad_(true);
      p.class_vector = c.clone().requires_grad_(true);
    } else {
      auto start = generator->forward(z, c)[0].clamp(1e-3, 1.0 - 1e-3);
      p.pixel_logits = torch::log(start / (1.0 - start)).requires_grad_(true);
    }
    return p;
  }

  p.base_latent = torch::randn({1, dim}, gen, torch::TensorOptions().dtype(torch::kFloat64)).to(dtype);
  if (config.source.kind == SourceKind::kGeneratedClass) {
    p.base_class = config.source.class_id;
  } else {
    p.base_class = rng.integer(0, k - 1);
  }
  auto reference = generator->activations_at(p.base_latent, generator->one_hot(torch::tensor({p.base_class})), config.layer)
                       .values[0];
  const auto& info = generator->layer(config.layer);
  if (config.mode == AttackMode::kChannel) {
    const auto count = channel_count(info.channels, config.area_fraction);
    p.channels = {rng.integer(0, info.channels - count), count};
    p.insertion = reference.slice(0, p.channels.start, p.channels.start + count).clone().requires_grad_(true);
  } else {
    const auto s = std::max<int64_t>(1, window_side(info.height, config.area_fraction));
    p.offset = {rng.integer(0, info.height - s), rng.integer(0, info.width - s)};
    p.insertion = reference.index({Slice(), Slice(p.offset.row, p.offset.row + s), Slice(p.offset.col, p.offset.col + s)})
                      .clone()
                      .requires_grad_(true);
  }
  return p;
}

torch::Tensor patch_image(const AttackConfig& config, const Perturbation& p, AttackModels& models) {
  if (!config.ablation.use_generator) return torch::sigmoid(p.pixel_logits);
  auto z = p.latent_delta.defined() ? p.patch_latent + p.latent_delta : p.patch_latent;
  return models.generator->forward(z, p.class_vector)[0];
}

namespace {

struct LatentInsertion {
  AttackMode mode;
  std::string layer;
  torch::Tensor insertion;
  torch::Tensor latent_delta;
  Location offset;
  ChannelBlock channels;
};

torch::Tensor decode_with_insertion(Generator& generator, const LatentInsertion& ins, const torch::Tensor& z,
                                    const torch::Tensor& labels) {
  auto latent = ins.latent_delta.defined() ? z + ins.latent_delta : z;
  auto y = generator->one_hot(labels);
  auto act = generator->activations_at(latent, y, ins.layer);
  act.values = ins.mode == AttackMode::kChannel ? apply_channel(act.values, ins.insertion, ins.channels)
                                                : apply_region(act.values, ins.insertion, ins.offset);
  return generator->forward_from(act, y);
}

LatentInsertion insertion_of(const AttackConfig& config, const Perturbation& p) {
  return {config.mode, config.layer, p.insertion, p.latent_delta, p.offset, p.channels};
}

LatentInsertion insertion_of(const AdversarialArtifact& a) {
  return {a.mode, a.layer, a.insertion, a.latent_delta, a.offset, a.channels};
}

int64_t feature_resolution(AttackModels& models) {
  return models.discriminator ? models.discriminator->resolution() : kImageSide;
}

}  // namespace

Composition compose(const AttackConfig& config, const Perturbation& perturbation, AttackModels& models,
                    const Minibatch& batch) {
  if (perturbation.mode != config.mode) throw ConfigError("perturbation mode does not match config", "mode");
  const auto& x = batch.sources.images;
  const auto n = batch.size();
  if (static_cast<int64_t>(batch.transforms.size()) != n || static_cast<int64_t>(batch.locations.size()) != n) {
    throw InputError("minibatch needs one transform and one location per source");
  }
  const auto height = x.size(2), width = x.size(3);
  const auto resolution = feature_resolution(models);
  auto& generator = models.generator;
  Composition out;
  std::vector<torch::Tensor> items;
  items.reserve(static_cast<size_t>(n));

  switch (config.mode) {
    case AttackMode::kPatch: {
      auto patch = patch_image(config, perturbation, models);
      const auto side = window_side(width, config.area_fraction);
      for (int64_t b = 0; b < n; ++b) {
        const auto where = batch.locations[b].resolve(height, width, side, side, config.location.margin);
        items.push_back(apply_transform(batch.transforms[b], insert_patch_sized(x[b], patch, where, side)));
      }
      out.feature = patch.unsqueeze(0);
      out.extracted = resize_bilinear(patch, resolution, resolution).unsqueeze(0);
      break;
    }
    case AttackMode::kRegion:
    case AttackMode::kChannel: {
      if (!batch.sources.latents.defined()) throw ConfigError("latent attacks need generated sources", "source.kind");
      auto decoded = decode_with_insertion(generator, insertion_of(config, perturbation), batch.sources.latents,
                                           batch.sources.labels);
      for (int64_t b = 0; b < n; ++b) items.push_back(apply_transform(batch.transforms[b], decoded[b]));
      out.feature = decoded;
      out.extracted = resize_bilinear(decoded, resolution, resolution);
      out.decoded = decoded;
      out.original = x;
      break;
    }
    case AttackMode::kGeneralizedPatch: {
      auto labels = torch::tensor({perturbation.base_class});
      auto decoded = decode_with_insertion(generator, insertion_of(config, perturbation), perturbation.base_latent, labels);
      torch::Tensor original;
      {
        torch::NoGradGuard no_grad;
        original = generator->forward(perturbation.base_latent, generator->one_hot(labels));
      }
      auto gp = extract_generalized_patch(original[0], decoded[0], config.smoothing_sigma);
      const auto box = mask_bounding_box(gp.mask);
      for (int64_t b = 0; b < n; ++b) {
        const auto where = batch.locations[b].resolve(height, width, box.height, box.width, config.location.margin);
        items.push_back(apply_transform(batch.transforms[b], overlay_generalized_patch(x[b], gp.masked_patch, gp.mask, where)));
      }
      out.feature = gp.masked_patch.unsqueeze(0);
      out.extracted = extract_and_resize(gp.masked_patch, gp.mask, resolution).unsqueeze(0);
      out.decoded = decoded;
      out.original = original;
      out.mask = gp.mask;
      break;
    }
  }
  out.adversarial = torch::stack(items);
  return out;
}

torch::Tensor compose_adversarial(const AttackConfig& config, const Perturbation& perturbation, AttackModels& models,
                                  const Minibatch& batch) {
  return compose(config, perturbation, models, batch).adversarial;
}

std::vector<double> LossBreakdown::row() const {
  return {total.item<double>(),          xent.item<double>(),    reg.tv.item<double>(), reg.disc.item<double>(),
          reg.entropy.item<double>(), reg.patch_xent.item<double>()};
}

LossBreakdown attack_step_loss(const AttackConfig& config, const Perturbation& perturbation, AttackModels& models,
                               const Minibatch& batch) {
  auto composition = compose(config, perturbation, models, batch);
  const auto n = composition.adversarial.size(0);
  auto targets = torch::full({n}, config.target_class, torch::kInt64);
  torch::Tensor xent;
  for (auto& victim : models.victims) {
    auto term = F::cross_entropy(victim->forward(composition.adversarial), targets);
    xent = xent.defined() ? xent + term : term;
  }
  xent = xent / static_cast<double>(models.victims.size());

  RegularizerContext context;
  context.weights = config.weights;
  context.use_disc_term = config.ablation.use_disc_term;
  context.use_entropy_term = config.ablation.use_entropy_term;
  context.use_patch_xent_term = config.ablation.use_patch_xent_term;
  context.use_perceptual_term = config.mode == AttackMode::kRegion || config.mode == AttackMode::kGeneralizedPatch;
  context.target_class = config.target_class;
  context.discriminator = models.discriminator ? &models.discriminator : nullptr;
  context.auxiliary = models.auxiliary ? &models.auxiliary : nullptr;
  context.perceptual_extractor = models.perceptual_extractor ? &models.perceptual_extractor : nullptr;

  LossBreakdown out;
  out.xent = xent;
  out.reg = l_reg(context, composition.feature, composition.extracted, composition.decoded, composition.original);
  out.total = xent + out.reg.total();
  if (!std::isfinite(out.total.item<double>())) {
    std::ostringstream msg;
    msg << "non-finite attack loss (xent=" << xent.item<double>() << ", tv=" << out.reg.tv.item<double>()
        << ", disc=" << out.reg.disc.item<double>() << ", entropy=" << out.reg.entropy.item<double>()
        << ", patch_xent=" << out.reg.patch_xent.item<double>()
        << ", perceptual=" << out.reg.perceptual.item<double>() << ")";
    throw OptimizationError(msg.str());
  }
  return out;
}

// ---------------------------------------------------------------- artifacts

torch::Tensor apply_artifact(const AdversarialArtifact& artifact, Generator& generator, const SourceSet& sources,
                             const std::vector<LocationSample>& locations,
                             const std::vector<SampledTransform>& transforms, int64_t margin) {
  const auto n = sources.size();
  if (static_cast<int64_t>(locations.size()) != n || static_cast<int64_t>(transforms.size()) != n) {
    throw InputError("need one location and one transform per source");
  }
  const auto& x = sources.images;
  const auto height = x.size(2), width = x.size(3);
  std::vector<torch::Tensor> items;
  items.reserve(static_cast<size_t>(n));
  switch (artifact.mode) {
    case AttackMode::kPatch: {
      const auto side = window_side(width, artifact.area_fraction);
      auto patch = artifact.patch.to(x.scalar_type());
      for (int64_t b = 0; b < n; ++b) {
        const auto where = locations[b].resolve(height, width, side, side, margin);
        items.push_back(apply_transform(transforms[b], insert_patch_sized(x[b], patch, where, side)));
      }
      break;
    }
    case AttackMode::kRegion:
    case AttackMode::kChannel: {
      if (!sources.latents.defined()) throw InputError(mode_name(artifact.mode) + " artifacts need generated sources");
      auto decoded = decode_with_insertion(generator, insertion_of(artifact), sources.latents, sources.labels);
      for (int64_t b = 0; b < n; ++b) items.push_back(apply_transform(transforms[b], decoded[b]));
      break;
    }
    case AttackMode::kGeneralizedPatch: {
      const auto box = mask_bounding_box(artifact.mask);
      auto patch = artifact.patch.to(x.scalar_type());
      for (int64_t b = 0; b < n; ++b) {
        const auto where = locations[b].resolve(height, width, box.height, box.width, margin);
        items.push_back(apply_transform(transforms[b], overlay_generalized_patch(x[b], patch, artifact.mask, where)));
      }
      break;
    }
  }
  return torch::stack(items);
}

torch::Tensor artifact_feature(const AdversarialArtifact& artifact, int64_t resolution) {
  if (artifact.mode == AttackMode::kGeneralizedPatch) return extract_and_resize(artifact.patch, artifact.mask, resolution);
  return resize_bilinear(artifact.patch, resolution, resolution);
}

AdversarialArtifact make_artifact(const AttackConfig& config, const Perturbation& perturbation, AttackModels& models) {
  torch::NoGradGuard no_grad;
  AdversarialArtifact a;
  a.mode = config.mode;
  a.target_class = config.target_class;
  a.layer = is_latent_mode(config.mode) ? config.layer : "";
  a.area_fraction = config.area_fraction;
  a.use_generator = config.ablation.use_generator;
  a.config = config.to_json();
  a.config_hash = config.hash();
  a.base_class = perturbation.base_class;
  if (perturbation.latent_delta.defined()) a.latent_delta = perturbation.latent_delta.detach().clone();
  switch (config.mode) {
    case AttackMode::kPatch:
      a.patch = patch_image(config, perturbation, models).detach().clamp(0.0, 1.0).clone();
      if (perturbation.patch_latent.defined()) a.base_latent = perturbation.patch_latent.detach().clone();
      break;
    case AttackMode::kRegion:
    case AttackMode::kChannel:
    case AttackMode::kGeneralizedPatch: {
      a.insertion = perturbation.insertion.detach().clone();
      a.offset = perturbation.offset;
      a.channels = perturbation.channels;
      a.base_latent = perturbation.base_latent.detach().clone();
      auto labels = torch::tensor({perturbation.base_class});
      auto decoded = decode_with_insertion(models.generator, insertion_of(a), a.base_latent, labels)[0];
      if (config.mode == AttackMode::kGeneralizedPatch) {
        auto original = models.generator->forward(a.base_latent, models.generator->one_hot(labels))[0];
        auto gp = extract_generalized_patch(original, decoded, config.smoothing_sigma);
        a.mask = gp.mask.clone();
        a.patch = gp.masked_patch.clamp(0.0, 1.0).clone();
      } else {
        a.patch = decoded.clamp(0.0, 1.0).clone();
      }
      break;
    }
  }
  return a;
}

void measure_artifact(AdversarialArtifact& artifact, const AttackConfig& config, AttackModels& models) {
  torch::NoGradGuard no_grad;
  auto& victim = models.victims.front();
  auto feature = artifact_feature(artifact, victim->options().input_size).to(models.dtype());
  auto q = classify(victim, feature)[0];
  artifact.disguise_class = q.argmax().item<int64_t>();
  artifact.disguise_confidence = q[artifact.disguise_class].item<double>();
  artifact.disguised = artifact.disguise_class != artifact.target_class;

  AttackSampler sampler(config, models.generator, Split::kHeldout);
  auto batch = sampler.next(config.eval_sources);
  double total = 0.0;
  int64_t hits = 0;
  for (int64_t start = 0; start < batch.size(); start += 64) {
    const auto end = std::min(start + 64, batch.size());
    std::vector<LocationSample> loc(batch.locations.begin() + start, batch.locations.begin() + end);
    std::vector<SampledTransform> tr(batch.transforms.begin() + start, batch.transforms.begin() + end);
    auto images = apply_artifact(artifact, models.generator, batch.sources.slice(start, end), loc, tr,
                                 config.location.margin);
    auto probs = classify(victim, images);
    total += probs.select(1, artifact.target_class).sum().item<double>();
    hits += (probs.argmax(1) == artifact.target_class).sum().item<int64_t>();
  }
  artifact.mean_target_confidence = total / static_cast<double>(batch.size());
  artifact.success_rate = static_cast<double>(hits) / static_cast<double>(batch.size());
}

namespace {

void restore(const Perturbation& from, Perturbation& to) {
  torch::NoGradGuard no_grad;
  for (auto [src, dst] : {std::pair{&from.patch_latent, &to.patch_latent}, std::pair{&from.class_vector, &to.class_vector},
                          std::pair{&from.pixel_logits, &to.pixel_logits}, std::pair{&from.insertion, &to.insertion},
                          std::pair{&from.latent_delta, &to.latent_delta}}) {
    if (src->defined()) dst->copy_(*src);
  }
}

}  // namespace

AdversarialArtifact run_attack(const AttackConfig& config, ModelSuite& suite, const AttackOptions& options) {
  config.validate();
  auto models = AttackModels::resolve(config, suite);
  return run_attack(config, models, options);
}

AdversarialArtifact run_attack(const AttackConfig& config, AttackModels& models, const AttackOptions& options) {
  config.validate();
  auto perturbation = init_perturbation(config, models);
  AttackSampler sampler(config, models.generator, Split::kTraining);
  auto params = perturbation.parameters();
  double step_size = config.step_size;
  auto optimizer = std::make_unique<torch::optim::Adam>(params, torch::optim::AdamOptions(step_size));
  auto checkpoint = perturbation.clone();
  int retries = 0;
  std::vector<std::vector<double>> curve;
  curve.reserve(static_cast<size_t>(config.steps));

  for (int64_t step = 0; step < config.steps; ++step) {
    auto batch = sampler.next(config.batch_size);
    LossBreakdown loss;
    try {
      loss = attack_step_loss(config, perturbation, models, batch);
    } catch (const OptimizationError& e) {
      if (++retries > 3) {
        throw AttackDiverged(std::string(e.what()) + " at step " + std::to_string(step) + " after 3 step-size halvings",
                             make_artifact(config, checkpoint, models));
      }
      step_size *= 0.5;
      restore(checkpoint, perturbation);
      optimizer = std::make_unique<torch::optim::Adam>(params, torch::optim::AdamOptions(step_size));
      --step;  // redo the step from the restored state
      continue;
    }
    checkpoint = perturbation.clone();
    auto row = loss.row();
    row.insert(row.begin(), static_cast<double>(step));
    if (options.on_step) options.on_step(step, row);
    curve.push_back(std::move(row));

    optimizer->zero_grad();
    loss.total.backward();
    optimizer->step();
    if (perturbation.latent_delta.defined()) {
      torch::NoGradGuard no_grad;
      perturbation.latent_delta.clamp_(-config.latent_epsilon, config.latent_epsilon);
    }
  }

  auto artifact = make_artifact(config, perturbation, models);
  artifact.loss_curve = std::move(curve);
  artifact.training = {{"steps", config.steps},
                       {"retries", retries},
                       {"final_step_size", step_size},
                       {"sampler_digest", std::to_string(sampler.digest())}};
  if (!options.skip_metrics) measure_artifact(artifact, config, models);
  return artifact;
}

// -------------------------------------------------------------- persistence

json AdversarialArtifact::summary() const {
  return {{"mode", mode_name(mode)},
          {"target_class", target_class},
          {"disguise_class", disguise_class},
          {"disguise_confidence", disguise_confidence},
          {"disguised", disguised},
          {"mean_target_confidence", mean_target_confidence},
          {"success_rate", success_rate},
          {"config_hash", config_hash}};
}

void AdversarialArtifact::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  json files = json::object();
  auto put = [&](const char* name, const torch::Tensor& t) {
    if (!t.defined()) return;
    const std::string file = std::string(name) + ".fvt";
    write_tensor(dir / file, t);
    files[name] = file;
  };
  put("patch", patch);
  put("mask", mask);
  put("insertion", insertion);
  put("latent_delta", latent_delta);
  put("base_latent", base_latent);
  write_png(dir / "patch.png", ImageTensor(patch.to(torch::kFloat32)));
  if (mask.defined()) {
    write_png(dir / "mask.png", ImageTensor(mask.to(torch::kFloat32).unsqueeze(0).repeat({3, 1, 1})));
  }
  std::ostringstream csv;
  csv << "step,total,xent,tv,disc,entropy,patch_xent\n";
  csv.precision(9);
  for (const auto& row : loss_curve) {
    csv << static_cast<int64_t>(row[0]);
    for (size_t i = 1; i < row.size(); ++i) csv << ',' << row[i];
    csv << '\n';
  }
  write_file_atomic(dir / "loss_curve.csv", csv.str());

  json j = summary();
  j["config"] = config;
  j["training"] = training;
  j["layer"] = layer;
  j["offset"] = {offset.row, offset.col};
  j["channels"] = {channels.start, channels.count};
  j["area_fraction"] = area_fraction;
  j["base_class"] = base_class;
  j["use_generator"] = use_generator;
  j["files"] = files;
  write_file_atomic(dir / "artifact.json", j.dump(2));
}

AdversarialArtifact AdversarialArtifact::load(const std::filesystem::path& dir) {
  const auto j = json::parse(read_file(dir / "artifact.json"));
  AdversarialArtifact a;
  a.mode = mode_from_name(j.at("mode").get<std::string>());
  a.target_class = j.at("target_class").get<int64_t>();
  a.disguise_class = j.at("disguise_class").get<int64_t>();
  a.disguise_confidence = j.at("disguise_confidence").get<double>();
  a.disguised = j.at("disguised").get<bool>();
  a.mean_target_confidence = j.at("mean_target_confidence").get<double>();
  a.success_rate = j.value("success_rate", 0.0);
  a.config_hash = j.at("config_hash").get<std::string>();
  a.config = j.at("config");
  a.training = j.value("training", json::object());
  a.layer = j.at("layer").get<std::string>();
  a.offset = {j.at("offset")[0].get<int64_t>(), j.at("offset")[1].get<int64_t>()};
  a.channels = {j.at("channels")[0].get<int64_t>(), j.at("channels")[1].get<int64_t>()};
  a.area_fraction = j.at("area_fraction").get<double>();
  a.base_class = j.at("base_class").get<int64_t>();
  a.use_generator = j.at("use_generator").get<bool>();
  const auto& files = j.at("files");
  auto get = [&](const char* name) {
    return files.contains(name) ? read_tensor(dir / files.at(name).get<std::string>()) : torch::Tensor();
  };
  a.patch = get("patch");
  a.mask = get("mask");
  a.insertion = get("insertion");
  a.latent_delta = get("latent_delta");
  a.base_latent = get("base_latent");
  std::ifstream csv(dir / "loss_curve.csv");
  std::string line;
  std::getline(csv, line);
  while (std::getline(csv, line)) {
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    a.loss_curve.push_back(std::move(row));
  }
  return a;
}

}  // namespace featadv
