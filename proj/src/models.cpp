#include "featadv/models.hpp"

#include <fstream>

#include "featadv/errors.hpp"
#include "featadv/hashing.hpp"
#include "featadv/tensor_io.hpp"

namespace featadv {

namespace F = torch::nn::functional;
using nlohmann::json;

// ---------------------------------------------------------------- generator

json GeneratorOptions::to_json() const {
  return {{"latent_dim", latent_dim},
          {"num_classes", num_classes},
          {"embed_dim", embed_dim},
          {"base_channels", base_channels},
          {"num_blocks", num_blocks}};
}

GeneratorOptions GeneratorOptions::from_json(const json& j) {
  GeneratorOptions o;
  o.latent_dim = j.at("latent_dim").get<int64_t>();
  o.num_classes = j.at("num_classes").get<int64_t>();
  o.embed_dim = j.at("embed_dim").get<int64_t>();
  o.base_channels = j.at("base_channels").get<int64_t>();
  o.num_blocks = j.at("num_blocks").get<int64_t>();
  return o;
}

GeneratorImpl::GeneratorImpl(GeneratorOptions options) : options_(std::move(options)) {
  const auto base = options_.base_channels;
  catalog_.push_back({"input", options_.latent_dim, 1, 1, false, false});
  for (int64_t b = 0; b < options_.num_blocks; ++b) {
    catalog_.push_back({"block" + std::to_string(b), base >> b, 4 << b, 4 << b, true, true});
  }
  embed_ = register_module(
      "embed", torch::nn::Linear(torch::nn::LinearOptions(options_.num_classes, options_.embed_dim).bias(false)));
  fc_ = register_module("fc", torch::nn::Linear(options_.latent_dim + options_.embed_dim, base * 16));
  fc_norm_ = register_module("fc_norm", torch::nn::BatchNorm2d(base));
  for (int64_t b = 1; b < options_.num_blocks; ++b) {
    convs_.push_back(register_module(
        "conv" + std::to_string(b),
        torch::nn::Conv2d(torch::nn::Conv2dOptions(base >> (b - 1), base >> b, 3).padding(1))));
    norms_.push_back(register_module("norm" + std::to_string(b), torch::nn::BatchNorm2d(base >> b)));
  }
  to_rgb_ = register_module(
      "to_rgb", torch::nn::Conv2d(torch::nn::Conv2dOptions(base >> (options_.num_blocks - 1), 3, 3).padding(1)));
}

const LayerInfo& GeneratorImpl::layer(const std::string& layer_id) const { return catalog_[layer_index(layer_id)]; }

size_t GeneratorImpl::layer_index(const std::string& layer_id) const {
  for (size_t i = 0; i < catalog_.size(); ++i) {
    if (catalog_[i].id == layer_id) return i;
  }
  throw ConfigError("unknown generator layer '" + layer_id + "'", "layer");
}

void GeneratorImpl::check_conditioning(const torch::Tensor& z, const torch::Tensor& class_vector) const {
  if (z.dim() != 2 || z.size(1) != options_.latent_dim) {
    throw ConfigError("latent must be [B," + std::to_string(options_.latent_dim) + "]", "z");
  }
  if (class_vector.dim() != 2 || class_vector.size(1) != options_.num_classes || class_vector.size(0) != z.size(0)) {
    throw ConfigError("class vector must be [B," + std::to_string(options_.num_classes) + "]", "y");
  }
}

torch::Tensor GeneratorImpl::run_stage(size_t stage, const torch::Tensor& x, const torch::Tensor& class_vector) {
  if (stage == 1) {
    auto h = torch::cat({x.flatten(1), embed_->forward(class_vector)}, 1);
    h = fc_->forward(h).view({x.size(0), options_.base_channels, 4, 4});
    return torch::relu(fc_norm_->forward(h));
  }
  auto h = F::interpolate(x, F::InterpolateFuncOptions()
                                 .scale_factor(std::vector<double>{2.0, 2.0})
                                 .mode(torch::kNearest));
  h = convs_[stage - 2]->forward(h);
  return torch::relu(norms_[stage - 2]->forward(h));
}

torch::Tensor GeneratorImpl::head(const torch::Tensor& x) { return torch::sigmoid(to_rgb_->forward(x)); }

torch::Tensor GeneratorImpl::forward(const torch::Tensor& z, const torch::Tensor& class_vector) {
  check_conditioning(z, class_vector);
  auto x = z.view({z.size(0), options_.latent_dim, 1, 1});
  for (size_t s = 1; s < catalog_.size(); ++s) x = run_stage(s, x, class_vector);
  return head(x);
}

LatentActivation GeneratorImpl::activations_at(const torch::Tensor& z, const torch::Tensor& class_vector,
                                               const std::string& layer_id) {
  const auto index = layer_index(layer_id);
  check_conditioning(z, class_vector);
  auto x = z.view({z.size(0), options_.latent_dim, 1, 1});
  for (size_t s = 1; s <= index; ++s) x = run_stage(s, x, class_vector);
  return {layer_id, x, catalog_[index].post_activation};
}

torch::Tensor GeneratorImpl::forward_from(const LatentActivation& activation, const torch::Tensor& class_vector) {
  const auto index = layer_index(activation.layer_id);
  const auto& info = catalog_[index];
  const auto& v = activation.values;
  if (v.dim() != 4 || v.size(1) != info.channels || v.size(2) != info.height || v.size(3) != info.width) {
    throw ConfigError("activation shape does not match layer '" + info.id + "'", "activation");
  }
  auto x = v;
  if (index == 0) check_conditioning(v.flatten(1), class_vector);
  for (size_t s = index + 1; s < catalog_.size(); ++s) x = run_stage(s, x, class_vector);
  return head(x);
}

torch::Tensor GeneratorImpl::one_hot(const torch::Tensor& labels) const {
  return F::one_hot(labels.to(torch::kInt64), options_.num_classes).to(fc_->weight.scalar_type());
}

ImageTensor generate(Generator& generator, const torch::Tensor& z, int64_t label) {
  if (z.dim() != 1 || z.size(0) != generator->input_dim()) {
    throw ConfigError("latent must have length " + std::to_string(generator->input_dim()), "z");
  }
  if (label < 0 || label >= generator->num_classes()) throw ConfigError("class id out of range", "y");
  auto y = generator->one_hot(torch::tensor({label}));
  return ImageTensor(generator->forward(z.unsqueeze(0).to(y.scalar_type()), y).squeeze(0));
}

// ------------------------------------------------------------ discriminator

json DiscriminatorOptions::to_json() const {
  return {{"num_classes", num_classes}, {"base_channels", base_channels}, {"resolution", resolution}};
}

DiscriminatorOptions DiscriminatorOptions::from_json(const json& j) {
  DiscriminatorOptions o;
  o.num_classes = j.at("num_classes").get<int64_t>();
  o.base_channels = j.at("base_channels").get<int64_t>();
  o.resolution = j.at("resolution").get<int64_t>();
  return o;
}

DiscriminatorImpl::DiscriminatorImpl(DiscriminatorOptions options) : options_(std::move(options)) {
  const auto c = options_.base_channels;
  auto down = [](int64_t in, int64_t out) {
    return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 4).stride(2).padding(1));
  };
  conv1_ = register_module("conv1", down(3, c));
  conv2_ = register_module("conv2", down(c, 2 * c));
  conv3_ = register_module("conv3", down(2 * c, 4 * c));
  out_ = register_module("out", torch::nn::Linear(4 * c, 1));
  embed_ = register_module(
      "embed", torch::nn::Linear(torch::nn::LinearOptions(options_.num_classes, 4 * c).bias(false)));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& images, const torch::Tensor& class_vector) {
  auto h = F::leaky_relu(conv1_->forward(images * 2.0 - 1.0), F::LeakyReLUFuncOptions().negative_slope(0.2));
  h = F::leaky_relu(conv2_->forward(h), F::LeakyReLUFuncOptions().negative_slope(0.2));
  h = F::leaky_relu(conv3_->forward(h), F::LeakyReLUFuncOptions().negative_slope(0.2));
  h = h.sum({2, 3});
  return out_->forward(h).squeeze(1) + (embed_->forward(class_vector) * h).sum(1);
}

torch::Tensor DiscriminatorImpl::discriminate(const torch::Tensor& images) {
  auto batch = images.dim() == 3 ? images.unsqueeze(0) : images;
  check_finite_images(batch);
  if (batch.size(2) != options_.resolution || batch.size(3) != options_.resolution) {
    throw InputError("discriminator expects " + std::to_string(options_.resolution) + "x" +
                     std::to_string(options_.resolution) + " input");
  }
  auto uniform = torch::full({batch.size(0), options_.num_classes}, 1.0 / static_cast<double>(options_.num_classes),
                             batch.options());
  return forward(batch, uniform);
}

// --------------------------------------------------------------- classifier

namespace {

std::string pooling_name(Pooling p) {
  switch (p) {
    case Pooling::kMax:
      return "max";
    case Pooling::kAvg:
      return "avg";
    case Pooling::kStride:
      return "stride";
  }
  return "max";
}

Pooling pooling_from(const std::string& name) {
  if (name == "max") return Pooling::kMax;
  if (name == "avg") return Pooling::kAvg;
  if (name == "stride") return Pooling::kStride;
  throw ConfigError("unknown pooling '" + name + "'", "pooling");
}

}  // namespace

json ClassifierOptions::to_json() const {
  return {{"arch_id", arch_id},   {"widths", widths}, {"convs_per_stage", convs_per_stage},
          {"pooling", pooling_name(pooling)}, {"leaky", leaky},   {"kernel", kernel},
          {"num_classes", num_classes}, {"input_size", input_size}, {"mean", mean},
          {"stddev", stddev}, {"max_head", max_head}};
}

ClassifierOptions ClassifierOptions::from_json(const json& j) {
  ClassifierOptions o;
  o.arch_id = j.at("arch_id").get<std::string>();
  o.widths = j.at("widths").get<std::vector<int64_t>>();
  o.convs_per_stage = j.at("convs_per_stage").get<int64_t>();
  o.pooling = pooling_from(j.at("pooling").get<std::string>());
  o.leaky = j.at("leaky").get<bool>();
  o.kernel = j.at("kernel").get<int64_t>();
  o.num_classes = j.at("num_classes").get<int64_t>();
  o.input_size = j.at("input_size").get<int64_t>();
  o.mean = j.at("mean").get<double>();
  o.stddev = j.at("stddev").get<double>();
  o.max_head = j.value("max_head", false);
  return o;
}

ClassifierOptions ClassifierOptions::preset(const std::string& arch_id) {
  ClassifierOptions o;
  o.arch_id = arch_id;
  if (arch_id == "convnet-a") {
    o.widths = {16, 32, 64};
    o.convs_per_stage = 2;
  } else if (arch_id == "convnet-b") {
    o.widths = {24, 48, 96};
    o.convs_per_stage = 1;
    o.pooling = Pooling::kAvg;
  } else if (arch_id == "convnet-c") {
    o.widths = {32, 64, 128};
    o.convs_per_stage = 1;
    o.pooling = Pooling::kStride;
    o.leaky = true;
  } else if (arch_id == "convnet-d") {
    o.widths = {32, 64};
    o.convs_per_stage = 1;
    o.pooling = Pooling::kAvg;
    o.kernel = 5;
  } else if (arch_id == "convnet-e") {
    o.widths = {16, 32, 64, 64};
    o.convs_per_stage = 1;
    o.leaky = true;
  } else {
    throw ConfigError("unknown classifier architecture '" + arch_id + "'", "arch_id");
  }
  return o;
}

ClassifierImpl::ClassifierImpl(ClassifierOptions options) : options_(std::move(options)) {
  int64_t in = 3;
  const auto n = static_cast<int64_t>(options_.widths.size());
  for (int64_t s = 0; s < n; ++s) {
    torch::nn::Sequential stage;
    const auto width = options_.widths[s];
    for (int64_t c = 0; c < options_.convs_per_stage; ++c) {
      const int64_t stride = (options_.pooling == Pooling::kStride && s > 0 && c == 0) ? 2 : 1;
      stage->push_back(torch::nn::Conv2d(
          torch::nn::Conv2dOptions(in, width, options_.kernel).stride(stride).padding(options_.kernel / 2)));
      if (options_.leaky) {
        stage->push_back(torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.1)));
      } else {
        stage->push_back(torch::nn::ReLU());
      }
      in = width;
    }
    if (s + 1 < n && options_.pooling == Pooling::kMax) stage->push_back(torch::nn::MaxPool2d(2));
    if (s + 1 < n && options_.pooling == Pooling::kAvg) stage->push_back(torch::nn::AvgPool2d(2));
    stages_.push_back(register_module("stage" + std::to_string(s), stage));
  }
  head_ = register_module("head", torch::nn::Linear(in, options_.num_classes));
}

torch::Tensor ClassifierImpl::preprocess(const torch::Tensor& images) const {
  auto batch = images.dim() == 3 ? images.unsqueeze(0) : images;
  batch = resize_bilinear(batch, options_.input_size, options_.input_size);
  return (batch - options_.mean) / options_.stddev;
}

torch::Tensor ClassifierImpl::forward(const torch::Tensor& images) {
  auto x = preprocess(images);
  for (auto& stage : stages_) x = stage->forward(x);
  return head_->forward(options_.max_head ? x.amax({2, 3}) : x.mean({2, 3}));
}

std::vector<torch::Tensor> ClassifierImpl::stage_features(const torch::Tensor& images) {
  std::vector<torch::Tensor> out;
  auto x = preprocess(images);
  for (auto& stage : stages_) {
    x = stage->forward(x);
    out.push_back(x);
  }
  return out;
}

std::vector<torch::Tensor> ClassifierImpl::last_block_parameters() {
  auto params = stages_.back()->parameters();
  for (auto& p : head_->parameters()) params.push_back(p);
  return params;
}

torch::Tensor classify(Classifier& classifier, const torch::Tensor& images) {
  check_finite_images(images);
  return torch::softmax(classifier->forward(images), 1);
}

// ------------------------------------------------------------------ weights

namespace {

std::vector<std::pair<std::string, torch::Tensor>> named_state(torch::nn::Module& module) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& item : module.named_parameters(true)) out.emplace_back(item.key(), item.value());
  for (const auto& item : module.named_buffers(true)) out.emplace_back(item.key(), item.value());
  return out;
}

}  // namespace

WeightManifest save_weights(const std::filesystem::path& dir, torch::nn::Module& module,
                            const std::string& architecture, const json& options, const json& metrics) {
  std::filesystem::create_directories(dir);
  json tensors = json::array();
  std::string digest_input;
  for (const auto& [name, tensor] : named_state(module)) {
    const auto file = name + ".fvt";
    const auto bytes = encode_tensor(tensor);
    write_file_atomic(dir / file, bytes);
    digest_input += name;
    digest_input += bytes;
    tensors.push_back({{"name", name}, {"file", file}, {"shape", tensor.sizes().vec()}});
  }
  WeightManifest manifest{architecture, options, sha256_hex(digest_input), metrics};
  json j = {{"architecture", architecture},
            {"options", options},
            {"tensors", tensors},
            {"content_hash", manifest.content_hash},
            {"metrics", metrics}};
  write_file_atomic(dir / "manifest.json", j.dump(2));
  return manifest;
}

WeightManifest read_manifest(const std::filesystem::path& dir) {
  auto j = json::parse(read_file(dir / "manifest.json"));
  return {j.at("architecture").get<std::string>(), j.at("options"), j.at("content_hash").get<std::string>(),
          j.value("metrics", json::object())};
}

WeightManifest load_weights(const std::filesystem::path& dir, torch::nn::Module& module,
                            const std::optional<std::string>& expected_hash) {
  auto j = json::parse(read_file(dir / "manifest.json"));
  std::map<std::string, json> entries;
  for (const auto& entry : j.at("tensors")) entries[entry.at("name").get<std::string>()] = entry;

  std::string digest_input;
  torch::NoGradGuard no_grad;
  for (const auto& entry : j.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto bytes = read_file(dir / entry.at("file").get<std::string>());
    digest_input += name;
    digest_input += bytes;
  }
  const auto hash = sha256_hex(digest_input);
  if (hash != j.at("content_hash").get<std::string>()) {
    throw ConfigError("weight files do not match manifest hash in " + dir.string(), "content_hash");
  }
  if (expected_hash && *expected_hash != hash) {
    throw ConfigError("weights in " + dir.string() + " do not match pinned hash", "model_hashes");
  }
  for (auto& [name, tensor] : named_state(module)) {
    auto it = entries.find(name);
    if (it == entries.end()) throw ConfigError("missing tensor '" + name + "' in " + dir.string());
    auto value = read_tensor(dir / it->second.at("file").get<std::string>());
    if (value.sizes() != tensor.sizes()) throw ConfigError("shape mismatch for tensor '" + name + "'");
    tensor.copy_(value.to(tensor.scalar_type()));
  }
  return {j.at("architecture").get<std::string>(), j.at("options"), hash, j.value("metrics", json::object())};
}

Classifier& ModelSuite::classifier(const std::string& role) {
  auto it = classifiers.find(role);
  if (it == classifiers.end()) throw ConfigError("no classifier with role '" + role + "' in model suite", "victims");
  return it->second;
}

ModelSuite ModelSuite::load(const std::filesystem::path& dir, torch::Dtype dtype,
                            const std::map<std::string, std::string>& pinned_hashes) {
  if (!std::filesystem::exists(dir / "generator" / "manifest.json")) {
    throw ConfigError("no model suite at " + dir.string() + " (run `featadv train-models`)", "models");
  }
  ModelSuite suite;
  suite.root = dir;
  auto pinned = [&](const std::string& role) -> std::optional<std::string> {
    auto it = pinned_hashes.find(role);
    if (it == pinned_hashes.end()) return std::nullopt;
    return it->second;
  };

  suite.generator = Generator(GeneratorOptions::from_json(read_manifest(dir / "generator").options));
  suite.hashes["generator"] = load_weights(dir / "generator", *suite.generator, pinned("generator")).content_hash;
  suite.generator->to(dtype);
  suite.generator->eval();

  if (std::filesystem::exists(dir / "discriminator" / "manifest.json")) {
    suite.discriminator = Discriminator(DiscriminatorOptions::from_json(read_manifest(dir / "discriminator").options));
    suite.hashes["discriminator"] =
        load_weights(dir / "discriminator", *suite.discriminator, pinned("discriminator")).content_hash;
    suite.discriminator->to(dtype);
    suite.discriminator->eval();
  }
  for (const auto& role : kClassifierRoles) {
    const auto path = dir / role;
    if (!std::filesystem::exists(path / "manifest.json")) continue;
    Classifier model(ClassifierOptions::from_json(read_manifest(path).options));
    suite.hashes[role] = load_weights(path, *model, pinned(role)).content_hash;
    model->to(dtype);
    model->eval();
    suite.classifiers.emplace(role, model);
  }
  // Loaded models are frozen; attacks only differentiate through them.
  for (auto& p : suite.generator->parameters()) p.requires_grad_(false);
  if (suite.discriminator) {
    for (auto& p : suite.discriminator->parameters()) p.requires_grad_(false);
  }
  for (auto& [role, model] : suite.classifiers) {
    for (auto& p : model->parameters()) p.requires_grad_(false);
  }
  return suite;
}

}  // namespace featadv
