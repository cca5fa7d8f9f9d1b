#include "featadv/training.hpp"

#include <chrono>

#include "featadv/rng.hpp"

namespace featadv {

double accuracy(Classifier& model, const LabeledImages& data) {
  torch::NoGradGuard no_grad;
  int64_t correct = 0;
  for (int64_t start = 0; start < data.size(); start += 256) {
    const auto end = std::min(start + 256, data.size());
    auto logits = model->forward(data.images.slice(0, start, end));
    correct += (logits.argmax(1) == data.labels.slice(0, start, end)).sum().item<int64_t>();
  }
  return data.size() == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(data.size());
}

double train_classifier(Classifier& model, const LabeledImages& train, const LabeledImages& heldout,
                        const ClassifierTraining& options) {
  auto gen = torch_generator(options.seed);
  torch::optim::Adam optimizer(model->parameters(),
                               torch::optim::AdamOptions(options.learning_rate).weight_decay(options.weight_decay));
  model->train();
  for (int64_t epoch = 0; epoch < options.epochs; ++epoch) {
    auto order = torch::randperm(train.size(), gen);
    for (int64_t start = 0; start + options.batch_size <= train.size(); start += options.batch_size) {
      auto index = order.slice(0, start, start + options.batch_size);
      auto images = train.images.index_select(0, index);
      auto labels = train.labels.index_select(0, index);
      if (options.adversarial_epsilon > 0.0) {
        auto probe = images.clone().requires_grad_(true);
        auto probe_loss = torch::nn::functional::cross_entropy(model->forward(probe), labels);
        auto grad = torch::autograd::grad({probe_loss}, {probe})[0];
        auto adversarial = (images + options.adversarial_epsilon * grad.sign()).clamp(0.0, 1.0).detach();
        const auto half = options.batch_size / 2;
        images = torch::cat({images.slice(0, 0, half), adversarial.slice(0, half)});
      }
      optimizer.zero_grad();
      auto loss = torch::nn::functional::cross_entropy(
          model->forward(images), labels,
          torch::nn::functional::CrossEntropyFuncOptions().label_smoothing(options.label_smoothing));
      loss.backward();
      optimizer.step();
    }
  }
  model->eval();
  return accuracy(model, heldout);
}

void train_gan(Generator& generator, Discriminator& discriminator, const LabeledImages& train,
               const GanTraining& options) {
  auto gen = torch_generator(options.seed);
  auto adam = torch::optim::AdamOptions(options.learning_rate).betas({0.5, 0.999});
  torch::optim::Adam opt_g(generator->parameters(), adam);
  torch::optim::Adam opt_d(discriminator->parameters(), adam);
  generator->train();
  discriminator->train();
  const auto k = generator->num_classes();
  for (int64_t it = 0; it < options.iterations; ++it) {
    auto index = torch::randint(train.size(), {options.batch_size}, gen);
    auto real = train.images.index_select(0, index);
    auto real_y = generator->one_hot(train.labels.index_select(0, index));
    auto z = torch::randn({options.batch_size, generator->input_dim()}, gen);
    auto fake_y = generator->one_hot(torch::randint(k, {options.batch_size}, gen));
    auto fake = generator->forward(z, fake_y);

    opt_d.zero_grad();
    auto d_loss = torch::softplus(-discriminator->forward(real, real_y)).mean() +
                  torch::softplus(discriminator->forward(fake.detach(), fake_y)).mean();
    d_loss.backward();
    opt_d.step();

    opt_g.zero_grad();
    auto g_loss = torch::softplus(-discriminator->forward(fake, fake_y)).mean();
    g_loss.backward();
    opt_g.step();
  }
  generator->eval();
  discriminator->eval();
}

void train_model_suite(const std::filesystem::path& dir, const ProgressFn& progress) {
  auto log = [&](const std::string& line) {
    if (progress) progress(line);
  };
  const auto train = training_split();
  const auto heldout = heldout_split();

  struct Spec {
    std::string role;
    std::string arch;
    ClassifierTraining training;
  };
  const std::vector<Spec> specs{
      {"victim", "convnet-a", {.epochs = 8, .seed = 11}},
      {"auxiliary", "convnet-b", {.epochs = 8, .seed = 12, .adversarial_epsilon = 4.0 / 255.0}},
      {"proxy", "convnet-c", {.epochs = 8, .seed = 13}},
      {"ens_d", "convnet-d", {.epochs = 8, .seed = 14}},
      {"ens_e", "convnet-e", {.epochs = 8, .seed = 15}},
  };
  for (const auto& spec : specs) {
    const auto t0 = std::chrono::steady_clock::now();
    torch::manual_seed(spec.training.seed);
    auto options = ClassifierOptions::preset(spec.arch);
    Classifier model(options);
    const double acc = train_classifier(model, train, heldout, spec.training);
    const nlohmann::json metrics = {{"heldout_accuracy", acc},
                                    {"epochs", spec.training.epochs},
                                    {"adversarial_epsilon", spec.training.adversarial_epsilon},
                                    {"seed", spec.training.seed}};
    save_weights(dir / spec.role, *model, "classifier", options.to_json(), metrics);
    const auto secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log(spec.role + " (" + spec.arch + "): held-out accuracy " + std::to_string(acc) + " in " +
        std::to_string(secs) + " s");
  }

  const auto t0 = std::chrono::steady_clock::now();
  GanTraining gan;
  torch::manual_seed(gan.seed);
  GeneratorOptions g_options;
  DiscriminatorOptions d_options;
  Generator generator(g_options);
  Discriminator discriminator(d_options);
  train_gan(generator, discriminator, train, gan);
  const nlohmann::json metrics = {{"iterations", gan.iterations}, {"seed", gan.seed}};
  save_weights(dir / "generator", *generator, "generator", g_options.to_json(), metrics);
  save_weights(dir / "discriminator", *discriminator, "discriminator", d_options.to_json(), metrics);
  const auto secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  log("generator + discriminator: " + std::to_string(gan.iterations) + " iterations in " + std::to_string(secs) +
      " s");
}

}  // namespace featadv
