// featadv command-line interface.

#include <algorithm>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "featadv/attack.hpp"
#include "featadv/eval.hpp"
#include "featadv/hashing.hpp"
#include "featadv/image.hpp"
#include "featadv/service.hpp"
#include "featadv/store.hpp"
#include "featadv/tensor_io.hpp"
#include "featadv/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace featadv;

namespace {

struct Common {
  fs::path store = "store";
  std::optional<fs::path> models;

  fs::path store_dir() const { return resolve_store_dir(store); }
  fs::path models_dir() const { return resolve_models_dir(models, store_dir()); }
};

void add_common(CLI::App* cmd, Common& common) {
  cmd->add_option("--store", common.store, "Store directory (FEATADV_STORE overrides)");
  cmd->add_option("--models", common.models, "Model directory (default: FEATADV_MODELS, <store>/models, fixtures)");
}

void print(const json& j) { std::cout << j.dump(2) << std::endl; }

int cmd_attack(const Common& common, const fs::path& config_path, std::optional<int64_t> steps) {
  auto raw = json::parse(read_file(config_path));
  if (steps) raw["steps"] = *steps;
  const auto config = AttackConfig::from_json(raw);
  Store store(common.store_dir());
  auto [record, created] = store.create_experiment(config.hash(), config.to_json());
  if (!created && record.status == "done") {
    std::cerr << "already done: " << record.id << "\n";
    print(json::parse(read_file(record.artifact_dir() / "artifact.json")));
    return 0;
  }
  if (record.status == "failed") throw InputError("experiment " + record.id + " failed earlier: " + record.error);
  store.set_status(record.id, "running");
  try {
    auto suite = ModelSuite::load(common.models_dir());
    AttackOptions options;
    const int64_t every = std::max<int64_t>(1, config.steps / 10);
    options.on_step = [&](int64_t step, const std::vector<double>& row) {
      if (step % every == 0 || step + 1 == config.steps) {
        std::cerr << "step " << step << " total " << row[1] << " xent " << row[2] << "\n";
      }
    };
    auto artifact = run_attack(config, suite, options);
    const auto staging = record.dir / "artifact.tmp";
    fs::remove_all(staging);
    artifact.save(staging);
    write_file_atomic(staging / "report.json", artifact.summary().dump(2));
    fs::rename(staging, record.artifact_dir());
    store.set_status(record.id, "done");
    auto summary = artifact.summary();
    summary["id"] = record.id;
    print(summary);
  } catch (const std::exception& e) {
    store.set_status(record.id, "failed", e.what());
    throw;
  }
  return 0;
}

// Source spec: "heldout" (the artifact's own distribution) or
// "<kind>[:<class>]" with kind one of the config source kinds.
SourceDistribution parse_sources(const std::string& spec, const AttackConfig& config) {
  if (spec == "heldout") return config.source;
  auto d = config.source;
  const auto colon = spec.find(':');
  json j = {{"mode", mode_name(config.mode)}, {"target_class", config.target_class}};
  j["source"] = {{"kind", spec.substr(0, colon)}};
  if (colon != std::string::npos) j["source"]["class"] = std::stoll(spec.substr(colon + 1));
  const auto parsed = AttackConfig::from_json(j).source;
  d.kind = parsed.kind;
  d.class_id = parsed.class_id;
  return d;
}

int cmd_eval(const Common& common, const std::string& id, const std::string& sources, int64_t n,
             const std::string& model) {
  Store store(common.store_dir());
  const auto record = store.experiment(id);
  if (record.status != "done") throw InputError("experiment " + id + " is " + record.status);
  const auto artifact = AdversarialArtifact::load(record.artifact_dir());
  auto config = AttackConfig::from_json(artifact.config);
  config.source = parse_sources(sources, config);
  auto suite = ModelSuite::load(common.models_dir());
  auto batch = heldout_batch(config, suite.generator, n);
  auto report = universality_eval(artifact, suite.generator, suite.classifier(model), batch, config.location.margin);
  report.model = model;
  if (suite.classifiers.count("proxy") && model != "proxy") {
    report.realism_proxy = realism_proxy(artifact, suite.classifier("proxy"));
  }
  auto j = report.to_json();
  if (artifact.mode == AttackMode::kPatch) {
    BaselineOptions b;
    b.area_fraction = config.area_fraction;
    j["natural_patch_baseline"] = natural_patch_baseline(suite.classifier(model), artifact.target_class,
                                                         heldout_pool(), batch, b);
    j["random_crop_baseline"] = random_crop_baseline(suite.classifier(model), artifact.target_class,
                                                     heldout_pool(), batch, b);
  }
  const auto name = "eval-" + model + "-" + sha256_hex(sources + ":" + std::to_string(n)).substr(0, 12);
  write_file_atomic(record.dir / "reports" / (name + ".json"), j.dump(2));
  write_file_atomic(record.dir / "reports" / (name + ".csv"), report.records_csv());
  print(j);
  return 0;
}

std::vector<AblationCondition> parse_conditions(const std::string& spec) {
  if (spec == "all") return ablation_conditions();
  std::vector<AblationCondition> out;
  std::stringstream ss(spec);
  std::string name;
  while (std::getline(ss, name, ',')) out.push_back(ablation_condition(name));
  return out;
}

int cmd_grid(const Common& common, const std::string& conditions, int64_t quota, int64_t steps, int64_t batch,
             uint64_t seed, const fs::path& out) {
  auto suite = ModelSuite::load(common.models_dir());
  GridOptions options;
  options.quota = quota;
  options.seed = seed;
  options.base.steps = steps;
  options.base.batch_size = batch;
  options.out_dir = out;
  options.on_run = [](const GridRun& r) {
    std::cerr << r.condition << " #" << r.attempt << " target " << r.target_class << " disguised " << r.disguised
              << " conf " << r.mean_confidence << "\n";
  };
  const auto results = ablation_grid(parse_conditions(conditions), suite, options);
  json j = json::array();
  for (const auto& r : results) {
    j.push_back({{"condition", r.name},
                 {"attempts", r.attempts},
                 {"disguise_rate", r.disguise_rate()},
                 {"mean_disguised_confidence", r.mean_disguised_confidence()},
                 {"partial", r.partial}});
  }
  print(j);
  return 0;
}

int cmd_defense(const Common& common, const std::string& pair, const std::string& mode, int64_t steps, uint64_t seed,
                const std::optional<fs::path>& out) {
  const auto comma = pair.find(',');
  if (comma == std::string::npos) throw ConfigError("expected two class ids 'a,b'", "pair");
  const int64_t a = std::stoll(pair.substr(0, comma)), b = std::stoll(pair.substr(comma + 1));
  auto suite = ModelSuite::load(common.models_dir());
  const auto m = mode_from_name(mode);
  auto a_to_b = run_attack(defense_attack_config(m, a, b, steps, derive_seed(seed, 1)), suite);
  auto b_to_a = run_attack(defense_attack_config(m, b, a, steps, derive_seed(seed, 2)), suite);
  DefenseOptions options;
  options.seed = seed;
  auto report = adversarial_training_defense(suite.classifier("victim"), a_to_b, b_to_a, suite.generator, options);
  if (out) write_file_atomic(*out / "defense.json", report.to_json().dump(2));
  print(report.to_json());
  return 0;
}

int cmd_impressions(const Common& common, int64_t cls, int64_t n, uint64_t seed, const fs::path& out) {
  auto suite = ModelSuite::load(common.models_dir());
  ImpressionOptions options;
  options.seed = seed;
  auto& victim = suite.classifier("victim");
  const auto images = class_impressions(victim, cls, n, options);
  json j = json::array();
  for (size_t i = 0; i < images.size(); ++i) {
    const auto path = out / ("impression_" + std::to_string(cls) + "_" + std::to_string(i) + ".png");
    write_png(path, ImageTensor(images[i]));
    torch::NoGradGuard no_grad;
    const double conf = classify(victim, images[i])[0][cls].item<double>();
    j.push_back({{"path", path.string()}, {"confidence", conf}});
  }
  print(j);
  return 0;
}

int cmd_samples(const Common& common, int64_t per_class, uint64_t seed, const fs::path& out) {
  auto suite = ModelSuite::load(common.models_dir());
  auto& g = suite.generator;
  torch::NoGradGuard no_grad;
  auto labels = torch::arange(kNumClasses, torch::kInt64).repeat_interleave(per_class);
  auto gen = torch_generator(seed);
  auto z = torch::randn({labels.size(0), g->input_dim()}, gen);
  auto images = g->forward(z, g->one_hot(labels));
  auto& victim = suite.classifier("victim");
  auto predicted = classify(victim, images).argmax(1);
  const auto side = images.size(2);
  // One row per class.
  auto sheet = images.view({kNumClasses, per_class, 3, side, side}).permute({2, 0, 3, 1, 4}).reshape(
      {3, kNumClasses * side, per_class * side});
  write_png(out, ImageTensor(sheet));
  const double agreement = (predicted == labels).to(torch::kFloat64).mean().item<double>();
  print({{"path", out.string()}, {"victim_agreement", agreement}});
  return 0;
}

HttpService* g_service = nullptr;

int cmd_serve(const Common& common, const std::string& host, int port, int workers) {
  WorkbenchOptions options{common.store_dir(), common.models_dir(), "victim", workers};
  Workbench workbench(options);
  HttpService service(workbench);
  g_service = &service;
  std::signal(SIGINT, [](int) {
    if (g_service) g_service->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_service) g_service->stop();
  });
  std::cerr << "serving " << options.store << " on " << host << ":" << port << " (models " << options.models << ")\n";
  const bool ok = service.listen(host, port);
  g_service = nullptr;
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  at::set_num_threads(1);
  CLI::App app{"Feature-level adversarial attack toolkit"};
  app.require_subcommand(1);
  Common common;

  auto* attack = app.add_subcommand("attack", "Train one attack from a JSON config and store the artifact");
  add_common(attack, common);
  fs::path config_path;
  std::optional<int64_t> steps_override;
  attack->add_option("--config", config_path, "Attack config (JSON)")->required()->check(CLI::ExistingFile);
  attack->add_option("--steps", steps_override, "Override the config's step count");

  auto* eval = app.add_subcommand("eval", "Evaluate a stored artifact on held-out sources");
  add_common(eval, common);
  std::string artifact_id, sources = "heldout", model = "victim";
  int64_t n = 100;
  eval->add_option("--artifact", artifact_id, "Experiment id")->required();
  eval->add_option("--sources", sources, "'heldout' or <source kind>[:<class>]");
  eval->add_option("-n", n, "Number of sources");
  eval->add_option("--model", model, "Classifier role to evaluate against");

  auto* grid = app.add_subcommand("grid", "Run the ablation grid");
  add_common(grid, common);
  std::string conditions = "all";
  int64_t quota = 20, grid_steps = 150, grid_batch = 8;
  uint64_t seed = 0;
  fs::path out = "grid_out";
  grid->add_option("--conditions", conditions, "'all' or a comma-separated list of condition names");
  grid->add_option("--quota", quota, "Disguised artifacts per condition");
  grid->add_option("--steps", grid_steps, "Steps per attack");
  grid->add_option("--batch", grid_batch, "Batch size per attack");
  grid->add_option("--seed", seed);
  grid->add_option("--out", out, "Output directory");

  auto* defense = app.add_subcommand("defense", "Adversarial-training defense for a class pair");
  add_common(defense, common);
  std::string pair, mode = "patch";
  int64_t defense_steps = 300;
  std::optional<fs::path> defense_out;
  defense->add_option("--pair", pair, "Class pair a,b")->required();
  defense->add_option("--mode", mode, "Attack mode");
  defense->add_option("--steps", defense_steps, "Steps per attack");
  defense->add_option("--seed", seed);
  defense->add_option("--out", defense_out, "Write defense.json here");

  auto* impressions = app.add_subcommand("impressions", "Class impressions of the victim");
  add_common(impressions, common);
  int64_t cls = 0, count = 6;
  fs::path impressions_out = "impressions";
  impressions->add_option("--class", cls, "Class id")->required();
  impressions->add_option("-n", count, "Number of images");
  impressions->add_option("--seed", seed);
  impressions->add_option("--out", impressions_out, "Output directory");

  auto* serve = app.add_subcommand("serve", "Run the workbench HTTP service");
  add_common(serve, common);
  std::string host = "127.0.0.1";
  int port = 8080, workers = 1;
  serve->add_option("--host", host);
  serve->add_option("--port", port);
  serve->add_option("--workers", workers, "Concurrent attack jobs");

  auto* train = app.add_subcommand("train-models", "Train the model suite from scratch");
  fs::path train_out;
  train->add_option("--out", train_out, "Output directory")->required();

  auto* samples = app.add_subcommand("samples", "Write a contact sheet of generator samples (one row per class)");
  add_common(samples, common);
  int64_t per_class = 8;
  fs::path samples_out = "samples.png";
  samples->add_option("--per-class", per_class);
  samples->add_option("--seed", seed);
  samples->add_option("--out", samples_out, "PNG path");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*attack) return cmd_attack(common, config_path, steps_override);
    if (*eval) return cmd_eval(common, artifact_id, sources, n, model);
    if (*grid) return cmd_grid(common, conditions, quota, grid_steps, grid_batch, seed, out);
    if (*defense) return cmd_defense(common, pair, mode, defense_steps, seed, defense_out);
    if (*impressions) return cmd_impressions(common, cls, count, seed, impressions_out);
    if (*serve) return cmd_serve(common, host, port, workers);
    if (*samples) return cmd_samples(common, per_class, seed, samples_out);
    if (*train) {
      train_model_suite(train_out, [](const std::string& line) { std::cerr << line << "\n"; });
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error (" << e.field() << "): " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
