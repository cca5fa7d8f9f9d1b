#pragma once

// Shared helpers for the unit tests: scratch directories and a tiny randomly
// initialized model suite (fast enough to run attacks in a few seconds).

#include <atomic>
#include <filesystem>
#include <string>

#include <unistd.h>

#include <torch/torch.h>

#include "featadv/models.hpp"

namespace featadv::testing {

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("featadv-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline ClassifierOptions tiny_classifier(const std::string& arch) {
  ClassifierOptions o;
  o.arch_id = arch;
  o.widths = {8, 16};
  o.convs_per_stage = 1;
  return o;
}

/// Writes a random-weight suite (generator, discriminator and every
/// classifier role) under `dir`. Weights depend only on `seed`.
inline void write_tiny_suite(const std::filesystem::path& dir, uint64_t seed = 1) {
  torch::manual_seed(seed);
  GeneratorOptions g;
  g.base_channels = 32;
  g.embed_dim = 8;
  g.latent_dim = 16;
  Generator generator(g);
  // Fresh BatchNorm statistics (mean 0, var 1) are fine in eval mode.
  save_weights(dir / "generator", *generator, "generator", g.to_json());
  DiscriminatorOptions d;
  d.base_channels = 8;
  Discriminator discriminator(d);
  save_weights(dir / "discriminator", *discriminator, "discriminator", d.to_json());
  for (const auto& role : kClassifierRoles) {
    auto options = tiny_classifier("tiny-" + role);
    Classifier c(options);
    save_weights(dir / role, *c, "classifier", options.to_json());
  }
}

/// A suite directory shared by every test in the process.
inline const std::filesystem::path& tiny_suite_dir() {
  static TempDir dir("suite");
  static bool written = [] {
    write_tiny_suite(dir.path());
    return true;
  }();
  (void)written;
  return dir.path();
}

inline double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b) {
  return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).abs().max().item<double>();
}

}  // namespace featadv::testing
