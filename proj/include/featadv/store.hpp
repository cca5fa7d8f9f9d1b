#pragma once

// On-disk store for the workbench:
//   images/<id>.fvt                 content-addressed images (HWC tensor container)
//   experiments/<id>/config.json    canonical attack config (id = its hash)
//   experiments/<id>/status.json    queued | running | done | failed
//   experiments/<id>/artifact/      artifact directory once done
//   sessions/<id>.jsonl             header line, then one event per line
// Every write is a temp-file-then-rename.

#include <cstdint>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace featadv {

struct ExperimentRecord {
  std::string id;
  nlohmann::json config;
  std::string status;  // queued | running | done | failed
  std::string created;
  std::string updated;
  std::string error;
  std::filesystem::path dir;

  std::filesystem::path artifact_dir() const { return dir / "artifact"; }
  nlohmann::json to_json() const;
};

struct TopK {
  int64_t class_id = 0;
  double confidence = 0.0;
};

struct CompositionEvent {
  std::string source;
  std::string patch;
  int64_t x = 0;  // column of the top-left corner
  int64_t y = 0;  // row of the top-left corner
  double scale = 0.0;
  std::string composite;
  std::string model;
  std::vector<TopK> confidences;
  std::string timestamp;

  nlohmann::json to_json() const;
  static CompositionEvent from_json(const nlohmann::json& j);
};

struct Session {
  std::string id;
  std::string hypothesis;
  std::string created;
  std::vector<CompositionEvent> events;

  nlohmann::json to_json() const;
};

/// Store root: $FEATADV_STORE if set, else `cli`.
std::filesystem::path resolve_store_dir(const std::filesystem::path& cli);
/// Model directory: `cli` if given, else $FEATADV_MODELS, else <store>/models
/// if it exists, else the fixture models built into the binary.
std::filesystem::path resolve_models_dir(const std::optional<std::filesystem::path>& cli,
                                         const std::filesystem::path& store);

/// UTC timestamp with microseconds, e.g. 2026-01-02T03:04:05.123456Z.
std::string utc_timestamp();

class Store {
 public:
  explicit Store(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }

  /// Stores a [3,H,W] image in [0,1]; the id is the hash of its bytes.
  std::string put_image(const torch::Tensor& image);
  torch::Tensor get_image(const std::string& id) const;
  bool has_image(const std::string& id) const;

  /// Returns the record for `config_hash`, creating it (queued) if new. The
  /// flag is true when a record was created.
  std::pair<ExperimentRecord, bool> create_experiment(const std::string& config_hash, const nlohmann::json& config);
  ExperimentRecord experiment(const std::string& id) const;
  void set_status(const std::string& id, const std::string& status, const std::string& error = "");
  /// Ordered by creation time, then id.
  std::vector<ExperimentRecord> experiments() const;

  Session create_session(const std::string& hypothesis);
  Session session(const std::string& id) const;
  Session append_event(const std::string& id, const CompositionEvent& event);

 private:
  static void check_id(const std::string& id);

  std::filesystem::path root_;
  mutable std::mutex mutex_;
  uint64_t session_counter_ = 0;
};

}  // namespace featadv
