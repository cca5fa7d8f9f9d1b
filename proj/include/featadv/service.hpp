#pragma once

// Workbench service: the job queue, the compose/classify loop behind the
// copy/paste workflow, sessions, and the HTTP front end.

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "featadv/attack.hpp"
#include "featadv/store.hpp"

namespace httplib {
class Server;
}

namespace featadv {

struct WorkbenchOptions {
  std::filesystem::path store;
  std::filesystem::path models;
  /// Classifier role used by classify and composition events.
  std::string victim = "victim";
  int workers = 1;
};

struct ArtifactFilter {
  std::optional<std::string> mode;
  std::optional<int64_t> target;
  int64_t offset = 0;
  int64_t limit = 50;
};

struct ReplayResult {
  bool ok = true;
  double max_abs_diff = 0.0;
  int64_t events = 0;
  nlohmann::json to_json() const;
};

class Workbench {
 public:
  explicit Workbench(WorkbenchOptions options);
  ~Workbench();
  Workbench(const Workbench&) = delete;
  Workbench& operator=(const Workbench&) = delete;

  Store& store() { return store_; }
  const WorkbenchOptions& options() const { return options_; }

  /// Validates, content-addresses and enqueues. Identical configs map to the
  /// same record and never run twice. Throws ConfigError.
  ExperimentRecord submit_job(const nlohmann::json& config);
  ExperimentRecord job(const std::string& id) const { return store_.experiment(id); }
  /// Blocks until the queue is empty and no job is running.
  void wait_idle();

  /// Pastes the patch image, resized to round(scale * W), with its top-left
  /// corner at column x, row y. Returns the stored composite's id.
  std::string compose(const std::string& source, const std::string& patch, int64_t x, int64_t y, double scale);
  /// Top-k (class, confidence) of the victim, descending.
  std::vector<TopK> classify(const std::string& image, int64_t k);
  std::string victim_id() const;

  Session create_session(const std::string& hypothesis) { return store_.create_session(hypothesis); }
  /// Records an event. Missing composite/confidences are computed now with
  /// the full K-way distribution.
  Session log_event(const std::string& session, CompositionEvent event);
  Session session(const std::string& id) const { return store_.session(id); }
  /// Recomposes and reclassifies every event of a session.
  ReplayResult replay(const std::string& session, double tolerance = 1e-5);

  /// Done artifacts, ordered by creation time.
  nlohmann::json list_artifacts(const ArtifactFilter& filter) const;
  nlohmann::json artifact(const std::string& id);
  /// The feature image resampled to round(dpi * inches) pixels per side, PNG.
  std::string export_printable(const std::string& id, double dpi, double inches);

 private:
  void worker_loop();
  void run_job(const std::string& id);

  WorkbenchOptions options_;
  Store store_;
  ModelSuite suite_;
  std::mutex inference_mutex_;

  std::mutex queue_mutex_;
  std::condition_variable queue_cv_;
  std::condition_variable idle_cv_;
  std::deque<std::string> queue_;
  int active_ = 0;
  bool stopping_ = false;
  std::vector<std::thread> workers_;
};

/// JSON-over-HTTP front end for a Workbench.
class HttpService {
 public:
  explicit HttpService(Workbench& workbench);
  ~HttpService();

  /// Binds and serves on a background thread; port 0 picks a free port.
  /// Returns the bound port.
  int start(const std::string& host, int port);
  /// Serves on the calling thread until stop().
  bool listen(const std::string& host, int port);
  void stop();

 private:
  Workbench& workbench_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
};

}  // namespace featadv
