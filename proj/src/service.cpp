#include "featadv/service.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <httplib.h>

#include "featadv/compositing.hpp"
#include "featadv/image.hpp"
#include "featadv/tensor_io.hpp"

namespace featadv {

namespace fs = std::filesystem;
using nlohmann::json;

json ReplayResult::to_json() const { return {{"ok", ok}, {"max_abs_diff", max_abs_diff}, {"events", events}}; }

// ---------------------------------------------------------------- workbench

Workbench::Workbench(WorkbenchOptions options)
    : options_(std::move(options)), store_(options_.store), suite_(ModelSuite::load(options_.models)) {
  suite_.classifier(options_.victim);
  // Jobs interrupted by a previous shutdown go back on the queue.
  for (const auto& record : store_.experiments()) {
    if (record.status == "running") store_.set_status(record.id, "queued");
    if (record.status == "queued" || record.status == "running") queue_.push_back(record.id);
  }
  for (int i = 0; i < std::max(1, options_.workers); ++i) workers_.emplace_back([this] { worker_loop(); });
}

Workbench::~Workbench() {
  {
    std::lock_guard lock(queue_mutex_);
    stopping_ = true;
  }
  queue_cv_.notify_all();
  for (auto& t : workers_) t.join();
}

ExperimentRecord Workbench::submit_job(const json& config_json) {
  const auto config = AttackConfig::from_json(config_json);
  auto [record, created] = store_.create_experiment(config.hash(), config.to_json());
  if (created) {
    {
      std::lock_guard lock(queue_mutex_);
      queue_.push_back(record.id);
    }
    queue_cv_.notify_one();
  }
  return record;
}

void Workbench::wait_idle() {
  std::unique_lock lock(queue_mutex_);
  idle_cv_.wait(lock, [this] { return queue_.empty() && active_ == 0; });
}

void Workbench::worker_loop() {
  for (;;) {
    std::string id;
    {
      std::unique_lock lock(queue_mutex_);
      queue_cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
      if (stopping_) return;
      id = queue_.front();
      queue_.pop_front();
      ++active_;
    }
    run_job(id);
    {
      std::lock_guard lock(queue_mutex_);
      --active_;
    }
    idle_cv_.notify_all();
  }
}

void Workbench::run_job(const std::string& id) {
  try {
    store_.set_status(id, "running");
    const auto record = store_.experiment(id);
    const auto config = AttackConfig::from_json(record.config);
    // Each job trains against its own copy of the models.
    auto suite = ModelSuite::load(options_.models, torch::kFloat32);
    auto artifact = run_attack(config, suite);
    const auto staging = record.dir / "artifact.tmp";
    fs::remove_all(staging);
    artifact.save(staging);
    write_file_atomic(staging / "report.json", artifact.summary().dump(2));
    fs::remove_all(record.artifact_dir());
    fs::rename(staging, record.artifact_dir());
    store_.set_status(id, "done");
  } catch (const std::exception& e) {
    try {
      store_.set_status(id, "failed", e.what());
    } catch (...) {
    }
  }
}

std::string Workbench::compose(const std::string& source, const std::string& patch, int64_t x, int64_t y,
                               double scale) {
  auto src = store_.get_image(source);
  auto p = store_.get_image(patch);
  const auto width = src.size(2);
  const auto side = static_cast<int64_t>(std::lround(scale * static_cast<double>(width)));
  if (!(scale > 0.0) || side < 1 || side > std::min(src.size(1), width)) {
    throw InputError("scale " + std::to_string(scale) + " gives a " + std::to_string(side) +
                     "-pixel patch; valid pasted sides are 1.." + std::to_string(std::min(src.size(1), width)));
  }
  return store_.put_image(insert_patch_sized(src, p, {y, x}, side));
}

std::vector<TopK> Workbench::classify(const std::string& image, int64_t k) {
  auto& victim = suite_.classifier(options_.victim);
  if (k < 1 || k > victim->num_classes()) {
    throw InputError("k must be in 1.." + std::to_string(victim->num_classes()));
  }
  auto img = store_.get_image(image);
  torch::Tensor probs;
  {
    std::lock_guard lock(inference_mutex_);
    torch::NoGradGuard no_grad;
    probs = featadv::classify(victim, img)[0].to(torch::kFloat64).contiguous();
  }
  std::vector<int64_t> order(static_cast<size_t>(probs.size(0)));
  std::iota(order.begin(), order.end(), 0);
  const double* p = probs.data_ptr<double>();
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) { return p[a] > p[b]; });
  std::vector<TopK> out;
  for (int64_t i = 0; i < k; ++i) out.push_back({order[i], p[order[i]]});
  return out;
}

std::string Workbench::victim_id() const {
  return options_.victim + ":" + suite_.hashes.at(options_.victim).substr(0, 16);
}

Session Workbench::log_event(const std::string& session, CompositionEvent event) {
  store_.session(session);
  const auto composite = compose(event.source, event.patch, event.x, event.y, event.scale);
  if (!event.composite.empty() && event.composite != composite) {
    throw InputError("composite '" + event.composite + "' does not match the event's arguments");
  }
  event.composite = composite;
  if (event.confidences.empty()) {
    event.confidences = classify(composite, suite_.classifier(options_.victim)->num_classes());
    event.model = victim_id();
  } else if (event.model.empty()) {
    event.model = victim_id();
  }
  if (event.timestamp.empty()) event.timestamp = utc_timestamp();
  return store_.append_event(session, event);
}

ReplayResult Workbench::replay(const std::string& session, double tolerance) {
  const auto s = store_.session(session);
  const auto k = suite_.classifier(options_.victim)->num_classes();
  ReplayResult r;
  for (const auto& event : s.events) {
    const auto composite = compose(event.source, event.patch, event.x, event.y, event.scale);
    if (composite != event.composite) r.ok = false;
    const auto now = classify(composite, k);
    for (const auto& recorded : event.confidences) {
      auto it = std::find_if(now.begin(), now.end(), [&](const TopK& t) { return t.class_id == recorded.class_id; });
      if (it == now.end()) {
        r.ok = false;
        continue;
      }
      r.max_abs_diff = std::max(r.max_abs_diff, std::fabs(it->confidence - recorded.confidence));
    }
    ++r.events;
  }
  r.ok = r.ok && r.max_abs_diff <= tolerance;
  return r;
}

namespace {

json read_json(const fs::path& path) { return json::parse(read_file(path)); }

}  // namespace

json Workbench::list_artifacts(const ArtifactFilter& filter) const {
  if (filter.offset < 0 || filter.limit < 1) throw InputError("offset must be >= 0 and limit >= 1");
  if (filter.mode) mode_from_name(*filter.mode);
  json items = json::array();
  int64_t total = 0;
  for (const auto& record : store_.experiments()) {
    if (record.status != "done") continue;
    if (filter.mode && record.config.at("mode").get<std::string>() != *filter.mode) continue;
    if (filter.target && record.config.at("target_class").get<int64_t>() != *filter.target) continue;
    if (total >= filter.offset && total < filter.offset + filter.limit) {
      auto summary = read_json(record.artifact_dir() / "artifact.json");
      items.push_back({{"id", record.id},
                       {"created", record.created},
                       {"mode", summary.at("mode")},
                       {"target_class", summary.at("target_class")},
                       {"disguise_class", summary.at("disguise_class")},
                       {"disguised", summary.at("disguised")},
                       {"mean_target_confidence", summary.at("mean_target_confidence")},
                       {"success_rate", summary.at("success_rate")}});
    }
    ++total;
  }
  return {{"items", items}, {"total", total}, {"offset", filter.offset}, {"limit", filter.limit}};
}

json Workbench::artifact(const std::string& id) {
  const auto record = store_.experiment(id);
  if (record.status != "done") throw NotFoundError("artifact '" + id + "' is not available (status " + record.status + ")");
  const auto dir = record.artifact_dir();
  auto j = read_json(dir / "artifact.json");
  j["id"] = id;
  j["created"] = record.created;
  j["patch_image"] = store_.put_image(read_tensor(dir / "patch.fvt"));
  if (fs::exists(dir / "mask.fvt")) {
    j["mask_image"] = store_.put_image(read_tensor(dir / "mask.fvt").unsqueeze(0).repeat({3, 1, 1}));
  }
  std::ifstream csv(dir / "loss_curve.csv");
  std::string line;
  std::getline(csv, line);
  json curve = json::array();
  while (std::getline(csv, line)) {
    json row = json::array();
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    curve.push_back(row);
  }
  j["loss_curve"] = curve;
  return j;
}

std::string Workbench::export_printable(const std::string& id, double dpi, double inches) {
  const auto side = static_cast<int64_t>(std::lround(dpi * inches));
  if (!(dpi > 0.0) || !(inches > 0.0) || side < 1 || side > 8192) {
    throw InputError("dpi * inches must give a side in 1..8192 pixels");
  }
  const auto record = store_.experiment(id);
  if (record.status != "done") throw NotFoundError("artifact '" + id + "' is not available");
  auto patch = read_tensor(record.artifact_dir() / "patch.fvt");
  auto resized = resize_bilinear(patch.unsqueeze(0), side, side)[0].clamp(0.0, 1.0);
  return encode_png(ImageTensor(resized));
}

// --------------------------------------------------------------------- HTTP

namespace {

void send_json(httplib::Response& res, const json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

template <typename Fn>
httplib::Server::Handler guarded(Fn fn) {
  return [fn](const httplib::Request& req, httplib::Response& res) {
    try {
      fn(req, res);
    } catch (const ConfigError& e) {
      send_json(res, {{"error", e.what()}, {"field", e.field()}}, 400);
    } catch (const NotFoundError& e) {
      send_json(res, {{"error", e.what()}}, 404);
    } catch (const InputError& e) {
      send_json(res, {{"error", e.what()}}, 422);
    } catch (const json::exception& e) {
      send_json(res, {{"error", std::string("malformed request: ") + e.what()}}, 400);
    } catch (const std::exception& e) {
      send_json(res, {{"error", e.what()}}, 500);
    }
  };
}

json body_of(const httplib::Request& req) {
  auto j = json::parse(req.body);
  if (!j.is_object()) throw InputError("request body must be a JSON object");
  return j;
}

json top_k_json(const std::vector<TopK>& top) {
  json out = json::array();
  for (const auto& t : top) {
    out.push_back({{"class", t.class_id}, {"name", std::string(kClassNames[t.class_id])}, {"confidence", t.confidence}});
  }
  return out;
}

}  // namespace

HttpService::HttpService(Workbench& workbench) : workbench_(workbench), server_(std::make_unique<httplib::Server>()) {
  auto& s = *server_;
  auto& wb = workbench_;

  s.Get("/health", guarded([&](const httplib::Request&, httplib::Response& res) {
          send_json(res, {{"status", "ok"}, {"model", wb.victim_id()}});
        }));

  s.Post("/jobs", guarded([&](const httplib::Request& req, httplib::Response& res) {
           auto record = wb.submit_job(json::parse(req.body));
           send_json(res, record.to_json(), 202);
         }));
  s.Get(R"(/jobs/([A-Za-z0-9]+))", guarded([&](const httplib::Request& req, httplib::Response& res) {
          send_json(res, wb.job(req.matches[1]).to_json());
        }));

  s.Get("/artifacts", guarded([&](const httplib::Request& req, httplib::Response& res) {
          ArtifactFilter filter;
          if (req.has_param("mode") && !req.get_param_value("mode").empty()) filter.mode = req.get_param_value("mode");
          if (req.has_param("target") && !req.get_param_value("target").empty()) {
            filter.target = std::stoll(req.get_param_value("target"));
          }
          if (req.has_param("offset")) filter.offset = std::stoll(req.get_param_value("offset"));
          if (req.has_param("limit")) filter.limit = std::stoll(req.get_param_value("limit"));
          send_json(res, wb.list_artifacts(filter));
        }));
  s.Get(R"(/artifacts/([A-Za-z0-9]+))", guarded([&](const httplib::Request& req, httplib::Response& res) {
          send_json(res, wb.artifact(req.matches[1]));
        }));
  s.Get(R"(/artifacts/([A-Za-z0-9]+)/printable)", guarded([&](const httplib::Request& req, httplib::Response& res) {
          const double dpi = req.has_param("dpi") ? std::stod(req.get_param_value("dpi")) : 300.0;
          const double inches = req.has_param("inches") ? std::stod(req.get_param_value("inches")) : 4.0;
          res.set_content(wb.export_printable(req.matches[1], dpi, inches), "image/png");
        }));

  s.Get(R"(/images/([A-Za-z0-9]+))", guarded([&](const httplib::Request& req, httplib::Response& res) {
          res.set_content(encode_png(ImageTensor(wb.store().get_image(req.matches[1]))), "image/png");
        }));
  s.Post("/images", guarded([&](const httplib::Request& req, httplib::Response& res) {
           std::string bytes;
           if (req.is_multipart_form_data()) {
             if (!req.has_file("file")) throw InputError("multipart upload needs a 'file' part");
             bytes = req.get_file_value("file").content;
           } else {
             bytes = req.body;
           }
           auto image = decode_png(bytes);
           send_json(res, {{"id", wb.store().put_image(image.data())}, {"height", image.height()}, {"width", image.width()}},
                     201);
         }));

  s.Post("/compose", guarded([&](const httplib::Request& req, httplib::Response& res) {
           const auto j = body_of(req);
           const auto id = wb.compose(j.at("source").get<std::string>(), j.at("patch").get<std::string>(),
                                      j.at("x").get<int64_t>(), j.at("y").get<int64_t>(), j.at("scale").get<double>());
           send_json(res, {{"id", id}});
         }));
  s.Post("/classify", guarded([&](const httplib::Request& req, httplib::Response& res) {
           const auto j = body_of(req);
           const auto top = wb.classify(j.at("image").get<std::string>(), j.value("k", int64_t{5}));
           send_json(res, {{"model", wb.victim_id()}, {"top", top_k_json(top)}});
         }));

  s.Post("/sessions", guarded([&](const httplib::Request& req, httplib::Response& res) {
           const auto j = req.body.empty() ? json::object() : body_of(req);
           send_json(res, wb.create_session(j.value("hypothesis", "")).to_json(), 201);
         }));
  s.Post(R"(/sessions/([A-Za-z0-9]+)/events)", guarded([&](const httplib::Request& req, httplib::Response& res) {
           const auto event = CompositionEvent::from_json(body_of(req));
           send_json(res, wb.log_event(req.matches[1], event).to_json(), 201);
         }));
  s.Get(R"(/sessions/([A-Za-z0-9]+))", guarded([&](const httplib::Request& req, httplib::Response& res) {
          send_json(res, wb.session(req.matches[1]).to_json());
        }));
  s.Post(R"(/sessions/([A-Za-z0-9]+)/replay)", guarded([&](const httplib::Request& req, httplib::Response& res) {
           send_json(res, wb.replay(req.matches[1]).to_json());
         }));
}

HttpService::~HttpService() { stop(); }

int HttpService::start(const std::string& host, int port) {
  const int bound = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw InputError("could not bind " + host + ":" + std::to_string(port));
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return bound;
}

bool HttpService::listen(const std::string& host, int port) { return server_->listen(host, port); }

void HttpService::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace featadv
