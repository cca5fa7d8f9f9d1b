#include "featadv/store.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <sstream>

#include "featadv/errors.hpp"
#include "featadv/hashing.hpp"
#include "featadv/image.hpp"
#include "featadv/tensor_io.hpp"

namespace featadv {

namespace fs = std::filesystem;
using nlohmann::json;

fs::path resolve_store_dir(const fs::path& cli) {
  if (const char* env = std::getenv("FEATADV_STORE"); env && *env) return env;
  return cli;
}

fs::path resolve_models_dir(const std::optional<fs::path>& cli, const fs::path& store) {
  if (cli) return *cli;
  if (const char* env = std::getenv("FEATADV_MODELS"); env && *env) return env;
  if (fs::exists(store / "models" / "generator" / "manifest.json")) return store / "models";
  return fs::path(FEATADV_FIXTURE_DIR) / "models";
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const auto us = std::chrono::duration_cast<std::chrono::microseconds>(now.time_since_epoch()).count() % 1000000;
  const auto t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S", &tm);
  char out[48];
  std::snprintf(out, sizeof(out), "%s.%06lldZ", buf, static_cast<long long>(us));
  return out;
}

json ExperimentRecord::to_json() const {
  return {{"id", id},
          {"config", config},
          {"status", status},
          {"created", created},
          {"updated", updated},
          {"error", error},
          {"artifact", status == "done" ? json(artifact_dir().string()) : json(nullptr)}};
}

json CompositionEvent::to_json() const {
  json conf = json::array();
  for (const auto& c : confidences) conf.push_back({{"class", c.class_id}, {"confidence", c.confidence}});
  return {{"source", source}, {"patch", patch},         {"x", x},         {"y", y},
          {"scale", scale},   {"composite", composite}, {"model", model}, {"confidences", conf},
          {"timestamp", timestamp}};
}

CompositionEvent CompositionEvent::from_json(const json& j) {
  CompositionEvent e;
  e.source = j.at("source").get<std::string>();
  e.patch = j.at("patch").get<std::string>();
  e.x = j.at("x").get<int64_t>();
  e.y = j.at("y").get<int64_t>();
  e.scale = j.at("scale").get<double>();
  e.composite = j.value("composite", "");
  e.model = j.value("model", "");
  if (j.contains("confidences")) {
    for (const auto& c : j.at("confidences")) e.confidences.push_back({c.at("class").get<int64_t>(), c.at("confidence").get<double>()});
  }
  e.timestamp = j.value("timestamp", "");
  return e;
}

json Session::to_json() const {
  json ev = json::array();
  for (const auto& e : events) ev.push_back(e.to_json());
  return {{"id", id}, {"hypothesis", hypothesis}, {"created", created}, {"events", ev}};
}

Store::Store(fs::path root) : root_(std::move(root)) {
  fs::create_directories(root_ / "images");
  fs::create_directories(root_ / "experiments");
  fs::create_directories(root_ / "sessions");
}

void Store::check_id(const std::string& id) {
  const bool ok = !id.empty() && id.size() <= 128 &&
                  std::all_of(id.begin(), id.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)); });
  if (!ok) throw NotFoundError("no such id '" + id + "'");
}

std::string Store::put_image(const torch::Tensor& image) {
  const auto bytes = encode_image(ImageTensor(image.detach().to(torch::kFloat32)));
  const auto id = sha256_hex(bytes);
  const auto path = root_ / "images" / (id + ".fvt");
  std::lock_guard lock(mutex_);
  if (!fs::exists(path)) write_file_atomic(path, bytes);
  return id;
}

torch::Tensor Store::get_image(const std::string& id) const {
  check_id(id);
  const auto path = root_ / "images" / (id + ".fvt");
  if (!fs::exists(path)) throw NotFoundError("no image '" + id + "'");
  return decode_image(read_file(path)).data();
}

bool Store::has_image(const std::string& id) const {
  try {
    check_id(id);
  } catch (const NotFoundError&) {
    return false;
  }
  return fs::exists(root_ / "images" / (id + ".fvt"));
}

std::pair<ExperimentRecord, bool> Store::create_experiment(const std::string& config_hash, const json& config) {
  check_id(config_hash);
  std::lock_guard lock(mutex_);
  const auto dir = root_ / "experiments" / config_hash;
  if (fs::exists(dir / "status.json")) return {experiment(config_hash), false};
  const auto now = utc_timestamp();
  write_file_atomic(dir / "config.json", config.dump(2));
  write_file_atomic(dir / "status.json", json{{"status", "queued"}, {"created", now}, {"updated", now}, {"error", ""}}.dump(2));
  return {experiment(config_hash), true};
}

ExperimentRecord Store::experiment(const std::string& id) const {
  check_id(id);
  const auto dir = root_ / "experiments" / id;
  if (!fs::exists(dir / "status.json")) throw NotFoundError("no experiment '" + id + "'");
  const auto status = json::parse(read_file(dir / "status.json"));
  ExperimentRecord r;
  r.id = id;
  r.dir = dir;
  r.config = json::parse(read_file(dir / "config.json"));
  r.status = status.at("status").get<std::string>();
  r.created = status.at("created").get<std::string>();
  r.updated = status.value("updated", r.created);
  r.error = status.value("error", "");
  return r;
}

void Store::set_status(const std::string& id, const std::string& status, const std::string& error) {
  auto record = experiment(id);
  if (record.status == "done" || record.status == "failed") {
    throw InputError("experiment '" + id + "' is " + record.status + " and immutable");
  }
  std::lock_guard lock(mutex_);
  write_file_atomic(record.dir / "status.json",
                    json{{"status", status}, {"created", record.created}, {"updated", utc_timestamp()}, {"error", error}}.dump(2));
}

std::vector<ExperimentRecord> Store::experiments() const {
  std::vector<ExperimentRecord> out;
  for (const auto& entry : fs::directory_iterator(root_ / "experiments")) {
    if (!fs::exists(entry.path() / "status.json")) continue;
    out.push_back(experiment(entry.path().filename().string()));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return std::tie(a.created, a.id) < std::tie(b.created, b.id);
  });
  return out;
}

namespace {

std::string session_lines(const Session& s) {
  std::string out = json{{"id", s.id}, {"hypothesis", s.hypothesis}, {"created", s.created}}.dump() + "\n";
  for (const auto& e : s.events) out += e.to_json().dump() + "\n";
  return out;
}

}  // namespace

Session Store::create_session(const std::string& hypothesis) {
  std::lock_guard lock(mutex_);
  Session s;
  s.hypothesis = hypothesis;
  s.created = utc_timestamp();
  s.id = sha256_hex(s.created + "\n" + std::to_string(++session_counter_) + "\n" + hypothesis).substr(0, 32);
  write_file_atomic(root_ / "sessions" / (s.id + ".jsonl"), session_lines(s));
  return s;
}

Session Store::session(const std::string& id) const {
  check_id(id);
  const auto path = root_ / "sessions" / (id + ".jsonl");
  if (!fs::exists(path)) throw NotFoundError("no session '" + id + "'");
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);
  const auto header = json::parse(line);
  Session s;
  s.id = header.at("id").get<std::string>();
  s.hypothesis = header.at("hypothesis").get<std::string>();
  s.created = header.at("created").get<std::string>();
  while (std::getline(in, line)) {
    if (!line.empty()) s.events.push_back(CompositionEvent::from_json(json::parse(line)));
  }
  return s;
}

Session Store::append_event(const std::string& id, const CompositionEvent& event) {
  std::lock_guard lock(mutex_);
  auto s = session(id);
  s.events.push_back(event);
  write_file_atomic(root_ / "sessions" / (id + ".jsonl"), session_lines(s));
  return s;
}

}  // namespace featadv
