// Copyright 2026 The Pipeflow Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "pipeflow/services.hpp"

#include <spdlog/spdlog.h>

#include <nlohmann/json.hpp>
#include <set>
#include <thread>

namespace pipeflow::svc {

namespace {

using nlohmann::json;

template <typename T>
T expect(wire::Message reply, std::string_view verb) {
  if (auto* v = std::get_if<T>(&reply)) return std::move(*v);
  throw Error(ErrorCode::kProtocol, std::string(verb) + ": unexpected reply " +
                                        std::string(wire::kind_name(wire::kind_of(reply))));
}

[[noreturn]] void unsupported(const wire::Message& request, std::string_view server) {
  throw Error(ErrorCode::kProtocol, std::string(server) + " does not serve " +
                                        std::string(wire::kind_name(wire::kind_of(request))));
}

/// Storage-side proxy for a remote controller. Delivery is retried with a
/// fresh connection; persistent failure surfaces as kControllerUnreachable
/// to the writer whose put triggered it.
class RemoteNotificationSink final : public NotificationSink {
 public:
  explicit RemoteNotificationSink(net::Endpoint endpoint) : channel_(std::move(endpoint)) {}
  std::string endpoint() const override { return channel_.endpoint().to_string(); }
  void on_notify(const WriteNotification& notification) override {
    constexpr int kAttempts = 3;
    for (int attempt = 1;; ++attempt) {
      try {
        expect<wire::Ack>(channel_.call(wire::NotifyRequest{notification}), "NOTIFY");
        return;
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kTransport) throw;
        spdlog::warn("notify {} failed (attempt {}): {}", endpoint(), attempt, e.what());
        if (attempt == kAttempts) {
          throw Error(ErrorCode::kControllerUnreachable, "controller " + endpoint() + ": " + e.what());
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(20 * attempt));
      }
    }
  }

 private:
  mutable net::Channel channel_;
};

std::vector<std::string> string_list(const json& j, const char* key) {
  if (!j.contains(key)) return {};
  std::vector<std::string> out;
  for (const auto& v : j.at(key)) out.push_back(v.get<std::string>());
  return out;
}

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!j.is_object()) throw Error(ErrorCode::kConfig, where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw Error(ErrorCode::kConfig, "unknown key '" + key + "' in " + where);
    }
  }
}

}  // namespace

RemoteStorage::RemoteStorage(UnitId unit, net::Endpoint endpoint) : unit_(unit), channel_(std::move(endpoint)) {}

std::size_t RemoteStorage::put(const std::vector<CellEntry>& entries) {
  return expect<wire::PutAck>(channel_.call(wire::PutRequest{entries}), "PUT").count;
}

std::vector<CellEntry> RemoteStorage::get(const std::vector<GlobalIndex>& rows,
                                          const std::vector<ColumnId>& columns) {
  return expect<wire::GetReply>(channel_.call(wire::GetRequest{rows, columns}), "GET").cells;
}

void RemoteStorage::register_controller(std::shared_ptr<NotificationSink> sink) {
  expect<wire::Ack>(channel_.call(wire::RegisterRequest{sink->endpoint()}), "REGISTER");
}

void RemoteStorage::reset_epoch(Epoch new_epoch, const std::vector<GlobalIndex>& owned_rows) {
  expect<wire::Ack>(channel_.call(wire::ResetRequest{new_epoch, 0, owned_rows, {}}), "RESET");
}

RemoteController::RemoteController(net::Endpoint endpoint) : channel_(std::move(endpoint)) {}

void RemoteController::on_notify(const WriteNotification& notification) {
  expect<wire::Ack>(channel_.call(wire::NotifyRequest{notification}), "NOTIFY");
}

std::set<GlobalIndex> RemoteController::ready_rows() {
  throw Error(ErrorCode::kInvalidArgument, "ready_rows is not available over the wire");
}

BatchReply RemoteController::request_batch(const ConsumerGroupId& consumer, std::uint32_t micro_batch_size,
                                           const PackingPolicy& policy) {
  return expect<wire::BatchReplyMessage>(
             channel_.call(wire::RequestBatch{consumer, micro_batch_size, policy}), "REQUEST_BATCH")
      .reply;
}

void RemoteController::reset_epoch(Epoch new_epoch, std::uint32_t global_size,
                                   const std::vector<ColumnId>& required_columns) {
  expect<wire::Ack>(channel_.call(wire::ResetRequest{new_epoch, global_size, {}, required_columns}), "RESET");
}

RunConfig RunConfig::parse(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("run config is not valid JSON: ") + e.what());
  }
  RunConfig cfg;
  try {
    check_keys(j, {"global_batch", "epoch", "log_level", "storage_units", "tasks", "coordinator", "scenario"},
               "run config");
    cfg.global_batch = j.at("global_batch").get<std::uint32_t>();
    cfg.epoch = j.value("epoch", Epoch{0});
    cfg.log_level = j.value("log_level", std::string("info"));

    std::map<std::uint32_t, net::Endpoint> units;
    for (const auto& u : j.at("storage_units")) {
      check_keys(u, {"id", "endpoint"}, "storage unit");
      const auto id = u.at("id").get<std::uint32_t>();
      if (!units.emplace(id, net::Endpoint::parse(u.at("endpoint").get<std::string>())).second) {
        throw Error(ErrorCode::kConfig, "duplicate storage unit id " + std::to_string(id));
      }
    }
    for (std::uint32_t id = 0; id < units.size(); ++id) {
      if (!units.count(id)) throw Error(ErrorCode::kConfig, "storage unit ids must be 0..n-1");
      cfg.storage_units.push_back(units.at(id));
    }

    for (const auto& t : j.at("tasks")) {
      check_keys(t, {"name", "inputs", "outputs", "controller"}, "task");
      Task task;
      task.spec = {t.at("name").get<std::string>(), string_list(t, "inputs"), string_list(t, "outputs")};
      task.controller = net::Endpoint::parse(t.at("controller").get<std::string>());
      try {
        task.spec.validate();
      } catch (const Error& e) {
        throw Error(ErrorCode::kConfig, e.what());
      }
      cfg.tasks.push_back(std::move(task));
    }

    const auto& c = j.at("coordinator");
    check_keys(c, {"endpoint", "rollout_instances"}, "coordinator");
    cfg.coordinator = net::Endpoint::parse(c.at("endpoint").get<std::string>());
    cfg.rollout_instances = c.value("rollout_instances", 1u);
    if (j.contains("scenario")) cfg.scenario = sim::scenario_from_json(j.at("scenario").dump());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("run config: ") + e.what());
  }

  if (cfg.global_batch == 0 || cfg.global_batch > kMaxGlobalSize) {
    throw Error(ErrorCode::kConfig, "global_batch must be in [1, " + std::to_string(kMaxGlobalSize) + "]");
  }
  if (cfg.storage_units.empty()) throw Error(ErrorCode::kConfig, "at least one storage unit is required");
  if (cfg.storage_units.size() > cfg.global_batch) {
    throw Error(ErrorCode::kConfig, "more storage units than rows");
  }
  if (cfg.rollout_instances == 0) throw Error(ErrorCode::kConfig, "rollout_instances must be > 0");
  static const std::set<std::string> levels{"trace", "debug", "info", "warn", "error", "critical", "off"};
  if (!levels.count(cfg.log_level)) throw Error(ErrorCode::kConfig, "unknown log_level " + cfg.log_level);

  std::set<std::string> names;
  std::set<std::string> endpoints{cfg.coordinator.to_string()};
  auto unique_endpoint = [&](const net::Endpoint& ep) {
    if (!endpoints.insert(ep.to_string()).second) {
      throw Error(ErrorCode::kConfig, "endpoint " + ep.to_string() + " used twice");
    }
  };
  for (const auto& ep : cfg.storage_units) unique_endpoint(ep);
  for (const auto& t : cfg.tasks) {
    if (!names.insert(t.spec.task_name).second) {
      throw Error(ErrorCode::kConfig, "task " + t.spec.task_name + " defined twice");
    }
    unique_endpoint(t.controller);
  }
  return cfg;
}

std::string RunConfig::to_json() const {
  json j;
  j["global_batch"] = global_batch;
  j["epoch"] = epoch;
  j["log_level"] = log_level;
  j["storage_units"] = json::array();
  for (std::size_t i = 0; i < storage_units.size(); ++i) {
    j["storage_units"].push_back({{"id", i}, {"endpoint", storage_units[i].to_string()}});
  }
  j["tasks"] = json::array();
  for (const auto& t : tasks) {
    j["tasks"].push_back({{"name", t.spec.task_name},
                          {"inputs", t.spec.input_columns},
                          {"outputs", t.spec.output_columns},
                          {"controller", t.controller.to_string()}});
  }
  j["coordinator"] = {{"endpoint", coordinator.to_string()}, {"rollout_instances", rollout_instances}};
  if (scenario) j["scenario"] = json::parse(sim::scenario_to_json(*scenario));
  return j.dump(2);
}

const RunConfig::Task& RunConfig::task(const std::string& name) const {
  for (const auto& t : tasks) {
    if (t.spec.task_name == name) return t;
  }
  throw Error(ErrorCode::kWrongTask, "no task named " + name);
}

PartitionMap RunConfig::partition() const {
  return PartitionMap(static_cast<std::uint32_t>(storage_units.size()), global_batch);
}

StorageDirectory RunConfig::remote_storage() const {
  StorageDirectory dir;
  for (std::size_t i = 0; i < storage_units.size(); ++i) {
    dir.push_back(std::make_shared<RemoteStorage>(static_cast<UnitId>(i), storage_units[i]));
  }
  return dir;
}

StorageServer::StorageServer(std::shared_ptr<StorageUnit> unit, net::Endpoint bind)
    : unit_(std::move(unit)), server_(std::move(bind), [this](const wire::Message& m) { return handle(m); }) {}

wire::Message StorageServer::handle(const wire::Message& request) {
  if (auto* put = std::get_if<wire::PutRequest>(&request)) {
    return wire::PutAck{unit_->put(put->entries)};
  }
  if (auto* get = std::get_if<wire::GetRequest>(&request)) {
    return wire::GetReply{unit_->get(get->rows, get->columns)};
  }
  if (auto* reg = std::get_if<wire::RegisterRequest>(&request)) {
    unit_->register_controller(std::make_shared<RemoteNotificationSink>(net::Endpoint::parse(reg->endpoint)));
    spdlog::info("unit {}: registered controller {}", unit_->unit_id(), reg->endpoint);
    return wire::Ack{};
  }
  if (auto* reset = std::get_if<wire::ResetRequest>(&request)) {
    unit_->reset_epoch(reset->epoch, reset->owned_rows);
    spdlog::info("unit {}: epoch {}", unit_->unit_id(), reset->epoch);
    return wire::Ack{};
  }
  unsupported(request, "storage unit");
}

ControllerServer::ControllerServer(std::shared_ptr<Controller> controller, net::Endpoint bind)
    : controller_(std::move(controller)),
      server_(std::move(bind), [this](const wire::Message& m) { return handle(m); }) {}

void ControllerServer::start() { server_.start(); }

void ControllerServer::register_with(const std::vector<net::Endpoint>& storage_units) {
  auto self = server_.endpoint();
  for (std::size_t i = 0; i < storage_units.size(); ++i) {
    net::Channel channel(storage_units[i]);
    expect<wire::Ack>(channel.call(wire::RegisterRequest{self.to_string()}), "REGISTER");
  }
}

wire::Message ControllerServer::handle(const wire::Message& request) {
  if (auto* notify = std::get_if<wire::NotifyRequest>(&request)) {
    controller_->on_notify(notify->notification);
    return wire::Ack{};
  }
  if (auto* req = std::get_if<wire::RequestBatch>(&request)) {
    if (req->consumer.task_name != controller_->task().task_name) {
      throw Error(ErrorCode::kWrongTask, "controller serves " + controller_->task().task_name + ", not " +
                                             req->consumer.task_name);
    }
    return wire::BatchReplyMessage{controller_->request_batch(req->consumer, req->micro_batch_size, req->policy)};
  }
  if (auto* reset = std::get_if<wire::ResetRequest>(&request)) {
    controller_->reset_epoch(reset->epoch, reset->global_size, reset->columns);
    spdlog::info("controller {}: epoch {}", controller_->task().task_name, reset->epoch);
    return wire::Ack{};
  }
  unsupported(request, "controller");
}

CoordinatorServer::CoordinatorServer(RunConfig config, net::Endpoint bind)
    : config_(std::move(config)),
      storage_(config_.remote_storage()),
      weights_(TransferMode::kAsynchronous, config_.rollout_instances),
      server_(std::move(bind), [this](const wire::Message& m) { return handle(m); }) {
  for (const auto& t : config_.tasks) {
    controllers_[t.spec.task_name] = std::make_shared<RemoteController>(t.controller);
  }
  // Prompts are written by a producer-only task; it needs no controller.
  loader_ = std::make_unique<Client>(TaskSpec{"loader", {}, {"prompt"}}, 0, nullptr, storage_,
                                     config_.partition());
}

Client& CoordinatorServer::client_for(const ConsumerGroupId& consumer) {
  auto it = clients_.find(consumer);
  if (it == clients_.end()) {
    const auto& task = config_.task(consumer.task_name);
    it = clients_
             .emplace(consumer, std::make_unique<Client>(task.spec, consumer.group_ordinal,
                                                         controllers_.at(consumer.task_name), storage_,
                                                         config_.partition()))
             .first;
  }
  return *it->second;
}

wire::Message CoordinatorServer::handle(const wire::Message& request) {
  std::lock_guard lock(mu_);
  if (auto* put = std::get_if<wire::PutPrompts>(&request)) {
    if (put->prompts.size() != config_.global_batch) {
      throw Error(ErrorCode::kSizeMismatch, std::to_string(put->prompts.size()) + " prompts for global batch " +
                                                std::to_string(config_.global_batch));
    }
    std::vector<GlobalIndex> rows(put->prompts.size());
    for (GlobalIndex i = 0; i < rows.size(); ++i) rows[i] = i;
    loader_->write_back(rows, "prompt", put->prompts);
    spdlog::info("put {} prompts", rows.size());
    return wire::PutAck{rows.size()};
  }
  if (auto* get = std::get_if<wire::GetExperience>(&request)) {
    auto polled = client_for(get->consumer).try_next(get->micro_batch_size, PackingPolicy::fifo());
    return wire::BatchData{polled.status, std::move(polled.batch)};
  }
  if (auto* sync = std::get_if<wire::WeightSyncNotify>(&request)) {
    auto handle = weights_.submit_weights({sync->version}, {});
    weights_.complete_transfer(handle);
    staged_reports_.clear();
    spdlog::info("weights v{} staged on all instances", sync->version);
    return wire::Ack{};
  }
  if (auto* submit = std::get_if<wire::WeightSubmit>(&request)) {
    transfer_ = weights_.submit_weights({submit->version}, submit->payload);
    staged_reports_.clear();
    return wire::Ack{};
  }
  if (auto* staged = std::get_if<wire::WeightStaged>(&request)) {
    if (!transfer_ || transfer_->version.value != staged->version) {
      throw Error(ErrorCode::kInvalidArgument, "no transfer of version " + std::to_string(staged->version) +
                                                   " in flight");
    }
    if (staged->instance >= weights_.num_instances()) {
      throw Error(ErrorCode::kInvalidArgument, "unknown rollout instance " + std::to_string(staged->instance));
    }
    staged_reports_.insert(staged->instance);
    if (staged_reports_.size() == weights_.num_instances()) {
      weights_.complete_transfer(*transfer_);
      transfer_.reset();
      staged_reports_.clear();
    }
    return wire::Ack{};
  }
  if (auto* swap = std::get_if<wire::SwapReport>(&request)) {
    const auto result = weights_.maybe_swap(swap->instance);
    weights_.begin_generation(swap->instance);
    return wire::SwapReport{swap->instance, result.new_version.value, result.swapped};
  }
  unsupported(request, "coordinator");
}

std::uint64_t api_put_prompts(net::Channel& coordinator, const std::vector<Bytes>& prompts) {
  return expect<wire::PutAck>(coordinator.call(wire::PutPrompts{prompts}), "PUT_PROMPTS").count;
}

wire::BatchData api_poll_experience(net::Channel& coordinator, const ConsumerGroupId& consumer,
                                    std::uint32_t micro_batch_size) {
  return expect<wire::BatchData>(coordinator.call(wire::GetExperience{consumer, micro_batch_size}),
                                 "GET_EXPERIENCE");
}

std::optional<Batch> api_get_experience(net::Channel& coordinator, const ConsumerGroupId& consumer,
                                        std::uint32_t micro_batch_size, std::chrono::milliseconds poll_interval) {
  for (;;) {
    auto data = api_poll_experience(coordinator, consumer, micro_batch_size);
    if (data.status == BatchStatus::kGranted) return std::move(data.batch);
    if (data.status == BatchStatus::kEpochExhausted) return std::nullopt;
    std::this_thread::sleep_for(poll_interval);
  }
}

void api_weight_sync_notify(net::Channel& coordinator, std::uint64_t version) {
  expect<wire::Ack>(coordinator.call(wire::WeightSyncNotify{version}), "WEIGHT_SYNC_NOTIFY");
}

}  // namespace pipeflow::svc
