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

#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pipeflow/client.hpp"
#include "pipeflow/coordinator.hpp"
#include "pipeflow/net.hpp"
#include "pipeflow/simulator.hpp"

namespace pipeflow::svc {

/// StorageService over the wire. register_controller() sends the sink's
/// endpoint name, which must be the controller's "host:port".
class RemoteStorage final : public StorageService {
 public:
  RemoteStorage(UnitId unit, net::Endpoint endpoint);
  UnitId unit_id() const override { return unit_; }
  std::size_t put(const std::vector<CellEntry>& entries) override;
  std::vector<CellEntry> get(const std::vector<GlobalIndex>& rows,
                             const std::vector<ColumnId>& columns) override;
  void register_controller(std::shared_ptr<NotificationSink> sink) override;
  void reset_epoch(Epoch new_epoch, const std::vector<GlobalIndex>& owned_rows) override;

 private:
  UnitId unit_;
  net::Channel channel_;
};

/// ControllerService over the wire. ready_rows() has no wire message and
/// throws kInvalidArgument.
class RemoteController final : public ControllerService {
 public:
  explicit RemoteController(net::Endpoint endpoint);
  std::string endpoint() const override { return channel_.endpoint().to_string(); }
  void on_notify(const WriteNotification& notification) override;
  std::set<GlobalIndex> ready_rows() override;
  BatchReply request_batch(const ConsumerGroupId& consumer, std::uint32_t micro_batch_size,
                           const PackingPolicy& policy) override;
  void reset_epoch(Epoch new_epoch, std::uint32_t global_size,
                   const std::vector<ColumnId>& required_columns) override;

 private:
  mutable net::Channel channel_;
};

/// Topology shared by every process of one deployment.
///
/// JSON schema:
///   {
///     "global_batch": 16,
///     "epoch": 0,
///     "log_level": "info",                       (optional)
///     "storage_units": [{"id": 0, "endpoint": "127.0.0.1:7001"}, ...],
///     "tasks": [{"name": "rollout", "inputs": ["prompt"], "outputs": ["response"],
///                "controller": "127.0.0.1:7101"}, ...],
///     "coordinator": {"endpoint": "127.0.0.1:7200", "rollout_instances": 2},
///     "scenario": {...}                          (optional, simulator schema)
///   }
/// Unit ids must be 0..n-1; task names and all endpoints must be unique.
struct RunConfig {
  std::uint32_t global_batch = 0;
  Epoch epoch = 0;
  std::string log_level = "info";
  std::vector<net::Endpoint> storage_units;  // indexed by unit id
  struct Task {
    TaskSpec spec;
    net::Endpoint controller;
  };
  std::vector<Task> tasks;
  net::Endpoint coordinator;
  std::uint32_t rollout_instances = 1;
  std::optional<sim::Scenario> scenario;

  /// Throws kConfig.
  static RunConfig parse(std::string_view json_text);
  std::string to_json() const;
  const Task& task(const std::string& name) const;
  PartitionMap partition() const;
  StorageDirectory remote_storage() const;
};

/// Serves one storage unit: PUT, GET, REGISTER, RESET.
class StorageServer {
 public:
  StorageServer(std::shared_ptr<StorageUnit> unit, net::Endpoint bind);
  void start() { server_.start(); }
  void stop() { server_.stop(); }
  net::Endpoint endpoint() const { return server_.endpoint(); }
  net::FrameServer& frames() { return server_; }
  StorageUnit& unit() { return *unit_; }

 private:
  wire::Message handle(const wire::Message& request);
  std::shared_ptr<StorageUnit> unit_;
  net::FrameServer server_;
};

/// Serves one task controller: NOTIFY, REQUEST_BATCH, RESET.
class ControllerServer {
 public:
  ControllerServer(std::shared_ptr<Controller> controller, net::Endpoint bind);
  void start();
  void stop() { server_.stop(); }
  /// Sends REGISTER to each unit; the controller receives a snapshot of any
  /// cells already written.
  void register_with(const std::vector<net::Endpoint>& storage_units);
  net::Endpoint endpoint() const { return server_.endpoint(); }
  net::FrameServer& frames() { return server_; }
  Controller& controller() { return *controller_; }

 private:
  wire::Message handle(const wire::Message& request);
  std::shared_ptr<Controller> controller_;
  net::FrameServer server_;
};

/// User-level API endpoint: PUT_PROMPTS, GET_EXPERIENCE, WEIGHT_SYNC_NOTIFY,
/// WEIGHT_SUBMIT, WEIGHT_STAGED, SWAP_REPORT.
///
/// WEIGHT_SUBMIT starts an asynchronous transfer. WEIGHT_STAGED(i, v) is
/// instance i reporting that v reached its host memory; once every instance
/// has reported, the transfer is complete. SWAP_REPORT(i, ...) is sent at a
/// generation boundary; the reply carries the version instance i runs next.
/// WEIGHT_SYNC_NOTIFY(v) submits and completes in one step.
class CoordinatorServer {
 public:
  CoordinatorServer(RunConfig config, net::Endpoint bind);
  void start() { server_.start(); }
  void stop() { server_.stop(); }
  net::Endpoint endpoint() const { return server_.endpoint(); }
  net::FrameServer& frames() { return server_; }
  WeightCoordinator& weights() { return weights_; }

 private:
  wire::Message handle(const wire::Message& request);
  Client& client_for(const ConsumerGroupId& consumer);

  RunConfig config_;
  StorageDirectory storage_;
  WeightCoordinator weights_;
  std::mutex mu_;
  std::map<ConsumerGroupId, std::unique_ptr<Client>> clients_;
  std::map<std::string, std::shared_ptr<RemoteController>> controllers_;
  std::unique_ptr<Client> loader_;
  std::optional<TransferHandle> transfer_;
  Bytes transfer_payload_;
  std::set<std::uint32_t> staged_reports_;
  net::FrameServer server_;
};

/// Client-side helpers for the user-level verbs.
std::uint64_t api_put_prompts(net::Channel& coordinator, const std::vector<Bytes>& prompts);
/// One non-blocking GET_EXPERIENCE.
wire::BatchData api_poll_experience(net::Channel& coordinator, const ConsumerGroupId& consumer,
                                    std::uint32_t micro_batch_size);
/// Polls until a batch is granted; nullopt once the epoch is exhausted.
std::optional<Batch> api_get_experience(net::Channel& coordinator, const ConsumerGroupId& consumer,
                                        std::uint32_t micro_batch_size,
                                        std::chrono::milliseconds poll_interval = std::chrono::milliseconds(50));
void api_weight_sync_notify(net::Channel& coordinator, std::uint64_t version);

}  // namespace pipeflow::svc
