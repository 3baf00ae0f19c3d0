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
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "pipeflow/data_plane.hpp"
#include "pipeflow/types.hpp"

namespace pipeflow {

enum class PackingKind : std::uint8_t { kFifo = 0, kTokenBalanced = 1 };

/// Load-balancing policy for assembling a micro-batch from ready rows.
struct PackingPolicy {
  PackingKind kind = PackingKind::kFifo;
  /// Only meaningful for kTokenBalanced; rows without an entry count as 0.
  std::map<GlobalIndex, std::uint64_t> token_counts;

  static PackingPolicy fifo() { return {}; }
  static PackingPolicy token_balanced(std::map<GlobalIndex, std::uint64_t> counts) {
    return {PackingKind::kTokenBalanced, std::move(counts)};
  }

  friend bool operator==(const PackingPolicy&, const PackingPolicy&) = default;
};

/// Voucher issued by a controller; redeemed against storage units.
struct BatchMeta {
  Epoch epoch = 0;
  std::string task_name;
  std::vector<GlobalIndex> rows;
  std::vector<ColumnId> columns;
  std::map<GlobalIndex, UnitId> locations;
  ConsumerGroupId issued_to;

  friend bool operator==(const BatchMeta&, const BatchMeta&) = default;
};

enum class BatchStatus : std::uint8_t { kGranted = 0, kNotReady = 1, kEpochExhausted = 2 };

struct BatchReply {
  BatchStatus status = BatchStatus::kNotReady;
  BatchMeta meta;  // set iff status == kGranted

  bool granted() const { return status == BatchStatus::kGranted; }
  friend bool operator==(const BatchReply&, const BatchReply&) = default;
};

/// Per-consumer running totals used by the token-balanced rule.
struct PackingContext {
  std::uint64_t consumer_tokens = 0;
  double mean_consumer_tokens = 0.0;
};

/// Selects `size` rows out of `ready` (|ready| >= size) and returns them in
/// ascending order.
///
/// fifo: the `size` smallest indices.
/// token_balanced: greedy. The batch target is the ready-token share of one
/// batch plus the consumer's deficit against the task mean. The first pick is
/// the largest-token row when the consumer is at or below the mean, otherwise
/// the smallest. Each further pick minimises the distance between the running
/// sum and the proportional target. Ties go to the smaller index.
std::vector<GlobalIndex> pack_batch(const std::set<GlobalIndex>& ready, std::size_t size,
                                    const PackingPolicy& policy, const PackingContext& context = {});

/// Control-plane view of one task's controller, independent of transport.
class ControllerService : public NotificationSink {
 public:
  virtual std::set<GlobalIndex> ready_rows() = 0;
  virtual BatchReply request_batch(const ConsumerGroupId& consumer, std::uint32_t micro_batch_size,
                                   const PackingPolicy& policy) = 0;
  virtual void reset_epoch(Epoch new_epoch, std::uint32_t global_size,
                           const std::vector<ColumnId>& required_columns) = 0;
};

/// Per-task controller: readiness matrix, row locations and the consumption
/// ledger for one epoch. All operations are serialized by one mutex.
///
/// Notifications for a future epoch are buffered and applied on reset_epoch;
/// notifications for a past epoch are dropped.
class Controller final : public ControllerService {
 public:
  Controller(TaskSpec task, std::uint32_t global_size, Epoch epoch = 0, std::string endpoint = {});

  std::string endpoint() const override { return endpoint_; }
  void on_notify(const WriteNotification& notification) override;
  std::set<GlobalIndex> ready_rows() override;
  BatchReply request_batch(const ConsumerGroupId& consumer, std::uint32_t micro_batch_size,
                           const PackingPolicy& policy) override;
  void reset_epoch(Epoch new_epoch, std::uint32_t global_size,
                   const std::vector<ColumnId>& required_columns) override;

  const TaskSpec& task() const { return task_; }
  Epoch epoch() const;
  std::uint32_t global_size() const;
  bool status(GlobalIndex row, const ColumnId& column) const;
  std::optional<ConsumerGroupId> consumed_by(GlobalIndex row) const;
  std::size_t consumed_count() const;
  /// True once every row has every required column written.
  bool fully_written() const;

 private:
  void apply_locked(const WriteNotification& notification);
  bool row_ready_locked(GlobalIndex row) const;
  std::set<GlobalIndex> ready_rows_locked() const;

  TaskSpec task_;
  std::string endpoint_;
  mutable std::mutex mu_;
  Epoch epoch_;
  std::uint32_t global_size_;
  std::vector<ColumnId> required_;
  // status_[row * |required| + column_slot]
  std::vector<std::uint8_t> status_;
  std::vector<std::optional<UnitId>> location_;
  std::vector<std::optional<std::uint32_t>> consumed_;
  std::size_t consumed_count_ = 0;
  std::map<std::uint32_t, std::uint64_t> consumer_tokens_;
  std::map<Epoch, std::vector<WriteNotification>> future_;
};

}  // namespace pipeflow
