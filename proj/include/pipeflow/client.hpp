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

#include <chrono>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "pipeflow/control_plane.hpp"
#include "pipeflow/data_plane.hpp"

namespace pipeflow {

/// A redeemed voucher: meta.rows x meta.columns cells, rows outer.
struct Batch {
  BatchMeta meta;
  std::vector<CellEntry> cells;

  const Bytes& cell(GlobalIndex row, const ColumnId& column) const;
  friend bool operator==(const Batch&, const Batch&) = default;
};

/// Padding-free encoding of variable-length cells: one concatenated buffer
/// plus per-cell lengths.
struct VarlenEnvelope {
  Bytes concatenated;
  std::vector<std::uint32_t> lengths;
  std::vector<Coordinate> order;

  friend bool operator==(const VarlenEnvelope&, const VarlenEnvelope&) = default;
};

VarlenEnvelope encode_varlen(const std::vector<CellEntry>& cells);
/// Throws kLengthMismatch when the lengths do not add up to the buffer size
/// or the order and length lists differ in size.
std::vector<CellEntry> decode_varlen(const VarlenEnvelope& envelope);

/// Storage units indexed by unit id.
using StorageDirectory = std::vector<std::shared_ptr<StorageService>>;

/// Result of a single non-blocking request.
struct PollResult {
  BatchStatus status = BatchStatus::kNotReady;
  std::optional<Batch> batch;
};

/// Consumer-side access for one consumer group of one task.
class Client {
 public:
  Client(TaskSpec task, std::uint32_t group_ordinal, std::shared_ptr<ControllerService> controller,
         StorageDirectory storage, PartitionMap partition);

  const TaskSpec& task() const { return task_; }
  const ConsumerGroupId& consumer() const { return consumer_; }

  /// One request to the controller; fetches the cells on a grant.
  PollResult try_next(std::uint32_t micro_batch_size, const PackingPolicy& policy);
  /// Redeems a voucher with one get() per storage unit named in it.
  Batch fetch(const BatchMeta& meta);
  /// Routes values to owning units, one put() per unit. Rejects columns the
  /// task does not produce with kInvalidColumn.
  void write_back(const std::vector<GlobalIndex>& rows, const ColumnId& column,
                  const std::vector<Bytes>& values);

  std::size_t get_calls() const { return get_calls_; }
  std::size_t put_calls() const { return put_calls_; }

 private:
  TaskSpec task_;
  ConsumerGroupId consumer_;
  std::shared_ptr<ControllerService> controller_;
  StorageDirectory storage_;
  PartitionMap partition_;
  std::size_t get_calls_ = 0;
  std::size_t put_calls_ = 0;
};

struct IteratorOptions {
  std::uint32_t micro_batch_size = 1;
  std::chrono::milliseconds poll_interval{5};
  PackingPolicy policy;
  /// Consecutive transport failures tolerated before kControllerUnreachable.
  int max_transport_retries = 3;
};

/// Streaming dataloader over one task: yields batches until the epoch is
/// exhausted. Not shareable between threads.
class StreamingBatchIterator {
 public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;

  StreamingBatchIterator(Client& client, IteratorOptions options, Sleeper sleeper = {});

  /// Blocks (polling) until a batch is granted; nullopt at end of epoch.
  std::optional<Batch> next_batch();
  std::size_t polls() const { return polls_; }

  class iterator {
   public:
    using value_type = Batch;
    using difference_type = std::ptrdiff_t;

    iterator() = default;
    explicit iterator(StreamingBatchIterator* owner) : owner_(owner) { advance(); }

    const Batch& operator*() const { return *current_; }
    const Batch* operator->() const { return &*current_; }
    iterator& operator++() {
      advance();
      return *this;
    }
    void operator++(int) { advance(); }
    friend bool operator==(const iterator& it, std::default_sentinel_t) { return !it.current_; }

   private:
    void advance() { current_ = owner_->next_batch(); }
    StreamingBatchIterator* owner_ = nullptr;
    std::optional<Batch> current_;
  };

  iterator begin() { return iterator(this); }
  std::default_sentinel_t end() { return {}; }

 private:
  Client& client_;
  IteratorOptions options_;
  Sleeper sleeper_;
  std::size_t polls_ = 0;
  bool exhausted_ = false;
};

/// A replica of a DP group that receives the leader's broadcast. deliver()
/// takes an encoded fan-out frame and returns the batch the replica decoded.
class ReplicaEndpoint {
 public:
  virtual ~ReplicaEndpoint() = default;
  virtual Batch deliver(const Bytes& frame) = 0;
};

/// In-process replica: decodes the frame and keeps the result.
class LocalReplica final : public ReplicaEndpoint {
 public:
  Batch deliver(const Bytes& frame) override;
  const std::optional<Batch>& received() const { return received_; }
  std::size_t bytes_received() const { return bytes_received_; }

 private:
  std::optional<Batch> received_;
  std::size_t bytes_received_ = 0;
};

/// Size in bytes of the fan-out frame the leader sends for `batch`.
std::size_t fanout_frame_size(const Batch& batch);

/// Leader (members[0]) already holds `batch`; it encodes one varlen frame and
/// sends it to every other member. Returns each member's batch in member
/// order. A group of one is the identity and sends nothing.
std::vector<Batch> leader_fetch_fanout(std::span<const std::shared_ptr<ReplicaEndpoint>> members,
                                       const Batch& batch);

}  // namespace pipeflow
