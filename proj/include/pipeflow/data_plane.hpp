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
#include <mutex>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "pipeflow/types.hpp"

namespace pipeflow {

struct Coordinate {
  GlobalIndex row = 0;
  ColumnId column;

  friend bool operator==(const Coordinate&, const Coordinate&) = default;
  friend auto operator<=>(const Coordinate&, const Coordinate&) = default;
};

struct CellEntry {
  GlobalIndex row = 0;
  ColumnId column;
  Bytes value;

  friend bool operator==(const CellEntry&, const CellEntry&) = default;
};

/// What a storage unit broadcasts after a successful put.
struct WriteNotification {
  UnitId unit_id = 0;
  Epoch epoch = 0;
  std::vector<Coordinate> coordinates;

  friend bool operator==(const WriteNotification&, const WriteNotification&) = default;
};

/// Receiver of write notifications (a controller, or a proxy to a remote one).
class NotificationSink {
 public:
  virtual ~NotificationSink() = default;
  /// Identity used for duplicate-registration checks ("host:port" for TCP).
  virtual std::string endpoint() const = 0;
  virtual void on_notify(const WriteNotification& notification) = 0;
};

/// Row-to-unit assignment: index mod num_units.
class PartitionMap {
 public:
  PartitionMap(std::uint32_t num_units, std::uint32_t global_size);

  std::uint32_t num_units() const { return num_units_; }
  std::uint32_t global_size() const { return global_size_; }
  UnitId unit_of(GlobalIndex row) const;
  std::vector<GlobalIndex> rows_of(UnitId unit) const;

 private:
  std::uint32_t num_units_;
  std::uint32_t global_size_;
};

/// Transport-independent view of one storage unit. StorageUnit implements it
/// in-process; RemoteStorage speaks the wire protocol.
class StorageService {
 public:
  virtual ~StorageService() = default;

  virtual UnitId unit_id() const = 0;
  /// Returns the number of cells written.
  virtual std::size_t put(const std::vector<CellEntry>& entries) = 0;
  /// Cells in (rows outer, columns inner) order.
  virtual std::vector<CellEntry> get(const std::vector<GlobalIndex>& rows,
                                     const std::vector<ColumnId>& columns) = 0;
  virtual void register_controller(std::shared_ptr<NotificationSink> sink) = 0;
  virtual void reset_epoch(Epoch new_epoch, const std::vector<GlobalIndex>& owned_rows) = 0;
};

/// In-memory shard of the columnar sample table.
///
/// Cells are write-once per epoch. A put is all-or-nothing: if any entry
/// targets a foreign row or an existing cell, nothing is written. The
/// notification for a put is dispatched after the cell lock is released.
class StorageUnit final : public StorageService {
 public:
  StorageUnit(UnitId id, Epoch epoch, std::vector<GlobalIndex> owned_rows);

  UnitId unit_id() const override { return id_; }
  std::size_t put(const std::vector<CellEntry>& entries) override;
  std::vector<CellEntry> get(const std::vector<GlobalIndex>& rows,
                             const std::vector<ColumnId>& columns) override;
  /// A sink registered after writes receives one snapshot notification
  /// covering every cell currently stored.
  void register_controller(std::shared_ptr<NotificationSink> sink) override;
  void reset_epoch(Epoch new_epoch, const std::vector<GlobalIndex>& owned_rows) override;

  Epoch epoch() const;
  std::size_t cell_count() const;
  std::set<GlobalIndex> owned_rows() const;

 private:
  UnitId id_;
  mutable std::mutex mu_;
  Epoch epoch_;
  std::set<GlobalIndex> owned_;
  std::map<std::pair<GlobalIndex, ColumnId>, Bytes> cells_;
  std::vector<std::shared_ptr<NotificationSink>> sinks_;
};

/// Builds one StorageUnit per partition for a global batch.
std::vector<std::shared_ptr<StorageUnit>> make_storage_units(const PartitionMap& partition,
                                                             Epoch epoch = 0);

}  // namespace pipeflow
