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

#include "pipeflow/data_plane.hpp"

#include <algorithm>

namespace pipeflow {

PartitionMap::PartitionMap(std::uint32_t num_units, std::uint32_t global_size)
    : num_units_(num_units), global_size_(global_size) {
  if (num_units == 0) throw Error(ErrorCode::kInvalidArgument, "num_units must be positive");
}

UnitId PartitionMap::unit_of(GlobalIndex row) const {
  if (row >= global_size_) {
    throw Error(ErrorCode::kBadCoordinate, "row " + std::to_string(row) + " outside global batch");
  }
  return row % num_units_;
}

std::vector<GlobalIndex> PartitionMap::rows_of(UnitId unit) const {
  std::vector<GlobalIndex> rows;
  for (GlobalIndex r = unit; r < global_size_; r += num_units_) rows.push_back(r);
  return rows;
}

StorageUnit::StorageUnit(UnitId id, Epoch epoch, std::vector<GlobalIndex> owned_rows)
    : id_(id), epoch_(epoch), owned_(owned_rows.begin(), owned_rows.end()) {}

std::size_t StorageUnit::put(const std::vector<CellEntry>& entries) {
  if (entries.empty()) return 0;
  WriteNotification note;
  std::vector<std::shared_ptr<NotificationSink>> sinks;
  {
    std::lock_guard lock(mu_);
    std::set<std::pair<GlobalIndex, std::string_view>> batch_keys;
    for (const auto& e : entries) {
      if (!owned_.contains(e.row)) {
        throw Error(ErrorCode::kNotOwnedRow, "unit " + std::to_string(id_) + " does not own row " +
                                                 std::to_string(e.row));
      }
      if (cells_.contains({e.row, e.column}) || !batch_keys.emplace(e.row, e.column).second) {
        throw Error(ErrorCode::kDuplicateWrite,
                    "cell (" + std::to_string(e.row) + ", " + e.column + ") already written");
      }
    }
    note.unit_id = id_;
    note.epoch = epoch_;
    note.coordinates.reserve(entries.size());
    for (const auto& e : entries) {
      cells_.emplace(std::make_pair(e.row, e.column), e.value);
      note.coordinates.push_back({e.row, e.column});
    }
    sinks = sinks_;
  }
  for (const auto& sink : sinks) sink->on_notify(note);
  return entries.size();
}

std::vector<CellEntry> StorageUnit::get(const std::vector<GlobalIndex>& rows,
                                        const std::vector<ColumnId>& columns) {
  std::lock_guard lock(mu_);
  std::vector<CellEntry> out;
  out.reserve(rows.size() * columns.size());
  for (GlobalIndex r : rows) {
    for (const auto& c : columns) {
      auto it = cells_.find({r, c});
      if (it == cells_.end()) {
        throw Error(ErrorCode::kMissingCell, "cell (" + std::to_string(r) + ", " + c +
                                                 ") not written on unit " + std::to_string(id_));
      }
      out.push_back({r, c, it->second});
    }
  }
  return out;
}

void StorageUnit::register_controller(std::shared_ptr<NotificationSink> sink) {
  WriteNotification snapshot;
  {
    std::lock_guard lock(mu_);
    const auto name = sink->endpoint();
    for (const auto& s : sinks_) {
      if (s->endpoint() == name) {
        throw Error(ErrorCode::kAlreadyRegistered, "controller " + name + " already registered");
      }
    }
    sinks_.push_back(sink);
    snapshot.unit_id = id_;
    snapshot.epoch = epoch_;
    for (const auto& [key, value] : cells_) snapshot.coordinates.push_back({key.first, key.second});
  }
  if (!snapshot.coordinates.empty()) sink->on_notify(snapshot);
}

void StorageUnit::reset_epoch(Epoch new_epoch, const std::vector<GlobalIndex>& owned_rows) {
  std::lock_guard lock(mu_);
  if (new_epoch <= epoch_) {
    throw Error(ErrorCode::kEpochRegression, "epoch " + std::to_string(new_epoch) +
                                                 " not after current " + std::to_string(epoch_));
  }
  epoch_ = new_epoch;
  owned_ = std::set<GlobalIndex>(owned_rows.begin(), owned_rows.end());
  cells_.clear();
}

Epoch StorageUnit::epoch() const {
  std::lock_guard lock(mu_);
  return epoch_;
}

std::size_t StorageUnit::cell_count() const {
  std::lock_guard lock(mu_);
  return cells_.size();
}

std::set<GlobalIndex> StorageUnit::owned_rows() const {
  std::lock_guard lock(mu_);
  return owned_;
}

std::vector<std::shared_ptr<StorageUnit>> make_storage_units(const PartitionMap& partition,
                                                             Epoch epoch) {
  std::vector<std::shared_ptr<StorageUnit>> units;
  for (UnitId u = 0; u < partition.num_units(); ++u) {
    units.push_back(std::make_shared<StorageUnit>(u, epoch, partition.rows_of(u)));
  }
  return units;
}

}  // namespace pipeflow
