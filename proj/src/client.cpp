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

#include "pipeflow/client.hpp"

#include <map>
#include <numeric>
#include <thread>

#include "pipeflow/wire.hpp"

namespace pipeflow {

const Bytes& Batch::cell(GlobalIndex row, const ColumnId& column) const {
  for (const auto& c : cells) {
    if (c.row == row && c.column == column) return c.value;
  }
  throw Error(ErrorCode::kMissingCell, "batch has no cell (" + std::to_string(row) + ", " + column + ")");
}

VarlenEnvelope encode_varlen(const std::vector<CellEntry>& cells) {
  VarlenEnvelope env;
  std::size_t total = 0;
  for (const auto& c : cells) total += c.value.size();
  env.concatenated.reserve(total);
  env.lengths.reserve(cells.size());
  env.order.reserve(cells.size());
  for (const auto& c : cells) {
    env.concatenated.insert(env.concatenated.end(), c.value.begin(), c.value.end());
    env.lengths.push_back(static_cast<std::uint32_t>(c.value.size()));
    env.order.push_back({c.row, c.column});
  }
  return env;
}

std::vector<CellEntry> decode_varlen(const VarlenEnvelope& envelope) {
  if (envelope.lengths.size() != envelope.order.size()) {
    throw Error(ErrorCode::kLengthMismatch, "length and order lists differ in size");
  }
  const std::uint64_t sum =
      std::accumulate(envelope.lengths.begin(), envelope.lengths.end(), std::uint64_t{0});
  if (sum != envelope.concatenated.size()) {
    throw Error(ErrorCode::kLengthMismatch, "lengths sum to " + std::to_string(sum) + " but buffer has " +
                                                std::to_string(envelope.concatenated.size()) + " bytes");
  }
  std::vector<CellEntry> cells;
  cells.reserve(envelope.lengths.size());
  auto cursor = envelope.concatenated.begin();
  for (std::size_t i = 0; i < envelope.lengths.size(); ++i) {
    auto end = cursor + envelope.lengths[i];
    cells.push_back({envelope.order[i].row, envelope.order[i].column, Bytes(cursor, end)});
    cursor = end;
  }
  return cells;
}

Client::Client(TaskSpec task, std::uint32_t group_ordinal,
               std::shared_ptr<ControllerService> controller, StorageDirectory storage,
               PartitionMap partition)
    : task_(std::move(task)),
      consumer_{task_.task_name, group_ordinal},
      controller_(std::move(controller)),
      storage_(std::move(storage)),
      partition_(partition) {
  if (storage_.size() != partition_.num_units()) {
    throw Error(ErrorCode::kInvalidArgument, "storage directory size does not match partition map");
  }
}

PollResult Client::try_next(std::uint32_t micro_batch_size, const PackingPolicy& policy) {
  auto reply = controller_->request_batch(consumer_, micro_batch_size, policy);
  PollResult out{reply.status, std::nullopt};
  if (reply.granted()) out.batch = fetch(reply.meta);
  return out;
}

Batch Client::fetch(const BatchMeta& meta) {
  std::map<UnitId, std::vector<GlobalIndex>> by_unit;
  for (GlobalIndex r : meta.rows) {
    auto it = meta.locations.find(r);
    if (it == meta.locations.end()) {
      throw Error(ErrorCode::kFetchInconsistent, "voucher has no location for row " + std::to_string(r));
    }
    by_unit[it->second].push_back(r);
  }
  std::map<std::pair<GlobalIndex, ColumnId>, Bytes> fetched;
  for (const auto& [unit, rows] : by_unit) {
    if (unit >= storage_.size()) {
      throw Error(ErrorCode::kFetchInconsistent, "voucher names unknown unit " + std::to_string(unit));
    }
    std::vector<CellEntry> cells;
    try {
      ++get_calls_;
      cells = storage_[unit]->get(rows, meta.columns);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kMissingCell) throw;
      throw Error(ErrorCode::kFetchInconsistent, std::string("storage missing a granted cell: ") + e.what());
    }
    for (auto& c : cells) fetched.emplace(std::make_pair(c.row, std::move(c.column)), std::move(c.value));
  }
  Batch batch;
  batch.meta = meta;
  batch.cells.reserve(meta.rows.size() * meta.columns.size());
  for (GlobalIndex r : meta.rows) {
    for (const auto& c : meta.columns) {
      auto it = fetched.find({r, c});
      if (it == fetched.end()) {
        throw Error(ErrorCode::kFetchInconsistent, "storage reply lacks (" + std::to_string(r) + ", " + c + ")");
      }
      batch.cells.push_back({r, c, it->second});
    }
  }
  return batch;
}

void Client::write_back(const std::vector<GlobalIndex>& rows, const ColumnId& column,
                        const std::vector<Bytes>& values) {
  if (!task_.writes(column)) {
    throw Error(ErrorCode::kInvalidColumn,
                "task " + task_.task_name + " does not produce column '" + column + "'");
  }
  if (rows.size() != values.size()) {
    throw Error(ErrorCode::kSizeMismatch, "write_back: rows and values differ in length");
  }
  std::map<UnitId, std::vector<CellEntry>> by_unit;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    by_unit[partition_.unit_of(rows[i])].push_back({rows[i], column, values[i]});
  }
  for (const auto& [unit, entries] : by_unit) {
    ++put_calls_;
    storage_[unit]->put(entries);
  }
}

StreamingBatchIterator::StreamingBatchIterator(Client& client, IteratorOptions options,
                                               Sleeper sleeper)
    : client_(client), options_(std::move(options)), sleeper_(std::move(sleeper)) {
  if (!sleeper_) sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

std::optional<Batch> StreamingBatchIterator::next_batch() {
  if (exhausted_) return std::nullopt;
  int transport_failures = 0;
  while (true) {
    PollResult result;
    try {
      ++polls_;
      result = client_.try_next(options_.micro_batch_size, options_.policy);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kTransport) throw;
      if (++transport_failures > options_.max_transport_retries) {
        throw Error(ErrorCode::kControllerUnreachable,
                    std::string("controller unreachable after retries: ") + e.what());
      }
      sleeper_(options_.poll_interval);
      continue;
    }
    transport_failures = 0;
    switch (result.status) {
      case BatchStatus::kGranted: return std::move(result.batch);
      case BatchStatus::kEpochExhausted: exhausted_ = true; return std::nullopt;
      case BatchStatus::kNotReady: sleeper_(options_.poll_interval); break;
    }
  }
}

Batch LocalReplica::deliver(const Bytes& frame) {
  bytes_received_ += frame.size();
  auto message = wire::decode(frame);
  auto* fan = std::get_if<wire::Fanout>(&message);
  if (fan == nullptr) throw Error(ErrorCode::kProtocol, "replica expected a FANOUT frame");
  Batch b{fan->meta, decode_varlen(fan->envelope)};
  received_ = b;
  return b;
}

std::size_t fanout_frame_size(const Batch& batch) {
  return wire::encode(wire::Fanout{batch.meta, encode_varlen(batch.cells)}).size();
}

std::vector<Batch> leader_fetch_fanout(std::span<const std::shared_ptr<ReplicaEndpoint>> members,
                                       const Batch& batch) {
  if (members.empty()) throw Error(ErrorCode::kInvalidArgument, "fan-out group is empty");
  std::vector<Batch> out;
  out.reserve(members.size());
  out.push_back(batch);
  if (members.size() == 1) return out;
  const Bytes frame = wire::encode(wire::Fanout{batch.meta, encode_varlen(batch.cells)});
  for (std::size_t i = 1; i < members.size(); ++i) {
    try {
      out.push_back(members[i]->deliver(frame));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kTransport) throw;
      throw Error(ErrorCode::kMemberUnreachable,
                  "group member " + std::to_string(i) + " unreachable: " + e.what());
    }
  }
  return out;
}

}  // namespace pipeflow
