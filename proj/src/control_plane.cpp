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

#include "pipeflow/control_plane.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pipeflow {

namespace {

std::uint64_t tokens_of(const PackingPolicy& policy, GlobalIndex row) {
  auto it = policy.token_counts.find(row);
  return it == policy.token_counts.end() ? 0 : it->second;
}

std::vector<GlobalIndex> pack_token_balanced(const std::set<GlobalIndex>& ready, std::size_t size,
                                             const PackingPolicy& policy,
                                             const PackingContext& context) {
  std::vector<GlobalIndex> pool(ready.begin(), ready.end());
  double total = 0.0;
  for (GlobalIndex r : pool) total += static_cast<double>(tokens_of(policy, r));
  const double share = total * static_cast<double>(size) / static_cast<double>(pool.size());
  const double deficit =
      context.mean_consumer_tokens - static_cast<double>(context.consumer_tokens);
  const double target = std::max(0.0, share + deficit);

  std::vector<GlobalIndex> picked;
  picked.reserve(size);
  // pool is ascending, so strict comparisons keep the smaller index on ties.
  auto first = pool.begin();
  const bool under_mean =
      static_cast<double>(context.consumer_tokens) <= context.mean_consumer_tokens;
  for (auto it = pool.begin(); it != pool.end(); ++it) {
    const auto t = tokens_of(policy, *it);
    const auto best = tokens_of(policy, *first);
    if (under_mean ? t > best : t < best) first = it;
  }
  double sum = static_cast<double>(tokens_of(policy, *first));
  picked.push_back(*first);
  pool.erase(first);

  while (picked.size() < size) {
    const double goal = target * static_cast<double>(picked.size() + 1) / static_cast<double>(size);
    auto best = pool.begin();
    double best_dev = std::abs(sum + static_cast<double>(tokens_of(policy, *best)) - goal);
    for (auto it = std::next(pool.begin()); it != pool.end(); ++it) {
      const double dev = std::abs(sum + static_cast<double>(tokens_of(policy, *it)) - goal);
      if (dev < best_dev) {
        best = it;
        best_dev = dev;
      }
    }
    sum += static_cast<double>(tokens_of(policy, *best));
    picked.push_back(*best);
    pool.erase(best);
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

}  // namespace

std::vector<GlobalIndex> pack_batch(const std::set<GlobalIndex>& ready, std::size_t size,
                                    const PackingPolicy& policy, const PackingContext& context) {
  if (size > ready.size()) {
    throw Error(ErrorCode::kInvalidArgument, "pack_batch: fewer ready rows than requested");
  }
  if (size == 0) return {};
  if (policy.kind == PackingKind::kTokenBalanced) {
    return pack_token_balanced(ready, size, policy, context);
  }
  return {ready.begin(), std::next(ready.begin(), static_cast<std::ptrdiff_t>(size))};
}

namespace {

std::uint32_t checked_global_size(std::uint32_t global_size) {
  if (global_size > kMaxGlobalSize) {
    throw Error(ErrorCode::kInvalidArgument, "global size " + std::to_string(global_size) + " exceeds " +
                                                 std::to_string(kMaxGlobalSize));
  }
  return global_size;
}

}  // namespace

Controller::Controller(TaskSpec task, std::uint32_t global_size, Epoch epoch, std::string endpoint)
    : task_(std::move(task)),
      endpoint_(endpoint.empty() ? "controller:" + task_.task_name : std::move(endpoint)),
      epoch_(epoch),
      global_size_(checked_global_size(global_size)),
      required_(task_.input_columns),
      status_(static_cast<std::size_t>(global_size) * required_.size(), 0),
      location_(global_size),
      consumed_(global_size) {
  task_.validate();
}

void Controller::apply_locked(const WriteNotification& notification) {
  for (const auto& c : notification.coordinates) {
    if (c.row >= global_size_) {
      throw Error(ErrorCode::kBadCoordinate, "row " + std::to_string(c.row) +
                                                 " outside global batch of " +
                                                 std::to_string(global_size_));
    }
  }
  for (const auto& c : notification.coordinates) {
    auto slot = std::find(required_.begin(), required_.end(), c.column);
    if (slot == required_.end()) continue;
    status_[c.row * required_.size() + static_cast<std::size_t>(slot - required_.begin())] = 1;
    location_[c.row] = notification.unit_id;
  }
}

void Controller::on_notify(const WriteNotification& notification) {
  std::lock_guard lock(mu_);
  if (notification.epoch < epoch_) return;
  if (notification.epoch > epoch_) {
    future_[notification.epoch].push_back(notification);
    return;
  }
  apply_locked(notification);
}

bool Controller::row_ready_locked(GlobalIndex row) const {
  const std::size_t width = required_.size();
  for (std::size_t c = 0; c < width; ++c) {
    if (status_[row * width + c] == 0) return false;
  }
  return true;
}

std::set<GlobalIndex> Controller::ready_rows_locked() const {
  std::set<GlobalIndex> out;
  for (GlobalIndex r = 0; r < global_size_; ++r) {
    if (!consumed_[r] && row_ready_locked(r)) out.insert(out.end(), r);
  }
  return out;
}

std::set<GlobalIndex> Controller::ready_rows() {
  std::lock_guard lock(mu_);
  return ready_rows_locked();
}

BatchReply Controller::request_batch(const ConsumerGroupId& consumer,
                                     std::uint32_t micro_batch_size, const PackingPolicy& policy) {
  if (consumer.task_name != task_.task_name) {
    throw Error(ErrorCode::kWrongTask, "consumer of task '" + consumer.task_name +
                                           "' asked controller of task '" + task_.task_name + "'");
  }
  if (micro_batch_size == 0) throw Error(ErrorCode::kInvalidArgument, "micro_batch_size must be >= 1");

  std::lock_guard lock(mu_);
  BatchReply reply;
  if (consumed_count_ == global_size_) {
    reply.status = BatchStatus::kEpochExhausted;
    return reply;
  }
  const auto ready = ready_rows_locked();
  std::size_t take = 0;
  if (ready.size() >= micro_batch_size) {
    take = micro_batch_size;
  } else if (!ready.empty() && ready.size() == global_size_ - consumed_count_) {
    // Every remaining row is already written; nothing else can arrive.
    take = ready.size();
  } else {
    reply.status = BatchStatus::kNotReady;
    return reply;
  }

  PackingContext context;
  if (policy.kind == PackingKind::kTokenBalanced) {
    consumer_tokens_.try_emplace(consumer.group_ordinal, 0);
    context.consumer_tokens = consumer_tokens_[consumer.group_ordinal];
    double total = 0.0;
    for (const auto& [ordinal, tokens] : consumer_tokens_) total += static_cast<double>(tokens);
    context.mean_consumer_tokens = total / static_cast<double>(consumer_tokens_.size());
  }
  auto rows = pack_batch(ready, take, policy, context);

  reply.status = BatchStatus::kGranted;
  reply.meta.epoch = epoch_;
  reply.meta.task_name = task_.task_name;
  reply.meta.columns = required_;
  reply.meta.issued_to = consumer;
  for (GlobalIndex r : rows) {
    consumed_[r] = consumer.group_ordinal;
    ++consumed_count_;
    reply.meta.locations[r] = *location_[r];
    if (policy.kind == PackingKind::kTokenBalanced) {
      consumer_tokens_[consumer.group_ordinal] += tokens_of(policy, r);
    }
  }
  reply.meta.rows = std::move(rows);
  return reply;
}

void Controller::reset_epoch(Epoch new_epoch, std::uint32_t global_size,
                             const std::vector<ColumnId>& required_columns) {
  checked_global_size(global_size);
  std::lock_guard lock(mu_);
  if (new_epoch <= epoch_) {
    throw Error(ErrorCode::kEpochRegression, "controller epoch " + std::to_string(new_epoch) +
                                                 " not after " + std::to_string(epoch_));
  }
  epoch_ = new_epoch;
  global_size_ = global_size;
  required_ = required_columns;
  status_.assign(static_cast<std::size_t>(global_size) * required_.size(), 0);
  location_.assign(global_size, std::nullopt);
  consumed_.assign(global_size, std::nullopt);
  consumed_count_ = 0;
  consumer_tokens_.clear();
  std::vector<WriteNotification> buffered;
  for (auto it = future_.begin(); it != future_.end();) {
    if (it->first < new_epoch) {
      it = future_.erase(it);
    } else if (it->first == new_epoch) {
      buffered = std::move(it->second);
      it = future_.erase(it);
    } else {
      ++it;
    }
  }
  for (const auto& n : buffered) apply_locked(n);
}

Epoch Controller::epoch() const {
  std::lock_guard lock(mu_);
  return epoch_;
}

std::uint32_t Controller::global_size() const {
  std::lock_guard lock(mu_);
  return global_size_;
}

bool Controller::status(GlobalIndex row, const ColumnId& column) const {
  std::lock_guard lock(mu_);
  auto slot = std::find(required_.begin(), required_.end(), column);
  if (row >= global_size_ || slot == required_.end()) return false;
  return status_[row * required_.size() + static_cast<std::size_t>(slot - required_.begin())] != 0;
}

std::optional<ConsumerGroupId> Controller::consumed_by(GlobalIndex row) const {
  std::lock_guard lock(mu_);
  if (row >= global_size_ || !consumed_[row]) return std::nullopt;
  return ConsumerGroupId{task_.task_name, *consumed_[row]};
}

std::size_t Controller::consumed_count() const {
  std::lock_guard lock(mu_);
  return consumed_count_;
}

bool Controller::fully_written() const {
  std::lock_guard lock(mu_);
  for (GlobalIndex r = 0; r < global_size_; ++r) {
    if (!row_ready_locked(r)) return false;
  }
  return true;
}

}  // namespace pipeflow
