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

#include "pipeflow/coordinator.hpp"

#include <algorithm>

namespace pipeflow {

WeightCoordinator::WeightCoordinator(TransferMode mode, std::uint32_t num_instances) : mode_(mode) {
  if (num_instances == 0) throw Error(ErrorCode::kInvalidArgument, "need at least one rollout instance");
  instances_.resize(num_instances);
  for (std::uint32_t i = 0; i < num_instances; ++i) instances_[i].instance_id = i;
}

void WeightCoordinator::check_instance(std::uint32_t instance) const {
  if (instance >= instances_.size()) {
    throw Error(ErrorCode::kInvalidArgument, "unknown rollout instance " + std::to_string(instance));
  }
}

TransferHandle WeightCoordinator::submit_weights(WeightVersion version, Bytes payload) {
  std::unique_lock lock(mu_);
  if (last_submitted_ && version <= *last_submitted_) {
    throw Error(ErrorCode::kStaleSubmission, "version " + std::to_string(version.value) +
                                                 " not after last submitted " +
                                                 std::to_string(last_submitted_->value));
  }
  if (mode_ == TransferMode::kAsynchronous) {
    if (in_flight_) {
      throw Error(ErrorCode::kChannelBusy, "version " + std::to_string(in_flight_->version.value) +
                                               " still in flight");
    }
    last_submitted_ = version;
    in_flight_ = StagedWeights{version, std::move(payload)};
    return {version};
  }

  last_submitted_ = version;
  for (auto& inst : instances_) {
    if (inst.active_version >= version) continue;
    if (inst.generating) {
      stage_locked(inst.instance_id, version, payload);
    } else {
      inst.active_version = version;
      inst.staged.reset();
    }
  }
  cv_.notify_all();
  cv_.wait(lock, [&] {
    return std::all_of(instances_.begin(), instances_.end(),
                       [&](const auto& i) { return i.active_version >= version; });
  });
  return {version};
}

void WeightCoordinator::complete_transfer(const TransferHandle& handle) {
  std::lock_guard lock(mu_);
  if (!in_flight_ || in_flight_->version != handle.version) {
    throw Error(ErrorCode::kInvalidArgument,
                "no transfer of version " + std::to_string(handle.version.value) + " in flight");
  }
  auto weights = std::move(*in_flight_);
  in_flight_.reset();
  for (auto& inst : instances_) {
    const bool newer_staged = inst.staged && inst.staged->version >= weights.version;
    if (inst.active_version < weights.version && !newer_staged) {
      stage_locked(inst.instance_id, weights.version, weights.payload);
    }
  }
  cv_.notify_all();
}

std::optional<WeightVersion> WeightCoordinator::in_flight() const {
  std::lock_guard lock(mu_);
  if (!in_flight_) return std::nullopt;
  return in_flight_->version;
}

std::optional<WeightVersion> WeightCoordinator::last_submitted() const {
  std::lock_guard lock(mu_);
  return last_submitted_;
}

void WeightCoordinator::stage_locked(std::uint32_t instance, WeightVersion version,
                                     const Bytes& payload) {
  auto& inst = instances_[instance];
  if (version <= inst.active_version || (inst.staged && version <= inst.staged->version)) {
    throw Error(ErrorCode::kVersionRegression,
                "instance " + std::to_string(instance) + ": version " + std::to_string(version.value) +
                    " is not newer than active/staged weights");
  }
  inst.staged = StagedWeights{version, payload};
}

void WeightCoordinator::stage_weights(std::uint32_t instance, WeightVersion version, Bytes payload) {
  std::lock_guard lock(mu_);
  check_instance(instance);
  stage_locked(instance, version, payload);
}

void WeightCoordinator::begin_generation(std::uint32_t instance) {
  std::lock_guard lock(mu_);
  check_instance(instance);
  instances_[instance].generating = true;
}

SwapResult WeightCoordinator::maybe_swap(std::uint32_t instance) {
  std::lock_guard lock(mu_);
  check_instance(instance);
  auto& inst = instances_[instance];
  inst.generating = false;
  SwapResult result{false, inst.active_version};
  if (inst.staged) {
    inst.active_version = inst.staged->version;
    inst.staged.reset();
    result = {true, inst.active_version};
    if (staggered_ && staggered_->updating.erase(instance) > 0) refill_staggered_locked();
  }
  cv_.notify_all();
  return result;
}

void WeightCoordinator::refill_staggered_locked() {
  auto& st = *staggered_;
  while (st.updating.size() < st.limit && !st.pending.empty()) {
    const auto next = st.pending.front();
    st.pending.pop_front();
    if (instances_[next].active_version >= st.version) continue;
    instances_[next].staged = StagedWeights{st.version, st.payload};
    st.updating.insert(next);
  }
  staggered_peak_ = std::max(staggered_peak_, static_cast<std::uint32_t>(st.updating.size()));
  if (st.updating.empty() && st.pending.empty()) staggered_.reset();
}

void WeightCoordinator::begin_staggered(WeightVersion version, Bytes payload,
                                        std::uint32_t concurrency_limit) {
  std::lock_guard lock(mu_);
  if (concurrency_limit < 1 || concurrency_limit >= instances_.size()) {
    throw Error(ErrorCode::kInvalidArgument,
                "staggered update needs 1 <= k < instances (k=" + std::to_string(concurrency_limit) +
                    ", instances=" + std::to_string(instances_.size()) + ")");
  }
  if (staggered_ && version <= staggered_->version) {
    throw Error(ErrorCode::kVersionRegression, "staggered update to an older version");
  }
  Staggered st{version, std::move(payload), concurrency_limit, {}, {}};
  if (staggered_) {
    // Latest wins: windows already open are upgraded in place.
    for (auto i : staggered_->updating) {
      instances_[i].staged = StagedWeights{version, st.payload};
      st.updating.insert(i);
    }
  }
  for (const auto& inst : instances_) {
    if (inst.active_version < version && !st.updating.contains(inst.instance_id)) {
      st.pending.push_back(inst.instance_id);
    }
  }
  staggered_ = std::move(st);
  refill_staggered_locked();
}

bool WeightCoordinator::staggered_in_progress() const {
  std::lock_guard lock(mu_);
  return staggered_.has_value();
}

std::uint32_t WeightCoordinator::staggered_peak() const {
  std::lock_guard lock(mu_);
  return staggered_peak_;
}

RolloutInstanceState WeightCoordinator::instance(std::uint32_t instance) const {
  std::lock_guard lock(mu_);
  check_instance(instance);
  return instances_[instance];
}

bool WeightCoordinator::wait_all_at(WeightVersion version, std::chrono::milliseconds timeout) const {
  std::unique_lock lock(mu_);
  return cv_.wait_for(lock, timeout, [&] {
    return std::all_of(instances_.begin(), instances_.end(),
                       [&](const auto& i) { return i.active_version >= version; });
  });
}

StalenessTracker::StalenessTracker(StalenessBound bound, RejectPolicy policy)
    : bound_(bound), policy_(policy) {}

void StalenessTracker::set_trainer_version(WeightVersion version) {
  if (version < trainer_version_) {
    throw Error(ErrorCode::kVersionRegression, "trainer version moved backwards");
  }
  trainer_version_ = version;
}

void StalenessTracker::record_sample(GlobalIndex row, WeightVersion data_version) {
  data_versions_[row] = data_version;
}

std::optional<WeightVersion> StalenessTracker::data_version(GlobalIndex row) const {
  auto it = data_versions_.find(row);
  if (it == data_versions_.end()) return std::nullopt;
  return it->second;
}

Admission StalenessTracker::admit_sample(WeightVersion sample_version) const {
  if (sample_version >= trainer_version_) return Admission::kAdmit;
  return trainer_version_.value - sample_version.value <= bound_.s ? Admission::kAdmit
                                                                   : Admission::kReject;
}

Admission StalenessTracker::consume(GlobalIndex row) {
  auto version = data_version(row);
  if (!version) {
    throw Error(ErrorCode::kInvalidArgument, "no data version recorded for row " + std::to_string(row));
  }
  const auto verdict = admit_sample(*version);
  if (verdict == Admission::kAdmit) {
    const auto gap = *version >= trainer_version_ ? 0 : trainer_version_.value - version->value;
    ++histogram_[gap];
    ++admitted_;
  } else if (policy_ == RejectPolicy::kDrop) {
    ++dropped_;
  } else {
    ++dropped_;
    discard_.push_back(row);
  }
  return verdict;
}

std::uint64_t StalenessTracker::max_observed_gap() const {
  return histogram_.empty() ? 0 : histogram_.rbegin()->first;
}

}  // namespace pipeflow
